//! Experiment orchestration: configuration files with a canonical hash,
//! teacher training, seeded distillation runs with on-disk artifacts,
//! ablation grids, and deterministic SVG charts.
//!
//! Every run directory receives a config snapshot, a manifest, the CSV logs,
//! and parameter checkpoints. Reruns with the same seed produce byte
//! identical CSVs and checkpoints; manifests carry wall-clock timestamps and
//! are excluded from that guarantee. Grid cells run serially.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::distill::{train, write_track_csv, write_train_csv, TrainConfig};
use crate::metrics::frechet_gaussian_distance;
use crate::ndgrad::{grad, AdamW, ParamVector, Tensor};
use crate::nets::{load_params, save_params, NetConfig, VelocityNet};
use crate::samplers::{dense_grid, euler_sample};
use crate::schedules::{make_path, Schedule, DEFAULT_T_MIN};
use crate::{Error, Result};

/// Forward-process choice plus its free parameters, as written in config
/// files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleConfig {
    FmOt {
        #[serde(default = "default_t_min")]
        t_min: f64,
    },
    Ddpm {
        beta_min: f64,
        beta_max: f64,
    },
}

fn default_t_min() -> f64 {
    DEFAULT_T_MIN
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        match *self {
            ScheduleConfig::FmOt { t_min } => Schedule::fm_ot_with_t_min(t_min),
            ScheduleConfig::Ddpm { beta_min, beta_max } => {
                Schedule::ddpm_linear(beta_min, beta_max)
            }
        }
    }
}

/// One experiment: a dataset, a forward schedule, the network shape shared
/// by teacher and students, the distillation settings, the teacher budget,
/// the evaluation cadence, and the seeds to sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub teacher_iters: usize,
    pub teacher_lr: f64,
    pub teacher_batch: usize,
    /// Iterations between metric snapshots, applied to every run.
    pub eval_every: usize,
    pub out_dir: String,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig::benchmark()
    }
}

impl ExperimentConfig {
    /// The 8-mode circle benchmark at the default budget.
    pub fn benchmark() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::eight_mode_circle(),
            schedule: ScheduleConfig::FmOt { t_min: DEFAULT_T_MIN },
            net: NetConfig {
                width: 96,
                depth: 3,
                time_embed_dim: 16,
                cond_embed_dim: 8,
                n_conditions: 8,
            },
            train: TrainConfig::default(),
            teacher_iters: 20_000,
            teacher_lr: 3e-4,
            teacher_batch: 256,
            eval_every: 50,
            out_dir: "runs".to_string(),
            seeds: vec![0, 1, 2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.net.validate()?;
        self.train.validate()?;
        self.schedule.build()?;
        if self.net.n_conditions != self.dataset.n_conditions() {
            return Err(Error::contract(
                "ExperimentConfig::validate",
                format!(
                    "network supports {} conditions but the dataset has {}",
                    self.net.n_conditions,
                    self.dataset.n_conditions()
                ),
            ));
        }
        if self.seeds.is_empty() {
            return Err(Error::contract(
                "ExperimentConfig::validate",
                "seed list must be nonempty".to_string(),
            ));
        }
        if self.eval_every == 0 {
            return Err(Error::contract(
                "ExperimentConfig::validate",
                "eval_every must be at least 1".to_string(),
            ));
        }
        if self.teacher_batch < 2 {
            return Err(Error::contract(
                "ExperimentConfig::validate",
                format!("teacher batch must be at least 2, got {}", self.teacher_batch),
            ));
        }
        if !(self.teacher_lr > 0.0 && self.teacher_lr.is_finite()) {
            return Err(Error::contract(
                "ExperimentConfig::validate",
                format!("teacher learning rate must be positive, got {}", self.teacher_lr),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        fs::write(path, text)?;
        Ok(())
    }

    /// FNV-1a hash of the canonical rendering, so two files with reordered
    /// keys for the same experiment hash identically.
    pub fn config_hash(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::Parse {
            path: "<config>".to_string(),
            msg: e.to_string(),
        })?;
        let mut canon = String::new();
        canonical_value(&value, &mut canon);
        Ok(format!("{:016x}", fnv1a64(canon.as_bytes())))
    }
}

/// Renders a toml value with sorted table keys, LF separators, and
/// round-trip float formatting, for hashing only.
fn canonical_value(v: &toml::Value, out: &mut String) {
    match v {
        toml::Value::Table(t) => {
            out.push('{');
            let mut keys: Vec<&String> = t.keys().collect();
            keys.sort();
            for k in keys {
                out.push_str(&format!("{k:?}="));
                canonical_value(&t[k], out);
                out.push('\n');
            }
            out.push('}');
        }
        toml::Value::Array(a) => {
            out.push('[');
            for item in a {
                canonical_value(item, out);
                out.push('\n');
            }
            out.push(']');
        }
        toml::Value::String(s) => out.push_str(&format!("{s:?}")),
        toml::Value::Integer(i) => out.push_str(&i.to_string()),
        toml::Value::Float(f) => out.push_str(&format!("{f:?}")),
        toml::Value::Boolean(b) => out.push_str(&b.to_string()),
        toml::Value::Datetime(d) => out.push_str(&d.to_string()),
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedOutput {
    pub seed: u64,
    pub path: String,
}

/// Provenance sidecar written next to every run's artifacts. Timestamps are
/// wall clock and therefore outside the determinism guarantee.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub seed_outputs: Vec<SeedOutput>,
}

impl RunManifest {
    /// Stamps a manifest for a run that started at `started_unix` and is
    /// finishing now.
    pub fn for_run(
        cfg: &ExperimentConfig,
        started_unix: u64,
        seed_outputs: Vec<SeedOutput>,
    ) -> Result<Self> {
        Ok(RunManifest {
            config_hash: cfg.config_hash()?,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix,
            finished_unix: now_unix(),
            seed_outputs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        fs::write(path, text)?;
        Ok(())
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Seconds since the Unix epoch, for manifest timestamps.
pub fn unix_now() -> u64 {
    now_unix()
}

/// Creates `dir`, refusing to clobber an existing non-empty directory unless
/// `overwrite` is set, in which case the old contents are removed.
pub fn prepare_run_dir(dir: &Path, overwrite: bool) -> Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty {
            if !overwrite {
                return Err(Error::contract(
                    "prepare_run_dir",
                    format!(
                        "{} already contains a run; pass --overwrite to replace it",
                        dir.display()
                    ),
                ));
            }
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn standard_matrix<R: Rng>(n: usize, rng: &mut R) -> Result<Tensor> {
    Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

#[derive(Clone, Debug)]
pub struct TeacherReport {
    pub iters: usize,
    pub fd_to_data: f64,
    pub checkpoint: PathBuf,
}

/// Trains the teacher by velocity regression along straight noising paths,
/// with per-row uniform times, and saves its checkpoint plus a one-row
/// report CSV into `out_dir`. A zero iteration budget saves the
/// initialization unchanged.
pub fn train_teacher(
    cfg: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<(VelocityNet, TeacherReport)> {
    cfg.validate()?;
    let schedule = cfg.schedule.build()?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
    init_rng.set_stream(1);
    let mut net = VelocityNet::new(cfg.net, &mut init_rng)?;
    let mut opt = AdamW::new(net.params().len());

    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    data_rng.set_stream(2);

    let net_cfg = cfg.net;
    for k in 0..cfg.teacher_iters {
        let (x0, conds) = cfg.dataset.sample_batch(cfg.teacher_batch, &mut data_rng)?;
        let mut val = 0.0;
        let (_, g) = {
            let rng_ref = &mut data_rng;
            let val_out = &mut val;
            let schedule_ref = &schedule;
            grad(
                |tape, params| {
                    let n = x0.rows();
                    let mut ts = Vec::with_capacity(n);
                    let mut xt = Vec::with_capacity(2 * n);
                    let mut v_target = Vec::with_capacity(2 * n);
                    for i in 0..n {
                        let u: f64 = rng_ref.gen();
                        let t = schedule_ref.t_min()
                            + (schedule_ref.t_max() - schedule_ref.t_min()) * u;
                        let row = Tensor::matrix(1, 2, vec![x0.row(i)[0], x0.row(i)[1]])?;
                        let path = make_path(schedule_ref, &row, t, rng_ref)?;
                        ts.push(t);
                        xt.extend_from_slice(path.xt.row(0));
                        v_target.extend_from_slice(path.v_target.row(0));
                    }
                    let xt = tape.constant(Tensor::matrix(n, 2, xt)?);
                    let v = VelocityNet::forward_tape(&net_cfg, tape, params, xt, &ts, &conds)?;
                    let target = tape.constant(Tensor::matrix(n, 2, v_target)?);
                    let diff = tape.sub(v, target)?;
                    let sq = tape.square(diff)?;
                    let row = tape.row_sum(sq)?;
                    let loss = tape.mean_all(row)?;
                    *val_out = tape.value(loss).data()[0];
                    Ok(loss)
                },
                net.params(),
            )?
        };
        if !val.is_finite() || val.abs() > 1e6 {
            return Err(Error::numeric(
                "train_teacher",
                format!("denoising loss diverged at iteration {}: {val}", k + 1),
            ));
        }
        opt.step(net.params_mut(), &g, cfg.teacher_lr)?;
    }

    fs::create_dir_all(out_dir)?;
    let checkpoint = out_dir.join("teacher.params");
    save_params(&checkpoint, net.params())?;

    let mut eval_rng = ChaCha8Rng::seed_from_u64(seed);
    eval_rng.set_stream(3);
    let n_eval = 4096;
    let (x_data, conds_eval) = cfg.dataset.sample_batch(n_eval, &mut eval_rng)?;
    let z = standard_matrix(n_eval, &mut eval_rng)?;
    let samples = euler_sample(&net, &dense_grid(32)?, &z, &conds_eval)?;
    let fd_to_data = frechet_gaussian_distance(&samples, &x_data)?;

    let report = TeacherReport { iters: cfg.teacher_iters, fd_to_data, checkpoint };
    fs::write(
        out_dir.join("teacher.csv"),
        format!("# schema=1\niters,fd_to_data\n{},{}\n", report.iters, report.fd_to_data),
    )?;
    Ok((net, report))
}

/// Loads a teacher checkpoint saved by [`train_teacher`].
pub fn load_teacher(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<VelocityNet> {
    if !checkpoint.exists() {
        return Err(Error::contract(
            "load_teacher",
            format!("{} not found; run train-teacher first", checkpoint.display()),
        ));
    }
    let params = load_params(checkpoint)?;
    VelocityNet::from_params(cfg.net, params)
}

#[derive(Clone, Debug)]
pub struct DistillRunSummary {
    pub seed: u64,
    pub terminal_fd: f64,
    pub trailing_fd_std: f64,
    /// Every metric snapshot as (iteration, distance to teacher samples).
    pub fd_at: Vec<(usize, f64)>,
    pub dir: PathBuf,
}

fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (xs.len() - 1) as f64;
    var.sqrt()
}

/// One seeded distillation run. Writes the config snapshot, manifest, CSV
/// logs, and checkpoints into `dir` and summarizes the distance curve. The
/// trailing spread is the sample standard deviation of the snapshots in the
/// last quarter of training; fewer than two snapshots there give zero.
pub fn run_distill(
    cfg: &ExperimentConfig,
    teacher: &VelocityNet,
    seed: u64,
    dir: &Path,
    overwrite: bool,
) -> Result<DistillRunSummary> {
    cfg.validate()?;
    prepare_run_dir(dir, overwrite)?;
    let started = now_unix();

    let mut snapshot = cfg.clone();
    snapshot.train.seed = seed;
    snapshot.train.eval_every = cfg.eval_every;
    snapshot.out_dir = dir.display().to_string();
    let schedule = cfg.schedule.build()?;

    let out = train(&snapshot.train, teacher, &cfg.dataset, &schedule, Some(dir))?;
    write_train_csv(&out.log, snapshot.train.ttur_f, &dir.join("train.csv"))?;
    write_track_csv(&out.log, snapshot.train.ttur_f, &dir.join("track.csv"))?;
    snapshot.save(&dir.join("config.toml"))?;

    let manifest = RunManifest {
        config_hash: snapshot.config_hash()?,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix: started,
        finished_unix: now_unix(),
        seed_outputs: vec![SeedOutput { seed, path: dir.display().to_string() }],
    };
    manifest.save(&dir.join("manifest.toml"))?;

    let fd_at: Vec<(usize, f64)> = out.log.evals.iter().map(|e| (e.iter, e.fd)).collect();
    let terminal_fd = fd_at.last().map(|&(_, fd)| fd).unwrap_or(f64::NAN);
    let cut = snapshot.train.iters - snapshot.train.iters / 4;
    let window: Vec<f64> =
        fd_at.iter().filter(|&&(it, _)| it > cut).map(|&(_, fd)| fd).collect();
    Ok(DistillRunSummary {
        seed,
        terminal_fd,
        trailing_fd_std: sample_std(&window),
        fd_at,
        dir: dir.to_path_buf(),
    })
}

#[derive(Clone, Debug)]
pub struct IdaTturCell {
    pub ttur: usize,
    pub ida: bool,
    pub seed: u64,
    pub terminal_fd: f64,
    pub trailing_fd_std: f64,
}

/// Update-ratio grid with alignment on and off, every seed in the config.
/// The off setting is the blend factor pinned to 1, so a config that already
/// uses 1 produces bit-identical on and off cells. Writes one run directory
/// per cell plus `summary.csv` under `out`.
pub fn run_ablation_ida_ttur(
    cfg: &ExperimentConfig,
    teacher: &VelocityNet,
    out: &Path,
    overwrite: bool,
) -> Result<Vec<IdaTturCell>> {
    cfg.validate()?;
    prepare_run_dir(out, overwrite)?;
    let mut cells = Vec::new();
    for &ttur in &[5usize, 10, 20] {
        for &ida in &[true, false] {
            for &seed in &cfg.seeds {
                let mut sub = cfg.clone();
                sub.train.ttur_f = ttur;
                sub.train.lambda_ida = if ida { cfg.train.lambda_ida } else { 1.0 };
                let cell = format!("ttur-{ttur}-ida-{}", if ida { "on" } else { "off" });
                let dir = out.join(&cell).join(format!("seed-{seed}"));
                let summary = run_distill(&sub, teacher, seed, &dir, false)?;
                cells.push(IdaTturCell {
                    ttur,
                    ida,
                    seed,
                    terminal_fd: summary.terminal_fd,
                    trailing_fd_std: summary.trailing_fd_std,
                });
            }
        }
    }
    let mut csv = String::from("# schema=1\nttur,ida,seed,terminal_fd,trailing_fd_std\n");
    for c in &cells {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            c.ttur,
            if c.ida { "on" } else { "off" },
            c.seed,
            c.terminal_fd,
            c.trailing_fd_std
        ));
    }
    fs::write(out.join("summary.csv"), csv)?;
    Ok(cells)
}

#[derive(Clone, Debug)]
pub struct IsgRow {
    pub isg: bool,
    pub seed: u64,
    pub checkpoint_pct: usize,
    pub iter: usize,
    pub fd: f64,
}

/// Guidance on/off comparison, recording the distance to teacher samples at
/// 10%, 25%, 50%, and 100% of training. The checkpoint iterations must be
/// multiples of the evaluation cadence so a snapshot exists at each.
pub fn run_ablation_isg(
    cfg: &ExperimentConfig,
    teacher: &VelocityNet,
    out: &Path,
    overwrite: bool,
) -> Result<Vec<IsgRow>> {
    cfg.validate()?;
    let pcts = [10usize, 25, 50, 100];
    let checkpoints: Vec<usize> = pcts.iter().map(|p| cfg.train.iters * p / 100).collect();
    for (&p, &c) in pcts.iter().zip(&checkpoints) {
        if c == 0 || c % cfg.eval_every != 0 {
            return Err(Error::contract(
                "run_ablation_isg",
                format!(
                    "the {p}% checkpoint lands on iteration {c}, which is not a positive \
                     multiple of eval_every = {}",
                    cfg.eval_every
                ),
            ));
        }
    }
    prepare_run_dir(out, overwrite)?;
    let mut rows = Vec::new();
    for &isg in &[true, false] {
        for &seed in &cfg.seeds {
            let mut sub = cfg.clone();
            sub.train.lambda_isg = if isg { cfg.train.lambda_isg } else { 0.0 };
            let cell = format!("isg-{}", if isg { "on" } else { "off" });
            let dir = out.join(&cell).join(format!("seed-{seed}"));
            let summary = run_distill(&sub, teacher, seed, &dir, false)?;
            for (&p, &c) in pcts.iter().zip(&checkpoints) {
                let fd = summary
                    .fd_at
                    .iter()
                    .find(|&&(it, _)| it == c)
                    .map(|&(_, fd)| fd)
                    .ok_or_else(|| {
                        Error::contract(
                            "run_ablation_isg",
                            format!("no snapshot at iteration {c} in {}", dir.display()),
                        )
                    })?;
                rows.push(IsgRow { isg, seed, checkpoint_pct: p, iter: c, fd });
            }
        }
    }
    let mut csv = String::from("# schema=1\nisg,seed,checkpoint_pct,iter,fd\n");
    for r in &rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            if r.isg { "on" } else { "off" },
            r.seed,
            r.checkpoint_pct,
            r.iter,
            r.fd
        ));
    }
    fs::write(out.join("summary.csv"), csv)?;
    Ok(rows)
}

/// A parsed CSV with a `# schema=` comment line, a header, and float cells.
pub struct CsvTable {
    path: String,
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
}

pub fn read_csv(path: &Path) -> Result<CsvTable> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header_line = lines.next().ok_or_else(|| Error::Parse {
        path: path.display().to_string(),
        msg: "missing header line".to_string(),
    })?;
    let header: Vec<String> = header_line.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<f64> = line
            .split(',')
            .map(|c| {
                c.trim().parse::<f64>().map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    msg: format!("row {}: {e}", i + 1),
                })
            })
            .collect::<Result<_>>()?;
        if cells.len() != header.len() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                msg: format!(
                    "row {} has {} cells but the header has {} columns",
                    i + 1,
                    cells.len(),
                    header.len()
                ),
            });
        }
        rows.push(cells);
    }
    Ok(CsvTable { path: path.display().to_string(), header, rows })
}

impl CsvTable {
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.header.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
            path: self.path.clone(),
            msg: format!("missing column {name}"),
        })?;
        Ok(self.rows.iter().map(|r| r[idx]).collect())
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Axis range covering every finite value with a small symmetric margin. An
/// empty or all-equal input still produces a nonzero span.
pub fn padded_range<I: IntoIterator<Item = f64>>(values: I) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        if v.is_finite() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    if lo > hi {
        return (0.0, 1.0);
    }
    let span = if hi > lo { hi - lo } else { 1.0 };
    (lo - 0.04 * span, hi + 0.04 * span)
}

pub struct ChartSeries {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if !(1e-3..1e5).contains(&a) {
        return format!("{v:e}");
    }
    let s = format!("{v:.4}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Renders a line chart as a standalone SVG string. Output is a pure
/// function of the inputs. Non-finite points are dropped; axis ranges cover
/// every remaining point.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[ChartSeries]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const ML: f64 = 64.0;
    const MR: f64 = 18.0;
    const MT: f64 = 36.0;
    const MB: f64 = 48.0;
    const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

    let finite = |s: &ChartSeries| {
        s.points
            .iter()
            .copied()
            .filter(|&(x, y)| x.is_finite() && y.is_finite())
            .collect::<Vec<_>>()
    };
    let kept: Vec<Vec<(f64, f64)>> = series.iter().map(finite).collect();
    let (x_lo, x_hi) = padded_range(kept.iter().flatten().map(|&(x, _)| x));
    let (y_lo, y_hi) = padded_range(kept.iter().flatten().map(|&(_, y)| y));
    let px = |x: f64| ML + (x - x_lo) / (x_hi - x_lo) * (W - ML - MR);
    let py = |y: f64| H - MB - (y - y_lo) / (y_hi - y_lo) * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        W / 2.0
    ));

    for i in 0..5 {
        let xv = x_lo + (x_hi - x_lo) * i as f64 / 4.0;
        let yv = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let gx = px(xv);
        let gy = py(yv);
        svg.push_str(&format!(
            "<line x1=\"{gx:.2}\" y1=\"{:.2}\" x2=\"{gx:.2}\" y2=\"{:.2}\" \
             stroke=\"#e5e5e5\"/>\n",
            py(y_lo),
            py(y_hi)
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{gy:.2}\" x2=\"{:.2}\" y2=\"{gy:.2}\" \
             stroke=\"#e5e5e5\"/>\n",
            px(x_lo),
            px(x_hi)
        ));
        svg.push_str(&format!(
            "<text x=\"{gx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 18.0,
            fmt_tick(xv)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{}</text>\n",
            ML - 8.0,
            gy + 4.0,
            fmt_tick(yv)
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{ML:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#333333\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    svg.push_str(&format!(
        "<line x1=\"{ML:.2}\" y1=\"{MT:.2}\" x2=\"{ML:.2}\" y2=\"{:.2}\" stroke=\"#333333\"/>\n",
        H - MB
    ));
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{x_label}</text>\n",
        (ML + W - MR) / 2.0,
        H - 10.0
    ));
    svg.push_str(&format!("<text x=\"6\" y=\"{:.2}\">{y_label}</text>\n", MT - 14.0));

    for (si, points) in kept.iter().enumerate() {
        if points.is_empty() {
            continue;
        }
        let color = PALETTE[si % PALETTE.len()];
        let coords: Vec<String> =
            points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            coords.join(" ")
        ));
    }
    if series.len() > 1 {
        for (si, s) in series.iter().enumerate() {
            let color = PALETTE[si % PALETTE.len()];
            let ly = MT + 14.0 * si as f64;
            svg.push_str(&format!(
                "<line x1=\"{:.2}\" y1=\"{ly:.2}\" x2=\"{:.2}\" y2=\"{ly:.2}\" \
                 stroke=\"{color}\" stroke-width=\"2\"/>\n",
                W - MR - 110.0,
                W - MR - 90.0
            ));
            svg.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
                W - MR - 84.0,
                ly + 4.0,
                s.name
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Renders charts for whichever of the known CSVs exist in `run_dir`:
/// `train.csv` (distance to teacher over iterations), `xi.csv` (prediction
/// error profile over time), and `slack.csv` (inequality slack per round).
/// A present CSV missing a needed column is a schema error naming the
/// column; a header-only CSV yields axes with no series.
pub fn emit_charts(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();

    let train_csv = run_dir.join("train.csv");
    if train_csv.exists() {
        let table = read_csv(&train_csv)?;
        let xs = table.column("iter")?;
        let ys = table.column("fd_to_teacher")?;
        let series = [ChartSeries {
            name: "fd".to_string(),
            points: xs.into_iter().zip(ys).collect(),
        }];
        let svg = line_chart("distance to teacher samples", "iteration", "fd", &series);
        let path = run_dir.join("fd_vs_iter.svg");
        fs::write(&path, svg)?;
        written.push(path);
    }

    let xi_csv = run_dir.join("xi.csv");
    if xi_csv.exists() {
        let table = read_csv(&xi_csv)?;
        let xs = table.column("t")?;
        let ys = table.column("xi")?;
        let series = [ChartSeries {
            name: "xi".to_string(),
            points: xs.into_iter().zip(ys).collect(),
        }];
        let svg = line_chart("normalized prediction error profile", "t", "xi", &series);
        let path = run_dir.join("xi_vs_t.svg");
        fs::write(&path, svg)?;
        written.push(path);
    }

    let slack_csv = run_dir.join("slack.csv");
    if slack_csv.exists() {
        let table = read_csv(&slack_csv)?;
        let ks = table.column("k")?;
        let names = ["slack_distance", "slack_field", "slack_tracking"];
        let mut series = Vec::new();
        for name in names {
            let ys = table.column(name)?;
            series.push(ChartSeries {
                name: name.to_string(),
                points: ks.iter().copied().zip(ys).collect(),
            });
        }
        let svg = line_chart("one-step inequality slack", "round", "slack", &series);
        let path = run_dir.join("slack_vs_k.svg");
        fs::write(&path, svg)?;
        written.push(path);
    }

    if written.is_empty() {
        return Err(Error::contract(
            "emit_charts",
            format!("no train.csv, xi.csv, or slack.csv in {}", run_dir.display()),
        ));
    }
    Ok(written)
}

/// Reconstructs the teacher initialization without training, for tests that
/// compare a zero-budget checkpoint against it.
pub fn teacher_init(cfg: &ExperimentConfig, seed: u64) -> Result<ParamVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Ok(VelocityNet::new(cfg.net, &mut rng)?.params().clone())
}

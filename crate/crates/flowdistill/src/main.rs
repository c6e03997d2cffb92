//! Command-line driver: teacher training, seeded distillation runs,
//! sampling, evaluation, the time-profile and theory checks, ablation
//! grids, and chart rendering.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 numeric
//! failure, 4 a reported check failed its threshold.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use flowdistill::harness::{
    emit_charts, load_teacher, prepare_run_dir, run_ablation_ida_ttur, run_ablation_isg,
    run_distill, train_teacher, unix_now, ExperimentConfig, RunManifest, SeedOutput,
};
use flowdistill::metrics::{frechet_gaussian_distance, xi_profile_raw};
use flowdistill::ndgrad::Tensor;
use flowdistill::nets::{load_params, VelocityNet};
use flowdistill::samplers::{dense_grid, euler_sample, stochastic_anchor_sample, CoarseGrid};
use flowdistill::theorylab::{
    calibrate_c, check_recursions, epsilon_bound_check, random_world, sandwich_check,
    scripted_gaussian_trace, theory_t_grid, ScriptedTraceConfig,
};
use flowdistill::{Error, Result};

#[derive(Parser)]
#[command(
    name = "flowdistill",
    version,
    about = "Distills a flow-matching teacher into a few-step generator on 2D benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file; the built-in benchmark when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override; the first configured seed when omitted.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; the configured directory when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing run directories.
    #[arg(long)]
    overwrite: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the teacher and save its checkpoint under <out>/teacher.
    TrainTeacher(Common),
    /// Distill the teacher into a few-step generator for one seed.
    Distill(Common),
    /// Draw samples from a distilled generator into its run directory.
    Sample(Common),
    /// Report generator distances to teacher samples and data.
    Eval(Common),
    /// Profile the teacher's prediction error across time.
    ProfileXi(Common),
    /// Check the tracking inequalities and KL bounds on analytic worlds.
    VerifyTheory(Common),
    /// Run the update-ratio grid with alignment on and off.
    AblateIdaTtur(Common),
    /// Run the guidance on/off early-dynamics comparison.
    AblateIsg(Common),
    /// Render SVG charts from a run directory's CSV files (--out names the
    /// run directory).
    Charts(Common),
}

fn load_cfg(c: &Common) -> Result<ExperimentConfig> {
    match &c.config {
        Some(p) => ExperimentConfig::load(p),
        None => {
            let cfg = ExperimentConfig::benchmark();
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn pick_seed(cfg: &ExperimentConfig, c: &Common) -> u64 {
    c.seed.unwrap_or(cfg.seeds[0])
}

fn out_root(cfg: &ExperimentConfig, c: &Common) -> PathBuf {
    c.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir))
}

fn teacher_checkpoint(root: &Path) -> PathBuf {
    root.join("teacher").join("teacher.params")
}

fn distill_dir(root: &Path, seed: u64) -> PathBuf {
    root.join("distill").join(format!("seed-{seed}"))
}

fn load_generator(cfg: &ExperimentConfig, run_dir: &Path) -> Result<VelocityNet> {
    let path = run_dir.join("generator_final.params");
    if !path.exists() {
        return Err(Error::contract(
            "load_generator",
            format!("{} not found; run distill first", path.display()),
        ));
    }
    VelocityNet::from_params(cfg.net, load_params(&path)?)
}

fn standard_matrix<R: Rng>(n: usize, rng: &mut R) -> Result<Tensor> {
    Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

fn cmd_train_teacher(c: Common) -> Result<u8> {
    let cfg = load_cfg(&c)?;
    let seed = pick_seed(&cfg, &c);
    let dir = out_root(&cfg, &c).join("teacher");
    prepare_run_dir(&dir, c.overwrite)?;
    let started = unix_now();
    let (_, report) = train_teacher(&cfg, seed, &dir)?;
    cfg.save(&dir.join("config.toml"))?;
    let manifest = RunManifest::for_run(
        &cfg,
        started,
        vec![SeedOutput { seed, path: dir.display().to_string() }],
    )?;
    manifest.save(&dir.join("manifest.toml"))?;
    println!("teacher: {} iterations, fd to data = {:.6}", report.iters, report.fd_to_data);
    println!("checkpoint: {}", report.checkpoint.display());
    Ok(0)
}

fn cmd_distill(c: Common) -> Result<u8> {
    let cfg = load_cfg(&c)?;
    let seed = pick_seed(&cfg, &c);
    let root = out_root(&cfg, &c);
    let teacher = load_teacher(&cfg, &teacher_checkpoint(&root))?;
    let dir = distill_dir(&root, seed);
    let summary = run_distill(&cfg, &teacher, seed, &dir, c.overwrite)?;
    println!(
        "distill seed {seed}: terminal fd = {:.6}, trailing fd std = {:.6}",
        summary.terminal_fd, summary.trailing_fd_std
    );
    println!("run directory: {}", summary.dir.display());
    Ok(0)
}

fn cmd_sample(c: Common) -> Result<u8> {
    let cfg = load_cfg(&c)?;
    let seed = pick_seed(&cfg, &c);
    let root = out_root(&cfg, &c);
    let dir = distill_dir(&root, seed);
    let generator = load_generator(&cfg, &dir)?;
    let grid = CoarseGrid::new(cfg.train.anchors.clone())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(20);
    let n = 1024;
    let (_, conds) = cfg.dataset.sample_batch(n, &mut rng)?;
    let z = standard_matrix(n, &mut rng)?;
    let x = stochastic_anchor_sample(&generator, &grid, &z, &conds, &mut rng)?;

    let mut csv = String::from("# schema=1\nx,y,cond\n");
    for i in 0..n {
        csv.push_str(&format!("{},{},{}\n", x.row(i)[0], x.row(i)[1], conds[i]));
    }
    let path = dir.join("samples.csv");
    std::fs::write(&path, csv)?;
    println!("wrote {n} samples to {}", path.display());
    Ok(0)
}

fn cmd_eval(c: Common) -> Result<u8> {
    let cfg = load_cfg(&c)?;
    let seed = pick_seed(&cfg, &c);
    let root = out_root(&cfg, &c);
    let dir = distill_dir(&root, seed);
    let teacher = load_teacher(&cfg, &teacher_checkpoint(&root))?;
    let generator = load_generator(&cfg, &dir)?;
    let grid = CoarseGrid::new(cfg.train.anchors.clone())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(21);
    let n = 2048;
    let (x_data, conds) = cfg.dataset.sample_batch(n, &mut rng)?;
    let z_gen = standard_matrix(n, &mut rng)?;
    let x_gen = stochastic_anchor_sample(&generator, &grid, &z_gen, &conds, &mut rng)?;
    let z_teacher = standard_matrix(n, &mut rng)?;
    let x_teacher = euler_sample(&teacher, &dense_grid(32)?, &z_teacher, &conds)?;

    let fd_teacher = frechet_gaussian_distance(&x_gen, &x_teacher)?;
    let fd_data = frechet_gaussian_distance(&x_gen, &x_data)?;
    std::fs::write(
        dir.join("eval.csv"),
        format!("# schema=1\nfd_to_teacher,fd_to_data\n{fd_teacher},{fd_data}\n"),
    )?;
    println!("fd to teacher samples = {fd_teacher:.6}");
    println!("fd to data            = {fd_data:.6}");
    let pass = fd_teacher < 0.15 && fd_data < 0.2;
    println!("quality thresholds (0.15 / 0.2): {}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { 0 } else { 4 })
}

fn cmd_profile_xi(c: Common) -> Result<u8> {
    let cfg = load_cfg(&c)?;
    let seed = pick_seed(&cfg, &c);
    let root = out_root(&cfg, &c);
    let teacher = load_teacher(&cfg, &teacher_checkpoint(&root))?;
    let schedule = cfg.schedule.build()?;

    let pts = 48;
    let t_grid: Vec<f64> = (0..pts)
        .map(|i| {
            schedule.t_min() + (schedule.t_max() - schedule.t_min()) * i as f64 / (pts - 1) as f64
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(22);
    let raw = xi_profile_raw(&teacher, &schedule, &cfg.dataset, &t_grid, 4096, &mut rng)?;
    let max = raw.iter().map(|&(_, v)| v).fold(0.0f64, f64::max);
    if !(max > 0.0) {
        return Err(Error::numeric("profile-xi", format!("curve maximum {max} not positive")));
    }

    let mut csv = String::from("# schema=1\nt,xi_raw,xi\n");
    for &(t, v) in &raw {
        csv.push_str(&format!("{},{},{}\n", t, v, v / max));
    }
    let path = root.join("teacher").join("xi.csv");
    std::fs::write(&path, csv)?;

    let floor = raw[0].1 / max;
    let (arg_t, _) =
        raw.iter().fold((raw[0].0, 0.0), |acc, &(t, v)| if v > acc.1 { (t, v) } else { acc });
    println!("xi({:.4}) = {floor:.6} normalized, peak at t = {arg_t:.4}", raw[0].0);
    println!("profile written to {}", path.display());
    let pass = floor < 0.02;
    println!("floor threshold (0.02): {}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { 0 } else { 4 })
}

fn cmd_verify_theory(c: Common) -> Result<u8> {
    let cfg = load_cfg(&c)?;
    let seed = pick_seed(&cfg, &c);
    let root = out_root(&cfg, &c);
    let schedule = cfg.schedule.build()?;
    let t_grid = theory_t_grid(&schedule);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(23);
    let c_est = calibrate_c(&schedule, &t_grid, 50, &mut rng)?;
    let mut eps_holds = 0usize;
    for _ in 0..100 {
        let world = random_world(&mut rng)?;
        if epsilon_bound_check(&world, &schedule, &t_grid, c_est)?.holds {
            eps_holds += 1;
        }
    }

    let mut sandwich_ok = 0usize;
    for _ in 0..20 {
        let world = random_world(&mut rng)?;
        let eps = epsilon_bound_check(&world, &schedule, &t_grid, c_est)?.eps;
        let s = sandwich_check(&world, &schedule, &t_grid, eps, 20_000, &mut rng)?;
        if s.two_route_ok && s.lower_ok && s.upper_ok {
            sandwich_ok += 1;
        }
    }

    let trace_cfg = ScriptedTraceConfig {
        theta0: [2.5, -1.5],
        phi0: [2.8, -1.1],
        bias_theta: [0.05, -0.03],
        bias_phi0: [0.12, 0.04],
        teacher_mean: [0.0, 0.0],
        lambda: cfg.train.lambda_ida,
        step0: 0.3,
        decay: 0.9,
        rounds: 60,
        c_estimate: c_est,
    };
    let (records, constants) = scripted_gaussian_trace(&trace_cfg, &schedule)?;
    let report = check_recursions(&records, trace_cfg.lambda, &constants)?;

    let dir = root.join("theory");
    prepare_run_dir(&dir, c.overwrite)?;
    let mut csv = String::from("# schema=1\nk,slack_distance,slack_field,slack_tracking\n");
    for r in &report.per_round {
        csv.push_str(&format!("{},{},{},{}\n", r.k, r.slack[0], r.slack[1], r.slack[2]));
    }
    std::fs::write(dir.join("slack.csv"), csv)?;

    println!("calibrated kl/gap constant = {c_est:.4}");
    println!("kl bound held on {eps_holds}/100 held-out worlds");
    println!("two-route value and sandwich held on {sandwich_ok}/20 worlds");
    println!(
        "scripted trace pass fractions: distance {:.3}, field {:.3}, tracking {:.3}",
        report.pass_fraction[0], report.pass_fraction[1], report.pass_fraction[2]
    );
    println!("slack log written to {}", dir.join("slack.csv").display());

    let pass =
        eps_holds == 100 && sandwich_ok == 20 && report.pass_fraction.iter().all(|&f| f == 1.0);
    println!("theory checks: {}", if pass { "PASS" } else { "FAIL" });
    Ok(if pass { 0 } else { 4 })
}

fn cmd_ablate_ida_ttur(c: Common) -> Result<u8> {
    let cfg = load_cfg(&c)?;
    let root = out_root(&cfg, &c);
    let teacher = load_teacher(&cfg, &teacher_checkpoint(&root))?;
    let dir = root.join("ablate-ida-ttur");
    let cells = run_ablation_ida_ttur(&cfg, &teacher, &dir, c.overwrite)?;
    for cell in &cells {
        println!(
            "ttur {:>2} ida {:>3} seed {}: terminal fd = {:.6}, trailing fd std = {:.6}",
            cell.ttur,
            if cell.ida { "on" } else { "off" },
            cell.seed,
            cell.terminal_fd,
            cell.trailing_fd_std
        );
    }
    println!("summary written to {}", dir.join("summary.csv").display());
    Ok(0)
}

fn cmd_ablate_isg(c: Common) -> Result<u8> {
    let cfg = load_cfg(&c)?;
    let root = out_root(&cfg, &c);
    let teacher = load_teacher(&cfg, &teacher_checkpoint(&root))?;
    let dir = root.join("ablate-isg");
    let rows = run_ablation_isg(&cfg, &teacher, &dir, c.overwrite)?;
    for r in &rows {
        println!(
            "isg {:>3} seed {} at {:>3}% (iteration {:>6}): fd = {:.6}",
            if r.isg { "on" } else { "off" },
            r.seed,
            r.checkpoint_pct,
            r.iter,
            r.fd
        );
    }
    println!("summary written to {}", dir.join("summary.csv").display());
    Ok(0)
}

fn cmd_charts(c: Common) -> Result<u8> {
    let cfg = load_cfg(&c)?;
    let seed = pick_seed(&cfg, &c);
    let dir = match &c.out {
        Some(p) => p.clone(),
        None => distill_dir(&PathBuf::from(&cfg.out_dir), seed),
    };
    let written = emit_charts(&dir)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(0)
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Cmd::TrainTeacher(c) => cmd_train_teacher(c),
        Cmd::Distill(c) => cmd_distill(c),
        Cmd::Sample(c) => cmd_sample(c),
        Cmd::Eval(c) => cmd_eval(c),
        Cmd::ProfileXi(c) => cmd_profile_xi(c),
        Cmd::VerifyTheory(c) => cmd_verify_theory(c),
        Cmd::AblateIdaTtur(c) => cmd_ablate_ida_ttur(c),
        Cmd::AblateIsg(c) => cmd_ablate_isg(c),
        Cmd::Charts(c) => cmd_charts(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Numeric { .. } => 3u8,
                _ => 2u8,
            })
        }
    }
}

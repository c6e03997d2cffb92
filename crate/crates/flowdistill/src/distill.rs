//! Distribution-matching distillation with fake-model alignment, intra-segment
//! guidance, and a signal-weighted adversarial term, on a TTUR schedule.
//!
//! Random-number discipline: one base seed feeds three independent ChaCha
//! streams. Stream 10 initializes the discriminator, stream 11 drives the
//! training algorithm itself, stream 12 drives diagnostics (tracking draws
//! and evaluation sampling). Diagnostics therefore never perturb the model
//! trajectory. Within one iteration the algorithm stream is consumed in a
//! fixed order: anchor index, data batch, reference batch, discriminator
//! real batch, branch coin, branch noise, then on generator rounds the
//! matching-loss time and noise followed by the guidance midpoint, then the
//! per-row denoising times and paths. Disabled components consume nothing,
//! so ablated runs stay bit-comparable against reduced reference loops.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::metrics::{frechet_gaussian_distance, mean_cov};
use crate::ndgrad::{
    blend_params, grad, param_distance, AdamW, ParamVector, Tape, Tensor, Var,
};
use crate::nets::{
    generator_step, save_params, DiscConfig, Discriminator, NetConfig, VelocityNet,
};
use crate::samplers::{
    backward_simulate, dense_grid, euler_sample, stochastic_anchor_sample, CoarseGrid,
    VelocityField,
};
use crate::schedules::{alpha_sigma, forward_diffuse, make_path, score_velocity_factor, Schedule};
use crate::theorylab::{gaussian_kl, tracking_field_stats, Gaussian2, TrackRecord};
use crate::{Error, Result};

/// Hyperparameters of one distillation run. `anchors` is kept as a plain
/// vector so configs serialize; [`TrainConfig::coarse_grid`] validates it.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Fake-to-generator blend factor, in (0, 1]. 1 disables the alignment.
    pub lambda_ida: f64,
    /// Weight of the intra-segment guidance term. 0 disables it.
    pub lambda_isg: f64,
    /// Weight of the adversarial generator term. 0 disables it.
    pub lambda_g: f64,
    /// Generator-update period: one generator step every `ttur_f` iterations.
    pub ttur_f: usize,
    pub lr_g: f64,
    pub lr_fake: f64,
    pub lr_d: f64,
    pub iters: usize,
    pub batch: usize,
    pub seed: u64,
    pub anchors: Vec<f64>,
    pub logitnormal_mu: f64,
    pub logitnormal_sigma: f64,
    /// Probability of building x_tau by backward simulation instead of by
    /// diffusing a data batch.
    pub backward_sim_prob: f64,
    /// Whether guidance also covers the lowest segment (0, tau_0].
    pub final_hop_guidance: bool,
    /// Iterations between evaluation snapshots.
    pub eval_every: usize,
    /// Sample count for per-round tracking measurements.
    pub track_samples: usize,
    pub disc_backbone_width: usize,
    pub disc_head_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_ida: 0.95,
            lambda_isg: 1.0,
            lambda_g: 0.5,
            ttur_f: 5,
            lr_g: 1e-4,
            lr_fake: 1e-4,
            lr_d: 1e-4,
            iters: 6000,
            batch: 256,
            seed: 0,
            anchors: vec![0.25, 0.5, 0.75, 1.0],
            logitnormal_mu: 0.0,
            logitnormal_sigma: 1.0,
            backward_sim_prob: 0.5,
            final_hop_guidance: true,
            eval_every: 50,
            track_samples: 128,
            disc_backbone_width: 128,
            disc_head_dim: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |msg: String| Err(Error::contract("TrainConfig::validate", msg));
        if !(self.lambda_ida > 0.0 && self.lambda_ida <= 1.0) {
            return c(format!("lambda_ida must be in (0, 1], got {}", self.lambda_ida));
        }
        if !(self.lambda_isg >= 0.0 && self.lambda_isg.is_finite()) {
            return c(format!("lambda_isg must be a nonnegative weight, got {}", self.lambda_isg));
        }
        if !(self.lambda_g >= 0.0 && self.lambda_g.is_finite()) {
            return c(format!("lambda_g must be a nonnegative weight, got {}", self.lambda_g));
        }
        if self.ttur_f < 1 {
            return c("ttur_f must be at least 1".to_string());
        }
        for (name, lr) in [("lr_g", self.lr_g), ("lr_fake", self.lr_fake), ("lr_d", self.lr_d)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return c(format!("{name} must be positive and finite, got {lr}"));
            }
        }
        if self.batch < 1 {
            return c("batch must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.backward_sim_prob) {
            return c(format!("backward_sim_prob must be in [0, 1], got {}", self.backward_sim_prob));
        }
        if !(self.logitnormal_sigma > 0.0 && self.logitnormal_sigma.is_finite()) {
            return c(format!("logitnormal_sigma must be positive, got {}", self.logitnormal_sigma));
        }
        if self.eval_every < 1 {
            return c("eval_every must be at least 1".to_string());
        }
        if self.track_samples < 2 {
            return c("track_samples must be at least 2".to_string());
        }
        if self.disc_backbone_width == 0 || self.disc_head_dim == 0 {
            return c("discriminator dimensions must be positive".to_string());
        }
        self.coarse_grid()?;
        Ok(())
    }

    pub fn coarse_grid(&self) -> Result<CoarseGrid> {
        CoarseGrid::new(self.anchors.clone())
    }
}

/// Per-iteration loss values. All finite; the divergence guard aborts the
/// run before a non-finite or exploding value is recorded.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub iter: usize,
    pub l_dmd: f64,
    pub l_adv_g: f64,
    pub l_isg: f64,
    pub l_fake_denoise: f64,
    pub l_disc: f64,
}

/// One evaluation snapshot: distance of anchor samples to cached teacher
/// samples, plus Gaussian-fit divergences of generator against fake and
/// against teacher.
#[derive(Clone, Copy, Debug)]
pub struct EvalPoint {
    pub iter: usize,
    pub fd: f64,
    pub kl_gf: f64,
    pub kl_gr: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainLog {
    pub losses: Vec<LossBreakdown>,
    pub records: Vec<TrackRecord>,
    pub evals: Vec<EvalPoint>,
}

pub struct TrainOutput {
    pub generator: VelocityNet,
    pub fake: VelocityNet,
    pub disc: Discriminator,
    pub log: TrainLog,
}

/// Draws t by passing a normal sample through the logistic function, then
/// clamps to [t_min, 1 - 1e-4] so path construction stays in range.
pub fn sample_logit_normal<R: Rng>(mu: f64, sigma: f64, t_min: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.sample(StandardNormal);
    let t = 1.0 / (1.0 + (-(mu + sigma * u)).exp());
    t.clamp(t_min, 1.0 - 1e-4)
}

fn standard_matrix<R: Rng>(n: usize, rng: &mut R) -> Result<Tensor> {
    Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

/// Matching loss on the generator output. Draws one shared t uniform on
/// [t_min, 0.98] and one noise batch, lifts x_t = alpha x_hat0 + sigma eps
/// onto the tape, and evaluates both frozen fields at the detached x_t. The
/// update direction per row is g = a(t) * (v_fake - v_teacher) divided by
/// the row's mean absolute gap plus 1e-8. The returned surrogate is
/// 0.5 * mean over rows of |x_t - stopgrad(x_t - g)|^2, so its gradient is
/// exactly g routed through dx_t/dtheta, which carries the alpha(t) factor
/// onto the generator output.
pub fn dmd_generator_loss<F, T, R>(
    tape: &mut Tape,
    x_hat0: Var,
    fake: &F,
    teacher: &T,
    schedule: &Schedule,
    conds: &[usize],
    rng: &mut R,
) -> Result<Var>
where
    F: VelocityField,
    T: VelocityField,
    R: Rng,
{
    let t_min = schedule.t_min();
    let t = t_min + (0.98 - t_min) * rng.gen::<f64>();
    let (alpha, sigma) = alpha_sigma(schedule, t)?;
    let n = tape.value(x_hat0).rows();
    let eps = standard_matrix(n, rng)?;
    let scaled = tape.scale(x_hat0, alpha)?;
    let noise = tape.constant(eps.map(|e| sigma * e));
    let x_t = tape.add(scaled, noise)?;
    let x_t_val = tape.value(x_t).clone();

    let v_f = fake.velocity_batch(&x_t_val, t, conds)?;
    let v_r = teacher.velocity_batch(&x_t_val, t, conds)?;
    let a = score_velocity_factor(schedule, t)?;
    let mut target = Vec::with_capacity(2 * n);
    for i in 0..n {
        let dx = v_f.row(i)[0] - v_r.row(i)[0];
        let dy = v_f.row(i)[1] - v_r.row(i)[1];
        let norm = 1.0 / (0.5 * (dx.abs() + dy.abs()) + 1e-8);
        let gx = a * norm * dx;
        let gy = a * norm * dy;
        if !(gx.is_finite() && gy.is_finite()) {
            return Err(Error::numeric(
                "dmd_generator_loss",
                format!("non-finite update direction at t = {t}"),
            ));
        }
        target.push(x_t_val.row(i)[0] - gx);
        target.push(x_t_val.row(i)[1] - gy);
    }
    let target = tape.constant(Tensor::matrix(n, 2, target)?);
    let diff = tape.sub(x_t, target)?;
    let sq = tape.square(diff)?;
    let row = tape.row_sum(sq)?;
    let mean = tape.mean_all(row)?;
    tape.scale(mean, 0.5)
}

/// Anything that can evaluate a velocity field on the tape at a shared time,
/// with gradients flowing to its parameters or inputs as the implementation
/// chooses.
pub trait TapeVelocity {
    fn velocity_tape(&self, tape: &mut Tape, x: Var, ts: &[f64], conds: &[usize]) -> Result<Var>;
}

/// A network viewed through parameter variables already bound on the tape.
pub struct NetOnTape<'a> {
    pub cfg: &'a NetConfig,
    pub params: &'a [Var],
}

impl TapeVelocity for NetOnTape<'_> {
    fn velocity_tape(&self, tape: &mut Tape, x: Var, ts: &[f64], conds: &[usize]) -> Result<Var> {
        VelocityNet::forward_tape(self.cfg, tape, self.params, x, ts, conds)
    }
}

/// Guidance loss for one segment of the coarse grid. Segment `i` spans
/// (lower, tau_i] with lower = tau_{i-1}, or (0, tau_0] for i = 0. Draws
/// t_mid inside the open segment, walks the teacher one Euler step from
/// tau_i down to t_mid, lets the current generator hop that midpoint to the
/// segment floor as a detached target, and penalizes the squared gap to the
/// differentiable direct hop from x_tau. Gradients reach only the direct
/// hop; the target path is frozen.
pub fn isg_loss<GT, GP, T, R>(
    tape: &mut Tape,
    gen_tape: &GT,
    generator: &GP,
    teacher: &T,
    x_tau: &Tensor,
    segment: usize,
    grid: &CoarseGrid,
    conds: &[usize],
    rng: &mut R,
) -> Result<Var>
where
    GT: TapeVelocity,
    GP: VelocityField,
    T: VelocityField,
    R: Rng,
{
    if segment >= grid.len() {
        return Err(Error::contract(
            "isg_loss",
            format!("segment {segment} out of range for {} anchors", grid.len()),
        ));
    }
    let tau_i = grid.anchors()[segment];
    let lower = grid.segment_lower(segment);
    let t_mid = loop {
        let u: f64 = rng.gen();
        let t = lower + (tau_i - lower) * u;
        if t > lower && t < tau_i {
            break t;
        }
    };

    let n = x_tau.rows();
    let v_teacher = teacher.velocity_batch(x_tau, tau_i, conds)?;
    let x_mid = x_tau.zip_map(&v_teacher, "isg_loss", |x, v| x + (t_mid - tau_i) * v)?;
    let v_mid = generator.velocity_batch(&x_mid, t_mid, conds)?;
    let x_tar = x_mid.zip_map(&v_mid, "isg_loss", |x, v| x + (lower - t_mid) * v)?;

    let x_tau_var = tape.constant(x_tau.clone());
    let v_pred = gen_tape.velocity_tape(tape, x_tau_var, &vec![tau_i; n], conds)?;
    let step = tape.scale(v_pred, lower - tau_i)?;
    let x_pred = tape.add(x_tau_var, step)?;
    let target = tape.constant(x_tar);
    let diff = tape.sub(x_pred, target)?;
    let sq = tape.square(diff)?;
    let row = tape.row_sum(sq)?;
    tape.mean_all(row)
}

/// Adversarial generator term: minus the mean head logit of the generated
/// batch against a real reference batch, weighted by the squared signal
/// level alpha(tau_i)^2. The caller passes an anchor time; at tau = 1 the
/// weight is exactly zero. Head and backbone stay frozen here, so gradients
/// reach only x_hat0.
pub fn adversarial_g_loss(
    tape: &mut Tape,
    disc: &Discriminator,
    x_hat0: Var,
    conds: &[usize],
    x_ref: &Tensor,
    tau_i: f64,
    schedule: &Schedule,
) -> Result<Var> {
    let (alpha, _) = alpha_sigma(schedule, tau_i)?;
    let omega = alpha * alpha;
    let fx = disc.backbone_features_tape(tape, x_hat0)?;
    let fref = tape.constant(disc.backbone_features(x_ref)?);
    let head: Vec<Var> =
        disc.head_params().to_tensors().into_iter().map(|t| tape.constant(t)).collect();
    let logits =
        Discriminator::logits_from_features_tape(disc.config(), tape, &head, fx, fref, conds)?;
    let mean = tape.mean_all(logits)?;
    tape.scale(mean, -omega)
}

/// Hinge loss for the discriminator head. Features of both batches and of
/// the reference are computed outside the tape and enter as constants, so
/// only the head variables receive gradient. The fake batch must already be
/// detached from the generator.
#[allow(clippy::too_many_arguments)]
pub fn discriminator_loss(
    tape: &mut Tape,
    disc: &Discriminator,
    head: &[Var],
    x_real: &Tensor,
    conds_real: &[usize],
    x_fake: &Tensor,
    conds_fake: &[usize],
    x_ref: &Tensor,
) -> Result<Var> {
    let f_real = tape.constant(disc.backbone_features(x_real)?);
    let f_fake = tape.constant(disc.backbone_features(x_fake)?);
    let f_ref = tape.constant(disc.backbone_features(x_ref)?);
    let cfg = disc.config();
    let real_logits =
        Discriminator::logits_from_features_tape(cfg, tape, head, f_real, f_ref, conds_real)?;
    let fake_logits =
        Discriminator::logits_from_features_tape(cfg, tape, head, f_fake, f_ref, conds_fake)?;
    let neg = tape.scale(real_logits, -1.0)?;
    let real_margin = tape.add_scalar(neg, 1.0)?;
    let real_hinge = tape.clamp_min(real_margin, 0.0)?;
    let real_term = tape.mean_all(real_hinge)?;
    let fake_margin = tape.add_scalar(fake_logits, 1.0)?;
    let fake_hinge = tape.clamp_min(fake_margin, 0.0)?;
    let fake_term = tape.mean_all(fake_hinge)?;
    tape.add(real_term, fake_term)
}

/// Denoising regression for the fake model on a detached batch. Each row
/// draws its own logit-normal time and its own path noise; the loss is the
/// mean squared field error against the path target.
pub fn fake_denoise_loss<R: Rng>(
    tape: &mut Tape,
    fake_cfg: &NetConfig,
    fake_params: &[Var],
    x: &Tensor,
    schedule: &Schedule,
    mu: f64,
    sigma: f64,
    conds: &[usize],
    rng: &mut R,
) -> Result<Var> {
    let n = x.rows();
    let mut ts = Vec::with_capacity(n);
    let mut xt = Vec::with_capacity(2 * n);
    let mut v_target = Vec::with_capacity(2 * n);
    for i in 0..n {
        let t = sample_logit_normal(mu, sigma, schedule.t_min(), rng);
        let row = Tensor::matrix(1, 2, vec![x.row(i)[0], x.row(i)[1]])?;
        let path = make_path(schedule, &row, t, rng)?;
        ts.push(t);
        xt.extend_from_slice(path.xt.row(0));
        v_target.extend_from_slice(path.v_target.row(0));
    }
    let xt = tape.constant(Tensor::matrix(n, 2, xt)?);
    let v = VelocityNet::forward_tape(fake_cfg, tape, fake_params, xt, &ts, conds)?;
    let target = tape.constant(Tensor::matrix(n, 2, v_target)?);
    let diff = tape.sub(v, target)?;
    let sq = tape.square(diff)?;
    let row = tape.row_sum(sq)?;
    tape.mean_all(row)
}

/// Pulls the fake parameters toward the generator: phi becomes
/// lambda * phi + (1 - lambda) * theta. Optimizer moments are the caller's
/// and stay untouched.
pub fn ida_update(phi: &mut ParamVector, theta: &ParamVector, lambda: f64) -> Result<()> {
    *phi = blend_params(phi, theta, lambda)?;
    Ok(())
}

fn fit_gaussian(points: &Tensor) -> Result<Gaussian2> {
    let (mean, mut cov) = mean_cov(points)?;
    cov[0][0] += 1e-8;
    cov[1][1] += 1e-8;
    Gaussian2::new(mean, cov)
}

const DIVERGENCE_LIMIT: f64 = 1e6;

fn guard(iter: usize, component: &str, value: f64) -> Result<f64> {
    if !value.is_finite() || value.abs() > DIVERGENCE_LIMIT {
        return Err(Error::numeric(
            "train",
            format!("loss component {component} diverged at iteration {iter}: {value}"),
        ));
    }
    Ok(value)
}

struct Evaluator {
    teacher_ref: Tensor,
    teacher_fit: Gaussian2,
    grid: CoarseGrid,
}

impl Evaluator {
    fn new<R: Rng>(
        teacher: &VelocityNet,
        data: &DatasetSpec,
        grid: CoarseGrid,
        rng: &mut R,
    ) -> Result<Self> {
        let (_, conds) = data.sample_batch(2048, rng)?;
        let z = standard_matrix(2048, rng)?;
        let teacher_ref = euler_sample(teacher, &dense_grid(32)?, &z, &conds)?;
        let teacher_fit = fit_gaussian(&teacher_ref)?;
        Ok(Evaluator { teacher_ref, teacher_fit, grid })
    }

    fn run<R: Rng>(
        &self,
        iter: usize,
        generator: &VelocityNet,
        fake: &VelocityNet,
        data: &DatasetSpec,
        rng: &mut R,
    ) -> Result<EvalPoint> {
        let (_, conds) = data.sample_batch(1024, rng)?;
        let z = standard_matrix(1024, rng)?;
        let samples = stochastic_anchor_sample(generator, &self.grid, &z, &conds, rng)?;
        let fd = frechet_gaussian_distance(&samples, &self.teacher_ref)?;
        let fit_g = fit_gaussian(&samples)?;
        let (_, conds_f) = data.sample_batch(256, rng)?;
        let z_f = standard_matrix(256, rng)?;
        let fake_out = euler_sample(fake, &dense_grid(16)?, &z_f, &conds_f)?;
        let kl_gf = gaussian_kl(&fit_g, &fit_gaussian(&fake_out)?)?;
        let kl_gr = gaussian_kl(&fit_g, &self.teacher_fit)?;
        Ok(EvalPoint { iter, fd, kl_gf, kl_gr })
    }
}

/// Runs the full distillation loop. Generator and fake model start as exact
/// copies of the teacher. Per iteration: draw an anchor, build x_tau by
/// backward simulation or forward diffusion, hop to x_hat0; on every
/// `ttur_f`-th iteration update the generator with the matching loss plus
/// weighted adversarial and guidance terms, blend the fake model toward it,
/// and append a tracking record; then update the fake model on the detached
/// x_hat0 and the discriminator head on a fresh real batch. Checkpoints are
/// written at the halfway point and at the end when a directory is given.
pub fn train(
    cfg: &TrainConfig,
    teacher: &VelocityNet,
    data: &DatasetSpec,
    schedule: &Schedule,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let grid = cfg.coarse_grid()?;
    let net_cfg = teacher.config().clone();
    if net_cfg.n_conditions != data.n_conditions() {
        return Err(Error::contract(
            "train",
            format!(
                "teacher supports {} conditions but the dataset has {}",
                net_cfg.n_conditions,
                data.n_conditions()
            ),
        ));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_rng.set_stream(10);
    let disc_cfg = DiscConfig {
        backbone_width: cfg.disc_backbone_width,
        head_dim: cfg.disc_head_dim,
        n_conditions: data.n_conditions(),
    };
    let mut disc = Discriminator::new(disc_cfg, &mut init_rng)?;

    let mut alg_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    alg_rng.set_stream(11);
    let mut diag_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    diag_rng.set_stream(12);

    let mut generator = VelocityNet::from_params(net_cfg.clone(), teacher.params().clone())?;
    let mut fake = VelocityNet::from_params(net_cfg.clone(), teacher.params().clone())?;
    let mut opt_g = AdamW::new(generator.params().len());
    let mut opt_fake = AdamW::new(fake.params().len());
    let mut head = disc.head_params().clone();
    let mut opt_d = AdamW::new(head.len());

    let evaluator = Evaluator::new(teacher, data, grid.clone(), &mut diag_rng)?;
    let mut log = TrainLog::default();
    log.evals.push(evaluator.run(0, &generator, &fake, data, &mut diag_rng)?);

    let track_grid = grid.clone();
    let mut round = 0usize;

    for k in 0..cfg.iters {
        let idx = alg_rng.gen_range(0..grid.len());
        let tau_i = grid.anchors()[idx];
        let (x0_real, conds_tau) = data.sample_batch(cfg.batch, &mut alg_rng)?;
        let (x_ref, _) = data.sample_batch(cfg.batch, &mut alg_rng)?;
        let (x_real_d, conds_d) = data.sample_batch(cfg.batch, &mut alg_rng)?;
        let coin: f64 = alg_rng.gen();
        let x_tau = if coin < cfg.backward_sim_prob {
            let z = standard_matrix(cfg.batch, &mut alg_rng)?;
            backward_simulate(&generator, &grid, &z, tau_i, &conds_tau, &mut alg_rng)?
        } else {
            let eps = standard_matrix(cfg.batch, &mut alg_rng)?;
            forward_diffuse(schedule, &x0_real, tau_i, &eps)?
        };
        let x_hat0_plain = generator_step(&generator, &x_tau, tau_i, 0.0, &conds_tau)?;

        let mut l_dmd = 0.0;
        let mut l_adv = 0.0;
        let mut l_isg = 0.0;
        if (k + 1) % cfg.ttur_f == 0 {
            round += 1;
            let theta_old = generator.params().clone();
            let e_pre = param_distance(fake.params(), generator.params())?;

            let isg_active =
                cfg.lambda_isg > 0.0 && (idx > 0 || cfg.final_hop_guidance);
            let (_, g_grad) = {
                let n = cfg.batch;
                let gen_ref = &generator;
                let fake_ref = &fake;
                let disc_ref = &disc;
                let rng_ref = &mut alg_rng;
                let l_dmd_out = &mut l_dmd;
                let l_adv_out = &mut l_adv;
                let l_isg_out = &mut l_isg;
                grad(
                    |tape, params| {
                        let x_tau_var = tape.constant(x_tau.clone());
                        let v = VelocityNet::forward_tape(
                            &net_cfg,
                            tape,
                            params,
                            x_tau_var,
                            &vec![tau_i; n],
                            &conds_tau,
                        )?;
                        let step = tape.scale(v, -tau_i)?;
                        let x_hat0 = tape.add(x_tau_var, step)?;

                        let dmd = dmd_generator_loss(
                            tape, x_hat0, fake_ref, teacher, schedule, &conds_tau, rng_ref,
                        )?;
                        *l_dmd_out = scalar(tape, dmd);
                        let mut total = dmd;
                        if cfg.lambda_g > 0.0 {
                            let adv = adversarial_g_loss(
                                tape, disc_ref, x_hat0, &conds_tau, &x_ref, tau_i, schedule,
                            )?;
                            *l_adv_out = scalar(tape, adv);
                            let w = tape.scale(adv, cfg.lambda_g)?;
                            total = tape.add(total, w)?;
                        }
                        if isg_active {
                            let on_tape = NetOnTape { cfg: &net_cfg, params };
                            let isg = isg_loss(
                                tape, &on_tape, gen_ref, teacher, &x_tau, idx, &track_grid,
                                &conds_tau, rng_ref,
                            )?;
                            *l_isg_out = scalar(tape, isg);
                            let w = tape.scale(isg, cfg.lambda_isg)?;
                            total = tape.add(total, w)?;
                        }
                        Ok(total)
                    },
                    generator.params(),
                )?
            };
            guard(k + 1, "l_dmd", l_dmd)?;
            guard(k + 1, "l_adv_g", l_adv)?;
            guard(k + 1, "l_isg", l_isg)?;
            opt_g.step(generator.params_mut(), &g_grad, cfg.lr_g)?;
            let theta_step = param_distance(generator.params(), &theta_old)?;
            ida_update(fake.params_mut(), generator.params(), cfg.lambda_ida)?;
            let e_k = param_distance(fake.params(), generator.params())?;

            let (_, conds_t) = data.sample_batch(cfg.track_samples, &mut diag_rng)?;
            let z_t = standard_matrix(cfg.track_samples, &mut diag_rng)?;
            let x0_t =
                stochastic_anchor_sample(&generator, &track_grid, &z_t, &conds_t, &mut diag_rng)?;
            let x1_t = standard_matrix(cfg.track_samples, &mut diag_rng)?;
            let ts: Vec<f64> = (0..cfg.track_samples)
                .map(|_| {
                    let u: f64 = diag_rng.gen();
                    schedule.t_min() + (1.0 - schedule.t_min()) * u
                })
                .collect();
            let stats = tracking_field_stats(
                |x, ts| generator.forward(x, ts, &conds_t),
                |x, ts| fake.forward(x, ts, &conds_t),
                schedule,
                &x0_t,
                &x1_t,
                &ts,
            )?;
            // eps_k is stored with a unit constant; consumers calibrate the
            // real factor separately and rescale.
            log.records.push(TrackRecord {
                k: round,
                e_pre_k: e_pre,
                e_k,
                delta_k: stats.delta,
                dbar_k: stats.dbar,
                betabar_k: stats.betabar,
                dtilde_k: stats.dtilde_sq.sqrt(),
                betatilde_k: stats.betatilde_sq.sqrt(),
                eps_k: 2.0 * (stats.dtilde_sq + stats.betatilde_sq),
                kl_gf: f64::NAN,
                kl_gr: f64::NAN,
                theta_step,
                proxy: true,
            });
        }

        let l_fake = {
            let rng_ref = &mut alg_rng;
            let mut val = 0.0;
            let val_out = &mut val;
            let fake_cfg = fake.config().clone();
            let (_, f_grad) = grad(
                |tape, params| {
                    let loss = fake_denoise_loss(
                        tape,
                        &fake_cfg,
                        params,
                        &x_hat0_plain,
                        schedule,
                        cfg.logitnormal_mu,
                        cfg.logitnormal_sigma,
                        &conds_tau,
                        rng_ref,
                    )?;
                    *val_out = scalar(tape, loss);
                    Ok(loss)
                },
                fake.params(),
            )?;
            opt_fake.step(fake.params_mut(), &f_grad, cfg.lr_fake)?;
            val
        };
        guard(k + 1, "l_fake_denoise", l_fake)?;

        let l_disc = {
            let mut val = 0.0;
            let val_out = &mut val;
            let disc_ref = &disc;
            let (_, d_grad) = grad(
                |tape, params| {
                    let loss = discriminator_loss(
                        tape,
                        disc_ref,
                        params,
                        &x_real_d,
                        &conds_d,
                        &x_hat0_plain,
                        &conds_tau,
                        &x_ref,
                    )?;
                    *val_out = scalar(tape, loss);
                    Ok(loss)
                },
                &head,
            )?;
            opt_d.step(&mut head, &d_grad, cfg.lr_d)?;
            disc.set_head_params(head.clone())?;
            val
        };
        guard(k + 1, "l_disc", l_disc)?;

        log.losses.push(LossBreakdown {
            iter: k + 1,
            l_dmd,
            l_adv_g: l_adv,
            l_isg,
            l_fake_denoise: l_fake,
            l_disc,
        });

        if (k + 1) % cfg.eval_every == 0 || k + 1 == cfg.iters {
            let point = evaluator.run(k + 1, &generator, &fake, data, &mut diag_rng)?;
            if let Some(rec) = log.records.last_mut() {
                if rec.k * cfg.ttur_f == k + 1 {
                    rec.kl_gf = point.kl_gf;
                    rec.kl_gr = point.kl_gr;
                }
            }
            log.evals.push(point);
        }

        if let Some(dir) = checkpoint_dir {
            let half = cfg.iters / 2;
            if k + 1 == half && half > 0 {
                save_params(&dir.join("generator_mid.params"), generator.params())?;
            }
        }
    }

    if let Some(dir) = checkpoint_dir {
        save_params(&dir.join("generator_final.params"), generator.params())?;
        save_params(&dir.join("fake_final.params"), fake.params())?;
    }

    Ok(TrainOutput { generator, fake, disc, log })
}

/// Writes the per-iteration log. Tracking columns repeat the latest record
/// and the distance column repeats the latest evaluation, so every row is
/// complete and the file diffs cleanly between runs.
pub fn write_train_csv(log: &TrainLog, ttur_f: usize, path: &Path) -> Result<()> {
    let mut out = String::from("# schema=1\n");
    out.push_str("iter,l_dmd,l_adv_g,l_isg,l_fake,l_disc,e_k,delta_k,dbar_k,betabar_k,fd_to_teacher\n");
    let mut rec_i = 0usize;
    let mut eval_i = 0usize;
    let mut last_rec: Option<&TrackRecord> = None;
    let mut last_fd = f64::NAN;
    for b in &log.losses {
        while rec_i < log.records.len() && log.records[rec_i].k * ttur_f <= b.iter {
            last_rec = Some(&log.records[rec_i]);
            rec_i += 1;
        }
        while eval_i < log.evals.len() && log.evals[eval_i].iter <= b.iter {
            last_fd = log.evals[eval_i].fd;
            eval_i += 1;
        }
        let (e_k, delta, dbar, betabar) = match last_rec {
            Some(r) => (r.e_k, r.delta_k, r.dbar_k, r.betabar_k),
            None => (0.0, 0.0, 0.0, 0.0),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            b.iter,
            b.l_dmd,
            b.l_adv_g,
            b.l_isg,
            b.l_fake_denoise,
            b.l_disc,
            e_k,
            delta,
            dbar,
            betabar,
            last_fd
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes one row per tracking record, including the divergence diagnostics
/// that stay NaN between evaluation iterations.
pub fn write_track_csv(log: &TrainLog, ttur_f: usize, path: &Path) -> Result<()> {
    let mut out = String::from("# schema=1\n");
    out.push_str(
        "k,iter,e_pre_k,e_k,theta_step,delta_k,dbar_k,betabar_k,dtilde_k,betatilde_k,eps_k,kl_gf,kl_gr\n",
    );
    for r in &log.records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.k,
            r.k * ttur_f,
            r.e_pre_k,
            r.e_k,
            r.theta_step,
            r.delta_k,
            r.dbar_k,
            r.betabar_k,
            r.dtilde_k,
            r.betatilde_k,
            r.eps_k,
            r.kl_gf,
            r.kl_gr
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

//! Closed-form Gaussian worlds and tracking-error verification: exact
//! marginals, fields, and KLs for 2D Gaussians; tracking records measured on
//! neural runs; recursion inequality checks; Lipschitz constant estimation;
//! the epsilon-best-response bound; and the value sandwich.

use crate::metrics::mean_cov;
use crate::ndgrad::{param_distance, ParamVector, Tensor};
use crate::nets::VelocityNet;
use crate::samplers::{dense_grid, euler_sample, stochastic_anchor_sample, CoarseGrid, VelocityField};
use crate::schedules::Schedule;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

type Mat2 = [[f64; 2]; 2];
type Vec2 = [f64; 2];

const IDENTITY: Mat2 = [[1.0, 0.0], [0.0, 1.0]];

fn mat_scale(a: Mat2, s: f64) -> Mat2 {
    [[a[0][0] * s, a[0][1] * s], [a[1][0] * s, a[1][1] * s]]
}

fn mat_add(a: Mat2, b: Mat2) -> Mat2 {
    [
        [a[0][0] + b[0][0], a[0][1] + b[0][1]],
        [a[1][0] + b[1][0], a[1][1] + b[1][1]],
    ]
}

fn mat_sub(a: Mat2, b: Mat2) -> Mat2 {
    mat_add(a, mat_scale(b, -1.0))
}

fn mat_mul(a: Mat2, b: Mat2) -> Mat2 {
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    out
}

fn mat_vec(a: Mat2, v: Vec2) -> Vec2 {
    [a[0][0] * v[0] + a[0][1] * v[1], a[1][0] * v[0] + a[1][1] * v[1]]
}

fn mat_det(a: Mat2) -> f64 {
    a[0][0] * a[1][1] - a[0][1] * a[1][0]
}

fn mat_trace(a: Mat2) -> f64 {
    a[0][0] + a[1][1]
}

fn mat_inv(op: &'static str, a: Mat2) -> Result<Mat2> {
    let det = mat_det(a);
    if !(det.abs() > 1e-14 && det.is_finite()) {
        return Err(Error::numeric(op, format!("singular 2x2 matrix, det {det}")));
    }
    Ok([
        [a[1][1] / det, -a[0][1] / det],
        [-a[1][0] / det, a[0][0] / det],
    ])
}

fn vec_sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn vec_dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

fn vec_norm(a: Vec2) -> f64 {
    vec_dot(a, a).sqrt()
}

fn sym_max_abs_eig(a: Mat2) -> f64 {
    let half_tr = 0.5 * mat_trace(a);
    let gap = (half_tr * half_tr - mat_det(a)).max(0.0).sqrt();
    (half_tr + gap).abs().max((half_tr - gap).abs())
}

/// A 2D Gaussian with an SPD covariance, exposing the exact straight-path
/// marginal, score, and target velocity field at any time.
#[derive(Clone, Copy, Debug)]
pub struct Gaussian2 {
    mean: Vec2,
    cov: Mat2,
}

impl Gaussian2 {
    pub fn new(mean: Vec2, cov: Mat2) -> Result<Self> {
        if (cov[0][1] - cov[1][0]).abs() > 1e-9 {
            return Err(Error::contract(
                "Gaussian2::new",
                format!("covariance must be symmetric, got {cov:?}"),
            ));
        }
        if !(cov[0][0] > 0.0 && mat_det(cov) > 0.0) {
            return Err(Error::contract(
                "Gaussian2::new",
                format!("covariance must be positive definite, got {cov:?}"),
            ));
        }
        Ok(Gaussian2 { mean, cov })
    }

    pub fn mean(&self) -> Vec2 {
        self.mean
    }

    pub fn cov(&self) -> Mat2 {
        self.cov
    }

    fn path_cov(&self, t: f64) -> Mat2 {
        mat_add(mat_scale(self.cov, (1.0 - t) * (1.0 - t)), mat_scale(IDENTITY, t * t))
    }

    /// Marginal of X_t = (1-t) X0 + t X1 with X0 from this Gaussian and
    /// X1 standard normal: N((1-t) m, (1-t)^2 Sigma + t^2 I).
    pub fn marginal(&self, t: f64) -> Result<Gaussian2> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract(
                "Gaussian2::marginal",
                format!("time {t} outside [0, 1]"),
            ));
        }
        let mean = [(1.0 - t) * self.mean[0], (1.0 - t) * self.mean[1]];
        Gaussian2::new(mean, self.path_cov(t))
    }

    /// Affine form (G, c) of the induced target field: v(x, t) = G x + c,
    /// from joint-Gaussian conditioning of X1 - X0 on X_t.
    pub fn field_affine(&self, t: f64) -> Result<(Mat2, Vec2)> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::contract(
                "Gaussian2::field_affine",
                format!("time {t} outside (0, 1]"),
            ));
        }
        let st_inv = mat_inv("Gaussian2::field_affine", self.path_cov(t))?;
        let cross = mat_sub(mat_scale(IDENTITY, t), mat_scale(self.cov, 1.0 - t));
        let g = mat_mul(cross, st_inv);
        let gm = mat_vec(g, self.mean);
        let c = [
            -self.mean[0] - (1.0 - t) * gm[0],
            -self.mean[1] - (1.0 - t) * gm[1],
        ];
        Ok((g, c))
    }

    /// E[X1 - X0 | X_t = x] for this data distribution under the straight
    /// path; linear in x.
    pub fn velocity(&self, t: f64, x: Vec2) -> Result<Vec2> {
        let (g, c) = self.field_affine(t)?;
        let gx = mat_vec(g, x);
        Ok([gx[0] + c[0], gx[1] + c[1]])
    }

    /// Score of the time-t marginal at x.
    pub fn score(&self, t: f64, x: Vec2) -> Result<Vec2> {
        let marg = self.marginal(t)?;
        let inv = mat_inv("Gaussian2::score", marg.cov)?;
        let d = vec_sub(x, marg.mean);
        let sd = mat_vec(inv, d);
        Ok([-sd[0], -sd[1]])
    }

    pub fn log_density(&self, x: Vec2) -> Result<f64> {
        let inv = mat_inv("Gaussian2::log_density", self.cov)?;
        let d = vec_sub(x, self.mean);
        let quad = vec_dot(d, mat_vec(inv, d));
        Ok(-(2.0 * std::f64::consts::PI).ln() - 0.5 * mat_det(self.cov).ln() - 0.5 * quad)
    }

    fn chol(&self) -> Result<[f64; 3]> {
        let l11 = self.cov[0][0].sqrt();
        let l21 = self.cov[0][1] / l11;
        let rest = self.cov[1][1] - l21 * l21;
        if !(rest > 0.0) {
            return Err(Error::numeric(
                "Gaussian2::chol",
                format!("covariance not positive definite, got {:?}", self.cov),
            ));
        }
        Ok([l11, l21, rest.sqrt()])
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        let [l11, l21, l22] = self.chol()?;
        let mut data = Vec::with_capacity(2 * n);
        for _ in 0..n {
            let g0: f64 = rng.sample(StandardNormal);
            let g1: f64 = rng.sample(StandardNormal);
            data.push(self.mean[0] + l11 * g0);
            data.push(self.mean[1] + l21 * g0 + l22 * g1);
        }
        Tensor::matrix(n, 2, data)
    }
}

impl VelocityField for Gaussian2 {
    fn velocity_batch(&self, x: &Tensor, t: f64, _conds: &[usize]) -> Result<Tensor> {
        let (g, c) = self.field_affine(t)?;
        let n = x.rows();
        let mut out = Vec::with_capacity(2 * n);
        for i in 0..n {
            let v = mat_vec(g, [x.row(i)[0], x.row(i)[1]]);
            out.push(v[0] + c[0]);
            out.push(v[1] + c[1]);
        }
        Tensor::matrix(n, 2, out)
    }
}

/// Induced target field of N(mean, cov) data evaluated at (t, x).
pub fn gaussian_target_field(mean: Vec2, cov: Mat2, t: f64, x: Vec2) -> Result<Vec2> {
    Gaussian2::new(mean, cov)?.velocity(t, x)
}

/// Closed-form KL(p || q) between 2D Gaussians.
pub fn gaussian_kl(p: &Gaussian2, q: &Gaussian2) -> Result<f64> {
    let inv_q = mat_inv("gaussian_kl", q.cov)?;
    let prod = mat_mul(inv_q, p.cov);
    let d = vec_sub(q.mean, p.mean);
    let quad = vec_dot(d, mat_vec(inv_q, d));
    let log_det_ratio = (mat_det(q.cov) / mat_det(p.cov)).ln();
    Ok(0.5 * (mat_trace(prod) + quad - 2.0 + log_det_ratio))
}

/// Generator, fake-model, and teacher distributions with exact marginals.
/// `generator_bias` is a constant offset of the generator's operative field
/// relative to the field induced by its distribution; it produces a nonzero
/// self-consistency error while leaving the distribution untouched.
#[derive(Clone, Copy, Debug)]
pub struct GaussianWorld {
    pub generator: Gaussian2,
    pub fake: Gaussian2,
    pub teacher: Gaussian2,
    pub generator_bias: Vec2,
}

impl GaussianWorld {
    pub fn unbiased(generator: Gaussian2, fake: Gaussian2, teacher: Gaussian2) -> Self {
        GaussianWorld { generator, fake, teacher, generator_bias: [0.0, 0.0] }
    }
}

/// Upper time bound for expectation grids; the region near t = 1 is excluded
/// because marginals of different data distributions coincide there.
pub const THEORY_T_MAX: f64 = 0.98;

/// 64 uniform points on [t_min, 0.98] for trapezoid expectations over time.
pub fn theory_t_grid(schedule: &Schedule) -> Vec<f64> {
    uniform_grid(schedule.t_min(), THEORY_T_MAX, 64)
}

fn uniform_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

/// Average of f over the grid interval using trapezoid weights.
fn grid_mean(grid: &[f64], mut f: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    if grid.len() < 2 {
        return Err(Error::contract("grid_mean", "need at least two grid points".to_string()));
    }
    let mut acc = 0.0;
    let mut prev = f(grid[0])?;
    for w in grid.windows(2) {
        let next = f(w[1])?;
        acc += 0.5 * (prev + next) * (w[1] - w[0]);
        prev = next;
    }
    Ok(acc / (grid[grid.len() - 1] - grid[0]))
}

/// E over x ~ generator marginal at t of the squared gap between the fake
/// field and the generator-induced target field.
pub fn expected_sq_field_gap(world: &GaussianWorld, t: f64) -> Result<f64> {
    let (gf, cf) = world.fake.field_affine(t)?;
    let (gg, cg) = world.generator.field_affine(t)?;
    let b = mat_sub(gf, gg);
    let u = vec_sub(cf, cg);
    let marg = world.generator.marginal(t)?;
    let bsb = mat_mul(mat_mul(b, marg.cov), [[b[0][0], b[1][0]], [b[0][1], b[1][1]]]);
    let bm = mat_vec(b, marg.mean);
    Ok(mat_trace(bsb) + (bm[0] + u[0]).powi(2) + (bm[1] + u[1]).powi(2))
}

/// Trapezoid average over the grid of KL between the two time-t marginals.
pub fn expected_marginal_kl(p: &Gaussian2, q: &Gaussian2, t_grid: &[f64]) -> Result<f64> {
    grid_mean(t_grid, |t| gaussian_kl(&p.marginal(t)?, &q.marginal(t)?))
}

fn random_spd<R: Rng>(rng: &mut R) -> Mat2 {
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let (s, c) = angle.sin_cos();
    let l1: f64 = rng.gen_range(0.09..2.25);
    let l2: f64 = rng.gen_range(0.09..2.25);
    [
        [c * c * l1 + s * s * l2, s * c * (l1 - l2)],
        [s * c * (l1 - l2), s * s * l1 + c * c * l2],
    ]
}

fn random_gaussian<R: Rng>(rng: &mut R) -> Result<Gaussian2> {
    let mean = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
    Gaussian2::new(mean, random_spd(rng))
}

pub fn random_world<R: Rng>(rng: &mut R) -> Result<GaussianWorld> {
    Ok(GaussianWorld::unbiased(
        random_gaussian(rng)?,
        random_gaussian(rng)?,
        random_gaussian(rng)?,
    ))
}

/// Calibrates the constant relating expected marginal KL to the expected
/// squared field gap: the max ratio over randomly drawn generator/fake pairs,
/// doubled for safety. The returned value is meant to be frozen and reused.
pub fn calibrate_c<R: Rng>(
    schedule: &Schedule,
    t_grid: &[f64],
    n_instances: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_instances == 0 {
        return Err(Error::contract("calibrate_c", "need at least one instance".to_string()));
    }
    let _ = schedule;
    let mut worst = 0.0f64;
    for _ in 0..n_instances {
        let world = random_world(rng)?;
        let kl = expected_marginal_kl(&world.generator, &world.fake, t_grid)?;
        let gap = grid_mean(t_grid, |t| expected_sq_field_gap(&world, t))?;
        if gap > 1e-12 {
            worst = worst.max(kl / gap);
        }
    }
    Ok(2.0 * worst)
}

#[derive(Clone, Copy, Debug)]
pub struct EpsilonReport {
    pub dtilde_sq: f64,
    pub betatilde_sq: f64,
    pub eps: f64,
    pub expected_kl: f64,
    pub holds: bool,
}

/// Checks E_t KL(p_g,t || p_f,t) <= eps with eps = 2 C (dtilde^2 + betatilde^2),
/// everything in closed form on the Gaussian world.
pub fn epsilon_bound_check(
    world: &GaussianWorld,
    schedule: &Schedule,
    t_grid: &[f64],
    c_estimate: f64,
) -> Result<EpsilonReport> {
    let _ = schedule;
    if !(c_estimate > 0.0 && c_estimate.is_finite()) {
        return Err(Error::contract(
            "epsilon_bound_check",
            format!("constant must be positive, got {c_estimate}"),
        ));
    }
    let dtilde_sq = grid_mean(t_grid, |t| expected_sq_field_gap(world, t))?;
    let betatilde_sq = vec_dot(world.generator_bias, world.generator_bias);
    let eps = 2.0 * c_estimate * (dtilde_sq + betatilde_sq);
    let expected_kl = expected_marginal_kl(&world.generator, &world.fake, t_grid)?;
    Ok(EpsilonReport {
        dtilde_sq,
        betatilde_sq,
        eps,
        expected_kl,
        holds: expected_kl <= eps + 1e-12,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct SandwichReport {
    pub v_mc: f64,
    pub v_mc_se: f64,
    pub v_fine: f64,
    pub v_grid: f64,
    pub expected_kl_gr: f64,
    pub eps: f64,
    pub two_route_ok: bool,
    pub lower_ok: bool,
    pub upper_ok: bool,
}

/// Computes the inner value V = E_{t, x~p_g,t}[log p_f,t - log p_r,t] two
/// ways: by Monte Carlo over continuous t, and in closed form as
/// E_t[KL(g||r) - KL(g||f)]. Checks their agreement and the sandwich
/// E_t KL(g||r) - eps <= V <= E_t KL(g||r).
pub fn sandwich_check<R: Rng>(
    world: &GaussianWorld,
    schedule: &Schedule,
    t_grid: &[f64],
    eps: f64,
    n_mc: usize,
    rng: &mut R,
) -> Result<SandwichReport> {
    let _ = schedule;
    if n_mc < 2 {
        return Err(Error::contract("sandwich_check", "need at least 2 draws".to_string()));
    }
    let lo = t_grid[0];
    let hi = t_grid[t_grid.len() - 1];
    let v_at = |t: f64| -> Result<f64> {
        let mg = world.generator.marginal(t)?;
        Ok(gaussian_kl(&mg, &world.teacher.marginal(t)?)?
            - gaussian_kl(&mg, &world.fake.marginal(t)?)?)
    };
    let v_grid = grid_mean(t_grid, v_at)?;
    let fine = uniform_grid(lo, hi, 4097);
    let v_fine = grid_mean(&fine, v_at)?;
    let expected_kl_gr =
        expected_marginal_kl(&world.generator, &world.teacher, t_grid)?;

    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_mc {
        let t = rng.gen_range(lo..hi);
        let mg = world.generator.marginal(t)?;
        let x = mg.sample(1, rng)?;
        let point = [x.row(0)[0], x.row(0)[1]];
        let term = world.fake.marginal(t)?.log_density(point)?
            - world.teacher.marginal(t)?.log_density(point)?;
        sum += term;
        sum_sq += term * term;
    }
    let v_mc = sum / n_mc as f64;
    let var = (sum_sq / n_mc as f64 - v_mc * v_mc).max(0.0);
    let v_mc_se = (var / n_mc as f64).sqrt();

    Ok(SandwichReport {
        v_mc,
        v_mc_se,
        v_fine,
        v_grid,
        expected_kl_gr,
        eps,
        two_route_ok: (v_mc - v_fine).abs() <= 3.0 * v_mc_se,
        lower_ok: v_grid >= expected_kl_gr - eps - 1e-12,
        upper_ok: v_grid <= expected_kl_gr + 1e-12,
    })
}

/// One round of tracking measurements. In neural mode `dbar_k`, `betabar_k`,
/// and the squared-gap versions behind `dtilde_k`, `betatilde_k` are pathwise
/// upper proxies: the conditional-mean target is replaced with the raw path
/// target X1 - X0, an upper bound by conditional Jensen. `proxy` flags that
/// mode. `e_pre_k` is the fake-to-generator parameter distance measured at
/// the start of the round, before the generator step and the blend; it and
/// `theta_step` are filled by the training loop at each event.
#[derive(Clone, Copy, Debug)]
pub struct TrackRecord {
    pub k: usize,
    pub e_pre_k: f64,
    pub e_k: f64,
    pub delta_k: f64,
    pub dbar_k: f64,
    pub betabar_k: f64,
    pub dtilde_k: f64,
    pub betatilde_k: f64,
    pub eps_k: f64,
    pub kl_gf: f64,
    pub kl_gr: f64,
    pub theta_step: f64,
    pub proxy: bool,
}

/// Monte Carlo field-gap statistics over given path draws.
#[derive(Clone, Copy, Debug)]
pub struct FieldGapStats {
    pub delta: f64,
    pub delta_se: f64,
    pub dbar: f64,
    pub betabar: f64,
    pub dtilde_sq: f64,
    pub betatilde_sq: f64,
}

/// Evaluates generator and fake fields on per-row times along the straight
/// path x_t = alpha x0 + sigma x1 and reports gap statistics against each
/// other and against the path target x1 - x0.
pub fn tracking_field_stats<G, F>(
    generator_eval: G,
    fake_eval: F,
    schedule: &Schedule,
    x0: &Tensor,
    x1: &Tensor,
    ts: &[f64],
) -> Result<FieldGapStats>
where
    G: Fn(&Tensor, &[f64]) -> Result<Tensor>,
    F: Fn(&Tensor, &[f64]) -> Result<Tensor>,
{
    let n = x0.rows();
    if x1.rows() != n || ts.len() != n || n == 0 {
        return Err(Error::contract(
            "tracking_field_stats",
            "x0, x1, and ts must agree on a nonzero batch size".to_string(),
        ));
    }
    let mut xt = Vec::with_capacity(2 * n);
    for i in 0..n {
        let (alpha, sigma) = crate::schedules::alpha_sigma(schedule, ts[i])?;
        xt.push(alpha * x0.row(i)[0] + sigma * x1.row(i)[0]);
        xt.push(alpha * x0.row(i)[1] + sigma * x1.row(i)[1]);
    }
    let xt = Tensor::matrix(n, 2, xt)?;
    let vg = generator_eval(&xt, ts)?;
    let vf = fake_eval(&xt, ts)?;
    if vg.shape() != xt.shape() || vf.shape() != xt.shape() {
        return Err(Error::contract(
            "tracking_field_stats",
            "field evaluations must match the batch shape".to_string(),
        ));
    }
    let mut gap_sum = 0.0;
    let mut gap_sq_sum = 0.0;
    let mut dbar = 0.0;
    let mut betabar = 0.0;
    let mut dtilde_sq = 0.0;
    let mut betatilde_sq = 0.0;
    for i in 0..n {
        let tx = x1.row(i)[0] - x0.row(i)[0];
        let ty = x1.row(i)[1] - x0.row(i)[1];
        let gx = vf.row(i)[0] - vg.row(i)[0];
        let gy = vf.row(i)[1] - vg.row(i)[1];
        let gap = (gx * gx + gy * gy).sqrt();
        gap_sum += gap;
        gap_sq_sum += gap * gap;
        let fx = vf.row(i)[0] - tx;
        let fy = vf.row(i)[1] - ty;
        dbar += (fx * fx + fy * fy).sqrt();
        dtilde_sq += fx * fx + fy * fy;
        let bx = vg.row(i)[0] - tx;
        let by = vg.row(i)[1] - ty;
        betabar += (bx * bx + by * by).sqrt();
        betatilde_sq += bx * bx + by * by;
    }
    let nf = n as f64;
    let delta = gap_sum / nf;
    let var = (gap_sq_sum / nf - delta * delta).max(0.0);
    Ok(FieldGapStats {
        delta,
        delta_se: (var / nf).sqrt(),
        dbar: dbar / nf,
        betabar: betabar / nf,
        dtilde_sq: dtilde_sq / nf,
        betatilde_sq: betatilde_sq / nf,
    })
}

fn gaussian_fit(points: &Tensor) -> Result<Gaussian2> {
    let (mean, mut cov) = mean_cov(points)?;
    cov[0][0] += 1e-8;
    cov[1][1] += 1e-8;
    Gaussian2::new(mean, cov)
}

/// Measures one tracking record for a neural generator/fake/teacher triple.
/// Path points are drawn from the generator-induced distribution (anchor
/// sampling from noise), times uniformly on [t_min, 1]. The KL fields are
/// Gaussian-fit diagnostics of sampler outputs. `c_estimate` fills eps_k.
/// The pre-round distance is not observable from a static snapshot, so
/// `e_pre_k` is returned equal to `e_k`; the training loop overwrites it,
/// along with `k` and `theta_step`, at each generator event.
pub fn measure_tracking<R: Rng>(
    generator: &VelocityNet,
    fake: &VelocityNet,
    teacher: &VelocityNet,
    schedule: &Schedule,
    n_samples: usize,
    c_estimate: f64,
    rng: &mut R,
) -> Result<TrackRecord> {
    let e_k = param_distance(generator.params(), fake.params())?;
    if n_samples < 2 {
        return Err(Error::contract("measure_tracking", "need at least 2 samples".to_string()));
    }
    let n_cond = generator.config().n_conditions;
    let conds: Vec<usize> = (0..n_samples).map(|_| rng.gen_range(0..n_cond)).collect();
    let grid = CoarseGrid::default_four();
    let z = standard_matrix(n_samples, rng)?;
    let x0 = stochastic_anchor_sample(generator, &grid, &z, &conds, rng)?;
    let x1 = standard_matrix(n_samples, rng)?;
    let ts: Vec<f64> =
        (0..n_samples).map(|_| rng.gen_range(schedule.t_min()..1.0)).collect();
    let stats = tracking_field_stats(
        |x, ts| generator.forward(x, ts, &conds),
        |x, ts| fake.forward(x, ts, &conds),
        schedule,
        &x0,
        &x1,
        &ts,
    )?;

    let euler = dense_grid(64)?;
    let z_f = standard_matrix(n_samples, rng)?;
    let fake_out = euler_sample(fake, &euler, &z_f, &conds)?;
    let z_r = standard_matrix(n_samples, rng)?;
    let teacher_out = euler_sample(teacher, &euler, &z_r, &conds)?;
    let fit_g = gaussian_fit(&x0)?;
    let kl_gf = gaussian_kl(&fit_g, &gaussian_fit(&fake_out)?)?;
    let kl_gr = gaussian_kl(&fit_g, &gaussian_fit(&teacher_out)?)?;

    Ok(TrackRecord {
        k: 0,
        e_pre_k: e_k,
        e_k,
        delta_k: stats.delta,
        dbar_k: stats.dbar,
        betabar_k: stats.betabar,
        dtilde_k: stats.dtilde_sq.sqrt(),
        betatilde_k: stats.betatilde_sq.sqrt(),
        eps_k: 2.0 * c_estimate * (stats.dtilde_sq + stats.betatilde_sq),
        kl_gf,
        kl_gr,
        theta_step: 0.0,
        proxy: true,
    })
}

fn standard_matrix<R: Rng>(n: usize, rng: &mut R) -> Result<Tensor> {
    Tensor::matrix(n, 2, (0..2 * n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Lipschitz-type constants relating parameter distance to field distance:
/// `l` for the fake-model family, `c_v` for the generator family, `c_vhat`
/// for the induced target field.
#[derive(Clone, Copy, Debug)]
pub struct TheoryConstants {
    pub l: f64,
    pub c_v: f64,
    pub c_vhat: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct RoundSlacks {
    pub k: usize,
    /// rhs minus lhs for the distance, field-gap, and tracking inequalities.
    pub slack: [f64; 3],
}

#[derive(Clone, Debug)]
pub struct RecursionReport {
    pub rounds: usize,
    pub per_round: Vec<RoundSlacks>,
    pub pass_fraction: [f64; 3],
    pub worst_slack: [f64; 3],
}

const SLACK_TOL: f64 = -1e-10;

/// Evaluates the three one-step inequalities at each recorded round, using
/// the round's own pre-blend distance e and generator step s: (1) e' <=
/// lambda e + lambda s, (2) Delta' <= L lambda e + (L(1-lambda) + C_v) s,
/// (3) dbar' <= L lambda e + betabar + (L(1-lambda) + 2 C_v + C_vhat) s.
/// Primed values are the round's post-blend measurements; betabar comes from
/// the previous record, whose generator equals the one entering this round.
pub fn check_recursions(
    trace: &[TrackRecord],
    lambda: f64,
    constants: &TheoryConstants,
) -> Result<RecursionReport> {
    if trace.len() < 2 {
        return Err(Error::contract(
            "check_recursions",
            format!("need at least 2 records, got {}", trace.len()),
        ));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(
            "check_recursions",
            format!("lambda {lambda} outside [0, 1]"),
        ));
    }
    let TheoryConstants { l, c_v, c_vhat } = *constants;
    let mut per_round = Vec::with_capacity(trace.len() - 1);
    let mut passes = [0usize; 3];
    let mut worst = [f64::INFINITY; 3];
    for w in trace.windows(2) {
        let (prev, cur) = (&w[0], &w[1]);
        let s = cur.theta_step;
        let e = cur.e_pre_k;
        let slack = [
            lambda * e + lambda * s - cur.e_k,
            l * lambda * e + (l * (1.0 - lambda) + c_v) * s - cur.delta_k,
            l * lambda * e
                + prev.betabar_k
                + (l * (1.0 - lambda) + 2.0 * c_v + c_vhat) * s
                - cur.dbar_k,
        ];
        for (i, &sl) in slack.iter().enumerate() {
            if sl >= SLACK_TOL {
                passes[i] += 1;
            }
            worst[i] = worst[i].min(sl);
        }
        per_round.push(RoundSlacks { k: cur.k, slack });
    }
    let rounds = trace.len() - 1;
    Ok(RecursionReport {
        rounds,
        per_round,
        pass_fraction: passes.map(|p| p as f64 / rounds as f64),
        worst_slack: worst,
    })
}

/// Raw empirical Lipschitz ratio of a parametric field family: the max over
/// probe pairs of mean field distance divided by parameter distance. The
/// family is evaluated at the given (t, points) pairs.
pub fn estimate_field_lipschitz<F, R: Rng>(
    family: &F,
    reference: &ParamVector,
    eval_points: &[(f64, Tensor)],
    probe_scale: f64,
    n_probes: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&ParamVector, &Tensor, f64) -> Result<Tensor>,
{
    if !(probe_scale > 0.0) || n_probes == 0 || eval_points.is_empty() {
        return Err(Error::contract(
            "estimate_field_lipschitz",
            "need positive probe scale, at least one probe, and eval points".to_string(),
        ));
    }
    let layout = reference.layout_arc();
    let len = reference.len();
    let mut worst = 0.0f64;
    for _ in 0..n_probes {
        let mut a = reference.flat().to_vec();
        let mut b = reference.flat().to_vec();
        for i in 0..len {
            a[i] += probe_scale * rng.sample::<f64, _>(StandardNormal);
            b[i] += probe_scale * rng.sample::<f64, _>(StandardNormal);
        }
        let pa = ParamVector::from_flat(layout.clone(), a)?;
        let pb = ParamVector::from_flat(layout.clone(), b)?;
        let dist = param_distance(&pa, &pb)?;
        if dist < 1e-12 {
            continue;
        }
        let mut gap_sum = 0.0;
        let mut count = 0usize;
        for (t, points) in eval_points {
            let va = family(&pa, points, *t)?;
            let vb = family(&pb, points, *t)?;
            for i in 0..points.rows() {
                let dx = va.row(i)[0] - vb.row(i)[0];
                let dy = va.row(i)[1] - vb.row(i)[1];
                gap_sum += (dx * dx + dy * dy).sqrt();
                count += 1;
            }
        }
        worst = worst.max(gap_sum / count as f64 / dist);
    }
    Ok(worst)
}

/// Parameter-to-field sensitivity of the Gaussian induced target field with
/// respect to the data mean, averaged over the grid: the operator norm of
/// -[I + (1-t)(tI - (1-t) Sigma) S_t^{-1}].
fn mean_sensitivity(cov: Mat2, t_grid: &[f64]) -> Result<f64> {
    grid_mean(t_grid, |t| {
        let st = mat_add(mat_scale(cov, (1.0 - t) * (1.0 - t)), mat_scale(IDENTITY, t * t));
        let st_inv = mat_inv("mean_sensitivity", st)?;
        let cross = mat_sub(mat_scale(IDENTITY, t), mat_scale(cov, 1.0 - t));
        let m = mat_add(IDENTITY, mat_scale(mat_mul(cross, st_inv), 1.0 - t));
        Ok(sym_max_abs_eig(m))
    })
}

/// Estimates (L, C_v, C_vhat) around a trained generator: L from probe pairs
/// on the network family (doubled for safety), C_v set equal to L because
/// generator and fake share the architecture, and C_vhat from the
/// mean-sensitivity of the induced field of a Gaussian fit to generator
/// output (also doubled).
pub fn estimate_constants<R: Rng>(
    generator: &VelocityNet,
    schedule: &Schedule,
    probe_scale: f64,
    n_probes: usize,
    rng: &mut R,
) -> Result<TheoryConstants> {
    let n_cond = generator.config().n_conditions;
    let n = 256;
    let conds: Vec<usize> = (0..n).map(|_| rng.gen_range(0..n_cond)).collect();
    let grid = CoarseGrid::default_four();
    let z = standard_matrix(n, rng)?;
    let x0 = stochastic_anchor_sample(generator, &grid, &z, &conds, rng)?;

    let mut eval_points = Vec::new();
    for i in 0..16 {
        let t = schedule.t_min() + (1.0 - schedule.t_min()) * i as f64 / 15.0;
        let noise = standard_matrix(n, rng)?;
        let xt = crate::schedules::forward_diffuse(schedule, &x0, t, &noise)?;
        eval_points.push((t, xt));
    }

    let cfg = generator.config().clone();
    let conds_eval = conds.clone();
    let family = move |params: &ParamVector, x: &Tensor, t: f64| -> Result<Tensor> {
        let net = VelocityNet::from_params(cfg.clone(), params.clone())?;
        net.forward(x, &vec![t; x.rows()], &conds_eval[..x.rows()])
    };
    let raw = estimate_field_lipschitz(
        &family,
        generator.params(),
        &eval_points,
        probe_scale,
        n_probes,
        rng,
    )?;
    let l = 2.0 * raw;

    let fit = gaussian_fit(&x0)?;
    let t_grid = theory_t_grid(schedule);
    let c_vhat = 2.0 * mean_sensitivity(fit.cov(), &t_grid)?;
    Ok(TheoryConstants { l, c_v: l, c_vhat })
}

/// Parameters of a scripted mean-translation run on the unit-covariance
/// Gaussian family. The generator mean walks toward the teacher mean with
/// geometrically decaying steps while the fake parameters track by blending;
/// constant field biases give nonzero self-consistency errors.
#[derive(Clone, Copy, Debug)]
pub struct ScriptedTraceConfig {
    pub theta0: Vec2,
    pub phi0: Vec2,
    pub bias_theta: Vec2,
    pub bias_phi0: Vec2,
    pub teacher_mean: Vec2,
    pub lambda: f64,
    pub step0: f64,
    pub decay: f64,
    pub rounds: usize,
    pub c_estimate: f64,
}

/// Exact tracking trace on the unit-covariance family, plus valid constants
/// computed on the same quadrature grid. The field of mean m is
/// v(x, t) = -m + (2t-1)/sbar (x - (1-t)m) with sbar = (1-t)^2 + t^2, so two
/// fields differ by the constant -(t/sbar) (m_a - m_b) plus any bias gap,
/// and every expectation below is a one-dimensional time integral.
pub fn scripted_gaussian_trace(
    cfg: &ScriptedTraceConfig,
    schedule: &Schedule,
) -> Result<(Vec<TrackRecord>, TheoryConstants)> {
    if cfg.rounds < 2 {
        return Err(Error::contract(
            "scripted_gaussian_trace",
            "need at least 2 rounds".to_string(),
        ));
    }
    if !(0.0..=1.0).contains(&cfg.lambda) || !(cfg.decay > 0.0 && cfg.decay <= 1.0) {
        return Err(Error::contract(
            "scripted_gaussian_trace",
            "lambda in [0,1] and decay in (0,1] required".to_string(),
        ));
    }
    let grid = uniform_grid(schedule.t_min(), 1.0, 2001);
    let coeff = |t: f64| t / ((1.0 - t) * (1.0 - t) + t * t);
    let l = grid_mean(&grid, |t| Ok((coeff(t).powi(2) + 1.0).sqrt()))?;
    let c_vhat = grid_mean(&grid, |t| Ok(coeff(t)))?;
    let constants = TheoryConstants { l, c_v: l, c_vhat };
    let e_c1 = c_vhat;
    let e_c2 = grid_mean(&grid, |t| Ok(coeff(t).powi(2)))?;

    let mut theta = cfg.theta0;
    let mut phi = cfg.phi0;
    let mut bias_phi = cfg.bias_phi0;
    let mut records = Vec::with_capacity(cfg.rounds);
    for k in 0..cfg.rounds {
        let dm_pre = vec_sub(phi, theta);
        let db_pre = vec_sub(bias_phi, cfg.bias_theta);
        let e_pre_k = (vec_dot(dm_pre, dm_pre) + vec_dot(db_pre, db_pre)).sqrt();
        let to_teacher = vec_sub(cfg.teacher_mean, theta);
        let dist = vec_norm(to_teacher);
        let step_len = cfg.step0 * cfg.decay.powi(k as i32);
        let step = if dist > 1e-12 {
            [to_teacher[0] / dist * step_len, to_teacher[1] / dist * step_len]
        } else {
            [0.0, 0.0]
        };
        let moved = vec_norm(step);
        theta = [theta[0] + step[0], theta[1] + step[1]];
        phi = [
            cfg.lambda * phi[0] + (1.0 - cfg.lambda) * theta[0],
            cfg.lambda * phi[1] + (1.0 - cfg.lambda) * theta[1],
        ];
        bias_phi = [
            cfg.lambda * bias_phi[0] + (1.0 - cfg.lambda) * cfg.bias_theta[0],
            cfg.lambda * bias_phi[1] + (1.0 - cfg.lambda) * cfg.bias_theta[1],
        ];
        let dm = vec_sub(phi, theta);
        let db = vec_sub(bias_phi, cfg.bias_theta);
        let e_k = (vec_dot(dm, dm) + vec_dot(db, db)).sqrt();
        let gap_norm = |offset: Vec2| {
            grid_mean(&grid, |t| {
                let c = coeff(t);
                Ok((c * c * vec_dot(dm, dm) - 2.0 * c * vec_dot(dm, offset)
                    + vec_dot(offset, offset))
                .max(0.0)
                .sqrt())
            })
        };
        let delta_k = gap_norm(db)?;
        let dbar_k = gap_norm(bias_phi)?;
        let betabar_k = vec_norm(cfg.bias_theta);
        let dtilde_sq = e_c2 * vec_dot(dm, dm) - 2.0 * e_c1 * vec_dot(dm, bias_phi)
            + vec_dot(bias_phi, bias_phi);
        let betatilde_sq = vec_dot(cfg.bias_theta, cfg.bias_theta);
        let gr = vec_sub(theta, cfg.teacher_mean);
        records.push(TrackRecord {
            k,
            e_pre_k,
            e_k,
            delta_k,
            dbar_k,
            betabar_k,
            dtilde_k: dtilde_sq.max(0.0).sqrt(),
            betatilde_k: betatilde_sq.sqrt(),
            eps_k: 2.0 * cfg.c_estimate * (dtilde_sq.max(0.0) + betatilde_sq),
            kl_gf: 0.5 * vec_dot(dm, dm),
            kl_gr: 0.5 * vec_dot(gr, gr),
            theta_step: moved,
            proxy: false,
        });
    }
    Ok((records, constants))
}

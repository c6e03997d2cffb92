//! Oracle checks for the metrics: an independent eigendecomposition route for
//! the Fréchet distance, closed-form Gaussian KL references for the KDE
//! estimator, analytic reconstruction-error curves, and closed-form Euler
//! drift on a linear field.

use flowdistill::data::{ConditionMode, DatasetSpec, Family, MixtureComponent};
use flowdistill::metrics::{
    frechet_gaussian_distance, kl_estimate, mean_cov, step_consistency, xi_profile,
    xi_profile_raw,
};
use flowdistill::ndgrad::Tensor;
use flowdistill::samplers::{CoarseGrid, VelocityField};
use flowdistill::schedules::Schedule;
use flowdistill::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Mat2 = [[f64; 2]; 2];

fn eig_sym(c: Mat2) -> ([f64; 2], Mat2) {
    let half_tr = 0.5 * (c[0][0] + c[1][1]);
    let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
    let gap = (half_tr * half_tr - det).max(0.0).sqrt();
    let l = [half_tr + gap, half_tr - gap];
    // Pick the better-conditioned eigenvector candidate for the top value.
    let cand_a = [c[0][1], l[0] - c[0][0]];
    let cand_b = [l[0] - c[1][1], c[1][0]];
    let na = cand_a[0] * cand_a[0] + cand_a[1] * cand_a[1];
    let nb = cand_b[0] * cand_b[0] + cand_b[1] * cand_b[1];
    let v = if na >= nb { cand_a } else { cand_b };
    let n = (v[0] * v[0] + v[1] * v[1]).sqrt();
    let v = if n > 0.0 { [v[0] / n, v[1] / n] } else { [1.0, 0.0] };
    (l, [[v[0], -v[1]], [v[1], v[0]]])
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

fn sqrtm_sym(c: Mat2) -> Mat2 {
    let (l, v) = eig_sym(c);
    let d = [[l[0].max(0.0).sqrt(), 0.0], [0.0, l[1].max(0.0).sqrt()]];
    let vt = [[v[0][0], v[1][0]], [v[0][1], v[1][1]]];
    mat_mul(mat_mul(v, d), vt)
}

fn fd_from_moments(ma: [f64; 2], ca: Mat2, mb: [f64; 2], cb: Mat2) -> f64 {
    let sa = sqrtm_sym(ca);
    let inner = mat_mul(mat_mul(sa, cb), sa);
    let (l, _) = eig_sym(inner);
    let cross = l[0].max(0.0).sqrt() + l[1].max(0.0).sqrt();
    let dm2 = (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2);
    dm2 + ca[0][0] + ca[1][1] + cb[0][0] + cb[1][1] - 2.0 * cross
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    let shift = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
    let a = rng.gen_range(0.3..2.0);
    let b = rng.gen_range(-0.8..0.8);
    let c = rng.gen_range(0.3..2.0);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let g0: f64 = rng.sample(StandardNormal);
        let g1: f64 = rng.sample(StandardNormal);
        data.push(shift[0] + a * g0);
        data.push(shift[1] + b * g0 + c * g1);
    }
    Tensor::matrix(n, 2, data).unwrap()
}

#[test]
fn frechet_distance_agrees_with_an_eigendecomposition_route() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let a = random_cloud(&mut rng, 64);
        let b = random_cloud(&mut rng, 64);
        let got = frechet_gaussian_distance(&a, &b).unwrap();
        let (ma, ca) = mean_cov(&a).unwrap();
        let (mb, cb) = mean_cov(&b).unwrap();
        let want = fd_from_moments(ma, ca, mb, cb);
        assert!(
            (got - want.max(0.0)).abs() < 1e-8,
            "trace identity {got} vs eigendecomposition {want}"
        );
    }
}

fn single_gaussian_spec(mean: [f64; 2], cov: Mat2) -> DatasetSpec {
    DatasetSpec::new(
        Family::GaussianMixture {
            components: vec![MixtureComponent { weight: 1.0, mean, cov }],
        },
        ConditionMode::Unconditional,
    )
    .unwrap()
}

#[test]
fn kl_estimate_is_near_zero_against_the_sampled_mixture() {
    let spec = DatasetSpec::new(
        Family::GaussianMixture {
            components: vec![
                MixtureComponent {
                    weight: 0.5,
                    mean: [-1.5, 0.0],
                    cov: [[1.0, 0.0], [0.0, 1.0]],
                },
                MixtureComponent {
                    weight: 0.5,
                    mean: [1.5, 0.0],
                    cov: [[1.0, 0.0], [0.0, 1.0]],
                },
            ],
        },
        ConditionMode::Unconditional,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (samples, _) = spec.sample_batch(10_000, &mut rng).unwrap();
    let kl = kl_estimate(&samples, &spec, None).unwrap();
    assert!(kl.abs() <= 0.05, "self KL estimate {kl}");
}

#[test]
fn kl_estimate_tracks_the_closed_form_between_gaussians() {
    let c1: Mat2 = [[0.8, 0.2], [0.2, 0.5]];
    let c2: Mat2 = [[1.5, 0.3], [0.3, 0.8]];
    let m1 = [0.3, -0.2];
    let m2 = [2.5, 1.0];
    let model = single_gaussian_spec(m1, c1);
    let target = single_gaussian_spec(m2, c2);
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (samples, _) = model.sample_batch(10_000, &mut rng).unwrap();
    let est = kl_estimate(&samples, &target, None).unwrap();

    let det1 = c1[0][0] * c1[1][1] - c1[0][1] * c1[1][0];
    let det2 = c2[0][0] * c2[1][1] - c2[0][1] * c2[1][0];
    let inv2: Mat2 = [
        [c2[1][1] / det2, -c2[0][1] / det2],
        [-c2[1][0] / det2, c2[0][0] / det2],
    ];
    let prod = mat_mul(inv2, c1);
    let dm = [m1[0] - m2[0], m1[1] - m2[1]];
    let quad = dm[0] * (inv2[0][0] * dm[0] + inv2[0][1] * dm[1])
        + dm[1] * (inv2[1][0] * dm[0] + inv2[1][1] * dm[1]);
    let closed = 0.5 * (prod[0][0] + prod[1][1] + quad - 2.0 + (det2 / det1).ln());
    assert!(
        (est - closed).abs() <= 0.15 * closed,
        "estimate {est} vs closed form {closed}"
    );
}

#[test]
fn kl_estimate_accepts_an_explicit_bandwidth() {
    let spec = single_gaussian_spec([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]);
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let (samples, _) = spec.sample_batch(2000, &mut rng).unwrap();
    let kl = kl_estimate(&samples, &spec, Some(0.3)).unwrap();
    assert!(kl.is_finite());
}

/// Exact velocity field for unit-covariance standard normal data under the
/// straight-path kernel: v(x, t) = (2t - 1) x / ((1 - t)^2 + t^2).
struct UnitGaussianField;

impl VelocityField for UnitGaussianField {
    fn velocity_batch(&self, x: &Tensor, t: f64, _conds: &[usize]) -> Result<Tensor> {
        let sbar = (1.0 - t).powi(2) + t * t;
        Ok(x.map(|v| v * (2.0 * t - 1.0) / sbar))
    }
}

#[test]
fn reconstruction_profile_matches_the_posterior_variance_curve() {
    let field = UnitGaussianField;
    let schedule = Schedule::fm_ot();
    let spec = single_gaussian_spec([0.0, 0.0], [[1.0, 0.0], [0.0, 1.0]]);
    let grid = [schedule.t_min(), 0.1, 0.3, 0.5, 0.7, 0.9];
    let n = 20_000;
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let raw = xi_profile_raw(&field, &schedule, &spec, &grid, n, &mut rng).unwrap();
    for &(t, value) in &raw {
        let sbar = (1.0 - t).powi(2) + t * t;
        let per_coord = t * t / sbar;
        let want = 2.0 * per_coord;
        let three_se = 6.0 * per_coord / (n as f64).sqrt();
        assert!(
            (value - want).abs() <= three_se,
            "t={t}: measured {value}, analytic {want}, band {three_se}"
        );
    }
    assert!(raw[0].1 < 1e-4, "error at the time floor {}", raw[0].1);

    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let normalized = xi_profile(&field, &schedule, &spec, &grid, n, &mut rng).unwrap();
    assert!(normalized.iter().any(|&(_, v)| v == 1.0));
    assert!(normalized.iter().all(|&(_, v)| (0.0..=1.0).contains(&v)));

    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let replay = xi_profile(&field, &schedule, &spec, &grid, n, &mut rng).unwrap();
    assert_eq!(normalized, replay);
}

struct ConstField([f64; 2]);

impl VelocityField for ConstField {
    fn velocity_batch(&self, x: &Tensor, _t: f64, _conds: &[usize]) -> Result<Tensor> {
        let n = x.rows();
        Tensor::matrix(n, 2, (0..n).flat_map(|_| self.0).collect())
    }
}

struct IdentityField;

impl VelocityField for IdentityField {
    fn velocity_batch(&self, x: &Tensor, _t: f64, _conds: &[usize]) -> Result<Tensor> {
        Ok(x.clone())
    }
}

#[test]
fn step_drift_is_zero_for_a_constant_field() {
    let grid = CoarseGrid::default_four();
    let conds = vec![0usize; 64];
    let drifts =
        step_consistency(&ConstField([0.7, -0.2]), &grid, &[4, 8, 16], &conds, &[1, 2]).unwrap();
    for ((a, b), d) in drifts {
        assert!(d < 1e-12, "pair ({a},{b}): drift {d}");
    }
}

#[test]
fn step_drift_matches_the_closed_form_on_a_linear_field() {
    let grid = CoarseGrid::default_four();
    let n = 256;
    let conds = vec![0usize; n];
    let seeds = [3u64, 4, 5, 6, 7];
    let drifts = step_consistency(&IdentityField, &grid, &[4, 8, 16], &conds, &seeds).unwrap();
    let endpoint_scale = |c: usize| (1.0 - 1.0 / c as f64).powi(c as i32);
    let mean_norm = (std::f64::consts::PI / 2.0).sqrt();
    for ((a, b), d) in drifts {
        let want = (endpoint_scale(a) - endpoint_scale(b)).abs() * mean_norm;
        assert!(
            (d - want).abs() <= 0.1 * want,
            "pair ({a},{b}): drift {d}, closed form {want}"
        );
    }
}

#[test]
fn step_drift_shrinks_under_refinement_of_a_smooth_field() {
    let grid = CoarseGrid::default_four();
    let conds = vec![0usize; 128];
    let seeds = [0u64, 1, 2, 3, 4];
    let drifts =
        step_consistency(&UnitGaussianField, &grid, &[4, 8, 16], &conds, &seeds).unwrap();
    let get = |a: usize, b: usize| {
        drifts
            .iter()
            .find(|&&(p, _)| p == (a, b))
            .map(|&(_, d)| d)
            .unwrap()
    };
    assert!(get(4, 16) >= get(8, 16), "coarse {} fine {}", get(4, 16), get(8, 16));
}

#[test]
fn step_consistency_rejects_counts_that_do_not_refine_the_grid() {
    let grid = CoarseGrid::default_four();
    let conds = vec![0usize; 4];
    assert!(step_consistency(&IdentityField, &grid, &[4, 6], &conds, &[0]).is_err());
    let skewed = CoarseGrid::new(vec![0.1, 0.2, 0.3, 1.0]).unwrap();
    assert!(step_consistency(&IdentityField, &skewed, &[4, 8], &conds, &[0]).is_err());
}

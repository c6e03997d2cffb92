//! Divergences and diagnostics: Fréchet-Gaussian distance, MMD, a KDE-based
//! KL estimate, reconstruction-error profiles, step-count consistency, and
//! per-condition diversity.

use crate::data::DatasetSpec;
use crate::ndgrad::Tensor;
use crate::samplers::{dense_grid, euler_sample, CoarseGrid, VelocityField};
use crate::schedules::{self, Schedule};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Sample mean and covariance (unbiased) of an n x 2 point set.
pub fn mean_cov(x: &Tensor) -> Result<([f64; 2], [[f64; 2]; 2])> {
    if x.rank() != 2 || x.cols() != 2 || x.rows() < 2 {
        return Err(Error::contract(
            "mean_cov",
            format!("need at least 2 points of dimension 2, got {:?}", x.shape()),
        ));
    }
    let n = x.rows();
    let mut m = [0.0f64; 2];
    for i in 0..n {
        m[0] += x.row(i)[0];
        m[1] += x.row(i)[1];
    }
    m[0] /= n as f64;
    m[1] /= n as f64;
    let mut c = [[0.0f64; 2]; 2];
    for i in 0..n {
        let dx = x.row(i)[0] - m[0];
        let dy = x.row(i)[1] - m[1];
        c[0][0] += dx * dx;
        c[0][1] += dx * dy;
        c[1][1] += dy * dy;
    }
    let denom = n as f64 - 1.0;
    c[0][0] /= denom;
    c[0][1] /= denom;
    c[1][1] /= denom;
    c[1][0] = c[0][1];
    Ok((m, c))
}

fn det2(c: &[[f64; 2]; 2]) -> f64 {
    c[0][0] * c[1][1] - c[0][1] * c[1][0]
}

/// Fréchet distance between the Gaussian fits of two point sets, plus a flag
/// marking that a near-singular covariance was regularized with 1e-8 I.
///
/// The cross term uses the 2x2 identity
/// tr((A B)^{1/2}) = sqrt(tr(A B) + 2 sqrt(det A det B)),
/// which follows from writing the trace as the sum of the two eigenvalue
/// square roots.
pub fn frechet_gaussian_distance_flagged(a: &Tensor, b: &Tensor) -> Result<(f64, bool)> {
    for (name, s) in [("a", a), ("b", b)] {
        if s.rows() < 32 {
            return Err(Error::contract(
                "frechet_gaussian_distance",
                format!("sample set {name} needs at least 32 points, got {}", s.rows()),
            ));
        }
    }
    let (ma, mut ca) = mean_cov(a)?;
    let (mb, mut cb) = mean_cov(b)?;
    let mut regularized = false;
    for c in [&mut ca, &mut cb] {
        if det2(c) < 1e-12 {
            c[0][0] += 1e-8;
            c[1][1] += 1e-8;
            regularized = true;
        }
    }
    let dm2 = (ma[0] - mb[0]).powi(2) + (ma[1] - mb[1]).powi(2);
    let tr_ab = ca[0][0] * cb[0][0]
        + ca[0][1] * cb[1][0]
        + ca[1][0] * cb[0][1]
        + ca[1][1] * cb[1][1];
    let cross = (tr_ab + 2.0 * (det2(&ca) * det2(&cb)).max(0.0).sqrt()).max(0.0).sqrt();
    let fd = dm2 + ca[0][0] + ca[1][1] + cb[0][0] + cb[1][1] - 2.0 * cross;
    Ok((fd.max(0.0), regularized))
}

pub fn frechet_gaussian_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok(frechet_gaussian_distance_flagged(a, b)?.0)
}

/// RBF kernel bandwidth: a fixed value or the median pairwise distance of
/// the pooled sets (computed on at most the first 512 pooled points).
#[derive(Clone, Copy, Debug)]
pub enum Bandwidth {
    Fixed(f64),
    MedianHeuristic,
}

fn resolve_bandwidth(a: &Tensor, b: &Tensor, bw: Bandwidth) -> Result<f64> {
    match bw {
        Bandwidth::Fixed(h) => {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::contract(
                    "mmd_rbf",
                    format!("bandwidth must be positive, got {h}"),
                ));
            }
            Ok(h)
        }
        Bandwidth::MedianHeuristic => {
            let mut pool: Vec<[f64; 2]> = Vec::with_capacity(512);
            for s in [a, b] {
                for i in 0..s.rows() {
                    if pool.len() >= 512 {
                        break;
                    }
                    pool.push([s.row(i)[0], s.row(i)[1]]);
                }
            }
            let mut dists = Vec::with_capacity(pool.len() * (pool.len() - 1) / 2);
            for i in 0..pool.len() {
                for j in i + 1..pool.len() {
                    let dx = pool[i][0] - pool[j][0];
                    let dy = pool[i][1] - pool[j][1];
                    dists.push((dx * dx + dy * dy).sqrt());
                }
            }
            if dists.is_empty() {
                return Err(Error::contract(
                    "mmd_rbf",
                    "median heuristic needs at least two pooled points".to_string(),
                ));
            }
            dists.sort_by(|x, y| x.partial_cmp(y).expect("distances are finite"));
            let mid = dists.len() / 2;
            let med = if dists.len() % 2 == 0 {
                0.5 * (dists[mid - 1] + dists[mid])
            } else {
                dists[mid]
            };
            if med <= 0.0 {
                return Err(Error::numeric(
                    "mmd_rbf",
                    "median pairwise distance is zero; pass a fixed bandwidth".to_string(),
                ));
            }
            Ok(med)
        }
    }
}

fn rbf(x: &[f64], y: &[f64], h: f64) -> f64 {
    let dx = x[0] - y[0];
    let dy = x[1] - y[1];
    (-(dx * dx + dy * dy) / (2.0 * h * h)).exp()
}

/// Unbiased MMD^2 estimate before clamping; sets with fewer than two points
/// contribute zero to their within-set term.
pub fn mmd_rbf_raw(a: &Tensor, b: &Tensor, bw: Bandwidth) -> Result<f64> {
    let h = resolve_bandwidth(a, b, bw)?;
    let m = a.rows();
    let n = b.rows();
    let mut within_a = 0.0;
    if m >= 2 {
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    within_a += rbf(a.row(i), a.row(j), h);
                }
            }
        }
        within_a /= (m * (m - 1)) as f64;
    }
    let mut within_b = 0.0;
    if n >= 2 {
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    within_b += rbf(b.row(i), b.row(j), h);
                }
            }
        }
        within_b /= (n * (n - 1)) as f64;
    }
    let mut cross = 0.0;
    for i in 0..m {
        for j in 0..n {
            cross += rbf(a.row(i), b.row(j), h);
        }
    }
    cross *= 2.0 / (m * n) as f64;
    Ok(within_a + within_b - cross)
}

/// Unbiased MMD^2 with an RBF kernel, clamped at zero.
pub fn mmd_rbf(a: &Tensor, b: &Tensor, bw: Bandwidth) -> Result<f64> {
    Ok(mmd_rbf_raw(a, b, bw)?.max(0.0))
}

/// KL(model || target) estimated as the mean of log p_kde(x) - log p_target(x)
/// over the second half of the model samples, with the KDE fit on the first
/// half so no point scores itself. Bandwidth defaults to Scott's rule.
pub fn kl_estimate(
    model_samples: &Tensor,
    spec: &DatasetSpec,
    kde_bandwidth: Option<f64>,
) -> Result<f64> {
    let n = model_samples.rows();
    if n < 4 {
        return Err(Error::contract(
            "kl_estimate",
            format!("need at least 4 samples, got {n}"),
        ));
    }
    let half = n / 2;
    let fit: Vec<[f64; 2]> =
        (0..half).map(|i| [model_samples.row(i)[0], model_samples.row(i)[1]]).collect();
    let h = match kde_bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => {
            return Err(Error::contract(
                "kl_estimate",
                format!("bandwidth must be positive, got {h}"),
            ))
        }
        None => {
            let mut m = [0.0f64; 2];
            for p in &fit {
                m[0] += p[0];
                m[1] += p[1];
            }
            m[0] /= half as f64;
            m[1] /= half as f64;
            let mut var = 0.0;
            for p in &fit {
                var += (p[0] - m[0]).powi(2) + (p[1] - m[1]).powi(2);
            }
            var /= 2.0 * (half as f64 - 1.0);
            var.sqrt() * (half as f64).powf(-1.0 / 6.0)
        }
    };
    let log_norm = -(2.0 * std::f64::consts::PI * h * h).ln() - (half as f64).ln();
    let mut total = 0.0;
    for i in half..n {
        let x = [model_samples.row(i)[0], model_samples.row(i)[1]];
        // log of the KDE mixture via logsumexp over fit points.
        let mut best = f64::NEG_INFINITY;
        for p in &fit {
            let e = -((x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2)) / (2.0 * h * h);
            if e > best {
                best = e;
            }
        }
        let mut s = 0.0;
        for p in &fit {
            let e = -((x[0] - p[0]).powi(2) + (x[1] - p[1]).powi(2)) / (2.0 * h * h);
            s += (e - best).exp();
        }
        let log_kde = best + s.ln() + log_norm;
        total += log_kde - spec.target_log_density(x)?;
    }
    Ok(total / (n - half) as f64)
}

/// Mean squared one-step reconstruction error over a time grid, raw
/// (unnormalized). For each t: draw data, corrupt to t, invert the field's
/// velocity prediction, and average the squared clean-point error.
pub fn xi_profile_raw<F: VelocityField, R: Rng>(
    field: &F,
    schedule: &Schedule,
    spec: &DatasetSpec,
    t_grid: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    if n == 0 {
        return Err(Error::contract("xi_profile", "need n >= 1".to_string()));
    }
    for &t in t_grid {
        if !(schedule.t_min()..=schedule.t_max()).contains(&t) {
            return Err(Error::contract(
                "xi_profile",
                format!("grid time {t} outside [{}, {}]", schedule.t_min(), schedule.t_max()),
            ));
        }
    }
    let mut out = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        let (x0, conds) = spec.sample_batch(n, rng)?;
        let noise = x0.map(|_| rng.sample(StandardNormal));
        let xt = schedules::forward_diffuse(schedule, &x0, t, &noise)?;
        let v = field.velocity_batch(&xt, t, &conds)?;
        let x0_hat = schedules::velocity_to_x0(schedule, &xt, t, &v)?;
        let mut total = 0.0;
        for i in 0..n {
            let ex = x0_hat.row(i)[0] - x0.row(i)[0];
            let ey = x0_hat.row(i)[1] - x0.row(i)[1];
            total += ex * ex + ey * ey;
        }
        out.push((t, total / n as f64));
    }
    Ok(out)
}

/// [`xi_profile_raw`] normalized so the curve maximum is exactly 1.
pub fn xi_profile<F: VelocityField, R: Rng>(
    field: &F,
    schedule: &Schedule,
    spec: &DatasetSpec,
    t_grid: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<(f64, f64)>> {
    let mut curve = xi_profile_raw(field, schedule, spec, t_grid, n, rng)?;
    let max = curve.iter().map(|&(_, v)| v).fold(0.0f64, f64::max);
    if max > 0.0 {
        for (_, v) in &mut curve {
            *v /= max;
        }
    }
    Ok(curve)
}

/// Mean endpoint distance between Euler runs at different step counts that
/// share the starting noise. Step counts must be multiples of the anchor
/// count of the (uniform) coarse grid so each run refines the same segments.
pub fn step_consistency<F: VelocityField>(
    field: &F,
    grid: &CoarseGrid,
    step_counts: &[usize],
    conds: &[usize],
    seeds: &[u64],
) -> Result<Vec<((usize, usize), f64)>> {
    let k = grid.len();
    let spacing = 1.0 / k as f64;
    for (i, &a) in grid.anchors().iter().enumerate() {
        if (a - (i + 1) as f64 * spacing).abs() > 1e-12 {
            return Err(Error::contract(
                "step_consistency",
                format!("anchor grid must be uniform, got {:?}", grid.anchors()),
            ));
        }
    }
    for &c in step_counts {
        if c == 0 || c % k != 0 {
            return Err(Error::contract(
                "step_consistency",
                format!("step count {c} does not refine a {k}-anchor grid"),
            ));
        }
    }
    if conds.is_empty() || seeds.is_empty() {
        return Err(Error::contract(
            "step_consistency",
            "need at least one condition row and one seed".to_string(),
        ));
    }
    let n = conds.len();
    let mut sums: Vec<((usize, usize), f64)> = Vec::new();
    for i in 0..step_counts.len() {
        for j in i + 1..step_counts.len() {
            sums.push(((step_counts[i], step_counts[j]), 0.0));
        }
    }
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = Tensor::matrix(n, 2, (0..n * 2).map(|_| rng.sample(StandardNormal)).collect())?;
        let endpoints: Vec<Tensor> = step_counts
            .iter()
            .map(|&c| euler_sample(field, &dense_grid(c)?, &z, conds))
            .collect::<Result<_>>()?;
        let mut slot = 0;
        for i in 0..step_counts.len() {
            for j in i + 1..step_counts.len() {
                let mut acc = 0.0;
                for r in 0..n {
                    let dx = endpoints[i].row(r)[0] - endpoints[j].row(r)[0];
                    let dy = endpoints[i].row(r)[1] - endpoints[j].row(r)[1];
                    acc += (dx * dx + dy * dy).sqrt();
                }
                sums[slot].1 += acc / n as f64;
                slot += 1;
            }
        }
    }
    for (_, v) in &mut sums {
        *v /= seeds.len() as f64;
    }
    Ok(sums)
}

/// Mean over condition groups of the mean pairwise Euclidean distance within
/// the group. Groups with fewer than two samples are skipped with a warning
/// on stderr; it is an error if no group qualifies.
pub fn pairwise_diversity(x: &Tensor, conds: &[usize]) -> Result<f64> {
    if x.rows() != conds.len() {
        return Err(Error::contract(
            "pairwise_diversity",
            "samples and labels must have the same length".to_string(),
        ));
    }
    let max_label = conds.iter().copied().max().unwrap_or(0);
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); max_label + 1];
    for (i, &c) in conds.iter().enumerate() {
        groups[c].push(i);
    }
    let mut total = 0.0;
    let mut counted = 0usize;
    for (label, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        if rows.len() < 2 {
            eprintln!("warning: pairwise_diversity skipping singleton condition {label}");
            continue;
        }
        let mut acc = 0.0;
        let mut pairs = 0usize;
        for (ai, &i) in rows.iter().enumerate() {
            for &j in &rows[ai + 1..] {
                let dx = x.row(i)[0] - x.row(j)[0];
                let dy = x.row(i)[1] - x.row(j)[1];
                acc += (dx * dx + dy * dy).sqrt();
                pairs += 1;
            }
        }
        total += acc / pairs as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::contract(
            "pairwise_diversity",
            "every condition group is a singleton".to_string(),
        ));
    }
    Ok(total / counted as f64)
}

/// One evaluation snapshot of a trained generator.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub fd: f64,
    pub mmd: f64,
    pub kl_est: Option<f64>,
    pub xi_curve: Vec<(f64, f64)>,
    pub step_drift: Vec<((usize, usize), f64)>,
    pub diversity: f64,
}

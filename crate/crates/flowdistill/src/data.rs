//! Conditional 2D synthetic distributions with analytic log-densities.
//!
//! Every dataset is described by a [`DatasetSpec`]: a family (Gaussian
//! mixture, two moons, checkerboard), a conditioning mode, and an affine
//! standardization (shift and isotropic scale) applied to every sample.
//! Standardization constants come from the families' closed-form moments, so
//! a standardized spec has zero mean and unit average coordinate variance
//! exactly, not just in expectation over a fitting batch.

use crate::ndgrad::Tensor;
use crate::{Error, Result};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConditionMode {
    Unconditional,
    ComponentLabel,
}

/// One Gaussian mixture component with full 2x2 covariance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: [f64; 2],
    pub cov: [[f64; 2]; 2],
}

impl MixtureComponent {
    fn validate(&self, idx: usize) -> Result<()> {
        if !(self.weight > 0.0 && self.weight.is_finite()) {
            return Err(Error::contract(
                "DatasetSpec::validate",
                format!("component {idx} weight must be positive, got {}", self.weight),
            ));
        }
        let [[a, b], [c, d]] = self.cov;
        if (b - c).abs() > 1e-12 {
            return Err(Error::contract(
                "DatasetSpec::validate",
                format!("component {idx} covariance not symmetric: {b} vs {c}"),
            ));
        }
        if !(a > 0.0 && a * d - b * b > 0.0) {
            return Err(Error::contract(
                "DatasetSpec::validate",
                format!("component {idx} covariance not positive definite"),
            ));
        }
        Ok(())
    }

    /// Lower Cholesky factor, valid because validate() enforces SPD.
    fn chol(&self) -> [f64; 3] {
        let [[a, b], [_, d]] = self.cov;
        let l11 = a.sqrt();
        let l21 = b / l11;
        let l22 = (d - l21 * l21).sqrt();
        [l11, l21, l22]
    }

    fn log_density(&self, x: [f64; 2]) -> f64 {
        let [[a, b], [_, d]] = self.cov;
        let det = a * d - b * b;
        let dx = x[0] - self.mean[0];
        let dy = x[1] - self.mean[1];
        let quad = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
        -(2.0 * PI).ln() - 0.5 * det.ln() - 0.5 * quad
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum Family {
    GaussianMixture { components: Vec<MixtureComponent> },
    TwoMoons { noise_std: f64 },
    Checkerboard,
}

/// A sampleable 2D distribution plus conditioning and standardization.
///
/// Samples are `(x - shift) / scale` of raw family draws. `standardized`
/// constructors pick shift and scale from analytic moments; the defaults
/// (shift 0, scale 1) leave the family untouched.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub family: Family,
    pub condition_mode: ConditionMode,
    #[serde(default = "zero_shift")]
    pub shift: [f64; 2],
    #[serde(default = "unit_scale")]
    pub scale: f64,
}

fn zero_shift() -> [f64; 2] {
    [0.0, 0.0]
}

fn unit_scale() -> f64 {
    1.0
}

/// Checkerboard support: the 8 unit cells of even (column + row) parity on
/// [-2, 2]^2, listed row-major from the bottom-left.
fn checker_cells() -> Vec<[f64; 2]> {
    let mut cells = Vec::with_capacity(8);
    for j in 0..4 {
        for i in 0..4 {
            if (i + j) % 2 == 0 {
                cells.push([-2.0 + i as f64, -2.0 + j as f64]);
            }
        }
    }
    cells
}

impl DatasetSpec {
    pub fn new(family: Family, condition_mode: ConditionMode) -> Result<Self> {
        let spec = DatasetSpec { family, condition_mode, shift: zero_shift(), scale: unit_scale() };
        spec.validate()?;
        Ok(spec)
    }

    /// Like [`DatasetSpec::new`] but with shift and scale set so samples have
    /// zero mean and unit average coordinate variance.
    pub fn standardized(family: Family, condition_mode: ConditionMode) -> Result<Self> {
        let mut spec = DatasetSpec::new(family, condition_mode)?;
        let (mean, var) = spec.raw_moments();
        spec.shift = mean;
        spec.scale = (0.5 * (var[0] + var[1])).sqrt();
        Ok(spec)
    }

    /// Default benchmark: 8 equal-weight Gaussians on a circle of radius 4
    /// with isotropic 0.3^2 covariance, component-label conditioning,
    /// standardized.
    pub fn eight_mode_circle() -> Self {
        let components = (0..8)
            .map(|i| {
                let angle = 2.0 * PI * i as f64 / 8.0;
                MixtureComponent {
                    weight: 0.125,
                    mean: [4.0 * angle.cos(), 4.0 * angle.sin()],
                    cov: [[0.09, 0.0], [0.0, 0.09]],
                }
            })
            .collect();
        DatasetSpec::standardized(
            Family::GaussianMixture { components },
            ConditionMode::ComponentLabel,
        )
        .expect("benchmark spec is valid")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::contract(
                "DatasetSpec::validate",
                format!("scale must be positive, got {}", self.scale),
            ));
        }
        match &self.family {
            Family::GaussianMixture { components } => {
                if components.is_empty() {
                    return Err(Error::contract(
                        "DatasetSpec::validate",
                        "mixture needs at least one component".to_string(),
                    ));
                }
                for (i, c) in components.iter().enumerate() {
                    c.validate(i)?;
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if (total - 1.0).abs() > 1e-12 {
                    return Err(Error::contract(
                        "DatasetSpec::validate",
                        format!("mixture weights sum to {total}, expected 1"),
                    ));
                }
            }
            Family::TwoMoons { noise_std } => {
                if !(*noise_std >= 0.0 && noise_std.is_finite()) {
                    return Err(Error::contract(
                        "DatasetSpec::validate",
                        format!("noise_std must be nonnegative, got {noise_std}"),
                    ));
                }
            }
            Family::Checkerboard => {}
        }
        Ok(())
    }

    /// Number of distinct condition labels this spec can emit.
    pub fn n_conditions(&self) -> usize {
        match self.condition_mode {
            ConditionMode::Unconditional => 1,
            ConditionMode::ComponentLabel => match &self.family {
                Family::GaussianMixture { components } => components.len(),
                Family::TwoMoons { .. } => 2,
                Family::Checkerboard => 8,
            },
        }
    }

    /// Mean and per-coordinate variance of the raw (unshifted) family.
    fn raw_moments(&self) -> ([f64; 2], [f64; 2]) {
        match &self.family {
            Family::GaussianMixture { components } => {
                let mut mean = [0.0; 2];
                for c in components {
                    mean[0] += c.weight * c.mean[0];
                    mean[1] += c.weight * c.mean[1];
                }
                let mut var = [0.0; 2];
                for c in components {
                    for k in 0..2 {
                        let d = c.mean[k] - mean[k];
                        var[k] += c.weight * (c.cov[k][k] + d * d);
                    }
                }
                (mean, var)
            }
            Family::TwoMoons { noise_std } => {
                // Arc angles are uniform on [0, pi]: E cos = 0, E sin = 2/pi,
                // E cos^2 = E sin^2 = 1/2. Averaging the two moons gives the
                // moments below; the isotropic noise adds noise_std^2.
                let n2 = noise_std * noise_std;
                let mean = [0.5, 0.25];
                let var_x = 0.75 + n2;
                let var_y = 0.5625 - 1.0 / PI + n2;
                (mean, [var_x, var_y])
            }
            Family::Checkerboard => {
                // Each coordinate is marginally uniform on [-2, 2] because
                // every column (and row) holds exactly two of the eight cells.
                ([0.0, 0.0], [4.0 / 3.0, 4.0 / 3.0])
            }
        }
    }

    /// Draw `n` i.i.d. samples and their condition labels. Labels are all
    /// zero in unconditional mode.
    pub fn sample_batch<R: Rng>(&self, n: usize, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
        if n == 0 {
            return Err(Error::contract("sample_batch", "need n >= 1".to_string()));
        }
        let mut xs = Vec::with_capacity(n * 2);
        let mut raw_labels = Vec::with_capacity(n);
        match &self.family {
            Family::GaussianMixture { components } => {
                let weights = WeightedIndex::new(components.iter().map(|c| c.weight))
                    .map_err(|e| Error::contract("sample_batch", e.to_string()))?;
                for _ in 0..n {
                    let k = weights.sample(rng);
                    let c = &components[k];
                    let [l11, l21, l22] = c.chol();
                    let z0: f64 = rng.sample(StandardNormal);
                    let z1: f64 = rng.sample(StandardNormal);
                    xs.push(c.mean[0] + l11 * z0);
                    xs.push(c.mean[1] + l21 * z0 + l22 * z1);
                    raw_labels.push(k);
                }
            }
            Family::TwoMoons { noise_std } => {
                for _ in 0..n {
                    let moon = rng.gen_range(0..2usize);
                    let theta = rng.gen_range(0.0..PI);
                    let (mut x, mut y) = if moon == 0 {
                        (theta.cos(), theta.sin())
                    } else {
                        (1.0 - theta.cos(), 0.5 - theta.sin())
                    };
                    let e0: f64 = rng.sample(StandardNormal);
                    let e1: f64 = rng.sample(StandardNormal);
                    x += noise_std * e0;
                    y += noise_std * e1;
                    xs.push(x);
                    xs.push(y);
                    raw_labels.push(moon);
                }
            }
            Family::Checkerboard => {
                let cells = checker_cells();
                for _ in 0..n {
                    let k = rng.gen_range(0..cells.len());
                    xs.push(cells[k][0] + rng.gen_range(0.0..1.0));
                    xs.push(cells[k][1] + rng.gen_range(0.0..1.0));
                    raw_labels.push(k);
                }
            }
        }
        for (i, v) in xs.iter_mut().enumerate() {
            *v = (*v - self.shift[i % 2]) / self.scale;
        }
        let labels = match self.condition_mode {
            ConditionMode::Unconditional => vec![0; n],
            ConditionMode::ComponentLabel => raw_labels,
        };
        Ok((Tensor::matrix(n, 2, xs)?, labels))
    }

    /// Exact log-density at `x` (in standardized coordinates when the spec
    /// carries a standardization). Mixtures only.
    pub fn target_log_density(&self, x: [f64; 2]) -> Result<f64> {
        let components = match &self.family {
            Family::GaussianMixture { components } => components,
            other => {
                let name = match other {
                    Family::TwoMoons { .. } => "two-moons",
                    Family::Checkerboard => "checkerboard",
                    Family::GaussianMixture { .. } => unreachable!(),
                };
                return Err(Error::unsupported(
                    "target_log_density",
                    format!("{name} has no normalized analytic density"),
                ));
            }
        };
        let raw = [x[0] * self.scale + self.shift[0], x[1] * self.scale + self.shift[1]];
        // log-sum-exp over component log densities, then the Jacobian of the
        // standardization map y = (x - shift) / scale.
        let terms: Vec<f64> =
            components.iter().map(|c| c.weight.ln() + c.log_density(raw)).collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().map(|t| (t - m).exp()).sum();
        Ok(m + sum.ln() + 2.0 * self.scale.ln())
    }
}

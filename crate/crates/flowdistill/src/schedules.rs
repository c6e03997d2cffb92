//! Forward noising processes and the score-velocity conversion.
//!
//! The primary process is the linear interpolation path x_t = (1-t) x0 + t x1
//! with x1 standard normal, so alpha(t) = 1-t and sigma(t) = t. A variance-
//! exponential process is available behind the same interface for comparison
//! runs; it is not used by the theory checks.

use crate::ndgrad::Tensor;
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Linear path: alpha = 1-t, sigma = t. Deterministic straight-line
    /// interpolant between data and noise.
    FmOt,
    /// Variance-exponential kernel: alpha = exp(-1/2 int beta), sigma^2 =
    /// 1 - exp(-1/2 int beta), with a linear beta ramp.
    Ddpm,
}

/// A forward noising process on t in [t_min, 1].
#[derive(Clone, Debug)]
pub struct Schedule {
    kind: ScheduleKind,
    beta_min: f64,
    beta_max: f64,
    t_min: f64,
    t_max: f64,
}

pub const DEFAULT_T_MIN: f64 = 1e-3;

impl Schedule {
    /// Linear-path schedule with the default time floor.
    pub fn fm_ot() -> Self {
        Schedule { kind: ScheduleKind::FmOt, beta_min: 0.0, beta_max: 0.0, t_min: DEFAULT_T_MIN, t_max: 1.0 }
    }

    /// Linear-path schedule with a custom strictly positive time floor.
    pub fn fm_ot_with_t_min(t_min: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min < 1.0) {
            return Err(Error::contract(
                "Schedule::fm_ot_with_t_min",
                format!("t_min must be in (0, 1), got {t_min}"),
            ));
        }
        Ok(Schedule { t_min, ..Schedule::fm_ot() })
    }

    /// Variance-exponential schedule with beta ramping linearly from
    /// `beta_min` to `beta_max` over [0, 1].
    pub fn ddpm_linear(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max >= beta_min) {
            return Err(Error::contract(
                "Schedule::ddpm_linear",
                format!("need 0 < beta_min <= beta_max, got ({beta_min}, {beta_max})"),
            ));
        }
        Ok(Schedule { kind: ScheduleKind::Ddpm, beta_min, beta_max, t_min: DEFAULT_T_MIN, t_max: 1.0 })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    /// Noise rate beta(t). Only the variance-exponential kernel has one.
    pub fn beta(&self, t: f64) -> Result<f64> {
        match self.kind {
            ScheduleKind::Ddpm => Ok(self.beta_min + (self.beta_max - self.beta_min) * t),
            ScheduleKind::FmOt => Err(Error::unsupported(
                "Schedule::beta",
                "the linear path has no beta rate".to_string(),
            )),
        }
    }

    fn beta_integral(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }
}

/// Signal and noise scales (alpha_t, sigma_t) at time t in [0, 1].
pub fn alpha_sigma(s: &Schedule, t: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract("alpha_sigma", format!("t must be in [0, 1], got {t}")));
    }
    match s.kind {
        ScheduleKind::FmOt => Ok((1.0 - t, t)),
        ScheduleKind::Ddpm => {
            let half = (-0.5 * s.beta_integral(t)).exp();
            Ok((half, (1.0 - half).max(0.0).sqrt()))
        }
    }
}

/// One corrupted sample alpha_t x0 + sigma_t noise. The caller supplies
/// standard normal noise of the same shape.
pub fn forward_diffuse(s: &Schedule, x0: &Tensor, t: f64, noise: &Tensor) -> Result<Tensor> {
    let (alpha, sigma) = alpha_sigma(s, t)?;
    x0.zip_map(noise, "forward_diffuse", |x, e| alpha * x + sigma * e)
}

/// One draw of the interpolation path at time t: endpoints, the corrupted
/// point, and the pathwise regression target x1 - x0.
#[derive(Clone, Debug)]
pub struct PathSample {
    pub x0: Tensor,
    pub x1: Tensor,
    pub t: f64,
    pub xt: Tensor,
    pub v_target: Tensor,
}

pub fn make_path<R: Rng>(s: &Schedule, x0: &Tensor, t: f64, rng: &mut R) -> Result<PathSample> {
    if !(s.t_min..=s.t_max).contains(&t) {
        return Err(Error::contract(
            "make_path",
            format!("t must be in [{}, {}], got {t}", s.t_min, s.t_max),
        ));
    }
    let x1 = x0.map(|_| rng.sample(StandardNormal));
    let xt = forward_diffuse(s, x0, t, &x1)?;
    let v_target = x1.zip_map(x0, "make_path", |b, a| b - a)?;
    Ok(PathSample { x0: x0.clone(), x1, t, xt, v_target })
}

/// Scalar a(t) with s_f(x,t) - s_g(x,t) = a(t) (v_f(x,t) - v_g(x,t)) on the
/// linear path, for any two distributions with exact fields.
///
/// Derivation: the corruption kernel is N((1-t) x0, t^2 I), so the denoising
/// identity gives E[x1 | xt] = -t s(xt) and E[x0 | xt] = (xt + t^2 s(xt)) / (1-t).
/// Substituting into v = E[x1 - x0 | xt] yields v = -(xt + t s) / (1-t), hence
/// s = -((1-t) v + xt) / t, and the xt terms cancel in any difference of two
/// fields at the same point. The factor is negative on (t_min, 1), checked
/// pointwise against closed-form Gaussian fields in the integration tests.
pub fn score_velocity_factor(s: &Schedule, t: f64) -> Result<f64> {
    if s.kind != ScheduleKind::FmOt {
        return Err(Error::unsupported(
            "score_velocity_factor",
            "conversion factor is derived for the linear path only".to_string(),
        ));
    }
    if t >= 1.0 {
        return Err(Error::contract(
            "score_velocity_factor",
            format!("factor degenerates at t = 1, got {t}"),
        ));
    }
    if t < s.t_min {
        return Err(Error::contract(
            "score_velocity_factor",
            format!("factor is singular toward t = 0; t must be >= {}, got {t}", s.t_min),
        ));
    }
    Ok((t - 1.0) / t)
}

/// Invert the linear path at (xt, t) given a predicted velocity: x0 = xt - t v.
pub fn velocity_to_x0(s: &Schedule, xt: &Tensor, t: f64, v: &Tensor) -> Result<Tensor> {
    if s.kind != ScheduleKind::FmOt {
        return Err(Error::unsupported(
            "velocity_to_x0",
            "one-step inversion assumes the linear path".to_string(),
        ));
    }
    xt.zip_map(v, "velocity_to_x0", |x, vi| x - t * vi)
}

//! Sampling procedures: dense Euler, few-step Euler over anchors, the
//! stochastic anchor sampler, and partial backward simulation.
//!
//! Everything is generic over [`VelocityField`] so the same solvers run on
//! trained networks and on closed-form fields used as test oracles.

use crate::ndgrad::Tensor;
use crate::nets::VelocityNet;
use crate::schedules::{self, Schedule, DEFAULT_T_MIN};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// A batched velocity field v(x, t, c).
pub trait VelocityField {
    fn velocity_batch(&self, x: &Tensor, t: f64, conds: &[usize]) -> Result<Tensor>;
}

impl VelocityField for VelocityNet {
    fn velocity_batch(&self, x: &Tensor, t: f64, conds: &[usize]) -> Result<Tensor> {
        self.forward(x, &vec![t; x.rows()], conds)
    }
}

/// The coarse anchor set: strictly increasing times in (0, 1] ending at
/// exactly 1, indexed from the lowest anchor upward.
#[derive(Clone, Debug, PartialEq)]
pub struct CoarseGrid {
    anchors: Vec<f64>,
}

impl CoarseGrid {
    pub fn new(anchors: Vec<f64>) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::contract("CoarseGrid::new", "need at least one anchor".to_string()));
        }
        for w in anchors.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::contract(
                    "CoarseGrid::new",
                    format!("anchors must be strictly increasing, got {} then {}", w[0], w[1]),
                ));
            }
        }
        if anchors[0] < DEFAULT_T_MIN {
            return Err(Error::contract(
                "CoarseGrid::new",
                format!("lowest anchor {} is below the time floor {DEFAULT_T_MIN}", anchors[0]),
            ));
        }
        let last = *anchors.last().unwrap();
        if last != 1.0 {
            return Err(Error::contract(
                "CoarseGrid::new",
                format!("highest anchor must be exactly 1, got {last}"),
            ));
        }
        Ok(CoarseGrid { anchors })
    }

    /// The default four anchors 0.25, 0.5, 0.75, 1.
    pub fn default_four() -> Self {
        CoarseGrid::new(vec![0.25, 0.5, 0.75, 1.0]).expect("default anchors are valid")
    }

    pub fn anchors(&self) -> &[f64] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Lower end of segment i: the next anchor down, or 0 for the lowest.
    pub fn segment_lower(&self, i: usize) -> f64 {
        if i == 0 {
            0.0
        } else {
            self.anchors[i - 1]
        }
    }

    /// Index of an anchor equal to `tau` (within 1e-12).
    pub fn index_of(&self, tau: f64) -> Option<usize> {
        self.anchors.iter().position(|&a| (a - tau).abs() < 1e-12)
    }

    /// Monotone reparameterization tau' = s tau / (1 + (s - 1) tau). Keeps
    /// the endpoint at 1 and preserves ordering for s > 0.
    pub fn with_time_shift(&self, s: f64) -> Result<CoarseGrid> {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::contract(
                "CoarseGrid::with_time_shift",
                format!("shift must be positive and finite, got {s}"),
            ));
        }
        let shifted = self.anchors.iter().map(|&t| s * t / (1.0 + (s - 1.0) * t)).collect();
        CoarseGrid::new(shifted)
    }
}

/// Uniform descending grid from 1 to 0 with `n_steps` Euler steps. The
/// smallest evaluation time is 1/n_steps, so the step count is capped to
/// keep every evaluation at or above the time floor.
pub fn dense_grid(n_steps: usize) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::contract("dense_grid", "need at least one step".to_string()));
    }
    let max_steps = (1.0 / DEFAULT_T_MIN) as usize;
    if n_steps > max_steps {
        return Err(Error::contract(
            "dense_grid",
            format!("{n_steps} steps would evaluate below the time floor (max {max_steps})"),
        ));
    }
    Ok((0..=n_steps).map(|i| 1.0 - i as f64 / n_steps as f64).collect())
}

fn check_euler_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 || grid[0] != 1.0 || *grid.last().unwrap() != 0.0 {
        return Err(Error::contract(
            "euler_sample",
            format!("grid must run from 1 to 0, got {:?}", grid),
        ));
    }
    for w in grid.windows(2) {
        if w[1] >= w[0] {
            return Err(Error::contract(
                "euler_sample",
                format!("grid must be strictly decreasing, got {} then {}", w[0], w[1]),
            ));
        }
    }
    for &t in &grid[..grid.len() - 1] {
        if t < DEFAULT_T_MIN {
            return Err(Error::contract(
                "euler_sample",
                format!("evaluation time {t} is below the time floor {DEFAULT_T_MIN}"),
            ));
        }
    }
    Ok(())
}

/// Deterministic Euler integration of the field along a descending grid.
pub fn euler_sample<F: VelocityField>(
    field: &F,
    grid: &[f64],
    z: &Tensor,
    conds: &[usize],
) -> Result<Tensor> {
    check_euler_grid(grid)?;
    let mut x = z.clone();
    for w in grid.windows(2) {
        let (t_from, t_to) = (w[0], w[1]);
        let v = field.velocity_batch(&x, t_from, conds)?;
        let dt = t_to - t_from;
        x = x.zip_map(&v, "euler_sample", |xi, vi| xi + dt * vi)?;
    }
    Ok(x)
}

/// One anchor hop: predict the clean point from the state at `tau`, then
/// re-corrupt it to `tau_next` with fresh noise scaled by `noise_scale`.
fn renoise_hop<F: VelocityField, R: Rng>(
    field: &F,
    fm: &Schedule,
    x: &Tensor,
    tau: f64,
    tau_next: f64,
    conds: &[usize],
    rng: &mut R,
    noise_scale: f64,
) -> Result<Tensor> {
    let v = field.velocity_batch(x, tau, conds)?;
    let x0 = schedules::velocity_to_x0(fm, x, tau, &v)?;
    let noise = x0.map(|_| noise_scale * rng.sample::<f64, _>(StandardNormal));
    schedules::forward_diffuse(fm, &x0, tau_next, &noise)
}

/// Stochastic few-step sampling over the anchor set: at each anchor predict
/// the clean point and re-noise down to the next anchor; the lowest anchor
/// returns the clean prediction itself.
pub fn stochastic_anchor_sample<F: VelocityField, R: Rng>(
    field: &F,
    grid: &CoarseGrid,
    z: &Tensor,
    conds: &[usize],
    rng: &mut R,
) -> Result<Tensor> {
    stochastic_anchor_sample_scaled(field, grid, z, conds, rng, 1.0)
}

/// Same as [`stochastic_anchor_sample`] with the injected noise multiplied
/// by `noise_scale`; scale 0 is the deterministic anchor sampler.
pub fn stochastic_anchor_sample_scaled<F: VelocityField, R: Rng>(
    field: &F,
    grid: &CoarseGrid,
    z: &Tensor,
    conds: &[usize],
    rng: &mut R,
    noise_scale: f64,
) -> Result<Tensor> {
    let fm = Schedule::fm_ot();
    let anchors = grid.anchors();
    let mut x = z.clone();
    for i in (0..anchors.len()).rev() {
        let tau = anchors[i];
        if i == 0 {
            let v = field.velocity_batch(&x, tau, conds)?;
            return schedules::velocity_to_x0(&fm, &x, tau, &v);
        }
        x = renoise_hop(field, &fm, &x, tau, anchors[i - 1], conds, rng, noise_scale)?;
    }
    Ok(x)
}

/// Run the stochastic sampler from the top anchor down to `tau_target` and
/// return the noisy state there (not a clean prediction). `tau_target` must
/// be one of the anchors.
pub fn backward_simulate<F: VelocityField, R: Rng>(
    field: &F,
    grid: &CoarseGrid,
    z: &Tensor,
    tau_target: f64,
    conds: &[usize],
    rng: &mut R,
) -> Result<Tensor> {
    let idx = grid.index_of(tau_target).ok_or_else(|| {
        Error::contract(
            "backward_simulate",
            format!("tau_target {tau_target} is not an anchor of {:?}", grid.anchors()),
        )
    })?;
    let fm = Schedule::fm_ot();
    let anchors = grid.anchors();
    let mut x = z.clone();
    for i in (idx + 1..anchors.len()).rev() {
        x = renoise_hop(field, &fm, &x, anchors[i], anchors[i - 1], conds, rng, 1.0)?;
    }
    Ok(x)
}

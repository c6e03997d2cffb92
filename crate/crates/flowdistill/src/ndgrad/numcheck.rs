//! Finite-difference gradient oracle for checking reverse-mode results.

use super::params::ParamVector;
use crate::Result;

/// Central-difference gradient of `f` at `at`, one coordinate at a time.
///
/// Slow (two evaluations per parameter) and only as accurate as `h` allows,
/// so this is a test oracle, not a training tool.
pub fn finite_difference_gradient<F>(mut f: F, at: &ParamVector, h: f64) -> Result<ParamVector>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    let n = at.len();
    let mut grad = vec![0.0; n];
    let mut probe = at.clone();
    for i in 0..n {
        let orig = probe.flat()[i];
        probe.flat_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.flat_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.flat_mut()[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    ParamVector::from_flat(at.layout_arc(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::params::ParamLayout;
    use std::sync::Arc;

    #[test]
    fn matches_analytic_gradient_of_a_cubic() {
        let layout = Arc::new(ParamLayout::new(vec![("x".to_string(), vec![3])]).unwrap());
        let at = ParamVector::from_flat(Arc::clone(&layout), vec![0.3, -1.2, 2.0]).unwrap();
        // f(x) = sum x_i^3, df/dx_i = 3 x_i^2
        let g = finite_difference_gradient(
            |p| Ok(p.flat().iter().map(|x| x * x * x).sum()),
            &at,
            1e-5,
        )
        .unwrap();
        for (gi, xi) in g.flat().iter().zip(at.flat()) {
            assert!((gi - 3.0 * xi * xi).abs() < 1e-7, "got {gi}, want {}", 3.0 * xi * xi);
        }
    }
}

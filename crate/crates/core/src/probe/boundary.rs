//! Distance from a point to a binary classifier's `p = 0.5` level set.

use crate::autograd::grad_input;
use crate::error::{Error, Result};
use crate::models::{Architecture, Model};
use crate::tensor::Tensor;

/// Largest distance searched along each direction.
pub const SEARCH_RADIUS: f64 = 20.0;
const SCAN_STEP: f64 = 0.02;
const BISECTION_TOL: f64 = 1e-12;

fn margin(model: &Model, x: &[f64]) -> Result<f64> {
    let lp = model.log_probs(&Tensor::vector(x.to_vec()))?;
    Ok(lp.data()[1] - lp.data()[0])
}

/// Searches along `±∇(logit₁ − logit₀)` for the nearest sign change of the
/// margin and refines it by bisection. Returns `f64::INFINITY` when no
/// crossing lies within [`SEARCH_RADIUS`].
pub fn boundary_distance(model: &Model, point: &[f64]) -> Result<f64> {
    let is_planar_binary = matches!(
        &model.spec().architecture,
        Architecture::Mlp { widths, .. } if widths[0] == 2
    ) && model.num_classes() == 2;
    if !is_planar_binary || point.len() != 2 {
        return Err(Error::InvalidConfig(
            "boundary distance needs a binary model on 2-d points".into(),
        ));
    }
    let m0 = margin(model, point)?;
    if m0 == 0.0 {
        return Ok(0.0);
    }
    let x = Tensor::vector(point.to_vec());
    let g1 = grad_input(model.graph(), &x, model.params(), 1)?;
    let g0 = grad_input(model.graph(), &x, model.params(), 0)?;
    let dir: Vec<f64> = g1.data().iter().zip(g0.data()).map(|(a, b)| a - b).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok(f64::INFINITY);
    }
    let unit: Vec<f64> = dir.iter().map(|v| v / norm).collect();
    let at = |t: f64| -> Vec<f64> { point.iter().zip(&unit).map(|(p, u)| p + t * u).collect() };

    let mut best = f64::INFINITY;
    for sign in [1.0, -1.0] {
        let mut prev = 0.0;
        let mut t = SCAN_STEP;
        while t <= SEARCH_RADIUS + 1e-12 && t < best {
            if margin(model, &at(sign * t))?.signum() != m0.signum() {
                let (mut lo, mut hi) = (prev, t);
                while hi - lo > BISECTION_TOL {
                    let mid = 0.5 * (lo + hi);
                    if margin(model, &at(sign * mid))?.signum() == m0.signum() {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                best = best.min(0.5 * (lo + hi));
                break;
            }
            prev = t;
            t += SCAN_STEP;
        }
    }
    Ok(best)
}

//! Integrated-Gradients attribution and important-token selection.

use serde::{Deserialize, Serialize};

use crate::autograd::grad_input;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::tensor::Tensor;

/// Default number of path intervals.
pub const DEFAULT_STEPS: usize = 128;

/// Path position at which the baseline node is evaluated. A zero baseline
/// sits on the kink of every ReLU and ties every max-pool, so the gradient
/// there is a convention rather than the limit along the path; a point just
/// inside the path gives the one-sided limit the integral needs.
pub const BASELINE_NODE_OFFSET: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// All-zero input.
    #[default]
    Zero,
    /// Every row replaced by the PAD embedding (which is all zeros).
    Pad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    /// One score per real token (text) or per coordinate (points): the sum
    /// of that position's attributions.
    pub token_scores: Vec<f64>,
    /// `|Σ attributions − (F(x) − F(baseline))|`
    pub completeness_residual: f64,
    /// `F(x) − F(baseline)` with `F = log p(target | ·)`.
    pub output_delta: f64,
    pub target_class: usize,
    pub steps: usize,
    #[serde(skip)]
    pub attributions: Vec<f64>,
}

/// Path-integrated gradients from `baseline` to `x`, using the trapezoid
/// rule over `steps` equal intervals. `grad` returns the gradient of the
/// attributed function at a point. The first node is evaluated at
/// [`BASELINE_NODE_OFFSET`] along the path.
pub fn integrate_path<G>(mut grad: G, x: &[f64], baseline: &[f64], steps: usize) -> Result<Vec<f64>>
where
    G: FnMut(&[f64]) -> Result<Vec<f64>>,
{
    if steps < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 steps, got {steps}")));
    }
    if x.len() != baseline.len() {
        return Err(Error::Shape("input and baseline differ in size".into()));
    }
    let mut acc = vec![0.0; x.len()];
    let mut point = vec![0.0; x.len()];
    for k in 0..=steps {
        let alpha = if k == 0 {
            BASELINE_NODE_OFFSET
        } else {
            k as f64 / steps as f64
        };
        let weight = if k == 0 || k == steps { 0.5 } else { 1.0 };
        point
            .iter_mut()
            .zip(x.iter().zip(baseline))
            .for_each(|(p, (xi, bi))| *p = bi + alpha * (xi - bi));
        let g = grad(&point)?;
        acc.iter_mut().zip(&g).for_each(|(a, gi)| *a += weight * gi);
    }
    Ok(acc
        .iter()
        .zip(x.iter().zip(baseline))
        .map(|(a, (xi, bi))| (xi - bi) * a / steps as f64)
        .collect())
}

/// Attributes `log p(target | x)` to the example's tokens.
pub fn integrated_gradients(
    clf: &Classifier,
    example: &Example,
    target: usize,
    steps: usize,
    baseline: Baseline,
) -> Result<AttributionResult> {
    let model = clf.model();
    let classes = model.num_classes();
    if target >= classes {
        return Err(Error::ClassIndex {
            index: target,
            classes,
        });
    }
    let enc = clf.encode(&example.input)?;
    let shape = enc.tensor.shape().to_vec();
    // PAD rows are zero, so both baselines are the zero tensor.
    let base = match baseline {
        Baseline::Zero | Baseline::Pad => Tensor::zeros(shape.clone()),
    };
    let attributions = integrate_path(
        |p| {
            let t = Tensor::new(shape.clone(), p.to_vec())?;
            Ok(grad_input(model.graph(), &t, model.params(), target)?.into_data())
        },
        enc.tensor.data(),
        base.data(),
        steps,
    )?;
    let f_x = model.log_probs(&enc.tensor)?.data()[target];
    let f_base = model.log_probs(&base)?.data()[target];
    let output_delta = f_x - f_base;
    let total: f64 = attributions.iter().sum();

    let token_scores = match enc.n_tokens {
        Some(n) => {
            let d = shape[1];
            attributions
                .chunks_exact(d)
                .take(n)
                .map(|row| row.iter().sum())
                .collect()
        }
        None => attributions.clone(),
    };
    Ok(AttributionResult {
        token_scores,
        completeness_residual: (total - output_delta).abs(),
        output_delta,
        target_class: target,
        steps,
        attributions,
    })
}

/// How [`important_tokens`] picks positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportancePolicy {
    /// The `k` largest `|score|`, earlier position first on ties.
    TopK(usize),
    /// Positions with `|score| ≥ f · max |score|`.
    FractionOfMax(f64),
}

impl Default for ImportancePolicy {
    fn default() -> Self {
        ImportancePolicy::TopK(5)
    }
}

pub fn important_tokens(attr: &AttributionResult, policy: ImportancePolicy) -> Result<Vec<usize>> {
    let scores = &attr.token_scores;
    if scores.is_empty() {
        return Err(Error::Empty("no token scores".into()));
    }
    match policy {
        ImportancePolicy::TopK(0) => Err(Error::InvalidConfig("top_k needs k > 0".into())),
        ImportancePolicy::TopK(k) => {
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].abs().total_cmp(&scores[a].abs()));
            order.truncate(k);
            Ok(order)
        }
        ImportancePolicy::FractionOfMax(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "fraction {f} not in (0, 1]"
                )));
            }
            let max = scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
            if max == 0.0 {
                return Ok(Vec::new());
            }
            Ok((0..scores.len())
                .filter(|&i| scores[i].abs() >= f * max)
                .collect())
        }
    }
}

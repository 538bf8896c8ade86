//! Fisher information metric of `p(y | x)` with respect to the input.
//!
//! For an input `x` (flattened to `D` coordinates) and class probabilities
//! `p`, let `J` be the `C × D` Jacobian whose row `y` is `∇ₓ log p(y | x)`.
//! The metric is
//!
//! ```text
//! G = Jᵀ diag(p) J = Σ_y p_y ∇log p_y ∇log p_yᵀ
//! ```
//!
//! and the difficulty score of an example is its largest eigenvalue.
//! Since `Σ_y p_y ∇log p_y = 0`, `G` has rank at most `C − 1`, so its
//! nonzero spectrum is obtained from the `C × C` Gram matrix
//! `M = diag(√p) J Jᵀ diag(√p)` instead of the `D × D` matrix: if
//! `M u = λ u` then `v = Jᵀ diag(√p) u` satisfies `G v = λ v` and
//! `‖v‖² = λ`.
//!
//! Padding coordinates of text inputs are masked out of `J`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::argmax;
use crate::data::Example;
use crate::eigen::symmetric_eigen;
use crate::error::{Error, Result};
use crate::models::{Classifier, Model};
use crate::tensor::{dot, Tensor};

/// Rows of `∇ₓ log p(y | x)` for every class, with masked coordinates zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbJacobian {
    pub rows: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub mask: Vec<bool>,
}

impl LogProbJacobian {
    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    /// `ηᵀ G η = Σ_y p_y (J_y · η)²`.
    pub fn quadratic_form(&self, eta: &[f64]) -> f64 {
        self.rows
            .iter()
            .zip(&self.probs)
            .map(|(row, p)| {
                let s = dot(row, eta);
                p * s * s
            })
            .sum()
    }

    /// `Σ_y p_y J_y`, which vanishes identically.
    pub fn expected_score(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (row, p) in self.rows.iter().zip(&self.probs) {
            out.iter_mut().zip(row).for_each(|(o, r)| *o += p * r);
        }
        out
    }

    /// The `C × C` matrix `diag(√p) J Jᵀ diag(√p)`.
    pub fn gram(&self) -> Vec<Vec<f64>> {
        let c = self.classes();
        let sqrt_p: Vec<f64> = self.probs.iter().map(|p| p.sqrt()).collect();
        let mut m = vec![vec![0.0; c]; c];
        for i in 0..c {
            for j in 0..=i {
                let v = sqrt_p[i] * sqrt_p[j] * dot(&self.rows[i], &self.rows[j]);
                m[i][j] = v;
                m[j][i] = v;
            }
        }
        m
    }
}

/// Builds the log-probability Jacobian at `x`. `mask` (one flag per
/// flattened coordinate) excludes coordinates; `None` keeps all.
pub fn jacobian(model: &Model, x: &Tensor, mask: Option<&[bool]>) -> Result<LogProbJacobian> {
    let mask = match mask {
        Some(m) if m.len() != x.len() => {
            return Err(Error::Shape(format!(
                "mask of length {} for input of {} coordinates",
                m.len(),
                x.len()
            )))
        }
        Some(m) => m.to_vec(),
        None => vec![true; x.len()],
    };
    let trace = model.graph().trace(x, model.params())?;
    let log_probs = trace.output().data().to_vec();
    let probs = log_probs.iter().map(|v| v.exp()).collect();
    let rows = trace
        .input_jacobian()?
        .into_iter()
        .map(|g| {
            let mut row = g.into_data();
            row.iter_mut().zip(&mask).for_each(|(v, keep)| {
                if !keep {
                    *v = 0.0;
                }
            });
            row
        })
        .collect();
    Ok(LogProbJacobian {
        rows,
        probs,
        log_probs,
        mask,
    })
}

/// Spectrum of the metric at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub lambda_max: f64,
    /// Descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// Descending, as returned by the eigensolver.
    pub raw_eigenvalues: Vec<f64>,
    /// Unit-norm, length `D`; the largest-magnitude coordinate is positive.
    pub top_eigenvector: Vec<f64>,
}

/// Computes the metric spectrum through the `C × C` Gram matrix.
///
/// When the top eigenvalue is zero the metric vanishes and every direction
/// is an eigenvector; the first unmasked basis vector is returned.
pub fn fim_spectrum(j: &LogProbJacobian) -> Result<Spectrum> {
    let eig = symmetric_eigen(&j.gram())?;
    let raw = eig.values.clone();
    let eigenvalues: Vec<f64> = raw.iter().map(|v| v.max(0.0)).collect();
    let lambda_max = eigenvalues.first().copied().unwrap_or(0.0);

    let u = &eig.vectors[0];
    let mut v = vec![0.0; j.dim()];
    for ((row, p), uk) in j.rows.iter().zip(&j.probs).zip(u) {
        let w = p.sqrt() * uk;
        v.iter_mut().zip(row).for_each(|(o, r)| *o += w * r);
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        v.iter_mut().for_each(|x| *x /= norm);
    } else {
        v.fill(0.0);
        let first = j.mask.iter().position(|m| *m).unwrap_or(0);
        if let Some(slot) = v.get_mut(first) {
            *slot = 1.0;
        }
    }
    let mut lead = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[lead].abs() {
            lead = i;
        }
    }
    if v.get(lead).is_some_and(|x| *x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(Spectrum {
        lambda_max,
        eigenvalues,
        raw_eigenvalues: raw,
        top_eigenvector: v,
    })
}

/// Difficulty score and supporting quantities for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct FimResult {
    pub example_id: String,
    pub label: usize,
    pub prediction: usize,
    pub probs: Vec<f64>,
    pub lambda_max: f64,
    /// `lambda_max / n_tokens` for text inputs.
    pub lambda_max_per_token: Option<f64>,
    pub eigenvalues: Vec<f64>,
    pub top_eigenvector: Vec<f64>,
    pub n_tokens: Option<usize>,
    /// Real tokens the score was computed on (empty for points).
    pub tokens: Vec<String>,
}

/// Embeds an example, builds its Jacobian and returns the top of the
/// metric spectrum.
pub fn lambda_max(clf: &Classifier, example: &Example) -> Result<FimResult> {
    let enc = clf.encode(&example.input)?;
    let j = jacobian(clf.model(), &enc.tensor, Some(&enc.mask))?;
    let spec = fim_spectrum(&j)?;
    Ok(FimResult {
        example_id: example.id.clone(),
        label: example.label,
        prediction: argmax(&j.log_probs),
        lambda_max: spec.lambda_max,
        lambda_max_per_token: enc.n_tokens.map(|n| spec.lambda_max / n as f64),
        eigenvalues: spec.eigenvalues,
        top_eigenvector: spec.top_eigenvector,
        n_tokens: enc.n_tokens,
        tokens: enc.tokens,
        probs: j.probs,
    })
}

/// Scores every example in parallel; output order matches input order and
/// one failure does not stop the rest.
pub fn score_dataset(clf: &Classifier, data: &[Example]) -> Vec<Result<FimResult>> {
    data.par_iter().map(|ex| lambda_max(clf, ex)).collect()
}

/// Exact KL divergence next to its quadratic approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlCheck {
    /// `KL(p(·|x) ‖ p(·|x+η))`
    pub kl: f64,
    /// `½ ηᵀ G η`
    pub quad: f64,
}

/// Compares the exact KL divergence under the perturbation `eta` with the
/// second-order term `½ ηᵀ G η`.
pub fn kl_quadratic_check(model: &Model, x: &Tensor, eta: &Tensor) -> Result<KlCheck> {
    if x.shape() != eta.shape() {
        return Err(Error::Shape(format!(
            "perturbation {:?} for input {:?}",
            eta.shape(),
            x.shape()
        )));
    }
    let j = jacobian(model, x, None)?;
    let shifted = model.log_probs(&x.axpy(1.0, eta)?)?;
    let kl = j
        .probs
        .iter()
        .zip(&j.log_probs)
        .zip(shifted.data())
        .map(|((p, lp), lq)| p * (lp - lq))
        .sum::<f64>()
        .max(0.0);
    Ok(KlCheck {
        kl,
        quad: 0.5 * j.quadratic_form(eta.data()),
    })
}

/// One line of the scored-output JSONL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRow {
    pub id: String,
    pub label: usize,
    pub prediction: usize,
    pub probs: Vec<f64>,
    pub lambda_max: f64,
    pub eigenvalues: Vec<f64>,
    pub n_tokens: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_max_per_token: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_eigenvector: Option<Vec<f64>>,
}

impl ScoredRow {
    pub fn new(result: &FimResult, with_eigenvector: bool) -> Self {
        ScoredRow {
            id: result.example_id.clone(),
            label: result.label,
            prediction: result.prediction,
            probs: result.probs.clone(),
            lambda_max: result.lambda_max,
            eigenvalues: result.eigenvalues.clone(),
            n_tokens: result.n_tokens,
            lambda_max_per_token: result.lambda_max_per_token,
            top_eigenvector: with_eigenvector.then(|| result.top_eigenvector.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Param, ParamSet};
    use crate::models::{Activation, ModelSpec};

    /// logits = [w·x + b, 0]
    fn logistic(w: &[f64], b: f64) -> Model {
        let d = w.len();
        let spec = ModelSpec::mlp(vec![d, 2], Activation::Tanh);
        let mut weight = w.to_vec();
        weight.extend(std::iter::repeat_n(0.0, d));
        Model::new(
            spec,
            ParamSet::new(vec![
                Param {
                    name: "layer0.weight".into(),
                    value: Tensor::new(vec![2, d], weight).unwrap(),
                },
                Param {
                    name: "layer0.bias".into(),
                    value: Tensor::vector(vec![b, 0.0]),
                },
            ]),
        )
        .unwrap()
    }

    #[test]
    fn logistic_jacobian_rows() {
        let w = [0.5, -2.0, 1.5];
        let model = logistic(&w, 0.3);
        let x = Tensor::vector(vec![0.2, 0.1, -0.4]);
        let j = jacobian(&model, &x, None).unwrap();
        let p1 = j.probs[0];
        for k in 0..3 {
            assert!((j.rows[0][k] - (1.0 - p1) * w[k]).abs() < 1e-14);
            assert!((j.rows[1][k] + p1 * w[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn logistic_spectrum_closed_form() {
        let model = logistic(&[3.0, 4.0], 0.0);
        let j = jacobian(&model, &Tensor::vector(vec![0.0, 0.0]), None).unwrap();
        let s = fim_spectrum(&j).unwrap();
        assert!((s.lambda_max - 6.25).abs() < 1e-12);
        assert!((s.top_eigenvector[0] - 0.6).abs() < 1e-12);
        assert!((s.top_eigenvector[1] - 0.8).abs() < 1e-12);
        assert!(s.eigenvalues[1].abs() < 1e-12);
    }

    #[test]
    fn zero_jacobian_has_zero_spectrum() {
        let model = logistic(&[0.0, 0.0], 0.0);
        let j = jacobian(&model, &Tensor::vector(vec![1.0, 2.0]), None).unwrap();
        let s = fim_spectrum(&j).unwrap();
        assert!(s.eigenvalues.iter().all(|v| *v == 0.0));
        assert_eq!(s.top_eigenvector, vec![1.0, 0.0]);
    }

    #[test]
    fn saturated_winner_row_is_flat() {
        let model = logistic(&[1.0, 0.0], 0.0);
        let j = jacobian(&model, &Tensor::vector(vec![60.0, 0.0]), None).unwrap();
        assert!(j.rows[0].iter().all(|v| v.abs() < 1e-20));
        let s = fim_spectrum(&j).unwrap();
        assert!(s.lambda_max < 1e-6);
    }

    #[test]
    fn masked_coordinates_are_excluded() {
        let model = logistic(&[3.0, 4.0], 0.0);
        let x = Tensor::vector(vec![0.0, 0.0]);
        let j = jacobian(&model, &x, Some(&[true, false])).unwrap();
        assert_eq!(j.rows[0][1], 0.0);
        let s = fim_spectrum(&j).unwrap();
        assert!((s.lambda_max - 0.25 * 9.0).abs() < 1e-12);
        assert!(jacobian(&model, &x, Some(&[true])).is_err());
    }

    #[test]
    fn kl_check_zero_perturbation() {
        let model = logistic(&[1.0, -1.0], 0.2);
        let x = Tensor::vector(vec![0.3, 0.7]);
        let c = kl_quadratic_check(&model, &x, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(c.kl, 0.0);
        assert_eq!(c.quad, 0.0);
        assert!(kl_quadratic_check(&model, &x, &Tensor::vector(vec![0.0])).is_err());
    }

    #[test]
    fn duplicate_examples_score_identically() {
        let clf = Classifier::new(logistic(&[1.0, 2.0], -0.5), None).unwrap();
        let ex = Example::point("a", vec![0.1, 0.2], 1);
        let data = vec![ex.clone(), ex.clone(), ex];
        let scores: Vec<FimResult> = score_dataset(&clf, &data)
            .into_iter()
            .map(|r| r.unwrap())
            .collect();
        assert!(scores.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn scored_row_omits_eigenvector_by_default() {
        let clf = Classifier::new(logistic(&[1.0, 2.0], -0.5), None).unwrap();
        let r = lambda_max(&clf, &Example::point("a", vec![0.1, 0.2], 1)).unwrap();
        let line = serde_json::to_string(&ScoredRow::new(&r, false)).unwrap();
        assert!(!line.contains("top_eigenvector"));
        for key in ["\"id\"", "\"label\"", "\"prediction\"", "\"probs\"", "\"lambda_max\"", "\"eigenvalues\"", "\"n_tokens\""] {
            assert!(line.contains(key), "{key} missing from {line}");
        }
        let line = serde_json::to_string(&ScoredRow::new(&r, true)).unwrap();
        assert!(line.contains("top_eigenvector"));
    }
}

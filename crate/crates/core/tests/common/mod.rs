#![allow(clippy::needless_range_loop)]

#![allow(dead_code)]

use fisher_probe::autograd::{Param, ParamSet};
use fisher_probe::models::{Activation, Architecture, Classifier, EmbeddingTable, Model, ModelSpec};
use fisher_probe::{build_model, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Glorot-initialised MLP with biases drawn at random too.
pub fn random_mlp(rng: &mut ChaCha8Rng, widths: Vec<usize>, activation: Activation) -> Model {
    let mut model = build_model(&ModelSpec::mlp(widths, activation), rng.gen()).unwrap();
    for p in model.params_mut().iter_mut() {
        if p.name.ends_with("bias") {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&gaussian_vec(rng, n, 0.3));
        }
    }
    model
}

pub fn text_cnn_spec(dim: usize, widths: Vec<usize>, filters: usize, classes: usize) -> ModelSpec {
    ModelSpec {
        architecture: Architecture::TextCnn {
            embedding_dim: dim,
            filter_widths: widths,
            filters_per_width: filters,
            dropout: 0.5,
            max_len: 64,
        },
        num_classes: classes,
    }
}

pub fn vocab(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

pub fn random_table(rng: &mut ChaCha8Rng, words: usize, dim: usize) -> EmbeddingTable {
    let rows = (0..words).map(|_| gaussian_vec(rng, dim, 0.5)).collect();
    EmbeddingTable::from_rows(vocab(words), rows).unwrap()
}

/// Freshly initialised text classifier (zero biases) over a random
/// embedding table, with a random architecture.
pub fn init_text_classifier(rng: &mut ChaCha8Rng) -> Classifier {
    let dim = rng.gen_range(2..=12);
    let widths: Vec<usize> = match rng.gen_range(0..3) {
        0 => vec![2],
        1 => vec![2, 3],
        _ => vec![3, 4, 5],
    };
    let filters = rng.gen_range(2..=24);
    let classes = rng.gen_range(2..=4);
    let spec = text_cnn_spec(dim, widths, filters, classes);
    let mut model = build_model(&spec, rng.gen()).unwrap();
    let table = random_table(rng, 30, dim);
    model.set_vocab_hash(Some(table.fingerprint()));
    Classifier::new(model, Some(table)).unwrap()
}

/// Small random text classifier with random biases.
pub fn random_text_classifier(
    rng: &mut ChaCha8Rng,
    dim: usize,
    filters: usize,
    classes: usize,
) -> Classifier {
    let spec = text_cnn_spec(dim, vec![2, 3], filters, classes);
    let mut model = build_model(&spec, rng.gen()).unwrap();
    for p in model.params_mut().iter_mut() {
        if p.name.ends_with("bias") {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&gaussian_vec(rng, n, 0.1));
        }
    }
    let table = random_table(rng, 30, dim);
    model.set_vocab_hash(Some(table.fingerprint()));
    Classifier::new(model, Some(table)).unwrap()
}

pub fn random_sentence(rng: &mut ChaCha8Rng, words: usize, len: usize) -> String {
    (0..len)
        .map(|_| format!("w{}", rng.gen_range(0..words)))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Logistic model with logits `[0, w·x + b]`, so `p₁ = σ(w·x + b)`.
pub fn logistic(w: &[f64], b: f64) -> Model {
    let d = w.len();
    let mut weight = vec![0.0; d];
    weight.extend_from_slice(w);
    Model::new(
        ModelSpec::mlp(vec![d, 2], Activation::Tanh),
        ParamSet::new(vec![
            Param {
                name: "layer0.weight".into(),
                value: Tensor::new(vec![2, d], weight).unwrap(),
            },
            Param {
                name: "layer0.bias".into(),
                value: Tensor::vector(vec![0.0, b]),
            },
        ]),
    )
    .unwrap()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`
pub fn rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

pub const FD_STEP: f64 = 1e-5;

/// Relative errors of analytic input and parameter gradients against
/// central differences for one random network.
#[derive(Debug, Clone, Copy)]
pub struct GradCase {
    pub input_err: f64,
    pub param_err: f64,
}

fn random_case(seed: u64) -> (Model, Vec<Tensor>, Vec<usize>) {
    use fisher_probe::data::Input;
    let mut r = rng(seed);
    let classes = r.gen_range(2..=4);
    match seed % 3 {
        0 | 1 => {
            let act = if seed.is_multiple_of(3) { Activation::Tanh } else { Activation::Relu };
            let d = r.gen_range(1..=6);
            let mut widths = vec![d];
            for _ in 0..r.gen_range(0..=2) {
                widths.push(r.gen_range(2..=8));
            }
            widths.push(classes);
            let model = random_mlp(&mut r, widths, act);
            let xs = (0..3).map(|_| Tensor::vector(gaussian_vec(&mut r, d, 1.0))).collect();
            let ys = (0..3).map(|_| r.gen_range(0..classes)).collect();
            (model, xs, ys)
        }
        _ => {
            let dim = r.gen_range(2..=5);
            let clf = random_text_classifier(&mut r, dim, 3, classes);
            let xs = (0..3)
                .map(|_| {
                    let len = r.gen_range(1..=7);
                    let text = random_sentence(&mut r, 30, len);
                    clf.encode(&Input::Text(text)).unwrap().tensor
                })
                .collect();
            let ys = (0..3).map(|_| r.gen_range(0..classes)).collect();
            (clf.into_parts().0, xs, ys)
        }
    }
}

pub fn gradient_case(seed: u64) -> GradCase {
    use fisher_probe::autograd::{forward, grad_input, grad_params};
    let (model, xs, ys) = random_case(seed);
    let graph = model.graph();
    let params = model.params();

    let x = &xs[0];
    let target = ys[0];
    let analytic = grad_input(graph, x, params, target).unwrap();
    let f = |t: &Tensor| forward(graph, t, params).unwrap().data()[target];
    let numeric: Vec<f64> = (0..x.len())
        .map(|i| {
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus.data_mut()[i] += FD_STEP;
            minus.data_mut()[i] -= FD_STEP;
            (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
        })
        .collect();
    let input_err = rel_err(analytic.data(), &numeric, 1e-8);

    let loss = |ps: &ParamSet| {
        xs.iter()
            .zip(&ys)
            .map(|(x, &y)| -forward(graph, x, ps).unwrap().data()[y])
            .sum::<f64>()
            / xs.len() as f64
    };
    let grads = grad_params(graph, &xs, &ys, params).unwrap();
    let mut analytic_p = Vec::new();
    let mut numeric_p = Vec::new();
    for k in 0..params.len() {
        for i in 0..params.get(k).len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.get_mut(k).data_mut()[i] += FD_STEP;
            minus.get_mut(k).data_mut()[i] -= FD_STEP;
            numeric_p.push((loss(&plus) - loss(&minus)) / (2.0 * FD_STEP));
            analytic_p.push(grads.get(k).data()[i]);
        }
    }
    GradCase {
        input_err,
        param_err: rel_err(&analytic_p, &numeric_p, 1e-8),
    }
}

/// Dense `D × D` metric `Σ_y p_y ∇log p_y ∇log p_yᵀ`.
pub fn dense_metric(j: &fisher_probe::fim::LogProbJacobian) -> Vec<Vec<f64>> {
    let d = j.dim();
    let mut g = vec![vec![0.0; d]; d];
    for (row, p) in j.rows.iter().zip(&j.probs) {
        for a in 0..d {
            for b in 0..d {
                g[a][b] += p * row[a] * row[b];
            }
        }
    }
    g
}

/// Facts about the metric at one random (model, input) pair.
#[derive(Debug, Clone)]
pub struct MetricCase {
    pub classes: usize,
    pub dim: usize,
    /// Largest `|G_ab − G_ba|` relative to `max |G|`.
    pub asymmetry: f64,
    pub gram_symmetric: bool,
    pub min_eigenvalue: f64,
    pub rank: usize,
    pub gram_vs_dense: f64,
    pub score_sum: f64,
    pub quad_form_gap: f64,
}

pub fn metric_case(seed: u64) -> MetricCase {
    use fisher_probe::data::Input;
    use fisher_probe::fim::{fim_spectrum, jacobian};
    use nalgebra::DMatrix;
    let mut r = rng(seed);
    let classes = r.gen_range(2..=6);
    let (model, x, mask) = if seed.is_multiple_of(2) {
        let d = r.gen_range(1..=12);
        let act = if seed.is_multiple_of(4) { Activation::Tanh } else { Activation::Relu };
        let hidden = r.gen_range(2..=10);
        let model = random_mlp(&mut r, vec![d, hidden, classes], act);
        let x = Tensor::vector(gaussian_vec(&mut r, d, 1.5));
        (model, x, None)
    } else {
        let dim = r.gen_range(2..=4);
        let clf = random_text_classifier(&mut r, dim, 4, classes);
        let len = r.gen_range(1..=12);
        let enc = clf.encode(&Input::Text(random_sentence(&mut r, 30, len))).unwrap();
        (clf.into_parts().0, enc.tensor, Some(enc.mask))
    };
    let j = jacobian(&model, &x, mask.as_deref()).unwrap();
    let spec = fim_spectrum(&j).unwrap();
    let g = dense_metric(&j);
    let d = g.len();
    let scale = g.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut asymmetry: f64 = 0.0;
    for a in 0..d {
        for b in 0..d {
            asymmetry = asymmetry.max((g[a][b] - g[b][a]).abs() / scale);
        }
    }
    let m = j.gram();
    let gram_symmetric = (0..m.len()).all(|a| (0..m.len()).all(|b| m[a][b] == m[b][a]));
    let dense = DMatrix::from_fn(d, d, |a, b| g[a][b]).symmetric_eigen();
    let dense_max = dense.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let score_sum = j
        .expected_score()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));

    let eta = gaussian_vec(&mut r, d, 1.0);
    let via_dense: f64 = (0..d)
        .map(|a| (0..d).map(|b| eta[a] * g[a][b] * eta[b]).sum::<f64>())
        .sum();
    MetricCase {
        classes,
        dim: d,
        asymmetry,
        gram_symmetric,
        min_eigenvalue: spec.raw_eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min),
        rank: spec.eigenvalues.iter().filter(|&&v| v > 1e-10).count(),
        gram_vs_dense: (spec.lambda_max - dense_max.max(0.0)).abs(),
        score_sum,
        quad_form_gap: (j.quadratic_form(&eta) - via_dense).abs() / via_dense.abs().max(1.0),
    }
}

pub const WORDS: [&str; 16] = [
    "good", "bad", "movie", "great", "awful", "best", "worst", "film", "plot", "acting", "boring",
    "fun", "the", "was", "a", "!",
];

/// A small text model saved to disk next to its embedding file.
pub struct TextFixture {
    pub dir: tempfile::TempDir,
    pub checkpoint: std::path::PathBuf,
    pub embeddings: std::path::PathBuf,
    pub clf: Classifier,
}

pub fn text_fixture(seed: u64) -> TextFixture {
    use std::fmt::Write as _;
    let mut r = rng(seed);
    let dim = 6;
    let dir = tempfile::tempdir().unwrap();
    let mut text = String::new();
    for w in WORDS {
        let row = gaussian_vec(&mut r, dim, 0.7);
        write!(text, "{w}").unwrap();
        for v in row {
            write!(text, " {v}").unwrap();
        }
        text.push('\n');
    }
    let embeddings = dir.path().join("vectors.txt");
    std::fs::write(&embeddings, text).unwrap();
    let table = fisher_probe::data::load_embeddings(&embeddings).unwrap();
    let mut model = build_model(&text_cnn_spec(dim, vec![2, 3], 6, 2), r.gen()).unwrap();
    for p in model.params_mut().iter_mut() {
        if p.name.ends_with("bias") {
            let n = p.value.len();
            p.value.data_mut().copy_from_slice(&gaussian_vec(&mut r, n, 0.2));
        }
    }
    model.set_vocab_hash(Some(table.fingerprint()));
    let checkpoint = dir.path().join("model.ckpt");
    fisher_probe::models::save_checkpoint(&model, &checkpoint).unwrap();
    let clf = Classifier::new(model, Some(table)).unwrap();
    TextFixture {
        dir,
        checkpoint,
        embeddings,
        clf,
    }
}

pub fn bin() -> std::process::Command {
    std::process::Command::new(env!("CARGO_BIN_EXE_fisher-probe"))
}

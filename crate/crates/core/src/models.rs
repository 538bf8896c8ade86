//! Classifier architectures, frozen word embeddings and checkpoints.
//!
//! Two architectures are provided: a small fully connected network for
//! points in the plane and a convolutional sentence classifier over frozen
//! pretrained word vectors (filter widths 3/4/5, max-over-time pooling,
//! dropout, one linear output layer).

use std::collections::HashMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Dim, Graph, GraphBuilder, Param, ParamSet};
use crate::data::{tokenize, Input};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Pretrained word vectors plus an all-zero PAD row and an UNK row.
///
/// Row layout: the loaded vocabulary in file order, then PAD, then UNK.
/// The UNK row is the mean of the loaded rows.
#[derive(Debug, Clone)]
pub struct EmbeddingTable {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    matrix: Tensor,
}

impl EmbeddingTable {
    pub fn from_rows(tokens: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != rows.len() {
            return Err(Error::Empty("embedding table needs at least one row".into()));
        }
        let dim = rows[0].len();
        if dim == 0 || rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("embedding rows have inconsistent width".into()));
        }
        let n = rows.len();
        let mut unk = vec![0.0; dim];
        for row in &rows {
            unk.iter_mut().zip(row).for_each(|(u, v)| *u += v);
        }
        unk.iter_mut().for_each(|u| *u /= n as f64);
        let mut data: Vec<f64> = rows.into_iter().flatten().collect();
        data.extend(std::iter::repeat_n(0.0, dim));
        data.extend(unk);
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(EmbeddingTable {
            dim,
            tokens,
            index,
            matrix: Tensor::new(vec![n + 2, dim], data)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of rows including PAD and UNK.
    pub fn rows(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn pad_id(&self) -> usize {
        self.tokens.len()
    }

    pub fn unk_id(&self) -> usize {
        self.tokens.len() + 1
    }

    /// Row index of `token`, falling back to UNK.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.unk_id())
    }

    pub fn row(&self, id: usize) -> &[f64] {
        &self.matrix.data()[id * self.dim..(id + 1) * self.dim]
    }

    /// Stacks the rows for `ids` into an `n × d` tensor.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        if ids.is_empty() {
            return Err(Error::Empty("no tokens to embed".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for &id in ids {
            if id >= self.rows() {
                return Err(Error::Shape(format!("token id {id} outside table")));
            }
            data.extend_from_slice(self.row(id));
        }
        Tensor::new(vec![ids.len(), self.dim], data)
    }

    /// SHA-256 over the vocabulary and vector bits, hex encoded.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.dim as u64).to_le_bytes());
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        for v in self.matrix.data() {
            h.update(v.to_bits().to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    /// Fully connected network; `widths` runs from input to output.
    Mlp {
        widths: Vec<usize>,
        activation: Activation,
    },
    TextCnn {
        embedding_dim: usize,
        filter_widths: Vec<usize>,
        filters_per_width: usize,
        dropout: f64,
        max_len: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub num_classes: usize,
}

/// Longest token sequence fed to a text model; longer texts lose their tail.
pub const DEFAULT_MAX_LEN: usize = 400;

impl ModelSpec {
    /// `2 → 16 → 2`, tanh.
    pub fn synthetic_mlp() -> Self {
        ModelSpec::mlp(vec![2, 16, 2], Activation::Tanh)
    }

    pub fn mlp(widths: Vec<usize>, activation: Activation) -> Self {
        let num_classes = widths.last().copied().unwrap_or(0);
        ModelSpec {
            architecture: Architecture::Mlp { widths, activation },
            num_classes,
        }
    }

    /// Widths 3, 4, 5 with 100 filters each, dropout 0.5.
    pub fn text_cnn(embedding_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::TextCnn {
                embedding_dim,
                filter_widths: vec![3, 4, 5],
                filters_per_width: 100,
                dropout: 0.5,
                max_len: DEFAULT_MAX_LEN,
            },
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidSpec("need at least two classes".into()));
        }
        match &self.architecture {
            Architecture::Mlp { widths, .. } => {
                if widths.len() < 2 || widths.contains(&0) {
                    return Err(Error::InvalidSpec(format!("bad layer widths {widths:?}")));
                }
                if widths.last() != Some(&self.num_classes) {
                    return Err(Error::InvalidSpec(
                        "last layer width must equal the number of classes".into(),
                    ));
                }
            }
            Architecture::TextCnn {
                embedding_dim,
                filter_widths,
                filters_per_width,
                dropout,
                max_len,
            } => {
                if *embedding_dim == 0 || *filters_per_width == 0 || filter_widths.is_empty() {
                    return Err(Error::InvalidSpec("empty text-cnn dimensions".into()));
                }
                if filter_widths.contains(&0) {
                    return Err(Error::InvalidSpec("zero filter width".into()));
                }
                let widest = *filter_widths.iter().max().expect("non-empty");
                if widest > *max_len {
                    return Err(Error::InvalidSpec(format!(
                        "filter width {widest} exceeds max length {max_len}"
                    )));
                }
                if !(0.0..1.0).contains(dropout) {
                    return Err(Error::InvalidSpec(format!("dropout {dropout} not in [0, 1)")));
                }
            }
        }
        Ok(())
    }

    /// Builds the computation graph for this architecture.
    pub fn graph(&self) -> Result<Graph> {
        self.validate()?;
        match &self.architecture {
            Architecture::Mlp { widths, activation } => {
                let mut g = GraphBuilder::new(vec![Dim::Fixed(widths[0])]);
                let mut h = g.input();
                let layers = widths.len() - 1;
                for i in 0..layers {
                    let w = g.param(format!("layer{i}.weight"), vec![widths[i + 1], widths[i]]);
                    let b = g.param(format!("layer{i}.bias"), vec![widths[i + 1]]);
                    h = g.matvec(w, h)?;
                    h = g.add(h, b)?;
                    if i + 1 < layers {
                        h = match activation {
                            Activation::Tanh => g.tanh(h),
                            Activation::Relu => g.relu(h),
                        };
                    }
                }
                let out = g.log_softmax(h)?;
                g.build(out)
            }
            Architecture::TextCnn {
                embedding_dim,
                filter_widths,
                filters_per_width,
                dropout,
                ..
            } => {
                let widest = *filter_widths.iter().max().expect("validated");
                let mut g = GraphBuilder::new(vec![
                    Dim::Var { min: widest },
                    Dim::Fixed(*embedding_dim),
                ]);
                let x = g.input();
                let mut pooled = Vec::new();
                for &width in filter_widths {
                    let w = g.param(
                        format!("conv{width}.weight"),
                        vec![*filters_per_width, width * embedding_dim],
                    );
                    let b = g.param(format!("conv{width}.bias"), vec![*filters_per_width]);
                    // relu(max_t(z_t) + b) == max_t relu(z_t + b): bias and
                    // activation commute with the pool.
                    let c = g.conv1d(x, w, width)?;
                    let m = g.max_over_time(c)?;
                    let m = g.add(m, b)?;
                    pooled.push(g.relu(m));
                }
                let h = g.concat(&pooled)?;
                let h = g.dropout(h, *dropout)?;
                let features = filters_per_width * filter_widths.len();
                let w = g.param("out.weight", vec![self.num_classes, features]);
                let b = g.param("out.bias", vec![self.num_classes]);
                let z = g.matvec(w, h)?;
                let z = g.add(z, b)?;
                let out = g.log_softmax(z)?;
                g.build(out)
            }
        }
    }
}

/// A classifier: spec, graph and trained parameters.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    graph: Graph,
    params: ParamSet,
    vocab_hash: Option<String>,
}

/// Deterministically initialised model: Glorot-uniform weights from a
/// ChaCha8 stream seeded with `seed`, zero biases.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let graph = spec.graph()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = graph
        .param_decls()
        .iter()
        .map(|decl| {
            let len: usize = decl.shape.iter().product();
            let data = if decl.shape.len() == 2 {
                let limit = (6.0 / (decl.shape[0] + decl.shape[1]) as f64).sqrt();
                (0..len).map(|_| rng.gen_range(-limit..limit)).collect()
            } else {
                vec![0.0; len]
            };
            Ok(Param {
                name: decl.name.clone(),
                value: Tensor::new(decl.shape.clone(), data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Model::new(spec.clone(), ParamSet::new(params))
}

impl Model {
    pub fn new(spec: ModelSpec, params: ParamSet) -> Result<Self> {
        let graph = spec.graph()?;
        let decls = graph.param_decls();
        if decls.len() != params.len()
            || decls
                .iter()
                .zip(params.iter())
                .any(|(d, p)| d.name != p.name || d.shape != p.value.shape())
        {
            return Err(Error::InvalidSpec(
                "parameters do not match the architecture".into(),
            ));
        }
        Ok(Model {
            spec,
            graph,
            params,
            vocab_hash: None,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn vocab_hash(&self) -> Option<&str> {
        self.vocab_hash.as_deref()
    }

    pub fn set_vocab_hash(&mut self, hash: Option<String>) {
        self.vocab_hash = hash;
    }

    pub fn is_text(&self) -> bool {
        matches!(self.spec.architecture, Architecture::TextCnn { .. })
    }

    /// Class log-probabilities for an already encoded input.
    pub fn log_probs(&self, input: &Tensor) -> Result<Tensor> {
        crate::autograd::forward(&self.graph, input, &self.params)
    }
}

const CHECKPOINT_MAGIC: &str = "FISHER-PROBE-CHECKPOINT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    magic: String,
    version: u32,
    spec: ModelSpec,
    vocab_hash: Option<String>,
    params: ParamSet,
}

/// Serializes a model to the checkpoint JSON container.
///
/// Layout: `{"magic": "FISHER-PROBE-CHECKPOINT", "version": 1, "spec": ...,
/// "vocab_hash": hex | null, "params": {"params": [{"name", "value":
/// {"shape", "data"}}]}}`. Floats are written in shortest round-trip form,
/// so saving the same model twice yields identical bytes.
pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let ckpt = Checkpoint {
        magic: CHECKPOINT_MAGIC.into(),
        version: CHECKPOINT_VERSION,
        spec: model.spec.clone(),
        vocab_hash: model.vocab_hash.clone(),
        params: model.params.clone(),
    };
    let mut bytes = serde_json::to_vec(&ckpt)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Hex SHA-256 of the checkpoint serialization; identifies a trained model.
pub fn model_hash(model: &Model) -> Result<String> {
    Ok(hex::encode(Sha256::digest(checkpoint_bytes(model)?)))
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Model> {
    let ckpt: Checkpoint = serde_json::from_slice(bytes)
        .map_err(|e| Error::Checkpoint(format!("not a checkpoint: {e}")))?;
    if ckpt.magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {:?}", ckpt.magic)));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {}",
            ckpt.version
        )));
    }
    let mut model = Model::new(ckpt.spec, ckpt.params)?;
    model.vocab_hash = ckpt.vocab_hash;
    Ok(model)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// An input prepared for the model graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub tensor: Tensor,
    /// One flag per flattened coordinate; `false` marks PAD positions.
    pub mask: Vec<bool>,
    /// Real (non-PAD) tokens after truncation; empty for point inputs.
    pub tokens: Vec<String>,
    /// Number of real tokens for text inputs.
    pub n_tokens: Option<usize>,
}

/// A model together with the embedding table its text inputs need.
#[derive(Debug, Clone)]
pub struct Classifier {
    model: Model,
    embeddings: Option<EmbeddingTable>,
}

impl Classifier {
    /// Text models require embeddings whose width matches the model and,
    /// when the checkpoint recorded one, whose fingerprint matches too.
    pub fn new(model: Model, embeddings: Option<EmbeddingTable>) -> Result<Self> {
        if let Architecture::TextCnn { embedding_dim, .. } = model.spec.architecture {
            let table = embeddings.as_ref().ok_or_else(|| {
                Error::InvalidConfig("text model needs an embedding table".into())
            })?;
            if table.dim() != embedding_dim {
                return Err(Error::InvalidConfig(format!(
                    "embedding width {} but model expects {embedding_dim}",
                    table.dim()
                )));
            }
            if let Some(expected) = model.vocab_hash() {
                if expected != table.fingerprint() {
                    return Err(Error::InvalidConfig(
                        "embedding table does not match the checkpoint's vocabulary hash".into(),
                    ));
                }
            }
        }
        Ok(Classifier { model, embeddings })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn embeddings(&self) -> Option<&EmbeddingTable> {
        self.embeddings.as_ref()
    }

    pub fn into_parts(self) -> (Model, Option<EmbeddingTable>) {
        (self.model, self.embeddings)
    }

    pub fn encode(&self, input: &Input) -> Result<Encoded> {
        match input {
            Input::Text(text) => self.encode_tokens(&tokenize(text)),
            Input::Point(p) => {
                let Architecture::Mlp { widths, .. } = &self.model.spec.architecture else {
                    return Err(Error::InvalidConfig("text model given a point".into()));
                };
                if p.len() != widths[0] {
                    return Err(Error::Shape(format!(
                        "point of dimension {} for a {}-d model",
                        p.len(),
                        widths[0]
                    )));
                }
                Ok(Encoded {
                    tensor: Tensor::vector(p.clone()),
                    mask: vec![true; p.len()],
                    tokens: Vec::new(),
                    n_tokens: None,
                })
            }
        }
    }

    /// Truncates to the model's max length, pads up to the widest filter
    /// and embeds.
    pub fn encode_tokens(&self, tokens: &[String]) -> Result<Encoded> {
        let Architecture::TextCnn {
            filter_widths,
            max_len,
            ..
        } = &self.model.spec.architecture
        else {
            return Err(Error::InvalidConfig("point model given text".into()));
        };
        let table = self.embeddings.as_ref().expect("checked in Classifier::new");
        if tokens.is_empty() {
            return Err(Error::Empty("text has no tokens".into()));
        }
        let tokens: Vec<String> = tokens.iter().take(*max_len).cloned().collect();
        let mut ids: Vec<usize> = tokens.iter().map(|t| table.id(t)).collect();
        let min_len = *filter_widths.iter().max().expect("validated");
        while ids.len() < min_len {
            ids.push(table.pad_id());
        }
        let pad = table.pad_id();
        let mask = ids
            .iter()
            .flat_map(|&id| std::iter::repeat_n(id != pad, table.dim()))
            .collect();
        Ok(Encoded {
            tensor: table.embed(&ids)?,
            mask,
            n_tokens: Some(tokens.len()),
            tokens,
        })
    }
}

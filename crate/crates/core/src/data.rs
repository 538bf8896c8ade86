//! Data ingestion: tokenizer, embedding-file loader, dataset and pair
//! readers, and the two-component Gaussian mixture used for the synthetic
//! boundary experiment.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::models::EmbeddingTable;

/// What a classifier consumes: raw text or a low-dimensional point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Input {
    Text(String),
    Point(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub input: Input,
    pub label: usize,
}

impl Example {
    pub fn text(id: impl Into<String>, text: impl Into<String>, label: usize) -> Self {
        Example {
            id: id.into(),
            input: Input::Text(text.into()),
            label,
        }
    }

    pub fn point(id: impl Into<String>, point: Vec<f64>, label: usize) -> Self {
        Example {
            id: id.into(),
            input: Input::Point(point),
            label,
        }
    }
}

/// An (original, perturbed) pair such as a contrast-set or counterfactual edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedExample {
    pub id: String,
    pub original_text: String,
    pub perturbed_text: String,
    pub original_label: usize,
    pub perturbed_label: usize,
}

/// Explicit mapping from label strings to class ids (position in the list).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        let unique: HashSet<&String> = names.iter().collect();
        if names.len() < 2 || unique.len() != names.len() {
            return Err(Error::InvalidConfig(format!(
                "label map needs at least two distinct labels, got {names:?}"
            )));
        }
        Ok(LabelMap { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, label: &str) -> Result<usize> {
        self.names
            .iter()
            .position(|n| n == label)
            .ok_or_else(|| Error::UnknownLabel {
                label: label.to_string(),
                valid: self.names.clone(),
            })
    }

    fn id_of_value(&self, value: &Value) -> Result<usize> {
        match value {
            Value::String(s) => self.id(s),
            Value::Number(n) => match n.as_u64() {
                Some(i) if (i as usize) < self.names.len() => Ok(i as usize),
                _ => Err(Error::UnknownLabel {
                    label: n.to_string(),
                    valid: self.names.clone(),
                }),
            },
            other => Err(Error::UnknownLabel {
                label: other.to_string(),
                valid: self.names.clone(),
            }),
        }
    }
}

impl Default for LabelMap {
    fn default() -> Self {
        LabelMap {
            names: vec!["neg".into(), "pos".into()],
        }
    }
}

const HTML_BREAKS: [&str; 4] = ["<br />", "<br/>", "<br >", "<br>"];

fn is_punct(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}' | '\u{2019}' | '\u{201C}' | '\u{201D}' | '\u{2013}' | '\u{2014}' | '\u{2026}'
        )
}

/// Lowercases, strips HTML line breaks and splits punctuation into
/// single-character tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut text = text.to_lowercase();
    for br in HTML_BREAKS {
        text = text.replace(br, " ");
    }
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
        } else if is_punct(c) {
            if !current.is_empty() {
                tokens.push(std::mem::take(&mut current));
            }
            tokens.push(c.to_string());
        } else {
            current.push(c);
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)> + '_> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(|e| Error::io(path, e)))))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads a whitespace-separated text embedding file (`token v1 ... vd` per
/// line). The width is taken from the first line; PAD and UNK rows are
/// appended by [`EmbeddingTable::from_rows`].
pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let mut tokens = Vec::new();
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    let mut dim = None;
    for (line_no, line) in open_lines(path)? {
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_err(path, line_no, format!("bad float: {e}")))?;
        let d = *dim.get_or_insert(values.len());
        if d == 0 {
            return Err(parse_err(path, line_no, "line has no vector values"));
        }
        if values.len() != d {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {d} values, found {}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, line_no, "non-finite value"));
        }
        if seen.insert(token.to_string()) {
            tokens.push(token.to_string());
            rows.push(values);
        }
    }
    if tokens.is_empty() {
        return Err(Error::Empty(format!("{} holds no embeddings", path.display())));
    }
    EmbeddingTable::from_rows(tokens, rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Jsonl,
    Tsv,
}

impl std::str::FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(DatasetFormat::Jsonl),
            "tsv" => Ok(DatasetFormat::Tsv),
            other => Err(Error::InvalidConfig(format!("unknown dataset format {other:?}"))),
        }
    }
}

impl DatasetFormat {
    /// Guesses the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "jsonl" | "json" => Some(DatasetFormat::Jsonl),
            "tsv" | "txt" => Some(DatasetFormat::Tsv),
            _ => None,
        }
    }
}

fn id_string(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Reads a labeled dataset. JSONL records carry `text` (or a numeric
/// `point`), `label` and an optional `id`; TSV lines are `label<TAB>text`.
/// Records without an id get their zero-based record index.
pub fn load_dataset(
    path: impl AsRef<Path>,
    format: DatasetFormat,
    labels: &LabelMap,
) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (line_no, line) in open_lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let index = out.len();
        let (explicit_id, input, label) = match format {
            DatasetFormat::Tsv => {
                let (label, text) = line
                    .split_once('\t')
                    .ok_or_else(|| parse_err(path, line_no, "expected label<TAB>text"))?;
                (None, Input::Text(text.to_string()), labels.id(label.trim())?)
            }
            DatasetFormat::Jsonl => {
                let record: Value = serde_json::from_str(&line)
                    .map_err(|e| parse_err(path, line_no, e.to_string()))?;
                let label = record
                    .get("label")
                    .ok_or_else(|| parse_err(path, line_no, "missing field `label`"))?;
                let label = labels.id_of_value(label)?;
                let input = if let Some(text) = record.get("text") {
                    let text = text
                        .as_str()
                        .ok_or_else(|| parse_err(path, line_no, "`text` must be a string"))?;
                    Input::Text(text.to_string())
                } else if let Some(point) = record.get("point") {
                    let coords: Vec<f64> = serde_json::from_value(point.clone())
                        .map_err(|e| parse_err(path, line_no, e.to_string()))?;
                    Input::Point(coords)
                } else {
                    return Err(parse_err(path, line_no, "missing field `text`"));
                };
                let id = match record.get("id") {
                    None | Some(Value::Null) => None,
                    Some(v) => Some(
                        id_string(v)
                            .ok_or_else(|| parse_err(path, line_no, "`id` must be a string"))?,
                    ),
                };
                (id, input, label)
            }
        };
        let id = explicit_id.unwrap_or_else(|| index.to_string());
        if !ids.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        out.push(Example { id, input, label });
    }
    Ok(out)
}

/// Reads a JSONL pair file with `original_text`, `perturbed_text`,
/// `original_label`, `perturbed_label` and an optional `id`.
pub fn load_pairs(path: impl AsRef<Path>, labels: &LabelMap) -> Result<Vec<PairedExample>> {
    let path = path.as_ref();
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (line_no, line) in open_lines(path)? {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Value =
            serde_json::from_str(&line).map_err(|e| parse_err(path, line_no, e.to_string()))?;
        let field = |name: &str| {
            record
                .get(name)
                .filter(|v| !v.is_null())
                .ok_or_else(|| parse_err(path, line_no, format!("missing field `{name}`")))
        };
        let text = |name: &str| -> Result<String> {
            field(name)?
                .as_str()
                .map(str::to_string)
                .ok_or_else(|| parse_err(path, line_no, format!("`{name}` must be a string")))
        };
        let original_text = text("original_text")?;
        let perturbed_text = text("perturbed_text")?;
        let original_label = labels.id_of_value(field("original_label")?)?;
        let perturbed_label = labels.id_of_value(field("perturbed_label")?)?;
        let id = match record.get("id") {
            None | Some(Value::Null) => out.len().to_string(),
            Some(v) => {
                id_string(v).ok_or_else(|| parse_err(path, line_no, "`id` must be a string"))?
            }
        };
        if !ids.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        out.push(PairedExample {
            id,
            original_text,
            perturbed_text,
            original_label,
            perturbed_label,
        });
    }
    Ok(out)
}

/// Parameters of a two-component Gaussian mixture in the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub mu1: [f64; 2],
    pub mu2: [f64; 2],
    pub sigma1: [[f64; 2]; 2],
    pub sigma2: [[f64; 2]; 2],
    pub n_per_class: usize,
    pub seed: u64,
}

impl Default for GaussianMixtureSpec {
    /// μ1 = [−2, −2], Σ1 = I; μ2 = [3.5, 3.5], Σ2 = [[2, 1], [1, 2]];
    /// 500 points per class.
    fn default() -> Self {
        GaussianMixtureSpec {
            mu1: [-2.0, -2.0],
            mu2: [3.5, 3.5],
            sigma1: [[1.0, 0.0], [0.0, 1.0]],
            sigma2: [[2.0, 1.0], [1.0, 2.0]],
            n_per_class: 500,
            seed: 0,
        }
    }
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = m`.
pub fn cholesky(m: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = m.len();
    let scale = m
        .iter()
        .flatten()
        .fold(0.0f64, |acc, v| acc.max(v.abs()))
        .max(1.0);
    for (i, row) in m.iter().enumerate() {
        if row.len() != n {
            return Err(Error::NotPositiveDefinite);
        }
        for j in 0..i {
            if (row[j] - m[j][i]).abs() > 1e-12 * scale {
                return Err(Error::NotPositiveDefinite);
            }
        }
    }
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let d = m[i][i] - s;
                if d.is_nan() || d <= 0.0 {
                    return Err(Error::NotPositiveDefinite);
                }
                l[i][j] = d.sqrt();
            } else {
                l[i][j] = (m[i][j] - s) / l[j][j];
            }
        }
    }
    Ok(l)
}

/// Draws `n_per_class` points from each component: class 0 from
/// `(mu1, sigma1)`, class 1 from `(mu2, sigma2)`, class 0 first.
pub fn sample_mixture(spec: &GaussianMixtureSpec) -> Result<Vec<Example>> {
    let factors = [
        cholesky(&spec.sigma1.map(|r| r.to_vec()))?,
        cholesky(&spec.sigma2.map(|r| r.to_vec()))?,
    ];
    let means = [spec.mu1, spec.mu2];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = Vec::with_capacity(2 * spec.n_per_class);
    for class in 0..2 {
        let l = &factors[class];
        for i in 0..spec.n_per_class {
            let z0: f64 = StandardNormal.sample(&mut rng);
            let z1: f64 = StandardNormal.sample(&mut rng);
            let x = means[class][0] + l[0][0] * z0;
            let y = means[class][1] + l[1][0] * z0 + l[1][1] * z1;
            out.push(Example::point(format!("c{class}-{i}"), vec![x, y], class));
        }
    }
    Ok(out)
}

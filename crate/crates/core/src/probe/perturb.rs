//! Word substitutions and paired original/perturbed scoring.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{tokenize, Example, Input, PairedExample};
use crate::error::{Error, Result};
use crate::fim::lambda_max;
use crate::models::Classifier;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Substitution {
    /// Index into the tokenized text.
    pub position: usize,
    /// Replacement text; tokenized, so it may expand to several tokens.
    pub replacement: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubstitutionSpec {
    pub substitutions: Vec<Substitution>,
}

impl SubstitutionSpec {
    pub fn new(subs: impl IntoIterator<Item = (usize, String)>) -> Self {
        SubstitutionSpec {
            substitutions: subs
                .into_iter()
                .map(|(position, replacement)| Substitution {
                    position,
                    replacement,
                })
                .collect(),
        }
    }
}

/// Replaces tokens of a text example and returns the re-joined example.
pub fn apply_substitutions(example: &Example, subs: &SubstitutionSpec) -> Result<Example> {
    let Input::Text(text) = &example.input else {
        return Err(Error::InvalidConfig("substitutions apply to text examples".into()));
    };
    let tokens = tokenize(text);
    let mut seen = HashSet::new();
    for s in &subs.substitutions {
        if s.position >= tokens.len() {
            return Err(Error::InvalidConfig(format!(
                "position {} out of range for {} tokens",
                s.position,
                tokens.len()
            )));
        }
        if !seen.insert(s.position) {
            return Err(Error::InvalidConfig(format!(
                "position {} substituted twice",
                s.position
            )));
        }
    }
    let mut out = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.into_iter().enumerate() {
        match subs.substitutions.iter().find(|s| s.position == i) {
            Some(s) => out.extend(tokenize(&s.replacement)),
            None => out.push(tok),
        }
    }
    Ok(Example {
        id: example.id.clone(),
        input: Input::Text(out.join(" ")),
        label: example.label,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRecord {
    pub id: String,
    pub lambda_original: f64,
    pub lambda_perturbed: f64,
    /// `lambda_perturbed − lambda_original`
    pub delta: f64,
    pub prediction_original: usize,
    pub prediction_perturbed: usize,
    pub flipped: bool,
    pub original_label: usize,
    pub perturbed_label: usize,
}

/// Summary of eigenvalue deltas over a set of pairs. `std` uses the
/// population divisor `n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub count: usize,
    pub failed: usize,
    pub mean: f64,
    pub std: f64,
    pub threshold: f64,
    pub frac_le_threshold: f64,
    pub frac_gt_threshold: f64,
    pub mean_lambda_original: f64,
    pub mean_lambda_perturbed: f64,
}

pub const DEFAULT_DELTA_THRESHOLD: f64 = 0.0;

pub fn delta_stats(records: &[PairedRecord], threshold: f64) -> Result<DeltaStats> {
    if records.is_empty() {
        return Err(Error::Empty("no scored pairs".into()));
    }
    let n = records.len() as f64;
    let mean = records.iter().map(|r| r.delta).sum::<f64>() / n;
    let var = records
        .iter()
        .map(|r| (r.delta - mean).powi(2))
        .sum::<f64>()
        / n;
    let le = records.iter().filter(|r| r.delta <= threshold).count();
    Ok(DeltaStats {
        count: records.len(),
        failed: 0,
        mean,
        std: var.sqrt(),
        threshold,
        frac_le_threshold: le as f64 / n,
        frac_gt_threshold: (records.len() - le) as f64 / n,
        mean_lambda_original: records.iter().map(|r| r.lambda_original).sum::<f64>() / n,
        mean_lambda_perturbed: records.iter().map(|r| r.lambda_perturbed).sum::<f64>() / n,
    })
}

fn score_pair(clf: &Classifier, pair: &PairedExample) -> Result<PairedRecord> {
    let original = lambda_max(
        clf,
        &Example::text(pair.id.clone(), pair.original_text.clone(), pair.original_label),
    )?;
    let perturbed = lambda_max(
        clf,
        &Example::text(pair.id.clone(), pair.perturbed_text.clone(), pair.perturbed_label),
    )?;
    Ok(PairedRecord {
        id: pair.id.clone(),
        lambda_original: original.lambda_max,
        lambda_perturbed: perturbed.lambda_max,
        delta: perturbed.lambda_max - original.lambda_max,
        prediction_original: original.prediction,
        prediction_perturbed: perturbed.prediction,
        flipped: original.prediction != perturbed.prediction,
        original_label: pair.original_label,
        perturbed_label: pair.perturbed_label,
    })
}

/// Scores both sides of every pair (in parallel, output in input order)
/// and summarises the successful deltas.
pub fn score_pairs(
    clf: &Classifier,
    pairs: &[PairedExample],
    threshold: f64,
) -> Result<(Vec<Result<PairedRecord>>, DeltaStats)> {
    if pairs.is_empty() {
        return Err(Error::Empty("no pairs".into()));
    }
    let results: Vec<Result<PairedRecord>> =
        pairs.par_iter().map(|p| score_pair(clf, p)).collect();
    let ok: Vec<PairedRecord> = results
        .iter()
        .filter_map(|r| r.as_ref().ok().cloned())
        .collect();
    let mut stats = delta_stats(&ok, threshold)?;
    stats.failed = results.len() - ok.len();
    Ok((results, stats))
}

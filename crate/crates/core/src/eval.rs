//! Accuracy, confound AUROC and matched-subsample construction.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::ensemble::{average_outputs, member_predictions, verdicts_from_predictions, EnsembleVerdict};
use crate::error::{Error, Result};
use crate::model::ModelPair;
use crate::outputs::OutputArray;
use crate::par::Execution;
use crate::synthdata::Dataset;

pub const DEFAULT_MATCH_TOLERANCE: f64 = 2.0;

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Computed from midranks in `O(n log n)`.
pub fn auroc(scores: &[(f64, bool)]) -> Result<f64> {
    if scores.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::input("AUROC scores contain NaN"));
    }
    let pos = scores.iter().filter(|(_, p)| *p).count();
    let neg = scores.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of positive midranks (1-based)
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1].0 == sorted[i].0 {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        let tied_pos = sorted[i..=j].iter().filter(|(_, p)| *p).count();
        rank_sum += midrank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// One-vs-rest AUROC per category of confound row `row` (1-based), averaged
/// over categories that have both positives and negatives.
pub fn macro_auroc(outputs: &[OutputArray], categories: &[Option<usize>], row: usize, arity: usize) -> Option<f64> {
    let mut per_category = Vec::new();
    for c in 0..arity {
        let scores: Vec<(f64, bool)> = outputs
            .iter()
            .zip(categories)
            .filter_map(|(o, cat)| cat.map(|cat| (o.rows[row][c], cat == c)))
            .collect();
        if let Ok(a) = auroc(&scores) {
            per_category.push(a);
        }
    }
    (!per_category.is_empty()).then(|| per_category.iter().sum::<f64>() / per_category.len() as f64)
}

/// Per-confound AUROC from ensemble-averaged outputs over `ds`.
pub fn confound_auroc_from_outputs(outputs: &[OutputArray], ds: &Dataset) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for (k, spec) in ds.layout.confounds().iter().enumerate() {
        if outputs.first().is_some_and(|o| o.rows.len() <= k + 1) {
            continue;
        }
        let cats: Vec<Option<usize>> = ds.confounds.iter().map(|c| c[k]).collect();
        match macro_auroc(outputs, &cats, k + 1, spec.arity()) {
            Some(a) => {
                out.insert(spec.name().to_string(), a);
            }
            None => warn!("confound `{}` has no usable categories; AUROC skipped", spec.name()),
        }
    }
    out
}

pub fn confound_auroc(models: &[ModelPair], ds: &Dataset, exec: Execution) -> Result<BTreeMap<String, f64>> {
    let vols: Vec<&[f32]> = (0..ds.len()).map(|i| ds.volume(i)).collect();
    let preds = member_predictions(models, &vols, exec)?;
    Ok(confound_auroc_from_outputs(&average_outputs(&preds)?, ds))
}

/// Fraction of `indices` whose verdict class equals the label.
pub fn accuracy(verdicts: &[EnsembleVerdict], labels: &[usize], indices: &[usize]) -> Option<f64> {
    if indices.is_empty() {
        return None;
    }
    let hits = indices.iter().filter(|&&i| verdicts[i].class == labels[i]).count();
    Some(hits as f64 / indices.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub variant: String,
    pub threshold: f64,
    /// `None` when nothing passed the threshold.
    pub accuracy: Option<f64>,
    pub included: usize,
    pub total: usize,
    pub confound_auroc: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn csv_header(confounds: &[String]) -> String {
        let mut h = String::from("variant,threshold,accuracy,included,total");
        for c in confounds {
            let _ = write!(h, ",auroc_{c}");
        }
        h
    }

    pub fn csv_row(&self, confounds: &[String]) -> String {
        let mut row = format!(
            "{},{},{},{},{}",
            self.variant,
            self.threshold,
            self.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            self.included,
            self.total
        );
        for c in confounds {
            row.push(',');
            if let Some(a) = self.confound_auroc.get(c) {
                let _ = write!(row, "{a}");
            }
        }
        row
    }
}

/// Ensemble evaluation at several thresholds from a single inference sweep.
pub fn evaluate(
    models: &[ModelPair],
    ds: &Dataset,
    thresholds: &[f64],
    variant: &str,
    exec: Execution,
) -> Result<Vec<MetricReport>> {
    let vols: Vec<&[f32]> = (0..ds.len()).map(|i| ds.volume(i)).collect();
    let preds = member_predictions(models, &vols, exec)?;
    let aurocs = if models[0].output_layout().num_confounds() > 0 {
        confound_auroc_from_outputs(&average_outputs(&preds)?, ds)
    } else {
        BTreeMap::new()
    };
    let verdicts = verdicts_from_predictions(&preds, 0.5)?;
    thresholds
        .iter()
        .map(|&t| {
            let (included, _) = crate::ensemble::threshold_filter(&verdicts, t)?;
            Ok(MetricReport {
                variant: variant.to_string(),
                threshold: t,
                accuracy: accuracy(&verdicts, &ds.labels, &included),
                included: included.len(),
                total: ds.len(),
                confound_auroc: aurocs.clone(),
            })
        })
        .collect()
}

/// Maximum-cardinality pairing of cases with controls whose values differ by
/// at most `tolerance`; among maximum pairings the total absolute difference
/// is minimal. Inputs are `(id, value)`; output pairs are `(case id, control id)`.
///
/// In one dimension an optimal pairing can always be taken order-preserving
/// on the sorted values, so a prefix dynamic program over both sorted lists
/// is exact.
pub fn match_pairs(cases: &[(usize, f64)], controls: &[(usize, f64)], tolerance: f64) -> Vec<(usize, usize)> {
    let mut a = cases.to_vec();
    let mut c = controls.to_vec();
    a.sort_by(|x, y| x.1.total_cmp(&y.1));
    c.sort_by(|x, y| x.1.total_cmp(&y.1));
    let (n, m) = (a.len(), c.len());
    let w = m + 1;
    // (pairs, cost) per prefix
    let mut dp = vec![(0u32, 0.0f64); (n + 1) * w];
    let better = |x: (u32, f64), y: (u32, f64)| x.0 > y.0 || (x.0 == y.0 && x.1 < y.1);
    for i in 1..=n {
        for j in 1..=m {
            let mut best = dp[(i - 1) * w + j];
            let left = dp[i * w + j - 1];
            if better(left, best) {
                best = left;
            }
            let d = (a[i - 1].1 - c[j - 1].1).abs();
            if d <= tolerance {
                let prev = dp[(i - 1) * w + j - 1];
                let cand = (prev.0 + 1, prev.1 + d);
                if better(cand, best) {
                    best = cand;
                }
            }
            dp[i * w + j] = best;
        }
    }
    let mut pairs = Vec::with_capacity(dp[n * w + m].0 as usize);
    let (mut i, mut j) = (n, m);
    while i > 0 && j > 0 {
        let here = dp[i * w + j];
        if here == dp[(i - 1) * w + j] {
            i -= 1;
        } else if here == dp[i * w + j - 1] {
            j -= 1;
        } else {
            pairs.push((a[i - 1].0, c[j - 1].0));
            i -= 1;
            j -= 1;
        }
    }
    pairs.reverse();
    pairs
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchedSample {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchedSample {
    /// Case indices followed by control indices.
    pub fn indices(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).chain(self.pairs.iter().map(|p| p.1)).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Equal-size case (label 1) and control (label 0) groups matched on a
/// confound's value, after dropping samples below `min_value`. The rng only
/// decides which of several equal-valued samples get used.
pub fn matched_subsample<R: Rng + ?Sized>(
    ds: &Dataset,
    match_key: &str,
    min_value: Option<f64>,
    tolerance: f64,
    rng: &mut R,
) -> Result<MatchedSample> {
    let k = ds
        .layout
        .confound_index(match_key)
        .ok_or_else(|| Error::input(format!("no confound named `{match_key}`")))?;
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(Error::input("tolerance must be non-negative"));
    }
    let spec = &ds.layout.confounds()[k];
    let mut cases = Vec::new();
    let mut controls = Vec::new();
    for i in 0..ds.len() {
        let Some(cat) = ds.confounds[i][k] else { continue };
        let v = spec.match_value(cat);
        if min_value.is_some_and(|m| v < m) {
            continue;
        }
        match ds.labels[i] {
            1 => cases.push((i, v)),
            0 => controls.push((i, v)),
            _ => {}
        }
    }
    cases.shuffle(rng);
    controls.shuffle(rng);
    let pairs = match_pairs(&cases, &controls, tolerance);
    if pairs.is_empty() {
        warn!("matched subsample on `{match_key}` is empty");
    }
    Ok(MatchedSample { pairs })
}

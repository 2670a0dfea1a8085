//! Consensus voting over independently trained models and uncertainty
//! thresholding.
//!
//! Each member's label row is a probability vector; the ensemble verdict is
//! their elementwise mean. The largest averaged entry is the confidence, and a
//! sample counts as in-distribution when that confidence reaches the
//! threshold. Disagreeing members pull the mean towards the uniform vector.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::ModelPair;
use crate::outputs::OutputArray;
use crate::par::Execution;

/// Volumes per inference call.
const INFER_CHUNK: usize = 64;

pub const DEFAULT_ENSEMBLE_SIZE: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleVerdict {
    pub probs: Vec<f64>,
    pub class: usize,
    pub confidence: f64,
    pub in_distribution: bool,
}

impl EnsembleVerdict {
    /// Averages label rows. Ties in the argmax go to the lowest class index.
    pub fn from_rows(rows: &[&[f64]], threshold: f64) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::input("ensemble has no members"))?;
        let n = first.len();
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::input("member label rows differ in arity"));
        }
        let mut probs = vec![0.0; n];
        for r in rows {
            for (p, v) in probs.iter_mut().zip(r.iter()) {
                *p += v;
            }
        }
        let m = rows.len() as f64;
        probs.iter_mut().for_each(|p| *p /= m);
        let (class, confidence) = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best });
        Ok(Self {
            probs,
            class,
            confidence,
            in_distribution: confidence >= threshold,
        })
    }

    pub fn rethreshold(&mut self, threshold: f64) {
        self.in_distribution = self.confidence >= threshold;
    }
}

fn check_threshold(threshold: f64, arity: usize) -> Result<()> {
    let lo = 1.0 / arity as f64;
    if !(threshold.is_finite() && threshold >= lo - 1e-12 && threshold <= 1.0) {
        return Err(Error::input(format!("threshold {threshold} outside [{lo}, 1]")));
    }
    Ok(())
}

fn check_members(models: &[ModelPair]) -> Result<()> {
    let first = models.first().ok_or_else(|| Error::input("ensemble has no members"))?;
    if models
        .iter()
        .any(|m| m.layout != first.layout || m.arch.input_dims != first.arch.input_dims)
    {
        return Err(Error::input("ensemble members do not share a layout"));
    }
    Ok(())
}

/// Every member's predictions for every volume, indexed `[member][volume]`.
pub fn member_predictions(models: &[ModelPair], volumes: &[&[f32]], exec: Execution) -> Result<Vec<Vec<OutputArray>>> {
    check_members(models)?;
    let chunks: Vec<&[&[f32]]> = volumes.chunks(INFER_CHUNK).collect();
    let jobs: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|m| (0..chunks.len()).map(move |c| (m, c)))
        .collect();
    let results = exec.map(&jobs, |&(m, c)| models[m].predict_batch(chunks[c]));
    let mut out: Vec<Vec<OutputArray>> = vec![Vec::with_capacity(volumes.len()); models.len()];
    for ((m, _), r) in jobs.iter().zip(results) {
        out[*m].extend(r?);
    }
    Ok(out)
}

pub fn consensus(models: &[ModelPair], volume: &[f32], threshold: f64) -> Result<EnsembleVerdict> {
    Ok(consensus_batch(models, &[volume], threshold, Execution::Sequential)?.remove(0))
}

pub fn consensus_batch(
    models: &[ModelPair],
    volumes: &[&[f32]],
    threshold: f64,
    exec: Execution,
) -> Result<Vec<EnsembleVerdict>> {
    check_members(models)?;
    check_threshold(threshold, models[0].layout.label_arity())?;
    let preds = member_predictions(models, volumes, exec)?;
    verdicts_from_predictions(&preds, threshold)
}

pub fn verdicts_from_predictions(preds: &[Vec<OutputArray>], threshold: f64) -> Result<Vec<EnsembleVerdict>> {
    let n = preds.first().map_or(0, Vec::len);
    (0..n)
        .map(|i| {
            let rows: Vec<&[f64]> = preds.iter().map(|p| p[i].label_row()).collect();
            EnsembleVerdict::from_rows(&rows, threshold)
        })
        .collect()
}

/// Elementwise mean of every output row. Members must share an output layout.
pub fn average_outputs(preds: &[Vec<OutputArray>]) -> Result<Vec<OutputArray>> {
    let first = preds.first().ok_or_else(|| Error::input("ensemble has no members"))?;
    let m = preds.len() as f64;
    let mut out = first.clone();
    for member in &preds[1..] {
        if member.len() != out.len() {
            return Err(Error::input("members predicted different numbers of samples"));
        }
        for (acc, p) in out.iter_mut().zip(member) {
            if acc.rows.len() != p.rows.len() {
                return Err(Error::input("members have different output layouts"));
            }
            for (ra, rp) in acc.rows.iter_mut().zip(&p.rows) {
                for (a, v) in ra.iter_mut().zip(rp) {
                    *a += v;
                }
            }
        }
    }
    for o in &mut out {
        o.rows.iter_mut().flatten().for_each(|v| *v /= m);
    }
    Ok(out)
}

/// Splits sample indices into (included, excluded) by `confidence >= threshold`.
pub fn threshold_filter(verdicts: &[EnsembleVerdict], threshold: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    if let Some(v) = verdicts.first() {
        check_threshold(threshold, v.probs.len())?;
    } else if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::input(format!("threshold {threshold} outside [0, 1]")));
    }
    Ok((0..verdicts.len()).partition(|&i| verdicts[i].confidence >= threshold))
}

#[derive(Serialize)]
struct VerdictLine<'a> {
    id: usize,
    probs: &'a [f64],
    class: usize,
    confidence: f64,
    included: bool,
}

/// One JSON object per line: `{id, probs, class, confidence, included}`.
pub fn verdicts_jsonl(verdicts: &[EnsembleVerdict]) -> String {
    let mut out = String::new();
    for (id, v) in verdicts.iter().enumerate() {
        let line = VerdictLine {
            id,
            probs: &v.probs,
            class: v.class,
            confidence: v.confidence,
            included: v.in_distribution,
        };
        out.push_str(&serde_json::to_string(&line).expect("verdict serializes"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Variant};
    use crate::outputs::OutputLayout;

    fn rows(v: &[[f64; 2]]) -> Vec<&[f64]> {
        v.iter().map(|r| r.as_slice()).collect()
    }

    #[test]
    fn constant_members_average_to_themselves() {
        let members = [[0.95, 0.05]; 10];
        let v = EnsembleVerdict::from_rows(&rows(&members), 0.9).unwrap();
        assert!((v.confidence - 0.95).abs() < 1e-12);
        assert_eq!(v.class, 0);
        assert!(v.in_distribution);
    }

    #[test]
    fn split_vote_is_excluded() {
        let mut members = vec![[1.0, 0.0]; 5];
        members.extend(vec![[0.0, 1.0]; 5]);
        let v = EnsembleVerdict::from_rows(&rows(&members), 0.9).unwrap();
        assert_eq!(v.probs, vec![0.5, 0.5]);
        assert_eq!(v.confidence, 0.5);
        assert_eq!(v.class, 0);
        assert!(!v.in_distribution);
    }

    #[test]
    fn single_member_verdict_is_its_prediction() {
        let layout = OutputLayout::new(2, vec![]).unwrap();
        let arch = Architecture {
            input_dims: [4, 4, 4],
            conv_channels: vec![2],
            feature_width: 4,
            regressor_hidden: 3,
        };
        let model = ModelPair::build(Variant::Baseline, &layout, &arch, 5).unwrap();
        let vol: Vec<f32> = (0..64).map(|i| (i as f32).cos()).collect();
        let own = model.predict(&vol).unwrap();
        let v = consensus(std::slice::from_ref(&model), &vol, 0.5).unwrap();
        assert_eq!(v.probs, own.rows[0]);
    }

    #[test]
    fn threshold_partition() {
        let mk = |c: f64| EnsembleVerdict::from_rows(&[&[c, 1.0 - c]], 0.5).unwrap();
        let vs = vec![mk(0.95), mk(0.6), mk(0.91)];
        let (inc, exc) = threshold_filter(&vs, 0.9).unwrap();
        assert_eq!(inc, vec![0, 2]);
        assert_eq!(exc, vec![1]);
        let (inc, exc) = threshold_filter(&vs, 0.5).unwrap();
        assert_eq!(inc.len(), 3);
        assert!(exc.is_empty());
        assert!(threshold_filter(&vs, 0.4).is_err());
        assert!(threshold_filter(&vs, 1.1).is_err());
    }

    #[test]
    fn jsonl_fields() {
        let v = EnsembleVerdict::from_rows(&[&[0.25, 0.75]], 0.9).unwrap();
        let line = verdicts_jsonl(&[v]);
        let parsed: serde_json::Value = serde_json::from_str(line.trim()).unwrap();
        assert_eq!(parsed["id"], 0);
        assert_eq!(parsed["class"], 1);
        assert_eq!(parsed["confidence"], 0.75);
        assert_eq!(parsed["included"], false);
    }

    #[test]
    fn mismatched_layouts_are_rejected() {
        let arch = Architecture {
            input_dims: [4, 4, 4],
            conv_channels: vec![2],
            feature_width: 4,
            regressor_hidden: 3,
        };
        let a = ModelPair::build(Variant::Baseline, &OutputLayout::new(2, vec![]).unwrap(), &arch, 0).unwrap();
        let b = ModelPair::build(Variant::Baseline, &OutputLayout::new(3, vec![]).unwrap(), &arch, 0).unwrap();
        assert!(matches!(consensus(&[a, b], &[0.0; 64], 0.5), Err(Error::Input(_))));
    }
}

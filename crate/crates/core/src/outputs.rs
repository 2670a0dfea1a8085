//! Confound specifications, one-hot output arrays and the two weighted
//! binary cross-entropy objectives.
//!
//! An output array has one row per predicted quantity: row 0 is the label,
//! rows `1..=K` are confounds. Rows are ragged, each with its own arity, and
//! each row's loss is normalized by that arity. The label row carries weight
//! `W`; confound rows carry weight 1. Rows flagged missing in the target are
//! skipped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-7;

pub const DEFAULT_LABEL_WEIGHT: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Binning {
    Categorical,
    /// Bin `i` covers `[edges[i], edges[i + 1])`.
    Edges(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfoundSpec {
    name: String,
    categories: Vec<String>,
    binning: Binning,
}

/// A raw confound observation prior to encoding.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfoundValue {
    Missing,
    Index(usize),
    Label(String),
    Value(f64),
}

impl ConfoundSpec {
    pub fn categorical<S: Into<String>>(name: impl Into<String>, categories: Vec<S>) -> Result<Self> {
        let categories: Vec<String> = categories.into_iter().map(Into::into).collect();
        let name = name.into();
        if categories.len() < 2 {
            return Err(Error::config(format!("confound `{name}` needs at least two categories")));
        }
        for (i, c) in categories.iter().enumerate() {
            if categories[..i].contains(c) {
                return Err(Error::config(format!("confound `{name}` repeats category `{c}`")));
            }
        }
        Ok(Self {
            name,
            categories,
            binning: Binning::Categorical,
        })
    }

    /// Categorical confound with categories named `0..arity`.
    pub fn indexed(name: impl Into<String>, arity: usize) -> Result<Self> {
        Self::categorical(name, (0..arity).map(|i| i.to_string()).collect())
    }

    pub fn binned(name: impl Into<String>, edges: Vec<f64>) -> Result<Self> {
        let name = name.into();
        if edges.len() < 3 {
            return Err(Error::config(format!("confound `{name}` needs at least three bin edges")));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!("bin edges of `{name}` must be finite and strictly increasing")));
        }
        let categories = edges.windows(2).map(|w| format!("[{},{})", w[0], w[1])).collect();
        Ok(Self {
            name,
            categories,
            binning: Binning::Edges(edges),
        })
    }

    /// Decade bins from 25 up to 105.
    pub fn age_decades(name: impl Into<String>) -> Self {
        Self::binned(name, (0..=8).map(|i| 25.0 + 10.0 * i as f64).collect()).expect("static bins are valid")
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn binning(&self) -> &Binning {
        &self.binning
    }

    pub fn arity(&self) -> usize {
        self.categories.len()
    }

    /// Maps an observation to its category, `None` when absent or unmappable.
    pub fn category_of(&self, value: &ConfoundValue) -> Option<usize> {
        match (value, &self.binning) {
            (ConfoundValue::Missing, _) => None,
            (ConfoundValue::Index(i), _) => (*i < self.arity()).then_some(*i),
            (ConfoundValue::Label(l), _) => self.categories.iter().position(|c| c == l),
            (ConfoundValue::Value(v), Binning::Edges(edges)) => {
                if !v.is_finite() || *v < edges[0] || *v >= edges[edges.len() - 1] {
                    return None;
                }
                // number of edges <= v, minus one
                Some(edges.partition_point(|e| e <= v) - 1)
            }
            (ConfoundValue::Value(v), Binning::Categorical) => {
                let i = *v as usize;
                (v.fract() == 0.0 && *v >= 0.0 && i < self.arity()).then_some(i)
            }
        }
    }

    /// Scalar used when matching on this confound: the bin's lower edge for
    /// binned sources, the category index otherwise.
    pub fn match_value(&self, category: usize) -> f64 {
        match &self.binning {
            Binning::Edges(edges) => edges[category],
            Binning::Categorical => category as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputLayout {
    label_arity: usize,
    confounds: Vec<ConfoundSpec>,
    label_weight: f64,
}

impl OutputLayout {
    pub fn new(label_arity: usize, confounds: Vec<ConfoundSpec>) -> Result<Self> {
        Self::with_weight(label_arity, confounds, DEFAULT_LABEL_WEIGHT)
    }

    pub fn with_weight(label_arity: usize, confounds: Vec<ConfoundSpec>, label_weight: f64) -> Result<Self> {
        if label_arity < 2 {
            return Err(Error::config("label arity must be at least 2"));
        }
        if !(label_weight.is_finite() && label_weight > 0.0) {
            return Err(Error::config("label weight must be positive"));
        }
        for (i, c) in confounds.iter().enumerate() {
            if confounds[..i].iter().any(|o| o.name == c.name) {
                return Err(Error::config(format!("duplicate confound name `{}`", c.name)));
            }
        }
        Ok(Self {
            label_arity,
            confounds,
            label_weight,
        })
    }

    pub fn label_arity(&self) -> usize {
        self.label_arity
    }

    pub fn label_weight(&self) -> f64 {
        self.label_weight
    }

    pub fn confounds(&self) -> &[ConfoundSpec] {
        &self.confounds
    }

    pub fn num_confounds(&self) -> usize {
        self.confounds.len()
    }

    pub fn confound_index(&self, name: &str) -> Option<usize> {
        self.confounds.iter().position(|c| c.name == name)
    }

    pub fn row_arities(&self) -> Vec<usize> {
        std::iter::once(self.label_arity)
            .chain(self.confounds.iter().map(|c| c.arity()))
            .collect()
    }

    pub fn row_weights(&self) -> Vec<f64> {
        std::iter::once(self.label_weight)
            .chain(std::iter::repeat_n(1.0, self.confounds.len()))
            .collect()
    }

    pub fn total_len(&self) -> usize {
        self.row_arities().iter().sum()
    }

    /// Same label and weight, no confound rows.
    pub fn label_only(&self) -> Self {
        Self {
            label_arity: self.label_arity,
            confounds: Vec::new(),
            label_weight: self.label_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputArray {
    pub rows: Vec<Vec<f64>>,
    pub missing: Vec<bool>,
}

impl OutputArray {
    /// Splits a flat vector into rows of the given arities.
    pub fn from_flat(flat: &[f64], arities: &[usize]) -> Result<Self> {
        if flat.len() != arities.iter().sum::<usize>() {
            return Err(Error::input(format!(
                "flat output of length {} does not cover arities {arities:?}",
                flat.len()
            )));
        }
        let mut rows = Vec::with_capacity(arities.len());
        let mut start = 0;
        for &n in arities {
            rows.push(flat[start..start + n].to_vec());
            start += n;
        }
        Ok(Self {
            missing: vec![false; rows.len()],
            rows,
        })
    }

    pub fn flat(&self) -> Vec<f64> {
        self.rows.iter().flatten().copied().collect()
    }

    pub fn label_row(&self) -> &[f64] {
        &self.rows[0]
    }
}

fn one_hot(arity: usize, hot: usize) -> Vec<f64> {
    let mut v = vec![0.0; arity];
    v[hot] = 1.0;
    v
}

/// Builds a target array from a label and raw confound observations.
pub fn encode_sample(label: usize, confounds: &[ConfoundValue], layout: &OutputLayout) -> Result<OutputArray> {
    if confounds.len() != layout.num_confounds() {
        return Err(Error::input(format!(
            "expected {} confound values, got {}",
            layout.num_confounds(),
            confounds.len()
        )));
    }
    let cats: Vec<Option<usize>> = confounds
        .iter()
        .zip(&layout.confounds)
        .map(|(v, spec)| spec.category_of(v))
        .collect();
    encode_categories(label, &cats, layout)
}

/// Builds a target array from already-resolved category indices.
pub fn encode_categories(label: usize, categories: &[Option<usize>], layout: &OutputLayout) -> Result<OutputArray> {
    if label >= layout.label_arity {
        return Err(Error::input(format!(
            "label {label} out of range for arity {}",
            layout.label_arity
        )));
    }
    if categories.len() != layout.num_confounds() {
        return Err(Error::input("category count does not match layout"));
    }
    let mut rows = vec![one_hot(layout.label_arity, label)];
    let mut missing = vec![false];
    for (cat, spec) in categories.iter().zip(&layout.confounds) {
        match cat {
            Some(c) if *c < spec.arity() => {
                rows.push(one_hot(spec.arity(), *c));
                missing.push(false);
            }
            _ => {
                rows.push(vec![0.0; spec.arity()]);
                missing.push(true);
            }
        }
    }
    Ok(OutputArray { rows, missing })
}

/// Constant encoder-side target: every confound row is `[1, 0, ..., 0]`.
/// The label row is left zeroed for the caller to fill.
pub fn g_mask(layout: &OutputLayout) -> OutputArray {
    let rows = layout.row_arities().into_iter().enumerate().map(|(r, n)| {
        if r == 0 {
            vec![0.0; n]
        } else {
            one_hot(n, 0)
        }
    });
    let rows: Vec<Vec<f64>> = rows.collect();
    OutputArray {
        missing: vec![false; rows.len()],
        rows,
    }
}

/// The encoder-side target: true label row, masked confound rows, and the
/// true target's missing flags.
pub fn encoder_target(target: &OutputArray, layout: &OutputLayout) -> OutputArray {
    let mut masked = g_mask(layout);
    masked.rows[0] = target.rows[0].clone();
    masked.missing = target.missing.clone();
    masked
}

fn check_layout(pred: &OutputArray, target: &OutputArray, layout: &OutputLayout) -> Result<()> {
    let arities = layout.row_arities();
    let ok = pred.rows.len() == arities.len()
        && target.rows.len() == arities.len()
        && target.missing.len() == arities.len()
        && pred.rows.iter().zip(&arities).all(|(r, &n)| r.len() == n)
        && target.rows.iter().zip(&arities).all(|(r, &n)| r.len() == n);
    if ok {
        Ok(())
    } else {
        Err(Error::input("prediction/target rows do not match the output layout"))
    }
}

/// Loss and its gradient with respect to every prediction entry. Entries of
/// missing rows get zero gradient; entries outside the clamp range too.
pub fn weighted_bce_grad(
    pred: &OutputArray,
    target: &OutputArray,
    layout: &OutputLayout,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_layout(pred, target, layout)?;
    let weights = layout.row_weights();
    let mut loss = 0.0;
    let mut grad: Vec<Vec<f64>> = pred.rows.iter().map(|r| vec![0.0; r.len()]).collect();
    for (r, w) in weights.iter().enumerate() {
        if target.missing[r] {
            continue;
        }
        let n = pred.rows[r].len() as f64;
        let mut row_sum = 0.0;
        for (i, (&p, &t)) in pred.rows[r].iter().zip(&target.rows[r]).enumerate() {
            let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            row_sum += t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
            if p > PROB_EPS && p < 1.0 - PROB_EPS {
                grad[r][i] = -w / n * (t / pc - (1.0 - t) / (1.0 - pc));
            }
        }
        loss += -w / n * row_sum;
    }
    Ok((loss, grad))
}

/// Loss of the row-wise softmax of `logits` and its exact gradient with
/// respect to the logits. The loss value equals [`weighted_bce`] on the
/// softmax probabilities; the gradient is that of the unclamped loss, worked
/// out through log-sum-exp so it stays bounded when a row saturates.
pub fn weighted_bce_logits(
    logits: &[f64],
    target: &OutputArray,
    layout: &OutputLayout,
) -> Result<(f64, Vec<f64>)> {
    let arities = layout.row_arities();
    if logits.len() != layout.total_len() {
        return Err(Error::input("logit count does not match the output layout"));
    }
    let mut probs = Vec::with_capacity(logits.len());
    let mut start = 0;
    for &n in &arities {
        let z = &logits[start..start + n];
        let lse = log_sum_exp(z.iter().copied());
        probs.extend(z.iter().map(|&v| (v - lse).exp()));
        start += n;
    }
    let pred = OutputArray::from_flat(&probs, &arities)?;
    let loss = weighted_bce(&pred, target, layout)?;

    let weights = layout.row_weights();
    let mut grad = vec![0.0; logits.len()];
    let mut start = 0;
    for (r, &n) in arities.iter().enumerate() {
        let range = start..start + n;
        start += n;
        if target.missing[r] {
            continue;
        }
        let z = &logits[range.clone()];
        let p = &probs[range.clone()];
        let g = &mut grad[range];
        let scale = -weights[r] / n as f64;
        for (i, &t) in target.rows[r].iter().enumerate() {
            // d log p_i / dz_j = [i = j] - p_j
            if t != 0.0 {
                for j in 0..n {
                    g[j] += scale * t * (f64::from(u8::from(i == j)) - p[j]);
                }
            }
            // d log(1 - p_i) / dz_j = [j != i] q_j - p_j, q = softmax of z without i
            if t != 1.0 {
                let lse_rest = log_sum_exp(z.iter().enumerate().filter(|&(k, _)| k != i).map(|(_, &v)| v));
                for j in 0..n {
                    let q = if j == i { 0.0 } else { (z[j] - lse_rest).exp() };
                    g[j] += scale * (1.0 - t) * (q - p[j]);
                }
            }
        }
    }
    Ok((loss, grad))
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn weighted_bce(pred: &OutputArray, target: &OutputArray, layout: &OutputLayout) -> Result<f64> {
    Ok(weighted_bce_grad(pred, target, layout)?.0)
}

/// Encoder objective: true label, confound rows pinned to the first category.
pub fn encoder_loss(pred: &OutputArray, target: &OutputArray, layout: &OutputLayout) -> Result<f64> {
    check_layout(pred, target, layout)?;
    weighted_bce(pred, &encoder_target(target, layout), layout)
}

/// Regressor objective: true label and true confounds.
pub fn regressor_loss(pred: &OutputArray, target: &OutputArray, layout: &OutputLayout) -> Result<f64> {
    weighted_bce(pred, target, layout)
}

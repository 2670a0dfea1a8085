//! Synthetic confounded volumes with planted label and confound signals, and
//! the `.mucr` dataset container.
//!
//! Each volume is `sigma * noise + a * s(y) * T_label + sum_k b_k * s_k(c_k) * T_k`
//! where the `T` are fixed smooth spatial templates drawn from the template
//! seed and `s` maps a category index linearly onto `[-1, 1]`.
//!
//! File layout (little-endian): `"MUCR"`, version `u16`, `n: u32`, three
//! `u16` dims, the output layout, then per record a `u8` label, `K` category
//! bytes (`255` = missing) and `d^3` `f32` voxels.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::outputs::{encode_categories, ConfoundSpec, OutputArray, OutputLayout};

pub const MAGIC: &[u8; 4] = b"MUCR";
pub const VERSION: u16 = 1;
pub const MISSING: u8 = 255;

const TEMPLATE_STREAM: u64 = 7;
const BLOBS_PER_TEMPLATE: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfound {
    pub spec: ConfoundSpec,
    /// Amplitude `b_k` of this confound's template.
    pub effect: f64,
    /// Target label correlation in `[-1, 1]`.
    pub rho: f64,
    /// Probability that an observation is recorded as missing.
    pub missing_rate: f64,
}

impl SynthConfound {
    pub fn new(spec: ConfoundSpec, effect: f64, rho: f64) -> Self {
        Self {
            spec,
            effect,
            rho,
            missing_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n: usize,
    pub dims: usize,
    pub label_arity: usize,
    pub label_effect: f64,
    pub confounds: Vec<SynthConfound>,
    pub noise: f64,
    pub seed: u64,
    /// Seed for the spatial templates; defaults to `seed`.
    pub template_seed: Option<u64>,
    pub label_weight: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            dims: 16,
            label_arity: 2,
            label_effect: 0.1,
            confounds: Vec::new(),
            noise: 1.0,
            seed: 0,
            template_seed: None,
            label_weight: crate::outputs::DEFAULT_LABEL_WEIGHT,
        }
    }
}

impl GeneratorConfig {
    pub fn template_seed(&self) -> u64 {
        self.template_seed.unwrap_or(self.seed)
    }

    pub fn layout(&self) -> Result<OutputLayout> {
        OutputLayout::with_weight(
            self.label_arity,
            self.confounds.iter().map(|c| c.spec.clone()).collect(),
            self.label_weight,
        )
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dims == 0 {
            return Err(Error::config("n and dims must be positive"));
        }
        if self.label_arity < 2 || self.label_arity > 254 {
            return Err(Error::config("label arity must be in 2..=254"));
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return Err(Error::config("noise sigma must be positive"));
        }
        if !(self.label_effect.is_finite() && self.label_effect >= 0.0) {
            return Err(Error::config("label effect must be non-negative"));
        }
        for c in &self.confounds {
            let name = c.spec.name();
            if !(c.effect.is_finite() && c.effect >= 0.0) {
                return Err(Error::config(format!("effect of `{name}` must be non-negative")));
            }
            if !(c.rho.is_finite() && c.rho.abs() <= 1.0) {
                return Err(Error::config(format!("rho of `{name}` must lie in [-1, 1]")));
            }
            if c.spec.arity() > 254 {
                return Err(Error::config(format!("`{name}` has more than 254 categories")));
            }
            if !(0.0..1.0).contains(&c.missing_rate) {
                return Err(Error::config(format!("missing rate of `{name}` must lie in [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Generated(GeneratorConfig),
    File(PathBuf),
    Derived,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dims: [usize; 3],
    pub layout: OutputLayout,
    pub labels: Vec<usize>,
    /// Per sample, one entry per confound.
    pub confounds: Vec<Vec<Option<usize>>>,
    volumes: Vec<f32>,
    pub provenance: Provenance,
}

impl PartialEq for Dataset {
    /// Field-by-field content equality; provenance is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.layout == other.layout
            && self.labels == other.labels
            && self.confounds == other.confounds
            && self.volumes.len() == other.volumes.len()
            && self
                .volumes
                .iter()
                .zip(&other.volumes)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Dataset {
    pub fn new(
        dims: [usize; 3],
        layout: OutputLayout,
        labels: Vec<usize>,
        confounds: Vec<Vec<Option<usize>>>,
        volumes: Vec<f32>,
    ) -> Result<Self> {
        let vol: usize = dims.iter().product();
        let n = labels.len();
        if confounds.len() != n || volumes.len() != n * vol {
            return Err(Error::input("labels, confounds and volumes disagree on sample count"));
        }
        for (y, cats) in labels.iter().zip(&confounds) {
            if *y >= layout.label_arity() || cats.len() != layout.num_confounds() {
                return Err(Error::input("sample does not fit the layout"));
            }
            for (c, spec) in cats.iter().zip(layout.confounds()) {
                if c.is_some_and(|c| c >= spec.arity()) {
                    return Err(Error::input(format!("category out of range for `{}`", spec.name())));
                }
            }
        }
        Ok(Self {
            dims,
            layout,
            labels,
            confounds,
            volumes,
            provenance: Provenance::Derived,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn volume_len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn volume(&self, i: usize) -> &[f32] {
        let v = self.volume_len();
        &self.volumes[i * v..(i + 1) * v]
    }

    pub fn target(&self, i: usize) -> OutputArray {
        encode_categories(self.labels[i], &self.confounds[i], &self.layout).expect("dataset samples fit their layout")
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut volumes = Vec::with_capacity(indices.len() * self.volume_len());
        for &i in indices {
            volumes.extend_from_slice(self.volume(i));
        }
        Dataset {
            dims: self.dims,
            layout: self.layout.clone(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            confounds: indices.iter().map(|&i| self.confounds[i].clone()).collect(),
            volumes,
            provenance: Provenance::Derived,
        }
    }

    /// Appends another dataset with identical dims and layout.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dims != other.dims || self.layout != other.layout {
            return Err(Error::input("datasets differ in dims or layout"));
        }
        let mut out = self.clone();
        out.labels.extend_from_slice(&other.labels);
        out.confounds.extend(other.confounds.iter().cloned());
        out.volumes.extend_from_slice(&other.volumes);
        out.provenance = Provenance::Derived;
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u32(u32::try_from(self.len()).map_err(|_| Error::config("too many samples"))?);
        for d in self.dims {
            w.count(d)?;
        }
        w.layout(&self.layout)?;
        w.buf.reserve(self.len() * (1 + self.layout.num_confounds() + 4 * self.volume_len()));
        for i in 0..self.len() {
            w.u8(self.labels[i] as u8);
            for c in &self.confounds[i] {
                w.u8(c.map_or(MISSING, |c| c as u8));
            }
            w.f32s(self.volume(i));
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(MAGIC, VERSION)?;
        let n = r.u32()? as usize;
        let dims = [r.u16()? as usize, r.u16()? as usize, r.u16()? as usize];
        if dims.contains(&0) {
            return Err(Error::format(10, "zero volume dimension"));
        }
        let layout = r.layout()?;
        let vol: usize = dims.iter().product();
        let k = layout.num_confounds();
        let mut labels = Vec::with_capacity(n);
        let mut confounds = Vec::with_capacity(n);
        let mut volumes = Vec::with_capacity(n * vol);
        for _ in 0..n {
            let at = r.offset();
            let y = r.u8()? as usize;
            if y >= layout.label_arity() {
                return Err(Error::format(at, format!("label {y} out of range")));
            }
            let mut cats = Vec::with_capacity(k);
            for spec in layout.confounds() {
                let at = r.offset();
                let c = r.u8()?;
                if c == MISSING {
                    cats.push(None);
                } else if (c as usize) < spec.arity() {
                    cats.push(Some(c as usize));
                } else {
                    return Err(Error::format(at, format!("category {c} out of range for `{}`", spec.name())));
                }
            }
            labels.push(y);
            confounds.push(cats);
            volumes.extend(r.f32s(vol)?);
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.offset(), "trailing bytes after last record"));
        }
        Ok(Self {
            dims,
            layout,
            labels,
            confounds,
            volumes,
            provenance: Provenance::Derived,
        })
    }

    /// `id,label,<confound...>` with category names; missing values are empty.
    pub fn manifest_csv(&self) -> String {
        let mut out = String::from("id,label");
        for c in self.layout.confounds() {
            out.push(',');
            out.push_str(c.name());
        }
        out.push('\n');
        for i in 0..self.len() {
            let _ = write!(out, "{i},{}", self.labels[i]);
            for (c, spec) in self.confounds[i].iter().zip(self.layout.confounds()) {
                out.push(',');
                if let Some(c) = c {
                    out.push_str(&spec.categories()[*c]);
                }
            }
            out.push('\n');
        }
        out
    }
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset.to_bytes()?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let mut ds = Dataset::from_bytes(&fs::read(path)?)?;
    ds.provenance = Provenance::File(path.to_path_buf());
    Ok(ds)
}

/// Maps category `c` of `arity` onto `[-1, 1]`.
fn signed(c: usize, arity: usize) -> f64 {
    2.0 * c as f64 / (arity - 1) as f64 - 1.0
}

/// Smooth template: a few signed Gaussian blobs.
fn template(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let width = (d as f64 / 6.0).max(1.0);
    let blobs: Vec<([f64; 3], f64)> = (0..BLOBS_PER_TEMPLATE)
        .map(|_| {
            let centre = [0; 3].map(|_: i32| rng.random_range(0.2..0.8) * (d as f64 - 1.0));
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            (centre, sign)
        })
        .collect();
    let mut t = Vec::with_capacity(d * d * d);
    for z in 0..d {
        for y in 0..d {
            for x in 0..d {
                let p = [z as f64, y as f64, x as f64];
                let v: f64 = blobs
                    .iter()
                    .map(|(c, s)| {
                        let r2: f64 = p.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
                        s * (-r2 / (2.0 * width * width)).exp()
                    })
                    .sum();
                t.push(v);
            }
        }
    }
    t
}

/// Label template followed by one template per confound, all from the
/// template seed. Each template is orthogonalized against the ones before it
/// and rescaled to unit RMS, so every planted factor is separately
/// recoverable.
pub fn templates(config: &GeneratorConfig) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.template_seed());
    rng.set_stream(TEMPLATE_STREAM);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(config.confounds.len() + 1);
    for _ in 0..=config.confounds.len() {
        let mut t = template(config.dims, &mut rng);
        for prev in &out {
            let dot: f64 = t.iter().zip(prev).map(|(a, b)| a * b).sum();
            let norm: f64 = prev.iter().map(|v| v * v).sum();
            t.iter_mut().zip(prev).for_each(|(a, b)| *a -= dot / norm * b);
        }
        let rms = (t.iter().map(|v| v * v).sum::<f64>() / t.len() as f64).sqrt();
        if rms > 1e-9 {
            t.iter_mut().for_each(|v| *v /= rms);
        }
        out.push(t);
    }
    out.into_iter().map(|t| t.into_iter().map(|v| v as f32).collect()).collect()
}

fn sample_confound(label: usize, label_arity: usize, c: &SynthConfound, rng: &mut ChaCha8Rng) -> Option<usize> {
    let arity = c.spec.arity();
    let cat = if rng.random_bool(c.rho.abs()) {
        let induced = (label as f64 * (arity - 1) as f64 / (label_arity - 1) as f64).round() as usize;
        if c.rho < 0.0 {
            arity - 1 - induced
        } else {
            induced
        }
    } else {
        rng.random_range(0..arity)
    };
    // missingness draw is always consumed so rates do not shift other draws
    let missing = rng.random::<f64>() < c.missing_rate;
    (!missing).then_some(cat)
}

pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let layout = config.layout()?;
    let templates = templates(config);
    let d = config.dims;
    let vol = d * d * d;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut labels = Vec::with_capacity(config.n);
    let mut confounds = Vec::with_capacity(config.n);
    let mut volumes = Vec::with_capacity(config.n * vol);
    let mut latent = Vec::with_capacity(config.confounds.len());
    for _ in 0..config.n {
        let y = rng.random_range(0..config.label_arity);
        latent.clear();
        let mut cats = Vec::with_capacity(config.confounds.len());
        for c in &config.confounds {
            // the image signal follows the true category even when unrecorded
            let arity = c.spec.arity();
            let observed = sample_confound(y, config.label_arity, c, &mut rng);
            let truth = match observed {
                Some(cat) => cat,
                None => rng.random_range(0..arity),
            };
            latent.push(c.effect * signed(truth, arity));
            cats.push(observed);
        }
        let label_amp = config.label_effect * signed(y, config.label_arity);
        for v in 0..vol {
            let noise: f64 = rng.sample(StandardNormal);
            let mut x = config.noise * noise + label_amp * templates[0][v] as f64;
            for (k, amp) in latent.iter().enumerate() {
                x += amp * templates[k + 1][v] as f64;
            }
            volumes.push(x as f32);
        }
        labels.push(y);
        confounds.push(cats);
    }
    let mut ds = Dataset::new([d, d, d], layout, labels, confounds, volumes)?;
    ds.provenance = Provenance::Generated(config.clone());
    Ok(ds)
}

//! Encoder/regressor pairs and the three trainable variants.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Network, Tensor};
use crate::outputs::{OutputArray, OutputLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Encoder trained against pinned confound rows, regressor against true ones.
    Mucran,
    /// Label row only, trained jointly.
    Baseline,
    /// Label and confound rows, trained jointly against the true targets.
    Confounded,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Mucran, Variant::Baseline, Variant::Confounded];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Mucran => "mucran",
            Variant::Baseline => "baseline",
            Variant::Confounded => "confounded",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            Variant::Mucran => 0,
            Variant::Baseline => 1,
            Variant::Confounded => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag() == tag)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dims: [usize; 3],
    /// Output channels of each stride-2 convolution.
    pub conv_channels: Vec<usize>,
    pub feature_width: usize,
    pub regressor_hidden: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            input_dims: [16, 16, 16],
            conv_channels: vec![4, 8, 16],
            feature_width: 64,
            regressor_hidden: 32,
        }
    }
}

impl Architecture {
    /// 96^3 input, 1024 features.
    pub fn paper_scale() -> Self {
        Self {
            input_dims: [96, 96, 96],
            conv_channels: vec![8, 16, 32, 64],
            feature_width: 1024,
            regressor_hidden: 256,
        }
    }

    pub fn with_dims(d: usize) -> Self {
        Self {
            input_dims: [d, d, d],
            ..Self::default()
        }
    }

    pub fn volume_len(&self) -> usize {
        self.input_dims.iter().product()
    }

    fn validate(&self) -> Result<()> {
        if self.input_dims.contains(&0)
            || self.conv_channels.contains(&0)
            || self.feature_width == 0
            || self.regressor_hidden == 0
        {
            return Err(Error::config(format!("architecture has a zero dimension: {self:?}")));
        }
        Ok(())
    }

    pub fn encoder_specs(&self) -> Vec<LayerSpec> {
        let mut specs = Vec::new();
        let mut dims = self.input_dims;
        let mut channels = 1;
        for &out in &self.conv_channels {
            specs.push(LayerSpec::ConvStrided {
                in_channels: channels,
                out_channels: out,
                in_dims: dims,
            });
            specs.push(LayerSpec::SmoothLeaky);
            dims = dims.map(|d| (d - 1) / 2 + 1);
            channels = out;
        }
        let flat = channels * dims.iter().product::<usize>();
        specs.push(LayerSpec::Dense {
            inputs: flat,
            outputs: self.feature_width,
        });
        specs.push(LayerSpec::SmoothLeaky);
        specs
    }

    pub fn regressor_specs(&self, arities: &[usize]) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Dense {
                inputs: self.feature_width,
                outputs: self.regressor_hidden,
            },
            LayerSpec::SmoothLeaky,
            LayerSpec::Dense {
                inputs: self.regressor_hidden,
                outputs: arities.iter().sum(),
            },
            LayerSpec::SoftmaxRows {
                arities: arities.to_vec(),
            },
        ]
    }
}

#[derive(Debug, Clone)]
pub struct ModelPair {
    pub variant: Variant,
    pub layout: OutputLayout,
    pub arch: Architecture,
    pub encoder: Network<f32>,
    pub regressor: Network<f32>,
}

impl ModelPair {
    /// Deterministic construction. The encoder and the regressor's hidden
    /// layer draw from separate streams, so variants built from one seed share
    /// those initial weights.
    pub fn build(variant: Variant, layout: &OutputLayout, arch: &Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let out_layout = match variant {
            Variant::Baseline => layout.label_only(),
            _ => layout.clone(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(0);
        let d = arch.input_dims;
        let encoder = Network::from_specs(vec![1, d[0], d[1], d[2]], arch.encoder_specs(), &mut rng)?;
        rng.set_stream(1);
        rng.set_word_pos(0);
        let regressor = Network::from_specs(
            vec![arch.feature_width],
            arch.regressor_specs(&out_layout.row_arities()),
            &mut rng,
        )?;
        Ok(Self {
            variant,
            layout: layout.clone(),
            arch: arch.clone(),
            encoder,
            regressor,
        })
    }

    /// Layout of the regressor's output rows; label-only for the baseline.
    pub fn output_layout(&self) -> OutputLayout {
        match self.variant {
            Variant::Baseline => self.layout.label_only(),
            _ => self.layout.clone(),
        }
    }

    pub fn volume_len(&self) -> usize {
        self.arch.volume_len()
    }

    pub fn input_tensor(&self, volumes: &[&[f32]]) -> Result<Tensor<f32>> {
        let d = self.arch.input_dims;
        if volumes.is_empty() {
            return Err(Error::input("no volumes given"));
        }
        Tensor::stack(volumes, &[1, d[0], d[1], d[2]])
    }

    pub fn features(&self, volumes: &[&[f32]]) -> Result<Tensor<f32>> {
        let x = self.input_tensor(volumes)?;
        self.encoder.infer(&x)
    }

    pub fn predict_batch(&self, volumes: &[&[f32]]) -> Result<Vec<OutputArray>> {
        let f = self.features(volumes)?;
        let p = self.regressor.infer(&f)?;
        let arities = self.output_layout().row_arities();
        (0..p.batch())
            .map(|i| {
                let flat: Vec<f64> = p.item(i).iter().map(|&v| v as f64).collect();
                OutputArray::from_flat(&flat, &arities)
            })
            .collect()
    }

    pub fn predict(&self, volume: &[f32]) -> Result<OutputArray> {
        Ok(self.predict_batch(&[volume])?.remove(0))
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.regressor.param_count()
    }
}

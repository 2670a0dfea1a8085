//! `MCKP` checkpoint files.
//!
//! Layout (little-endian):
//! magic `"MCKP"`, version `u16`, variant tag `u8`, output layout,
//! architecture (`3 x u16` dims, `u16` conv count + `u16` channels, `u32`
//! feature width, `u32` regressor hidden width), shape table for encoder then
//! regressor (`u32` tensor count, per tensor `u8` rank + `u32` dims), all
//! parameters as `f32`, then an optional optimizer section (`u8` flag) and
//! the training progress (`u64` position, `u32` trace length, both traces).

use std::fs;
use std::path::Path;

use super::TrainState;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelPair, Variant};
use crate::nn::{Adam, AdamConfig, Network, Sgd, SgdConfig, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCKP";
pub const CHECKPOINT_VERSION: u16 = 1;

fn write_shapes(w: &mut Writer, net: &Network<f32>) {
    let params: Vec<&Tensor<f32>> = net.params().collect();
    w.u32(params.len() as u32);
    for p in params {
        w.u8(p.shape().len() as u8);
        for &d in p.shape() {
            w.u32(d as u32);
        }
    }
}

fn read_shapes(r: &mut Reader) -> Result<Vec<Vec<usize>>> {
    let n = r.u32()? as usize;
    (0..n)
        .map(|_| {
            let rank = r.u8()? as usize;
            (0..rank).map(|_| Ok(r.u32()? as usize)).collect()
        })
        .collect()
}

fn write_tensors(w: &mut Writer, tensors: &[Tensor<f32>]) {
    for t in tensors {
        w.f32s(t.data());
    }
}

fn read_tensors(r: &mut Reader, shapes: &[Vec<usize>]) -> Result<Vec<Tensor<f32>>> {
    shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            Tensor::new(s.clone(), r.f32s(n)?)
        })
        .collect()
}

fn load_params(r: &mut Reader, net: &mut Network<f32>, shapes: &[Vec<usize>], what: &str) -> Result<()> {
    let at = r.offset();
    let expected: Vec<Vec<usize>> = net.params().map(|p| p.shape().to_vec()).collect();
    if expected != shapes {
        return Err(Error::format(at, format!("{what} shape table does not match its architecture")));
    }
    for layer in net.layers_mut() {
        for p in layer.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&r.f32s(n)?);
        }
    }
    Ok(())
}

impl TrainState {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let pair = &self.pair;
        let mut w = Writer::default();
        w.bytes(CHECKPOINT_MAGIC);
        w.u16(CHECKPOINT_VERSION);
        w.u8(pair.variant.tag());
        w.layout(&pair.layout)?;
        for d in pair.arch.input_dims {
            w.count(d)?;
        }
        w.count(pair.arch.conv_channels.len())?;
        for &c in &pair.arch.conv_channels {
            w.count(c)?;
        }
        w.u32(pair.arch.feature_width as u32);
        w.u32(pair.arch.regressor_hidden as u32);

        write_shapes(&mut w, &pair.encoder);
        write_shapes(&mut w, &pair.regressor);
        for p in pair.encoder.params().chain(pair.regressor.params()) {
            w.f32s(p.data());
        }

        // optimizer section
        w.u8(1);
        let a = &self.encoder_opt;
        w.f64(a.config.lr);
        w.f64(a.config.beta1);
        w.f64(a.config.beta2);
        w.f64(a.config.epsilon);
        w.u64(crate::nn::Optimizer::steps_taken(a));
        let (m, v) = a.moments();
        w.u8(u8::from(!m.is_empty()));
        write_tensors(&mut w, m);
        write_tensors(&mut w, v);
        let s = &self.regressor_opt;
        w.f64(s.config.lr);
        w.f64(s.config.momentum);
        w.u64(crate::nn::Optimizer::steps_taken(s));
        w.u8(u8::from(!s.velocity().is_empty()));
        write_tensors(&mut w, s.velocity());

        w.u64(self.position);
        w.u32(self.encoder_trace.len() as u32);
        w.f32s(&self.encoder_trace);
        w.f32s(&self.regressor_trace);
        Ok(w.buf)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let at = r.offset();
        let variant = Variant::from_tag(r.u8()?).ok_or_else(|| Error::format(at, "unknown variant tag"))?;
        let layout = r.layout()?;
        let at = r.offset();
        let input_dims = [r.u16()? as usize, r.u16()? as usize, r.u16()? as usize];
        let nconv = r.u16()? as usize;
        let conv_channels = (0..nconv).map(|_| Ok(r.u16()? as usize)).collect::<Result<Vec<_>>>()?;
        let arch = Architecture {
            input_dims,
            conv_channels,
            feature_width: r.u32()? as usize,
            regressor_hidden: r.u32()? as usize,
        };
        let mut pair = ModelPair::build(variant, &layout, &arch, 0).map_err(|e| Error::format(at, e.to_string()))?;
        let enc_shapes = read_shapes(&mut r)?;
        let reg_shapes = read_shapes(&mut r)?;
        load_params(&mut r, &mut pair.encoder, &enc_shapes, "encoder")?;
        load_params(&mut r, &mut pair.regressor, &reg_shapes, "regressor")?;

        let (encoder_opt, regressor_opt) = if r.u8()? == 1 {
            let config = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                epsilon: r.f64()?,
            };
            let step = r.u64()?;
            let (m, v) = if r.u8()? == 1 {
                (read_tensors(&mut r, &enc_shapes)?, read_tensors(&mut r, &enc_shapes)?)
            } else {
                (Vec::new(), Vec::new())
            };
            let adam = Adam::from_parts(config, step, m, v);
            let config = SgdConfig {
                lr: r.f64()?,
                momentum: r.f64()?,
            };
            let step = r.u64()?;
            let vel = if r.u8()? == 1 {
                read_tensors(&mut r, &reg_shapes)?
            } else {
                Vec::new()
            };
            (adam, Sgd::from_parts(config, step, vel))
        } else {
            (Adam::new(AdamConfig::default()), Sgd::new(SgdConfig::default()))
        };
        let position = r.u64()?;
        let n = r.u32()? as usize;
        let encoder_trace = r.f32s(n)?;
        let regressor_trace = r.f32s(n)?;
        if r.remaining() != 0 {
            return Err(Error::format(r.offset(), "trailing bytes after checkpoint"));
        }
        Ok(Self {
            pair,
            encoder_opt,
            regressor_opt,
            position,
            encoder_trace,
            regressor_trace,
        })
    }
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    fs::write(path, state.to_checkpoint_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    TrainState::from_checkpoint_bytes(&fs::read(path)?)
}

//! Two-step adversarial updates, joint updates for the comparison variants,
//! and replay of a schedule log into a training state.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{Error, Result};
use crate::model::{ModelPair, Variant};
use crate::nn::{Adam, AdamConfig, Optimizer, Sgd, SgdConfig, Tensor};
use crate::outputs::{encoder_target, weighted_bce_logits, OutputArray, OutputLayout};
use crate::scheduler::ScheduleLog;
use crate::synthdata::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OptimConfig {
    pub encoder: AdamConfig,
    pub regressor: SgdConfig,
}

/// A model pair with its optimizers and progress. The encoder is always
/// driven by Adam and the regressor by SGD.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub pair: ModelPair,
    pub encoder_opt: Adam<f32>,
    pub regressor_opt: Sgd<f32>,
    /// Number of batches consumed so far.
    pub position: u64,
    pub encoder_trace: Vec<f32>,
    pub regressor_trace: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub encoder: f64,
    pub regressor: f64,
}

/// Stacked inputs and targets for one update.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Tensor<f32>,
    pub targets: Vec<OutputArray>,
}

impl Batch {
    pub fn from_dataset(ds: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let vols: Vec<&[f32]> = indices.iter().map(|&i| ds.volume(i)).collect();
        let [a, b, c] = ds.dims;
        Ok(Self {
            inputs: Tensor::stack(&vols, &[1, a, b, c])?,
            targets: indices.iter().map(|&i| ds.target(i)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

fn label_only(target: &OutputArray) -> OutputArray {
    OutputArray {
        rows: vec![target.rows[0].clone()],
        missing: vec![target.missing[0]],
    }
}

/// Mean loss over the batch and its gradient with respect to the regressor
/// logits. `pin_confounds` selects the encoder-side targets.
fn batch_loss(
    logits: &Tensor<f32>,
    targets: &[OutputArray],
    layout: &OutputLayout,
    pin_confounds: bool,
) -> Result<(f64, Tensor<f32>)> {
    let scale = 1.0 / targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (i, target) in targets.iter().enumerate() {
        let z: Vec<f64> = logits.item(i).iter().map(|&v| v as f64).collect();
        let target = if pin_confounds {
            encoder_target(target, layout)
        } else {
            target.clone()
        };
        let (l, g) = weighted_bce_logits(&z, &target, layout)?;
        loss += l * scale;
        grad.extend(g.into_iter().map(|v| (v * scale) as f32));
    }
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {loss}")));
    }
    Ok((loss, Tensor::new(logits.shape().to_vec(), grad)?))
}

impl TrainState {
    pub fn new(pair: ModelPair, optim: OptimConfig) -> Self {
        Self {
            pair,
            encoder_opt: Adam::new(optim.encoder),
            regressor_opt: Sgd::new(optim.regressor),
            position: 0,
            encoder_trace: Vec::new(),
            regressor_trace: Vec::new(),
        }
    }

    pub fn variant(&self) -> Variant {
        self.pair.variant
    }

    fn targets_for_variant(&self, batch: &Batch) -> Vec<OutputArray> {
        match self.pair.variant {
            Variant::Baseline => batch.targets.iter().map(label_only).collect(),
            _ => batch.targets.clone(),
        }
    }

    fn record(&mut self, losses: StepLosses) -> StepLosses {
        self.position += 1;
        self.encoder_trace.push(losses.encoder as f32);
        self.regressor_trace.push(losses.regressor as f32);
        losses
    }

    /// Encoder step against pinned confound rows with the regressor frozen,
    /// then a regressor step against the true rows with the encoder frozen.
    pub fn train_step_mucran(&mut self, batch: &Batch) -> Result<StepLosses> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let layout = self.pair.output_layout();
        let targets = self.targets_for_variant(batch);
        let pair = &mut self.pair;

        pair.regressor.set_frozen(true);
        let features = pair.encoder.forward(&batch.inputs)?;
        let logits = pair.regressor.forward_logits(&features)?;
        let step1 = batch_loss(&logits, &targets, &layout, true);
        let encoder_loss = match step1 {
            Ok((loss, grad)) => {
                let grad_features = pair.regressor.backward(&grad)?;
                pair.encoder.backward(&grad_features)?;
                self.encoder_opt.step(&mut pair.encoder);
                loss
            }
            Err(e) => {
                pair.regressor.set_frozen(false);
                return Err(e);
            }
        };
        pair.regressor.set_frozen(false);
        pair.regressor.invalidate();

        pair.encoder.set_frozen(true);
        let result = (|| -> Result<f64> {
            let features = pair.encoder.infer(&batch.inputs)?;
            let logits = pair.regressor.forward_logits(&features)?;
            let (loss, grad) = batch_loss(&logits, &targets, &layout, false)?;
            pair.regressor.backward(&grad)?;
            self.regressor_opt.step(&mut pair.regressor);
            Ok(loss)
        })();
        pair.encoder.set_frozen(false);
        let regressor_loss = result?;

        Ok(self.record(StepLosses {
            encoder: encoder_loss,
            regressor: regressor_loss,
        }))
    }

    fn joint_step(&mut self, batch: &Batch, pin_confounds: bool) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let layout = self.pair.output_layout();
        let targets = self.targets_for_variant(batch);
        let pair = &mut self.pair;
        let features = pair.encoder.forward(&batch.inputs)?;
        let logits = pair.regressor.forward_logits(&features)?;
        let (loss, grad) = batch_loss(&logits, &targets, &layout, pin_confounds)?;
        let grad_features = pair.regressor.backward(&grad)?;
        pair.encoder.backward(&grad_features)?;
        self.encoder_opt.step(&mut pair.encoder);
        self.regressor_opt.step(&mut pair.regressor);
        Ok(loss)
    }

    /// Joint update of both networks against the true label and confounds.
    pub fn train_step_confounded(&mut self, batch: &Batch) -> Result<f64> {
        let loss = self.joint_step(batch, false)?;
        self.record(StepLosses {
            encoder: loss,
            regressor: loss,
        });
        Ok(loss)
    }

    /// Joint update of both networks against the label row alone.
    pub fn train_step_baseline(&mut self, batch: &Batch) -> Result<f64> {
        let loss = self.joint_step(batch, true)?;
        self.record(StepLosses {
            encoder: loss,
            regressor: loss,
        });
        Ok(loss)
    }

    pub fn train_step(&mut self, batch: &Batch) -> Result<StepLosses> {
        match self.pair.variant {
            Variant::Mucran => self.train_step_mucran(batch),
            Variant::Baseline => {
                let l = self.train_step_baseline(batch)?;
                Ok(StepLosses {
                    encoder: l,
                    regressor: l,
                })
            }
            Variant::Confounded => {
                let l = self.train_step_confounded(batch)?;
                Ok(StepLosses {
                    encoder: l,
                    regressor: l,
                })
            }
        }
    }

    /// Evaluates both objectives on a batch without updating anything.
    pub fn evaluate_losses(&self, batch: &Batch) -> Result<StepLosses> {
        let layout = self.pair.output_layout();
        let targets = self.targets_for_variant(batch);
        let features = self.pair.encoder.infer(&batch.inputs)?;
        let logits = self.pair.regressor.infer_logits(&features)?;
        Ok(StepLosses {
            encoder: batch_loss(&logits, &targets, &layout, true)?.0,
            regressor: batch_loss(&logits, &targets, &layout, false)?.0,
        })
    }

    /// Replays a schedule log, calling `on_step` after every update.
    pub fn train_on_log<F>(&mut self, ds: &Dataset, log: &ScheduleLog, mut on_step: F) -> Result<()>
    where
        F: FnMut(u64, &StepLosses),
    {
        log.replay(|step| {
            let batch = Batch::from_dataset(ds, step.indices)?;
            let losses = self.train_step(&batch)?;
            on_step(self.position, &losses);
            Ok(())
        })?;
        Ok(())
    }
}

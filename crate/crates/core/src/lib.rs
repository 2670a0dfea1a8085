//! Adversarial confound regression for volumetric classifiers.
//!
//! An encoder maps a volume to a feature vector; a regressor maps features to
//! one-hot rows for the label and every confound. Training alternates an
//! encoder update against targets whose confound rows are pinned to the first
//! category with a regressor update against the true confounds, so the
//! features keep label information while shedding confound information.
//! Ensembles of independently trained models are averaged and thresholded to
//! separate in-distribution from out-of-distribution inputs.

pub mod cli;
mod codec;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod outputs;
pub mod par;
pub mod scheduler;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};

//! Pseudo-label enhanced prototypical contrastive learning for intent
//! discovery over precomputed embeddings.
//!
//! The crate trains a small network with two heads on top of fixed sentence
//! embeddings: an instance head producing unit-norm features and a cluster
//! head producing a distribution over known and novel classes. Training runs
//! in two stages, supervised pretraining on labeled known-class samples and
//! then a semi-supervised stage where confident pseudo-labels and cluster
//! prototypes extend the contrastive losses to unlabeled samples.
//!
//! ```
//! use plpcl::data::{apply_split, synth_mixture, Setting, SplitSpec, SynthSpec};
//! use plpcl::pipeline::{pretrain, predict, train, TrainConfig};
//!
//! let raw = synth_mixture(&SynthSpec { classes: 4, dim: 8, per_class: 20, separation: 6.0, noise: 1.0, seed: 1 })?;
//! let spec = SplitSpec { ood_class_ratio: 0.5, labeled_ratio: 1.0, setting: Setting::Ood, seed: 1 };
//! let data = apply_split(&raw, &spec)?;
//!
//! let mut cfg = TrainConfig::for_layout(Setting::Ood, data.classes());
//! cfg.epochs_pretrain = 2;
//! cfg.epochs_train = 2;
//! cfg.hidden = 16;
//! let params = train(&data, pretrain(&data, &cfg)?, &cfg)?;
//!
//! let test = data.indices(plpcl::data::Split::Test);
//! let clusters = predict(&params, &data.matrix(&test)?, Setting::Ood, cfg.k_ind)?;
//! assert!(clusters.iter().all(|&c| c >= cfg.k_ind));
//! # Ok::<(), plpcl::Error>(())
//! ```

pub mod data;
mod error;
pub mod eval;
pub mod losses;
pub mod math;
pub mod model;
pub mod pipeline;
pub mod prototypes;
pub mod pseudo_labels;
pub mod seed;

pub use error::{Error, Result};
pub use pseudo_labels::DEFAULT_SIGMA;

/// The guide's snippets run as doc-tests so they stay in sync with the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/model.md")]
    mod model {}
    #[doc = include_str!("../../../book/src/losses.md")]
    mod losses {}
    #[doc = include_str!("../../../book/src/pseudo-labels.md")]
    mod pseudo_labels {}
    #[doc = include_str!("../../../book/src/prototypes.md")]
    mod prototypes {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}

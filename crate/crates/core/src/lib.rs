//! Positive-unlabeled contrastive representation learning.
//!
//! The crate provides the puNCE family of contrastive losses together with the
//! pieces needed to use them end to end: PU/PNU dataset simulation, a small
//! MLP encoder with exact backpropagation, cost-sensitive PU risks for the
//! transfer stage, and a seeded training/evaluation harness.
//!
//! ```
//! use punce_core::{data, losses, numerics::Matrix};
//!
//! let z = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]])?;
//! let s = vec![true, true, false, false];
//! let y = s.iter().map(|&s| s.then_some(data::Label::Positive)).collect();
//! let batch = losses::EmbeddedBatch::new(z, vec![1, 0, 3, 2], s, y, 1.0)?;
//! let out = losses::punce(&batch, data::ClassPrior::new(0.5)?)?;
//! assert!((out.value - 0.718112).abs() < 1e-6);
//! # Ok::<(), punce_core::Error>(())
//! ```

pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pu_risk;
pub mod train;

pub use data::{
    AugmentConfig, BinaryDataset, ClassPrior, Label, MultiViewBatch, PNUDataset, PUDataset,
};
pub use error::{Error, Result};
pub use losses::{ContrastiveLoss, EmbeddedBatch, LossOutput};
pub use model::{Mode, ModelParams, NormPolicy, ParamGrads, ParamMask};
pub use numerics::{Matrix, RngStream};
pub use pu_risk::{LogitBatch, RiskKind, RiskOutput};
pub use train::{RunMetrics, TrainConfig};

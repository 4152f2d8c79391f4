//! Zero-shot time-series anomaly detection via masked reconstruction
//! ensembles.
//!
//! The pipeline: slice series into windows ([`dataset`]), corrupt copies of
//! the training data with synthetic anomalies ([`inject`]), pretrain a
//! reconstruction network that fills in hidden patches under complementary
//! masks while an adversarial branch pushes it away from reconstructing
//! anomalies ([`mask`], [`net`], [`train`]), score unseen series by the
//! disagreement between reconstructions under different masks ([`detect`]),
//! and evaluate event-aware metrics against ground truth ([`eval`]).

pub mod dataset;
pub mod detect;
pub mod eval;
pub mod inject;
pub mod mask;
pub mod net;
pub mod nn;
pub mod train;

pub use dataset::{DatasetManifest, TimeSeries, WindowBatch};
pub use detect::{ScoreSeries, SpotConfig, SpotFit};
pub use eval::{EvalReport, EventLabels};
pub use inject::{AnomalyType, InjectionSpec};
pub use mask::{MaskPair, PatchSequence};
pub use net::{ModelParams, NetConfig};
pub use train::{LossReport, TrainConfig};

//! Sparse shift autoencoders: recover one steering direction per concept
//! from paired embeddings whose differences mix several concept shifts.
//!
//! The pipeline is [`datagen`] (synthetic pairs with known ground truth),
//! [`trainer`] (constrained training of the autoencoder in [`model`] with the
//! optimizer in [`optim`]), [`metrics`] (MCC, UDR and friends) and
//! [`steering`]. [`store`] holds the file formats.

pub mod assignment;
pub mod datagen;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod steering;
pub mod store;
pub mod sweep;
pub mod trainer;

pub use datagen::{DgpConfig, GroundTruth, PairedEmbeddings, SupportSet};
pub use error::{Error, ErrorKind, Result};
pub use linalg::Matrix;
pub use model::{BatchNormState, SsaeParams};
pub use trainer::{train, Mode, TrainConfig, TrainOutcome, TrainReport};

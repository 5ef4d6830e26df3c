//! Noise-robust training for binary segmentation with noisy labels.
//!
//! Two small encoder-decoder networks are trained jointly. Each step keeps
//! the pixels both networks find easy, weights them by distance to the
//! annotated boundary, rewrites the rest of the label from the networks'
//! superpixel-pooled consensus, and pastes regions between paired images to
//! widen the supervision. Everything runs on the CPU and is deterministic
//! for a given seed.
//!
//! Modules, leaves first: [`grid`], [`rng`], [`noise`], [`geometry`],
//! [`losses`], [`superpixel`], [`refine`], [`transfer`], [`model`],
//! [`trainer`], [`data_io`], [`eval`], [`gradcheck`].

pub mod data_io;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod grid;
pub mod losses;
pub mod model;
pub mod noise;
pub mod refine;
pub mod rng;
pub mod superpixel;
pub mod trainer;
pub mod transfer;

pub use data_io::{Dataset, DatasetManifest, Sample, ShapeKind, ShapesSpec, Split};
pub use error::{GsdError, Result};
pub use eval::{FinalReport, MetricRow};
pub use geometry::{Connectivity, GdaConfig};
pub use grid::{BinaryMask, ImageGrid, LabelGrid, LogitGrid, ProbGrid, WeightGrid};
pub use losses::{LossGrid, LossReport, SelectionSchedule};
pub use model::{ModelConfig, ModelParams, ParamGradients};
pub use noise::{NoiseKind, NoiseReport, NoiseSpec};
pub use refine::{Pooling, RefineConfig};
pub use rng::SeededRng;
pub use superpixel::{SlicConfig, SuperpixelGrid};
pub use trainer::{AugmentSpec, TauSource, TrainConfig, TrainMode, TrainState, Trainer};
pub use transfer::{FusedPair, KtConfig, RegionShape};

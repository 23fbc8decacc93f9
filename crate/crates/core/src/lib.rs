//! DPANet: dual pyramid attention for long-horizon multivariate forecasting.
//!
//! The crate holds the numerical core (tensors, FFT, reverse-mode tape), the
//! model layers, data handling and the training loop. Binaries and benches
//! live in sibling crates.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod numerics;
pub mod params;
pub mod pyramid;
pub mod revin;
pub mod trainer;

pub use checkpoint::{load_checkpoint, open_checkpoint, save_checkpoint};
pub use data::{PreparedData, RawDataset, Split, SplitPolicy, WindowSampler};
pub use error::{Error, Result};
pub use fusion::{FusionConfig, FusionStack};
pub use model::{make_variant, Forecast, Model, ModelConfig, Pooling, Variant};
pub use numerics::{ComplexSpectrum, Real, Tape, Tensor, Var};
pub use params::{Mode, ParamId, ParamStore, Probe, Session};
pub use pyramid::{BandOrder, BandPartition, DualPyramid};
pub use revin::{Revin, RevinState};
pub use trainer::{EvalReport, TrainConfig, TrainOutcome};

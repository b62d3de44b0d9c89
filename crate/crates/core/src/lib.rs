//! Metric-based few-shot learning with region prototypes.
//!
//! Classes are represented by regions of the embedding space rather than single
//! points: a hypersphere (center + radius), a cone (center direction + half-angle)
//! or an isotropic Gaussian (mean + scale). Queries are scored by a measurement
//! against each region and classified with a softmax over the negated scores.
//!
//! Everything is hand-differentiated. The [`numerics::finite_diff_check`] oracle is
//! used throughout the test suites to keep the analytic gradients honest.

pub mod encoder;
pub mod episodes;
pub mod error;
pub mod gradcheck;
pub mod numerics;
pub mod optim;
pub mod prototypes;
pub mod training;

pub use encoder::{Activation, Encoder, EncoderGrads, ForwardTape, MlpEncoder};
pub use episodes::{Dataset, Episode, Item, MixtureSpec, MultiLabelDataset, MultiLabelItem};
pub use error::{Error, Result};
pub use numerics::Rng;
pub use prototypes::{ConeProto, GaussianProto, HypersphereProto, MeasureResult, Prototype, Variant};
pub use training::{Metrics, PrototypeStore, RadiusTrace, TrainConfig, Trainer};

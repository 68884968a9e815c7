//! Layer-wise noise injection experiments for small neural networks.
//!
//! Networks are trained and evaluated with Gaussian noise injected on the
//! activation path, either at every injection point ([`noise::Placement::Global`])
//! or at a single one ([`noise::Placement::WalkingAt`]). Accuracy-versus-noise
//! curves are summarized by logistic fits ([`robustfit`]), learned defenses
//! are examined by [`probes`], and [`multiexec`] turns per-layer robustness
//! into repetition budgets.

pub mod datasets;
pub mod error;
pub mod harness;
pub mod multiexec;
pub mod nn;
pub mod noise;
pub mod probes;
pub mod report;
pub mod rng;
pub mod robustfit;
pub mod tensor;

pub use error::{Error, Result};
pub use noise::{InjectionPlan, MixOrder, NoiseKind, NoiseSpec, Phase, Placement};
pub use rng::{Domain, RngStream};
pub use tensor::{Real, Tensor};

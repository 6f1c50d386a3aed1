//! Buffered asynchronous secure aggregation with attribute-gated seed
//! distribution, plus a discrete-event harness for asynchronous federated
//! learning experiments.
//!
//! Real-valued code is generic over [`scalar::Real`] (`f32` or `f64`); the
//! aliases below fix the scalar for the common cases.

pub mod afl;
pub mod demo;
pub mod field;
pub mod prg;
pub mod protocol;
pub mod scalar;
pub mod sim;
pub mod staleness;
pub mod time;
pub mod transport;
pub mod vault;

pub type QuantizerConfig64 = field::QuantizerConfig<f64>;
pub type QuantizerConfig32 = field::QuantizerConfig<f32>;
pub type GlobalModel64 = afl::GlobalModel<f64>;
pub type GlobalModel32 = afl::GlobalModel<f32>;
pub type SyntheticTask64 = afl::SyntheticTask<f64>;
pub type SyntheticTask32 = afl::SyntheticTask<f32>;
pub type Dataset64 = afl::Dataset<f64>;
pub type Dataset32 = afl::Dataset<f32>;

//! Discrete-event simulation of users training concurrently against a
//! serial secure buffer, on an integer-microsecond clock.

mod cost;
mod delay;
mod engine;
mod stats;

pub use cost::{
    aggregate_round_cost, grant_bytes, measure_user_protocol_cost, upload_bytes, CostModel, SEALED_WIRE_LEN,
};
pub use delay::DelayModel;
pub use engine::{run_simulation, EventKind, Observer, SimConfig, SimError, SimReport, TraceEvent};
pub use stats::{geometric_steps, median, polyfit, PolyFit};

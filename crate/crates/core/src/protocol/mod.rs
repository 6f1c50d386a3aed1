//! The buffered asynchronous secure aggregation protocol.
//!
//! The server keeps a buffer of `K` slots and admits one user at a time.
//! The user in slot `k` removes the masks sealed to it by the users in slots
//! `i < k`, adds fresh masks for every later slot `j > k` and seals those
//! seeds to attribute `(round, j)`. After `K` uploads all masks cancel and the
//! buffered sum equals the sum of the quantized inputs.

mod collusion;
mod local;
mod messages;
mod server;
mod user;

pub use collusion::{collusion_view, honest_prefix_sum, RoundTranscript, SlotRecord};
pub use local::{LocalDeployment, LocalError};
pub use messages::{RoundResult, SlotGrant, UploadMsg};
pub use server::{
    AttributePublisher, BasaServer, PendingGrant, ProtocolViolation, PublishError, RoundState,
    ServerConfig, ServerError,
};
pub use user::{
    mask_input, unmask_aggregate, user_run, user_run_detailed, KeyError, KeySource, MaskedUpload, UserError,
    UserSecrets,
};

//! Predictable DNN model serving with a proactive, centralized controller.
//!
//! The controller plans every Load, Unload and Infer on every worker GPU,
//! tagging each action with a narrow `[earliest, latest]` start window.
//! Workers execute one action at a time per resource and reject anything
//! they cannot start on time, so the controller's picture of the cluster
//! stays accurate enough to deny doomed requests early and never answer
//! late.
//!
//! Workers here are emulated: they account memory pages and wait out
//! profiled durations instead of running kernels. Everything runs either in
//! a deterministic discrete-event simulation or in wall-clock time over TCP.

pub mod controller_state;
pub mod harness;
pub mod net;
pub mod profiles;
pub mod protocol;
pub mod scheduler;
pub mod time;
pub mod worker;
pub mod workload;

pub use profiles::{ModelCatalog, ModelId, ModelProfile};
pub use protocol::{Action, ActionKind, ActionResult, ActionStatus};
pub use time::{Nanos, TimePoint};

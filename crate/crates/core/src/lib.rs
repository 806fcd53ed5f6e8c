//! Event-gated sparse token reuse and complexity-routed encoder branches,
//! instrumented with a deterministic FLOPs ledger.

pub mod anc;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod events;
pub mod flops;
pub mod gradcheck;
pub mod nn;
pub mod report;
pub mod rng;
pub mod run;
pub mod sttf;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use flops::FlopsLedger;
pub use rng::Rng;
pub use tensor::{Graph, Tensor, Var};

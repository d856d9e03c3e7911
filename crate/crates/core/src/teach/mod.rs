//! Teaching session orchestration: state machine, wire protocol, headless
//! script driver and WebSocket endpoint.

pub mod protocol;
pub mod script;
pub mod server;
pub mod service;
pub mod state;

pub use protocol::{ClientMessage, Envelope, ErrorCode, ServerMessage};
pub use service::{SessionSummary, TeachService};
pub use state::SessionState;

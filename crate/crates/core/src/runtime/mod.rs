//! Real-time session runtime: state machine, audio windows, the session
//! engine, the client protocol and the live server.

pub mod audio;
pub mod protocol;
pub mod server;
pub mod session;
pub mod state;

pub use audio::{chunk_audio, AudioBuffer, AudioEncoder, AudioWindow, TextEncoder};
pub use protocol::{ClientMsg, ServerMsg};
pub use server::{serve_session, spawn_listener, Framing, LiveSession};
pub use session::{
    parse_script, run_session, ControlEvent, EventKind, PlaybackMode, SessionConfig, SessionCore, SessionTrace,
};
pub use state::{transition, AudioStream, SessionState, Trigger};

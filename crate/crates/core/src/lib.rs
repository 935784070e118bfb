//! A desk-scale QUIC transport.
//!
//! The crate implements the QUIC wire codecs, a stub handshake carried over
//! CRYPTO frames, streams with connection and stream level flow control,
//! acknowledgment generation, RTT estimation, loss detection and probe
//! timeouts, and a pluggable congestion controller. Endpoints exchange
//! datagrams over [`simnet`], a deterministic discrete-event network, and
//! every interesting transition is recorded as a [`trace::TraceRecord`].
//!
//! Nothing here reads a wall clock: all time is passed in as [`Instant`].

pub mod codec;
pub mod congestion;
pub mod endpoint;
pub mod conn;
pub mod error;
pub mod flow;
pub mod frames;
pub mod inspect;
pub mod protection;
pub mod rangeset;
pub mod recovery;
pub mod scenario;
pub mod simnet;
pub mod streams;
pub mod time;
pub mod tparams;
pub mod trace;

pub use codec::{ConnectionId, VarInt, VERSION_1, VERSION_2};
pub use time::Instant;

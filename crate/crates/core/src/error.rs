//! Transport error codes and the error type carried by CONNECTION_CLOSE.

use thiserror::Error;

pub mod code {
    pub const NO_ERROR: u64 = 0x00;
    pub const INTERNAL_ERROR: u64 = 0x01;
    pub const CONNECTION_REFUSED: u64 = 0x02;
    pub const FLOW_CONTROL_ERROR: u64 = 0x03;
    pub const STREAM_LIMIT_ERROR: u64 = 0x04;
    pub const STREAM_STATE_ERROR: u64 = 0x05;
    pub const FINAL_SIZE_ERROR: u64 = 0x06;
    pub const FRAME_ENCODING_ERROR: u64 = 0x07;
    pub const TRANSPORT_PARAMETER_ERROR: u64 = 0x08;
    pub const CONNECTION_ID_LIMIT_ERROR: u64 = 0x09;
    pub const PROTOCOL_VIOLATION: u64 = 0x0a;
    pub const INVALID_TOKEN: u64 = 0x0b;
    pub const APPLICATION_ERROR: u64 = 0x0c;
    pub const CRYPTO_BUFFER_EXCEEDED: u64 = 0x0d;
    pub const KEY_UPDATE_ERROR: u64 = 0x0e;
    pub const NO_VIABLE_PATH: u64 = 0x10;
    pub const VERSION_NEGOTIATION_ERROR: u64 = 0x11;
    /// Handshake failures map into the crypto error range.
    pub const CRYPTO_ERROR: u64 = 0x100;
}

pub fn code_name(c: u64) -> &'static str {
    match c {
        code::NO_ERROR => "NO_ERROR",
        code::INTERNAL_ERROR => "INTERNAL_ERROR",
        code::CONNECTION_REFUSED => "CONNECTION_REFUSED",
        code::FLOW_CONTROL_ERROR => "FLOW_CONTROL_ERROR",
        code::STREAM_LIMIT_ERROR => "STREAM_LIMIT_ERROR",
        code::STREAM_STATE_ERROR => "STREAM_STATE_ERROR",
        code::FINAL_SIZE_ERROR => "FINAL_SIZE_ERROR",
        code::FRAME_ENCODING_ERROR => "FRAME_ENCODING_ERROR",
        code::TRANSPORT_PARAMETER_ERROR => "TRANSPORT_PARAMETER_ERROR",
        code::CONNECTION_ID_LIMIT_ERROR => "CONNECTION_ID_LIMIT_ERROR",
        code::PROTOCOL_VIOLATION => "PROTOCOL_VIOLATION",
        code::INVALID_TOKEN => "INVALID_TOKEN",
        code::APPLICATION_ERROR => "APPLICATION_ERROR",
        code::CRYPTO_BUFFER_EXCEEDED => "CRYPTO_BUFFER_EXCEEDED",
        code::KEY_UPDATE_ERROR => "KEY_UPDATE_ERROR",
        code::NO_VIABLE_PATH => "NO_VIABLE_PATH",
        code::VERSION_NEGOTIATION_ERROR => "VERSION_NEGOTIATION_ERROR",
        c if (0x100..0x200).contains(&c) => "CRYPTO_ERROR",
        _ => "UNKNOWN",
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{} ({reason})", code_name(*code))]
pub struct TransportError {
    pub code: u64,
    /// Type of the frame that caused the error, zero when unknown.
    pub frame_type: u64,
    pub reason: String,
}

impl TransportError {
    pub fn new(code: u64, reason: impl Into<String>) -> Self {
        TransportError {
            code,
            frame_type: 0,
            reason: reason.into(),
        }
    }

    pub fn with_frame(mut self, frame_type: u64) -> Self {
        self.frame_type = frame_type;
        self
    }

    pub fn protocol(reason: impl Into<String>) -> Self {
        Self::new(code::PROTOCOL_VIOLATION, reason)
    }
}

impl From<crate::frames::FrameError> for TransportError {
    fn from(e: crate::frames::FrameError) -> Self {
        TransportError::new(code::FRAME_ENCODING_ERROR, e.to_string()).with_frame(e.frame_type())
    }
}

//! Length-prefixed framing and message delivery between users, server and
//! authority.
//!
//! Every frame is a 13-byte header (type `u8`, round `u64`, payload length
//! `u32`, all big-endian) followed by the payload. Payload layouts live in
//! [`codec`].

pub mod channel;
pub mod codec;
pub mod loopback;
pub mod net;

use std::io::{self, Read};

use thiserror::Error;

pub use channel::{FrameChannel, MemoryChannel, TcpChannel};
pub use loopback::LoopbackNet;

pub const HEADER_LEN: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum MsgType {
    Connect = 1,
    SlotGrant = 2,
    Upload = 3,
    Abort = 4,
    AaKeyReq = 5,
    AaKeyResp = 6,
    AaReject = 7,
    ModelPush = 8,
}

impl MsgType {
    pub const ALL: [MsgType; 8] = [
        MsgType::Connect,
        MsgType::SlotGrant,
        MsgType::Upload,
        MsgType::Abort,
        MsgType::AaKeyReq,
        MsgType::AaKeyResp,
        MsgType::AaReject,
        MsgType::ModelPush,
    ];

    pub fn from_u8(tag: u8) -> Option<Self> {
        Self::ALL.get((tag as usize).wrapping_sub(1)).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub round_id: u64,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(msg_type: MsgType, round_id: u64, payload: Vec<u8>) -> Self {
        Self {
            msg_type,
            round_id,
            payload,
        }
    }
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("payload of {0} bytes does not fit a 32-bit length")]
    Oversize(usize),
    #[error("stream ended inside a frame")]
    Incomplete,
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn encode(frame: &Frame) -> Result<Vec<u8>, FrameError> {
    let len = u32::try_from(frame.payload.len()).map_err(|_| FrameError::Oversize(frame.payload.len()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + frame.payload.len());
    out.push(frame.msg_type as u8);
    out.extend_from_slice(&frame.round_id.to_be_bytes());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(&frame.payload);
    Ok(out)
}

fn read_full<R: Read + ?Sized>(r: &mut R, buf: &mut [u8]) -> Result<(), FrameError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => FrameError::Incomplete,
        _ => FrameError::Io(e),
    })
}

/// Reads exactly one frame, leaving any following bytes in the stream.
pub fn decode<R: Read + ?Sized>(r: &mut R) -> Result<Frame, FrameError> {
    let mut header = [0u8; HEADER_LEN];
    read_full(r, &mut header)?;
    let msg_type = MsgType::from_u8(header[0]).ok_or(FrameError::UnknownType(header[0]))?;
    let round_id = u64::from_be_bytes(header[1..9].try_into().unwrap());
    let len = u32::from_be_bytes(header[9..13].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    // Grow with the data actually received rather than trusting the length.
    let got = r.take(len as u64).read_to_end(&mut payload)?;
    if got < len {
        return Err(FrameError::Incomplete);
    }
    Ok(Frame {
        msg_type,
        round_id,
        payload,
    })
}

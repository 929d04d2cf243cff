//! Worker wire protocol.
//!
//! ```text
//! frame = length: u32 BE | kind: u8 | task_id: u64 BE | payload
//! ```
//!
//! `length` counts the bytes after the length field (kind, task id and
//! payload), so it is always at least 9. Kinds: 0 task, 1 result,
//! 2 heartbeat, 3 shutdown. Payloads are CBOR: [`WireTask`] for tasks, an
//! [`Outcome`] for results, and a [`WorkerHello`] on a worker's first
//! heartbeat (later heartbeats are empty).
//!
//! [`WireTask`]: super::WireTask
//! [`Outcome`]: crate::Outcome

use std::io::{self, Read, Write};
use std::time::Duration;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

pub const HEADER_LEN: usize = 4 + 1 + 8;
pub const MAX_FRAME_LEN: u32 = 64 * 1024 * 1024;
pub const HEARTBEAT_INTERVAL: Duration = Duration::from_secs(5);
/// Missed heartbeats after which a worker host is presumed dead.
pub const MISSED_HEARTBEATS: u32 = 3;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameKind {
    Task = 0,
    Result = 1,
    Heartbeat = 2,
    Shutdown = 3,
}

impl TryFrom<u8> for FrameKind {
    type Error = ProtocolError;

    fn try_from(v: u8) -> Result<Self, ProtocolError> {
        Ok(match v {
            0 => FrameKind::Task,
            1 => FrameKind::Result,
            2 => FrameKind::Heartbeat,
            3 => FrameKind::Shutdown,
            other => return Err(ProtocolError::UnknownKind(other)),
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("unknown frame kind {0}")]
    UnknownKind(u8),
    #[error("frame length {0} is outside 9..={MAX_FRAME_LEN}")]
    BadLength(u32),
    #[error("connection closed inside a frame")]
    Truncated,
    #[error("payload encoding: {0}")]
    Codec(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: FrameKind,
    pub task_id: u64,
    pub payload: Vec<u8>,
}

/// Sent by a worker host in its first heartbeat.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerHello {
    pub block_id: u64,
    pub host_index: u32,
    pub slots: u32,
    pub pid: u32,
}

impl Frame {
    pub fn new(kind: FrameKind, task_id: u64, payload: Vec<u8>) -> Self {
        Self { kind, task_id, payload }
    }

    pub fn heartbeat() -> Self {
        Self::new(FrameKind::Heartbeat, 0, Vec::new())
    }

    pub fn shutdown() -> Self {
        Self::new(FrameKind::Shutdown, 0, Vec::new())
    }

    pub fn encode(&self) -> Vec<u8> {
        let len = (1 + 8 + self.payload.len()) as u32;
        let mut buf = Vec::with_capacity(HEADER_LEN + self.payload.len());
        buf.extend_from_slice(&len.to_be_bytes());
        buf.push(self.kind as u8);
        buf.extend_from_slice(&self.task_id.to_be_bytes());
        buf.extend_from_slice(&self.payload);
        buf
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }

    /// Parses one frame from the front of `buf`. `Ok(None)` means more bytes
    /// are needed; otherwise returns the frame and the bytes it consumed.
    pub fn decode(buf: &[u8]) -> Result<Option<(Frame, usize)>, ProtocolError> {
        if buf.len() < 4 {
            return Ok(None);
        }
        let len = u32::from_be_bytes(buf[0..4].try_into().unwrap());
        if !(9..=MAX_FRAME_LEN).contains(&len) {
            return Err(ProtocolError::BadLength(len));
        }
        let total = 4 + len as usize;
        if buf.len() < total {
            return Ok(None);
        }
        let kind = FrameKind::try_from(buf[4])?;
        let task_id = u64::from_be_bytes(buf[5..13].try_into().unwrap());
        Ok(Some((
            Frame {
                kind,
                task_id,
                payload: buf[13..total].to_vec(),
            },
            total,
        )))
    }

    /// Reads one frame. Returns `Ok(None)` on a clean end of stream between
    /// frames.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Option<Frame>, ProtocolError> {
        let mut len_buf = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            match r.read(&mut len_buf[got..]) {
                Ok(0) if got == 0 => return Ok(None),
                Ok(0) => return Err(ProtocolError::Truncated),
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let len = u32::from_be_bytes(len_buf);
        if !(9..=MAX_FRAME_LEN).contains(&len) {
            return Err(ProtocolError::BadLength(len));
        }
        let mut body = vec![0u8; len as usize];
        r.read_exact(&mut body).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => ProtocolError::Truncated,
            _ => ProtocolError::Io(e),
        })?;
        let kind = FrameKind::try_from(body[0])?;
        let task_id = u64::from_be_bytes(body[1..9].try_into().unwrap());
        body.drain(..9);
        Ok(Some(Frame {
            kind,
            task_id,
            payload: body,
        }))
    }
}

pub fn encode_payload<T: Serialize>(value: &T) -> Result<Vec<u8>, ProtocolError> {
    let mut buf = Vec::new();
    ciborium::into_writer(value, &mut buf).map_err(|e| ProtocolError::Codec(e.to_string()))?;
    Ok(buf)
}

pub fn decode_payload<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, ProtocolError> {
    ciborium::from_reader(bytes).map_err(|e| ProtocolError::Codec(e.to_string()))
}

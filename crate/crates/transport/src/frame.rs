//! Frame codec.
//!
//! Wire layout (big-endian length):
//!
//! ```text
//! +------+---------+----------+-------------+-----------------+
//! | "LT" | version | msg-type | length: u32 | payload[length] |
//! +------+---------+----------+-------------+-----------------+
//! ```

use std::fmt;

use crate::FrameError;

pub const MAGIC: [u8; 2] = *b"LT";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 8;
/// Hard upper bound on a single frame payload (64 MiB).
pub const MAX_PAYLOAD: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    PackageCoor = 1,
    PackageAgg = 2,
    AttestChallenge = 3,
    AttestQuote = 4,
    KeyDelivery = 5,
    UserRequest = 6,
    ServerResponse = 7,
    Error = 8,
    IdAssign = 9,
}

impl MsgType {
    pub const ALL: [MsgType; 9] = [
        MsgType::PackageCoor,
        MsgType::PackageAgg,
        MsgType::AttestChallenge,
        MsgType::AttestQuote,
        MsgType::KeyDelivery,
        MsgType::UserRequest,
        MsgType::ServerResponse,
        MsgType::Error,
        MsgType::IdAssign,
    ];

    pub fn from_u8(b: u8) -> Option<Self> {
        Self::ALL.get((b as usize).wrapping_sub(1)).copied()
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub payload: Vec<u8>,
}

impl fmt::Debug for Frame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Frame")
            .field("msg_type", &self.msg_type)
            .field("len", &self.payload.len())
            .finish()
    }
}

impl Frame {
    pub fn new(msg_type: MsgType, payload: impl Into<Vec<u8>>) -> Self {
        Frame {
            msg_type,
            payload: payload.into(),
        }
    }

    /// An `Error` frame carrying a UTF-8 reason.
    pub fn error(reason: impl AsRef<str>) -> Self {
        Frame::new(MsgType::Error, reason.as_ref().as_bytes().to_vec())
    }

    pub fn is_error(&self) -> bool {
        self.msg_type == MsgType::Error
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out)?;
        Ok(out)
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<(), FrameError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(FrameError::Oversize {
                len: self.payload.len() as u64,
                max: MAX_PAYLOAD,
            });
        }
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        Ok(())
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum Decoded {
    Frame { frame: Frame, consumed: usize },
    /// At least this many more bytes are required.
    NeedMore(usize),
}

/// Parsed header: message type and payload length.
pub fn decode_header(buf: &[u8], max_payload: usize) -> Result<(MsgType, usize), FrameError> {
    debug_assert!(buf.len() >= HEADER_LEN);
    if buf[0..2] != MAGIC {
        return Err(FrameError::BadMagic([buf[0], buf[1]]));
    }
    if buf[2] != VERSION {
        return Err(FrameError::BadVersion(buf[2]));
    }
    let msg_type = MsgType::from_u8(buf[3]).ok_or(FrameError::UnknownType(buf[3]))?;
    let len = u32::from_be_bytes([buf[4], buf[5], buf[6], buf[7]]) as usize;
    if len > max_payload.min(MAX_PAYLOAD) {
        return Err(FrameError::Oversize {
            len: len as u64,
            max: max_payload.min(MAX_PAYLOAD),
        });
    }
    Ok((msg_type, len))
}

/// Decode one frame from the front of `buf`.
pub fn decode(buf: &[u8]) -> Result<Decoded, FrameError> {
    decode_with_limit(buf, MAX_PAYLOAD)
}

pub fn decode_with_limit(buf: &[u8], max_payload: usize) -> Result<Decoded, FrameError> {
    if buf.len() < HEADER_LEN {
        // Validate whatever prefix we have so garbage is rejected early.
        if !buf.is_empty() && buf[0] != MAGIC[0] || buf.len() >= 2 && buf[1] != MAGIC[1] {
            let second = buf.get(1).copied().unwrap_or(0);
            return Err(FrameError::BadMagic([buf[0], second]));
        }
        return Ok(Decoded::NeedMore(HEADER_LEN - buf.len()));
    }
    let (msg_type, len) = decode_header(buf, max_payload)?;
    let total = HEADER_LEN + len;
    if buf.len() < total {
        return Ok(Decoded::NeedMore(total - buf.len()));
    }
    Ok(Decoded::Frame {
        frame: Frame::new(msg_type, buf[HEADER_LEN..total].to_vec()),
        consumed: total,
    })
}

/// Incremental decoder for a byte stream delivered in arbitrary chunks.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    max_payload: usize,
}

impl Default for FrameDecoder {
    fn default() -> Self {
        Self::new(MAX_PAYLOAD)
    }
}

impl FrameDecoder {
    pub fn new(max_payload: usize) -> Self {
        FrameDecoder {
            buf: Vec::new(),
            max_payload,
        }
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Next complete frame, `Ok(None)` if more input is needed.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, FrameError> {
        match decode_with_limit(&self.buf, self.max_payload)? {
            Decoded::Frame { frame, consumed } => {
                self.buf.drain(..consumed);
                Ok(Some(frame))
            }
            Decoded::NeedMore(_) => Ok(None),
        }
    }
}

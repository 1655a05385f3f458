//! Frame codec. Header: magic (4) | version (1) | type (1) | session id
//! (8 LE) | body length (4 LE), followed by the body. All body integers are
//! little-endian; byte strings are u16-length-prefixed. `docs/protocol.md`
//! is normative.

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"SDSP";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 18;
/// Upper bound on body size; decode rejects anything larger.
pub const MAX_BODY_LEN: u32 = 64 << 20;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u8),
    #[error("unknown frame type {0}")]
    UnknownType(u8),
    #[error("frame truncated")]
    Truncated,
    #[error("body of {0} bytes exceeds the frame limit")]
    BodyTooLarge(u32),
    #[error("malformed body")]
    MalformedBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum FrameType {
    Hello = 1,
    Attest = 2,
    Write = 3,
    Read = 4,
    ReadResp = 5,
    Ack = 6,
    Reject = 7,
    Lease = 8,
    Return = 9,
    Key = 10,
    Drain = 11,
    Recover = 12,
    RegisterDevice = 13,
}

impl FrameType {
    pub fn from_u8(value: u8) -> Result<Self, FrameError> {
        Ok(match value {
            1 => Self::Hello,
            2 => Self::Attest,
            3 => Self::Write,
            4 => Self::Read,
            5 => Self::ReadResp,
            6 => Self::Ack,
            7 => Self::Reject,
            8 => Self::Lease,
            9 => Self::Return,
            10 => Self::Key,
            11 => Self::Drain,
            12 => Self::Recover,
            13 => Self::RegisterDevice,
            other => return Err(FrameError::UnknownType(other)),
        })
    }
}

/// Reasons a request is refused.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum RejectCode {
    Window = 1,
    NetworkMac = 2,
    Freshness = 3,
    JournalFull = 4,
    Exhausted = 5,
    Protocol = 6,
    Device = 7,
    Credential = 8,
}

impl RejectCode {
    pub fn from_u8(value: u8) -> Option<Self> {
        Some(match value {
            1 => Self::Window,
            2 => Self::NetworkMac,
            3 => Self::Freshness,
            4 => Self::JournalFull,
            5 => Self::Exhausted,
            6 => Self::Protocol,
            7 => Self::Device,
            8 => Self::Credential,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub frame_type: FrameType,
    pub session_id: u64,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn new(frame_type: FrameType, session_id: u64, body: Vec<u8>) -> Self {
        Self {
            frame_type,
            session_id,
            body,
        }
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + frame.body.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(frame.frame_type as u8);
    out.extend_from_slice(&frame.session_id.to_le_bytes());
    out.extend_from_slice(&(frame.body.len() as u32).to_le_bytes());
    out.extend_from_slice(&frame.body);
    out
}

/// Decode one frame from the front of `buf`, returning it and the bytes
/// consumed. Malformed input is rejected, never panics.
pub fn decode_frame(buf: &[u8]) -> Result<(Frame, usize), FrameError> {
    if buf.len() < HEADER_LEN {
        return Err(FrameError::Truncated);
    }
    if buf[0..4] != MAGIC {
        return Err(FrameError::BadMagic);
    }
    if buf[4] != VERSION {
        return Err(FrameError::BadVersion(buf[4]));
    }
    let frame_type = FrameType::from_u8(buf[5])?;
    let session_id = u64::from_le_bytes(buf[6..14].try_into().unwrap());
    let len = u32::from_le_bytes(buf[14..18].try_into().unwrap());
    if len > MAX_BODY_LEN {
        return Err(FrameError::BodyTooLarge(len));
    }
    let total = HEADER_LEN + len as usize;
    if buf.len() < total {
        return Err(FrameError::Truncated);
    }
    Ok((
        Frame {
            frame_type,
            session_id,
            body: buf[HEADER_LEN..total].to_vec(),
        },
        total,
    ))
}

/// Little-endian body writer.
#[derive(Default)]
pub struct BodyWriter(Vec<u8>);

impl BodyWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(cap: usize) -> Self {
        Self(Vec::with_capacity(cap))
    }

    pub fn put_u8(&mut self, v: u8) -> &mut Self {
        self.0.push(v);
        self
    }

    pub fn put_u32(&mut self, v: u32) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn put_u64(&mut self, v: u64) -> &mut Self {
        self.0.extend_from_slice(&v.to_le_bytes());
        self
    }

    /// u16-length-prefixed byte string.
    pub fn put_bytes(&mut self, v: &[u8]) -> &mut Self {
        assert!(v.len() <= u16::MAX as usize);
        self.0.extend_from_slice(&(v.len() as u16).to_le_bytes());
        self.0.extend_from_slice(v);
        self
    }

    pub fn put_raw(&mut self, v: &[u8]) -> &mut Self {
        self.0.extend_from_slice(v);
        self
    }

    pub fn raw_mut(&mut self) -> &mut Vec<u8> {
        &mut self.0
    }

    pub fn finish(self) -> Vec<u8> {
        self.0
    }
}

/// Little-endian body reader over a borrowed frame body.
pub struct BodyReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> BodyReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        if self.pos + n > self.buf.len() {
            return Err(FrameError::MalformedBody);
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u8(&mut self) -> Result<u8, FrameError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, FrameError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, FrameError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// u16-length-prefixed byte string.
    pub fn bytes(&mut self) -> Result<&'a [u8], FrameError> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        self.take(len)
    }

    pub fn fixed(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        self.take(n)
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn expect_end(&self) -> Result<(), FrameError> {
        if self.remaining() == 0 {
            Ok(())
        } else {
            Err(FrameError::MalformedBody)
        }
    }
}

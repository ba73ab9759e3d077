//! Length-prefixed frames.
//!
//! ```text
//! magic    b"HSDW"
//! version  u16
//! type     u8
//! length   u32      payload bytes
//! payload
//! ```
//! Little-endian throughout.

use std::io::{ErrorKind, Read, Write};

use crate::error::{Error, Result};

pub const FRAME_MAGIC: &[u8; 4] = b"HSDW";
pub const PROTOCOL_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 11;
/// Default cap on a single payload.
pub const MAX_PAYLOAD: usize = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MessageType {
    Hello = 1,
    GenerateRequest = 2,
    Handoff = 3,
    Img2ImgRequest = 4,
    Error = 5,
    Done = 6,
}

impl MessageType {
    pub const ALL: [MessageType; 6] = [
        MessageType::Hello,
        MessageType::GenerateRequest,
        MessageType::Handoff,
        MessageType::Img2ImgRequest,
        MessageType::Error,
        MessageType::Done,
    ];
}

impl TryFrom<u8> for MessageType {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| *m as u8 == v)
            .ok_or(Error::UnknownType(v))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub version: u16,
    pub kind: MessageType,
    pub payload: Vec<u8>,
}

struct Header {
    version: u16,
    kind: MessageType,
    len: usize,
}

fn parse_header(h: &[u8; HEADER_LEN], max_payload: usize) -> Result<Header> {
    let magic: [u8; 4] = h[..4].try_into().expect("4 bytes");
    if &magic != FRAME_MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = u16::from_le_bytes([h[4], h[5]]);
    let kind = MessageType::try_from(h[6])?;
    let len = u32::from_le_bytes(h[7..11].try_into().expect("4 bytes")) as usize;
    if len > max_payload {
        return Err(Error::FrameTooLarge { len, max: max_payload });
    }
    Ok(Header { version, kind, len })
}

impl Frame {
    pub fn new(kind: MessageType, payload: Vec<u8>) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            kind,
            payload,
        }
    }

    pub fn error(message: &str) -> Self {
        Self::new(MessageType::Error, message.as_bytes().to_vec())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(FRAME_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.kind as u8);
        let len = u32::try_from(self.payload.len()).expect("payload exceeds u32 length field");
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&self.payload);
        out
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        Self::decode_with_limit(bytes, MAX_PAYLOAD)
    }

    pub fn decode_with_limit(bytes: &[u8], max_payload: usize) -> Result<Self> {
        let header: &[u8; HEADER_LEN] = bytes
            .get(..HEADER_LEN)
            .and_then(|h| h.try_into().ok())
            .ok_or(Error::LengthMismatch {
                declared: HEADER_LEN,
                actual: bytes.len(),
            })?;
        let h = parse_header(header, max_payload)?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != h.len {
            return Err(Error::LengthMismatch {
                declared: h.len,
                actual: payload.len(),
            });
        }
        Ok(Self {
            version: h.version,
            kind: h.kind,
            payload: payload.to_vec(),
        })
    }

    /// Payload as text, for ERROR frames.
    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.payload).into_owned()
    }
}

pub fn write_frame<W: Write>(out: &mut W, frame: &Frame) -> Result<()> {
    out.write_all(&frame.encode())?;
    out.flush()?;
    Ok(())
}

/// Reads one frame. A stream that ends before the header starts yields
/// `Ok(None)`; one that ends mid-frame is an error.
pub fn read_frame<R: Read>(input: &mut R, max_payload: usize) -> Result<Option<Frame>> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match input.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => {
                return Err(Error::LengthMismatch {
                    declared: HEADER_LEN,
                    actual: got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = parse_header(&header, max_payload)?;
    let mut payload = Vec::with_capacity(h.len.min(1 << 16));
    let read = input.take(h.len as u64).read_to_end(&mut payload)?;
    if read != h.len {
        return Err(Error::LengthMismatch {
            declared: h.len,
            actual: read,
        });
    }
    Ok(Some(Frame {
        version: h.version,
        kind: h.kind,
        payload,
    }))
}

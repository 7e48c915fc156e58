//! Datagram and consolidated-frame wire formats.
//!
//! All integers are little-endian. A plain datagram is
//!
//! ```text
//! magic "BEDG" (4) | version (1) | channel_id (8) | sequence_number (8)
//! | bundled_touch_count (8) | payload_length (4) | crc32 (4) | payload
//! ```
//!
//! A consolidated frame uses magic `"BEFR"` and inserts a frame-kind byte
//! after the version. The CRC-32 covers every header byte before the checksum
//! field followed by the payload.

use thiserror::Error;

pub const DATAGRAM_MAGIC: [u8; 4] = *b"BEDG";
pub const FRAME_MAGIC: [u8; 4] = *b"BEFR";
pub const WIRE_VERSION: u8 = 1;
pub const DATAGRAM_HEADER_LEN: usize = 37;
pub const FRAME_HEADER_LEN: usize = 38;
pub const MAX_PAYLOAD: usize = 1400;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("payload of {len} bytes exceeds the {max}-byte datagram cap")]
    PayloadTooLarge { len: usize, max: usize },
    #[error("datagram truncated")]
    Truncated,
    #[error("unrecognized magic")]
    BadMagic,
    #[error("unsupported wire version {0}")]
    BadVersion(u8),
    #[error("unknown frame kind {0}")]
    BadFrameKind(u8),
    #[error("declared payload length does not match datagram size")]
    LengthMismatch,
    #[error("checksum mismatch")]
    ChecksumMismatch,
    #[error("malformed consolidated frame body")]
    MalformedBody,
}

/// Values that can ride inside a datagram payload.
pub trait WirePayload: Sized {
    fn encode(&self, out: &mut Vec<u8>);
    fn decode(bytes: &[u8]) -> Option<Self>;
}

impl WirePayload for u32 {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn decode(bytes: &[u8]) -> Option<Self> {
        Some(u32::from_le_bytes(bytes.try_into().ok()?))
    }
}

impl WirePayload for u64 {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn decode(bytes: &[u8]) -> Option<Self> {
        Some(u64::from_le_bytes(bytes.try_into().ok()?))
    }
}

impl WirePayload for Vec<u8> {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(self);
    }

    fn decode(bytes: &[u8]) -> Option<Self> {
        Some(bytes.to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameKind {
    Pooled = 0,
    Aggregated = 1,
}

impl TryFrom<u8> for FrameKind {
    type Error = WireError;

    fn try_from(v: u8) -> Result<Self, WireError> {
        match v {
            0 => Ok(FrameKind::Pooled),
            1 => Ok(FrameKind::Aggregated),
            other => Err(WireError::BadFrameKind(other)),
        }
    }
}

/// A decoded plain datagram borrowing its payload from the receive buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Datagram<'a> {
    pub channel_id: u64,
    pub sequence_number: u64,
    pub bundled_touch_count: u64,
    pub payload: &'a [u8],
}

/// A decoded consolidated frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Frame<'a> {
    pub kind: FrameKind,
    pub channel_id: u64,
    pub sequence_number: u64,
    pub body: &'a [u8],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoded<'a> {
    Datagram(Datagram<'a>),
    Frame(Frame<'a>),
}

fn check_len(len: usize) -> Result<u32, WireError> {
    if len > MAX_PAYLOAD {
        return Err(WireError::PayloadTooLarge {
            len,
            max: MAX_PAYLOAD,
        });
    }
    Ok(len as u32)
}

fn seal(out: &mut Vec<u8>, start: usize, header_len: usize, payload: &[u8]) {
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&out[start..start + header_len - 4]);
    hasher.update(payload);
    out.extend_from_slice(&hasher.finalize().to_le_bytes());
    out.extend_from_slice(payload);
}

/// Appends the encoded datagram to `out`.
pub fn encode_datagram(
    channel_id: u64,
    sequence_number: u64,
    bundled_touch_count: u64,
    payload: &[u8],
    out: &mut Vec<u8>,
) -> Result<(), WireError> {
    let len = check_len(payload.len())?;
    let start = out.len();
    out.reserve(DATAGRAM_HEADER_LEN + payload.len());
    out.extend_from_slice(&DATAGRAM_MAGIC);
    out.push(WIRE_VERSION);
    out.extend_from_slice(&channel_id.to_le_bytes());
    out.extend_from_slice(&sequence_number.to_le_bytes());
    out.extend_from_slice(&bundled_touch_count.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    seal(out, start, DATAGRAM_HEADER_LEN, payload);
    Ok(())
}

/// Appends an encoded consolidated frame to `out`. The touch field of the
/// shared header is zero; member envelopes carry their own.
pub fn encode_frame(
    kind: FrameKind,
    channel_id: u64,
    sequence_number: u64,
    body: &[u8],
    out: &mut Vec<u8>,
) -> Result<(), WireError> {
    let len = check_len(body.len())?;
    let start = out.len();
    out.reserve(FRAME_HEADER_LEN + body.len());
    out.extend_from_slice(&FRAME_MAGIC);
    out.push(WIRE_VERSION);
    out.push(kind as u8);
    out.extend_from_slice(&channel_id.to_le_bytes());
    out.extend_from_slice(&sequence_number.to_le_bytes());
    out.extend_from_slice(&0u64.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    seal(out, start, FRAME_HEADER_LEN, body);
    Ok(())
}

fn le_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
}

fn le_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn verify(bytes: &[u8], header_len: usize) -> Result<&[u8], WireError> {
    if bytes.len() < header_len {
        return Err(WireError::Truncated);
    }
    let len = le_u32(bytes, header_len - 8) as usize;
    if bytes.len() != header_len + len {
        return Err(WireError::LengthMismatch);
    }
    let payload = &bytes[header_len..];
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&bytes[..header_len - 4]);
    hasher.update(payload);
    if hasher.finalize() != le_u32(bytes, header_len - 4) {
        return Err(WireError::ChecksumMismatch);
    }
    Ok(payload)
}

/// Decodes either a plain datagram or a consolidated frame, verifying the
/// checksum.
pub fn decode(bytes: &[u8]) -> Result<Decoded<'_>, WireError> {
    if bytes.len() < 5 {
        return Err(WireError::Truncated);
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if bytes[4] != WIRE_VERSION {
        if magic == DATAGRAM_MAGIC || magic == FRAME_MAGIC {
            return Err(WireError::BadVersion(bytes[4]));
        }
        return Err(WireError::BadMagic);
    }
    match magic {
        DATAGRAM_MAGIC => {
            let payload = verify(bytes, DATAGRAM_HEADER_LEN)?;
            Ok(Decoded::Datagram(Datagram {
                channel_id: le_u64(bytes, 5),
                sequence_number: le_u64(bytes, 13),
                bundled_touch_count: le_u64(bytes, 21),
                payload,
            }))
        }
        FRAME_MAGIC => {
            let body = verify(bytes, FRAME_HEADER_LEN)?;
            Ok(Decoded::Frame(Frame {
                kind: FrameKind::try_from(bytes[5])?,
                channel_id: le_u64(bytes, 6),
                sequence_number: le_u64(bytes, 14),
                body,
            }))
        }
        _ => Err(WireError::BadMagic),
    }
}

pub fn decode_datagram(bytes: &[u8]) -> Result<Datagram<'_>, WireError> {
    match decode(bytes)? {
        Decoded::Datagram(d) => Ok(d),
        Decoded::Frame(_) => Err(WireError::BadMagic),
    }
}

/// Per-member envelope inside consolidated frames: sequence number and touch
/// count followed by the encoded payload.
pub const ENVELOPE_HEADER_LEN: usize = 16;

pub fn encode_envelope(sequence_number: u64, bundled_touch_count: u64, payload: &[u8], out: &mut Vec<u8>) {
    out.extend_from_slice(&sequence_number.to_le_bytes());
    out.extend_from_slice(&bundled_touch_count.to_le_bytes());
    out.extend_from_slice(payload);
}

/// Splits an envelope into (sequence number, touch count, payload).
pub fn decode_envelope(bytes: &[u8]) -> Option<(u64, u64, &[u8])> {
    if bytes.len() < ENVELOPE_HEADER_LEN {
        return None;
    }
    Some((le_u64(bytes, 0), le_u64(bytes, 8), &bytes[ENVELOPE_HEADER_LEN..]))
}

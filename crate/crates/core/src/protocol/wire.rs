//! Length-prefixed frames: one type byte, a little-endian `u32` payload
//! length, then the payload.

use std::io::{self, Read, Write};

use super::ProtocolError;
use crate::codec::{Reader, Writer};
use crate::nnengine::Logits;

/// Largest payload accepted in either direction.
pub const MAX_PAYLOAD: usize = 64 << 20;
pub const HEADER_LEN: usize = 5;

pub const TYPE_INFER_REQUEST: u8 = 0x01;
pub const TYPE_INFER_RESPONSE: u8 = 0x02;
pub const TYPE_ERROR: u8 = 0x7F;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    Malformed = 1,
    Geometry = 2,
    Kind = 3,
}

impl ErrorCode {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            1 => Some(Self::Malformed),
            2 => Some(Self::Geometry),
            3 => Some(Self::Kind),
            _ => None,
        }
    }
}

/// An encrypted image in `CMXE` form, carried byte-for-byte.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferRequest {
    pub image: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferResponse {
    pub class: u32,
    pub logits: Vec<f64>,
}

impl InferResponse {
    pub fn from_logits(logits: Logits) -> Self {
        Self { class: logits.argmax() as u32, logits: logits.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ErrorMessage {
    pub code: ErrorCode,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum WireMessage {
    InferRequest(InferRequest),
    InferResponse(InferResponse),
    Error(ErrorMessage),
}

impl WireMessage {
    pub fn type_byte(&self) -> u8 {
        match self {
            Self::InferRequest(_) => TYPE_INFER_REQUEST,
            Self::InferResponse(_) => TYPE_INFER_RESPONSE,
            Self::Error(_) => TYPE_ERROR,
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            Self::InferRequest(r) => r.image.clone(),
            Self::InferResponse(r) => {
                let mut w = Writer::new();
                w.u32(r.class);
                w.len32(r.logits.len());
                w.f64s(&r.logits);
                w.finish()
            }
            Self::Error(e) => {
                let mut out = vec![e.code as u8];
                out.extend_from_slice(e.detail.as_bytes());
                out
            }
        }
    }

    /// Full frame including header. Fails if the payload exceeds
    /// [`MAX_PAYLOAD`].
    pub fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        let payload = self.payload();
        if payload.len() > MAX_PAYLOAD {
            return Err(ProtocolError::Oversize(payload.len()));
        }
        let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
        out.push(self.type_byte());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Decodes exactly one frame; trailing or missing bytes are errors.
    pub fn decode(frame: &[u8]) -> Result<Self, ProtocolError> {
        if frame.len() < HEADER_LEN {
            return Err(ProtocolError::Malformed(format!("frame of {} bytes is shorter than its header", frame.len())));
        }
        let len = u32::from_le_bytes(frame[1..5].try_into().unwrap()) as usize;
        if len > MAX_PAYLOAD {
            return Err(ProtocolError::Oversize(len));
        }
        if frame.len() - HEADER_LEN != len {
            return Err(ProtocolError::Malformed(format!(
                "header announces {len} payload bytes, frame carries {}",
                frame.len() - HEADER_LEN
            )));
        }
        Self::from_parts(frame[0], frame[HEADER_LEN..].to_vec())
    }

    pub fn from_parts(type_byte: u8, payload: Vec<u8>) -> Result<Self, ProtocolError> {
        match type_byte {
            TYPE_INFER_REQUEST => Ok(Self::InferRequest(InferRequest { image: payload })),
            TYPE_INFER_RESPONSE => {
                let mut r = Reader::new(&payload);
                let class = r.u32()?;
                let count = r.u32()? as usize;
                let logits = r.f64s(count)?;
                r.expect_end()?;
                if class as usize >= count.max(1) || (count > 0 && Logits(logits.clone()).argmax() != class as usize) {
                    return Err(ProtocolError::Malformed(format!("class {class} is not the argmax of the logits")));
                }
                Ok(Self::InferResponse(InferResponse { class, logits }))
            }
            TYPE_ERROR => {
                let (&code, text) = payload
                    .split_first()
                    .ok_or_else(|| ProtocolError::Malformed("empty error payload".into()))?;
                let code = ErrorCode::from_byte(code)
                    .ok_or_else(|| ProtocolError::Malformed(format!("unknown error code {code}")))?;
                let detail = String::from_utf8(text.to_vec())
                    .map_err(|_| ProtocolError::Malformed("error detail is not UTF-8".into()))?;
                Ok(Self::Error(ErrorMessage { code, detail }))
            }
            other => Err(ProtocolError::UnknownType(other)),
        }
    }
}

/// Reads one raw frame. `Ok(None)` means the peer closed cleanly before a
/// new header. An oversize length is reported without reading the payload.
pub fn read_frame(r: &mut impl Read) -> Result<Option<(u8, Vec<u8>)>, ProtocolError> {
    let mut header = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut header[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Malformed("connection closed inside a frame header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_le_bytes(header[1..5].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::Oversize(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Malformed("connection closed inside a frame payload".into()),
        _ => e.into(),
    })?;
    Ok(Some((header[0], payload)))
}

pub fn write_message(w: &mut impl Write, msg: &WireMessage) -> Result<(), ProtocolError> {
    w.write_all(&msg.encode()?)?;
    w.flush()?;
    Ok(())
}

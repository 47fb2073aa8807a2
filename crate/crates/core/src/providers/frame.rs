//! Length-prefixed message framing shared with the inference sidecar.
//!
//! A message is `[u32 LE header length][UTF-8 JSON header][u32 LE payload length][payload]`.

use std::io::{Read, Write};

use serde_json::Value;

use crate::error::{Error, Result};

/// Upper bound on accepted header size.
pub const MAX_HEADER_BYTES: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub header: Value,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(header: Value, payload: Vec<u8>) -> Self {
        Self { header, payload }
    }
}

pub fn write_message<W: Write>(w: &mut W, header: &Value, payload: &[u8]) -> Result<()> {
    let head = serde_json::to_vec(header)?;
    let head_len = u32::try_from(head.len())
        .map_err(|_| Error::Protocol(format!("header of {} bytes too large", head.len())))?;
    let body_len = u32::try_from(payload.len())
        .map_err(|_| Error::Protocol(format!("payload of {} bytes too large", payload.len())))?;
    w.write_all(&head_len.to_le_bytes())?;
    w.write_all(&head)?;
    w.write_all(&body_len.to_le_bytes())?;
    w.write_all(payload)?;
    w.flush()?;
    Ok(())
}

fn read_len<R: Read>(r: &mut R, what: &str) -> Result<usize> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Protocol(format!("reading {what} length: {e}")))?;
    Ok(u32::from_le_bytes(buf) as usize)
}

fn read_body<R: Read>(r: &mut R, len: usize, what: &str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::Protocol(format!("reading {what}: {e}")))?;
    if buf.len() != len {
        return Err(Error::Protocol(format!(
            "truncated {what}: declared {len} bytes, received {}",
            buf.len()
        )));
    }
    Ok(buf)
}

pub fn read_message<R: Read>(r: &mut R) -> Result<Message> {
    let head_len = read_len(r, "header")?;
    if head_len > MAX_HEADER_BYTES {
        return Err(Error::Protocol(format!("header length {head_len} exceeds limit")));
    }
    let head = read_body(r, head_len, "header")?;
    let header: Value = serde_json::from_slice(&head)
        .map_err(|e| Error::Protocol(format!("header is not valid JSON: {e}")))?;
    if !header.is_object() {
        return Err(Error::Protocol("header is not a JSON object".into()));
    }
    let body_len = read_len(r, "payload")?;
    let payload = read_body(r, body_len, "payload")?;
    Ok(Message { header, payload })
}

pub fn f32s_to_le(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn le_to_f32s(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Protocol(format!(
            "payload of {} bytes is not a whole number of float32 values",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

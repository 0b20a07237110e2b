//! Framed binary layout shared by model checkpoints and parameter messages.
//!
//! ```text
//! offset  size      field
//! 0       8         header length H, u64 little-endian
//! 8       H         UTF-8 JSON header (must contain "count")
//! 8 + H   8*count   payload, f64 little-endian
//! ```

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub trait FramedHeader {
    fn count(&self) -> usize;
}

pub fn encode<H: Serialize + FramedHeader>(header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    if header.count() != payload.len() {
        return Err(Error::Wire(format!(
            "header declares {} values, payload has {}",
            header.count(),
            payload.len()
        )));
    }
    let json = serde_json::to_vec(header).map_err(|e| Error::Wire(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + 8 * payload.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned + FramedHeader>(bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    let len_bytes: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Wire("truncated header length".into()))?;
    let header_len = usize::try_from(u64::from_le_bytes(len_bytes))
        .map_err(|_| Error::Wire("header length overflows".into()))?;
    let body = &bytes[8..];
    if body.len() < header_len {
        return Err(Error::Wire(format!(
            "header claims {header_len} bytes, {} available",
            body.len()
        )));
    }
    let header: H =
        serde_json::from_slice(&body[..header_len]).map_err(|e| Error::Wire(e.to_string()))?;
    let payload = &body[header_len..];
    if payload.len() != 8 * header.count() {
        return Err(Error::Wire(format!(
            "payload has {} bytes, header declares {} values",
            payload.len(),
            header.count()
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Ok((header, values))
}

//! Minimal binary signal format: 4-byte magic, u32 LE sample rate, then
//! f32 LE samples in microvolts.

use super::Recording;
use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"SPRW";

pub fn write_raw(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * samples.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&sample_rate.to_le_bytes());
    for &v in samples {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn read_raw(bytes: &[u8], subject_id: &str) -> Result<Recording> {
    if bytes.len() < 8 || bytes[..4] != MAGIC || (bytes.len() - 8) % 4 != 0 {
        return Err(Error::RawFormat);
    }
    let rate = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if rate == 0 {
        return Err(Error::RawFormat);
    }
    let samples = bytes[8..]
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    Ok(Recording {
        subject_id: subject_id.to_string(),
        samples,
        sample_rate: f64::from(rate),
        channel: "raw".to_string(),
    })
}

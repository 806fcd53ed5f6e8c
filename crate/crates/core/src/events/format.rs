//! `EVS1` binary event streams.
//!
//! ```text
//! magic  "EVS1"   4 bytes
//! width  u16
//! height u16
//! count  u64
//! count records of 13 bytes: t u64, x u16, y u16, polarity u8
//! ```
//!
//! All integers are little-endian.

use super::EventRecord;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EVS1";
pub const HEADER_LEN: usize = 16;
pub const RECORD_LEN: usize = 13;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventStream {
    pub width: u16,
    pub height: u16,
    pub records: Vec<EventRecord>,
}

pub fn write_stream(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.records.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    out.extend_from_slice(&(stream.records.len() as u64).to_le_bytes());
    for r in &stream.records {
        out.extend_from_slice(&r.t.to_le_bytes());
        out.extend_from_slice(&r.x.to_le_bytes());
        out.extend_from_slice(&r.y.to_le_bytes());
        out.push(r.polarity);
    }
    out
}

/// Parse a stream, checking the magic, the declared count, coordinates,
/// polarity values and time order.
pub fn read_stream(bytes: &[u8]) -> Result<EventStream> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "{} bytes is shorter than the {HEADER_LEN}-byte header",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    if !body.len().is_multiple_of(RECORD_LEN) || (body.len() / RECORD_LEN) as u64 != count {
        return Err(Error::Format(format!(
            "header declares {count} records but {} bytes of records follow",
            body.len()
        )));
    }
    let mut records = Vec::with_capacity(count as usize);
    let mut last_t = 0;
    for (index, c) in body.chunks_exact(RECORD_LEN).enumerate() {
        let r = EventRecord {
            t: u64::from_le_bytes(c[..8].try_into().unwrap()),
            x: u16::from_le_bytes([c[8], c[9]]),
            y: u16::from_le_bytes([c[10], c[11]]),
            polarity: c[12],
        };
        if r.x >= width || r.y >= height {
            return Err(Error::EventBounds {
                index,
                x: r.x,
                y: r.y,
                width: width as usize,
                height: height as usize,
            });
        }
        if r.polarity > 1 {
            return Err(Error::Format(format!("event {index} has polarity {}", r.polarity)));
        }
        if r.t < last_t {
            return Err(Error::Format(format!("event {index} breaks time order")));
        }
        last_t = r.t;
        records.push(r);
    }
    Ok(EventStream {
        width,
        height,
        records,
    })
}

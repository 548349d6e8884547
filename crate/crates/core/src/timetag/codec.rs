//! `QTT1` file layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "QTT1"
//!      4     2  format version (u16, = 1)
//!      6     8  sync rate in mHz (u64)
//!     14     4  resolution in ps (u32, = 64)
//!     18   8·n  records (u64 each)
//! ```

use std::fs;
use std::path::Path;

use super::{TagError, TagHeader, TagRecord, TagStream, RESOLUTION_PS};

pub const MAGIC: &[u8; 4] = b"QTT1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 18;
const RECORD_LEN: usize = 8;

pub fn encode(stream: &TagStream) -> Vec<u8> {
    let h = stream.header();
    let mut out = Vec::with_capacity(HEADER_LEN + RECORD_LEN * stream.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&h.version.to_le_bytes());
    out.extend_from_slice(&h.sync_rate_mhz.to_le_bytes());
    out.extend_from_slice(&h.resolution_ps.to_le_bytes());
    for r in stream.records() {
        out.extend_from_slice(&r.raw().to_le_bytes());
    }
    out
}

fn le<const N: usize>(bytes: &[u8], at: usize) -> [u8; N] {
    bytes[at..at + N].try_into().expect("slice length checked")
}

pub fn decode(bytes: &[u8]) -> Result<TagStream, TagError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(TagError::format(0, "bad magic, expected \"QTT1\""));
    }
    if bytes.len() < HEADER_LEN {
        return Err(TagError::format(bytes.len(), "truncated header"));
    }
    let version = u16::from_le_bytes(le(bytes, 4));
    if version != VERSION {
        return Err(TagError::format(4, format!("unsupported version {version}")));
    }
    let sync_rate_mhz = u64::from_le_bytes(le(bytes, 6));
    if sync_rate_mhz == 0 {
        return Err(TagError::format(6, "zero sync rate"));
    }
    let resolution_ps = u32::from_le_bytes(le(bytes, 14));
    if resolution_ps != RESOLUTION_PS {
        return Err(TagError::format(
            14,
            format!("resolution {resolution_ps} ps, expected {RESOLUTION_PS}"),
        ));
    }
    let body = &bytes[HEADER_LEN..];
    if !body.len().is_multiple_of(RECORD_LEN) {
        let at = HEADER_LEN + body.len() - body.len() % RECORD_LEN;
        return Err(TagError::format(at, "trailing partial record"));
    }
    let header = TagHeader {
        version,
        sync_rate_mhz,
        resolution_ps,
    };
    let period = header.sync_period_ps();
    let mut records = Vec::with_capacity(body.len() / RECORD_LEN);
    let mut prev: Option<TagRecord> = None;
    for (i, chunk) in body.chunks_exact(RECORD_LEN).enumerate() {
        let at = HEADER_LEN + i * RECORD_LEN;
        let raw = u64::from_le_bytes(chunk.try_into().expect("chunk is 8 bytes"));
        let rec = TagRecord::from_raw(raw).map_err(|e| TagError::format(at, e.to_string()))?;
        if f64::from(rec.offset_units()) * f64::from(RESOLUTION_PS) >= period {
            return Err(TagError::format(at, "offset beyond sync period"));
        }
        if let Some(p) = prev {
            if p.order_key() > rec.order_key() {
                return Err(TagError::format(at, "record out of order"));
            }
        }
        prev = Some(rec);
        records.push(rec);
    }
    TagStream::new(header, records)
}

pub fn write_file(path: &Path, stream: &TagStream) -> Result<(), TagError> {
    fs::write(path, encode(stream)).map_err(|e| TagError::Io(format!("{}: {e}", path.display())))
}

pub fn read_file(path: &Path) -> Result<TagStream, TagError> {
    let bytes = fs::read(path).map_err(|e| TagError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

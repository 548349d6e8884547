//! Time-tag records and streams, the `QTT1` file codec, and the analysis
//! steps that turn tags into coincidence tables.
//!
//! A record packs one detector click into 64 bits:
//!
//! | bits  | field                                   |
//! |-------|-----------------------------------------|
//! | 0–15  | offset after the sync edge, 64-ps units |
//! | 16–55 | sync pulse counter                      |
//! | 56–57 | party (0 = A, 1 = B)                    |
//! | 58–63 | reserved, zero                          |

mod analysis;
mod codec;

pub use analysis::{
    bin_outcomes, coincidences, histogram2d, offset_histogram, BinnedEvent, Binned,
    CoincidenceTable, Histogram2D,
};
pub use codec::{decode, encode, read_file, write_file, HEADER_LEN, MAGIC, VERSION};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::AnalyzerError;

/// Histogram and record resolution.
pub const RESOLUTION_PS: u32 = 64;
pub const SYNC_BITS: u32 = 40;
pub const MAX_SYNC: u64 = (1 << SYNC_BITS) - 1;

const OFFSET_MASK: u64 = 0xFFFF;
const SYNC_SHIFT: u32 = 16;
const PARTY_SHIFT: u32 = 56;
const RESERVED_MASK: u64 = !((1 << 58) - 1);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TagError {
    #[error("tag data byte {offset}: {reason}")]
    Format { offset: usize, reason: String },
    #[error("stream headers disagree: {0}")]
    HeaderMismatch(String),
    #[error("invalid record: {0}")]
    Record(String),
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
    #[error("i/o: {0}")]
    Io(String),
}

impl TagError {
    pub(crate) fn format(offset: usize, reason: impl Into<String>) -> Self {
        TagError::Format {
            offset,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Party {
    A,
    B,
}

impl Party {
    pub fn bits(self) -> u64 {
        match self {
            Party::A => 0,
            Party::B => 1,
        }
    }

    pub fn from_bits(bits: u64) -> Option<Self> {
        match bits {
            0 => Some(Party::A),
            1 => Some(Party::B),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TagRecord(u64);

impl TagRecord {
    pub fn new(party: Party, sync_index: u64, offset_units: u16) -> Result<Self, TagError> {
        if sync_index > MAX_SYNC {
            return Err(TagError::Record(format!(
                "sync counter {sync_index} exceeds {SYNC_BITS} bits"
            )));
        }
        Ok(TagRecord(
            u64::from(offset_units) | (sync_index << SYNC_SHIFT) | (party.bits() << PARTY_SHIFT),
        ))
    }

    /// Validates reserved bits and the party field.
    pub fn from_raw(raw: u64) -> Result<Self, TagError> {
        if raw & RESERVED_MASK != 0 {
            return Err(TagError::Record("reserved bits set".into()));
        }
        if Party::from_bits((raw >> PARTY_SHIFT) & 0b11).is_none() {
            return Err(TagError::Record("unknown party id".into()));
        }
        Ok(TagRecord(raw))
    }

    pub fn raw(self) -> u64 {
        self.0
    }

    pub fn party(self) -> Party {
        Party::from_bits((self.0 >> PARTY_SHIFT) & 0b11).expect("validated on construction")
    }

    pub fn sync_index(self) -> u64 {
        (self.0 >> SYNC_SHIFT) & MAX_SYNC
    }

    pub fn offset_units(self) -> u16 {
        (self.0 & OFFSET_MASK) as u16
    }

    /// Center of the record's 64-ps bin.
    pub fn offset_ps(self) -> f64 {
        (f64::from(self.offset_units()) + 0.5) * f64::from(RESOLUTION_PS)
    }

    /// Stream ordering key: (sync, offset).
    pub fn order_key(self) -> (u64, u16) {
        (self.sync_index(), self.offset_units())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TagHeader {
    pub version: u16,
    /// Sync (pump repetition) rate in millihertz.
    pub sync_rate_mhz: u64,
    pub resolution_ps: u32,
}

impl TagHeader {
    pub fn new(sync_rate_mhz: u64) -> Self {
        TagHeader {
            version: VERSION,
            sync_rate_mhz,
            resolution_ps: RESOLUTION_PS,
        }
    }

    pub fn from_rate_hz(rate_hz: f64) -> Self {
        Self::new((rate_hz * 1e3).round() as u64)
    }

    pub fn sync_rate_hz(&self) -> f64 {
        self.sync_rate_mhz as f64 / 1e3
    }

    pub fn sync_period_ps(&self) -> f64 {
        1e15 / self.sync_rate_mhz as f64
    }

    /// Number of 64-ps bins covering one sync period.
    pub fn bins_per_period(&self) -> usize {
        (self.sync_period_ps() / f64::from(self.resolution_ps)).ceil() as usize
    }
}

/// Header plus records sorted by (sync counter, offset).
#[derive(Debug, Clone, PartialEq)]
pub struct TagStream {
    header: TagHeader,
    records: Vec<TagRecord>,
}

impl TagStream {
    pub fn new(header: TagHeader, records: Vec<TagRecord>) -> Result<Self, TagError> {
        if header.sync_rate_mhz == 0 {
            return Err(TagError::Record("sync rate must be positive".into()));
        }
        if header.resolution_ps != RESOLUTION_PS {
            return Err(TagError::Record(format!(
                "resolution {} ps, expected {RESOLUTION_PS}",
                header.resolution_ps
            )));
        }
        let period = header.sync_period_ps();
        for (i, r) in records.iter().enumerate() {
            if f64::from(r.offset_units()) * f64::from(RESOLUTION_PS) >= period {
                return Err(TagError::Record(format!(
                    "record {i}: offset {} units beyond sync period",
                    r.offset_units()
                )));
            }
            if i > 0 && records[i - 1].order_key() > r.order_key() {
                return Err(TagError::Record(format!("record {i} out of order")));
            }
        }
        Ok(TagStream { header, records })
    }

    pub fn empty(header: TagHeader) -> Self {
        TagStream {
            header,
            records: Vec::new(),
        }
    }

    pub fn header(&self) -> &TagHeader {
        &self.header
    }

    pub fn records(&self) -> &[TagRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn party(&self, party: Party) -> impl Iterator<Item = TagRecord> + '_ {
        self.records.iter().copied().filter(move |r| r.party() == party)
    }

    pub fn count(&self, party: Party) -> usize {
        self.party(party).count()
    }

    /// Records with sync index in `[start, end)`.
    pub fn sync_range(&self, start: u64, end: u64) -> &[TagRecord] {
        let lo = self.records.partition_point(|r| r.sync_index() < start);
        let hi = self.records.partition_point(|r| r.sync_index() < end);
        &self.records[lo..hi]
    }

    /// Keep only one party's records.
    pub fn filter_party(&self, party: Party) -> TagStream {
        TagStream {
            header: self.header,
            records: self.party(party).collect(),
        }
    }

    pub fn into_records(self) -> Vec<TagRecord> {
        self.records
    }
}

use serde::{Deserialize, Serialize};

use super::{Party, TagError, TagHeader, TagRecord, TagStream};
use crate::analyzer::AnalyzerMap;
use crate::state::PolarizationOutcome;

/// Square histogram over (Alice offset bin, Bob offset bin) for same-pulse
/// event pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2D {
    pub bins: usize,
    pub resolution_ps: u32,
    /// Row-major, `counts[a_bin * bins + b_bin]`.
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram2D {
    pub fn new(header: &TagHeader) -> Self {
        let bins = header.bins_per_period();
        Histogram2D {
            bins,
            resolution_ps: header.resolution_ps,
            counts: vec![0; bins * bins],
            total: 0,
        }
    }

    pub fn get(&self, a_bin: usize, b_bin: usize) -> u64 {
        self.counts[a_bin * self.bins + b_bin]
    }

    fn bump(&mut self, a_bin: usize, b_bin: usize) {
        self.counts[a_bin * self.bins + b_bin] += 1;
        self.total += 1;
    }

    /// Add another histogram of the same shape.
    pub fn merge(&mut self, other: &Histogram2D) {
        assert_eq!(self.bins, other.bins, "histogram shapes differ");
        for (x, y) in self.counts.iter_mut().zip(&other.counts) {
            *x += y;
        }
        self.total += other.total;
    }

    pub fn marginal_a(&self) -> Vec<u64> {
        self.counts.chunks(self.bins).map(|row| row.iter().sum()).collect()
    }

    pub fn marginal_b(&self) -> Vec<u64> {
        let mut out = vec![0; self.bins];
        for row in self.counts.chunks(self.bins) {
            for (o, c) in out.iter_mut().zip(row) {
                *o += c;
            }
        }
        out
    }

    fn bin_center_ps(&self, bin: usize) -> f64 {
        (bin as f64 + 0.5) * f64::from(self.resolution_ps)
    }

    /// Counts inside the square box where Alice's bin falls in slot `a` and
    /// Bob's in slot `b`.
    pub fn box_sum(
        &self,
        analyzer: &AnalyzerMap,
        a: PolarizationOutcome,
        b: PolarizationOutcome,
    ) -> u64 {
        let a_bins: Vec<usize> = (0..self.bins)
            .filter(|&i| analyzer.classify(self.bin_center_ps(i)) == Some(a))
            .collect();
        let b_bins: Vec<usize> = (0..self.bins)
            .filter(|&j| analyzer.classify(self.bin_center_ps(j)) == Some(b))
            .collect();
        a_bins
            .iter()
            .flat_map(|&i| b_bins.iter().map(move |&j| (i, j)))
            .map(|(i, j)| self.get(i, j))
            .sum()
    }

    /// Plot-ready CSV with columns `bin_a_ps,bin_b_ps,count` (bin lower edges).
    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.counts.len() * 16);
        out.push_str("bin_a_ps,bin_b_ps,count\n");
        let res = u64::from(self.resolution_ps);
        for i in 0..self.bins {
            for j in 0..self.bins {
                out.push_str(&format!("{},{},{}\n", i as u64 * res, j as u64 * res, self.get(i, j)));
            }
        }
        out
    }
}

fn check_headers(a: &TagHeader, b: &TagHeader) -> Result<(), TagError> {
    if a.sync_rate_mhz != b.sync_rate_mhz || a.resolution_ps != b.resolution_ps {
        return Err(TagError::HeaderMismatch(format!(
            "sync {} vs {} mHz, resolution {} vs {} ps",
            a.sync_rate_mhz, b.sync_rate_mhz, a.resolution_ps, b.resolution_ps
        )));
    }
    Ok(())
}

/// Group consecutive records by sync index.
fn by_pulse(records: impl Iterator<Item = TagRecord>) -> impl Iterator<Item = (u64, Vec<TagRecord>)> {
    let mut records = records.peekable();
    std::iter::from_fn(move || {
        let first = records.next()?;
        let sync = first.sync_index();
        let mut group = vec![first];
        while let Some(r) = records.next_if(|r| r.sync_index() == sync) {
            group.push(r);
        }
        Some((sync, group))
    })
}

/// Party A events are taken from `a`, party B events from `b`; the same
/// combined stream may be passed for both.
pub fn histogram2d(a: &TagStream, b: &TagStream) -> Result<Histogram2D, TagError> {
    check_headers(a.header(), b.header())?;
    let mut hist = Histogram2D::new(a.header());
    accumulate_histogram(&mut hist, a.records(), b.records());
    Ok(hist)
}

pub(crate) fn accumulate_histogram(hist: &mut Histogram2D, a: &[TagRecord], b: &[TagRecord]) {
    let mut pa = by_pulse(a.iter().copied().filter(|r| r.party() == Party::A)).peekable();
    let mut pb = by_pulse(b.iter().copied().filter(|r| r.party() == Party::B)).peekable();
    while let (Some((sa, _)), Some((sb, _))) = (pa.peek(), pb.peek()) {
        if sa < sb {
            pa.next();
        } else if sb < sa {
            pb.next();
        } else {
            let (_, ga) = pa.next().expect("peeked");
            let (_, gb) = pb.next().expect("peeked");
            for ra in &ga {
                for rb in &gb {
                    hist.bump(usize::from(ra.offset_units()), usize::from(rb.offset_units()));
                }
            }
        }
    }
}

/// Per-party offset histogram, optionally restricted to given sync indices.
pub fn offset_histogram(stream: &TagStream, party: Party, only: Option<&[u64]>) -> Vec<u64> {
    let mut out = vec![0; stream.header().bins_per_period()];
    for r in stream.party(party) {
        if only.is_none_or(|s| s.binary_search(&r.sync_index()).is_ok()) {
            out[usize::from(r.offset_units())] += 1;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinnedEvent {
    pub party: Party,
    pub sync_index: u64,
    pub outcome: PolarizationOutcome,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Binned {
    /// In stream order.
    pub events: Vec<BinnedEvent>,
    /// Events outside every slot, per party (A, B).
    pub discarded: [u64; 2],
}

impl Binned {
    pub fn party(&self, party: Party) -> Vec<BinnedEvent> {
        self.events.iter().copied().filter(|e| e.party == party).collect()
    }
}

/// Assign each event to the slot containing its bin center.
pub fn bin_outcomes(stream: &TagStream, analyzer: &AnalyzerMap) -> Result<Binned, TagError> {
    analyzer.validate(None)?;
    Ok(bin_records(stream.records(), analyzer))
}

pub(crate) fn bin_records(records: &[TagRecord], analyzer: &AnalyzerMap) -> Binned {
    let mut out = Binned::default();
    for r in records {
        match analyzer.classify(r.offset_ps()) {
            Some(outcome) => out.events.push(BinnedEvent {
                party: r.party(),
                sync_index: r.sync_index(),
                outcome,
            }),
            None => out.discarded[r.party().bits() as usize] += 1,
        }
    }
    out
}

/// Coincidence counts `C[alice][bob]`, outcomes in H, V, D, A order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CoincidenceTable {
    pub counts: [[u64; 4]; 4],
    /// Pulses dropped because a party had more than one binned event.
    pub ambiguous_pulses: u64,
}

impl CoincidenceTable {
    pub fn get(&self, a: PolarizationOutcome, b: PolarizationOutcome) -> u64 {
        self.counts[a.index()][b.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn add(&mut self, other: &CoincidenceTable) {
        for i in 0..4 {
            for j in 0..4 {
                self.counts[i][j] += other.counts[i][j];
            }
        }
        self.ambiguous_pulses += other.ambiguous_pulses;
    }
}

fn pulses(events: &[BinnedEvent], party: Party) -> impl Iterator<Item = (u64, Vec<PolarizationOutcome>)> + '_ {
    let mut it = events.iter().filter(move |e| e.party == party).peekable();
    std::iter::from_fn(move || {
        let first = it.next()?;
        let mut group = vec![first.outcome];
        while let Some(e) = it.next_if(|e| e.sync_index == first.sync_index) {
            group.push(e.outcome);
        }
        Some((first.sync_index, group))
    })
}

/// Pair Alice's and Bob's binned events that share a sync index. A pulse in
/// which either party has several binned events is dropped.
pub fn coincidences(a: &[BinnedEvent], b: &[BinnedEvent]) -> CoincidenceTable {
    let mut table = CoincidenceTable::default();
    let mut pa = pulses(a, Party::A).peekable();
    let mut pb = pulses(b, Party::B).peekable();
    while let (Some((sa, _)), Some((sb, _))) = (pa.peek(), pb.peek()) {
        if sa < sb {
            pa.next();
        } else if sb < sa {
            pb.next();
        } else {
            let (_, ga) = pa.next().expect("peeked");
            let (_, gb) = pb.next().expect("peeked");
            if ga.len() == 1 && gb.len() == 1 {
                table.counts[ga[0].index()][gb[0].index()] += 1;
            } else {
                table.ambiguous_pulses += 1;
            }
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::state::PolarizationOutcome::*;

    fn ev(party: Party, sync_index: u64, outcome: PolarizationOutcome) -> BinnedEvent {
        BinnedEvent {
            party,
            sync_index,
            outcome,
        }
    }

    #[test]
    fn disjoint_pulses_give_empty_table() {
        let a = [ev(Party::A, 1, H), ev(Party::A, 3, V)];
        let b = [ev(Party::B, 2, H), ev(Party::B, 4, V)];
        assert_eq!(coincidences(&a, &b).total(), 0);
    }

    #[test]
    fn interleaved_fixture() {
        // sync: 1 (A:H, B:V) -> C[H][V]
        //       2 (A:D only)
        //       3 (A:D, B:D) -> C[D][D]
        //       5 (A:A, A:H, B:A) -> ambiguous
        //       6 (B:H only)
        let a = [
            ev(Party::A, 1, H),
            ev(Party::A, 2, D),
            ev(Party::A, 3, D),
            ev(Party::A, 5, A),
            ev(Party::A, 5, H),
        ];
        let b = [ev(Party::B, 1, V), ev(Party::B, 3, D), ev(Party::B, 5, A), ev(Party::B, 6, H)];
        let t = coincidences(&a, &b);
        assert_eq!(t.get(H, V), 1);
        assert_eq!(t.get(D, D), 1);
        assert_eq!(t.total(), 2);
        assert_eq!(t.ambiguous_pulses, 1);
        assert!(t.total() <= a.len().min(b.len()) as u64);
    }

    #[test]
    fn histogram_counts_same_pulse_pairs() {
        let h = TagHeader::from_rate_hz(81.6e6);
        let recs = vec![
            TagRecord::new(Party::A, 1, 10).unwrap(),
            TagRecord::new(Party::B, 1, 20).unwrap(),
            TagRecord::new(Party::A, 1, 50).unwrap(),
            TagRecord::new(Party::B, 2, 20).unwrap(),
            TagRecord::new(Party::A, 3, 30).unwrap(),
        ];
        let s = TagStream::new(h, recs).unwrap();
        let hist = histogram2d(&s, &s).unwrap();
        assert_eq!(hist.total, 2);
        assert_eq!(hist.get(10, 20), 1);
        assert_eq!(hist.get(50, 20), 1);

        let other = TagStream::empty(TagHeader::from_rate_hz(80e6));
        assert!(matches!(histogram2d(&s, &other), Err(TagError::HeaderMismatch(_))));
    }

    #[test]
    fn no_shared_pulses_gives_zero_histogram() {
        let h = TagHeader::from_rate_hz(81.6e6);
        let a = TagStream::new(h, vec![TagRecord::new(Party::A, 1, 10).unwrap()]).unwrap();
        let b = TagStream::new(h, vec![TagRecord::new(Party::B, 2, 10).unwrap()]).unwrap();
        let hist = histogram2d(&a, &b).unwrap();
        assert_eq!(hist.total, 0);
        assert!(hist.counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn binning_discards_out_of_slot_events() {
        let h = TagHeader::from_rate_hz(81.6e6);
        let m = AnalyzerMap::default();
        // H center 2000 ps -> unit 31 (center 2016); V center 4500 -> unit 70; gap at 3250 -> unit 50
        let recs = vec![
            TagRecord::new(Party::A, 0, 31).unwrap(),
            TagRecord::new(Party::A, 0, 50).unwrap(),
            TagRecord::new(Party::B, 0, 70).unwrap(),
        ];
        let binned = bin_outcomes(&TagStream::new(h, recs).unwrap(), &m).unwrap();
        assert_eq!(binned.events.len(), 2);
        assert_eq!(binned.events[0].outcome, H);
        assert_eq!(binned.events[1].outcome, V);
        assert_eq!(binned.discarded, [1, 0]);

        let overlapping = AnalyzerMap {
            slot_width_ns: 2.6,
            ..m
        };
        let empty = TagStream::empty(h);
        assert!(matches!(bin_outcomes(&empty, &overlapping), Err(TagError::Analyzer(_))));
    }
}

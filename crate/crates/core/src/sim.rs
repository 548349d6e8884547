//! Monte Carlo detector-event engine for one entangled link.
//!
//! Each pump pulse emits Poisson(μ) pairs. A pair's joint polarization
//! outcome is drawn from the passive-analyzer distribution of the source
//! state, each photon survives its arm with probability `10^(−loss/10)`,
//! and a surviving photon clicks at its outcome's slot center plus Gaussian
//! jitter. Dark counts are a Poisson process uniform in time. Dead time is a
//! non-paralyzable per-detector filter applied last.
//!
//! Pulses are processed in blocks of [`BLOCK_PULSES`]. Only pulses that hold
//! at least one eventually-detected photon are visited: the gaps between them
//! are geometric, and the pair count in a visited pulse is zero-truncated
//! Poisson. Each block draws from its own substream (see [`crate::rng`]).

use std::ops::Range;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Geometric, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::{AnalyzerError, AnalyzerMap};
use crate::rng::SeedSpec;
use crate::state::{PolarizationOutcome, TwoQubitState};
use crate::timetag::{Party, TagError, TagHeader, TagRecord, TagStream, RESOLUTION_PS};

/// Pulses per random-substream block (≈0.2 s at 81.6 MHz).
pub const BLOCK_PULSES: u64 = 1 << 24;

pub const DEFAULT_REP_RATE_HZ: f64 = 81.6e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid simulation parameter: {0}")]
    Config(String),
    #[error(transparent)]
    Analyzer(#[from] AnalyzerError),
    #[error(transparent)]
    Tag(#[from] TagError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceParams {
    pub rep_rate_hz: f64,
    /// Mean pairs per pulse in one channel pair.
    pub mu: f64,
    pub state: TwoQubitState,
}

impl SourceParams {
    pub fn new(mu: f64, state: TwoQubitState) -> Self {
        SourceParams {
            rep_rate_hz: DEFAULT_REP_RATE_HZ,
            mu,
            state,
        }
    }
}

/// One photon's path to its detector. Losses are lumped, detector
/// efficiency included.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmParams {
    pub loss_db: f64,
    pub dark_rate_hz: f64,
    pub dead_time_s: f64,
    pub jitter_sigma_s: f64,
    /// Static rotation of this party's analyzer basis, radians.
    pub misalignment_rad: f64,
}

impl Default for ArmParams {
    fn default() -> Self {
        ArmParams {
            loss_db: 0.0,
            dark_rate_hz: 0.0,
            dead_time_s: 0.0,
            jitter_sigma_s: 100e-12,
            misalignment_rad: 0.0,
        }
    }
}

impl ArmParams {
    pub fn with_loss(loss_db: f64) -> Self {
        ArmParams {
            loss_db,
            ..Self::default()
        }
    }

    pub fn transmission(&self) -> f64 {
        10f64.powf(-self.loss_db / 10.0)
    }
}

/// Sum of loss contributions in dB (fibre, filters, splices, detector).
pub fn compose_loss_db(parts: &[f64]) -> f64 {
    parts.iter().sum()
}

/// Everything needed to simulate one link.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkPhysics {
    pub source: SourceParams,
    pub alice: ArmParams,
    pub bob: ArmParams,
    pub analyzer: AnalyzerMap,
}

impl LinkPhysics {
    pub fn header(&self) -> TagHeader {
        TagHeader::from_rate_hz(self.source.rep_rate_hz)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        let s = &self.source;
        if !(s.rep_rate_hz > 0.0 && s.rep_rate_hz.is_finite()) {
            return bad(format!("rep_rate_hz must be positive, got {}", s.rep_rate_hz));
        }
        if !(s.mu >= 0.0 && s.mu.is_finite()) {
            return bad(format!("mu must be non-negative, got {}", s.mu));
        }
        for (name, arm) in [("alice", &self.alice), ("bob", &self.bob)] {
            for (field, v) in [
                ("loss_db", arm.loss_db),
                ("dark_rate_hz", arm.dark_rate_hz),
                ("dead_time_s", arm.dead_time_s),
                ("jitter_sigma_s", arm.jitter_sigma_s),
            ] {
                if !(v >= 0.0 && v.is_finite()) {
                    return bad(format!("{name}.{field} must be non-negative, got {v}"));
                }
            }
            if !arm.misalignment_rad.is_finite() {
                return bad(format!("{name}.misalignment_rad must be finite"));
            }
        }
        self.analyzer.validate(Some(self.header().sync_period_ps() / 1e3))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionEvent {
    pub sync_index: u64,
    /// Offset after the sync edge, ps, in `[0, period)`.
    pub offset_ps: f32,
    pub party: Party,
    /// `None` for dark counts.
    pub outcome: Option<PolarizationOutcome>,
}

impl DetectionEvent {
    fn sort_key(&self) -> (u64, u32, Party, u8) {
        let o = self.outcome.map_or(u8::MAX, |o| o.index() as u8);
        (self.sync_index, self.offset_ps.to_bits(), self.party, o)
    }
}

pub fn pulses_for(duration_s: f64, rep_rate_hz: f64) -> u64 {
    (duration_s * rep_rate_hz).round() as u64
}

struct Sampler {
    period_ps: f64,
    /// Mean per pulse of pairs with at least one detected photon.
    lambda: f64,
    gap: Option<Geometric>,
    /// Given a pair has a detected photon: P(both), P(A only); B only otherwise.
    p_both: f64,
    p_a_only: f64,
    joint: WeightedIndex<f64>,
    centers_ps: [f64; 4],
    jitter: [Normal<f64>; 2],
    darks_per_block: [Option<Poisson<f64>>; 2],
}

impl Sampler {
    fn new(phys: &LinkPhysics) -> Result<Self, SimError> {
        let period_ps = phys.header().sync_period_ps();
        let (ea, eb) = (phys.alice.transmission(), phys.bob.transmission());
        let q = 1.0 - (1.0 - ea) * (1.0 - eb);
        let lambda = phys.source.mu * q;
        let p_nonempty = -(-lambda).exp_m1();
        let gap = if p_nonempty > 0.0 {
            Some(Geometric::new(p_nonempty).map_err(|e| SimError::Config(e.to_string()))?)
        } else {
            None
        };
        let (p_both, p_a_only) = if q > 0.0 {
            (ea * eb / q, ea * (1.0 - eb) / q)
        } else {
            (0.0, 0.0)
        };
        let dist = phys
            .source
            .state
            .joint_distribution(phys.alice.misalignment_rad, phys.bob.misalignment_rad);
        let joint = WeightedIndex::new(dist.iter().flatten().copied())
            .map_err(|e| SimError::Config(format!("joint distribution: {e}")))?;
        let centers_ps = PolarizationOutcome::ALL.map(|o| phys.analyzer.center_ps(o));
        let normal = |sigma_s: f64| {
            Normal::new(0.0, sigma_s * 1e12).map_err(|e| SimError::Config(e.to_string()))
        };
        let block_s = BLOCK_PULSES as f64 / phys.source.rep_rate_hz;
        let darks = |rate: f64| {
            let mean = rate * block_s;
            if mean > 0.0 {
                Poisson::new(mean).map(Some).map_err(|e| SimError::Config(e.to_string()))
            } else {
                Ok(None)
            }
        };
        Ok(Sampler {
            period_ps,
            lambda,
            gap,
            p_both,
            p_a_only,
            joint,
            centers_ps,
            jitter: [normal(phys.alice.jitter_sigma_s)?, normal(phys.bob.jitter_sigma_s)?],
            darks_per_block: [darks(phys.alice.dark_rate_hz)?, darks(phys.bob.dark_rate_hz)?],
        })
    }

    /// Zero-truncated Poisson by CDF inversion.
    fn pairs_in_nonempty_pulse<R: Rng>(&self, rng: &mut R) -> u32 {
        let u: f64 = rng.random();
        let norm = -(-self.lambda).exp_m1();
        let mut k = 1u32;
        let mut p = self.lambda * (-self.lambda).exp() / norm;
        let mut cdf = p;
        while u > cdf && k < 10_000 {
            k += 1;
            p *= self.lambda / f64::from(k);
            cdf += p;
            if p == 0.0 {
                break;
            }
        }
        k
    }

    fn push(&self, out: &mut Vec<DetectionEvent>, range: &Range<u64>, pulse: u64, offset_ps: f64, party: Party, outcome: Option<PolarizationOutcome>) {
        if !range.contains(&pulse) {
            return;
        }
        let shift = (offset_ps / self.period_ps).floor();
        let sync = pulse as i128 + shift as i128;
        if sync < 0 {
            return;
        }
        let offset = (offset_ps - shift * self.period_ps).clamp(0.0, self.period_ps);
        let mut offset32 = offset as f32;
        if f64::from(offset32) >= self.period_ps {
            offset32 = f32::from_bits(offset32.to_bits() - 1);
        }
        out.push(DetectionEvent {
            sync_index: sync as u64,
            offset_ps: offset32,
            party,
            outcome,
        });
    }

    fn block(&self, seed: &SeedSpec, block: u64, range: &Range<u64>) -> Vec<DetectionEvent> {
        let mut rng = seed.block_rng(block);
        let start = block * BLOCK_PULSES;
        let end = start + BLOCK_PULSES;
        let mut out = Vec::new();

        if let Some(gap) = &self.gap {
            let mut pulse = start + gap.sample(&mut rng);
            while pulse < end {
                for _ in 0..self.pairs_in_nonempty_pulse(&mut rng) {
                    let u: f64 = rng.random();
                    let idx = self.joint.sample(&mut rng);
                    let (a, b) = (idx / 4, idx % 4);
                    let (det_a, det_b) = if u < self.p_both {
                        (true, true)
                    } else if u < self.p_both + self.p_a_only {
                        (true, false)
                    } else {
                        (false, true)
                    };
                    if det_a {
                        let t = self.centers_ps[a] + self.jitter[0].sample(&mut rng);
                        self.push(&mut out, range, pulse, t, Party::A, PolarizationOutcome::from_index(a));
                    }
                    if det_b {
                        let t = self.centers_ps[b] + self.jitter[1].sample(&mut rng);
                        self.push(&mut out, range, pulse, t, Party::B, PolarizationOutcome::from_index(b));
                    }
                }
                pulse = pulse.saturating_add(1).saturating_add(gap.sample(&mut rng));
            }
        }

        for (party, darks) in [Party::A, Party::B].into_iter().zip(&self.darks_per_block) {
            if let Some(darks) = darks {
                let n = darks.sample(&mut rng) as u64;
                for _ in 0..n {
                    let pulse = rng.random_range(start..end);
                    let t = rng.random::<f64>() * self.period_ps;
                    self.push(&mut out, range, pulse, t, party, None);
                }
            }
        }
        out
    }
}

/// Drop events closer than the detector dead time to the previous accepted
/// event on the same detector. `events` must be time-sorted.
pub fn apply_dead_time(events: &mut Vec<DetectionEvent>, period_ps: f64, dead_ps: [f64; 2]) {
    if dead_ps.iter().all(|&d| d <= 0.0) {
        return;
    }
    let mut last: [Option<(u64, f32)>; 2] = [None, None];
    events.retain(|e| {
        let p = e.party.bits() as usize;
        let keep = match last[p] {
            None => true,
            Some((sync, off)) => {
                let dt = (e.sync_index - sync) as f64 * period_ps + f64::from(e.offset_ps) - f64::from(off);
                dt >= dead_ps[p]
            }
        };
        if keep {
            last[p] = Some((e.sync_index, e.offset_ps));
        }
        keep
    });
}

/// Events emitted by pulses in `pulses`, sorted by (sync, offset).
pub fn simulate_events(
    phys: &LinkPhysics,
    pulses: Range<u64>,
    seed: SeedSpec,
) -> Result<Vec<DetectionEvent>, SimError> {
    phys.validate()?;
    let sampler = Sampler::new(phys)?;
    if pulses.is_empty() {
        return Ok(Vec::new());
    }
    let first = pulses.start / BLOCK_PULSES;
    let last = pulses.end.div_ceil(BLOCK_PULSES);
    let blocks: Vec<Vec<DetectionEvent>> = (first..last)
        .into_par_iter()
        .map(|b| sampler.block(&seed, b, &pulses))
        .collect();
    let mut events: Vec<DetectionEvent> = blocks.into_iter().flatten().collect();
    events.par_sort_unstable_by_key(DetectionEvent::sort_key);
    apply_dead_time(
        &mut events,
        sampler.period_ps,
        [phys.alice.dead_time_s * 1e12, phys.bob.dead_time_s * 1e12],
    );
    Ok(events)
}

/// Quantize sorted events into a tag stream.
pub fn events_to_stream(header: TagHeader, events: &[DetectionEvent]) -> Result<TagStream, TagError> {
    let res = f64::from(RESOLUTION_PS);
    let records = events
        .iter()
        .map(|e| {
            let units = (f64::from(e.offset_ps) / res).floor() as u16;
            TagRecord::new(e.party, e.sync_index, units)
        })
        .collect::<Result<Vec<_>, _>>()?;
    TagStream::new(header, records)
}

/// Simulate `duration_s` of acquisition into a tag stream.
pub fn simulate_run(phys: &LinkPhysics, duration_s: f64, seed: SeedSpec) -> Result<TagStream, SimError> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(SimError::Config(format!("duration must be positive, got {duration_s}")));
    }
    let n = pulses_for(duration_s, phys.source.rep_rate_hz);
    let events = simulate_events(phys, 0..n, seed)?;
    Ok(events_to_stream(phys.header(), &events)?)
}

/// Closed-form expectations for the Monte Carlo (dead time ignored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticRates {
    pub singles_a_hz: f64,
    pub singles_b_hz: f64,
    /// Genuine pair coincidences, μ·R·η_A·η_B.
    pub coincidences_hz: f64,
    /// Same-pulse event pairs not from one photon pair, singles_A·singles_B/R.
    pub accidentals_hz: f64,
    /// Expected binned coincidence rates `[alice][bob]` (genuine + accidental,
    /// with jitter losses outside the slots).
    pub table_hz: [[f64; 4]; 4],
    pub sifted_rate_bps: f64,
    pub e_h: f64,
    pub e_d: f64,
}

impl AnalyticRates {
    /// Expected count of same-pulse (A, B) event pairs per second.
    pub fn pair_events_hz(&self) -> f64 {
        self.coincidences_hz + self.accidentals_hz
    }
}

/// Probability a Gaussian-jittered click stays inside its slot.
fn slot_capture(width_ns: f64, sigma_s: f64) -> f64 {
    if sigma_s <= 0.0 {
        return 1.0;
    }
    libm::erf(width_ns * 1e-9 / 2.0 / (sigma_s * std::f64::consts::SQRT_2))
}

pub fn analytic_rates(phys: &LinkPhysics) -> AnalyticRates {
    let r = phys.source.rep_rate_hz;
    let mu = phys.source.mu;
    let (ea, eb) = (phys.alice.transmission(), phys.bob.transmission());
    let singles_a_hz = mu * r * ea + phys.alice.dark_rate_hz;
    let singles_b_hz = mu * r * eb + phys.bob.dark_rate_hz;
    let coincidences_hz = mu * r * ea * eb;
    let accidentals_hz = singles_a_hz * singles_b_hz / r;

    let dist = phys
        .source
        .state
        .joint_distribution(phys.alice.misalignment_rad, phys.bob.misalignment_rad);
    let w = phys.analyzer.slot_width_ns;
    let period_ns = phys.header().sync_period_ps() / 1e3;
    let cap_a = slot_capture(w, phys.alice.jitter_sigma_s);
    let cap_b = slot_capture(w, phys.bob.jitter_sigma_s);
    let dark_in_slot = |rate: f64| rate / r * w / period_ns;
    let mut mean_a = [0.0; 4];
    let mut mean_b = [0.0; 4];
    for i in 0..4 {
        let marg_a: f64 = dist[i].iter().sum();
        let marg_b: f64 = dist.iter().map(|row| row[i]).sum();
        mean_a[i] = mu * ea * marg_a * cap_a + dark_in_slot(phys.alice.dark_rate_hz);
        mean_b[i] = mu * eb * marg_b * cap_b + dark_in_slot(phys.bob.dark_rate_hz);
    }
    let mut table_hz = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            let genuine = mu * ea * eb * dist[i][j] * cap_a * cap_b;
            table_hz[i][j] = r * (genuine + mean_a[i] * mean_b[j]);
        }
    }
    let t = &table_hz;
    let sifted_rate_bps = t[0][1] + t[1][0] + t[2][2] + t[3][3];
    let ratio = |num: f64, den: f64| if den > 0.0 { num / den } else { 0.0 };
    let e_h = ratio(t[0][0] + t[1][1], t[0][0] + t[1][1] + t[0][1] + t[1][0]);
    let e_d = ratio(t[2][3] + t[3][2], t[2][2] + t[3][3] + t[2][3] + t[3][2]);
    AnalyticRates {
        singles_a_hz,
        singles_b_hz,
        coincidences_hz,
        accidentals_hz,
        table_hz,
        sifted_rate_bps,
        e_h,
        e_d,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn reference_link() -> LinkPhysics {
        LinkPhysics {
            source: SourceParams::new(8.9e-3, TwoQubitState::colored_noise(0.978).unwrap()),
            alice: ArmParams::with_loss(19.4),
            bob: ArmParams::with_loss(19.5),
            analyzer: AnalyzerMap::default(),
        }
    }

    #[test]
    fn analytic_examples() {
        let phys = reference_link();
        let r = analytic_rates(&phys);
        // 8.9e-3 * 81.6e6 * 10^-1.94
        assert_relative_eq!(r.singles_a_hz, 8.3e3, max_relative = 0.01);
        // 726240 * 10^-3.89
        assert_relative_eq!(r.coincidences_hz, 726_240.0 * 10f64.powf(-3.89), max_relative = 1e-12);
        assert_relative_eq!(r.coincidences_hz, 94.0, max_relative = 0.01);

        let lossless = LinkPhysics {
            alice: ArmParams::with_loss(0.0),
            bob: ArmParams::with_loss(0.0),
            ..phys
        };
        assert_relative_eq!(analytic_rates(&lossless).coincidences_hz, 8.9e-3 * 81.6e6, max_relative = 1e-12);
    }

    #[test]
    fn no_pairs_no_darks_gives_empty_stream() {
        let mut phys = reference_link();
        phys.source.mu = 0.0;
        let s = simulate_run(&phys, 2.0, SeedSpec::new(1)).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut phys = reference_link();
        phys.alice.loss_db = -1.0;
        assert!(matches!(phys.validate(), Err(SimError::Config(_))));
        let mut phys = reference_link();
        phys.source.rep_rate_hz = 0.0;
        assert!(phys.validate().is_err());
        assert!(simulate_run(&reference_link(), 0.0, SeedSpec::new(1)).is_err());
    }

    #[test]
    fn dead_time_filter() {
        let ev = |sync, off: f32| DetectionEvent {
            sync_index: sync,
            offset_ps: off,
            party: Party::A,
            outcome: None,
        };
        let mut events = vec![ev(0, 100.0), ev(0, 600.0), ev(1, 50.0), ev(3, 0.0)];
        apply_dead_time(&mut events, 1000.0, [800.0, 0.0]);
        assert_eq!(events, vec![ev(0, 100.0), ev(1, 50.0), ev(3, 0.0)]);
    }

    #[test]
    fn loss_composition() {
        assert_eq!(compose_loss_db(&[4.0, 1.5, 7.0]), 12.5);
        assert_relative_eq!(ArmParams::with_loss(10.0).transmission(), 0.1, max_relative = 1e-12);
    }

    #[test]
    fn ztp_mean_matches() {
        use rand::SeedableRng;
        let mut phys = reference_link();
        phys.source.mu = 0.8;
        phys.alice.loss_db = 0.0;
        let s = Sampler::new(&phys).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 200_000;
        let sum: u64 = (0..n).map(|_| u64::from(s.pairs_in_nonempty_pulse(&mut rng))).sum();
        let lambda: f64 = 0.8;
        let expected = lambda / (1.0 - (-lambda).exp());
        assert_relative_eq!(sum as f64 / n as f64, expected, max_relative = 0.01);
    }
}

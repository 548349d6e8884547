//! ITU DWDM grid arithmetic and carving of a broadband pair source into
//! frequency-conjugate channel pairs.
//!
//! Frequencies are held as integer hertz so that grid arithmetic is exact.
//! Channel centers follow `190 THz + index * step`, extrapolated to any
//! index (the ITU table itself stops at 1520 nm; see [`PlanOptions::strict_itu`]).

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Speed of light in nm·THz.
pub const SPEED_OF_LIGHT_NM_THZ: f64 = 299_792.458;

/// Grid anchor, 190 THz.
pub const GRID_ANCHOR: Frequency = Frequency(190_000_000_000_000);

/// Shortest wavelength for which the ITU grid defines DWDM channels.
pub const ITU_MIN_WAVELENGTH_NM: f64 = 1520.0;

const HZ_PER_GHZ: u64 = 1_000_000_000;
const HZ_PER_THZ: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("wavelength must be positive, got {0} nm")]
    NonPositiveWavelength(f64),
    #[error("frequency must be positive, got {0} THz")]
    NonPositiveFrequency(f64),
    #[error("pump {pump_thz} THz must exceed channel frequency {channel_thz} THz")]
    PumpBelowChannel { pump_thz: f64, channel_thz: f64 },
    #[error("unsupported channel spacing {0} GHz (expected 50, 100 or 200)")]
    InvalidSpacing(u32),
    #[error("channel index {0} is odd; 200-GHz channels sit on even anchor indices")]
    OddIndex(i64),
    #[error("loss rate must be positive, got {0} dB/km")]
    NonPositiveLossRate(f64),
    #[error("loss must be non-negative, got {0} dB")]
    NegativeLoss(f64),
    #[error("conjugate tolerance must be non-negative, got {0} GHz")]
    NegativeTolerance(f64),
}

/// Optical frequency, stored as integer hertz.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Frequency(u64);

impl Frequency {
    pub fn from_hz(hz: u64) -> Result<Self, GridError> {
        if hz == 0 {
            return Err(GridError::NonPositiveFrequency(0.0));
        }
        Ok(Frequency(hz))
    }

    pub fn from_thz(thz: f64) -> Result<Self, GridError> {
        if !(thz > 0.0) || !thz.is_finite() {
            return Err(GridError::NonPositiveFrequency(thz));
        }
        Self::from_hz((thz * HZ_PER_THZ).round() as u64)
    }

    pub fn hz(self) -> u64 {
        self.0
    }

    pub fn ghz(self) -> f64 {
        self.0 as f64 / HZ_PER_GHZ as f64
    }

    pub fn thz(self) -> f64 {
        self.0 as f64 / HZ_PER_THZ
    }

    pub fn wavelength_nm(self) -> f64 {
        frequency_to_wavelength(self)
    }

    /// Signed difference `self - other` in GHz.
    pub fn offset_ghz(self, other: Frequency) -> f64 {
        (self.0 as i128 - other.0 as i128) as f64 / HZ_PER_GHZ as f64
    }
}

impl fmt::Display for Frequency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} THz", self.thz())
    }
}

/// λ = c/ν.
pub fn wavelength_to_frequency(wavelength_nm: f64) -> Result<Frequency, GridError> {
    if !(wavelength_nm > 0.0) || !wavelength_nm.is_finite() {
        return Err(GridError::NonPositiveWavelength(wavelength_nm));
    }
    Frequency::from_thz(SPEED_OF_LIGHT_NM_THZ / wavelength_nm)
}

pub fn frequency_to_wavelength(freq: Frequency) -> f64 {
    SPEED_OF_LIGHT_NM_THZ / freq.thz()
}

/// Energy conservation: the partner of a photon at `channel` is at `pump - channel`.
pub fn conjugate_of(channel: Frequency, pump: Frequency) -> Result<Frequency, GridError> {
    if pump <= channel {
        return Err(GridError::PumpBelowChannel {
            pump_thz: pump.thz(),
            channel_thz: channel.thz(),
        });
    }
    Frequency::from_hz(pump.0 - channel.0)
}

/// Distance along the fibre that produces `loss_db` at `rate_db_per_km`.
pub fn loss_to_equivalent_km(loss_db: f64, rate_db_per_km: f64) -> Result<f64, GridError> {
    if !(rate_db_per_km > 0.0) {
        return Err(GridError::NonPositiveLossRate(rate_db_per_km));
    }
    if loss_db < 0.0 {
        return Err(GridError::NegativeLoss(loss_db));
    }
    Ok(loss_db / rate_db_per_km)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Spacing {
    Ghz50,
    Ghz100,
    Ghz200,
}

impl Spacing {
    pub fn ghz(self) -> u32 {
        match self {
            Spacing::Ghz50 => 50,
            Spacing::Ghz100 => 100,
            Spacing::Ghz200 => 200,
        }
    }

    fn hz(self) -> u64 {
        u64::from(self.ghz()) * HZ_PER_GHZ
    }

    /// Unit of [`GridChannel::index`]: 100 GHz, or 50 GHz on the 50-GHz grid.
    fn index_unit_hz(self) -> u64 {
        match self {
            Spacing::Ghz50 => 50 * HZ_PER_GHZ,
            _ => 100 * HZ_PER_GHZ,
        }
    }

    fn index_stride(self) -> i64 {
        match self {
            Spacing::Ghz200 => 2,
            _ => 1,
        }
    }
}

impl TryFrom<u32> for Spacing {
    type Error = GridError;

    fn try_from(ghz: u32) -> Result<Self, Self::Error> {
        match ghz {
            50 => Ok(Spacing::Ghz50),
            100 => Ok(Spacing::Ghz100),
            200 => Ok(Spacing::Ghz200),
            other => Err(GridError::InvalidSpacing(other)),
        }
    }
}

impl From<Spacing> for u32 {
    fn from(s: Spacing) -> u32 {
        s.ghz()
    }
}

/// A channel on the DWDM grid.
///
/// `index` counts 100-GHz steps from the 190-THz anchor (even for the 200-GHz
/// grid); on the 50-GHz grid it counts 50-GHz steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridChannel {
    pub index: i64,
    pub center: Frequency,
    pub spacing: Spacing,
}

impl GridChannel {
    pub fn new(index: i64, spacing: Spacing) -> Result<Self, GridError> {
        if spacing == Spacing::Ghz200 && index % 2 != 0 {
            return Err(GridError::OddIndex(index));
        }
        let hz = GRID_ANCHOR.0 as i128 + index as i128 * spacing.index_unit_hz() as i128;
        if hz <= 0 {
            return Err(GridError::NonPositiveFrequency(hz as f64 / HZ_PER_THZ));
        }
        Ok(GridChannel {
            index,
            center: Frequency(hz as u64),
            spacing,
        })
    }

    /// Grid channel whose center is closest to `freq` (ties go to the lower channel).
    pub fn nearest(freq: Frequency, spacing: Spacing) -> Result<Self, GridError> {
        let step = spacing.hz() as i128;
        let rel = freq.0 as i128 - GRID_ANCHOR.0 as i128;
        let below = rel.div_euclid(step);
        let k = if 2 * (rel - below * step) > step { below + 1 } else { below };
        Self::new(k as i64 * spacing.index_stride(), spacing)
    }

    pub fn wavelength_nm(&self) -> f64 {
        self.center.wavelength_nm()
    }
}

/// Two grid channels whose frequencies sum to the pump frequency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConjugatePair {
    pub id: usize,
    /// Higher-frequency member.
    pub signal: GridChannel,
    pub idler: GridChannel,
    /// `|ν_signal − ν_pump/2|` in GHz.
    pub detuning_ghz: f64,
}

impl ConjugatePair {
    /// `ν_signal + ν_idler − ν_pump` in GHz.
    pub fn conjugacy_error_ghz(&self, pump: Frequency) -> f64 {
        (self.signal.center.0 as i128 + self.idler.center.0 as i128 - pump.0 as i128) as f64
            / HZ_PER_GHZ as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelPlan {
    pub pump: Frequency,
    pub band_low: Frequency,
    pub band_high: Frequency,
    pub spacing: Spacing,
    pub conj_tolerance_ghz: f64,
    pub strict_itu: bool,
    /// Ordered by ascending detuning; `pairs[i].id == i`.
    pub pairs: Vec<ConjugatePair>,
}

impl ChannelPlan {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn pair(&self, id: usize) -> Option<&ConjugatePair> {
        self.pairs.get(id)
    }

    /// CSV with columns `pair_id,signal_nm,idler_nm,signal_thz,idler_thz,detuning_ghz`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair_id,signal_nm,idler_nm,signal_thz,idler_thz,detuning_ghz\n");
        for p in &self.pairs {
            out.push_str(&format!(
                "{},{:.3},{:.3},{:.3},{:.3},{:.1}\n",
                p.id,
                p.signal.wavelength_nm(),
                p.idler.wavelength_nm(),
                p.signal.center.thz(),
                p.idler.center.thz(),
                p.detuning_ghz
            ));
        }
        out
    }
}

/// Inputs to [`plan_channels`].
#[derive(Debug, Clone, PartialEq)]
pub struct PlanOptions {
    pub pump: Frequency,
    pub band_low: Frequency,
    pub band_high: Frequency,
    pub spacing: Spacing,
    /// Defaults to half the channel spacing.
    pub conj_tolerance_ghz: Option<f64>,
    /// Only use channels the ITU table defines (λ ≥ 1520 nm).
    pub strict_itu: bool,
}

impl PlanOptions {
    /// Band given as wavelength edges in nm (either order).
    pub fn from_wavelengths(
        pump_nm: f64,
        band_nm: (f64, f64),
        spacing: Spacing,
    ) -> Result<Self, GridError> {
        let a = wavelength_to_frequency(band_nm.0)?;
        let b = wavelength_to_frequency(band_nm.1)?;
        Ok(PlanOptions {
            pump: wavelength_to_frequency(pump_nm)?,
            band_low: a.min(b),
            band_high: a.max(b),
            spacing,
            conj_tolerance_ghz: None,
            strict_itu: false,
        })
    }

    pub fn tolerance_ghz(&self) -> f64 {
        self.conj_tolerance_ghz
            .unwrap_or(f64::from(self.spacing.ghz()) / 2.0)
    }
}

impl Default for PlanOptions {
    /// 777.45-nm pump, 1510–1600 nm band, 200-GHz grid.
    fn default() -> Self {
        PlanOptions::from_wavelengths(777.45, (1510.0, 1600.0), Spacing::Ghz200)
            .expect("default plan options are valid")
    }
}

/// Carve the source band into disjoint frequency-conjugate channel pairs.
///
/// All pairs share one conjugate sum `ν_s + ν_i`, chosen among the sums
/// within tolerance of the pump to maximise the pair count (then to minimise
/// the conjugacy error). With a single admissible sum every channel has a
/// unique partner, so the count is the largest the grid allows.
pub fn plan_channels(opts: &PlanOptions) -> Result<ChannelPlan, GridError> {
    let tol = opts.tolerance_ghz();
    if !(tol >= 0.0) {
        return Err(GridError::NegativeTolerance(tol));
    }
    let mut plan = ChannelPlan {
        pump: opts.pump,
        band_low: opts.band_low,
        band_high: opts.band_high,
        spacing: opts.spacing,
        conj_tolerance_ghz: tol,
        strict_itu: opts.strict_itu,
        pairs: Vec::new(),
    };

    let step = opts.spacing.hz() as i128;
    let anchor = GRID_ANCHOR.0 as i128;
    let pump = opts.pump.0 as i128;
    let mut high = opts.band_high.0 as i128;
    if opts.strict_itu {
        let itu_edge = wavelength_to_frequency(ITU_MIN_WAVELENGTH_NM)?.0 as i128;
        high = high.min(itu_edge);
    }
    let low = opts.band_low.0 as i128;
    if low >= high || !(low < pump - pump / 2 && pump / 2 < high) {
        return Ok(plan);
    }

    // Channel slots k with centers anchor + k*step inside [low, high].
    let k_min = (low - anchor + step - 1).div_euclid(step);
    let k_max = (high - anchor).div_euclid(step);
    if k_min > k_max {
        return Ok(plan);
    }

    // Admissible slot sums m: |2*anchor + m*step - pump| <= tol.
    let tol_hz = (tol * HZ_PER_GHZ as f64).floor() as i128;
    let m_lo = (pump - tol_hz - 2 * anchor + step - 1).div_euclid(step);
    let m_hi = (pump + tol_hz - 2 * anchor).div_euclid(step);

    let count_for = |m: i128| -> i128 {
        // k_s > m/2, k_s <= k_max, m - k_s >= k_min
        let first = m.div_euclid(2) + 1;
        let last = k_max.min(m - k_min);
        (last - first + 1).max(0)
    };
    let best = (m_lo..=m_hi).max_by(|&a, &b| {
        let err = |m: i128| (2 * anchor + m * step - pump).abs();
        count_for(a)
            .cmp(&count_for(b))
            .then(err(b).cmp(&err(a)))
            .then(b.cmp(&a))
    });
    let Some(m) = best else {
        return Ok(plan);
    };

    let stride = opts.spacing.index_stride() as i128;
    let half_pump = opts.pump.0 as f64 / 2.0;
    let first = m.div_euclid(2) + 1;
    let last = k_max.min(m - k_min);
    for ks in first..=last {
        let signal = GridChannel::new((ks * stride) as i64, opts.spacing)?;
        let idler = GridChannel::new(((m - ks) * stride) as i64, opts.spacing)?;
        let detuning_ghz = (signal.center.0 as f64 - half_pump).abs() / HZ_PER_GHZ as f64;
        plan.pairs.push(ConjugatePair {
            id: 0,
            signal,
            idler,
            detuning_ghz,
        });
    }
    plan.pairs.sort_by(|a, b| {
        a.detuning_ghz
            .total_cmp(&b.detuning_ghz)
            .then(a.signal.center.cmp(&b.signal.center))
    });
    for (id, p) in plan.pairs.iter_mut().enumerate() {
        p.id = id;
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn pump() -> Frequency {
        wavelength_to_frequency(777.45).unwrap()
    }

    #[test]
    fn wavelength_examples() {
        assert_abs_diff_eq!(wavelength_to_frequency(1554.94).unwrap().thz(), 192.800, epsilon = 5e-4);
        // 299792.458 / 777.45 = 385.609953...
        assert_abs_diff_eq!(pump().thz(), 385.610, epsilon = 5e-4);
        assert_eq!(wavelength_to_frequency(299_792.458).unwrap().hz(), 1_000_000_000_000);
        assert!(wavelength_to_frequency(0.0).is_err());
        assert!(wavelength_to_frequency(-3.0).is_err());
    }

    #[test]
    fn channel_28_is_on_grid() {
        let ch = GridChannel::new(28, Spacing::Ghz100).unwrap();
        assert_eq!(ch.center.hz(), 192_800_000_000_000);
        assert_abs_diff_eq!(ch.wavelength_nm(), 1554.94, epsilon = 0.01);
        assert!(GridChannel::new(29, Spacing::Ghz200).is_err());
    }

    #[test]
    fn conjugate_examples() {
        let c = conjugate_of(Frequency::from_thz(195.521).unwrap(), pump()).unwrap();
        assert_abs_diff_eq!(c.thz(), 190.089, epsilon = 1e-3);
        assert_abs_diff_eq!(c.wavelength_nm(), 1577.1, epsilon = 0.05);

        let half = Frequency::from_hz(pump().hz() / 2).unwrap();
        let c = conjugate_of(half, Frequency::from_hz(half.hz() * 2).unwrap()).unwrap();
        assert_eq!(c, half);

        let c = conjugate_of(Frequency::from_thz(193.004).unwrap(), pump()).unwrap();
        assert_abs_diff_eq!(c.thz(), 192.606, epsilon = 1e-3);
        let nearest = GridChannel::nearest(c, Spacing::Ghz200).unwrap();
        assert_abs_diff_eq!(nearest.wavelength_nm(), 1556.6, epsilon = 0.05);

        assert!(conjugate_of(pump(), pump()).is_err());
    }

    #[test]
    fn loss_equivalence() {
        assert_eq!(loss_to_equivalent_km(12.0, 0.2).unwrap(), 60.0);
        assert_eq!(loss_to_equivalent_km(0.0, 0.2).unwrap(), 0.0);
        assert_abs_diff_eq!(loss_to_equivalent_km(8.0, 0.2).unwrap(), 40.0, epsilon = 1e-12);
        assert!(loss_to_equivalent_km(1.0, 0.0).is_err());
        assert!(loss_to_equivalent_km(-1.0, 0.2).is_err());
    }

    #[test]
    fn default_band_yields_more_than_25_pairs() {
        let plan = plan_channels(&PlanOptions::default()).unwrap();
        assert!(plan.len() >= 25, "got {}", plan.len());
        for w in plan.pairs.windows(2) {
            assert!(w[0].detuning_ghz <= w[1].detuning_ghz);
        }
        let mut opts = PlanOptions::default();
        opts.spacing = Spacing::Ghz100;
        let finer = plan_channels(&opts).unwrap();
        assert!(finer.len() > plan.len());
    }

    #[test]
    fn nearest_channel_rounding() {
        let f = Frequency::from_thz(192.81).unwrap();
        assert_eq!(GridChannel::nearest(f, Spacing::Ghz100).unwrap().index, 28);
        let f = Frequency::from_thz(192.71).unwrap();
        assert_eq!(GridChannel::nearest(f, Spacing::Ghz200).unwrap().index, 28);
        let f = Frequency::from_thz(192.69).unwrap();
        assert_eq!(GridChannel::nearest(f, Spacing::Ghz200).unwrap().index, 26);
        let f = Frequency::from_thz(192.83).unwrap();
        assert_eq!(GridChannel::nearest(f, Spacing::Ghz50).unwrap().index, 57);
    }

    #[test]
    fn one_channel_band_has_no_pairs() {
        let mut opts = PlanOptions::default();
        opts.band_low = Frequency::from_thz(192.75).unwrap();
        opts.band_high = Frequency::from_thz(192.85).unwrap();
        assert!(plan_channels(&opts).unwrap().is_empty());
    }

    #[test]
    fn band_excluding_degenerate_point_is_empty() {
        let mut opts = PlanOptions::default();
        opts.band_low = Frequency::from_thz(194.0).unwrap();
        assert!(plan_channels(&opts).unwrap().is_empty());
    }

    #[test]
    fn strict_itu_drops_short_wavelengths() {
        let mut opts = PlanOptions::default();
        let loose = plan_channels(&opts).unwrap();
        opts.strict_itu = true;
        let strict = plan_channels(&opts).unwrap();
        assert!(strict.len() < loose.len());
        assert!(strict
            .pairs
            .iter()
            .all(|p| p.signal.wavelength_nm() >= ITU_MIN_WAVELENGTH_NM));
    }

    #[test]
    fn invalid_spacing_rejected() {
        assert_eq!(Spacing::try_from(150), Err(GridError::InvalidSpacing(150)));
    }
}

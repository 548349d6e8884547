//! BBM92 post-processing: sifting, QBER, secure key rate with 3σ finite-key
//! bounds, improvement projections and QBER time series.
//!
//! Outcome conventions follow Ψ⁺: H/V outcomes anticorrelate, so (H,H) and
//! (V,V) coincidences are errors; D/A outcomes correlate, so (D,A) and (A,D)
//! are errors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::AnalyzerMap;
use crate::timetag::{bin_outcomes, coincidences, CoincidenceTable, Party, TagError, TagStream};

/// Error-correction inefficiency used when none is given.
pub const DEFAULT_F_EC: f64 = 1.2;

pub const FAIR_SAMPLING_CAVEAT: &str = "security assumes fair sampling by the detectors; \
detector side channels are not modeled";

const H: usize = 0;
const V: usize = 1;
const D: usize = 2;
const A: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Basis {
    HV,
    DA,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeyRateError {
    #[error("no matched-basis coincidences in the {0:?} basis; QBER undefined")]
    EmptyBasis(Basis),
    #[error("binary entropy argument {0} outside [0, 1]")]
    Domain(f64),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tag(#[from] TagError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QberEstimate {
    pub e_h: f64,
    pub e_d: f64,
    /// One standard deviation.
    pub sigma_h: f64,
    pub sigma_d: f64,
    pub n_h: u64,
    pub n_d: u64,
}

fn binomial_sigma(e: f64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        (e * (1.0 - e) / n as f64).sqrt()
    }
}

impl QberEstimate {
    /// Estimate from error fractions and matched-basis counts, binomial σ.
    pub fn from_counts(e_h: f64, n_h: u64, e_d: f64, n_d: u64) -> Self {
        QberEstimate {
            e_h,
            e_d,
            sigma_h: binomial_sigma(e_h, n_h),
            sigma_d: binomial_sigma(e_d, n_d),
            n_h,
            n_d,
        }
    }

    pub fn upper_h(&self) -> f64 {
        self.e_h + 3.0 * self.sigma_h
    }

    pub fn upper_d(&self) -> f64 {
        self.e_d + 3.0 * self.sigma_d
    }
}

pub fn qber(c: &CoincidenceTable) -> Result<QberEstimate, KeyRateError> {
    let k = &c.counts;
    let err_h = k[H][H] + k[V][V];
    let n_h = err_h + k[H][V] + k[V][H];
    let err_d = k[D][A] + k[A][D];
    let n_d = err_d + k[D][D] + k[A][A];
    if n_h == 0 {
        return Err(KeyRateError::EmptyBasis(Basis::HV));
    }
    if n_d == 0 {
        return Err(KeyRateError::EmptyBasis(Basis::DA));
    }
    Ok(QberEstimate::from_counts(
        err_h as f64 / n_h as f64,
        n_h,
        err_d as f64 / n_d as f64,
        n_d,
    ))
}

/// A rate in bits/s with its 3σ uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub bar3: f64,
}

/// Correct-outcome coincidences per second; Poisson 3σ bar.
pub fn sifted_rate(c: &CoincidenceTable, t_acq_s: f64) -> Result<Rate, KeyRateError> {
    if !(t_acq_s > 0.0 && t_acq_s.is_finite()) {
        return Err(KeyRateError::Invalid(format!("acquisition time must be positive, got {t_acq_s}")));
    }
    let k = &c.counts;
    let n = (k[H][V] + k[V][H] + k[D][D] + k[A][A]) as f64;
    Ok(Rate {
        value: n / t_acq_s,
        bar3: 3.0 * n.sqrt() / t_acq_s,
    })
}

pub fn binary_entropy(x: f64) -> Result<f64, KeyRateError> {
    if !(0.0..=1.0).contains(&x) {
        return Err(KeyRateError::Domain(x));
    }
    let term = |p: f64| if p > 0.0 { -p * p.log2() } else { 0.0 };
    Ok(term(x) + term(1.0 - x))
}

/// dh/dx = log₂((1−x)/x).
fn entropy_slope(x: f64) -> f64 {
    ((1.0 - x) / x).log2()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SecureRate {
    pub value: f64,
    pub bar3: f64,
    /// Set when an error rate reaches 0.5 or the formula goes negative; the
    /// rate is then clamped to zero.
    pub below_threshold: bool,
}

pub fn secure_rate(sifted: Rate, q: &QberEstimate, f_ec: f64) -> Result<SecureRate, KeyRateError> {
    if !(f_ec >= 1.0 && f_ec.is_finite()) {
        return Err(KeyRateError::Invalid(format!("f_ec must be ≥ 1, got {f_ec}")));
    }
    if !(sifted.value >= 0.0 && sifted.value.is_finite() && sifted.bar3 >= 0.0) {
        return Err(KeyRateError::Invalid(format!("sifted rate {sifted:?}")));
    }
    for (name, v) in [("e_H", q.e_h), ("e_D", q.e_d), ("sigma_H", q.sigma_h), ("sigma_D", q.sigma_d)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(KeyRateError::Invalid(format!("{name} = {v} outside [0, 1]")));
        }
    }
    let zero = SecureRate {
        value: 0.0,
        bar3: 0.0,
        below_threshold: true,
    };
    if q.e_h >= 0.5 || q.e_d >= 0.5 {
        return Ok(zero);
    }
    let (uh, ud) = (q.upper_h().min(0.5), q.upper_d().min(0.5));
    let h = |x| binary_entropy(x).expect("argument within [0, 0.5]");
    let fraction = 1.0 - 0.5 * (h(uh) + h(ud)) - 0.5 * f_ec * (h(q.e_h) + h(q.e_d));
    if fraction <= 0.0 {
        return Ok(zero);
    }
    let s = sifted.value;
    let value = s * fraction;

    // First-order propagation. Each QBER moves both its own entropy term and
    // its upper bound; σ is treated as exact.
    let d_de = |e: f64, u: f64, sigma: f64| {
        if sigma == 0.0 {
            return 0.0;
        }
        let pa = if u < 0.5 { entropy_slope(u) } else { 0.0 };
        -0.5 * s * (pa + f_ec * entropy_slope(e))
    };
    let var = (fraction * sifted.bar3 / 3.0).powi(2)
        + (d_de(q.e_h, uh, q.sigma_h) * q.sigma_h).powi(2)
        + (d_de(q.e_d, ud, q.sigma_d) * q.sigma_d).powi(2);
    Ok(SecureRate {
        value,
        bar3: 3.0 * var.sqrt(),
        below_threshold: false,
    })
}

/// Rates and QBERs as reported by an experiment, with optional 3σ bars.
/// Missing bars are filled from the binomial/Poisson model with half the
/// sifted counts in each basis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasuredRates {
    pub sifted_bps: f64,
    #[serde(default)]
    pub sifted_bar3: Option<f64>,
    /// Fractions, not percent.
    pub e_h: f64,
    pub e_d: f64,
    #[serde(default)]
    pub e_h_bar3: Option<f64>,
    #[serde(default)]
    pub e_d_bar3: Option<f64>,
    pub t_acq_s: f64,
}

impl MeasuredRates {
    /// Matched-basis count in each basis: half the sifted counts.
    pub fn counts_per_basis(&self) -> u64 {
        (self.sifted_bps * self.t_acq_s / 2.0).round() as u64
    }

    pub fn sifted(&self) -> Rate {
        let n = self.sifted_bps * self.t_acq_s;
        Rate {
            value: self.sifted_bps,
            bar3: self.sifted_bar3.unwrap_or(3.0 * n.sqrt() / self.t_acq_s),
        }
    }

    pub fn qber(&self) -> QberEstimate {
        let n = self.counts_per_basis();
        let mut q = QberEstimate::from_counts(self.e_h, n, self.e_d, n);
        if let Some(b) = self.e_h_bar3 {
            q.sigma_h = b / 3.0;
        }
        if let Some(b) = self.e_d_bar3 {
            q.sigma_d = b / 3.0;
        }
        q
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    pub sifted_rate: Rate,
    pub qber: QberEstimate,
    pub secure_rate: SecureRate,
    pub f_ec: f64,
    pub t_acq_s: f64,
    pub caveat: String,
}

impl KeyRateReport {
    pub fn from_table(c: &CoincidenceTable, t_acq_s: f64, f_ec: f64) -> Result<Self, KeyRateError> {
        let sifted = sifted_rate(c, t_acq_s)?;
        let q = qber(c)?;
        Self::assemble(sifted, q, t_acq_s, f_ec)
    }

    pub fn from_measured(m: &MeasuredRates, f_ec: f64) -> Result<Self, KeyRateError> {
        if !(m.t_acq_s > 0.0 && m.sifted_bps >= 0.0) {
            return Err(KeyRateError::Invalid(format!("measured rates {m:?}")));
        }
        Self::assemble(m.sifted(), m.qber(), m.t_acq_s, f_ec)
    }

    fn assemble(sifted: Rate, q: QberEstimate, t_acq_s: f64, f_ec: f64) -> Result<Self, KeyRateError> {
        let secure = secure_rate(sifted, &q, f_ec)?;
        Ok(KeyRateReport {
            sifted_rate: sifted,
            qber: q,
            secure_rate: secure,
            f_ec,
            t_acq_s,
            caveat: FAIR_SAMPLING_CAVEAT.to_string(),
        })
    }

    /// Rows laid out like a results table.
    pub fn to_table(&self) -> String {
        let q = &self.qber;
        let mut s = String::new();
        s.push_str(&format!(
            "Sifted key rate (bits/s)   {:.1} ± {:.1}\n",
            self.sifted_rate.value, self.sifted_rate.bar3
        ));
        s.push_str(&format!(
            "QBER H/V (%)               {:.2} ± {:.2}\n",
            100.0 * q.e_h,
            300.0 * q.sigma_h
        ));
        s.push_str(&format!(
            "QBER D/A (%)               {:.2} ± {:.2}\n",
            100.0 * q.e_d,
            300.0 * q.sigma_d
        ));
        s.push_str(&format!(
            "Secure key rate (bits/s)   {:.1} ± {:.1}{}\n",
            self.secure_rate.value,
            self.secure_rate.bar3,
            if self.secure_rate.below_threshold { "  (below threshold)" } else { "" }
        ));
        s.push_str(&format!("T_acq {} s, f_ec {}, ±3σ\n", self.t_acq_s, self.f_ec));
        s
    }
}

/// Multiplicative upgrades to one channel's secure rate; a factor of 1
/// means the upgrade is off.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImprovementScenario {
    pub dual_detectors: f64,
    pub splice_loss: f64,
    pub detector_efficiency: f64,
    pub rep_rate: f64,
    pub channels: u32,
}

impl ImprovementScenario {
    pub const DUAL_DETECTORS: f64 = 4.0;
    pub const SPLICE_LOSS: f64 = 4.0;
    pub const DETECTOR_EFFICIENCY: f64 = 9.0;
    pub const REP_RATE: f64 = 25.0;
    pub const FACTOR_NAMES: [&'static str; 4] = ["dual", "splice", "eff", "rep"];

    pub fn none() -> Self {
        ImprovementScenario {
            dual_detectors: 1.0,
            splice_loss: 1.0,
            detector_efficiency: 1.0,
            rep_rate: 1.0,
            channels: 1,
        }
    }

    pub fn all(channels: u32) -> Self {
        ImprovementScenario {
            dual_detectors: Self::DUAL_DETECTORS,
            splice_loss: Self::SPLICE_LOSS,
            detector_efficiency: Self::DETECTOR_EFFICIENCY,
            rep_rate: Self::REP_RATE,
            channels,
        }
    }

    /// Enable upgrades by name: `dual`, `splice`, `eff`, `rep`.
    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>, channels: u32) -> Result<Self, KeyRateError> {
        let mut s = Self::none();
        s.channels = channels;
        for name in names {
            match name.trim() {
                "dual" => s.dual_detectors = Self::DUAL_DETECTORS,
                "splice" => s.splice_loss = Self::SPLICE_LOSS,
                "eff" => s.detector_efficiency = Self::DETECTOR_EFFICIENCY,
                "rep" => s.rep_rate = Self::REP_RATE,
                "" => {}
                other => {
                    return Err(KeyRateError::Invalid(format!(
                        "unknown factor {other:?}, expected one of {:?}",
                        Self::FACTOR_NAMES
                    )))
                }
            }
        }
        Ok(s)
    }

    pub fn factor(&self) -> f64 {
        self.dual_detectors * self.splice_loss * self.detector_efficiency * self.rep_rate
    }

    pub fn validate(&self) -> Result<(), KeyRateError> {
        for (name, f) in [
            ("dual_detectors", self.dual_detectors),
            ("splice_loss", self.splice_loss),
            ("detector_efficiency", self.detector_efficiency),
            ("rep_rate", self.rep_rate),
        ] {
            if !(f >= 1.0 && f.is_finite()) {
                return Err(KeyRateError::Invalid(format!("{name} factor must be ≥ 1, got {f}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub factor: f64,
    pub base_bps: f64,
    pub per_channel_bps: f64,
    pub channels: u32,
    pub aggregate_bps: f64,
}

pub fn project_scenario(base: &KeyRateReport, s: &ImprovementScenario) -> Result<Projection, KeyRateError> {
    s.validate()?;
    let base_bps = base.secure_rate.value;
    if !(base_bps >= 0.0) {
        return Err(KeyRateError::Invalid(format!("base secure rate {base_bps}")));
    }
    let per_channel_bps = base_bps * s.factor();
    Ok(Projection {
        factor: s.factor(),
        base_bps,
        per_channel_bps,
        channels: s.channels,
        aggregate_bps: per_channel_bps * f64::from(s.channels),
    })
}

/// One point of a QBER time series. `qber` is `None` when the window holds
/// no matched-basis coincidences in some basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowQber {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub coincidences: u64,
    pub qber: Option<QberEstimate>,
}

impl WindowQber {
    pub fn is_gap(&self) -> bool {
        self.qber.is_none()
    }
}

/// Window boundaries in pulses: `ceil(run/window)` windows, the last one
/// possibly short. A window longer than the run yields one window.
pub fn window_bounds(run_pulses: u64, window_pulses: u64) -> Vec<(u64, u64)> {
    let w = window_pulses.clamp(1, run_pulses.max(1));
    (0..run_pulses.div_ceil(w).max(1))
        .map(|i| (i * w, ((i + 1) * w).min(run_pulses)))
        .collect()
}

/// QBER series with 1σ bars from per-window tables.
pub fn stability_series(tables: &[CoincidenceTable], bounds_s: &[(f64, f64)]) -> Vec<WindowQber> {
    tables
        .iter()
        .zip(bounds_s)
        .enumerate()
        .map(|(index, (t, &(start_s, end_s)))| WindowQber {
            index,
            start_s,
            end_s,
            coincidences: t.total(),
            qber: qber(t).ok(),
        })
        .collect()
}

/// Bin both streams and build the coincidence table. Also returns the
/// per-party counts of events outside every slot.
pub fn table_from_tags(
    a: &TagStream,
    b: &TagStream,
    analyzer: &AnalyzerMap,
) -> Result<(CoincidenceTable, [u64; 2]), KeyRateError> {
    if a.header() != b.header() {
        return Err(TagError::HeaderMismatch(format!("{:?} vs {:?}", a.header(), b.header())).into());
    }
    let ba = bin_outcomes(a, analyzer)?;
    let bb = bin_outcomes(b, analyzer)?;
    let ea = ba.party(Party::A);
    let eb = bb.party(Party::B);
    let discarded = [
        a.party(Party::A).count() as u64 - ea.len() as u64,
        b.party(Party::B).count() as u64 - eb.len() as u64,
    ];
    Ok((coincidences(&ea, &eb), discarded))
}

/// Split tag streams into windows of `window_s` and tabulate each. The run
/// length defaults to the last sync index seen.
pub fn window_tables_from_tags(
    a: &TagStream,
    b: &TagStream,
    analyzer: &AnalyzerMap,
    window_s: f64,
    run_s: Option<f64>,
) -> Result<(Vec<CoincidenceTable>, Vec<(f64, f64)>), KeyRateError> {
    if !(window_s > 0.0 && window_s.is_finite()) {
        return Err(KeyRateError::Invalid(format!("window must be positive, got {window_s}")));
    }
    let rate = a.header().sync_rate_hz();
    let last = |s: &TagStream| s.records().last().map_or(0, |r| r.sync_index() + 1);
    let run_pulses = match run_s {
        Some(t) => (t * rate).round() as u64,
        None => last(a).max(last(b)),
    };
    let window_pulses = (window_s * rate).round() as u64;
    let mut tables = Vec::new();
    let mut bounds = Vec::new();
    for (lo, hi) in window_bounds(run_pulses, window_pulses) {
        let wa = TagStream::new(*a.header(), a.sync_range(lo, hi).to_vec())?;
        let wb = TagStream::new(*b.header(), b.sync_range(lo, hi).to_vec())?;
        tables.push(table_from_tags(&wa, &wb, analyzer)?.0);
        bounds.push((lo as f64 / rate, hi as f64 / rate));
    }
    Ok((tables, bounds))
}

/// Pooled QBER over all windows.
pub fn pooled_qber(tables: &[CoincidenceTable]) -> Result<QberEstimate, KeyRateError> {
    let mut total = CoincidenceTable::default();
    for t in tables {
        total.add(t);
    }
    qber(&total)
}

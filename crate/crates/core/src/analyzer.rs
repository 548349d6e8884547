//! Time-multiplexed passive analyzer: each polarization outcome arrives in
//! its own time slot after the pump sync.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::PolarizationOutcome;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyzerError {
    #[error("slot width must be positive, got {0} ns")]
    NonPositiveWidth(f64),
    #[error("slots {0} and {1} overlap")]
    Overlap(PolarizationOutcome, PolarizationOutcome),
    #[error("slot offsets must be strictly increasing in H, V, D, A order")]
    NotIncreasing,
    #[error("slots span [{start_ns}, {end_ns}) ns, outside the {period_ns} ns sync period")]
    OutsidePeriod {
        start_ns: f64,
        end_ns: f64,
        period_ns: f64,
    },
}

/// Slot centers are `delay_ns + offsets_ns[outcome]`; each slot is
/// `slot_width_ns` wide, centered on its offset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzerMap {
    /// Common delay of the H slot after the sync edge.
    pub delay_ns: f64,
    /// Relative offsets for H, V, D, A.
    pub offsets_ns: [f64; 4],
    pub slot_width_ns: f64,
}

impl Default for AnalyzerMap {
    fn default() -> Self {
        AnalyzerMap {
            delay_ns: 2.0,
            offsets_ns: [0.0, 2.5, 5.0, 7.5],
            slot_width_ns: 1.0,
        }
    }
}

impl AnalyzerMap {
    pub fn center_ns(&self, outcome: PolarizationOutcome) -> f64 {
        self.delay_ns + self.offsets_ns[outcome.index()]
    }

    pub fn center_ps(&self, outcome: PolarizationOutcome) -> f64 {
        self.center_ns(outcome) * 1e3
    }

    /// Window `[center − w/2, center + w/2)` in ps.
    pub fn window_ps(&self, outcome: PolarizationOutcome) -> (f64, f64) {
        let c = self.center_ps(outcome);
        let half = self.slot_width_ns * 500.0;
        (c - half, c + half)
    }

    /// Checks slot geometry; with `period_ns`, also that every slot lies
    /// inside one sync period.
    pub fn validate(&self, period_ns: Option<f64>) -> Result<(), AnalyzerError> {
        if !(self.slot_width_ns > 0.0) {
            return Err(AnalyzerError::NonPositiveWidth(self.slot_width_ns));
        }
        if self.offsets_ns.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(AnalyzerError::NotIncreasing);
        }
        for (i, w) in self.offsets_ns.windows(2).enumerate() {
            if w[1] - w[0] < self.slot_width_ns {
                return Err(AnalyzerError::Overlap(
                    PolarizationOutcome::ALL[i],
                    PolarizationOutcome::ALL[i + 1],
                ));
            }
        }
        if let Some(period_ns) = period_ns {
            let start_ns = self.window_ps(PolarizationOutcome::H).0 / 1e3;
            let end_ns = self.window_ps(PolarizationOutcome::A).1 / 1e3;
            if start_ns < 0.0 || end_ns > period_ns {
                return Err(AnalyzerError::OutsidePeriod {
                    start_ns,
                    end_ns,
                    period_ns,
                });
            }
        }
        Ok(())
    }

    /// Outcome whose window contains `offset_ps`, if any.
    pub fn classify(&self, offset_ps: f64) -> Option<PolarizationOutcome> {
        PolarizationOutcome::ALL.into_iter().find(|&o| {
            let (lo, hi) = self.window_ps(o);
            offset_ps >= lo && offset_ps < hi
        })
    }
}

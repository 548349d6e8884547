//! End-to-end runs: plan channels, route user pairs through the switch,
//! simulate each granted link, and assemble key-rate reports.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ResolvedLink, ScenarioConfig};
use crate::grid::{plan_channels, ChannelPlan};
use crate::keyrate::{
    self, table_from_tags, window_bounds, KeyRateReport, WindowQber, FAIR_SAMPLING_CAVEAT,
};
use crate::net::{ConnectOutcome, StatusReport, SwitchState};
use crate::rng::SeedSpec;
use crate::sim::{analytic_rates, events_to_stream, pulses_for, simulate_events, AnalyticRates, LinkPhysics};
use crate::timetag::{histogram2d, CoincidenceTable, Histogram2D, Party, TagRecord, TagStream};

pub const DROP_POLICY_CAVEAT: &str = "pulses in which a party registered more than one in-slot event \
are dropped from the coincidence tables (counted as ambiguous_pulses)";
pub const STATE_FIT_CAVEAT: &str = "source states are parameterized by a single visibility fit to the \
fidelity; per-channel density matrices are not modeled";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{at}: {message}")]
    Failed { at: String, message: String },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

fn failed(at: impl Into<String>, e: impl ToString) -> ScenarioError {
    ScenarioError::Failed {
        at: at.into(),
        message: e.to_string(),
    }
}

/// Monte Carlo results for one link, accumulated window by window.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedLink {
    pub table: CoincidenceTable,
    pub windows: Vec<CoincidenceTable>,
    pub window_bounds_s: Vec<(f64, f64)>,
    /// Per-party event counts (A, B).
    pub singles: [u64; 2],
    /// Per-party events outside every slot.
    pub discarded: [u64; 2],
    pub histogram: Histogram2D,
    pub tags: Option<TagStream>,
}

impl SimulatedLink {
    /// Same-pulse (A, B) event pairs, any offsets.
    pub fn pair_events(&self) -> u64 {
        self.histogram.total
    }

    pub fn series(&self) -> Vec<WindowQber> {
        keyrate::stability_series(&self.windows, &self.window_bounds_s)
    }
}

/// Simulate `duration_s` in windows of `window_s`, holding one window of
/// events in memory at a time.
pub fn simulate_windows(
    phys: &LinkPhysics,
    duration_s: f64,
    window_s: f64,
    seed: SeedSpec,
    keep_tags: bool,
) -> Result<SimulatedLink, ScenarioError> {
    if !(duration_s > 0.0 && window_s > 0.0) {
        return Err(failed("run", format!("duration {duration_s} s and window {window_s} s must be positive")));
    }
    phys.validate().map_err(|e| failed("physics", e))?;
    let rate = phys.source.rep_rate_hz;
    let header = phys.header();
    let run_pulses = pulses_for(duration_s, rate);
    let window_pulses = pulses_for(window_s, rate).max(1);

    let mut out = SimulatedLink {
        table: CoincidenceTable::default(),
        windows: Vec::new(),
        window_bounds_s: Vec::new(),
        singles: [0; 2],
        discarded: [0; 2],
        histogram: Histogram2D::new(&header),
        tags: None,
    };
    let mut records: Vec<TagRecord> = Vec::new();
    for (lo, hi) in window_bounds(run_pulses, window_pulses) {
        let events = simulate_events(phys, lo..hi, seed).map_err(|e| failed("simulation", e))?;
        let stream = events_to_stream(header, &events).map_err(|e| failed("simulation", e))?;
        drop(events);
        out.singles[0] += stream.count(Party::A) as u64;
        out.singles[1] += stream.count(Party::B) as u64;
        out.histogram
            .merge(&histogram2d(&stream, &stream).map_err(|e| failed("histogram", e))?);
        let (table, discarded) =
            table_from_tags(&stream, &stream, &phys.analyzer).map_err(|e| failed("coincidences", e))?;
        out.discarded[0] += discarded[0];
        out.discarded[1] += discarded[1];
        out.table.add(&table);
        out.windows.push(table);
        out.window_bounds_s.push((lo as f64 / rate, hi as f64 / rate));
        if keep_tags {
            records.extend(stream.into_records());
        }
    }
    if keep_tags {
        // Jitter can carry a window's last clicks past the next window's first.
        records.sort_by_key(|r| r.order_key());
        out.tags = Some(TagStream::new(header, records).map_err(|e| failed("tags", e))?);
    }
    Ok(out)
}

/// Expected counts over `t_acq_s`, rounded, as a coincidence table.
pub fn expected_table(rates: &AnalyticRates, t_acq_s: f64) -> CoincidenceTable {
    let mut t = CoincidenceTable::default();
    for i in 0..4 {
        for j in 0..4 {
            t.counts[i][j] = (rates.table_hz[i][j] * t_acq_s).round() as u64;
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub pump_nm: f64,
    pub band_nm: [f64; 2],
    pub spacing_ghz: u32,
    pub conj_tolerance_ghz: f64,
    pub pairs: usize,
    pub max_conjugacy_error_ghz: f64,
}

impl PlanSummary {
    fn of(plan: &ChannelPlan) -> Self {
        PlanSummary {
            pump_nm: plan.pump.wavelength_nm(),
            band_nm: [plan.band_high.wavelength_nm(), plan.band_low.wavelength_nm()],
            spacing_ghz: plan.spacing.ghz(),
            conj_tolerance_ghz: plan.conj_tolerance_ghz,
            pairs: plan.len(),
            max_conjugacy_error_ghz: plan
                .pairs
                .iter()
                .map(|p| p.conjugacy_error_ghz(plan.pump).abs())
                .fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedSummary {
    pub coincidences: CoincidenceTable,
    pub singles: [u64; 2],
    pub pair_events: u64,
    pub discarded: [u64; 2],
    /// `None` when a basis had no coincidences; see `error`.
    pub report: Option<KeyRateReport>,
    pub error: Option<String>,
    pub series: Vec<WindowQber>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub pair_id: usize,
    pub users: [String; 2],
    pub signal_nm: f64,
    pub idler_nm: f64,
    pub mu: f64,
    pub loss_db: [f64; 2],
    pub fidelity: f64,
    pub tangle: f64,
    /// Closed-form rates for the configured physics.
    pub expected: AnalyticRates,
    /// Key-rate report from the expected counts over the run.
    pub model: Option<KeyRateReport>,
    /// Key-rate report from the configured reference figures.
    pub reference: Option<KeyRateReport>,
    pub simulated: Option<SimulatedSummary>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DroppedCounters {
    pub ambiguous_pulses: u64,
    pub discarded_a: u64,
    pub discarded_b: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Wall-clock stamp; the only field that varies between identical runs.
    pub generated_at_unix_s: Option<u64>,
    pub seed: u64,
    pub duration_s: f64,
    pub window_s: f64,
    pub f_ec: f64,
    pub plan: PlanSummary,
    pub switch: StatusReport,
    pub links: Vec<LinkReport>,
    pub waitlisted: Vec<[String; 2]>,
    pub dropped: DroppedCounters,
    pub caveats: Vec<String>,
}

impl RunReport {
    /// JSON with the timestamp removed, for determinism comparisons.
    pub fn canonical_json(&self) -> String {
        let mut r = self.clone();
        r.generated_at_unix_s = None;
        serde_json::to_string_pretty(&r).expect("report serializes")
    }
}

/// Per-link bulk data that does not go into the JSON report.
#[derive(Debug, Clone, PartialEq)]
pub struct LinkArtifacts {
    pub pair_id: usize,
    pub histogram: Option<Histogram2D>,
    pub tags: Option<TagStream>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioRun {
    pub report: RunReport,
    pub plan: ChannelPlan,
    pub artifacts: Vec<LinkArtifacts>,
}

struct Granted {
    pair_id: usize,
    users: [String; 2],
    link: ResolvedLink,
}

fn link_report(
    g: &Granted,
    plan: &ChannelPlan,
    cfg: &ScenarioConfig,
) -> Result<(LinkReport, LinkArtifacts), ScenarioError> {
    let at = format!("link {}-{} (pair {})", g.users[0], g.users[1], g.pair_id);
    let run = &cfg.run;
    let phys = &g.link.physics;
    let pair = plan.pair(g.pair_id).expect("granted pair exists");
    let expected = analytic_rates(phys);
    let model = KeyRateReport::from_table(&expected_table(&expected, run.duration_s), run.duration_s, run.f_ec).ok();
    let reference = g
        .link
        .reference
        .as_ref()
        .map(|m| KeyRateReport::from_measured(m, run.f_ec))
        .transpose()
        .map_err(|e| failed(format!("{at} reference"), e))?;
    let (simulated, artifacts) = if run.simulate {
        let seed = SeedSpec::for_link(run.seed, g.pair_id as u64);
        let sim = simulate_windows(phys, run.duration_s, run.window(), seed, cfg.output.tags)
            .map_err(|e| failed(&at, e))?;
        let (report, error) = match KeyRateReport::from_table(&sim.table, run.duration_s, run.f_ec) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let summary = SimulatedSummary {
            coincidences: sim.table,
            singles: sim.singles,
            pair_events: sim.pair_events(),
            discarded: sim.discarded,
            report,
            error,
            series: sim.series(),
        };
        let art = LinkArtifacts {
            pair_id: g.pair_id,
            histogram: Some(sim.histogram),
            tags: sim.tags,
        };
        (Some(summary), art)
    } else {
        let art = LinkArtifacts {
            pair_id: g.pair_id,
            histogram: None,
            tags: None,
        };
        (None, art)
    };
    let state = &phys.source.state;
    let report = LinkReport {
        pair_id: g.pair_id,
        users: g.users.clone(),
        signal_nm: pair.signal.wavelength_nm(),
        idler_nm: pair.idler.wavelength_nm(),
        mu: phys.source.mu,
        loss_db: [phys.alice.loss_db, phys.bob.loss_db],
        fidelity: state.fidelity_to_psi_plus(),
        tangle: state.tangle().map_err(|e| failed(format!("{at} state"), e))?,
        expected,
        model,
        reference,
        simulated,
    };
    Ok((report, artifacts))
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<ScenarioRun, ScenarioError> {
    let links = cfg.resolve().map_err(ConfigError::Invalid)?;
    let opts = cfg.grid.plan_options().map_err(|d| ConfigError::Invalid(vec![d]))?;
    let plan = plan_channels(&opts).map_err(|e| failed("grid", e))?;

    let mut switch = SwitchState::new(plan.clone());
    for (i, name) in cfg.network.users.iter().enumerate() {
        switch
            .register(name)
            .map_err(|e| failed(format!("network.users[{i}]"), e))?;
    }
    let mut granted = Vec::new();
    let mut waitlisted = Vec::new();
    for (i, link) in links.into_iter().enumerate() {
        let (a, b) = (&link.users.0, &link.users.1);
        let ua = switch.user_by_name(a).expect("validated user");
        let ub = switch.user_by_name(b).expect("validated user");
        match switch.connect(ua, ub).map_err(|e| failed(format!("link[{i}]"), e))? {
            ConnectOutcome::Granted(grant) => granted.push(Granted {
                pair_id: grant.pair_id,
                users: [a.clone(), b.clone()],
                link,
            }),
            ConnectOutcome::Waitlisted { .. } => waitlisted.push([a.clone(), b.clone()]),
        }
    }
    granted.sort_by_key(|g| g.pair_id);

    let results: Vec<(LinkReport, LinkArtifacts)> = granted
        .par_iter()
        .map(|g| link_report(g, &plan, cfg))
        .collect::<Result<_, _>>()?;
    let (links, artifacts): (Vec<_>, Vec<_>) = results.into_iter().unzip();

    let mut dropped = DroppedCounters::default();
    for s in links.iter().filter_map(|l| l.simulated.as_ref()) {
        dropped.ambiguous_pulses += s.coincidences.ambiguous_pulses;
        dropped.discarded_a += s.discarded[0];
        dropped.discarded_b += s.discarded[1];
    }
    let report = RunReport {
        generated_at_unix_s: None,
        seed: cfg.run.seed,
        duration_s: cfg.run.duration_s,
        window_s: cfg.run.window(),
        f_ec: cfg.run.f_ec,
        plan: PlanSummary::of(&plan),
        switch: switch.status(),
        links,
        waitlisted,
        dropped,
        caveats: vec![
            FAIR_SAMPLING_CAVEAT.to_string(),
            DROP_POLICY_CAVEAT.to_string(),
            STATE_FIT_CAVEAT.to_string(),
        ],
    };
    Ok(ScenarioRun {
        report,
        plan,
        artifacts,
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ScenarioError> {
    fs::write(path, contents).map_err(|e| ScenarioError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v}"))
}

/// QBER time series as CSV, percent units, 1σ bars.
pub fn series_csv(series: &[WindowQber]) -> String {
    let mut s = String::from("window,start_s,end_s,coincidences,e_h_pct,sigma_h_pct,e_d_pct,sigma_d_pct,gap\n");
    for w in series {
        let q = w.qber.as_ref();
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            w.index,
            w.start_s,
            w.end_s,
            w.coincidences,
            opt(q.map(|q| 100.0 * q.e_h)),
            opt(q.map(|q| 100.0 * q.sigma_h)),
            opt(q.map(|q| 100.0 * q.e_d)),
            opt(q.map(|q| 100.0 * q.sigma_d)),
            w.is_gap()
        ));
    }
    s
}

/// One row per link and report kind, 3σ bars, QBERs in percent.
pub fn links_csv(report: &RunReport) -> String {
    let mut s = String::from(
        "pair_id,user_a,user_b,kind,sifted_bps,sifted_bar3,e_h_pct,e_h_bar3_pct,e_d_pct,e_d_bar3_pct,secure_bps,secure_bar3,below_threshold\n",
    );
    for l in &report.links {
        let kinds = [
            ("model", l.model.as_ref()),
            ("reference", l.reference.as_ref()),
            ("simulated", l.simulated.as_ref().and_then(|s| s.report.as_ref())),
        ];
        for (kind, r) in kinds {
            let Some(r) = r else { continue };
            let q = &r.qber;
            s.push_str(&format!(
                "{},{},{},{kind},{},{},{},{},{},{},{},{},{}\n",
                l.pair_id,
                l.users[0],
                l.users[1],
                r.sifted_rate.value,
                r.sifted_rate.bar3,
                100.0 * q.e_h,
                300.0 * q.sigma_h,
                100.0 * q.e_d,
                300.0 * q.sigma_d,
                r.secure_rate.value,
                r.secure_rate.bar3,
                r.secure_rate.below_threshold
            ));
        }
    }
    s
}

/// Write `report.json`, `plan.csv`, `links.csv` and per-link histogram,
/// QBER-series and (optionally) tag files. Returns the paths written.
pub fn write_outputs(run: &ScenarioRun, dir: &Path) -> Result<Vec<PathBuf>, ScenarioError> {
    fs::create_dir_all(dir).map_err(|e| ScenarioError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut written = Vec::new();
    let mut put = |name: String, contents: Vec<u8>| -> Result<(), ScenarioError> {
        let path = dir.join(name);
        write(&path, contents)?;
        written.push(path);
        Ok(())
    };
    let json = serde_json::to_string_pretty(&run.report).expect("report serializes");
    put("report.json".into(), json.into_bytes())?;
    put("plan.csv".into(), run.plan.to_csv().into_bytes())?;
    put("links.csv".into(), links_csv(&run.report).into_bytes())?;
    for (link, art) in run.report.links.iter().zip(&run.artifacts) {
        let id = link.pair_id;
        if let Some(sim) = &link.simulated {
            put(format!("link{id}_qber_series.csv"), series_csv(&sim.series).into_bytes())?;
        }
        if let Some(h) = &art.histogram {
            put(format!("link{id}_histogram.csv"), h.to_csv().into_bytes())?;
        }
        if let Some(tags) = &art.tags {
            put(format!("link{id}_tags.qtt"), crate::timetag::encode(tags))?;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: &str = r#"
        [grid]
        band_low_nm = 1551.5
        band_high_nm = 1558.5

        [network]
        users = ["a", "b", "c", "d", "e", "f"]

        [source]
        mu = 0.05
        state = "colored"
        visibility = 0.95

        [alice]
        loss_db = 6.0
        dark_rate_hz = 200.0

        [bob]
        loss_db = 7.0

        [[link]]
        users = ["a", "b"]
        [link.reference]
        sifted_bps = 32.5
        e_h_pct = 2.35
        e_d_pct = 2.15

        [[link]]
        users = ["c", "d"]

        [[link]]
        users = ["e", "f"]

        [run]
        duration_s = 0.5
        seed = 11
        window_s = 0.2
    "#;

    fn cfg() -> ScenarioConfig {
        ScenarioConfig::from_toml(CFG, Path::new(".")).unwrap()
    }

    #[test]
    fn scenario_reports_each_granted_link() {
        let run = run_scenario(&cfg()).unwrap();
        let r = &run.report;
        assert_eq!(r.links.len(), 2);
        assert_eq!(r.waitlisted, vec![["e".to_string(), "f".to_string()]]);
        assert_eq!(r.links[0].pair_id, 0);
        assert_eq!(r.links[1].pair_id, 1);
        assert!(r.links[0].reference.is_some());
        assert!(r.links[1].reference.is_none());
        let sim = r.links[0].simulated.as_ref().unwrap();
        assert_eq!(sim.series.len(), 3);
        assert!(sim.report.is_some());
        assert_eq!(r.plan.pairs, 2);
    }

    #[test]
    fn outputs_are_written() {
        let run = run_scenario(&cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = write_outputs(&run, dir.path()).unwrap();
        let names: Vec<String> = files
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert!(names.contains(&"report.json".to_string()));
        assert!(names.contains(&"link1_histogram.csv".to_string()));
        let back: RunReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back.canonical_json(), run.report.canonical_json());
    }

    #[test]
    fn invalid_config_surfaces_diagnostics() {
        let mut c = cfg();
        c.run.duration_s = -1.0;
        assert!(matches!(run_scenario(&c), Err(ScenarioError::Config(ConfigError::Invalid(_)))));
    }

    #[test]
    fn kept_tags_are_sorted_and_complete() {
        let c = cfg();
        let links = c.resolve().unwrap();
        let sim = simulate_windows(&links[0].physics, 0.5, 0.2, SeedSpec::new(2), true).unwrap();
        let tags = sim.tags.unwrap();
        assert_eq!(tags.len() as u64, sim.singles[0] + sim.singles[1]);
    }
}

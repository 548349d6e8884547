//! TOML configuration files.
//!
//! One file format serves both single-link simulation and full scenarios.
//! The top-level `[source]`, `[alice]`, `[bob]` and `[analyzer]` sections
//! describe link physics; in a scenario they are defaults that each
//! `[[link]]` entry may override field by field.
//!
//! ```toml
//! [grid]
//! pump_nm = 777.45
//! band_low_nm = 1510.0
//! band_high_nm = 1600.0
//! spacing_ghz = 200
//!
//! [network]
//! users = ["alice", "bob"]
//!
//! [source]
//! mu = 8.9e-3
//! state = "colored"
//! visibility = 0.978
//!
//! [alice]
//! loss_db = 19.4
//!
//! [bob]
//! loss_db = 19.5
//!
//! [[link]]
//! users = ["alice", "bob"]
//!
//! [run]
//! duration_s = 500.0
//! seed = 1
//! ```

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analyzer::AnalyzerMap;
use crate::grid::{PlanOptions, Spacing};
use crate::keyrate::{MeasuredRates, DEFAULT_F_EC};
use crate::sim::{ArmParams, LinkPhysics, SourceParams, DEFAULT_REP_RATE_HZ};
use crate::state::TwoQubitState;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration:\n{}", render(.0))]
    Invalid(Vec<Diagnostic>),
}

fn render(d: &[Diagnostic]) -> String {
    d.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

/// A violated invariant, located by its dotted config path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub pump_nm: f64,
    pub band_low_nm: f64,
    pub band_high_nm: f64,
    pub spacing_ghz: u32,
    pub conj_tolerance_ghz: Option<f64>,
    pub strict_itu: bool,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            pump_nm: 777.45,
            band_low_nm: 1510.0,
            band_high_nm: 1600.0,
            spacing_ghz: 200,
            conj_tolerance_ghz: None,
            strict_itu: false,
        }
    }
}

impl GridSection {
    pub fn plan_options(&self) -> Result<PlanOptions, Diagnostic> {
        let spacing = Spacing::try_from(self.spacing_ghz)
            .map_err(|e| Diagnostic::new("grid.spacing_ghz", e.to_string()))?;
        let mut opts = PlanOptions::from_wavelengths(self.pump_nm, (self.band_low_nm, self.band_high_nm), spacing)
            .map_err(|e| Diagnostic::new("grid", e.to_string()))?;
        opts.conj_tolerance_ghz = self.conj_tolerance_ghz;
        opts.strict_itu = self.strict_itu;
        Ok(opts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    PsiPlus,
    Colored,
    Aligned,
    Werner,
    File,
}

/// Source parameters; unset fields fall back to defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    pub rep_rate_hz: Option<f64>,
    pub mu: Option<f64>,
    pub state: Option<StateKind>,
    /// For `colored` and `aligned`.
    pub visibility: Option<f64>,
    /// For `werner`.
    pub p: Option<f64>,
    /// For `file`; relative paths resolve against the config file.
    pub state_file: Option<PathBuf>,
}

impl SourceSection {
    fn overlay(&self, over: &SourceSection) -> SourceSection {
        let state_changed = over.state.is_some();
        SourceSection {
            rep_rate_hz: over.rep_rate_hz.or(self.rep_rate_hz),
            mu: over.mu.or(self.mu),
            state: over.state.or(self.state),
            visibility: over.visibility.or(if state_changed { None } else { self.visibility }),
            p: over.p.or(if state_changed { None } else { self.p }),
            state_file: over.state_file.clone().or_else(|| if state_changed { None } else { self.state_file.clone() }),
        }
    }

    fn build(&self, at: &str, base_dir: &Path, out: &mut Vec<Diagnostic>) -> Option<SourceParams> {
        let rep_rate_hz = self.rep_rate_hz.unwrap_or(DEFAULT_REP_RATE_HZ);
        if !(rep_rate_hz > 0.0 && rep_rate_hz.is_finite()) {
            out.push(Diagnostic::new(format!("{at}.rep_rate_hz"), "must be positive"));
        }
        let mu = match self.mu {
            Some(mu) if mu >= 0.0 && mu.is_finite() => Some(mu),
            Some(_) => {
                out.push(Diagnostic::new(format!("{at}.mu"), "must be non-negative"));
                None
            }
            None => {
                out.push(Diagnostic::new(format!("{at}.mu"), "missing"));
                None
            }
        };
        let state = self.build_state(at, base_dir, out);
        Some(SourceParams {
            rep_rate_hz,
            mu: mu?,
            state: state?,
        })
    }

    fn build_state(&self, at: &str, base_dir: &Path, out: &mut Vec<Diagnostic>) -> Option<TwoQubitState> {
        let need = |v: Option<f64>, name: &str, out: &mut Vec<Diagnostic>| {
            if v.is_none() {
                out.push(Diagnostic::new(format!("{at}.{name}"), "missing"));
            }
            v
        };
        let result = match self.state.unwrap_or(StateKind::PsiPlus) {
            StateKind::PsiPlus => Ok(TwoQubitState::psi_plus()),
            StateKind::Colored => TwoQubitState::colored_noise(need(self.visibility, "visibility", out)?),
            StateKind::Aligned => TwoQubitState::aligned_noise(need(self.visibility, "visibility", out)?),
            StateKind::Werner => TwoQubitState::werner(need(self.p, "p", out)?),
            StateKind::File => {
                let Some(file) = &self.state_file else {
                    out.push(Diagnostic::new(format!("{at}.state_file"), "missing"));
                    return None;
                };
                let path = base_dir.join(file);
                match std::fs::read_to_string(&path) {
                    Ok(text) => text.parse::<TwoQubitState>(),
                    Err(e) => {
                        out.push(Diagnostic::new(
                            format!("{at}.state_file"),
                            format!("{}: {e}", path.display()),
                        ));
                        return None;
                    }
                }
            }
        };
        result
            .map_err(|e| out.push(Diagnostic::new(format!("{at}.state"), e.to_string())))
            .ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArmSection {
    pub loss_db: Option<f64>,
    pub dark_rate_hz: Option<f64>,
    pub dead_time_s: Option<f64>,
    pub jitter_sigma_s: Option<f64>,
    pub misalignment_rad: Option<f64>,
}

impl ArmSection {
    fn overlay(&self, over: &ArmSection) -> ArmSection {
        ArmSection {
            loss_db: over.loss_db.or(self.loss_db),
            dark_rate_hz: over.dark_rate_hz.or(self.dark_rate_hz),
            dead_time_s: over.dead_time_s.or(self.dead_time_s),
            jitter_sigma_s: over.jitter_sigma_s.or(self.jitter_sigma_s),
            misalignment_rad: over.misalignment_rad.or(self.misalignment_rad),
        }
    }

    fn build(&self, at: &str, out: &mut Vec<Diagnostic>) -> ArmParams {
        let d = ArmParams::default();
        let arm = ArmParams {
            loss_db: self.loss_db.unwrap_or(d.loss_db),
            dark_rate_hz: self.dark_rate_hz.unwrap_or(d.dark_rate_hz),
            dead_time_s: self.dead_time_s.unwrap_or(d.dead_time_s),
            jitter_sigma_s: self.jitter_sigma_s.unwrap_or(d.jitter_sigma_s),
            misalignment_rad: self.misalignment_rad.unwrap_or(d.misalignment_rad),
        };
        for (name, v) in [
            ("loss_db", arm.loss_db),
            ("dark_rate_hz", arm.dark_rate_hz),
            ("dead_time_s", arm.dead_time_s),
            ("jitter_sigma_s", arm.jitter_sigma_s),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(Diagnostic::new(format!("{at}.{name}"), format!("must be non-negative, got {v}")));
            }
        }
        if !arm.misalignment_rad.is_finite() {
            out.push(Diagnostic::new(format!("{at}.misalignment_rad"), "must be finite"));
        }
        arm
    }
}

/// Measured figures for a link, percent units for QBERs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    pub sifted_bps: f64,
    #[serde(default)]
    pub sifted_bar3: Option<f64>,
    pub e_h_pct: f64,
    pub e_d_pct: f64,
    #[serde(default)]
    pub e_h_bar3_pct: Option<f64>,
    #[serde(default)]
    pub e_d_bar3_pct: Option<f64>,
    #[serde(default)]
    pub t_acq_s: Option<f64>,
}

impl ReferenceSection {
    pub fn measured(&self, default_t_acq_s: f64) -> MeasuredRates {
        MeasuredRates {
            sifted_bps: self.sifted_bps,
            sifted_bar3: self.sifted_bar3,
            e_h: self.e_h_pct / 100.0,
            e_d: self.e_d_pct / 100.0,
            e_h_bar3: self.e_h_bar3_pct.map(|b| b / 100.0),
            e_d_bar3: self.e_d_bar3_pct.map(|b| b / 100.0),
            t_acq_s: self.t_acq_s.unwrap_or(default_t_acq_s),
        }
    }

    fn check(&self, at: &str, out: &mut Vec<Diagnostic>) {
        let pct = |v: f64| (0.0..=100.0).contains(&v);
        if !(self.sifted_bps >= 0.0 && self.sifted_bps.is_finite()) {
            out.push(Diagnostic::new(format!("{at}.sifted_bps"), "must be non-negative"));
        }
        for (name, v) in [("e_h_pct", self.e_h_pct), ("e_d_pct", self.e_d_pct)] {
            if !pct(v) {
                out.push(Diagnostic::new(format!("{at}.{name}"), "must be within [0, 100]"));
            }
        }
        if let Some(t) = self.t_acq_s {
            if !(t > 0.0) {
                out.push(Diagnostic::new(format!("{at}.t_acq_s"), "must be positive"));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSection {
    pub users: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkSection {
    /// The two users requesting this link, in request order.
    pub users: Vec<String>,
    pub source: SourceSection,
    pub alice: ArmSection,
    pub bob: ArmSection,
    pub analyzer: Option<AnalyzerMap>,
    pub reference: Option<ReferenceSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub duration_s: f64,
    pub seed: u64,
    /// Window length for QBER series; defaults to the whole run.
    pub window_s: Option<f64>,
    /// Run the Monte Carlo; when false only analytic results are reported.
    pub simulate: bool,
    pub f_ec: f64,
    /// Stream id for `sim run` (scenarios use the channel pair id).
    pub link_id: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            duration_s: 500.0,
            seed: 0,
            window_s: None,
            simulate: true,
            f_ec: DEFAULT_F_EC,
            link_id: 0,
        }
    }
}

impl RunSection {
    pub fn window(&self) -> f64 {
        self.window_s.unwrap_or(self.duration_s)
    }

    fn check(&self, out: &mut Vec<Diagnostic>) {
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            out.push(Diagnostic::new("run.duration_s", "must be positive"));
        }
        if let Some(w) = self.window_s {
            if !(w > 0.0 && w.is_finite()) {
                out.push(Diagnostic::new("run.window_s", "must be positive"));
            }
        }
        if !(self.f_ec >= 1.0 && self.f_ec.is_finite()) {
            out.push(Diagnostic::new("run.f_ec", "must be at least 1"));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
    /// Also write per-link time-tag files (large).
    pub tags: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub grid: GridSection,
    pub network: NetworkSection,
    pub source: SourceSection,
    pub alice: ArmSection,
    pub bob: ArmSection,
    pub analyzer: Option<AnalyzerMap>,
    #[serde(rename = "link")]
    pub links: Vec<LinkSection>,
    pub run: RunSection,
    pub output: OutputSection,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

/// One link after defaults are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedLink {
    pub users: (String, String),
    pub physics: LinkPhysics,
    pub reference: Option<MeasuredRates>,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, ConfigError> {
        let mut cfg: ScenarioConfig = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<config>"),
            message: e.to_string(),
        })?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Self::from_toml(&text, &base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    fn resolve_one(&self, link: &LinkSection, at: &str, out: &mut Vec<Diagnostic>) -> Option<LinkPhysics> {
        let source = self.source.overlay(&link.source);
        let alice = self.alice.overlay(&link.alice);
        let bob = self.bob.overlay(&link.bob);
        let source = source.build(&format!("{at}source"), &self.base_dir, out);
        let alice = alice.build(&format!("{at}alice"), out);
        let bob = bob.build(&format!("{at}bob"), out);
        let analyzer = link.analyzer.or(self.analyzer).unwrap_or_default();
        let source = source?;
        let phys = LinkPhysics {
            source,
            alice,
            bob,
            analyzer,
        };
        if phys.source.rep_rate_hz > 0.0 {
            if let Err(e) = phys.analyzer.validate(Some(phys.header().sync_period_ps() / 1e3)) {
                out.push(Diagnostic::new(format!("{at}analyzer"), e.to_string()));
            }
        }
        Some(phys)
    }

    /// Link physics from the top-level sections only, as used by `sim run`.
    pub fn single_link(&self) -> Result<LinkPhysics, ConfigError> {
        let mut out = Vec::new();
        self.run.check(&mut out);
        let phys = self.resolve_one(&LinkSection::default(), "", &mut out);
        match phys {
            Some(p) if out.is_empty() => Ok(p),
            _ => Err(ConfigError::Invalid(out)),
        }
    }

    /// Every violated invariant, without running anything.
    pub fn validate(&self) -> Vec<Diagnostic> {
        self.resolve().err().unwrap_or_default()
    }

    pub fn resolve(&self) -> Result<Vec<ResolvedLink>, Vec<Diagnostic>> {
        let mut out = Vec::new();
        if let Err(d) = self.grid.plan_options() {
            out.push(d);
        }
        self.run.check(&mut out);

        let mut seen = std::collections::BTreeSet::new();
        for (i, u) in self.network.users.iter().enumerate() {
            if u.trim().is_empty() {
                out.push(Diagnostic::new(format!("network.users[{i}]"), "empty user name"));
            } else if !seen.insert(u.as_str()) {
                out.push(Diagnostic::new(format!("network.users[{i}]"), format!("duplicate user {u:?}")));
            }
        }
        if self.links.is_empty() {
            out.push(Diagnostic::new("link", "no links requested"));
        }

        let mut resolved = Vec::new();
        let mut requested = std::collections::BTreeMap::new();
        for (i, link) in self.links.iter().enumerate() {
            let at = format!("link[{i}].");
            let mut users_ok = true;
            if link.users.len() != 2 {
                out.push(Diagnostic::new(format!("{at}users"), "must name exactly two users"));
                users_ok = false;
            } else {
                for u in &link.users {
                    if !seen.contains(u.as_str()) {
                        out.push(Diagnostic::new(format!("{at}users"), format!("unknown user {u:?}")));
                        users_ok = false;
                    }
                }
                if link.users[0] == link.users[1] {
                    out.push(Diagnostic::new(format!("{at}users"), "a user cannot link to itself"));
                    users_ok = false;
                }
                for u in &link.users {
                    if let Some(j) = requested.insert(u.as_str(), i) {
                        if j != i {
                            out.push(Diagnostic::new(
                                format!("{at}users"),
                                format!("user {u:?} already requested in link[{j}]"),
                            ));
                            users_ok = false;
                        }
                    }
                }
            }
            if let Some(r) = &link.reference {
                r.check(&format!("{at}reference"), &mut out);
            }
            let phys = self.resolve_one(link, &at, &mut out);
            if let (Some(physics), true) = (phys, users_ok) {
                resolved.push(ResolvedLink {
                    users: (link.users[0].clone(), link.users[1].clone()),
                    physics,
                    reference: link.reference.map(|r| r.measured(self.run.duration_s)),
                });
            }
        }
        if out.is_empty() {
            Ok(resolved)
        } else {
            Err(out)
        }
    }
}

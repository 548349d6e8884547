use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use qkdnet::analyzer::AnalyzerMap;
use qkdnet::config::{ConfigError, ScenarioConfig};
use qkdnet::grid::{
    conjugate_of, plan_channels, wavelength_to_frequency, GridChannel, GridError, PlanOptions, Spacing,
};
use qkdnet::keyrate::{
    self, project_scenario, table_from_tags, window_tables_from_tags, ImprovementScenario, KeyRateReport,
    DEFAULT_F_EC,
};
use qkdnet::net::{ConnectOutcome, NetError, SwitchState};
use qkdnet::rng::SeedSpec;
use qkdnet::scenario::{run_scenario, series_csv, write_outputs, RunReport};
use qkdnet::sim::simulate_run;
use qkdnet::state::{StateError, TwoQubitState};
use qkdnet::timetag::{histogram2d, read_file, write_file, Party};

#[derive(Parser)]
#[command(name = "qkdnet", version, about = "Entanglement-distribution QKD network simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// DWDM channel planning.
    #[command(subcommand)]
    Grid(GridCmd),
    /// Wavelength-selective switch state.
    #[command(subcommand)]
    Net(NetCmd),
    /// Two-qubit state metrics.
    #[command(subcommand)]
    State(StateCmd),
    /// Monte Carlo time-tag generation.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Key-rate analysis of time-tag files.
    #[command(subcommand)]
    Keys(KeysCmd),
    /// Improvement projections and config validation.
    #[command(subcommand)]
    Scenario(ScenarioCmd),
    /// Run a full scenario: plan, route, simulate, analyze, report.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct PlanArgs {
    #[arg(long, default_value_t = 777.45)]
    pump_nm: f64,
    /// Band edges in nm.
    #[arg(long, num_args = 2, value_names = ["LOW", "HIGH"], default_values_t = [1510.0, 1600.0])]
    band_nm: Vec<f64>,
    /// Band as center and full width in nm (overrides --band-nm).
    #[arg(long, num_args = 2, value_names = ["CENTER", "WIDTH"])]
    center_width_nm: Option<Vec<f64>>,
    /// Channel spacing in GHz: 50, 100 or 200.
    #[arg(long, default_value_t = 200)]
    spacing: u32,
    /// Conjugacy tolerance in GHz (default half the spacing).
    #[arg(long)]
    tolerance_ghz: Option<f64>,
    /// Only channels at or above 1520 nm.
    #[arg(long)]
    strict_itu: bool,
}

impl PlanArgs {
    fn options(&self) -> Result<PlanOptions> {
        let band = match &self.center_width_nm {
            Some(cw) => (cw[0] - cw[1] / 2.0, cw[0] + cw[1] / 2.0),
            None => (self.band_nm[0], self.band_nm[1]),
        };
        let mut opts = PlanOptions::from_wavelengths(self.pump_nm, band, Spacing::try_from(self.spacing)?)?;
        opts.conj_tolerance_ghz = self.tolerance_ghz;
        opts.strict_itu = self.strict_itu;
        Ok(opts)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Subcommand)]
enum GridCmd {
    /// Allocate frequency-conjugate channel pairs.
    Plan {
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Write plan.csv / plan.json here instead of stdout.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Conjugate wavelength of a channel for a pump.
    Conjugate {
        #[arg(long)]
        nm: f64,
        #[arg(long, default_value_t = 777.45)]
        pump_nm: f64,
        #[arg(long, default_value_t = 200)]
        spacing: u32,
    },
}

#[derive(Subcommand)]
enum NetCmd {
    /// Create a switch state file from a channel plan.
    Init {
        #[arg(long)]
        state: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
    },
    Register {
        #[arg(long)]
        state: PathBuf,
        name: String,
    },
    Connect {
        #[arg(long)]
        state: PathBuf,
        a: String,
        b: String,
    },
    Disconnect {
        #[arg(long)]
        state: PathBuf,
        pair_id: usize,
    },
    Status {
        #[arg(long)]
        state: PathBuf,
    },
}

#[derive(Subcommand)]
enum StateCmd {
    /// Fidelity, tangle and intrinsic QBERs of a state.
    Metrics {
        /// Text file with 16 complex entries, row-major, basis HH, HV, VH, VV.
        #[arg(long, group = "src")]
        file: Option<PathBuf>,
        #[arg(long, group = "src")]
        colored: Option<f64>,
        #[arg(long, group = "src")]
        aligned: Option<f64>,
        #[arg(long, group = "src")]
        werner: Option<f64>,
    },
}

#[derive(Subcommand)]
enum SimCmd {
    /// Simulate one link from the [source]/[alice]/[bob]/[analyzer]/[run] sections.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-party files <stem>_a.qtt and <stem>_b.qtt.
        #[arg(long)]
        split: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        duration: Option<f64>,
    },
}

#[derive(Args)]
struct TagInputs {
    /// Tag file holding Alice's events.
    #[arg(long)]
    a: PathBuf,
    /// Tag file holding Bob's events (may be the same file).
    #[arg(long)]
    b: PathBuf,
    /// Config whose [analyzer] section sets the slots.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl TagInputs {
    fn analyzer(&self) -> Result<AnalyzerMap> {
        match &self.config {
            Some(p) => Ok(ScenarioConfig::load(p)?.analyzer.unwrap_or_default()),
            None => Ok(AnalyzerMap::default()),
        }
    }
}

#[derive(Subcommand)]
enum KeysCmd {
    /// Coincidences, QBER and key rates for a pair of tag files.
    Analyze {
        #[command(flatten)]
        tags: TagInputs,
        #[arg(long)]
        t_acq: f64,
        #[arg(long, default_value_t = DEFAULT_F_EC)]
        f_ec: f64,
        /// Write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// 2D arrival-time histogram as CSV.
    Histogram {
        #[command(flatten)]
        tags: TagInputs,
        #[arg(long)]
        out: PathBuf,
    },
    /// QBER time series over fixed windows.
    Series {
        #[command(flatten)]
        tags: TagInputs,
        #[arg(long, default_value_t = 500.0)]
        window: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Project secure rates under hardware upgrades.
    Improve {
        /// Key-rate report (from `keys analyze --json`) or run report.
        #[arg(long)]
        base: PathBuf,
        /// Comma-separated subset of dual,splice,eff,rep.
        #[arg(long, default_value = "dual,splice,eff,rep")]
        factors: String,
        #[arg(long, default_value_t = 1)]
        channels: u32,
    },
    /// Check a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

/// A problem with user input rather than with execution.
#[derive(Debug)]
struct Invalid(String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<Invalid>()
            || e.is::<GridError>()
            || e.is::<StateError>()
            || matches!(e.downcast_ref::<ConfigError>(), Some(ConfigError::Invalid(_) | ConfigError::Parse { .. }))
            || matches!(
                e.downcast_ref::<NetError>(),
                Some(e) if !matches!(e, NetError::Corrupt(_) | NetError::UnsupportedVersion(_))
            )
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Grid(cmd) => grid(cmd),
        Command::Net(cmd) => net(cmd),
        Command::State(cmd) => state(cmd),
        Command::Sim(cmd) => sim(cmd),
        Command::Keys(cmd) => keys(cmd),
        Command::Scenario(cmd) => scenario(cmd),
        Command::Run { config, seed, out_dir } => run_config(&config, seed, out_dir),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn grid(cmd: GridCmd) -> Result<()> {
    match cmd {
        GridCmd::Plan { plan, format, out_dir } => {
            let plan = plan_channels(&plan.options()?)?;
            let (name, text) = match format {
                Format::Csv => ("plan.csv", plan.to_csv()),
                Format::Json => ("plan.json", serde_json::to_string_pretty(&plan)? + "\n"),
            };
            match out_dir {
                Some(dir) => {
                    let path = dir.join(name);
                    write_text(&path, &text)?;
                    eprintln!("{} pairs -> {}", plan.len(), path.display());
                }
                None => print!("{text}"),
            }
        }
        GridCmd::Conjugate { nm, pump_nm, spacing } => {
            let pump = wavelength_to_frequency(pump_nm)?;
            let ch = wavelength_to_frequency(nm)?;
            let conj = conjugate_of(ch, pump)?;
            let near = GridChannel::nearest(conj, Spacing::try_from(spacing)?)?;
            println!("channel   {:.3} nm  {:.5} THz", ch.wavelength_nm(), ch.thz());
            println!("conjugate {:.3} nm  {:.5} THz", conj.wavelength_nm(), conj.thz());
            println!(
                "nearest {}-GHz channel {} at {:.3} nm ({:+.1} GHz)",
                spacing,
                near.index,
                near.wavelength_nm(),
                conj.offset_ghz(near.center)
            );
        }
    }
    Ok(())
}

fn load_switch(path: &Path) -> Result<SwitchState> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SwitchState::from_json(&text).with_context(|| format!("loading {}", path.display()))
}

fn save_switch(path: &Path, s: &SwitchState) -> Result<()> {
    write_text(path, &s.to_json())
}

fn user(s: &SwitchState, name: &str) -> Result<qkdnet::net::UserId> {
    s.user_by_name(name)
        .ok_or_else(|| NetError::UnknownUser(name.to_string()).into())
}

fn net(cmd: NetCmd) -> Result<()> {
    match cmd {
        NetCmd::Init { state, plan } => {
            let plan = plan_channels(&plan.options()?)?;
            let n = plan.len();
            save_switch(&state, &SwitchState::new(plan))?;
            println!("initialized switch with {n} channel pairs");
        }
        NetCmd::Register { state, name } => {
            let mut s = load_switch(&state)?;
            let id = s.register(&name)?;
            save_switch(&state, &s)?;
            println!("registered {name} as user {}", id.0);
        }
        NetCmd::Connect { state, a, b } => {
            let mut s = load_switch(&state)?;
            let (ua, ub) = (user(&s, &a)?, user(&s, &b)?);
            match s.connect(ua, ub)? {
                ConnectOutcome::Granted(g) => println!(
                    "granted pair {}: {a} <- {:.2} nm, {b} <- {:.2} nm",
                    g.pair_id,
                    g.signal.wavelength_nm(),
                    g.idler.wavelength_nm()
                ),
                ConnectOutcome::Waitlisted { position } => {
                    println!("no free pair; {a}-{b} waitlisted at position {position}")
                }
            }
            save_switch(&state, &s)?;
        }
        NetCmd::Disconnect { state, pair_id } => {
            let mut s = load_switch(&state)?;
            let grants = s.disconnect(pair_id)?;
            println!("released pair {pair_id}");
            for g in grants {
                println!("granted pair {} to waitlisted users {} and {}", g.pair_id, g.user_a.0, g.user_b.0);
            }
            save_switch(&state, &s)?;
        }
        NetCmd::Status { state } => {
            let s = load_switch(&state)?;
            println!("{}", serde_json::to_string_pretty(&s.status())?);
        }
    }
    Ok(())
}

fn state(cmd: StateCmd) -> Result<()> {
    let StateCmd::Metrics { file, colored, aligned, werner } = cmd;
    let s = if let Some(path) = file {
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        text.parse::<TwoQubitState>()
            .with_context(|| format!("parsing {}", path.display()))?
    } else if let Some(v) = colored {
        TwoQubitState::colored_noise(v)?
    } else if let Some(v) = aligned {
        TwoQubitState::aligned_noise(v)?
    } else if let Some(p) = werner {
        TwoQubitState::werner(p)?
    } else {
        bail!(Invalid("give one of --file, --colored, --aligned, --werner".into()));
    };
    let (eh, ed) = s.intrinsic_qber();
    println!("fidelity to psi+   {:.6}", s.fidelity_to_psi_plus());
    println!("concurrence        {:.6}", s.concurrence()?);
    println!("tangle             {:.6}", s.tangle()?);
    println!("intrinsic QBER H/V {:.4} %", 100.0 * eh);
    println!("intrinsic QBER D/A {:.4} %", 100.0 * ed);
    Ok(())
}

fn sim(cmd: SimCmd) -> Result<()> {
    let SimCmd::Run { config, out, split, seed, duration } = cmd;
    let cfg = ScenarioConfig::load(&config)?;
    let phys = cfg.single_link()?;
    let duration = duration.unwrap_or(cfg.run.duration_s);
    let seed = SeedSpec::for_link(seed.unwrap_or(cfg.run.seed), cfg.run.link_id);
    let stream = simulate_run(&phys, duration, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_file(&out, &stream)?;
    println!(
        "{} events ({} A, {} B) -> {}",
        stream.len(),
        stream.count(Party::A),
        stream.count(Party::B),
        out.display()
    );
    if split {
        let stem = out.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        for (party, tag) in [(Party::A, "a"), (Party::B, "b")] {
            let path = out.with_file_name(format!("{stem}_{tag}.qtt"));
            write_file(&path, &stream.filter_party(party))?;
            println!("party {tag} -> {}", path.display());
        }
    }
    Ok(())
}

fn keys(cmd: KeysCmd) -> Result<()> {
    match cmd {
        KeysCmd::Analyze { tags, t_acq, f_ec, json } => {
            let analyzer = tags.analyzer()?;
            let (a, b) = (read_file(&tags.a)?, read_file(&tags.b)?);
            let (table, discarded) = table_from_tags(&a, &b, &analyzer)?;
            let report = KeyRateReport::from_table(&table, t_acq, f_ec)?;
            print!("{}", report.to_table());
            println!(
                "coincidences {} (ambiguous pulses dropped {}, out-of-slot events A {} B {})",
                table.total(),
                table.ambiguous_pulses,
                discarded[0],
                discarded[1]
            );
            println!("note: {}", report.caveat);
            if let Some(path) = json {
                write_text(&path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            }
        }
        KeysCmd::Histogram { tags, out } => {
            let (a, b) = (read_file(&tags.a)?, read_file(&tags.b)?);
            let h = histogram2d(&a, &b)?;
            write_text(&out, &h.to_csv())?;
            println!("{} same-pulse event pairs -> {}", h.total, out.display());
        }
        KeysCmd::Series { tags, window, out } => {
            let analyzer = tags.analyzer()?;
            let (a, b) = (read_file(&tags.a)?, read_file(&tags.b)?);
            let (tables, bounds) = window_tables_from_tags(&a, &b, &analyzer, window, None)?;
            let series = keyrate::stability_series(&tables, &bounds);
            let csv = series_csv(&series);
            match out {
                Some(path) => write_text(&path, &csv)?,
                None => print!("{csv}"),
            }
        }
    }
    Ok(())
}

fn base_reports(text: &str) -> Result<Vec<(String, KeyRateReport)>> {
    if let Ok(r) = serde_json::from_str::<KeyRateReport>(text) {
        return Ok(vec![("base".into(), r)]);
    }
    let run: RunReport = serde_json::from_str(text)
        .map_err(|e| Invalid(format!("neither a key-rate report nor a run report: {e}")))?;
    Ok(run
        .links
        .into_iter()
        .filter_map(|l| {
            let name = format!("pair {} ({}-{})", l.pair_id, l.users[0], l.users[1]);
            l.reference
                .or(l.simulated.and_then(|s| s.report))
                .or(l.model)
                .map(|r| (name, r))
        })
        .collect())
}

fn scenario(cmd: ScenarioCmd) -> Result<()> {
    match cmd {
        ScenarioCmd::Improve { base, factors, channels } => {
            let text = fs::read_to_string(&base).with_context(|| format!("reading {}", base.display()))?;
            let s = ImprovementScenario::from_names(factors.split(','), channels)
                .map_err(|e| Invalid(e.to_string()))?;
            for (name, report) in base_reports(&text)? {
                let p = project_scenario(&report, &s)?;
                println!(
                    "{name}: {:.2} bits/s x {} = {:.1} bits/s per channel; {} channels -> {:.1} bits/s",
                    p.base_bps, p.factor, p.per_channel_bps, p.channels, p.aggregate_bps
                );
            }
        }
        ScenarioCmd::Validate { config } => {
            let cfg = ScenarioConfig::load(&config)?;
            let diags = cfg.validate();
            if diags.is_empty() {
                println!("{}: ok", config.display());
            } else {
                return Err(ConfigError::Invalid(diags).into());
            }
        }
    }
    Ok(())
}

fn run_config(config: &Path, seed: Option<u64>, out_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg = ScenarioConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.run.seed = seed;
    }
    let mut run = run_scenario(&cfg)?;
    run.report.generated_at_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
    let dir = out_dir
        .or_else(|| cfg.output.dir.as_ref().map(|d| cfg.base_dir.join(d)))
        .unwrap_or_else(|| PathBuf::from("out"));
    let files = write_outputs(&run, &dir)?;
    for l in &run.report.links {
        println!("pair {} ({} - {}):", l.pair_id, l.users[0], l.users[1]);
        for (kind, r) in [
            ("reference", l.reference.as_ref()),
            ("model", l.model.as_ref()),
            ("simulated", l.simulated.as_ref().and_then(|s| s.report.as_ref())),
        ] {
            if let Some(r) = r {
                println!(
                    "  {kind:<10} sifted {:.1} ± {:.1}  QBER {:.2}/{:.2} %  secure {:.1} ± {:.1} bits/s",
                    r.sifted_rate.value,
                    r.sifted_rate.bar3,
                    100.0 * r.qber.e_h,
                    100.0 * r.qber.e_d,
                    r.secure_rate.value,
                    r.secure_rate.bar3
                );
            }
        }
    }
    for w in &run.report.waitlisted {
        println!("waitlisted: {} - {}", w[0], w[1]);
    }
    println!("{} files written to {}", files.len(), dir.display());
    Ok(())
}

//! Configuration files and the `harq-est` subcommands.
//!
//! A run is described by one TOML document:
//!
//! ```toml
//! [system]
//! a = [[2.4, 0.2], [0.2, 0.8]]
//! c = [[1.0, 1.0]]
//! q_w = [[1.0, 0.0], [0.0, 1.0]]
//! q_v = [[1.0]]
//!
//! [harq]
//! scheme = "cc"
//! snr_db = 10.0
//! blocklength = 100
//! rate = 4.0
//!
//! [channel.static]
//! gain = 2.0
//! ```
//!
//! plus optional `[solver]`, `[sim]` and `[output]` tables. Exactly one of
//! `[channel.static]` and `[channel.markov]` must be present; a Markov
//! transition matrix is written column-stochastic, entry `(j, i)` being the
//! probability of moving from state `i` to state `j`.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::channel::{MarkovChannel, StaticChannel};
use crate::harq::{
    worst_retransmission_error_markov, worst_retransmission_error_static, HarqModel, HarqScheme, HistoryCounter,
};
use crate::lti::{solve_steady_state, CostLadder, LtiSystem, SteadyStateKalman};
use crate::mdp::{CostMode, Policy};
use crate::mdp_markov::{
    build_markov_mdp, check_stability_markov, high_snr_markov, solve_rvi_markov, stability_region_grid,
    verify_switching_markov, MarkovState,
};
use crate::mdp_static::{
    build_static_mdp, check_stability_static, high_snr_optimal_static, solve_rvi, verify_switching, StabilityReport,
    StaticState,
};
use crate::numerics::Matrix;
use crate::simulator::{PolicySpec, PolicySummary, SimConfig, Simulator};
use crate::{Error, Result};

/// Rungs kept in the cost ladder; the trace overflows long before this.
pub const LADDER_CAP: usize = 4096;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CONVERGENCE: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;
pub const EXIT_IO: i32 = 1;

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Usage(_) | Error::Dimension(_) | Error::Model(_) => EXIT_CONFIG,
        Error::Convergence { .. } | Error::Instability { .. } | Error::DegenerateModel(_) => EXIT_CONVERGENCE,
        Error::Depth { .. } => EXIT_DIVERGED,
        Error::Io(_) => EXIT_IO,
    }
}

// ---------------------------------------------------------------- config file

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub system: SystemBlock,
    pub harq: HarqBlock,
    pub channel: ChannelBlock,
    #[serde(default)]
    pub solver: SolverBlock,
    #[serde(default)]
    pub sim: SimBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemBlock {
    pub a: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub q_w: Vec<Vec<f64>>,
    pub q_v: Vec<Vec<f64>>,
    pub sigma0: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarqBlock {
    pub scheme: HarqScheme,
    pub snr_db: f64,
    pub blocklength: u32,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelBlock {
    #[serde(rename = "static")]
    pub static_channel: Option<StaticBlock>,
    pub markov: Option<MarkovBlock>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticBlock {
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovBlock {
    pub gains: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverBlock {
    pub r_max: u32,
    pub q_max: u32,
    /// Per-channel caps on the history counter (Markov only).
    pub omega_caps: Option<Vec<u32>>,
    pub tol: f64,
    pub max_iters: usize,
    pub cost_mode: CostMode,
}

impl Default for SolverBlock {
    fn default() -> Self {
        Self { r_max: 20, q_max: 20, omega_caps: None, tol: 1e-9, max_iters: 100_000, cost_mode: CostMode::Mse }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimBlock {
    pub slots: usize,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for SimBlock {
    fn default() -> Self {
        Self { slots: 10_000, replicates: 20, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputBlock {
    pub directory: PathBuf,
    /// Any of "csv" and "json".
    pub formats: Vec<String>,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { directory: PathBuf::from("out"), formats: vec!["csv".into(), "json".into()] }
    }
}

impl OutputBlock {
    fn wants(&self, format: &str) -> bool {
        self.formats.iter().any(|f| f == format)
    }
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<Matrix> {
    let n = rows.len();
    let m = rows.first().map_or(0, Vec::len);
    if n == 0 || m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(Error::Config(format!("{field}: expected a non-empty rectangular matrix")));
    }
    Ok(Matrix::from_row_iterator(n, m, rows.iter().flatten().copied()))
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    fn validate(&self) -> Result<()> {
        match (&self.channel.static_channel, &self.channel.markov) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "channel: exactly one of [channel.static] and [channel.markov] is required".into(),
                ))
            }
        }
        if let (Some(m), Some(caps)) = (&self.channel.markov, &self.solver.omega_caps) {
            if caps.len() != m.gains.len() {
                return Err(Error::Config(format!(
                    "solver.omega_caps: {} entries for {} channel states",
                    caps.len(),
                    m.gains.len()
                )));
            }
        }
        if self.solver.tol.is_nan() || self.solver.tol <= 0.0 || self.solver.max_iters == 0 {
            return Err(Error::Config("solver: tol and max_iters must be positive".into()));
        }
        if self.sim.slots == 0 || self.sim.replicates == 0 {
            return Err(Error::Config("sim: slots and replicates must be at least 1".into()));
        }
        if let Some(f) = self.output.formats.iter().find(|f| *f != "csv" && *f != "json") {
            return Err(Error::Config(format!("output.formats: unknown format {f:?}")));
        }
        Ok(())
    }

    pub fn channel_kind(&self) -> ChannelKind {
        if self.channel.markov.is_some() {
            ChannelKind::Markov
        } else {
            ChannelKind::Static
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Static,
    Markov,
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChannelKind::Static => "static",
            ChannelKind::Markov => "markov",
        })
    }
}

/// A configuration turned into model objects.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: Config,
    pub system: LtiSystem,
    pub kalman: SteadyStateKalman,
    pub ladder: CostLadder,
    pub harq: Arc<HarqModel>,
    pub kind: ChannelKind,
    pub channel: MarkovChannel,
}

impl Model {
    pub fn build(config: Config) -> Result<Self> {
        let s = &config.system;
        let field = |name: &str, e: Error| match e {
            Error::Dimension(m) | Error::Model(m) => Error::Config(format!("{name}: {m}")),
            other => other,
        };
        let sigma0 = s.sigma0.as_deref().map(|m| matrix("system.sigma0", m)).transpose()?;
        let system = LtiSystem::new(
            matrix("system.a", &s.a)?,
            matrix("system.c", &s.c)?,
            matrix("system.q_w", &s.q_w)?,
            matrix("system.q_v", &s.q_v)?,
            sigma0,
        )
        .map_err(|e| field("system", e))?;
        let kalman = solve_steady_state(&system)?;
        let ladder = CostLadder::build_saturating(&system, &kalman, LADDER_CAP)?;
        let h = &config.harq;
        let harq = HarqModel::from_db(h.scheme, h.snr_db, h.blocklength, h.rate).map_err(|e| field("harq", e))?;
        let (kind, channel) = match (&config.channel.static_channel, &config.channel.markov) {
            (Some(st), _) => {
                (ChannelKind::Static, StaticChannel::new(st.gain).map_err(|e| field("channel.static", e))?.to_markov())
            }
            (None, Some(mk)) => {
                let pi = matrix("channel.markov.transition", &mk.transition)?;
                let ch = MarkovChannel::new(mk.gains.clone(), pi).map_err(|e| field("channel.markov", e))?;
                (ChannelKind::Markov, ch)
            }
            (None, None) => unreachable!("validated"),
        };
        Ok(Self { config, system, kalman, ladder, harq: Arc::new(harq), kind, channel })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::build(Config::load(path)?)
    }

    fn check_kind(&self, requested: Option<ChannelKind>) -> Result<()> {
        match requested {
            Some(k) if k != self.kind => {
                Err(Error::Config(format!("--channel {k} requested but the config describes a {} channel", self.kind)))
            }
            _ => Ok(()),
        }
    }

    fn static_gain(&self) -> f64 {
        self.channel.gains[0]
    }

    fn caps(&self) -> Vec<u32> {
        self.config.solver.omega_caps.clone().unwrap_or_else(|| vec![4; self.channel.num_states()])
    }

    /// Solved policy for the configured channel in the given cost mode.
    pub fn solve(&self, mode: CostMode) -> Result<Solved> {
        let sv = &self.config.solver;
        match self.kind {
            ChannelKind::Static => {
                let mdp = build_static_mdp(&self.ladder, &self.harq, self.static_gain(), sv.r_max, sv.q_max, mode)?;
                let mut p = solve_rvi(&mdp, sv.tol, sv.max_iters)?;
                p.meta.scheme = Some(self.harq.scheme.to_string());
                let violations = verify_switching(&p).violations.len();
                let zeta_mse = mdp_mse_of_static(self, &p)?;
                Ok(Solved { policy: SolvedPolicy::Static(Arc::new(p)), violations, average_mse: zeta_mse })
            }
            ChannelKind::Markov => {
                let caps = self.caps();
                let mdp = build_markov_mdp(&self.ladder, &self.harq, &self.channel, &caps, sv.q_max, mode)?;
                let mut p = solve_rvi_markov(&mdp, sv.tol, sv.max_iters)?;
                p.meta.scheme = Some(self.harq.scheme.to_string());
                let violations = verify_switching_markov(&p).violations.len();
                let mse = if mode == CostMode::Mse {
                    mdp.evaluate(&p)?
                } else {
                    let mse_mdp =
                        build_markov_mdp(&self.ladder, &self.harq, &self.channel, &caps, sv.q_max, CostMode::Mse)?;
                    mse_mdp.evaluate(&p)?
                };
                Ok(Solved { policy: SolvedPolicy::Markov(Arc::new(p)), violations, average_mse: mse })
            }
        }
    }

    pub fn stability(&self) -> Result<StabilityOutcome> {
        let rho_sq = self.system.rho_sq()?;
        let sv = &self.config.solver;
        match self.kind {
            ChannelKind::Static => {
                let w = worst_retransmission_error_static(&self.harq, self.static_gain(), sv.r_max.max(2) as usize)?;
                let rep = check_stability_static(w.value, rho_sq);
                Ok(StabilityOutcome { rho_sq, lambdas: vec![w.value], report: rep.into() })
            }
            ChannelKind::Markov => {
                let budget: u32 = self.caps().iter().sum();
                let lambdas = (0..self.channel.num_states())
                    .map(|i| {
                        worst_retransmission_error_markov(&self.harq, &self.channel.gains, i, budget).map(|w| w.value)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let rep = check_stability_markov(&self.channel.pi, &lambdas, rho_sq)?;
                Ok(StabilityOutcome { rho_sq, lambdas, report: rep.into() })
            }
        }
    }

    /// New-transmission error per channel state.
    pub fn new_transmission_errors(&self) -> Result<Vec<f64>> {
        let b = self.channel.num_states();
        (0..b)
            .map(|i| self.harq.conditional_error_indexed(&self.channel.gains, &HistoryCounter::zero(b), i))
            .collect()
    }

    pub fn simulator(&self) -> Simulator {
        Simulator::new(self.ladder.clone(), self.harq.clone(), self.channel.clone())
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            slots: self.config.sim.slots,
            replicates: self.config.sim.replicates,
            base_seed: self.config.sim.seed,
            ..Default::default()
        }
    }
}

fn mdp_mse_of_static(model: &Model, p: &Policy<StaticState>) -> Result<f64> {
    let sv = &model.config.solver;
    let mdp = build_static_mdp(&model.ladder, &model.harq, model.static_gain(), sv.r_max, sv.q_max, CostMode::Mse)?;
    mdp.evaluate(p)
}

#[derive(Debug, Clone)]
pub enum SolvedPolicy {
    Static(Arc<Policy<StaticState>>),
    Markov(Arc<Policy<MarkovState>>),
}

impl SolvedPolicy {
    pub fn spec(&self) -> PolicySpec {
        match self {
            SolvedPolicy::Static(p) => PolicySpec::StaticTable(p.clone()),
            SolvedPolicy::Markov(p) => PolicySpec::MarkovTable(p.clone()),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        match self {
            SolvedPolicy::Static(p) => p.to_json(),
            SolvedPolicy::Markov(p) => p.to_json(),
        }
    }

    fn meta(&self) -> &crate::mdp::PolicyMeta {
        match self {
            SolvedPolicy::Static(p) => &p.meta,
            SolvedPolicy::Markov(p) => &p.meta,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solved {
    pub policy: SolvedPolicy,
    /// Switching-structure violations found in the table.
    pub violations: usize,
    /// Exact long-run MSE of the table on the truncated chain.
    pub average_mse: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityOutcome {
    pub rho_sq: f64,
    /// Worst-case retransmission error per channel state.
    pub lambdas: Vec<f64>,
    #[serde(flatten)]
    pub report: StabilityReportOut,
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReportOut {
    pub product: f64,
    pub stable: bool,
}

impl From<StabilityReport> for StabilityReportOut {
    fn from(r: StabilityReport) -> Self {
        Self { product: r.product, stable: r.stable }
    }
}

// ----------------------------------------------------------------- arguments

#[derive(Debug, Parser)]
#[command(name = "harq-est", version, about = "Retransmission control for HARQ-based remote estimation")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides output.directory).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Base seed (overrides sim.seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check the sufficient stability condition.
    Stability {
        /// Override harq.snr_db.
        #[arg(long)]
        snr_db: Option<f64>,
        /// Cells per axis of the Markov region grid.
        #[arg(long, default_value_t = 100)]
        resolution: usize,
    },
    /// Solve the truncated MDP and export the policy.
    Solve {
        #[arg(long)]
        channel: Option<ChannelKind>,
        #[arg(long)]
        cost: Option<CostMode>,
    },
    /// Simulate a policy and optionally compare it with others.
    Simulate {
        /// A policy file or one of optimal, delay, myopic, no-retx, psi.
        #[arg(long, default_value = "optimal")]
        policy: String,
        /// Further policies to evaluate on the same random numbers.
        #[arg(long, value_delimiter = ',')]
        compare: Vec<String>,
        #[arg(long)]
        channel: Option<ChannelKind>,
    },
    /// Optimal thresholds when retransmissions always succeed.
    Highsnr {
        #[arg(long, default_value_t = 8)]
        theta_max: u32,
    },
    /// Solve over a grid of SNRs and both HARQ schemes.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = vec![5.0, 10.0, 15.0])]
        snr_db: Vec<f64>,
    },
}

// ------------------------------------------------------------------ commands

struct Ctx {
    model: Model,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli, snr_override: Option<f64>) -> Result<Self> {
        let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
        let mut config = Config::load(path)?;
        if let Some(db) = snr_override {
            config.harq.snr_db = db;
        }
        if let Some(seed) = cli.seed {
            config.sim.seed = seed;
        }
        let out = cli.out.clone().unwrap_or_else(|| config.output.directory.clone());
        fs::create_dir_all(&out)?;
        Ok(Self { model: Model::build(config)?, out })
    }

    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.out.join(name);
        fs::write(&p, contents)?;
        Ok(p)
    }

    fn wants(&self, f: &str) -> bool {
        self.model.config.output.wants(f)
    }
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Io(e.to_string()))
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match &cli.command {
        Command::Stability { snr_db, resolution } => cmd_stability(&Ctx::new(&cli, *snr_db)?, *resolution),
        Command::Solve { channel, cost } => cmd_solve(&Ctx::new(&cli, None)?, *channel, *cost),
        Command::Simulate { policy, compare, channel } => cmd_simulate(&Ctx::new(&cli, None)?, policy, compare, *channel),
        Command::Highsnr { theta_max } => cmd_highsnr(&Ctx::new(&cli, None)?, *theta_max),
        Command::Sweep { snr_db } => cmd_sweep(&cli, snr_db),
    }
}

/// `ρ²(A)` values of the Markov region grid.
pub const REGION_RHO_SQ: [f64; 4] = [1.1, 2.0, 3.0, 5.0];

fn cmd_stability(ctx: &Ctx, resolution: usize) -> Result<i32> {
    let m = &ctx.model;
    let out = m.stability()?;
    println!("rho^2(A) = {:.6}", out.rho_sq);
    println!("worst-case retransmission error: {:?}", out.lambdas);
    println!("product = {:.6e}", out.report.product);
    println!(
        "{}",
        if out.report.stable { "stable: product < 1" } else { "not certified stable: product >= 1" }
    );
    ctx.write("stability.json", &json(&out)?)?;
    if m.kind == ChannelKind::Markov && m.channel.num_states() == 2 {
        let grid = stability_region_grid(&m.channel.pi, &REGION_RHO_SQ, resolution)?;
        let mut csv = String::from("rho_sq,lambda1,lambda2,stable\n");
        for c in &grid {
            csv.push_str(&format!("{},{},{},{}\n", c.rho_sq, c.lambda1, c.lambda2, u8::from(c.stable)));
        }
        let p = ctx.write("stability_region.csv", &csv)?;
        for rs in REGION_RHO_SQ {
            let n = grid.iter().filter(|c| c.rho_sq == rs && c.stable).count();
            println!("rho^2 = {rs}: {n} stable cells");
        }
        println!("region grid written to {}", p.display());
    }
    Ok(EXIT_OK)
}

fn cmd_solve(ctx: &Ctx, channel: Option<ChannelKind>, cost: Option<CostMode>) -> Result<i32> {
    let m = &ctx.model;
    m.check_kind(channel)?;
    let mode = cost.unwrap_or(m.config.solver.cost_mode);
    let solved = m.solve(mode)?;
    let meta = solved.policy.meta();
    let name = format!("policy_{}_{}_{}.json", m.kind, m.harq.scheme, mode);
    let path = ctx.write(&name, &solved.policy.to_json()?)?;
    println!("{} {} policy, {} cost", m.kind, m.harq.scheme, mode);
    println!(
        "zeta = {:.10}  span = {:.3e}  iterations = {}",
        meta.zeta.unwrap_or(f64::NAN),
        meta.span.unwrap_or(f64::NAN),
        meta.iterations.unwrap_or(0)
    );
    println!("average MSE on the truncated chain = {:.10}", solved.average_mse);
    if solved.violations == 0 {
        println!("switching structure: pass");
    } else {
        println!("switching structure: FAIL ({} violations)", solved.violations);
    }
    println!("policy written to {}", path.display());
    Ok(EXIT_OK)
}

fn policy_spec(ctx: &Ctx, name: &str) -> Result<PolicySpec> {
    let m = &ctx.model;
    Ok(match name {
        "optimal" => m.solve(CostMode::Mse)?.policy.spec(),
        "delay" => m.solve(CostMode::Delay)?.policy.spec(),
        "myopic" => PolicySpec::Myopic,
        "no-retx" => PolicySpec::NoRetransmission,
        "psi" => PolicySpec::AlwaysRetransmitPsi,
        path => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("policy {path:?} is neither a known name nor a readable file: {e}")))?;
            match m.kind {
                ChannelKind::Static => PolicySpec::StaticTable(Arc::new(Policy::<StaticState>::from_json(&text)?)),
                ChannelKind::Markov => PolicySpec::MarkovTable(Arc::new(Policy::<MarkovState>::from_json(&text)?)),
            }
        }
    })
}

fn cmd_simulate(ctx: &Ctx, policy: &str, compare: &[String], channel: Option<ChannelKind>) -> Result<i32> {
    let m = &ctx.model;
    m.check_kind(channel)?;
    let sim = m.simulator();
    let cfg = m.sim_config();
    let primary = policy_spec(ctx, policy)?;

    let trace = sim.run(&primary, &cfg, 0)?;
    let mut buf = Vec::new();
    trace.write_csv(&mut buf)?;
    let trace_path = ctx.out.join("trace.csv");
    fs::write(&trace_path, buf)?;
    println!("trace of replicate 0 written to {}", trace_path.display());

    let mut specs = vec![primary];
    for c in compare {
        specs.push(policy_spec(ctx, c)?);
    }
    let mut labels = vec![policy.to_string()];
    labels.extend(compare.iter().cloned());
    let summaries = sim.evaluate_policies(&specs, &cfg)?;
    write_comparison(ctx, &labels, &summaries)?;

    println!("{:<24} {:>16} {:>12} {:>9} {:>10}", "policy", "mean MSE", "std err", "diverged", "gap");
    for (l, s) in labels.iter().zip(&summaries) {
        println!(
            "{:<24} {:>16.6} {:>12.4e} {:>9} {:>10.4}",
            l, s.mean, s.std_err, s.diverged, s.stabilization_gap
        );
    }
    if summaries[0].diverged > 0 || trace.diverged() {
        println!("policy {policy}: divergence detected");
        return Ok(EXIT_DIVERGED);
    }
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct ComparisonRow<'a> {
    label: &'a str,
    #[serde(flatten)]
    summary: &'a PolicySummary,
}

fn write_comparison(ctx: &Ctx, labels: &[String], summaries: &[PolicySummary]) -> Result<()> {
    if ctx.wants("json") {
        let rows: Vec<ComparisonRow> =
            labels.iter().zip(summaries).map(|(l, s)| ComparisonRow { label: l, summary: s }).collect();
        ctx.write("comparison.json", &json(&rows)?)?;
    }
    if ctx.wants("csv") {
        let mut csv = String::from("policy,replicates,mean,std_err,diverged,stabilization_gap\n");
        for (l, s) in labels.iter().zip(summaries) {
            csv.push_str(&format!(
                "{},{},{},{},{},{}\n",
                l, s.replicates, s.mean, s.std_err, s.diverged, s.stabilization_gap
            ));
        }
        ctx.write("comparison.csv", &csv)?;

        let len = summaries.iter().map(|s| s.mean_trajectory.len()).min().unwrap_or(0);
        let mut traj = String::from("k");
        for l in labels {
            traj.push(',');
            traj.push_str(l);
        }
        traj.push('\n');
        for k in 0..len {
            traj.push_str(&(k + 1).to_string());
            for s in summaries {
                traj.push_str(&format!(",{}", s.mean_trajectory[k]));
            }
            traj.push('\n');
        }
        ctx.write("trajectories.csv", &traj)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct HighSnrOut {
    new_transmission_errors: Vec<f64>,
    theta: Vec<u32>,
    zeta: f64,
}

fn cmd_highsnr(ctx: &Ctx, theta_max: u32) -> Result<i32> {
    let m = &ctx.model;
    let lp = m.new_transmission_errors()?;
    let (theta, zeta) = match m.kind {
        ChannelKind::Static => {
            let (t, z) = high_snr_optimal_static(&m.ladder, lp[0], theta_max)?;
            (vec![t], z)
        }
        ChannelKind::Markov => high_snr_markov(&m.ladder, &m.channel.pi, &lp, theta_max)?,
    };
    println!("new-transmission error: {lp:?}");
    println!("optimal thresholds: {theta:?}");
    println!("zeta = {zeta:.10}");
    ctx.write("highsnr.json", &json(&HighSnrOut { new_transmission_errors: lp, theta, zeta })?)?;
    Ok(EXIT_OK)
}

fn cmd_sweep(cli: &Cli, snrs: &[f64]) -> Result<i32> {
    let base = Ctx::new(cli, None)?;
    let mut csv = String::from("snr_db,scheme,channel,stable,product,zeta,average_mse,span,iterations,violations\n");
    let mut all_pass = true;
    for &db in snrs {
        for scheme in [HarqScheme::Cc, HarqScheme::Ir] {
            let mut cfg = base.model.config.clone();
            cfg.harq.snr_db = db;
            cfg.harq.scheme = scheme;
            let model = Model::build(cfg)?;
            let stab = model.stability()?;
            let solved = model.solve(model.config.solver.cost_mode)?;
            let meta = solved.policy.meta();
            all_pass &= solved.violations == 0;
            println!(
                "{db:>6} dB {scheme}: stable={} zeta={:.6} violations={}",
                stab.report.stable,
                meta.zeta.unwrap_or(f64::NAN),
                solved.violations
            );
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                db,
                scheme,
                model.kind,
                u8::from(stab.report.stable),
                stab.report.product,
                meta.zeta.unwrap_or(f64::NAN),
                solved.average_mse,
                meta.span.unwrap_or(f64::NAN),
                meta.iterations.unwrap_or(0),
                solved.violations
            ));
        }
    }
    let p = base.write("sweep.csv", &csv)?;
    println!("switching structure: {}", if all_pass { "pass" } else { "FAIL" });
    println!("sweep written to {}", p.display());
    Ok(EXIT_OK)
}

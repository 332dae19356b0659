//! Command implementations behind the `rcne` binary.
//!
//! Every output file carries the configuration hash, and commands that read
//! a solution refuse one computed for a different configuration.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::best_response::{initial_profile, AgentSolution, ConstraintMargins, Mode};
use crate::error::{Error, Result};
use crate::game::Game;
use crate::ibr::{run_ibr, RcneSolution};
use crate::scenario::{bundled, load_scenario, ScenarioConfig, BUNDLED};
use crate::simulate::{monte_carlo, MonteCarloReport, RolloutOutcome};

/// Widest state and control among the bundled models; CSV columns are padded to these.
pub const CSV_STATE_COLUMNS: usize = 12;
pub const CSV_CONTROL_COLUMNS: usize = 4;

#[derive(Debug, Parser)]
#[command(name = "rcne", version, about = "Robust constrained Nash equilibria for multi-agent games")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve a scenario and write solution.json and manifest.json.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Monte-Carlo rollouts of a stored solution; writes rollouts.csv and report.json.
    Rollout {
        #[command(flatten)]
        common: Common,
        /// Solution file; defaults to solution.json in the output directory.
        #[arg(long)]
        solution: Option<PathBuf>,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Robust solution against the nominal baseline under identical noise.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Robust solution file; solved on the fly when absent.
        #[arg(long)]
        robust: Option<PathBuf>,
        /// Baseline solution file; solved on the fly when absent.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Print the bundled scenario names.
    ListScenarios,
    /// Check a configuration without solving.
    Validate {
        #[arg(long)]
        config: String,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Scenario file or bundled scenario name.
    #[arg(long)]
    pub config: String,
    /// Output directory; the config's `output_dir`, else `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct Sampling {
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Robust,
    Nominal,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Robust => Mode::Robust,
            ModeArg::Nominal => Mode::Nominal,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GainBlock {
    pub t: usize,
    pub tau: usize,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentRecord {
    pub id: String,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    /// Blocks `K_{t,tau}` for `t < T`, `tau <= t`; empty for static agents.
    pub gains: Vec<GainBlock>,
    pub rho: Vec<f64>,
}

/// Contents of `solution.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub config_hash: String,
    pub scenario: String,
    pub mode: Mode,
    pub iterations: usize,
    pub converged: bool,
    pub delta_history: Vec<f64>,
    /// Absent when the game has no constraints.
    pub worst_margin: Option<f64>,
    pub agents: Vec<AgentRecord>,
    pub margins: Vec<ConstraintMargins>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub scenario: String,
    pub config_hash: String,
    pub mode: Mode,
    pub status: String,
    pub iterations: usize,
    pub wall_seconds: f64,
    pub sweep_seconds: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worst_margin: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub version: String,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub config_hash: String,
    pub scenario: String,
    pub mode: Mode,
    #[serde(flatten)]
    pub report: MonteCarloReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedMetrics {
    pub robust_violation_rate: f64,
    pub baseline_violation_rate: f64,
    pub robust_mean_goal_deviation: f64,
    pub baseline_mean_goal_deviation: f64,
}

/// Contents of `compare.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareFile {
    pub config_hash: String,
    pub scenario: String,
    pub count: usize,
    pub master_seed: u64,
    pub paired: PairedMetrics,
    pub robust: MonteCarloReport,
    pub baseline: MonteCarloReport,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

fn to_vecs(v: &[DVector<f64>]) -> Vec<Vec<f64>> {
    v.iter().map(|x| x.as_slice().to_vec()).collect()
}

impl SolutionFile {
    pub fn new(cfg: &ScenarioConfig, game: &Game, sol: &RcneSolution) -> Self {
        let agents = game
            .agents
            .iter()
            .zip(&sol.agents)
            .map(|(a, s)| {
                let mut gains = Vec::new();
                if a.control_dim() > 0 {
                    for t in 0..s.gains.horizon() {
                        for tau in 0..=t {
                            let k = s.gains.get(t, tau);
                            let rows = (0..k.nrows()).map(|r| k.row(r).iter().copied().collect()).collect();
                            gains.push(GainBlock { t, tau, rows });
                        }
                    }
                }
                AgentRecord {
                    id: a.id.clone(),
                    states: to_vecs(&s.trajectory.states),
                    controls: to_vecs(&s.trajectory.controls),
                    gains,
                    rho: s.bounds.rho.clone(),
                }
            })
            .collect();
        Self {
            config_hash: cfg.hash(),
            scenario: cfg.name.clone(),
            mode: sol.mode,
            iterations: sol.iterations,
            converged: sol.converged,
            delta_history: sol.delta_history.clone(),
            worst_margin: finite(sol.worst_margin()),
            agents,
            margins: sol.margins.clone(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Rebuilds the policies after checking the file belongs to `cfg`.
    ///
    /// Gains, responses and tubes are recomputed from the stored controls
    /// and must reproduce the stored states.
    pub fn restore(&self, cfg: &ScenarioConfig, game: &Game) -> Result<Vec<AgentSolution>> {
        let expected = cfg.hash();
        if self.config_hash != expected {
            return Err(Error::StaleSolution { expected, found: self.config_hash.clone() });
        }
        if self.agents.len() != game.num_agents() {
            return Err(Error::InvalidInput("solution file does not match the game".into()));
        }
        let mut out = Vec::with_capacity(self.agents.len());
        for (i, rec) in self.agents.iter().enumerate() {
            if rec.id != game.agents[i].id {
                return Err(Error::InvalidInput(format!("solution agent {} does not match {}", rec.id, game.agents[i].id)));
            }
            let controls = rec.controls.iter().map(|u| DVector::from_vec(u.clone())).collect();
            let sol = AgentSolution::from_controls(game, i, controls, self.mode)?;
            let drift = sol
                .trajectory
                .states
                .iter()
                .zip(&rec.states)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .fold(0.0, f64::max);
            if rec.states.len() != sol.trajectory.states.len() || !(drift <= 1e-9) {
                return Err(Error::InvalidInput(format!("stored states of {} do not match their controls", rec.id)));
            }
            out.push(sol);
        }
        Ok(out)
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn output_dir(cfg: &ScenarioConfig, out: Option<&Path>) -> Result<PathBuf> {
    let dir = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

/// Runs IBR in `mode` from the rest-control initial profile.
pub fn solve(cfg: &ScenarioConfig, game: &Game, mode: Mode) -> Result<RcneSolution> {
    let init = initial_profile(game, mode)?;
    let ibr = crate::ibr::IbrConfig { mode, ..cfg.ibr.clone() };
    run_ibr(game, init, &ibr, &cfg.solver)
}

/// Solves and writes `solution.json` and `manifest.json` into `out`.
///
/// An infeasible solve still writes the manifest, with the worst margin.
pub fn cmd_solve(cfg: &ScenarioConfig, mode: Option<Mode>, out: &Path) -> Result<SolutionFile> {
    let game = cfg.validate()?;
    let mode = mode.unwrap_or(cfg.ibr.mode);
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let result = solve(cfg, &game, mode);
    let wall_seconds = start.elapsed().as_secs_f64();
    let mut manifest = Manifest {
        command: "solve".into(),
        scenario: cfg.name.clone(),
        config_hash: cfg.hash(),
        mode,
        status: "ok".into(),
        iterations: 0,
        wall_seconds,
        sweep_seconds: vec![],
        worst_margin: None,
        error: None,
        version: env!("CARGO_PKG_VERSION").into(),
    };
    match result {
        Ok(sol) => {
            let file = SolutionFile::new(cfg, &game, &sol);
            manifest.iterations = sol.iterations;
            manifest.sweep_seconds = sol.sweep_seconds.clone();
            manifest.worst_margin = file.worst_margin;
            write_json(&out.join("solution.json"), &file)?;
            write_json(&out.join("manifest.json"), &manifest)?;
            Ok(file)
        }
        Err(e) => {
            manifest.status = "failed".into();
            if let Error::RcneInfeasible { worst_margin, .. } | Error::BestResponseInfeasible { worst_margin, .. } = &e {
                manifest.status = "infeasible".into();
                manifest.worst_margin = finite(*worst_margin);
            }
            manifest.error = Some(e.to_string());
            write_json(&out.join("manifest.json"), &manifest)?;
            Err(e)
        }
    }
}

fn check_count(count: usize) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidInput("rollout count must be at least 1".into()));
    }
    Ok(())
}

/// Writes one row per rollout, step and agent.
pub fn write_rollouts_csv(path: &Path, game: &Game, config_hash: &str, outcomes: &[RolloutOutcome]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# config_hash={config_hash}")?;
    let mut header = String::from("rollout,t,agent");
    for k in 0..CSV_STATE_COLUMNS {
        write!(header, ",x{k}").unwrap();
    }
    for k in 0..CSV_CONTROL_COLUMNS {
        write!(header, ",u{k}").unwrap();
    }
    header.push_str(",worst_margin");
    writeln!(w, "{header}")?;
    let mut line = String::new();
    for (j, outcome) in outcomes.iter().enumerate() {
        let Ok(r) = outcome else { continue };
        for t in 0..=game.horizon {
            for (i, a) in game.agents.iter().enumerate() {
                line.clear();
                write!(line, "{j},{t},{}", a.id).unwrap();
                let x = &r.states[i][t];
                let u = &r.controls[i][t];
                for k in 0..CSV_STATE_COLUMNS {
                    line.push(',');
                    if k < x.len() {
                        write!(line, "{:.16e}", x[k]).unwrap();
                    }
                }
                for k in 0..CSV_CONTROL_COLUMNS {
                    line.push(',');
                    if k < u.len() {
                        write!(line, "{:.16e}", u[k]).unwrap();
                    }
                }
                line.push(',');
                let m = r.agent_worst[t][i];
                if m.is_finite() {
                    write!(line, "{m:.16e}").unwrap();
                }
                writeln!(w, "{line}")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Rolls out a stored solution and writes `rollouts.csv` and `report.json`.
pub fn cmd_rollout(
    cfg: &ScenarioConfig,
    solution: &Path,
    count: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<ReportFile> {
    let game = cfg.validate()?;
    let count = count.unwrap_or(cfg.monte_carlo.count);
    let seed = seed.unwrap_or(cfg.monte_carlo.seed);
    check_count(count)?;
    let file = SolutionFile::read(solution)?;
    let sols = file.restore(cfg, &game)?;
    fs::create_dir_all(out)?;
    let (report, outcomes) = monte_carlo(&game, &sols, &cfg.noise, seed, count)?;
    write_rollouts_csv(&out.join("rollouts.csv"), &game, &file.config_hash, &outcomes)?;
    let report = ReportFile {
        config_hash: file.config_hash,
        scenario: cfg.name.clone(),
        mode: file.mode,
        report,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

fn solution_for(cfg: &ScenarioConfig, game: &Game, path: Option<&Path>, mode: Mode) -> Result<Vec<AgentSolution>> {
    match path {
        Some(p) => {
            let file = SolutionFile::read(p)?;
            if file.mode != mode {
                return Err(Error::InvalidInput(format!("{} holds a {:?} solution", p.display(), file.mode)));
            }
            file.restore(cfg, game)
        }
        None => Ok(solve(cfg, game, mode)?.agents),
    }
}

/// Applies the same noise seeds to the robust solution and the baseline.
pub fn cmd_compare(
    cfg: &ScenarioConfig,
    robust: Option<&Path>,
    baseline: Option<&Path>,
    count: Option<usize>,
    seed: Option<u64>,
    out: &Path,
) -> Result<CompareFile> {
    let game = cfg.validate()?;
    let count = count.unwrap_or(cfg.monte_carlo.count);
    let seed = seed.unwrap_or(cfg.monte_carlo.seed);
    check_count(count)?;
    let robust_sols = solution_for(cfg, &game, robust, Mode::Robust)?;
    let baseline_sols = solution_for(cfg, &game, baseline, Mode::Nominal)?;
    fs::create_dir_all(out)?;
    let (r, _) = monte_carlo(&game, &robust_sols, &cfg.noise, seed, count)?;
    let (b, _) = monte_carlo(&game, &baseline_sols, &cfg.noise, seed, count)?;
    let cmp = CompareFile {
        config_hash: cfg.hash(),
        scenario: cfg.name.clone(),
        count,
        master_seed: seed,
        paired: PairedMetrics {
            robust_violation_rate: r.violation_rate,
            baseline_violation_rate: b.violation_rate,
            robust_mean_goal_deviation: r.mean_goal_deviation,
            baseline_mean_goal_deviation: b.mean_goal_deviation,
        },
        robust: r,
        baseline: b,
    };
    write_json(&out.join("compare.json"), &cmp)?;
    Ok(cmp)
}

/// One line per bundled scenario: name, agents, horizon and description.
pub fn cmd_list_scenarios() -> String {
    let mut s = String::new();
    for name in BUNDLED {
        let cfg = bundled(name).expect("bundled scenario");
        writeln!(s, "{name}\tagents={}\tT={}\t{}", cfg.game.agents.len(), cfg.game.horizon, cfg.description).unwrap();
    }
    s
}

/// Validates a configuration and summarizes it.
pub fn cmd_validate(path_or_name: &str) -> Result<String> {
    let cfg = load_scenario(path_or_name)?;
    let game = cfg.validate()?;
    Ok(format!(
        "{}: ok (agents={}, shared constraints={}, T={}, hash={})",
        cfg.name,
        game.num_agents(),
        game.shared.len(),
        game.horizon,
        cfg.hash()
    ))
}

/// Dispatches a parsed command line.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Solve { common, mode } => {
            let cfg = load_scenario(&common.config)?;
            let out = output_dir(&cfg, common.out.as_deref())?;
            let file = cmd_solve(&cfg, mode.map(Mode::from), &out)?;
            println!(
                "solved {} ({:?}) in {} sweeps, worst margin {:?}; wrote {}",
                file.scenario,
                file.mode,
                file.iterations,
                file.worst_margin,
                out.display()
            );
        }
        Command::Rollout { common, solution, sampling } => {
            let cfg = load_scenario(&common.config)?;
            let out = output_dir(&cfg, common.out.as_deref())?;
            let solution = solution.unwrap_or_else(|| out.join("solution.json"));
            let r = cmd_rollout(&cfg, &solution, sampling.count, sampling.seed, &out)?;
            println!(
                "{} rollouts: violation rate {}, tube exceedance rate {}, mean goal deviation {}",
                r.report.count, r.report.violation_rate, r.report.tube_exceedance_rate, r.report.mean_goal_deviation
            );
        }
        Command::Compare { common, robust, baseline, sampling } => {
            let cfg = load_scenario(&common.config)?;
            let out = output_dir(&cfg, common.out.as_deref())?;
            let c = cmd_compare(&cfg, robust.as_deref(), baseline.as_deref(), sampling.count, sampling.seed, &out)?;
            println!(
                "violation rate robust {} baseline {}; mean goal deviation robust {} baseline {}",
                c.paired.robust_violation_rate,
                c.paired.baseline_violation_rate,
                c.paired.robust_mean_goal_deviation,
                c.paired.baseline_mean_goal_deviation
            );
        }
        Command::ListScenarios => print!("{}", cmd_list_scenarios()),
        Command::Validate { config } => println!("{}", cmd_validate(&config)?),
    }
    Ok(())
}

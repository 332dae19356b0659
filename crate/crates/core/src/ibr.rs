//! Iterative best response with step-size blending.

use serde::{Deserialize, Serialize};

use crate::best_response::{
    solve_best_response, tightened_margins, worst_margin, AgentSolution, BestResponseOptions, ConstraintMargins,
    Mode, FEASIBILITY_TOLERANCE,
};
use crate::error::{Error, Result};
use crate::game::Game;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IbrConfig {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub step_size: f64,
    /// Append one sweep with unit step size after the loop ends.
    pub final_full_step: bool,
    pub mode: Mode,
    /// Agent ids in sweep order; declaration order when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<Vec<String>>,
}

impl Default for IbrConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            tolerance: 1e-3,
            step_size: 1.0,
            final_full_step: true,
            mode: Mode::Robust,
            order: None,
        }
    }
}

impl IbrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 || !(self.tolerance > 0.0) || !(0.0..=1.0).contains(&self.step_size) {
            return Err(Error::InvalidInput(format!("invalid IBR configuration {self:?}")));
        }
        Ok(())
    }

    fn sweep_order(&self, game: &Game) -> Result<Vec<usize>> {
        match &self.order {
            None => Ok((0..game.num_agents()).collect()),
            Some(ids) => ids
                .iter()
                .map(|id| game.agent_index(id).ok_or_else(|| Error::InvalidInput(format!("unknown agent {id:?} in order"))))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RcneSolution {
    pub agents: Vec<AgentSolution>,
    pub mode: Mode,
    pub iterations: usize,
    pub delta_history: Vec<f64>,
    pub converged: bool,
    pub margins: Vec<ConstraintMargins>,
    /// Wall time of each sweep in seconds.
    pub sweep_seconds: Vec<f64>,
}

impl RcneSolution {
    pub fn worst_margin(&self) -> f64 {
        worst_margin(&self.margins)
    }
}

fn diff_norm<'a>(a: impl Iterator<Item = &'a f64>, b: impl Iterator<Item = &'a f64>) -> f64 {
    a.zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Largest change of any solution component between two iterates.
pub fn solution_delta(old: &AgentSolution, new: &AgentSolution) -> f64 {
    let dz = diff_norm(
        old.trajectory.states.iter().flat_map(|x| x.iter()),
        new.trajectory.states.iter().flat_map(|x| x.iter()),
    );
    let dv = diff_norm(
        old.trajectory.controls.iter().flat_map(|x| x.iter()),
        new.trajectory.controls.iter().flat_map(|x| x.iter()),
    );
    let dphi = old
        .response
        .iter_blocks()
        .zip(new.response.iter_blocks())
        .map(|((_, _, a), (_, _, b))| (a - b).norm())
        .fold(0.0, f64::max);
    let drho = diff_norm(old.bounds.rho.iter(), new.bounds.rho.iter());
    dz.max(dv).max(dphi).max(drho)
}

fn blend(game: &Game, i: usize, old: &AgentSolution, new: AgentSolution, alpha: f64, mode: Mode) -> Result<AgentSolution> {
    if alpha == 1.0 {
        return Ok(new);
    }
    let controls = old
        .trajectory
        .controls
        .iter()
        .zip(&new.trajectory.controls)
        .map(|(v, vh)| vh * alpha + v * (1.0 - alpha))
        .collect();
    let mut sol = AgentSolution::from_controls(game, i, controls, mode)?;
    sol.multipliers = new.multipliers;
    Ok(sol)
}

fn sweep(
    game: &Game,
    sols: &mut [AgentSolution],
    order: &[usize],
    alpha: f64,
    k: usize,
    opts: &BestResponseOptions,
    mode: Mode,
    final_sweep: bool,
) -> Result<f64> {
    let mut delta: f64 = 0.0;
    for &i in order {
        let agent = &game.agents[i];
        if agent.is_static() {
            continue;
        }
        let br = match solve_best_response(game, i, sols, opts, mode) {
            Ok(br) => br,
            Err(Error::BestResponseInfeasible { agent, worst_margin }) => {
                if final_sweep {
                    return Err(Error::RcneInfeasible { agent, worst_margin });
                }
                log::warn!("ibr iter={k} agent={agent} status=infeasible worst_margin={worst_margin:.3e} kept=previous");
                continue;
            }
            Err(e) => return Err(e),
        };
        let next = blend(game, i, &sols[i], br.solution, alpha, mode)?;
        let d = solution_delta(&sols[i], &next);
        delta = delta.max(d);
        log::info!(
            "ibr iter={k} agent={} objective={:.6e} worst_margin={:.3e} delta={:.3e}",
            agent.id,
            br.objective,
            br.worst_margin,
            d
        );
        sols[i] = next;
    }
    Ok(delta)
}

fn run(game: &Game, init: Vec<AgentSolution>, config: &IbrConfig, opts: &BestResponseOptions, mode: Mode) -> Result<RcneSolution> {
    config.validate()?;
    opts.validate()?;
    if init.len() != game.num_agents() {
        return Err(Error::InvalidInput("initial profile does not match the game".into()));
    }
    let order = config.sweep_order(game)?;
    let mut sols = init;
    let mut history = Vec::new();
    let mut sweep_seconds = Vec::new();
    let mut converged = false;
    for k in 1..=config.max_iterations {
        let start = std::time::Instant::now();
        let delta = sweep(game, &mut sols, &order, config.step_size, k, opts, mode, false)?;
        sweep_seconds.push(start.elapsed().as_secs_f64());
        history.push(delta);
        log::info!("ibr iter={k} delta={delta:.3e}");
        if delta <= config.tolerance {
            converged = true;
            break;
        }
    }
    if config.final_full_step {
        let k = history.len() + 1;
        let start = std::time::Instant::now();
        let delta = sweep(game, &mut sols, &order, 1.0, k, opts, mode, true)?;
        sweep_seconds.push(start.elapsed().as_secs_f64());
        history.push(delta);
        log::info!("ibr iter={k} delta={delta:.3e} final=true");
    }
    let margins = tightened_margins(game, &sols, mode, None);
    if config.final_full_step {
        if let Some(m) = margins.iter().find(|m| m.worst() > FEASIBILITY_TOLERANCE) {
            return Err(Error::RcneInfeasible {
                agent: m.name.clone(),
                worst_margin: m.worst(),
            });
        }
    }
    Ok(RcneSolution {
        agents: sols,
        mode,
        iterations: history.len(),
        delta_history: history,
        converged,
        margins,
        sweep_seconds,
    })
}

/// Runs iterative best response in the configured mode.
pub fn run_ibr(game: &Game, init: Vec<AgentSolution>, config: &IbrConfig, opts: &BestResponseOptions) -> Result<RcneSolution> {
    run(game, init, config, opts, config.mode)
}

/// The same loop with open-loop plans and untightened constraints.
pub fn run_nominal_baseline(
    game: &Game,
    init: Vec<AgentSolution>,
    config: &IbrConfig,
    opts: &BestResponseOptions,
) -> Result<RcneSolution> {
    run(game, init, config, opts, Mode::Nominal)
}

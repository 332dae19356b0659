//! Closed-loop Monte-Carlo rollouts of a solved game.

use nalgebra::DVector;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::best_response::{box_name, shared_name, AgentSolution};
use crate::error::{Error, Result};
use crate::game::Game;

/// Slack on the tube test, absorbing floating-point rounding.
pub const TUBE_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BallKind {
    TwoNorm,
    InfNorm,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSamplerSpec {
    pub ball: BallKind,
    /// Multiplies every sample; zero switches noise off.
    #[serde(default = "one")]
    pub scale: f64,
    /// Sample only the boundary of the ball.
    #[serde(default)]
    pub boundary: bool,
}

impl Default for NoiseSamplerSpec {
    fn default() -> Self {
        Self {
            ball: BallKind::TwoNorm,
            scale: 1.0,
            boundary: false,
        }
    }
}

/// Seeded sampler of unit-ball disturbances.
pub struct NoiseSampler {
    spec: NoiseSamplerSpec,
    rng: ChaCha8Rng,
}

impl NoiseSampler {
    pub fn new(spec: NoiseSamplerSpec, seed: u64) -> Self {
        Self {
            spec,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn sample(&mut self, dim: usize) -> DVector<f64> {
        let w = match self.spec.ball {
            BallKind::TwoNorm => {
                let mut d = DVector::from_fn(dim, |_, _| self.rng.sample::<f64, _>(StandardNormal));
                let norm = d.norm();
                if norm > 0.0 {
                    d /= norm;
                }
                let radius = if self.spec.boundary {
                    1.0
                } else {
                    self.rng.gen::<f64>().powf(1.0 / dim.max(1) as f64)
                };
                d * radius
            }
            BallKind::InfNorm => {
                if self.spec.boundary {
                    DVector::from_fn(dim, |_, _| if self.rng.gen::<bool>() { 1.0 } else { -1.0 })
                } else {
                    DVector::from_fn(dim, |_, _| self.rng.gen_range(-1.0..=1.0))
                }
            }
        };
        w * self.spec.scale
    }
}

/// Seed of rollout `j`, independent of how many rollouts are run.
pub fn rollout_seed(master: u64, j: u64) -> u64 {
    // splitmix64 finalizer over the combined input
    let mut z = master ^ j.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct RolloutResult {
    /// Realized states `x_0..x_T` per agent.
    pub states: Vec<Vec<DVector<f64>>>,
    /// Applied controls `u_0..u_T` per agent.
    pub controls: Vec<Vec<DVector<f64>>>,
    /// Untightened margins per constraint and step.
    pub margins: Vec<Vec<f64>>,
    /// Worst margin touching each agent, indexed `[t][agent]`.
    pub agent_worst: Vec<Vec<f64>>,
    pub violation: bool,
    pub goal_deviation: f64,
    pub tube_exceeded: bool,
}

/// Names of the constraints in the order used by rollout margins.
pub fn constraint_names(game: &Game) -> Vec<String> {
    let mut names = Vec::new();
    for (i, a) in game.agents.iter().enumerate() {
        for row in 0..a.boxes.len() {
            names.push(box_name(game, i, row));
        }
    }
    names.extend(game.shared.iter().map(|c| shared_name(game, c)));
    names
}

fn check_solution(game: &Game, sols: &[AgentSolution]) -> Result<()> {
    if sols.len() != game.num_agents() {
        return Err(Error::InvalidInput("solution does not match the game".into()));
    }
    for (a, s) in game.agents.iter().zip(sols) {
        if s.trajectory.states.len() != game.horizon + 1
            || s.gains.horizon() != game.horizon
            || s.gains.state_dim() != a.state_dim()
            || s.gains.control_dim() != a.control_dim()
        {
            return Err(Error::InvalidInput(format!("solution of {} does not match the game", a.id)));
        }
    }
    Ok(())
}

/// Executes the solved feedback policies under sampled noise.
pub fn rollout_closedloop(game: &Game, sols: &[AgentSolution], sampler: &mut NoiseSampler) -> Result<RolloutResult> {
    check_solution(game, sols)?;
    let horizon = game.horizon;
    let na = game.num_agents();
    let mut states: Vec<Vec<DVector<f64>>> = game.agents.iter().map(|a| vec![a.x0.clone()]).collect();
    let mut errors: Vec<Vec<DVector<f64>>> = game.agents.iter().map(|a| vec![DVector::zeros(a.state_dim())]).collect();
    let mut controls: Vec<Vec<DVector<f64>>> = vec![Vec::with_capacity(horizon + 1); na];
    let names_len = constraint_names(game).len();
    let mut margins = vec![Vec::with_capacity(horizon + 1); names_len];
    let mut agent_worst = Vec::with_capacity(horizon + 1);
    let mut tube_exceeded = false;
    for t in 0..=horizon {
        for (i, s) in sols.iter().enumerate() {
            let u = s.trajectory.control_at(t) + s.gains.correction(t, &errors[i]);
            let du = &u - s.trajectory.control_at(t);
            let e = errors[i][t].amax().max(du.amax());
            if e > s.bounds.rho[t] + TUBE_SLACK {
                tube_exceeded = true;
            }
            controls[i].push(u);
        }
        let mut worst = vec![f64::NEG_INFINITY; na];
        let mut k = 0;
        for (i, a) in game.agents.iter().enumerate() {
            for b in &a.boxes {
                let value = if b.steps(horizon).contains(&t) {
                    b.value(&states[i][t], &controls[i][t])
                } else {
                    f64::NEG_INFINITY
                };
                margins[k].push(value);
                worst[i] = worst[i].max(value);
                k += 1;
            }
        }
        for c in &game.shared {
            let [a, b] = c.agents;
            let value = game.shared_value(c, &states[a][t], &controls[a][t], &states[b][t]);
            margins[k].push(value);
            worst[a] = worst[a].max(value);
            worst[b] = worst[b].max(value);
            k += 1;
        }
        agent_worst.push(worst);
        if t == horizon {
            break;
        }
        for (i, a) in game.agents.iter().enumerate() {
            let x = &states[i][t];
            let mut next = a.model.step_nominal(x, &controls[i][t])?;
            if !a.model.noise.is_zero() {
                let w = sampler.sample(a.state_dim());
                next += a.model.noise.diagonal(x).component_mul(&w);
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::RolloutBlowup { step: t + 1 });
            }
            errors[i].push(&next - &sols[i].trajectory.states[t + 1]);
            states[i].push(next);
        }
    }
    let violation = margins.iter().flatten().any(|m| *m > 0.0);
    let movers: Vec<usize> = (0..na).filter(|&i| !game.agents[i].is_static()).collect();
    let goal_deviation = if movers.is_empty() {
        0.0
    } else {
        movers
            .iter()
            .map(|&i| {
                let m = &game.agents[i].model;
                (m.position(&states[i][horizon]) - m.position(&game.agents[i].goal)).norm()
            })
            .sum::<f64>()
            / movers.len() as f64
    };
    Ok(RolloutResult {
        states,
        controls,
        margins,
        agent_worst,
        violation,
        goal_deviation,
        tube_exceeded,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstraintWorst {
    pub name: String,
    pub worst_margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub count: usize,
    pub violations: usize,
    pub violation_rate: f64,
    pub mean_goal_deviation: f64,
    pub max_goal_deviation: f64,
    pub tube_exceedances: usize,
    pub tube_exceedance_rate: f64,
    pub blowups: usize,
    pub worst_margins: Vec<ConstraintWorst>,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
}

/// Outcome of one Monte-Carlo sample; blowups carry no trajectory.
pub type RolloutOutcome = std::result::Result<RolloutResult, usize>;

/// Runs `count` independent rollouts, in parallel, with derived seeds.
pub fn monte_carlo(
    game: &Game,
    sols: &[AgentSolution],
    spec: &NoiseSamplerSpec,
    master_seed: u64,
    count: usize,
) -> Result<(MonteCarloReport, Vec<RolloutOutcome>)> {
    if count == 0 {
        return Err(Error::InvalidInput("rollout count must be at least 1".into()));
    }
    check_solution(game, sols)?;
    let seeds: Vec<u64> = (0..count as u64).map(|j| rollout_seed(master_seed, j)).collect();
    let outcomes: Vec<RolloutOutcome> = seeds
        .par_iter()
        .map(|&seed| {
            let mut sampler = NoiseSampler::new(spec.clone(), seed);
            match rollout_closedloop(game, sols, &mut sampler) {
                Ok(r) => Ok(Ok(r)),
                Err(Error::RolloutBlowup { step }) => Ok(Err(step)),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let names = constraint_names(game);
    let mut worst = vec![f64::NEG_INFINITY; names.len()];
    let (mut violations, mut exceed, mut blowups) = (0, 0, 0);
    let (mut dev_sum, mut dev_max) = (0.0, 0.0f64);
    for o in &outcomes {
        match o {
            Ok(r) => {
                violations += r.violation as usize;
                exceed += r.tube_exceeded as usize;
                dev_sum += r.goal_deviation;
                dev_max = dev_max.max(r.goal_deviation);
                for (w, m) in worst.iter_mut().zip(&r.margins) {
                    *w = m.iter().copied().fold(*w, f64::max);
                }
            }
            Err(_) => {
                violations += 1;
                exceed += 1;
                blowups += 1;
                dev_max = f64::INFINITY;
                dev_sum = f64::INFINITY;
            }
        }
    }
    let report = MonteCarloReport {
        count,
        violations,
        violation_rate: violations as f64 / count as f64,
        mean_goal_deviation: dev_sum / count as f64,
        max_goal_deviation: dev_max,
        tube_exceedances: exceed,
        tube_exceedance_rate: exceed as f64 / count as f64,
        blowups,
        worst_margins: names
            .into_iter()
            .zip(worst)
            .map(|(name, worst_margin)| ConstraintWorst { name, worst_margin })
            .collect(),
        master_seed,
        seeds,
    };
    Ok((report, outcomes))
}

//! One agent's robust best response.
//!
//! The response alternates three steps: Riccati gains at the current nominal
//! trajectory, a single-shooting NLP over the nominal controls with the
//! tube data frozen, and a refresh of the error bounds at the new nominal.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{Game, SharedConstraint, Trajectory};
use crate::nlp::{solve_nlp, NlpOptions, NlpProblem, NlpStatus};
use crate::sls::{
    gains_to_response, riccati_synthesis, update_error_bounds, ErrorBounds, FeedbackGains,
    Linearization, SystemResponse,
};
use crate::tightening::{diagonal_linear_term, DiagonalLinearTerm, DiagonalSupport, TightenedMargin};

/// Tolerance on tightened margins for a solution to count as feasible.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Feedback gains, error tubes and tightened constraints.
    Robust,
    /// Open-loop plans with untightened constraints.
    Nominal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BestResponseOptions {
    /// Riccati/NLP/bound cycles per best response.
    pub rounds: usize,
    /// Additional cycles allowed while a tightened margin is still positive.
    pub extra_rounds: usize,
    /// Weight of the response regularizer in the reported objective.
    pub gamma: f64,
    /// Margin kept inside the NLP so the bound refresh stays feasible.
    pub backoff: f64,
    pub nlp: NlpOptions,
}

impl Default for BestResponseOptions {
    fn default() -> Self {
        Self {
            rounds: 3,
            extra_rounds: 3,
            gamma: 1e-3,
            backoff: 1e-6,
            nlp: NlpOptions::default(),
        }
    }
}

impl BestResponseOptions {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 || !(self.gamma >= 0.0) || !(self.backoff >= 0.0) {
            return Err(Error::InvalidInput(format!("invalid best-response options {self:?}")));
        }
        self.nlp.validate()
    }
}

/// Nominal trajectory with its feedback policy and error tube.
#[derive(Clone, Debug)]
pub struct AgentSolution {
    pub trajectory: Trajectory,
    pub gains: FeedbackGains,
    pub response: SystemResponse,
    pub bounds: ErrorBounds,
    /// Multipliers of the last NLP, reused as a warm start.
    pub multipliers: Option<DVector<f64>>,
}

impl AgentSolution {
    /// Rolls out `controls` and derives gains, response and bounds.
    pub fn from_controls(game: &Game, i: usize, controls: Vec<DVector<f64>>, mode: Mode) -> Result<Self> {
        let agent = &game.agents[i];
        let model = &agent.model;
        if controls.len() != game.horizon || controls.iter().any(|u| u.len() != agent.control_dim()) {
            return Err(Error::InvalidInput(format!("controls of {} have the wrong shape", agent.id)));
        }
        let states = model.rollout_nominal(&agent.x0, &controls)?;
        let lin = Linearization::along(model, &states, &controls)?;
        let (n, m) = (agent.state_dim(), agent.control_dim());
        let (gains, bounds) = match mode {
            Mode::Robust => {
                let (q, r) = agent.feedback_weights();
                (riccati_synthesis(&lin.a, &lin.b, &q, &r)?, None)
            }
            Mode::Nominal => (FeedbackGains::zeros(game.horizon, n, m), Some(ErrorBounds::zeros(game.horizon))),
        };
        let response = gains_to_response(&lin.a, &lin.b, &gains)?;
        let bounds = match bounds {
            Some(b) => b,
            None => update_error_bounds(&response, &states, model, &agent.consts)?,
        };
        Ok(Self {
            trajectory: Trajectory { states, controls },
            gains,
            response,
            bounds,
            multipliers: None,
        })
    }

    /// Agent held at its initial state by the rest control.
    pub fn initial(game: &Game, i: usize, mode: Mode) -> Result<Self> {
        let rest = game.agents[i].model.rest_control();
        Self::from_controls(game, i, vec![rest; game.horizon], mode)
    }

    pub fn flat_controls(&self) -> DVector<f64> {
        let m = self.trajectory.controls.first().map_or(0, |u| u.len());
        DVector::from_iterator(
            m * self.trajectory.controls.len(),
            self.trajectory.controls.iter().flat_map(|u| u.iter().copied()),
        )
    }
}

/// Initial profile for every agent.
pub fn initial_profile(game: &Game, mode: Mode) -> Result<Vec<AgentSolution>> {
    (0..game.num_agents()).map(|i| AgentSolution::initial(game, i, mode)).collect()
}

fn trajectories(sols: &[AgentSolution]) -> Vec<Trajectory> {
    sols.iter().map(|s| s.trajectory.clone()).collect()
}

/// `J^i + gamma * sum |Phi^i_{t,tau}|_F^2`; the regularizer is dropped in
/// nominal mode where no response is designed.
pub fn augmented_objective(game: &Game, i: usize, sols: &[AgentSolution], gamma: f64, mode: Mode) -> Result<f64> {
    let j = game.eval_cost(i, &trajectories(sols))?;
    Ok(match mode {
        Mode::Robust => j + gamma * sols[i].response.frobenius_sq(),
        Mode::Nominal => j,
    })
}

struct Tube<'a> {
    phi: &'a SystemResponse,
    support: DiagonalSupport,
    rho: &'a [f64],
}

impl<'a> Tube<'a> {
    fn new(game: &Game, i: usize, sol: &'a AgentSolution, states: &[DVector<f64>]) -> Self {
        let agent = &game.agents[i];
        Tube {
            phi: &sol.response,
            support: DiagonalSupport::new(&agent.model, states, &sol.bounds.rho, &agent.consts),
            rho: &sol.bounds.rho,
        }
    }
}

fn box_margin(
    game: &Game,
    i: usize,
    row: usize,
    t: usize,
    tr: &Trajectory,
    tube: Option<&Tube>,
) -> (TightenedMargin, Option<DiagonalLinearTerm>) {
    let agent = &game.agents[i];
    let b = &agent.boxes[row];
    let value = b.value(&tr.states[t], &tr.control_at(t));
    match tube {
        None => (TightenedMargin::nominal(value), None),
        Some(tb) => {
            let n = agent.state_dim();
            let mut a = DVector::zeros(n + agent.control_dim());
            a[b.offset(n)] = b.sign;
            let lt = diagonal_linear_term(tb.phi, &tb.support, t, &a);
            let rho = tb.rho[t];
            (TightenedMargin::new(value, lt.value, b.chi * rho * rho), Some(lt))
        }
    }
}

struct SharedEval {
    margin: TightenedMargin,
    grad: DVector<f64>,
    hess: nalgebra::DMatrix<f64>,
    terms: Option<[DiagonalLinearTerm; 2]>,
}

fn shared_margin(
    game: &Game,
    c: &SharedConstraint,
    t: usize,
    ta: &Trajectory,
    tb: &Trajectory,
    tubes: Option<[&Tube; 2]>,
) -> SharedEval {
    let le = game.eval_shared(c, &ta.states[t], &ta.control_at(t), &tb.states[t]);
    match tubes {
        None => SharedEval {
            margin: TightenedMargin::nominal(le.value),
            grad: le.grad,
            hess: le.hess,
            terms: None,
        },
        Some([ua, ub]) => {
            let a = &game.agents[c.agents[0]];
            let na = a.state_dim() + a.control_dim();
            let ga = le.grad.rows(0, na).into_owned();
            let gb = le.grad.rows(na, le.grad.len() - na).into_owned();
            let la = diagonal_linear_term(ua.phi, &ua.support, t, &ga);
            let lb = diagonal_linear_term(ub.phi, &ub.support, t, &gb);
            let curvature = c.psi * (ua.rho[t] * ua.rho[t] + ub.rho[t] * ub.rho[t]);
            SharedEval {
                margin: TightenedMargin::new(le.value, la.value + lb.value, curvature),
                grad: le.grad,
                hess: le.hess,
                terms: Some([la, lb]),
            }
        }
    }
}

/// Tightened margins of one constraint over its time steps.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConstraintMargins {
    pub name: String,
    pub steps: Vec<usize>,
    pub totals: Vec<f64>,
}

impl ConstraintMargins {
    pub fn worst(&self) -> f64 {
        self.totals.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub(crate) fn box_name(game: &Game, i: usize, row: usize) -> String {
    let b = &game.agents[i].boxes[row];
    let kind = match b.kind {
        crate::game::BoxKind::StateBox => "state",
        crate::game::BoxKind::ControlBox => "control",
    };
    let side = if b.sign > 0.0 { "upper" } else { "lower" };
    format!("{}:{kind}[{}]:{side}", game.agents[i].id, b.index)
}

pub(crate) fn shared_name(game: &Game, c: &SharedConstraint) -> String {
    let kind = match c.kind {
        crate::game::SharedKind::Collision => "collision",
        crate::game::SharedKind::Proximity => "proximity",
        crate::game::SharedKind::LineOfSight => "line_of_sight",
    };
    format!("{kind}:{}:{}", game.agents[c.agents[0]].id, game.agents[c.agents[1]].id)
}

/// Margins of every constraint touching agent `only`, or of all constraints.
pub fn tightened_margins(
    game: &Game,
    sols: &[AgentSolution],
    mode: Mode,
    only: Option<usize>,
) -> Vec<ConstraintMargins> {
    let tubes: Vec<Option<Tube>> = sols
        .iter()
        .enumerate()
        .map(|(i, s)| (mode == Mode::Robust).then(|| Tube::new(game, i, s, &s.trajectory.states)))
        .collect();
    let mut out = Vec::new();
    for (i, agent) in game.agents.iter().enumerate() {
        if only.is_some_and(|o| o != i) {
            continue;
        }
        for row in 0..agent.boxes.len() {
            let steps: Vec<usize> = agent.boxes[row].steps(game.horizon).collect();
            let totals = steps
                .iter()
                .map(|&t| box_margin(game, i, row, t, &sols[i].trajectory, tubes[i].as_ref()).0.total)
                .collect();
            out.push(ConstraintMargins { name: box_name(game, i, row), steps, totals });
        }
    }
    for c in &game.shared {
        if only.is_some_and(|o| !c.agents.contains(&o)) {
            continue;
        }
        let [a, b] = c.agents;
        let steps: Vec<usize> = (0..=game.horizon).collect();
        let pair = match (&tubes[a], &tubes[b]) {
            (Some(x), Some(y)) => Some([x, y]),
            _ => None,
        };
        let totals = steps
            .iter()
            .map(|&t| shared_margin(game, c, t, &sols[a].trajectory, &sols[b].trajectory, pair).margin.total)
            .collect();
        out.push(ConstraintMargins { name: shared_name(game, c), steps, totals });
    }
    out
}

pub fn worst_margin(margins: &[ConstraintMargins]) -> f64 {
    margins.iter().map(|m| m.worst()).fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Clone, Copy, Debug)]
enum Row {
    Box { row: usize, t: usize },
    Shared { k: usize, t: usize },
}

/// Single-shooting problem over agent `i`'s nominal controls.
pub struct BestResponseProblem<'a> {
    game: &'a Game,
    i: usize,
    mode: Mode,
    backoff: f64,
    profile: Vec<Trajectory>,
    own: &'a AgentSolution,
    others: Vec<Option<Tube<'a>>>,
    rows: Vec<Row>,
}

impl<'a> BestResponseProblem<'a> {
    /// Freezes every response and bound; `sols[i]` supplies agent `i`'s.
    pub fn new(game: &'a Game, i: usize, sols: &'a [AgentSolution], mode: Mode, backoff: f64) -> Self {
        let agent = &game.agents[i];
        let mut rows = Vec::new();
        for (row, b) in agent.boxes.iter().enumerate() {
            rows.extend(b.steps(game.horizon).map(|t| Row::Box { row, t }));
        }
        for (k, _) in game.shared_of(i) {
            rows.extend((0..=game.horizon).map(|t| Row::Shared { k, t }));
        }
        let others = sols
            .iter()
            .enumerate()
            .map(|(j, s)| (mode == Mode::Robust && j != i).then(|| Tube::new(game, j, s, &s.trajectory.states)))
            .collect();
        Self {
            game,
            i,
            mode,
            backoff,
            profile: trajectories(sols),
            own: &sols[i],
            others,
            rows,
        }
    }

    fn controls(&self, v: &DVector<f64>) -> Vec<DVector<f64>> {
        let m = self.game.agents[self.i].control_dim();
        (0..self.game.horizon)
            .map(|t| DVector::from_column_slice(&v.as_slice()[t * m..(t + 1) * m]))
            .collect()
    }

    fn set_controls(&mut self, v: &DVector<f64>) -> Result<()> {
        let agent = &self.game.agents[self.i];
        let controls = self.controls(v);
        let states = agent.model.rollout_nominal(&agent.x0, &controls)?;
        self.profile[self.i] = Trajectory { states, controls };
        Ok(())
    }

    fn own_tube(&self) -> Option<Tube<'a>> {
        (self.mode == Mode::Robust).then(|| Tube::new(self.game, self.i, self.own, &self.profile[self.i].states))
    }

    fn shared_tubes<'s>(&'s self, c: &SharedConstraint, own: Option<&'s Tube<'a>>) -> Option<[&'s Tube<'a>; 2]> {
        let pick = |j: usize| if j == self.i { own } else { self.others[j].as_ref() };
        match (pick(c.agents[0]), pick(c.agents[1])) {
            (Some(a), Some(b)) => Some([a, b]),
            _ => None,
        }
    }

    fn values(&self) -> DVector<f64> {
        let own = self.own_tube();
        let g = self.game;
        DVector::from_iterator(
            self.rows.len(),
            self.rows.iter().map(|row| {
                let m = match *row {
                    Row::Box { row, t } => box_margin(g, self.i, row, t, &self.profile[self.i], own.as_ref()).0,
                    Row::Shared { k, t } => {
                        let c = &g.shared[k];
                        let tubes = self.shared_tubes(c, own.as_ref());
                        shared_margin(g, c, t, &self.profile[c.agents[0]], &self.profile[c.agents[1]], tubes).margin
                    }
                };
                m.total + self.backoff
            }),
        )
    }
}

impl NlpProblem for BestResponseProblem<'_> {
    fn dim(&self) -> usize {
        self.game.horizon * self.game.agents[self.i].control_dim()
    }

    fn num_constraints(&self) -> usize {
        self.rows.len()
    }

    fn eval(&mut self, v: &DVector<f64>) -> Result<(f64, DVector<f64>)> {
        self.set_controls(v)?;
        let f = self.game.eval_cost(self.i, &self.profile)?;
        Ok((f, self.values()))
    }

    fn weighted_gradient(&mut self, v: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        self.set_controls(v)?;
        let g = self.game;
        let i = self.i;
        let agent = &g.agents[i];
        let (n, m) = (agent.state_dim(), agent.control_dim());
        let horizon = g.horizon;
        let (_, cg) = g.cost_gradient(i, &self.profile)?;
        let mut gz = cg.states;
        let mut gv = cg.controls;
        let own = self.own_tube();
        let noise = &agent.model.noise;
        let beta_grad: Option<Vec<DVector<f64>>> = (own.is_some() && noise.is_state_dependent())
            .then(|| self.profile[i].states.iter().map(|z| noise.scale_gradient(z)).collect());
        let mut add_y = |t: usize, y: &DVector<f64>, scale: f64, gz: &mut Vec<DVector<f64>>| {
            gz[t] += y.rows(0, n) * scale;
            if t < horizon && m > 0 {
                gv[t] += y.rows(n, m) * scale;
            }
        };
        let add_noise = |lt: &DiagonalLinearTerm, scale: f64, gz: &mut Vec<DVector<f64>>| {
            if let Some(bg) = &beta_grad {
                for (tau, nw) in lt.noise_weights.iter().enumerate() {
                    gz[tau] += &bg[tau] * (scale * nw);
                }
            }
        };
        for (row, &wk) in self.rows.iter().zip(w.iter()) {
            if wk == 0.0 {
                continue;
            }
            match *row {
                Row::Box { row, t } => {
                    let b = &agent.boxes[row];
                    let mut a = DVector::zeros(n + m);
                    a[b.offset(n)] = b.sign;
                    add_y(t, &a, wk, &mut gz);
                    if let Some(tb) = own.as_ref() {
                        if beta_grad.is_some() {
                            let lt = diagonal_linear_term(tb.phi, &tb.support, t, &a);
                            add_noise(&lt, wk, &mut gz);
                        }
                    }
                }
                Row::Shared { k, t } => {
                    let c = &g.shared[k];
                    let tubes = self.shared_tubes(c, own.as_ref());
                    let ev = shared_margin(g, c, t, &self.profile[c.agents[0]], &self.profile[c.agents[1]], tubes);
                    let a0 = &g.agents[c.agents[0]];
                    let na = a0.state_dim() + a0.control_dim();
                    let (offset, pos) = if c.agents[0] == i { (0, 0) } else { (na, 1) };
                    let mut y = ev.grad.rows(offset, n + m).into_owned();
                    if let Some(terms) = &ev.terms {
                        let mut s = DVector::zeros(ev.grad.len());
                        s.rows_mut(0, na).copy_from(&terms[0].direction);
                        s.rows_mut(na, ev.grad.len() - na).copy_from(&terms[1].direction);
                        y += (&ev.hess * s).rows(offset, n + m);
                        add_noise(&terms[pos], wk, &mut gz);
                    }
                    add_y(t, &y, wk, &mut gz);
                }
            }
        }
        // Reverse pass through the rollout.
        let tr = &self.profile[i];
        let mut out = DVector::zeros(horizon * m);
        let mut lam = gz[horizon].clone();
        for t in (0..horizon).rev() {
            let (a, b) = agent.model.jacobians(&tr.states[t], &tr.controls[t])?;
            let gvt = &gv[t] + b.tr_mul(&lam);
            out.rows_mut(t * m, m).copy_from(&gvt);
            lam = &gz[t] + a.tr_mul(&lam);
        }
        Ok(out)
    }
}

/// Outcome of one best-response computation.
#[derive(Clone, Debug)]
pub struct BestResponse {
    pub solution: AgentSolution,
    pub objective: f64,
    pub worst_margin: f64,
    pub nlp_status: NlpStatus,
    pub rounds: usize,
}

/// Best response of agent `i` to the frozen solutions of the others.
///
/// `profile[i]` is the warm start. If the warm start is already feasible
/// and no better, it is returned unchanged.
pub fn solve_best_response(
    game: &Game,
    i: usize,
    profile: &[AgentSolution],
    opts: &BestResponseOptions,
    mode: Mode,
) -> Result<BestResponse> {
    opts.validate()?;
    let agent = &game.agents[i];
    let objective_of = |sols: &[AgentSolution]| augmented_objective(game, i, sols, opts.gamma, mode);
    let margin_of = |sols: &[AgentSolution]| worst_margin(&tightened_margins(game, sols, mode, Some(i)));
    let warm_margin = margin_of(profile);
    let warm_objective = objective_of(profile)?;
    if agent.is_static() || agent.control_dim() == 0 {
        return Ok(BestResponse {
            solution: profile[i].clone(),
            objective: warm_objective,
            worst_margin: warm_margin,
            nlp_status: NlpStatus::Converged,
            rounds: 0,
        });
    }
    let mut sols = profile.to_vec();
    let (base, limit) = match mode {
        Mode::Robust => (opts.rounds, opts.rounds + opts.extra_rounds),
        Mode::Nominal => (1, 1 + opts.extra_rounds),
    };
    let mut status = NlpStatus::MaxIter;
    let mut margin = warm_margin;
    let mut rounds = 0;
    while rounds < limit {
        rounds += 1;
        let x0 = sols[i].flat_controls();
        let lambda0 = sols[i].multipliers.clone();
        let result = {
            let mut problem = BestResponseProblem::new(game, i, &sols, mode, opts.backoff);
            let lambda0 = lambda0.filter(|l| l.len() == problem.num_constraints());
            solve_nlp(&mut problem, &x0, lambda0.as_ref(), &opts.nlp)?
        };
        status = result.status;
        let m = agent.control_dim();
        let controls = (0..game.horizon)
            .map(|t| DVector::from_column_slice(&result.x.as_slice()[t * m..(t + 1) * m]))
            .collect();
        let mut next = AgentSolution::from_controls(game, i, controls, mode)?;
        next.multipliers = Some(result.multipliers);
        sols[i] = next;
        margin = margin_of(&sols);
        log::debug!(
            "best_response agent={} round={rounds} status={status:?} worst_margin={margin:.3e} outer={} inner={}",
            agent.id,
            result.iterations,
            result.inner_iterations
        );
        if rounds >= base && margin <= FEASIBILITY_TOLERANCE {
            break;
        }
    }
    let objective = objective_of(&sols)?;
    if warm_margin <= FEASIBILITY_TOLERANCE && (margin > FEASIBILITY_TOLERANCE || objective > warm_objective) {
        return Ok(BestResponse {
            solution: profile[i].clone(),
            objective: warm_objective,
            worst_margin: warm_margin,
            nlp_status: status,
            rounds,
        });
    }
    if margin > FEASIBILITY_TOLERANCE {
        return Err(Error::BestResponseInfeasible {
            agent: agent.id.clone(),
            worst_margin: margin,
        });
    }
    Ok(BestResponse {
        solution: sols.swap_remove(i),
        objective,
        worst_margin: margin,
        nlp_status: status,
        rounds,
    })
}

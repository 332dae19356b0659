//! Multi-agent game definition: costs, constraints and the potential.
//!
//! [`GameSpec`] is the serializable description found in scenario files.
//! [`Game`] is the validated form with agent references resolved to indices
//! and models built at the game's time step.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{DynamicsModel, ModelKind, NoiseScaleSpec};
use crate::error::{Error, Result};
use crate::sls::HessianLipschitzConstants;

/// Default smoothing of Euclidean norms inside constraints.
pub const DEFAULT_NORM_EPSILON: f64 = 1e-6;

/// Weight matrix given either by its diagonal or by full rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSpec {
    Diag { diag: Vec<f64> },
    Rows { rows: Vec<Vec<f64>> },
}

impl MatrixSpec {
    pub fn diag(d: Vec<f64>) -> Self {
        MatrixSpec::Diag { diag: d }
    }

    pub fn to_matrix(&self, dim: usize, what: &str) -> Result<DMatrix<f64>> {
        let m = match self {
            MatrixSpec::Diag { diag } => {
                if diag.len() != dim {
                    return Err(Error::InvalidInput(format!(
                        "{what}: diagonal has {} entries, expected {dim}",
                        diag.len()
                    )));
                }
                DMatrix::from_diagonal(&DVector::from_column_slice(diag))
            }
            MatrixSpec::Rows { rows } => {
                if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                    return Err(Error::InvalidInput(format!("{what}: expected a {dim}x{dim} matrix")));
                }
                DMatrix::from_fn(dim, dim, |i, j| rows[i][j])
            }
        };
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(format!("{what}: non-finite entry")));
        }
        if (&m - m.transpose()).amax() > 1e-12 {
            return Err(Error::InvalidInput(format!("{what}: matrix is not symmetric")));
        }
        let min_eig = m.clone().symmetric_eigenvalues().min();
        if dim > 0 && min_eig < -1e-12 {
            return Err(Error::InvalidInput(format!(
                "{what}: matrix is not positive semidefinite (eigenvalue {min_eig})"
            )));
        }
        Ok(m)
    }
}

fn one() -> f64 {
    1.0
}

fn default_epsilon() -> f64 {
    DEFAULT_NORM_EPSILON
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostTermSpec {
    /// Goal-tracking quadratic cost on states and controls.
    Lqr {
        q: MatrixSpec,
        r: MatrixSpec,
        qf: MatrixSpec,
        #[serde(default = "one")]
        weight: f64,
    },
    /// Terminal goal cost plus a penalty on successive state differences.
    SmoothnessGoal {
        q: MatrixSpec,
        qf: MatrixSpec,
        #[serde(default = "one")]
        weight: f64,
    },
    /// `-0.5 * weight * sum_t |p^i_t - p^j_t|^2`.
    CollisionPenalty {
        partner: String,
        #[serde(default = "one")]
        weight: f64,
    },
    /// `0.1 * weight * sum_t |p^i_t - p^j_t|^2`.
    ProximityPenalty {
        partner: String,
        #[serde(default = "one")]
        weight: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoxKind {
    StateBox,
    ControlBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndividualConstraint {
    pub kind: BoxKind,
    pub index: usize,
    #[serde(default = "neg_inf", skip_serializing_if = "is_neg_inf")]
    pub lower: f64,
    #[serde(default = "pos_inf", skip_serializing_if = "is_pos_inf")]
    pub upper: f64,
    #[serde(default)]
    pub hessian_bound: f64,
}

fn neg_inf() -> f64 {
    f64::NEG_INFINITY
}
fn pos_inf() -> f64 {
    f64::INFINITY
}
fn is_neg_inf(x: &f64) -> bool {
    *x == f64::NEG_INFINITY
}
fn is_pos_inf(x: &f64) -> bool {
    *x == f64::INFINITY
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    pub id: String,
    pub model: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseScaleSpec>,
    pub x0: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<Vec<f64>>,
    pub radius: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub costs: Vec<CostTermSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<IndividualConstraint>,
    /// Diagonal dynamics curvature bound; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<Vec<f64>>,
    /// Diagonal Lipschitz constants of `E`; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lipschitz_e: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedKind {
    Collision,
    Proximity,
    LineOfSight,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedConstraintSpec {
    pub kind: SharedKind,
    pub agents: [String; 2],
    /// Proximity distance, or a collision distance overriding the radii sum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
    /// Line-of-sight half angle in radians.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub hessian_bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameSpec {
    pub horizon: usize,
    pub dt: f64,
    pub agents: Vec<AgentSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub shared: Vec<SharedConstraintSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CostTerm {
    Lqr {
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        qf: DMatrix<f64>,
        weight: f64,
    },
    SmoothnessGoal {
        q: DMatrix<f64>,
        qf: DMatrix<f64>,
        weight: f64,
    },
    CollisionPenalty {
        partner: usize,
        weight: f64,
    },
    ProximityPenalty {
        partner: usize,
        weight: f64,
    },
}

impl CostTerm {
    fn coupling(&self) -> Option<(usize, f64)> {
        match self {
            CostTerm::CollisionPenalty { partner, weight } => Some((*partner, -0.5 * weight)),
            CostTerm::ProximityPenalty { partner, weight } => Some((*partner, 0.1 * weight)),
            _ => None,
        }
    }
}

/// One side of a box constraint: `sign * (y[index] - bound) <= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxRow {
    pub kind: BoxKind,
    pub index: usize,
    pub sign: f64,
    pub bound: f64,
    pub chi: f64,
}

impl BoxRow {
    pub fn value(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let y = match self.kind {
            BoxKind::StateBox => x[self.index],
            BoxKind::ControlBox => u[self.index],
        };
        self.sign * (y - self.bound)
    }

    /// Offset of the constrained coordinate inside the stacked `(x, u)`.
    pub fn offset(&self, n: usize) -> usize {
        match self.kind {
            BoxKind::StateBox => self.index,
            BoxKind::ControlBox => n + self.index,
        }
    }

    /// Steps at which the row applies: `0..=T` for states, `0..T` for controls.
    pub fn steps(&self, horizon: usize) -> std::ops::Range<usize> {
        match self.kind {
            BoxKind::StateBox => 0..horizon + 1,
            BoxKind::ControlBox => 0..horizon,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Agent {
    pub id: String,
    pub model: DynamicsModel,
    pub x0: DVector<f64>,
    pub goal: DVector<f64>,
    pub radius: f64,
    pub costs: Vec<CostTerm>,
    pub boxes: Vec<BoxRow>,
    pub consts: HessianLipschitzConstants,
}

impl Agent {
    pub fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.model.control_dim()
    }

    pub fn is_static(&self) -> bool {
        self.model.kind.is_static()
    }

    /// Weights for the feedback Riccati recursion.
    ///
    /// Uses the first quadratic cost term; a zero state weight falls back to
    /// the identity and a control weight that is not positive definite falls
    /// back to `1e-2 I`.
    pub fn feedback_weights(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let (n, m) = (self.state_dim(), self.control_dim());
        let (mut q, mut r) = (DMatrix::zeros(n, n), DMatrix::zeros(m, m));
        for c in &self.costs {
            match c {
                CostTerm::Lqr { q: cq, r: cr, .. } => {
                    q = cq.clone();
                    r = cr.clone();
                    break;
                }
                CostTerm::SmoothnessGoal { q: cq, .. } => {
                    q = cq.clone();
                    break;
                }
                _ => {}
            }
        }
        if q.amax() == 0.0 {
            q = DMatrix::identity(n, n);
        }
        if m > 0 && r.clone().cholesky().is_none() {
            r = DMatrix::identity(m, m) * 1e-2;
        }
        (q, r)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SharedConstraint {
    pub kind: SharedKind,
    pub agents: [usize; 2],
    /// Radii sum, proximity distance, or cosine of the half angle.
    pub param: f64,
    pub epsilon: f64,
    pub psi: f64,
}

/// States `z_0..z_T` and controls `v_0..v_{T-1}` of one agent.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.controls.len()
    }

    /// Control at step `t`, zero at the terminal step.
    pub fn control_at(&self, t: usize) -> DVector<f64> {
        match self.controls.get(t) {
            Some(u) => u.clone(),
            None => DVector::zeros(self.controls.first().map_or(0, |u| u.len())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Game {
    pub horizon: usize,
    pub dt: f64,
    pub agents: Vec<Agent>,
    pub shared: Vec<SharedConstraint>,
}

fn finite_vec(v: &[f64], len: usize, what: &str) -> Result<DVector<f64>> {
    if v.len() != len {
        return Err(Error::InvalidInput(format!("{what} has {} entries, expected {len}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!("{what} has a non-finite entry")));
    }
    Ok(DVector::from_column_slice(v))
}

impl Game {
    pub fn from_spec(spec: &GameSpec) -> Result<Self> {
        if spec.horizon == 0 {
            return Err(Error::InvalidInput("horizon must be at least 1".into()));
        }
        let mut index = HashMap::new();
        for (k, a) in spec.agents.iter().enumerate() {
            if index.insert(a.id.as_str(), k).is_some() {
                return Err(Error::InvalidInput(format!("duplicate agent id {:?}", a.id)));
            }
        }
        let resolve = |id: &str| -> Result<usize> {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::InvalidInput(format!("unknown agent id {id:?}")))
        };
        let mut agents = Vec::with_capacity(spec.agents.len());
        for a in &spec.agents {
            let n = a.model.state_dim();
            let m = a.model.control_dim();
            let noise = a.noise.clone().unwrap_or_else(|| NoiseScaleSpec::zero(n));
            let model = DynamicsModel::new(a.model.clone(), spec.dt, noise)?;
            let ctx = |s: &str| format!("agent {}: {s}", a.id);
            if !(a.radius > 0.0) {
                return Err(Error::InvalidInput(ctx("radius must be positive")));
            }
            let x0 = finite_vec(&a.x0, n, &ctx("x0"))?;
            let goal = match &a.goal {
                Some(g) => finite_vec(g, n, &ctx("goal"))?,
                None => x0.clone(),
            };
            let mut costs = Vec::new();
            for c in &a.costs {
                costs.push(match c {
                    CostTermSpec::Lqr { q, r, qf, weight } => CostTerm::Lqr {
                        q: q.to_matrix(n, &ctx("Q"))?,
                        r: r.to_matrix(m, &ctx("R"))?,
                        qf: qf.to_matrix(n, &ctx("Qf"))?,
                        weight: *weight,
                    },
                    CostTermSpec::SmoothnessGoal { q, qf, weight } => CostTerm::SmoothnessGoal {
                        q: q.to_matrix(n, &ctx("Q"))?,
                        qf: qf.to_matrix(n, &ctx("Qf"))?,
                        weight: *weight,
                    },
                    CostTermSpec::CollisionPenalty { partner, weight } => CostTerm::CollisionPenalty {
                        partner: resolve(partner)?,
                        weight: *weight,
                    },
                    CostTermSpec::ProximityPenalty { partner, weight } => CostTerm::ProximityPenalty {
                        partner: resolve(partner)?,
                        weight: *weight,
                    },
                });
            }
            let mut boxes = Vec::new();
            for c in &a.constraints {
                let dim = match c.kind {
                    BoxKind::StateBox => n,
                    BoxKind::ControlBox => m,
                };
                if c.index >= dim {
                    return Err(Error::InvalidInput(ctx(&format!("box index {} out of range", c.index))));
                }
                if !(c.lower <= c.upper) || c.lower.is_nan() {
                    return Err(Error::InvalidInput(ctx("box lower bound exceeds upper bound")));
                }
                if !(c.hessian_bound >= 0.0) {
                    return Err(Error::InvalidInput(ctx("hessian_bound must be nonnegative")));
                }
                if c.upper.is_finite() {
                    boxes.push(BoxRow { kind: c.kind, index: c.index, sign: 1.0, bound: c.upper, chi: c.hessian_bound });
                }
                if c.lower.is_finite() {
                    boxes.push(BoxRow { kind: c.kind, index: c.index, sign: -1.0, bound: c.lower, chi: c.hessian_bound });
                }
            }
            let mut consts = HessianLipschitzConstants::zero(n);
            if let Some(mu) = &a.mu {
                consts.mu = finite_vec(mu, n, &ctx("mu"))?;
            }
            if let Some(le) = &a.lipschitz_e {
                consts.lipschitz_e = finite_vec(le, n, &ctx("lipschitz_e"))?;
            }
            consts.chi = boxes.iter().map(|b| b.chi).collect();
            consts.validate()?;
            agents.push(Agent {
                id: a.id.clone(),
                model,
                x0,
                goal,
                radius: a.radius,
                costs,
                boxes,
                consts,
            });
        }
        for (i, a) in agents.iter().enumerate() {
            for c in &a.costs {
                if let Some((j, w)) = c.coupling() {
                    if j == i {
                        return Err(Error::InvalidInput(format!("agent {}: coupling with itself", a.id)));
                    }
                    let mirrored = agents[j].costs.iter().any(|d| {
                        std::mem::discriminant(c) == std::mem::discriminant(d) && d.coupling() == Some((i, w))
                    });
                    if !mirrored {
                        return Err(Error::InvalidInput(format!(
                            "coupling between {} and {} must appear on both agents with equal weight",
                            a.id, agents[j].id
                        )));
                    }
                }
            }
        }
        let mut shared = Vec::new();
        for s in &spec.shared {
            let i = resolve(&s.agents[0])?;
            let j = resolve(&s.agents[1])?;
            if i == j {
                return Err(Error::InvalidInput("shared constraint needs two distinct agents".into()));
            }
            if !(s.epsilon >= 0.0) || !(s.hessian_bound >= 0.0) {
                return Err(Error::InvalidInput("epsilon and hessian_bound must be nonnegative".into()));
            }
            let param = match s.kind {
                SharedKind::Collision => s.distance.unwrap_or(agents[i].radius + agents[j].radius),
                SharedKind::Proximity => s.distance.ok_or_else(|| {
                    Error::InvalidInput("proximity constraint needs a distance".into())
                })?,
                SharedKind::LineOfSight => {
                    if agents[i].is_static() {
                        return Err(Error::InvalidInput("line of sight needs a moving first agent".into()));
                    }
                    s.angle
                        .ok_or_else(|| Error::InvalidInput("line-of-sight constraint needs an angle".into()))?
                        .cos()
                }
            };
            match s.kind {
                SharedKind::LineOfSight if !(param > -1.0 && param <= 1.0) => {
                    return Err(Error::InvalidInput("line-of-sight cosine must lie in (-1, 1]".into()));
                }
                SharedKind::Collision | SharedKind::Proximity if !(param > 0.0) => {
                    return Err(Error::InvalidInput("distance parameter must be positive".into()));
                }
                _ => {}
            }
            shared.push(SharedConstraint {
                kind: s.kind,
                agents: [i, j],
                param,
                epsilon: s.epsilon,
                psi: s.hessian_bound,
            });
        }
        Ok(Self {
            horizon: spec.horizon,
            dt: spec.dt,
            agents,
            shared,
        })
    }

    pub fn num_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn agent_index(&self, id: &str) -> Option<usize> {
        self.agents.iter().position(|a| a.id == id)
    }

    /// Shared constraints that involve agent `i`.
    pub fn shared_of(&self, i: usize) -> impl Iterator<Item = (usize, &SharedConstraint)> {
        self.shared
            .iter()
            .enumerate()
            .filter(move |(_, c)| c.agents.contains(&i))
    }

    /// Number of position coordinates compared between two agents.
    pub fn planar_dims(&self, i: usize, j: usize) -> usize {
        self.agents[i]
            .model
            .position_indices()
            .len()
            .min(self.agents[j].model.position_indices().len())
    }

    /// Rolls out zero-motion controls (rest control) for every agent.
    pub fn initial_trajectories(&self) -> Result<Vec<Trajectory>> {
        self.agents
            .iter()
            .map(|a| {
                let controls = vec![a.model.rest_control(); self.horizon];
                let states = a.model.rollout_nominal(&a.x0, &controls)?;
                Ok(Trajectory { states, controls })
            })
            .collect()
    }

    fn check_trajectories(&self, trajs: &[Trajectory]) -> Result<()> {
        if trajs.len() != self.agents.len() {
            return Err(Error::InvalidInput(format!(
                "{} trajectories for {} agents",
                trajs.len(),
                self.agents.len()
            )));
        }
        for (a, tr) in self.agents.iter().zip(trajs) {
            if tr.states.len() != self.horizon + 1 || tr.controls.len() != self.horizon {
                return Err(Error::InvalidInput(format!("trajectory of {} has the wrong length", a.id)));
            }
            if tr.states.iter().any(|x| x.len() != a.state_dim())
                || tr.controls.iter().any(|u| u.len() != a.control_dim())
            {
                return Err(Error::InvalidInput(format!("trajectory of {} has the wrong dimension", a.id)));
            }
        }
        Ok(())
    }

    fn separation(&self, i: usize, j: usize, xi: &DVector<f64>, xj: &DVector<f64>) -> DVector<f64> {
        let d = self.planar_dims(i, j);
        let pi = self.agents[i].model.position_indices();
        let pj = self.agents[j].model.position_indices();
        DVector::from_fn(d, |k, _| xi[pi[k]] - xj[pj[k]])
    }

    fn individual_terms(&self, i: usize, tr: &Trajectory, grad: Option<&mut CostGradient>) -> f64 {
        let a = &self.agents[i];
        let t_len = self.horizon;
        let mut total = 0.0;
        let mut grad = grad;
        for c in &a.costs {
            match c {
                CostTerm::Lqr { q, r, qf, weight } => {
                    let ef = &tr.states[t_len] - &a.goal;
                    let qfe = qf * &ef;
                    total += weight * ef.dot(&qfe);
                    if let Some(g) = grad.as_deref_mut() {
                        g.states[t_len] += &qfe * (2.0 * weight);
                    }
                    for t in 0..t_len {
                        let e = &tr.states[t] - &a.goal;
                        let qe = q * &e;
                        let ru = r * &tr.controls[t];
                        total += weight * (e.dot(&qe) + tr.controls[t].dot(&ru));
                        if let Some(g) = grad.as_deref_mut() {
                            g.states[t] += &qe * (2.0 * weight);
                            g.controls[t] += &ru * (2.0 * weight);
                        }
                    }
                }
                CostTerm::SmoothnessGoal { q, qf, weight } => {
                    let ef = &tr.states[t_len] - &a.goal;
                    let qfe = qf * &ef;
                    total += weight * ef.dot(&qfe);
                    if let Some(g) = grad.as_deref_mut() {
                        g.states[t_len] += &qfe * (2.0 * weight);
                    }
                    for t in 1..=t_len {
                        let dx = &tr.states[t] - &tr.states[t - 1];
                        let qd = q * &dx;
                        total += weight * dx.dot(&qd);
                        if let Some(g) = grad.as_deref_mut() {
                            g.states[t] += &qd * (2.0 * weight);
                            g.states[t - 1] -= &qd * (2.0 * weight);
                        }
                    }
                }
                _ => {}
            }
        }
        total
    }

    fn coupling_term(
        &self,
        i: usize,
        j: usize,
        scale: f64,
        ti: &Trajectory,
        tj: &Trajectory,
        grad: Option<&mut CostGradient>,
    ) -> f64 {
        let pi = self.agents[i].model.position_indices();
        let mut total = 0.0;
        let mut grad = grad;
        for t in 0..=self.horizon {
            let d = self.separation(i, j, &ti.states[t], &tj.states[t]);
            total += scale * d.norm_squared();
            if let Some(g) = grad.as_deref_mut() {
                for (k, dk) in d.iter().enumerate() {
                    g.states[t][pi[k]] += 2.0 * scale * dk;
                }
            }
        }
        total
    }

    /// Cost of agent `i` over the joint profile.
    pub fn eval_cost(&self, i: usize, trajs: &[Trajectory]) -> Result<f64> {
        self.check_trajectories(trajs)?;
        Ok(self.cost_impl(i, trajs, None))
    }

    /// Cost of agent `i` and its gradient with respect to its own trajectory.
    pub fn cost_gradient(&self, i: usize, trajs: &[Trajectory]) -> Result<(f64, CostGradient)> {
        self.check_trajectories(trajs)?;
        let a = &self.agents[i];
        let mut g = CostGradient {
            states: vec![DVector::zeros(a.state_dim()); self.horizon + 1],
            controls: vec![DVector::zeros(a.control_dim()); self.horizon],
        };
        let v = self.cost_impl(i, trajs, Some(&mut g));
        Ok((v, g))
    }

    fn cost_impl(&self, i: usize, trajs: &[Trajectory], mut grad: Option<&mut CostGradient>) -> f64 {
        let mut total = self.individual_terms(i, &trajs[i], grad.as_deref_mut());
        for c in &self.agents[i].costs {
            if let Some((j, scale)) = c.coupling() {
                total += self.coupling_term(i, j, scale, &trajs[i], &trajs[j], grad.as_deref_mut());
            }
        }
        total
    }

    /// Individual terms of every agent plus each symmetric coupling once.
    pub fn potential(&self, trajs: &[Trajectory]) -> Result<f64> {
        self.check_trajectories(trajs)?;
        let mut total = 0.0;
        for i in 0..self.agents.len() {
            total += self.individual_terms(i, &trajs[i], None);
            for c in &self.agents[i].costs {
                if let Some((j, scale)) = c.coupling() {
                    if i < j {
                        total += self.coupling_term(i, j, scale, &trajs[i], &trajs[j], None);
                    }
                }
            }
        }
        Ok(total)
    }

    /// `|dP - dJ^i|` between two profiles differing only in agent `i`.
    pub fn potential_residual(&self, a: &[Trajectory], b: &[Trajectory], i: usize) -> Result<f64> {
        self.check_trajectories(a)?;
        self.check_trajectories(b)?;
        if let Some(k) = (0..a.len()).find(|&k| k != i && a[k] != b[k]) {
            return Err(Error::InvalidDeviation { agent: k });
        }
        let dp = self.potential(b)? - self.potential(a)?;
        let dj = self.eval_cost(i, b)? - self.eval_cost(i, a)?;
        Ok((dp - dj).abs())
    }

    /// Smoothed shared-constraint value, gradient and Hessian over
    /// `(x^i, u^i, x^j, u^j)` for the pair the constraint names. No supported
    /// constraint reads the partner's control, so it is not an argument.
    pub fn eval_shared(
        &self,
        c: &SharedConstraint,
        xi: &DVector<f64>,
        ui: &DVector<f64>,
        xj: &DVector<f64>,
    ) -> LocalEval {
        let [i, j] = c.agents;
        let (ai, aj) = (&self.agents[i], &self.agents[j]);
        let (ni, mi, nj, mj) = (ai.state_dim(), ai.control_dim(), aj.state_dim(), aj.control_dim());
        let dim = ni + mi + nj + mj;
        let d = self.planar_dims(i, j);
        let pi = ai.model.position_indices();
        let pj = aj.model.position_indices();
        // Selector of p^i - p^j over the local stacked vector.
        let mut sel = DMatrix::zeros(d, dim);
        for k in 0..d {
            sel[(k, pi[k])] = 1.0;
            sel[(k, ni + mi + pj[k])] = -1.0;
        }
        let diff = self.separation(i, j, xi, xj);
        let eps = c.epsilon;
        match c.kind {
            SharedKind::Collision | SharedKind::Proximity => {
                let sign = if c.kind == SharedKind::Collision { -1.0 } else { 1.0 };
                let (nv, ng, nh) = smoothed_norm(&diff, eps);
                let value = sign * (nv - c.param);
                let grad = sel.tr_mul(&ng) * sign;
                let hess = sel.tr_mul(&(nh * &sel)) * sign;
                LocalEval { value, grad, hess }
            }
            SharedKind::LineOfSight => {
                let cosang = c.param;
                let vel = ai.model.velocity(xi, ui);
                let v = vel.value.rows(0, d).into_owned();
                let mut jv = DMatrix::zeros(d, dim);
                jv.view_mut((0, 0), (d, ni + mi)).copy_from(&vel.jacobian.rows(0, d));
                // Relative position of the partner: p^j - p^i = -diff.
                let dp = -&diff;
                let jp = -&sel;
                let (nvv, gv, hv) = smoothed_norm(&v, eps);
                let (npp, gp, hp) = smoothed_norm(&dp, eps);
                let value = cosang * nvv * npp - v.dot(&dp);
                let dh_dv = &gv * (cosang * npp) - &dp;
                let dh_dp = &gp * (cosang * nvv) - &v;
                let grad = jv.tr_mul(&dh_dv) + jp.tr_mul(&dh_dp);
                let h_vv = hv * (cosang * npp);
                let h_pp = hp * (cosang * nvv);
                let h_vp = &gv * gp.transpose() * cosang - DMatrix::identity(d, d);
                let cross = jv.tr_mul(&(h_vp * &jp));
                let mut hess = jv.tr_mul(&(h_vv * &jv)) + jp.tr_mul(&(h_pp * &jp)) + &cross + cross.transpose();
                for k in 0..d {
                    let hk = &vel.hessians[k];
                    hess.view_mut((0, 0), (ni + mi, ni + mi)).zip_apply(hk, |h, x| *h += dh_dv[k] * x);
                }
                LocalEval { value, grad, hess }
            }
        }
    }

    /// Unsmoothed shared-constraint value, used on realized trajectories.
    pub fn shared_value(
        &self,
        c: &SharedConstraint,
        xi: &DVector<f64>,
        ui: &DVector<f64>,
        xj: &DVector<f64>,
    ) -> f64 {
        let [i, j] = c.agents;
        let diff = self.separation(i, j, xi, xj);
        match c.kind {
            SharedKind::Collision => c.param - diff.norm(),
            SharedKind::Proximity => diff.norm() - c.param,
            SharedKind::LineOfSight => {
                let d = diff.len();
                let v = self.agents[i].model.velocity(xi, ui).value.rows(0, d).into_owned();
                c.param * v.norm() * diff.norm() + v.dot(&diff)
            }
        }
    }
}

/// Gradient of a cost with respect to one agent's trajectory.
#[derive(Clone, Debug)]
pub struct CostGradient {
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
}

#[derive(Clone, Debug)]
pub struct LocalEval {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// `sqrt(|d|^2 + eps^2)` with its gradient and Hessian.
fn smoothed_norm(d: &DVector<f64>, eps: f64) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = (d.norm_squared() + eps * eps).sqrt();
    let g = d / n;
    let h = DMatrix::identity(d.len(), d.len()) / n - d * d.transpose() / (n * n * n);
    (n, g, h)
}

//! Scenario files and the bundled experiment configurations.
//!
//! A scenario is a TOML document with a `schema_version`, the game, and
//! optional solver, IBR, noise and Monte-Carlo sections. Bundled scenarios
//! are available by name wherever a path is accepted.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::best_response::{BestResponseOptions, Mode};
use crate::dynamics::{ModelKind, NoiseScaleSpec, QuadrotorParams};
use crate::error::{Error, Result};
use crate::game::{
    AgentSpec, BoxKind, CostTermSpec, Game, GameSpec, IndividualConstraint, MatrixSpec, SharedConstraintSpec, SharedKind,
};
use crate::ibr::IbrConfig;
use crate::simulate::{BallKind, NoiseSamplerSpec};

pub const SCHEMA_VERSION: u32 = 1;

pub const BUNDLED: &[&str] = &[
    "narrow_corridor",
    "intersection_noise",
    "scaling_N4",
    "scaling_N8",
    "scaling_N16",
    "scaling_N24",
    "heterogeneous_team",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub count: usize,
    pub seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self { count: 100, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub schema_version: u32,
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    #[serde(default)]
    pub ibr: IbrConfig,
    #[serde(default)]
    pub solver: BestResponseOptions,
    #[serde(default)]
    pub noise: NoiseSamplerSpec,
    #[serde(default)]
    pub monte_carlo: MonteCarloConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub game: GameSpec,
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every invariant and returns the validated game.
    pub fn validate(&self) -> Result<Game> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.ibr.validate().map_err(config_error)?;
        self.solver.validate().map_err(config_error)?;
        if !(self.noise.scale >= 0.0) {
            return Err(Error::Config("noise scale must be nonnegative".into()));
        }
        Game::from_spec(&self.game).map_err(config_error)
    }

    /// SHA-256 of the canonical JSON form.
    ///
    /// The IBR mode is excluded: robust and baseline solutions of one
    /// scenario share a hash, and each solution records its own mode.
    pub fn hash(&self) -> String {
        let mut normalized = self.clone();
        normalized.ibr.mode = Mode::Robust;
        let canonical = serde_json::to_vec(&normalized).expect("configuration serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Copy with a different horizon.
    pub fn with_horizon(mut self, horizon: usize) -> Self {
        self.game.horizon = horizon;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.ibr.mode = mode;
        self
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::InvalidInput(s) => Error::Config(s),
        other => other,
    }
}

/// Loads a scenario from a file path, or a bundled scenario by name.
pub fn load_scenario(path_or_name: &str) -> Result<ScenarioConfig> {
    if let Some(cfg) = bundled(path_or_name) {
        return Ok(cfg);
    }
    let path = Path::new(path_or_name);
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    ScenarioConfig::from_toml(&text)
}

/// Bundled scenario by name.
pub fn bundled(name: &str) -> Option<ScenarioConfig> {
    match name {
        "narrow_corridor" => Some(narrow_corridor()),
        "intersection_noise" => Some(intersection_noise()),
        "heterogeneous_team" => Some(heterogeneous_team()),
        _ => {
            let n: usize = name.strip_prefix("scaling_N")?.parse().ok()?;
            (n >= 2).then(|| scaling(n))
        }
    }
}

fn diag(v: &[f64]) -> MatrixSpec {
    MatrixSpec::diag(v.to_vec())
}

fn state_box(index: usize, lower: f64, upper: f64) -> IndividualConstraint {
    IndividualConstraint { kind: BoxKind::StateBox, index, lower, upper, hessian_bound: 0.0 }
}

fn control_box(index: usize, lower: f64, upper: f64) -> IndividualConstraint {
    IndividualConstraint { kind: BoxKind::ControlBox, index, lower, upper, hessian_bound: 0.0 }
}

/// Workspace, speed and input limits shared by the ground robots.
fn unicycle_limits(extent: f64) -> Vec<IndividualConstraint> {
    vec![
        state_box(0, -extent, extent),
        state_box(1, -extent, extent),
        state_box(3, -0.5, 1.0),
        control_box(0, -2.0, 2.0),
        control_box(1, -2.0, 2.0),
    ]
}

fn unicycle(id: &str, x0: [f64; 4], goal: [f64; 4], noise: NoiseScaleSpec, costs: Vec<CostTermSpec>, radius: f64, extent: f64) -> AgentSpec {
    AgentSpec {
        id: id.into(),
        model: ModelKind::Unicycle4,
        noise: Some(noise),
        x0: x0.to_vec(),
        goal: Some(goal.to_vec()),
        radius,
        costs,
        constraints: unicycle_limits(extent),
        mu: None,
        lipschitz_e: None,
    }
}

fn obstacle(id: &str, x: f64, y: f64, radius: f64) -> AgentSpec {
    AgentSpec {
        id: id.into(),
        model: ModelKind::StaticPoint,
        noise: None,
        x0: vec![x, y],
        goal: None,
        radius,
        costs: vec![],
        constraints: vec![],
        mu: None,
        lipschitz_e: None,
    }
}

fn collision(a: &str, b: &str) -> SharedConstraintSpec {
    SharedConstraintSpec {
        kind: SharedKind::Collision,
        agents: [a.into(), b.into()],
        distance: None,
        angle: None,
        epsilon: crate::game::DEFAULT_NORM_EPSILON,
        hessian_bound: 0.0,
    }
}

fn all_pairs_collision(ids: &[String]) -> Vec<SharedConstraintSpec> {
    let mut out = Vec::new();
    for (k, a) in ids.iter().enumerate() {
        for b in &ids[k + 1..] {
            out.push(collision(a, b));
        }
    }
    out
}

fn penalties(ids: &[String], me: &str, weight: f64) -> Vec<CostTermSpec> {
    ids.iter()
        .filter(|p| p.as_str() != me)
        .map(|p| CostTermSpec::CollisionPenalty { partner: p.clone(), weight })
        .collect()
}

fn smoothness_goal_unicycle() -> CostTermSpec {
    CostTermSpec::SmoothnessGoal {
        q: diag(&[2.0; 4]),
        qf: diag(&[10.0, 10.0, 0.0, 10.0]),
        weight: 1.0,
    }
}

fn base(name: &str, description: &str, step_size: f64, game: GameSpec) -> ScenarioConfig {
    ScenarioConfig {
        schema_version: SCHEMA_VERSION,
        name: name.into(),
        description: description.into(),
        ibr: IbrConfig { step_size, ..IbrConfig::default() },
        solver: BestResponseOptions::default(),
        noise: NoiseSamplerSpec { ball: BallKind::TwoNorm, scale: 1.0, boundary: false },
        monte_carlo: MonteCarloConfig::default(),
        output_dir: None,
        game,
    }
}

/// Two ground robots swap sides through the gap between two discs.
///
/// The starts are offset slightly in y so the two robots are not exactly
/// head on.
pub fn narrow_corridor() -> ScenarioConfig {
    let noise = NoiseScaleSpec::uniform(4, 0.002);
    let ids = vec!["r1".to_string(), "r2".to_string()];
    let lqr = CostTermSpec::Lqr {
        q: diag(&[2.0; 4]),
        r: diag(&[1.0; 2]),
        qf: diag(&[5.0, 5.0, 0.0, 5.0]),
        weight: 1.0,
    };
    let costs = |me: &str| {
        let mut c = vec![lqr.clone()];
        c.extend(penalties(&ids, me, 1.0));
        c
    };
    let mut shared = all_pairs_collision(&ids);
    for r in &ids {
        shared.push(collision(r, "obs_top"));
        shared.push(collision(r, "obs_bottom"));
    }
    let game = GameSpec {
        horizon: 60,
        dt: 0.1,
        agents: vec![
            unicycle("r1", [-0.8, 0.05, 0.0, 0.0], [0.8, 0.05, 0.0, 0.0], noise.clone(), costs("r1"), 0.1, 1.5),
            unicycle("r2", [0.8, -0.05, PI, 0.0], [-0.8, -0.05, PI, 0.0], noise, costs("r2"), 0.1, 1.5),
            obstacle("obs_top", 0.0, 0.5, 0.3),
            obstacle("obs_bottom", 0.0, -0.6, 0.4),
        ],
        shared,
    };
    base("narrow_corridor", "two unicycles swap sides through a gap between two discs", 0.3, game)
}

/// Four ground robots cross an intersection where noise peaks at the origin.
///
/// Start poses, radii and the reduced repulsion weight are reconstructed.
pub fn intersection_noise() -> ScenarioConfig {
    let noise = NoiseScaleSpec::GaussianBump { amplitude: 1.0 / (1000.0 * PI), rate: 25.0 };
    let starts = [
        ("east", [1.0, 0.0, PI, 0.0], [-1.0, 0.0, PI, 0.0]),
        ("north", [0.0, 1.0, -PI / 2.0, 0.0], [0.0, -1.0, -PI / 2.0, 0.0]),
        ("west", [-1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]),
        ("south", [0.0, -1.0, PI / 2.0, 0.0], [0.0, 1.0, PI / 2.0, 0.0]),
    ];
    let ids: Vec<String> = starts.iter().map(|s| s.0.to_string()).collect();
    let agents = starts
        .iter()
        .map(|(id, x0, goal)| {
            let mut costs = vec![smoothness_goal_unicycle()];
            costs.extend(penalties(&ids, id, 0.01));
            unicycle(id, *x0, *goal, noise.clone(), costs, 0.1, 1.5)
        })
        .collect();
    let game = GameSpec { horizon: 40, dt: 0.1, agents, shared: all_pairs_collision(&ids) };
    base("intersection_noise", "four unicycles cross an intersection with noise concentrated at the origin", 1.0, game)
}

/// `n` ground robots on a circle, each heading to the antipodal point.
pub fn scaling(n: usize) -> ScenarioConfig {
    let noise = NoiseScaleSpec::uniform(4, 0.002);
    let ids: Vec<String> = (0..n).map(|k| format!("r{k}")).collect();
    let radius = 1.0;
    let agents = (0..n)
        .map(|k| {
            // Small offset so antipodal pairs do not meet head-on exactly.
            let a = 2.0 * PI * k as f64 / n as f64 + 0.05;
            let (s, c) = a.sin_cos();
            let heading = a + PI;
            let x0 = [radius * c, radius * s, heading, 0.0];
            let goal = [-radius * c, -radius * s, heading, 0.0];
            let mut costs = vec![smoothness_goal_unicycle()];
            costs.extend(penalties(&ids, &ids[k], 0.01));
            unicycle(&ids[k], x0, goal, noise.clone(), costs, 0.06, 1.5)
        })
        .collect();
    let game = GameSpec { horizon: 40, dt: 0.1, agents, shared: all_pairs_collision(&ids) };
    let step = if n >= 16 { 0.5 } else { 0.1 };
    base(&format!("scaling_N{n}"), "unicycles on a circle swap to antipodal points", step, game)
}

/// Two teams of one quadrotor leading two ground robots.
///
/// The quadrotor parameters, altitude band, attitude limits, poses and the
/// reduced repulsion weight are reconstructed.
pub fn heterogeneous_team() -> ScenarioConfig {
    let quad_noise = {
        let mut g = vec![0.004; 3];
        g.extend([1e-5; 9]);
        NoiseScaleSpec::Constant { gain: g }
    };
    let ground_noise = NoiseScaleSpec::uniform(4, 5e-4);
    let teams = [("a", 1.0), ("b", -1.0)];
    let mut ids = Vec::new();
    for (t, _) in &teams {
        ids.extend([format!("quad_{t}"), format!("lead_{t}"), format!("follow_{t}")]);
    }
    let mut agents = Vec::new();
    let mut shared = all_pairs_collision(&ids);
    for (t, side) in teams {
        let quad = format!("quad_{t}");
        let lead = format!("lead_{t}");
        let follow = format!("follow_{t}");
        let y = 0.4 * side;
        let heading = if side > 0.0 { 0.0 } else { PI };
        let x_start = -0.9 * side;
        let mut quad_costs = vec![CostTermSpec::SmoothnessGoal {
            q: {
                let mut d = vec![2.0; 3];
                d.extend([0.0; 3]);
                d.extend([2.0; 6]);
                diag(&d)
            },
            qf: {
                let mut d = vec![10.0; 3];
                d.extend([0.0; 3]);
                d.extend([10.0; 6]);
                diag(&d)
            },
            weight: 1.0,
        }];
        quad_costs.extend(penalties(&ids, &quad, 0.01));
        quad_costs.push(CostTermSpec::ProximityPenalty { partner: lead.clone(), weight: 1.0 });
        let mut qx0 = vec![0.0; 12];
        qx0[0] = x_start;
        qx0[1] = y;
        qx0[2] = 1.0;
        let mut qgoal = qx0.clone();
        qgoal[0] = -x_start;
        // The whole team starts drifting in formation at the same speed.
        qx0[6] = 0.2 * side;
        agents.push(AgentSpec {
            id: quad.clone(),
            model: ModelKind::Quadrotor12(QuadrotorParams::default()),
            noise: Some(quad_noise.clone()),
            x0: qx0,
            goal: Some(qgoal),
            radius: 0.05,
            costs: quad_costs,
            constraints: vec![
                state_box(0, -2.0, 2.0),
                state_box(1, -2.0, 2.0),
                state_box(2, 0.5, 1.5),
                state_box(3, -0.5, 0.5),
                state_box(4, -0.5, 0.5),
                control_box(0, 0.0, 20.0),
                control_box(1, -2.0, 2.0),
                control_box(2, -2.0, 2.0),
                control_box(3, -2.0, 2.0),
            ],
            mu: None,
            lipschitz_e: None,
        });
        let ground_smooth = CostTermSpec::SmoothnessGoal {
            q: diag(&[2.0; 4]),
            qf: diag(&[0.0; 4]),
            weight: 1.0,
        };
        for (k, (me, leader)) in [(&lead, &quad), (&follow, &lead)].into_iter().enumerate() {
            let mut costs = vec![ground_smooth.clone()];
            costs.extend(penalties(&ids, me, 0.01));
            costs.push(CostTermSpec::ProximityPenalty { partner: leader.clone(), weight: 1.0 });
            if k == 0 {
                costs.push(CostTermSpec::ProximityPenalty { partner: follow.clone(), weight: 1.0 });
            }
            let offset = 0.3 * side * (k + 1) as f64;
            let x0 = [x_start - offset, y, heading, 0.2];
            let goal = [-x_start - offset, y, heading, 0.0];
            agents.push(unicycle(me, x0, goal, ground_noise.clone(), costs, 0.06, 2.0));
            shared.push(SharedConstraintSpec {
                kind: SharedKind::Proximity,
                agents: [me.clone(), leader.clone()],
                distance: Some(0.5),
                angle: None,
                epsilon: crate::game::DEFAULT_NORM_EPSILON,
                hessian_bound: 0.0,
            });
            shared.push(SharedConstraintSpec {
                kind: SharedKind::LineOfSight,
                agents: [me.clone(), leader.clone()],
                distance: None,
                angle: Some(PI / 2.0),
                epsilon: crate::game::DEFAULT_NORM_EPSILON,
                hessian_bound: 0.0,
            });
        }
    }
    let game = GameSpec { horizon: 40, dt: 0.1, agents, shared };
    base("heterogeneous_team", "two teams, each a quadrotor leading two ground robots", 0.2, game)
}

//! Agent dynamics: forward-Euler discretized models, closed-form Jacobians,
//! and the state-dependent noise map `E(x)`.
//!
//! Every model exposes the same surface so the synthesis code never needs to
//! know which vehicle it is driving:
//!
//! * `step` evaluates `x + dt * f_c(x, u)`,
//! * `jacobians` returns `(A, B) = (df/dx, df/du)` of the *discrete* map,
//! * `noise_scale` returns the diagonal matrix `E(x)`,
//! * `velocity` returns the world-frame velocity used by line-of-sight
//!   constraints, together with its first and second derivatives.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_dubins_speed() -> f64 {
    0.2
}

/// Physical parameters of the 12-state quadrotor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuadrotorParams {
    pub mass: f64,
    pub gravity: f64,
    /// Diagonal of the body inertia matrix.
    pub inertia: [f64; 3],
}

impl Default for QuadrotorParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            gravity: 9.81,
            inertia: [1.0, 1.0, 1.0],
        }
    }
}

/// Which vehicle model an agent follows.
///
/// State layouts:
/// * `unicycle4`: `[px, py, heading, speed]`, controls `[turn rate, acceleration]`
/// * `dubins3`: `[px, py, heading]` at a fixed speed, control `[turn rate]`
/// * `single_integrator3`: `[px, py, pz]`, controls `[vx, vy, vz]`
/// * `quadrotor12`: `[p (3), roll/pitch/yaw (3), v (3), body rates (3)]`,
///   controls `[thrust, torque x, torque y, torque z]`
/// * `static_point`: `[px, py]` with no controls; used for fixed obstacles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Unicycle4,
    Dubins3 {
        #[serde(default = "default_dubins_speed")]
        speed: f64,
    },
    SingleIntegrator3,
    Quadrotor12(QuadrotorParams),
    StaticPoint,
}

impl ModelKind {
    pub fn state_dim(&self) -> usize {
        match self {
            ModelKind::Unicycle4 => 4,
            ModelKind::Dubins3 { .. } => 3,
            ModelKind::SingleIntegrator3 => 3,
            ModelKind::Quadrotor12(_) => 12,
            ModelKind::StaticPoint => 2,
        }
    }

    pub fn control_dim(&self) -> usize {
        match self {
            ModelKind::Unicycle4 => 2,
            ModelKind::Dubins3 { .. } => 1,
            ModelKind::SingleIntegrator3 => 3,
            ModelKind::Quadrotor12(_) => 4,
            ModelKind::StaticPoint => 0,
        }
    }

    /// Indices of the position coordinates inside the state vector.
    pub fn position_indices(&self) -> &'static [usize] {
        match self {
            ModelKind::SingleIntegrator3 | ModelKind::Quadrotor12(_) => &[0, 1, 2],
            _ => &[0, 1],
        }
    }

    pub fn is_static(&self) -> bool {
        matches!(self, ModelKind::StaticPoint)
    }
}

/// Diagonal, possibly state-dependent, noise scaling `E(x) = scale(x) * diag(gain)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseScaleSpec {
    /// `E(x) = diag(gain)`.
    Constant { gain: Vec<f64> },
    /// `E(x) = amplitude * exp(-rate * (px^2 + py^2)) * I`.
    GaussianBump { amplitude: f64, rate: f64 },
}

impl NoiseScaleSpec {
    pub fn zero(n: usize) -> Self {
        NoiseScaleSpec::Constant { gain: vec![0.0; n] }
    }

    pub fn uniform(n: usize, gain: f64) -> Self {
        NoiseScaleSpec::Constant {
            gain: vec![gain; n],
        }
    }

    /// Scalar factor of `E(x)`.
    pub fn scale(&self, x: &DVector<f64>) -> f64 {
        match self {
            NoiseScaleSpec::Constant { .. } => 1.0,
            NoiseScaleSpec::GaussianBump { amplitude, rate } => {
                amplitude * (-rate * (x[0] * x[0] + x[1] * x[1])).exp()
            }
        }
    }

    /// Gradient of [`Self::scale`] with respect to the state.
    pub fn scale_gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(x.len());
        if let NoiseScaleSpec::GaussianBump { rate, .. } = self {
            let s = self.scale(x);
            g[0] = -2.0 * rate * x[0] * s;
            g[1] = -2.0 * rate * x[1] * s;
        }
        g
    }

    pub fn is_state_dependent(&self) -> bool {
        matches!(self, NoiseScaleSpec::GaussianBump { .. })
    }

    /// Diagonal pattern multiplied by [`Self::scale`].
    pub fn pattern(&self, n: usize) -> DVector<f64> {
        match self {
            NoiseScaleSpec::Constant { gain } => DVector::from_column_slice(gain),
            NoiseScaleSpec::GaussianBump { .. } => DVector::from_element(n, 1.0),
        }
    }

    /// The diagonal of `E(x)`.
    pub fn diagonal(&self, x: &DVector<f64>) -> DVector<f64> {
        self.pattern(x.len()) * self.scale(x)
    }

    pub fn is_zero(&self) -> bool {
        match self {
            NoiseScaleSpec::Constant { gain } => gain.iter().all(|g| *g == 0.0),
            NoiseScaleSpec::GaussianBump { amplitude, .. } => *amplitude == 0.0,
        }
    }
}

/// World-frame velocity of an agent and its derivatives with respect to `(x, u)`.
pub struct VelocityEval {
    pub value: DVector<f64>,
    /// `d x (n + m)` Jacobian.
    pub jacobian: DMatrix<f64>,
    /// One `(n + m) x (n + m)` Hessian per velocity component.
    pub hessians: Vec<DMatrix<f64>>,
}

/// A discrete-time agent model.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsModel {
    pub kind: ModelKind,
    pub dt: f64,
    pub noise: NoiseScaleSpec,
}

impl DynamicsModel {
    pub fn new(kind: ModelKind, dt: f64, noise: NoiseScaleSpec) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        if let NoiseScaleSpec::Constant { gain } = &noise {
            if gain.len() != kind.state_dim() {
                return Err(Error::InvalidInput(format!(
                    "noise gain has {} entries, state has {}",
                    gain.len(),
                    kind.state_dim()
                )));
            }
        }
        Ok(Self { kind, dt, noise })
    }

    pub fn state_dim(&self) -> usize {
        self.kind.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.kind.control_dim()
    }

    pub fn position_indices(&self) -> &'static [usize] {
        self.kind.position_indices()
    }

    pub fn position(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.position_indices().len(),
            self.position_indices().iter().map(|&k| x[k]),
        )
    }

    /// Control that keeps the model at rest (hover thrust for the quadrotor).
    pub fn rest_control(&self) -> DVector<f64> {
        match &self.kind {
            ModelKind::Quadrotor12(p) => {
                DVector::from_vec(vec![p.mass * p.gravity, 0.0, 0.0, 0.0])
            }
            k => DVector::zeros(k.control_dim()),
        }
    }

    fn check_dims(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
        if x.len() != self.state_dim() || u.len() != self.control_dim() {
            return Err(Error::InvalidInput(format!(
                "expected state/control dims ({}, {}), got ({}, {})",
                self.state_dim(),
                self.control_dim(),
                x.len(),
                u.len()
            )));
        }
        Ok(())
    }

    /// Continuous-time vector field.
    fn vector_field(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            ModelKind::Unicycle4 => DVector::from_vec(vec![
                x[3] * x[2].cos(),
                x[3] * x[2].sin(),
                u[0],
                u[1],
            ]),
            ModelKind::Dubins3 { speed } => {
                DVector::from_vec(vec![speed * x[2].cos(), speed * x[2].sin(), u[0]])
            }
            ModelKind::SingleIntegrator3 => u.clone(),
            ModelKind::Quadrotor12(p) => quadrotor_field(p, x, u),
            ModelKind::StaticPoint => DVector::zeros(2),
        }
    }

    /// Jacobians of the continuous vector field.
    fn field_jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.state_dim();
        let m = self.control_dim();
        let mut fx = DMatrix::zeros(n, n);
        let mut fu = DMatrix::zeros(n, m);
        match &self.kind {
            ModelKind::Unicycle4 => {
                let (s, c) = x[2].sin_cos();
                fx[(0, 2)] = -x[3] * s;
                fx[(0, 3)] = c;
                fx[(1, 2)] = x[3] * c;
                fx[(1, 3)] = s;
                fu[(2, 0)] = 1.0;
                fu[(3, 1)] = 1.0;
            }
            ModelKind::Dubins3 { speed } => {
                let (s, c) = x[2].sin_cos();
                fx[(0, 2)] = -speed * s;
                fx[(1, 2)] = speed * c;
                fu[(2, 0)] = 1.0;
            }
            ModelKind::SingleIntegrator3 => {
                fu.fill_with_identity();
            }
            ModelKind::Quadrotor12(p) => quadrotor_jacobians(p, x, u, &mut fx, &mut fu),
            ModelKind::StaticPoint => {}
        }
        (fx, fu)
    }

    /// One forward-Euler step of the nominal (noise-free) dynamics.
    pub fn step_nominal(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dims(x, u)?;
        Ok(x + self.vector_field(x, u) * self.dt)
    }

    /// `(A, B)` of the discrete map at `(z, v)`.
    pub fn jacobians(
        &self,
        z: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_dims(z, v)?;
        let (fx, fu) = self.field_jacobians(z, v);
        let n = self.state_dim();
        Ok((DMatrix::identity(n, n) + fx * self.dt, fu * self.dt))
    }

    /// `E(x)` as a dense matrix.
    pub fn noise_scale(&self, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.noise.diagonal(x))
    }

    /// Nominal rollout `z_0 = x0`, `z_{t+1} = f(z_t, v_t)`; returns `T + 1` states.
    pub fn rollout_nominal(
        &self,
        x0: &DVector<f64>,
        controls: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>> {
        let mut states = Vec::with_capacity(controls.len() + 1);
        states.push(x0.clone());
        for (t, v) in controls.iter().enumerate() {
            let next = self.step_nominal(&states[t], v)?;
            if next.iter().any(|c| !c.is_finite()) {
                return Err(Error::NumericalBlowup {
                    step: t + 1,
                    what: "non-finite nominal state".into(),
                });
            }
            states.push(next);
        }
        Ok(states)
    }

    /// Velocity vector used by line-of-sight constraints.
    pub fn velocity(&self, x: &DVector<f64>, u: &DVector<f64>) -> VelocityEval {
        let n = self.state_dim();
        let m = self.control_dim();
        let d = self.position_indices().len();
        let mut value = DVector::zeros(d);
        let mut jacobian = DMatrix::zeros(d, n + m);
        let mut hessians = vec![DMatrix::zeros(n + m, n + m); d];
        match &self.kind {
            ModelKind::Unicycle4 => {
                let (s, c) = x[2].sin_cos();
                let speed = x[3];
                value[0] = speed * c;
                value[1] = speed * s;
                jacobian[(0, 2)] = -speed * s;
                jacobian[(0, 3)] = c;
                jacobian[(1, 2)] = speed * c;
                jacobian[(1, 3)] = s;
                hessians[0][(2, 2)] = -speed * c;
                hessians[0][(2, 3)] = -s;
                hessians[0][(3, 2)] = -s;
                hessians[1][(2, 2)] = -speed * s;
                hessians[1][(2, 3)] = c;
                hessians[1][(3, 2)] = c;
            }
            ModelKind::Dubins3 { speed } => {
                let (s, c) = x[2].sin_cos();
                value[0] = speed * c;
                value[1] = speed * s;
                jacobian[(0, 2)] = -speed * s;
                jacobian[(1, 2)] = speed * c;
                hessians[0][(2, 2)] = -speed * c;
                hessians[1][(2, 2)] = -speed * s;
            }
            ModelKind::SingleIntegrator3 => {
                for k in 0..3 {
                    value[k] = u[k];
                    jacobian[(k, n + k)] = 1.0;
                }
            }
            ModelKind::Quadrotor12(_) => {
                for k in 0..3 {
                    value[k] = x[6 + k];
                    jacobian[(k, 6 + k)] = 1.0;
                }
            }
            ModelKind::StaticPoint => {}
        }
        VelocityEval {
            value,
            jacobian,
            hessians,
        }
    }
}

/// Rotation of the body z-axis into the world frame (ZYX Euler angles) and
/// its partial derivatives with respect to roll, pitch, yaw.
fn body_z_axis(phi: f64, theta: f64, psi: f64) -> ([f64; 3], [[f64; 3]; 3]) {
    let (sf, cf) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = psi.sin_cos();
    let a = [
        cf * st * cp + sf * sp,
        cf * st * sp - sf * cp,
        cf * ct,
    ];
    // d[row][angle]
    let d = [
        [-sf * st * cp + cf * sp, cf * ct * cp, -cf * st * sp + sf * cp],
        [-sf * st * sp - cf * cp, cf * ct * sp, cf * st * cp + sf * sp],
        [-sf * ct, -cf * st, 0.0],
    ];
    (a, d)
}

fn quadrotor_field(p: &QuadrotorParams, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let (phi, theta, psi) = (x[3], x[4], x[5]);
    let (wp, wq, wr) = (x[9], x[10], x[11]);
    let (sf, cf) = phi.sin_cos();
    let (tt, ct) = (theta.tan(), theta.cos());
    let (a, _) = body_z_axis(phi, theta, psi);
    let [ix, iy, iz] = p.inertia;
    let thrust = u[0] / p.mass;
    DVector::from_vec(vec![
        x[6],
        x[7],
        x[8],
        wp + wq * sf * tt + wr * cf * tt,
        wq * cf - wr * sf,
        (wq * sf + wr * cf) / ct,
        thrust * a[0],
        thrust * a[1],
        thrust * a[2] - p.gravity,
        ((iy - iz) * wq * wr + u[1]) / ix,
        ((iz - ix) * wp * wr + u[2]) / iy,
        ((ix - iy) * wp * wq + u[3]) / iz,
    ])
}

fn quadrotor_jacobians(
    p: &QuadrotorParams,
    x: &DVector<f64>,
    u: &DVector<f64>,
    fx: &mut DMatrix<f64>,
    fu: &mut DMatrix<f64>,
) {
    let (phi, theta, psi) = (x[3], x[4], x[5]);
    let (wp, wq, wr) = (x[9], x[10], x[11]);
    let (sf, cf) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    let tt = st / ct;
    let sec2 = 1.0 / (ct * ct);
    let [ix, iy, iz] = p.inertia;

    for k in 0..3 {
        fx[(k, 6 + k)] = 1.0;
    }
    // Euler angle kinematics.
    fx[(3, 3)] = wq * cf * tt - wr * sf * tt;
    fx[(3, 4)] = (wq * sf + wr * cf) * sec2;
    fx[(3, 9)] = 1.0;
    fx[(3, 10)] = sf * tt;
    fx[(3, 11)] = cf * tt;
    fx[(4, 3)] = -wq * sf - wr * cf;
    fx[(4, 10)] = cf;
    fx[(4, 11)] = -sf;
    fx[(5, 3)] = (wq * cf - wr * sf) / ct;
    fx[(5, 4)] = (wq * sf + wr * cf) * st * sec2;
    fx[(5, 10)] = sf / ct;
    fx[(5, 11)] = cf / ct;
    // Translational acceleration.
    let (a, da) = body_z_axis(phi, theta, psi);
    let thrust = u[0] / p.mass;
    for row in 0..3 {
        for ang in 0..3 {
            fx[(6 + row, 3 + ang)] = thrust * da[row][ang];
        }
        fu[(6 + row, 0)] = a[row] / p.mass;
    }
    // Rigid-body rotation.
    fx[(9, 10)] = (iy - iz) * wr / ix;
    fx[(9, 11)] = (iy - iz) * wq / ix;
    fx[(10, 9)] = (iz - ix) * wr / iy;
    fx[(10, 11)] = (iz - ix) * wp / iy;
    fx[(11, 9)] = (ix - iy) * wq / iz;
    fx[(11, 10)] = (ix - iy) * wp / iz;
    fu[(9, 1)] = 1.0 / ix;
    fu[(10, 2)] = 1.0 / iy;
    fu[(11, 3)] = 1.0 / iz;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn model(kind: ModelKind, dt: f64) -> DynamicsModel {
        let n = kind.state_dim();
        DynamicsModel::new(kind, dt, NoiseScaleSpec::zero(n)).unwrap()
    }

    fn all_kinds() -> Vec<ModelKind> {
        vec![
            ModelKind::Unicycle4,
            ModelKind::Dubins3 { speed: 0.2 },
            ModelKind::SingleIntegrator3,
            ModelKind::Quadrotor12(QuadrotorParams {
                mass: 1.3,
                gravity: 9.81,
                inertia: [0.8, 1.1, 1.7],
            }),
        ]
    }

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn unicycle_rest_is_fixed_point() {
        let m = model(ModelKind::Unicycle4, 0.1);
        let x = m.step_nominal(&dv(&[0.0; 4]), &dv(&[0.0, 0.0])).unwrap();
        assert_eq!(x, dv(&[0.0; 4]));
    }

    #[test]
    fn unicycle_euler_step() {
        let m = model(ModelKind::Unicycle4, 0.1);
        let x = m
            .step_nominal(&dv(&[0.0, 0.0, 0.0, 1.0]), &dv(&[0.0, 0.0]))
            .unwrap();
        assert!((x - dv(&[0.1, 0.0, 0.0, 1.0])).amax() < 1e-15);
    }

    #[test]
    fn single_integrator_euler_step() {
        let m = model(ModelKind::SingleIntegrator3, 0.4);
        let x = m
            .step_nominal(&dv(&[1.0, 1.0, 1.0]), &dv(&[0.0, 0.0, -1.0]))
            .unwrap();
        assert!((x - dv(&[1.0, 1.0, 0.6])).amax() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = model(ModelKind::Unicycle4, 0.1);
        assert!(matches!(
            m.step_nominal(&dv(&[0.0; 3]), &dv(&[0.0; 2])),
            Err(Error::InvalidInput(_))
        ));
        assert!(m.jacobians(&dv(&[0.0; 4]), &dv(&[0.0; 3])).is_err());
    }

    #[test]
    fn single_integrator_jacobians() {
        let m = model(ModelKind::SingleIntegrator3, 0.25);
        let (a, b) = m.jacobians(&dv(&[0.3, -1.0, 2.0]), &dv(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(a, DMatrix::identity(3, 3));
        assert_eq!(b, DMatrix::identity(3, 3) * 0.25);
    }

    #[test]
    fn unicycle_jacobian_entries() {
        let m = model(ModelKind::Unicycle4, 0.1);
        let (a, _) = m.jacobians(&dv(&[0.0, 0.0, 0.0, 1.0]), &dv(&[0.0, 0.0])).unwrap();
        assert_eq!(a[(0, 2)], 0.0);
        assert!((a[(0, 3)] - 0.1).abs() < 1e-15);
    }

    /// Central finite differences of the discrete map.
    fn fd_jacobians(
        m: &DynamicsModel,
        z: &DVector<f64>,
        v: &DVector<f64>,
        h: f64,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = z.len();
        let k = v.len();
        let mut a = DMatrix::zeros(n, n);
        let mut b = DMatrix::zeros(n, k);
        for j in 0..n {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[j] += h;
            zm[j] -= h;
            let col = (m.step_nominal(&zp, v).unwrap() - m.step_nominal(&zm, v).unwrap()) / (2.0 * h);
            a.set_column(j, &col);
        }
        for j in 0..k {
            let mut vp = v.clone();
            let mut vm = v.clone();
            vp[j] += h;
            vm[j] -= h;
            let col = (m.step_nominal(z, &vp).unwrap() - m.step_nominal(z, &vm).unwrap()) / (2.0 * h);
            b.set_column(j, &col);
        }
        (a, b)
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for kind in all_kinds() {
            let m = model(kind, 0.1);
            for _ in 0..100 {
                let z = DVector::from_fn(m.state_dim(), |_, _| rng.gen_range(-1.0..1.0));
                let v = DVector::from_fn(m.control_dim(), |_, _| rng.gen_range(-2.0..2.0));
                let (a, b) = m.jacobians(&z, &v).unwrap();
                let (afd, bfd) = fd_jacobians(&m, &z, &v, 1e-6);
                assert!((a - afd).amax() <= 1e-5, "{:?}", m.kind);
                assert!((b - bfd).amax() <= 1e-5, "{:?}", m.kind);
            }
        }
    }

    #[test]
    fn single_integrator_has_zero_linearization_remainder() {
        let m = model(ModelKind::SingleIntegrator3, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let z = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let v = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let x = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let u = DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
            let (a, b) = m.jacobians(&z, &v).unwrap();
            let lin = m.step_nominal(&z, &v).unwrap() + &a * (&x - &z) + &b * (&u - &v);
            assert!((m.step_nominal(&x, &u).unwrap() - lin).amax() < 1e-15);
        }
    }

    #[test]
    fn constant_noise_scale() {
        let m = DynamicsModel::new(ModelKind::Unicycle4, 0.1, NoiseScaleSpec::uniform(4, 0.002)).unwrap();
        let e = m.noise_scale(&dv(&[3.0, -2.0, 1.0, 0.5]));
        assert_eq!(e, DMatrix::identity(4, 4) * 0.002);
    }

    #[test]
    fn gaussian_bump_noise_scale() {
        let amp = 1.0 / (1000.0 * PI);
        let m = DynamicsModel::new(
            ModelKind::Unicycle4,
            0.1,
            NoiseScaleSpec::GaussianBump { amplitude: amp, rate: 25.0 },
        )
        .unwrap();
        let e0 = m.noise_scale(&dv(&[0.0, 0.0, 0.7, 0.2]));
        assert!((e0 - DMatrix::identity(4, 4) * amp).amax() < 1e-18);
        let mut last = f64::INFINITY;
        for r in [0.05, 0.1, 0.3, 1.0, 3.0] {
            let e = m.noise_scale(&dv(&[r, 0.0, 0.0, 0.0]))[(0, 0)];
            assert!(e < last);
            last = e;
        }
        assert!(last < 1e-90);
    }

    #[test]
    fn bump_gradient_matches_finite_differences() {
        let spec = NoiseScaleSpec::GaussianBump { amplitude: 0.3, rate: 2.0 };
        let x = dv(&[0.2, -0.4, 1.0, 0.0]);
        let g = spec.scale_gradient(&x);
        for k in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += 1e-6;
            xm[k] -= 1e-6;
            let fd = (spec.scale(&xp) - spec.scale(&xm)) / 2e-6;
            assert!((g[k] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn rollout_lengths_and_values() {
        let m = model(ModelKind::Unicycle4, 0.1);
        let z = m
            .rollout_nominal(&dv(&[0.0, 0.0, 0.0, 1.0]), &[dv(&[0.0, 0.0]), dv(&[0.0, 0.0])])
            .unwrap();
        assert_eq!(z.len(), 3);
        assert!((&z[1] - dv(&[0.1, 0.0, 0.0, 1.0])).amax() < 1e-15);
        assert!((&z[2] - dv(&[0.2, 0.0, 0.0, 1.0])).amax() < 1e-15);

        let si = model(ModelKind::SingleIntegrator3, 0.1);
        let x0 = dv(&[1.0, 2.0, 3.0]);
        let zs = si.rollout_nominal(&x0, &vec![DVector::zeros(3); 7]).unwrap();
        assert_eq!(zs.len(), 8);
        assert!(zs.iter().all(|z| *z == x0));
    }

    #[test]
    fn rollout_reports_blowup_step() {
        let m = model(ModelKind::SingleIntegrator3, 0.1);
        let controls = vec![dv(&[0.0; 3]), dv(&[f64::INFINITY, 0.0, 0.0])];
        match m.rollout_nominal(&dv(&[0.0; 3]), &controls) {
            Err(Error::NumericalBlowup { step, .. }) => assert_eq!(step, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rollout_is_deterministic() {
        let m = model(all_kinds()[3].clone(), 0.1);
        let controls: Vec<_> = (0..20)
            .map(|t| dv(&[9.0 + 0.1 * t as f64, 0.01, -0.02, 0.003]))
            .collect();
        let x0 = DVector::zeros(12);
        let a = m.rollout_nominal(&x0, &controls).unwrap();
        let b = m.rollout_nominal(&x0, &controls).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!(p.iter().zip(q.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn velocity_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for kind in all_kinds() {
            let m = model(kind, 0.1);
            let (n, k) = (m.state_dim(), m.control_dim());
            let y = DVector::from_fn(n + k, |_, _| rng.gen_range(-1.0..1.0));
            let split = |y: &DVector<f64>| (y.rows(0, n).into_owned(), y.rows(n, k).into_owned());
            let (x, u) = split(&y);
            let ev = m.velocity(&x, &u);
            for j in 0..n + k {
                let mut yp = y.clone();
                let mut ym = y.clone();
                yp[j] += 1e-6;
                ym[j] -= 1e-6;
                let (xp, up) = split(&yp);
                let (xm, um) = split(&ym);
                let ep = m.velocity(&xp, &up);
                let em = m.velocity(&xm, &um);
                let fd = (&ep.value - &em.value) / 2e-6;
                for c in 0..fd.len() {
                    assert!((ev.jacobian[(c, j)] - fd[c]).abs() < 1e-6);
                    let fdh = (ep.jacobian.row(c) - em.jacobian.row(c)) / 2e-6;
                    for l in 0..n + k {
                        assert!((ev.hessians[c][(j, l)] - fdh[l]).abs() < 1e-6);
                    }
                }
            }
        }
    }
}

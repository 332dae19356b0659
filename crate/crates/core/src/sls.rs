//! System-level parameterization of causal error feedback.
//!
//! Index conventions used throughout the crate:
//!
//! * the nominal trajectory has states `z_0..z_T` and controls `v_0..v_{T-1}`,
//!   linearized into `A_t, B_t` for `t in 0..T`;
//! * the error dynamics are `dx_{t+1} = A_t dx_t + B_t du_t + d_t` with
//!   `dx_0 = 0`;
//! * the feedback law is `du_t = sum_{tau < t} K_{t-1,tau} dx_{t-tau}`, so
//!   `K_{s,0}` multiplies the newest error;
//! * the response block `Phi_{s,tau}` maps the disturbance `d_tau` to the
//!   stacked error `e_{s+1} = (dx_{s+1}, du_{s+1})`, for `0 <= tau <= s < T`.
//!
//! With these conventions `e_t = sum_{tau < t} Phi_{t-1,tau} d_tau` holds for
//! every disturbance sequence, and the state blocks obey
//! `Phi^x_{s+1,tau} = A_{s+1} Phi^x_{s,tau} + B_{s+1} Phi^u_{s,tau}`.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};

/// Absolute tolerance on the affine-recursion residual.
pub const RESPONSE_TOLERANCE: f64 = 1e-8;

#[inline]
fn tri(s: usize, tau: usize) -> usize {
    debug_assert!(tau <= s);
    s * (s + 1) / 2 + tau
}

/// Induced infinity norm (largest absolute row sum).
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|r| r.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, nan_max)
}

/// Like `f64::max` but lets NaN through.
fn nan_max(acc: f64, x: f64) -> f64 {
    if x.is_nan() || x > acc {
        x
    } else {
        acc
    }
}

/// Jacobians along a nominal trajectory; `A[t]`, `B[t]` for `t in 0..T`.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
}

impl Linearization {
    pub fn along(model: &DynamicsModel, z: &[DVector<f64>], v: &[DVector<f64>]) -> Result<Self> {
        if z.len() != v.len() + 1 {
            return Err(Error::InvalidInput(format!(
                "{} states for {} controls",
                z.len(),
                v.len()
            )));
        }
        let (a, b) = z
            .iter()
            .zip(v)
            .map(|(z, v)| model.jacobians(z, v))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        Ok(Self { a, b })
    }

    pub fn horizon(&self) -> usize {
        self.a.len()
    }
}

fn check_linearization(a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> Result<(usize, usize)> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::InvalidInput(format!(
            "Jacobian sequences have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let n = a[0].nrows();
    let m = b[0].ncols();
    for (at, bt) in a.iter().zip(b) {
        if at.shape() != (n, n) || bt.shape() != (n, m) {
            return Err(Error::InvalidInput("inconsistent Jacobian shapes".into()));
        }
    }
    Ok((n, m))
}

/// Causal feedback gains `K_{s,tau}`, each `m x n`, for `0 <= tau <= s < T`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeedbackGains {
    horizon: usize,
    n: usize,
    m: usize,
    blocks: Vec<DMatrix<f64>>,
}

impl FeedbackGains {
    pub fn zeros(horizon: usize, n: usize, m: usize) -> Self {
        Self {
            horizon,
            n,
            m,
            blocks: vec![DMatrix::zeros(m, n); horizon * (horizon + 1) / 2],
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn get(&self, s: usize, tau: usize) -> &DMatrix<f64> {
        &self.blocks[tri(s, tau)]
    }

    pub fn set(&mut self, s: usize, tau: usize, k: DMatrix<f64>) {
        assert_eq!(k.shape(), (self.m, self.n));
        self.blocks[tri(s, tau)] = k;
    }

    /// Feedback correction at time `t` from the state errors `dx_0..dx_t`.
    pub fn correction(&self, t: usize, state_errors: &[DVector<f64>]) -> DVector<f64> {
        let mut du = DVector::zeros(self.m);
        for tau in 0..t {
            du += self.get(t - 1, tau) * &state_errors[t - tau];
        }
        du
    }
}

/// Block-lower-triangular system response together with the Jacobians it
/// was built against.
#[derive(Clone, Debug)]
pub struct SystemResponse {
    horizon: usize,
    n: usize,
    m: usize,
    blocks: Vec<DMatrix<f64>>,
    lin: Linearization,
}

impl SystemResponse {
    /// Wraps raw blocks; callers are expected to validate afterwards.
    pub fn from_blocks(blocks: Vec<DMatrix<f64>>, lin: Linearization) -> Result<Self> {
        let (n, m) = check_linearization(&lin.a, &lin.b)?;
        let horizon = lin.horizon();
        if blocks.len() != horizon * (horizon + 1) / 2
            || blocks.iter().any(|b| b.shape() != (n + m, n))
        {
            return Err(Error::InvalidInput("response block layout mismatch".into()));
        }
        Ok(Self {
            horizon,
            n,
            m,
            blocks,
            lin,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn state_dim(&self) -> usize {
        self.n
    }

    pub fn control_dim(&self) -> usize {
        self.m
    }

    pub fn linearization(&self) -> &Linearization {
        &self.lin
    }

    /// Full `(n + m) x n` block `Phi_{s,tau}`.
    pub fn block(&self, s: usize, tau: usize) -> &DMatrix<f64> {
        &self.blocks[tri(s, tau)]
    }

    pub fn block_mut(&mut self, s: usize, tau: usize) -> &mut DMatrix<f64> {
        &mut self.blocks[tri(s, tau)]
    }

    pub fn state_part(&self, s: usize, tau: usize) -> DMatrix<f64> {
        self.block(s, tau).rows(0, self.n).into_owned()
    }

    pub fn control_part(&self, s: usize, tau: usize) -> DMatrix<f64> {
        self.block(s, tau).rows(self.n, self.m).into_owned()
    }

    /// Sum of squared Frobenius norms of all blocks.
    pub fn frobenius_sq(&self) -> f64 {
        self.blocks.iter().map(|b| b.norm_squared()).sum()
    }

    /// Iterates `(s, tau, block)` in storage order.
    pub fn iter_blocks(&self) -> impl Iterator<Item = (usize, usize, &DMatrix<f64>)> {
        (0..self.horizon).flat_map(move |s| (0..=s).map(move |tau| (s, tau, self.block(s, tau))))
    }
}

/// Builds the response induced by `gains` on the error dynamics `(A, B)`.
pub fn gains_to_response(
    a: &[DMatrix<f64>],
    b: &[DMatrix<f64>],
    gains: &FeedbackGains,
) -> Result<SystemResponse> {
    let (n, m) = check_linearization(a, b)?;
    let horizon = a.len();
    if gains.horizon != horizon || gains.n != n || gains.m != m {
        return Err(Error::InvalidInput("gains do not match the Jacobians".into()));
    }
    let mut state: Vec<DMatrix<f64>> = Vec::with_capacity(horizon * (horizon + 1) / 2);
    let mut blocks = Vec::with_capacity(horizon * (horizon + 1) / 2);
    for s in 0..horizon {
        // State part of row s.
        for tau in 0..=s {
            let px = if tau == s {
                DMatrix::identity(n, n)
            } else {
                let prev = &blocks[tri(s - 1, tau)] as &DMatrix<f64>;
                &a[s] * prev.rows(0, n) + &b[s] * prev.rows(n, m)
            };
            state.push(px);
        }
        // Control part: du_{s+1} = sum_j K_{s,j} dx_{s+1-j}.
        for tau in 0..=s {
            let mut pu = DMatrix::zeros(m, n);
            for j in 0..=(s - tau) {
                pu += gains.get(s, j) * &state[tri(s - j, tau)];
            }
            let mut blk = DMatrix::zeros(n + m, n);
            blk.rows_mut(0, n).copy_from(&state[tri(s, tau)]);
            blk.rows_mut(n, m).copy_from(&pu);
            blocks.push(blk);
        }
    }
    Ok(SystemResponse {
        horizon,
        n,
        m,
        blocks,
        lin: Linearization {
            a: a.to_vec(),
            b: b.to_vec(),
        },
    })
}

/// Largest violation of the diagonal-identity and affine-recursion
/// conditions, measured in the induced infinity norm.
pub fn validate_response(phi: &SystemResponse, a: &[DMatrix<f64>], b: &[DMatrix<f64>]) -> f64 {
    let n = phi.n;
    let mut worst: f64 = 0.0;
    for s in 0..phi.horizon {
        let diag = phi.state_part(s, s) - DMatrix::<f64>::identity(n, n);
        worst = worst.max(inf_norm(&diag));
        if s + 1 < phi.horizon {
            for tau in 0..=s {
                let blk = phi.block(s, tau);
                let predicted = &a[s + 1] * blk.rows(0, n) + &b[s + 1] * blk.rows(n, phi.m);
                let res = phi.state_part(s + 1, tau) - predicted;
                worst = worst.max(inf_norm(&res));
            }
        }
    }
    worst
}

/// Recovers the unique causal gains that reproduce `phi`.
pub fn response_to_gains(phi: &SystemResponse) -> Result<FeedbackGains> {
    let residual = validate_response(phi, &phi.lin.a, &phi.lin.b);
    if !(residual <= RESPONSE_TOLERANCE) {
        return Err(Error::InvalidResponse { residual });
    }
    let (n, m) = (phi.n, phi.m);
    let mut gains = FeedbackGains::zeros(phi.horizon, n, m);
    for s in 0..phi.horizon {
        for j in 0..=s {
            // Phi^u_{s,s-j} = sum_{i<=j} K_{s,i} Phi^x_{s-i,s-j}; solve for K_{s,j}.
            let mut k = phi.control_part(s, s - j);
            for i in 0..j {
                k -= gains.get(s, i) * phi.state_part(s - i, s - j);
            }
            gains.set(s, j, k);
        }
    }
    Ok(gains)
}

/// Stacked errors `e_0..e_T` produced by the disturbances `d_0..d_{T-1}`.
pub fn propagate_error(phi: &SystemResponse, d: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    if d.len() != phi.horizon || d.iter().any(|x| x.len() != phi.n) {
        return Err(Error::InvalidInput("disturbance sequence shape mismatch".into()));
    }
    let mut e = vec![DVector::zeros(phi.n + phi.m); phi.horizon + 1];
    for t in 1..=phi.horizon {
        for (tau, d_tau) in d.iter().enumerate().take(t) {
            e[t] += phi.block(t - 1, tau) * d_tau;
        }
    }
    Ok(e)
}

/// Time-varying LQR gains from a backward Riccati recursion.
///
/// The gain acting on `dx_t` is designed with `(A_t, B_t)`; the last one
/// (`t = T`) reuses `(A_{T-1}, B_{T-1})`, and the terminal cost-to-go is
/// `Q`. Gains are memoryless: `K_{s,tau} = 0` for `tau >= 1`.
pub fn riccati_synthesis(
    a: &[DMatrix<f64>],
    b: &[DMatrix<f64>],
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<FeedbackGains> {
    let (n, m) = check_linearization(a, b)?;
    if q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::InvalidInput("weight shapes do not match".into()));
    }
    let horizon = a.len();
    let mut gains = FeedbackGains::zeros(horizon, n, m);
    if m == 0 {
        return Ok(gains);
    }
    if r.clone().cholesky().is_none() {
        return Err(Error::InvalidWeight(
            "control weight must be positive definite".into(),
        ));
    }
    let mut p = q.clone();
    for t in (1..=horizon).rev() {
        let (at, bt) = (&a[t.min(horizon - 1)], &b[t.min(horizon - 1)]);
        let btp = bt.transpose() * &p;
        let s = r + &btp * bt;
        let chol = s.cholesky().ok_or_else(|| {
            Error::InvalidWeight(format!("Riccati system singular at step {t}"))
        })?;
        let k = -chol.solve(&(&btp * at));
        let acl = at + bt * &k;
        p = q + at.transpose() * &p * &acl;
        p = (&p + p.transpose()) * 0.5;
        gains.set(t - 1, 0, k);
    }
    Ok(gains)
}

/// Nonnegative error-tube radii `rho_0..rho_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorBounds {
    pub rho: Vec<f64>,
}

impl ErrorBounds {
    pub fn zeros(horizon: usize) -> Self {
        Self {
            rho: vec![0.0; horizon + 1],
        }
    }
}

/// Curvature and Lipschitz constants bounding the linearization remainder.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianLipschitzConstants {
    /// Diagonal dynamics curvature bound.
    pub mu: DVector<f64>,
    /// Diagonal Lipschitz constants of the rows of `E`.
    pub lipschitz_e: DVector<f64>,
    /// One bound per individual constraint.
    pub chi: Vec<f64>,
    /// One bound per shared constraint.
    pub psi: Vec<f64>,
}

impl HessianLipschitzConstants {
    pub fn zero(n: usize) -> Self {
        Self {
            mu: DVector::zeros(n),
            lipschitz_e: DVector::zeros(n),
            chi: Vec::new(),
            psi: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .mu
            .iter()
            .chain(self.lipschitz_e.iter())
            .chain(&self.chi)
            .chain(&self.psi);
        for c in all {
            if !(*c >= 0.0) {
                return Err(Error::InvalidInput(format!(
                    "Hessian/Lipschitz constants must be nonnegative, got {c}"
                )));
            }
        }
        Ok(())
    }

    /// Diagonal of the remainder block `rho^2 mu + rho L_E`.
    pub fn remainder_diag(&self, rho: f64) -> DVector<f64> {
        &self.mu * (rho * rho) + &self.lipschitz_e * rho
    }
}

/// Forward pass of the tube recursion with equality:
/// `rho_t = sum_{tau < t} || Phi_{t-1,tau} [E(z_tau), rho_tau^2 mu + rho_tau L_E] ||_inf`.
pub fn update_error_bounds(
    phi: &SystemResponse,
    z: &[DVector<f64>],
    model: &DynamicsModel,
    consts: &HessianLipschitzConstants,
) -> Result<ErrorBounds> {
    if z.len() != phi.horizon + 1 {
        return Err(Error::InvalidInput(format!(
            "expected {} nominal states, got {}",
            phi.horizon + 1,
            z.len()
        )));
    }
    let e_mats: Vec<DMatrix<f64>> = z[..phi.horizon]
        .iter()
        .map(|zt| model.noise_scale(zt))
        .collect();
    let mut rho = vec![0.0; phi.horizon + 1];
    for t in 1..=phi.horizon {
        let mut total = 0.0;
        for tau in 0..t {
            let blk = phi.block(t - 1, tau);
            let pe = blk * &e_mats[tau];
            let rem = consts.remainder_diag(rho[tau]);
            let norm = (0..blk.nrows())
                .map(|r| {
                    let lin: f64 = pe.row(r).iter().map(|x| x.abs()).sum();
                    let curv: f64 = blk
                        .row(r)
                        .iter()
                        .zip(rem.iter())
                        .map(|(p, c)| p.abs() * c)
                        .sum();
                    lin + curv
                })
                .fold(0.0, nan_max);
            total += norm;
        }
        if !total.is_finite() {
            return Err(Error::TubeDivergence { step: t });
        }
        rho[t] = total;
    }
    Ok(ErrorBounds { rho })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{ModelKind, NoiseScaleSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.gen_range(-scale..scale))
    }

    fn random_system(rng: &mut ChaCha8Rng, n: usize, m: usize, t: usize) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let a = (0..t)
            .map(|_| DMatrix::identity(n, n) * 0.7 + rand_mat(rng, n, n, 0.3))
            .collect();
        let b = (0..t).map(|_| rand_mat(rng, n, m, 1.0)).collect();
        (a, b)
    }

    fn random_gains(rng: &mut ChaCha8Rng, t: usize, n: usize, m: usize) -> FeedbackGains {
        let mut k = FeedbackGains::zeros(t, n, m);
        for s in 0..t {
            for tau in 0..=s {
                k.set(s, tau, rand_mat(rng, m, n, 0.5));
            }
        }
        k
    }

    /// Direct simulation of the closed-loop error dynamics.
    fn simulate(
        a: &[DMatrix<f64>],
        b: &[DMatrix<f64>],
        k: &FeedbackGains,
        d: &[DVector<f64>],
    ) -> Vec<DVector<f64>> {
        let (n, m) = (a[0].nrows(), b[0].ncols());
        let t_len = a.len();
        let mut dx = vec![DVector::zeros(n)];
        let mut du = vec![DVector::zeros(m)];
        for t in 0..t_len {
            let next = &a[t] * &dx[t] + &b[t] * &du[t] + &d[t];
            dx.push(next);
            du.push(k.correction(t + 1, &dx));
        }
        dx.iter()
            .zip(&du)
            .map(|(x, u)| {
                let mut e = DVector::zeros(n + m);
                e.rows_mut(0, n).copy_from(x);
                e.rows_mut(n, m).copy_from(u);
                e
            })
            .collect()
    }

    #[test]
    fn zero_gains_give_open_loop_transitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = random_system(&mut rng, 3, 2, 5);
        let phi = gains_to_response(&a, &b, &FeedbackGains::zeros(5, 3, 2)).unwrap();
        for s in 0..5 {
            for tau in 0..=s {
                assert_eq!(phi.control_part(s, tau), DMatrix::zeros(2, 3));
                let mut expected = DMatrix::identity(3, 3);
                for j in (tau + 1)..=s {
                    expected = &a[j] * expected;
                }
                assert!((phi.state_part(s, tau) - expected).amax() < 1e-12);
            }
        }
    }

    #[test]
    fn scalar_closed_loop_block() {
        let a = vec![DMatrix::from_element(1, 1, 1.0); 2];
        let b = vec![DMatrix::from_element(1, 1, 1.0); 2];
        let mut k = FeedbackGains::zeros(2, 1, 1);
        k.set(0, 0, DMatrix::from_element(1, 1, -0.5));
        let phi = gains_to_response(&a, &b, &k).unwrap();
        assert!((phi.state_part(1, 0)[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn impulse_columns_match_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (n, m, t_len) = (3, 2, 6);
        let (a, b) = random_system(&mut rng, n, m, t_len);
        let k = random_gains(&mut rng, t_len, n, m);
        let phi = gains_to_response(&a, &b, &k).unwrap();
        for tau in 0..t_len {
            for i in 0..n {
                let mut d = vec![DVector::zeros(n); t_len];
                d[tau][i] = 1.0;
                let e = simulate(&a, &b, &k, &d);
                for t in (tau + 1)..=t_len {
                    let col = phi.block(t - 1, tau).column(i).into_owned();
                    assert!((&e[t] - col).amax() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn propagate_matches_simulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, m, t_len) = (4, 2, 9);
        let (a, b) = random_system(&mut rng, n, m, t_len);
        let k = random_gains(&mut rng, t_len, n, m);
        let phi = gains_to_response(&a, &b, &k).unwrap();
        let d: Vec<_> = (0..t_len).map(|_| DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let e = propagate_error(&phi, &d).unwrap();
        let sim = simulate(&a, &b, &k, &d);
        for (p, q) in e.iter().zip(&sim) {
            assert!((p - q).amax() < 1e-10);
        }
        let zero = propagate_error(&phi, &vec![DVector::zeros(n); t_len]).unwrap();
        assert!(zero.iter().all(|e| e.amax() == 0.0));
    }

    #[test]
    fn impulse_reads_a_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = random_system(&mut rng, 2, 1, 4);
        let k = random_gains(&mut rng, 4, 2, 1);
        let phi = gains_to_response(&a, &b, &k).unwrap();
        let mut d = vec![DVector::zeros(2); 4];
        d[0][1] = 1.0;
        let e = propagate_error(&phi, &d).unwrap();
        for t in 1..=4 {
            assert_eq!(e[t], phi.block(t - 1, 0).column(1).into_owned());
        }
    }

    #[test]
    fn round_trip_gains() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (a, b) = random_system(&mut rng, 3, 2, 3);
        let k = random_gains(&mut rng, 3, 3, 2);
        let phi = gains_to_response(&a, &b, &k).unwrap();
        let k2 = response_to_gains(&phi).unwrap();
        for s in 0..3 {
            for tau in 0..=s {
                assert!((k.get(s, tau) - k2.get(s, tau)).amax() < 1e-9);
            }
        }
        let zero = gains_to_response(&a, &b, &FeedbackGains::zeros(3, 3, 2)).unwrap();
        let kz = response_to_gains(&zero).unwrap();
        assert!(kz.blocks.iter().all(|k| k.amax() == 0.0));
    }

    #[test]
    fn non_identity_diagonal_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (a, b) = random_system(&mut rng, 2, 1, 3);
        let mut phi = gains_to_response(&a, &b, &FeedbackGains::zeros(3, 2, 1)).unwrap();
        phi.block_mut(1, 1)[(0, 0)] = 1.5;
        assert!(matches!(response_to_gains(&phi), Err(Error::InvalidResponse { .. })));
    }

    #[test]
    fn validation_residuals() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (a, b) = random_system(&mut rng, 3, 2, 5);
        let k = random_gains(&mut rng, 5, 3, 2);
        let mut phi = gains_to_response(&a, &b, &k).unwrap();
        assert!(validate_response(&phi, &a, &b) <= 1e-12);
        phi.block_mut(3, 1)[(2, 0)] += 0.1;
        assert!(validate_response(&phi, &a, &b) >= 0.1 - 1e-12);

        let (a1, b1) = random_system(&mut rng, 2, 1, 1);
        let mut one = gains_to_response(&a1, &b1, &FeedbackGains::zeros(1, 2, 1)).unwrap();
        one.block_mut(0, 0)[(1, 0)] = 0.25;
        assert!((validate_response(&one, &a1, &b1) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn riccati_zero_input_gives_zero_gains() {
        let a = vec![DMatrix::identity(2, 2); 4];
        let b = vec![DMatrix::zeros(2, 1); 4];
        let k = riccati_synthesis(&a, &b, &DMatrix::identity(2, 2), &DMatrix::identity(1, 1)).unwrap();
        assert!(k.blocks.iter().all(|k| k.amax() == 0.0));
    }

    #[test]
    fn riccati_one_step_scalar() {
        let a = vec![DMatrix::from_element(1, 1, 1.0)];
        let b = vec![DMatrix::from_element(1, 1, 1.0)];
        let one = DMatrix::from_element(1, 1, 1.0);
        let k = riccati_synthesis(&a, &b, &one, &one).unwrap();
        assert!((k.get(0, 0)[(0, 0)] + 0.5).abs() < 1e-15);
    }

    #[test]
    fn riccati_rejects_singular_weight() {
        let a = vec![DMatrix::identity(2, 2); 2];
        let b = vec![DMatrix::identity(2, 2); 2];
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(
            riccati_synthesis(&a, &b, &DMatrix::identity(2, 2), &r),
            Err(Error::InvalidWeight(_))
        ));
    }

    #[test]
    fn riccati_contracts_transition() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..20 {
            let t_len = 8;
            let a: Vec<_> = (0..t_len)
                .map(|_| DMatrix::identity(3, 3) * 1.05 + rand_mat(&mut rng, 3, 3, 0.2))
                .collect();
            let b: Vec<_> = (0..t_len).map(|_| rand_mat(&mut rng, 3, 2, 1.0) + DMatrix::identity(3, 2)).collect();
            let k = riccati_synthesis(&a, &b, &DMatrix::identity(3, 3), &DMatrix::identity(2, 2)).unwrap();
            let closed = gains_to_response(&a, &b, &k).unwrap();
            let open = gains_to_response(&a, &b, &FeedbackGains::zeros(t_len, 3, 2)).unwrap();
            let cl = closed.state_part(t_len - 1, 0).norm();
            let ol = open.state_part(t_len - 1, 0).norm();
            let spec = |m: DMatrix<f64>| m.singular_values().max();
            assert!(spec(closed.state_part(t_len - 1, 0)) <= spec(open.state_part(t_len - 1, 0)) + 1e-12);
            assert!(cl.is_finite() && ol.is_finite());
        }
    }

    fn scalar_model(gain: f64) -> DynamicsModel {
        DynamicsModel::new(ModelKind::StaticPoint, 0.1, NoiseScaleSpec::uniform(2, gain)).unwrap()
    }

    #[test]
    fn zero_noise_gives_zero_tube() {
        let model = scalar_model(0.0);
        let lin = Linearization {
            a: vec![DMatrix::identity(2, 2); 6],
            b: vec![DMatrix::zeros(2, 0); 6],
        };
        let phi = gains_to_response(&lin.a, &lin.b, &FeedbackGains::zeros(6, 2, 0)).unwrap();
        let z = vec![DVector::zeros(2); 7];
        let rho = update_error_bounds(&phi, &z, &model, &HessianLipschitzConstants::zero(2)).unwrap();
        assert!(rho.rho.iter().all(|r| *r == 0.0));
    }

    #[test]
    fn open_loop_tube_accumulates_linearly() {
        let eps = 0.03;
        let model = scalar_model(eps);
        let a = vec![DMatrix::identity(2, 2); 5];
        let b = vec![DMatrix::zeros(2, 0); 5];
        let phi = gains_to_response(&a, &b, &FeedbackGains::zeros(5, 2, 0)).unwrap();
        let z = vec![DVector::zeros(2); 6];
        let rho = update_error_bounds(&phi, &z, &model, &HessianLipschitzConstants::zero(2)).unwrap();
        for (t, r) in rho.rho.iter().enumerate() {
            assert!((r - t as f64 * eps).abs() < 1e-15);
        }
    }

    #[test]
    fn tube_divergence_reported() {
        let model = scalar_model(1.0);
        let a = vec![DMatrix::identity(2, 2) * 1e300; 4];
        let b = vec![DMatrix::zeros(2, 0); 4];
        let phi = gains_to_response(&a, &b, &FeedbackGains::zeros(4, 2, 0)).unwrap();
        let z = vec![DVector::zeros(2); 5];
        assert!(matches!(
            update_error_bounds(&phi, &z, &model, &HessianLipschitzConstants::zero(2)),
            Err(Error::TubeDivergence { .. })
        ));
    }

    #[test]
    fn tube_grows_with_remainder_constants() {
        let model = scalar_model(0.01);
        let a = vec![DMatrix::identity(2, 2); 6];
        let b = vec![DMatrix::zeros(2, 0); 6];
        let phi = gains_to_response(&a, &b, &FeedbackGains::zeros(6, 2, 0)).unwrap();
        let z = vec![DVector::zeros(2); 7];
        let base = update_error_bounds(&phi, &z, &model, &HessianLipschitzConstants::zero(2)).unwrap();
        let mut consts = HessianLipschitzConstants::zero(2);
        consts.mu = DVector::from_element(2, 0.5);
        consts.lipschitz_e = DVector::from_element(2, 0.2);
        let bigger = update_error_bounds(&phi, &z, &model, &consts).unwrap();
        assert_eq!(bigger.rho[1], base.rho[1]);
        for t in 2..=6 {
            assert!(bigger.rho[t] > base.rho[t]);
        }
    }
}

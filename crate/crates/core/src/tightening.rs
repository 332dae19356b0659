//! Robust constraint tightening over the error tube.
//!
//! For a constraint `c(x, u) <= 0` evaluated at step `t`, the tightened
//! margin is
//!
//! ```text
//! c(z_t, v_t) + sum_{tau < t} || grad c^T Phi_{t-1,tau} Lambda_tau ||_1 + kappa * rho_t^2
//! ```
//!
//! where `Lambda_tau = [E(z_tau), diag(rho_tau^2 mu + rho_tau L_E)]` covers both
//! the additive noise and the linearization remainder. A nonpositive total
//! certifies the constraint for every admissible disturbance realization.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::DynamicsModel;
use crate::error::{Error, Result};
use crate::sls::{HessianLipschitzConstants, SystemResponse};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TightenedMargin {
    pub nominal_value: f64,
    pub linear_term: f64,
    pub curvature_term: f64,
    pub total: f64,
}

impl TightenedMargin {
    pub fn new(nominal_value: f64, linear_term: f64, curvature_term: f64) -> Self {
        Self {
            nominal_value,
            linear_term,
            curvature_term,
            total: nominal_value + linear_term + curvature_term,
        }
    }

    /// Margin of an untightened constraint.
    pub fn nominal(value: f64) -> Self {
        Self::new(value, 0.0, 0.0)
    }
}

/// `[E, diag(rho^2 mu + rho L_E)]` for an explicit noise matrix.
pub fn lambda_from_noise(e: &DMatrix<f64>, rho: f64, consts: &HessianLipschitzConstants) -> DMatrix<f64> {
    let n = e.nrows();
    let mut lam = DMatrix::zeros(n, 2 * n);
    lam.columns_mut(0, n).copy_from(e);
    lam.columns_mut(n, n)
        .set_diagonal(&consts.remainder_diag(rho));
    lam
}

/// Disturbance-support matrix at a nominal state.
pub fn lambda_matrix(
    model: &DynamicsModel,
    z: &DVector<f64>,
    rho: f64,
    consts: &HessianLipschitzConstants,
) -> DMatrix<f64> {
    lambda_from_noise(&model.noise_scale(z), rho, consts)
}

/// `Lambda_0..Lambda_{T-1}` along a nominal trajectory.
pub fn lambda_sequence(
    model: &DynamicsModel,
    z: &[DVector<f64>],
    rho: &[f64],
    consts: &HessianLipschitzConstants,
) -> Vec<DMatrix<f64>> {
    z.iter()
        .zip(rho)
        .take(z.len().saturating_sub(1))
        .map(|(zt, r)| lambda_matrix(model, zt, *r, consts))
        .collect()
}

fn linear_term(
    grad: &DVector<f64>,
    phi: &SystemResponse,
    lambdas: &[DMatrix<f64>],
    t: usize,
) -> Result<f64> {
    let nm = phi.state_dim() + phi.control_dim();
    if grad.len() != nm {
        return Err(Error::InvalidInput(format!(
            "gradient has {} entries, expected {nm}",
            grad.len()
        )));
    }
    if t > phi.horizon() || lambdas.len() < t {
        return Err(Error::InvalidInput(format!(
            "step {t} outside the tube data"
        )));
    }
    let mut total = 0.0;
    for (tau, lam) in lambdas.iter().enumerate().take(t) {
        let row = phi.block(t - 1, tau).tr_mul(grad);
        total += lam.tr_mul(&row).lp_norm(1);
    }
    Ok(total)
}

/// Tightened margin of an individual constraint at step `t`.
pub fn tighten_individual(
    g_value: f64,
    g_gradient: &DVector<f64>,
    phi: &SystemResponse,
    lambdas: &[DMatrix<f64>],
    chi: f64,
    rho_t: f64,
    t: usize,
) -> Result<TightenedMargin> {
    let lin = linear_term(g_gradient, phi, lambdas, t)?;
    Ok(TightenedMargin::new(g_value, lin, chi * rho_t * rho_t))
}

/// Tightened margin of a shared constraint at step `t`.
///
/// `h_gradient` is stacked per agent as `[x^1, u^1, x^2, u^2, ...]`, matching
/// the order of `phis`, `lambdas` and `rho_t`. The support matrix of the
/// stacked system is block diagonal, so the 1-norm splits per agent.
pub fn tighten_shared(
    h_value: f64,
    h_gradient: &DVector<f64>,
    phis: &[&SystemResponse],
    lambdas: &[&[DMatrix<f64>]],
    psi: f64,
    rho_t: &[f64],
    t: usize,
) -> Result<TightenedMargin> {
    if phis.len() != lambdas.len() || phis.len() != rho_t.len() {
        return Err(Error::InvalidInput("per-agent tube data lengths differ".into()));
    }
    let total_dim: usize = phis.iter().map(|p| p.state_dim() + p.control_dim()).sum();
    if total_dim != h_gradient.len() {
        return Err(Error::InvalidInput(format!(
            "stacked gradient has {} entries, agents span {total_dim}",
            h_gradient.len()
        )));
    }
    let mut offset = 0;
    let mut lin = 0.0;
    for (phi, lam) in phis.iter().zip(lambdas) {
        let nm = phi.state_dim() + phi.control_dim();
        let part = h_gradient.rows(offset, nm).into_owned();
        lin += linear_term(&part, phi, lam, t)?;
        offset += nm;
    }
    let curvature = psi * rho_t.iter().map(|r| r * r).sum::<f64>();
    Ok(TightenedMargin::new(h_value, lin, curvature))
}

/// Tube data specialized to diagonal noise `E(x) = beta(x) diag(D)`.
///
/// With diagonal support matrices the 1-norm reduces to
/// `sum_tau sum_k |r_{tau,k}| omega_{tau,k}` where `r_tau = Phi_{t-1,tau}^T a`
/// and `omega_tau = beta(z_tau) D + rho_tau^2 mu + rho_tau L_E`.
#[derive(Clone, Debug)]
pub struct DiagonalSupport {
    pub pattern: DVector<f64>,
    pub beta: Vec<f64>,
    pub omega: Vec<DVector<f64>>,
}

impl DiagonalSupport {
    pub fn new(
        model: &DynamicsModel,
        z: &[DVector<f64>],
        rho: &[f64],
        consts: &HessianLipschitzConstants,
    ) -> Self {
        let n = model.state_dim();
        let pattern = model.noise.pattern(n);
        let steps = z.len().saturating_sub(1);
        let beta: Vec<f64> = z[..steps].iter().map(|zt| model.noise.scale(zt)).collect();
        let omega = beta
            .iter()
            .zip(rho)
            .map(|(b, r)| &pattern * *b + consts.remainder_diag(*r))
            .collect();
        Self {
            pattern,
            beta,
            omega,
        }
    }
}

/// Linear term together with what its gradient needs.
#[derive(Clone, Debug)]
pub struct DiagonalLinearTerm {
    pub value: f64,
    /// `sum_tau Phi_{t-1,tau} (sign(r_tau) * omega_tau)`, length `n + m`.
    pub direction: DVector<f64>,
    /// `sum_k |r_{tau,k}| D_k` for each `tau < t`; multiplies `grad beta(z_tau)`.
    pub noise_weights: Vec<f64>,
}

pub fn diagonal_linear_term(
    phi: &SystemResponse,
    support: &DiagonalSupport,
    t: usize,
    grad: &DVector<f64>,
) -> DiagonalLinearTerm {
    let n = phi.state_dim();
    let mut direction = DVector::zeros(grad.len());
    let mut noise_weights = Vec::with_capacity(t);
    let mut value = 0.0;
    let mut signed = DVector::zeros(n);
    for tau in 0..t {
        let blk = phi.block(t - 1, tau);
        let r = blk.tr_mul(grad);
        let om = &support.omega[tau];
        let mut w = 0.0;
        for k in 0..n {
            let a = r[k].abs();
            value += a * om[k];
            w += a * support.pattern[k];
            signed[k] = if r[k] > 0.0 {
                om[k]
            } else if r[k] < 0.0 {
                -om[k]
            } else {
                0.0
            };
        }
        direction.gemv(1.0, blk, &signed, 1.0);
        noise_weights.push(w);
    }
    DiagonalLinearTerm {
        value,
        direction,
        noise_weights,
    }
}

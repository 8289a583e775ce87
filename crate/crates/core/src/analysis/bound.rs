use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundInputs {
    pub a_bar: f64,
    pub b_bar: f64,
    pub w_bar: f64,
    pub mu: f64,
    pub xi: f64,
    /// Floor on `σ_min(Φ)`.
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundConstants {
    pub lambda_bar: f64,
    pub c: f64,
    pub sigma_upper: f64,
    pub sigma_lower: f64,
    pub bound: f64,
}

/// Closed-form constants of the ratio-of-expectations bound for the
/// baseline. `lambda` is the contraction factor used inside `C`; `None`
/// uses `λ̄`.
pub fn roe_mpc_bound(inp: &BoundInputs, lambda: Option<f64>) -> Result<BoundConstants> {
    let BoundInputs {
        a_bar,
        b_bar,
        mu,
        xi,
        sigma,
        ..
    } = *inp;
    if !(mu > 0.0 && xi > 0.0 && sigma > 0.0) || mu > xi || a_bar < 0.0 || b_bar < 0.0 || inp.w_bar < 0.0 {
        return Err(Error::Domain(format!(
            "bound inputs need 0 < μ ≤ ξ, σ > 0 and nonnegative norms (μ={mu}, ξ={xi}, σ={sigma})"
        )));
    }
    let sigma_lower = mu.min(1.0) * (a_bar + b_bar + 1.0) * (xi / (2.0 * mu * xi + mu * sigma * sigma)).sqrt();
    let sigma_upper = std::f64::consts::SQRT_2 * (xi + a_bar + b_bar + 1.0);
    if sigma_lower >= sigma_upper {
        return Err(Error::Domain(format!(
            "σ_ = {sigma_lower} is not below σ̄ = {sigma_upper}"
        )));
    }
    let lambda_bar = ((sigma_upper - sigma_lower) / (sigma_upper + sigma_lower)).sqrt();
    if lambda_bar >= 1.0 {
        return Err(Error::Domain(format!("λ̄ = {lambda_bar} is not below 1")));
    }
    let lambda = lambda.unwrap_or(lambda_bar);
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("contraction factor {lambda} must be positive")));
    }
    let c = 4.0 * (xi + 1.0 + a_bar + b_bar) / (sigma_lower * sigma_lower * lambda);
    let bound = 2.0 * xi * c * c * (1.0 + c * c) * (1.0 + a_bar * a_bar + b_bar * b_bar)
        / (mu * (1.0 - lambda_bar) * (1.0 - lambda_bar));
    Ok(BoundConstants {
        lambda_bar,
        c,
        sigma_upper,
        sigma_lower,
        bound,
    })
}

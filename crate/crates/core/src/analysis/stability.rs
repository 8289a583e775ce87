use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::Result;
use crate::model::DynamicsSpec;
use crate::qp::build_phi;

/// Smallest singular value of a (possibly rectangular) matrix.
pub fn sigma_min(mat: &DMatrix<f64>) -> f64 {
    if mat.is_empty() {
        return 0.0;
    }
    mat.singular_values().min()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StabilityReport {
    /// `(t, t', σ_min(Φ_{t,t'}))`.
    pub entries: Vec<(usize, usize, f64)>,
    pub min: f64,
    pub floor: f64,
    pub pass: bool,
}

/// Evaluates `σ_min(Φ_{t,t'})` over the given windows against a floor.
pub fn verify_stabilizability(spec: &DynamicsSpec, windows: &[(usize, usize)], floor: f64) -> Result<StabilityReport> {
    let mut entries = Vec::with_capacity(windows.len());
    for &(t, t_end) in windows {
        let phi = build_phi(spec, t, t_end)?;
        entries.push((t, t_end, sigma_min(&phi)));
    }
    let min = entries.iter().map(|e| e.2).fold(f64::INFINITY, f64::min);
    Ok(StabilityReport {
        pass: min >= floor,
        entries,
        min,
        floor,
    })
}

//! Numerical core: structured KKT solves and inequality-constrained QPs.

mod admm;
mod kkt;

pub use admm::{
    solve_box_qp, solve_box_qp_with, AdmmSettings, BoxQp, LinearRow, QpSolution, QpStatus, SimplexRow,
    WarmStart,
};
pub use kkt::{build_phi, phi_from_blocks, solve_kkt, KktSolution, KktSystem};

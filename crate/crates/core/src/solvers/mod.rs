//! Minimisers for every block subproblem of the BCD trainers.
//!
//! X-blocks are solved by projected gradient. W-blocks use exact solutions
//! where the problem is a ridge regression and majorize-minimize iterations
//! otherwise; [`w_update::solve_w_gradient`] keeps the plain first-order
//! route available for every block.

use ndarray::Array2;

mod linalg;
pub mod projgrad;
pub mod w_update;
pub mod x_update;

pub use projgrad::{projected_gradient, projected_gradient_norm, FnObjective, SmoothObjective};
pub use w_update::{solve_w, solve_w_gradient, solve_w_intermediate, solve_w_last, solve_w_prox, Proximal, WBlock};
pub use x_update::{solve_x_intermediate, solve_x_last, solve_x_last_ce, solve_x_last_mse};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepRule {
    /// Constant step `1/L` with the exact Lipschitz constant of the block.
    FixedLipschitz,
    /// Armijo backtracking along the projection arc.
    Backtracking,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjGradConfig {
    pub tol: f64,
    pub max_iters: usize,
    pub step_rule: StepRule,
}

impl ProjGradConfig {
    pub fn new(tol: f64, max_iters: usize) -> Self {
        Self { tol, max_iters: max_iters.max(1), step_rule: StepRule::Backtracking }
    }

    pub fn with_rule(self, step_rule: StepRule) -> Self {
        Self { step_rule, ..self }
    }

    pub fn capped(self, cap: Option<usize>) -> Self {
        match cap {
            Some(c) => Self { max_iters: c.max(1), ..self },
            None => self,
        }
    }
}

impl Default for ProjGradConfig {
    fn default() -> Self {
        Self::new(1e-4, 200)
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub solution: Array2<f64>,
    pub objective: f64,
    pub iterations: usize,
    /// `grad_norm <= tol` was reached.
    pub converged: bool,
    /// Projected-gradient norm at `solution`.
    pub grad_norm: f64,
}

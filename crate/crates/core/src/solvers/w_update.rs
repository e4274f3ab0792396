//! W-block subproblems.
//!
//! * last layer, MSE: ridge normal equations, solved exactly;
//! * last layer, cross-entropy: majorize-minimize with Böhning's curvature
//!   bound `½(I − 11ᵀ/K)` on the softmax Hessian;
//! * intermediate ReLU layer: majorize-minimize with the tight quadratic
//!   bound `½t₊² ≤ ½(t − min(t₀, 0))²`, which turns every step into one
//!   ridge solve sharing a single factorisation;
//! * anything else: projected gradient with backtracking.
//!
//! Every route works with an optional proximal term `γ‖W − W⁰‖²`.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::linalg::{pseudo_inverse, spd_inverse};
use super::projgrad::{projected_gradient, unconstrained, SmoothObjective};
use super::{ProjGradConfig, SolveResult};
use crate::divergence::ActivationKind;
use crate::error::{Error, Result};
use crate::network::{affine, augment, loss_value, softmax, LossKind};

/// Proximal anchor `γ‖W − W⁰‖²_F`.
#[derive(Debug, Clone, Copy)]
pub struct Proximal<'a> {
    pub gamma: f64,
    pub anchor: ArrayView2<'a, f64>,
}

/// Which W-subproblem to solve over the input activations `X_l`.
#[derive(Debug, Clone, Copy)]
pub enum WBlock<'a> {
    /// `λ B(X_{l+1}, W·[X_l; 1])`
    Intermediate { kind: ActivationKind, x_next: ArrayView2<'a, f64>, lambda: f64 },
    /// `ℒ(Y, W·[X_L; 1])`
    Last { loss: LossKind, y: ArrayView2<'a, f64> },
}

impl WBlock<'_> {
    fn rows(&self) -> usize {
        match self {
            WBlock::Intermediate { x_next, .. } => x_next.nrows(),
            WBlock::Last { y, .. } => y.nrows(),
        }
    }

    fn cols(&self) -> usize {
        match self {
            WBlock::Intermediate { x_next, .. } => x_next.ncols(),
            WBlock::Last { y, .. } => y.ncols(),
        }
    }
}

/// Minimises `λ B(X_{l+1}, W·[X_l; 1]) + ρ‖W‖²`.
pub fn solve_w_intermediate(
    kind: ActivationKind,
    x_next: ArrayView2<f64>,
    x_in: ArrayView2<f64>,
    lambda: f64,
    rho: f64,
    start: ArrayView2<f64>,
    cfg: &ProjGradConfig,
) -> Result<SolveResult> {
    solve(WBlock::Intermediate { kind, x_next, lambda }, x_in, rho, None, start, cfg)
}

/// Minimises `ℒ(Y, W·[X_L; 1]) + ρ‖W‖²`.
pub fn solve_w_last(
    loss: LossKind,
    x_in: ArrayView2<f64>,
    y: ArrayView2<f64>,
    rho: f64,
    start: ArrayView2<f64>,
    cfg: &ProjGradConfig,
) -> Result<SolveResult> {
    solve(WBlock::Last { loss, y }, x_in, rho, None, start, cfg)
}

/// Either block without a proximal term.
pub fn solve_w(
    block: WBlock<'_>,
    x_in: ArrayView2<f64>,
    rho: f64,
    start: ArrayView2<f64>,
    cfg: &ProjGradConfig,
) -> Result<SolveResult> {
    solve(block, x_in, rho, None, start, cfg)
}

/// Either block plus the proximal term of the batched model.
pub fn solve_w_prox(
    block: WBlock<'_>,
    x_in: ArrayView2<f64>,
    rho: f64,
    prox: Proximal<'_>,
    start: ArrayView2<f64>,
    cfg: &ProjGradConfig,
) -> Result<SolveResult> {
    solve(block, x_in, rho, Some(prox), start, cfg)
}

fn validate(block: &WBlock<'_>, x_in: ArrayView2<f64>, rho: f64, prox: Option<&Proximal<'_>>, start: ArrayView2<f64>) -> Result<()> {
    if x_in.ncols() == 0 {
        return Err(Error::EmptyBatch);
    }
    if block.cols() != x_in.ncols() {
        return Err(Error::Shape(format!(
            "W block: targets have {} columns, inputs {}",
            block.cols(),
            x_in.ncols()
        )));
    }
    let shape = (block.rows(), x_in.nrows() + 1);
    if start.dim() != shape {
        return Err(Error::Shape(format!("W block: start {:?}, expected {shape:?}", start.dim())));
    }
    if let Some(p) = prox {
        if p.anchor.dim() != shape {
            return Err(Error::Shape(format!("W block: anchor {:?}, expected {shape:?}", p.anchor.dim())));
        }
        if !(p.gamma >= 0.0) {
            return Err(Error::Hyperparams(format!("gamma must be nonnegative, got {}", p.gamma)));
        }
    }
    if !(rho >= 0.0) {
        return Err(Error::Hyperparams(format!("rho must be nonnegative, got {rho}")));
    }
    if let WBlock::Intermediate { lambda, .. } = block {
        if !(*lambda >= 0.0) {
            return Err(Error::Hyperparams(format!("lambda must be nonnegative, got {lambda}")));
        }
    }
    Ok(())
}

fn solve(
    block: WBlock<'_>,
    x_in: ArrayView2<f64>,
    rho: f64,
    prox: Option<Proximal<'_>>,
    start: ArrayView2<f64>,
    cfg: &ProjGradConfig,
) -> Result<SolveResult> {
    validate(&block, x_in, rho, prox.as_ref(), start)?;
    let prox = prox.filter(|p| p.gamma > 0.0);
    match block {
        WBlock::Last { loss: LossKind::Mse, y } => ridge(x_in, y, rho, prox),
        WBlock::Last { loss: LossKind::CrossEntropy, y } => {
            let a = augment(x_in);
            ce_majorize(&a, y, rho, prox, start, cfg)
        }
        WBlock::Intermediate { lambda, .. } if lambda == 0.0 => Ok(penalty_only(rho, prox, start)),
        WBlock::Intermediate { kind: ActivationKind::Relu, x_next, lambda } => {
            let a = augment(x_in);
            relu_majorize(&a, x_next, lambda, rho, prox, start, cfg)
        }
        WBlock::Intermediate { .. } => solve_w_gradient(block, x_in, rho, prox, start, cfg),
    }
}

fn frob_sq(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

fn regulariser(w: &Array2<f64>, rho: f64, prox: Option<&Proximal<'_>>) -> f64 {
    let mut acc = if rho != 0.0 { rho * frob_sq(w) } else { 0.0 };
    if let Some(p) = prox {
        let mut d = 0.0;
        Zip::from(w).and(&p.anchor).for_each(|&a, &b| d += (a - b) * (a - b));
        acc += p.gamma * d;
    }
    acc
}

/// Adds `2ρW + 2γ(W − W⁰)` to `g`.
fn add_regulariser_grad(g: &mut Array2<f64>, w: &Array2<f64>, rho: f64, prox: Option<&Proximal<'_>>) {
    if rho != 0.0 {
        g.scaled_add(2.0 * rho, w);
    }
    if let Some(p) = prox {
        g.scaled_add(2.0 * p.gamma, w);
        g.scaled_add(-2.0 * p.gamma, &p.anchor);
    }
}

fn with_ridge(gram: &Array2<f64>, shift: f64) -> Array2<f64> {
    let mut m = gram.clone();
    m.diag_mut().mapv_inplace(|v| v + shift);
    m
}

/// Tiny proximal shift that keeps the majorizer strictly convex when `ρ`
/// and `γ` are both zero.
fn mm_shift(gram: &Array2<f64>) -> f64 {
    let mean_diag = gram.diag().mean().unwrap_or(1.0);
    1e-10 * mean_diag.max(1.0)
}

fn norm(a: &Array2<f64>) -> f64 {
    frob_sq(a).sqrt()
}

fn penalty_only(rho: f64, prox: Option<Proximal<'_>>, start: ArrayView2<f64>) -> SolveResult {
    let w = match prox {
        Some(p) => p.anchor.mapv(|v| v * p.gamma / (p.gamma + rho)),
        None if rho > 0.0 => Array2::zeros(start.dim()),
        None => start.to_owned(),
    };
    let objective = regulariser(&w, rho, prox.as_ref());
    SolveResult { solution: w, objective, iterations: 1, converged: true, grad_norm: 0.0 }
}

/// `(YAᵀ + γW⁰)(AAᵀ + (ρ + γ)I)⁻¹`, least-norm when the system is singular.
fn ridge(x_in: ArrayView2<f64>, y: ArrayView2<f64>, rho: f64, prox: Option<Proximal<'_>>) -> Result<SolveResult> {
    let a = augment(x_in);
    let gram = a.dot(&a.t());
    let mut rhs = y.dot(&a.t());
    let gamma = prox.map_or(0.0, |p| p.gamma);
    if let Some(p) = prox {
        rhs.scaled_add(p.gamma, &p.anchor);
    }
    let shift = rho + gamma;
    let inv = if shift > 0.0 {
        spd_inverse(with_ridge(&gram, shift).view())?
    } else {
        pseudo_inverse(gram.view())?
    };
    let w = rhs.dot(&inv);
    let scores = w.dot(&a);
    let objective = loss_value(LossKind::Mse, scores.view(), y)? + regulariser(&w, rho, prox.as_ref());
    let mut g = (&scores - &y).dot(&a.t()) * 2.0;
    add_regulariser_grad(&mut g, &w, rho, prox.as_ref());
    Ok(SolveResult { solution: w, objective, iterations: 1, converged: true, grad_norm: norm(&g) })
}

fn relu_objective(t: &Array2<f64>, x_next: ArrayView2<f64>, lambda: f64) -> f64 {
    let mut acc = 0.0;
    Zip::from(t).and(&x_next).for_each(|&u, &v| acc += ActivationKind::Relu.divergence(v, u));
    lambda * acc
}

#[allow(clippy::too_many_arguments)]
fn relu_majorize(
    a: &Array2<f64>,
    x_next: ArrayView2<f64>,
    lambda: f64,
    rho: f64,
    prox: Option<Proximal<'_>>,
    start: ArrayView2<f64>,
    cfg: &ProjGradConfig,
) -> Result<SolveResult> {
    let gram = a.dot(&a.t());
    let delta = mm_shift(&gram);
    let gamma = prox.map_or(0.0, |p| p.gamma);
    let inv = spd_inverse(with_ridge(&gram, 2.0 * (rho + gamma) / lambda + delta).view())?;

    let mut w = start.to_owned();
    let mut last: Option<(Array2<f64>, f64, f64)> = None;
    let mut it = 0;
    loop {
        let t = w.dot(a);
        let objective = relu_objective(&t, x_next, lambda) + regulariser(&w, rho, prox.as_ref());
        if let Some((prev_w, prev_obj, prev_res)) = last.take() {
            if objective > prev_obj + 1e-12 * prev_obj.abs().max(1.0) {
                // rounding in the factorised solve; keep the better iterate
                return Ok(SolveResult { solution: prev_w, objective: prev_obj, iterations: it - 1, converged: false, grad_norm: prev_res });
            }
        }
        // (C + X) Aᵀ with C = min(T, 0)
        let mut target = t;
        Zip::from(&mut target).and(&x_next).for_each(|u, &v| *u = u.min(0.0) + v);
        let r = target.dot(&a.t());
        let mut g = (w.dot(&gram) - &r) * lambda;
        add_regulariser_grad(&mut g, &w, rho, prox.as_ref());
        let res = norm(&g);
        if res <= cfg.tol || it >= cfg.max_iters {
            return Ok(SolveResult { solution: w, objective, iterations: it, converged: res <= cfg.tol, grad_norm: res });
        }
        let mut rhs = r;
        rhs.scaled_add(delta, &w);
        if let Some(p) = prox {
            rhs.scaled_add(2.0 * p.gamma / lambda, &p.anchor);
        }
        let next = rhs.dot(&inv);
        last = Some((w, objective, res));
        w = next;
        it += 1;
    }
}

fn ce_objective_grad(w: &Array2<f64>, a: &Array2<f64>, y: ArrayView2<f64>, rho: f64, prox: Option<&Proximal<'_>>) -> (f64, Array2<f64>) {
    let scores = w.dot(a);
    let value = loss_value(LossKind::CrossEntropy, scores.view(), y).expect("shapes checked") + regulariser(w, rho, prox);
    let mut g = (softmax(scores.view()) - &y).dot(&a.t());
    add_regulariser_grad(&mut g, w, rho, prox);
    (value, g)
}

fn ce_majorize(
    a: &Array2<f64>,
    y: ArrayView2<f64>,
    rho: f64,
    prox: Option<Proximal<'_>>,
    start: ArrayView2<f64>,
    cfg: &ProjGradConfig,
) -> Result<SolveResult> {
    let gram = a.dot(&a.t());
    let delta = mm_shift(&gram);
    let curvature = 2.0 * (rho + prox.map_or(0.0, |p| p.gamma)) + delta;
    let inv = spd_inverse(with_ridge(&(&gram * 0.5), curvature).view())?;
    let classes = y.nrows() as f64;

    let mut w = start.to_owned();
    let (mut f, mut g) = ce_objective_grad(&w, a, y, rho, prox.as_ref());
    let mut it = 0;
    loop {
        let res = norm(&g);
        if res <= cfg.tol || it >= cfg.max_iters {
            return Ok(SolveResult { solution: w, objective: f, iterations: it, converged: res <= cfg.tol, grad_norm: res });
        }
        // split the step into the class-mean direction and its complement
        let mean = g.sum_axis(Axis(0)) / classes;
        let mut perp = g.clone();
        for mut row in perp.axis_iter_mut(Axis(0)) {
            row -= &mean;
        }
        let mut step = perp.dot(&inv);
        for mut row in step.axis_iter_mut(Axis(0)) {
            row.scaled_add(1.0 / curvature, &mean);
        }
        let next = &w - &step;
        let (fn_, gn) = ce_objective_grad(&next, a, y, rho, prox.as_ref());
        if fn_ > f + 1e-12 * f.abs().max(1.0) {
            return Ok(SolveResult { solution: w, objective: f, iterations: it, converged: false, grad_norm: res });
        }
        w = next;
        f = fn_;
        g = gn;
        it += 1;
    }
}

struct GradientObjective<'a, 'b, 'c> {
    block: WBlock<'a>,
    x_in: ArrayView2<'b, f64>,
    rho: f64,
    prox: Option<Proximal<'c>>,
}

impl GradientObjective<'_, '_, '_> {
    fn fit(&self, w: &Array2<f64>, want_grad: bool) -> (f64, Option<Array2<f64>>) {
        let t = affine(w.view(), self.x_in).expect("shapes checked");
        let (value, resid) = match self.block {
            WBlock::Intermediate { kind, x_next, lambda } => {
                let mut acc = 0.0;
                Zip::from(&t).and(&x_next).for_each(|&u, &v| acc += kind.divergence(v, u));
                let resid = want_grad.then(|| {
                    let mut r = t.clone();
                    Zip::from(&mut r).and(&x_next).for_each(|u, &v| *u = lambda * kind.grad_u_unchecked(v, *u));
                    r
                });
                (lambda * acc, resid)
            }
            WBlock::Last { loss, y } => {
                let value = loss_value(loss, t.view(), y).expect("shapes checked");
                let resid = want_grad.then(|| match loss {
                    LossKind::Mse => (&t - &y) * 2.0,
                    LossKind::CrossEntropy => softmax(t.view()) - &y,
                });
                (value, resid)
            }
        };
        let value = value + regulariser(w, self.rho, self.prox.as_ref());
        let grad = resid.map(|r| {
            let p = self.x_in.nrows();
            let mut g = Array2::zeros(w.dim());
            g.slice_mut(s![.., ..p]).assign(&r.dot(&self.x_in.t()));
            g.column_mut(p).assign(&r.sum_axis(Axis(1)));
            add_regulariser_grad(&mut g, w, self.rho, self.prox.as_ref());
            g
        });
        (value, grad)
    }
}

impl SmoothObjective for GradientObjective<'_, '_, '_> {
    fn value(&mut self, w: &Array2<f64>) -> f64 {
        self.fit(w, false).0
    }

    fn value_grad(&mut self, w: &Array2<f64>) -> (f64, Array2<f64>) {
        let (v, g) = self.fit(w, true);
        (v, g.expect("gradient requested"))
    }
}

/// Plain first-order route for any W-block.
pub fn solve_w_gradient(
    block: WBlock<'_>,
    x_in: ArrayView2<f64>,
    rho: f64,
    prox: Option<Proximal<'_>>,
    start: ArrayView2<f64>,
    cfg: &ProjGradConfig,
) -> Result<SolveResult> {
    validate(&block, x_in, rho, prox.as_ref(), start)?;
    let mut obj = GradientObjective { block, x_in, rho, prox };
    Ok(projected_gradient(&mut obj, unconstrained, start.to_owned(), &cfg.with_rule(super::StepRule::Backtracking), None))
}

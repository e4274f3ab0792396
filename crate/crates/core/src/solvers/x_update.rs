//! X-block subproblems.
//!
//! The intermediate problem is written without `λ`, which multiplies both of
//! its terms and does not move the minimiser. The last-layer problem keeps
//! `λ` because the loss is unweighted.

use ndarray::{s, Array2, ArrayView2, Zip};

use super::linalg::max_singular_sq;
use super::projgrad::{projected_gradient, SmoothObjective};
use super::{ProjGradConfig, SolveResult};
use crate::divergence::ActivationKind;
use crate::error::{Error, Result};
use crate::network::{affine, loss_value, softmax, LossKind};

/// Curvature of `u ↦ B(v, u)`.
fn u_curvature(kind: ActivationKind) -> f64 {
    match kind {
        ActivationKind::Relu => 1.0,
        ActivationKind::Sigmoid => 0.25,
        ActivationKind::QuadraticIdentity | ActivationKind::QuadraticPlus => 2.0,
    }
}

/// Curvature of `v ↦ B(v, u)`; unbounded for the sigmoid.
fn v_curvature(kind: ActivationKind) -> Option<f64> {
    match kind {
        ActivationKind::Relu => Some(1.0),
        ActivationKind::Sigmoid => None,
        ActivationKind::QuadraticIdentity | ActivationKind::QuadraticPlus => Some(2.0),
    }
}

fn check_block(w: ArrayView2<f64>, rows: usize, cols: usize, what: &str) -> Result<()> {
    if cols == 0 {
        return Err(Error::EmptyBatch);
    }
    if w.ncols() != rows + 1 {
        return Err(Error::Shape(format!(
            "{what}: weight {:?} does not act on {rows} rows",
            w.dim()
        )));
    }
    Ok(())
}

fn same_shape(a: ArrayView2<f64>, b: ArrayView2<f64>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `W̃ᵀ G` where `W̃` drops the bias column.
fn back_through(w: ArrayView2<f64>, g: &Array2<f64>) -> Array2<f64> {
    let p = w.ncols() - 1;
    w.slice(s![.., ..p]).t().dot(g)
}

struct Intermediate<'a> {
    kind_out: ActivationKind,
    kind_in: ActivationKind,
    w: ArrayView2<'a, f64>,
    x_next: ArrayView2<'a, f64>,
    u_prev: ArrayView2<'a, f64>,
}

impl Intermediate<'_> {
    fn terms(&self, z: &Array2<f64>) -> (f64, Array2<f64>) {
        let u = affine(self.w, z.view()).expect("shapes checked");
        let mut total = 0.0;
        Zip::from(&self.x_next).and(&u).for_each(|&v, &pre| total += self.kind_out.divergence(v, pre));
        Zip::from(z).and(&self.u_prev).for_each(|&v, &pre| total += self.kind_in.divergence(v, pre));
        (total, u)
    }
}

impl SmoothObjective for Intermediate<'_> {
    fn value(&mut self, z: &Array2<f64>) -> f64 {
        self.terms(z).0
    }

    fn value_grad(&mut self, z: &Array2<f64>) -> (f64, Array2<f64>) {
        let (total, mut u) = self.terms(z);
        let kind = self.kind_out;
        Zip::from(&mut u).and(&self.x_next).for_each(|pre, &v| *pre = kind.grad_u_unchecked(v, *pre));
        let mut g = back_through(self.w, &u);
        let kind = self.kind_in;
        Zip::from(&mut g)
            .and(z)
            .and(&self.u_prev)
            .for_each(|gi, &v, &pre| *gi += kind.grad_v_unchecked(v, pre));
        (total, g)
    }
}

/// `argmin_Z B_out(X_{l+1}, W_l·[Z; 1]) + B_in(Z, U_{l-1})` over the feasible
/// set of `kind_in`, warm-started at `start`.
#[allow(clippy::too_many_arguments)]
pub fn solve_x_intermediate(
    kind_out: ActivationKind,
    kind_in: ActivationKind,
    w: ArrayView2<f64>,
    x_next: ArrayView2<f64>,
    u_prev: ArrayView2<f64>,
    start: ArrayView2<f64>,
    cfg: &ProjGradConfig,
) -> Result<SolveResult> {
    check_block(w, u_prev.nrows(), u_prev.ncols(), "intermediate X")?;
    same_shape(start, u_prev, "intermediate X start")?;
    if x_next.dim() != (w.nrows(), u_prev.ncols()) {
        return Err(Error::Shape(format!(
            "intermediate X: next activation {:?} vs weight {:?}",
            x_next.dim(),
            w.dim()
        )));
    }
    let lipschitz = v_curvature(kind_in).map(|c| {
        let p = w.ncols() - 1;
        u_curvature(kind_out) * max_singular_sq(w.slice(s![.., ..p])) + c
    });
    let mut obj = Intermediate { kind_out, kind_in, w: w.view(), x_next: x_next.view(), u_prev: u_prev.view() };
    Ok(projected_gradient(
        &mut obj,
        |v: f64| kind_in.project(v),
        start.to_owned(),
        cfg,
        lipschitz,
    ))
}

struct Last<'a> {
    loss: LossKind,
    kind: ActivationKind,
    w: ArrayView2<'a, f64>,
    y: ArrayView2<'a, f64>,
    u_prev: ArrayView2<'a, f64>,
    lambda: f64,
}

impl Last<'_> {
    fn penalty(&self, z: &Array2<f64>) -> f64 {
        let mut acc = 0.0;
        match self.kind {
            // λ B(Z, U) equals (λ/2)‖Z − U‖² up to a constant once Z ≥ 0
            ActivationKind::Relu => {
                Zip::from(z).and(&self.u_prev).for_each(|&a, &b| acc += 0.5 * (a - b) * (a - b));
            }
            kind => {
                Zip::from(z).and(&self.u_prev).for_each(|&a, &b| acc += kind.divergence(a, b));
            }
        }
        self.lambda * acc
    }
}

impl SmoothObjective for Last<'_> {
    fn value(&mut self, z: &Array2<f64>) -> f64 {
        let scores = affine(self.w, z.view()).expect("shapes checked");
        loss_value(self.loss, scores.view(), self.y).expect("shapes checked") + self.penalty(z)
    }

    fn value_grad(&mut self, z: &Array2<f64>) -> (f64, Array2<f64>) {
        let scores = affine(self.w, z.view()).expect("shapes checked");
        let value = loss_value(self.loss, scores.view(), self.y).expect("shapes checked") + self.penalty(z);
        let residual = match self.loss {
            LossKind::Mse => (&scores - &self.y) * 2.0,
            LossKind::CrossEntropy => softmax(scores.view()) - &self.y,
        };
        let mut g = back_through(self.w, &residual);
        let (kind, lambda) = (self.kind, self.lambda);
        Zip::from(&mut g)
            .and(z)
            .and(&self.u_prev)
            .for_each(|gi, &v, &pre| *gi += lambda * kind.grad_v_unchecked(v, pre));
        (value, g)
    }
}

/// `argmin_Z ℒ(Y, W_L·[Z; 1]) + λ B(Z, U_{L-1})` for any supported kind.
#[allow(clippy::too_many_arguments)]
pub fn solve_x_last(
    loss: LossKind,
    kind: ActivationKind,
    w: ArrayView2<f64>,
    y: ArrayView2<f64>,
    u_prev: ArrayView2<f64>,
    lambda: f64,
    start: ArrayView2<f64>,
    cfg: &ProjGradConfig,
) -> Result<SolveResult> {
    check_block(w, u_prev.nrows(), u_prev.ncols(), "last X")?;
    same_shape(start, u_prev, "last X start")?;
    if y.dim() != (w.nrows(), u_prev.ncols()) {
        return Err(Error::Shape(format!("last X: labels {:?} vs weight {:?}", y.dim(), w.dim())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Hyperparams(format!("lambda must be nonnegative, got {lambda}")));
    }
    let p = w.ncols() - 1;
    let sigma_sq = max_singular_sq(w.slice(s![.., ..p]));
    let loss_curv = match loss {
        LossKind::Mse => 2.0,
        LossKind::CrossEntropy => 0.5,
    };
    let lipschitz = v_curvature(kind).map(|c| loss_curv * sigma_sq + lambda * c);
    let mut obj = Last { loss, kind, w: w.view(), y: y.view(), u_prev: u_prev.view(), lambda };
    Ok(projected_gradient(
        &mut obj,
        |v: f64| kind.project(v),
        start.to_owned(),
        cfg,
        lipschitz,
    ))
}

/// Nonnegative least squares `min_{Z ≥ 0} ‖Y − W_L·[Z; 1]‖² + (λ/2)‖Z − U‖²`.
pub fn solve_x_last_mse(
    w: ArrayView2<f64>,
    y: ArrayView2<f64>,
    u_prev: ArrayView2<f64>,
    lambda: f64,
    start: ArrayView2<f64>,
    cfg: &ProjGradConfig,
) -> Result<SolveResult> {
    solve_x_last(LossKind::Mse, ActivationKind::Relu, w, y, u_prev, lambda, start, cfg)
}

/// `min_{Z ≥ 0} −Tr Yᵀ log softmax(W_L·[Z; 1]) + (λ/2)‖Z − U‖²`.
pub fn solve_x_last_ce(
    w: ArrayView2<f64>,
    y: ArrayView2<f64>,
    u_prev: ArrayView2<f64>,
    lambda: f64,
    start: ArrayView2<f64>,
    cfg: &ProjGradConfig,
) -> Result<SolveResult> {
    solve_x_last(LossKind::CrossEntropy, ActivationKind::Relu, w, y, u_prev, lambda, start, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::StepRule;
    use ndarray::{array, concatenate, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tight() -> ProjGradConfig {
        ProjGradConfig { tol: 1e-10, max_iters: 100_000, step_rule: StepRule::Backtracking }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64, hi: f64) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(lo..hi))
    }

    #[test]
    fn scalar_relu_chain() {
        let w = array![[1.0, 0.0]];
        let r = solve_x_intermediate(
            ActivationKind::Relu,
            ActivationKind::Relu,
            w.view(),
            array![[1.0]].view(),
            array![[1.0]].view(),
            array![[0.0]].view(),
            &tight(),
        )
        .unwrap();
        assert!(r.converged);
        assert!((r.solution[[0, 0]] - 1.0).abs() < 1e-9);
        assert!(r.objective.abs() < 1e-12);
    }

    #[test]
    fn consistent_chain_is_no_worse_than_relu_candidate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = rand_mat(&mut rng, 3, 5, -1.0, 1.0);
        let u_prev = rand_mat(&mut rng, 4, 6, -1.0, 1.0);
        let cand = u_prev.mapv(|v| v.max(0.0));
        let x_next = affine(w.view(), cand.view()).unwrap().mapv(|v| v.max(0.0));
        let r = solve_x_intermediate(
            ActivationKind::Relu,
            ActivationKind::Relu,
            w.view(),
            x_next.view(),
            u_prev.view(),
            u_prev.view(),
            &tight(),
        )
        .unwrap();
        let mut obj = Intermediate {
            kind_out: ActivationKind::Relu,
            kind_in: ActivationKind::Relu,
            w: w.view(),
            x_next: x_next.view(),
            u_prev: u_prev.view(),
        };
        assert!(r.objective <= obj.value(&cand) + 1e-12);
        // the candidate makes both terms vanish, so it is the minimiser
        assert!(r.objective < 1e-12);
    }

    #[test]
    fn intermediate_matches_long_run_diminishing_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let w = rand_mat(&mut rng, 3, 5, -1.0, 1.0);
        let x_next = rand_mat(&mut rng, 3, 4, 0.0, 1.0);
        let u_prev = rand_mat(&mut rng, 4, 4, -1.0, 1.0);
        let r = solve_x_intermediate(
            ActivationKind::Relu,
            ActivationKind::Relu,
            w.view(),
            x_next.view(),
            u_prev.view(),
            Array2::zeros((4, 4)).view(),
            &tight(),
        )
        .unwrap();
        assert!(r.converged);

        // oracle: 1e5 projected steps of size c/sqrt(k+1), no line search
        let mut obj = Intermediate {
            kind_out: ActivationKind::Relu,
            kind_in: ActivationKind::Relu,
            w: w.view(),
            x_next: x_next.view(),
            u_prev: u_prev.view(),
        };
        let mut z = Array2::<f64>::zeros((4, 4));
        let mut best = f64::INFINITY;
        for k in 0..100_000 {
            let (f, g) = obj.value_grad(&z);
            best = best.min(f);
            let step = 0.2 / ((k + 1) as f64).sqrt();
            z = (&z - &(g * step)).mapv(|v| v.max(0.0));
        }
        best = best.min(obj.value(&z));
        assert!((r.objective - best).abs() <= 1e-6, "{} vs {}", r.objective, best);
    }

    #[test]
    fn scalar_nnls() {
        let w = array![[1.0, 0.0]];
        let r = solve_x_last_mse(w.view(), array![[1.0]].view(), array![[0.0]].view(), 2.0, array![[0.0]].view(), &tight())
            .unwrap();
        assert!((r.solution[[0, 0]] - 0.5).abs() < 1e-9);
        let r = solve_x_last_mse(w.view(), array![[-1.0]].view(), array![[0.0]].view(), 2.0, array![[0.3]].view(), &tight())
            .unwrap();
        assert_eq!(r.solution[[0, 0]], 0.0);
    }

    #[test]
    fn fixed_step_rule_agrees_with_backtracking() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = rand_mat(&mut rng, 4, 6, -1.0, 1.0);
        let y = rand_mat(&mut rng, 4, 9, -1.0, 1.0);
        let u = rand_mat(&mut rng, 5, 9, -1.0, 1.0);
        let a = solve_x_last_mse(w.view(), y.view(), u.view(), 0.7, u.view(), &tight()).unwrap();
        let b = solve_x_last_mse(w.view(), y.view(), u.view(), 0.7, u.view(), &tight().with_rule(StepRule::FixedLipschitz))
            .unwrap();
        assert!(a.converged && b.converged);
        assert!((a.objective - b.objective).abs() < 1e-10);
    }

    #[test]
    fn ce_large_lambda_pins_to_prox_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_mat(&mut rng, 3, 5, -1.0, 1.0);
        let y = array![[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]];
        let u = rand_mat(&mut rng, 4, 2, -1.0, 1.0);
        let r = solve_x_last_ce(w.view(), y.view(), u.view(), 1e6, Array2::zeros((4, 2)).view(), &tight()).unwrap();
        for (z, c) in r.solution.iter().zip(u.iter()) {
            assert!((z - c.max(0.0)).abs() <= 1e-3);
        }
    }

    #[test]
    fn ce_two_class_point_against_bisection() {
        // W = [I | 0], y = (1, 0), U = 0, λ = 1. With z₂ = 0 the problem in z₁
        // is log(1 + e^{-z₁}) + z₁²/2 whose root of the derivative we bisect.
        let w = array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let y = array![[1.0], [0.0]];
        let u = array![[0.0], [0.0]];
        let r = solve_x_last_ce(w.view(), y.view(), u.view(), 1.0, u.view(), &tight()).unwrap();
        let z = r.solution.column(0);
        assert!(z[0] > z[1]);
        assert_eq!(z[1], 0.0);
        let deriv = |t: f64| -1.0 / (1.0 + t.exp()) + t;
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if deriv(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        assert!((z[0] - lo).abs() < 1e-8, "{} vs {}", z[0], lo);
    }

    #[test]
    fn ce_random_instance_is_kkt_certified() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let w = rand_mat(&mut rng, 4, 7, -2.0, 2.0);
        let labels: Vec<usize> = (0..8).map(|j| j % 4).collect();
        let y = crate::network::one_hot(&labels, 4);
        let u = rand_mat(&mut rng, 6, 8, -1.0, 1.0);
        let cfg = ProjGradConfig { tol: 1e-8, ..tight() };
        let r = solve_x_last_ce(w.view(), y.view(), u.view(), 0.5, u.view(), &cfg).unwrap();
        assert!(r.converged);
        let mut obj = Last { loss: LossKind::CrossEntropy, kind: ActivationKind::Relu, w: w.view(), y: y.view(), u_prev: u.view(), lambda: 0.5 };
        let (_, g) = obj.value_grad(&r.solution);
        let res = super::super::projected_gradient_norm(&r.solution, &g, &|v: f64| v.max(0.0));
        assert!(res <= 1e-6);
    }

    #[test]
    fn column_separability() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_mat(&mut rng, 3, 4, -1.0, 1.0);
        let y = rand_mat(&mut rng, 3, 2, -1.0, 1.0);
        let u = rand_mat(&mut rng, 3, 2, -1.0, 1.0);
        let both = solve_x_last_mse(w.view(), y.view(), u.view(), 1.3, u.view(), &tight()).unwrap();
        let cols: Vec<Array2<f64>> = (0..2)
            .map(|j| {
                let yj = y.slice(s![.., j..j + 1]);
                let uj = u.slice(s![.., j..j + 1]);
                solve_x_last_mse(w.view(), yj, uj, 1.3, uj, &tight()).unwrap().solution
            })
            .collect();
        let joined = concatenate(Axis(1), &[cols[0].view(), cols[1].view()]).unwrap();
        for (a, b) in both.solution.iter().zip(joined.iter()) {
            assert!((a - b).abs() <= 1e-8);
        }
    }

    #[test]
    fn sigmoid_layers_stay_inside_the_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = rand_mat(&mut rng, 2, 4, -1.0, 1.0);
        let x_next = rand_mat(&mut rng, 2, 5, 0.05, 0.95);
        let u_prev = rand_mat(&mut rng, 3, 5, -2.0, 2.0);
        let start = u_prev.mapv(crate::divergence::sigmoid);
        let r = solve_x_intermediate(
            ActivationKind::Sigmoid,
            ActivationKind::Sigmoid,
            w.view(),
            x_next.view(),
            u_prev.view(),
            start.view(),
            &ProjGradConfig { tol: 1e-9, ..tight() },
        )
        .unwrap();
        assert!(r.converged);
        assert!(r.solution.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn rejects_empty_batches_and_bad_shapes() {
        let w = array![[1.0, 0.0]];
        let empty = Array2::<f64>::zeros((1, 0));
        assert!(matches!(
            solve_x_last_mse(w.view(), empty.view(), empty.view(), 1.0, empty.view(), &tight()),
            Err(Error::EmptyBatch)
        ));
        let y = array![[1.0, 2.0]];
        let u = array![[1.0]];
        assert!(solve_x_last_mse(w.view(), y.view(), u.view(), 1.0, u.view(), &tight()).is_err());
    }
}

use ndarray::{Array2, Zip};

use super::{ProjGradConfig, SolveResult, StepRule};

const ARMIJO: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MIN_STEP: f64 = 1e-20;
const ROUNDING: f64 = 1e-13;

/// A convex, continuously differentiable objective on matrices.
pub trait SmoothObjective {
    fn value(&mut self, z: &Array2<f64>) -> f64;
    fn value_grad(&mut self, z: &Array2<f64>) -> (f64, Array2<f64>);
}

/// Adapts a closure returning `(value, gradient)`.
pub struct FnObjective<F>(pub F);

impl<F> SmoothObjective for FnObjective<F>
where
    F: FnMut(&Array2<f64>) -> (f64, Array2<f64>),
{
    fn value(&mut self, z: &Array2<f64>) -> f64 {
        (self.0)(z).0
    }

    fn value_grad(&mut self, z: &Array2<f64>) -> (f64, Array2<f64>) {
        (self.0)(z)
    }
}

/// `‖Z − P(Z − ∇f(Z))‖_F`, zero exactly at constrained stationary points.
/// `project` acts on one entry at a time.
pub fn projected_gradient_norm<P>(z: &Array2<f64>, grad: &Array2<f64>, project: &P) -> f64
where
    P: Fn(f64) -> f64,
{
    let mut acc = 0.0;
    Zip::from(z).and(grad).for_each(|&a, &g| {
        let d = a - project(a - g);
        acc += d * d;
    });
    acc.sqrt()
}

/// Projected gradient descent from `start` over a set that is a product of
/// intervals, with `project` the entrywise projection.
///
/// With [`StepRule::FixedLipschitz`] every step is `1/L`, which needs
/// `lipschitz`; without it the engine falls back to backtracking. With
/// [`StepRule::Backtracking`] the step is shrunk by one half until the
/// Armijo condition along the projection arc holds. Once the decrease
/// falls below the resolution of `f`, a gradient-based curvature test takes
/// over, so objective values never increase by more than rounding.
pub fn projected_gradient<O, P>(
    objective: &mut O,
    project: P,
    start: Array2<f64>,
    cfg: &ProjGradConfig,
    lipschitz: Option<f64>,
) -> SolveResult
where
    O: SmoothObjective,
    P: Fn(f64) -> f64,
{
    let mut z = start;
    z.mapv_inplace(&project);
    let (mut f, mut g) = objective.value_grad(&z);
    let fixed = match (cfg.step_rule, lipschitz) {
        (StepRule::FixedLipschitz, Some(l)) if l > 0.0 && l.is_finite() => Some(1.0 / l),
        _ => None,
    };
    let mut step = fixed.unwrap_or_else(|| lipschitz.filter(|l| *l > 0.0).map_or(1.0, |l| 1.0 / l));
    let mut trial = z.clone();

    for it in 0..cfg.max_iters {
        let res = projected_gradient_norm(&z, &g, &project);
        if res <= cfg.tol {
            return SolveResult { solution: z, objective: f, iterations: it, converged: true, grad_norm: res };
        }
        let mut first_try = true;
        let (f_next, g_next) = loop {
            Zip::from(&mut trial).and(&z).and(&g).for_each(|t, &zi, &gi| *t = project(zi - step * gi));
            if fixed.is_some() {
                break objective.value_grad(&trial);
            }
            let f_trial = objective.value(&trial);
            let mut slope = 0.0;
            Zip::from(&g).and(&trial).and(&z).for_each(|&gi, &t, &zi| slope += gi * (t - zi));
            if f_trial <= f + ARMIJO * slope {
                break objective.value_grad(&trial);
            }
            if (f_trial - f).abs() <= ROUNDING * f.abs().max(1.0) {
                // the decrease is below what f can resolve; test the step
                // against the local curvature through gradients instead
                let (fv, gv) = objective.value_grad(&trial);
                let (mut curv, mut dist) = (0.0, 0.0);
                Zip::from(&gv).and(&g).and(&trial).and(&z).for_each(|&a, &b, &t, &zi| {
                    curv += (a - b) * (t - zi);
                    dist += (t - zi) * (t - zi);
                });
                if curv * step <= dist {
                    break (fv, gv);
                }
            }
            first_try = false;
            step *= SHRINK;
            if step < MIN_STEP {
                let res = projected_gradient_norm(&z, &g, &project);
                return SolveResult { solution: z, objective: f, iterations: it, converged: false, grad_norm: res };
            }
        };
        if fixed.is_some() && f_next > f + ROUNDING * f.abs().max(1.0) {
            // a fixed step can only increase f through rounding or a wrong L
            let res = projected_gradient_norm(&z, &g, &project);
            return SolveResult { solution: z, objective: f, iterations: it, converged: res <= cfg.tol, grad_norm: res };
        }
        std::mem::swap(&mut z, &mut trial);
        f = f_next;
        g = g_next;
        if fixed.is_none() && first_try {
            step /= SHRINK;
        }
    }
    let res = projected_gradient_norm(&z, &g, &project);
    SolveResult { solution: z, objective: f, iterations: cfg.max_iters, converged: res <= cfg.tol, grad_norm: res }
}

/// Projection onto the nonnegative half-line.
pub fn nonnegative(v: f64) -> f64 {
    v.max(0.0)
}

/// No constraint.
pub fn unconstrained(v: f64) -> f64 {
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::StepRule;
    use ndarray::{array, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(rule: StepRule) -> ProjGradConfig {
        ProjGradConfig { tol: 1e-10, max_iters: 100_000, step_rule: rule }
    }

    fn shifted_square(c: f64) -> FnObjective<impl FnMut(&Array2<f64>) -> (f64, Array2<f64>)> {
        FnObjective(move |z: &Array2<f64>| {
            let d = z - c;
            (0.5 * d.iter().map(|v| v * v).sum::<f64>(), d)
        })
    }

    #[test]
    fn interior_and_active_minimisers() {
        for rule in [StepRule::Backtracking, StepRule::FixedLipschitz] {
            let r = projected_gradient(&mut shifted_square(3.0), nonnegative, array![[0.0]], &cfg(rule), Some(1.0));
            assert!(r.converged);
            assert!((r.solution[[0, 0]] - 3.0).abs() < 1e-9);
            let r = projected_gradient(&mut shifted_square(-3.0), nonnegative, array![[1.0]], &cfg(rule), Some(1.0));
            assert!(r.converged);
            assert_eq!(r.solution[[0, 0]], 0.0);
        }
    }

    // ½ zᵀQz + bᵀz on z ≥ 0 by enumerating all active sets
    fn box_qp_oracle(q: &Array2<f64>, b: &Array1<f64>) -> f64 {
        let n = b.len();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1 << n) {
            let free: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            let k = free.len();
            let mut z = Array1::<f64>::zeros(n);
            if k > 0 {
                // Gauss-Jordan on the free block
                let mut m = Array2::<f64>::zeros((k, k + 1));
                for (a, &i) in free.iter().enumerate() {
                    for (c, &j) in free.iter().enumerate() {
                        m[[a, c]] = q[[i, j]];
                    }
                    m[[a, k]] = -b[i];
                }
                for col in 0..k {
                    let piv = (col..k).max_by(|&x, &y| m[[x, col]].abs().total_cmp(&m[[y, col]].abs())).unwrap();
                    for c in 0..=k {
                        m.swap([col, c], [piv, c]);
                    }
                    let p = m[[col, col]];
                    for c in 0..=k {
                        m[[col, c]] /= p;
                    }
                    for r in 0..k {
                        if r != col {
                            let f = m[[r, col]];
                            for c in 0..=k {
                                m[[r, c]] -= f * m[[col, c]];
                            }
                        }
                    }
                }
                for (a, &i) in free.iter().enumerate() {
                    z[i] = m[[a, k]];
                }
            }
            if z.iter().all(|&v| v >= -1e-12) {
                let z = z.mapv(|v| v.max(0.0));
                let val = 0.5 * z.dot(&q.dot(&z)) + b.dot(&z);
                best = best.min(val);
            }
        }
        best
    }

    #[test]
    fn random_box_qp_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let n = 10;
            let r = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
            let q = r.t().dot(&r) + Array2::<f64>::eye(n) * 0.5;
            let b = Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0));
            let qc = q.clone();
            let bc = b.clone();
            let mut obj = FnObjective(move |z: &Array2<f64>| {
                let zv = z.column(0).to_owned();
                let qz = qc.dot(&zv);
                let val = 0.5 * zv.dot(&qz) + bc.dot(&zv);
                let g = (qz + &bc).insert_axis(ndarray::Axis(1));
                (val, g)
            });
            let res = projected_gradient(&mut obj, nonnegative, Array2::zeros((n, 1)), &cfg(StepRule::Backtracking), None);
            assert!(res.converged);
            let oracle = box_qp_oracle(&q, &b);
            assert!((res.objective - oracle).abs() <= 1e-8, "{} vs {}", res.objective, oracle);
        }
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let c = ProjGradConfig { tol: 1e-14, max_iters: 2, step_rule: StepRule::Backtracking };
        let mut obj = FnObjective(|z: &Array2<f64>| {
            let v = z[[0, 0]];
            (v.powi(4) + v * v, array![[4.0 * v.powi(3) + 2.0 * v]])
        });
        let r = projected_gradient(&mut obj, unconstrained, array![[5.0]], &c, None);
        assert!(!r.converged);
        assert_eq!(r.iterations, 2);
        assert!(r.objective < 650.0);
    }
}

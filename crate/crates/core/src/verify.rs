//! Property checks shared by the `verify` command and the acceptance suite.
//!
//! Each check is self-contained, seeded, and returns a [`CheckOutcome`]
//! rather than panicking, so callers can print a table. The gradient check
//! takes the gradient as a parameter, which lets the suite be pointed at a
//! deliberately broken gradient to confirm that it notices.

use std::time::Instant;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baseline::backprop_gradient;
use crate::bcd::{alternate, block_order, multi_lambda_objective, scale_to_single_lambda, scaled_objective, train_batched, train_full, ScalingProfile, TrainOptions, TrainReport};
use crate::data::{Dataset, Split};
use crate::divergence::{divergence_grad_u, divergence_grad_v, ActivationKind};
use crate::network::{
    argmax_columns, feed_forward, lifted_objective, one_hot, standard_objective, Hyperparams, LiftedState, LossKind,
    NetworkSpec, Weights,
};
use crate::solvers::{solve_x_last_mse, ProjGradConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// `∂B/∂u` and `∂B/∂v` at `(v, u)`.
pub type GradFn = fn(ActivationKind, f64, f64) -> (f64, f64);

pub fn reference_gradient(kind: ActivationKind, v: f64, u: f64) -> (f64, f64) {
    let gu = divergence_grad_u(kind, v, u).unwrap_or(f64::NAN);
    let gv = divergence_grad_v(kind, v, u).unwrap_or(f64::NAN);
    (gu, gv)
}

/// The ReLU `∂B/∂u` with its sign flipped; used to show the gradient check
/// is sensitive.
pub fn flipped_relu_gradient(kind: ActivationKind, v: f64, u: f64) -> (f64, f64) {
    let (gu, gv) = reference_gradient(kind, v, u);
    if kind == ActivationKind::Relu {
        (-gu, gv)
    } else {
        (gu, gv)
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, String)) -> CheckOutcome {
    let start = Instant::now();
    let (passed, detail) = f();
    CheckOutcome { name, passed, detail, seconds: start.elapsed().as_secs_f64() }
}

/// Uniform random `(v, u)` in the feasible region of `kind`.
fn sample(kind: ActivationKind, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u = rng.random_range(-5.0..5.0);
    let v = match kind {
        ActivationKind::Sigmoid => rng.random_range(1e-6..1.0 - 1e-6),
        ActivationKind::Relu | ActivationKind::QuadraticIdentity => rng.random_range(0.0..5.0),
        ActivationKind::QuadraticPlus => rng.random_range(-5.0..5.0),
    };
    (v, u)
}

/// `B ≥ 0` on random samples, `B(φ(u), u) = 0`, and `B > 0` off the graph.
pub fn check_fenchel_young(samples: usize) -> CheckOutcome {
    timed("fenchel-young", || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst_neg: f64 = 0.0;
        let mut worst_on: f64 = 0.0;
        let mut off_zero = 0usize;
        for kind in [ActivationKind::Relu, ActivationKind::Sigmoid] {
            for _ in 0..samples {
                let (v, u) = sample(kind, &mut rng);
                let b = kind.divergence(v, u);
                worst_neg = worst_neg.min(b);
                let phi = kind.activate(u);
                let on = kind.divergence(phi, u);
                worst_on = worst_on.max(on.abs() / (1.0 + u * u));
                if (v - phi).abs() > 1e-3 && b <= 0.0 {
                    off_zero += 1;
                }
            }
        }
        let ok = worst_neg >= -1e-12 && worst_on <= 1e-12 && off_zero == 0;
        (ok, format!("min B {worst_neg:.2e}, max |B(φ(u),u)| {worst_on:.2e}, zero off graph {off_zero}"))
    })
}

/// Divergence partials against central differences.
pub fn check_divergence_gradients(grad: GradFn, samples: usize) -> CheckOutcome {
    timed("divergence-gradients", || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut worst: f64 = 0.0;
        let mut worst_kind = ActivationKind::Relu;
        for kind in ActivationKind::ALL {
            for _ in 0..samples {
                let (v, u) = sample(kind, &mut rng);
                let (v, u) = match kind {
                    // keep differences away from the kinks and the boundary
                    ActivationKind::Relu | ActivationKind::QuadraticIdentity => (v.max(0.01), if u.abs() < 0.01 { 0.5 } else { u }),
                    ActivationKind::Sigmoid => (v.clamp(0.01, 0.99), u),
                    ActivationKind::QuadraticPlus => (v, if u.abs() < 0.01 { 0.5 } else { u }),
                };
                let h = 1e-6;
                let fd_u = (kind.divergence(v, u + h) - kind.divergence(v, u - h)) / (2.0 * h);
                let fd_v = (kind.divergence(v + h, u) - kind.divergence(v - h, u)) / (2.0 * h);
                let (gu, gv) = grad(kind, v, u);
                for (fd, g) in [(fd_u, gu), (fd_v, gv)] {
                    let rel = (fd - g).abs() / (fd.abs() + g.abs()).max(1e-2);
                    if !(rel <= worst) {
                        worst = if rel.is_nan() { f64::INFINITY } else { rel };
                        worst_kind = kind;
                    }
                }
            }
        }
        (worst < 1e-5, format!("max rel error {worst:.2e} ({worst_kind})"))
    })
}

/// Backpropagated gradients against central differences on every layer and
/// every activation kind.
pub fn check_backprop_gradients() -> CheckOutcome {
    timed("backprop-gradients", || {
        let mut worst: f64 = 0.0;
        for (i, kind) in ActivationKind::ALL.into_iter().enumerate() {
            for loss in [LossKind::Mse, LossKind::CrossEntropy] {
                if loss == LossKind::CrossEntropy && !kind.is_exact() {
                    continue;
                }
                let spec = NetworkSpec::uniform(vec![2, 3, 2], kind, loss).expect("valid");
                let mut rng = ChaCha8Rng::seed_from_u64(10 + i as u64);
                let m = 6;
                let x = Array2::from_shape_fn((2, m), |_| rng.random_range(-1.0..1.0));
                let y = match loss {
                    LossKind::Mse => Array2::from_shape_fn((2, m), |_| rng.random_range(-1.0..1.0)),
                    LossKind::CrossEntropy => one_hot(&(0..m).map(|j| j % 2).collect::<Vec<_>>(), 2),
                };
                let w = Weights::init(&spec, 20 + i as u64);
                let rho = [0.05, 0.1];
                let grads = backprop_gradient(&spec, &w, x.view(), y.view(), &rho).expect("shapes");
                let f = |w: &Weights| standard_objective(&spec, w, x.view(), y.view(), &rho).expect("shapes");
                for l in 0..w.mats.len() {
                    for r in 0..w.mats[l].nrows() {
                        for c in 0..w.mats[l].ncols() {
                            let h = 1e-6;
                            let mut p = w.clone();
                            p.mats[l][[r, c]] += h;
                            let mut q = w.clone();
                            q.mats[l][[r, c]] -= h;
                            let fd = (f(&p) - f(&q)) / (2.0 * h);
                            let g = grads[l][[r, c]];
                            worst = worst.max((fd - g).abs() / (fd.abs() + g.abs()).max(1e-3));
                        }
                    }
                }
            }
        }
        (worst < 1e-5, format!("max rel error {worst:.2e}"))
    })
}

/// `B(tv, tu) = t² B(v, u)` for the ReLU divergence.
pub fn check_homogeneity(samples: usize) -> CheckOutcome {
    timed("relu-homogeneity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let (v, u) = sample(ActivationKind::Relu, &mut rng);
            let t = rng.random_range(0.01..10.0);
            let a = ActivationKind::Relu.divergence(t * v, t * u);
            let b = t * t * ActivationKind::Relu.divergence(v, u);
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
        (worst <= 1e-12, format!("max rel deviation {worst:.2e}"))
    })
}

/// Multi-λ objective equals the single-λ objective at the scaled variables.
pub fn check_scaling() -> CheckOutcome {
    timed("variable-scaling", || {
        let mut worst: f64 = 0.0;
        for seed in 0..20u64 {
            let loss = if seed % 2 == 0 { LossKind::Mse } else { LossKind::CrossEntropy };
            let spec = NetworkSpec::uniform(vec![3, 4, 2], ActivationKind::Relu, loss).expect("valid");
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let w = Weights::init(&spec, seed);
            let x = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
            let y = one_hot(&[0, 1, 1, 0, 1], 2);
            let mut s = LiftedState::feed_forward(&spec, &w, x, y).expect("shapes");
            s.acts[0].mapv_inplace(|v| (v + 0.3).max(0.0));
            let prof = ScalingProfile::new(vec![rng.random_range(0.1..50.0)], rng.random_range(0.1..50.0)).expect("positive");
            let rho = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
            let p = scale_to_single_lambda(&spec, &prof, &w, &s, &rho).expect("relu net");
            let a = multi_lambda_objective(&spec, &prof, &w, &s, &rho).expect("shapes");
            let b = scaled_objective(&spec, &p).expect("shapes");
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
        (worst <= 1e-12, format!("max rel gap {worst:.2e} over 20 two-layer nets"))
    })
}

fn random_task(seed: u64, widths: &[usize], loss: LossKind, m: usize) -> (NetworkSpec, Dataset) {
    let spec = NetworkSpec::uniform(widths.to_vec(), ActivationKind::Relu, loss).expect("valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Array2::from_shape_fn((widths[0], m), |_| rng.random_range(0.0..1.0));
    let teacher = Weights::init(&spec, seed ^ 0x5eed);
    let out = feed_forward(&spec, &teacher, x.view()).expect("shapes").prediction;
    let classes = argmax_columns(out.view());
    let mut ds = Dataset::new(x, classes, spec.output_dim(), Split::Train).expect("labels in range");
    if loss == LossKind::Mse {
        ds.labels = out.mapv(|v| v + rng.random_range(-0.1..0.1));
    }
    (spec, ds)
}

/// Every block update of Algorithm 1 keeps the lifted objective from
/// increasing, on 20 random small nets.
pub fn check_monotone_descent() -> CheckOutcome {
    timed("monotone-descent", || {
        let mut worst = f64::NEG_INFINITY;
        let mut blocks = 0;
        let mut slack = 0.0;
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let depth = rng.random_range(1..=3);
            let mut widths = vec![rng.random_range(2..6)];
            widths.extend((0..depth).map(|_| rng.random_range(2..7)));
            widths.push(rng.random_range(2..4));
            let loss = if seed % 2 == 0 { LossKind::Mse } else { LossKind::CrossEntropy };
            let (spec, ds) = random_task(seed, &widths, loss, 30);
            let mut h = Hyperparams::non_batched(&spec);
            h.lambda = rng.random_range(0.5..20.0);
            h.outer_max_iters = 5;
            h.outer_rel_tol = 0.0;
            slack = 10.0 * h.inner_tol;
            let opts = TrainOptions { track_blocks: true, ..TrainOptions::default() };
            let (_, rep) = train_full(&spec, &ds, &h, &opts).expect("training runs");
            for r in &rep.records {
                for d in &r.deltas {
                    worst = worst.max(d.change());
                    blocks += 1;
                }
            }
        }
        (worst <= slack, format!("{blocks} block updates, largest increase {worst:.2e} (slack {slack:.0e})"))
    })
}

/// At feed-forward activations the lifted and standard objectives agree.
pub fn check_feasible_equality() -> CheckOutcome {
    timed("lifted-equals-standard", || {
        let mut worst: f64 = 0.0;
        for seed in 0..20u64 {
            let loss = if seed % 2 == 0 { LossKind::Mse } else { LossKind::CrossEntropy };
            let (spec, ds) = random_task(300 + seed, &[5, 7, 6, 3], loss, 25);
            let w = Weights::init(&spec, seed);
            let h = Hyperparams { lambda: 3.0, ..Hyperparams::non_batched(&spec) };
            let s = LiftedState::feed_forward(&spec, &w, ds.inputs.clone(), ds.labels.clone()).expect("shapes");
            let a = lifted_objective(&spec, &w, &s, &h, None).expect("shapes");
            let b = standard_objective(&spec, &w, ds.inputs.view(), ds.labels.view(), &h.rho).expect("shapes");
            worst = worst.max((a - b).abs() / b.abs().max(f64::MIN_POSITIVE));
        }
        (worst <= 1e-10, format!("max rel gap {worst:.2e}"))
    })
}

/// `min_{z ≥ 0} ½ zᵀQz + bᵀz` by trying every active set.
pub fn box_qp_by_enumeration(q: &Array2<f64>, b: &Array1<f64>) -> f64 {
    let n = b.len();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        let free: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let k = free.len();
        let mut z = Array1::<f64>::zeros(n);
        if k > 0 {
            let mut m = Array2::<f64>::zeros((k, k + 1));
            for (a, &i) in free.iter().enumerate() {
                for (c, &j) in free.iter().enumerate() {
                    m[[a, c]] = q[[i, j]];
                }
                m[[a, k]] = -b[i];
            }
            for col in 0..k {
                let piv = (col..k).max_by(|&x, &y| m[[x, col]].abs().total_cmp(&m[[y, col]].abs())).expect("nonempty");
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
            best = best.min(0.5 * z.dot(&q.dot(&z)) + b.dot(&z));
        }
    }
    best
}

/// Last-layer NNLS against exhaustive enumeration on 100 random instances
/// with at most five rows.
pub fn check_nnls() -> CheckOutcome {
    timed("nnls-vs-enumeration", || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut worst: f64 = 0.0;
        let cfg = ProjGradConfig::new(1e-11, 100_000);
        for _ in 0..100 {
            let rows = rng.random_range(1..=5);
            let out = rng.random_range(1..=4);
            let cols = rng.random_range(1..=4);
            let lambda = rng.random_range(0.1..5.0);
            let w = Array2::from_shape_fn((out, rows + 1), |_| rng.random_range(-2.0..2.0));
            let y = Array2::from_shape_fn((out, cols), |_| rng.random_range(-2.0..2.0));
            let u = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-2.0..2.0));
            let r = solve_x_last_mse(w.view(), y.view(), u.view(), lambda, Array2::zeros((rows, cols)).view(), &cfg).expect("shapes");
            // expand ‖y − W̃z − b‖² + (λ/2)‖z − u‖² per column into ½zᵀQz + qᵀz + c
            let wt = w.slice(ndarray::s![.., ..rows]).to_owned();
            let bias = w.column(rows).to_owned();
            let q = wt.t().dot(&wt) * 2.0 + Array2::<f64>::eye(rows) * lambda;
            let mut oracle = 0.0;
            for j in 0..cols {
                let resid = &y.column(j) - &bias;
                let lin = -(wt.t().dot(&resid) * 2.0) - &(u.column(j).to_owned() * lambda);
                let constant = resid.dot(&resid) + 0.5 * lambda * u.column(j).dot(&u.column(j));
                oracle += box_qp_by_enumeration(&q, &lin) + constant;
            }
            worst = worst.max((r.objective - oracle).abs());
        }
        (worst <= 1e-8, format!("max objective gap {worst:.2e} over 100 instances"))
    })
}

/// Batched training with `γ = 0` and one full batch repeats the first full
/// alternation bit for bit.
pub fn check_batched_reduction() -> CheckOutcome {
    timed("batched-reduces-to-full", || {
        let mut mismatches = Vec::new();
        for (seed, loss) in [(400u64, LossKind::Mse), (401, LossKind::CrossEntropy)] {
            let (spec, ds) = random_task(seed, &[4, 6, 5, 3], loss, 30);
            let mut h = Hyperparams::non_batched(&spec);
            h.outer_max_iters = 1;
            h.outer_rel_tol = 0.0;
            let hb = Hyperparams { gamma: vec![0.0; spec.hidden_layers() + 1], batch_size: ds.len(), alternations: 1, epochs: 1, ..h.clone() };
            let opts = TrainOptions { track_blocks: true, ..TrainOptions::default() };
            let (wf, rf) = train_full(&spec, &ds, &h, &opts).expect("runs");
            let (wb, rb) = train_batched(&spec, &ds, &hb, &opts).expect("runs");
            let same_deltas = rf.records[0].deltas.iter().zip(&rb.records[0].deltas).all(|(a, b)| {
                a.block == b.block && a.before.to_bits() == b.before.to_bits() && a.after.to_bits() == b.after.to_bits()
            });
            let same_w = wf.mats.iter().zip(&wb.mats).all(|(a, b)| a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
            if !(same_deltas && same_w && rf.trace == rb.trace) {
                mismatches.push(format!("{loss:?}"));
            }
        }
        (mismatches.is_empty(), if mismatches.is_empty() { "bit-identical".into() } else { format!("differs for {mismatches:?}") })
    })
}

/// Single-alternation smoke test of the trace order.
pub fn check_update_order() -> CheckOutcome {
    timed("update-order", || {
        let (spec, ds) = random_task(500, &[3, 4, 4, 4, 2], LossKind::Mse, 10);
        let h = Hyperparams::non_batched(&spec);
        let mut w = Weights::init(&spec, 0);
        let mut s = LiftedState::feed_forward(&spec, &w, ds.inputs.clone(), ds.labels.clone()).expect("shapes");
        let mut rep = TrainReport::default();
        alternate(&spec, &mut w, &mut s, &h, None, false, &mut rep).expect("runs");
        let expect = block_order(3);
        let names: Vec<String> = rep.trace.iter().map(ToString::to_string).collect();
        (rep.trace == expect, names.join(" "))
    })
}

/// The whole suite with the given divergence gradient.
pub fn run_all_with(grad: GradFn) -> Vec<CheckOutcome> {
    vec![
        check_fenchel_young(100_000),
        check_divergence_gradients(grad, 2_000),
        check_backprop_gradients(),
        check_homogeneity(10_000),
        check_scaling(),
        check_monotone_descent(),
        check_feasible_equality(),
        check_nnls(),
        check_batched_reduction(),
        check_update_order(),
    ]
}

pub fn run_all() -> Vec<CheckOutcome> {
    run_all_with(reference_gradient)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flipped_gradient_is_caught() {
        assert!(check_divergence_gradients(reference_gradient, 200).passed);
        assert!(!check_divergence_gradients(flipped_relu_gradient, 200).passed);
    }

    #[test]
    fn enumeration_oracle_on_a_diagonal_problem() {
        let q = Array2::<f64>::eye(2);
        let b = ndarray::array![-1.0, 2.0];
        assert!((box_qp_by_enumeration(&q, &b) + 0.5).abs() < 1e-15);
    }
}

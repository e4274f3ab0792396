//! Backpropagation baseline on the same network and objective.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::bcd::{Record, TrainOptions, TrainReport};
use crate::data::{batches, Dataset};
use crate::divergence::{sigmoid, ActivationKind};
use crate::error::{Error, Result};
use crate::network::{
    accuracy, accuracy_of, argmax_columns, augment, feed_forward, loss_value, softmax, weight_penalty, LossKind,
    NetworkSpec, Weights,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    Adam,
}

impl Optimizer {
    pub fn name(self) -> &'static str {
        match self {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        }
    }

    pub fn default_learning_rate(self) -> f64 {
        match self {
            Optimizer::Sgd => 1e-2,
            Optimizer::Adam => 1e-3,
        }
    }
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" => Ok(Optimizer::Adam),
            other => Err(Error::Spec(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `ρ_l`, multiplies `‖W_l‖²` in the per-batch objective.
    pub rho: Vec<f64>,
}

impl SgdConfig {
    pub fn new(spec: &NetworkSpec, optimizer: Optimizer) -> Self {
        Self {
            optimizer,
            learning_rate: optimizer.default_learning_rate(),
            epochs: 10,
            batch_size: 500,
            seed: 0,
            rho: vec![0.0; spec.hidden_layers() + 1],
        }
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Hyperparams(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Hyperparams("epochs and batch_size must be positive".into()));
        }
        if self.rho.len() != spec.hidden_layers() + 1 || self.rho.iter().any(|r| !(*r >= 0.0)) {
            return Err(Error::Hyperparams(format!("rho needs {} nonnegative entries", spec.hidden_layers() + 1)));
        }
        Ok(())
    }
}

/// Derivative of the feed-forward activation of `kind` at `u`.
fn activation_slope(kind: ActivationKind, u: f64) -> f64 {
    match kind {
        ActivationKind::Sigmoid => {
            let s = sigmoid(u);
            s * (1.0 - s)
        }
        _ => {
            if u > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Gradient of `ℒ(Y, f(X)) + Σ ρ_l‖W_l‖²` with respect to every `W_l`.
pub fn backprop_gradient(
    spec: &NetworkSpec,
    w: &Weights,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    rho: &[f64],
) -> Result<Vec<Array2<f64>>> {
    let fwd = feed_forward(spec, w, x)?;
    if y.dim() != fwd.prediction.dim() {
        return Err(Error::Shape(format!("labels {:?} vs predictions {:?}", y.dim(), fwd.prediction.dim())));
    }
    let layers = spec.hidden_layers();
    let mut delta = match spec.loss() {
        LossKind::Mse => (&fwd.prediction - &y) * 2.0,
        LossKind::CrossEntropy => softmax(fwd.prediction.view()) - &y,
    };
    let mut grads = vec![Array2::zeros((0, 0)); layers + 1];
    for l in (0..=layers).rev() {
        let input = if l == 0 { x.view() } else { fwd.hidden[l - 1].view() };
        let mut g = delta.dot(&augment(input).t());
        if rho[l] != 0.0 {
            g.scaled_add(2.0 * rho[l], &w.mats[l]);
        }
        grads[l] = g;
        if l > 0 {
            let p = w.mats[l].ncols() - 1;
            let mut back = w.mats[l].slice(s![.., ..p]).t().dot(&delta);
            let kind = spec.activation(l - 1);
            Zip::from(&mut back).and(&fwd.pre[l - 1]).for_each(|b, &u| *b *= activation_slope(kind, u));
            delta = back;
        }
    }
    Ok(grads)
}

struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Adam {
    fn new(w: &Weights) -> Self {
        let zeros = || w.mats.iter().map(|m| Array2::zeros(m.dim())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }

    fn step(&mut self, w: &mut Weights, grads: &[Array2<f64>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (((wm, g), m), v) in w.mats.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(wm).and(g).and(m).and(v).for_each(|w, &g, m, v| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            });
        }
    }
}

/// Minibatch training of `(1/|B|) ℒ_B + Σ ρ_l‖W_l‖²` over seeded epoch
/// shuffles, with the same batching and report rows as the lifted trainer.
pub fn train_baseline(spec: &NetworkSpec, data: &Dataset, cfg: &SgdConfig, opts: &TrainOptions<'_>) -> Result<(Weights, TrainReport)> {
    cfg.check(spec)?;
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut w = match &opts.init {
        Some(w) => {
            w.check(spec)?;
            w.clone()
        }
        None => Weights::init(spec, cfg.seed),
    };
    let zero_rho = vec![0.0; cfg.rho.len()];
    let mut adam = Adam::new(&w);
    let mut report = TrainReport::default();
    let every = opts.eval_every.max(1);
    let clock = Instant::now();
    let mut eval_time = 0.0;
    for epoch in 0..cfg.epochs {
        let order = batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        let count = order.len();
        for (b, idx) in order.iter().enumerate() {
            let x = data.inputs.select(Axis(1), idx);
            let y = data.labels.select(Axis(1), idx);
            let mut grads = backprop_gradient(spec, &w, x.view(), y.view(), &zero_rho)?;
            let scale = 1.0 / idx.len() as f64;
            for ((g, m), &r) in grads.iter_mut().zip(&w.mats).zip(&cfg.rho) {
                g.mapv_inplace(|v| v * scale);
                if r != 0.0 {
                    g.scaled_add(2.0 * r, m);
                }
            }
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (m, g) in w.mats.iter_mut().zip(&grads) {
                        m.scaled_add(-cfg.learning_rate, g);
                    }
                }
                Optimizer::Adam => adam.step(&mut w, &grads, cfg.learning_rate),
            }
            let trained = clock.elapsed().as_secs_f64() - eval_time;
            let eval_start = Instant::now();
            let fwd = feed_forward(spec, &w, x.view())?;
            let standard = loss_value(spec.loss(), fwd.prediction.view(), y.view())? + weight_penalty(&w, &cfg.rho);
            if !standard.is_finite() {
                return Err(Error::Diverged(format!(
                    "{} objective became {standard} in epoch {epoch}, batch {b}",
                    cfg.optimizer
                )));
            }
            let classes: Vec<usize> = idx.iter().map(|&i| data.classes[i]).collect();
            let train_acc = accuracy_of(&argmax_columns(fwd.prediction.view()), &classes);
            let last = b + 1 == count;
            let test_acc = match opts.test {
                Some(t) if (b + 1) % every == 0 || last => Some(accuracy(spec, &w, t.inputs.view(), &t.classes)?),
                _ => None,
            };
            eval_time += eval_start.elapsed().as_secs_f64();
            report.records.push(Record {
                epoch,
                batch: b,
                epoch_fraction: epoch as f64 + (b + 1) as f64 / count as f64,
                lifted: f64::NAN,
                standard,
                train_acc,
                test_acc,
                seconds: trained,
                deltas: Vec::new(),
            });
        }
    }
    Ok((w, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::network::standard_objective;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn finite_difference_check(spec: &NetworkSpec, seed: u64, rho: f64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = 7;
        let x = Array2::from_shape_fn((spec.input_dim(), m), |_| rng.random_range(-1.0..1.0));
        let y = match spec.loss() {
            LossKind::Mse => Array2::from_shape_fn((spec.output_dim(), m), |_| rng.random_range(-1.0..1.0)),
            LossKind::CrossEntropy => {
                let labels: Vec<usize> = (0..m).map(|_| rng.random_range(0..spec.output_dim())).collect();
                crate::network::one_hot(&labels, spec.output_dim())
            }
        };
        let w = Weights::init(spec, seed);
        let rho = vec![rho; spec.hidden_layers() + 1];
        let grads = backprop_gradient(spec, &w, x.view(), y.view(), &rho).unwrap();
        let f = |w: &Weights| standard_objective(spec, w, x.view(), y.view(), &rho).unwrap();
        let mut worst: f64 = 0.0;
        let h = 1e-6;
        for l in 0..w.mats.len() {
            for idx in 0..w.mats[l].len() {
                let (r, c) = (idx / w.mats[l].ncols(), idx % w.mats[l].ncols());
                let mut plus = w.clone();
                plus.mats[l][[r, c]] += h;
                let mut minus = w.clone();
                minus.mats[l][[r, c]] -= h;
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let g = grads[l][[r, c]];
                let rel = (fd - g).abs() / (fd.abs() + g.abs()).max(1e-3);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for kind in ActivationKind::ALL {
            for loss in [LossKind::Mse, LossKind::CrossEntropy] {
                if loss == LossKind::CrossEntropy && !kind.is_exact() {
                    continue;
                }
                let spec = NetworkSpec::uniform(vec![2, 3, 2], kind, loss).unwrap();
                let err = finite_difference_check(&spec, 3, 0.1);
                assert!(err < 1e-5, "{kind} {loss:?}: {err}");
                let deep = NetworkSpec::uniform(vec![3, 4, 3, 2], kind, loss).unwrap();
                assert!(finite_difference_check(&deep, 4, 0.0) < 1e-5);
            }
        }
    }

    #[test]
    fn zero_loss_point_and_penalty_only() {
        let spec = NetworkSpec::uniform(vec![2, 3, 2], ActivationKind::Relu, LossKind::Mse).unwrap();
        let w = Weights::init(&spec, 1);
        let x = Array2::from_shape_fn((2, 5), |(i, j)| (i + j) as f64 * 0.1);
        let y = feed_forward(&spec, &w, x.view()).unwrap().prediction;
        let g = backprop_gradient(&spec, &w, x.view(), y.view(), &[0.0, 0.0]).unwrap();
        assert!(g.iter().flat_map(|m| m.iter()).map(|v| v * v).sum::<f64>().sqrt() <= 1e-10);
        let g = backprop_gradient(&spec, &w, x.view(), y.view(), &[0.3, 0.7]).unwrap();
        for (l, (gm, wm)) in g.iter().zip(&w.mats).enumerate() {
            let expect = wm * (2.0 * [0.3, 0.7][l]);
            assert!(gm.iter().zip(expect.iter()).all(|(a, b)| (a - b).abs() <= 1e-12));
        }
    }

    #[test]
    fn linear_neuron_fits_exact_data() {
        // one hidden ReLU unit fed by a positive input is linear on the data
        let spec = NetworkSpec::uniform(vec![1, 1, 1], ActivationKind::Relu, LossKind::Mse).unwrap();
        let x = Array2::from_shape_fn((1, 20), |(_, j)| 0.5 + j as f64 / 20.0);
        let y = x.mapv(|v| 2.0 * v + 0.5);
        let mut ds = Dataset::new(x, vec![0; 20], 1, Split::Train).unwrap();
        ds.labels = y;
        let mut cfg = SgdConfig::new(&spec, Optimizer::Adam);
        cfg.learning_rate = 1e-2;
        cfg.epochs = 3000;
        cfg.batch_size = 20;
        let init = Weights { mats: vec![ndarray::array![[1.0, 0.1]], ndarray::array![[1.0, 0.0]]] };
        let opts = TrainOptions { init: Some(init), ..TrainOptions::default() };
        let (_, rep) = train_baseline(&spec, &ds, &cfg, &opts).unwrap();
        assert!(rep.records.last().unwrap().standard < 1e-8, "{}", rep.records.last().unwrap().standard);
    }

    #[test]
    fn divergence_is_reported() {
        let spec = NetworkSpec::uniform(vec![1, 4, 1], ActivationKind::Relu, LossKind::Mse).unwrap();
        let x = Array2::from_elem((1, 8), 10.0);
        let mut ds = Dataset::new(x, vec![0; 8], 1, Split::Train).unwrap();
        ds.labels = Array2::from_elem((1, 8), 100.0);
        let mut cfg = SgdConfig::new(&spec, Optimizer::Sgd);
        cfg.learning_rate = 10.0;
        cfg.epochs = 200;
        let err = train_baseline(&spec, &ds, &cfg, &TrainOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Diverged(_)));
    }

    #[test]
    fn optimizer_names() {
        assert_eq!("Adam".parse::<Optimizer>().unwrap(), Optimizer::Adam);
        assert!("rmsprop".parse::<Optimizer>().is_err());
        assert_eq!(Optimizer::Sgd.default_learning_rate(), 1e-2);
    }
}

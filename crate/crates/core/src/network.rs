//! Architecture, containers and objectives shared by the lifted trainer and
//! the backpropagation baseline.
//!
//! Layer indexing follows the recursion `X_{l+1} = φ_l(W_l X_l)`: `X_0` is the
//! input, `X_1..X_L` are hidden activations and `W_L` maps `X_L` to the
//! output scores. Every weight matrix carries its bias as a final column that
//! acts on an implicit row of ones.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::divergence::{matrix_divergence, ActivationKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LossKind {
    /// `‖Y − Ŷ‖²_F`
    Mse,
    /// `−Tr Yᵀ log softmax(Ŷ)`, softmax taken per column.
    CrossEntropy,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::CrossEntropy => "ce",
        }
    }

    pub fn tag(self) -> u8 {
        match self {
            LossKind::Mse => 0,
            LossKind::CrossEntropy => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(LossKind::Mse),
            1 => Some(LossKind::CrossEntropy),
            _ => None,
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(LossKind::Mse),
            "ce" | "cross-entropy" | "crossentropy" => Ok(LossKind::CrossEntropy),
            other => Err(Error::Spec(format!("unknown loss `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    /// `p_0 = n, p_1, …, p_L, p_{L+1} = p`
    widths: Vec<usize>,
    /// `φ_0 … φ_{L−1}`
    activations: Vec<ActivationKind>,
    loss: LossKind,
}

impl NetworkSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<ActivationKind>, loss: LossKind) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::Spec(format!(
                "need at least one hidden layer, got widths {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::Spec(format!("layer widths must be positive: {widths:?}")));
        }
        if activations.len() != widths.len() - 2 {
            return Err(Error::Spec(format!(
                "{} hidden layers need {} activations, got {}",
                widths.len() - 2,
                widths.len() - 2,
                activations.len()
            )));
        }
        if loss == LossKind::CrossEntropy {
            let last = *activations.last().expect("non-empty");
            if !last.is_exact() {
                return Err(Error::Spec(format!(
                    "cross-entropy needs a relu or sigmoid layer before the output, got {last}"
                )));
            }
        }
        Ok(Self { widths, activations, loss })
    }

    /// All hidden layers share one activation.
    pub fn uniform(widths: Vec<usize>, activation: ActivationKind, loss: LossKind) -> Result<Self> {
        let hidden = widths.len().saturating_sub(2);
        Self::new(widths, vec![activation; hidden], loss)
    }

    /// Parses an architecture string such as `784-300-10`.
    pub fn parse_arch(arch: &str) -> Result<Vec<usize>> {
        arch.split(['-', 'x', ','])
            .map(|t| {
                t.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Spec(format!("bad layer width `{t}` in `{arch}`")))
            })
            .collect()
    }

    pub fn arch_string(&self) -> String {
        self.widths.iter().map(|w| w.to_string()).collect::<Vec<_>>().join("-")
    }

    /// Number of hidden layers `L`.
    pub fn hidden_layers(&self) -> usize {
        self.activations.len()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[ActivationKind] {
        &self.activations
    }

    pub fn activation(&self, l: usize) -> ActivationKind {
        self.activations[l]
    }

    pub fn loss(&self) -> LossKind {
        self.loss
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    /// Shape of `W_l`.
    pub fn weight_shape(&self, l: usize) -> (usize, usize) {
        (self.widths[l + 1], self.widths[l] + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub mats: Vec<Array2<f64>>,
}

impl Weights {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        let mats = (0..=spec.hidden_layers())
            .map(|l| Array2::zeros(spec.weight_shape(l)))
            .collect();
        Self { mats }
    }

    /// Gaussian entries with standard deviation `sqrt(2 / fan_in)`, zero bias.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mats = (0..=spec.hidden_layers())
            .map(|l| {
                let (rows, cols) = spec.weight_shape(l);
                let fan_in = cols - 1;
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                let mut w = Array2::zeros((rows, cols));
                for i in 0..rows {
                    for j in 0..fan_in {
                        w[[i, j]] = normal.sample(&mut rng);
                    }
                }
                w
            })
            .collect();
        Self { mats }
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        if self.mats.len() != spec.hidden_layers() + 1 {
            return Err(Error::Shape(format!(
                "expected {} weight matrices, got {}",
                spec.hidden_layers() + 1,
                self.mats.len()
            )));
        }
        for (l, w) in self.mats.iter().enumerate() {
            if w.dim() != spec.weight_shape(l) {
                return Err(Error::Shape(format!(
                    "W_{l} is {:?}, expected {:?}",
                    w.dim(),
                    spec.weight_shape(l)
                )));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Diverged(format!("W_{l} has non-finite entries")));
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> usize {
        self.mats.len()
    }

    pub fn max_abs_diff(&self, other: &Weights) -> f64 {
        self.mats
            .iter()
            .zip(&other.mats)
            .flat_map(|(a, b)| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// X-variables for one block of data.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedState {
    /// `X_1 … X_L`, `acts[l - 1]` has shape `p_l × m`.
    pub acts: Vec<Array2<f64>>,
    /// `X_0`, `n × m`
    pub input: Array2<f64>,
    /// `Y`, `p × m`
    pub labels: Array2<f64>,
}

impl LiftedState {
    /// Feed-forward initialisation: every divergence term vanishes.
    pub fn feed_forward(spec: &NetworkSpec, w: &Weights, input: Array2<f64>, labels: Array2<f64>) -> Result<Self> {
        let fwd = feed_forward(spec, w, input.view())?;
        Ok(Self { acts: fwd.hidden, input, labels })
    }

    /// `X_l` for `l = 0..=L`.
    pub fn x(&self, l: usize) -> ArrayView2<'_, f64> {
        if l == 0 {
            self.input.view()
        } else {
            self.acts[l - 1].view()
        }
    }

    pub fn columns(&self) -> usize {
        self.input.ncols()
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let m = self.columns();
        if self.input.nrows() != spec.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} rows, expected {}",
                self.input.nrows(),
                spec.input_dim()
            )));
        }
        if self.labels.dim() != (spec.output_dim(), m) {
            return Err(Error::Shape(format!(
                "labels are {:?}, expected {:?}",
                self.labels.dim(),
                (spec.output_dim(), m)
            )));
        }
        if self.acts.len() != spec.hidden_layers() {
            return Err(Error::Shape(format!(
                "expected {} activation blocks, got {}",
                spec.hidden_layers(),
                self.acts.len()
            )));
        }
        for (i, a) in self.acts.iter().enumerate() {
            if a.dim() != (spec.widths()[i + 1], m) {
                return Err(Error::Shape(format!(
                    "X_{} is {:?}, expected {:?}",
                    i + 1,
                    a.dim(),
                    (spec.widths()[i + 1], m)
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    /// Weight of the divergence penalties.
    pub lambda: f64,
    /// `ρ_0 … ρ_L`, multiplies `‖W_l‖²_F`.
    pub rho: Vec<f64>,
    /// `γ_0 … γ_L`, proximal weights between consecutive batches.
    pub gamma: Vec<f64>,
    pub batch_size: usize,
    /// Alternations per batch.
    pub alternations: usize,
    pub epochs: usize,
    pub inner_tol: f64,
    pub inner_max_iters: usize,
    /// Alternation cap for the non-batched trainer.
    pub outer_max_iters: usize,
    /// Relative objective change that stops the non-batched trainer.
    pub outer_rel_tol: f64,
    /// Caps the iterations of every W-subproblem when set.
    pub w_steps: Option<usize>,
    pub seed: u64,
}

impl Hyperparams {
    /// Defaults for full-data training: `λ = 10`, `ρ = 1e-4`.
    pub fn non_batched(spec: &NetworkSpec) -> Self {
        let layers = spec.hidden_layers() + 1;
        Self {
            lambda: 10.0,
            rho: vec![1e-4; layers],
            gamma: vec![0.0; layers],
            batch_size: usize::MAX,
            alternations: 1,
            epochs: 1,
            inner_tol: 1e-4,
            inner_max_iters: 200,
            outer_max_iters: 50,
            outer_rel_tol: 1e-6,
            w_steps: None,
            seed: 0,
        }
    }

    /// Defaults for batched training: `λ = 10`, `ρ = 0`, `γ = 1`, batches of
    /// 500 and one alternation per batch.
    pub fn batched(spec: &NetworkSpec) -> Self {
        let layers = spec.hidden_layers() + 1;
        Self {
            rho: vec![0.0; layers],
            gamma: vec![1.0; layers],
            batch_size: 500,
            epochs: 10,
            ..Self::non_batched(spec)
        }
    }

    pub fn check(&self, spec: &NetworkSpec) -> Result<()> {
        let layers = spec.hidden_layers() + 1;
        let bad = |msg: String| Err(Error::Hyperparams(msg));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be a nonnegative number, got {}", self.lambda));
        }
        if self.rho.len() != layers || self.rho.iter().any(|r| !(*r >= 0.0)) {
            return bad(format!("rho needs {layers} nonnegative entries, got {:?}", self.rho));
        }
        if self.gamma.len() != layers || self.gamma.iter().any(|g| !(*g >= 0.0)) {
            return bad(format!("gamma needs {layers} nonnegative entries, got {:?}", self.gamma));
        }
        if self.batch_size == 0 || self.alternations == 0 || self.epochs == 0 {
            return bad("batch_size, alternations and epochs must be positive".into());
        }
        if !(self.inner_tol > 0.0) || self.inner_max_iters == 0 || self.outer_max_iters == 0 {
            return bad("solver tolerances and iteration caps must be positive".into());
        }
        if self.w_steps == Some(0) {
            return bad("w_steps must be at least 1".into());
        }
        Ok(())
    }
}

/// Appends a row of ones.
pub fn augment(x: ArrayView2<f64>) -> Array2<f64> {
    let (p, m) = x.dim();
    let mut out = Array2::ones((p + 1, m));
    out.slice_mut(s![..p, ..]).assign(&x);
    out
}

/// `W · augment(X)` without materialising the augmented matrix.
pub fn affine(w: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let p = x.nrows();
    if w.ncols() != p + 1 {
        return Err(Error::Shape(format!(
            "weight {:?} cannot act on input with {p} rows",
            w.dim()
        )));
    }
    let mut out = w.slice(s![.., ..p]).dot(&x);
    let bias = w.column(p);
    for mut col in out.axis_iter_mut(Axis(1)) {
        col += &bias;
    }
    Ok(out)
}

/// Column-wise softmax.
pub fn softmax(scores: ArrayView2<f64>) -> Array2<f64> {
    let mut out = scores.to_owned();
    for mut col in out.axis_iter_mut(Axis(1)) {
        let max = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        col.mapv_inplace(|v| (v - max).exp());
        let sum = col.sum();
        col /= sum;
    }
    out
}

#[derive(Debug, Clone)]
pub struct Forward {
    /// Pre-activations `W_l X_l`, `l = 0..L-1`.
    pub pre: Vec<Array2<f64>>,
    /// `X_1 … X_L`
    pub hidden: Vec<Array2<f64>>,
    /// `W_L X_L`; raw scores for cross-entropy.
    pub prediction: Array2<f64>,
}

pub fn feed_forward(spec: &NetworkSpec, w: &Weights, x: ArrayView2<f64>) -> Result<Forward> {
    w.check(spec)?;
    if x.nrows() != spec.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} rows, network expects {}",
            x.nrows(),
            spec.input_dim()
        )));
    }
    let layers = spec.hidden_layers();
    let mut pre = Vec::with_capacity(layers);
    let mut hidden: Vec<Array2<f64>> = Vec::with_capacity(layers);
    for l in 0..layers {
        let u = match hidden.last() {
            None => affine(w.mats[l].view(), x)?,
            Some(prev) => affine(w.mats[l].view(), prev.view())?,
        };
        let kind = spec.activation(l);
        hidden.push(u.mapv(|v| kind.activate(v)));
        pre.push(u);
    }
    let prediction = affine(w.mats[layers].view(), hidden[layers - 1].view())?;
    Ok(Forward { pre, hidden, prediction })
}

pub fn loss_value(loss: LossKind, prediction: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    if prediction.dim() != y.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs labels {:?}",
            prediction.dim(),
            y.dim()
        )));
    }
    Ok(match loss {
        LossKind::Mse => {
            let mut acc = 0.0;
            Zip::from(&prediction).and(&y).for_each(|&a, &b| acc += (a - b) * (a - b));
            acc
        }
        LossKind::CrossEntropy => {
            let mut acc = 0.0;
            for (col, ycol) in prediction.axis_iter(Axis(1)).zip(y.axis_iter(Axis(1))) {
                let max = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                let lse = max + col.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                for (s, t) in col.iter().zip(ycol.iter()) {
                    if *t != 0.0 {
                        acc -= t * (s - lse);
                    }
                }
            }
            acc
        }
    })
}

fn frob_sq(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum()
}

fn frob_dist_sq(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut acc = 0.0;
    Zip::from(&a).and(&b).for_each(|&x, &y| acc += (x - y) * (x - y));
    acc
}

/// `Σ_l ρ_l ‖W_l‖²_F`
pub fn weight_penalty(w: &Weights, rho: &[f64]) -> f64 {
    w.mats
        .iter()
        .zip(rho)
        .filter(|(_, r)| **r != 0.0)
        .map(|(m, r)| r * frob_sq(m.view()))
        .sum()
}

/// The single-λ lifted objective; with `prev` the proximal terms
/// `Σ γ_l ‖W_l − W_l⁰‖²` of the batched model are added.
pub fn lifted_objective(
    spec: &NetworkSpec,
    w: &Weights,
    s: &LiftedState,
    h: &Hyperparams,
    prev: Option<&Weights>,
) -> Result<f64> {
    w.check(spec)?;
    s.check(spec)?;
    let layers = spec.hidden_layers();
    let scores = affine(w.mats[layers].view(), s.x(layers))?;
    let mut total = loss_value(spec.loss(), scores.view(), s.labels.view())?;
    total += weight_penalty(w, &h.rho);
    if h.lambda != 0.0 {
        for l in 0..layers {
            let u = affine(w.mats[l].view(), s.x(l))?;
            let b = matrix_divergence(spec.activation(l), s.x(l + 1), u.view())?;
            total += h.lambda * b;
        }
    }
    if let Some(prev) = prev {
        for (l, (cur, old)) in w.mats.iter().zip(&prev.mats).enumerate() {
            let g = h.gamma[l];
            if g != 0.0 {
                total += g * frob_dist_sq(cur.view(), old.view());
            }
        }
    }
    Ok(total)
}

/// Loss of the feed-forward prediction plus the weight penalty.
pub fn standard_objective(
    spec: &NetworkSpec,
    w: &Weights,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    rho: &[f64],
) -> Result<f64> {
    let fwd = feed_forward(spec, w, x)?;
    Ok(loss_value(spec.loss(), fwd.prediction.view(), y)? + weight_penalty(w, rho))
}

/// Per-column argmax; ties go to the lowest index.
pub fn argmax_columns(scores: ArrayView2<f64>) -> Vec<usize> {
    scores
        .axis_iter(Axis(1))
        .map(|col| {
            let mut best = 0;
            for (i, &v) in col.iter().enumerate() {
                if v > col[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub fn predict(spec: &NetworkSpec, w: &Weights, x: ArrayView2<f64>) -> Result<Vec<usize>> {
    let fwd = feed_forward(spec, w, x)?;
    Ok(argmax_columns(fwd.prediction.view()))
}

/// Fraction of columns whose predicted class matches `labels`.
pub fn accuracy(spec: &NetworkSpec, w: &Weights, x: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let pred = predict(spec, w, x)?;
    Ok(accuracy_of(&pred, labels))
}

pub fn accuracy_of(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// One-hot columns for class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> Array2<f64> {
    let mut y = Array2::zeros((classes, labels.len()));
    for (j, &c) in labels.iter().enumerate() {
        y[[c, j]] = 1.0;
    }
    y
}

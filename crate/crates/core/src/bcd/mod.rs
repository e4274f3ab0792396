//! Block-coordinate descent over the lifted objective.
//!
//! One alternation visits `X_L, X_{L-1}, …, X_1` and then
//! `W_L, W_{L-1}, …, W_0`, solving each block subproblem with everything
//! else held fixed. [`train_full`] alternates on the whole dataset until the
//! objective stalls; [`train_batched`] runs a few alternations per batch with
//! a proximal pull towards the weights left by the previous batch.

use std::collections::BTreeMap;
use std::fmt;
use std::time::Instant;

use ndarray::ArrayView2;

use crate::data::{batches, Dataset};
use crate::divergence::matrix_divergence;
use crate::error::{Error, Result};
use crate::network::{
    accuracy, affine, argmax_columns, accuracy_of, feed_forward, lifted_objective, loss_value, weight_penalty,
    Hyperparams, LiftedState, NetworkSpec, Weights,
};
use crate::solvers::{
    solve_w, solve_w_prox, solve_x_intermediate, solve_x_last, ProjGradConfig, Proximal, SolveResult, WBlock,
};

pub mod scaling;

pub use scaling::{multi_lambda_objective, scale_to_single_lambda, scaled_objective, unscale, ScaledProblem, ScalingProfile};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BlockId {
    /// `X_l`, `1 ≤ l ≤ L`
    X(usize),
    /// `W_l`, `0 ≤ l ≤ L`
    W(usize),
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockId::X(l) => write!(f, "X{l}"),
            BlockId::W(l) => write!(f, "W{l}"),
        }
    }
}

/// The blocks of one alternation in the order they are visited.
pub fn block_order(layers: usize) -> Vec<BlockId> {
    (1..=layers).rev().map(BlockId::X).chain((0..=layers).rev().map(BlockId::W)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlockDelta {
    pub block: BlockId,
    pub before: f64,
    pub after: f64,
}

impl BlockDelta {
    pub fn change(&self) -> f64 {
        self.after - self.before
    }
}

/// One row of training history: an alternation in full mode or a batch in
/// batched mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub epoch: usize,
    /// Batch index within the epoch; always 0 in full mode, where `epoch`
    /// counts alternations.
    pub batch: usize,
    /// Epochs completed so far, fractional within an epoch.
    pub epoch_fraction: f64,
    /// Lifted objective on the block of data trained on.
    pub lifted: f64,
    /// Standard objective on the same data with feed-forward activations.
    pub standard: f64,
    pub train_acc: f64,
    /// Evaluated every `eval_every` batches and at the end of every epoch.
    pub test_acc: Option<f64>,
    /// Training time since the start, evaluation excluded.
    pub seconds: f64,
    /// Filled when block tracking is enabled.
    pub deltas: Vec<BlockDelta>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub records: Vec<Record>,
    /// Every block solved, in order.
    pub trace: Vec<BlockId>,
    pub warnings: Vec<String>,
    /// Subproblems that stopped at their iteration cap, per block.
    pub unconverged: BTreeMap<BlockId, usize>,
    /// Full mode stopped on the relative-change test.
    pub converged: bool,
    /// Alternations that started from the feed-forward activations.
    pub restarts: usize,
}

impl TrainReport {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.test_acc)
    }

    pub fn final_lifted(&self) -> Option<f64> {
        self.records.last().map(|r| r.lifted)
    }

    fn note_unconverged(&mut self, block: BlockId) {
        *self.unconverged.entry(block).or_default() += 1;
    }

    fn summarize(&mut self) {
        for (block, n) in &self.unconverged {
            self.warnings.push(format!("{block}: {n} subproblem(s) hit the iteration cap"));
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions<'a> {
    pub test: Option<&'a Dataset>,
    /// Batches between test evaluations in batched mode.
    pub eval_every: usize,
    /// Evaluate the lifted objective after every block.
    pub track_blocks: bool,
    /// Starting weights instead of the seeded initialisation.
    pub init: Option<Weights>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self { test: None, eval_every: 10, track_blocks: false, init: None }
    }
}

impl<'a> TrainOptions<'a> {
    pub fn with_test(test: &'a Dataset) -> Self {
        Self { test: Some(test), ..Self::default() }
    }
}

fn x_config(h: &Hyperparams) -> ProjGradConfig {
    ProjGradConfig::new(h.inner_tol, h.inner_max_iters)
}

fn w_config(h: &Hyperparams) -> ProjGradConfig {
    x_config(h).capped(h.w_steps)
}

/// Solves block `block` in place.
fn update_block(
    spec: &NetworkSpec,
    w: &mut Weights,
    s: &mut LiftedState,
    h: &Hyperparams,
    prev: Option<&Weights>,
    block: BlockId,
) -> Result<SolveResult> {
    let layers = spec.hidden_layers();
    let r = match block {
        BlockId::X(l) => {
            let u_prev = affine(w.mats[l - 1].view(), s.x(l - 1))?;
            let r = if l == layers {
                solve_x_last(
                    spec.loss(),
                    spec.activation(l - 1),
                    w.mats[l].view(),
                    s.labels.view(),
                    u_prev.view(),
                    h.lambda,
                    s.x(l),
                    &x_config(h),
                )?
            } else {
                solve_x_intermediate(
                    spec.activation(l),
                    spec.activation(l - 1),
                    w.mats[l].view(),
                    s.x(l + 1),
                    u_prev.view(),
                    s.x(l),
                    &x_config(h),
                )?
            };
            s.acts[l - 1].assign(&r.solution);
            r
        }
        BlockId::W(l) => {
            let wb = if l == layers {
                WBlock::Last { loss: spec.loss(), y: s.labels.view() }
            } else {
                WBlock::Intermediate { kind: spec.activation(l), x_next: s.x(l + 1), lambda: h.lambda }
            };
            let r = match prev {
                Some(p) => {
                    let prox = Proximal { gamma: h.gamma[l], anchor: p.mats[l].view() };
                    solve_w_prox(wb, s.x(l), h.rho[l], prox, w.mats[l].view(), &w_config(h))?
                }
                None => solve_w(wb, s.x(l), h.rho[l], w.mats[l].view(), &w_config(h))?,
            };
            w.mats[l].assign(&r.solution);
            r
        }
    };
    Ok(r)
}

/// Replaces the activations by the feed-forward ones when those give a
/// lower lifted objective. Returns whether the swap happened.
fn restart_if_better(
    spec: &NetworkSpec,
    w: &Weights,
    s: &mut LiftedState,
    h: &Hyperparams,
    prev: Option<&Weights>,
) -> Result<(bool, f64)> {
    let current = lifted_objective(spec, w, s, h, prev)?;
    let mut hidden = feed_forward(spec, w, s.input.view())?.hidden;
    std::mem::swap(&mut s.acts, &mut hidden);
    let fresh = lifted_objective(spec, w, s, h, prev)?;
    if fresh < current {
        Ok((true, fresh))
    } else {
        std::mem::swap(&mut s.acts, &mut hidden);
        Ok((false, current))
    }
}

/// One pass over every block in [`block_order`], preceded by a switch to
/// the feed-forward activations whenever they are the better starting point.
pub fn alternate(
    spec: &NetworkSpec,
    w: &mut Weights,
    s: &mut LiftedState,
    h: &Hyperparams,
    prev: Option<&Weights>,
    track: bool,
    report: &mut TrainReport,
) -> Result<Vec<BlockDelta>> {
    let mut deltas = Vec::new();
    let (restarted, start) = restart_if_better(spec, w, s, h, prev)?;
    if restarted {
        report.restarts += 1;
    }
    let mut current = track.then_some(start);
    for block in block_order(spec.hidden_layers()) {
        let r = update_block(spec, w, s, h, prev, block)?;
        report.trace.push(block);
        if !r.converged {
            report.note_unconverged(block);
        }
        if !r.objective.is_finite() {
            return Err(Error::Diverged(format!("{block} subproblem returned {}", r.objective)));
        }
        if let Some(before) = current {
            let after = lifted_objective(spec, w, s, h, prev)?;
            deltas.push(BlockDelta { block, before, after });
            current = Some(after);
        }
    }
    Ok(deltas)
}

fn train_metrics(spec: &NetworkSpec, w: &Weights, x: ArrayView2<f64>, y: ArrayView2<f64>, classes: &[usize], rho: &[f64]) -> Result<(f64, f64)> {
    let fwd = feed_forward(spec, w, x)?;
    let std = loss_value(spec.loss(), fwd.prediction.view(), y)? + weight_penalty(w, rho);
    let acc = accuracy_of(&argmax_columns(fwd.prediction.view()), classes);
    Ok((std, acc))
}

fn test_accuracy(spec: &NetworkSpec, w: &Weights, test: Option<&Dataset>) -> Result<Option<f64>> {
    test.map(|t| accuracy(spec, w, t.inputs.view(), &t.classes)).transpose()
}

fn initial_weights(spec: &NetworkSpec, h: &Hyperparams, opts: &TrainOptions<'_>) -> Result<Weights> {
    h.check(spec)?;
    match &opts.init {
        Some(w) => {
            w.check(spec)?;
            Ok(w.clone())
        }
        None => Ok(Weights::init(spec, h.seed)),
    }
}

fn check_data(spec: &NetworkSpec, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if data.dim() != spec.input_dim() || data.labels.nrows() != spec.output_dim() {
        return Err(Error::Shape(format!(
            "data is {}→{}, network is {}",
            data.dim(),
            data.labels.nrows(),
            spec.arch_string()
        )));
    }
    Ok(())
}

/// Non-batched training on the whole of `data`.
///
/// Stops after `outer_max_iters` alternations or once the lifted objective
/// changes by less than `outer_rel_tol` relative to its previous value.
pub fn train_full(spec: &NetworkSpec, data: &Dataset, h: &Hyperparams, opts: &TrainOptions<'_>) -> Result<(Weights, TrainReport)> {
    run_full(spec, data, h, opts).map(|(w, _, r)| (w, r))
}

/// [`train_full`] that also hands back the final activations.
pub fn run_full(
    spec: &NetworkSpec,
    data: &Dataset,
    h: &Hyperparams,
    opts: &TrainOptions<'_>,
) -> Result<(Weights, LiftedState, TrainReport)> {
    check_data(spec, data)?;
    let mut w = initial_weights(spec, h, opts)?;
    let mut s = LiftedState::feed_forward(spec, &w, data.inputs.clone(), data.labels.clone())?;
    let mut report = TrainReport::default();
    let mut previous = lifted_objective(spec, &w, &s, h, None)?;
    let clock = Instant::now();
    let mut eval_time = 0.0;
    for it in 0..h.outer_max_iters {
        let deltas = alternate(spec, &mut w, &mut s, h, None, opts.track_blocks, &mut report)?;
        let lifted = match deltas.last() {
            Some(d) => d.after,
            None => lifted_objective(spec, &w, &s, h, None)?,
        };
        let trained = clock.elapsed().as_secs_f64() - eval_time;
        let eval_start = Instant::now();
        let (standard, train_acc) = train_metrics(spec, &w, data.inputs.view(), data.labels.view(), &data.classes, &h.rho)?;
        let test_acc = test_accuracy(spec, &w, opts.test)?;
        eval_time += eval_start.elapsed().as_secs_f64();
        if !lifted.is_finite() || !standard.is_finite() {
            return Err(Error::Diverged(format!("objective became {lifted} / {standard} at alternation {it}")));
        }
        report.records.push(Record {
            epoch: it,
            batch: 0,
            epoch_fraction: (it + 1) as f64,
            lifted,
            standard,
            train_acc,
            test_acc,
            seconds: trained,
            deltas,
        });
        let rel = (previous - lifted).abs() / previous.abs().max(f64::MIN_POSITIVE);
        previous = lifted;
        if rel < h.outer_rel_tol {
            report.converged = true;
            break;
        }
    }
    report.summarize();
    Ok((w, s, report))
}

/// `Σ_l B_l(X_{l+1}, W_l·[X_l; 1])` without the multiplier.
pub fn divergence_total(spec: &NetworkSpec, w: &Weights, s: &LiftedState) -> Result<f64> {
    let mut total = 0.0;
    for l in 0..spec.hidden_layers() {
        let u = affine(w.mats[l].view(), s.x(l))?;
        total += matrix_divergence(spec.activation(l), s.x(l + 1), u.view())?;
    }
    Ok(total)
}

/// Batched training: per batch, snapshot `W⁰ ← W`, feed the batch forward to
/// initialise its activations, then run `alternations` passes with the
/// proximal terms `γ_l‖W_l − W⁰_l‖²`. Batches follow a seeded shuffle per
/// epoch.
pub fn train_batched(spec: &NetworkSpec, data: &Dataset, h: &Hyperparams, opts: &TrainOptions<'_>) -> Result<(Weights, TrainReport)> {
    check_data(spec, data)?;
    if h.batch_size > data.len() && h.batch_size != usize::MAX {
        return Err(Error::Hyperparams(format!("batch size {} exceeds {} samples", h.batch_size, data.len())));
    }
    let mut w = initial_weights(spec, h, opts)?;
    let mut report = TrainReport::default();
    let clock = Instant::now();
    let mut eval_time = 0.0;
    let every = opts.eval_every.max(1);
    for epoch in 0..h.epochs {
        let order = batches(data.len(), h.batch_size, h.seed, epoch);
        let count = order.len();
        for (b, idx) in order.iter().enumerate() {
            let batch = data.select(idx);
            let anchor = w.clone();
            let mut s = LiftedState::feed_forward(spec, &w, batch.inputs, batch.labels)?;
            let mut deltas = Vec::new();
            for _ in 0..h.alternations {
                deltas.extend(alternate(spec, &mut w, &mut s, h, Some(&anchor), opts.track_blocks, &mut report)?);
            }
            let trained = clock.elapsed().as_secs_f64() - eval_time;
            let eval_start = Instant::now();
            let lifted = match deltas.last() {
                Some(d) => d.after,
                None => lifted_objective(spec, &w, &s, h, Some(&anchor))?,
            };
            let (standard, train_acc) = train_metrics(spec, &w, s.input.view(), s.labels.view(), &batch.classes, &h.rho)?;
            let last = b + 1 == count;
            let test_acc = if (b + 1) % every == 0 || last { test_accuracy(spec, &w, opts.test)? } else { None };
            eval_time += eval_start.elapsed().as_secs_f64();
            if !lifted.is_finite() || !standard.is_finite() {
                return Err(Error::Diverged(format!("objective became {lifted} / {standard} in epoch {epoch}, batch {b}")));
            }
            report.records.push(Record {
                epoch,
                batch: b,
                epoch_fraction: epoch as f64 + (b + 1) as f64 / count as f64,
                lifted,
                standard,
                train_acc,
                test_acc,
                seconds: trained,
                deltas,
            });
        }
    }
    report.summarize();
    Ok((w, report))
}

/// Final lifted objective of a full run at multiplier `lambda`, as an
/// estimate of the dual function. BCD returns a stationary point, so the
/// value is an upper approximation of the true minimum.
pub fn dual_value(spec: &NetworkSpec, data: &Dataset, lambda: f64, h: &Hyperparams) -> Result<f64> {
    let h = Hyperparams { lambda, ..h.clone() };
    let (_, report) = train_full(spec, data, &h, &TrainOptions::default())?;
    report.final_lifted().ok_or_else(|| Error::Hyperparams("no alternations were run".into()))
}

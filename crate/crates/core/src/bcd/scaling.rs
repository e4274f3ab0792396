//! Change of variables that folds one multiplier per layer into a single one.
//!
//! The ReLU divergence is homogeneous of degree two, so with `λ_{-1} = 1`
//! and
//!
//! ```text
//! X̄_l = √λ_{l-1} X_l,    W̄_l = √(λ_l / λ_{l-1}) W_l
//! ```
//!
//! every weighted term `λ_l B(X_{l+1}, W_l X_l)` becomes an unweighted
//! `B(X̄_{l+1}, W̄_l X̄_l)`. The ones row appended to `X_l` is not scaled,
//! so the bias column of `W_l` picks up `√λ_l` instead, and its penalty is
//! rescaled separately from the weight columns.

use ndarray::{s, Array2, ArrayView2};

use crate::divergence::{matrix_divergence, ActivationKind};
use crate::error::{Error, Result};
use crate::network::{affine, loss_value, weight_penalty, LiftedState, NetworkSpec, Weights};

/// `λ_0 … λ_{L-1}` plus the free last-layer scale `λ_L`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingProfile {
    pub lambdas: Vec<f64>,
    pub lambda_last: f64,
}

impl ScalingProfile {
    pub fn new(lambdas: Vec<f64>, lambda_last: f64) -> Result<Self> {
        if lambdas.iter().chain([&lambda_last]).any(|l| !(*l > 0.0 && l.is_finite())) {
            return Err(Error::Hyperparams(format!(
                "scaling multipliers must be positive, got {lambdas:?} and {lambda_last}"
            )));
        }
        Ok(Self { lambdas, lambda_last })
    }

    pub fn uniform(layers: usize, lambda: f64) -> Result<Self> {
        Self::new(vec![lambda; layers], lambda)
    }

    /// `λ_{l-1}` for `l = 0..=L`, with `λ_{-1} = 1`.
    fn before(&self, l: usize) -> f64 {
        if l == 0 {
            1.0
        } else {
            self.lambdas[l - 1]
        }
    }

    /// `λ_l` for `l = 0..=L`.
    fn at(&self, l: usize) -> f64 {
        self.lambdas.get(l).copied().unwrap_or(self.lambda_last)
    }
}

/// Variables and penalties of the single-multiplier problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledProblem {
    pub weights: Weights,
    pub state: LiftedState,
    /// `ρ_l λ_{l-1} / λ_l` on the weight columns.
    pub rho_weight: Vec<f64>,
    /// `ρ_l / λ_l` on the bias column.
    pub rho_bias: Vec<f64>,
    pub lambda_last: f64,
}

fn check(spec: &NetworkSpec, profile: &ScalingProfile, rho: &[f64]) -> Result<()> {
    let layers = spec.hidden_layers();
    if let Some(kind) = spec.activations().iter().find(|&&k| k != ActivationKind::Relu) {
        return Err(Error::Unsupported(format!("variable scaling needs ReLU layers, found {kind}")));
    }
    if profile.lambdas.len() != layers {
        return Err(Error::Hyperparams(format!(
            "scaling profile has {} multipliers for {layers} hidden layers",
            profile.lambdas.len()
        )));
    }
    if rho.len() != layers + 1 {
        return Err(Error::Hyperparams(format!("rho needs {} entries, got {}", layers + 1, rho.len())));
    }
    Ok(())
}

fn scale_columns(w: &Array2<f64>, weight: f64, bias: f64) -> Array2<f64> {
    let mut out = w.clone();
    let p = w.ncols() - 1;
    out.slice_mut(s![.., ..p]).mapv_inplace(|v| v * weight);
    out.column_mut(p).mapv_inplace(|v| v * bias);
    out
}

fn map_state<F: Fn(usize) -> f64>(s: &LiftedState, factor: F) -> LiftedState {
    LiftedState {
        acts: s.acts.iter().enumerate().map(|(i, a)| a * factor(i + 1)).collect(),
        input: s.input.clone(),
        labels: s.labels.clone(),
    }
}

pub fn scale_to_single_lambda(
    spec: &NetworkSpec,
    profile: &ScalingProfile,
    w: &Weights,
    s: &LiftedState,
    rho: &[f64],
) -> Result<ScaledProblem> {
    check(spec, profile, rho)?;
    w.check(spec)?;
    s.check(spec)?;
    let mats = w
        .mats
        .iter()
        .enumerate()
        .map(|(l, m)| scale_columns(m, (profile.at(l) / profile.before(l)).sqrt(), profile.at(l).sqrt()))
        .collect();
    let state = map_state(s, |l| profile.before(l).sqrt());
    let rho_weight = rho.iter().enumerate().map(|(l, r)| r * profile.before(l) / profile.at(l)).collect();
    let rho_bias = rho.iter().enumerate().map(|(l, r)| r / profile.at(l)).collect();
    Ok(ScaledProblem { weights: Weights { mats }, state, rho_weight, rho_bias, lambda_last: profile.lambda_last })
}

/// Inverse of [`scale_to_single_lambda`] on the variables.
pub fn unscale(spec: &NetworkSpec, profile: &ScalingProfile, p: &ScaledProblem) -> Result<(Weights, LiftedState)> {
    check(spec, profile, &vec![0.0; spec.hidden_layers() + 1])?;
    let mats = p
        .weights
        .mats
        .iter()
        .enumerate()
        .map(|(l, m)| scale_columns(m, (profile.before(l) / profile.at(l)).sqrt(), 1.0 / profile.at(l).sqrt()))
        .collect();
    Ok((Weights { mats }, map_state(&p.state, |l| 1.0 / profile.before(l).sqrt())))
}

/// `ℒ(Y, W_L X_L) + Σ ρ_l‖W_l‖² + Σ λ_l B(X_{l+1}, W_l X_l)`.
pub fn multi_lambda_objective(
    spec: &NetworkSpec,
    profile: &ScalingProfile,
    w: &Weights,
    s: &LiftedState,
    rho: &[f64],
) -> Result<f64> {
    check(spec, profile, rho)?;
    let layers = spec.hidden_layers();
    let scores = affine(w.mats[layers].view(), s.x(layers))?;
    let mut total = loss_value(spec.loss(), scores.view(), s.labels.view())? + weight_penalty(w, rho);
    for l in 0..layers {
        let u = affine(w.mats[l].view(), s.x(l))?;
        total += profile.lambdas[l] * matrix_divergence(spec.activation(l), s.x(l + 1), u.view())?;
    }
    Ok(total)
}

fn split_norms(m: ArrayView2<f64>) -> (f64, f64) {
    let p = m.ncols() - 1;
    let w = m.slice(s![.., ..p]).iter().map(|v| v * v).sum();
    let b = m.column(p).iter().map(|v| v * v).sum();
    (w, b)
}

/// `ℒ(Y, W̄_L X̄_L / √λ_L) + Σ (ρ̄ terms) + Σ B(X̄_{l+1}, W̄_l X̄_l)`.
pub fn scaled_objective(spec: &NetworkSpec, p: &ScaledProblem) -> Result<f64> {
    let layers = spec.hidden_layers();
    let (w, s) = (&p.weights, &p.state);
    w.check(spec)?;
    s.check(spec)?;
    let scores = affine(w.mats[layers].view(), s.x(layers))? / p.lambda_last.sqrt();
    let mut total = loss_value(spec.loss(), scores.view(), s.labels.view())?;
    for (l, m) in w.mats.iter().enumerate() {
        let (wn, bn) = split_norms(m.view());
        total += p.rho_weight[l] * wn + p.rho_bias[l] * bn;
    }
    for l in 0..layers {
        let u = affine(w.mats[l].view(), s.x(l))?;
        total += matrix_divergence(spec.activation(l), s.x(l + 1), u.view())?;
    }
    Ok(total)
}

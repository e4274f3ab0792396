//! Fenchel divergences `B(v, u) = F(v) + F*(u) - uv` for the supported
//! activations, plus the two quadratic penalties used by earlier lifted
//! models.
//!
//! `v` is always the post-activation argument and `u` the pre-activation.
//! A value of `f64::INFINITY` means `v` lies outside the range of the
//! activation; solvers project onto the feasible set and never evaluate
//! there on purpose.

use std::fmt;
use std::str::FromStr;

use ndarray::{ArrayView2, Zip};

use crate::error::{Error, Result};

/// Sigmoid variables are kept this far inside `(0, 1)` by the projection so
/// that `logit(v)` stays finite.
pub const SIGMOID_MARGIN: f64 = 1e-12;

const LN_2: f64 = std::f64::consts::LN_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    /// `max(0, u)` with `B = v²/2 + u₊²/2 - uv` on `v ≥ 0`.
    Relu,
    /// Logistic sigmoid with the binary-entropy divergence on `v ∈ [0, 1]`.
    Sigmoid,
    /// ReLU network penalised with `(v - u)²` on `v ≥ 0`.
    QuadraticIdentity,
    /// ReLU network penalised with `(v - u₊)²`, `v` unconstrained. Not
    /// biconvex.
    QuadraticPlus,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 4] = [
        ActivationKind::Relu,
        ActivationKind::Sigmoid,
        ActivationKind::QuadraticIdentity,
        ActivationKind::QuadraticPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::QuadraticIdentity => "quad-identity",
            ActivationKind::QuadraticPlus => "quad-plus",
        }
    }

    /// Stable one-byte tag used by the checkpoint format.
    pub fn tag(self) -> u8 {
        match self {
            ActivationKind::Relu => 0,
            ActivationKind::Sigmoid => 1,
            ActivationKind::QuadraticIdentity => 2,
            ActivationKind::QuadraticPlus => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.tag() == tag)
    }

    /// True for the two divergences built from a Fenchel conjugate pair.
    pub fn is_exact(self) -> bool {
        matches!(self, ActivationKind::Relu | ActivationKind::Sigmoid)
    }

    /// The activation applied by the feed-forward network.
    pub fn activate(self, u: f64) -> f64 {
        match self {
            ActivationKind::Sigmoid => sigmoid(u),
            _ => u.max(0.0),
        }
    }

    /// Whether `v` lies in the closed domain of `B(·, u)`.
    pub fn is_feasible(self, v: f64) -> bool {
        match self {
            ActivationKind::Relu | ActivationKind::QuadraticIdentity => v >= 0.0,
            ActivationKind::Sigmoid => (0.0..=1.0).contains(&v),
            ActivationKind::QuadraticPlus => v.is_finite(),
        }
    }

    /// Euclidean projection onto the feasible set used by the X-solvers.
    pub fn project(self, v: f64) -> f64 {
        match self {
            ActivationKind::Relu | ActivationKind::QuadraticIdentity => v.max(0.0),
            ActivationKind::Sigmoid => v.clamp(SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN),
            ActivationKind::QuadraticPlus => v,
        }
    }

    /// `B(v, u)`, `+inf` outside the feasible set.
    pub fn divergence(self, v: f64, u: f64) -> f64 {
        match self {
            ActivationKind::Relu => relu_divergence(v, u),
            ActivationKind::Sigmoid => sigmoid_divergence(v, u),
            ActivationKind::QuadraticIdentity => {
                if v >= 0.0 {
                    (v - u) * (v - u)
                } else {
                    f64::INFINITY
                }
            }
            ActivationKind::QuadraticPlus => {
                let d = v - u.max(0.0);
                d * d
            }
        }
    }

    /// `∂B/∂u` without the feasibility check; callers guarantee `v` feasible.
    pub(crate) fn grad_u_unchecked(self, v: f64, u: f64) -> f64 {
        match self {
            ActivationKind::Relu => u.max(0.0) - v,
            ActivationKind::Sigmoid => sigmoid(u) - v,
            ActivationKind::QuadraticIdentity => 2.0 * (u - v),
            ActivationKind::QuadraticPlus => {
                if u > 0.0 {
                    2.0 * (u - v)
                } else {
                    0.0
                }
            }
        }
    }

    /// `∂B/∂v` without the feasibility check.
    pub(crate) fn grad_v_unchecked(self, v: f64, u: f64) -> f64 {
        match self {
            ActivationKind::Relu => v - u,
            ActivationKind::Sigmoid => logit(v) - u,
            ActivationKind::QuadraticIdentity => 2.0 * (v - u),
            ActivationKind::QuadraticPlus => 2.0 * (v - u.max(0.0)),
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(ActivationKind::Relu),
            "sigmoid" => Ok(ActivationKind::Sigmoid),
            "quad-identity" | "quadratic-identity" => Ok(ActivationKind::QuadraticIdentity),
            "quad-plus" | "quadratic-plus" => Ok(ActivationKind::QuadraticPlus),
            other => Err(Error::Spec(format!("unknown activation `{other}`"))),
        }
    }
}

pub fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Inverse sigmoid; `±inf` at the endpoints.
pub fn logit(v: f64) -> f64 {
    (v / (1.0 - v)).ln()
}

/// `log(1 + e^u)` without overflow.
pub fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

pub fn relu_divergence(v: f64, u: f64) -> f64 {
    if v < 0.0 || v.is_nan() {
        return f64::INFINITY;
    }
    let up = u.max(0.0);
    // 0.5 v² + 0.5 u₊² - uv, grouped to limit cancellation near equality
    let d = 0.5 * (v - up) * (v - up) + v * (up - u);
    d.max(0.0)
}

/// Divergence for the logistic sigmoid, with the integration base point at
/// `v = 1/2` so that `F(1/2) = F*(0) = 0`.
pub fn sigmoid_divergence(v: f64, u: f64) -> f64 {
    if !(0.0..=1.0).contains(&v) {
        return f64::INFINITY;
    }
    let f = xlogx(v) + xlogx(1.0 - v) + LN_2;
    let f_star = softplus(u) - LN_2;
    (f + f_star - u * v).max(0.0)
}

pub fn divergence_grad_u(kind: ActivationKind, v: f64, u: f64) -> Result<f64> {
    if !kind.is_feasible(v) {
        return Err(Error::Infeasible { kind: kind.name(), v });
    }
    Ok(kind.grad_u_unchecked(v, u))
}

/// `∂B/∂v`; the sigmoid case needs `v` strictly inside `(0, 1)`.
pub fn divergence_grad_v(kind: ActivationKind, v: f64, u: f64) -> Result<f64> {
    let strictly = match kind {
        ActivationKind::Sigmoid => v > 0.0 && v < 1.0,
        _ => kind.is_feasible(v),
    };
    if !strictly {
        return Err(Error::Infeasible { kind: kind.name(), v });
    }
    Ok(kind.grad_v_unchecked(v, u))
}

/// Sum of the entrywise divergences of two equally shaped matrices.
pub fn matrix_divergence(kind: ActivationKind, v: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<f64> {
    if v.dim() != u.dim() {
        return Err(Error::Shape(format!(
            "divergence arguments {:?} and {:?}",
            v.dim(),
            u.dim()
        )));
    }
    let mut total = 0.0;
    Zip::from(&v).and(&u).for_each(|&a, &b| total += kind.divergence(a, b));
    Ok(total)
}

/// How far `V` is from `φ(U)`, measured by the divergence itself. Zero iff
/// `V = φ(U)` for the exact kinds.
pub fn feasibility_residual(kind: ActivationKind, v: ArrayView2<f64>, u: ArrayView2<f64>) -> Result<f64> {
    matrix_divergence(kind, v, u)
}

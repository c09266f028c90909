//! Losses `l(u1, u2, y)` with `u1 = Z^T beta` and `u2 = f(X)`.
//!
//! Every family here depends on the index `u1 + u2` only, so `l1' = l2'` and
//! all four second partials coincide.
//!
//! Regression families act on the residual `r = y - u1 - u2`:
//! squared is `r^2` and Huber is `r^2 / 2` inside `[-delta, delta]` and
//! `delta (|r| - delta / 2)` outside. Classification families are negative
//! Bernoulli log-likelihoods under a logistic or probit link.

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};
use libm::erfc;

use crate::error::{arg_err, Result};

/// Classical 95%-efficiency tuning constant for the Huber loss.
pub const DEFAULT_HUBER_DELTA: f64 = 1.345;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum LossSpec {
    Squared,
    Huber { delta: f64 },
    LogisticNll,
    ProbitNll,
}

/// Link functions for the classification families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Logistic,
    Probit,
}

impl Link {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            Link::Logistic => sigmoid(t),
            Link::Probit => normal_cdf(t),
        }
    }
}

/// Logistic function, evaluated without overflow.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(t: f64) -> f64 {
    0.5 * erfc(-t / std::f64::consts::SQRT_2)
}

fn normal_pdf(t: f64) -> f64 {
    (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Inverse Mills ratio `pdf(t) / cdf(t)`, stable far into the left tail.
fn inv_mills(t: f64) -> f64 {
    if t > -30.0 {
        normal_pdf(t) / normal_cdf(t)
    } else {
        // continued-fraction expansion of cdf(t)/pdf(t) for t -> -inf
        let x = -t;
        let mut frac = x;
        for k in (1..=40).rev() {
            frac = x + k as f64 / frac;
        }
        frac
    }
}

/// `-log cdf(t)`, stable in the left tail.
fn neg_log_cdf(t: f64) -> f64 {
    if t > -30.0 {
        -normal_cdf(t).ln()
    } else {
        // log cdf(t) = log pdf(t) - log(mills ratio)
        0.5 * t * t + 0.5 * (2.0 * std::f64::consts::PI).ln() + inv_mills(t).ln()
    }
}

impl LossSpec {
    pub fn huber() -> Self {
        LossSpec::Huber {
            delta: DEFAULT_HUBER_DELTA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let LossSpec::Huber { delta } = self {
            if !(*delta > 0.0 && delta.is_finite()) {
                return arg_err(format!("Huber delta must be positive, got {delta}"));
            }
        }
        Ok(())
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, LossSpec::LogisticNll | LossSpec::ProbitNll)
    }

    pub fn link(&self) -> Option<Link> {
        match self {
            LossSpec::LogisticNll => Some(Link::Logistic),
            LossSpec::ProbitNll => Some(Link::Probit),
            _ => None,
        }
    }

    /// Lipschitz constant of `t -> dl/dt` in the index `t = u1 + u2`.
    pub fn gradient_lipschitz(&self) -> f64 {
        match self {
            LossSpec::Squared => 2.0,
            LossSpec::Huber { .. } => 1.0,
            LossSpec::LogisticNll => 0.25,
            LossSpec::ProbitNll => 1.0,
        }
    }

    fn check_y(&self, y: f64) -> Result<()> {
        if self.is_classification() {
            if y != 0.0 && y != 1.0 {
                return arg_err(format!("classification label must be 0 or 1, got {y}"));
            }
        } else if !y.is_finite() {
            return arg_err(format!("regression response must be finite, got {y}"));
        }
        Ok(())
    }

    /// Loss as a function of the index `t = u1 + u2`.
    fn value_at(&self, t: f64, y: f64) -> f64 {
        match *self {
            LossSpec::Squared => (y - t).powi(2),
            LossSpec::Huber { delta } => {
                let r = (y - t).abs();
                if r <= delta {
                    0.5 * r * r
                } else {
                    delta * (r - 0.5 * delta)
                }
            }
            LossSpec::LogisticNll => softplus(t) - y * t,
            LossSpec::ProbitNll => {
                if y == 1.0 {
                    neg_log_cdf(t)
                } else {
                    neg_log_cdf(-t)
                }
            }
        }
    }

    fn deriv_at(&self, t: f64, y: f64) -> f64 {
        match *self {
            LossSpec::Squared => -2.0 * (y - t),
            LossSpec::Huber { delta } => -(y - t).clamp(-delta, delta),
            LossSpec::LogisticNll => sigmoid(t) - y,
            LossSpec::ProbitNll => {
                if y == 1.0 {
                    -inv_mills(t)
                } else {
                    inv_mills(-t)
                }
            }
        }
    }

    fn second_at(&self, t: f64, y: f64) -> f64 {
        match *self {
            LossSpec::Squared => 2.0,
            LossSpec::Huber { delta } => {
                if (y - t).abs() < delta {
                    1.0
                } else {
                    0.0
                }
            }
            LossSpec::LogisticNll => {
                let p = sigmoid(t);
                p * (1.0 - p)
            }
            LossSpec::ProbitNll => {
                let s = if y == 1.0 { t } else { -t };
                let m = inv_mills(s);
                m * (s + m)
            }
        }
    }

    pub fn value(&self, u1: f64, u2: f64, y: f64) -> Result<f64> {
        self.check_y(y)?;
        Ok(self.value_at(u1 + u2, y))
    }

    /// `(l1', l2')`, the partials in `u1` and `u2`.
    pub fn grad(&self, u1: f64, u2: f64, y: f64) -> Result<(f64, f64)> {
        self.check_y(y)?;
        let d = self.deriv_at(u1 + u2, y);
        Ok((d, d))
    }

    /// Matrix of second partials in `(u1, u2)`.
    pub fn hess(&self, u1: f64, u2: f64, y: f64) -> Result<Matrix2<f64>> {
        self.check_y(y)?;
        let h = self.second_at(u1 + u2, y);
        Ok(Matrix2::new(h, h, h, h))
    }

    /// `dl/dt` at the index `t`, with `y` already validated.
    pub(crate) fn index_deriv(&self, t: f64, y: f64) -> f64 {
        self.deriv_at(t, y)
    }

    pub(crate) fn index_value(&self, t: f64, y: f64) -> f64 {
        self.value_at(t, y)
    }

    pub(crate) fn index_second(&self, t: f64, y: f64) -> f64 {
        self.second_at(t, y)
    }

    pub(crate) fn check_response(&self, y: f64) -> Result<()> {
        self.check_y(y)
    }
}

/// Free-function forms of the loss operations.
pub fn loss_value(spec: &LossSpec, u1: f64, u2: f64, y: f64) -> Result<f64> {
    spec.value(u1, u2, y)
}

pub fn loss_grad(spec: &LossSpec, u1: f64, u2: f64, y: f64) -> Result<(f64, f64)> {
    spec.grad(u1, u2, y)
}

pub fn loss_hess(spec: &LossSpec, u1: f64, u2: f64, y: f64) -> Result<Matrix2<f64>> {
    spec.hess(u1, u2, y)
}

pub fn link(l: Link, t: f64) -> f64 {
    l.eval(t)
}

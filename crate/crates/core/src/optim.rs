//! First-order update rules operating on flat parameter vectors.
//!
//! The training loop owns parameters as one contiguous `Vec<f64>`; every
//! rule here mutates that slice in place. Momentum-family rules keep the
//! previous parameter delta and add `beta * delta` back into the update, so
//! a zero momentum rate makes them collapse to plain SGD. Nesterov-family
//! rules expect the gradient to be evaluated at [`lookahead_point`], which
//! the caller obtains before running the backward pass.

use crate::schedule::CycleConfig;
use crate::{Error, Result};

use serde::{Deserialize, Serialize};

/// Gradient of the loss with respect to the flat parameter vector.
pub type LossGradient<'a> = &'a [f64];

/// Shared hyperparameters. `alpha`/`beta` drive the fixed-rate rules,
/// `beta1`/`beta2`/`epsilon` the adaptive ones; `epsilon` doubles as the
/// divide-by-zero guard everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub alpha: f64,
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            alpha: 0.01,
            beta: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidHyperParam(format!(
                "alpha must be finite and positive, got {}",
                self.alpha
            )));
        }
        for (name, b) in [
            ("beta", self.beta),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidHyperParam(format!(
                    "{name} must lie in [0, 1), got {b}"
                )));
            }
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidHyperParam(format!(
                "epsilon must be finite and positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

fn check_len(op: &'static str, params: &[f64], grad: &[f64]) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{} params vs {} gradient entries", params.len(), grad.len()),
        });
    }
    Ok(())
}

fn check_state(op: &'static str, params: &[f64], state: &[f64]) -> Result<()> {
    if params.len() != state.len() {
        return Err(Error::ShapeMismatch {
            op,
            detail: format!("{} params vs {} state entries", params.len(), state.len()),
        });
    }
    Ok(())
}

/// theta <- theta - alpha * g
pub fn sgd_step(params: &mut [f64], grad: LossGradient, alpha: f64) -> Result<()> {
    check_len("sgd_step", params, grad)?;
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= alpha * g;
    }
    Ok(())
}

/// Heavy-ball update. `prev_delta` holds the previous parameter change and
/// is replaced by the change applied here:
/// delta <- -alpha * g + beta * prev_delta; theta <- theta + delta
pub fn momentum_step(
    params: &mut [f64],
    grad: LossGradient,
    prev_delta: &mut [f64],
    alpha: f64,
    beta: f64,
) -> Result<()> {
    check_len("momentum_step", params, grad)?;
    check_state("momentum_step", params, prev_delta)?;
    for ((p, g), d) in params.iter_mut().zip(grad).zip(prev_delta.iter_mut()) {
        let delta = beta * *d - alpha * g;
        *p += delta;
        *d = delta;
    }
    Ok(())
}

/// Point where the Nesterov-family gradient is evaluated:
/// theta + beta * prev_delta.
pub fn lookahead_point(params: &[f64], prev_delta: &[f64], beta: f64) -> Result<Vec<f64>> {
    check_state("lookahead_point", params, prev_delta)?;
    Ok(params
        .iter()
        .zip(prev_delta)
        .map(|(p, d)| p + beta * d)
        .collect())
}

/// Same update arithmetic as [`momentum_step`]; the distinction is the
/// contract that `grad` was computed at [`lookahead_point`].
pub fn nesterov_step(
    params: &mut [f64],
    grad_at_lookahead: LossGradient,
    prev_delta: &mut [f64],
    alpha: f64,
    beta: f64,
) -> Result<()> {
    check_len("nesterov_step", params, grad_at_lookahead)?;
    momentum_step(params, grad_at_lookahead, prev_delta, alpha, beta)
}

/// accum <- accum + g^2; theta <- theta - alpha * g / sqrt(accum + eps)
pub fn adagrad_step(
    params: &mut [f64],
    grad: LossGradient,
    accum: &mut [f64],
    alpha: f64,
    epsilon: f64,
) -> Result<()> {
    check_len("adagrad_step", params, grad)?;
    check_state("adagrad_step", params, accum)?;
    for ((p, g), a) in params.iter_mut().zip(grad).zip(accum.iter_mut()) {
        *a += g * g;
        *p -= alpha * g / (*a + epsilon).sqrt();
    }
    Ok(())
}

/// Bias-corrected first/second moment update:
/// m <- b1*m + (1-b1)*g; v <- b2*v + (1-b2)*g^2;
/// theta <- theta - alpha * m_hat / (sqrt(v_hat) + eps)
pub fn adam_step(
    params: &mut [f64],
    grad: LossGradient,
    m: &mut [f64],
    v: &mut [f64],
    t: &mut u64,
    hp: &HyperParams,
) -> Result<()> {
    check_len("adam_step", params, grad)?;
    check_state("adam_step", params, m)?;
    check_state("adam_step", params, v)?;
    *t += 1;
    let bc1 = 1.0 - hp.beta1.powi(*t as i32);
    let bc2 = 1.0 - hp.beta2.powi(*t as i32);
    for (((p, g), mi), vi) in params
        .iter_mut()
        .zip(grad)
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * g;
        *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * g * g;
        let m_hat = *mi / bc1;
        let v_hat = *vi / bc2;
        *p -= hp.alpha * m_hat / (v_hat.sqrt() + hp.epsilon);
    }
    Ok(())
}

/// Nesterov update with both rates read off the cyclic schedules at
/// iteration `i`: alpha = lr_at(i), beta = mr_at(i). The same `beta`
/// must have been used for the lookahead where `grad_at_lookahead` was
/// evaluated.
pub fn clmr_step(
    params: &mut [f64],
    grad_at_lookahead: LossGradient,
    prev_delta: &mut [f64],
    cycle: &CycleConfig,
    iteration: usize,
) -> Result<()> {
    nesterov_step(
        params,
        grad_at_lookahead,
        prev_delta,
        cycle.lr_at(iteration),
        cycle.mr_at(iteration),
    )
}

/// The update rules the harness can select between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Nesterov,
    AdaGrad,
    Adam,
    /// Nesterov base with the learning rate cycled and momentum held fixed.
    Clr,
    /// Nesterov base with both learning rate and momentum rate cycled.
    Clmr,
}

impl OptimizerKind {
    pub const ALL: [OptimizerKind; 7] = [
        OptimizerKind::Sgd,
        OptimizerKind::Momentum,
        OptimizerKind::Nesterov,
        OptimizerKind::AdaGrad,
        OptimizerKind::Adam,
        OptimizerKind::Clr,
        OptimizerKind::Clmr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Nesterov => "nesterov",
            OptimizerKind::AdaGrad => "adagrad",
            OptimizerKind::Adam => "adam",
            OptimizerKind::Clr => "clr",
            OptimizerKind::Clmr => "clmr",
        }
    }

    /// True for rules whose gradient is evaluated at the lookahead point.
    pub fn uses_lookahead(&self) -> bool {
        matches!(
            self,
            OptimizerKind::Nesterov | OptimizerKind::Clr | OptimizerKind::Clmr
        )
    }

    /// True for rules that read the cyclic schedules.
    pub fn uses_cycle(&self) -> bool {
        matches!(self, OptimizerKind::Clr | OptimizerKind::Clmr)
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        OptimizerKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidHyperParam(format!(
                    "unknown optimizer '{s}' (expected one of sgd, momentum, nesterov, adagrad, adam, clr, clmr)"
                ))
            })
    }
}

/// Per-rule mutable buffers, sized to the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Stateless,
    Momentum { prev_delta: Vec<f64> },
    AdaGrad { accum: Vec<f64> },
    Adam { m: Vec<f64>, v: Vec<f64>, t: u64 },
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, dim: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Stateless,
            OptimizerKind::Momentum
            | OptimizerKind::Nesterov
            | OptimizerKind::Clr
            | OptimizerKind::Clmr => OptimizerState::Momentum {
                prev_delta: vec![0.0; dim],
            },
            OptimizerKind::AdaGrad => OptimizerState::AdaGrad {
                accum: vec![0.0; dim],
            },
            OptimizerKind::Adam => OptimizerState::Adam {
                m: vec![0.0; dim],
                v: vec![0.0; dim],
                t: 0,
            },
        }
    }
}

/// One update rule bound to its hyperparameters, state, and iteration
/// counter. Drives the free step functions; the iteration index feeds the
/// cyclic schedules.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    hp: HyperParams,
    cycle: Option<CycleConfig>,
    state: OptimizerState,
    iteration: usize,
}

impl Optimizer {
    pub fn new(
        kind: OptimizerKind,
        hp: HyperParams,
        cycle: Option<CycleConfig>,
        dim: usize,
    ) -> Result<Self> {
        hp.validate()?;
        if let Some(c) = &cycle {
            c.validate()?;
        }
        if kind.uses_cycle() && cycle.is_none() {
            return Err(Error::InvalidHyperParam(format!(
                "{kind} requires a cycle config"
            )));
        }
        Ok(Optimizer {
            kind,
            hp,
            cycle,
            state: OptimizerState::new(kind, dim),
            iteration: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    /// Rates in effect for the upcoming step.
    pub fn rates(&self) -> (f64, f64) {
        match (self.kind, &self.cycle) {
            (OptimizerKind::Clmr, Some(c)) => {
                (c.lr_at(self.iteration), c.mr_at(self.iteration))
            }
            (OptimizerKind::Clr, Some(c)) => (c.lr_at(self.iteration), self.hp.beta),
            (OptimizerKind::Sgd, _) => (self.hp.alpha, 0.0),
            (OptimizerKind::AdaGrad | OptimizerKind::Adam, _) => (self.hp.alpha, 0.0),
            _ => (self.hp.alpha, self.hp.beta),
        }
    }

    /// Where to evaluate the gradient for the upcoming step. `None` for
    /// rules that differentiate at the current parameters.
    pub fn lookahead(&self, params: &[f64]) -> Result<Option<Vec<f64>>> {
        if !self.kind.uses_lookahead() {
            return Ok(None);
        }
        let (_, beta) = self.rates();
        match &self.state {
            OptimizerState::Momentum { prev_delta } => {
                Ok(Some(lookahead_point(params, prev_delta, beta)?))
            }
            _ => unreachable!("lookahead rules carry momentum state"),
        }
    }

    /// Apply one update and advance the iteration counter.
    pub fn step(&mut self, params: &mut [f64], grad: LossGradient) -> Result<()> {
        let (alpha, beta) = self.rates();
        match (&mut self.state, self.kind) {
            (OptimizerState::Stateless, OptimizerKind::Sgd) => {
                sgd_step(params, grad, alpha)?
            }
            (OptimizerState::Momentum { prev_delta }, OptimizerKind::Momentum) => {
                momentum_step(params, grad, prev_delta, alpha, beta)?
            }
            (OptimizerState::Momentum { prev_delta }, _) => {
                // nesterov, clr, clmr: same arithmetic, gradient taken at
                // the lookahead point by the caller.
                nesterov_step(params, grad, prev_delta, alpha, beta)?
            }
            (OptimizerState::AdaGrad { accum }, _) => {
                adagrad_step(params, grad, accum, alpha, self.hp.epsilon)?
            }
            (OptimizerState::Adam { m, v, t }, _) => {
                adam_step(params, grad, m, v, t, &self.hp)?
            }
            (OptimizerState::Stateless, k) => unreachable!("stateless state for {k}"),
        }
        self.iteration += 1;
        Ok(())
    }
}

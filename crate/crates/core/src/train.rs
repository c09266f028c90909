//! Penalized gradient descent for `(beta, f)`.
//!
//! The network flow discretizes
//!
//! ```text
//! d beta / dt  = -(1/n) sum_i l1'(Z_i^T beta, f(X_i), Y_i) Z_i
//! d theta / dt = -(1/n) sum_i l2'(...) grad_theta f(X_i) - 2 lambda (theta - theta0)
//! ```
//!
//! by explicit Euler steps of size `eta`. The kernel (RKHS) flow keeps
//! `f = sum_i alpha_i K(., X_i)` and steps the coefficients with
//! `d alpha_i / dt = -(1/n) l2'_i - 2 lambda alpha_i`, which is gradient descent
//! in the RKHS metric on `P_n l + lambda |f|_H^2`.
//!
//! Both flows start from `beta = 0` and `f = 0`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{LocalLinearPredictor, SplineBasis};
use crate::error::{arg_err, dim_err, Error, Result};
use crate::linalg::{self, power_max_eigen};
use crate::losses::LossSpec;
use crate::mlp::{self, NetArch, NetParams};
use crate::ntk::{gram_from_rows, GramMatrix, Kernel, KernelKind, KernelSpec};
use crate::simgen::{derive_rng, Dataset};

/// A run aborts once the objective exceeds this multiple of its starting value.
pub const DIVERGENCE_FACTOR: f64 = 1e3;
pub const DEFAULT_STEP: f64 = 1e-3;
pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_MINIBATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Batch {
    #[default]
    Full,
    Minibatch {
        size: usize,
    },
}

/// Tuning and schedule for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Penalty weight `lambda_n`.
    pub lambda: f64,
    /// Euler step `eta`.
    #[serde(default = "default_step")]
    pub step: f64,
    /// Number of steps `T`; with minibatches, the number of epochs.
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Step (or epoch) indices at which the state is recorded.
    #[serde(default)]
    pub checkpoints: Vec<usize>,
    #[serde(default)]
    pub batch: Batch,
    /// Hold `beta` at this value instead of training it.
    #[serde(default)]
    pub fixed_beta: Option<Vec<f64>>,
}

fn default_step() -> f64 {
    DEFAULT_STEP
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            step: DEFAULT_STEP,
            steps: DEFAULT_STEPS,
            seed: 0,
            checkpoints: Vec::new(),
            batch: Batch::Full,
            fixed_beta: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("step must be > 0, got {}", self.step)));
        }
        if self.checkpoints.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("checkpoints must be sorted".into()));
        }
        if self.checkpoints.last().is_some_and(|&c| c > self.steps) {
            return Err(Error::Config(format!(
                "checkpoint beyond the last step {}",
                self.steps
            )));
        }
        if let Batch::Minibatch { size } = self.batch {
            if size == 0 {
                return Err(Error::Config("minibatch size must be >= 1".into()));
            }
        }
        Ok(())
    }

    /// Whether `step * lipschitz <= 2`, the condition for guaranteed descent.
    pub fn step_is_stable(&self, lipschitz: f64) -> bool {
        self.step * lipschitz <= 2.0
    }
}

/// Evaluable estimate of the nonparametric component.
#[derive(Debug, Clone)]
pub enum Predictor {
    /// Difference network `f~_theta - f~_theta0`.
    Network {
        params: Arc<NetParams>,
        params0: Arc<NetParams>,
    },
    /// Kernel expansion `sum_i alpha_i K(., anchor_i)`.
    Kernel {
        kernel: KernelKind,
        anchors: Arc<Vec<Vec<f64>>>,
        alpha: DVector<f64>,
    },
    Spline {
        basis: SplineBasis,
        coefs: DVector<f64>,
    },
    LocalLinear(LocalLinearPredictor),
    Constant(f64),
}

impl Predictor {
    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        let xm = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.eval_batch(&xm)?[0])
    }

    /// Predictions for every row of `x`.
    pub fn eval_batch(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        match self {
            Predictor::Network { params, params0 } => mlp::forward_batch(params, params0, x),
            Predictor::Kernel {
                kernel,
                anchors,
                alpha,
            } => {
                let d = anchors.first().map_or(0, Vec::len);
                if x.ncols() != d {
                    return dim_err(format!("predictor expects {d} features, got {}", x.ncols()));
                }
                let cross = kernel.cross(&linalg::rows(x), anchors);
                Ok(cross * alpha)
            }
            Predictor::Spline { basis, coefs } => Ok(basis.design(x)? * coefs),
            Predictor::LocalLinear(p) => p.eval_batch(x),
            Predictor::Constant(c) => Ok(DVector::from_element(x.nrows(), *c)),
        }
    }
}

/// Summary numbers of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub final_objective: f64,
    pub beta_grad_norm: f64,
    pub f_grad_norm: f64,
    pub lambda: f64,
    pub step: f64,
    pub steps: usize,
    pub seed: u64,
    pub objective_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta_hat: DVector<f64>,
    pub predictor: Predictor,
    pub diagnostics: FitDiagnostics,
}

impl FitResult {
    /// Index `Z_i^T beta_hat + f_hat(X_i)` for every row of `data`.
    pub fn index(&self, data: &Dataset) -> Result<DVector<f64>> {
        Ok(&data.z * &self.beta_hat + self.predictor.eval_batch(&data.x)?)
    }
}

/// Mean loss of a fitted model on `data` (no penalty).
pub fn empirical_risk(fit: &FitResult, data: &Dataset, loss: &LossSpec) -> Result<f64> {
    let index = fit.index(data)?;
    let mut total = 0.0;
    for (t, &y) in index.iter().zip(data.y.iter()) {
        loss.check_response(y)?;
        total += loss.index_value(*t, y);
    }
    Ok(total / data.n() as f64)
}

fn check_beta_dim(data: &Dataset, beta: &DVector<f64>) -> Result<()> {
    if beta.len() != data.p() {
        return dim_err(format!("beta has {} entries, Z has {} columns", beta.len(), data.p()));
    }
    Ok(())
}

fn initial_beta(data: &Dataset, config: &TrainConfig) -> Result<DVector<f64>> {
    match &config.fixed_beta {
        Some(b) if b.len() != data.p() => dim_err(format!(
            "fixed beta has {} entries, Z has {} columns",
            b.len(),
            data.p()
        )),
        Some(b) => Ok(DVector::from_column_slice(b)),
        None => Ok(DVector::zeros(data.p())),
    }
}

fn check_finite(v: f64, what: &str) -> Result<()> {
    if !v.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite {what}; the step size is likely too large"
        )));
    }
    Ok(())
}

fn check_divergence(history: &[f64], objective: f64) -> Result<()> {
    if let Some(&first) = history.first() {
        if first > 0.0 && objective > DIVERGENCE_FACTOR * first {
            return Err(Error::Numerical(format!(
                "objective {objective:e} exceeded {DIVERGENCE_FACTOR}x its initial value {first:e}; aborting"
            )));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// network flow

/// State of the network flow: `beta`, `theta` and the frozen `theta0`.
#[derive(Debug, Clone)]
pub struct NnFitState {
    pub beta: DVector<f64>,
    pub params: NetParams,
    pub params0: Arc<NetParams>,
    pub step_index: usize,
    pub objective_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
    /// `f~_theta0` at the training rows, filled on the first step.
    base0: Option<Arc<DVector<f64>>>,
}

impl NnFitState {
    pub fn new(params0: NetParams, beta: DVector<f64>) -> Self {
        Self {
            beta,
            params: params0.clone(),
            params0: Arc::new(params0),
            step_index: 0,
            objective_history: Vec::new(),
            grad_norm_history: Vec::new(),
            base0: None,
        }
    }

    /// `f_hat` on the rows of `x`.
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        mlp::forward_batch(&self.params, &self.params0, x)
    }

    pub fn predictor(&self) -> Predictor {
        Predictor::Network {
            params: Arc::new(self.params.clone()),
            params0: self.params0.clone(),
        }
    }
}

/// Data part of the network objective on a batch of rows.
struct NnEval {
    risk: f64,
    beta_grad: DVector<f64>,
    theta_grad: NetParams,
}

/// Optimizer steps in one pass over `n` rows.
pub fn steps_per_epoch(n: usize, batch: Batch) -> usize {
    match batch {
        Batch::Full => 1,
        Batch::Minibatch { size } => n.div_ceil(size.max(1)).max(1),
    }
}

/// Rows used by optimizer step `step_index`: minibatches walk through a fresh
/// permutation of the rows each epoch.
fn batch_indices(n: usize, config: &TrainConfig, step_index: usize) -> Option<Vec<usize>> {
    match config.batch {
        Batch::Full => None,
        Batch::Minibatch { size } if size >= n => None,
        Batch::Minibatch { size } => {
            let spe = steps_per_epoch(n, config.batch);
            let (epoch, k) = (step_index / spe, step_index % spe);
            let mut rng = derive_rng(config.seed, 0x100_0000 + epoch as u64);
            let mut idx: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            let mut chunk = idx[k * size..((k + 1) * size).min(n)].to_vec();
            chunk.sort_unstable();
            Some(chunk)
        }
    }
}

fn nn_evaluate(
    state: &mut NnFitState,
    data: &Dataset,
    loss: &LossSpec,
    sample_weights: Option<&DVector<f64>>,
    rows: Option<&[usize]>,
) -> Result<NnEval> {
    use std::borrow::Cow;
    if state.base0.is_none() {
        state.base0 = Some(Arc::new(mlp::forward_base_batch(&state.params0, &data.x)?));
    }
    let base0_all = state.base0.as_ref().expect("filled above").clone();
    let (x, z, y, base0, sw) = match rows {
        None => (
            Cow::Borrowed(&data.x),
            Cow::Borrowed(&data.z),
            Cow::Borrowed(&data.y),
            Cow::Borrowed(base0_all.as_ref()),
            sample_weights.map(Cow::Borrowed),
        ),
        Some(idx) => (
            Cow::Owned(data.x.select_rows(idx)),
            Cow::Owned(data.z.select_rows(idx)),
            Cow::Owned(data.y.select_rows(idx)),
            Cow::Owned(base0_all.select_rows(idx)),
            sample_weights.map(|w| Cow::Owned(w.select_rows(idx))),
        ),
    };
    let b = y.len() as f64;
    let cache = mlp::forward_cache(&state.params, &x)?;
    let f = cache.output() - base0.as_ref();
    let index = z.as_ref() * &state.beta + &f;
    let mut deriv = DVector::zeros(y.len());
    let mut risk = 0.0;
    for i in 0..y.len() {
        let w = sw.as_ref().map_or(1.0, |w| w[i]);
        risk += w * loss.index_value(index[i], y[i]);
        deriv[i] = w * loss.index_deriv(index[i], y[i]) / b;
    }
    let beta_grad = z.transpose() * &deriv;
    let theta_grad = mlp::backward(&state.params, &cache, &deriv)?;
    Ok(NnEval {
        risk: risk / b,
        beta_grad,
        theta_grad,
    })
}

fn validate_data(data: &Dataset, loss: &LossSpec) -> Result<()> {
    loss.validate()?;
    for &y in data.y.iter() {
        loss.check_response(y)?;
    }
    Ok(())
}

fn nn_step_impl(
    mut state: NnFitState,
    data: &Dataset,
    loss: &LossSpec,
    sample_weights: Option<&DVector<f64>>,
    config: &TrainConfig,
) -> Result<NnFitState> {
    check_beta_dim(data, &state.beta)?;
    let rows = batch_indices(data.n(), config, state.step_index);
    let lambda = config.lambda;
    let eval = nn_evaluate(&mut state, data, loss, sample_weights, rows.as_deref())?;
    let diff = (lambda > 0.0).then(|| state.params.difference(&state.params0));
    let penalty = diff.as_ref().map_or(0.0, NetParams::squared_norm);
    let objective = eval.risk + lambda * penalty;
    check_finite(objective, "objective")?;
    check_divergence(&state.objective_history, objective)?;

    let eta = config.step;
    // |g + 2 lambda (theta - theta0)|^2
    let cross = diff.as_ref().map_or(0.0, |d| eval.theta_grad.dot(d));
    let theta_grad_sq =
        eval.theta_grad.squared_norm() + 4.0 * lambda * cross + 4.0 * lambda * lambda * penalty;
    let beta_free = config.fixed_beta.is_none();
    let beta_grad_sq = if beta_free {
        eval.beta_grad.norm_squared()
    } else {
        0.0
    };
    let grad_norm = (beta_grad_sq + theta_grad_sq.max(0.0)).sqrt();
    check_finite(grad_norm, "gradient")?;

    if beta_free {
        state.beta.axpy(-eta, &eval.beta_grad, 1.0);
    }
    // theta <- theta - 2 lambda eta (theta - theta0) - eta g
    if let Some(d) = &diff {
        state.params.axpy(-2.0 * lambda * eta, d);
    }
    state.params.axpy(-eta, &eval.theta_grad);

    state.objective_history.push(objective);
    state.grad_norm_history.push(grad_norm);
    state.step_index += 1;
    Ok(state)
}

/// One explicit Euler step of the joint `(beta, theta)` flow.
///
/// The objective recorded in the history is the one at the state before the step.
pub fn nn_flow_step(
    state: NnFitState,
    data: &Dataset,
    loss: &LossSpec,
    config: &TrainConfig,
) -> Result<NnFitState> {
    nn_step_impl(state, data, loss, None, config)
}

/// Full objective `P_n l + lambda |theta - theta0|^2` at `state`.
pub fn nn_objective(state: &NnFitState, data: &Dataset, loss: &LossSpec, lambda: f64) -> Result<f64> {
    let f = state.predict(&data.x)?;
    let index = &data.z * &state.beta + f;
    let risk: f64 = index
        .iter()
        .zip(data.y.iter())
        .map(|(t, &y)| loss.index_value(*t, y))
        .sum::<f64>()
        / data.n() as f64;
    Ok(risk + lambda * mlp::penalty(&state.params, &state.params0)?)
}

/// Trains the network flow and returns the fit together with the states
/// recorded at `config.checkpoints`.
pub fn train_nn(
    data: &Dataset,
    loss: &LossSpec,
    arch: NetArch,
    config: &TrainConfig,
) -> Result<(FitResult, Vec<NnFitState>)> {
    train_nn_weighted(data, loss, arch, config, None)
}

pub(crate) fn train_nn_weighted(
    data: &Dataset,
    loss: &LossSpec,
    arch: NetArch,
    config: &TrainConfig,
    sample_weights: Option<&DVector<f64>>,
) -> Result<(FitResult, Vec<NnFitState>)> {
    config.validate()?;
    arch.validate()?;
    validate_data(data, loss)?;
    if data.n() < 2 {
        return arg_err("training needs at least two observations");
    }
    if arch.input_dim != data.d() {
        return dim_err(format!(
            "network takes {} features, data has {}",
            arch.input_dim,
            data.d()
        ));
    }
    if let Some(w) = sample_weights {
        if w.len() != data.n() {
            return dim_err("sample weights do not match the number of rows");
        }
    }
    let params0 = mlp::init_params(arch, config.seed);
    let mut state = NnFitState::new(params0, initial_beta(data, config)?);
    let spe = steps_per_epoch(data.n(), config.batch);
    let mut checkpoints = Vec::with_capacity(config.checkpoints.len());
    let mut next_ckpt = config.checkpoints.iter().peekable();
    for epoch in 0..=config.steps {
        while next_ckpt.peek() == Some(&&epoch) {
            checkpoints.push(state.clone());
            next_ckpt.next();
        }
        if epoch == config.steps {
            break;
        }
        for _ in 0..spe {
            state = nn_step_impl(state, data, loss, sample_weights, config)?;
        }
    }

    // final objective and gradient norms at the returned state
    let mut probe = state.clone();
    let eval = nn_evaluate(&mut probe, data, loss, sample_weights, None)?;
    let mut theta_grad = eval.theta_grad;
    let mut objective = eval.risk;
    if config.lambda > 0.0 {
        let diff = state.params.difference(&state.params0);
        objective += config.lambda * diff.squared_norm();
        theta_grad.axpy(2.0 * config.lambda, &diff);
    }
    check_finite(objective, "objective")?;
    let beta_grad_norm = if config.fixed_beta.is_none() {
        eval.beta_grad.norm()
    } else {
        0.0
    };
    let f_grad_norm = theta_grad.squared_norm().sqrt();
    let mut objective_history = state.objective_history.clone();
    objective_history.push(objective);
    let mut grad_norm_history = state.grad_norm_history.clone();
    grad_norm_history.push((beta_grad_norm.powi(2) + f_grad_norm.powi(2)).sqrt());

    let fit = FitResult {
        beta_hat: state.beta.clone(),
        predictor: state.predictor(),
        diagnostics: FitDiagnostics {
            final_objective: objective,
            beta_grad_norm,
            f_grad_norm,
            lambda: config.lambda,
            step: config.step,
            steps: state.step_index,
            seed: config.seed,
            objective_history,
            grad_norm_history,
        },
    };
    Ok((fit, checkpoints))
}

/// Initializes a network from `config.seed` and runs `config.steps` flow steps.
pub fn fit_nn(data: &Dataset, loss: &LossSpec, arch: NetArch, config: &TrainConfig) -> Result<FitResult> {
    Ok(train_nn(data, loss, arch, config)?.0)
}

// ---------------------------------------------------------------------------
// kernel flow

/// State of the kernel flow: `beta` and the coefficients of `f` on the anchors.
#[derive(Debug, Clone)]
pub struct RkhsFitState {
    pub beta: DVector<f64>,
    pub alpha: DVector<f64>,
    pub gram: Arc<GramMatrix>,
    pub kernel: KernelKind,
    pub step_index: usize,
    pub objective_history: Vec<f64>,
    pub grad_norm_history: Vec<f64>,
}

impl RkhsFitState {
    pub fn new(kernel: KernelKind, gram: Arc<GramMatrix>, beta: DVector<f64>) -> Self {
        let n = gram.len();
        Self {
            beta,
            alpha: DVector::zeros(n),
            gram,
            kernel,
            step_index: 0,
            objective_history: Vec::new(),
            grad_norm_history: Vec::new(),
        }
    }

    /// `f` at the anchors, `G alpha`.
    pub fn f_at_anchors(&self) -> DVector<f64> {
        self.gram.entries() * &self.alpha
    }

    /// `|f|_H^2 = alpha^T G alpha`.
    pub fn rkhs_norm_sq(&self) -> f64 {
        self.alpha.dot(&self.f_at_anchors())
    }

    pub fn predictor(&self) -> Predictor {
        Predictor::Kernel {
            kernel: self.kernel.clone(),
            anchors: Arc::new(self.gram.anchors().to_vec()),
            alpha: self.alpha.clone(),
        }
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        self.predictor().eval_batch(x)
    }
}

struct RkhsEval {
    objective: f64,
    beta_grad: DVector<f64>,
    /// Coefficients of the RKHS gradient of the objective.
    alpha_grad: DVector<f64>,
    fvals: DVector<f64>,
}

fn rkhs_evaluate(state: &RkhsFitState, data: &Dataset, loss: &LossSpec, lambda: f64) -> Result<RkhsEval> {
    let n = data.n();
    if state.gram.len() != n {
        return dim_err(format!("Gram has {} anchors, data has {n} rows", state.gram.len()));
    }
    check_beta_dim(data, &state.beta)?;
    let fvals = state.f_at_anchors();
    let index = &data.z * &state.beta + &fvals;
    let mut deriv = DVector::zeros(n);
    let mut risk = 0.0;
    for i in 0..n {
        risk += loss.index_value(index[i], data.y[i]);
        deriv[i] = loss.index_deriv(index[i], data.y[i]) / n as f64;
    }
    let objective = risk / n as f64 + lambda * state.alpha.dot(&fvals);
    let beta_grad = data.z.transpose() * &deriv;
    let alpha_grad = deriv + 2.0 * lambda * &state.alpha;
    Ok(RkhsEval {
        objective,
        beta_grad,
        alpha_grad,
        fvals,
    })
}

/// One explicit Euler step of the kernel flow.
pub fn rkhs_flow_step(
    mut state: RkhsFitState,
    data: &Dataset,
    loss: &LossSpec,
    config: &TrainConfig,
) -> Result<RkhsFitState> {
    let eval = rkhs_evaluate(&state, data, loss, config.lambda)?;
    check_finite(eval.objective, "objective")?;
    check_divergence(&state.objective_history, eval.objective)?;
    let beta_free = config.fixed_beta.is_none();
    let h_norm_sq = eval.alpha_grad.dot(&(state.gram.entries() * &eval.alpha_grad));
    let beta_sq = if beta_free { eval.beta_grad.norm_squared() } else { 0.0 };
    let grad_norm = (beta_sq + h_norm_sq.max(0.0)).sqrt();
    check_finite(grad_norm, "gradient")?;
    if beta_free {
        state.beta.axpy(-config.step, &eval.beta_grad, 1.0);
    }
    state.alpha.axpy(-config.step, &eval.alpha_grad, 1.0);
    if state.alpha.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite kernel coefficients".into()));
    }
    let _ = eval.fvals;
    state.objective_history.push(eval.objective);
    state.grad_norm_history.push(grad_norm);
    state.step_index += 1;
    Ok(state)
}

/// Objective `P_n l + lambda alpha^T G alpha` at `state`.
pub fn rkhs_objective(state: &RkhsFitState, data: &Dataset, loss: &LossSpec, lambda: f64) -> Result<f64> {
    Ok(rkhs_evaluate(state, data, loss, lambda)?.objective)
}

/// Kernel flow with an arbitrary kernel; returns the fit and the recorded states.
pub fn train_kernel_flow(
    data: &Dataset,
    loss: &LossSpec,
    kernel: KernelKind,
    config: &TrainConfig,
) -> Result<(FitResult, Vec<RkhsFitState>)> {
    let gram = Arc::new(gram_from_rows(&kernel, data.x_rows())?);
    train_kernel_flow_with_gram(data, loss, kernel, gram, config)
}

/// As [`train_kernel_flow`] with a precomputed Gram matrix over the data rows.
pub fn train_kernel_flow_with_gram(
    data: &Dataset,
    loss: &LossSpec,
    kernel: KernelKind,
    gram: Arc<GramMatrix>,
    config: &TrainConfig,
) -> Result<(FitResult, Vec<RkhsFitState>)> {
    config.validate()?;
    validate_data(data, loss)?;
    if data.n() < 2 && config.lambda > 0.0 && data.n() == 0 {
        return arg_err("kernel flow needs data");
    }
    let mut state = RkhsFitState::new(kernel, gram, initial_beta(data, config)?);
    let mut checkpoints = Vec::new();
    let mut next_ckpt = config.checkpoints.iter().peekable();
    for _ in 0..config.steps {
        while next_ckpt.peek() == Some(&&state.step_index) {
            checkpoints.push(state.clone());
            next_ckpt.next();
        }
        state = rkhs_flow_step(state, data, loss, config)?;
    }
    while next_ckpt.peek() == Some(&&state.step_index) {
        checkpoints.push(state.clone());
        next_ckpt.next();
    }
    let eval = rkhs_evaluate(&state, data, loss, config.lambda)?;
    let beta_grad_norm = if config.fixed_beta.is_none() {
        eval.beta_grad.norm()
    } else {
        0.0
    };
    let f_grad_norm = eval
        .alpha_grad
        .dot(&(state.gram.entries() * &eval.alpha_grad))
        .max(0.0)
        .sqrt();
    let mut objective_history = state.objective_history.clone();
    objective_history.push(eval.objective);
    let mut grad_norm_history = state.grad_norm_history.clone();
    grad_norm_history.push((beta_grad_norm.powi(2) + f_grad_norm.powi(2)).sqrt());
    let fit = FitResult {
        beta_hat: state.beta.clone(),
        predictor: state.predictor(),
        diagnostics: FitDiagnostics {
            final_objective: eval.objective,
            beta_grad_norm,
            f_grad_norm,
            lambda: config.lambda,
            step: config.step,
            steps: config.steps,
            seed: config.seed,
            objective_history,
            grad_norm_history,
        },
    };
    Ok((fit, checkpoints))
}

/// Kernel flow with the limiting NTK of depth `kernel.depth`.
pub fn fit_rkhs(data: &Dataset, loss: &LossSpec, kernel: KernelSpec, config: &TrainConfig) -> Result<FitResult> {
    Ok(train_kernel_flow(data, loss, KernelKind::Ntk(kernel), config)?.0)
}

// ---------------------------------------------------------------------------
// step size

/// Upper bound on the gradient-Lipschitz constant of the kernel objective in
/// the `(beta, f)` metric: `c (lmax(Z^T Z)/n + lmax(G)/n) + 2 lambda`, with `c`
/// the loss curvature bound.
pub fn kernel_lipschitz_bound(gram: &GramMatrix, data: &Dataset, loss: &LossSpec, lambda: f64) -> f64 {
    let n = data.n().max(1) as f64;
    let ztz = data.z.transpose() * &data.z;
    let z_max = if data.p() > 0 { power_max_eigen(&ztz, 200) } else { 0.0 };
    let g_max = power_max_eigen(gram.entries(), 200);
    loss.gradient_lipschitz() * (z_max + g_max) / n + 2.0 * lambda
}

/// The same bound for the network flow, using the limiting NTK of the
/// architecture as a stand-in for the finite-width kernel.
pub fn nn_lipschitz_bound(arch: NetArch, data: &Dataset, loss: &LossSpec, lambda: f64) -> Result<f64> {
    let kernel = KernelSpec::new(arch.depth)?;
    let gram = gram_from_rows(&kernel, data.x_rows())?;
    Ok(kernel_lipschitz_bound(&gram, data, loss, lambda))
}

/// Step size `1 / lipschitz`, the guarded choice for monotone descent.
pub fn guarded_step(lipschitz: f64) -> f64 {
    1.0 / lipschitz
}

// ---------------------------------------------------------------------------
// tuning

/// Penalty level `c * n^{-(d+1)/(2d+1)}`, or `c * n^{-(d+1)/(2s+d)}` when the
/// smoothness `s` of the truth is supplied.
pub fn lambda_schedule(n: usize, d: usize, smoothness: Option<f64>, c: f64) -> Result<f64> {
    if n == 0 || d == 0 {
        return arg_err("lambda schedule needs n >= 1 and d >= 1");
    }
    let d_f = d as f64;
    let exponent = match smoothness {
        None => (d_f + 1.0) / (2.0 * d_f + 1.0),
        Some(s) if s > d_f / 2.0 => (d_f + 1.0) / (2.0 * s + d_f),
        Some(s) => return arg_err(format!("smoothness {s} must exceed d/2 = {}", d_f / 2.0)),
    };
    Ok(c * (n as f64).powf(-exponent))
}

/// Outcome of a validation search.
#[derive(Debug, Clone)]
pub struct Selection<C> {
    pub index: usize,
    pub candidate: C,
    /// Validation risk per candidate; failed fits are `+inf`.
    pub validation_risks: Vec<f64>,
}

/// Fraction of the data used for training in the validation split.
pub const TRAIN_FRACTION: f64 = 0.8;

/// Picks the candidate with the smallest unpenalized validation risk on a
/// deterministic 80/20 split. Ties go to the smaller `lambda_of`, then to
/// the earlier index. Candidates whose fit fails count as `+inf`.
pub fn select_by_validation<C, F, G>(
    data: &Dataset,
    loss: &LossSpec,
    candidates: &[C],
    split_seed: u64,
    lambda_of: G,
    fit: F,
) -> Result<Selection<C>>
where
    C: Clone,
    F: Fn(&Dataset, &C) -> Result<FitResult>,
    G: Fn(&C) -> f64,
{
    if candidates.is_empty() {
        return Err(Error::Config("hyperparameter grid is empty".into()));
    }
    if data.n() < 5 {
        return arg_err("validation split needs at least 5 observations");
    }
    if candidates.len() == 1 {
        return Ok(Selection {
            index: 0,
            candidate: candidates[0].clone(),
            validation_risks: vec![f64::NAN],
        });
    }
    let (train, valid) = data.split(TRAIN_FRACTION, split_seed)?;
    let risks: Vec<f64> = candidates
        .iter()
        .map(|c| {
            fit(&train, c)
                .and_then(|f| empirical_risk(&f, &valid, loss))
                .ok()
                .filter(|r| r.is_finite())
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    let mut best = 0;
    for i in 1..candidates.len() {
        let key_i = (risks[i], lambda_of(&candidates[i]));
        let key_b = (risks[best], lambda_of(&candidates[best]));
        if key_i.0 < key_b.0 || (key_i.0 == key_b.0 && key_i.1 < key_b.1) {
            best = i;
        }
    }
    if !risks[best].is_finite() {
        return Err(Error::Numerical("every candidate in the grid failed to fit".into()));
    }
    Ok(Selection {
        index: best,
        candidate: candidates[best].clone(),
        validation_risks: risks,
    })
}

/// Validation-based choice among network training configs; the split is
/// seeded by the first config's seed.
pub fn select_hyperparams(
    data: &Dataset,
    loss: &LossSpec,
    arch: NetArch,
    grid: &[TrainConfig],
) -> Result<TrainConfig> {
    let seed = grid.first().map_or(0, |c| c.seed);
    let sel = select_by_validation(data, loss, grid, seed, |c| c.lambda, |train, cfg| {
        fit_nn(train, loss, arch, cfg)
    })?;
    Ok(sel.candidate)
}

// ---------------------------------------------------------------------------
// diagnostics

/// Extra inputs for [`convergence_report`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ConvergenceOptions {
    /// Known optimal objective; the smallest recorded value is used otherwise.
    pub optimum: Option<f64>,
    /// Strong-convexity estimate `mu`.
    pub mu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub monotone: bool,
    /// Steps `k` with `history[k+1] > history[k]`.
    pub violations: Vec<usize>,
    pub flags: Vec<String>,
    /// `max_k (k+1) * (history[k] - optimum)`, the constant of an O(1/t) envelope.
    pub sublinear_constant: f64,
    /// Least-squares slope of `ln(history[k] - optimum)` over the last half.
    pub log_gap_slope: Option<f64>,
    pub log_gap_r2: Option<f64>,
    /// Per-step decay `exp(-2 mu eta)` predicted from `mu`, when supplied.
    pub predicted_log_rate: Option<f64>,
}

/// Relative tolerance for calling two objective values equal.
const FLAT_TOL: f64 = 1e-12;

/// Descent and decay-rate diagnostics for an objective trace.
pub fn convergence_report(
    history: &[f64],
    grad_norms: &[f64],
    config: &TrainConfig,
    opts: ConvergenceOptions,
) -> ConvergenceReport {
    let mut flags = Vec::new();
    let violations: Vec<usize> = history
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] > w[0] + FLAT_TOL * w[0].abs().max(1.0))
        .map(|(k, _)| k)
        .collect();
    if !violations.is_empty() {
        flags.push(format!(
            "objective increased at {} step(s), first at step {}",
            violations.len(),
            violations[0]
        ));
    }
    let flat = history.len() >= 2
        && history
            .windows(2)
            .all(|w| (w[1] - w[0]).abs() <= FLAT_TOL * w[0].abs().max(1.0));
    let last_grad = grad_norms.last().copied().unwrap_or(0.0);
    if flat && last_grad > 1e-8 {
        flags.push(format!(
            "objective is constant while the gradient norm is {last_grad:e}"
        ));
    }

    let optimum = opts
        .optimum
        .unwrap_or_else(|| history.iter().copied().fold(f64::INFINITY, f64::min));
    let sublinear_constant = history
        .iter()
        .enumerate()
        .map(|(k, &h)| (k + 1) as f64 * (h - optimum).max(0.0))
        .fold(0.0, f64::max);

    let half = history.len() / 2;
    let pts: Vec<(f64, f64)> = history
        .iter()
        .enumerate()
        .skip(half)
        .filter(|(_, &h)| h - optimum > 0.0)
        .map(|(k, &h)| (k as f64, (h - optimum).ln()))
        .collect();
    let (log_gap_slope, log_gap_r2) = match linear_fit(&pts) {
        Some((slope, r2)) => (Some(slope), Some(r2)),
        None => (None, None),
    };
    let predicted_log_rate = opts.mu.map(|mu| -2.0 * mu * config.step);
    if let (Some(pred), Some(slope)) = (predicted_log_rate, log_gap_slope) {
        if slope > 0.5 * pred {
            flags.push(format!(
                "log-gap slope {slope:e} is slower than half the strong-convexity rate {pred:e}"
            ));
        }
    }
    ConvergenceReport {
        monotone: violations.is_empty(),
        violations,
        flags,
        sublinear_constant,
        log_gap_slope,
        log_gap_r2,
        predicted_log_rate,
    }
}

/// Least-squares line through `pts`; returns `(slope, R^2)`.
pub fn linear_fit(pts: &[(f64, f64)]) -> Option<(f64, f64)> {
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Some((slope, r2))
}

/// Gaps between time-aligned network and kernel flow states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub max_beta_gap: f64,
    pub max_f_gap: f64,
    pub steps: Vec<usize>,
    pub beta_gaps: Vec<f64>,
    pub f_gaps: Vec<f64>,
}

/// `max_s |beta_hat_s - beta_tilde_s|` and `max_s sup_probe |f_hat_s - f_tilde_s|`.
pub fn flow_gap(
    nn_ckpts: &[NnFitState],
    rkhs_ckpts: &[RkhsFitState],
    probe: &DMatrix<f64>,
) -> Result<GapReport> {
    if nn_ckpts.len() != rkhs_ckpts.len() {
        return Err(Error::Config(format!(
            "{} network checkpoints vs {} kernel checkpoints",
            nn_ckpts.len(),
            rkhs_ckpts.len()
        )));
    }
    let mut report = GapReport {
        max_beta_gap: 0.0,
        max_f_gap: 0.0,
        steps: Vec::new(),
        beta_gaps: Vec::new(),
        f_gaps: Vec::new(),
    };
    for (a, b) in nn_ckpts.iter().zip(rkhs_ckpts) {
        if a.step_index != b.step_index {
            return Err(Error::Config(format!(
                "checkpoint steps differ: {} vs {}",
                a.step_index, b.step_index
            )));
        }
        let beta_gap = (&a.beta - &b.beta).norm();
        let f_nn = a.predict(probe)?;
        let f_k = b.predict(probe)?;
        let f_gap = (f_nn - f_k).amax();
        report.steps.push(a.step_index);
        report.beta_gaps.push(beta_gap);
        report.f_gaps.push(f_gap);
        report.max_beta_gap = report.max_beta_gap.max(beta_gap);
        report.max_f_gap = report.max_f_gap.max(f_gap);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::TaskKind;

    fn toy(n: usize, seed: u64) -> Dataset {
        let mut rng = derive_rng(seed, 9);
        let x = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let z = DMatrix::from_fn(n, 2, |_, _| rng.random::<f64>());
        let y = DVector::from_fn(n, |i, _| (3.0 * x[(i, 0)]).sin() + z[(i, 0)] - 0.5 * z[(i, 1)]);
        Dataset::new(y, z, x, TaskKind::Regression).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.checkpoints = vec![5, 2];
        assert!(c.validate().is_err());
        c.checkpoints = vec![2, 2000];
        assert!(c.validate().is_err());
        c.checkpoints.clear();
        c.step = 0.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig { lambda: -1.0, ..Default::default() }.validate().is_err());
        let parsed: TrainConfig = serde_json::from_str(r#"{"lambda": 0.1}"#).unwrap();
        assert_eq!(parsed.step, 1e-3);
        assert_eq!(parsed.steps, 1000);
        assert!(c.step_is_stable(1.0) || c.step == 0.0);
    }

    #[test]
    fn zero_data_gradient_at_init_is_stationary() {
        let n = 6;
        let data = Dataset::new(
            DVector::zeros(n),
            DMatrix::zeros(n, 2),
            DMatrix::from_fn(n, 2, |i, j| (i + j) as f64 * 0.1),
            TaskKind::Regression,
        )
        .unwrap();
        let arch = NetArch::new(2, 8, 2).unwrap();
        let state = NnFitState::new(mlp::init_params(arch, 1), DVector::zeros(2));
        let cfg = TrainConfig { lambda: 0.3, ..Default::default() };
        let next = nn_flow_step(state.clone(), &data, &LossSpec::Squared, &cfg).unwrap();
        assert_eq!(next.params, state.params);
        assert_eq!(next.beta, state.beta);
    }

    #[test]
    fn penalty_contracts_towards_init() {
        let n = 4;
        // Y = Z beta + f with beta = 0 and f = 0 makes the data gradient vanish only at theta0,
        // so use zero weights through an all-zero residual after moving theta.
        let data = Dataset::new(
            DVector::zeros(n),
            DMatrix::zeros(n, 1),
            DMatrix::from_fn(n, 1, |i, _| i as f64),
            TaskKind::Regression,
        )
        .unwrap();
        let arch = NetArch::new(1, 3, 1).unwrap();
        let p0 = mlp::init_params(arch, 2);
        let mut state = NnFitState::new(p0.clone(), DVector::zeros(1));
        // shift only the hidden bias of a unit that is dead on every input: data gradient stays 0
        let mut p = p0.clone();
        p.weights_mut()[0].fill(0.0);
        p.biases_mut()[0].fill(-5.0);
        state.params = p.clone();
        // make the output of theta agree with theta0 on the data so residuals are zero
        let mut p0_dead = p0.clone();
        p0_dead.weights_mut()[0].fill(0.0);
        p0_dead.biases_mut()[0].fill(-5.0);
        p0_dead.biases_mut()[0][0] = -4.0;
        state.params0 = Arc::new(p0_dead.clone());
        let cfg = TrainConfig { lambda: 0.5, step: 0.1, ..Default::default() };
        let before = state.params.difference(&p0_dead);
        let next = nn_flow_step(state, &data, &LossSpec::Squared, &cfg).unwrap();
        let after = next.params.difference(&p0_dead);
        let factor = 1.0 - 2.0 * 0.5 * 0.1;
        let flat_b = before.to_flat();
        let flat_a = after.to_flat();
        for (a, b) in flat_a.values().iter().zip(flat_b.values()) {
            assert!((a - factor * b).abs() < 1e-12);
        }
    }

    #[test]
    fn small_step_decreases_objective() {
        let data = toy(3, 1);
        let arch = NetArch::new(2, 16, 2).unwrap();
        let cfg = TrainConfig { lambda: 0.01, step: 1e-3, ..Default::default() };
        let state = NnFitState::new(mlp::init_params(arch, 4), DVector::zeros(2));
        let before = nn_objective(&state, &data, &LossSpec::Squared, cfg.lambda).unwrap();
        let next = nn_flow_step(state, &data, &LossSpec::Squared, &cfg).unwrap();
        let after = nn_objective(&next, &data, &LossSpec::Squared, cfg.lambda).unwrap();
        assert!(after <= before, "{after} > {before}");
        assert_eq!(next.objective_history, vec![before]);
    }

    #[test]
    fn beta_gradient_depends_on_theta_only_through_fitted_values() {
        let data = toy(12, 2);
        let arch = NetArch::new(2, 8, 2).unwrap();
        let cfg = TrainConfig { steps: 5, step: 0.01, ..Default::default() };
        let (_, mut states) = {
            let c = TrainConfig { checkpoints: vec![5], ..cfg.clone() };
            train_nn(&data, &LossSpec::Squared, arch, &c).unwrap()
        };
        let state = states.pop().unwrap();
        let f = state.predict(&data.x).unwrap();
        let index = &data.z * &state.beta + &f;
        let deriv = DVector::from_fn(data.n(), |i, _| {
            LossSpec::Squared.grad(0.0, index[i], data.y[i]).unwrap().0 / data.n() as f64
        });
        let expected = data.z.transpose() * deriv;
        let next = nn_flow_step(state.clone(), &data, &LossSpec::Squared, &cfg).unwrap();
        let observed = (&state.beta - &next.beta) / cfg.step;
        assert!((observed - expected).amax() < 1e-12);
    }

    #[test]
    fn fit_is_deterministic_and_zero_data_gives_zero_fit() {
        let data = toy(10, 3);
        let arch = NetArch::new(2, 8, 2).unwrap();
        let cfg = TrainConfig { steps: 20, step: 0.01, lambda: 0.01, seed: 5, ..Default::default() };
        let a = fit_nn(&data, &LossSpec::Squared, arch, &cfg).unwrap();
        let b = fit_nn(&data, &LossSpec::Squared, arch, &cfg).unwrap();
        assert_eq!(a.beta_hat, b.beta_hat);
        assert_eq!(a.diagnostics, b.diagnostics);

        let zero = Dataset::new(
            DVector::zeros(8),
            DMatrix::zeros(8, 2),
            DMatrix::from_fn(8, 2, |i, j| (i * 2 + j) as f64 * 0.1),
            TaskKind::Regression,
        )
        .unwrap();
        let fit = fit_nn(&zero, &LossSpec::Squared, arch, &cfg).unwrap();
        assert_eq!(fit.beta_hat, DVector::zeros(2));
        assert!(fit.predictor.eval(&[0.3, 0.8]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn stronger_penalty_keeps_theta_closer() {
        let data = toy(10, 6);
        let arch = NetArch::new(2, 16, 2).unwrap();
        let dist = |lambda: f64| {
            let cfg = TrainConfig { steps: 200, step: 0.01, lambda, seed: 1, ..Default::default() };
            let (_, mut st) = train_nn(
                &data,
                &LossSpec::Squared,
                arch,
                &TrainConfig { checkpoints: vec![200], ..cfg },
            )
            .unwrap();
            let s = st.pop().unwrap();
            mlp::penalty(&s.params, &s.params0).unwrap()
        };
        assert!(dist(1.0) < dist(0.1));
    }

    #[test]
    fn minibatch_runs_are_reproducible() {
        let data = toy(30, 7);
        let arch = NetArch::new(1, 8, 2).unwrap();
        let cfg = TrainConfig {
            steps: 10,
            step: 0.01,
            batch: Batch::Minibatch { size: 8 },
            ..Default::default()
        };
        let a = fit_nn(&data, &LossSpec::Squared, arch, &cfg).unwrap();
        let b = fit_nn(&data, &LossSpec::Squared, arch, &cfg).unwrap();
        assert_eq!(a.beta_hat, b.beta_hat);
    }

    #[test]
    fn kernel_flow_fixed_point_and_contraction() {
        let data = toy(5, 8);
        let kernel = KernelKind::Ntk(KernelSpec::new(2).unwrap());
        let gram = Arc::new(gram_from_rows(&kernel, data.x_rows()).unwrap());
        // with residuals identically zero the data gradient vanishes
        let mut exact = data.clone();
        exact.y = &data.z * DVector::from_vec(vec![0.4, -0.2]);
        let state = RkhsFitState::new(kernel.clone(), gram.clone(), DVector::from_vec(vec![0.4, -0.2]));
        let cfg = TrainConfig { lambda: 0.2, step: 0.1, ..Default::default() };
        let next = rkhs_flow_step(state.clone(), &exact, &LossSpec::Squared, &cfg).unwrap();
        assert_eq!(next.alpha, state.alpha);
        assert_eq!(next.beta, state.beta);

        // Huber with huge delta and zero residual has l' = 0; nonzero alpha shrinks by (1 - 2 lambda eta)
        let mut moved = state.clone();
        moved.alpha = DVector::from_vec(vec![1.0, -2.0, 0.5, 0.0, 3.0]);
        let mut target = exact.clone();
        target.y = &exact.y + moved.f_at_anchors();
        let next = rkhs_flow_step(moved.clone(), &target, &LossSpec::Squared, &cfg).unwrap();
        let factor = 1.0 - 2.0 * 0.2 * 0.1;
        assert!((next.alpha - factor * moved.alpha).amax() < 1e-12);
    }

    #[test]
    fn lambda_schedule_values() {
        assert!((lambda_schedule(1000, 5, None, 1.0).unwrap() - 1000f64.powf(-6.0 / 11.0)).abs() < 1e-15);
        assert!((lambda_schedule(1000, 5, None, 1.0).unwrap() - 0.023101).abs() < 1e-6);
        assert!((lambda_schedule(1000, 5, Some(5.0), 1.0).unwrap() - 0.063096).abs() < 1e-6);
        let a = lambda_schedule(100, 1, None, 2.0).unwrap();
        let b = lambda_schedule(400, 1, None, 2.0).unwrap();
        assert!((b / a - 4f64.powf(-2.0 / 3.0)).abs() < 1e-12);
        assert!(lambda_schedule(100, 4, Some(2.0), 1.0).is_err());
        assert!(lambda_schedule(0, 4, None, 1.0).is_err());
    }

    #[test]
    fn selection_rules() {
        let data = toy(20, 11);
        let loss = LossSpec::Squared;
        let arch = NetArch::new(1, 4, 2).unwrap();
        let one = vec![TrainConfig { steps: 3, ..Default::default() }];
        assert_eq!(select_hyperparams(&data, &loss, arch, &one).unwrap(), one[0]);
        let dup = vec![
            TrainConfig { steps: 3, seed: 2, ..Default::default() },
            TrainConfig { steps: 3, seed: 2, ..Default::default() },
        ];
        let sel = select_by_validation(&data, &loss, &dup, 1, |c| c.lambda, |tr, c| fit_nn(tr, &loss, arch, c)).unwrap();
        assert_eq!(sel.index, 0);
        assert!(select_hyperparams(&data, &loss, arch, &[]).is_err());
    }

    #[test]
    fn convergence_report_flags() {
        let cfg = TrainConfig::default();
        let dec = [5.0, 4.0, 3.5, 3.2, 3.1];
        let r = convergence_report(&dec, &[1.0; 5], &cfg, ConvergenceOptions::default());
        assert!(r.monotone && r.flags.is_empty());
        let flat = [2.0; 6];
        let r = convergence_report(&flat, &[0.5; 6], &cfg, ConvergenceOptions::default());
        assert_eq!(r.flags.len(), 1);
        let bumpy = [3.0, 2.0, 2.5, 1.0];
        let r = convergence_report(&bumpy, &[1.0; 4], &cfg, ConvergenceOptions::default());
        assert!(!r.monotone);
        assert_eq!(r.violations, vec![1]);
        // exact geometric decay has a straight log-gap line
        let geo: Vec<f64> = (0..50).map(|k| 1.0 + 0.9f64.powi(k)).collect();
        let r = convergence_report(&geo, &[1.0; 50], &cfg, ConvergenceOptions { optimum: Some(1.0), mu: None });
        assert!((r.log_gap_slope.unwrap() - 0.9f64.ln()).abs() < 1e-10);
        assert!(r.log_gap_r2.unwrap() > 0.999_999);
    }

    #[test]
    fn flow_gap_rejects_misaligned_and_is_zero_at_start() {
        let data = toy(6, 12);
        let arch = NetArch::new(2, 8, 2).unwrap();
        let cfg = TrainConfig { steps: 2, step: 0.01, checkpoints: vec![0], ..Default::default() };
        let (_, nn) = train_nn(&data, &LossSpec::Squared, arch, &cfg).unwrap();
        let (_, rk) = train_kernel_flow(&data, &LossSpec::Squared, KernelKind::Ntk(KernelSpec::new(2).unwrap()), &cfg).unwrap();
        let rep = flow_gap(&nn, &rk, &data.x).unwrap();
        assert_eq!(rep.max_beta_gap, 0.0);
        assert_eq!(rep.max_f_gap, 0.0);
        assert!(flow_gap(&nn, &[], &data.x).is_err());
        let mut shifted = rk.clone();
        shifted[0].step_index = 1;
        assert!(flow_gap(&nn, &shifted, &data.x).is_err());
    }

    #[test]
    fn divergent_step_aborts() {
        let data = toy(10, 13);
        let arch = NetArch::new(2, 16, 2).unwrap();
        let cfg = TrainConfig { steps: 200, step: 5.0, ..Default::default() };
        let err = fit_nn(&data, &LossSpec::Squared, arch, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }
}

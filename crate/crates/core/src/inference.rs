//! Inference for `beta`: the nuisance projection `h`, plug-in and sandwich
//! variance estimators, Wald intervals and coverage.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::linalg::{self, spd_inverse, symmetrize};
use crate::losses::{normal_cdf, Link, LossSpec};
use crate::mlp::NetArch;
use crate::simgen::{Dataset, TaskKind};
use crate::train::{self, FitResult, Predictor, TrainConfig};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before forming weights.
pub const PROB_CLAMP: f64 = 1e-8;
/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959964;
pub const AUX_DEPTH: usize = 3;
pub const AUX_WIDTH: usize = 256;
pub const AUX_STEPS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Uniform,
    /// `phi_hat (1 - phi_hat)` from a fitted binary model.
    Bernoulli,
    General,
}

/// Componentwise estimate of `E_w[Z | X]`.
#[derive(Debug, Clone)]
pub struct NuisanceProjection {
    pub components: Vec<Predictor>,
    pub weights_used: WeightKind,
}

impl NuisanceProjection {
    /// The zero map, under which efficient scores reduce to plain scores.
    pub fn zero(p: usize) -> Self {
        Self {
            components: vec![Predictor::Constant(0.0); p],
            weights_used: WeightKind::General,
        }
    }

    pub fn p(&self) -> usize {
        self.components.len()
    }

    /// `h_hat(X_i)` as an n x p matrix.
    pub fn eval_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(x.nrows(), self.p());
        for (j, c) in self.components.iter().enumerate() {
            out.set_column(j, &c.eval_batch(x)?);
        }
        Ok(out)
    }
}

/// Fits each column of `z` on `x` by weighted least squares over the network
/// family `arch`. Weights are rescaled to mean one; component `j` uses seed
/// `config.seed + j`.
pub fn fit_conditional_mean(
    x: &DMatrix<f64>,
    z: &DMatrix<f64>,
    weights: &DVector<f64>,
    arch: NetArch,
    config: &TrainConfig,
) -> Result<NuisanceProjection> {
    let n = x.nrows();
    if z.nrows() != n || weights.len() != n {
        return dim_err(format!(
            "X has {n} rows, Z has {}, weights have {}",
            z.nrows(),
            weights.len()
        ));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return arg_err("weights must be finite and nonnegative");
    }
    let mean_w = weights.mean();
    if !(mean_w > 0.0) {
        return arg_err("weights are all zero");
    }
    let first = weights[0];
    let weights_used = if weights.iter().all(|&w| w == first) {
        WeightKind::Uniform
    } else {
        WeightKind::General
    };
    let normalized = weights / mean_w;
    let mut components = Vec::with_capacity(z.ncols());
    for j in 0..z.ncols() {
        let data = Dataset::new(
            z.column(j).into_owned(),
            DMatrix::zeros(n, 0),
            x.clone(),
            TaskKind::Regression,
        )?;
        let cfg = TrainConfig {
            seed: config.seed.wrapping_add(j as u64),
            fixed_beta: None,
            checkpoints: Vec::new(),
            ..config.clone()
        };
        let sw = (weights_used == WeightKind::General).then_some(&normalized);
        let (fit, _) = train::train_nn_weighted(&data, &LossSpec::Squared, arch, &cfg, sw)?;
        components.push(fit.predictor);
    }
    Ok(NuisanceProjection {
        components,
        weights_used,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMethod {
    PlugInRegression,
    PlugInClassification,
    Sandwich,
}

/// `Sigma_hat = A^{-1} B A^{-T}` together with its factors.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceEstimate {
    pub sigma_hat: DMatrix<f64>,
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    pub method: VarianceMethod,
    pub notes: Vec<String>,
}

impl VarianceEstimate {
    pub fn is_psd(&self) -> bool {
        let (lo, hi) = linalg::eigen_range(&self.sigma_hat);
        lo >= -1e-8 * hi.abs().max(f64::MIN_POSITIVE)
    }
}

fn centered(z: &DMatrix<f64>, h_vals: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if z.shape() != h_vals.shape() {
        return dim_err(format!("Z is {:?} but h values are {:?}", z.shape(), h_vals.shape()));
    }
    if z.nrows() == 0 {
        return arg_err("no observations");
    }
    Ok(z - h_vals)
}

/// `(1/n) sum_i w_i c_i c_i^T`.
fn weighted_gram(c: &DMatrix<f64>, w: Option<&DVector<f64>>) -> DMatrix<f64> {
    let n = c.nrows() as f64;
    let mut g = match w {
        None => c.transpose() * c,
        Some(w) => {
            let mut cw = c.clone();
            for (i, mut row) in cw.row_iter_mut().enumerate() {
                row *= w[i];
            }
            c.transpose() * cw
        }
    };
    g /= n;
    symmetrize(&mut g);
    g
}

/// `Sigma_hat = mean(r^2) * [(1/n) sum (Z_i - h_i)(Z_i - h_i)^T]^{-1}`.
pub fn variance_regression(
    residuals: &DVector<f64>,
    z: &DMatrix<f64>,
    h_vals: &DMatrix<f64>,
) -> Result<VarianceEstimate> {
    let c = centered(z, h_vals)?;
    if residuals.len() != c.nrows() {
        return dim_err("residuals do not match the number of rows");
    }
    let s2 = residuals.norm_squared() / residuals.len() as f64;
    let a = weighted_gram(&c, None);
    let a_inv = spd_inverse(&a, "centered Z second-moment matrix")?;
    let mut sigma = &a_inv * s2;
    symmetrize(&mut sigma);
    Ok(VarianceEstimate {
        sigma_hat: sigma,
        b_hat: &a * s2,
        a_hat: a,
        method: VarianceMethod::PlugInRegression,
        notes: Vec::new(),
    })
}

/// `Sigma_hat = [(1/n) sum phi_i (1 - phi_i)(Z_i - h_i)(Z_i - h_i)^T]^{-1}`.
pub fn variance_classification(
    p_hat: &DVector<f64>,
    z: &DMatrix<f64>,
    h_vals: &DMatrix<f64>,
) -> Result<VarianceEstimate> {
    let c = centered(z, h_vals)?;
    if p_hat.len() != c.nrows() {
        return dim_err("p_hat does not match the number of rows");
    }
    if p_hat.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical("non-finite fitted probability".into()));
    }
    let mut notes = Vec::new();
    let clamped = p_hat
        .iter()
        .filter(|&&p| !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p))
        .count();
    if clamped > 0 {
        notes.push(format!(
            "{clamped} fitted probabilities clamped to [{PROB_CLAMP:e}, 1 - {PROB_CLAMP:e}]"
        ));
    }
    let w = p_hat.map(|p| {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        p * (1.0 - p)
    });
    let a = weighted_gram(&c, Some(&w));
    let mut sigma = spd_inverse(&a, "weighted centered Z second-moment matrix")?;
    symmetrize(&mut sigma);
    Ok(VarianceEstimate {
        sigma_hat: sigma,
        b_hat: a.clone(),
        a_hat: a,
        method: VarianceMethod::PlugInClassification,
        notes,
    })
}

fn check_fit_dims(data: &Dataset, fit: &FitResult, proj: &NuisanceProjection) -> Result<()> {
    if fit.beta_hat.len() != data.p() || proj.p() != data.p() {
        return dim_err(format!(
            "beta_hat has {} entries, projection {}, Z has {} columns",
            fit.beta_hat.len(),
            proj.p(),
            data.p()
        ));
    }
    Ok(())
}

/// Rows `l'(t_i, Y_i) (Z_i - h_hat(X_i))` at the fitted index `t_i`.
pub fn efficient_score_samples(
    data: &Dataset,
    loss: &LossSpec,
    fit: &FitResult,
    proj: &NuisanceProjection,
) -> Result<DMatrix<f64>> {
    check_fit_dims(data, fit, proj)?;
    let index = fit.index(data)?;
    let c = centered(&data.z, &proj.eval_batch(&data.x)?)?;
    let mut out = c;
    for (i, mut row) in out.row_iter_mut().enumerate() {
        loss.check_response(data.y[i])?;
        row *= loss.index_deriv(index[i], data.y[i]);
    }
    Ok(out)
}

/// `Sigma_hat = A^{-1} B A^{-T}` with `A = (1/n) sum l''_i c_i c_i^T` and
/// `B = (1/n) sum S_i S_i^T`, `c_i = Z_i - h_hat(X_i)`.
pub fn sandwich_variance(
    scores: &DMatrix<f64>,
    data: &Dataset,
    loss: &LossSpec,
    fit: &FitResult,
    proj: &NuisanceProjection,
) -> Result<VarianceEstimate> {
    check_fit_dims(data, fit, proj)?;
    if scores.shape() != data.z.shape() {
        return dim_err(format!("scores are {:?}, Z is {:?}", scores.shape(), data.z.shape()));
    }
    let index = fit.index(data)?;
    let c = centered(&data.z, &proj.eval_batch(&data.x)?)?;
    let curv = DVector::from_fn(data.n(), |i, _| loss.index_second(index[i], data.y[i]));
    let a = weighted_gram(&c, Some(&curv));
    let b = weighted_gram(scores, None);
    let a_inv = spd_inverse(&a, "sandwich bread matrix")?;
    let mut sigma = &a_inv * &b * a_inv.transpose();
    symmetrize(&mut sigma);
    Ok(VarianceEstimate {
        sigma_hat: sigma,
        a_hat: a,
        b_hat: b,
        method: VarianceMethod::Sandwich,
        notes: Vec::new(),
    })
}

/// Two-sided standard normal quantile `z_{1 - (1 - level)/2}`.
pub fn normal_quantile_two_sided(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return arg_err(format!("level must lie in (0, 1), got {level}"));
    }
    Ok(match level {
        l if l == 0.95 => Z_95,
        l if l == 0.90 => 1.644854,
        l if l == 0.99 => 2.575829,
        _ => normal_quantile(1.0 - (1.0 - level) / 2.0),
    })
}

/// Standard normal quantile: Acklam's rational approximation refined by one
/// Newton step.
pub fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let p_low = 0.02425;
    let x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    x - (normal_cdf(x) - p) / pdf
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceIntervals {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub level: f64,
}

impl ConfidenceIntervals {
    pub fn contains(&self, j: usize, value: f64) -> bool {
        self.lower[j] <= value && value <= self.upper[j]
    }
}

/// Wald intervals `beta_j +- z sqrt(Sigma_jj / n)`.
pub fn confidence_intervals(
    beta_hat: &DVector<f64>,
    var: &VarianceEstimate,
    n: usize,
    level: f64,
) -> Result<ConfidenceIntervals> {
    let p = beta_hat.len();
    if var.sigma_hat.shape() != (p, p) {
        return dim_err(format!("Sigma_hat is {:?} for p = {p}", var.sigma_hat.shape()));
    }
    if n == 0 {
        return arg_err("n must be positive");
    }
    let z = normal_quantile_two_sided(level)?;
    let mut lower = Vec::with_capacity(p);
    let mut upper = Vec::with_capacity(p);
    for j in 0..p {
        let v = var.sigma_hat[(j, j)];
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Numerical(format!("variance entry {j} is {v}")));
        }
        let half = z * (v / n as f64).sqrt();
        lower.push(beta_hat[j] - half);
        upper.push(beta_hat[j] + half);
    }
    Ok(ConfidenceIntervals { lower, upper, level })
}

/// Per-coordinate fraction of intervals containing `beta0`.
pub fn coverage(intervals: &[ConfidenceIntervals], beta0: &[f64]) -> Result<Vec<f64>> {
    if intervals.is_empty() {
        return arg_err("coverage needs at least one repetition");
    }
    if intervals.iter().any(|ci| ci.lower.len() != beta0.len()) {
        return dim_err("interval dimension differs from beta0");
    }
    let reps = intervals.len() as f64;
    Ok((0..beta0.len())
        .map(|j| intervals.iter().filter(|ci| ci.contains(j, beta0[j])).count() as f64 / reps)
        .collect())
}

// ---------------------------------------------------------------------------
// pipeline

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MethodChoice {
    /// Plug-in for squared and logistic losses, sandwich otherwise.
    #[default]
    Auto,
    PlugIn,
    Sandwich,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    #[serde(default = "default_aux_depth")]
    pub aux_depth: usize,
    #[serde(default = "default_aux_width")]
    pub aux_width: usize,
    #[serde(default = "default_aux_steps")]
    pub aux_steps: usize,
    /// Step size for the auxiliary fit; the main step is used when absent.
    #[serde(default)]
    pub aux_step: Option<f64>,
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub method: MethodChoice,
}

fn default_aux_depth() -> usize {
    AUX_DEPTH
}
fn default_aux_width() -> usize {
    AUX_WIDTH
}
fn default_aux_steps() -> usize {
    AUX_STEPS
}
fn default_level() -> f64 {
    0.95
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            aux_depth: AUX_DEPTH,
            aux_width: AUX_WIDTH,
            aux_steps: AUX_STEPS,
            aux_step: None,
            level: 0.95,
            method: MethodChoice::Auto,
        }
    }
}

/// Weights for the nuisance projection: `phi(1 - phi)` for binary links, `l''`
/// for other non-quadratic losses, uniform for squared loss.
pub fn projection_weights(data: &Dataset, loss: &LossSpec, fit: &FitResult) -> Result<(DVector<f64>, WeightKind)> {
    let index = fit.index(data)?;
    Ok(match loss {
        LossSpec::Squared => (DVector::from_element(data.n(), 1.0), WeightKind::Uniform),
        LossSpec::LogisticNll => (
            index.map(|t| {
                let p = Link::Logistic.eval(t).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
                p * (1.0 - p)
            }),
            WeightKind::Bernoulli,
        ),
        _ => (
            DVector::from_fn(data.n(), |i, _| loss.index_second(index[i], data.y[i])),
            WeightKind::General,
        ),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceReport {
    pub method: VarianceMethod,
    pub n: usize,
    pub beta_hat: Vec<f64>,
    pub sigma_hat: Vec<Vec<f64>>,
    pub std_err: Vec<f64>,
    pub intervals: ConfidenceIntervals,
    pub score_means: Vec<f64>,
    pub notes: Vec<String>,
}

impl InferenceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per coordinate.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["coord", "beta_hat", "std_err", "lower", "upper", "level", "method"])?;
        let method = match self.method {
            VarianceMethod::PlugInRegression => "plug_in_regression",
            VarianceMethod::PlugInClassification => "plug_in_classification",
            VarianceMethod::Sandwich => "sandwich",
        };
        for j in 0..self.beta_hat.len() {
            w.write_record([
                (j + 1).to_string(),
                format!("{:.10e}", self.beta_hat[j]),
                format!("{:.10e}", self.std_err[j]),
                format!("{:.10e}", self.intervals.lower[j]),
                format!("{:.10e}", self.intervals.upper[j]),
                self.intervals.level.to_string(),
                method.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Nuisance projection, variance and intervals for a fitted model.
/// `train` supplies the step size and seed of the auxiliary fit.
pub fn infer(
    data: &Dataset,
    loss: &LossSpec,
    fit: &FitResult,
    train: &TrainConfig,
    config: &InferenceConfig,
) -> Result<InferenceReport> {
    let (weights, kind) = projection_weights(data, loss, fit)?;
    let arch = NetArch::new(config.aux_depth, config.aux_width, data.d())?;
    let aux = TrainConfig {
        lambda: 0.0,
        step: config.aux_step.unwrap_or(train.step),
        steps: config.aux_steps,
        seed: train.seed.wrapping_add(0xa0c5),
        checkpoints: Vec::new(),
        batch: train.batch,
        fixed_beta: None,
    };
    let mut proj = fit_conditional_mean(&data.x, &data.z, &weights, arch, &aux)?;
    if proj.weights_used != WeightKind::Uniform {
        proj.weights_used = kind;
    }
    let h_vals = proj.eval_batch(&data.x)?;
    let scores = efficient_score_samples(data, loss, fit, &proj)?;
    let use_plug_in = match config.method {
        MethodChoice::Auto => matches!(loss, LossSpec::Squared | LossSpec::LogisticNll),
        MethodChoice::PlugIn => true,
        MethodChoice::Sandwich => false,
    };
    let var = if use_plug_in {
        match loss {
            LossSpec::Squared => {
                let residuals = &data.y - fit.index(data)?;
                variance_regression(&residuals, &data.z, &h_vals)?
            }
            LossSpec::LogisticNll => {
                let p_hat = fit.index(data)?.map(|t| Link::Logistic.eval(t));
                variance_classification(&p_hat, &data.z, &h_vals)?
            }
            other => {
                return Err(Error::Config(format!(
                    "no plug-in variance for {other:?}; use the sandwich"
                )))
            }
        }
    } else {
        sandwich_variance(&scores, data, loss, fit, &proj)?
    };
    let intervals = confidence_intervals(&fit.beta_hat, &var, data.n(), config.level)?;
    let n = data.n();
    Ok(InferenceReport {
        method: var.method,
        n,
        beta_hat: fit.beta_hat.iter().copied().collect(),
        sigma_hat: var.sigma_hat.row_iter().map(|r| r.iter().copied().collect()).collect(),
        std_err: (0..fit.beta_hat.len())
            .map(|j| (var.sigma_hat[(j, j)] / n as f64).sqrt())
            .collect(),
        intervals,
        score_means: scores.row_mean().iter().copied().collect(),
        notes: var.notes.clone(),
    })
}

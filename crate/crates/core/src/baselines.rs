//! Comparison estimators: Laplacian kernel ridge, local linear backfitting,
//! tensor-product cubic splines and an underparameterized network.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::linalg::{self, power_max_eigen};
use crate::losses::LossSpec;
use crate::mlp::NetArch;
use crate::ntk::{KernelKind, LaplacianKernel};
use crate::simgen::Dataset;
use crate::train::{self, FitDiagnostics, FitResult, Predictor, TrainConfig};

/// Backfitting stops once no coordinate of `beta` moves more than this.
pub const BACKFIT_TOL: f64 = 1e-5;
pub const BACKFIT_MAX_ROUNDS: usize = 50;
/// Splines are refused above this covariate dimension.
pub const SPLINE_MAX_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineSpec {
    Spline { knots_per_dim: usize },
    RkhsLaplacian { bandwidth: f64 },
    LocalLinear { bandwidth: f64 },
    SmallNn { width: usize },
}

impl BaselineSpec {
    pub fn name(&self) -> &'static str {
        match self {
            BaselineSpec::Spline { .. } => "spline",
            BaselineSpec::RkhsLaplacian { .. } => "rkhs_laplacian",
            BaselineSpec::LocalLinear { .. } => "local_linear",
            BaselineSpec::SmallNn { .. } => "small_nn",
        }
    }
}

/// Fits the baseline described by `spec`. `depth` is used by the small network.
pub fn fit_baseline(
    spec: &BaselineSpec,
    data: &Dataset,
    loss: &LossSpec,
    depth: usize,
    config: &TrainConfig,
) -> Result<FitResult> {
    match *spec {
        BaselineSpec::Spline { knots_per_dim } => fit_spline_baseline(data, loss, knots_per_dim, config),
        BaselineSpec::RkhsLaplacian { bandwidth } => fit_kernel_ridge_baseline(data, loss, bandwidth, config),
        BaselineSpec::LocalLinear { bandwidth } => fit_local_linear_baseline(data, loss, bandwidth, config),
        BaselineSpec::SmallNn { width } => fit_small_nn_baseline(data, loss, depth, width, config),
    }
}

// ---------------------------------------------------------------------------
// kernel ridge

/// Kernel flow with the Laplacian kernel `exp(-|x1 - x2| / h)`.
pub fn fit_kernel_ridge_baseline(
    data: &Dataset,
    loss: &LossSpec,
    bandwidth: f64,
    config: &TrainConfig,
) -> Result<FitResult> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return arg_err(format!("bandwidth must be > 0, got {bandwidth}"));
    }
    let kernel = KernelKind::Laplacian(LaplacianKernel { bandwidth });
    Ok(train::train_kernel_flow(data, loss, kernel, config)?.0)
}

// ---------------------------------------------------------------------------
// small network

/// The main trainer on a narrower network whose parameter count is below `n`.
pub fn fit_small_nn_baseline(
    data: &Dataset,
    loss: &LossSpec,
    depth: usize,
    width: usize,
    config: &TrainConfig,
) -> Result<FitResult> {
    let arch = NetArch::new(depth, width, data.d())?;
    if arch.param_count() >= data.n() {
        return arg_err(format!(
            "small network has {} parameters, which is not below n = {}",
            arch.param_count(),
            data.n()
        ));
    }
    train::fit_nn(data, loss, arch, config)
}

/// Largest width whose depth-`depth` network has fewer than `n` parameters.
pub fn max_small_width(depth: usize, input_dim: usize, n: usize) -> Option<usize> {
    (1..n)
        .take_while(|&w| NetArch::new(depth, w, input_dim).is_ok_and(|a| a.param_count() < n))
        .last()
}

// ---------------------------------------------------------------------------
// splines

/// Tensor-product cubic B-splines on `[0,1]^d` with `knots_per_dim` uniformly
/// spaced knots (endpoints included) per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineBasis {
    pub d: usize,
    pub knots_per_dim: usize,
    knots: Vec<f64>,
}

const SPLINE_DEGREE: usize = 3;

impl SplineBasis {
    pub fn new(d: usize, knots_per_dim: usize) -> Result<Self> {
        if d == 0 {
            return arg_err("spline basis needs d >= 1");
        }
        if d > SPLINE_MAX_DIM {
            return arg_err(format!(
                "tensor-product splines are limited to d <= {SPLINE_MAX_DIM}, got d = {d}"
            ));
        }
        if knots_per_dim < 2 {
            return arg_err("knots_per_dim must be >= 2 (the two endpoints)");
        }
        let k = knots_per_dim;
        let mut knots = vec![0.0; SPLINE_DEGREE];
        knots.extend((0..k).map(|j| j as f64 / (k - 1) as f64));
        knots.extend(std::iter::repeat_n(1.0, SPLINE_DEGREE));
        Ok(Self { d, knots_per_dim, knots })
    }

    /// Basis functions per coordinate.
    pub fn per_dim(&self) -> usize {
        self.knots_per_dim + SPLINE_DEGREE - 1
    }

    pub fn size(&self) -> usize {
        self.per_dim().pow(self.d as u32)
    }

    /// Values of the one-dimensional basis at `x` (clamped to `[0,1]`).
    pub fn basis_1d(&self, x: f64) -> Vec<f64> {
        let x = x.clamp(0.0, 1.0);
        let p = SPLINE_DEGREE;
        let nb = self.per_dim();
        let t = &self.knots;
        // knot span with t[span] <= x < t[span+1]; x = 1 goes in the last span
        let mut span = p;
        while span < nb - 1 && x >= t[span + 1] {
            span += 1;
        }
        let mut vals = [0.0; SPLINE_DEGREE + 1];
        let mut left = [0.0; SPLINE_DEGREE + 1];
        let mut right = [0.0; SPLINE_DEGREE + 1];
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let tmp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * tmp;
                saved = left[j - r] * tmp;
            }
            vals[j] = saved;
        }
        let mut out = vec![0.0; nb];
        for (r, v) in vals.iter().enumerate() {
            out[span - p + r] = *v;
        }
        out
    }

    /// Design row: Kronecker product of the per-coordinate bases, first coordinate slowest.
    pub fn row(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d {
            return Err(Error::Dimension(format!(
                "spline basis expects {} features, got {}",
                self.d,
                x.len()
            )));
        }
        let mut acc = vec![1.0];
        for &xi in x {
            let b = self.basis_1d(xi);
            acc = acc
                .iter()
                .flat_map(|a| b.iter().map(move |v| a * v))
                .collect();
        }
        Ok(acc)
    }

    pub fn design(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let rows: Vec<Vec<f64>> = linalg::rows(x)
            .iter()
            .map(|r| self.row(r))
            .collect::<Result<_>>()?;
        Ok(DMatrix::from_fn(x.nrows(), self.size(), |i, j| rows[i][j]))
    }
}

/// Joint gradient descent on `(beta, c)` for `P_n l(Z beta + B c)` without a
/// penalty, using `config.steps` steps of the guarded size `1 / Lipschitz`.
pub fn fit_spline_baseline(
    data: &Dataset,
    loss: &LossSpec,
    knots_per_dim: usize,
    config: &TrainConfig,
) -> Result<FitResult> {
    config.validate()?;
    loss.validate()?;
    let basis = SplineBasis::new(data.d(), knots_per_dim)?;
    if basis.size() >= data.n() {
        return arg_err(format!(
            "spline basis has {} functions, which is not below n = {}",
            basis.size(),
            data.n()
        ));
    }
    let b = basis.design(&data.x)?;
    let n = data.n();
    let p = data.p();
    let features = DMatrix::from_fn(n, p + b.ncols(), |i, j| {
        if j < p {
            data.z[(i, j)]
        } else {
            b[(i, j - p)]
        }
    });
    let beta_free = config.fixed_beta.is_none();
    let mut w = DVector::zeros(features.ncols());
    if let Some(fb) = &config.fixed_beta {
        if fb.len() != p {
            return Err(Error::Dimension(format!("fixed beta has {} entries, Z has {p}", fb.len())));
        }
        w.rows_mut(0, p).copy_from_slice(fb);
    }
    let gram = features.transpose() * &features;
    let lip = loss.gradient_lipschitz() * power_max_eigen(&gram, 300) / n as f64;
    let step = train::guarded_step(lip.max(f64::MIN_POSITIVE));

    let mut objective_history = Vec::with_capacity(config.steps + 1);
    let mut grad_norm_history = Vec::with_capacity(config.steps + 1);
    let eval = |w: &DVector<f64>| -> Result<(f64, DVector<f64>)> {
        let index = &features * w;
        let mut deriv = DVector::zeros(n);
        let mut risk = 0.0;
        for i in 0..n {
            loss.check_response(data.y[i])?;
            risk += loss.index_value(index[i], data.y[i]);
            deriv[i] = loss.index_deriv(index[i], data.y[i]) / n as f64;
        }
        let mut grad = features.transpose() * deriv;
        if !beta_free {
            grad.rows_mut(0, p).fill(0.0);
        }
        Ok((risk / n as f64, grad))
    };
    let (mut obj, mut grad) = eval(&w)?;
    for _ in 0..config.steps {
        objective_history.push(obj);
        grad_norm_history.push(grad.norm());
        w.axpy(-step, &grad, 1.0);
        (obj, grad) = eval(&w)?;
        if !obj.is_finite() {
            return Err(Error::Numerical("spline fit produced a non-finite objective".into()));
        }
    }
    objective_history.push(obj);
    grad_norm_history.push(grad.norm());
    let beta_hat = w.rows(0, p).into_owned();
    let coefs = w.rows(p, basis.size()).into_owned();
    Ok(FitResult {
        beta_hat,
        predictor: Predictor::Spline { basis, coefs },
        diagnostics: FitDiagnostics {
            final_objective: obj,
            beta_grad_norm: grad.rows(0, p).norm(),
            f_grad_norm: grad.rows(p, w.len() - p).norm(),
            lambda: 0.0,
            step,
            steps: config.steps,
            seed: config.seed,
            objective_history,
            grad_norm_history,
        },
    })
}

// ---------------------------------------------------------------------------
// local linear

/// Epanechnikov-type weight `(1 - |x1 - x2|^2 / h) / (2^d (1 - 1/(3h)))`,
/// truncated at zero. The normalizer is positive only for `h > 1/3`.
pub fn epanechnikov(x1: &[f64], x2: &[f64], h: f64) -> Result<f64> {
    let norm = 2f64.powi(x1.len() as i32) * (1.0 - 1.0 / (3.0 * h));
    if !(norm > 0.0 && norm.is_finite()) {
        return arg_err(format!("bandwidth {h} makes the kernel normalizer nonpositive (need h > 1/3)"));
    }
    let sq: f64 = x1.iter().zip(x2).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((1.0 - sq / h).max(0.0) / norm)
}

/// Local linear smoother of a response stored at anchor points.
#[derive(Debug, Clone)]
pub struct LocalLinearPredictor {
    anchors: Arc<Vec<Vec<f64>>>,
    response: Vec<f64>,
    pub bandwidth: f64,
    /// Evaluations that used the nearest-neighbor fallback while fitting.
    pub fallbacks: usize,
}

impl LocalLinearPredictor {
    pub fn new(anchors: Vec<Vec<f64>>, response: Vec<f64>, bandwidth: f64) -> Result<Self> {
        if anchors.len() != response.len() || anchors.is_empty() {
            return Err(Error::Dimension("anchors and response must be non-empty and equal length".into()));
        }
        epanechnikov(&anchors[0], &anchors[0], bandwidth)?;
        Ok(Self {
            anchors: Arc::new(anchors),
            response,
            bandwidth,
            fallbacks: 0,
        })
    }

    /// Smoothed values at each point and the number of fallback evaluations.
    pub fn smooth(&self, points: &[Vec<f64>]) -> Result<(Vec<f64>, usize)> {
        let d = self.anchors[0].len();
        if let Some(bad) = points.iter().find(|p| p.len() != d) {
            return Err(Error::Dimension(format!(
                "local linear fit expects {d} features, got {}",
                bad.len()
            )));
        }
        let out: Vec<(f64, bool)> = points
            .par_iter()
            .map(|x0| self.eval_point(x0))
            .collect::<Result<_>>()?;
        let fallbacks = out.iter().filter(|o| o.1).count();
        Ok((out.into_iter().map(|o| o.0).collect(), fallbacks))
    }

    pub fn eval_batch(&self, x: &DMatrix<f64>) -> Result<DVector<f64>> {
        let (vals, _) = self.smooth(&linalg::rows(x))?;
        Ok(DVector::from_vec(vals))
    }

    /// Weighted least squares on `[1, X_i - x0]`; the intercept is the fit.
    fn eval_point(&self, x0: &[f64]) -> Result<(f64, bool)> {
        let d = x0.len();
        let q = d + 1;
        let mut ata = DMatrix::zeros(q, q);
        let mut atb = DVector::zeros(q);
        let mut support = 0usize;
        let mut row = vec![0.0; q];
        for (xi, &ui) in self.anchors.iter().zip(&self.response) {
            let w = epanechnikov(x0, xi, self.bandwidth)?;
            if w <= 0.0 {
                continue;
            }
            support += 1;
            row[0] = 1.0;
            for j in 0..d {
                row[j + 1] = xi[j] - x0[j];
            }
            for a in 0..q {
                atb[a] += w * row[a] * ui;
                for b in 0..=a {
                    ata[(a, b)] += w * row[a] * row[b];
                }
            }
        }
        if support > d {
            for a in 0..q {
                for b in 0..a {
                    ata[(b, a)] = ata[(a, b)];
                }
            }
            let scale = ata.diagonal().max();
            if let Some(chol) = ata.clone().cholesky() {
                let l = chol.l();
                let min_pivot = l.diagonal().iter().map(|v| v * v).fold(f64::INFINITY, f64::min);
                if min_pivot > 1e-12 * scale {
                    return Ok((chol.solve(&atb)[0], false));
                }
            }
        }
        Ok((self.nearest_average(x0), true))
    }

    /// Mean response over the anchors closest to `x0`.
    fn nearest_average(&self, x0: &[f64]) -> f64 {
        let dists: Vec<f64> = self
            .anchors
            .iter()
            .map(|a| a.iter().zip(x0).map(|(u, v)| (u - v) * (u - v)).sum())
            .collect();
        let best = dists.iter().copied().fold(f64::INFINITY, f64::min);
        let (sum, count) = dists
            .iter()
            .zip(&self.response)
            .filter(|(d, _)| **d <= best * (1.0 + 1e-12))
            .fold((0.0, 0usize), |(s, c), (_, u)| (s + u, c + 1));
        sum / count as f64
    }
}

/// Backfitting: `beta` gradient steps at fixed `f`, then `f` refreshed by a
/// local linear fit of the working response `f - l2'/c` (c the loss curvature
/// bound), until `beta` moves less than the tolerance or the round limit.
pub fn fit_local_linear_baseline(
    data: &Dataset,
    loss: &LossSpec,
    bandwidth: f64,
    config: &TrainConfig,
) -> Result<FitResult> {
    config.validate()?;
    loss.validate()?;
    if !(bandwidth > 0.0) {
        return arg_err(format!("bandwidth must be > 0, got {bandwidth}"));
    }
    for &y in data.y.iter() {
        loss.check_response(y)?;
    }
    let n = data.n();
    let p = data.p();
    let anchors = data.x_rows();
    let curv = loss.gradient_lipschitz();
    let ztz = data.z.transpose() * &data.z;
    let beta_step = if p > 0 {
        train::guarded_step(curv * power_max_eigen(&ztz, 300) / n as f64)
    } else {
        0.0
    };
    let beta_free = config.fixed_beta.is_none() && p > 0;
    let mut beta = match &config.fixed_beta {
        Some(b) if b.len() != p => {
            return Err(Error::Dimension(format!("fixed beta has {} entries, Z has {p}", b.len())))
        }
        Some(b) => DVector::from_column_slice(b),
        None => DVector::zeros(p),
    };
    let mut f = DVector::zeros(n);
    let mut smoother = LocalLinearPredictor::new(anchors.clone(), vec![0.0; n], bandwidth)?;
    let mut objective_history = Vec::new();
    let mut grad_norm_history = Vec::new();
    let risk_and_deriv = |beta: &DVector<f64>, f: &DVector<f64>| {
        let index = &data.z * beta + f;
        let mut deriv = DVector::zeros(n);
        let mut risk = 0.0;
        for i in 0..n {
            risk += loss.index_value(index[i], data.y[i]);
            deriv[i] = loss.index_deriv(index[i], data.y[i]);
        }
        (risk / n as f64, deriv)
    };
    let mut rounds = 0;
    let mut fallbacks = 0;
    while rounds < BACKFIT_MAX_ROUNDS {
        let prev = beta.clone();
        if beta_free {
            for _ in 0..200 {
                let (_, deriv) = risk_and_deriv(&beta, &f);
                let g = data.z.transpose() * deriv / n as f64;
                beta.axpy(-beta_step, &g, 1.0);
                if g.amax() * beta_step < 1e-12 {
                    break;
                }
            }
        }
        let (risk, deriv) = risk_and_deriv(&beta, &f);
        objective_history.push(risk);
        grad_norm_history.push((deriv.norm() / n as f64).max(0.0));
        let working: Vec<f64> = (0..n).map(|i| f[i] - deriv[i] / curv).collect();
        smoother = LocalLinearPredictor::new(anchors.clone(), working, bandwidth)?;
        let (fitted, fb) = smoother.smooth(&anchors)?;
        fallbacks = fb;
        f = DVector::from_vec(fitted);
        if !f.iter().all(|v| v.is_finite()) || !beta.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("backfitting produced non-finite values".into()));
        }
        rounds += 1;
        if rounds > 1 && (&beta - &prev).amax() < BACKFIT_TOL {
            break;
        }
    }
    let (risk, deriv) = risk_and_deriv(&beta, &f);
    objective_history.push(risk);
    let beta_grad_norm = if beta_free {
        (data.z.transpose() * &deriv / n as f64).norm()
    } else {
        0.0
    };
    grad_norm_history.push(beta_grad_norm);
    smoother.fallbacks = fallbacks;
    Ok(FitResult {
        beta_hat: beta,
        predictor: Predictor::LocalLinear(smoother),
        diagnostics: FitDiagnostics {
            final_objective: risk,
            beta_grad_norm,
            f_grad_norm: deriv.norm() / n as f64,
            lambda: 0.0,
            step: beta_step,
            steps: rounds,
            seed: config.seed,
            objective_history,
            grad_norm_history,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ntk::gram_from_rows;
    use crate::simgen::{derive_rng, TaskKind};
    use rand::Rng;

    fn uniform(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = derive_rng(seed, 3);
        DMatrix::from_fn(n, d, |_, _| rng.random::<f64>())
    }

    #[test]
    fn bspline_partition_of_unity_and_support() {
        let b = SplineBasis::new(1, 5).unwrap();
        assert_eq!(b.per_dim(), 7);
        for k in 0..=200 {
            let x = k as f64 / 200.0;
            let v = b.basis_1d(x);
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-13, "x = {x}");
            assert!(v.iter().all(|&u| u >= -1e-15));
            assert!(v.iter().filter(|&&u| u > 0.0).count() <= 4);
        }
        assert_eq!(b.basis_1d(0.0)[0], 1.0);
        assert_eq!(b.basis_1d(1.0)[6], 1.0);
        let t = SplineBasis::new(3, 2).unwrap();
        assert_eq!(t.size(), 64);
        let row = t.row(&[0.2, 0.5, 0.9]).unwrap();
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-13);
    }

    #[test]
    fn bspline_matches_bernstein_with_two_knots() {
        // with only the endpoints the cubic B-splines are the Bernstein polynomials
        let b = SplineBasis::new(1, 2).unwrap();
        let x: f64 = 0.3;
        let v = b.basis_1d(x);
        let bern = [
            (1.0 - x).powi(3),
            3.0 * x * (1.0 - x).powi(2),
            3.0 * x * x * (1.0 - x),
            x.powi(3),
        ];
        for (a, e) in v.iter().zip(bern) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn spline_preconditions() {
        assert!(SplineBasis::new(6, 2).is_err());
        assert!(SplineBasis::new(2, 1).is_err());
        let data = Dataset::new(
            DVector::zeros(30),
            DMatrix::zeros(30, 1),
            uniform(30, 2, 1),
            TaskKind::Regression,
        )
        .unwrap();
        // 6^2 = 36 >= 30
        assert!(fit_spline_baseline(&data, &LossSpec::Squared, 4, &TrainConfig::default()).is_err());
        assert!(fit_spline_baseline(&data, &LossSpec::Squared, 3, &TrainConfig { steps: 5, ..Default::default() }).is_ok());
    }

    #[test]
    fn small_nn_parameter_guard_and_identity() {
        let n = 40;
        let data = Dataset::new(
            DVector::from_fn(n, |i, _| (i as f64 * 0.1).sin()),
            uniform(n, 2, 2),
            uniform(n, 2, 3),
            TaskKind::Regression,
        )
        .unwrap();
        let cfg = TrainConfig { steps: 10, step: 0.01, ..Default::default() };
        assert!(fit_small_nn_baseline(&data, &LossSpec::Squared, 2, 10, &cfg).is_err());
        let a = fit_small_nn_baseline(&data, &LossSpec::Squared, 1, 3, &cfg).unwrap();
        let b = train::fit_nn(&data, &LossSpec::Squared, NetArch::new(1, 3, 2).unwrap(), &cfg).unwrap();
        assert_eq!(a.beta_hat, b.beta_hat);
        assert_eq!(a.diagnostics, b.diagnostics);
        let w = max_small_width(1, 2, n).unwrap();
        assert!(NetArch::new(1, w, 2).unwrap().param_count() < n);
        assert!(NetArch::new(1, w + 1, 2).unwrap().param_count() >= n);
    }

    #[test]
    fn laplacian_large_bandwidth_gram_is_nearly_constant() {
        let x = uniform(10, 3, 4);
        let k = KernelKind::Laplacian(LaplacianKernel { bandwidth: 1e9 });
        let g = gram_from_rows(&k, linalg::rows(&x)).unwrap();
        assert!(g.entries().iter().all(|v| (v - 1.0).abs() < 1e-8));
        let data = Dataset::new(DVector::zeros(10), DMatrix::zeros(10, 1), x, TaskKind::Regression).unwrap();
        assert!(fit_kernel_ridge_baseline(&data, &LossSpec::Squared, 0.0, &TrainConfig::default()).is_err());
    }

    #[test]
    fn epanechnikov_normalizer() {
        let w = epanechnikov(&[0.0], &[0.5], 1.0).unwrap();
        assert!((w - 0.75 / (2.0 * (2.0 / 3.0))).abs() < 1e-15);
        assert_eq!(epanechnikov(&[0.0], &[2.0], 1.0).unwrap(), 0.0);
        assert!(epanechnikov(&[0.0], &[0.1], 0.3).is_err());
    }

    #[test]
    fn local_linear_reproduces_linear_functions() {
        let x = uniform(60, 2, 5);
        let rows = linalg::rows(&x);
        let resp: Vec<f64> = rows.iter().map(|r| 1.0 + 2.0 * r[0] - r[1]).collect();
        let s = LocalLinearPredictor::new(rows.clone(), resp.clone(), 0.5).unwrap();
        let (fit, fb) = s.smooth(&rows).unwrap();
        assert_eq!(fb, 0);
        for (a, b) in fit.iter().zip(&resp) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn local_linear_fallback_on_isolated_points() {
        let rows = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0], vec![1.0, 0.0]];
        let s = LocalLinearPredictor::new(rows.clone(), vec![1.0, 2.0, 3.0, 4.0], 0.4).unwrap();
        let (fit, fb) = s.smooth(&rows).unwrap();
        assert_eq!(fb, 4);
        assert_eq!(fit, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn backfitting_recovers_beta_when_f_is_zero() {
        let n = 200;
        let z = uniform(n, 2, 6);
        let x = uniform(n, 1, 7);
        let y = DVector::from_fn(n, |i, _| 1.0 * z[(i, 0)] + 0.75 * z[(i, 1)]);
        let data = Dataset::new(y, z, x, TaskKind::Regression).unwrap();
        let fit = fit_local_linear_baseline(&data, &LossSpec::Squared, 0.5, &TrainConfig::default()).unwrap();
        assert!((fit.beta_hat[0] - 1.0).abs() < 1e-3, "{}", fit.beta_hat);
        assert!((fit.beta_hat[1] - 0.75).abs() < 1e-3, "{}", fit.beta_hat);
        assert!(fit.diagnostics.steps <= BACKFIT_MAX_ROUNDS);
    }
}

//! Neural tangent kernel of the ReLU network in [`crate::mlp`].
//!
//! The infinite-width kernel has the closed form
//!
//! ```text
//! K(x, x') = sum_{l=0}^{L} ( s * k1^(l)(u) + [l >= 1] ) * prod_{r=l}^{L-1} k0(k1^(r)(u))
//! s = sqrt((|x|^2 + 1)(|x'|^2 + 1)),   u = (x.x' + 1) / s
//! ```
//!
//! with the degree-0 and degree-1 arc-cosine kernels `k0`, `k1` and `k1^(r)` the
//! r-fold composition (`k1^(0)` is the identity).

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::linalg::{self, eigen_range, symmetrize};
use crate::mlp::{self, FlatParams, NetParams};

const ARG_TOL: f64 = 1e-9;

fn check_arg(t: f64) -> Result<f64> {
    if !(t >= -1.0 - ARG_TOL && t <= 1.0 + ARG_TOL) {
        return arg_err(format!("arc-cosine kernel argument {t} outside [-1, 1]"));
    }
    Ok(t.clamp(-1.0, 1.0))
}

fn k0(t: f64) -> f64 {
    let t = t.clamp(-1.0, 1.0);
    (PI - t.acos()) / PI
}

fn k1(t: f64) -> f64 {
    let t = t.clamp(-1.0, 1.0);
    ((1.0 - t * t).max(0.0).sqrt() + t * (PI - t.acos())) / PI
}

/// Degree-0 arc-cosine kernel `(pi - acos t) / pi`.
pub fn kappa0(t: f64) -> Result<f64> {
    Ok(k0(check_arg(t)?))
}

/// Degree-1 arc-cosine kernel `(sqrt(1 - t^2) + t (pi - acos t)) / pi`.
pub fn kappa1(t: f64) -> Result<f64> {
    Ok(k1(check_arg(t)?))
}

/// The limiting NTK of a depth-`depth` network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub depth: usize,
}

impl KernelSpec {
    pub fn new(depth: usize) -> Result<Self> {
        if depth == 0 {
            return arg_err("kernel depth must be >= 1");
        }
        Ok(Self { depth })
    }
}

/// Closed-form NTK value for the pair `(x, x2)`.
pub fn analytic_ntk(spec: KernelSpec, x: &[f64], x2: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), x2.len());
    let depth = spec.depth;
    let nx = x.iter().map(|v| v * v).sum::<f64>() + 1.0;
    let nx2 = x2.iter().map(|v| v * v).sum::<f64>() + 1.0;
    let s = (nx * nx2).sqrt();
    let dot = x.iter().zip(x2).map(|(a, b)| a * b).sum::<f64>() + 1.0;
    let u = (dot / s).clamp(-1.0, 1.0);

    // comps[r] = k1^(r)(u), derivs[r] = k0(comps[r])
    let mut comps = Vec::with_capacity(depth + 1);
    comps.push(u);
    for r in 0..depth {
        comps.push(k1(comps[r]));
    }
    let derivs: Vec<f64> = comps[..depth].iter().map(|&c| k0(c)).collect();

    // suffix products prod_{r=l}^{L-1} derivs[r]; empty product is 1
    let mut total = 0.0;
    let mut tail = 1.0;
    for l in (0..=depth).rev() {
        if l < depth {
            tail *= derivs[l];
        }
        let bias = if l >= 1 { 1.0 } else { 0.0 };
        total += (s * comps[l] + bias) * tail;
    }
    total
}

/// Finite-width NTK `grad f(x) . grad f(x2)` at `params`.
pub fn empirical_ntk(params: &NetParams, x: &[f64], x2: &[f64]) -> Result<f64> {
    let g1 = mlp::param_gradient(params, x)?;
    if x == x2 {
        return Ok(g1.dot(&g1));
    }
    let g2 = mlp::param_gradient(params, x2)?;
    Ok(g1.dot(&g2))
}

/// A positive semidefinite kernel that can be evaluated on pairs of points.
pub trait Kernel: Send + Sync {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64;

    /// Kernel matrix between the row sets `a` and `b`.
    fn cross(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = a
            .par_iter()
            .map(|xa| b.iter().map(|xb| self.eval(xa, xb)).collect())
            .collect();
        DMatrix::from_fn(a.len(), b.len(), |i, j| rows[i][j])
    }
}

impl Kernel for KernelSpec {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        analytic_ntk(*self, x, y)
    }
}

/// Laplacian kernel `exp(-|x - y| / h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplacianKernel {
    pub bandwidth: f64,
}

impl Kernel for LaplacianKernel {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let dist = x
            .iter()
            .zip(y)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        (-dist / self.bandwidth).exp()
    }
}

/// Empirical NTK frozen at a fixed parameter vector.
#[derive(Debug, Clone)]
pub struct EmpiricalKernel {
    params: Arc<NetParams>,
}

impl EmpiricalKernel {
    pub fn new(params: Arc<NetParams>) -> Self {
        Self { params }
    }

    fn gradients(&self, pts: &[Vec<f64>]) -> Vec<FlatParams> {
        pts.par_iter()
            .map(|x| mlp::param_gradient(&self.params, x).expect("input dimension checked"))
            .collect()
    }
}

impl Kernel for EmpiricalKernel {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        empirical_ntk(&self.params, x, y).expect("input dimension checked")
    }

    fn cross(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
        let ga = self.gradients(a);
        let gb = self.gradients(b);
        DMatrix::from_fn(a.len(), b.len(), |i, j| ga[i].dot(&gb[j]))
    }
}

/// The kernels the fitting code knows how to store inside a predictor.
#[derive(Debug, Clone)]
pub enum KernelKind {
    Ntk(KernelSpec),
    Laplacian(LaplacianKernel),
    Empirical(EmpiricalKernel),
}

impl Kernel for KernelKind {
    fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            KernelKind::Ntk(k) => k.eval(x, y),
            KernelKind::Laplacian(k) => k.eval(x, y),
            KernelKind::Empirical(k) => k.eval(x, y),
        }
    }

    fn cross(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> DMatrix<f64> {
        match self {
            KernelKind::Ntk(k) => k.cross(a, b),
            KernelKind::Laplacian(k) => k.cross(a, b),
            KernelKind::Empirical(k) => k.cross(a, b),
        }
    }
}

/// Symmetric kernel matrix over a set of anchor points.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    entries: DMatrix<f64>,
    anchors: Vec<Vec<f64>>,
}

impl GramMatrix {
    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn anchors(&self) -> &[Vec<f64>] {
        &self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// `(smallest, largest)` eigenvalue.
    pub fn eigen_range(&self) -> (f64, f64) {
        eigen_range(&self.entries)
    }

    /// Whether the smallest eigenvalue is above `-1e-8 * largest`.
    pub fn is_psd(&self) -> bool {
        let (lo, hi) = self.eigen_range();
        lo >= -1e-8 * hi.abs().max(f64::MIN_POSITIVE)
    }

    /// Writes the matrix as CSV, one row per line, 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        for i in 0..self.entries.nrows() {
            let line: Vec<String> = self
                .entries
                .row(i)
                .iter()
                .map(|v| format!("{:.16e}", v))
                .collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Builds the Gram matrix of `kernel` over the rows of `points`, symmetrized as `(G + G^T)/2`.
pub fn gram<K: Kernel + ?Sized>(kernel: &K, points: &DMatrix<f64>) -> Result<GramMatrix> {
    gram_from_rows(kernel, linalg::rows(points))
}

pub fn gram_from_rows<K: Kernel + ?Sized>(kernel: &K, anchors: Vec<Vec<f64>>) -> Result<GramMatrix> {
    if anchors.is_empty() {
        return arg_err("Gram matrix needs at least one point");
    }
    let mut entries = kernel.cross(&anchors, &anchors);
    if entries.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("Gram matrix has non-finite entries".into()));
    }
    symmetrize(&mut entries);
    Ok(GramMatrix { entries, anchors })
}

/// Diagonal identity of the closed form: `K(x, x) = (L + 1)(|x|^2 + 1) + L`.
pub fn ntk_diagonal(depth: usize, x: &[f64]) -> f64 {
    let l = depth as f64;
    (l + 1.0) * (x.iter().map(|v| v * v).sum::<f64>() + 1.0) + l
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{init_params, NetArch};

    #[test]
    fn arc_cosine_endpoints() {
        assert_eq!(kappa0(1.0).unwrap(), 1.0);
        assert_eq!(kappa0(-1.0).unwrap(), 0.0);
        assert!((kappa0(0.0).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(kappa1(1.0).unwrap(), 1.0);
        assert!(kappa1(-1.0).unwrap().abs() < 1e-15);
        assert!((kappa1(0.0).unwrap() - 1.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn arc_cosine_rejects_out_of_band() {
        assert!(kappa0(1.0 + 1e-10).is_ok());
        assert!(kappa0(1.01).is_err());
        assert!(kappa1(-1.01).is_err());
        assert!(kappa1(f64::NAN).is_err());
    }

    #[test]
    fn arc_cosine_monotone_and_dominance() {
        let grid: Vec<f64> = (0..=1000).map(|i| -1.0 + 2.0 * i as f64 / 1000.0).collect();
        for w in grid.windows(2) {
            assert!(kappa0(w[1]).unwrap() >= kappa0(w[0]).unwrap());
            assert!(kappa1(w[1]).unwrap() >= kappa1(w[0]).unwrap());
        }
        for &t in grid.iter().filter(|t| **t >= 0.0) {
            assert!(kappa1(t).unwrap() >= t * kappa0(t).unwrap() - 1e-15);
        }
    }

    #[test]
    fn origin_values() {
        let z = [0.0, 0.0, 0.0];
        assert!((analytic_ntk(KernelSpec::new(1).unwrap(), &z, &z) - 3.0).abs() < 1e-12);
        assert!((analytic_ntk(KernelSpec::new(2).unwrap(), &z, &z) - 5.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric_in_arguments() {
        let k = KernelSpec::new(4).unwrap();
        let a = [0.3, -0.2, 0.9];
        let b = [-1.0, 0.5, 0.1];
        assert_eq!(analytic_ntk(k, &a, &b), analytic_ntk(k, &b, &a));
    }

    #[test]
    fn orthogonal_augmented_inputs_at_depth_one() {
        // x = (1), x' = (-1): augmented vectors are orthogonal so u = 0, s = 2
        let k = KernelSpec::new(1).unwrap();
        let v = analytic_ntk(k, &[1.0], &[-1.0]);
        // l = 0: s * u * k0(u) = 0; l = 1: s * k1(0) + 1 = 2/pi + 1
        assert!((v - (2.0 / PI + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn empirical_kernel_basic_properties() {
        let p = init_params(NetArch::new(2, 16, 2).unwrap(), 3);
        let a = [0.2, 0.7];
        let b = [0.9, 0.1];
        assert!(empirical_ntk(&p, &a, &a).unwrap() >= 0.0);
        assert_eq!(
            empirical_ntk(&p, &a, &b).unwrap(),
            empirical_ntk(&p, &b, &a).unwrap()
        );
    }

    #[test]
    fn single_point_gram() {
        let k = KernelSpec::new(3).unwrap();
        let pts = DMatrix::from_row_slice(1, 2, &[0.5, -0.25]);
        let g = gram(&k, &pts).unwrap();
        assert!((g.entries()[(0, 0)] - ntk_diagonal(3, &[0.5, -0.25])).abs() < 1e-12);
    }

    #[test]
    fn duplicated_points_are_rank_deficient() {
        let k = KernelSpec::new(2).unwrap();
        let pts = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.1, 0.2, 0.8, 0.3]);
        let g = gram(&k, &pts).unwrap();
        let (lo, hi) = g.eigen_range();
        assert!(lo.abs() <= 1e-8 * hi);
        assert!(g.is_psd());
    }

    #[test]
    fn empirical_gram_matches_pairwise() {
        let p = Arc::new(init_params(NetArch::new(2, 8, 2).unwrap(), 5));
        let k = EmpiricalKernel::new(p.clone());
        let pts = DMatrix::from_row_slice(3, 2, &[0.1, 0.2, 0.5, 0.9, 0.8, 0.3]);
        let g = gram(&k, &pts).unwrap();
        let v = empirical_ntk(&p, &[0.5, 0.9], &[0.8, 0.3]).unwrap();
        assert!((g.entries()[(1, 2)] - v).abs() < 1e-10);
    }

    #[test]
    fn csv_export_has_full_precision() {
        let k = KernelSpec::new(1).unwrap();
        let pts = DMatrix::from_row_slice(2, 1, &[0.1, 0.3]);
        let g = gram(&k, &pts).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let first: f64 = text.lines().next().unwrap().split(',').next().unwrap().parse().unwrap();
        assert_eq!(first, g.entries()[(0, 0)]);
        assert_eq!(text.lines().count(), 2);
    }
}

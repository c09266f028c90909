//! Fully connected ReLU network in the NTK parameterization.
//!
//! With `a_0 = x` and hidden width `m`, layers `i < L` compute
//!
//! - `z_i = sqrt(2/m) * (W_i a_i + b_i)`
//! - `a_{i+1} = relu(z_i)`
//!
//! and the output layer is the plain affine map `W_L a_L + b_L`. Every hidden
//! layer has width `m`, the input layer takes `d` features and the output is
//! scalar.
//!
//! Training always works with the *difference network*
//! `f_theta(x) = f~_theta(x) - f~_theta0(x)`, which is identically zero at the
//! initialization `theta0`.
//!
//! The flat parameter order is layer-major. Inside a layer the weight matrix
//! comes first in row-major order, followed by the bias vector.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};

/// Shape of the network: `depth` hidden activations of equal `width` on
/// `input_dim` features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArch {
    pub depth: usize,
    pub width: usize,
    pub input_dim: usize,
}

impl NetArch {
    pub fn new(depth: usize, width: usize, input_dim: usize) -> Result<Self> {
        let arch = Self {
            depth,
            width,
            input_dim,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 || self.input_dim == 0 {
            return arg_err(format!(
                "network depth, width and input dim must be >= 1, got {:?}",
                self
            ));
        }
        Ok(())
    }

    /// `(rows, cols)` of the weight matrix of `layer` (0..=depth).
    pub fn layer_shape(&self, layer: usize) -> (usize, usize) {
        let rows = if layer == self.depth { 1 } else { self.width };
        let cols = if layer == 0 {
            self.input_dim
        } else {
            self.width
        };
        (rows, cols)
    }

    pub fn param_count(&self) -> usize {
        (0..=self.depth)
            .map(|l| {
                let (r, c) = self.layer_shape(l);
                r * c + r
            })
            .sum()
    }

    /// Scale `sqrt(2/m)` applied to every hidden layer.
    pub fn hidden_scale(&self) -> f64 {
        (2.0 / self.width as f64).sqrt()
    }
}

/// All weights and biases of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    arch: NetArch,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
}

/// Parameters flattened into a single vector, see the module docs for the order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatParams {
    values: Vec<f64>,
}

impl FlatParams {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn dot(&self, other: &FlatParams) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a * b)
            .sum()
    }
}

impl NetParams {
    pub fn zeros(arch: NetArch) -> Self {
        let weights = (0..=arch.depth)
            .map(|l| {
                let (r, c) = arch.layer_shape(l);
                DMatrix::zeros(r, c)
            })
            .collect();
        let biases = (0..=arch.depth)
            .map(|l| DVector::zeros(arch.layer_shape(l).0))
            .collect();
        Self {
            arch,
            weights,
            biases,
        }
    }

    pub fn arch(&self) -> NetArch {
        self.arch
    }

    pub fn weights(&self) -> &[DMatrix<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[DVector<f64>] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [DMatrix<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [DVector<f64>] {
        &mut self.biases
    }

    pub fn to_flat(&self) -> FlatParams {
        let mut values = Vec::with_capacity(self.arch.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for r in 0..w.nrows() {
                values.extend(w.row(r).iter());
            }
            values.extend(b.iter());
        }
        FlatParams { values }
    }

    pub fn from_flat(arch: NetArch, flat: &FlatParams) -> Result<Self> {
        arch.validate()?;
        if flat.len() != arch.param_count() {
            return dim_err(format!(
                "flat parameter vector has {} entries, architecture needs {}",
                flat.len(),
                arch.param_count()
            ));
        }
        let mut out = Self::zeros(arch);
        let mut pos = 0;
        for (w, b) in out.weights.iter_mut().zip(out.biases.iter_mut()) {
            let (r, c) = w.shape();
            *w = DMatrix::from_row_slice(r, c, &flat.values[pos..pos + r * c]);
            pos += r * c;
            b.copy_from_slice(&flat.values[pos..pos + r]);
            pos += r;
        }
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn check_same_arch(&self, other: &NetParams) -> Result<()> {
        if self.arch != other.arch {
            return dim_err(format!(
                "architecture mismatch: {:?} vs {:?}",
                self.arch, other.arch
            ));
        }
        Ok(())
    }

    /// `self += alpha * other`. Architectures must agree.
    pub(crate) fn axpy(&mut self, alpha: f64, other: &NetParams) {
        debug_assert_eq!(self.arch, other.arch);
        for (w, ow) in self.weights.iter_mut().zip(&other.weights) {
            for (a, b) in w.as_mut_slice().iter_mut().zip(ow.as_slice()) {
                *a += alpha * b;
            }
        }
        for (b, ob) in self.biases.iter_mut().zip(&other.biases) {
            b.axpy(alpha, ob, 1.0);
        }
    }

    /// `self - other` as a parameter-shaped value.
    pub(crate) fn difference(&self, other: &NetParams) -> NetParams {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }

    /// Sum of squares of every entry.
    pub fn squared_norm(&self) -> f64 {
        self.weights.iter().map(|w| w.norm_squared()).sum::<f64>()
            + self.biases.iter().map(|b| b.norm_squared()).sum::<f64>()
    }

    pub(crate) fn dot(&self, other: &NetParams) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| a.dot(b))
            .sum::<f64>()
            + self
                .biases
                .iter()
                .zip(&other.biases)
                .map(|(a, b)| a.dot(b))
                .sum::<f64>()
    }
}

/// Draws `W_0..W_L` and `b_0` i.i.d. standard normal from a seeded stream;
/// `b_1..b_L` start at zero. Draw order follows the flat parameter order.
pub fn init_params(arch: NetArch, seed: u64) -> NetParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = NetParams::zeros(arch);
    for layer in 0..=arch.depth {
        let (r, c) = arch.layer_shape(layer);
        let w = &mut params.weights[layer];
        for i in 0..r {
            for j in 0..c {
                w[(i, j)] = StandardNormal.sample(&mut rng);
            }
        }
        if layer == 0 {
            for v in params.biases[0].iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        }
    }
    params
}

fn check_input(arch: &NetArch, x: &[f64]) -> Result<()> {
    if x.len() != arch.input_dim {
        return dim_err(format!(
            "input has {} features, network expects {}",
            x.len(),
            arch.input_dim
        ));
    }
    Ok(())
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Hidden activations `a_0 = X^T, a_1, ..., a_L` (one column per sample) and
/// the network output, kept for a later backward pass.
pub struct ForwardCache {
    activations: Vec<DMatrix<f64>>,
    output: DVector<f64>,
}

fn forward_pass(params: &NetParams, inputs: DMatrix<f64>) -> ForwardCache {
    let arch = params.arch;
    let scale = arch.hidden_scale();
    let n = inputs.ncols();
    let mut activations = Vec::with_capacity(arch.depth + 1);
    activations.push(inputs);
    for layer in 0..arch.depth {
        let w = &params.weights[layer];
        let b = &params.biases[layer];
        let mut z = DMatrix::zeros(w.nrows(), n);
        z.gemm(1.0, w, &activations[layer], 0.0);
        for mut col in z.column_iter_mut() {
            for (v, bias) in col.iter_mut().zip(b.iter()) {
                *v = relu(scale * (*v + bias));
            }
        }
        activations.push(z);
    }
    let w_out = &params.weights[arch.depth];
    let b_out = params.biases[arch.depth][0];
    let out_row = w_out * &activations[arch.depth];
    let output = DVector::from_iterator(n, out_row.iter().map(|v| v + b_out));
    ForwardCache {
        activations,
        output,
    }
}

fn batch_inputs(arch: &NetArch, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != arch.input_dim {
        return dim_err(format!(
            "input matrix has {} columns, network expects {}",
            x.ncols(),
            arch.input_dim
        ));
    }
    Ok(x.transpose())
}

impl ForwardCache {
    /// `f~_theta` at each input row.
    pub fn output(&self) -> &DVector<f64> {
        &self.output
    }
}

/// Forward pass over the rows of `x`, keeping activations for [`backward`].
pub fn forward_cache(params: &NetParams, x: &DMatrix<f64>) -> Result<ForwardCache> {
    let inputs = batch_inputs(&params.arch, x)?;
    Ok(forward_pass(params, inputs))
}

/// Gradient of `sum_i weights_i * f~_theta(x_i)` from a cached forward pass.
pub fn backward(params: &NetParams, cache: &ForwardCache, weights: &DVector<f64>) -> Result<NetParams> {
    if weights.len() != cache.output.len() {
        return dim_err(format!(
            "{} weights for {} cached inputs",
            weights.len(),
            cache.output.len()
        ));
    }
    Ok(backward_pass(params, cache, weights))
}

/// Evaluates `f~_theta(x)` for a single point.
pub fn forward_base(params: &NetParams, x: &[f64]) -> Result<f64> {
    check_input(&params.arch, x)?;
    let inputs = DMatrix::from_column_slice(x.len(), 1, x);
    Ok(forward_pass(params, inputs).output[0])
}

/// Evaluates `f~_theta` on every row of `x` (n x d).
pub fn forward_base_batch(params: &NetParams, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    let inputs = batch_inputs(&params.arch, x)?;
    Ok(forward_pass(params, inputs).output)
}

/// Difference network `f~_theta(x) - f~_theta0(x)`.
pub fn forward(params: &NetParams, params0: &NetParams, x: &[f64]) -> Result<f64> {
    params.check_same_arch(params0)?;
    Ok(forward_base(params, x)? - forward_base(params0, x)?)
}

pub fn forward_batch(
    params: &NetParams,
    params0: &NetParams,
    x: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    params.check_same_arch(params0)?;
    Ok(forward_base_batch(params, x)? - forward_base_batch(params0, x)?)
}

/// Reverse-mode gradient of `sum_i weights_i * f~_theta(x_i)` with respect to
/// every parameter, together with the outputs `f~_theta(x_i)`.
///
/// The ReLU derivative at exactly zero is taken as zero.
pub fn weighted_gradient(
    params: &NetParams,
    x: &DMatrix<f64>,
    weights: &DVector<f64>,
) -> Result<(NetParams, DVector<f64>)> {
    if weights.len() != x.nrows() {
        return dim_err(format!(
            "{} weights for {} inputs",
            weights.len(),
            x.nrows()
        ));
    }
    let inputs = batch_inputs(&params.arch, x)?;
    let pass = forward_pass(params, inputs);
    Ok((backward_pass(params, &pass, weights), pass.output))
}

fn backward_pass(params: &NetParams, pass: &ForwardCache, weights: &DVector<f64>) -> NetParams {
    let arch = params.arch;
    let depth = arch.depth;
    let scale = arch.hidden_scale();
    let mut grad = NetParams::zeros(arch);

    // output layer
    let a_last = &pass.activations[depth];
    let gw = a_last * weights;
    grad.weights[depth].copy_from_slice(gw.as_slice());
    grad.biases[depth][0] = weights.sum();

    // delta holds d(objective)/d(a_{layer+1}), one column per sample
    let w_out = params.weights[depth].row(0).transpose();
    let mut delta = &w_out * weights.transpose();
    for layer in (0..depth).rev() {
        let a_next = &pass.activations[layer + 1];
        delta.zip_apply(a_next, |d, a| {
            *d = if a > 0.0 { *d * scale } else { 0.0 };
        });
        let a_in = &pass.activations[layer];
        grad.weights[layer].gemm(1.0, &delta, &a_in.transpose(), 0.0);
        grad.biases[layer] = delta.column_sum();
        if layer > 0 {
            let wt = params.weights[layer].transpose();
            delta = &wt * &delta;
        }
    }
    grad
}

/// Exact gradient of `f~_theta(x)` in flat parameter order.
pub fn param_gradient(params: &NetParams, x: &[f64]) -> Result<FlatParams> {
    check_input(&params.arch, x)?;
    let xm = DMatrix::from_row_slice(1, x.len(), x);
    let (grad, _) = weighted_gradient(params, &xm, &DVector::from_element(1, 1.0))?;
    Ok(grad.to_flat())
}

/// `||theta - theta0||^2`.
pub fn penalty(params: &NetParams, params0: &NetParams) -> Result<f64> {
    params.check_same_arch(params0)?;
    let w: f64 = params
        .weights
        .iter()
        .zip(&params0.weights)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    let b: f64 = params
        .biases
        .iter()
        .zip(&params0.biases)
        .map(|(a, b)| (a - b).norm_squared())
        .sum();
    Ok(w + b)
}

/// On-disk checkpoint holding `theta`, `theta0` and the seed that produced `theta0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub arch: NetArch,
    pub seed: u64,
    pub theta: FlatParams,
    pub theta0: FlatParams,
}

impl Checkpoint {
    pub const VERSION: u32 = 1;

    pub fn new(params: &NetParams, params0: &NetParams, seed: u64) -> Result<Self> {
        params.check_same_arch(params0)?;
        Ok(Self {
            version: Self::VERSION,
            arch: params.arch,
            seed,
            theta: params.to_flat(),
            theta0: params0.to_flat(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(s)?;
        if ckpt.version != Self::VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn params(&self) -> Result<(NetParams, NetParams)> {
        Ok((
            NetParams::from_flat(self.arch, &self.theta)?,
            NetParams::from_flat(self.arch, &self.theta0)?,
        ))
    }
}

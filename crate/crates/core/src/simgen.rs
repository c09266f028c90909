//! Datasets, the simulation designs (Cases 1-4) and evaluation metrics.
//!
//! Covariates: `Z ~ Unif[0,1]^2`, `X_j = 0.9 W_j + 0.05 (Z_1 + Z_2)` with
//! `W_j ~ Unif[0,1]`, so every `X_j` lies in `[0, 1]`. The true parameter is
//! `beta0 = (1, 0.75)`.

use std::io::{Read, Write};
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, dim_err, Error, Result};
use crate::losses::{sigmoid, normal_cdf};

pub const BETA0: [f64; 2] = [1.0, 0.75];
pub const NOISE_SD: f64 = 0.5;
/// Draws used for the Monte Carlo centering constant `E_X[f0(X)]`.
pub const CENTERING_DRAWS: usize = 1_000_000;
const CENTERING_SEED: u64 = 0x5eed_cafe;
/// Size of the fresh covariate sample used by [`mse_f`].
pub const DEFAULT_TEST_N: usize = 10_000;

/// Counter-based stream `stream` of the master `seed`.
pub fn derive_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Ground truth attached to simulated data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta0: Vec<f64>,
    pub case: CaseSpec,
    pub seed: u64,
}

/// Observations `(Y_i, Z_i, X_i)`; `z` is n x p and `x` is n x d.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub y: DVector<f64>,
    pub z: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub kind: TaskKind,
    pub truth: Option<Truth>,
}

impl Dataset {
    pub fn new(y: DVector<f64>, z: DMatrix<f64>, x: DMatrix<f64>, kind: TaskKind) -> Result<Self> {
        let n = y.len();
        if z.nrows() != n || x.nrows() != n {
            return dim_err(format!(
                "y has {} rows, Z has {}, X has {}",
                n,
                z.nrows(),
                x.nrows()
            ));
        }
        for (i, &v) in y.iter().enumerate() {
            match kind {
                TaskKind::Classification if v != 0.0 && v != 1.0 => {
                    return Err(Error::Data(format!("row {}: label {v} is not 0/1", i + 1)))
                }
                _ if !v.is_finite() => {
                    return Err(Error::Data(format!("row {}: non-finite response", i + 1)))
                }
                _ => {}
            }
        }
        if z.iter().chain(x.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite covariate".into()));
        }
        Ok(Self {
            y,
            z,
            x,
            kind,
            truth: None,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.z.ncols()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    /// Rows of `X` as owned vectors.
    pub fn x_rows(&self) -> Vec<Vec<f64>> {
        crate::linalg::rows(&self.x)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            y: DVector::from_iterator(idx.len(), idx.iter().map(|&i| self.y[i])),
            z: self.z.select_rows(idx),
            x: self.x.select_rows(idx),
            kind: self.kind,
            truth: self.truth.clone(),
        }
    }

    /// Deterministic split into `(train, validation)` with `train_frac` of the
    /// rows (rounded) in the training part.
    pub fn split(&self, train_frac: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        let n = self.n();
        let n_train = (train_frac * n as f64).round() as usize;
        if n_train == 0 || n_train >= n {
            return arg_err(format!("cannot split {n} rows with fraction {train_frac}"));
        }
        let mut idx: Vec<usize> = (0..n).collect();
        let mut rng = derive_rng(seed, 0x5b1);
        // Fisher-Yates
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            idx.swap(i, j);
        }
        let (tr, va) = idx.split_at(n_train);
        let mut tr = tr.to_vec();
        let mut va = va.to_vec();
        tr.sort_unstable();
        va.sort_unstable();
        Ok((self.subset(&tr), self.subset(&va)))
    }

    /// CSV with header `y,z1..zp,x1..xd`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["y".to_string()];
        header.extend((1..=self.p()).map(|j| format!("z{j}")));
        header.extend((1..=self.d()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut rec = vec![format!("{:e}", self.y[i])];
            rec.extend(self.z.row(i).iter().map(|v| format!("{v:e}")));
            rec.extend(self.x.row(i).iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, kind: TaskKind) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(input);
        let header = rdr.headers()?.clone();
        let names: Vec<&str> = header.iter().map(str::trim).collect();
        if names.first() != Some(&"y") {
            return Err(Error::Data("header must start with `y`".into()));
        }
        let p = names.iter().filter(|h| h.starts_with('z')).count();
        let d = names.iter().filter(|h| h.starts_with('x')).count();
        let expected: Vec<String> = std::iter::once("y".to_string())
            .chain((1..=p).map(|j| format!("z{j}")))
            .chain((1..=d).map(|j| format!("x{j}")))
            .collect();
        if names != expected.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Data(format!(
                "header {:?} does not match y,z1..zp,x1..xd",
                names
            )));
        }
        let (mut ys, mut zs, mut xs) = (Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in rdr.records().enumerate() {
            // data rows are numbered from 1, the header is row 0
            let line = row + 1;
            let rec = rec.map_err(|e| Error::Data(format!("row {line}: {e}")))?;
            if rec.len() != 1 + p + d {
                return Err(Error::Data(format!(
                    "row {line}: expected {} fields, found {}",
                    1 + p + d,
                    rec.len()
                )));
            }
            let mut vals = Vec::with_capacity(rec.len());
            for (j, field) in rec.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::Data(format!("row {line}, column {}: cannot parse {field:?}", names[j]))
                })?;
                vals.push(v);
            }
            ys.push(vals[0]);
            zs.extend_from_slice(&vals[1..1 + p]);
            xs.extend_from_slice(&vals[1 + p..]);
        }
        let n = ys.len();
        if n == 0 {
            return Err(Error::Data("dataset has no rows".into()));
        }
        Dataset::new(
            DVector::from_vec(ys),
            DMatrix::from_row_slice(n, p, &zs),
            DMatrix::from_row_slice(n, d, &xs),
            kind,
        )
    }
}

/// One of the four simulation designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub case: u8,
    pub d: usize,
}

impl CaseSpec {
    pub fn new(case: u8) -> Result<Self> {
        let d = match case {
            1 | 3 => 5,
            2 | 4 => 10,
            _ => return arg_err(format!("unknown case {case}, expected 1-4")),
        };
        Ok(Self { case, d })
    }

    pub fn beta0(&self) -> DVector<f64> {
        DVector::from_row_slice(&BETA0)
    }
}

fn additive_block(x: &[f64]) -> f64 {
    x[0] * x[0] * x[1].powi(3) + x[2].ln_1p() + (1.0 + x[3] * x[4]).sqrt() + (x[4] / 2.0).exp()
}

/// True nonparametric component of `case` at `x`.
pub fn f0_eval(case: &CaseSpec, x: &[f64]) -> Result<f64> {
    if x.len() != case.d {
        return dim_err(format!(
            "case {} needs d = {}, got a {}-vector",
            case.case,
            case.d,
            x.len()
        ));
    }
    Ok(f0_unchecked(case, x))
}

fn f0_unchecked(case: &CaseSpec, x: &[f64]) -> f64 {
    match case.case {
        1 => 5.0 * additive_block(x),
        2 => 2.5 * (additive_block(&x[..5]) + additive_block(&x[5..])),
        _ => {
            let d = case.d as f64;
            let s: f64 = x.iter().enumerate().map(|(l, v)| (l + 1) as f64 * v).sum();
            5.0 * (6.0 * std::f64::consts::PI / (d * (d + 1.0)) * s).sin()
        }
    }
}

fn f0_rows(case: &CaseSpec, x: &DMatrix<f64>) -> DVector<f64> {
    let mut buf = vec![0.0; x.ncols()];
    DVector::from_iterator(
        x.nrows(),
        (0..x.nrows()).map(|i| {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = x[(i, j)];
            }
            f0_unchecked(case, &buf)
        }),
    )
}

fn draw_covariates<R: Rng>(rng: &mut R, n: usize, d: usize) -> (DMatrix<f64>, DMatrix<f64>) {
    let mut z = DMatrix::zeros(n, 2);
    let mut x = DMatrix::zeros(n, d);
    for i in 0..n {
        let z1: f64 = rng.random();
        let z2: f64 = rng.random();
        z[(i, 0)] = z1;
        z[(i, 1)] = z2;
        for j in 0..d {
            let w: f64 = rng.random();
            x[(i, j)] = 0.9 * w + 0.05 * (z1 + z2);
        }
    }
    (z, x)
}

/// `(Z, X)` for `n` units, deterministic in `seed`.
pub fn gen_covariates(n: usize, d: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
    draw_covariates(&mut derive_rng(seed, 0), n, d)
}

/// Regression data `Y = f0(X) + Z^T beta0 + eps`, `eps ~ N(0, sigma^2)`.
pub fn gen_regression(case: &CaseSpec, n: usize, seed: u64) -> Dataset {
    gen_regression_with_noise(case, n, seed, NOISE_SD)
}

/// As [`gen_regression`] with a custom noise level (`sigma = 0` gives noiseless data).
pub fn gen_regression_with_noise(case: &CaseSpec, n: usize, seed: u64, sigma: f64) -> Dataset {
    let (z, x) = gen_covariates(n, case.d, seed);
    let mut rng = derive_rng(seed, 1);
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mean = f0_rows(case, &x) + &z * case.beta0();
    let y = mean.map(|m| m + sigma * noise.sample(&mut rng));
    Dataset {
        y,
        z,
        x,
        kind: TaskKind::Regression,
        truth: Some(Truth {
            beta0: BETA0.to_vec(),
            case: *case,
            seed,
        }),
    }
}

fn centering_estimate(case: &CaseSpec, draws: usize, seed: u64) -> f64 {
    let mut rng = derive_rng(seed, 2);
    let mut buf = vec![0.0; case.d];
    let mut sum = 0.0;
    for _ in 0..draws {
        let z1: f64 = rng.random();
        let z2: f64 = rng.random();
        for b in buf.iter_mut() {
            let w: f64 = rng.random();
            *b = 0.9 * w + 0.05 * (z1 + z2);
        }
        sum += f0_unchecked(case, &buf);
    }
    sum / draws as f64
}

/// Monte Carlo estimate of `E_X[f0(X)]` from `draws` covariate draws of stream `seed`.
pub fn centering_constant_with(case: &CaseSpec, draws: usize, seed: u64) -> f64 {
    centering_estimate(case, draws, seed)
}

/// Cached `E_X[f0(X)]` for `case`, estimated once from 10^6 draws with a fixed seed.
pub fn centering_constant(case: &CaseSpec) -> f64 {
    static CACHE: [OnceLock<f64>; 4] = [
        OnceLock::new(),
        OnceLock::new(),
        OnceLock::new(),
        OnceLock::new(),
    ];
    *CACHE[(case.case - 1) as usize]
        .get_or_init(|| centering_estimate(case, CENTERING_DRAWS, CENTERING_SEED))
}

/// Which link generates the labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TruthLink {
    #[default]
    Logistic,
    /// Probit truth, for misspecification studies with a logistic working loss.
    Probit,
}

/// Classification data with `P(Y = 1) = phi(f0(X) + Z^T beta0 - E f0)`.
pub fn gen_classification(case: &CaseSpec, n: usize, seed: u64) -> Dataset {
    gen_classification_with_link(case, n, seed, TruthLink::Logistic)
}

pub fn gen_classification_with_link(
    case: &CaseSpec,
    n: usize,
    seed: u64,
    link: TruthLink,
) -> Dataset {
    let (z, x) = gen_covariates(n, case.d, seed);
    let center = centering_constant(case);
    let index = f0_rows(case, &x) + &z * case.beta0();
    let mut rng = derive_rng(seed, 1);
    let y = index.map(|t| {
        let p = match link {
            TruthLink::Logistic => sigmoid(t - center),
            TruthLink::Probit => normal_cdf(t - center),
        };
        let u: f64 = rng.random();
        if u < p {
            1.0
        } else {
            0.0
        }
    });
    Dataset {
        y,
        z,
        x,
        kind: TaskKind::Classification,
        truth: Some(Truth {
            beta0: BETA0.to_vec(),
            case: *case,
            seed,
        }),
    }
}

/// Centered truth `f0(x) - E f0` used by the classification generator.
pub fn f0_centered(case: &CaseSpec, x: &[f64]) -> Result<f64> {
    Ok(f0_eval(case, x)? - centering_constant(case))
}

/// Summed squared error `|beta_hat - beta0|^2`.
pub fn mse_beta(beta_hat: &[f64], beta0: &[f64]) -> Result<f64> {
    if beta_hat.len() != beta0.len() {
        return dim_err(format!(
            "beta_hat has {} entries, beta0 has {}",
            beta_hat.len(),
            beta0.len()
        ));
    }
    Ok(beta_hat
        .iter()
        .zip(beta0)
        .map(|(a, b)| (a - b) * (a - b))
        .sum())
}

/// Mean squared error of a predictor against `f0` on a fresh covariate sample.
///
/// For classification both functions are centered by their test-sample mean
/// first, since the intercept is not identified there.
pub fn mse_f<F>(predict: F, case: &CaseSpec, kind: TaskKind, test_n: usize, seed: u64) -> Result<f64>
where
    F: Fn(&DMatrix<f64>) -> Result<DVector<f64>>,
{
    if test_n == 0 {
        return arg_err("test sample must be nonempty");
    }
    let (_, x) = gen_covariates(test_n, case.d, seed);
    let mut fhat = predict(&x)?;
    let mut truth = f0_rows(case, &x);
    if fhat.len() != test_n {
        return dim_err("predictor returned the wrong number of values");
    }
    if kind == TaskKind::Classification {
        let (mh, mt) = (fhat.mean(), truth.mean());
        fhat.add_scalar_mut(-mh);
        truth.add_scalar_mut(-mt);
    }
    Ok((fhat - truth).norm_squared() / test_n as f64)
}

/// `f0` evaluated on each row of `x`.
pub fn f0_batch(case: &CaseSpec, x: &DMatrix<f64>) -> Result<DVector<f64>> {
    if x.ncols() != case.d {
        return dim_err(format!("case {} needs d = {}", case.case, case.d));
    }
    Ok(f0_rows(case, x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn covariates_in_unit_cube_and_deterministic() {
        let (z, x) = gen_covariates(500, 5, 3);
        assert!(x.min() >= 0.0 && x.max() <= 1.0);
        assert!(z.min() >= 0.0 && z.max() <= 1.0);
        let (z2, x2) = gen_covariates(500, 5, 3);
        assert_eq!((z, x), (z2, x2));
    }

    #[test]
    fn covariates_correlate_with_z() {
        let (z, x) = gen_covariates(5000, 5, 17);
        let s: Vec<f64> = (0..5000).map(|i| z[(i, 0)] + z[(i, 1)]).collect();
        let x0: Vec<f64> = x.column(0).iter().copied().collect();
        let corr = correlation(&s, &x0);
        assert!(corr >= 0.05, "corr {corr}");
    }

    fn correlation(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn f0_hand_values() {
        let c1 = CaseSpec::new(1).unwrap();
        assert!((f0_eval(&c1, &[0.0; 5]).unwrap() - 10.0).abs() < 1e-12);
        let expect = 5.0 * (1.0 + 2f64.ln() + 2f64.sqrt() + 0.5f64.exp());
        assert!((f0_eval(&c1, &[1.0; 5]).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 23.78041).abs() < 1e-5);
        let c3 = CaseSpec::new(3).unwrap();
        assert_eq!(f0_eval(&c3, &[0.0; 5]).unwrap(), 0.0);
        let c2 = CaseSpec::new(2).unwrap();
        assert!((f0_eval(&c2, &[0.0; 10]).unwrap() - 10.0).abs() < 1e-12);
        assert!(f0_eval(&c1, &[0.0; 10]).is_err());
        assert!(CaseSpec::new(5).is_err());
    }

    #[test]
    fn case4_matches_formula() {
        let c4 = CaseSpec::new(4).unwrap();
        let x: Vec<f64> = (0..10).map(|i| 0.05 * i as f64).collect();
        let s: f64 = x.iter().enumerate().map(|(l, v)| (l + 1) as f64 * v).sum();
        let expect = 5.0 * (6.0 * std::f64::consts::PI / 110.0 * s).sin();
        assert!((f0_eval(&c4, &x).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn noiseless_regression_is_exact() {
        let c = CaseSpec::new(1).unwrap();
        let data = gen_regression_with_noise(&c, 50, 4, 0.0);
        for i in 0..50 {
            let x: Vec<f64> = data.x.row(i).iter().copied().collect();
            let m = f0_eval(&c, &x).unwrap() + data.z[(i, 0)] + 0.75 * data.z[(i, 1)];
            assert!((data.y[i] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_noise_is_centered() {
        let c = CaseSpec::new(3).unwrap();
        let n = 4000;
        let data = gen_regression(&c, n, 8);
        let mean = f0_batch(&c, &data.x).unwrap() + &data.z * c.beta0();
        let resid = (&data.y - mean).mean();
        assert!(resid.abs() <= 4.0 * 0.5 / (n as f64).sqrt());
    }

    #[test]
    fn classification_labels_follow_probabilities() {
        let c = CaseSpec::new(1).unwrap();
        let n = 4000;
        let data = gen_classification(&c, n, 10);
        assert!(data.y.iter().all(|&v| v == 0.0 || v == 1.0));
        let center = centering_constant(&c);
        let idx = f0_batch(&c, &data.x).unwrap() + &data.z * c.beta0();
        let mean_p = idx.map(|t| sigmoid(t - center)).mean();
        assert!((data.y.mean() - mean_p).abs() <= 4.0 / (n as f64).sqrt());
        assert_eq!(gen_classification(&c, 100, 10).y, gen_classification(&c, 100, 10).y);
    }

    #[test]
    fn metrics() {
        assert_eq!(mse_beta(&[1.0, 0.75], &BETA0).unwrap(), 0.0);
        assert!((mse_beta(&[1.1, 0.75], &BETA0).unwrap() - 0.01).abs() < 1e-12);
        assert!(mse_beta(&[1.0], &BETA0).is_err());
        let c = CaseSpec::new(1).unwrap();
        let exact = |x: &DMatrix<f64>| f0_batch(&c, x);
        assert_eq!(mse_f(exact, &c, TaskKind::Regression, 200, 1).unwrap(), 0.0);
        let shifted = |x: &DMatrix<f64>| f0_batch(&c, x).map(|v| v.add_scalar(3.0));
        assert!(mse_f(shifted, &c, TaskKind::Classification, 200, 1).unwrap() < 1e-20);
        assert!((mse_f(shifted, &c, TaskKind::Regression, 200, 1).unwrap() - 9.0).abs() < 1e-9);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let c = CaseSpec::new(1).unwrap();
        let data = gen_regression(&c, 101, 2);
        let (tr, va) = data.split(0.8, 5).unwrap();
        assert_eq!(tr.n() + va.n(), 101);
        assert_eq!(tr.n(), 81);
        let (tr2, _) = data.split(0.8, 5).unwrap();
        assert_eq!(tr.y, tr2.y);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let c = CaseSpec::new(1).unwrap();
        let mut data = gen_regression(&c, 20, 2);
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice(), TaskKind::Regression).unwrap();
        data.truth = None;
        assert_eq!(back, data);

        let bad = "y,z1,x1\n1.0,0.5,0.2\n2.0,oops,0.1\n";
        let err = Dataset::read_csv(bad.as_bytes(), TaskKind::Regression).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        let short = "y,z1,x1\n1.0,0.5\n";
        let err = Dataset::read_csv(short.as_bytes(), TaskKind::Regression).unwrap_err();
        assert!(err.to_string().contains("row 1"), "{err}");
        let labels = "y,z1,x1\n0.5,0.5,0.2\n";
        assert!(Dataset::read_csv(labels.as_bytes(), TaskKind::Classification).is_err());
    }
}

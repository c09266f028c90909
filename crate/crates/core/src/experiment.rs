//! Experiment configs and drivers: single fits, Monte Carlo simulations,
//! kernel checks and flow-gap sweeps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineSpec};
use crate::error::{Error, Result};
use crate::inference::{self, ConfidenceIntervals, InferenceConfig, InferenceReport};
use crate::losses::LossSpec;
use crate::mlp::{self, NetArch};
use crate::ntk::{self, KernelKind, KernelSpec};
use crate::simgen::{self, derive_rng, CaseSpec, Dataset, TaskKind, TruthLink};
use crate::train::{self, Batch, FitDiagnostics, FitResult, GapReport, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_VERSION
}
fn default_depth() -> usize {
    5
}
fn default_width() -> usize {
    1000
}
fn default_step() -> f64 {
    train::DEFAULT_STEP
}
fn default_epochs() -> usize {
    train::DEFAULT_STEPS
}
fn default_batch() -> Batch {
    Batch::Minibatch {
        size: train::DEFAULT_MINIBATCH,
    }
}
fn default_lambda_c() -> Vec<f64> {
    vec![1.0]
}
fn default_jobs() -> usize {
    1
}
fn default_test_n() -> usize {
    simgen::DEFAULT_TEST_N
}

fn check_version(v: u32) -> Result<()> {
    if v != CONFIG_VERSION {
        return Err(Error::Config(format!(
            "config version {v} is not supported (expected {CONFIG_VERSION})"
        )));
    }
    Ok(())
}

/// Network and optimizer settings of the proposed estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSettings {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_step")]
    pub step: f64,
    /// Epochs; one full-batch step each when `batch` is full.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: Batch,
    /// Smoothness `s` used by the penalty schedule, if known.
    #[serde(default)]
    pub smoothness: Option<f64>,
}

impl Default for NetSettings {
    fn default() -> Self {
        Self {
            depth: default_depth(),
            width: default_width(),
            step: default_step(),
            epochs: default_epochs(),
            batch: default_batch(),
            smoothness: None,
        }
    }
}

impl NetSettings {
    pub fn validate(&self) -> Result<()> {
        NetArch::new(self.depth, self.width, 1)
            .map_err(|e| Error::Config(format!("net: {e}")))?;
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::Config(format!("net.step must be > 0, got {}", self.step)));
        }
        if let Batch::Minibatch { size: 0 } = self.batch {
            return Err(Error::Config("net.batch.size must be >= 1".into()));
        }
        Ok(())
    }

    fn train_config(&self, lambda: f64, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda,
            step: self.step,
            steps: self.epochs,
            seed,
            checkpoints: Vec::new(),
            batch: self.batch,
            fixed_beta: None,
        }
    }
}

/// An estimator with its hyperparameter grid. `lambda_c` entries multiply
/// the rate `n^{-(d+1)/(2d+1)}` (or its smoothness-adjusted version); `step`
/// entries replace `net.step`, setting the flow time at a fixed epoch budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodSpec {
    Proposed {
        #[serde(default = "default_lambda_c")]
        lambda_c: Vec<f64>,
        #[serde(default)]
        step: Vec<f64>,
    },
    Spline {
        knots_per_dim: Vec<usize>,
    },
    RkhsLaplacian {
        bandwidth: Vec<f64>,
        #[serde(default = "default_lambda_c")]
        lambda_c: Vec<f64>,
    },
    LocalLinear {
        bandwidth: Vec<f64>,
    },
    SmallNn {
        width: Vec<usize>,
    },
}

impl MethodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            MethodSpec::Proposed { .. } => "proposed",
            MethodSpec::Spline { .. } => "spline",
            MethodSpec::RkhsLaplacian { .. } => "rkhs_laplacian",
            MethodSpec::LocalLinear { .. } => "local_linear",
            MethodSpec::SmallNn { .. } => "small_nn",
        }
    }

    fn candidates(&self) -> Vec<Candidate> {
        match self {
            MethodSpec::Proposed { lambda_c, step } => {
                let steps: Vec<Option<f64>> = if step.is_empty() {
                    vec![None]
                } else {
                    step.iter().map(|&s| Some(s)).collect()
                };
                steps
                    .iter()
                    .flat_map(|&s| {
                        lambda_c.iter().map(move |&c| Candidate {
                            baseline: None,
                            lambda_c: c,
                            step: s,
                        })
                    })
                    .collect()
            }
            MethodSpec::Spline { knots_per_dim } => knots_per_dim
                .iter()
                .map(|&k| Candidate {
                    baseline: Some(BaselineSpec::Spline { knots_per_dim: k }),
                    lambda_c: 0.0,
                    step: None,
                })
                .collect(),
            MethodSpec::RkhsLaplacian { bandwidth, lambda_c } => bandwidth
                .iter()
                .flat_map(|&h| {
                    lambda_c.iter().map(move |&c| Candidate {
                        baseline: Some(BaselineSpec::RkhsLaplacian { bandwidth: h }),
                        lambda_c: c,
                        step: None,
                    })
                })
                .collect(),
            MethodSpec::LocalLinear { bandwidth } => bandwidth
                .iter()
                .map(|&h| Candidate {
                    baseline: Some(BaselineSpec::LocalLinear { bandwidth: h }),
                    lambda_c: 0.0,
                    step: None,
                })
                .collect(),
            MethodSpec::SmallNn { width } => width
                .iter()
                .map(|&w| Candidate {
                    baseline: Some(BaselineSpec::SmallNn { width: w }),
                    lambda_c: 1.0,
                    step: None,
                })
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.candidates().is_empty() {
            return Err(Error::Config(format!("method {}: empty hyperparameter grid", self.name())));
        }
        let bad = self.candidates().iter().any(|c| !(c.lambda_c >= 0.0 && c.lambda_c.is_finite()));
        if bad {
            return Err(Error::Config(format!("method {}: lambda_c must be >= 0", self.name())));
        }
        if self.candidates().iter().any(|c| c.step.is_some_and(|s| !(s > 0.0 && s.is_finite()))) {
            return Err(Error::Config(format!("method {}: step must be > 0", self.name())));
        }
        Ok(())
    }
}

/// One point of a method's grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub baseline: Option<BaselineSpec>,
    pub lambda_c: f64,
    pub step: Option<f64>,
}

impl Candidate {
    pub fn describe(&self) -> String {
        match &self.baseline {
            None => match self.step {
                Some(s) => format!("lambda_c={},step={s}", self.lambda_c),
                None => format!("lambda_c={}", self.lambda_c),
            },
            Some(BaselineSpec::Spline { knots_per_dim }) => format!("knots_per_dim={knots_per_dim}"),
            Some(BaselineSpec::RkhsLaplacian { bandwidth }) => {
                format!("bandwidth={bandwidth},lambda_c={}", self.lambda_c)
            }
            Some(BaselineSpec::LocalLinear { bandwidth }) => format!("bandwidth={bandwidth}"),
            Some(BaselineSpec::SmallNn { width }) => format!("width={width}"),
        }
    }
}

fn default_loss(task: TaskKind) -> LossSpec {
    match task {
        TaskKind::Regression => LossSpec::Squared,
        TaskKind::Classification => LossSpec::LogisticNll,
    }
}

/// Fits `candidate` on `data`.
pub fn fit_candidate(
    candidate: &Candidate,
    data: &Dataset,
    loss: &LossSpec,
    net: &NetSettings,
    seed: u64,
) -> Result<FitResult> {
    let lambda = if candidate.lambda_c > 0.0 {
        candidate.lambda_c * train::lambda_schedule(data.n(), data.d(), net.smoothness, 1.0)?
    } else {
        0.0
    };
    let mut config = net.train_config(lambda, seed);
    if let Some(s) = candidate.step {
        config.step = s;
    }
    match &candidate.baseline {
        None => {
            let arch = NetArch::new(net.depth, net.width, data.d())?;
            train::fit_nn(data, loss, arch, &config)
        }
        Some(spec) => baselines::fit_baseline(spec, data, loss, net.depth, &config),
    }
}

/// Picks a candidate by the 80/20 validation rule, or returns the only one.
pub fn select_candidate(
    candidates: &[Candidate],
    data: &Dataset,
    loss: &LossSpec,
    net: &NetSettings,
    seed: u64,
) -> Result<Candidate> {
    let sel = train::select_by_validation(
        data,
        loss,
        candidates,
        seed,
        |c| c.lambda_c,
        |train, c| fit_candidate(c, train, loss, net, seed),
    )?;
    Ok(sel.candidate)
}

// ---------------------------------------------------------------------------
// single fit

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub task: TaskKind,
    #[serde(default)]
    pub loss: Option<LossSpec>,
    pub method: MethodSpec,
    #[serde(default)]
    pub net: NetSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub inference: Option<InferenceConfig>,
}

impl FitConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("fit config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        self.net.validate()?;
        self.method.validate()?;
        if let Some(l) = &self.loss {
            l.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub method: String,
    pub selected: String,
    pub n: usize,
    pub beta_hat: Vec<f64>,
    pub inference: Option<InferenceReport>,
    pub diagnostics: FitDiagnostics,
}

/// Fits the configured estimator on `data`.
pub fn run_fit(config: &FitConfig, data: &Dataset) -> Result<FitReport> {
    config.validate()?;
    let loss = config.loss.unwrap_or_else(|| default_loss(config.task));
    let candidates = config.method.candidates();
    let chosen = select_candidate(&candidates, data, &loss, &config.net, config.seed)?;
    let fit = fit_candidate(&chosen, data, &loss, &config.net, config.seed)?;
    let inference = match &config.inference {
        Some(ic) => {
            let tc = config.net.train_config(fit.diagnostics.lambda, config.seed);
            Some(inference::infer(data, &loss, &fit, &tc, ic)?)
        }
        None => None,
    };
    Ok(FitReport {
        method: config.method.name().to_string(),
        selected: chosen.describe(),
        n: data.n(),
        beta_hat: fit.beta_hat.iter().copied().collect(),
        inference,
        diagnostics: fit.diagnostics,
    })
}

// ---------------------------------------------------------------------------
// simulation

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    #[default]
    PerRep,
    /// Select on the first repetition of each sample size and reuse the choice.
    OncePerSetting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub task: TaskKind,
    pub case: u8,
    pub n: Vec<usize>,
    pub reps: usize,
    pub methods: Vec<MethodSpec>,
    #[serde(default)]
    pub loss: Option<LossSpec>,
    #[serde(default)]
    pub link: TruthLink,
    #[serde(default)]
    pub net: NetSettings,
    #[serde(default)]
    pub selection: SelectionMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    #[serde(default = "default_test_n")]
    pub test_n: usize,
    /// Intervals for the proposed method when present.
    #[serde(default)]
    pub inference: Option<InferenceConfig>,
}

impl ExperimentConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        CaseSpec::new(self.case).map_err(|e| Error::Config(e.to_string()))?;
        if self.reps == 0 {
            return Err(Error::Config("reps must be >= 1".into()));
        }
        if self.n.is_empty() || self.n.iter().any(|&n| n < 10) {
            return Err(Error::Config("every sample size must be >= 10".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be >= 1".into()));
        }
        if self.test_n == 0 {
            return Err(Error::Config("test_n must be >= 1".into()));
        }
        for m in &self.methods {
            m.validate()?;
        }
        self.net.validate()?;
        if let Some(l) = &self.loss {
            l.validate()?;
            if l.is_classification() != (self.task == TaskKind::Classification) {
                return Err(Error::Config(format!("loss {l:?} does not match task {:?}", self.task)));
            }
        }
        if let Some(ic) = &self.inference {
            if !(ic.level > 0.0 && ic.level < 1.0) {
                return Err(Error::Config(format!("inference.level must lie in (0,1), got {}", ic.level)));
            }
        }
        Ok(())
    }
}

/// Seed of repetition `rep` at sample size `n`; independent of scheduling.
pub fn rep_seed(master: u64, n: usize, rep: usize) -> u64 {
    // splitmix64 finalizer over the packed triple
    let mut z = master
        .wrapping_add((n as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((rep as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub method: String,
    pub n: usize,
    pub rep: usize,
    pub seed: u64,
    pub selected: Option<String>,
    pub beta_hat: Option<Vec<f64>>,
    pub mse_beta: Option<f64>,
    pub mse_f: Option<f64>,
    pub intervals: Option<ConfidenceIntervals>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub method: String,
    pub case: u8,
    pub n: usize,
    pub reps_ok: usize,
    pub failures: usize,
    pub mean_mse_beta: f64,
    pub mean_mse_f: f64,
    pub coverage: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub summaries: Vec<SettingSummary>,
    pub records: Vec<RepRecord>,
    pub wall_clock_seconds: f64,
}

fn gen_data(config: &ExperimentConfig, case: &CaseSpec, n: usize, seed: u64) -> Dataset {
    match config.task {
        TaskKind::Regression => simgen::gen_regression(case, n, seed),
        TaskKind::Classification => simgen::gen_classification_with_link(case, n, seed, config.link),
    }
}

fn run_one(
    config: &ExperimentConfig,
    case: &CaseSpec,
    loss: &LossSpec,
    method: &MethodSpec,
    fixed: Option<Candidate>,
    n: usize,
    rep: usize,
) -> RepRecord {
    let seed = rep_seed(config.seed, n, rep);
    let mut record = RepRecord {
        method: method.name().to_string(),
        n,
        rep,
        seed,
        selected: None,
        beta_hat: None,
        mse_beta: None,
        mse_f: None,
        intervals: None,
        error: None,
    };
    let outcome = (|| -> Result<()> {
        let data = gen_data(config, case, n, seed);
        let chosen = match fixed {
            Some(c) => c,
            None => select_candidate(&method.candidates(), &data, loss, &config.net, seed)?,
        };
        record.selected = Some(chosen.describe());
        let fit = fit_candidate(&chosen, &data, loss, &config.net, seed)?;
        let beta: Vec<f64> = fit.beta_hat.iter().copied().collect();
        record.mse_beta = Some(simgen::mse_beta(&beta, &simgen::BETA0)?);
        record.mse_f = Some(simgen::mse_f(
            |x| fit.predictor.eval_batch(x),
            case,
            config.task,
            config.test_n,
            seed ^ 0x7e57,
        )?);
        record.beta_hat = Some(beta);
        if let (Some(ic), MethodSpec::Proposed { .. }) = (&config.inference, method) {
            let tc = config.net.train_config(fit.diagnostics.lambda, seed);
            let rep = inference::infer(&data, loss, &fit, &tc, ic)?;
            record.intervals = Some(rep.intervals);
        }
        Ok(())
    })();
    if let Err(e) = outcome {
        record.error = Some(e.to_string());
        record.mse_beta = None;
        record.mse_f = None;
    }
    record
}

/// Mean of the successful records of one setting.
pub fn summarize(records: &[RepRecord], method: &str, case: u8, n: usize) -> SettingSummary {
    let rows: Vec<&RepRecord> = records.iter().filter(|r| r.method == method && r.n == n).collect();
    let ok: Vec<&&RepRecord> = rows.iter().filter(|r| r.error.is_none()).collect();
    let mean = |f: &dyn Fn(&RepRecord) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
        }
    };
    let cis: Vec<ConfidenceIntervals> = ok.iter().filter_map(|r| r.intervals.clone()).collect();
    let coverage = if cis.is_empty() {
        None
    } else {
        inference::coverage(&cis, &simgen::BETA0).ok()
    };
    SettingSummary {
        method: method.to_string(),
        case,
        n,
        reps_ok: ok.len(),
        failures: rows.len() - ok.len(),
        mean_mse_beta: mean(&|r| r.mse_beta.unwrap_or(f64::NAN)),
        mean_mse_f: mean(&|r| r.mse_f.unwrap_or(f64::NAN)),
        coverage,
    }
}

/// Runs every (method, n, rep) cell, aggregates, and writes the tables when
/// `out_dir` is set.
pub fn run_simulation(config: &ExperimentConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let start = Instant::now();
    let case = CaseSpec::new(config.case)?;
    let loss = config.loss.unwrap_or_else(|| default_loss(config.task));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let mut fixed: Vec<Option<Candidate>> = vec![None; config.methods.len() * config.n.len()];
    if config.selection == SelectionMode::OncePerSetting {
        for (mi, method) in config.methods.iter().enumerate() {
            for (ni, &n) in config.n.iter().enumerate() {
                let seed = rep_seed(config.seed, n, 0);
                let data = gen_data(config, &case, n, seed);
                let chosen = pool.install(|| {
                    select_candidate(&method.candidates(), &data, &loss, &config.net, seed)
                })?;
                fixed[mi * config.n.len() + ni] = Some(chosen);
            }
        }
    }

    let cells: Vec<(usize, usize, usize)> = (0..config.methods.len())
        .flat_map(|mi| {
            (0..config.n.len()).flat_map(move |ni| (0..config.reps).map(move |r| (mi, ni, r)))
        })
        .collect();
    let records: Vec<RepRecord> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(mi, ni, rep)| {
                run_one(
                    config,
                    &case,
                    &loss,
                    &config.methods[mi],
                    fixed[mi * config.n.len() + ni],
                    config.n[ni],
                    rep,
                )
            })
            .collect()
    });
    let mut summaries = Vec::new();
    for method in &config.methods {
        for &n in &config.n {
            summaries.push(summarize(&records, method.name(), config.case, n));
        }
    }
    let report = ExperimentReport {
        config: config.clone(),
        summaries,
        records,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &config.out_dir {
        write_simulation_outputs(&report, dir)?;
    }
    Ok(report)
}

/// Same as [`run_simulation`] with intervals switched on for the proposed method.
pub fn run_coverage(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let mut c = config.clone();
    if c.inference.is_none() {
        c.inference = Some(InferenceConfig::default());
    }
    run_simulation(&c)
}

/// MSE table in units of 1e-1 (rows: case, n; one column pair per method).
pub fn write_mse_table<W: Write>(summaries: &[SettingSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["case", "n", "method", "mse_beta_x1e-1", "mse_f_x1e-1", "reps_ok", "failures"])?;
    for s in summaries {
        w.write_record([
            s.case.to_string(),
            s.n.to_string(),
            s.method.clone(),
            format!("{:.4}", s.mean_mse_beta * 10.0),
            format!("{:.4}", s.mean_mse_f * 10.0),
            s.reps_ok.to_string(),
            s.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Coverage table, one row per setting with intervals.
pub fn write_coverage_table<W: Write>(summaries: &[SettingSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["case", "n", "method", "beta1", "beta2"])?;
    for s in summaries {
        if let Some(c) = &s.coverage {
            let mut row = vec![s.case.to_string(), s.n.to_string(), s.method.clone()];
            row.extend(c.iter().map(|v| format!("{v:.3}")));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn write_simulation_outputs(report: &ExperimentReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    write_mse_table(&report.summaries, fs::File::create(dir.join("table_mse.csv"))?)?;
    if report.summaries.iter().any(|s| s.coverage.is_some()) {
        write_coverage_table(&report.summaries, fs::File::create(dir.join("table_coverage.csv"))?)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// kernel check

fn default_ntk_depth() -> usize {
    1
}
fn default_ntk_widths() -> Vec<usize> {
    vec![64, 256, 1024]
}
fn default_pairs() -> usize {
    50
}
fn default_seeds() -> usize {
    20
}
fn default_input_dim() -> usize {
    2
}
fn default_diag_depths() -> Vec<usize> {
    (1..=6).collect()
}
fn default_diag_points() -> usize {
    100
}
fn default_ratio_bound() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NtkCheckConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_ntk_depth")]
    pub depth: usize,
    #[serde(default = "default_ntk_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_diag_depths")]
    pub diag_depths: Vec<usize>,
    #[serde(default = "default_diag_points")]
    pub diag_points: usize,
    /// Required ratio of the last to the first width's error.
    #[serde(default = "default_ratio_bound")]
    pub ratio_bound: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NtkCheckConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl NtkCheckConfig {
    pub fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("widths must be a nonempty list of positive integers".into()));
        }
        if self.widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("widths must be strictly increasing".into()));
        }
        if self.depth == 0 || self.diag_depths.contains(&0) {
            return Err(Error::Config("depths must be >= 1".into()));
        }
        if self.input_dim == 0 || self.pairs == 0 || self.seeds == 0 {
            return Err(Error::Config("input_dim, pairs and seeds must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalCheck {
    pub depth: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NtkCheckReport {
    pub depth: usize,
    pub widths: Vec<usize>,
    /// Mean `|empirical - analytic|` per width.
    pub mean_abs_errors: Vec<f64>,
    pub monotone: bool,
    pub last_to_first_ratio: f64,
    pub ratio_pass: bool,
    pub diagonal: Vec<DiagonalCheck>,
    pub endpoints_pass: bool,
    pub pass: bool,
}

fn gaussian_points(count: usize, d: usize, seed: u64, stream: u64) -> Vec<Vec<f64>> {
    let mut rng = derive_rng(seed, stream);
    (0..count)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect()
}

/// Mean absolute gap between the empirical NTK at initialization and the
/// closed form, over `pairs` Gaussian input pairs and `seeds` initializations.
pub fn ntk_width_error(depth: usize, width: usize, input_dim: usize, pairs: usize, seeds: usize, seed: u64) -> Result<f64> {
    let spec = KernelSpec::new(depth)?;
    let arch = NetArch::new(depth, width, input_dim)?;
    let xs = gaussian_points(pairs, input_dim, seed, 0x4e1);
    let ys = gaussian_points(pairs, input_dim, seed, 0x4e2);
    let errs: Vec<f64> = (0..seeds)
        .into_par_iter()
        .map(|s| -> Result<f64> {
            let params = mlp::init_params(arch, rep_seed(seed, width, s));
            let mut total = 0.0;
            for (x, y) in xs.iter().zip(&ys) {
                let emp = ntk::empirical_ntk(&params, x, y)?;
                total += (emp - ntk::analytic_ntk(spec, x, y)).abs();
            }
            Ok(total)
        })
        .collect::<Result<_>>()?;
    Ok(errs.iter().sum::<f64>() / (pairs * seeds) as f64)
}

pub fn run_ntk_check(config: &NtkCheckConfig) -> Result<NtkCheckReport> {
    config.validate()?;
    let mean_abs_errors = config
        .widths
        .iter()
        .map(|&m| ntk_width_error(config.depth, m, config.input_dim, config.pairs, config.seeds, config.seed))
        .collect::<Result<Vec<_>>>()?;
    let monotone = mean_abs_errors.windows(2).all(|w| w[1] <= w[0]);
    let ratio = mean_abs_errors.last().copied().unwrap_or(f64::NAN) / mean_abs_errors[0];
    let ratio_pass = ratio <= config.ratio_bound;
    let pts = gaussian_points(config.diag_points, config.input_dim, config.seed, 0xd1a);
    let diagonal: Vec<DiagonalCheck> = config
        .diag_depths
        .iter()
        .map(|&l| {
            let spec = KernelSpec::new(l)?;
            let max_rel_error = pts
                .iter()
                .map(|x| {
                    let sq: f64 = x.iter().map(|v| v * v).sum();
                    let closed = (l as f64 + 1.0) * (sq + 1.0) + l as f64;
                    ((ntk::analytic_ntk(spec, x, x) - closed) / closed).abs()
                })
                .fold(0.0, f64::max);
            Ok(DiagonalCheck {
                depth: l,
                max_rel_error,
                pass: max_rel_error <= 1e-12,
            })
        })
        .collect::<Result<_>>()?;
    let endpoints_pass = ntk::kappa0(1.0)? == 1.0
        && ntk::kappa0(-1.0)? == 0.0
        && ntk::kappa1(1.0)? == 1.0
        && ntk::kappa1(-1.0)? == 0.0;
    let pass = monotone && ratio_pass && endpoints_pass && diagonal.iter().all(|d| d.pass);
    Ok(NtkCheckReport {
        depth: config.depth,
        widths: config.widths.clone(),
        mean_abs_errors,
        monotone,
        last_to_first_ratio: ratio,
        ratio_pass,
        diagonal,
        endpoints_pass,
        pass,
    })
}

// ---------------------------------------------------------------------------
// flow gap

fn default_gap_n() -> usize {
    50
}
fn default_gap_depth() -> usize {
    1
}
fn default_gap_widths() -> Vec<usize> {
    vec![128, 512, 2048]
}
fn default_gap_lambda() -> f64 {
    0.05
}
fn default_gap_seeds() -> usize {
    10
}
fn default_gap_checkpoints() -> Vec<usize> {
    (0..=10).map(|k| k * 100).collect()
}
fn default_probe_n() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowGapConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default = "default_gap_n")]
    pub n: usize,
    #[serde(default = "default_input_dim")]
    pub input_dim: usize,
    #[serde(default = "default_gap_depth")]
    pub depth: usize,
    #[serde(default = "default_gap_widths")]
    pub widths: Vec<usize>,
    #[serde(default = "default_gap_lambda")]
    pub lambda: f64,
    #[serde(default = "default_step")]
    pub step: f64,
    #[serde(default = "default_epochs")]
    pub steps: usize,
    #[serde(default = "default_gap_seeds")]
    pub seeds: usize,
    #[serde(default = "default_gap_checkpoints")]
    pub checkpoints: Vec<usize>,
    #[serde(default = "default_probe_n")]
    pub probe_n: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for FlowGapConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl FlowGapConfig {
    pub fn validate(&self) -> Result<()> {
        check_version(self.version)?;
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config("widths must be a nonempty list of positive integers".into()));
        }
        if self.n < 2 || self.input_dim == 0 || self.seeds == 0 || self.probe_n == 0 {
            return Err(Error::Config("n >= 2, input_dim, seeds and probe_n >= 1 required".into()));
        }
        if self.checkpoints.is_empty() {
            return Err(Error::Config("checkpoints must be nonempty".into()));
        }
        self.train_config(0).validate()
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            step: self.step,
            steps: self.steps,
            seed,
            checkpoints: self.checkpoints.clone(),
            batch: Batch::Full,
            fixed_beta: None,
        }
    }
}

/// Partially linear toy data on `[0,1]^d` with a sine truth and `sigma = 0.5` noise.
pub fn toy_dataset(n: usize, d: usize, seed: u64) -> Dataset {
    let (z, x) = simgen::gen_covariates(n, d, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x70_79);
    let scale = 6.0 * std::f64::consts::PI / (d * (d + 1)) as f64;
    let y = DVector::from_fn(n, |i, _| {
        let s: f64 = (0..d).map(|l| (l + 1) as f64 * x[(i, l)]).sum();
        let eps: f64 = StandardNormal.sample(&mut rng);
        z[(i, 0)] * simgen::BETA0[0] + z[(i, 1)] * simgen::BETA0[1] + 5.0 * (scale * s).sin() + simgen::NOISE_SD * eps
    });
    Dataset::new(y, z, x, TaskKind::Regression).expect("finite toy data")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WidthGap {
    pub width: usize,
    pub median_f_gap: f64,
    pub median_beta_gap: f64,
    pub per_seed: Vec<GapReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowGapReport {
    pub config: FlowGapConfig,
    pub widths: Vec<WidthGap>,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Paired network and kernel flows on shared data, one pair per (width, seed).
pub fn run_flow_gap(config: &FlowGapConfig) -> Result<FlowGapReport> {
    config.validate()?;
    let loss = LossSpec::Squared;
    let spec = KernelSpec::new(config.depth)?;
    let probe = {
        let mut rng = derive_rng(config.seed, 0x9be);
        DMatrix::from_fn(config.probe_n, config.input_dim, |_, _| rand::Rng::random::<f64>(&mut rng))
    };
    // the kernel flow does not depend on the width
    let kernel_runs: Vec<_> = (0..config.seeds)
        .into_par_iter()
        .map(|s| -> Result<(Dataset, Vec<train::RkhsFitState>)> {
            let seed = rep_seed(config.seed, config.n, s);
            let data = toy_dataset(config.n, config.input_dim, seed);
            let (_, ck) = train::train_kernel_flow(&data, &loss, KernelKind::Ntk(spec), &config.train_config(seed))?;
            Ok((data, ck))
        })
        .collect::<Result<_>>()?;
    let mut widths = Vec::with_capacity(config.widths.len());
    for &m in &config.widths {
        let arch = NetArch::new(config.depth, m, config.input_dim)?;
        let per_seed: Vec<GapReport> = kernel_runs
            .par_iter()
            .enumerate()
            .map(|(s, (data, rk))| {
                let seed = rep_seed(config.seed, config.n, s);
                let (_, nn) = train::train_nn(data, &loss, arch, &config.train_config(seed))?;
                train::flow_gap(&nn, rk, &probe)
            })
            .collect::<Result<_>>()?;
        let mut f: Vec<f64> = per_seed.iter().map(|g| g.max_f_gap).collect();
        let mut b: Vec<f64> = per_seed.iter().map(|g| g.max_beta_gap).collect();
        widths.push(WidthGap {
            width: m,
            median_f_gap: median(&mut f),
            median_beta_gap: median(&mut b),
            per_seed,
        });
    }
    Ok(FlowGapReport {
        config: config.clone(),
        widths,
    })
}

/// Reads a dataset CSV (header `y, z1.., x1..`); the number of `z` columns is
/// taken from the header.
pub fn read_dataset(path: &Path, task: TaskKind) -> Result<Dataset> {
    let file = fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    Dataset::read_csv(file, task)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_validation() {
        let c = ExperimentConfig::from_json(
            r#"{"task": "regression", "case": 1, "n": [100], "reps": 2,
                "methods": [{"method": "proposed"}, {"method": "small_nn", "width": [2, 3]}]}"#,
        )
        .unwrap();
        assert_eq!(c.net, NetSettings::default());
        assert_eq!(c.net.width, 1000);
        assert_eq!(c.methods[0], MethodSpec::Proposed { lambda_c: vec![1.0], step: vec![] });
        assert_eq!(c.methods[1].candidates().len(), 2);

        let bad = |s: &str| ExperimentConfig::from_json(s).unwrap_err();
        assert!(matches!(bad(r#"{"task": "regression", "case": 1, "n": [5], "reps": 1, "methods": [{"method": "proposed"}]}"#), Error::Config(_)));
        assert!(matches!(bad(r#"{"task": "regression", "case": 1, "n": [50], "reps": 0, "methods": [{"method": "proposed"}]}"#), Error::Config(_)));
        assert!(matches!(bad(r#"{"task": "regression", "case": 9, "n": [50], "reps": 1, "methods": [{"method": "proposed"}]}"#), Error::Config(_)));
        assert!(matches!(bad(r#"{"task": "regression", "case": 1, "n": [50], "reps": 1, "methods": [{"method": "magic"}]}"#), Error::Config(_)));
        let e = bad(r#"{"task": "regression", "case": 1, "n": [50], "reps": 1, "methods": [{"method": "proposed"}], "bogus": 1}"#);
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = bad(r#"{"version": 7, "task": "regression", "case": 1, "n": [50], "reps": 1, "methods": [{"method": "proposed"}]}"#);
        assert!(e.to_string().contains("version"), "{e}");
    }

    #[test]
    fn rep_seeds_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for n in [250, 500, 1000] {
            for r in 0..200 {
                assert!(seen.insert(rep_seed(3, n, r)));
            }
        }
        assert_eq!(rep_seed(1, 2, 3), rep_seed(1, 2, 3));
    }

    #[test]
    fn summary_means_recompute_from_records() {
        let rec = |rep: usize, b: f64, f: f64, err: bool| RepRecord {
            method: "proposed".into(),
            n: 10,
            rep,
            seed: 0,
            selected: None,
            beta_hat: None,
            mse_beta: (!err).then_some(b),
            mse_f: (!err).then_some(f),
            intervals: None,
            error: err.then(|| "diverged".to_string()),
        };
        let recs = vec![rec(0, 1.0, 2.0, false), rec(1, 3.0, 4.0, false), rec(2, 0.0, 0.0, true)];
        let s = summarize(&recs, "proposed", 1, 10);
        assert_eq!(s.reps_ok, 2);
        assert_eq!(s.failures, 1);
        assert_eq!(s.mean_mse_beta, 2.0);
        assert_eq!(s.mean_mse_f, 3.0);
        let mut buf = Vec::new();
        write_mse_table(&[s], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("1,10,proposed,20.0000,30.0000,2,1"), "{text}");
    }

    #[test]
    fn ntk_check_config_rejects_bad_widths() {
        let c: NtkCheckConfig = serde_json::from_str(r#"{"widths": [64, 0]}"#).unwrap();
        assert!(c.validate().is_err());
        let c: NtkCheckConfig = serde_json::from_str(r#"{"widths": [256, 64]}"#).unwrap();
        assert!(c.validate().is_err());
        assert!(serde_json::from_str::<NtkCheckConfig>(r#"{"widths": "64"}"#).is_err());
        assert!(NtkCheckConfig::default().validate().is_ok());
    }

    #[test]
    fn flow_gap_config_checks() {
        assert!(FlowGapConfig::default().validate().is_ok());
        let c = FlowGapConfig { checkpoints: vec![10, 5], ..Default::default() };
        assert!(c.validate().is_err());
        let c = FlowGapConfig { checkpoints: vec![5000], ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_width_gap_report() {
        let c = FlowGapConfig {
            n: 8,
            widths: vec![16],
            steps: 20,
            seeds: 2,
            checkpoints: vec![0, 10, 20],
            probe_n: 5,
            ..Default::default()
        };
        let r = run_flow_gap(&c).unwrap();
        assert_eq!(r.widths.len(), 1);
        assert_eq!(r.widths[0].per_seed.len(), 2);
        assert_eq!(r.widths[0].per_seed[0].steps, vec![0, 10, 20]);
        assert_eq!(r.widths[0].per_seed[0].f_gaps[0], 0.0);
    }
}

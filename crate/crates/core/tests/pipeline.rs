use neuralm::error::Error;
use neuralm::experiment::{self, ExperimentConfig, FitConfig, FlowGapConfig, NtkCheckConfig};
use neuralm::simgen::{self, CaseSpec, Dataset, TaskKind};

fn tiny_experiment(jobs: usize) -> ExperimentConfig {
    ExperimentConfig::from_json(&format!(
        r#"{{"task": "regression", "case": 3, "n": [40, 60], "reps": 3, "jobs": {jobs}, "test_n": 200,
            "methods": [{{"method": "proposed", "lambda_c": [0.5, 2.0]}}, {{"method": "local_linear", "bandwidth": [0.5]}}],
            "net": {{"depth": 2, "width": 16, "epochs": 20, "step": 0.01}}}}"#
    ))
    .unwrap()
}

#[test]
fn single_rep_single_method_gives_one_record() {
    let c = ExperimentConfig::from_json(
        r#"{"task": "regression", "case": 1, "n": [30], "reps": 1, "test_n": 100,
            "methods": [{"method": "proposed"}],
            "net": {"depth": 1, "width": 8, "epochs": 5}}"#,
    )
    .unwrap();
    let r = experiment::run_simulation(&c).unwrap();
    assert_eq!(r.records.len(), 1);
    assert_eq!(r.summaries.len(), 1);
    assert_eq!(r.records[0].beta_hat.as_ref().unwrap().len(), 2);
}

#[test]
fn parallel_and_serial_runs_agree() {
    let a = experiment::run_simulation(&tiny_experiment(1)).unwrap();
    let b = experiment::run_simulation(&tiny_experiment(3)).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(a.summaries, b.summaries);
}

#[test]
fn summaries_recompute_from_records() {
    let r = experiment::run_simulation(&tiny_experiment(2)).unwrap();
    for s in &r.summaries {
        let ok: Vec<_> = r
            .records
            .iter()
            .filter(|x| x.method == s.method && x.n == s.n && x.error.is_none())
            .collect();
        assert_eq!(ok.len(), s.reps_ok);
        let mb = ok.iter().map(|x| x.mse_beta.unwrap()).sum::<f64>() / ok.len() as f64;
        let mf = ok.iter().map(|x| x.mse_f.unwrap()).sum::<f64>() / ok.len() as f64;
        assert_eq!(mb, s.mean_mse_beta);
        assert_eq!(mf, s.mean_mse_f);
    }
}

#[test]
fn simulation_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny_experiment(1);
    c.n = vec![40];
    c.reps = 2;
    c.out_dir = Some(dir.path().to_path_buf());
    c.inference = Some(serde_json::from_str(r#"{"aux_depth": 1, "aux_width": 8, "aux_steps": 10}"#).unwrap());
    experiment::run_simulation(&c).unwrap();
    let table = std::fs::read_to_string(dir.path().join("table_mse.csv")).unwrap();
    assert!(table.starts_with("case,n,method,mse_beta_x1e-1,mse_f_x1e-1"));
    assert_eq!(table.lines().count(), 3);
    let cov = std::fs::read_to_string(dir.path().join("table_coverage.csv")).unwrap();
    assert!(cov.contains("3,40,proposed,"), "{cov}");
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(json["records"].as_array().unwrap().len(), 4);
    // the archive keeps raw values; the table holds them times ten
    let raw = json["summaries"][0]["mean_mse_beta"].as_f64().unwrap();
    let shown: f64 = table.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap();
    assert!((shown - 10.0 * raw).abs() <= 1e-4);
}

#[test]
fn failed_reps_are_counted_not_imputed() {
    // a spline basis larger than the sample cannot be fitted
    let c = ExperimentConfig::from_json(
        r#"{"task": "regression", "case": 1, "n": [20], "reps": 2, "test_n": 50,
            "methods": [{"method": "spline", "knots_per_dim": [4]}],
            "net": {"depth": 1, "width": 8, "epochs": 5}}"#,
    )
    .unwrap();
    let r = experiment::run_simulation(&c).unwrap();
    assert_eq!(r.summaries[0].failures, 2);
    assert_eq!(r.summaries[0].reps_ok, 0);
    assert!(r.summaries[0].mean_mse_beta.is_nan());
    assert!(r.records.iter().all(|x| x.error.is_some() && x.mse_beta.is_none()));
}

fn fit_config() -> FitConfig {
    FitConfig::from_json(
        r#"{"task": "regression", "method": {"method": "proposed"}, "seed": 5,
            "net": {"depth": 2, "width": 32, "epochs": 30, "step": 0.01, "batch": {"mode": "full"}},
            "inference": {"aux_depth": 1, "aux_width": 16, "aux_steps": 30}}"#,
    )
    .unwrap()
}

#[test]
fn fit_report_shapes_and_determinism() {
    let data = simgen::gen_regression(&CaseSpec::new(1).unwrap(), 80, 9);
    let a = experiment::run_fit(&fit_config(), &data).unwrap();
    assert_eq!(a.beta_hat.len(), 2);
    let inf = a.inference.as_ref().unwrap();
    assert_eq!(inf.sigma_hat.len(), 2);
    assert!(inf.sigma_hat.iter().all(|r| r.len() == 2));
    let b = experiment::run_fit(&fit_config(), &data).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
}

#[test]
fn malformed_csv_row_is_named() {
    let text = "y,z1,z2,x1,x2\n1,0.1,0.2,0.3,0.4\n2,0.1,oops,0.3,0.4\n";
    let e = Dataset::read_csv(text.as_bytes(), TaskKind::Regression).unwrap_err();
    assert!(matches!(e, Error::Data(_)));
    assert!(e.to_string().contains("row 2"), "{e}");
    let short = "y,z1,z2,x1,x2\n1,0.1,0.2,0.3\n";
    let e = Dataset::read_csv(short.as_bytes(), TaskKind::Regression).unwrap_err();
    assert!(e.to_string().contains("row 1"), "{e}");
}

#[test]
fn ntk_check_reports_and_rejects() {
    let c: NtkCheckConfig = serde_json::from_str(r#"{"widths": [16, 64], "pairs": 5, "seeds": 3, "diag_depths": [1, 2]}"#).unwrap();
    let r = experiment::run_ntk_check(&c).unwrap();
    assert_eq!(r.mean_abs_errors.len(), 2);
    assert!(r.diagonal.iter().all(|d| d.pass));
    assert!(r.endpoints_pass);
    let bad: NtkCheckConfig = serde_json::from_str(r#"{"widths": []}"#).unwrap();
    assert!(matches!(experiment::run_ntk_check(&bad), Err(Error::Config(_))));
}

#[test]
fn flow_gap_rejects_checkpoint_mismatch() {
    let c = FlowGapConfig {
        steps: 10,
        checkpoints: vec![0, 20],
        ..Default::default()
    };
    assert!(experiment::run_flow_gap(&c).is_err());
}

#[test]
fn documented_configs_parse() {
    let sim = r#"{
      "version": 1, "task": "regression", "case": 1, "n": [250, 500, 1000], "reps": 50, "seed": 2024, "jobs": 4,
      "methods": [
        {"method": "proposed", "lambda_c": [1.0]},
        {"method": "rkhs_laplacian", "bandwidth": [0.5, 1.0], "lambda_c": [1.0]},
        {"method": "local_linear", "bandwidth": [0.5, 0.8]},
        {"method": "small_nn", "width": [3, 6]}
      ],
      "net": {"depth": 5, "width": 1000, "step": 0.001, "epochs": 1000, "batch": {"mode": "minibatch", "size": 64}},
      "selection": "per_rep",
      "inference": {"level": 0.95}
    }"#;
    let c = ExperimentConfig::from_json(sim).unwrap();
    assert_eq!(c.methods.len(), 4);
    let fit = r#"{"version": 1, "task": "classification",
      "method": {"method": "proposed", "lambda_c": [0.1, 1.0], "step": [0.001, 0.03]},
      "net": {"depth": 5, "width": 1000}, "inference": {"method": "auto"}}"#;
    assert!(FitConfig::from_json(fit).is_ok());
}

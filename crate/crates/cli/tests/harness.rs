mod common;

use std::path::Path;

use common::*;
use drum_cli::manifest::RunManifest;
use drum_cli::{artifact, grid, model, report, run, simulate, ExperimentConfig, HarnessError};
use drum_core::methods::CANONICAL;
use drum_core::simgen::{Setting, SettingSpec};

fn csv_shape(path: &Path) -> (usize, usize) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let cols = r.headers().unwrap().len();
    (r.records().count(), cols)
}

fn small_spec(setting: Setting, seed: u64) -> SettingSpec {
    let mut spec = SettingSpec::new(setting, None, seed).unwrap();
    spec.n = 300;
    spec.n_target = 200;
    spec
}

#[test]
fn simulate_setting_one_writes_published_dimensions_reproducibly() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = SettingSpec::new(Setting::I, None, 11).unwrap();
    let ma = simulate::cmd_simulate(&spec, &[0.6], 2, a.path()).unwrap();
    let mb = simulate::cmd_simulate(&spec, &[0.6], 2, b.path()).unwrap();
    assert_eq!(csv_shape(&a.path().join("source.csv")), (5000, 21));
    assert_eq!(csv_shape(&a.path().join("target.csv")), (1000, 15));
    assert_eq!(csv_shape(&a.path().join("tests/s0.6/mc000.csv")), (1000, 22));
    assert_eq!(ma.files, mb.files);
    for f in &ma.files {
        assert_eq!(
            read(&a.path().join(&f.path)),
            read(&b.path().join(&f.path)),
            "{}",
            f.path
        );
    }
}

#[test]
fn binary_honours_the_output_root_variable() {
    let root = tempfile::tempdir().unwrap();
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_drum"))
        .args([
            "simulate",
            "--setting",
            "II",
            "--mc",
            "1",
            "--scales",
            "0.6",
            "--seed",
            "3",
        ])
        .env("DRUM_OUTPUT_ROOT", root.path())
        .status()
        .unwrap();
    assert!(status.success());
    let dir = root.path().join("simulate-II-seed3");
    assert_eq!(csv_shape(&dir.join("source.csv")), (5000, 18));
    assert!(dir.join("tests/s0.6/mc000.csv").exists());
}

#[test]
fn binary_reports_bad_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    write(&cfg, "methods = []\n[simulation]\nsetting = \"I\"\n");
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_drum"))
        .args(["run", "--config"])
        .arg(&cfg)
        .env("DRUM_OUTPUT_ROOT", dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("method list is empty"));
}

#[test]
fn empty_method_list_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&["methods=[]"]);
    assert!(matches!(run::cmd_run(&cfg, dir.path()), Err(HarnessError::Config(_))));
}

#[test]
fn run_records_failures_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&[
        r#"methods=["Baseline-ERM", "Baseline-DRO", "PL-Mean+ERM"]"#,
        "mc_sets=1",
        "profile.dro.rho=-1",
    ]);
    let (manifest, metrics) = run::cmd_run(&cfg, dir.path()).unwrap();
    let g = &metrics.groups[0];
    assert_eq!(g.results.len(), 3);
    let dro = &g.results[1];
    assert!(dro.error.as_deref().unwrap().contains("radius"), "{:?}", dro.error);
    assert!(dro.scales.is_empty());
    for r in [&g.results[0], &g.results[2]] {
        assert!(r.error.is_none());
        let e = r.at_scale(0.6).unwrap();
        assert_eq!(e.per_set.len(), 1);
        assert_eq!(e.worst, e.mean, "one MC set: worst equals mean");
    }
    assert_eq!(manifest.errors.len(), 1);
    assert!(manifest.errors[0].stage.ends_with("Baseline-DRO/fit"));
    assert_eq!(manifest.models.len(), 2);
    let table = String::from_utf8(read(&dir.path().join(format!("table_{}.csv", g.label)))).unwrap();
    assert!(table.starts_with("method,worst_s0.6,mean_s0.6,error"));
    let on_disk: RunManifest = artifact::read_json(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(on_disk, manifest);
}

#[test]
fn every_registered_method_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(&[]);
    let (manifest, metrics) = run::cmd_run(&cfg, dir.path()).unwrap();
    assert!(manifest.errors.is_empty(), "{:?}", manifest.errors);
    let names: Vec<&str> = metrics.groups[0].results.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, CANONICAL.to_vec());
    for r in &metrics.groups[0].results {
        let e = r.at_scale(0.6).unwrap();
        assert_eq!(e.per_set.len(), 2);
        assert!(e.mean.is_finite() && e.worst >= e.mean, "{}", r.method);
    }
    // Manifest rerun reproduces every artifact.
    let again = tempfile::tempdir().unwrap();
    let (m2, _) = run::cmd_run(&manifest.config, again.path()).unwrap();
    assert_eq!(m2.artifacts_sha256, manifest.artifacts_sha256);
    assert_eq!(m2.models, manifest.models);
}

fn simulated_files(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    simulate::cmd_simulate(&small_spec(Setting::II, 5), &[0.6], 1, dir).unwrap();
    (
        dir.join("source.csv"),
        dir.join("target.csv"),
        dir.join("tests/s0.6/mc000.csv"),
    )
}

#[test]
fn fit_then_predict_reproduces_in_run_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let (source, target, _) = simulated_files(dir.path());
    let cfg = data_config(&source, &target, "regression", "");
    for method in ["IW-Classify", "DRUM (unconstrained)", "DRUM-Debiased"] {
        let out = dir.path().join(artifact::slug(method));
        let m = model::cmd_fit(&cfg, method, None, None, 4, &out).unwrap();
        let preds_path = dir.path().join("p.csv");
        model::cmd_predict(&out.join(&m.model.path), &target, &preds_path).unwrap();
        assert_eq!(read(&preds_path), read(&out.join("target_predictions.csv")), "{method}");
    }
}

#[test]
fn schema_violations_name_the_column() {
    let dir = tempfile::tempdir().unwrap();
    let (source, target, test) = simulated_files(dir.path());
    // A labelled file passed as target carries the declared A and Y columns.
    let cfg = data_config(&source, &test, "regression", "fbar = \"ignore\"\n");
    let e = model::cmd_fit(&cfg, "Baseline-ERM", None, None, 1, &dir.path().join("m")).unwrap_err();
    assert!(
        matches!(&e, HarnessError::Schema { column, .. } if column == "a1"),
        "{e}"
    );
    // Only Y leaks.
    let leaky = dir.path().join("leaky.csv");
    let text = String::from_utf8(read(&target)).unwrap();
    let body: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 0 { format!("{l},y") } else { format!("{l},0.5") })
        .collect();
    write(&leaky, &(body.join("\n") + "\n"));
    let cfg = data_config(&source, &leaky, "regression", "");
    let e = model::cmd_fit(&cfg, "Baseline-ERM", None, None, 1, &dir.path().join("m")).unwrap_err();
    assert!(
        matches!(&e, HarnessError::Schema { column, .. } if column == "y"),
        "{e}"
    );
    // Binary task on a continuous outcome.
    let cfg = data_config(&source, &target, "binary", "");
    let e = model::cmd_fit(&cfg, "Baseline-ERM", None, None, 1, &dir.path().join("m")).unwrap_err();
    assert!(e.to_string().contains("0/1"), "{e}");
}

/// Copies a simulated file with `y` replaced by the indicator `y > 0`.
fn binarize(src: &Path, dst: &Path) {
    const Y: usize = 17; // x1..x15, a1, a2, y
    map_csv(src, dst, |i, mut row| {
        if i > 0 {
            let v: f64 = row[Y].parse().unwrap();
            row[Y] = if v > 0.0 { "1".into() } else { "0".into() };
        }
        row
    })
}

#[test]
fn paired_evaluation_reports_every_metric() {
    let dir = tempfile::tempdir().unwrap();
    let (source, target, test) = simulated_files(dir.path());
    let (bsource, btest) = (dir.path().join("bsource.csv"), dir.path().join("btest.csv"));
    binarize(&source, &bsource);
    binarize(&test, &btest);
    let mut cfg = data_config(&bsource, &target, "binary", "");
    cfg.profile = toml::from_str("erm.train.epochs = 100\npl_mean_erm.train.epochs = 100").unwrap();
    let a = model::cmd_fit(&cfg, "Baseline-ERM", None, None, 2, &dir.path().join("erm")).unwrap();
    let b = model::cmd_fit(&cfg, "PL-Mean+ERM", None, None, 2, &dir.path().join("pl")).unwrap();
    let (ma, mb) = (
        dir.path().join("erm").join(&a.model.path),
        dir.path().join("pl").join(&b.model.path),
    );
    let r = model::cmd_evaluate(&ma, Some(&mb), &btest, 200, 7).unwrap();
    assert_eq!(r.models.len(), 2);
    let primary = &r.models[0];
    for name in ["brier", "ece", "auroc", "auprc"] {
        let ci = &primary.intervals[name];
        assert!(ci.lo <= ci.point && ci.point <= ci.hi, "{name}");
        assert!(ci.paired_p.is_some(), "{name} lacks paired_p");
    }
    let c = primary.metrics.classification.as_ref().unwrap();
    assert!(
        (0.0..=1.0).contains(&c.brier) && (0.0..=1.0).contains(&c.auroc),
        "{c:?}"
    );
    // In-sample the classifier must beat chance; the shifted test set need not.
    let fit = model::cmd_evaluate(&ma, None, &bsource, 10, 7).unwrap();
    let c = fit.models[0].metrics.classification.as_ref().unwrap();
    assert!(c.brier < 0.25 && c.auroc > 0.6, "{c:?}");
    assert!(r.models[1].intervals.values().all(|ci| ci.paired_p.is_none()));
    // Same call, same bytes.
    let again = model::cmd_evaluate(&ma, Some(&mb), &btest, 200, 7).unwrap();
    assert_eq!(
        serde_json::to_string(&r).unwrap(),
        serde_json::to_string(&again).unwrap()
    );
    // An unlabelled file cannot be evaluated.
    let e = model::cmd_evaluate(&ma, None, &target, 10, 7).unwrap_err();
    assert!(e.to_string().contains("label column"), "{e}");
}

#[test]
fn grid_selects_the_validation_minimizer() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{}\n[grid.\"Baseline-ERM\"]\n\"erm.train.lr\" = [1e-4, 1e-3]\n\"erm.train.epochs\" = [5, 20]\n[grid.\"PL-Mean+ERM\"]\n\"pl_mean_erm.train.lr\" = [1e-3]\n",
        "[simulation]\nsetting = \"I\"\nn = 600\nn_target = 200\n"
    );
    let cfg = ExperimentConfig::parse(&text, &["profile.erm.hidden=[16]".into()]).unwrap();
    let g = grid::cmd_grid(&cfg, 3, dir.path()).unwrap();
    assert_eq!(g.criterion, "mse");
    assert_eq!(g.validation_rows, 120);
    let erm = &g.methods[0];
    assert_eq!(erm.method, "Baseline-ERM");
    assert_eq!(erm.cells.len(), 4);
    let best = erm.best.unwrap();
    let lb = erm.cells[best].loss.unwrap();
    assert!(erm.cells.iter().all(|c| lb <= c.loss.unwrap()));
    // The published Setting-I cell (lr 1e-3, 20 epochs) is one of them.
    assert!(erm
        .cells
        .iter()
        .any(|c| c.params["erm.train.lr"] == serde_json::json!(1e-3)
            && c.params["erm.train.epochs"] == serde_json::json!(20)));
    // A single-cell grid selects its only cell.
    assert_eq!(g.methods[1].best, Some(0));
    let best_toml = String::from_utf8(read(&dir.path().join("best_profile.toml"))).unwrap();
    let parsed: toml::Table = toml::from_str(&best_toml).unwrap();
    assert!(parsed["erm"]["train"].get("lr").is_some());
    // Deterministic under the seed.
    let again = tempfile::tempdir().unwrap();
    grid::cmd_grid(&cfg, 3, again.path()).unwrap();
    assert_eq!(
        read(&dir.path().join("grid.json")),
        read(&again.path().join("grid.json"))
    );
    // Empty grids are rejected.
    let empty = ExperimentConfig::parse("[simulation]\nsetting = \"I\"\n", &[]).unwrap();
    assert!(grid::cmd_grid(&empty, 3, dir.path()).is_err());
}

fn run_into(dir: &Path, cfg: &ExperimentConfig) -> std::path::PathBuf {
    run::cmd_run(cfg, dir).unwrap();
    dir.join("manifest.json")
}

#[test]
fn report_merges_seeds_and_flags_incompatible_runs() {
    let root = tempfile::tempdir().unwrap();
    let methods = r#"methods=["Baseline-ERM", "PL-Mean+ERM", "DRUM (unconstrained)"]"#;
    let m1 = run_into(
        &root.path().join("a"),
        &small_config(&[methods, "scales=[0.6, 1.8]", "seeds=[1]"]),
    );
    let m2 = run_into(
        &root.path().join("b"),
        &small_config(&[methods, "scales=[0.6, 1.8]", "seeds=[2]"]),
    );

    // Single manifest: identity pass-through.
    let single = report::cmd_report(std::slice::from_ref(&m1), &root.path().join("r1")).unwrap();
    let metrics: run::RunMetrics = artifact::read_json(&root.path().join("a/metrics.json")).unwrap();
    let erm = metrics.groups[0].results[0].at_scale(1.8).unwrap();
    let row = single
        .rows
        .iter()
        .find(|r| r.method == "Baseline-ERM" && r.s == 1.8)
        .unwrap();
    assert_eq!((row.seeds, row.mean.mean, row.worst.mean), (1, erm.mean, erm.worst));
    assert_eq!(row.mean.min, row.mean.max);
    let oracle = single
        .rows
        .iter()
        .find(|r| r.method == report::ORACLE && r.s == 1.8)
        .unwrap();
    let base_best = single
        .rows
        .iter()
        .filter(|r| r.s == 1.8 && r.method != report::ORACLE && !r.method.starts_with("DRUM"))
        .map(|r| r.mean.mean)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(oracle.mean.mean, base_best);

    // Two seeds: mean and range columns.
    let both = report::cmd_report(&[m1.clone(), m2.clone()], &root.path().join("r2")).unwrap();
    for r in both.rows.iter().filter(|r| r.method != report::ORACLE) {
        assert_eq!(r.seeds, 2, "{}", r.method);
        assert!(r.mean.min <= r.mean.mean && r.mean.mean <= r.mean.max);
    }
    let table = String::from_utf8(read(&root.path().join("r2/table.csv"))).unwrap();
    assert!(table.starts_with("setting,d_a,method,s,seeds,worst,worst_min,worst_max,mean,mean_min,mean_max"));
    let fig = String::from_utf8(read(&root.path().join("r2/figure_setting-II_da2.csv"))).unwrap();
    assert!(fig.lines().any(|l| l.starts_with("1.8,Oracle best baseline,")));

    // A run normalized differently cannot be merged.
    let bdir = root.path().join("b");
    let mut metrics: run::RunMetrics = artifact::read_json(&bdir.join("metrics.json")).unwrap();
    metrics.normalization = "target_outcome_variance".into();
    let art = artifact::write(&bdir, "metrics.json", &artifact::to_json(&metrics).unwrap()).unwrap();
    let mut manifest: RunManifest = artifact::read_json(&m2).unwrap();
    manifest.reports[0] = art;
    artifact::write(&bdir, "manifest.json", &artifact::to_json(&manifest).unwrap()).unwrap();
    let e = report::cmd_report(&[m1, m2], &root.path().join("r3")).unwrap_err();
    assert!(matches!(e, HarnessError::Incompatible(_)), "{e}");
}

#[test]
fn setting_three_report_is_indexed_by_missing_dimension() {
    let root = tempfile::tempdir().unwrap();
    let text = format!(
        "methods = [\"Baseline-ERM\", \"PL-Mean+ERM\"]\nscales = [0.6, 1.8]\nmc_sets = 2\n[simulation]\nsetting = \"III\"\nd_a = [3, 5]\nn = 300\nn_target = 200\n{FAST_PROFILE}"
    );
    let cfg = ExperimentConfig::parse(&text, &[]).unwrap();
    let m = run_into(&root.path().join("run"), &cfg);
    report::cmd_report(&[m], &root.path().join("rep")).unwrap();
    let fig = String::from_utf8(read(&root.path().join("rep/figure_setting-III.csv"))).unwrap();
    let xs: Vec<&str> = fig.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(xs.len(), 6, "2 methods + oracle at 2 values of d_A:\n{fig}");
    assert!(xs.iter().all(|x| *x == "3" || *x == "5"));
}

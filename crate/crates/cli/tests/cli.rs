use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_diffaug");

const SMALL: &str = r#"{
  "seed": 3,
  "data": {"synthetic": {"clusters": 3, "dim": 5, "samples": 120, "separation": 4.0, "seed": 1}},
  "encoder": {"trunk": [-1, 16], "z_dim": 4},
  "diffusion": {"steps": 10, "denoiser": {"time_dim": 4, "hidden": 16, "blocks": 1}},
  "trainer": {
    "plan": {"stages": [{"kind": "A", "epochs": 2}, {"kind": "B", "epochs": 2}, {"kind": "A", "epochs": 2}],
             "lambda": 0.5, "batch_size": 16},
    "centers_per_step": 16,
    "diffusion_batch": 16
  }
}"#;

fn diffaug(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env("DIFFAUG_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    (tmp, cfg)
}

fn train(dir: &Path, out: &str) -> PathBuf {
    let o = diffaug(dir, &["train", "--config", "small.json", "--out", out]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains(&format!("run_dir={out}")));
    dir.join(out)
}

fn write_inputs(path: &Path, rows: usize, cols: usize) {
    let mut s = (0..cols).map(|j| format!("f{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for i in 0..rows {
        let r: Vec<String> = (0..cols).map(|j| format!("{}", (i * cols + j) as f64 * 0.1 - 0.7)).collect();
        s.push_str(&r.join(","));
        s.push('\n');
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn train_writes_a_self_describing_run() {
    let (tmp, _) = setup();
    let run = train(tmp.path(), "run");
    for f in ["config.json", "run.json", "model.ckpt", "history.csv", "timing.csv"] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let hist = std::fs::read_to_string(run.join("history.csv")).unwrap();
    let tags: String = hist.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(tags, "AABBAA");
    assert_eq!(std::fs::read_dir(run.join("checkpoints")).unwrap().count(), 3);

    // resolved config reproduces the run from scratch
    let o = diffaug(tmp.path(), &["train", "--config", "run/config.json", "--out", "again"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["history.csv", "model.ckpt", "checkpoints/epoch_00004.ckpt"] {
        assert_eq!(
            std::fs::read(run.join(f)).unwrap(),
            std::fs::read(tmp.path().join("again").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn seed_flag_changes_the_run() {
    let (tmp, _) = setup();
    let a = train(tmp.path(), "a");
    let o = diffaug(tmp.path(), &["train", "--config", "small.json", "--out", "b", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0));
    assert_ne!(
        std::fs::read(a.join("model.ckpt")).unwrap(),
        std::fs::read(tmp.path().join("b/model.ckpt")).unwrap()
    );
    let cfg = std::fs::read_to_string(tmp.path().join("b/config.json")).unwrap();
    assert!(cfg.contains("\"seed\": 4"));
}

#[test]
fn missing_data_file_exits_2_naming_the_path() {
    let (tmp, _) = setup();
    let o = diffaug(tmp.path(), &["train", "--config", "small.json", "--data", "nowhere/data.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("nowhere/data.csv"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2_with_field_path() {
    let (tmp, _) = setup();
    std::fs::write(tmp.path().join("typo.json"), r#"{"encoder": {"nu_zz": 2}}"#).unwrap();
    let o = diffaug(tmp.path(), &["train", "--config", "typo.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("encoder.nu_zz"), "{}", stderr(&o));

    std::fs::write(tmp.path().join("range.json"), r#"{"trainer": {"plan": {"lambda": -0.5}}}"#).unwrap();
    let o = diffaug(tmp.path(), &["train", "--config", "range.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("trainer.plan.lambda"), "{}", stderr(&o));

    let o = diffaug(tmp.path(), &["train", "--bogus-flag"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn training_on_csv_data() {
    let (tmp, _) = setup();
    write_inputs(&tmp.path().join("d.csv"), 40, 3);
    let o = diffaug(tmp.path(), &["train", "--config", "small.json", "--data", "d.csv", "--out", "r"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(tmp.path().join("r/run.json")).unwrap();
    assert!(manifest.contains("\"f2\""));
}

#[test]
fn generate_count_contract_and_determinism() {
    let (tmp, _) = setup();
    let run = train(tmp.path(), "run");
    write_inputs(&tmp.path().join("in.csv"), 4, 5);

    let o = diffaug(tmp.path(), &["generate", "run", "--data", "in.csv", "--n-per-input", "3", "--seed", "7", "--out", "g1.csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let g1 = std::fs::read_to_string(tmp.path().join("g1.csv")).unwrap();
    let lines: Vec<&str> = g1.lines().collect();
    assert_eq!(lines[0], "x0,x1,x2,x3,x4,source");
    assert_eq!(lines.len(), 1 + 4 * 3);
    let sources: Vec<&str> = lines[1..].iter().map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(sources, ["0", "0", "0", "1", "1", "1", "2", "2", "2", "3", "3", "3"]);

    diffaug(tmp.path(), &["generate", "run", "--data", "in.csv", "--n-per-input", "3", "--seed", "7", "--out", "g2.csv"]);
    assert_eq!(g1, std::fs::read_to_string(tmp.path().join("g2.csv")).unwrap());
    diffaug(tmp.path(), &["generate", "run", "--data", "in.csv", "--n-per-input", "3", "--seed", "8", "--out", "g3.csv"]);
    assert_ne!(g1, std::fs::read_to_string(tmp.path().join("g3.csv")).unwrap());

    let o = diffaug(tmp.path(), &["generate", "run", "--data", "in.csv", "--n-per-input", "0", "--out", "g0.csv"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(tmp.path().join("g0.csv")).unwrap(), "x0,x1,x2,x3,x4,source\n");
    assert!(!run.join("generated.csv").exists());
}

#[test]
fn generate_rejects_dimension_mismatch() {
    let (tmp, _) = setup();
    train(tmp.path(), "run");
    write_inputs(&tmp.path().join("narrow.csv"), 2, 3);
    let o = diffaug(tmp.path(), &["generate", "run", "--data", "narrow.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dimension mismatch"), "{}", stderr(&o));
}

fn parse_kv(s: &str) -> std::collections::HashMap<String, String> {
    s.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn eval_reports_probe_kmeans_and_cosine() {
    let (tmp, _) = setup();
    let run = train(tmp.path(), "run");
    let o = diffaug(tmp.path(), &["eval", "run"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let kv = parse_kv(&stdout(&o));
    assert_eq!(kv["seed"], "3");
    assert_eq!(kv["train_fraction"], "0.9");
    assert_eq!(kv["n_train"], "108");
    assert_eq!(kv["n_test"], "12");
    for key in ["probe_accuracy", "kmeans_accuracy"] {
        let a: f64 = kv[key].parse().unwrap();
        assert!((0.0..=1.0).contains(&a), "{key}={a}");
    }
    assert!(!kv.contains_key("cosine_mean"));
    assert!(run.join("eval/report.csv").is_file());

    write_inputs(&tmp.path().join("in.csv"), 5, 5);
    diffaug(tmp.path(), &["generate", "run", "--data", "in.csv", "--n-per-input", "2"]);
    let o = diffaug(tmp.path(), &["eval", "run", "--out", "rep"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let kv = parse_kv(&stdout(&o));
    assert_eq!(kv["cosine_pairs"], "10");
    let m: f64 = kv["cosine_mean"].parse().unwrap();
    assert!((-1.0..=1.0).contains(&m));
    let cos = std::fs::read_to_string(tmp.path().join("rep/cosine.csv")).unwrap();
    assert_eq!(cos.lines().count(), 51);
    let total: usize = cos.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 10);
}

#[test]
fn eval_rejects_unlabeled_data() {
    let (tmp, _) = setup();
    train(tmp.path(), "run");
    write_inputs(&tmp.path().join("in.csv"), 10, 5);
    let o = diffaug(tmp.path(), &["eval", "run", "--data", "in.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("label"));
}

#[test]
fn eval_without_a_run_is_a_usage_error() {
    let (tmp, _) = setup();
    let o = diffaug(tmp.path(), &["eval", "no_such_run"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_emits_one_row_per_cell() {
    let (tmp, _) = setup();
    let o = diffaug(tmp.path(), &["sweep-lambda", "--config", "small.json", "--lambdas", "0,0.5", "--seeds", "1,2", "--out", "sw"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(tmp.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(csv, stdout(&o));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r.ends_with(",ok")));
    assert!(rows[0].starts_with("0,1,") && rows[3].starts_with("0.5,2,"));
    assert!(tmp.path().join("sw/lambda_0.5_seed_2/model.ckpt").is_file());
}

#[test]
fn single_cell_sweep_matches_train_then_eval() {
    let (tmp, _) = setup();
    let o = diffaug(tmp.path(), &["sweep-lambda", "--config", "small.json", "--lambdas", "0.5", "--seeds", "3", "--out", "sw"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let row = std::fs::read_to_string(tmp.path().join("sw/sweep.csv")).unwrap();
    let fields: Vec<String> = row.lines().nth(1).unwrap().split(',').map(String::from).collect();

    let run = train(tmp.path(), "run");
    let e = diffaug(tmp.path(), &["eval", "run"]);
    let kv = parse_kv(&stdout(&e));
    assert_eq!(fields[2], kv["probe_accuracy"]);
    assert_eq!(fields[3], kv["kmeans_accuracy"]);
    assert_eq!(
        std::fs::read(run.join("model.ckpt")).unwrap(),
        std::fs::read(tmp.path().join("sw/lambda_0.5_seed_3/model.ckpt")).unwrap()
    );
}

#[test]
fn sweep_rejects_out_of_range_lambda() {
    let (tmp, _) = setup();
    let o = diffaug(tmp.path(), &["sweep-lambda", "--config", "small.json", "--lambdas", "0.1,1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("1.5"));
}

#[test]
fn sweep_rejects_bad_thread_cap() {
    let (tmp, _) = setup();
    let o = Command::new(BIN)
        .args(["sweep-lambda", "--config", "small.json", "--lambdas", "0"])
        .current_dir(tmp.path())
        .env("DIFFAUG_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn sweep_records_failing_cells_and_continues() {
    let (tmp, _) = setup();
    // every cell fails at runtime: the network diverges to non-finite values
    let cfg = SMALL.replace("\"diffusion_batch\": 16", "\"diffusion_batch\": 16, \"optimizer\": {\"learning_rate\": 1e200}");
    std::fs::write(tmp.path().join("boom.json"), cfg).unwrap();
    let o = diffaug(tmp.path(), &["sweep-lambda", "--config", "boom.json", "--lambdas", "0,1", "--seeds", "1", "--out", "sw"]);
    let csv = std::fs::read_to_string(tmp.path().join("sw/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "{csv}");
    assert!(csv.lines().skip(1).all(|l| l.contains(",,,error: ") && l.contains("epoch 1")), "{csv}");
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn default_config_plan_is_a_b_a() {
    let cfg = diffaug_cli::config::RunConfig::default();
    let kinds: Vec<String> = cfg.trainer.plan.stages.iter().map(|s| s.kind.to_string()).collect();
    assert_eq!(kinds, ["A", "B", "A"]);
    assert_eq!(cfg.data.synthetic.clusters, 3);
    assert_eq!(cfg.eval.train_fraction, 0.9);
}

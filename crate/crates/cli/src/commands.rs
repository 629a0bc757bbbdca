//! The four subcommands. Each returns a [`CliError`] whose variant fixes the
//! process exit code.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use diffaug::data::{parse_csv, split_indices, Dataset, Standardizer};
use diffaug::diffusion::generate_batch;
use diffaug::eval::{
    cosine_similarity_profile, kmeans_accuracy, linear_probe, CosineProfile, ProbeKind,
};
use diffaug::trainer::{Trainer, MODEL_FILE};
use diffaug::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{load_data, Embedding, RunConfig};
use crate::CliError;

pub const CONFIG_FILE: &str = "config.json";
pub const RUN_FILE: &str = "run.json";
pub const GENERATED_FILE: &str = "generated.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const DEFAULT_LAMBDAS: [f64; 7] = [0.0, 0.05, 0.1, 0.15, 0.3, 0.5, 1.0];

/// Facts about the training data needed to reuse a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub data_dim: usize,
    pub feature_names: Vec<String>,
    pub standardizer: Option<Stats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl RunManifest {
    fn standardizer(&self) -> Option<Standardizer> {
        self.standardizer.as_ref().map(|s| Standardizer {
            mean: s.mean.clone(),
            std: s.std.clone(),
        })
    }

    /// Maps raw features into the space the networks were trained on.
    fn to_model_space(&self, x: &Tensor) -> Result<Tensor, CliError> {
        if x.cols() != self.data_dim {
            return Err(CliError::Usage(format!(
                "dimension mismatch: data has {} features, checkpoint expects {}",
                x.cols(),
                self.data_dim
            )));
        }
        match self.standardizer() {
            Some(s) => s.apply(x).map_err(runtime),
            None => Ok(x.clone()),
        }
    }

    fn to_data_space(&self, x: &mut Tensor) {
        if let Some(s) = &self.standardizer {
            for i in 0..x.rows() {
                for ((v, m), sd) in x.row_mut(i).iter_mut().zip(&s.mean).zip(&s.std) {
                    if *sd > 0.0 {
                        *v = *v * sd + m;
                    }
                }
            }
        }
    }
}

/// Records where a generated file came from, so `eval` can pair each row
/// with its source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratedManifest {
    pub input: PathBuf,
    pub n_per_input: usize,
    pub seed: u64,
    pub rows: usize,
}

fn runtime(e: Error) -> CliError {
    CliError::Runtime(e.to_string())
}

fn classify(e: Error) -> CliError {
    match e {
        Error::Config { .. } => CliError::Usage(e.to_string()),
        e => runtime(e),
    }
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("malformed {}: {e}", path.display())))
}

/// Trains on the configured data and fills `cfg.out_dir` with the resolved
/// config, the data manifest, checkpoints and history.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    cfg.validate()?;
    let ds = cfg.data.load()?;
    if ds.len() < cfg.trainer.plan.batch_size {
        return Err(CliError::Usage(format!(
            "config error at `trainer.plan.batch_size`: {} exceeds the {} available samples",
            cfg.trainer.plan.batch_size,
            ds.len()
        )));
    }
    let (x, standardizer) = if cfg.data.standardize {
        let s = Standardizer::fit(&ds.x).map_err(runtime)?;
        (s.apply(&ds.x).map_err(runtime)?, Some(Stats { mean: s.mean, std: s.std }))
    } else {
        (ds.x.clone(), None)
    };
    let manifest = RunManifest {
        data_dim: ds.dim(),
        feature_names: ds
            .feature_names
            .clone()
            .unwrap_or_else(|| (0..ds.dim()).map(|j| format!("x{j}")).collect()),
        standardizer,
    };
    let mut trainer = Trainer::new(ds.dim(), cfg.train_config())
        .map_err(|e| CliError::Usage(format!("cannot build networks: {e}")))?;

    let dir = &cfg.out_dir;
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    write(&dir.join(CONFIG_FILE), &cfg.to_json())?;
    write(
        &dir.join(RUN_FILE),
        &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"),
    )?;
    log::info!("training into {}", dir.display());
    trainer.run_stages(&x, usize::MAX, Some(dir)).map_err(classify)?;
    Ok(dir.clone())
}

/// A trained run loaded back from its directory.
pub struct LoadedRun {
    pub config: RunConfig,
    pub manifest: RunManifest,
    pub trainer: Trainer,
}

pub fn load_run(run_dir: &Path) -> Result<LoadedRun, CliError> {
    let config = RunConfig::load(&run_dir.join(CONFIG_FILE))?;
    let manifest: RunManifest = read_json(&run_dir.join(RUN_FILE))?;
    let mut trainer = Trainer::new(manifest.data_dim, config.train_config())
        .map_err(|e| CliError::Usage(format!("cannot rebuild networks: {e}")))?;
    let model = run_dir.join(MODEL_FILE);
    if !model.is_file() {
        return Err(CliError::Usage(format!("no checkpoint at {}", model.display())));
    }
    trainer
        .load_model(&model)
        .map_err(|e| CliError::Usage(format!("cannot load {}: {e}", model.display())))?;
    Ok(LoadedRun { config, manifest, trainer })
}

/// Draws `n_per_input` samples conditioned on each input row's embedding.
/// Row `i` uses stream `i` of the seeded generator, so outputs do not depend
/// on the other rows.
pub fn cmd_generate(
    run_dir: &Path,
    input: &Path,
    n_per_input: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<PathBuf, CliError> {
    let run = load_run(run_dir)?;
    let ds = load_data(input)?;
    let x = run.manifest.to_model_space(&ds.x)?;
    let (_, z) = run.trainer.encoder.embed(&x).map_err(runtime)?;
    let mut text = run.manifest.feature_names.join(",");
    text.push_str(",source\n");
    let mut rows = 0;
    if n_per_input > 0 {
        for i in 0..ds.len() {
            let zi = z.row(i);
            let cond: Vec<f64> = (0..n_per_input).flat_map(|_| zi.iter().copied()).collect();
            let cond = Tensor::matrix(n_per_input, zi.len(), cond).map_err(runtime)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let mut samples = generate_batch(
                Some(&cond),
                n_per_input,
                &run.trainer.denoiser,
                &run.trainer.schedule,
                &mut rng,
            )
            .map_err(|e| CliError::Runtime(format!("input row {i}: {e}")))?;
            run.manifest.to_data_space(&mut samples);
            for r in 0..n_per_input {
                for v in samples.row(r) {
                    let _ = write!(text, "{v:.16e},");
                }
                let _ = writeln!(text, "{i}");
            }
            rows += n_per_input;
        }
    }

    let out = out.map_or_else(|| run_dir.join(GENERATED_FILE), Path::to_path_buf);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    write(&out, &text)?;
    let manifest = GeneratedManifest {
        input: std::fs::canonicalize(input).unwrap_or_else(|_| input.to_path_buf()),
        n_per_input,
        seed,
        rows,
    };
    write(
        &out.with_extension("json"),
        &(serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n"),
    )?;
    Ok(out)
}

/// Everything `eval` measures.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub run_seed: u64,
    pub probe_seed: u64,
    pub probe_kind: ProbeKind,
    pub embedding: Embedding,
    pub train_fraction: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub probe_accuracy: f64,
    pub clusters: usize,
    pub kmeans_accuracy: f64,
    pub cosine: Option<CosineProfile>,
}

impl EvalReport {
    pub fn lines(&self) -> Vec<(String, String)> {
        let mut v = vec![
            ("seed".to_string(), self.run_seed.to_string()),
            ("probe_seed".into(), self.probe_seed.to_string()),
            ("probe_kind".into(), self.probe_kind.to_string()),
            (
                "embedding".into(),
                match self.embedding {
                    Embedding::Y => "y".into(),
                    Embedding::Z => "z".into(),
                },
            ),
            ("train_fraction".into(), self.train_fraction.to_string()),
            ("n_train".into(), self.n_train.to_string()),
            ("n_test".into(), self.n_test.to_string()),
            ("probe_accuracy".into(), self.probe_accuracy.to_string()),
            ("clusters".into(), self.clusters.to_string()),
            ("kmeans_accuracy".into(), self.kmeans_accuracy.to_string()),
        ];
        if let Some(c) = &self.cosine {
            v.push(("cosine_pairs".into(), c.similarities.len().to_string()));
            v.push(("cosine_mean".into(), c.mean.to_string()));
            v.push(("cosine_std".into(), c.std.to_string()));
        }
        v
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        for (k, v) in self.lines() {
            let _ = writeln!(out, "{k},{v}");
        }
        out
    }
}

fn embed(run: &LoadedRun, x: &Tensor) -> Result<Tensor, CliError> {
    let x = run.manifest.to_model_space(x)?;
    let (y, z) = run.trainer.encoder.embed(&x).map_err(runtime)?;
    Ok(match run.config.eval.embedding {
        Embedding::Y => y,
        Embedding::Z => z,
    })
}

/// Embeds generated rows and their sources when `generated.csv` and its
/// manifest are present in the run directory.
fn generated_profile(run: &LoadedRun, run_dir: &Path) -> Result<Option<CosineProfile>, CliError> {
    let gen_path = run_dir.join(GENERATED_FILE);
    let man_path = gen_path.with_extension("json");
    if !gen_path.is_file() || !man_path.is_file() {
        return Ok(None);
    }
    let man: GeneratedManifest = read_json(&man_path)?;
    if man.rows == 0 {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&gen_path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", gen_path.display())))?;
    let gen = parse_csv(&text)
        .map_err(|e| CliError::Usage(format!("malformed {}: {e}", gen_path.display())))?;
    let d = run.manifest.data_dim;
    if gen.dim() != d + 1 {
        return Err(CliError::Usage(format!(
            "{} has {} columns, expected {} features and a source column",
            gen_path.display(),
            gen.dim(),
            d
        )));
    }
    let src = load_data(&man.input)?;
    let mut sources = Vec::with_capacity(gen.len());
    let mut feats = Vec::with_capacity(gen.len() * d);
    for i in 0..gen.len() {
        let row = gen.x.row(i);
        let s = row[d];
        if s < 0.0 || s.fract() != 0.0 || s as usize >= src.len() {
            return Err(CliError::Usage(format!(
                "{}: row {} names source {s}, input has {} rows",
                gen_path.display(),
                i + 1,
                src.len()
            )));
        }
        sources.push(s as usize);
        feats.extend_from_slice(&row[..d]);
    }
    let gen_x = Tensor::matrix(gen.len(), d, feats).map_err(runtime)?;
    let orig_x = src.x.select_rows(&sources).map_err(runtime)?;
    let profile = cosine_similarity_profile(&embed(run, &orig_x)?, &embed(run, &gen_x)?)
        .map_err(runtime)?;
    Ok(Some(profile))
}

/// Probe and k-means on labeled data (the run's own data when `data` is
/// `None`), plus the cosine profile of generated samples when available.
/// Reports go to `out` (default `<run_dir>/eval`).
pub fn cmd_eval(run_dir: &Path, data: Option<&Path>, out: Option<&Path>) -> Result<EvalReport, CliError> {
    let run = load_run(run_dir)?;
    let ds = match data {
        Some(p) => load_data(p)?,
        None => run.config.data.load()?,
    };
    evaluate(&run, &ds, run_dir, out)
}

fn evaluate(
    run: &LoadedRun,
    ds: &Dataset,
    run_dir: &Path,
    out: Option<&Path>,
) -> Result<EvalReport, CliError> {
    let labels = ds
        .labels
        .as_ref()
        .ok_or_else(|| CliError::Usage("evaluation needs a labeled dataset (a final `label` column)".into()))?;
    let emb = embed(run, &ds.x)?;
    let ec = &run.config.eval;
    let (tr, te) = split_indices(ds.len(), ec.train_fraction, ec.probe.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let pick = |idx: &[usize]| -> Result<(Tensor, Vec<usize>), CliError> {
        Ok((
            emb.select_rows(idx).map_err(runtime)?,
            idx.iter().map(|&i| labels[i]).collect(),
        ))
    };
    let (xtr, ytr) = pick(&tr)?;
    let (xte, yte) = pick(&te)?;
    let probe = linear_probe(&xtr, &ytr, &xte, &yte, &ec.probe).map_err(|e| match e {
        Error::Protocol(_) => CliError::Usage(e.to_string()),
        e => runtime(e),
    })?;
    let clusters = ds.num_classes();
    let km = kmeans_accuracy(&emb, labels, clusters, ec.probe.seed).map_err(runtime)?;
    let cosine = generated_profile(run, run_dir)?;
    let report = EvalReport {
        run_seed: run.config.seed,
        probe_seed: ec.probe.seed,
        probe_kind: ec.probe.kind,
        embedding: ec.embedding,
        train_fraction: ec.train_fraction,
        n_train: probe.n_train,
        n_test: probe.n_test,
        probe_accuracy: probe.accuracy,
        clusters,
        kmeans_accuracy: km,
        cosine,
    };
    let dir = out.map_or_else(|| run_dir.join("eval"), Path::to_path_buf);
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    write(&dir.join("report.csv"), &report.to_csv())?;
    if let Some(c) = &report.cosine {
        write(&dir.join("cosine.csv"), &c.to_csv())?;
    }
    Ok(report)
}

/// One `(λ, seed)` cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub lambda: f64,
    pub seed: u64,
    pub outcome: Result<(f64, f64), String>,
}

pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut out = String::from("lambda,seed,probe_accuracy,kmeans_accuracy,status\n");
    for c in cells {
        match &c.outcome {
            Ok((p, k)) => {
                let _ = writeln!(out, "{},{},{p},{k},ok", c.lambda, c.seed);
            }
            Err(m) => {
                let m = m.replace(['\n', ','], " ");
                let _ = writeln!(out, "{},{},,,error: {m}", c.lambda, c.seed);
            }
        }
    }
    out
}

/// Cell directory name under the sweep output.
pub fn cell_dir(base: &Path, lambda: f64, seed: u64) -> PathBuf {
    base.join(format!("lambda_{lambda}_seed_{seed}"))
}

/// Trains and evaluates every `(λ, seed)` pair, at most `threads` at a time.
/// A failing cell is recorded and the rest still run. Cells appear in
/// λ-major order.
pub fn cmd_sweep_lambda(
    cfg: &RunConfig,
    lambdas: &[f64],
    seeds: &[u64],
    threads: usize,
) -> Result<Vec<SweepCell>, CliError> {
    for &l in lambdas {
        if !(0.0..=1.0).contains(&l) {
            return Err(CliError::Usage(format!("lambda {l} is outside [0, 1]")));
        }
    }
    if lambdas.is_empty() || seeds.is_empty() {
        return Err(CliError::Usage("sweep needs at least one lambda and one seed".into()));
    }
    cfg.validate()?;
    let data = cfg.data.load()?;
    if data.labels.is_none() {
        return Err(CliError::Usage(
            "sweep evaluates on the training data, which must be labeled".into(),
        ));
    }
    let base = cfg.out_dir.clone();
    let jobs: Vec<(f64, u64)> = lambdas
        .iter()
        .flat_map(|&l| seeds.iter().map(move |&s| (l, s)))
        .collect();
    let results: Mutex<Vec<Option<SweepCell>>> = Mutex::new(vec![None; jobs.len()]);
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, jobs.len());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let j = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(lambda, seed)) = jobs.get(j) else { break };
                let mut c = cfg.clone();
                c.trainer.plan.lambda = lambda;
                c.seed = seed;
                c.out_dir = cell_dir(&base, lambda, seed);
                let outcome = run_cell(&c, &data).map_err(|e| e.to_string());
                match &outcome {
                    Ok((p, _)) => log::info!("lambda {lambda} seed {seed}: probe accuracy {p}"),
                    Err(m) => log::warn!("lambda {lambda} seed {seed} failed: {m}"),
                }
                results.lock().expect("no poisoned workers")[j] = Some(SweepCell { lambda, seed, outcome });
            });
        }
    });
    let cells: Vec<SweepCell> = results
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|c| c.expect("every job ran"))
        .collect();
    std::fs::create_dir_all(&base)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", base.display())))?;
    write(&base.join(SWEEP_FILE), &sweep_csv(&cells))?;
    Ok(cells)
}

fn run_cell(cfg: &RunConfig, data: &Dataset) -> Result<(f64, f64), CliError> {
    let dir = cmd_train(cfg)?;
    let run = load_run(&dir)?;
    let r = evaluate(&run, data, &dir, None)?;
    Ok((r.probe_accuracy, r.kmeans_accuracy))
}

/// Worker cap from `DIFFAUG_THREADS`, else the available parallelism.
pub fn thread_cap(var: Option<&str>) -> Result<usize, CliError> {
    match var {
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(CliError::Usage(format!(
                "DIFFAUG_THREADS must be a positive integer, got {v:?}"
            ))),
        },
        None => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

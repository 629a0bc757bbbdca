use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::AugmentKind;
use super::background::{sample_minibatch, Generator};
use super::encoder::{Encoder, EncoderConfig};
use super::steps::{a_step, b_step, LossKind};
use crate::diffusion::{make_schedule, Denoiser, DenoiserConfig, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::checkpoint::{load_into, prefixed, read_checkpoint, write_checkpoint};
use crate::numerics::{AdamWConfig, OptState, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageKind {
    /// Encoder update with the contrastive loss.
    A,
    /// Denoiser update with the noise-prediction loss.
    B,
}

impl std::fmt::Display for StageKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StageKind::A => "A",
            StageKind::B => "B",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub kind: StageKind,
    pub epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
    /// Probability of replacing a hand-augmented positive with a generated
    /// one.
    pub lambda: f64,
    /// Companions per center.
    pub batch_size: usize,
    pub positives_per_center: usize,
}

impl Default for StagePlan {
    fn default() -> Self {
        Self {
            stages: vec![
                Stage { kind: StageKind::A, epochs: 50 },
                Stage { kind: StageKind::B, epochs: 100 },
                Stage { kind: StageKind::A, epochs: 100 },
            ],
            lambda: 0.1,
            batch_size: 256,
            positives_per_center: 1,
        }
    }
}

impl StagePlan {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config { field: format!("trainer.plan.{field}"), msg });
        match self.stages.first() {
            None => return bad("stages", "plan has no stages".into()),
            Some(s) if s.kind != StageKind::A => {
                return bad("stages", "the first stage must be an A stage".into())
            }
            _ => {}
        }
        if let Some(i) = self.stages.iter().position(|s| s.epochs == 0) {
            return bad("stages", format!("stage {i} has zero epochs"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda", format!("{} outside [0, 1]", self.lambda));
        }
        if self.positives_per_center == 0 || self.positives_per_center >= self.batch_size {
            return bad(
                "positives_per_center",
                format!(
                    "need 1 <= positives_per_center ({}) < batch_size ({})",
                    self.positives_per_center, self.batch_size
                ),
            );
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Stages run one loss at a time.
    #[default]
    Alternating,
    /// A stages also update the denoiser on every minibatch.
    Synchronous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub denoiser: DenoiserConfig,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            denoiser: DenoiserConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerConfig {
    pub plan: StagePlan,
    /// Centers per encoder update.
    pub centers_per_step: usize,
    /// Samples per denoiser update.
    pub diffusion_batch: usize,
    pub optimizer: AdamWConfig,
    pub augment: AugmentKind,
    pub loss: LossKind,
    pub mode: TrainMode,
    /// Write a checkpoint every this many epochs (0: stage ends only).
    pub checkpoint_every: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            plan: StagePlan::default(),
            centers_per_step: 32,
            diffusion_batch: 64,
            optimizer: AdamWConfig::default(),
            augment: AugmentKind::default(),
            loss: LossKind::Scl,
            mode: TrainMode::Alternating,
            checkpoint_every: 0,
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub diffusion: DiffusionConfig,
    pub trainer: TrainerConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.trainer.plan.validate()?;
        self.trainer
            .augment
            .validate()
            .map_err(|e| Error::Config { field: "trainer.augment".into(), msg: e.to_string() })?;
        if self.trainer.centers_per_step == 0 || self.trainer.diffusion_batch == 0 {
            return Err(Error::Config {
                field: "trainer".into(),
                msg: "centers_per_step and diffusion_batch must be positive".into(),
            });
        }
        self.encoder
            .scl()
            .map_err(|e| Error::Config { field: "encoder".into(), msg: e.to_string() })?;
        crate::kernels::check_beta(self.encoder.beta)
            .map_err(|e| Error::Config { field: "encoder.beta".into(), msg: e.to_string() })?;
        make_schedule(self.diffusion.steps, self.diffusion.beta_start, self.diffusion.beta_end)
            .map_err(|e| Error::Config { field: "diffusion".into(), msg: e.to_string() })?;
        Ok(())
    }
}

mod stream {
    pub const ENCODER_INIT: u64 = 1;
    pub const DENOISER_INIT: u64 = 2;
    pub const A_SHUFFLE: u64 = 3;
    pub const A_SAMPLE: u64 = 4;
    pub const A_REPLACE: u64 = 5;
    pub const B_SHUFFLE: u64 = 6;
    pub const B_NOISE: u64 = 7;
    pub const SYNC_NOISE: u64 = 8;
}

/// Independent generator for `(seed, purpose, index)`: stream `purpose` of
/// the seeded cipher, starting `2^36` words into it per index.
fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) << 36);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based over the whole run.
    pub epoch: usize,
    pub stage_index: usize,
    pub kind: StageKind,
    pub loss: f64,
    /// Generated positives used during the epoch.
    pub generated: usize,
    pub wall_ms: u128,
}

/// Training state: networks, optimizer moments, history and stage cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub encoder: Encoder,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub encoder_opt: OptState,
    pub denoiser_opt: OptState,
    pub history: Vec<EpochRecord>,
    /// Index of the next stage to run.
    pub next_stage: usize,
    a_epochs: u64,
    b_epochs: u64,
    diffusion_trained: bool,
}

pub const MODEL_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const TIMING_FILE: &str = "timing.csv";

impl Trainer {
    pub fn new(data_dim: usize, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::init(
            data_dim,
            &config.encoder,
            &mut stream_rng(config.seed, stream::ENCODER_INIT, 0),
        )?;
        let denoiser = Denoiser::init(
            data_dim,
            encoder.z_dim(),
            &config.diffusion.denoiser,
            &mut stream_rng(config.seed, stream::DENOISER_INIT, 0),
        )?;
        let d = &config.diffusion;
        let schedule = make_schedule(d.steps, d.beta_start, d.beta_end)?;
        let encoder_opt = OptState::new(&encoder, config.trainer.optimizer);
        let denoiser_opt = OptState::new(&denoiser, config.trainer.optimizer);
        Ok(Self {
            config,
            encoder,
            denoiser,
            schedule,
            encoder_opt,
            denoiser_opt,
            history: Vec::new(),
            next_stage: 0,
            a_epochs: 0,
            b_epochs: 0,
            diffusion_trained: false,
        })
    }

    /// Whether A stages may use generated positives.
    pub fn diffusion_trained(&self) -> bool {
        self.diffusion_trained
    }

    fn check_data(&self, data: &Tensor) -> Result<()> {
        if data.cols() != self.encoder.input_dim() {
            return Err(Error::Dimension(format!(
                "data has {} features, model expects {}",
                data.cols(),
                self.encoder.input_dim()
            )));
        }
        if !data.is_finite() {
            return Err(Error::Numeric("training data is not finite".into()));
        }
        Ok(())
    }

    fn a_epoch(&mut self, data: &Tensor) -> Result<(f64, usize)> {
        let tc = &self.config.trainer;
        let (seed, idx) = (self.config.seed, self.a_epochs);
        let scl = self.config.encoder.scl()?;
        let mut order: Vec<usize> = (0..data.rows()).collect();
        order.shuffle(&mut stream_rng(seed, stream::A_SHUFFLE, idx));
        let mut data_rng = stream_rng(seed, stream::A_SAMPLE, idx);
        let mut replace_rng = stream_rng(seed, stream::A_REPLACE, idx);
        let mut noise_rng = stream_rng(seed, stream::SYNC_NOISE, idx);
        let (mut total, mut generated) = (0.0, 0);
        for chunk in order.chunks(tc.centers_per_step) {
            let gen = Generator {
                encoder: &self.encoder,
                denoiser: &self.denoiser,
                schedule: &self.schedule,
            };
            let batch = sample_minibatch(
                data,
                chunk,
                &tc.plan,
                &tc.augment,
                self.diffusion_trained.then_some(&gen),
                &mut data_rng,
                &mut replace_rng,
            )?;
            generated += batch.generated();
            let loss = a_step(&batch, &mut self.encoder, &mut self.encoder_opt, tc.loss, &scl)?;
            total += loss * chunk.len() as f64;
            if tc.mode == TrainMode::Synchronous {
                let x = data.select_rows(chunk)?;
                b_step(&x, &self.encoder, &mut self.denoiser, &mut self.denoiser_opt, &self.schedule, &mut noise_rng)?;
            }
        }
        self.a_epochs += 1;
        if tc.mode == TrainMode::Synchronous {
            self.diffusion_trained = true;
        }
        Ok((total / data.rows() as f64, generated))
    }

    fn b_epoch(&mut self, data: &Tensor) -> Result<f64> {
        let (seed, idx) = (self.config.seed, self.b_epochs);
        let mut order: Vec<usize> = (0..data.rows()).collect();
        order.shuffle(&mut stream_rng(seed, stream::B_SHUFFLE, idx));
        let mut rng = stream_rng(seed, stream::B_NOISE, idx);
        let mut total = 0.0;
        for chunk in order.chunks(self.config.trainer.diffusion_batch) {
            let x = data.select_rows(chunk)?;
            let loss = b_step(&x, &self.encoder, &mut self.denoiser, &mut self.denoiser_opt, &self.schedule, &mut rng)?;
            total += loss * chunk.len() as f64;
        }
        self.b_epochs += 1;
        self.diffusion_trained = true;
        Ok(total / data.rows() as f64)
    }

    /// Runs one epoch of stage `stage_index` and records it.
    pub fn run_epoch(&mut self, data: &Tensor, stage_index: usize) -> Result<&EpochRecord> {
        let kind = self
            .config
            .trainer
            .plan
            .stages
            .get(stage_index)
            .ok_or_else(|| Error::Parameter(format!("no stage {stage_index}")))?
            .kind;
        let epoch = self.history.len() + 1;
        let start = Instant::now();
        let (loss, generated) = match kind {
            StageKind::A => self.a_epoch(data)?,
            StageKind::B => (self.b_epoch(data)?, 0),
        };
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("loss {loss}")));
        }
        self.history.push(EpochRecord {
            epoch,
            stage_index,
            kind,
            loss,
            generated,
            wall_ms: start.elapsed().as_millis(),
        });
        log::debug!("epoch {epoch} stage {stage_index} ({kind}) loss {loss:.6} generated {generated}");
        Ok(self.history.last().expect("just pushed"))
    }

    /// Runs stages from the cursor up to (not including) `until`. With an
    /// output directory, writes a checkpoint every `checkpoint_every` epochs
    /// and at each stage end, plus the history files.
    pub fn run_stages(&mut self, data: &Tensor, until: usize, out: Option<&Path>) -> Result<()> {
        self.check_data(data)?;
        if data.rows() < self.config.trainer.plan.batch_size {
            return Err(Error::Sampling(format!(
                "dataset has {} samples, batch needs {}",
                data.rows(),
                self.config.trainer.plan.batch_size
            )));
        }
        let until = until.min(self.config.trainer.plan.stages.len());
        if let Some(dir) = out {
            std::fs::create_dir_all(dir.join("checkpoints")).map_err(|e| Error::io(dir, e))?;
        }
        while self.next_stage < until {
            let s = self.next_stage;
            let stage = self.config.trainer.plan.stages[s];
            log::info!("stage {s}: {} for {} epochs", stage.kind, stage.epochs);
            for e in 0..stage.epochs {
                let epoch = self.history.len() + 1;
                self.run_epoch(data, s)
                    .map_err(|err| err.context(format!("stage {s} ({}) epoch {epoch}", stage.kind)))?;
                let every = self.config.trainer.checkpoint_every;
                let periodic = every > 0 && epoch % every == 0;
                if let Some(dir) = out {
                    if periodic || e + 1 == stage.epochs {
                        let p = dir.join("checkpoints").join(format!("epoch_{epoch:05}.ckpt"));
                        self.save_model(&p)?;
                    }
                }
            }
            self.next_stage += 1;
            if let Some(dir) = out {
                self.save(dir)?;
            }
        }
        Ok(())
    }

    pub fn save_model(&self, path: &Path) -> Result<()> {
        let mut entries = prefixed("encoder", &self.encoder);
        entries.extend(prefixed("denoiser", &self.denoiser));
        write_checkpoint(path, &entries)
    }

    pub fn load_model(&mut self, path: &Path) -> Result<()> {
        let entries = read_checkpoint(path)?;
        load_into(&mut self.encoder, "encoder", &entries)?;
        load_into(&mut self.denoiser, "denoiser", &entries)
    }

    /// Writes the final model, `history.csv` and `timing.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.save_model(&dir.join(MODEL_FILE))?;
        let h = dir.join(HISTORY_FILE);
        std::fs::write(&h, history_csv(&self.history)).map_err(|e| Error::io(&h, e))?;
        let t = dir.join(TIMING_FILE);
        std::fs::write(&t, timing_csv(&self.history)).map_err(|e| Error::io(&t, e))
    }
}

/// `epoch,stage,stage_index,loss,generated`, one line per epoch.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,stage,stage_index,loss,generated\n");
    for r in history {
        let _ = writeln!(out, "{},{},{},{:e},{}", r.epoch, r.kind, r.stage_index, r.loss, r.generated);
    }
    out
}

pub fn timing_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,wall_ms\n");
    for r in history {
        let _ = writeln!(out, "{},{}", r.epoch, r.wall_ms);
    }
    out
}

/// Runs the full plan on `data` (labels never reach this point).
pub fn run_schedule(data: &Tensor, config: &TrainConfig, out: Option<&Path>) -> Result<Trainer> {
    let mut t = Trainer::new(data.cols(), config.clone())?;
    t.run_stages(data, usize::MAX, out)?;
    Ok(t)
}

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::data::{epoch_batches, make_batch, Batch, Dataset};
use super::manifest::{Manifest, Split};
use super::optim::{clip_grad_norm, AdamW};
use crate::audio::MelConfig;
use crate::error::{Error, Result};
use crate::model::{Model, StepDraws};
use crate::params::ParamStore;

pub const TRAIN_LOG: &str = "train_log.tsv";
pub const DEV_LOG: &str = "dev_log.tsv";
pub const CHECKPOINT_FILE: &str = "checkpoint.pvck";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss_cfm: f64,
    pub loss_rec: f64,
    pub grad_norm: f64,
    pub mixup_rate: f64,
}

/// One optimizer update on `batch`.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &Model,
    params: &mut ParamStore,
    optimizer: &mut AdamW,
    batch: &Batch,
    cfg: &TrainConfig,
    mixup: Option<f64>,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<StepStats> {
    let packed = batch.pack(model)?;
    let draws = StepDraws::sample(&batch.lengths, model.cfg.mel_bins, mixup, rng)?;
    let lg = model.loss_graph(params, &packed, &draws, &cfg.loss_options(), true)?;
    let (total, loss_cfm, loss_rec) = lg.values();
    if !total.is_finite() {
        return Err(Error::NumericalFailure {
            stage: "train_step".into(),
            detail: format!("step {step}, batch {:?}: loss_cfm {loss_cfm}, loss_rec {loss_rec}", batch.ids),
        });
    }
    let mut grads = lg.graph.backward(lg.total).into_params();
    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(Error::NumericalFailure {
            stage: "train_step".into(),
            detail: format!("step {step}, batch {:?}: gradient norm {grad_norm}", batch.ids),
        });
    }
    optimizer.step(params, &grads)?;
    Ok(StepStats { loss_cfm, loss_rec, grad_norm, mixup_rate: draws.plan.flag_rate() })
}

/// RNG for everything random in step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub first: Option<StepStats>,
    pub last: Option<StepStats>,
    pub mean_mixup_rate: f64,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub params: ParamStore,
    pub optimizer: AdamW,
    pub step: u64,
    pub train_data: Dataset,
    pub dev_data: Option<Dataset>,
    mixup: Option<f64>,
}

impl Trainer {
    /// Fresh run: analyzes the corpus, fixes the mel statistics from the
    /// training split, and initializes parameters from the seed.
    pub fn new(mut cfg: TrainConfig, manifest: &Manifest) -> Result<Self> {
        cfg.validate()?;
        let (train_data, dev_data) = prepare(&cfg, manifest)?;
        let (mean, std) = train_data.mel_stats();
        cfg.model.mel_mean = mean;
        cfg.model.mel_std = std;
        let model = Model::new(cfg.model)?;
        let params = model.init_params(cfg.seed);
        let optimizer = AdamW::new(&params, cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay);
        Ok(Self::assemble(cfg, model, params, optimizer, 0, train_data, dev_data))
    }

    /// Continues from a checkpoint; the step counter carries on from it.
    pub fn resume(ck: Checkpoint, manifest: &Manifest) -> Result<Self> {
        let model = Model::new(ck.config.model)?;
        model.check_params(&ck.params)?;
        let (train_data, dev_data) = prepare(&ck.config, manifest)?;
        Ok(Self::assemble(ck.config, model, ck.params, ck.optimizer, ck.step, train_data, dev_data))
    }

    fn assemble(cfg: TrainConfig, model: Model, params: ParamStore, optimizer: AdamW, step: u64, train_data: Dataset, dev_data: Option<Dataset>) -> Self {
        let mixup = if cfg.mixup_rate > 0.0 && train_data.distinct_speakers() < 2 {
            log::warn!("training data has a single speaker; latent mixup is disabled");
            None
        } else if cfg.mixup_rate > 0.0 {
            Some(cfg.mixup_rate)
        } else {
            None
        };
        Self { cfg, model, params, optimizer, step, train_data, dev_data, mixup }
    }

    pub fn mixup_rate(&self) -> Option<f64> {
        self.mixup
    }

    /// Batch of step `step`; a pure function of (seed, step).
    pub fn batch_for_step(&self, step: u64, rng: &mut ChaCha8Rng) -> Result<Batch> {
        let lengths = self.train_data.lengths();
        let per_epoch = lengths.len().div_ceil(self.cfg.batch_size) as u64;
        let order = epoch_batches(&lengths, self.cfg.batch_size, self.cfg.seed, step / per_epoch);
        let ids = &order[(step % per_epoch) as usize];
        let max = (self.cfg.max_frames > 0).then_some(self.cfg.max_frames);
        make_batch(&self.train_data, ids, max, rng)
    }

    pub fn train_step(&mut self) -> Result<StepStats> {
        let mut rng = step_rng(self.cfg.seed, self.step);
        let batch = self.batch_for_step(self.step, &mut rng)?;
        let stats = train_step(&self.model, &mut self.params, &mut self.optimizer, &batch, &self.cfg, self.mixup, self.step, &mut rng)?;
        self.step += 1;
        Ok(stats)
    }

    /// Mean losses over `data` under a fixed draw of times, masks and noise
    /// (whole clips, no mixup), so values are comparable across checkpoints.
    pub fn fixed_loss(&self, data: &Dataset, seed: u64) -> Result<(f64, f64)> {
        let (mut cfm, mut rec, mut n) = (0.0, 0.0, 0.0);
        let ids: Vec<usize> = (0..data.len()).collect();
        for (k, chunk) in ids.chunks(self.cfg.batch_size).enumerate() {
            let mut rng = step_rng(seed, k as u64);
            let batch = make_batch(data, chunk, None, &mut rng)?;
            let packed = batch.pack(&self.model)?;
            let draws = StepDraws::sample(&batch.lengths, self.model.cfg.mel_bins, None, &mut rng)?;
            let lg = self.model.loss_graph(&self.params, &packed, &draws, &self.cfg.loss_options(), false)?;
            let (_, c, r) = lg.values();
            let w = chunk.len() as f64;
            cfm += c * w;
            rec += r * w;
            n += w;
        }
        Ok((cfm / n, rec / n))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { step: self.step, config: self.cfg.clone(), params: self.params.clone(), optimizer: self.optimizer.clone() }
    }

    /// Trains until `total_steps`, logging and checkpointing into `out`.
    pub fn run(&mut self, out: Option<&Path>) -> Result<TrainSummary> {
        let mut logs = match out {
            Some(dir) => Some(Logs::open(dir)?),
            None => None,
        };
        let start = Instant::now();
        let mut summary = TrainSummary { steps: 0, first: None, last: None, mean_mixup_rate: 0.0 };
        while self.step < self.cfg.total_steps {
            let stats = self.train_step()?;
            summary.steps += 1;
            summary.first.get_or_insert(stats);
            summary.last = Some(stats);
            summary.mean_mixup_rate += stats.mixup_rate;
            let step = self.step;
            if step.is_multiple_of(self.cfg.log_every) || step == self.cfg.total_steps {
                log::info!("step {step}: loss_cfm {:.5} loss_rec {:.5}", stats.loss_cfm, stats.loss_rec);
                if let Some(l) = logs.as_mut() {
                    l.train(step, &stats, start.elapsed().as_secs_f64())?;
                }
            }
            if self.cfg.dev_every > 0 && step.is_multiple_of(self.cfg.dev_every) {
                if let Some(dev) = &self.dev_data {
                    let (c, r) = self.fixed_loss(dev, self.cfg.seed)?;
                    log::info!("step {step}: dev loss_cfm {c:.5} loss_rec {r:.5}");
                    if let Some(l) = logs.as_mut() {
                        l.dev(step, c, r, start.elapsed().as_secs_f64())?;
                    }
                }
            }
            if let Some(dir) = out {
                if self.cfg.checkpoint_every > 0 && step.is_multiple_of(self.cfg.checkpoint_every) {
                    self.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
                }
            }
        }
        if let Some(dir) = out {
            self.checkpoint().save(dir.join(CHECKPOINT_FILE))?;
        }
        if summary.steps > 0 {
            summary.mean_mixup_rate /= summary.steps as f64;
        }
        Ok(summary)
    }
}

fn prepare(cfg: &TrainConfig, manifest: &Manifest) -> Result<(Dataset, Option<Dataset>)> {
    let mel_cfg = MelConfig::default();
    let select = |split| manifest.entries.iter().enumerate().filter(|(_, e)| e.split == split).collect::<Vec<_>>();
    let train_entries = select(Split::Train);
    if train_entries.is_empty() {
        return Err(Error::invalid("manifest has no training entries"));
    }
    let perturb = cfg.perturb_content.then_some(cfg.seed);
    let train = Dataset::prepare(&train_entries, &cfg.model, &mel_cfg, perturb)?;
    let dev_entries = select(Split::Dev);
    let dev = if dev_entries.is_empty() { None } else { Some(Dataset::prepare(&dev_entries, &cfg.model, &mel_cfg, None)?) };
    Ok((train, dev))
}

struct Logs {
    train: std::fs::File,
    dev: std::fs::File,
    dir: PathBuf,
}

impl Logs {
    fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let open = |name: &str, header: &str| -> Result<std::fs::File> {
            let path = dir.join(name);
            let fresh = !path.exists();
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "{header}").map_err(|e| Error::io(&path, e))?;
            }
            Ok(f)
        };
        Ok(Self {
            train: open(TRAIN_LOG, "step\tloss_cfm\tloss_rec\twall_time")?,
            dev: open(DEV_LOG, "step\tdev_loss_cfm\tdev_loss_rec\twall_time")?,
            dir: dir.to_path_buf(),
        })
    }

    fn train(&mut self, step: u64, s: &StepStats, wall: f64) -> Result<()> {
        writeln!(self.train, "{step}\t{}\t{}\t{wall:.3}", s.loss_cfm, s.loss_rec).map_err(|e| Error::io(self.dir.join(TRAIN_LOG), e))
    }

    fn dev(&mut self, step: u64, cfm: f64, rec: f64, wall: f64) -> Result<()> {
        writeln!(self.dev, "{step}\t{cfm}\t{rec}\t{wall:.3}").map_err(|e| Error::io(self.dir.join(DEV_LOG), e))
    }
}

/// Trains from scratch, or resumes when `out` already holds a checkpoint.
pub fn train(manifest: &Manifest, cfg: TrainConfig, out: &Path) -> Result<Checkpoint> {
    let existing = out.join(CHECKPOINT_FILE);
    let mut trainer = if existing.exists() {
        let ck = Checkpoint::load(&existing)?;
        log::info!("resuming from step {}", ck.step);
        let mut ck = ck;
        ck.config.total_steps = cfg.total_steps;
        Trainer::resume(ck, manifest)?
    } else {
        Trainer::new(cfg, manifest)?
    };
    trainer.run(Some(out))?;
    Ok(trainer.checkpoint())
}

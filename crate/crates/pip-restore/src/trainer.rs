//! End-to-end training: loss, schedule, epoch loop, validation,
//! checkpointing, and evaluation under different task-weight policies.
//!
//! A "run" is fully determined by its [`TrainConfig`]: parameter init,
//! every training sample, batch mixing, and the held-out validation set
//! all derive from `(seed, stream, index)`, never from mutable RNG state.
//! That makes two runs of one config bit-identical, and lets a resumed run
//! replay the exact trajectory the uninterrupted run would have taken.

use std::path::Path;

use crate::backbone::{PipOverride, UNet, UNetConfig};
use crate::degrade::{
    self, apply_composite, make_sample, make_sample_of, synth_clean, DegradationKind, TaskSet,
};
use crate::error::Error;
use crate::graph::{Graph, Var};
use crate::metrics::{psnr, ssim, QualityReport};
use crate::num::fl;
use crate::optim::{lr_at, Adam, GradBuffer};
use crate::params::ParamStore;
use crate::pip::pairwise_angles_deg;
use crate::rng::{chacha, derive, Stream};
use crate::tensor::Tensor;
use crate::Result;

// ── configuration ──

/// Everything that defines a training run.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Ordered task set; its length is T everywhere.
    pub tasks: TaskSet,
    /// Square training-image side in pixels.
    pub image_size: usize,
    /// Resolution levels of the restoration network (including bottleneck).
    pub levels: usize,
    /// Channels at the finest level.
    pub base_channels: usize,
    /// Residual blocks per level.
    pub blocks_per_level: usize,
    /// Prompt spatial side at the finest skip.
    pub prompt_spatial: usize,
    /// Per-skip prompt-config tweaks (empty = derived defaults everywhere).
    pub pip_overrides: Vec<PipOverride>,
    /// Ablation letter `a`–`e` selecting the prompt-module wiring.
    pub ablation: char,
    /// Weight of the prompt-spread loss.
    pub alpha: f64,
    /// Target pairwise prompt angle in radians.
    pub theta_thre: f64,
    /// Peak learning rate.
    pub lr_peak: f64,
    /// Epochs of linear warmup.
    pub warmup_epochs: usize,
    /// Total epochs (including warmup).
    pub total_epochs: usize,
    /// Optimizer steps per epoch (data is generated, so an epoch is a
    /// fixed step budget rather than a dataset pass).
    pub steps_per_epoch: usize,
    /// Samples per optimizer step.
    pub batch_size: usize,
    /// Adam first-moment decay.
    pub beta1: f64,
    /// Adam second-moment decay.
    pub beta2: f64,
    /// Adam denominator stabilizer.
    pub adam_eps: f64,
    /// Base seed; every random choice in the run derives from it.
    pub seed: u64,
    /// Mix half-images across each batch.
    pub dmix_enabled: bool,
    /// Held-out validation images per task.
    pub val_per_task: usize,
}

impl TrainConfig {
    /// Desk-scale defaults for a given task set: 64×64 images, 1300 steps
    /// of batch 4, CPU-feasible in well under fifteen minutes.
    pub fn desk(tasks: TaskSet) -> Self {
        TrainConfig {
            tasks,
            image_size: 64,
            levels: 3,
            base_channels: 10,
            blocks_per_level: 1,
            prompt_spatial: 16,
            pip_overrides: Vec::new(),
            ablation: 'e',
            alpha: 0.002,
            theta_thre: std::f64::consts::FRAC_PI_2,
            // Reference peak 5e-4 scaled up for the much smaller model and
            // short schedule used here.
            lr_peak: 2e-3,
            warmup_epochs: 1,
            total_epochs: 5,
            steps_per_epoch: 260,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            seed: 7,
            dmix_enabled: false,
            val_per_task: 6,
        }
    }

    /// Minimal configuration for smoke tests: tiny images, two steps.
    pub fn smoke(tasks: TaskSet) -> Self {
        TrainConfig {
            image_size: 16,
            levels: 2,
            base_channels: 4,
            prompt_spatial: 4,
            lr_peak: 1e-3,
            warmup_epochs: 0,
            total_epochs: 1,
            steps_per_epoch: 2,
            batch_size: 2,
            val_per_task: 1,
            seed: 11,
            ..TrainConfig::desk(tasks)
        }
    }

    /// Check invariants that the trainer depends on.
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.theta_thre) {
            return Err(Error::Config(format!("theta_thre must be in [0, pi], got {}", self.theta_thre)));
        }
        if self.total_epochs < 1 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        if self.warmup_epochs > self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs {} exceeds total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if self.steps_per_epoch < 1 || self.batch_size < 1 {
            return Err(Error::Config("steps_per_epoch and batch_size must be >= 1".into()));
        }
        if self.val_per_task < 1 {
            return Err(Error::Config("val_per_task must be >= 1".into()));
        }
        if !('a'..='e').contains(&self.ablation) {
            return Err(Error::Config(format!("ablation must be one of a-e, got '{}'", self.ablation)));
        }
        self.unet_config().validate()?;
        let stride = 1usize << (self.levels - 1);
        if self.image_size % stride != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by {stride}",
                self.image_size
            )));
        }
        Ok(())
    }

    /// The backbone configuration this run trains.
    pub fn unet_config(&self) -> UNetConfig {
        let mut cfg = UNetConfig::new(self.tasks.len());
        cfg.levels = self.levels;
        cfg.base_channels = self.base_channels;
        cfg.blocks_per_level = self.blocks_per_level;
        cfg.prompt_spatial = self.prompt_spatial;
        cfg.variant = self.ablation;
        cfg.theta_thre = self.theta_thre;
        cfg.pip_overrides = self.pip_overrides.clone();
        cfg
    }

    /// Total optimizer steps across the whole run.
    pub fn total_steps(&self) -> u64 {
        (self.total_epochs * self.steps_per_epoch) as u64
    }

    /// Steps covered by warmup.
    pub fn warmup_steps(&self) -> u64 {
        (self.warmup_epochs * self.steps_per_epoch) as u64
    }

    /// Compact numeric fingerprint stored in checkpoints so that resuming
    /// under a different configuration is refused instead of silently
    /// training a mismatched model.
    pub fn fingerprint(&self) -> Vec<f32> {
        let mut f = vec![self.tasks.len() as f32];
        f.extend(self.tasks.kinds().iter().map(|k| k.index() as f32));
        f.extend([
            self.image_size as f32,
            self.levels as f32,
            self.base_channels as f32,
            self.blocks_per_level as f32,
            self.prompt_spatial as f32,
            self.ablation as u32 as f32,
            self.alpha as f32,
            self.theta_thre as f32,
            self.lr_peak as f32,
            self.warmup_epochs as f32,
            self.total_epochs as f32,
            self.steps_per_epoch as f32,
            self.batch_size as f32,
            self.dmix_enabled as u32 as f32,
        ]);
        // Resolved per-skip prompt wiring, so tweaked ratios or expansion
        // also refuse to resume against a mismatched checkpoint.
        if let Ok(pips) = self.unet_config().pip_configs() {
            for pc in pips {
                f.push(pc.expansion as f32);
                f.push(pc.m_ratios.len() as f32);
                f.extend(pc.m_ratios.iter().map(|&r| r as f32));
            }
        }
        // Seed split into exact 16-bit chunks (f32 holds them losslessly).
        f.extend((0..4).map(|i| ((self.seed >> (16 * i)) & 0xFFFF) as f32));
        f
    }

    /// Rebuild the structural configuration from a stored fingerprint, so
    /// inference commands need nothing but the checkpoint. Optimizer
    /// moments' hyperparameters and validation-set size are not part of
    /// the fingerprint and come back as desk defaults; loss and schedule
    /// scalars round through `f32`. Use the original configuration, not
    /// this reconstruction, to continue training bit-exactly.
    pub fn from_fingerprint(fp: &[f32]) -> Result<Self> {
        fn bad(detail: &str) -> Error {
            Error::Format {
                path: String::new(),
                detail: format!("configuration fingerprint {detail}"),
            }
        }
        fn take<'a>(fp: &'a [f32], cur: &mut usize, n: usize) -> Result<&'a [f32]> {
            if *cur + n > fp.len() {
                return Err(bad("is truncated"));
            }
            let s = &fp[*cur..*cur + n];
            *cur += n;
            Ok(s)
        }
        let mut cur = 0usize;
        let t = take(fp, &mut cur, 1)?[0] as usize;
        if t == 0 || t > DegradationKind::ALL.len() {
            return Err(bad("has an invalid task count"));
        }
        let kinds = take(fp, &mut cur, t)?
            .iter()
            .map(|&v| DegradationKind::from_index(v as usize))
            .collect::<Result<Vec<_>>>()?;
        let tasks = TaskSet::new(kinds)?;
        let fields = take(fp, &mut cur, 14)?.to_vec();
        let levels = fields[1] as usize;
        if levels < 2 {
            return Err(bad("has an invalid level count"));
        }
        let mut overrides = Vec::with_capacity(levels - 1);
        for _ in 0..levels - 1 {
            let expansion = take(fp, &mut cur, 1)?[0] as usize;
            let n_ratios = take(fp, &mut cur, 1)?[0] as usize;
            if n_ratios == 0 || n_ratios > 64 {
                return Err(bad("has an invalid ratio count"));
            }
            let ratios = take(fp, &mut cur, n_ratios)?.iter().map(|&r| r as f64).collect();
            overrides.push(PipOverride { m_ratios: Some(ratios), expansion: Some(expansion) });
        }
        let seed_chunks = take(fp, &mut cur, 4)?.to_vec();
        if cur != fp.len() {
            return Err(bad("has trailing data"));
        }
        let seed = seed_chunks
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &c)| acc | ((c as u64 & 0xFFFF) << (16 * i)));

        let mut cfg = TrainConfig::desk(tasks);
        cfg.image_size = fields[0] as usize;
        cfg.levels = levels;
        cfg.base_channels = fields[2] as usize;
        cfg.blocks_per_level = fields[3] as usize;
        cfg.prompt_spatial = fields[4] as usize;
        cfg.ablation = char::from_u32(fields[5] as u32).ok_or_else(|| bad("has a bad variant tag"))?;
        cfg.alpha = fields[6] as f64;
        cfg.theta_thre = fields[7] as f64;
        cfg.lr_peak = fields[8] as f64;
        cfg.warmup_epochs = fields[9] as usize;
        cfg.total_epochs = fields[10] as usize;
        cfg.steps_per_epoch = fields[11] as usize;
        cfg.batch_size = fields[12] as usize;
        cfg.dmix_enabled = fields[13] != 0.0;
        cfg.pip_overrides = overrides;
        cfg.seed = seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── loss ──

/// `L1(pred, target) + alpha · spread`. With `alpha == 0` the spread term
/// is dropped entirely, so the value is the plain L1 mean.
pub fn total_loss<T: crate::num::Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    spread: Var,
    alpha: f64,
) -> Result<Var> {
    let diff = g.sub(pred, target)?;
    let absdiff = g.abs(diff)?;
    let l1 = g.mean(absdiff)?;
    if alpha == 0.0 {
        return Ok(l1);
    }
    let spread = g.reshape(spread, vec![])?;
    let scaled = g.mul_const(spread, fl(alpha))?;
    g.add(l1, scaled)
}

// ── records ──

/// One line of the metrics log: `epoch task metric value`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub epoch: usize,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

impl Record {
    fn new(epoch: usize, task: &str, metric: &str, value: f64) -> Self {
        Record { epoch, task: task.to_string(), metric: metric.to_string(), value }
    }

    /// Render as the canonical log line.
    pub fn line(&self) -> String {
        format!("{} {} {} {:.6}", self.epoch, self.task, self.metric, self.value)
    }
}

/// Outcome of [`Trainer::train`].
#[derive(Debug, Clone)]
pub struct TrainReport {
    /// All emitted records in order.
    pub records: Vec<Record>,
    /// Mean training loss per epoch, index 0 = first epoch of this call.
    pub epoch_losses: Vec<f64>,
}

// ── trainer ──

/// Owns the parameter store, model wiring, and optimizer state of one run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub store: ParamStore<f32>,
    pub model: UNet,
    pub adam: Adam,
    /// Completed epochs (the resume point).
    pub epochs_done: usize,
    last_lr: f64,
    last_grad_norm: f64,
}

impl Trainer {
    /// Fresh run: seeded parameter init, zeroed optimizer.
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = chacha(cfg.seed, Stream::Init, 0);
        let model = UNet::create(&mut store, "model", cfg.unet_config(), &mut rng)?;
        let adam = Adam::new(&store, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Trainer { cfg, store, model, adam, epochs_done: 0, last_lr: 0.0, last_grad_norm: 0.0 })
    }

    /// Train from `epochs_done` to `total_epochs`, emitting records through
    /// `sink` as they are produced and checkpointing each epoch when a
    /// directory is given.
    pub fn train(
        &mut self,
        checkpoint_dir: Option<&Path>,
        sink: &mut dyn FnMut(&Record),
    ) -> Result<TrainReport> {
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir)?;
        }
        let mut records = Vec::new();
        let mut epoch_losses = Vec::new();
        let emit = |r: Record, records: &mut Vec<Record>, sink: &mut dyn FnMut(&Record)| {
            sink(&r);
            records.push(r);
        };

        for epoch in self.epochs_done..self.cfg.total_epochs {
            let mean_loss = self.run_epoch(epoch).map_err(|e| self.diagnose_abort(e, epoch))?;
            epoch_losses.push(mean_loss);
            emit(Record::new(epoch + 1, "all", "loss", mean_loss), &mut records, sink);

            // Held-out validation with the true one-hot task weights.
            let outcome = self.evaluate(&OmegaPolicy::Oracle, self.cfg.val_per_task)?;
            for row in outcome.restored.rows() {
                emit(Record::new(epoch + 1, &row.task, "psnr", row.psnr_db), &mut records, sink);
                emit(Record::new(epoch + 1, &row.task, "ssim", row.ssim), &mut records, sink);
            }
            emit(
                Record::new(epoch + 1, "all", "val_psnr", outcome.average_psnr),
                &mut records,
                sink,
            );
            if let Some(min_angle) = self.min_pairwise_angle_deg()? {
                emit(Record::new(epoch + 1, "all", "min_angle_deg", min_angle), &mut records, sink);
            }

            self.epochs_done = epoch + 1;
            if let Some(dir) = checkpoint_dir {
                let path = dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
                self.save(&path)?;
                self.save(dir.join("latest.ckpt"))?;
            }
        }
        Ok(TrainReport { records, epoch_losses })
    }

    /// One epoch of optimizer steps; returns the mean per-sample loss.
    fn run_epoch(&mut self, epoch: usize) -> Result<f64> {
        let cfg = &self.cfg;
        let (h, w) = (cfg.image_size, cfg.image_size);
        let mut grads = GradBuffer::zeros(&self.store);
        let mut loss_sum = 0.0f64;
        let mut loss_n = 0usize;

        for s in 0..cfg.steps_per_epoch {
            let step_index = (epoch * cfg.steps_per_epoch + s) as u64;
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for b in 0..cfg.batch_size {
                let sample_seed =
                    derive(cfg.seed, Stream::TrainSample, step_index * cfg.batch_size as u64 + b as u64);
                batch.push(make_sample(&cfg.tasks, h, w, sample_seed)?);
            }
            if cfg.dmix_enabled && batch.len() >= 2 {
                batch = degrade::dmix(&batch, derive(cfg.seed, Stream::BatchMix, step_index));
            }

            grads.clear();
            for sample in &batch {
                let mut g = Graph::<f32>::new();
                let bd = g.bind(&self.store)?;
                let x = g.input(&sample.degraded)?;
                let target = g.input(&sample.clean)?;
                let omega = Tensor::new(vec![cfg.tasks.len()], sample.omega.clone())?;
                let pred = self.model.forward(&mut g, &bd, x, &omega, false)?;
                let spread = self.model.spread_loss(&mut g, &bd)?;
                let loss = total_loss(&mut g, pred, target, spread, cfg.alpha)?;
                let value = g.value(loss)[0] as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite { op: "train_step" });
                }
                loss_sum += value;
                loss_n += 1;
                g.backward(loss)?;
                grads.accumulate(&g)?;
            }
            grads.scale(1.0 / batch.len() as f32);

            let lr = lr_at(step_index, cfg.warmup_steps(), cfg.total_steps(), cfg.lr_peak);
            self.last_lr = lr;
            self.last_grad_norm = grads.global_norm();
            self.adam.step(&mut self.store, &grads, lr)?;
        }
        Ok(loss_sum / loss_n.max(1) as f64)
    }

    /// Print abort diagnostics for a numeric failure, then pass it on.
    fn diagnose_abort(&self, e: Error, epoch: usize) -> Error {
        if matches!(e, Error::NonFinite { .. }) {
            eprintln!(
                "training aborted at epoch {}: {e}; last lr {:.3e}, last gradient norm {:.3e}",
                epoch + 1,
                self.last_lr,
                self.last_grad_norm
            );
        }
        e
    }

    /// Minimum pairwise prompt angle in degrees across all prompt
    /// instances; `None` when the model has none.
    pub fn min_pairwise_angle_deg(&self) -> Result<Option<f64>> {
        let mut min: Option<f64> = None;
        for pip in &self.model.pips {
            for (_, _, deg) in pairwise_angles_deg(self.store.get(pip.bank))? {
                min = Some(match min {
                    Some(m) => m.min(deg),
                    None => deg,
                });
            }
        }
        Ok(min)
    }

    /// Per-instance pairwise angle tables in degrees.
    pub fn angle_tables(&self) -> Result<Vec<(String, Vec<(usize, usize, f64)>)>> {
        let mut out = Vec::new();
        for (i, pip) in self.model.pips.iter().enumerate() {
            out.push((format!("pip{i}"), pairwise_angles_deg(self.store.get(pip.bank))?));
        }
        Ok(out)
    }

    // ── persistence ──

    /// Write parameters, optimizer state, and run metadata.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut entries: Vec<(String, Tensor<f32>)> =
            self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        entries.extend(self.adam.snapshot(&self.store));
        entries.push(("meta.epoch".to_string(), Tensor::full(vec![1], self.epochs_done as f32)));
        let fp = self.cfg.fingerprint();
        entries.push(("meta.config".to_string(), Tensor::new(vec![fp.len()], fp)?));
        crate::io::checkpoint::save(path, &entries)
    }

    /// Rebuild a run from a checkpoint written by [`save`](Self::save).
    /// The configuration must match the one the checkpoint was trained
    /// with; a fingerprint mismatch is refused.
    pub fn resume(cfg: TrainConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let entries = crate::io::checkpoint::load(path)?;
        let mut trainer = Trainer::new(cfg)?;
        let fp = trainer.cfg.fingerprint();
        let stored = crate::io::checkpoint::lookup(&entries, "meta.config")
            .ok_or_else(|| format_err(path, "checkpoint has no configuration fingerprint"))?;
        if stored.data() != fp.as_slice() {
            return Err(format_err(
                path,
                "checkpoint was written by a different configuration (model/task/schedule mismatch)",
            ));
        }
        trainer
            .store
            .load_values(|name| crate::io::checkpoint::lookup(&entries, name).cloned())
            .map_err(|e| format_err(path, &e.to_string()))?;
        trainer.adam = Adam::restore(&trainer.store, trainer.cfg.beta1, trainer.cfg.beta2, trainer.cfg.adam_eps, |n| {
            crate::io::checkpoint::lookup(&entries, n).cloned()
        })
        .map_err(|e| format_err(path, &e.to_string()))?;
        let epoch = crate::io::checkpoint::lookup(&entries, "meta.epoch")
            .ok_or_else(|| format_err(path, "checkpoint has no epoch marker"))?;
        trainer.epochs_done = epoch.data()[0] as usize;
        Ok(trainer)
    }

    /// Open a checkpoint knowing nothing but its path: the structural
    /// configuration is reconstructed from the stored fingerprint. Meant
    /// for inference; to continue training bit-exactly, call
    /// [`resume`](Self::resume) with the original configuration instead.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let entries = crate::io::checkpoint::load(path)?;
        let stored = crate::io::checkpoint::lookup(&entries, "meta.config")
            .ok_or_else(|| format_err(path, "checkpoint has no restorer fingerprint"))?;
        let cfg = TrainConfig::from_fingerprint(stored.data())
            .map_err(|e| format_err(path, &e.to_string()))?;
        Trainer::resume(cfg, path)
    }

    // ── evaluation ──

    /// Evaluate on the held-out seeded validation set under a task-weight
    /// policy. The same `(task, index)` always maps to the same image, so
    /// different policies see identical inputs.
    pub fn evaluate(&self, policy: &OmegaPolicy, n_per_task: usize) -> Result<EvalOutcome> {
        evaluate(&self.model, &self.store, &self.cfg.tasks, policy, n_per_task, self.cfg.image_size, self.cfg.seed)
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), detail: detail.into() }
}

// ── inference and evaluation ──

/// Run one image through the restorer under explicit task weights,
/// clamped to the displayable range.
pub fn restore_image(
    model: &UNet,
    store: &ParamStore<f32>,
    img: &Tensor<f32>,
    omega: &[f32],
) -> Result<Tensor<f32>> {
    if omega.len() != model.cfg.tasks {
        return Err(Error::invalid(
            "restore_image",
            format!("omega has {} entries, model expects {}", omega.len(), model.cfg.tasks),
        ));
    }
    let mut g = Graph::<f32>::inference();
    let bd = g.bind(store)?;
    let x = g.input(img)?;
    let w = Tensor::new(vec![omega.len()], omega.to_vec())?;
    let out = model.forward(&mut g, &bd, x, &w, true)?;
    Ok(g.tensor(out))
}

/// How evaluation chooses ω for each sample.
pub enum OmegaPolicy<'a> {
    /// True one-hot weights for the sample's task.
    Oracle,
    /// Deliberately wrong weights: the one-hot label shifted to the next
    /// task (cyclically) — the controlled mismatch probe.
    WrongCyclic,
    /// A fixed weight vector for every sample.
    Custom(Vec<f32>),
    /// Weights predicted per image from its degraded content.
    Classifier(&'a dyn Fn(&Tensor<f32>) -> Result<Vec<f32>>),
}

/// Metrics for one evaluated image.
#[derive(Debug, Clone)]
pub struct PerImage {
    pub task: String,
    pub index: usize,
    pub psnr_restored: f64,
    pub ssim_restored: f64,
    pub psnr_degraded: f64,
    pub ssim_degraded: f64,
}

/// Per-task tables plus per-image detail for one evaluation pass.
pub struct EvalOutcome {
    /// Restored-image quality per task.
    pub restored: QualityReport,
    /// Degraded-input baseline per task.
    pub degraded: QualityReport,
    /// Every individual measurement.
    pub per_image: Vec<PerImage>,
    /// Mean restored PSNR over all images.
    pub average_psnr: f64,
    /// Mean restored SSIM over all images.
    pub average_ssim: f64,
}

/// Seed for held-out validation image `i` of task index `t`.
fn val_seed(base: u64, task_idx: usize, i: usize) -> u64 {
    derive(base, Stream::ValSample, task_idx as u64 * 100_000 + i as u64)
}

/// Evaluate a model over `n_per_task` held-out images per task.
pub fn evaluate(
    model: &UNet,
    store: &ParamStore<f32>,
    tasks: &TaskSet,
    policy: &OmegaPolicy,
    n_per_task: usize,
    image_size: usize,
    seed: u64,
) -> Result<EvalOutcome> {
    let t_count = tasks.len();
    let mut restored_rep = QualityReport::new();
    let mut degraded_rep = QualityReport::new();
    let mut per_image = Vec::with_capacity(t_count * n_per_task);
    let mut psnr_sum = 0.0;
    let mut ssim_sum = 0.0;

    for (task_idx, &kind) in tasks.kinds().iter().enumerate() {
        for i in 0..n_per_task {
            let sample = make_sample_of(tasks, kind, image_size, image_size, val_seed(seed, task_idx, i))?;
            let omega: Vec<f32> = match policy {
                OmegaPolicy::Oracle => sample.omega.clone(),
                OmegaPolicy::WrongCyclic => {
                    let mut w = vec![0.0f32; t_count];
                    w[(task_idx + 1) % t_count] = 1.0;
                    w
                }
                OmegaPolicy::Custom(w) => {
                    if w.len() != t_count {
                        return Err(Error::invalid(
                            "evaluate",
                            format!("custom omega has {} entries, need {t_count}", w.len()),
                        ));
                    }
                    w.clone()
                }
                OmegaPolicy::Classifier(f) => {
                    let w = f(&sample.degraded)?;
                    if w.len() != t_count {
                        return Err(Error::invalid(
                            "evaluate",
                            format!("classifier omega has {} entries, need {t_count}", w.len()),
                        ));
                    }
                    w
                }
            };
            let out = restore_image(model, store, &sample.degraded, &omega)?;
            let pr = psnr(&out, &sample.clean, 1.0)?;
            let sr = ssim(&out, &sample.clean)?;
            let pd = psnr(&sample.degraded, &sample.clean, 1.0)?;
            let sd = ssim(&sample.degraded, &sample.clean)?;
            restored_rep.record(kind.name(), pr, sr);
            degraded_rep.record(kind.name(), pd, sd);
            psnr_sum += pr;
            ssim_sum += sr;
            per_image.push(PerImage {
                task: kind.name().to_string(),
                index: i,
                psnr_restored: pr,
                ssim_restored: sr,
                psnr_degraded: pd,
                ssim_degraded: sd,
            });
        }
    }
    let n = (t_count * n_per_task) as f64;
    Ok(EvalOutcome {
        restored: restored_rep,
        degraded: degraded_rep,
        per_image,
        average_psnr: psnr_sum / n,
        average_ssim: ssim_sum / n,
    })
}

/// Evaluate on composite degradations: each base kind (rain or haze) is
/// applied first, then Gaussian noise at the fixed composite level. ω is
/// an even mix of the base task and the noise task when both are trained,
/// otherwise the base one-hot.
pub fn evaluate_composite(
    model: &UNet,
    store: &ParamStore<f32>,
    tasks: &TaskSet,
    bases: &[DegradationKind],
    n_per_base: usize,
    image_size: usize,
    seed: u64,
) -> Result<QualityReport> {
    let mut report = QualityReport::new();
    for &base in bases {
        let base_idx = tasks.index_of(base).ok_or_else(|| {
            Error::invalid("evaluate", format!("composite base {} not in the task set", base.name()))
        })?;
        let mut omega = vec![0.0f32; tasks.len()];
        match tasks.index_of(DegradationKind::Noise) {
            Some(noise_idx) if noise_idx != base_idx => {
                omega[base_idx] = 0.5;
                omega[noise_idx] = 0.5;
            }
            _ => omega[base_idx] = 1.0,
        }
        for i in 0..n_per_base {
            let s = derive(seed, Stream::ValSample, 500_000 + base.index() as u64 * 100_000 + i as u64);
            let clean = synth_clean(s, image_size, image_size)?;
            let degraded = apply_composite(base, &clean, s);
            let out = restore_image(model, store, &degraded, &omega)?;
            report.record(
                &format!("{}+noise", base.name()),
                psnr(&out, &clean, 1.0)?,
                ssim(&out, &clean)?,
            );
        }
    }
    Ok(report)
}

//! Degradation classifier: predicts task weights ω from a degraded image,
//! closing the control loop so restoration needs no oracle label.
//!
//! A deliberately small stack of stride-2 convolutions feeds a linear head
//! over T logits; softmax gives the soft weight vector and argmax the hard
//! label. The stem sees each image twice — raw values and their elementwise
//! square — so the pooled features can measure local second moments, the
//! high-frequency energy that tells blur from noise from streaks. Training
//! draws endless seeded samples from the same degradation operators the
//! restorer trains on, and accuracy is always measured on a held-out seed
//! stream that training never touches.

use std::path::Path;

use crate::degrade::{make_sample, make_sample_of, DegradationKind, TaskSet};
use crate::error::Error;
use crate::graph::{Bound, Graph, Var};
use crate::optim::{lr_at, Adam, GradBuffer};
use crate::params::{ParamId, ParamStore};
use crate::rng::{chacha, derive, Stream};
use crate::tensor::Tensor;
use crate::Result;

// ── configuration ──

/// Shape and schedule of one classifier run.
#[derive(Debug, Clone)]
pub struct ClassifierConfig {
    /// Ordered task set; its length is the class count T.
    pub tasks: TaskSet,
    /// Square input side in pixels.
    pub image_size: usize,
    /// Output channels of each stride-2 stage.
    pub channels: Vec<usize>,
    /// Peak learning rate.
    pub lr_peak: f64,
    /// Total optimizer steps.
    pub steps: usize,
    /// Samples per step.
    pub batch_size: usize,
    /// Base seed for init and sample draws.
    pub seed: u64,
}

impl ClassifierConfig {
    /// Desk-scale defaults: three stages, minutes of CPU training.
    pub fn desk(tasks: TaskSet) -> Self {
        ClassifierConfig {
            tasks,
            image_size: 64,
            channels: vec![8, 16, 32],
            lr_peak: 2e-3,
            steps: 2000,
            batch_size: 8,
            seed: 77,
        }
    }

    /// Tiny configuration for smoke tests.
    pub fn smoke(tasks: TaskSet) -> Self {
        ClassifierConfig {
            image_size: 16,
            channels: vec![4, 8],
            steps: 3,
            batch_size: 2,
            seed: 5,
            ..ClassifierConfig::desk(tasks)
        }
    }

    /// Check invariants the classifier depends on.
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("classifier needs at least one conv stage".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("classifier stage widths must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "classifier image_size must be >= 8, got {}",
                self.image_size
            )));
        }
        if self.steps < 1 || self.batch_size < 1 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Fingerprint stored in checkpoints to refuse mismatched loads.
    fn fingerprint(&self) -> Vec<f32> {
        let mut f = vec![self.tasks.len() as f32];
        f.extend(self.tasks.kinds().iter().map(|k| k.index() as f32));
        f.push(self.image_size as f32);
        f.push(self.channels.len() as f32);
        f.extend(self.channels.iter().map(|&c| c as f32));
        f
    }

    /// Rebuild the architecture from a stored fingerprint. Training
    /// hyperparameters are not structural and come back as desk defaults.
    pub fn from_fingerprint(fp: &[f32]) -> Result<Self> {
        let bad = || Error::Format {
            path: String::new(),
            detail: "classifier fingerprint is malformed".into(),
        };
        let t = *fp.first().ok_or_else(bad)? as usize;
        if t == 0 || fp.len() < 1 + t + 2 {
            return Err(bad());
        }
        let kinds = fp[1..1 + t]
            .iter()
            .map(|&v| DegradationKind::from_index(v as usize))
            .collect::<Result<Vec<_>>>()?;
        let image_size = fp[1 + t] as usize;
        let n = fp[2 + t] as usize;
        if fp.len() != 3 + t + n {
            return Err(bad());
        }
        let channels = fp[3 + t..].iter().map(|&c| c as usize).collect();
        let mut cfg = ClassifierConfig::desk(TaskSet::new(kinds)?);
        cfg.image_size = image_size;
        cfg.channels = channels;
        cfg.validate()?;
        Ok(cfg)
    }
}

// ── model ──

/// One stride-2 conv stage's parameters.
struct Stage {
    w: ParamId,
    b: ParamId,
}

/// The trained classifier: parameters plus wiring.
pub struct Classifier {
    pub cfg: ClassifierConfig,
    pub store: ParamStore<f32>,
    stages: Vec<Stage>,
    head_w: ParamId,
    head_b: ParamId,
}

/// Result of classifying one image.
#[derive(Debug, Clone)]
pub struct Classification {
    /// Softmax task weights, length T, summing to 1.
    pub omega: Vec<f32>,
    /// Index of the most probable task.
    pub argmax: usize,
}

/// Accuracy of one class on held-out samples.
#[derive(Debug, Clone)]
pub struct ClassAccuracy {
    pub task: String,
    pub correct: usize,
    pub total: usize,
}

impl ClassAccuracy {
    pub fn fraction(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

impl Classifier {
    /// Fresh classifier with seeded initialization.
    pub fn new(cfg: ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = chacha(cfg.seed, Stream::Init, 1);
        let mut stages = Vec::with_capacity(cfg.channels.len());
        // The stem reads 6 planes: the image and its elementwise square.
        let mut cin = 6usize;
        for (i, &cout) in cfg.channels.iter().enumerate() {
            let std = (2.0 / (cin as f64 * 9.0)).sqrt();
            stages.push(Stage {
                w: store.add(
                    format!("cls.stage{i}.w"),
                    Tensor::randn(vec![cout, cin, 3, 3], std, &mut rng),
                ),
                b: store.add(format!("cls.stage{i}.b"), Tensor::zeros(vec![cout])),
            });
            cin = cout;
        }
        let t = cfg.tasks.len();
        let std = (2.0 / cin as f64).sqrt();
        let head_w = store.add("cls.head.w".to_string(), Tensor::randn(vec![cin, t], std, &mut rng));
        let head_b = store.add("cls.head.b".to_string(), Tensor::zeros(vec![t]));
        Ok(Classifier { cfg, store, stages, head_w, head_b })
    }

    /// Stack the image with its elementwise square: convolving x² and x
    /// with local kernels yields local first and second moments, so the
    /// head can read local-variance signatures directly.
    fn featurize(img: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
        let mut data = Vec::with_capacity(2 * c * h * w);
        data.extend_from_slice(img.data());
        data.extend(img.data().iter().map(|&v| v * v));
        Tensor::new(vec![2 * c, h, w], data)
    }

    /// Logits for one `[3,H,W]` image.
    fn logits(&self, g: &mut Graph<f32>, bd: &Bound, img: &Tensor<f32>) -> Result<Var> {
        let mut x = g.input(&Self::featurize(img)?)?;
        for stage in &self.stages {
            x = g.conv3x3(x, bd[stage.w], Some(bd[stage.b]), 2)?;
            x = g.gelu(x)?;
        }
        let feat = g.global_avg_pool(x)?;
        let c = g.shape(feat)[0];
        let row = g.reshape(feat, vec![1, c])?;
        let prod = g.matmul(row, bd[self.head_w])?;
        let t = self.cfg.tasks.len();
        let flat = g.reshape(prod, vec![t])?;
        g.add(flat, bd[self.head_b])
    }

    /// Predict soft task weights and the hard label for one image.
    pub fn classify(&self, img: &Tensor<f32>) -> Result<Classification> {
        let mut g = Graph::<f32>::inference();
        let bd = g.bind(&self.store)?;
        let logits = self.logits(&mut g, &bd, img)?;
        let t = self.cfg.tasks.len();
        let row = g.reshape(logits, vec![1, t])?;
        let probs = g.softmax_rows(row)?;
        let omega = g.value(probs).to_vec();
        let argmax = omega
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap_or(0);
        Ok(Classification { omega, argmax })
    }

    /// Train with cross-entropy on endless seeded samples. Emits
    /// `(step, mean loss)` through `sink` every 50 steps and at the end;
    /// returns the final-step mean loss.
    pub fn train(&mut self, sink: &mut dyn FnMut(usize, f64)) -> Result<f64> {
        let cfg = self.cfg.clone();
        let mut adam = Adam::new(&self.store, 0.9, 0.99, 1e-8);
        let mut grads = GradBuffer::zeros(&self.store);
        let warmup = (cfg.steps / 20).max(1) as u64;
        let mut last_mean = f64::NAN;

        for step in 0..cfg.steps {
            grads.clear();
            let mut loss_sum = 0.0f64;
            for b in 0..cfg.batch_size {
                let sample_seed = derive(
                    cfg.seed,
                    Stream::TrainSample,
                    (step * cfg.batch_size + b) as u64,
                );
                let sample = make_sample(&cfg.tasks, cfg.image_size, cfg.image_size, sample_seed)?;
                let label = cfg
                    .tasks
                    .index_of(sample.label)
                    .ok_or_else(|| Error::invalid("classifier", "sample task outside the task set"))?;
                let mut g = Graph::<f32>::new();
                let bd = g.bind(&self.store)?;
                let logits = self.logits(&mut g, &bd, &sample.degraded)?;
                let loss = g.cross_entropy_logits(logits, label)?;
                let value = g.value(loss)[0] as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite { op: "classifier_step" });
                }
                loss_sum += value;
                g.backward(loss)?;
                grads.accumulate(&g)?;
            }
            grads.scale(1.0 / cfg.batch_size as f32);
            let lr = lr_at(step as u64, warmup, cfg.steps as u64, cfg.lr_peak);
            adam.step(&mut self.store, &grads, lr)?;
            last_mean = loss_sum / cfg.batch_size as f64;
            if (step + 1) % 50 == 0 || step + 1 == cfg.steps {
                sink(step + 1, last_mean);
            }
        }
        Ok(last_mean)
    }

    // ── held-out accuracy ──

    /// Seed for held-out sample `i` of task index `t`; this stream is never
    /// drawn during training.
    fn holdout_seed(&self, task_idx: usize, i: usize) -> u64 {
        derive(self.cfg.seed, Stream::ClassifierHoldout, task_idx as u64 * 100_000 + i as u64)
    }

    /// Per-class accuracy over `n_per_task` held-out samples each.
    pub fn accuracy_table(&self, n_per_task: usize) -> Result<Vec<ClassAccuracy>> {
        let mut out = Vec::with_capacity(self.cfg.tasks.len());
        for (task_idx, &kind) in self.cfg.tasks.kinds().iter().enumerate() {
            let mut correct = 0;
            for i in 0..n_per_task {
                let sample = make_sample_of(
                    &self.cfg.tasks,
                    kind,
                    self.cfg.image_size,
                    self.cfg.image_size,
                    self.holdout_seed(task_idx, i),
                )?;
                if self.classify(&sample.degraded)?.argmax == task_idx {
                    correct += 1;
                }
            }
            out.push(ClassAccuracy { task: kind.name().to_string(), correct, total: n_per_task });
        }
        Ok(out)
    }

    /// Overall held-out accuracy across all classes.
    pub fn accuracy(&self, n_per_task: usize) -> Result<f64> {
        let table = self.accuracy_table(n_per_task)?;
        let correct: usize = table.iter().map(|r| r.correct).sum();
        let total: usize = table.iter().map(|r| r.total).sum();
        Ok(correct as f64 / total.max(1) as f64)
    }

    /// Accuracy restricted to a subset of the trained tasks (for probing an
    /// easy pair such as blur vs noise).
    pub fn accuracy_for(&self, kinds: &[DegradationKind], n_per_kind: usize) -> Result<f64> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for &kind in kinds {
            let task_idx = self.cfg.tasks.index_of(kind).ok_or_else(|| {
                Error::invalid("classifier", format!("{} is not a trained task", kind.name()))
            })?;
            for i in 0..n_per_kind {
                let sample = make_sample_of(
                    &self.cfg.tasks,
                    kind,
                    self.cfg.image_size,
                    self.cfg.image_size,
                    self.holdout_seed(task_idx, i),
                )?;
                if self.classify(&sample.degraded)?.argmax == task_idx {
                    correct += 1;
                }
                total += 1;
            }
        }
        Ok(correct as f64 / total.max(1) as f64)
    }

    // ── persistence ──

    /// Write parameters and the configuration fingerprint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut entries: Vec<(String, Tensor<f32>)> =
            self.store.iter().map(|(n, t)| (n.to_string(), t.clone())).collect();
        let fp = self.cfg.fingerprint();
        entries.push(("meta.classifier".to_string(), Tensor::new(vec![fp.len()], fp)?));
        crate::io::checkpoint::save(path, &entries)
    }

    /// Rebuild from a checkpoint written by [`save`](Self::save); the
    /// configuration must match the one it was trained with.
    pub fn load(cfg: ClassifierConfig, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let entries = crate::io::checkpoint::load(path)?;
        let mut cls = Classifier::new(cfg)?;
        let fp = cls.cfg.fingerprint();
        let stored = crate::io::checkpoint::lookup(&entries, "meta.classifier")
            .ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                detail: "checkpoint has no classifier fingerprint".into(),
            })?;
        if stored.data() != fp.as_slice() {
            return Err(Error::Format {
                path: path.display().to_string(),
                detail: "checkpoint was written by a different classifier configuration".into(),
            });
        }
        cls.store
            .load_values(|name| crate::io::checkpoint::lookup(&entries, name).cloned())
            .map_err(|e| Error::Format { path: path.display().to_string(), detail: e.to_string() })?;
        Ok(cls)
    }

    /// Open a classifier checkpoint knowing nothing but its path.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let entries = crate::io::checkpoint::load(path)?;
        let stored = crate::io::checkpoint::lookup(&entries, "meta.classifier")
            .ok_or_else(|| Error::Format {
                path: path.display().to_string(),
                detail: "checkpoint has no classifier fingerprint".into(),
            })?;
        let cfg = ClassifierConfig::from_fingerprint(stored.data()).map_err(|e| Error::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        Classifier::load(cfg, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::synth_clean;

    fn tiny() -> Classifier {
        Classifier::new(ClassifierConfig::smoke(TaskSet::parse("noise,lowlight").unwrap())).unwrap()
    }

    #[test]
    fn untrained_classifier_outputs_a_valid_probability_vector() {
        let cls = tiny();
        let img = synth_clean(3, 16, 16).unwrap();
        let c = cls.classify(&img).unwrap();
        assert_eq!(c.omega.len(), 2);
        assert!(c.omega.iter().all(|&p| p >= 0.0));
        let sum: f32 = c.omega.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6, "probabilities sum to {sum}");
        assert!(c.argmax < 2);
    }

    #[test]
    fn classification_is_deterministic_for_fixed_weights_and_input() {
        let cls = tiny();
        let img = synth_clean(9, 16, 16).unwrap();
        let a = cls.classify(&img).unwrap();
        let b = cls.classify(&img).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.omega), bits(&b.omega));
        assert_eq!(a.argmax, b.argmax);
    }

    #[test]
    fn smoke_training_completes_with_finite_loss() {
        let mut cls = tiny();
        let mut logs = Vec::new();
        let final_loss = cls.train(&mut |step, loss| logs.push((step, loss))).unwrap();
        assert!(final_loss.is_finite());
        assert!(!logs.is_empty());
    }

    #[test]
    fn accuracy_table_has_one_row_per_task() {
        let cls = tiny();
        let table = cls.accuracy_table(2).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table[0].task, "noise");
        assert_eq!(table[1].task, "lowlight");
        for row in &table {
            assert_eq!(row.total, 2);
            assert!(row.correct <= row.total);
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_predictions_bit_exactly() {
        let dir = std::env::temp_dir().join("pip-classifier-roundtrip");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cls.ckpt");

        let mut cls = tiny();
        cls.train(&mut |_, _| {}).unwrap();
        cls.save(&path).unwrap();
        let loaded = Classifier::open(&path).unwrap();
        assert_eq!(loaded.cfg.channels, cls.cfg.channels);
        assert_eq!(loaded.cfg.image_size, cls.cfg.image_size);

        let img = synth_clean(4, 16, 16).unwrap();
        let a = cls.classify(&img).unwrap();
        let b = loaded.classify(&img).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.omega), bits(&b.omega));

        let mut other = cls.cfg.clone();
        other.channels = vec![4, 8, 16];
        assert!(Classifier::load(other, &path).is_err());
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn classifier_weights_plug_into_restoration_evaluation() {
        use crate::trainer::{evaluate, OmegaPolicy, TrainConfig, Trainer};
        let tasks = TaskSet::parse("noise,lowlight").unwrap();
        let trainer = Trainer::new(TrainConfig::smoke(tasks.clone())).unwrap();
        let cls = Classifier::new(ClassifierConfig::smoke(tasks.clone())).unwrap();
        let policy = |img: &Tensor<f32>| Ok(cls.classify(img)?.omega);
        let out = evaluate(
            &trainer.model,
            &trainer.store,
            &tasks,
            &OmegaPolicy::Classifier(&policy),
            1,
            trainer.cfg.image_size,
            trainer.cfg.seed,
        )
        .unwrap();
        assert_eq!(out.per_image.len(), 2);
        assert!(out.average_psnr.is_finite());
    }

    #[test]
    fn poisoned_parameters_abort_with_the_numeric_exit_code() {
        let mut cls = tiny();
        let id = cls.store.find("cls.stage0.w").unwrap();
        cls.store.get_mut(id).data_mut()[0] = f32::NAN;
        let err = cls.train(&mut |_, _| {}).err().unwrap();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn config_invariants_are_enforced() {
        let tasks = TaskSet::parse("noise,lowlight").unwrap();
        let good = ClassifierConfig::smoke(tasks);
        good.validate().unwrap();
        let mut bad = good.clone();
        bad.channels = vec![];
        assert!(bad.validate().is_err());
        let mut bad = good.clone();
        bad.channels = vec![8, 0];
        assert!(bad.validate().is_err());
        let mut bad = good;
        bad.image_size = 4;
        assert!(bad.validate().is_err());
    }
}

//! Optimizer, learning-rate schedule and the training loop.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{Checkpoint, TensorEntry, TensorKind};
use crate::data::{augment, make_batch, AugmentConfig, BitemporalPair};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{total_loss, LossReport};
use crate::metrics::{ConfusionCounts, Metrics};
use crate::model::{Ablation, ModelConfig, RctNet};
use crate::nn::{Ctx, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub poly_power: f64,
    pub seed: u64,
    /// Validation interval in iterations; 0 evaluates only at the end.
    pub eval_every: usize,
    pub checkpoint_dir: PathBuf,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 5e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            batch_size: 32,
            max_iters: 50_000,
            poly_power: 0.9,
            seed: 0,
            eval_every: 1000,
            checkpoint_dir: PathBuf::from("checkpoints"),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// 64x64 patches, batch 8, 2000 iterations.
    pub fn desk() -> Self {
        Self {
            batch_size: 8,
            max_iters: 2000,
            eval_every: 250,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::config("train.lr0", "must be positive"));
        }
        if !(self.poly_power > 0.0) {
            return Err(Error::config("train.poly_power", "must be positive"));
        }
        if self.max_iters == 0 {
            return Err(Error::config("train.max_iters", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        for (name, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(name, "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        self.augment.validate()
    }
}

/// `lr0 * (1 - iter / max_iters) ^ poly_power`.
pub fn poly_lr(iter: usize, cfg: &TrainConfig) -> Result<f64> {
    if iter > cfg.max_iters {
        return Err(Error::InvalidInput(format!("iteration {iter} beyond max_iters {}", cfg.max_iters)));
    }
    Ok(cfg.lr0 * (1.0 - iter as f64 / cfg.max_iters as f64).powf(cfg.poly_power))
}

/// Sets the component switches of a model configuration.
pub fn apply_ablation(model: &ModelConfig, ablation: Ablation) -> ModelConfig {
    ModelConfig {
        ablation,
        ..model.clone()
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: &TrainConfig) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; parameters without a gradient only decay.
    pub fn update(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.step += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.step as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.step as i32));
        let (lr_t, eps, decay) = (T::of(lr), T::of(self.eps), T::of(lr * self.weight_decay));
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let data = p.value.data_mut();
            for x in data.iter_mut() {
                *x -= decay * *x;
            }
            let Some(g) = &grads[i] else { continue };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((x, &gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *x -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Gradient of the total loss for one batch, applied with the given rate.
/// Returns the loss breakdown.
pub fn train_step<T: Scalar>(
    model: &mut RctNet<T>,
    opt: &mut AdamW<T>,
    t1: &Tensor<T>,
    t2: &Tensor<T>,
    g: &Tensor<T>,
    lr: f64,
) -> Result<LossReport> {
    let (report, grads, updates) = {
        let graph = Graph::new();
        let ctx = Ctx::new(&graph, model.store(), true);
        let out = model.forward(&ctx, graph.constant(t1.clone()), graph.constant(t2.clone()))?;
        let (loss, report) = total_loss(&out.predictions, g)?;
        if !report.total.is_finite() {
            return Ok(report);
        }
        let grads = graph.backward(loss);
        (report, ctx.param_grads(&grads), ctx.take_stat_updates())
    };
    let store = model.store_mut();
    store.apply_stat_updates(updates);
    opt.update(store, &grads, lr);
    Ok(report)
}

/// Micro-averaged confusion counts of the `p1` change map over `pairs`.
pub fn evaluate<T: Scalar>(model: &RctNet<T>, pairs: &[BitemporalPair], batch_size: usize) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::default();
    for chunk in pairs.chunks(batch_size.max(1)) {
        let b = make_batch(chunk)?;
        let pred = model.predict(&b.t1.cast(), &b.t2.cast())?;
        for (i, p) in chunk.iter().enumerate() {
            counts.accumulate(pred.change_map_of(i), &p.mask_u8())?;
        }
    }
    Ok(counts)
}

/// Snapshot of a model and optimizer.
pub fn make_checkpoint<T: Scalar>(
    model: &RctNet<T>,
    opt: &AdamW<T>,
    iteration: usize,
    best_f1: Option<f64>,
    config_hash: &str,
) -> Checkpoint<T> {
    let store = model.store();
    let entry = |name: &str, kind, t: &Tensor<T>| {
        (
            TensorEntry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
            },
            t.clone(),
        )
    };
    let mut tensors = Vec::new();
    for p in store.params() {
        tensors.push(entry(&p.name, TensorKind::Param, &p.value));
    }
    for b in store.buffers() {
        tensors.push(entry(&b.name, TensorKind::Buffer, &b.value));
    }
    for (p, m) in store.params().iter().zip(&opt.m) {
        tensors.push(entry(&p.name, TensorKind::AdamM, m));
    }
    for (p, v) in store.params().iter().zip(&opt.v) {
        tensors.push(entry(&p.name, TensorKind::AdamV, v));
    }
    Checkpoint {
        model: model.config().clone(),
        iteration,
        optimizer_step: opt.step,
        best_f1,
        config_hash: config_hash.to_string(),
        tensors,
    }
}

fn restore_into<T: Scalar>(dst: &mut [crate::nn::Named<T>], src: Vec<&(TensorEntry, Tensor<T>)>, what: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!("{what}: {} stored, model has {}", src.len(), dst.len())));
    }
    for (d, (e, t)) in dst.iter_mut().zip(src) {
        if d.name != e.name || d.value.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{what}: `{}` {:?} does not match model `{}` {:?}",
                e.name,
                t.shape(),
                d.name,
                d.value.shape()
            )));
        }
        d.value = t.clone();
    }
    Ok(())
}

/// Rebuilds the model stored in a checkpoint.
pub fn model_from_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>) -> Result<RctNet<T>> {
    let mut model = RctNet::new(&ckpt.model, 0)?;
    load_weights(&mut model, ckpt)?;
    Ok(model)
}

/// Copies parameters and buffers from a checkpoint into a matching model.
pub fn load_weights<T: Scalar>(model: &mut RctNet<T>, ckpt: &Checkpoint<T>) -> Result<()> {
    if model.config() != &ckpt.model {
        return Err(Error::Checkpoint("model configuration differs from checkpoint".into()));
    }
    let store = model.store_mut();
    restore_into(store.params_mut(), ckpt.tensors_of(TensorKind::Param).collect(), "parameters")?;
    restore_into(store.buffers_mut(), ckpt.tensors_of(TensorKind::Buffer).collect(), "buffers")
}

/// Restores optimizer moments from a checkpoint.
pub fn load_optimizer<T: Scalar>(opt: &mut AdamW<T>, ckpt: &Checkpoint<T>) -> Result<()> {
    let pick = |kind| -> Vec<Tensor<T>> { ckpt.tensors_of(kind).map(|(_, t)| t.clone()).collect() };
    let (m, v) = (pick(TensorKind::AdamM), pick(TensorKind::AdamV));
    if m.len() != opt.m.len() || v.len() != opt.v.len() {
        return Err(Error::Checkpoint("optimizer state does not match model".into()));
    }
    for (dst, src) in opt.m.iter().zip(&m).chain(opt.v.iter().zip(&v)) {
        if dst.shape() != src.shape() {
            return Err(Error::Checkpoint("optimizer moment shape mismatch".into()));
        }
    }
    opt.m = m;
    opt.v = v;
    opt.step = ckpt.optimizer_step;
    Ok(())
}

/// Events reported while training.
#[derive(Clone, Debug)]
pub enum TrainEvent<'a> {
    Step { iter: usize, lr: f64, loss: &'a LossReport },
    Eval { iter: usize, metrics: &'a Metrics, best: bool },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_iteration: usize,
    pub best_f1: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub latest_checkpoint: PathBuf,
    pub losses: Vec<f64>,
    pub evals: Vec<(usize, Metrics)>,
}

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Per-iteration generator, so a resumed run draws the same batches.
fn iteration_rng(seed: u64, iter: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64 + 1);
    rng
}

/// Indices of the batch drawn at `iter` (without replacement within a batch).
pub fn batch_indices(seed: u64, iter: usize, len: usize, batch: usize) -> Vec<usize> {
    let mut rng = iteration_rng(seed, iter);
    sample(&mut rng, len, batch.min(len)).into_vec()
}

struct Log {
    out: BufWriter<File>,
    path: PathBuf,
}

impl Log {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(append)
            .write(true)
            .truncate(!append)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.into(),
        })
    }

    fn record(&mut self, value: serde_json::Value) -> Result<()> {
        writeln!(self.out, "{value}").map_err(|e| Error::io(&self.path, e))
    }

    fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Runs `cfg.max_iters` steps (or the remainder after `resume`), validating
/// on `val` every `cfg.eval_every` steps and at the end. Writes
/// `best.ckpt`, `latest.ckpt` and a JSON-lines log to `cfg.checkpoint_dir`.
pub fn train_loop<T: Scalar>(
    model: &mut RctNet<T>,
    train: &[BitemporalPair],
    val: &[BitemporalPair],
    cfg: &TrainConfig,
    config_hash: &str,
    resume: Option<&Checkpoint<T>>,
    mut on_event: impl FnMut(TrainEvent<'_>),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let dir = &cfg.checkpoint_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut opt = AdamW::new(model.store(), cfg);
    let mut start = 0;
    let mut best_f1 = None;
    if let Some(ckpt) = resume {
        if ckpt.config_hash != config_hash {
            return Err(Error::Checkpoint("resume checkpoint was written for a different configuration".into()));
        }
        load_weights(model, ckpt)?;
        load_optimizer(&mut opt, ckpt)?;
        start = ckpt.iteration;
        best_f1 = ckpt.best_f1;
    }
    let mut log = Log::open(&dir.join(TRAIN_LOG), resume.is_some())?;
    log.record(json!({
        "event": "start",
        "iter": start,
        "ablation": model.config().ablation.label(),
        "use_csa": model.config().ablation.use_csa,
        "use_msf": model.config().ablation.use_msf,
        "use_esa": model.config().ablation.use_esa,
        "params": model.num_params(),
        "config_hash": config_hash,
    }))?;

    let best_path = dir.join(BEST_CHECKPOINT);
    let latest_path = dir.join(LATEST_CHECKPOINT);
    let mut losses = Vec::new();
    let mut evals = Vec::new();
    for iter in start..cfg.max_iters {
        let lr = poly_lr(iter, cfg)?;
        let mut rng = iteration_rng(cfg.seed, iter);
        let idx = sample(&mut rng, train.len(), cfg.batch_size.min(train.len())).into_vec();
        let items: Vec<BitemporalPair> = idx.iter().map(|&i| augment(&train[i], &cfg.augment, &mut rng)).collect();
        let batch = make_batch(&items)?;
        let report = train_step(model, &mut opt, &batch.t1.cast(), &batch.t2.cast(), &batch.g.cast(), lr)?;
        if !report.total.is_finite() {
            log.record(json!({"event": "diverged", "iter": iter, "total": report.total.to_string()}))?;
            log.flush()?;
            return Err(Error::Diverged {
                iter,
                loss: report.total,
            });
        }
        log.record(json!({
            "iter": iter,
            "lr": lr,
            "bce": report.bce_per_stage,
            "dice": report.dice_per_stage,
            "total": report.total,
        }))?;
        losses.push(report.total);
        on_event(TrainEvent::Step {
            iter,
            lr,
            loss: &report,
        });

        let done = iter + 1;
        let due = done == cfg.max_iters || (cfg.eval_every > 0 && done % cfg.eval_every == 0);
        if due {
            if !val.is_empty() {
                let metrics = evaluate(model, val, cfg.batch_size)?.metrics();
                let improved = best_f1.is_none_or(|b| metrics.f1 > b);
                if improved {
                    best_f1 = Some(metrics.f1);
                    make_checkpoint(model, &opt, done, best_f1, config_hash).save(&best_path)?;
                }
                log.record(json!({"event": "eval", "iter": done, "metrics": metrics, "best": improved}))?;
                on_event(TrainEvent::Eval {
                    iter: done,
                    metrics: &metrics,
                    best: improved,
                });
                evals.push((done, metrics));
            }
            make_checkpoint(model, &opt, done, best_f1, config_hash).save(&latest_path)?;
            log.flush()?;
        }
    }
    log.flush()?;
    Ok(TrainOutcome {
        final_iteration: cfg.max_iters,
        best_f1,
        best_checkpoint: best_path.is_file().then_some(best_path),
        latest_checkpoint: latest_path,
        losses,
        evals,
    })
}

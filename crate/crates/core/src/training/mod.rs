//! Three-phase adversarial training loop, evaluation and linear probes.

mod data;
mod optim;
mod probe;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{is_held_out, Batch, DomainData, ExampleRef, TrainingSet};
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};
pub use probe::{linear_probe, ProbeConfig};

use crate::datagen::{DatasetManifest, Normalization};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossWeights};
use crate::model::{Checkpoint, Ctx, Domain2VecNet, ModelScale, NetworkSpec};
use crate::seed;

/// Parameter groups touched by the supervised phase.
const SUPERVISED: [&str; 6] = ["g.", "ds.", "cs.", "c.", "dc.", "r."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub schema_version: u32,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Domains to train on; all manifest domains when unset.
    pub domain_ids: Option<Vec<u32>>,
    /// Domains whose class labels may be used; all when unset.
    pub labeled_domain_ids: Option<Vec<u32>>,
    pub device: String,
    pub scale: ModelScale,
    /// MINE statistic updates per step.
    pub mine_inner_steps: usize,
    /// Stop after this many steps in total.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schema_version: 1,
            weights: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            batch_size: 64,
            epochs: 10,
            seed: 0,
            domain_ids: None,
            labeled_domain_ids: None,
            device: "cpu".into(),
            scale: ModelScale::Desk,
            mine_inner_steps: 1,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.optimizer.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if self.device != "cpu" {
            return Err(Error::Config(format!(
                "unsupported device {:?}; only \"cpu\" is available",
                self.device
            )));
        }
        Ok(())
    }
}

pub(crate) fn finite(name: &str, t: &Tensor) -> Result<f64> {
    let v = losses::scalar(t)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric {
            component: name.to_string(),
        })
    }
}

/// Running mean of loss breakdowns.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct RunningLoss {
    pub sum: LossBreakdown,
    pub count: u64,
}

impl RunningLoss {
    fn add(&mut self, b: &LossBreakdown) {
        let s = &mut self.sum;
        s.ce_class += b.ce_class;
        s.ent_class += b.ent_class;
        s.ce_domain += b.ce_domain;
        s.ent_domain += b.ent_domain;
        s.rec += b.rec;
        s.kl += b.kl;
        s.mi += b.mi;
        s.total += b.total;
        self.count += 1;
    }

    pub fn mean(&self) -> LossBreakdown {
        let n = self.count.max(1) as f64;
        let s = &self.sum;
        LossBreakdown {
            ce_class: s.ce_class / n,
            ent_class: s.ent_class / n,
            ce_domain: s.ce_domain / n,
            ent_domain: s.ent_domain / n,
            rec: s.rec / n,
            kl: s.kl / n,
            mi: s.mi / n,
            total: s.total / n,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainMeta {
    config: TrainConfig,
    step: u64,
    epoch: u64,
    rng: ChaCha8Rng,
    opt_steps: BTreeMap<String, u64>,
    normalization: Option<Normalization>,
    running: RunningLoss,
}

/// Model, optimizer and RNG of one training run.
pub struct Trainer {
    pub net: Domain2VecNet,
    pub config: TrainConfig,
    opt: Optimizer,
    rng: ChaCha8Rng,
    pub step: u64,
    pub epoch: u64,
    pub running: RunningLoss,
    pub normalization: Option<Normalization>,
}

impl Trainer {
    pub fn new(config: TrainConfig, spec: &NetworkSpec) -> Result<Self> {
        config.validate()?;
        Self::with_net(config.clone(), Domain2VecNet::new(spec, config.seed, DType::F32)?)
    }

    pub fn with_net(config: TrainConfig, net: Domain2VecNet) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            opt: Optimizer::new(config.optimizer),
            rng: seed::rng(config.seed, seed::stream::TRAIN),
            net,
            config,
            step: 0,
            epoch: 0,
            running: RunningLoss::default(),
            normalization: None,
        })
    }

    pub fn for_manifest(config: TrainConfig, manifest: &DatasetManifest) -> Result<Self> {
        let spec = NetworkSpec::for_scale(config.scale, manifest.num_classes(), manifest.num_domains());
        let mut t = Self::new(config, &spec)?;
        t.normalization = Some(manifest.normalization);
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let (extra, opt_steps) = self.opt.export("opt.");
        let meta = TrainMeta {
            config: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            rng: self.rng.clone(),
            opt_steps,
            normalization: self.normalization,
            running: self.running,
        };
        Checkpoint::capture(&self.net, extra, serde_json::to_value(meta).expect("meta serializes"))
    }

    /// Restores a run so that continuing it reproduces the uninterrupted trajectory.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let meta: TrainMeta =
            serde_json::from_value(ck.meta.clone()).map_err(|e| Error::Config(format!("checkpoint carries no training state: {e}")))?;
        let opt = Optimizer::import(meta.config.optimizer, "opt.", &ck.extra("opt."), &meta.opt_steps)?;
        Ok(Self {
            net: ck.to_net()?,
            config: meta.config,
            opt,
            rng: meta.rng,
            step: meta.step,
            epoch: meta.epoch,
            running: meta.running,
            normalization: meta.normalization,
        })
    }

    /// One step: supervised update, frozen-adversary entropy update, then the MI game.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossBreakdown> {
        let mut b = LossBreakdown::default();
        let f_g = self.supervised_phase(batch, &mut b)?;
        self.adversarial_phase(&f_g, &mut b)?;
        self.mine_phase(&f_g, &mut b)?;
        let b = b.compose(&self.config.weights);
        self.step += 1;
        self.running.add(&b);
        Ok(b)
    }

    /// Class, domain and reconstruction objectives. Returns the detached generator features.
    pub fn supervised_phase(&mut self, batch: &Batch, b: &mut LossBreakdown) -> Result<Tensor> {
        let w = self.config.weights;
        let net = &self.net;
        let mut ctx = Ctx::train(&mut self.rng);
        let out = net.forward(&batch.images, &mut ctx)?;
        let mut terms: Vec<Tensor> = Vec::new();
        if batch.labeled_count > 0 {
            let probs = out.class_probs.index_select(&batch.labeled_rows, 0)?;
            let ce = losses::cross_entropy(&probs, &batch.labels)?;
            b.ce_class = finite("ce_class", &ce)?;
            if w.w1 > 0.0 {
                terms.push((ce * w.w1)?);
            }
        }
        let ce_d = losses::cross_entropy(&out.domain_probs, &batch.domains)?;
        b.ce_domain = finite("ce_domain", &ce_d)?;
        if w.w2 > 0.0 {
            terms.push((ce_d * w.w2)?);
        }
        let rec = losses::reconstruction(&out.f_g.detach(), &out.reconstruction)?;
        let kl = losses::kl_standard_normal(&Tensor::cat(&[&out.f_ds, &out.f_cs], 1)?)?;
        b.rec = finite("rec", &rec)?;
        b.kl = finite("kl", &kl)?;
        if w.w3 > 0.0 {
            terms.push(((rec + kl)? * w.w3)?);
        }
        if let Some(loss) = sum(terms)? {
            let grads = loss.backward()?;
            self.opt.step(net.store().group(&SUPERVISED), &grads)?;
        }
        Ok(out.f_g.detach())
    }

    /// Pushes DC(f_cs) and C(f_ds) toward uniform. Only `cs.` and `ds.` move;
    /// DC and C stay frozen.
    pub fn adversarial_phase(&mut self, f_g: &Tensor, b: &mut LossBreakdown) -> Result<()> {
        let w = self.config.weights;
        let net = &self.net;
        let (ac, ad) = (w.w1 * w.alpha_class, w.w2 * w.alpha_domain);
        let mut ctx = Ctx::train_frozen_stats(&mut self.rng);
        let f_ds = net.ds.forward(f_g, &mut ctx)?;
        let f_cs = net.cs.forward(f_g, &mut ctx)?;
        let ent_c = losses::neg_entropy(&net.domain_classify(&f_cs)?)?;
        let ent_d = losses::neg_entropy(&net.classify(&f_ds, &mut ctx)?)?;
        b.ent_class = finite("ent_class", &ent_c)?;
        b.ent_domain = finite("ent_domain", &ent_d)?;
        let mut terms = Vec::new();
        let mut heads = Vec::new();
        if ac > 0.0 {
            terms.push((ent_c * ac)?);
            heads.push("cs.");
        }
        if ad > 0.0 {
            terms.push((ent_d * ad)?);
            heads.push("ds.");
        }
        if let Some(loss) = sum(terms)? {
            let grads = loss.backward()?;
            self.opt.step(net.store().group(&heads), &grads)?;
        }
        Ok(())
    }

    /// The statistic network ascends the MI estimate, then the heads descend it. No-op for `w4 = 0`.
    pub fn mine_phase(&mut self, f_g: &Tensor, b: &mut LossBreakdown) -> Result<()> {
        let w = self.config.weights;
        if w.w4 <= 0.0 {
            return Ok(());
        }
        let net = &self.net;
        let mut ctx = Ctx::train_frozen_stats(&mut self.rng);
        let f_ds = net.ds.forward(f_g, &mut ctx)?;
        let f_cs = net.cs.forward(f_g, &mut ctx)?;
        let (p, q) = (f_ds.detach(), f_cs.detach());
        for _ in 0..self.config.mine_inner_steps {
            let mi = mine_estimate(net, &p, &q, &mut self.rng)?;
            finite("mi", &mi)?;
            let grads = mi.neg()?.backward()?;
            self.opt.step(net.store().group(&["t."]), &grads)?;
        }
        let mi = mine_estimate(net, &f_ds, &f_cs, &mut self.rng)?;
        b.mi = finite("mi", &mi)?;
        let grads = (mi * w.w4)?.backward()?;
        self.opt.step(net.store().group(&["ds.", "cs."]), &grads)?;
        Ok(())
    }

    /// Runs one epoch over `set`, calling `log` after each step.
    pub fn train_epoch(&mut self, set: &TrainingSet, mut log: impl FnMut(&Self, &LossBreakdown) -> Result<()>) -> Result<()> {
        let order = set.epoch_order(&mut self.rng);
        self.running = RunningLoss::default();
        for rows in order.chunks(self.config.batch_size) {
            if rows.len() < 2 || self.config.max_steps.is_some_and(|m| self.step >= m) {
                break;
            }
            let batch = set.batch(rows, self.net.dtype())?;
            let b = self.train_step(&batch)?;
            log(self, &b)?;
        }
        self.epoch += 1;
        Ok(())
    }
}

fn sum(terms: Vec<Tensor>) -> Result<Option<Tensor>> {
    let mut it = terms.into_iter();
    let Some(mut acc) = it.next() else { return Ok(None) };
    for t in it {
        acc = (acc + t)?;
    }
    Ok(Some(acc))
}

/// MI estimate with marginal samples from a within-batch shuffle of `q`.
pub fn mine_estimate(net: &Domain2VecNet, p: &Tensor, q: &Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let n = p.dim(0)?;
    let mut perm: Vec<u32> = (0..n as u32).collect();
    perm.shuffle(rng);
    let perm = Tensor::new(perm, p.device())?;
    let joint = net.mine_statistic(p, q)?;
    let marginal = net.mine_statistic(p, &q.index_select(&perm, 0)?)?;
    losses::mine_mi(&joint, &marginal)
}

#[derive(Debug, Clone, Serialize)]
struct LogLine<'a> {
    epoch: u64,
    step: u64,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub last_epoch: LossBreakdown,
    pub steps: u64,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.d2v";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Trains on `manifest` and writes a checkpoint per epoch plus a JSON-lines log to `out`.
/// With `resume`, continues a previous run from its checkpoint.
pub fn fit(config: &TrainConfig, manifest: &DatasetManifest, out: &Path, resume: Option<&Path>) -> Result<FitOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(&Checkpoint::load(p)?)?,
        None => Trainer::for_manifest(config.clone(), manifest)?,
    };
    let set = TrainingSet::from_manifest(
        manifest,
        trainer.config.domain_ids.as_deref(),
        trainer.config.labeled_domain_ids.as_deref(),
    )?;
    let cfg_path = out.join("train_config.json");
    let cfg_text = serde_json::to_string_pretty(&trainer.config).expect("config serializes");
    std::fs::write(&cfg_path, cfg_text).map_err(|e| Error::io(&cfg_path, e))?;

    let log_path = out.join(LOG_FILE);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let ck_path = out.join(CHECKPOINT_FILE);
    while (trainer.epoch as usize) < trainer.config.epochs {
        if trainer.config.max_steps.is_some_and(|m| trainer.step >= m) {
            break;
        }
        trainer.train_epoch(&set, |t, b| {
            let line = serde_json::to_string(&LogLine {
                epoch: t.epoch,
                step: t.step,
                loss: b,
            })
            .expect("log line serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))
        })?;
        let ck = trainer.checkpoint()?;
        ck.save(&out.join(format!("checkpoint_epoch{:03}.d2v", trainer.epoch)))?;
        ck.save(&ck_path)?;
        log::info!(
            "epoch {} step {} total {:.4} ce_class {:.4}",
            trainer.epoch,
            trainer.step,
            trainer.running.mean().total,
            trainer.running.mean().ce_class
        );
    }
    if !ck_path.exists() {
        trainer.checkpoint()?.save(&ck_path)?;
    }
    Ok(FitOutcome {
        checkpoint: ck_path,
        log: log_path,
        last_epoch: trainer.running.mean(),
        steps: trainer.step,
    })
}

/// Class predictions (`argmax C(D_cs(G(x)))`) for the listed examples.
pub fn predict(net: &Domain2VecNet, data: &DomainData, indices: &[usize], norm: &Normalization) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(256) {
        let x = data.images(chunk, norm, net.dtype())?;
        let mut ctx = Ctx::eval();
        let g = net.generator(&x, &mut ctx)?;
        let probs = net.classify(&net.cs.forward(&g.f_g, &mut ctx)?, &mut ctx)?;
        out.extend(probs.argmax(1)?.to_vec1::<u32>()?);
    }
    Ok(out)
}

/// Top-1 accuracy on the domain's held-out split.
pub fn evaluate_accuracy(net: &Domain2VecNet, data: &DomainData, norm: &Normalization) -> Result<f64> {
    if data.held_out.is_empty() {
        return Err(Error::Precondition(format!("domain {} has no held-out examples", data.domain_id)));
    }
    let pred = predict(net, data, &data.held_out, norm)?;
    let mut correct = 0usize;
    for (&i, &p) in data.held_out.iter().zip(&pred) {
        if u32::from(data.held_out_label(i)?) == p {
            correct += 1;
        }
    }
    Ok(correct as f64 / pred.len() as f64)
}

/// `(f_ds, f_cs)` in inference mode for the listed examples, as `n x latent` tensors.
pub fn latents(net: &Domain2VecNet, data: &DomainData, indices: &[usize], norm: &Normalization) -> Result<(Tensor, Tensor)> {
    let (mut ds, mut cs) = (Vec::new(), Vec::new());
    for chunk in indices.chunks(256) {
        let x = data.images(chunk, norm, net.dtype())?;
        let mut ctx = Ctx::eval();
        let g = net.generator(&x, &mut ctx)?;
        ds.push(net.ds.forward(&g.f_g, &mut ctx)?.detach());
        cs.push(net.cs.forward(&g.f_g, &mut ctx)?.detach());
    }
    Ok((Tensor::cat(&ds, 0)?, Tensor::cat(&cs, 0)?))
}

#[cfg(test)]
mod tests;

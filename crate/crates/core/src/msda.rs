//! Multi-source adaptation with per-source weights derived from domain
//! distances: moment matching (`alpha`) or adversarial alignment (`beta`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{DatasetManifest, Normalization};
use crate::embedding::EmbeddingSet;
use crate::error::{Error, Result};
use crate::losses;
use crate::model::layers::{leaky_relu, Linear};
use crate::model::{Checkpoint, Ctx, Domain2VecNet, ModelScale, NetworkSpec, ParamStore};
use crate::seed;
use crate::training::{evaluate_accuracy, finite, DomainData, Optimizer, OptimizerConfig};

/// Parameters adapted on the task network.
const NET_GROUPS: [&str; 3] = ["g.", "cs.", "c."];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceWeights {
    pub weights: Vec<f64>,
    /// `None` for uniform weights.
    pub temperature: Option<f64>,
}

/// Softmax over negative distances: `w_i = exp(-d_i / tau) / sum_j exp(-d_j / tau)`.
pub fn distance_to_weights(distances: &[f64], tau: f64) -> Result<SourceWeights> {
    if distances.is_empty() {
        return Err(Error::Precondition("no source distances".into()));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Precondition(format!("temperature must be positive, got {tau}")));
    }
    if let Some(d) = distances.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        return Err(Error::Precondition(format!("distance {d} is not a finite non-negative number")));
    }
    let dmin = distances.iter().copied().fold(f64::INFINITY, f64::min);
    let e: Vec<f64> = distances.iter().map(|d| (-(d - dmin) / tau).exp()).collect();
    let z: f64 = e.iter().sum();
    Ok(SourceWeights {
        weights: e.iter().map(|v| v / z).collect(),
        temperature: Some(tau),
    })
}

pub fn uniform_weights(n: usize) -> SourceWeights {
    SourceWeights {
        weights: vec![1.0 / n as f64; n],
        temperature: None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferTask {
    pub name: String,
    pub source_domain_ids: Vec<u32>,
    pub target_domain_id: u32,
    /// Source-to-target distances, in source order. Filled from an embedding when absent.
    #[serde(default)]
    pub distances: Option<Vec<f64>>,
}

impl TransferTask {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let task: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.source_domain_ids.is_empty() {
            return Err(Error::Precondition(format!("task {} has no sources", self.name)));
        }
        if self.source_domain_ids.contains(&self.target_domain_id) {
            return Err(Error::Precondition(format!(
                "task {}: target {} is also a source",
                self.name, self.target_domain_id
            )));
        }
        if let Some(d) = &self.distances {
            if d.len() != self.source_domain_ids.len() {
                return Err(Error::dim(format!("{} distances", self.source_domain_ids.len()), d.len()));
            }
        }
        Ok(())
    }

    /// Fills `distances` from a domain embedding.
    pub fn with_embedding(mut self, set: &EmbeddingSet) -> Result<Self> {
        let d = self
            .source_domain_ids
            .iter()
            .map(|&s| set.distance(s, self.target_domain_id))
            .collect::<Result<Vec<_>>>()?;
        self.distances = Some(d);
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Alpha,
    Beta,
    UniformAlpha,
    UniformBeta,
    SourceOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Alpha,
        Variant::Beta,
        Variant::UniformAlpha,
        Variant::UniformBeta,
        Variant::SourceOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Alpha => "alpha",
            Variant::Beta => "beta",
            Variant::UniformAlpha => "uniform-alpha",
            Variant::UniformBeta => "uniform-beta",
            Variant::SourceOnly => "source-only",
        }
    }

    pub fn distance_weighted(self) -> bool {
        matches!(self, Variant::Alpha | Variant::Beta)
    }

    fn alignment(self) -> Alignment {
        match self {
            Variant::Alpha | Variant::UniformAlpha => Alignment::Moments,
            Variant::Beta | Variant::UniformBeta => Alignment::Adversarial,
            Variant::SourceOnly => Alignment::None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Alignment {
    None,
    Moments,
    Adversarial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MsdaConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub scale: ModelScale,
    pub steps: usize,
    /// Examples drawn from each source and from the target per step.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub temperature: f64,
    /// Scale of the alignment terms relative to the class loss.
    pub adaptation_weight: f64,
    /// Also match moments between every pair of sources.
    pub pairwise_sources: bool,
    pub discriminator_hidden: usize,
}

impl Default for MsdaConfig {
    fn default() -> Self {
        Self {
            schema_version: 1,
            seed: 0,
            scale: ModelScale::Desk,
            steps: 300,
            batch_size: 32,
            optimizer: OptimizerConfig {
                lr: 1e-3,
                ..OptimizerConfig::default()
            },
            temperature: 1.0,
            adaptation_weight: 1.0,
            pairwise_sources: false,
            discriminator_hidden: 64,
        }
    }
}

impl MsdaConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("steps and batch_size must be positive".into()));
        }
        if !(self.temperature > 0.0 && self.adaptation_weight >= 0.0) {
            return Err(Error::Config(
                "temperature must be positive and adaptation_weight non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Per-step record; `align` holds each source's unweighted alignment loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsdaLogLine {
    pub step: usize,
    pub class: f64,
    pub align: Vec<Option<f64>>,
    pub discriminator: Option<f64>,
}

/// Squared distance between batch means plus between per-dimension variances,
/// both averaged over dimensions.
pub fn moment_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ma, mb) = (a.mean_keepdim(0)?, b.mean_keepdim(0)?);
    let va = a.broadcast_sub(&ma)?.sqr()?.mean_keepdim(0)?;
    let vb = b.broadcast_sub(&mb)?.sqr()?.mean_keepdim(0)?;
    Ok(((ma - mb)?.sqr()?.mean_all()? + (va - vb)?.sqr()?.mean_all()?)?)
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

struct Discriminator {
    fc0: Linear,
    fc1: Linear,
}

impl Discriminator {
    fn logits(&self, f: &Tensor) -> Result<Tensor> {
        self.fc1.forward(&leaky_relu(&self.fc0.forward(f)?, 0.2)?)
    }
}

/// Adaptation state for one task and variant.
pub struct Adapter {
    pub net: Domain2VecNet,
    disc_store: ParamStore,
    discs: Vec<Discriminator>,
    pub weights: SourceWeights,
    variant: Variant,
    cfg: MsdaConfig,
    opt_net: Optimizer,
    opt_disc: Optimizer,
    rng: ChaCha8Rng,
    sources: Vec<DomainData>,
    target: DomainData,
    norm: Normalization,
}

impl Adapter {
    /// Loads the task's domains from `manifest`.
    pub fn new(task: &TransferTask, variant: Variant, cfg: &MsdaConfig, manifest: &DatasetManifest) -> Result<Self> {
        task.validate()?;
        let sources = task
            .source_domain_ids
            .iter()
            .map(|&id| DomainData::load(manifest, id))
            .collect::<Result<Vec<_>>>()?;
        let target = DomainData::load(manifest, task.target_domain_id)?;
        let spec = NetworkSpec::for_scale(cfg.scale, manifest.num_classes(), manifest.num_domains());
        Self::from_parts(task, variant, cfg, &spec, sources, target, manifest.normalization)
    }

    /// The target's labels are hidden from the training loop.
    pub fn from_parts(
        task: &TransferTask,
        variant: Variant,
        cfg: &MsdaConfig,
        spec: &NetworkSpec,
        sources: Vec<DomainData>,
        target: DomainData,
        norm: Normalization,
    ) -> Result<Self> {
        task.validate()?;
        cfg.validate()?;
        let n = task.source_domain_ids.len();
        if sources.len() != n {
            return Err(Error::dim(format!("{n} source domains"), sources.len()));
        }
        let weights = if variant.distance_weighted() {
            let d = task
                .distances
                .as_ref()
                .ok_or_else(|| Error::Precondition(format!("variant {variant} needs source distances from a domain embedding")))?;
            distance_to_weights(d, cfg.temperature)?
        } else {
            uniform_weights(n)
        };
        let target = target.hide_labels();
        if sources.iter().chain([&target]).any(|d| d.train.is_empty()) {
            return Err(Error::Precondition("every task domain needs training examples".into()));
        }
        let net = Domain2VecNet::new(spec, cfg.seed, DType::F32)?;
        let mut disc_store = ParamStore::new(DType::F32, seed::mix(cfg.seed, seed::stream::MSDA));
        let mut discs = Vec::new();
        if variant.alignment() == Alignment::Adversarial {
            for i in 0..n {
                discs.push(Discriminator {
                    fc0: Linear::new(&mut disc_store, &format!("adv.{i}.fc0"), spec.latent_dim, cfg.discriminator_hidden)?,
                    fc1: Linear::new(&mut disc_store, &format!("adv.{i}.fc1"), cfg.discriminator_hidden, 1)?,
                });
            }
        }
        Ok(Self {
            net,
            disc_store,
            discs,
            weights,
            variant,
            opt_net: Optimizer::new(cfg.optimizer),
            opt_disc: Optimizer::new(cfg.optimizer),
            rng: seed::rng(cfg.seed, seed::stream::MSDA),
            cfg: cfg.clone(),
            sources,
            target,
            norm,
        })
    }

    fn sample(rng: &mut ChaCha8Rng, d: &DomainData, b: usize) -> Vec<usize> {
        (0..b).map(|_| d.train[rng.random_range(0..d.train.len())]).collect()
    }

    pub fn step(&mut self, step: usize) -> Result<MsdaLogLine> {
        let b = self.cfg.batch_size;
        let n = self.sources.len();
        let mut images = Vec::with_capacity(n + 1);
        let mut labels = Vec::with_capacity(n);
        for d in &self.sources {
            let idx = Self::sample(&mut self.rng, d, b);
            let y = idx.iter().map(|&i| d.label(i).map(u32::from)).collect::<Result<Vec<_>>>()?;
            labels.push(Tensor::new(y, &candle_core::Device::Cpu)?);
            images.push(self.batch_images(d, &idx)?);
        }
        let idx = Self::sample(&mut self.rng, &self.target, b);
        images.push(self.batch_images(&self.target, &idx)?);
        let x = Tensor::cat(&images, 0)?;

        let net = &self.net;
        let mut ctx = Ctx::train(&mut self.rng);
        let g = net.generator(&x, &mut ctx)?;
        let f = net.cs.forward(&g.f_g, &mut ctx)?;
        let probs = net.classify(&f, &mut ctx)?;
        let w = &self.weights.weights;

        let mut class = Tensor::zeros((), f.dtype(), f.device())?;
        for (i, y) in labels.iter().enumerate() {
            let ce = losses::cross_entropy(&probs.narrow(0, i * b, b)?, y)?;
            class = (class + (ce * w[i])?)?;
        }
        let class_value = finite("msda class loss", &class)?;
        let f_t = f.narrow(0, n * b, b)?;
        let mut total = class;
        let mut align = vec![None; n];
        let lambda = self.cfg.adaptation_weight;
        match self.variant.alignment() {
            Alignment::None => {}
            // A single example has no spread to match; skip.
            Alignment::Moments if b < 2 => {}
            Alignment::Moments => {
                for i in 0..n {
                    let m = moment_distance(&f.narrow(0, i * b, b)?, &f_t)?;
                    align[i] = Some(finite("moment loss", &m)?);
                    total = (total + (m * (lambda * w[i]))?)?;
                }
                if self.cfg.pairwise_sources {
                    for i in 0..n {
                        for j in i + 1..n {
                            let m = moment_distance(&f.narrow(0, i * b, b)?, &f.narrow(0, j * b, b)?)?;
                            total = (total + (m * (lambda * w[i] * w[j]))?)?;
                        }
                    }
                }
            }
            Alignment::Adversarial => {
                // Features try to make each source look like the target and vice versa.
                let z_t = |d: &Discriminator| d.logits(&f_t);
                for (i, d) in self.discs.iter().enumerate() {
                    let z_s = d.logits(&f.narrow(0, i * b, b)?)?;
                    let confusion = (softplus(&z_s)?.mean_all()? + softplus(&z_t(d)?.neg()?)?.mean_all()?)?;
                    align[i] = Some(finite("adversarial loss", &confusion)?);
                    total = (total + (confusion * (lambda * w[i]))?)?;
                }
            }
        }
        finite("msda total loss", &total)?;
        let grads = total.backward()?;
        self.opt_net.step(self.net.store().group(&NET_GROUPS), &grads)?;

        let mut discriminator = None;
        if self.variant.alignment() == Alignment::Adversarial {
            let f = f.detach();
            let f_t = f.narrow(0, n * b, b)?;
            let mut loss = Tensor::zeros((), f.dtype(), f.device())?;
            for (i, d) in self.discs.iter().enumerate() {
                let z_s = d.logits(&f.narrow(0, i * b, b)?)?;
                let z_t = d.logits(&f_t)?;
                loss = (loss + (softplus(&z_s.neg()?)?.mean_all()? + softplus(&z_t)?.mean_all()?)?)?;
            }
            discriminator = Some(finite("discriminator loss", &loss)?);
            let grads = loss.backward()?;
            self.opt_disc.step(self.disc_store.group(&["adv."]), &grads)?;
        }
        Ok(MsdaLogLine {
            step,
            class: class_value,
            align,
            discriminator,
        })
    }

    fn batch_images(&self, d: &DomainData, idx: &[usize]) -> Result<Tensor> {
        d.images(idx, &self.norm, self.net.dtype())
    }

    /// Accuracy on the target's held-out split.
    pub fn target_accuracy(&self) -> Result<f64> {
        evaluate_accuracy(&self.net, &self.target, &self.norm)
    }

    pub fn checkpoint(&self, task: &TransferTask) -> Result<Checkpoint> {
        let extra: BTreeMap<String, Tensor> = self.disc_store.snapshot()?;
        let meta = serde_json::json!({
            "task": task,
            "variant": self.variant,
            "weights": self.weights,
            "config": self.cfg,
        });
        Checkpoint::capture(&self.net, extra, meta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsdaRow {
    pub task: String,
    pub variant: String,
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct MsdaOutcome {
    pub row: MsdaRow,
    pub weights: SourceWeights,
    pub log: Vec<MsdaLogLine>,
    pub run_dir: Option<PathBuf>,
}

pub const REPORT_FILE: &str = "msda_report.csv";

/// Adapts, scores the target, and (with `out`) writes the run directory
/// `{out}/{task}/{variant}/{seed}/` and appends a row to `{out}/msda_report.csv`.
pub fn run_msda(
    task: &TransferTask,
    variant: Variant,
    cfg: &MsdaConfig,
    manifest: &DatasetManifest,
    out: Option<&Path>,
) -> Result<MsdaOutcome> {
    let mut adapter = Adapter::new(task, variant, cfg, manifest)?;
    let mut log = Vec::with_capacity(cfg.steps);
    for s in 0..cfg.steps {
        log.push(adapter.step(s)?);
    }
    let row = MsdaRow {
        task: task.name.clone(),
        variant: variant.name().into(),
        seed: cfg.seed,
        accuracy: adapter.target_accuracy()?,
    };
    let run_dir = match out {
        Some(out) => {
            let dir = out.join(&task.name).join(variant.name()).join(cfg.seed.to_string());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let resolved = serde_json::json!({ "task": task, "variant": variant, "config": cfg, "weights": adapter.weights });
            let p = dir.join("msda_config.json");
            std::fs::write(&p, serde_json::to_string_pretty(&resolved).expect("config serializes")).map_err(|e| Error::io(&p, e))?;
            let p = dir.join("msda_log.jsonl");
            let mut text = String::new();
            for l in &log {
                text.push_str(&serde_json::to_string(l).expect("log serializes"));
                text.push('\n');
            }
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            adapter.checkpoint(task)?.save(&dir.join("checkpoint.d2v"))?;
            append_row(&out.join(REPORT_FILE), &row)?;
            Some(dir)
        }
        None => None,
    };
    Ok(MsdaOutcome {
        row,
        weights: adapter.weights.clone(),
        log,
        run_dir,
    })
}

pub fn append_row(path: &Path, row: &MsdaRow) -> Result<()> {
    let fresh = !path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    w.serialize(row)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads every row of a report written by [`append_row`].
pub fn read_rows(path: &Path) -> Result<Vec<MsdaRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[cfg(test)]
mod tests;

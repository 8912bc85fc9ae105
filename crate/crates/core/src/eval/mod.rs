//! Cross-domain accuracy matrices, correlation with embedding distances,
//! ablations and report emission.

mod report;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use report::{render_markdown, scatter_svg, write_report, ReportFiles};

use crate::datagen::DatasetManifest;
use crate::embedding::{embed_manifest, EmbeddingConfig, EmbeddingSet, RawEmbedding};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{Checkpoint, Domain2VecNet, ModelScale};
use crate::training::{
    evaluate_accuracy, fit, latents, linear_probe, DomainData, OptimizerConfig, ProbeConfig, TrainConfig, Trainer, TrainingSet,
};

/// Pearson correlation coefficient.
pub fn pearson_cc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dim(format!("{} values", x.len()), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::Precondition(format!("correlation needs at least 2 pairs, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Settings for the per-source models behind the accuracy matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatrixConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for MatrixConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            optimizer: OptimizerConfig {
                lr: 1e-3,
                ..OptimizerConfig::default()
            },
        }
    }
}

/// `cells[i][j]`: accuracy of the model trained on domain `i`, scored on the
/// held-out split of domain `j`. `None` marks a cell whose run failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub domain_ids: Vec<u32>,
    pub cells: Vec<Vec<Option<f64>>>,
    pub seed: u64,
    pub epochs: usize,
}

impl AccuracyMatrix {
    pub fn diagonal_mean(&self) -> Option<f64> {
        mean((0..self.cells.len()).filter_map(|i| self.cells[i][i]))
    }

    pub fn off_diagonal_mean(&self) -> Option<f64> {
        let n = self.cells.len();
        mean(
            (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .filter_map(|(i, j)| self.cells[i][j]),
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("source");
        for id in &self.domain_ids {
            s.push_str(&format!(",{id}"));
        }
        s.push('\n');
        for (id, row) in self.domain_ids.iter().zip(&self.cells) {
            s.push_str(&id.to_string());
            for c in row {
                match c {
                    Some(v) => s.push_str(&format!(",{v:.6}")),
                    None => s.push_str(",NA"),
                }
            }
            s.push('\n');
        }
        s
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Source-only model (class loss alone) trained on one domain's training split.
pub fn train_source_only(
    manifest: &DatasetManifest,
    domain_id: u32,
    cfg: &MatrixConfig,
    seed: u64,
    scale: ModelScale,
) -> Result<Domain2VecNet> {
    let config = TrainConfig {
        weights: LossWeights::source_only(),
        optimizer: cfg.optimizer,
        batch_size: cfg.batch_size,
        epochs: cfg.epochs,
        seed,
        domain_ids: Some(vec![domain_id]),
        scale,
        ..TrainConfig::default()
    };
    let mut t = Trainer::for_manifest(config, manifest)?;
    let set = TrainingSet::from_manifest(manifest, Some(&[domain_id]), None)?;
    for _ in 0..cfg.epochs {
        t.train_epoch(&set, |_, _| Ok(()))?;
    }
    Ok(t.net)
}

pub fn cross_domain_matrix(
    manifest: &DatasetManifest,
    ids: &[u32],
    cfg: &MatrixConfig,
    seed: u64,
    scale: ModelScale,
) -> Result<AccuracyMatrix> {
    if ids.len() < 2 {
        return Err(Error::Precondition(format!(
            "accuracy matrix needs at least 2 domains, got {}",
            ids.len()
        )));
    }
    let data: Vec<DomainData> = ids.iter().map(|&id| DomainData::load(manifest, id)).collect::<Result<_>>()?;
    let mut cells = Vec::with_capacity(ids.len());
    for &src in ids {
        let row = match train_source_only(manifest, src, cfg, seed, scale) {
            Ok(net) => data
                .iter()
                .map(|d| evaluate_accuracy(&net, d, &manifest.normalization).ok())
                .collect(),
            Err(e) => {
                log::warn!("source {src}: training failed: {e}");
                vec![None; ids.len()]
            }
        };
        cells.push(row);
    }
    Ok(AccuracyMatrix {
        domain_ids: ids.to_vec(),
        cells,
        seed,
        epochs: cfg.epochs,
    })
}

/// Off-diagonal `(accuracy, distance)` pairs over valid cells.
pub fn off_diagonal_pairs(acc: &AccuracyMatrix, emb: &EmbeddingSet) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut a, mut d) = (Vec::new(), Vec::new());
    for (i, &si) in acc.domain_ids.iter().enumerate() {
        for (j, &tj) in acc.domain_ids.iter().enumerate() {
            if i == j {
                continue;
            }
            if let Some(v) = acc.cells[i][j] {
                a.push(v);
                d.push(emb.distance(si, tj)?);
            }
        }
    }
    Ok((a, d))
}

/// Held-out accuracies of fresh linear probes on frozen latents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementProbes {
    pub domain_from_cs: f64,
    pub class_from_ds: f64,
    pub domain_from_ds: f64,
    pub class_from_cs: f64,
    pub domain_chance: f64,
    pub class_chance: f64,
}

/// Fits probes on the training splits of `ids` and scores them on the held-out splits.
/// Domain targets are positions in `ids`; chance is the majority-class rate of the test labels.
pub fn disentanglement_probes(
    net: &Domain2VecNet,
    manifest: &DatasetManifest,
    ids: &[u32],
    cfg: &ProbeConfig,
) -> Result<DisentanglementProbes> {
    if ids.len() < 2 {
        return Err(Error::Precondition("probes need at least 2 domains".into()));
    }
    let norm = &manifest.normalization;
    let (mut tr, mut te) = ((vec![], vec![], vec![], vec![]), (vec![], vec![], vec![], vec![]));
    for (slot, &id) in ids.iter().enumerate() {
        let d = DomainData::load(manifest, id)?;
        for (split, idx, held) in [(&mut tr, &d.train, false), (&mut te, &d.held_out, true)] {
            let (ds, cs) = latents(net, &d, idx, norm)?;
            split.0.push(ds);
            split.1.push(cs);
            for &i in idx {
                split.2.push(slot as u32);
                split.3.push(u32::from(if held { d.held_out_label(i)? } else { d.label(i)? }));
            }
        }
    }
    let cat = |v: &[candle_core::Tensor]| -> Result<candle_core::Tensor> { Ok(candle_core::Tensor::cat(v, 0)?) };
    let (tr_ds, tr_cs, te_ds, te_cs) = (cat(&tr.0)?, cat(&tr.1)?, cat(&te.0)?, cat(&te.1)?);
    let (nd, nc) = (ids.len(), manifest.num_classes());
    let chance = |y: &[u32], k: usize| {
        let mut counts = vec![0usize; k];
        y.iter().for_each(|&v| counts[v as usize] += 1);
        *counts.iter().max().unwrap_or(&0) as f64 / y.len().max(1) as f64
    };
    Ok(DisentanglementProbes {
        domain_from_cs: linear_probe(&tr_cs, &tr.2, &te_cs, &te.2, nd, cfg)?,
        class_from_ds: linear_probe(&tr_ds, &tr.3, &te_ds, &te.3, nc, cfg)?,
        domain_from_ds: linear_probe(&tr_ds, &tr.2, &te_ds, &te.2, nd, cfg)?,
        class_from_cs: linear_probe(&tr_cs, &tr.3, &te_cs, &te.3, nc, cfg)?,
        domain_chance: chance(&te.2, nd),
        class_chance: chance(&te.3, nc),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationTag {
    Full,
    NoGram,
    NoMi,
}

impl AblationTag {
    pub fn name(self) -> &'static str {
        match self {
            AblationTag::Full => "full",
            AblationTag::NoGram => "no-gram",
            AblationTag::NoMi => "no-mi",
        }
    }
}

impl std::str::FromStr for AblationTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [AblationTag::Full, AblationTag::NoGram, AblationTag::NoMi]
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation tag {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub experiment: String,
    pub tag: AblationTag,
    pub seed: u64,
    pub accuracy: AccuracyMatrix,
    pub distances: Vec<Vec<f64>>,
    /// `None` when the correlation is undefined.
    pub pcc: Option<f64>,
    pub diagonal_mean: Option<f64>,
    pub off_diagonal_mean: Option<f64>,
}

impl TransferReport {
    pub fn build(experiment: &str, tag: AblationTag, accuracy: AccuracyMatrix, emb: &EmbeddingSet) -> Result<Self> {
        let (a, d) = off_diagonal_pairs(&accuracy, emb)?;
        let pcc = match pearson_cc(&a, &d) {
            Ok(r) => Some(r),
            Err(Error::UndefinedCorrelation(_)) => None,
            Err(e) => return Err(e),
        };
        let pos: Vec<usize> = accuracy
            .domain_ids
            .iter()
            .map(|id| {
                emb.domain_ids
                    .iter()
                    .position(|x| x == id)
                    .ok_or_else(|| Error::Lookup(format!("domain {id} not embedded")))
            })
            .collect::<Result<_>>()?;
        let distances = pos.iter().map(|&i| pos.iter().map(|&j| emb.distances[i][j]).collect()).collect();
        Ok(Self {
            experiment: experiment.to_string(),
            tag,
            seed: accuracy.seed,
            diagonal_mean: accuracy.diagonal_mean(),
            off_diagonal_mean: accuracy.off_diagonal_mean(),
            accuracy,
            distances,
            pcc,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub name: String,
    /// Domain2Vec training; its `seed` is replaced per run.
    pub train: TrainConfig,
    pub embedding: EmbeddingConfig,
    pub matrix: MatrixConfig,
    pub seeds: Vec<u64>,
    pub tags: Vec<AblationTag>,
    /// All manifest domains when unset.
    pub domain_ids: Option<Vec<u32>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: 1,
            name: "experiment".into(),
            train: TrainConfig::default(),
            embedding: EmbeddingConfig::default(),
            matrix: MatrixConfig::default(),
            seeds: vec![0],
            tags: vec![AblationTag::Full, AblationTag::NoGram, AblationTag::NoMi],
            domain_ids: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "experiment name {:?} is not a plain directory name",
                self.name
            )));
        }
        if self.seeds.is_empty() || self.tags.is_empty() {
            return Err(Error::Config("an experiment needs at least one seed and one tag".into()));
        }
        Ok(())
    }

    pub fn ids(&self, manifest: &DatasetManifest) -> Vec<u32> {
        self.domain_ids
            .clone()
            .unwrap_or_else(|| (0..manifest.num_domains() as u32).collect())
    }

    /// `{out}/{experiment}/{tag}/{seed}/`.
    pub fn run_dir(&self, out: &Path, tag: AblationTag, seed: u64) -> PathBuf {
        out.join(&self.name).join(tag.name()).join(seed.to_string())
    }
}

/// Everything produced for one seed across the requested tags.
#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub seed: u64,
    pub accuracy: AccuracyMatrix,
    pub reports: Vec<(TransferReport, EmbeddingSet)>,
}

fn domain_labels(manifest: &DatasetManifest, ids: &[u32]) -> Result<Vec<String>> {
    ids.iter().map(|&id| Ok(manifest.domain(id)?.spec.label())).collect()
}

/// Runs every tag for one seed. The accuracy matrix depends only on the seed
/// and is shared; `no-gram` reuses the `full` training run when both are requested.
pub fn run_seed(cfg: &ExperimentConfig, manifest: &DatasetManifest, seed: u64, out: &Path) -> Result<SeedOutcome> {
    cfg.validate()?;
    let ids = cfg.ids(manifest);
    let accuracy = cross_domain_matrix(manifest, &ids, &cfg.matrix, seed, cfg.train.scale)?;
    let mut reports = Vec::new();
    let mut full_raw: Option<Vec<RawEmbedding>> = None;
    for &tag in &cfg.tags {
        let dir = cfg.run_dir(out, tag, seed);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let resolved = dir.join("experiment_config.json");
        std::fs::write(&resolved, serde_json::to_string_pretty(cfg).expect("config serializes")).map_err(|e| Error::io(&resolved, e))?;
        let mut emb_cfg = cfg.embedding.clone();
        emb_cfg.seed = seed;
        emb_cfg.include_gram = emb_cfg.include_gram && tag != AblationTag::NoGram;
        let raw = match (tag, &full_raw) {
            (AblationTag::Full | AblationTag::NoGram, Some(raw)) => raw.clone(),
            _ => {
                let mut train = cfg.train.clone();
                train.seed = seed;
                if tag == AblationTag::NoMi {
                    train.weights.w4 = 0.0;
                }
                let train_dir = dir.join("train");
                let outcome = fit(&train, manifest, &train_dir, None)?;
                let net = Checkpoint::load(&outcome.checkpoint)?.to_net()?;
                let raw = embed_manifest(&net, manifest, &ids, cfg.embedding.gram_layers)?;
                if tag != AblationTag::NoMi {
                    full_raw = Some(raw.clone());
                }
                raw
            }
        };
        let emb = EmbeddingSet::build(&raw, domain_labels(manifest, &ids)?, &emb_cfg)?;
        emb.save(&dir.join("embeddings"))?;
        let report = TransferReport::build(&cfg.name, tag, accuracy.clone(), &emb)?;
        write_report(&dir, &report, &emb)?;
        reports.push((report, emb));
    }
    Ok(SeedOutcome { seed, accuracy, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcc_basics() {
        let x = [1.0, 2.0, 4.0, 7.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson_cc(&x, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson_cc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(pearson_cc(&x, &[3.0; 4]), Err(Error::UndefinedCorrelation(_))));
        assert!(pearson_cc(&[1.0], &[2.0]).is_err());
        assert!(pearson_cc(&x, &x[..3]).is_err());
    }

    fn matrix(cells: Vec<Vec<Option<f64>>>) -> AccuracyMatrix {
        AccuracyMatrix {
            domain_ids: (0..cells.len() as u32).collect(),
            cells,
            seed: 0,
            epochs: 1,
        }
    }

    #[test]
    fn matrix_means_skip_invalid_cells() {
        let m = matrix(vec![vec![Some(0.9), Some(0.2)], vec![None, Some(0.7)]]);
        assert!((m.diagonal_mean().unwrap() - 0.8).abs() < 1e-12);
        assert!((m.off_diagonal_mean().unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(m.to_csv(), "source,0,1\n0,0.900000,0.200000\n1,NA,0.700000\n");
    }

    #[test]
    fn tags_parse() {
        for t in [AblationTag::Full, AblationTag::NoGram, AblationTag::NoMi] {
            assert_eq!(t.name().parse::<AblationTag>().unwrap(), t);
        }
        assert!("none".parse::<AblationTag>().is_err());
    }

    #[test]
    fn run_dirs_follow_layout() {
        let cfg = ExperimentConfig {
            name: "exp".into(),
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.run_dir(Path::new("/o"), AblationTag::NoMi, 3), Path::new("/o/exp/no-mi/3"));
        let bad = ExperimentConfig {
            name: "a/b".into(),
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}

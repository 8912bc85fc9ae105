//! Per-domain embedding vectors, distances, reduction and the kNN graph.

mod gram;
mod graph;
mod reduce;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use gram::{accumulate_batch, gram_tridiagonal, TriDiagonal};
pub use graph::{knn_graph, nearest, GraphEdge, GraphNode, KnowledgeGraph};
pub use reduce::{default_perplexity, pca, reduce_dims, tsne};

use crate::datagen::{DatasetManifest, Normalization};
use crate::error::{Error, Result};
use crate::model::{Ctx, Domain2VecNet};
use crate::training::DomainData;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GramLayers {
    All,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceSpace {
    /// Standardized raw vectors.
    Raw,
    /// Reduced coordinates.
    Reduced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddingConfig {
    pub gram_layers: GramLayers,
    /// `false` keeps the prototype only.
    pub include_gram: bool,
    pub metric: Metric,
    pub distance_space: DistanceSpace,
    pub pca_dim: usize,
    pub final_dim: usize,
    pub knn: usize,
    pub seed: u64,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            gram_layers: GramLayers::All,
            include_gram: true,
            metric: Metric::Cosine,
            distance_space: DistanceSpace::Raw,
            pca_dim: 10,
            final_dim: 2,
            knn: 5,
            seed: 0,
        }
    }
}

/// Mean `f_ds` of a domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPrototype {
    pub vector: Vec<f64>,
    pub sample_count: usize,
}

pub fn domain_prototype(latents: &[Vec<f64>]) -> Result<DomainPrototype> {
    let first = latents
        .first()
        .ok_or_else(|| Error::Precondition("prototype of an empty set".into()))?;
    let mut acc = vec![0.0; first.len()];
    for v in latents {
        if v.len() != acc.len() {
            return Err(Error::dim(acc.len(), v.len()));
        }
        acc.iter_mut().zip(v).for_each(|(a, x)| *a += x);
    }
    let n = latents.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(DomainPrototype {
        vector: acc,
        sample_count: latents.len(),
    })
}

/// Unstandardized embedding parts of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEmbedding {
    pub domain_id: u32,
    pub prototype: DomainPrototype,
    pub gram: Vec<TriDiagonal>,
}

impl RawEmbedding {
    /// `prototype ++ gram diagonals` (or the prototype alone).
    pub fn vector(&self, include_gram: bool) -> Vec<f64> {
        let mut v = self.prototype.vector.clone();
        if include_gram {
            for t in &self.gram {
                v.extend(t.flatten());
            }
        }
        v
    }
}

/// Prototype and example-averaged Gram tri-diagonals over the domain's training split,
/// with batch norm in inference mode.
pub fn embed_domain(net: &Domain2VecNet, data: &DomainData, norm: &Normalization, layers: GramLayers) -> Result<RawEmbedding> {
    let idx = &data.train;
    if idx.is_empty() {
        return Err(Error::Precondition(format!("domain {} has no training examples", data.domain_id)));
    }
    let chans = &net.spec().conv_channels;
    let chosen: Vec<usize> = match layers {
        GramLayers::All => (0..chans.len()).collect(),
        GramLayers::Last => vec![chans.len() - 1],
    };
    let mut gram: Vec<TriDiagonal> = chosen.iter().map(|&l| TriDiagonal::zeros(chans[l])).collect();
    let mut proto = vec![0.0; net.spec().latent_dim];
    for chunk in idx.chunks(128) {
        let x = data.images(chunk, norm, net.dtype())?;
        let mut ctx = Ctx::eval();
        let g = net.generator(&x, &mut ctx)?;
        for (slot, &l) in chosen.iter().enumerate() {
            accumulate_batch(&g.conv_activations[l], &mut gram[slot], idx.len())?;
        }
        let f_ds = net.ds.forward(&g.f_g, &mut ctx)?;
        let sum = f_ds.to_dtype(candle_core::DType::F64)?.sum(0)?.to_vec1::<f64>()?;
        proto.iter_mut().zip(sum).for_each(|(p, s)| *p += s);
    }
    proto.iter_mut().for_each(|p| *p /= idx.len() as f64);
    Ok(RawEmbedding {
        domain_id: data.domain_id,
        prototype: DomainPrototype {
            vector: proto,
            sample_count: idx.len(),
        },
        gram,
    })
}

pub fn embed_manifest(net: &Domain2VecNet, manifest: &DatasetManifest, ids: &[u32], layers: GramLayers) -> Result<Vec<RawEmbedding>> {
    ids.iter()
        .map(|&id| embed_domain(net, &DomainData::load(manifest, id)?, &manifest.normalization, layers))
        .collect()
}

/// Per-dimension z-scores over the rows (population std); constant columns are dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardized {
    pub rows: Vec<Vec<f64>>,
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
}

pub fn standardize(rows: &[Vec<f64>]) -> Result<Standardized> {
    let n = rows.len();
    if n < 2 {
        return Err(Error::Precondition("standardization needs at least 2 rows".into()));
    }
    let d = rows[0].len();
    if rows.iter().any(|r| r.len() != d) {
        return Err(Error::dim(format!("rows of length {d}"), "ragged rows"));
    }
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut stats = Vec::new();
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var = rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        if std > 1e-12 * mean.abs().max(1.0) {
            kept.push(j);
            stats.push((mean, std));
        } else {
            dropped.push(j);
        }
    }
    let out = rows
        .iter()
        .map(|r| kept.iter().zip(&stats).map(|(&j, &(m, s))| (r[j] - m) / s).collect())
        .collect();
    Ok(Standardized { rows: out, kept, dropped })
}

pub fn distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                return if na == nb { 0.0 } else { 1.0 };
            }
            (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
        }
    }
}

/// Symmetric matrix with an exact zero diagonal.
pub fn distance_matrix(rows: &[Vec<f64>], metric: Metric) -> Vec<Vec<f64>> {
    let n = rows.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = distance(&rows[i], &rows[j], metric);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// All embedding artifacts for a set of domains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub domain_ids: Vec<u32>,
    pub labels: Vec<String>,
    pub sample_counts: Vec<usize>,
    pub raw_dim: usize,
    pub standardized: Standardized,
    pub reduced: Vec<Vec<f64>>,
    pub distances: Vec<Vec<f64>>,
    pub config: EmbeddingConfig,
}

impl EmbeddingSet {
    pub fn build(raw: &[RawEmbedding], labels: Vec<String>, cfg: &EmbeddingConfig) -> Result<Self> {
        let vectors: Vec<Vec<f64>> = raw.iter().map(|r| r.vector(cfg.include_gram)).collect();
        let standardized = standardize(&vectors)?;
        let reduced = reduce_dims(&standardized.rows, cfg.pca_dim, cfg.final_dim, cfg.seed)?;
        let space = match cfg.distance_space {
            DistanceSpace::Raw => &standardized.rows,
            DistanceSpace::Reduced => &reduced,
        };
        let distances = distance_matrix(space, cfg.metric);
        Ok(Self {
            domain_ids: raw.iter().map(|r| r.domain_id).collect(),
            labels,
            sample_counts: raw.iter().map(|r| r.prototype.sample_count).collect(),
            raw_dim: vectors[0].len(),
            standardized,
            reduced,
            distances,
            config: cfg.clone(),
        })
    }

    pub fn graph(&self) -> Result<KnowledgeGraph> {
        let nodes: Vec<(u32, String, usize)> = self
            .domain_ids
            .iter()
            .zip(&self.labels)
            .zip(&self.sample_counts)
            .map(|((&id, l), &c)| (id, l.clone(), c))
            .collect();
        knn_graph(&self.distances, self.config.knn, &nodes)
    }

    /// Distance between two domains by id.
    pub fn distance(&self, a: u32, b: u32) -> Result<f64> {
        let pos = |id| {
            self.domain_ids
                .iter()
                .position(|&x| x == id)
                .ok_or_else(|| Error::Lookup(format!("domain {id} not embedded")))
        };
        Ok(self.distances[pos(a)?][pos(b)?])
    }

    /// Writes `embeddings.csv`, `reduced.csv`, `distances.csv` and `embeddings.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_rows(&dir.join("embeddings.csv"), &self.domain_ids, &self.standardized.rows, "e")?;
        write_rows(&dir.join("reduced.csv"), &self.domain_ids, &self.reduced, "y")?;
        write_rows(&dir.join("distances.csv"), &self.domain_ids, &self.distances, "d")?;
        let meta = dir.join("embeddings.json");
        std::fs::write(&meta, serde_json::to_string_pretty(self).expect("serializes")).map_err(|e| Error::io(&meta, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("embeddings.json");
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(&p, e))
    }
}

fn write_rows(path: &Path, ids: &[u32], rows: &[Vec<f64>], prefix: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let width = rows.first().map_or(0, Vec::len);
    let mut header = vec!["domain_id".to_string()];
    header.extend((0..width).map(|i| format!("{prefix}{i}")));
    w.write_record(&header)?;
    for (id, r) in ids.iter().zip(rows) {
        let mut rec = vec![id.to_string()];
        rec.extend(r.iter().map(|v| format!("{v:.9e}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

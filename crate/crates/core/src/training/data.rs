//! In-memory domain data, the train/held-out split and minibatch assembly.

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{DatasetManifest, DomainShard, Normalization};
use crate::error::{Error, Result};
use crate::model::images_to_tensor;
use crate::seed;

/// Every fifth example (by seeded hash) is held out.
pub fn is_held_out(corpus_seed: u64, domain_id: u32, index: usize) -> bool {
    let h = seed::mix(seed::mix(corpus_seed ^ seed::stream::SPLIT, u64::from(domain_id)), index as u64);
    h % 5 == 0
}

/// One domain's examples with its split. Class labels of a hidden domain
/// cannot be read through the training accessors.
#[derive(Debug, Clone)]
pub struct DomainData {
    pub domain_id: u32,
    shard: DomainShard,
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
    labels_visible: bool,
}

impl DomainData {
    pub fn from_shard(shard: DomainShard, corpus_seed: u64) -> Self {
        let (held_out, train) = (0..shard.len()).partition(|&i| is_held_out(corpus_seed, shard.domain_id, i));
        Self {
            domain_id: shard.domain_id,
            shard,
            train,
            held_out,
            labels_visible: true,
        }
    }

    pub fn load(manifest: &DatasetManifest, domain_id: u32) -> Result<Self> {
        Ok(Self::from_shard(manifest.load_shard(domain_id)?, manifest.seed))
    }

    /// Marks this domain as unlabeled for training purposes.
    pub fn hide_labels(mut self) -> Self {
        self.labels_visible = false;
        self
    }

    pub fn labels_visible(&self) -> bool {
        self.labels_visible
    }

    pub fn len(&self) -> usize {
        self.shard.len()
    }

    pub fn is_empty(&self) -> bool {
        self.shard.is_empty()
    }

    pub fn side(&self) -> usize {
        usize::from(self.shard.height)
    }

    pub fn image(&self, i: usize) -> &[u8] {
        self.shard.image(i)
    }

    /// Training-time label access; refused for hidden domains.
    pub fn label(&self, i: usize) -> Result<u8> {
        if !self.labels_visible {
            return Err(Error::LabelAccess(self.domain_id));
        }
        Ok(self.shard.labels[i])
    }

    /// Label of a held-out example, for scoring only.
    pub fn held_out_label(&self, i: usize) -> Result<u8> {
        if !self.held_out.contains(&i) {
            return Err(Error::LabelAccess(self.domain_id));
        }
        Ok(self.shard.labels[i])
    }

    /// Normalized image tensor for the given indices.
    pub fn images(&self, indices: &[usize], norm: &Normalization, dtype: DType) -> Result<Tensor> {
        let mut px = Vec::with_capacity(indices.len() * self.shard.image_len());
        for &i in indices {
            px.extend_from_slice(self.image(i));
        }
        images_to_tensor(&px, indices.len(), self.side(), norm.mean, norm.std, dtype)
    }
}

/// A reference to one training example.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExampleRef {
    /// Position in the data set's domain list.
    pub slot: usize,
    pub index: usize,
}

/// A minibatch ready for the model.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    /// Domain-classifier target per row.
    pub domains: Tensor,
    /// Rows with a visible class label, and those labels.
    pub labeled_rows: Tensor,
    pub labels: Tensor,
    pub labeled_count: usize,
    /// Slot of each row (for per-source losses).
    pub slots: Vec<usize>,
}

/// Training data over several domains with a seeded epoch order.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub domains: Vec<DomainData>,
    /// Domain-classifier target for each slot.
    pub domain_targets: Vec<u32>,
    pub normalization: Normalization,
}

impl TrainingSet {
    pub fn new(domains: Vec<DomainData>, domain_targets: Vec<u32>, normalization: Normalization) -> Result<Self> {
        if domains.is_empty() || domains.len() != domain_targets.len() {
            return Err(Error::Precondition("training set needs one target per domain".into()));
        }
        Ok(Self {
            domains,
            domain_targets,
            normalization,
        })
    }

    /// All (or the listed) manifest domains, with the manifest position as the domain target.
    pub fn from_manifest(manifest: &DatasetManifest, ids: Option<&[u32]>, labeled: Option<&[u32]>) -> Result<Self> {
        let all: Vec<u32> = (0..manifest.num_domains() as u32).collect();
        let ids = ids.unwrap_or(&all);
        let mut domains = Vec::with_capacity(ids.len());
        for &id in ids {
            let d = DomainData::load(manifest, id)?;
            let visible = labeled.is_none_or(|l| l.contains(&id));
            domains.push(if visible { d } else { d.hide_labels() });
        }
        Self::new(domains, ids.to_vec(), manifest.normalization)
    }

    pub fn train_len(&self) -> usize {
        self.domains.iter().map(|d| d.train.len()).sum()
    }

    /// Shuffled order of all training examples for one epoch.
    pub fn epoch_order(&self, rng: &mut ChaCha8Rng) -> Vec<ExampleRef> {
        let mut order: Vec<ExampleRef> = self
            .domains
            .iter()
            .enumerate()
            .flat_map(|(slot, d)| d.train.iter().map(move |&index| ExampleRef { slot, index }))
            .collect();
        order.shuffle(rng);
        order
    }

    pub fn batch(&self, rows: &[ExampleRef], dtype: DType) -> Result<Batch> {
        let side = self.domains[0].side();
        let mut px = Vec::with_capacity(rows.len() * side * side * 3);
        let mut domains = Vec::with_capacity(rows.len());
        let mut labeled_rows = Vec::new();
        let mut labels = Vec::new();
        for (r, e) in rows.iter().enumerate() {
            let d = &self.domains[e.slot];
            px.extend_from_slice(d.image(e.index));
            domains.push(self.domain_targets[e.slot]);
            if d.labels_visible() {
                labeled_rows.push(r as u32);
                labels.push(u32::from(d.label(e.index)?));
            }
        }
        let n = self.normalization;
        let dev = Device::Cpu;
        Ok(Batch {
            images: images_to_tensor(&px, rows.len(), side, n.mean, n.std, dtype)?,
            domains: Tensor::new(domains, &dev)?,
            labeled_count: labels.len(),
            labeled_rows: Tensor::new(labeled_rows, &dev)?,
            labels: Tensor::new(labels, &dev)?,
            slots: rows.iter().map(|e| e.slot).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn shard(id: u32, n: usize) -> DomainShard {
        DomainShard {
            domain_id: id,
            height: 2,
            width: 2,
            channels: 3,
            num_classes: 10,
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
            pixels: vec![7; n * 12],
        }
    }

    #[test]
    fn split_is_about_one_fifth_and_disjoint() {
        let d = DomainData::from_shard(shard(3, 1000), 42);
        assert_eq!(d.train.len() + d.held_out.len(), 1000);
        assert!((150..250).contains(&d.held_out.len()), "{}", d.held_out.len());
        assert!(d.train.iter().all(|i| !d.held_out.contains(i)));
        let again = DomainData::from_shard(shard(3, 1000), 42);
        assert_eq!(d.held_out, again.held_out);
    }

    #[test]
    fn hidden_domain_refuses_labels() {
        let d = DomainData::from_shard(shard(1, 20), 0).hide_labels();
        assert!(matches!(d.label(0), Err(Error::LabelAccess(1))));
        let set = TrainingSet::new(vec![d], vec![0], Normalization::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let order = set.epoch_order(&mut rng);
        let b = set.batch(&order[..4], DType::F32).unwrap();
        assert_eq!(b.labeled_count, 0);
        assert_eq!(b.images.dims(), &[4, 3, 2, 2]);
    }

    #[test]
    fn held_out_labels_only_for_held_out_rows() {
        let d = DomainData::from_shard(shard(1, 50), 0);
        assert!(d.held_out_label(d.held_out[0]).is_ok());
        assert!(d.held_out_label(d.train[0]).is_err());
    }
}

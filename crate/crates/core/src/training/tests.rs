use super::*;
use crate::datagen::DomainShard;
use rand::{Rng, SeedableRng};

pub(crate) fn tiny_spec(num_domains: usize) -> NetworkSpec {
    NetworkSpec {
        conv_channels: vec![2, 3],
        pool_after: vec![true, false],
        kernel: 3,
        image_size: 8,
        disentangler_hidden: 6,
        latent_dim: 4,
        domain_hidden: 5,
        mine_hidden: 3,
        ..NetworkSpec::desk(3, num_domains)
    }
}

fn tiny_set(domains: u32, labeled: bool) -> TrainingSet {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data = (0..domains)
        .map(|id| {
            let n = 40;
            let shard = DomainShard {
                domain_id: id,
                height: 8,
                width: 8,
                channels: 3,
                num_classes: 3,
                labels: (0..n).map(|i| (i % 3) as u8).collect(),
                pixels: (0..n * 192).map(|_| rng.random()).collect(),
            };
            let d = DomainData::from_shard(shard, 0);
            if labeled || id == 0 {
                d
            } else {
                d.hide_labels()
            }
        })
        .collect();
    TrainingSet::new(data, (0..domains).collect(), Normalization::default()).unwrap()
}

fn config(weights: LossWeights) -> TrainConfig {
    TrainConfig {
        weights,
        batch_size: 8,
        optimizer: OptimizerConfig {
            lr: 1e-2,
            ..OptimizerConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn batch(set: &TrainingSet, seed: u64) -> Batch {
    let order = set.epoch_order(&mut ChaCha8Rng::seed_from_u64(seed));
    set.batch(&order[..8], DType::F32).unwrap()
}

fn values(t: &Trainer, prefix: &str) -> Vec<(String, Vec<f32>)> {
    t.net
        .store()
        .group(&[prefix])
        .into_iter()
        .map(|(n, v)| (n.to_string(), v.flatten_all().unwrap().to_vec1::<f32>().unwrap()))
        .collect()
}

#[test]
fn only_class_weight_moves_only_class_path() {
    let w = LossWeights {
        w1: 1.0,
        w2: 0.0,
        w3: 0.0,
        w4: 0.0,
        ..LossWeights::default()
    };
    let mut t = Trainer::new(config(w), &tiny_spec(2)).unwrap();
    let set = tiny_set(2, true);
    let before: Vec<_> = ["g.", "ds.", "cs.", "c.", "dc.", "r.", "t."]
        .iter()
        .map(|p| values(&t, p))
        .collect();
    t.train_step(&batch(&set, 0)).unwrap();
    t.train_step(&batch(&set, 1)).unwrap();
    let after: Vec<_> = ["g.", "ds.", "cs.", "c.", "dc.", "r.", "t."]
        .iter()
        .map(|p| values(&t, p))
        .collect();
    let changed: Vec<bool> = before.iter().zip(&after).map(|(a, b)| a != b).collect();
    assert_eq!(changed, vec![true, false, true, true, false, false, false]);
}

#[test]
fn step_zero_is_deterministic() {
    let set = tiny_set(2, true);
    let run = || {
        let mut t = Trainer::new(config(LossWeights::default()), &tiny_spec(2)).unwrap();
        t.train_step(&batch(&set, 3)).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn breakdown_total_matches_composition() {
    let set = tiny_set(2, true);
    let w = LossWeights {
        w3: 0.3,
        w4: 0.7,
        alpha_class: 0.2,
        alpha_domain: 0.4,
        ..LossWeights::default()
    };
    let mut t = Trainer::new(config(w), &tiny_spec(2)).unwrap();
    let b = t.train_step(&batch(&set, 4)).unwrap();
    let expect = w.w1 * (b.ce_class + w.alpha_class * b.ent_class)
        + w.w2 * (b.ce_domain + w.alpha_domain * b.ent_domain)
        + w.w3 * (b.rec + b.kl)
        + w.w4 * b.mi;
    assert!((b.total - expect).abs() < 1e-6);
    assert!(b.ent_class <= 0.0 && b.ent_class >= -(2f64.ln()) - 1e-6);
}

#[test]
fn unlabeled_domains_do_not_block_training() {
    let set = tiny_set(3, false);
    let mut t = Trainer::new(config(LossWeights::default()), &tiny_spec(3)).unwrap();
    let b = t.train_step(&batch(&set, 5)).unwrap();
    assert!(b.total.is_finite());
}

#[test]
fn resume_reproduces_trajectory() {
    let set = tiny_set(2, true);
    let cfg = config(LossWeights::default());
    let mut straight = Trainer::new(cfg.clone(), &tiny_spec(2)).unwrap();
    let mut logs = Vec::new();
    for _ in 0..2 {
        straight
            .train_epoch(&set, |_, b| {
                logs.push(*b);
                Ok(())
            })
            .unwrap();
    }
    let mut first = Trainer::new(cfg, &tiny_spec(2)).unwrap();
    let mut resumed_logs = Vec::new();
    first
        .train_epoch(&set, |_, b| {
            resumed_logs.push(*b);
            Ok(())
        })
        .unwrap();
    let bytes = first.checkpoint().unwrap().to_bytes().unwrap();
    let ck = Checkpoint::from_bytes(Path::new("mem"), &bytes).unwrap();
    let mut second = Trainer::resume(&ck).unwrap();
    second
        .train_epoch(&set, |_, b| {
            resumed_logs.push(*b);
            Ok(())
        })
        .unwrap();
    assert_eq!(logs, resumed_logs);
    assert_eq!(values(&straight, ""), values(&second, ""));
}

#[test]
fn invalid_configs_are_rejected() {
    let c = TrainConfig {
        batch_size: 1,
        ..TrainConfig::default()
    };
    assert!(c.validate().is_err());
    let mut c = TrainConfig::default();
    c.optimizer.lr = 0.0;
    assert!(c.validate().is_err());
    let c = TrainConfig {
        device: "cuda".into(),
        ..TrainConfig::default()
    };
    assert!(c.validate().is_err());
}

#[test]
fn untrained_accuracy_is_near_chance_and_matches_loop() {
    let set = tiny_set(1, true);
    let t = Trainer::new(config(LossWeights::default()), &tiny_spec(1)).unwrap();
    let d = &set.domains[0];
    let acc = evaluate_accuracy(&t.net, d, &set.normalization).unwrap();
    let pred = predict(&t.net, d, &d.held_out, &set.normalization).unwrap();
    let mut hits = 0;
    for (k, &i) in d.held_out.iter().enumerate() {
        if u32::from(d.held_out_label(i).unwrap()) == pred[k] {
            hits += 1;
        }
    }
    assert_eq!(acc, hits as f64 / d.held_out.len() as f64);
}

use super::*;
use crate::datagen::DomainShard;
use candle_core::Device;
use rand::SeedableRng;

fn spec() -> NetworkSpec {
    NetworkSpec {
        conv_channels: vec![2, 3],
        pool_after: vec![true, false],
        kernel: 3,
        image_size: 8,
        disentangler_hidden: 6,
        latent_dim: 4,
        domain_hidden: 5,
        mine_hidden: 3,
        ..NetworkSpec::desk(3, 4)
    }
}

fn domain(id: u32, brightness: u8) -> DomainData {
    let mut rng = ChaCha8Rng::seed_from_u64(u64::from(id) + 40);
    let n = 30;
    let shard = DomainShard {
        domain_id: id,
        height: 8,
        width: 8,
        channels: 3,
        num_classes: 3,
        labels: (0..n).map(|i| (i % 3) as u8).collect(),
        pixels: (0..n * 192).map(|_| rng.random_range(0..=brightness)).collect(),
    };
    DomainData::from_shard(shard, 0)
}

fn task(distances: Option<Vec<f64>>) -> TransferTask {
    TransferTask {
        name: "toy".into(),
        source_domain_ids: vec![0, 1, 2],
        target_domain_id: 3,
        distances,
    }
}

fn config(steps: usize, batch_size: usize) -> MsdaConfig {
    MsdaConfig {
        steps,
        batch_size,
        seed: 5,
        discriminator_hidden: 4,
        ..MsdaConfig::default()
    }
}

fn adapter(task: &TransferTask, variant: Variant, cfg: &MsdaConfig) -> Result<Adapter> {
    let sources = (0..3).map(|i| domain(i, 100 + 50 * i as u8)).collect();
    Adapter::from_parts(task, variant, cfg, &spec(), sources, domain(3, 200), Normalization::default())
}

fn run(task: &TransferTask, variant: Variant, cfg: &MsdaConfig) -> (Vec<MsdaLogLine>, Vec<(String, Vec<f32>)>) {
    let mut a = adapter(task, variant, cfg).unwrap();
    let log = (0..cfg.steps).map(|s| a.step(s).unwrap()).collect();
    let params = a
        .net
        .store()
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.flatten_all().unwrap().to_vec1::<f32>().unwrap()))
        .collect();
    (log, params)
}

#[test]
fn equal_distances_give_uniform_weights() {
    let w = distance_to_weights(&[0.7, 0.7, 0.7], 0.3).unwrap();
    assert_eq!(w.weights, uniform_weights(3).weights);
}

#[test]
fn closed_form_weights() {
    let tau = 0.8;
    let w = distance_to_weights(&[0.0, std::f64::consts::LN_2 * tau], tau).unwrap().weights;
    assert!((w[0] - 2.0 / 3.0).abs() < 1e-9 && (w[1] - 1.0 / 3.0).abs() < 1e-9);
}

#[test]
fn small_temperature_picks_nearest_source() {
    let d = [0.9, 0.4, 0.65];
    let gap = 0.25;
    let w = distance_to_weights(&d, gap / 20.0).unwrap().weights;
    assert!(w[1] > 0.99);
}

#[test]
fn weight_preconditions() {
    assert!(distance_to_weights(&[], 1.0).is_err());
    assert!(distance_to_weights(&[0.1], 0.0).is_err());
    assert!(distance_to_weights(&[-0.1, 0.2], 1.0).is_err());
    assert!(distance_to_weights(&[f64::NAN], 1.0).is_err());
    assert_eq!(distance_to_weights(&[3.0], 1.0).unwrap().weights, vec![1.0]);
}

#[test]
fn variant_names_round_trip() {
    for v in Variant::ALL {
        assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
    }
    assert!("gamma".parse::<Variant>().is_err());
}

#[test]
fn task_validation() {
    let mut t = task(None);
    t.validate().unwrap();
    t.source_domain_ids.push(3);
    assert!(matches!(t.validate(), Err(Error::Precondition(_))));
    assert!(task(Some(vec![0.1])).validate().is_err());
}

#[test]
fn moment_distance_of_shifted_batch() {
    let a = Tensor::randn(0f64, 1.0, (16, 5), &Device::Cpu).unwrap();
    let b = (&a + 2.0).unwrap();
    let same = losses::scalar(&moment_distance(&a, &a).unwrap()).unwrap();
    let shifted = losses::scalar(&moment_distance(&a, &b).unwrap()).unwrap();
    assert_eq!(same, 0.0);
    assert!((shifted - 4.0).abs() < 1e-9);
}

#[test]
fn weighted_variant_needs_distances() {
    let err = adapter(&task(None), Variant::Beta, &config(1, 4)).err().unwrap();
    assert!(matches!(err, Error::Precondition(_)));
    assert!(adapter(&task(None), Variant::UniformBeta, &config(1, 4)).is_ok());
}

#[test]
fn equal_weights_match_uniform_runs_bit_for_bit() {
    let t = task(Some(vec![0.5, 0.5, 0.5]));
    let cfg = config(3, 4);
    assert_eq!(run(&t, Variant::Alpha, &cfg), run(&t, Variant::UniformAlpha, &cfg));
    assert_eq!(run(&t, Variant::Beta, &cfg), run(&t, Variant::UniformBeta, &cfg));
}

#[test]
fn variants_log_their_alignment_terms() {
    let t = task(Some(vec![0.1, 0.5, 0.9]));
    let cfg = config(2, 4);
    let (alpha, _) = run(&t, Variant::Alpha, &cfg);
    assert!(alpha
        .iter()
        .all(|l| l.align.iter().all(Option::is_some) && l.discriminator.is_none()));
    let (beta, _) = run(&t, Variant::Beta, &cfg);
    assert!(beta
        .iter()
        .all(|l| l.align.iter().all(Option::is_some) && l.discriminator.is_some()));
    let (plain, _) = run(&t, Variant::SourceOnly, &cfg);
    assert!(plain.iter().all(|l| l.align.iter().all(Option::is_none)));
}

#[test]
fn single_example_batches_skip_moments() {
    let (log, _) = run(&task(Some(vec![0.1, 0.5, 0.9])), Variant::Alpha, &config(2, 1));
    assert!(log.iter().all(|l| l.align.iter().all(Option::is_none)));
}

#[test]
fn single_source_task_has_unit_weight() {
    let t = TransferTask {
        name: "one".into(),
        source_domain_ids: vec![0],
        target_domain_id: 3,
        distances: Some(vec![0.4]),
    };
    let a = Adapter::from_parts(
        &t,
        Variant::Beta,
        &config(1, 4),
        &spec(),
        vec![domain(0, 255)],
        domain(3, 255),
        Normalization::default(),
    )
    .unwrap();
    assert_eq!(a.weights.weights, vec![1.0]);
}

#[test]
fn target_accuracy_is_a_fraction() {
    let mut a = adapter(&task(None), Variant::SourceOnly, &config(2, 4)).unwrap();
    a.step(0).unwrap();
    let acc = a.target_accuracy().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn report_rows_append() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join(REPORT_FILE);
    for seed in 0..2 {
        let row = MsdaRow {
            task: "t".into(),
            variant: "beta".into(),
            seed,
            accuracy: 0.5,
        };
        append_row(&p, &row).unwrap();
    }
    let rows = read_rows(&p).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1].seed, 1);
}

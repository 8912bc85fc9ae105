use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};

use domain2vec::datagen::CorpusConfig;
use domain2vec::embedding::EmbeddingConfig;
use domain2vec::eval::ExperimentConfig;
use domain2vec::msda::MsdaConfig;
use domain2vec::training::TrainConfig;

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

/// Checks that the shipped file parses to the `Default` value; `UPDATE_CONFIGS=1` rewrites it.
fn check<T: Default + PartialEq + std::fmt::Debug + Serialize + DeserializeOwned>(name: &str) {
    let path = configs_dir().join(name);
    let default = T::default();
    if std::env::var_os("UPDATE_CONFIGS").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(&default).unwrap() + "\n").unwrap();
    }
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let parsed: T = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed, default, "{name} is out of date; rerun with UPDATE_CONFIGS=1");
}

#[test]
fn shipped_configs_match_defaults() {
    check::<CorpusConfig>("corpus.json");
    check::<TrainConfig>("train.json");
    check::<EmbeddingConfig>("embedding.json");
    check::<MsdaConfig>("msda.json");
    check::<ExperimentConfig>("experiment.json");
}

#[test]
fn desk_configs_load() {
    let corpus = CorpusConfig::load(&configs_dir().join("desk-corpus.json")).unwrap();
    assert_eq!(corpus.domains.as_ref().map(Vec::len), Some(9));
    let exp = ExperimentConfig::load(&configs_dir().join("desk-experiment.json")).unwrap();
    assert_eq!(exp.train.optimizer.lr, 1e-3);
    assert_eq!(exp.train.weights.w3, 0.001);
    assert_eq!(exp.seeds, vec![0, 1, 2]);
}

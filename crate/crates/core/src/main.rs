use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use domain2vec::datagen::{build_corpus, CorpusConfig, DatasetManifest, Scale};
use domain2vec::embedding::{embed_manifest, EmbeddingConfig, EmbeddingSet};
use domain2vec::eval::{self, AblationTag, ExperimentConfig, TransferReport};
use domain2vec::model::Checkpoint;
use domain2vec::msda::{run_msda, MsdaConfig, TransferTask, Variant};
use domain2vec::training::{fit, TrainConfig};
use domain2vec::{Error, Result};

#[derive(Parser)]
#[command(
    name = "domain2vec",
    version,
    about = "Domain embeddings, transfer analysis and multi-source adaptation"
)]
struct Cli {
    /// Seed override for the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration for the command.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-domain corpus.
    Generate {
        /// Domain grid: `desk` (3 families) or `full` (6 families).
        #[arg(long, default_value = "desk")]
        scale: Scale,
    },
    /// Train the embedding network on a corpus.
    Train {
        /// Corpus manifest written by `generate`.
        #[arg(long)]
        manifest: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Compute domain embeddings, distances and reduced coordinates.
    Embed {
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated domain ids; all when omitted.
        #[arg(long, value_delimiter = ',')]
        domains: Option<Vec<u32>>,
    },
    /// Build the k-nearest-neighbour graph from saved embeddings.
    Graph {
        /// Directory written by `embed`; the graph is written beside it unless `--out` is given.
        #[arg(long)]
        embeddings: PathBuf,
        /// Neighbours per domain; the saved embedding config when omitted.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Multi-source adaptation for one task and variant.
    Msda {
        /// Task JSON: name, source_domain_ids, target_domain_id and optional distances.
        #[arg(long)]
        task: PathBuf,
        /// alpha, beta, uniform-alpha, uniform-beta or source-only.
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        manifest: PathBuf,
        /// Saved embeddings supplying source distances when the task has none.
        #[arg(long)]
        embeddings: Option<PathBuf>,
    },
    /// Accuracy matrix, embeddings, correlation and ablations.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to these ablation tags.
        #[arg(long, value_delimiter = ',')]
        tags: Option<Vec<AblationTag>>,
    },
    /// Re-render a report from a finished eval run directory.
    Report {
        /// Eval run directory, `{experiment}/{tag}/{seed}`.
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_or_default<T: Default>(path: Option<&Path>, load: impl Fn(&Path) -> Result<T>) -> Result<T> {
    path.map_or_else(|| Ok(T::default()), load)
}

fn require_out(out: Option<PathBuf>) -> Result<PathBuf> {
    out.ok_or_else(|| Error::Precondition("--out is required".into()))
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Generate { scale } => {
            let out = require_out(cli.out)?;
            let cfg = load_or_default(config, CorpusConfig::load)?;
            let m = build_corpus(&cfg, scale, cli.seed.unwrap_or(0), &out)?;
            Ok(json!({ "manifest": out.join(domain2vec::datagen::MANIFEST_FILE), "domains": m.num_domains() }))
        }
        Command::Train { manifest, resume } => {
            let out = require_out(cli.out)?;
            let mut cfg = load_or_default(config, TrainConfig::load)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let m = DatasetManifest::load(&manifest)?;
            let r = fit(&cfg, &m, &out, resume.as_deref())?;
            Ok(json!({ "checkpoint": r.checkpoint, "steps": r.steps, "last_epoch": r.last_epoch }))
        }
        Command::Embed {
            manifest,
            checkpoint,
            domains,
        } => {
            let out = require_out(cli.out)?;
            let mut cfg = load_or_default(config, load_json::<EmbeddingConfig>)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let m = DatasetManifest::load(&manifest)?;
            let net = Checkpoint::load(&checkpoint)?.to_net()?;
            let ids = domains.unwrap_or_else(|| (0..m.num_domains() as u32).collect());
            let raw = embed_manifest(&net, &m, &ids, cfg.gram_layers)?;
            let labels = ids.iter().map(|&id| Ok(m.domain(id)?.spec.label())).collect::<Result<Vec<_>>>()?;
            let set = EmbeddingSet::build(&raw, labels, &cfg)?;
            set.save(&out)?;
            Ok(json!({ "embeddings": out, "domains": ids.len(), "raw_dim": set.raw_dim }))
        }
        Command::Graph { embeddings, k } => {
            let mut set = EmbeddingSet::load(&embeddings)?;
            if let Some(k) = k {
                set.config.knn = k;
            }
            let out = cli.out.unwrap_or(embeddings);
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let g = set.graph()?;
            write(&out.join("graph.dot"), &g.to_dot())?;
            write(
                &out.join("graph.json"),
                &serde_json::to_string_pretty(&g).expect("graph serializes"),
            )?;
            Ok(json!({ "graph": out.join("graph.json"), "edges": g.edges.len() }))
        }
        Command::Msda {
            task,
            variant,
            manifest,
            embeddings,
        } => {
            let out = require_out(cli.out)?;
            let mut cfg = load_or_default(config, MsdaConfig::load)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let mut task = TransferTask::load(&task)?;
            if task.distances.is_none() {
                if let Some(dir) = embeddings {
                    task = task.with_embedding(&EmbeddingSet::load(&dir)?)?;
                }
            }
            let m = DatasetManifest::load(&manifest)?;
            let r = run_msda(&task, variant, &cfg, &m, Some(&out))?;
            Ok(json!({ "row": r.row, "weights": r.weights, "run_dir": r.run_dir }))
        }
        Command::Eval { manifest, tags } => {
            let out = require_out(cli.out)?;
            let mut cfg = load_or_default(config, ExperimentConfig::load)?;
            if let Some(s) = cli.seed {
                cfg.seeds = vec![s];
            }
            if let Some(t) = tags {
                cfg.tags = t;
            }
            let m = DatasetManifest::load(&manifest)?;
            let mut rows = Vec::new();
            for &seed in &cfg.seeds {
                let r = eval::run_seed(&cfg, &m, seed, &out)?;
                for (rep, _) in &r.reports {
                    rows.push(json!({
                        "tag": rep.tag, "seed": seed, "pcc": rep.pcc,
                        "diagonal_mean": rep.diagonal_mean, "off_diagonal_mean": rep.off_diagonal_mean,
                    }));
                }
            }
            Ok(json!({ "experiment": cfg.name, "runs": rows }))
        }
        Command::Report { run } => {
            let report: TransferReport = load_json(&run.join("report.json"))?;
            let set = EmbeddingSet::load(&run.join("embeddings"))?;
            let out = cli.out.unwrap_or(run);
            let files = eval::write_report(&out, &report, &set)?;
            Ok(json!({ "markdown": files.markdown, "pcc": report.pcc }))
        }
    }
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

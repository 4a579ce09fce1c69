use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aga_core::agm::write_mask_records;
use aga_core::config::RunConfig;
use aga_core::corpus::{generate_corpus, read_corpus, write_corpus, AttributeSpec, Corpus, PATCH_VERSION};
use aga_core::encoders::{Checkpoint, CHECKPOINT_VERSION};
use aga_core::eval::{dump_attention_many, evaluate_retrieval, run_strategy_ablation, write_jsonl, write_metrics, RerankOptions};
use aga_core::train::{checkpoint_config, load_checkpoint, write_train_log, Trainer, CHECKPOINT_FORMAT};
use aga_core::{Error, Exec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

/// Version of every text artifact this binary writes (CSV and JSONL).
const TEXT_FORMAT_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "aga", version, about = "Attention-guided masking experiments on a synthetic person-description corpus")]
struct Cli {
    /// Directory under which run directories are created.
    #[arg(long, env = "AGA_RUN_ROOT", default_value = "runs", global = true)]
    run_root: PathBuf,

    /// Run directory name; defaults to `<command>-seed<seed>`.
    #[arg(long, global = true)]
    name: Option<String>,

    /// Run on one thread instead of the rayon pool.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; every key is optional.
    #[arg(long, short)]
    config: Option<PathBuf>,

    /// `section.key=value`, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus described by the config.
    GenCorpus(ConfigArgs),
    /// Train a model and write its checkpoint and training log.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corpus directory from `gen-corpus`; regenerated from the config when absent.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Text-to-image retrieval metrics of a checkpoint on the held-out identities.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Re-rank each query's top candidates with the matching head.
        #[arg(long)]
        rerank: bool,
    },
    /// Train every masking strategy over several seeds and tabulate Ratio_v and retrieval.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Dump per-token attention scores, mask probabilities and cross-attention rows.
    AnalyzeMasks {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Analyze at most this many sentences.
        #[arg(long)]
        limit: Option<usize>,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig, Error> {
    match &args.config {
        Some(path) => RunConfig::load(path, &args.set),
        None => RunConfig::from_toml("", &args.set),
    }
}

fn load_corpus(dir: Option<&Path>, config: &RunConfig, exec: Exec) -> Result<Corpus, Error> {
    match dir {
        Some(d) => read_corpus(d),
        None => generate_corpus(&AttributeSpec::standard(), &config.corpus_options(), exec),
    }
}

struct RunDir {
    path: PathBuf,
    command: &'static str,
    config: RunConfig,
    files: Vec<&'static str>,
    inputs: serde_json::Map<String, serde_json::Value>,
}

impl RunDir {
    fn create(cli: &Cli, command: &'static str, config: &RunConfig) -> Result<Self, Error> {
        let name = cli
            .name
            .clone()
            .unwrap_or_else(|| format!("{command}-seed{}", config.train.seed));
        let path = cli.run_root.join(name);
        std::fs::create_dir_all(&path)?;
        Ok(Self {
            path,
            command,
            config: config.clone(),
            files: Vec::new(),
            inputs: serde_json::Map::new(),
        })
    }

    fn file(&mut self, name: &'static str) -> PathBuf {
        self.files.push(name);
        self.path.join(name)
    }

    fn input(&mut self, key: &str, path: Option<&Path>) {
        if let Some(p) = path {
            self.inputs.insert(key.into(), json!(p.display().to_string()));
        }
    }

    /// Writes the effective config, the seed and the manifest.
    fn finish(self) -> Result<PathBuf, Error> {
        std::fs::write(self.path.join("config.toml"), self.config.to_toml())?;
        std::fs::write(self.path.join("seed"), format!("{}\n", self.config.train.seed))?;
        let manifest = json!({
            "command": self.command,
            "tool_version": env!("CARGO_PKG_VERSION"),
            "seed": self.config.train.seed,
            "formats": {
                "checkpoint": { "id": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION },
                "patches": PATCH_VERSION,
                "train_log": TEXT_FORMAT_VERSION,
                "metrics": TEXT_FORMAT_VERSION,
                "ablation_report": TEXT_FORMAT_VERSION,
                "mask_records": TEXT_FORMAT_VERSION,
                "attention_dump": TEXT_FORMAT_VERSION,
            },
            "inputs": self.inputs,
            "files": self.files,
        });
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format {
            what: "manifest",
            message: e.to_string(),
        })?;
        std::fs::write(self.path.join("manifest.json"), text + "\n")?;
        Ok(self.path)
    }
}

fn run(cli: &Cli) -> Result<PathBuf, Error> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    match &cli.command {
        Command::GenCorpus(args) => {
            let config = load_config(args)?;
            let corpus = load_corpus(None, &config, exec)?;
            let mut dir = RunDir::create(cli, "gen-corpus", &config)?;
            write_corpus(&corpus, &dir.file("corpus"))?;
            println!(
                "{} records, {} identities, vacuous token fraction {:.3}",
                corpus.len(),
                corpus.num_identities(),
                corpus.vacuous_token_fraction()
            );
            dir.finish()
        }
        Command::Train { config, corpus } => {
            let config = load_config(config)?;
            let data = load_corpus(corpus.as_deref(), &config, exec)?;
            let mut trainer = Trainer::new(&config, &data)?;
            let outcome = trainer.fit()?;
            let mut dir = RunDir::create(cli, "train", &config)?;
            dir.input("corpus", corpus.as_deref());
            trainer.checkpoint().save(&dir.file("model.ckpt"))?;
            write_train_log(&dir.file("train_log.csv"), &outcome.log)?;
            write_mask_records(&dir.file("masks.jsonl"), &outcome.final_masks)?;
            write_jsonl(&dir.file("replacements.jsonl"), &outcome.final_replacements)?;
            if let Some(last) = outcome.log.last() {
                println!("{} steps, final total loss {:.4}", last.step, last.losses.total);
            }
            if let Some(r) = outcome.ratio_v(&data.vocab) {
                println!("final-epoch Ratio_v {r:.4}");
            }
            dir.finish()
        }
        Command::Eval {
            checkpoint,
            corpus,
            rerank,
        } => {
            let probe = load_checkpoint_config(checkpoint)?;
            let data = load_corpus(corpus.as_deref(), &probe, exec)?;
            let loaded = load_checkpoint(checkpoint, &data)?;
            let cfg = &loaded.config;
            let rerank = (*rerank || cfg.eval.rerank).then_some(RerankOptions {
                top_k: cfg.eval.rerank_top_k,
            });
            let result = evaluate_retrieval(
                &loaded.model,
                &loaded.pair.online,
                &data,
                cfg.eval.test_identities,
                rerank,
                exec,
            )?;
            let mut dir = RunDir::create(cli, "eval", cfg)?;
            dir.input("checkpoint", Some(checkpoint));
            dir.input("corpus", corpus.as_deref());
            write_metrics(&dir.file("metrics.csv"), &result.metrics)?;
            let m = result.metrics;
            println!(
                "R@1 {:.4}  R@5 {:.4}  R@10 {:.4}  mAP {:.4}  ({} queries, gallery {})",
                m.r1,
                m.r5,
                m.r10,
                m.map,
                m.queries,
                result.gallery_ids.len()
            );
            dir.finish()
        }
        Command::Ablate { config, corpus } => {
            let config = load_config(config)?;
            let data = load_corpus(corpus.as_deref(), &config, exec)?;
            let report = run_strategy_ablation(&config, &data, exec)?;
            let mut dir = RunDir::create(cli, "ablate", &config)?;
            dir.input("corpus", corpus.as_deref());
            std::fs::write(dir.file("ablation_report.csv"), report.to_csv())?;
            println!("{:<9} {:>5} {:>16} {:>16}", "strategy", "seeds", "Ratio_v", "R@1");
            let show = |v: Option<aga_core::eval::MeanStd>| {
                v.map_or_else(|| "-".to_string(), |m| format!("{:.4} ± {:.4}", m.mean, m.std))
            };
            for s in &report.summary {
                println!("{:<9} {:>5} {:>16} {:>16}", s.strategy.as_str(), s.seeds, show(s.ratio_v), show(s.r1));
            }
            dir.finish()
        }
        Command::AnalyzeMasks {
            checkpoint,
            corpus,
            split,
            limit,
        } => {
            let probe = load_checkpoint_config(checkpoint)?;
            let data = load_corpus(corpus.as_deref(), &probe, exec)?;
            let loaded = load_checkpoint(checkpoint, &data)?;
            let cfg = &loaded.config;
            let (train, test) = data.split(cfg.eval.test_identities);
            let mut ids = match split {
                Split::Train => train,
                Split::Test => test,
                Split::All => (0..data.len()).collect(),
            };
            if let Some(n) = limit {
                ids.truncate(*n);
            }
            let dump = dump_attention_many(&loaded.model, &loaded.pair.online, cfg, &data, &ids, exec)?;
            let mut dir = RunDir::create(cli, "analyze-masks", cfg)?;
            dir.input("checkpoint", Some(checkpoint));
            dir.input("corpus", corpus.as_deref());
            write_jsonl(&dir.file("attention_dump.txt"), &dump.attention)?;
            write_mask_records(&dir.file("masks.jsonl"), &dump.tokens)?;
            let masked: Vec<usize> = dump.tokens.iter().filter(|r| r.masked).map(|r| r.token_id).collect();
            println!(
                "{} sentences, {} content tokens, {} masked, Ratio_v {}",
                ids.len(),
                dump.tokens.len(),
                masked.len(),
                aga_core::corpus::ratio_vacuous(masked, &data.vocab).map_or("-".into(), |r| format!("{r:.4}"))
            );
            dir.finish()
        }
    }
}

/// The run config stored in a checkpoint, read before the corpus exists.
fn load_checkpoint_config(path: &Path) -> Result<RunConfig, Error> {
    checkpoint_config(&Checkpoint::load(path)?)
}

fn category(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config { .. } => ("config", 2),
        Error::MissingFile(_) => ("missing-file", 3),
        Error::Format { .. } => ("format", 1),
        Error::Io(_) => ("io", 1),
        Error::Diverged(_) => ("diverged", 1),
        _ => ("internal", 1),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => {
            println!("run directory: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let (kind, code) = category(&e);
            eprintln!("error[{kind}]: {e}");
            ExitCode::from(code)
        }
    }
}

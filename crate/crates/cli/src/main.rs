use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use minigpt_core::calibration::{collect_stats, compare_stats, write_compare_csv, Aggregator, CalibrationOptions, StatsReport};
use minigpt_core::data::{read_entries, split_holdout};
use minigpt_core::eval::{load_mcq, mcq_eval, perplexity, McqScoring};
use minigpt_core::model::ModelConfig;
use minigpt_core::pipeline::{run_pipeline, PipelineConfig, Preset, RunManifest, ThresholdConfig};
use minigpt_core::pruning::{apply_plan, PruneReport, PrunePlan};
use minigpt_core::tensor::ActivationKind;
use minigpt_core::tokenizer::BpeTokenizer;
use minigpt_core::training::{recovery_target, train_with_hook, CheckpointEvent, OptimizerKind, TrainConfig};
use minigpt_core::{Error, ErrorClass, Model, Result};

#[derive(Parser)]
#[command(name = "minigpt", version, about = "Calibrate, contextually prune, fine-tune and evaluate small GPT decoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a byte-level BPE vocabulary from a corpus.
    TokenizerTrain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 512)]
        vocab_size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialize a model and train it from scratch.
    Pretrain(PretrainArgs),
    /// Collect per-neuron activation statistics on a dataset.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long)]
        max_entries: Option<usize>,
        #[arg(long, value_enum, default_value_t = AggregatorArg::Mean)]
        aggregator: AggregatorArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Turn statistics and thresholds into a prune plan.
    Plan {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        stats: PathBuf,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a prune plan, writing the smaller checkpoint.
    Prune {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a checkpoint, optionally until it recovers a base model's perplexity.
    Finetune(FinetuneArgs),
    /// Pooled perplexity on a text dataset.
    EvalPpl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Multiple-choice accuracy by lowest perplexity.
    EvalMcq {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        mcq: PathBuf,
        #[arg(long, default_value_t = 32)]
        seq_len: usize,
        #[arg(long, value_enum, default_value_t = ScoringArg::WholeSequence)]
        scoring: ScoringArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pair two statistics files neuron by neuron as CSV.
    CompareStats {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full run: base eval, calibrate, prune, fine-tune to recovery, report.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        thresholds: ThresholdArgs,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        seq_len: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum AggregatorArg {
    Mean,
    Max,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoringArg {
    WholeSequence,
    AnswerConditional,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Default,
    Aggressive,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ActivationArg {
    Gelu,
    Relu,
}

#[derive(Args)]
struct ThresholdArgs {
    /// Starting point; explicit thresholds override it.
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    threshold_linear: Option<f32>,
    #[arg(long)]
    threshold_act: Option<f32>,
    #[arg(long)]
    min_token_count: Option<u64>,
}

impl ThresholdArgs {
    fn apply(&self, cfg: &mut ThresholdConfig) {
        if let Some(p) = self.preset {
            cfg.preset = match p {
                PresetArg::Default => Preset::Default,
                PresetArg::Aggressive => Preset::Aggressive,
                PresetArg::None => Preset::None,
            };
        }
        cfg.linear = self.threshold_linear.or(cfg.linear);
        cfg.activation = self.threshold_act.or(cfg.activation);
        cfg.min_token_count = self.min_token_count.or(cfg.min_token_count);
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML file with a `[train]` table (and `[model]` for pretrain).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Held-out evaluation set; defaults to a seeded 10% split of the training data.
    #[arg(long)]
    eval: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Tokenizer JSON; byte-level when omitted.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    #[arg(long)]
    tie_lm_head: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Unpruned checkpoint whose perplexity on the evaluation set is the stopping target.
    #[arg(long)]
    base: Option<PathBuf>,
    #[arg(long, conflicts_with = "base")]
    target_perplexity: Option<f64>,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ModelSpec {
    n_layers: usize,
    d_model: usize,
    n_heads: usize,
    d_ff: usize,
    max_seq: usize,
    activation: ActivationArg,
    tie_lm_head: bool,
    init_seed: Option<u64>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            d_ff: 128,
            max_seq: 32,
            activation: ActivationArg::Gelu,
            tie_lm_head: false,
            init_seed: None,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: ModelSpec,
    train: TrainConfig,
}

fn read_train_file(path: Option<&Path>) -> Result<TrainFile> {
    match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))
        }
        None => Ok(TrainFile::default()),
    }
}

impl TrainArgs {
    fn resolve(&self, mut cfg: TrainConfig) -> TrainConfig {
        if let Some(v) = self.max_epochs {
            cfg.max_epochs = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.seq_len {
            cfg.seq_len = v;
        }
        if let Some(v) = self.learning_rate {
            cfg.learning_rate = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.optimizer {
            cfg.optimizer = match v {
                OptimizerArg::Sgd => OptimizerKind::Sgd,
                OptimizerArg::Adam => OptimizerKind::default(),
            };
        }
        if self.checkpoint_every.is_some() {
            cfg.checkpoint_every = self.checkpoint_every;
        }
        cfg
    }

    /// Training and evaluation entries.
    fn datasets(&self, data: &Path, seed: u64, manifest: &mut RunManifest) -> Result<(Vec<String>, Vec<String>)> {
        let entries = read_entries(data)?;
        manifest.add_input(data)?;
        match &self.eval {
            Some(p) => {
                manifest.add_input(p)?;
                Ok((entries, read_entries(p)?))
            }
            None => Ok(split_holdout(&entries, 0.1, seed)),
        }
    }
}

/// `<out>.manifest.json` next to an artifact.
fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().unwrap_or_default().to_string_lossy();
    out.with_file_name(format!("{stem}{suffix}"))
}

fn load_model(path: &Path, manifest: &mut RunManifest) -> Result<Model> {
    let m = Model::load(path)?;
    manifest.add_input(path)?;
    Ok(m)
}

fn finish(manifest: &mut RunManifest, outputs: &[&Path], primary: &Path) -> Result<()> {
    for o in outputs {
        manifest.add_output(o)?;
    }
    manifest.save(manifest_path(primary))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TokenizerTrain { corpus, vocab_size, out } => {
            let mut manifest = RunManifest::new("tokenizer-train", &serde_json::json!({ "vocab_size": vocab_size }));
            let entries = read_entries(&corpus)?;
            manifest.add_input(&corpus)?;
            let tok = BpeTokenizer::train(&entries, vocab_size)?;
            tok.save(&out)?;
            finish(&mut manifest, &[&out], &out)?;
            println!("tokenizer with {} tokens ({} merges) -> {}", tok.vocab_size(), tok.merges().len(), out.display());
        }
        Command::Pretrain(args) => {
            let file = read_train_file(args.train.config.as_deref())?;
            let mut spec = file.model;
            spec.n_layers = args.n_layers.unwrap_or(spec.n_layers);
            spec.d_model = args.d_model.unwrap_or(spec.d_model);
            spec.n_heads = args.n_heads.unwrap_or(spec.n_heads);
            spec.d_ff = args.d_ff.unwrap_or(spec.d_ff);
            spec.max_seq = args.max_seq.unwrap_or(spec.max_seq);
            spec.activation = args.activation.unwrap_or(spec.activation);
            spec.tie_lm_head |= args.tie_lm_head;
            let cfg = args.train.resolve(file.train);
            let mut manifest = RunManifest::new("pretrain", &serde_json::json!({ "model": spec, "train": cfg }));
            let tokenizer = match &args.tokenizer {
                Some(p) => {
                    manifest.add_input(p)?;
                    BpeTokenizer::load(p)?
                }
                None => BpeTokenizer::byte_level(),
            };
            let config = ModelConfig {
                n_layers: spec.n_layers,
                d_model: spec.d_model,
                n_heads: spec.n_heads,
                d_ff: vec![spec.d_ff; spec.n_layers],
                vocab_size: tokenizer.vocab_size(),
                max_seq: spec.max_seq,
                activation: match spec.activation {
                    ActivationArg::Gelu => ActivationKind::Gelu,
                    ActivationArg::Relu => ActivationKind::Relu,
                },
                tie_lm_head: spec.tie_lm_head,
                layernorm_eps: 1e-5,
            };
            let mut model = Model::init(config, tokenizer, spec.init_seed.unwrap_or(cfg.seed))?;
            let (train_set, eval_set) = args.train.datasets(&args.corpus, cfg.seed, &mut manifest)?;
            let history = train_and_checkpoint(&mut model, &train_set, &cfg, &eval_set, &args.out)?;
            model.save(&args.out)?;
            let (hj, hc) = (sibling(&args.out, ".history.json"), sibling(&args.out, ".history.csv"));
            history.save(&hj, &hc)?;
            finish(&mut manifest, &[&args.out, &hj, &hc], &args.out)?;
            let last = history.epochs.last().expect("at least one epoch");
            println!(
                "{} params, {} epochs, final loss {:.4}, held-out perplexity {:.4} -> {}",
                model.param_count(),
                history.epochs.len(),
                last.loss,
                last.perplexity,
                args.out.display()
            );
        }
        Command::Calibrate {
            model,
            data,
            seq_len,
            max_entries,
            aggregator,
            out,
        } => {
            let aggregator = match aggregator {
                AggregatorArg::Mean => Aggregator::Mean,
                AggregatorArg::Max => Aggregator::Max,
            };
            let mut options = CalibrationOptions::new(seq_len, data.file_stem().unwrap_or_default().to_string_lossy());
            options.max_entries = max_entries;
            options.aggregator = aggregator;
            let mut manifest = RunManifest::new("calibrate", &options);
            let m = load_model(&model, &mut manifest)?;
            let entries = read_entries(&data)?;
            manifest.add_input(&data)?;
            let stats = collect_stats(&m, &entries, &options)?;
            stats.save(&out)?;
            finish(&mut manifest, &[&out], &out)?;
            println!(
                "{} sites over {} token positions ({} entries, {} skipped) -> {}",
                stats.sites.len(),
                stats.n_tok,
                stats.entries_used,
                stats.skipped_entries,
                out.display()
            );
        }
        Command::Plan {
            model,
            stats,
            thresholds,
            out,
        } => {
            let mut tc = ThresholdConfig::default();
            thresholds.apply(&mut tc);
            let resolved = tc.resolve();
            let mut manifest = RunManifest::new("plan", &resolved);
            let m = load_model(&model, &mut manifest)?;
            let s = StatsReport::load(&stats)?;
            manifest.add_input(&stats)?;
            let plan = PrunePlan::build(&m, &s, resolved)?;
            plan.save(&out)?;
            finish(&mut manifest, &[&out], &out)?;
            println!(
                "drop {} hidden units, keep {}/{} tokens, predicted relative size {:.3}% -> {}",
                plan.dropped_units(),
                plan.keep_tokens.len(),
                plan.base_config.vocab_size,
                100.0 * plan.predicted_param_count as f64 / plan.base_param_count as f64,
                out.display()
            );
        }
        Command::Prune { model, plan, out } => {
            let mut manifest = RunManifest::new("prune", &serde_json::json!({}));
            let m = load_model(&model, &mut manifest)?;
            let p = PrunePlan::load(&plan)?;
            manifest.add_input(&plan)?;
            let (pruned, _) = apply_plan(m, &p)?;
            let report = PruneReport::new(&p, &pruned);
            pruned.save(&out)?;
            let (rj, rt) = (sibling(&out, ".prune_report.json"), sibling(&out, ".prune_report.txt"));
            write(&rj, report.to_json())?;
            write(&rt, report.to_text())?;
            finish(&mut manifest, &[&out, &rj, &rt], &out)?;
            print!("{}", report.to_text());
        }
        Command::Finetune(args) => {
            let file = read_train_file(args.train.config.as_deref())?;
            let mut cfg = args.train.resolve(file.train);
            let mut manifest = RunManifest::new("finetune", &cfg);
            let mut model = load_model(&args.model, &mut manifest)?;
            let (train_set, eval_set) = args.train.datasets(&args.data, cfg.seed, &mut manifest)?;
            if let Some(base) = &args.base {
                let b = load_model(base, &mut manifest)?;
                cfg.target_perplexity = Some(recovery_target(&b, &eval_set, cfg.seq_len)?);
            } else if args.target_perplexity.is_some() {
                cfg.target_perplexity = args.target_perplexity;
            }
            manifest.config = serde_json::to_value(&cfg)?;
            let history = train_and_checkpoint(&mut model, &train_set, &cfg, &eval_set, &args.out)?;
            model.save(&args.out)?;
            let (hj, hc) = (sibling(&args.out, ".history.json"), sibling(&args.out, ".history.csv"));
            history.save(&hj, &hc)?;
            finish(&mut manifest, &[&args.out, &hj, &hc], &args.out)?;
            let recovery = history.recovery_epochs.map_or_else(|| "not reached".into(), |e| format!("epoch {e}"));
            println!(
                "{} epochs, final perplexity {:.4}, recovery {} -> {}",
                history.epochs.len(),
                history.epochs.last().expect("at least one epoch").perplexity,
                recovery,
                args.out.display()
            );
        }
        Command::EvalPpl { model, data, seq_len, out } => {
            let mut manifest = RunManifest::new("eval-ppl", &serde_json::json!({ "seq_len": seq_len }));
            let m = load_model(&model, &mut manifest)?;
            let entries = read_entries(&data)?;
            manifest.add_input(&data)?;
            let report = perplexity(&m, &entries, seq_len)?;
            report.save(&out)?;
            finish(&mut manifest, &[&out], &out)?;
            print!("{}", report.to_table());
        }
        Command::EvalMcq {
            model,
            mcq,
            seq_len,
            scoring,
            out,
        } => {
            let scoring = match scoring {
                ScoringArg::WholeSequence => McqScoring::WholeSequence,
                ScoringArg::AnswerConditional => McqScoring::AnswerConditional,
            };
            let mut manifest = RunManifest::new("eval-mcq", &serde_json::json!({ "seq_len": seq_len, "scoring": scoring }));
            let m = load_model(&model, &mut manifest)?;
            let items = load_mcq(&mcq)?;
            manifest.add_input(&mcq)?;
            let report = mcq_eval(&m, &items, seq_len, scoring)?;
            report.save(&out)?;
            finish(&mut manifest, &[&out], &out)?;
            print!("{}", report.to_table());
        }
        Command::CompareStats { a, b, out } => {
            let mut manifest = RunManifest::new("compare-stats", &serde_json::json!({}));
            let (sa, sb) = (StatsReport::load(&a)?, StatsReport::load(&b)?);
            manifest.add_input(&a)?;
            manifest.add_input(&b)?;
            let rows = compare_stats(&sa, &sb)?;
            let mut buf = Vec::new();
            write_compare_csv(&rows, &mut buf)?;
            write(&out, buf)?;
            finish(&mut manifest, &[&out], &out)?;
            println!("{} rows -> {}", rows.len(), out.display());
        }
        Command::Pipeline {
            config,
            thresholds,
            max_epochs,
            seed,
            seq_len,
            out,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            thresholds.apply(&mut cfg.thresholds);
            if let Some(v) = max_epochs {
                cfg.train.max_epochs = v;
            }
            if let Some(v) = seed {
                cfg.seed = v;
            }
            if let Some(v) = seq_len {
                cfg.seq_len = v;
            }
            if let Some(v) = out {
                cfg.paths.out = v;
            }
            let report = run_pipeline(&cfg)?;
            print!("{}", report.to_markdown());
        }
    }
    Ok(())
}

fn train_and_checkpoint(
    model: &mut Model,
    train_set: &[String],
    cfg: &TrainConfig,
    eval_set: &[String],
    out: &Path,
) -> Result<minigpt_core::training::TrainHistory> {
    train_with_hook(model, train_set, cfg, eval_set, |epoch, m, event| {
        let path = match event {
            CheckpointEvent::Periodic => sibling(out, &format!(".epoch{epoch}.mgpt")),
            CheckpointEvent::Recovered => sibling(out, ".recovered.mgpt"),
        };
        m.save(path)
    })
}

/// Process exit status for each error class; 2 is clap's usage error.
fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Config => 3,
        ErrorClass::Io => 4,
        ErrorClass::Format => 5,
        ErrorClass::Fingerprint => 6,
        ErrorClass::Data => 7,
        ErrorClass::Numerical => 8,
        ErrorClass::Contract => 9,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error ({:?}): {e}", e.class());
            ExitCode::from(exit_code(e.class()))
        }
    }
}

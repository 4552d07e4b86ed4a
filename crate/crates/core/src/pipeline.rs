//! End-to-end run: base eval, calibrate, plan and prune, post-prune eval,
//! fine-tune to recovery, final eval, report row.
//!
//! Configuration is a TOML document:
//!
//! ```toml
//! seed = 0
//! seq_len = 32
//! holdout_fraction = 0.1
//! mcq_scoring = "whole_sequence"
//!
//! [paths]
//! model = "base.mgpt"
//! calibration = "arith.txt"
//! out = "run"
//! # tokenizer = "tok.json"     optional; must match the checkpoint's tokenizer
//! # mcq = "arith_mcq.jsonl"    optional
//! [paths.extra_domains]
//! letters = "letters.txt"
//!
//! [thresholds]
//! preset = "default"           # "default", "aggressive" or "none"
//! # linear = 1e-3              explicit values override the preset
//! # activation = 1e-3
//! # min_token_count = 0
//!
//! [train]
//! learning_rate = 3e-4
//! batch_size = 8
//! max_epochs = 200
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! `seed` and `seq_len` apply to the split, calibration, training and
//! evaluation alike.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibration::{collect_stats, CalibrationOptions};
use crate::data::{read_entries, split_holdout};
use crate::error::{Error, Result};
use crate::eval::{load_mcq, mcq_eval, perplexity, McqScoring};
use crate::model::checkpoint::fingerprint_bytes;
use crate::model::ModelBundle;
use crate::pruning::{apply_plan, relative_size, PruneReport, PrunePlan, Thresholds};
use crate::tokenizer::BpeTokenizer;
use crate::training::{recovery_target, train_with_hook, CheckpointEvent, TrainConfig};

/// Threshold applied to both hidden-unit criteria by the `aggressive` preset.
///
/// Scaled to desk-scale models: their median hidden-unit statistic on the
/// calibration domain sits near this value, so it removes a large share of
/// units without zeroing whole layers the way `1e-1` does at this size.
pub const AGGRESSIVE_THRESHOLD: f32 = 5e-2;
pub const DEFAULT_THRESHOLD: f32 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Both hidden-unit thresholds at `1e-3`, tokens kept iff seen.
    #[default]
    Default,
    /// Both hidden-unit thresholds at [`AGGRESSIVE_THRESHOLD`], tokens kept iff seen.
    Aggressive,
    /// Nothing pruned unless set explicitly.
    None,
}

impl Preset {
    pub fn thresholds(self) -> Thresholds {
        let hidden = |e| Thresholds {
            linear: Some(e),
            activation: Some(e),
            min_token_count: Some(0),
        };
        match self {
            Preset::Default => hidden(DEFAULT_THRESHOLD),
            Preset::Aggressive => hidden(AGGRESSIVE_THRESHOLD),
            Preset::None => Thresholds::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    pub preset: Preset,
    pub linear: Option<f32>,
    pub activation: Option<f32>,
    pub min_token_count: Option<u64>,
}

impl ThresholdConfig {
    pub fn resolve(&self) -> Thresholds {
        let base = self.preset.thresholds();
        Thresholds {
            linear: self.linear.or(base.linear),
            activation: self.activation.or(base.activation),
            min_token_count: self.min_token_count.or(base.min_token_count),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    pub model: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer: Option<PathBuf>,
    /// Domain used for calibration, fine-tuning and the report row.
    pub calibration: PathBuf,
    /// Other domains, evaluated before and after pruning.
    #[serde(default)]
    pub extra_domains: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcq: Option<PathBuf>,
    pub out: PathBuf,
}

fn default_seq_len() -> usize {
    32
}

fn default_holdout() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default = "default_holdout")]
    pub holdout_fraction: f64,
    #[serde(default)]
    pub mcq_scoring: McqScoring,
    pub paths: PathConfig,
    #[serde(default)]
    pub thresholds: ThresholdConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file, resolving relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        if let Some(dir) = path.parent() {
            cfg.resolve_paths(dir);
        }
        Ok(cfg)
    }

    fn resolve_paths(&mut self, dir: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        };
        let paths = &mut self.paths;
        fix(&mut paths.model);
        fix(&mut paths.calibration);
        fix(&mut paths.out);
        paths.tokenizer.as_mut().map(fix);
        paths.mcq.as_mut().map(fix);
        paths.extra_domains.values_mut().for_each(fix);
    }

    /// Training config with the pipeline-wide seed and sequence length applied.
    pub fn effective_train(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            seq_len: self.seq_len,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config(format!(
                "holdout_fraction must be in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        self.thresholds.resolve().validate()?;
        self.effective_train().validate()?;
        let p = &self.paths;
        let inputs = [Some(&p.model), Some(&p.calibration), p.tokenizer.as_ref(), p.mcq.as_ref()];
        for path in inputs.into_iter().flatten().chain(p.extra_domains.values()) {
            if !path.is_file() {
                return Err(Error::Io(std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    format!("input {} does not exist", path.display()),
                )));
            }
        }
        Ok(())
    }
}

/// Provenance record written next to every artifact.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    /// Input path to sha256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    /// Output file name to sha256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize) -> Self {
        RunManifest {
            tool: "minigpt".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config: serde_json::to_value(config).expect("config serializes"),
            ..Default::default()
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        self.inputs.insert(path.display().to_string(), fingerprint_bytes(&bytes));
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path)?;
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        self.outputs.insert(name, fingerprint_bytes(&bytes));
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// The five report columns, plus the perplexity targets behind them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub base: f64,
    pub post_prune: f64,
    pub fine_tune: f64,
    pub recovery_epochs: Option<usize>,
    pub relative_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainRow {
    pub domain: String,
    pub base: f64,
    pub post_prune: f64,
    pub fine_tune: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McqRow {
    pub base: f64,
    pub post_prune: f64,
    pub fine_tune: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub config: PipelineConfig,
    pub thresholds: Thresholds,
    pub base_fingerprint: String,
    pub row: ReportRow,
    pub domains: Vec<DomainRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcq: Option<McqRow>,
    pub prune: PruneReport,
    pub epochs_run: usize,
}

impl PipelineReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_markdown(&self) -> String {
        let r = &self.row;
        let recovery = r.recovery_epochs.map_or_else(|| "-".to_string(), |e| e.to_string());
        let mut out = String::new();
        let _ = writeln!(out, "| Base | Post prune | Fine-tune | Recovery epochs | Relative Size (%) |");
        let _ = writeln!(out, "|---|---|---|---|---|");
        let _ = writeln!(
            out,
            "| {:.3} | {:.3} | {:.3} | {} | {:.3} |",
            r.base, r.post_prune, r.fine_tune, recovery, r.relative_size
        );
        if !self.domains.is_empty() {
            let _ = writeln!(out, "\n| Domain | Base | Post prune | Fine-tune |");
            let _ = writeln!(out, "|---|---|---|---|");
            for d in &self.domains {
                let _ = writeln!(out, "| {} | {:.3} | {:.3} | {:.3} |", d.domain, d.base, d.post_prune, d.fine_tune);
            }
        }
        if let Some(m) = &self.mcq {
            let _ = writeln!(out, "\n| MCQ accuracy (%) | Base | Post prune | Fine-tune |");
            let _ = writeln!(out, "|---|---|---|---|");
            let _ = writeln!(out, "| | {:.1} | {:.1} | {:.1} |", m.base, m.post_prune, m.fine_tune);
        }
        out
    }
}

/// Runs every stage and writes its artifacts into `config.paths.out`.
pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineReport> {
    config.validate()?;
    let out = &config.paths.out;
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest::new("pipeline", config);

    let base = ModelBundle::<f32>::load(&config.paths.model)?;
    manifest.add_input(&config.paths.model)?;
    if let Some(tok_path) = &config.paths.tokenizer {
        let tok = BpeTokenizer::load(tok_path)?;
        if tok != base.tokenizer {
            return Err(Error::Config(format!(
                "tokenizer {} differs from the checkpoint's tokenizer",
                tok_path.display()
            )));
        }
        manifest.add_input(tok_path)?;
    }
    let domain = read_entries(&config.paths.calibration)?;
    manifest.add_input(&config.paths.calibration)?;
    let (train_set, held) = split_holdout(&domain, config.holdout_fraction, config.seed);
    let mut extra = Vec::new();
    for (name, path) in &config.paths.extra_domains {
        extra.push((name.clone(), read_entries(path)?));
        manifest.add_input(path)?;
    }
    let mcq = match &config.paths.mcq {
        Some(p) => {
            manifest.add_input(p)?;
            Some(load_mcq(p)?)
        }
        None => None,
    };
    let seq_len = config.seq_len;
    let ppl = |m: &ModelBundle<f32>, data: &[String]| perplexity(m, data, seq_len).map(|r| r.value);
    let acc = |m: &ModelBundle<f32>| -> Result<Option<f64>> {
        match &mcq {
            Some(items) => Ok(Some(mcq_eval(m, items, seq_len, config.mcq_scoring)?.value)),
            None => Ok(None),
        }
    };

    let base_ppl = recovery_target(&base, &held, seq_len)?;
    let base_extra = extra.iter().map(|(_, d)| ppl(&base, d)).collect::<Result<Vec<_>>>()?;
    let base_acc = acc(&base)?;

    let mut options = CalibrationOptions::new(seq_len, config.paths.calibration.display().to_string());
    options.dataset_id = file_label(&config.paths.calibration);
    let stats = collect_stats(&base, &train_set, &options)?;
    save_output(&mut manifest, &out.join("stats.json"), stats.to_json().as_bytes())?;

    let thresholds = config.thresholds.resolve();
    let plan = PrunePlan::build(&base, &stats, thresholds)?;
    save_output(&mut manifest, &out.join("plan.json"), plan.to_json().as_bytes())?;
    let (mut model, _) = apply_plan(base.clone(), &plan)?;
    let prune = PruneReport::new(&plan, &model);
    save_output(&mut manifest, &out.join("prune_report.json"), prune.to_json().as_bytes())?;
    save_output(&mut manifest, &out.join("pruned.mgpt"), &model.to_bytes())?;
    let rel = relative_size(&base, &model);

    let post_ppl = ppl(&model, &held)?;
    let post_extra = extra.iter().map(|(_, d)| ppl(&model, d)).collect::<Result<Vec<_>>>()?;
    let post_acc = acc(&model)?;

    let mut train_cfg = config.effective_train();
    train_cfg.target_perplexity = Some(base_ppl);
    let mut periodic = Vec::new();
    let history = train_with_hook(&mut model, &train_set, &train_cfg, &held, |epoch, m, event| {
        if event == CheckpointEvent::Periodic {
            let path = out.join(format!("finetune_epoch{epoch}.mgpt"));
            m.save(&path)?;
            periodic.push(path);
        }
        Ok(())
    })?;
    for path in &periodic {
        manifest.add_output(path)?;
    }
    save_output(&mut manifest, &out.join("finetuned.mgpt"), &model.to_bytes())?;
    save_output(&mut manifest, &out.join("history.json"), history.to_json().as_bytes())?;
    save_output(&mut manifest, &out.join("history.csv"), history.to_csv().as_bytes())?;

    let fine_ppl = history.epochs.last().map(|e| e.perplexity).expect("at least one epoch");
    let fine_extra = extra.iter().map(|(_, d)| ppl(&model, d)).collect::<Result<Vec<_>>>()?;
    let fine_acc = acc(&model)?;

    let report = PipelineReport {
        config: config.clone(),
        thresholds,
        base_fingerprint: plan.fingerprint.clone(),
        row: ReportRow {
            base: base_ppl,
            post_prune: post_ppl,
            fine_tune: fine_ppl,
            recovery_epochs: history.recovery_epochs,
            relative_size: rel,
        },
        domains: extra
            .iter()
            .enumerate()
            .map(|(i, (name, _))| DomainRow {
                domain: name.clone(),
                base: base_extra[i],
                post_prune: post_extra[i],
                fine_tune: fine_extra[i],
            })
            .collect(),
        mcq: base_acc.map(|b| McqRow {
            base: b,
            post_prune: post_acc.expect("mcq configured"),
            fine_tune: fine_acc.expect("mcq configured"),
        }),
        prune,
        epochs_run: history.epochs.len(),
    };
    save_output(&mut manifest, &out.join("report.json"), report.to_json().as_bytes())?;
    save_output(&mut manifest, &out.join("report.md"), report.to_markdown().as_bytes())?;
    manifest.save(out.join("manifest.json"))?;
    Ok(report)
}

fn file_label(path: &Path) -> String {
    path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn save_output(manifest: &mut RunManifest, path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes)?;
    manifest.add_output(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_and_overrides() {
        let t = ThresholdConfig::default().resolve();
        assert_eq!(t.linear, Some(1e-3));
        assert_eq!(t.activation, Some(1e-3));
        assert_eq!(t.min_token_count, Some(0));
        let t = ThresholdConfig {
            preset: Preset::None,
            linear: Some(0.0),
            ..Default::default()
        }
        .resolve();
        assert_eq!(t, Thresholds { linear: Some(0.0), activation: None, min_token_count: None });
        let t = ThresholdConfig {
            preset: Preset::Aggressive,
            activation: Some(0.5),
            ..Default::default()
        }
        .resolve();
        assert_eq!(t.linear, Some(AGGRESSIVE_THRESHOLD));
        assert_eq!(t.activation, Some(0.5));
    }

    #[test]
    fn toml_roundtrip_and_errors() {
        let text = r#"
            seed = 3
            [paths]
            model = "m.mgpt"
            calibration = "a.txt"
            out = "o"
            [paths.extra_domains]
            b = "b.txt"
            [thresholds]
            preset = "aggressive"
            [train]
            max_epochs = 7
        "#;
        let cfg = PipelineConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seq_len, 32);
        assert_eq!(cfg.train.max_epochs, 7);
        assert_eq!(cfg.train.learning_rate, 3e-4);
        assert_eq!(cfg.thresholds.preset, Preset::Aggressive);
        assert_eq!(PipelineConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(matches!(PipelineConfig::from_toml("seed = 1"), Err(Error::Config(_))));
        assert!(matches!(
            PipelineConfig::from_toml(&format!("{text}\nbogus = 1")),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn missing_inputs_are_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg_path = dir.path().join("c.toml");
        std::fs::write(&cfg_path, "[paths]\nmodel = \"nope.mgpt\"\ncalibration = \"a.txt\"\nout = \"o\"\n").unwrap();
        let cfg = PipelineConfig::load(&cfg_path).unwrap();
        assert_eq!(cfg.paths.model, dir.path().join("nope.mgpt"));
        assert!(matches!(run_pipeline(&cfg), Err(Error::Io(_))));
    }
}

//! Structured pruning of MLP hidden units and vocabulary entries.
//!
//! A hidden unit owns one column of `mlp_in`, one `mlp_in` bias entry and one
//! row of `mlp_out`. It is dropped when its statistic at `mlp_in.output`
//! (linear criterion) or at `act.output` (activation criterion) is strictly
//! below the threshold; the two criteria are combined by union and each
//! dropped unit records which ones fired. At least one unit per layer is
//! always kept.
//!
//! A token is kept when its calibration count exceeds `min_token_count` or it
//! is a special token. Dropped tokens lose their embedding row, LM head column
//! and head bias entry, and encode to `<unk>` afterwards.
//!
//! Residual-stream dimensions and attention heads are never pruned.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibration::{layer_site, StatsReport};
use crate::error::{Error, Result};
use crate::model::{ModelBundle, ModelConfig, SiteKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::tokenizer::{TokenRemap, NUM_SPECIALS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    /// Statistic at `mlp_in.output`: the unit's output column of the first
    /// linear, equivalently its input row of the second.
    LinearOut,
    /// Statistic at `act.output`.
    Activation,
}

/// `None` disables the corresponding criterion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub linear: Option<f32>,
    pub activation: Option<f32>,
    pub min_token_count: Option<u64>,
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("linear", self.linear), ("activation", self.activation)] {
            if let Some(v) = v {
                if v.is_nan() || v < 0.0 {
                    return Err(Error::Config(format!("{name} threshold must be >= 0, got {v}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DroppedUnit {
    pub unit: usize,
    pub criteria: Vec<Criterion>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPlan {
    pub layer: usize,
    pub d_ff: usize,
    /// Sorted indices into the layer's hidden units.
    pub keep_hidden: Vec<usize>,
    pub dropped: Vec<DroppedUnit>,
    /// Unit kept only because every unit met a drop criterion.
    pub clamped: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrunePlan {
    /// Fingerprint of the checkpoint the statistics were collected on.
    pub fingerprint: String,
    pub dataset_id: String,
    pub thresholds: Thresholds,
    pub base_config: ModelConfig,
    pub layers: Vec<LayerPlan>,
    /// Sorted token ids of the base vocabulary that survive.
    pub keep_tokens: Vec<u32>,
    pub base_param_count: usize,
    pub predicted_param_count: usize,
}

fn n_stat_layers(stats: &StatsReport) -> usize {
    (0..)
        .take_while(|&l| layer_site(stats, l, SiteKind::MlpInOutput).is_ok())
        .count()
}

fn below(m: &[f32], eps: f32) -> Vec<usize> {
    m.iter()
        .enumerate()
        .filter(|&(_, &v)| v < eps)
        .map(|(j, _)| j)
        .collect()
}

fn plan_site(stats: &StatsReport, kind: SiteKind, eps: f32) -> Result<Vec<Vec<usize>>> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Contract(format!("threshold must be >= 0, got {eps}")));
    }
    (0..n_stat_layers(stats))
        .map(|l| Ok(below(&layer_site(stats, l, kind)?.m, eps)))
        .collect()
}

/// Per layer, hidden units whose `mlp_in.output` statistic is below `eps`.
pub fn plan_linear(stats: &StatsReport, eps: f32) -> Result<Vec<Vec<usize>>> {
    plan_site(stats, SiteKind::MlpInOutput, eps)
}

/// Per layer, hidden units whose `act.output` statistic is below `eps`.
pub fn plan_activation(stats: &StatsReport, eps: f32) -> Result<Vec<Vec<usize>>> {
    plan_site(stats, SiteKind::ActOutput, eps)
}

/// Token ids with `count > min_count`, plus the specials.
pub fn plan_embedding(freq: &[u64], min_count: u64) -> Vec<u32> {
    freq.iter()
        .enumerate()
        .filter(|&(id, &c)| id < NUM_SPECIALS || c > min_count)
        .map(|(id, _)| id as u32)
        .collect()
}

impl PrunePlan {
    /// Plans against `model`, whose fingerprint must match the statistics.
    pub fn build<S: Scalar>(model: &ModelBundle<S>, stats: &StatsReport, thresholds: Thresholds) -> Result<Self> {
        thresholds.validate()?;
        let fingerprint = model.fingerprint();
        if stats.fingerprint != fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: fingerprint,
                found: stats.fingerprint.clone(),
            });
        }
        let config = &model.config;
        if stats.token_freq.len() != config.vocab_size {
            return Err(Error::Plan(format!(
                "stats count {} tokens, model vocabulary has {}",
                stats.token_freq.len(),
                config.vocab_size
            )));
        }
        let mut layers = Vec::with_capacity(config.n_layers);
        for (l, &ff) in config.d_ff.iter().enumerate() {
            let lin = layer_site(stats, l, SiteKind::MlpInOutput)?;
            let act = layer_site(stats, l, SiteKind::ActOutput)?;
            if lin.m.len() != ff || act.m.len() != ff {
                return Err(Error::Plan(format!("layer {l} stats width differs from d_ff {ff}")));
            }
            let mut dropped = Vec::new();
            for j in 0..ff {
                let mut criteria = Vec::new();
                if thresholds.linear.is_some_and(|e| lin.m[j] < e) {
                    criteria.push(Criterion::LinearOut);
                }
                if thresholds.activation.is_some_and(|e| act.m[j] < e) {
                    criteria.push(Criterion::Activation);
                }
                if !criteria.is_empty() {
                    dropped.push(DroppedUnit { unit: j, criteria });
                }
            }
            let mut clamped = None;
            if dropped.len() == ff {
                // Keep the most active unit; earliest index on ties.
                let mut best = 0;
                for j in 1..ff {
                    if (act.m[j], lin.m[j]) > (act.m[best], lin.m[best]) {
                        best = j;
                    }
                }
                dropped.retain(|d| d.unit != best);
                clamped = Some(best);
            }
            let mut keep_hidden: Vec<usize> = (0..ff).collect();
            keep_hidden.retain(|j| !dropped.iter().any(|d| d.unit == *j));
            layers.push(LayerPlan {
                layer: l,
                d_ff: ff,
                keep_hidden,
                dropped,
                clamped,
            });
        }
        let keep_tokens = match thresholds.min_token_count {
            Some(min) => plan_embedding(&stats.token_freq, min),
            None => (0..config.vocab_size as u32).collect(),
        };
        let mut plan = PrunePlan {
            fingerprint,
            dataset_id: stats.dataset_id.clone(),
            thresholds,
            base_config: config.clone(),
            layers,
            keep_tokens,
            base_param_count: config.param_count(),
            predicted_param_count: 0,
        };
        plan.predicted_param_count = plan.pruned_config().param_count();
        Ok(plan)
    }

    /// Config of the model after applying the plan.
    pub fn pruned_config(&self) -> ModelConfig {
        let mut c = self.base_config.clone();
        c.d_ff = self.layers.iter().map(|l| l.keep_hidden.len()).collect();
        c.vocab_size = self.keep_tokens.len();
        c
    }

    pub fn is_noop(&self) -> bool {
        self.layers.iter().all(|l| l.keep_hidden.len() == l.d_ff)
            && self.keep_tokens.len() == self.base_config.vocab_size
    }

    pub fn dropped_units(&self) -> usize {
        self.layers.iter().map(|l| l.dropped.len()).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

fn select_columns<S: Scalar>(t: &Tensor<S>, keep: &[usize]) -> Tensor<S> {
    let (rows, cols) = t.dims2().expect("matrix");
    let mut data = Vec::with_capacity(rows * keep.len());
    for r in 0..rows {
        let row = &t.data()[r * cols..(r + 1) * cols];
        data.extend(keep.iter().map(|&c| row[c]));
    }
    Tensor::from_parts(vec![rows, keep.len()], data)
}

fn select_rows<S: Scalar>(t: &Tensor<S>, keep: &[usize]) -> Tensor<S> {
    let cols = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(keep.len() * cols);
    for &r in keep {
        data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = keep.len();
    Tensor::from_parts(shape, data)
}

/// Physically removes the planned units and tokens. The model must be the
/// one the plan was built on.
pub fn apply_plan<S: Scalar>(mut model: ModelBundle<S>, plan: &PrunePlan) -> Result<(ModelBundle<S>, TokenRemap)> {
    if model.config != plan.base_config {
        return Err(Error::Plan(format!(
            "plan was built for d_ff {:?} / vocab {}, model has d_ff {:?} / vocab {}",
            plan.base_config.d_ff, plan.base_config.vocab_size, model.config.d_ff, model.config.vocab_size
        )));
    }
    let fingerprint = model.fingerprint();
    if fingerprint != plan.fingerprint {
        return Err(Error::FingerprintMismatch {
            expected: fingerprint,
            found: plan.fingerprint.clone(),
        });
    }
    let vocab = model.config.vocab_size;
    if plan.layers.len() != model.layers.len() {
        return Err(Error::Plan("plan layer count differs from model".into()));
    }
    for (lp, &ff) in plan.layers.iter().zip(&model.config.d_ff) {
        let sorted = lp.keep_hidden.windows(2).all(|w| w[0] < w[1]);
        if lp.keep_hidden.is_empty() || !sorted || lp.keep_hidden.last().is_some_and(|&j| j >= ff) {
            return Err(Error::Plan(format!("layer {} keep set is not a sorted subset of 0..{ff}", lp.layer)));
        }
    }
    let remap = TokenRemap::from_keep(&plan.keep_tokens, vocab).map_err(|e| Error::Plan(e.to_string()))?;
    if plan.is_noop() {
        return Ok((model, remap));
    }

    for (layer, lp) in model.layers.iter_mut().zip(&plan.layers) {
        if lp.keep_hidden.len() == lp.d_ff {
            continue;
        }
        layer.mlp_in_weight = select_columns(&layer.mlp_in_weight, &lp.keep_hidden);
        layer.mlp_in_bias = select_rows(&layer.mlp_in_bias, &lp.keep_hidden);
        layer.mlp_out_weight = select_rows(&layer.mlp_out_weight, &lp.keep_hidden);
    }
    if plan.keep_tokens.len() != vocab {
        let keep: Vec<usize> = plan.keep_tokens.iter().map(|&t| t as usize).collect();
        model.token_embedding = select_rows(&model.token_embedding, &keep);
        model.lm_head = model.lm_head.as_ref().map(|h| select_columns(h, &keep));
        model.lm_head_bias = select_rows(&model.lm_head_bias, &keep);
        model.tokenizer = model.tokenizer.with_remap(&remap)?;
    }
    model.config = plan.pruned_config();
    model.validate()?;
    Ok((model, remap))
}

/// `100 · params(pruned) / params(base)`.
pub fn relative_size<S: Scalar, T: Scalar>(base: &ModelBundle<S>, pruned: &ModelBundle<T>) -> f64 {
    100.0 * pruned.param_count() as f64 / base.param_count() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub d_ff_before: usize,
    pub d_ff_after: usize,
    pub dropped_linear: usize,
    pub dropped_activation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub fingerprint: String,
    pub thresholds: Thresholds,
    pub layers: Vec<LayerReport>,
    pub vocab_before: usize,
    pub vocab_after: usize,
    pub base_params: usize,
    pub pruned_params: usize,
    pub relative_size: f64,
}

impl PruneReport {
    pub fn new<S: Scalar>(plan: &PrunePlan, pruned: &ModelBundle<S>) -> Self {
        let count = |lp: &LayerPlan, c: Criterion| lp.dropped.iter().filter(|d| d.criteria.contains(&c)).count();
        PruneReport {
            fingerprint: plan.fingerprint.clone(),
            thresholds: plan.thresholds,
            layers: plan
                .layers
                .iter()
                .map(|lp| LayerReport {
                    layer: lp.layer,
                    d_ff_before: lp.d_ff,
                    d_ff_after: lp.keep_hidden.len(),
                    dropped_linear: count(lp, Criterion::LinearOut),
                    dropped_activation: count(lp, Criterion::Activation),
                })
                .collect(),
            vocab_before: plan.base_config.vocab_size,
            vocab_after: pruned.config.vocab_size,
            base_params: plan.base_param_count,
            pruned_params: pruned.param_count(),
            relative_size: 100.0 * pruned.param_count() as f64 / plan.base_param_count as f64,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>5} {:>7} {:>7} {:>7} {:>7}", "layer", "d_ff", "kept", "linear", "act");
        for l in &self.layers {
            let _ = writeln!(
                out,
                "{:>5} {:>7} {:>7} {:>7} {:>7}",
                l.layer, l.d_ff_before, l.d_ff_after, l.dropped_linear, l.dropped_activation
            );
        }
        let _ = writeln!(out, "vocab {} -> {}", self.vocab_before, self.vocab_after);
        let _ = writeln!(
            out,
            "params {} -> {} (relative size {:.3}%)",
            self.base_params, self.pruned_params, self.relative_size
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::{collect_stats, CalibrationOptions, SiteStats};
    use crate::fixtures;
    use crate::model::SiteId;
    use proptest::prelude::*;

    fn stats_with(lin: Vec<Vec<f32>>, act: Vec<Vec<f32>>, freq: Vec<u64>) -> StatsReport {
        let mut sites = Vec::new();
        for (l, (a, b)) in lin.into_iter().zip(act).enumerate() {
            for (kind, m) in [(SiteKind::MlpInOutput, a), (SiteKind::ActOutput, b)] {
                let site = SiteId::layer(l, kind);
                sites.push(SiteStats {
                    name: site.to_string(),
                    site,
                    n_tok: 1,
                    m,
                });
            }
        }
        StatsReport {
            fingerprint: String::new(),
            dataset_id: "t".into(),
            normalization: String::new(),
            aggregator: Default::default(),
            seq_len: 1,
            entries_used: 1,
            skipped_entries: 0,
            n_tok: 1,
            sites,
            token_freq: freq,
        }
    }

    #[test]
    fn direct_comparisons() {
        let s = stats_with(vec![vec![0.5, 1e-5, 0.2]], vec![vec![2e-4, 0.1, 0.0]], vec![]);
        assert_eq!(plan_linear(&s, 1e-3).unwrap(), vec![vec![1]]);
        assert_eq!(plan_activation(&s, 1e-3).unwrap(), vec![vec![0, 2]]);
        assert_eq!(plan_linear(&s, 0.0).unwrap(), vec![Vec::<usize>::new()]);
        assert_eq!(plan_linear(&s, f32::MAX).unwrap(), vec![vec![0, 1, 2]]);
        // Exactly at the threshold is kept.
        assert_eq!(plan_linear(&s, 0.2).unwrap(), vec![vec![1]]);
        assert!(plan_linear(&s, -1.0).is_err());
    }

    #[test]
    fn missing_site_is_plan_error() {
        let m = fixtures::small_model(0);
        let mut s = collect_stats(&m, &["abc"], &CalibrationOptions::new(8, "x")).unwrap();
        s.sites.retain(|x| x.site != SiteId::layer(1, SiteKind::ActOutput));
        let t = Thresholds {
            activation: Some(1.0),
            ..Default::default()
        };
        assert!(matches!(PrunePlan::build(&m, &s, t), Err(Error::Plan(_))));
    }

    #[test]
    fn embedding_keep_rule() {
        let mut freq = vec![0u64; 13];
        for id in [3, 5, 7, 9, 11] {
            freq[id] = 2;
        }
        assert_eq!(plan_embedding(&freq, 0), vec![0, 1, 2, 3, 5, 7, 9, 11]);
        assert_eq!(plan_embedding(&freq, 2), vec![0, 1, 2]);
        assert_eq!(plan_embedding(&vec![0; 13], 0), vec![0, 1, 2]);
        assert_eq!(plan_embedding(&vec![1; 13], 0), (0..13).collect::<Vec<u32>>());
    }

    fn calibrated(seed: u64) -> (ModelBundle<f32>, StatsReport) {
        let m = fixtures::small_model(seed);
        let data = fixtures::arithmetic_corpus(20, seed);
        let s = collect_stats(&m, &data, &CalibrationOptions::new(16, "arith")).unwrap();
        (m, s)
    }

    #[test]
    fn zero_threshold_is_bit_identical() {
        let (m, s) = calibrated(1);
        let t = Thresholds {
            linear: Some(0.0),
            activation: Some(0.0),
            min_token_count: None,
        };
        let plan = PrunePlan::build(&m, &s, t).unwrap();
        assert!(plan.is_noop());
        let (p, remap) = apply_plan(m.clone(), &plan).unwrap();
        assert!(remap.is_identity());
        assert_eq!(p.to_bytes(), m.to_bytes());
        assert_eq!(relative_size(&m, &p), 100.0);
    }

    #[test]
    fn dropping_k_units_removes_k_times_2d_plus_1() {
        let (m, s) = calibrated(2);
        let mut plan = PrunePlan::build(&m, &s, Thresholds::default()).unwrap();
        let k = 5;
        plan.layers[1].keep_hidden.drain(..k);
        plan.predicted_param_count = plan.pruned_config().param_count();
        let before = m.param_count();
        let (p, _) = apply_plan(m, &plan).unwrap();
        assert_eq!(before - p.param_count(), k * (2 * 16 + 1));
        assert_eq!(p.param_count(), plan.predicted_param_count);
        assert_eq!(p.layers[1].mlp_in_weight.shape(), &[16, 27]);
        assert_eq!(p.layers[1].mlp_out_weight.shape(), &[27, 16]);
    }

    #[test]
    fn predicted_count_matches_and_reapply_is_rejected() {
        let (m, s) = calibrated(3);
        let t = Thresholds {
            linear: Some(0.05),
            activation: Some(0.02),
            min_token_count: Some(0),
        };
        let plan = PrunePlan::build(&m, &s, t).unwrap();
        let (p, _) = apply_plan(m.clone(), &plan).unwrap();
        assert_eq!(p.param_count(), plan.predicted_param_count);
        assert_eq!(100.0 * plan.predicted_param_count as f64 / m.param_count() as f64, relative_size(&m, &p));
        assert!(apply_plan(p, &plan).is_err());
        assert_eq!(PrunePlan::from_json(&plan.to_json()).unwrap(), plan);
    }

    #[test]
    fn stale_stats_rejected() {
        let (m, s) = calibrated(4);
        let other = fixtures::small_model(5);
        assert!(matches!(
            PrunePlan::build(&other, &s, Thresholds::default()),
            Err(Error::FingerprintMismatch { .. })
        ));
        let plan = PrunePlan::build(&m, &s, Thresholds::default()).unwrap();
        assert!(matches!(apply_plan(other, &plan), Err(Error::FingerprintMismatch { .. })));
    }

    #[test]
    fn clamp_keeps_one_unit() {
        let (m, s) = calibrated(6);
        let t = Thresholds {
            linear: Some(f32::MAX),
            ..Default::default()
        };
        let plan = PrunePlan::build(&m, &s, t).unwrap();
        for lp in &plan.layers {
            assert_eq!(lp.keep_hidden.len(), 1);
            assert_eq!(lp.clamped, Some(lp.keep_hidden[0]));
            assert_eq!(lp.dropped.len(), lp.d_ff - 1);
        }
        let (p, _) = apply_plan(m, &plan).unwrap();
        assert_eq!(p.config.d_ff, vec![1, 1]);
    }

    #[test]
    fn token_pruning_keeps_domain_text_intact() {
        let (m, s) = calibrated(7);
        let t = Thresholds {
            min_token_count: Some(0),
            ..Default::default()
        };
        let plan = PrunePlan::build(&m, &s, t).unwrap();
        let (p, remap) = apply_plan(m.clone(), &plan).unwrap();
        assert!(p.config.vocab_size < m.config.vocab_size);
        let text = "12+7=19";
        let old = m.tokenizer.encode(text);
        let new = p.tokenizer.encode(text);
        assert_eq!(remap.apply(&old), new);
        assert_eq!(p.tokenizer.decode(&new).unwrap(), text);
        // Kept tokens produce the same logits for kept columns.
        let lo = m.forward(&old, None).unwrap();
        let ln = p.forward(&new, None).unwrap();
        for t in 0..old.len() {
            for (new_id, &old_id) in remap.new_to_old().iter().enumerate() {
                assert_eq!(ln.row(t)[new_id], lo.row(t)[old_id as usize]);
            }
        }
        // Out-of-domain text falls back to <unk>.
        assert!(p.tokenizer.encode("xyz").iter().all(|&i| i == crate::tokenizer::UNK));
    }

    #[test]
    fn tied_head_prunes_with_embedding() {
        let mut cfg = fixtures::small_model(0).config;
        cfg.tie_lm_head = true;
        let m = ModelBundle::<f32>::init(cfg, crate::tokenizer::BpeTokenizer::byte_level(), 8).unwrap();
        let s = collect_stats(&m, &["1+1=2"], &CalibrationOptions::new(16, "a")).unwrap();
        let t = Thresholds {
            min_token_count: Some(0),
            ..Default::default()
        };
        let plan = PrunePlan::build(&m, &s, t).unwrap();
        let (p, _) = apply_plan(m, &plan).unwrap();
        assert!(p.lm_head.is_none());
        assert_eq!(p.config.vocab_size, 3 + 4);
        assert_eq!(p.param_count(), plan.predicted_param_count);
    }

    #[test]
    fn dead_units_prune_exactly() {
        let (m, gated) = fixtures::domain_gated_model();
        let digits = ["12+7=19", "3*4=12", "20-5=15"];
        let s = collect_stats(&m, &digits, &CalibrationOptions::new(16, "digits")).unwrap();
        let t = Thresholds {
            activation: Some(1e-6),
            ..Default::default()
        };
        let plan = PrunePlan::build(&m, &s, t).unwrap();
        let dropped: Vec<usize> = plan.layers[0].dropped.iter().map(|d| d.unit).collect();
        assert_eq!(dropped, gated);
        let (p, _) = apply_plan(m.clone(), &plan).unwrap();
        for text in digits {
            let ids = m.tokenizer.encode(text);
            let a = m.forward(&ids, None).unwrap();
            let b = p.forward(&ids, None).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() <= 1e-5);
            }
        }
    }

    proptest! {
        #[test]
        fn larger_threshold_drops_superset(
            m in prop::collection::vec(0.0f32..1.0, 1..40),
            e1 in 0.0f32..1.0,
            e2 in 0.0f32..1.0,
        ) {
            let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
            let s = stats_with(vec![m.clone()], vec![m], vec![]);
            let a = &plan_linear(&s, lo).unwrap()[0];
            let b = &plan_linear(&s, hi).unwrap()[0];
            prop_assert!(a.iter().all(|j| b.contains(j)));
        }

        #[test]
        fn union_of_criteria(
            lin in prop::collection::vec(0.0f32..1.0, 8),
            act in prop::collection::vec(0.0f32..1.0, 8),
            e in 0.0f32..1.0,
        ) {
            let s = stats_with(vec![lin.clone()], vec![act.clone()], vec![]);
            let l = &plan_linear(&s, e).unwrap()[0];
            let a = &plan_activation(&s, e).unwrap()[0];
            for j in 0..8 {
                prop_assert_eq!(l.contains(&j), lin[j] < e);
                prop_assert_eq!(a.contains(&j), act[j] < e);
            }
        }
    }
}

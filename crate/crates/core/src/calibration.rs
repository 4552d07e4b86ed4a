//! Per-neuron activation magnitude statistics over a calibration dataset.
//!
//! For neuron `j` at a site, `m_j = Σ |a_j| / n_tok`, summed over every
//! processed token position. Normalizing by token positions (rather than by
//! number of sequences) gives a threshold the same meaning regardless of
//! sequence length. Sums are accumulated in `f64`, sequentially, in entry
//! order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::input_windows;
use crate::error::{Error, Result};
use crate::model::{ActivationObserver, ModelBundle, SiteId, SiteKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Normalization recorded in every report.
pub const NORMALIZATION: &str = "mean absolute activation per token position";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    /// Mean absolute value per token position.
    #[default]
    Mean,
    /// Largest absolute value seen at any position.
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteStats {
    pub name: String,
    pub site: SiteId,
    pub n_tok: u64,
    pub m: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    /// Fingerprint of the checkpoint the statistics were collected on.
    pub fingerprint: String,
    pub dataset_id: String,
    pub normalization: String,
    pub aggregator: Aggregator,
    pub seq_len: usize,
    pub entries_used: usize,
    /// Entries that encoded to zero tokens.
    pub skipped_entries: usize,
    pub n_tok: u64,
    pub sites: Vec<SiteStats>,
    pub token_freq: Vec<u64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibrationOptions {
    pub seq_len: usize,
    pub max_entries: Option<usize>,
    pub dataset_id: String,
    pub aggregator: Aggregator,
}

impl CalibrationOptions {
    pub fn new(seq_len: usize, dataset_id: impl Into<String>) -> Self {
        Self {
            seq_len,
            max_entries: None,
            dataset_id: dataset_id.into(),
            aggregator: Aggregator::Mean,
        }
    }
}

/// Running per-site sums. Implements [`ActivationObserver`].
#[derive(Clone, Debug, Default)]
pub struct StatsAccumulator {
    sites: BTreeMap<SiteId, SiteAccum>,
}

#[derive(Clone, Debug, Default)]
struct SiteAccum {
    abs_sum: Vec<f64>,
    abs_max: Vec<f64>,
    rows: u64,
}

impl<S: Scalar> ActivationObserver<S> for StatsAccumulator {
    fn observe(&mut self, site: SiteId, activations: &Tensor<S>) {
        let width = *activations.shape().last().expect("non-empty shape");
        let acc = self.sites.entry(site).or_insert_with(|| SiteAccum {
            abs_sum: vec![0.0; width],
            abs_max: vec![0.0; width],
            rows: 0,
        });
        for row in activations.data().chunks(width) {
            for ((s, mx), &a) in acc.abs_sum.iter_mut().zip(acc.abs_max.iter_mut()).zip(row) {
                let a = a.to_f64c().abs();
                *s += a;
                if a > *mx {
                    *mx = a;
                }
            }
            acc.rows += 1;
        }
    }
}

impl StatsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Finished statistic for one site: `(m, n_tok)`.
    pub fn site(&self, site: SiteId, aggregator: Aggregator) -> Option<(Vec<f32>, u64)> {
        let acc = self.sites.get(&site)?;
        let m = match aggregator {
            Aggregator::Mean => acc
                .abs_sum
                .iter()
                .map(|&s| if acc.rows == 0 { 0.0 } else { (s / acc.rows as f64) as f32 })
                .collect(),
            Aggregator::Max => acc.abs_max.iter().map(|&v| v as f32).collect(),
        };
        Some((m, acc.rows))
    }
}

/// Runs every entry through `model` and aggregates site statistics and token counts.
pub fn collect_stats<S: Scalar, T: AsRef<str>>(
    model: &ModelBundle<S>,
    dataset: &[T],
    options: &CalibrationOptions,
) -> Result<StatsReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset("calibration dataset has no entries".into()));
    }
    if options.seq_len == 0 || options.seq_len > model.config.max_seq {
        return Err(Error::Contract(format!(
            "calibration seq_len {} must be in 1..={}",
            options.seq_len, model.config.max_seq
        )));
    }
    let limit = options.max_entries.unwrap_or(dataset.len()).min(dataset.len());
    let mut acc = StatsAccumulator::new();
    let mut token_freq = vec![0u64; model.config.vocab_size];
    let mut skipped = 0;
    let mut used = 0;
    for entry in &dataset[..limit] {
        let ids = model.tokenizer.encode(entry.as_ref());
        if ids.is_empty() {
            skipped += 1;
            continue;
        }
        used += 1;
        for &id in &ids {
            token_freq[id as usize] += 1;
        }
        for window in input_windows(&ids, options.seq_len) {
            model.forward(window, Some(&mut acc))?;
        }
    }
    if used == 0 {
        return Err(Error::EmptyDataset(format!(
            "all {skipped} calibration entries encode to zero tokens"
        )));
    }
    let sites = model
        .sites()
        .into_iter()
        .map(|(site, _)| {
            let (m, n_tok) = acc.site(site, options.aggregator).expect("every site observed");
            SiteStats {
                name: site.to_string(),
                site,
                n_tok,
                m,
            }
        })
        .collect::<Vec<_>>();
    Ok(StatsReport {
        fingerprint: model.fingerprint(),
        dataset_id: options.dataset_id.clone(),
        normalization: NORMALIZATION.to_string(),
        aggregator: options.aggregator,
        seq_len: options.seq_len,
        entries_used: used,
        skipped_entries: skipped,
        n_tok: sites[0].n_tok,
        sites,
        token_freq,
    })
}

impl StatsReport {
    pub fn site(&self, site: SiteId) -> Option<&SiteStats> {
        self.sites.iter().find(|s| s.site == site)
    }

    pub fn total_width(&self) -> usize {
        self.sites.iter().map(|s| s.m.len()).sum()
    }

    fn check_compatible(&self, other: &StatsReport) -> Result<()> {
        if self.fingerprint != other.fingerprint {
            return Err(Error::Comparison(format!(
                "fingerprint mismatch: {} vs {}",
                self.fingerprint, other.fingerprint
            )));
        }
        let layout = |r: &StatsReport| r.sites.iter().map(|s| (s.site, s.m.len())).collect::<Vec<_>>();
        if layout(self) != layout(other) || self.token_freq.len() != other.token_freq.len() {
            return Err(Error::Comparison("site sets differ".into()));
        }
        Ok(())
    }

    /// Combines two reports on the same checkpoint as if their datasets had been concatenated.
    pub fn merge(&self, other: &StatsReport) -> Result<StatsReport> {
        self.check_compatible(other)?;
        if self.aggregator != other.aggregator {
            return Err(Error::Comparison("cannot merge reports with different aggregators".into()));
        }
        let sites = self
            .sites
            .iter()
            .zip(&other.sites)
            .map(|(a, b)| {
                let n = a.n_tok + b.n_tok;
                let m = a
                    .m
                    .iter()
                    .zip(&b.m)
                    .map(|(&ma, &mb)| match self.aggregator {
                        Aggregator::Mean => {
                            ((ma as f64 * a.n_tok as f64 + mb as f64 * b.n_tok as f64) / n as f64) as f32
                        }
                        Aggregator::Max => ma.max(mb),
                    })
                    .collect();
                SiteStats {
                    name: a.name.clone(),
                    site: a.site,
                    n_tok: n,
                    m,
                }
            })
            .collect();
        Ok(StatsReport {
            fingerprint: self.fingerprint.clone(),
            dataset_id: format!("{}+{}", self.dataset_id, other.dataset_id),
            normalization: self.normalization.clone(),
            aggregator: self.aggregator,
            seq_len: self.seq_len,
            entries_used: self.entries_used + other.entries_used,
            skipped_entries: self.skipped_entries + other.skipped_entries,
            n_tok: self.n_tok + other.n_tok,
            sites,
            token_freq: self
                .token_freq
                .iter()
                .zip(&other.token_freq)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("stats serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format {
            what: "stats report",
            detail: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// One neuron's statistic under two datasets.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub site: String,
    pub neuron: usize,
    pub m_a: f32,
    pub m_b: f32,
}

impl CompareRow {
    /// Active on dataset `a` but below `eps` on `b`: a pruning candidate for `b`'s domain.
    pub fn is_candidate_for_b(&self, eps: f32) -> bool {
        self.m_a >= eps && self.m_b < eps
    }
}

/// Pairs every neuron's statistic under two reports of the same checkpoint.
pub fn compare_stats(a: &StatsReport, b: &StatsReport) -> Result<Vec<CompareRow>> {
    a.check_compatible(b)?;
    Ok(a.sites
        .iter()
        .zip(&b.sites)
        .flat_map(|(sa, sb)| {
            sa.m.iter().zip(&sb.m).enumerate().map(|(j, (&m_a, &m_b))| CompareRow {
                site: sa.name.clone(),
                neuron: j,
                m_a,
                m_b,
            })
        })
        .collect())
}

/// `site,neuron,m_a,m_b` with a header row.
pub fn write_compare_csv(rows: &[CompareRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "site,neuron,m_a,m_b")?;
    for r in rows {
        writeln!(out, "{},{},{},{}", r.site, r.neuron, r.m_a, r.m_b)?;
    }
    Ok(())
}

/// Statistic vector of a per-layer site, if present.
pub(crate) fn layer_site(report: &StatsReport, layer: usize, kind: SiteKind) -> Result<&SiteStats> {
    report
        .site(SiteId::layer(layer, kind))
        .ok_or_else(|| Error::Plan(format!("stats have no site layers.{layer}.{}", kind.as_str())))
}

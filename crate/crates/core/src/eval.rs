//! Perplexity and multiple-choice evaluation.
//!
//! Perplexity is pooled over a dataset: `exp(Σ NLL / N)` over every predicted
//! position, so long entries weigh more than short ones. An MCQ item is
//! answered by scoring `question + " " + choice` for each choice and picking
//! the lowest perplexity; ties go to the lowest choice index.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::prediction_windows;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::scalar::Scalar;
use crate::tensor::cross_entropy_rows;

/// Joins question and choice text.
pub const MCQ_SEPARATOR: &str = " ";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub question: String,
    pub choices: Vec<String>,
    #[serde(rename = "answer")]
    pub answer_index: usize,
}

impl McqItem {
    pub fn validate(&self, index: usize) -> Result<()> {
        if self.choices.len() < 2 {
            return Err(Error::InvalidMcq {
                index,
                detail: format!("needs at least 2 choices, has {}", self.choices.len()),
            });
        }
        if self.answer_index >= self.choices.len() {
            return Err(Error::InvalidMcq {
                index,
                detail: format!(
                    "answer index {} out of range for {} choices",
                    self.answer_index,
                    self.choices.len()
                ),
            });
        }
        Ok(())
    }
}

/// Parses JSON lines, one item per non-blank line. `index` in errors is the
/// zero-based item number.
pub fn parse_mcq_jsonl(text: &str) -> Result<Vec<McqItem>> {
    let mut items = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let index = items.len();
        let item: McqItem = serde_json::from_str(line).map_err(|e| Error::InvalidMcq {
            index,
            detail: e.to_string(),
        })?;
        item.validate(index)?;
        items.push(item);
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset("MCQ file has no items".into()));
    }
    Ok(items)
}

pub fn load_mcq(path: impl AsRef<Path>) -> Result<Vec<McqItem>> {
    parse_mcq_jsonl(&std::fs::read_to_string(path)?)
}

pub fn save_mcq(path: impl AsRef<Path>, items: &[McqItem]) -> Result<()> {
    let mut text = String::new();
    for item in items {
        text.push_str(&serde_json::to_string(item)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McqScoring {
    /// Perplexity of the whole concatenated text, question tokens included.
    #[default]
    WholeSequence,
    /// Perplexity of the choice tokens only, given the question.
    AnswerConditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalKind {
    Perplexity,
    Mcq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryNll {
    pub index: usize,
    pub nll: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McqDetail {
    pub index: usize,
    pub chosen: usize,
    pub answer: usize,
    pub correct: bool,
    /// Another choice had exactly the minimal perplexity.
    pub tie: bool,
    pub choice_perplexities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: EvalKind,
    /// Perplexity, or accuracy in percent.
    pub value: f64,
    pub seq_len: usize,
    /// Predicted positions pooled (perplexity) or scored items (MCQ).
    pub total: usize,
    /// Input indices that were skipped.
    pub skipped: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub entries: Vec<EntryNll>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub items: Vec<McqDetail>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scoring: Option<McqScoring>,
}

impl EvalReport {
    pub fn correct(&self) -> usize {
        self.items.iter().filter(|d| d.correct).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        match self.kind {
            EvalKind::Perplexity => {
                let _ = writeln!(out, "{:>6} {:>8} {:>12}", "entry", "tokens", "nll");
                for e in &self.entries {
                    let _ = writeln!(out, "{:>6} {:>8} {:>12.6}", e.index, e.tokens, e.nll);
                }
                let _ = writeln!(
                    out,
                    "perplexity {:.6} over {} tokens ({} skipped)",
                    self.value,
                    self.total,
                    self.skipped.len()
                );
            }
            EvalKind::Mcq => {
                let _ = writeln!(out, "{:>6} {:>7} {:>7} {:>4}  perplexities", "item", "chosen", "answer", "ok");
                for d in &self.items {
                    let ppl: Vec<String> = d.choice_perplexities.iter().map(|p| format!("{p:.4}")).collect();
                    let _ = writeln!(
                        out,
                        "{:>6} {:>7} {:>7} {:>4}  {}{}",
                        d.index,
                        d.chosen,
                        d.answer,
                        if d.correct { "yes" } else { "no" },
                        ppl.join(" "),
                        if d.tie { " (tie)" } else { "" }
                    );
                }
                let _ = writeln!(
                    out,
                    "accuracy {:.3}% ({}/{}, {} skipped)",
                    self.value,
                    self.correct(),
                    self.total,
                    self.skipped.len()
                );
            }
        }
        out
    }
}

fn check_seq_len<S: Scalar>(model: &ModelBundle<S>, seq_len: usize) -> Result<()> {
    if seq_len == 0 || seq_len > model.config.max_seq {
        return Err(Error::Contract(format!(
            "evaluation seq_len {seq_len} must be in 1..={}",
            model.config.max_seq
        )));
    }
    Ok(())
}

/// Negative log-likelihood of each next-token prediction in `ids`
/// (`ids.len() - 1` values), using non-overlapping windows of `seq_len`.
pub fn position_nll<S: Scalar>(model: &ModelBundle<S>, ids: &[u32], seq_len: usize) -> Result<Vec<f64>> {
    check_seq_len(model, seq_len)?;
    let mut out = Vec::with_capacity(ids.len().saturating_sub(1));
    for (input, target) in prediction_windows(ids, seq_len) {
        let logits = model.forward(input, None)?;
        out.extend(cross_entropy_rows(&logits, target)?.into_iter().map(|v| v.to_f64c()));
    }
    Ok(out)
}

/// Pooled perplexity over `dataset`. Entries encoding to fewer than two
/// tokens are skipped and listed.
pub fn perplexity<S: Scalar, T: AsRef<str>>(
    model: &ModelBundle<S>,
    dataset: &[T],
    seq_len: usize,
) -> Result<EvalReport> {
    check_seq_len(model, seq_len)?;
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    let mut sum = 0.0f64;
    let mut total = 0usize;
    for (index, entry) in dataset.iter().enumerate() {
        let ids = model.tokenizer.encode(entry.as_ref());
        if ids.len() < 2 {
            skipped.push(index);
            continue;
        }
        let nll: f64 = position_nll(model, &ids, seq_len)?.iter().sum();
        sum += nll;
        total += ids.len() - 1;
        entries.push(EntryNll {
            index,
            nll,
            tokens: ids.len() - 1,
        });
    }
    if total == 0 {
        return Err(Error::Evaluation(format!(
            "no usable entries: {} of {} encode to fewer than 2 tokens",
            skipped.len(),
            dataset.len()
        )));
    }
    Ok(EvalReport {
        kind: EvalKind::Perplexity,
        value: (sum / total as f64).exp(),
        seq_len,
        total,
        skipped,
        entries,
        items: Vec::new(),
        separator: None,
        scoring: None,
    })
}

fn choice_perplexity<S: Scalar>(
    model: &ModelBundle<S>,
    question: &str,
    choice: &str,
    seq_len: usize,
    scoring: McqScoring,
) -> Result<f64> {
    let tok = &model.tokenizer;
    let (ids, scored_from) = match scoring {
        McqScoring::WholeSequence => (tok.encode(&format!("{question}{MCQ_SEPARATOR}{choice}")), 0),
        McqScoring::AnswerConditional => {
            let mut ids = tok.encode(&format!("{question}{MCQ_SEPARATOR}"));
            let prefix = ids.len();
            ids.extend(tok.encode(choice));
            // Position p predicts ids[p + 1]; the first choice token is ids[prefix].
            (ids, prefix.saturating_sub(1))
        }
    };
    if ids.len() < 2 {
        return Err(Error::Evaluation("item text encodes to fewer than 2 tokens".into()));
    }
    let nll = position_nll(model, &ids, seq_len)?;
    let scored = &nll[scored_from..];
    Ok((scored.iter().sum::<f64>() / scored.len() as f64).exp())
}

/// Index of the smallest value; the earliest wins ties.
pub fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

/// Scores every item. Items with an empty choice are skipped and listed; an
/// item set with nothing left to score is an error.
pub fn mcq_eval<S: Scalar>(
    model: &ModelBundle<S>,
    items: &[McqItem],
    seq_len: usize,
    scoring: McqScoring,
) -> Result<EvalReport> {
    check_seq_len(model, seq_len)?;
    if items.is_empty() {
        return Err(Error::Evaluation("no MCQ items".into()));
    }
    let mut details = Vec::new();
    let mut skipped = Vec::new();
    for (index, item) in items.iter().enumerate() {
        item.validate(index)?;
        if item.choices.iter().any(|c| model.tokenizer.encode(c).is_empty()) {
            skipped.push(index);
            continue;
        }
        let ppl = item
            .choices
            .iter()
            .map(|c| choice_perplexity(model, &item.question, c, seq_len, scoring))
            .collect::<Result<Vec<f64>>>()?;
        let chosen = argmin_first(&ppl);
        let tie = ppl.iter().enumerate().any(|(i, &p)| i != chosen && p == ppl[chosen]);
        details.push(McqDetail {
            index,
            chosen,
            answer: item.answer_index,
            correct: chosen == item.answer_index,
            tie,
            choice_perplexities: ppl,
        });
    }
    if details.is_empty() {
        return Err(Error::Evaluation(format!("all {} MCQ items were skipped", items.len())));
    }
    let correct = details.iter().filter(|d| d.correct).count();
    Ok(EvalReport {
        kind: EvalKind::Mcq,
        value: 100.0 * correct as f64 / details.len() as f64,
        seq_len,
        total: details.len(),
        skipped,
        entries: Vec::new(),
        items: details,
        separator: Some(MCQ_SEPARATOR.to_string()),
        scoring: Some(scoring),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use crate::model::ModelConfig;
    use crate::tensor::ActivationKind;
    use crate::tokenizer::BpeTokenizer;

    fn zero_model_vocab16() -> ModelBundle<f32> {
        // 3 specials + 13 single-byte tokens.
        let corpus = ["abcdefghijklm"];
        let tok = BpeTokenizer::byte_level();
        let freq = tok.token_frequency(&corpus);
        let keep: Vec<u32> = (0..tok.vocab_size() as u32)
            .filter(|&i| i < 3 || freq[i as usize] > 0)
            .collect();
        let remap = crate::tokenizer::TokenRemap::from_keep(&keep, tok.vocab_size()).unwrap();
        let tok = tok.with_remap(&remap).unwrap();
        assert_eq!(tok.vocab_size(), 16);
        let config = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            d_ff: vec![8],
            vocab_size: 16,
            max_seq: 16,
            activation: ActivationKind::Gelu,
            tie_lm_head: false,
            layernorm_eps: 1e-5,
        };
        ModelBundle::zeros(config, tok).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = zero_model_vocab16();
        let r = perplexity(&m, &["abcabc", "mlkjih gfed"], 8).unwrap();
        assert!((r.value - 16.0).abs() < 1e-3, "{}", r.value);
    }

    #[test]
    fn copy_model_memorizes() {
        let m = fixtures::copy_model("abcdefgh", 16, 20.0);
        let r = perplexity(&m, &["abcdefgh"], 8).unwrap();
        assert!(r.value <= 1.01, "{}", r.value);
        assert_eq!(r.total, 7);
    }

    #[test]
    fn pooling_is_token_weighted_and_order_free() {
        let m = fixtures::small_model(1);
        let data = ["hello there", "12+3=15", "ab"];
        let r = perplexity(&m, &data, 16).unwrap();
        let sum: f64 = r.entries.iter().map(|e| e.nll).sum();
        let n: usize = r.entries.iter().map(|e| e.tokens).sum();
        assert_eq!(r.value, (sum / n as f64).exp());

        let doubled: Vec<&str> = data.iter().chain(data.iter()).copied().collect();
        let r2 = perplexity(&m, &doubled, 16).unwrap();
        assert!((r2.value - r.value).abs() <= 1e-6 * r.value);

        let reversed: Vec<&str> = data.iter().rev().copied().collect();
        let r3 = perplexity(&m, &reversed, 16).unwrap();
        assert!((r3.value - r.value).abs() <= 1e-9 * r.value);
    }

    #[test]
    fn short_entries_are_skipped_and_empty_is_error() {
        let m = fixtures::small_model(1);
        let r = perplexity(&m, &["a", "abc", ""], 16).unwrap();
        assert_eq!(r.skipped, vec![0, 2]);
        assert_eq!(r.total, 2);
        assert!(matches!(perplexity(&m, &["a", ""], 16), Err(Error::Evaluation(_))));
    }

    #[test]
    fn long_entries_use_windows() {
        let m = fixtures::small_model(2);
        let text = "the quick brown fox jumps over the lazy dog";
        let r = perplexity(&m, &[text], 16).unwrap();
        assert_eq!(r.total, text.len() - 1);
    }

    #[test]
    fn identical_choices_tie_to_first() {
        let m = fixtures::small_model(3);
        let items = vec![McqItem {
            question: "1+1=".into(),
            choices: vec!["2".into(), "2".into()],
            answer_index: 1,
        }];
        let r = mcq_eval(&m, &items, 16, McqScoring::WholeSequence).unwrap();
        assert_eq!(r.items[0].chosen, 0);
        assert!(r.items[0].tie);
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn hard_wired_choice_wins() {
        // After "?" the model predicts " ", after " " it predicts "A".
        let m = fixtures::copy_model("? A", 16, 20.0);
        let items: Vec<McqItem> = (0..6)
            .map(|i| McqItem {
                question: "q?".into(),
                choices: vec!["A".into(), "B".into(), "C".into()],
                answer_index: i % 3,
            })
            .collect();
        for scoring in [McqScoring::WholeSequence, McqScoring::AnswerConditional] {
            let r = mcq_eval(&m, &items, 16, scoring).unwrap();
            for d in &r.items {
                assert_eq!(d.chosen, 0);
                assert_eq!(d.correct, items[d.index].answer_index == 0);
            }
            assert!((r.value - 100.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empty_choice_is_skipped_and_all_skipped_is_error() {
        let m = fixtures::small_model(3);
        let good = McqItem {
            question: "x".into(),
            choices: vec!["a".into(), "b".into()],
            answer_index: 0,
        };
        let bad = McqItem {
            question: "x".into(),
            choices: vec!["a".into(), "".into()],
            answer_index: 0,
        };
        let r = mcq_eval(&m, &[bad.clone(), good], 16, McqScoring::WholeSequence).unwrap();
        assert_eq!(r.skipped, vec![0]);
        assert_eq!(r.total, 1);
        assert!(matches!(
            mcq_eval(&m, &[bad], 16, McqScoring::WholeSequence),
            Err(Error::Evaluation(_))
        ));
        assert!(matches!(mcq_eval(&m, &[], 16, McqScoring::WholeSequence), Err(Error::Evaluation(_))));
    }

    #[test]
    fn jsonl_parsing_and_validation() {
        let items = parse_mcq_jsonl("{\"question\":\"q\",\"choices\":[\"a\",\"b\"],\"answer\":1}\n\n").unwrap();
        assert_eq!(items[0].answer_index, 1);
        let err = parse_mcq_jsonl(
            "{\"question\":\"q\",\"choices\":[\"a\",\"b\"],\"answer\":0}\n{\"question\":\"q\",\"choices\":[\"a\",\"b\"],\"answer\":2}",
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidMcq { index: 1, .. }));
        assert!(matches!(
            parse_mcq_jsonl("{\"question\":\"q\",\"choices\":[\"a\"],\"answer\":0}"),
            Err(Error::InvalidMcq { index: 0, .. })
        ));
        assert!(matches!(parse_mcq_jsonl("not json"), Err(Error::InvalidMcq { .. })));
        assert!(matches!(parse_mcq_jsonl(""), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn report_json_roundtrip_and_accuracy_recomputable() {
        let m = fixtures::small_model(4);
        let items = fixtures::arithmetic_mcq(5, 3, 9);
        let r = mcq_eval(&m, &items, 16, McqScoring::WholeSequence).unwrap();
        assert_eq!(r.value, 100.0 * r.correct() as f64 / r.total as f64);
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        assert!(r.to_table().contains("accuracy"));
    }
}

//! Text datasets: one UTF-8 entry per line.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Reads one entry per non-blank line (trailing `\r` stripped).
pub fn read_entries(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let entries: Vec<String> = text
        .lines()
        .map(|l| l.trim_end_matches('\r'))
        .filter(|l| !l.trim().is_empty())
        .map(str::to_owned)
        .collect();
    if entries.is_empty() {
        return Err(Error::EmptyDataset(format!("{} has no entries", path.display())));
    }
    Ok(entries)
}

pub fn write_entries(path: impl AsRef<Path>, entries: &[String]) -> Result<()> {
    let mut text = entries.join("\n");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Seeded train / held-out split. Each side keeps the original entry order.
/// With two or more entries both sides are non-empty.
pub fn split_holdout(entries: &[String], holdout_fraction: f64, seed: u64) -> (Vec<String>, Vec<String>) {
    let n = entries.len();
    if n < 2 || holdout_fraction <= 0.0 {
        return (entries.to_vec(), entries.to_vec());
    }
    let held = ((n as f64 * holdout_fraction).round() as usize).clamp(1, n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_held = vec![false; n];
    for &i in &idx[..held] {
        is_held[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (e, held) in entries.iter().zip(is_held) {
        if held {
            test.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    (train, test)
}

/// Splits an encoded entry into `(input, target)` pairs for next-token prediction.
///
/// Inputs are consecutive non-overlapping chunks of at most `seq_len` ids and
/// every id after the first is predicted exactly once.
pub fn prediction_windows(ids: &[u32], seq_len: usize) -> Vec<(&[u32], &[u32])> {
    assert!(seq_len > 0, "seq_len must be positive");
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < ids.len() {
        let end = (start + seq_len).min(ids.len() - 1);
        out.push((&ids[start..end], &ids[start + 1..end + 1]));
        start = end;
    }
    out
}

/// Non-overlapping model inputs of at most `seq_len` ids, covering every id once.
pub fn input_windows(ids: &[u32], seq_len: usize) -> impl Iterator<Item = &[u32]> {
    assert!(seq_len > 0, "seq_len must be positive");
    ids.chunks(seq_len)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_every_prediction_once() {
        let ids: Vec<u32> = (0..10).collect();
        for seq_len in 1..12 {
            let w = prediction_windows(&ids, seq_len);
            let targets: Vec<u32> = w.iter().flat_map(|(_, t)| t.iter().copied()).collect();
            assert_eq!(targets, (1..10).collect::<Vec<_>>());
            for (input, target) in &w {
                assert!(input.len() <= seq_len);
                assert_eq!(input.len(), target.len());
                assert_eq!(input[1..], target[..target.len() - 1]);
            }
        }
        assert!(prediction_windows(&[7], 4).is_empty());
        assert!(prediction_windows(&[], 4).is_empty());
    }

    #[test]
    fn input_windows_partition() {
        let ids: Vec<u32> = (0..7).collect();
        let w: Vec<&[u32]> = input_windows(&ids, 3).collect();
        assert_eq!(w, vec![&[0, 1, 2][..], &[3, 4, 5], &[6]]);
    }

    #[test]
    fn holdout_split_is_seeded_and_disjoint() {
        let entries: Vec<String> = (0..50).map(|i| format!("e{i}")).collect();
        let (a, b) = split_holdout(&entries, 0.1, 3);
        assert_eq!(b.len(), 5);
        assert_eq!(a.len() + b.len(), 50);
        assert!(b.iter().all(|e| !a.contains(e)));
        assert_eq!(split_holdout(&entries, 0.1, 3), (a, b));
        let (_, c) = split_holdout(&entries, 0.1, 4);
        assert_eq!(c.len(), 5);
    }

    #[test]
    fn blank_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.txt");
        std::fs::write(&p, "\n  \n").unwrap();
        assert!(matches!(read_entries(&p), Err(Error::EmptyDataset(_))));
        std::fs::write(&p, "a\r\n\nb\n").unwrap();
        assert_eq!(read_entries(&p).unwrap(), vec!["a", "b"]);
    }
}

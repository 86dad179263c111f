//! Text normalization, word error rate and manifest handling.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases, maps everything outside `[a-z0-9']` to a space, collapses
/// whitespace and trims.
pub fn normalize_text(s: &str) -> String {
    let mapped: String = s
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| {
            if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct WerBreakdown {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    pub wer: f64,
}

impl WerBreakdown {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Pools counts over utterances.
    pub fn combine(parts: &[WerBreakdown]) -> Result<WerBreakdown> {
        let mut total = WerBreakdown {
            substitutions: 0,
            deletions: 0,
            insertions: 0,
            ref_words: 0,
            wer: 0.0,
        };
        for p in parts {
            total.substitutions += p.substitutions;
            total.deletions += p.deletions;
            total.insertions += p.insertions;
            total.ref_words += p.ref_words;
        }
        if total.ref_words == 0 {
            return Err(Error::EmptyReference);
        }
        total.wer = total.errors() as f64 / total.ref_words as f64;
        Ok(total)
    }
}

/// Word-level edit distance with unit costs between normalized texts. Among
/// minimal alignments the backtrace prefers substitution, then insertion,
/// then deletion.
pub fn wer(reference: &str, hypothesis: &str) -> Result<WerBreakdown> {
    let r_norm = normalize_text(reference);
    let h_norm = normalize_text(hypothesis);
    let r: Vec<&str> = r_norm.split_whitespace().collect();
    let h: Vec<&str> = h_norm.split_whitespace().collect();
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    let (n, m) = (r.len(), h.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in d[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]);
            d[i][j] = sub.min(d[i][j - 1] + 1).min(d[i - 1][j] + 1);
        }
    }
    let (mut s, mut ins, mut del) = (0, 0, 0);
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + usize::from(r[i - 1] != h[j - 1]) {
            s += usize::from(r[i - 1] != h[j - 1]);
            i -= 1;
            j -= 1;
        } else if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            ins += 1;
            j -= 1;
        } else {
            del += 1;
            i -= 1;
        }
    }
    debug_assert_eq!(s + ins + del, d[n][m]);
    Ok(WerBreakdown {
        substitutions: s,
        deletions: del,
        insertions: ins,
        ref_words: n,
        wer: (s + ins + del) as f64 / n as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub audio_filepath: String,
    pub duration: f64,
    pub text: String,
}

/// Parses one JSON object per non-empty line; unknown fields are ignored.
pub fn parse_manifest(contents: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (idx, line) in contents.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: idx + 1,
            detail: e.to_string(),
        })?;
        if entry.duration <= 0.0 || !entry.duration.is_finite() {
            return Err(Error::Manifest {
                line: idx + 1,
                detail: format!("duration must be positive, got {}", entry.duration),
            });
        }
        entries.push(entry);
    }
    Ok(entries)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let contents = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&contents)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ManifestStats {
    pub count: usize,
    pub min_minutes: f64,
    pub max_minutes: f64,
    pub mean_minutes: f64,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Count and min/max/mean duration in minutes, rounded to 2 decimals.
pub fn manifest_stats(entries: &[ManifestEntry]) -> Result<ManifestStats> {
    if entries.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let minutes: Vec<f64> = entries.iter().map(|e| e.duration / 60.0).collect();
    let min = minutes.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = minutes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = minutes.iter().sum::<f64>() / minutes.len() as f64;
    Ok(ManifestStats {
        count: entries.len(),
        min_minutes: round2(min),
        max_minutes: round2(max),
        mean_minutes: round2(mean),
    })
}

//! Strict and loose precision/recall/F1 over typed spans.
//!
//! Inputs are per-document lists of `(start, end, type)`; duplicates are
//! collapsed. A missing document on either side counts as empty.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub type Triple = (usize, usize, usize);

pub const METRICS_VERSION: u32 = 1;

/// Counts and scores of one cell. For strict matching both matched counts
/// equal the true positives; loose matching counts each side separately.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub predicted: usize,
    pub gold: usize,
    pub matched_predicted: usize,
    pub matched_gold: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_counts(predicted: usize, gold: usize, matched_predicted: usize, matched_gold: usize) -> Self {
        let precision = if predicted == 0 { 0.0 } else { matched_predicted as f64 / predicted as f64 };
        let recall = if gold == 0 { 0.0 } else { matched_gold as f64 / gold as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            predicted,
            gold,
            matched_predicted,
            matched_gold,
            precision,
            recall,
            f1,
        }
    }

    pub fn tp(&self) -> usize {
        self.matched_predicted
    }

    pub fn fp(&self) -> usize {
        self.predicted - self.matched_predicted
    }

    pub fn fn_(&self) -> usize {
        self.gold - self.matched_gold
    }
}

fn pairs<'a>(pred: &'a [Vec<Triple>], gold: &'a [Vec<Triple>]) -> impl Iterator<Item = (BTreeSet<Triple>, BTreeSet<Triple>)> + 'a {
    let n = pred.len().max(gold.len());
    (0..n).map(move |d| {
        let p = pred.get(d).map(|v| v.iter().copied().collect()).unwrap_or_default();
        let g = gold.get(d).map(|v| v.iter().copied().collect()).unwrap_or_default();
        (p, g)
    })
}

fn keyed_prf(pred: &[Vec<Triple>], gold: &[Vec<Triple>], key: impl Fn(&Triple) -> (usize, usize)) -> Prf {
    let (mut np, mut ng, mut mp, mut mg) = (0, 0, 0, 0);
    for (p, g) in pairs(pred, gold) {
        let pk: BTreeSet<_> = p.iter().map(&key).collect();
        let gk: BTreeSet<_> = g.iter().map(&key).collect();
        np += p.len();
        ng += g.len();
        mp += p.iter().filter(|t| gk.contains(&key(t))).count();
        mg += g.iter().filter(|t| pk.contains(&key(t))).count();
    }
    Prf::from_counts(np, ng, mp, mg)
}

/// Exact `(start, end, type)` match, micro over documents.
pub fn strict_span_prf(pred: &[Vec<Triple>], gold: &[Vec<Triple>]) -> Prf {
    let (mut np, mut ng, mut tp) = (0, 0, 0);
    for (p, g) in pairs(pred, gold) {
        np += p.len();
        ng += g.len();
        tp += p.intersection(&g).count();
    }
    Prf::from_counts(np, ng, tp, tp)
}

/// A mention matches when the other side has a mention with the same
/// `(start, type)`; each side is counted against the other.
pub fn strict_start_prf(pred: &[Vec<Triple>], gold: &[Vec<Triple>]) -> Prf {
    keyed_prf(pred, gold, |t| (t.0, t.2))
}

/// As [`strict_start_prf`] keyed on `(end, type)`.
pub fn strict_end_prf(pred: &[Vec<Triple>], gold: &[Vec<Triple>]) -> Prf {
    keyed_prf(pred, gold, |t| (t.1, t.2))
}

/// Coverage counting: a prediction is correct if it shares a token with a
/// same-type gold mention, and a gold mention is found if some same-type
/// prediction shares a token with it.
pub fn loose_span_prf(pred: &[Vec<Triple>], gold: &[Vec<Triple>]) -> Prf {
    let overlaps = |a: &Triple, b: &Triple| a.2 == b.2 && a.0 <= b.1 && b.0 <= a.1;
    let (mut np, mut ng, mut mp, mut mg) = (0, 0, 0, 0);
    for (p, g) in pairs(pred, gold) {
        np += p.len();
        ng += g.len();
        mp += p.iter().filter(|x| g.iter().any(|y| overlaps(x, y))).count();
        mg += g.iter().filter(|y| p.iter().any(|x| overlaps(x, y))).count();
    }
    Prf::from_counts(np, ng, mp, mg)
}

/// The four metrics of one row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    pub strict_span: Prf,
    pub strict_start: Prf,
    pub strict_end: Prf,
    pub loose_span: Prf,
}

impl MetricRow {
    pub fn compute(name: impl Into<String>, pred: &[Vec<Triple>], gold: &[Vec<Triple>]) -> Self {
        Self {
            name: name.into(),
            strict_span: strict_span_prf(pred, gold),
            strict_start: strict_start_prf(pred, gold),
            strict_end: strict_end_prf(pred, gold),
            loose_span: loose_span_prf(pred, gold),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics_version: u32,
    pub loose_matching: String,
    pub per_type: Vec<MetricRow>,
    /// Pooled over all types.
    pub micro: MetricRow,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }

    /// Fixed-width F1 table, one line per type plus `ALL`.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "loose matching: {}", self.loose_matching);
        let _ = writeln!(
            out,
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>6} {:>6}",
            "type", "S-F1", "S-start", "S-end", "L-F1", "pred", "gold"
        );
        for r in self.per_type.iter().chain(std::iter::once(&self.micro)) {
            let _ = writeln!(
                out,
                "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>6}",
                r.name,
                r.strict_span.f1,
                r.strict_start.f1,
                r.strict_end.f1,
                r.loose_span.f1,
                r.strict_span.predicted,
                r.strict_span.gold
            );
        }
        out
    }
}

pub fn per_type_report(pred: &[Vec<Triple>], gold: &[Vec<Triple>], type_names: &[String]) -> EvalReport {
    let only = |docs: &[Vec<Triple>], k: usize| -> Vec<Vec<Triple>> {
        docs.iter().map(|d| d.iter().copied().filter(|t| t.2 == k).collect()).collect()
    };
    let per_type = type_names
        .iter()
        .enumerate()
        .map(|(k, name)| MetricRow::compute(name.clone(), &only(pred, k), &only(gold, k)))
        .collect();
    EvalReport {
        metrics_version: METRICS_VERSION,
        loose_matching: "coverage".into(),
        per_type,
        micro: MetricRow::compute("ALL", pred, gold),
    }
}

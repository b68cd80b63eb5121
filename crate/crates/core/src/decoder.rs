//! Span enumeration, scoring and threshold-based decoding.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use typespan_numcore::{Graph, ParamStore};

use crate::encoder::EncodedSequence;
use crate::error::{Error, Result};
use crate::head::{Channel, HeadParams, TypeEmbeddings};
use crate::objectives::GlobalThresholds;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Start and end scores must clear their thresholds before the span test.
    JointPositionSpan,
    #[default]
    SpanOnly,
}

/// Score a candidate must beat on each channel, per type.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TypeThreshold {
    pub start: f64,
    pub end: f64,
    pub span: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum ThresholdMode {
    /// Per-document `[CLS]` similarities.
    #[default]
    Dynamic,
    /// The learned `global.*` parameters.
    LearnedGlobal,
    /// Fixed per-type values, typically tuned on dev data.
    DevTuned(Vec<TypeThreshold>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Drop overlapping predictions.
    pub flat: bool,
    /// Longest candidate in tokens.
    pub max_span_len: usize,
    pub threshold_mode: ThresholdMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::SpanOnly,
            flat: false,
            max_span_len: 30,
            threshold_mode: ThresholdMode::Dynamic,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_span_len == 0 {
            return Err(Error::Config("max_span_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredMention {
    pub start: usize,
    /// Inclusive.
    pub end: usize,
    pub type_id: usize,
    pub span_score: f64,
    pub start_score: f64,
    pub end_score: f64,
}

impl ScoredMention {
    pub fn key(&self) -> (usize, usize, usize) {
        (self.start, self.end, self.type_id)
    }

    pub fn overlaps(&self, other: &ScoredMention) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// All `(i, j)` with `i ≤ j < n` and `j − i + 1 ≤ max_len`, lexicographic.
pub fn enumerate_spans(n: usize, max_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n.min(i + max_len) {
            out.push((i, j));
        }
    }
    out
}

/// Scores every enumerated span against every type; candidates are ordered
/// by span, then type. Also returns the per-type thresholds.
pub fn score_all(
    encoded: &EncodedSequence,
    types: &TypeEmbeddings,
    head: &HeadParams,
    store: &ParamStore,
    config: &DecodeConfig,
) -> Result<(Vec<ScoredMention>, Vec<TypeThreshold>)> {
    config.validate()?;
    let (rows, _) = encoded.hidden.dims2();
    let n = rows.saturating_sub(2);
    let content = enumerate_spans(n, config.max_span_len);
    let mut spans = Vec::with_capacity(content.len() + 1);
    spans.push((0, 0));
    spans.extend(content.iter().map(|&(i, j)| (i + 1, j + 1)));

    let mut g = Graph::with_params(store);
    let hidden = g.constant(encoded.hidden.clone())?;
    let tv = types.to_graph(&mut g, false)?;
    let scores = head.sequence_scores(&mut g, hidden, &tv, &spans)?;
    let (start, end, span) = (g.value(scores.start), g.value(scores.end), g.value(scores.span));
    let k = types.num_types();

    let thresholds = match &config.threshold_mode {
        ThresholdMode::Dynamic => (0..k)
            .map(|t| TypeThreshold {
                start: start.get2(0, t),
                end: end.get2(0, t),
                span: span.get2(0, t),
            })
            .collect(),
        ThresholdMode::LearnedGlobal => global_thresholds(store, k)?,
        ThresholdMode::DevTuned(v) => {
            if v.len() != k {
                return Err(Error::Config(format!("{} tuned thresholds for {k} types", v.len())));
            }
            v.clone()
        }
    };

    let mut out = Vec::with_capacity(content.len() * k);
    for (n, &(i, j)) in content.iter().enumerate() {
        for t in 0..k {
            out.push(ScoredMention {
                start: i,
                end: j,
                type_id: t,
                span_score: span.get2(n + 1, t),
                start_score: start.get2(i + 1, t),
                end_score: end.get2(j + 1, t),
            });
        }
    }
    Ok((out, thresholds))
}

fn global_thresholds(store: &ParamStore, k: usize) -> Result<Vec<TypeThreshold>> {
    let gt = GlobalThresholds::resolve(store)?;
    let (s, e, p) = (
        gt.values(store, Channel::Start),
        gt.values(store, Channel::End),
        gt.values(store, Channel::Span),
    );
    if s.len() != k {
        return Err(Error::Config(format!("{} global thresholds for {k} types", s.len())));
    }
    Ok((0..k)
        .map(|t| TypeThreshold {
            start: s[t],
            end: e[t],
            span: p[t],
        })
        .collect())
}

/// Filters candidates against the thresholds. Output is sorted by
/// `(start, end, type)`, or in greedy order when `flat`.
pub fn decode(candidates: &[ScoredMention], thresholds: &[TypeThreshold], config: &DecodeConfig) -> Vec<ScoredMention> {
    let kept: Vec<ScoredMention> = candidates
        .iter()
        .filter(|c| {
            let th = &thresholds[c.type_id];
            if config.strategy == Strategy::JointPositionSpan && (c.start_score < th.start || c.end_score < th.end) {
                return false;
            }
            c.span_score > th.span
        })
        .copied()
        .collect();
    if config.flat {
        return remove_overlap(&kept);
    }
    let mut kept = kept;
    kept.sort_by_key(ScoredMention::key);
    kept
}

/// Total order used for greedy selection: score descending, then start,
/// end and type ascending.
pub fn greedy_order(a: &ScoredMention, b: &ScoredMention) -> Ordering {
    b.span_score
        .total_cmp(&a.span_score)
        .then(a.start.cmp(&b.start))
        .then(a.end.cmp(&b.end))
        .then(a.type_id.cmp(&b.type_id))
}

/// Keeps the best-scored mentions whose token ranges overlap no kept one.
pub fn remove_overlap(mentions: &[ScoredMention]) -> Vec<ScoredMention> {
    let mut sorted = mentions.to_vec();
    sorted.sort_by(greedy_order);
    let mut kept: Vec<ScoredMention> = Vec::new();
    for m in sorted {
        if kept.iter().all(|k| !k.overlaps(&m)) {
            kept.push(m);
        }
    }
    kept
}

/// Recomputes the decoded set with plain loops over the parameters: naive
/// concatenated span vectors, explicit cosines and a selection-based
/// overlap pass. Slow; meant for small inputs.
pub fn brute_force_reference(
    encoded: &EncodedSequence,
    types: &TypeEmbeddings,
    head: &HeadParams,
    store: &ParamStore,
    config: &DecodeConfig,
) -> Result<BTreeSet<(usize, usize, usize)>> {
    let h = &encoded.hidden;
    let (rows, d) = h.dims2();
    let n = rows.saturating_sub(2);
    let k = types.num_types();
    let cfg = &head.config;
    let affine = |x: &[f64], lin: crate::head::Linear| -> Vec<f64> {
        let w = store.get(lin.w).data();
        let b = store.get(lin.b).data();
        let out = b.len();
        (0..out)
            .map(|o| b[o] + x.iter().enumerate().map(|(i, xi)| xi * w[i * out + o]).sum::<f64>())
            .collect()
    };
    let cos = |a: &[f64], b: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / ((na + typespan_numcore::NORM_EPS) * (nb + typespan_numcore::NORM_EPS))
    };
    let tau = |ch: Channel| head.temperature(store, ch);
    let span_vec = |i: usize, j: usize| -> Vec<f64> {
        let width = store.get(head.width);
        let mut x = Vec::with_capacity(2 * d + cfg.width_dim);
        x.extend_from_slice(h.row(i));
        x.extend_from_slice(h.row(j));
        x.extend_from_slice(&width.data()[(j - i) * cfg.width_dim..(j - i + 1) * cfg.width_dim]);
        affine(&x, head.lin_s)
    };
    let start_score = |row: usize, t: usize| cos(&affine(h.row(row), head.lin_t_b), types.e_b.row(t)) / tau(Channel::Start);
    let end_score = |row: usize, t: usize| cos(&affine(h.row(row), head.lin_t_q), types.e_q.row(t)) / tau(Channel::End);
    let span_score = |i: usize, j: usize, t: usize| cos(&span_vec(i, j), types.e.row(t)) / tau(Channel::Span);

    let thresholds: Vec<TypeThreshold> = match &config.threshold_mode {
        ThresholdMode::Dynamic => (0..k)
            .map(|t| TypeThreshold {
                start: start_score(0, t),
                end: end_score(0, t),
                span: span_score(0, 0, t),
            })
            .collect(),
        ThresholdMode::LearnedGlobal => global_thresholds(store, k)?,
        ThresholdMode::DevTuned(v) => v.clone(),
    };

    let mut pool = Vec::new();
    for t in 0..k {
        for i in 0..n {
            for j in i..n {
                if j - i + 1 > config.max_span_len {
                    continue;
                }
                let s = span_score(i + 1, j + 1, t);
                if !(s > thresholds[t].span) {
                    continue;
                }
                if config.strategy == Strategy::JointPositionSpan {
                    let b = start_score(i + 1, t);
                    let e = end_score(j + 1, t);
                    if !(b >= thresholds[t].start && e >= thresholds[t].end) {
                        continue;
                    }
                }
                pool.push((s, i, j, t));
            }
        }
    }
    if !config.flat {
        return Ok(pool.into_iter().map(|(_, i, j, t)| (i, j, t)).collect());
    }
    let mut out = BTreeSet::new();
    while !pool.is_empty() {
        let mut best = 0;
        for c in 1..pool.len() {
            let (a, b) = (pool[c], pool[best]);
            if a.0 > b.0 || (a.0 == b.0 && (a.1, a.2, a.3) < (b.1, b.2, b.3)) {
                best = c;
            }
        }
        let (_, bi, bj, bt) = pool[best];
        out.insert((bi, bj, bt));
        pool.retain(|&(_, i, j, _)| j < bi || i > bj);
    }
    Ok(out)
}

/// One predicted mention in document coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedMention {
    pub start_token: usize,
    pub end_token: usize,
    pub start_char: usize,
    pub end_char: usize,
    #[serde(rename = "type")]
    pub type_name: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentPrediction {
    pub doc_id: String,
    pub mentions: Vec<PredictedMention>,
}

/// Writes one JSON object per line.
pub fn write_predictions(w: &mut impl Write, preds: &[DocumentPrediction]) -> Result<()> {
    for p in preds {
        serde_json::to_writer(&mut *w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_predictions(text: &str) -> Result<Vec<DocumentPrediction>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                line: n + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(start: usize, end: usize, type_id: usize, span_score: f64) -> ScoredMention {
        ScoredMention {
            start,
            end,
            type_id,
            span_score,
            start_score: 0.0,
            end_score: 0.0,
        }
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(enumerate_spans(5, 3).len(), 12);
        assert_eq!(enumerate_spans(3, 10).len(), 6);
        assert!(enumerate_spans(0, 30).is_empty());
        let s = enumerate_spans(4, 2);
        assert_eq!(s, vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (3, 3)]);
    }

    #[test]
    fn decode_filters() {
        let th = [TypeThreshold {
            start: 1.0,
            end: 1.0,
            span: 1.0,
        }];
        let below = [m(0, 0, 0, 0.5), m(0, 1, 0, 1.0)];
        assert!(decode(&below, &th, &DecodeConfig::default()).is_empty());

        let mut c = m(0, 1, 0, 2.0);
        c.start_score = 0.5;
        c.end_score = 3.0;
        let span_only = DecodeConfig::default();
        let joint = DecodeConfig {
            strategy: Strategy::JointPositionSpan,
            ..Default::default()
        };
        assert_eq!(decode(&[c], &th, &span_only).len(), 1);
        assert!(decode(&[c], &th, &joint).is_empty());

        let nested = [m(0, 3, 0, 2.0), m(1, 2, 0, 1.5)];
        let out: Vec<_> = decode(&nested, &th, &span_only).iter().map(ScoredMention::key).collect();
        assert_eq!(out, vec![(0, 3, 0), (1, 2, 0)]);
    }

    #[test]
    fn overlap_removal_traces() {
        let out = remove_overlap(&[m(0, 2, 0, 0.9), m(1, 3, 1, 0.8), m(4, 5, 2, 0.7)]);
        let keys: Vec<_> = out.iter().map(ScoredMention::key).collect();
        assert_eq!(keys, vec![(0, 2, 0), (4, 5, 2)]);

        let out = remove_overlap(&[m(2, 3, 0, 0.5), m(0, 1, 0, 0.5)]);
        let keys: Vec<_> = out.iter().map(ScoredMention::key).collect();
        assert_eq!(keys, vec![(0, 1, 0), (2, 3, 0)]);

        assert!(remove_overlap(&[]).is_empty());
    }

    #[test]
    fn prediction_lines_round_trip() {
        let p = vec![DocumentPrediction {
            doc_id: "d1".into(),
            mentions: vec![PredictedMention {
                start_token: 0,
                end_token: 1,
                start_char: 0,
                end_char: 9,
                type_name: "PER".into(),
                score: 3.5,
            }],
        }];
        let mut buf = Vec::new();
        write_predictions(&mut buf, &p).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("\"type\":\"PER\""));
        assert_eq!(read_predictions(&text).unwrap(), p);
        assert!(matches!(read_predictions("{}\nnot json"), Err(Error::Format { line: 1, .. })));
    }
}

//! Contrastive training losses over start, end and span similarities.
//!
//! Every loss term is an InfoNCE term `−log softmax(pool ∪ {pos})[pos]` over
//! one type's score column of one sequence. Row 0 of the start/end columns
//! and span 0 of the span column are the `[CLS]` threshold anchor.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use typespan_numcore::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::decoder::enumerate_spans;
use crate::error::{Error, Result};
use crate::head::{Channel, SequenceScores};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Start channel weight.
    pub alpha: f64,
    /// End channel weight.
    pub gamma: f64,
    /// Span channel weight.
    pub lambda: f64,
    /// Share of the positive terms; `1 − beta` goes to the threshold terms.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            gamma: 0.2,
            lambda: 0.6,
            beta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.alpha, self.gamma, self.lambda];
        if ws.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) || ws.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!(
                "loss weights must be nonnegative with a positive sum, got ({}, {}, {})",
                self.alpha, self.gamma, self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} not in [0, 1]", self.beta)));
        }
        Ok(())
    }

    pub fn channel(&self, ch: Channel) -> f64 {
        match ch {
            Channel::Start => self.alpha,
            Channel::End => self.gamma,
            Channel::Span => self.lambda,
        }
    }
}

/// Negative candidates of one sequence, per type. Start/end entries are
/// hidden-row indices; span entries index [`SequenceTargets::spans`].
/// Each set contains the threshold anchor (index 0).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativeSets {
    pub start: Vec<Vec<usize>>,
    pub end: Vec<Vec<usize>>,
    pub span: Vec<Vec<usize>>,
}

impl NegativeSets {
    pub fn channel(&self, ch: Channel) -> &[Vec<usize>] {
        match ch {
            Channel::Start => &self.start,
            Channel::End => &self.end,
            Channel::Span => &self.span,
        }
    }
}

/// Gold labels of one encoded sequence in the index space of the scores.
#[derive(Clone, Debug)]
pub struct SequenceTargets {
    pub n_tokens: usize,
    pub num_types: usize,
    /// Hidden-row spans to score; entry 0 is `(0, 0)`.
    pub spans: Vec<(usize, usize)>,
    /// Gold `(start, end, type)` in content-token coordinates, deduplicated.
    pub gold: Vec<(usize, usize, usize)>,
    pub negatives: NegativeSets,
    span_index: HashMap<(usize, usize), usize>,
}

impl SequenceTargets {
    /// Content token `n` is hidden row `n + 1`. Gold spans wider than
    /// `max_span_len` still count for start/end but have no span term.
    pub fn new(
        n_tokens: usize,
        gold: &[(usize, usize, usize)],
        num_types: usize,
        max_span_len: usize,
    ) -> Result<Self> {
        if num_types == 0 {
            return Err(Error::Empty("type set"));
        }
        for &(s, e, k) in gold {
            if s > e || e >= n_tokens || k >= num_types {
                return Err(Error::InvalidMention {
                    start: s,
                    end: e,
                    type_id: k,
                    n_tokens,
                });
            }
        }
        let gold: Vec<_> = gold.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mut spans = vec![(0, 0)];
        spans.extend(enumerate_spans(n_tokens, max_span_len).into_iter().map(|(i, j)| (i + 1, j + 1)));
        let span_index: HashMap<_, _> = spans.iter().enumerate().skip(1).map(|(n, &s)| (s, n)).collect();

        let mut start = Vec::with_capacity(num_types);
        let mut end = Vec::with_capacity(num_types);
        let mut span = Vec::with_capacity(num_types);
        for k in 0..num_types {
            let of_k: Vec<_> = gold.iter().filter(|m| m.2 == k).collect();
            let starts: BTreeSet<usize> = of_k.iter().map(|m| m.0 + 1).collect();
            let ends: BTreeSet<usize> = of_k.iter().map(|m| m.1 + 1).collect();
            let golds: BTreeSet<(usize, usize)> = of_k.iter().map(|m| (m.0 + 1, m.1 + 1)).collect();
            start.push(std::iter::once(0).chain((1..=n_tokens).filter(|p| !starts.contains(p))).collect());
            end.push(std::iter::once(0).chain((1..=n_tokens).filter(|p| !ends.contains(p))).collect());
            span.push(
                std::iter::once(0)
                    .chain((1..spans.len()).filter(|&n| !golds.contains(&spans[n])))
                    .collect(),
            );
        }
        Ok(Self {
            n_tokens,
            num_types,
            spans,
            gold,
            negatives: NegativeSets { start, end, span },
            span_index,
        })
    }

    /// Index of a content-coordinate span in [`spans`](Self::spans).
    pub fn span_position(&self, start: usize, end: usize) -> Option<usize> {
        self.span_index.get(&(start + 1, end + 1)).copied()
    }

    /// Positive indices of one channel for every gold mention, with type.
    fn positives(&self, ch: Channel) -> Vec<(usize, usize)> {
        self.gold
            .iter()
            .filter_map(|&(s, e, k)| match ch {
                Channel::Start => Some((s + 1, k)),
                Channel::End => Some((e + 1, k)),
                Channel::Span => self.span_position(s, e).map(|p| (p, k)),
            })
            .collect()
    }
}

/// One sequence's scores together with its targets.
#[derive(Clone, Copy, Debug)]
pub struct LossInput<'a> {
    pub scores: SequenceScores,
    pub targets: &'a SequenceTargets,
}

/// Learnable per-type thresholds that stand in for the `[CLS]` scores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlobalThresholds {
    /// `(K,)` vectors for start, end and span.
    pub ids: [ParamId; 3],
}

impl GlobalThresholds {
    pub fn init(store: &mut ParamStore, num_types: usize) -> Result<Self> {
        for ch in Channel::ALL {
            store.insert(format!("global.{}", ch.name()), Tensor::zeros(&[num_types]))?;
        }
        Self::resolve(store)
    }

    pub fn resolve(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            ids: [
                store.id("global.start")?,
                store.id("global.end")?,
                store.id("global.span")?,
            ],
        })
    }

    pub fn values(&self, store: &ParamStore, ch: Channel) -> Vec<f64> {
        store.get(self.ids[ch.index()]).data().to_vec()
    }
}

/// Span InfoNCE: the positive against its negatives.
pub fn span_loss(g: &mut Graph, scores: Var, positive: usize, negatives: &[usize]) -> Result<Var> {
    Ok(g.info_nce(scores, positive, negatives)?)
}

/// Start InfoNCE over a start-score column.
pub fn start_loss(g: &mut Graph, scores: Var, positive: usize, negatives: &[usize]) -> Result<Var> {
    span_loss(g, scores, positive, negatives)
}

/// End InfoNCE over an end-score column.
pub fn end_loss(g: &mut Graph, scores: Var, positive: usize, negatives: &[usize]) -> Result<Var> {
    span_loss(g, scores, positive, negatives)
}

/// Threshold term: the anchor at index 0 treated as the positive.
pub fn threshold_loss(g: &mut Graph, scores: Var, negatives: &[usize]) -> Result<Var> {
    Ok(g.info_nce(scores, 0, negatives)?)
}

/// `beta · positive + (1 − beta) · threshold`.
pub fn augmented_loss(g: &mut Graph, positive: Var, threshold: Var, beta: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta {beta} not in [0, 1]")));
    }
    if beta == 1.0 {
        return Ok(positive);
    }
    let p = g.scale(positive, beta)?;
    let t = g.scale(threshold, 1.0 - beta)?;
    Ok(g.add(p, t)?)
}

/// `alpha · start + gamma · end + lambda · span`.
pub fn combine(g: &mut Graph, start: Var, end: Var, span: Var, weights: &LossWeights) -> Result<Var> {
    let mut parts = Vec::with_capacity(3);
    for (v, ch) in [(start, Channel::Start), (end, Channel::End), (span, Channel::Span)] {
        let w = weights.channel(ch);
        if w != 0.0 {
            parts.push(g.scale(v, w)?);
        }
    }
    Ok(g.add_n(&parts)?)
}

/// Batch-mean positive and threshold losses of one channel.
#[derive(Clone, Copy, Debug)]
pub struct ChannelLoss {
    /// Mean over gold `(mention, type)` pairs; zero when there are none.
    pub positive: Var,
    /// Mean over `(sequence, type)` pairs.
    pub threshold: Var,
    pub num_positive: usize,
    pub num_threshold: usize,
}

/// Per-channel losses plus the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub start: ChannelLoss,
    pub end: ChannelLoss,
    pub span: ChannelLoss,
}

/// Channel losses. With `global`, the anchor score of every column is
/// replaced by the learnable per-type threshold.
pub fn channel_loss(
    g: &mut Graph,
    batch: &[LossInput<'_>],
    ch: Channel,
    global: Option<&GlobalThresholds>,
) -> Result<ChannelLoss> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let global_row = match global {
        Some(gt) => {
            let t = g.param(gt.ids[ch.index()]);
            let k = g.shape(t)[0];
            Some(g.reshape(t, &[1, k])?)
        }
        None => None,
    };
    let mut positives = Vec::new();
    let mut thresholds = Vec::new();
    for item in batch {
        let t = item.targets;
        let mat = match ch {
            Channel::Start => item.scores.start,
            Channel::End => item.scores.end,
            Channel::Span => item.scores.span,
        };
        let (rows, k) = g.value(mat).dims2();
        if k != t.num_types {
            return Err(Error::Config(format!("scores have {k} types, targets {}", t.num_types)));
        }
        let mat = match global_row {
            Some(row) => {
                if g.shape(row)[1] != k {
                    return Err(Error::Config(format!("{} global thresholds for {k} types", g.shape(row)[1])));
                }
                let rest = g.slice_rows(mat, 1, rows)?;
                g.concat_rows(&[row, rest])?
            }
            None => mat,
        };
        let pos = t.positives(ch);
        let negs = t.negatives.channel(ch);
        for (ty, neg) in negs.iter().enumerate() {
            let col = g.column(mat, ty)?;
            for &(p, _) in pos.iter().filter(|(_, pk)| *pk == ty) {
                positives.push(span_loss(g, col, p, neg)?);
            }
            thresholds.push(threshold_loss(g, col, neg)?);
        }
    }
    let num_positive = positives.len();
    let positive = if positives.is_empty() {
        g.constant(Tensor::scalar(0.0))?
    } else {
        let s = g.add_n(&positives)?;
        g.scale(s, 1.0 / num_positive as f64)?
    };
    let s = g.add_n(&thresholds)?;
    let threshold = g.scale(s, 1.0 / thresholds.len() as f64)?;
    Ok(ChannelLoss {
        positive,
        threshold,
        num_positive,
        num_threshold: thresholds.len(),
    })
}

fn weighted_total(
    g: &mut Graph,
    batch: &[LossInput<'_>],
    weights: &LossWeights,
    global: Option<&GlobalThresholds>,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let start = channel_loss(g, batch, Channel::Start, global)?;
    let end = channel_loss(g, batch, Channel::End, global)?;
    let span = channel_loss(g, batch, Channel::Span, global)?;
    let mut aug = Vec::with_capacity(3);
    for c in [&start, &end, &span] {
        aug.push(augmented_loss(g, c.positive, c.threshold, weights.beta)?);
    }
    let total = combine(g, aug[0], aug[1], aug[2], weights)?;
    Ok(LossBreakdown { total, start, end, span })
}

/// Weighted sum of the threshold-augmented start, end and span losses.
pub fn total_loss(g: &mut Graph, batch: &[LossInput<'_>], weights: &LossWeights) -> Result<LossBreakdown> {
    weighted_total(g, batch, weights, None)
}

/// As [`total_loss`] with the anchor scores replaced by learnable thresholds.
pub fn total_loss_global_threshold(
    g: &mut Graph,
    batch: &[LossInput<'_>],
    thresholds: &GlobalThresholds,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weighted_total(g, batch, weights, Some(thresholds))
}

/// Positive terms only (`beta = 1`), for models whose thresholds are
/// tuned on dev data afterwards.
pub fn plain_loss_no_threshold(g: &mut Graph, batch: &[LossInput<'_>], weights: &LossWeights) -> Result<LossBreakdown> {
    let w = LossWeights { beta: 1.0, ..*weights };
    weighted_total(g, batch, &w, None)
}

//! Training loop, dev-set threshold tuning and similarity export.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use typespan_numcore::{Gradients, Graph, ParamStore, Tensor, Var};

use crate::datasets::{merge_window_predictions, seeded_shuffle, LabeledDocument, Window};
use crate::decoder::{decode, DecodeConfig, ScoredMention, Strategy, ThresholdMode, TypeThreshold};
use crate::error::{Error, Result};
use crate::metrics::{strict_span_prf, Triple};
use crate::model::{Model, ModelConfig, Objective, TrainExample};
use crate::objectives::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Windows per step.
    pub batch_size: usize,
    pub max_seq_len: usize,
    pub max_span_len: usize,
    pub stride: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub warmup_steps: usize,
    pub eval_every_steps: usize,
    pub patience: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub threshold_mode: ThresholdMode,
    /// Stops after this many updates even if epochs remain.
    pub max_steps: Option<usize>,
    /// Quantile points per coordinate when tuning global thresholds.
    pub tune_grid: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            epochs: 20,
            batch_size: 8,
            max_seq_len: 128,
            max_span_len: 30,
            stride: 16,
            weight_decay: 0.01,
            dropout: 0.1,
            warmup_steps: 0,
            eval_every_steps: 50,
            patience: 10,
            seed: 42,
            weights: LossWeights::default(),
            threshold_mode: ThresholdMode::Dynamic,
            max_steps: None,
            tune_grid: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("max_seq_len", self.max_seq_len),
            ("max_span_len", self.max_span_len),
            ("eval_every_steps", self.eval_every_steps),
            ("patience", self.patience),
            ("tune_grid", self.tune_grid),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be finite and nonnegative", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.stride >= self.max_seq_len {
            return Err(Error::Config("stride must be below max_seq_len".into()));
        }
        self.weights.validate()
    }

    /// Copies the shared window, span and dropout settings into `base`.
    pub fn apply_to(&self, base: &ModelConfig) -> ModelConfig {
        let mut c = base.clone();
        c.max_seq_len = self.max_seq_len;
        c.stride = self.stride;
        c.encoder.dropout = self.dropout;
        c.decode.max_span_len = self.max_span_len;
        c.decode.threshold_mode = self.threshold_mode.clone();
        c.harmonize();
        c
    }
}

/// Linear decay from `peak` to 0 at `total`, after an optional linear warmup.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if step >= self.total {
            return 0.0;
        }
        self.peak * (self.total - step) as f64 / (self.total - self.warmup) as f64
    }
}

/// Adam with decoupled weight decay. Parameters without a gradient in a
/// step are left untouched.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    seen: Vec<u64>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
            seen: vec![0; store.len()],
        }
    }

    pub fn first_moment(&self, id: typespan_numcore::ParamId) -> &Tensor {
        &self.m[id.0]
    }

    pub fn second_moment(&self, id: typespan_numcore::ParamId) -> &Tensor {
        &self.v[id.0]
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.step += 1;
        for (id, grad) in grads.params() {
            let k = id.0;
            self.seen[k] += 1;
            let t = self.seen[k] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let gi = grad.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p[i]);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean training loss since the previous entry.
    pub loss: f64,
    pub dev_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub steps: usize,
    pub log: Vec<LogEntry>,
    pub best_step: usize,
    pub best_dev_f1: f64,
    pub stopped_early: bool,
}

/// Candidates of every window of every document, plus gold triples.
#[derive(Clone, Debug)]
pub struct ScoredCorpus {
    pub docs: Vec<Vec<(Window, Vec<ScoredMention>, Vec<TypeThreshold>)>>,
    pub gold: Vec<Vec<Triple>>,
}

impl ScoredCorpus {
    pub fn new(model: &Model, docs: &[LabeledDocument], decode_cfg: &DecodeConfig) -> Result<Self> {
        let types = model.type_embeddings()?;
        Ok(Self {
            docs: docs
                .iter()
                .map(|d| model.score_windows(d, &types, decode_cfg))
                .collect::<Result<_>>()?,
            gold: model.gold_triples(docs)?,
        })
    }

    /// Decodes with the scored thresholds, or with `fixed` for every window.
    pub fn decode(&self, fixed: Option<&[TypeThreshold]>, decode_cfg: &DecodeConfig) -> Vec<Vec<Triple>> {
        let per_window = DecodeConfig {
            flat: false,
            ..decode_cfg.clone()
        };
        self.docs
            .iter()
            .map(|windows| {
                let (ws, preds): (Vec<Window>, Vec<Vec<ScoredMention>>) = windows
                    .iter()
                    .map(|(w, cands, th)| (w.clone(), decode(cands, fixed.unwrap_or(th), &per_window)))
                    .unzip();
                merge_window_predictions(&ws, &preds, decode_cfg.flat)
                    .iter()
                    .map(ScoredMention::key)
                    .collect()
            })
            .collect()
    }

    pub fn span_f1(&self, fixed: Option<&[TypeThreshold]>, decode_cfg: &DecodeConfig) -> f64 {
        strict_span_prf(&self.decode(fixed, decode_cfg), &self.gold).f1
    }
}

/// Micro strict span F1 of `model` on `docs` with its own decode settings.
pub fn evaluate(model: &Model, docs: &[LabeledDocument]) -> Result<f64> {
    let cfg = &model.config.decode;
    let scored = ScoredCorpus::new(model, docs, &scoring_config(cfg))?;
    Ok(match &cfg.threshold_mode {
        ThresholdMode::DevTuned(v) => scored.span_f1(Some(v), cfg),
        _ => scored.span_f1(None, cfg),
    })
}

fn scoring_config(cfg: &DecodeConfig) -> DecodeConfig {
    match cfg.threshold_mode {
        ThresholdMode::DevTuned(_) => DecodeConfig {
            threshold_mode: ThresholdMode::Dynamic,
            ..cfg.clone()
        },
        _ => cfg.clone(),
    }
}

/// Something [`fit`] can train.
pub trait Trainable: Clone {
    type Example;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn examples(&self, doc: &LabeledDocument) -> Result<Vec<Self::Example>>;
    fn loss(&self, g: &mut Graph, batch: &[&Self::Example], cfg: &TrainConfig) -> Result<Var>;
    /// Dev F1 used for model selection. May refresh state derived from dev
    /// data, such as tuned thresholds.
    fn select(&mut self, dev: &[LabeledDocument], cfg: &TrainConfig) -> Result<f64>;
    fn save(&self, dir: &Path, cfg: &TrainConfig) -> Result<()>;
}

impl Trainable for Model {
    type Example = TrainExample;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn examples(&self, doc: &LabeledDocument) -> Result<Vec<TrainExample>> {
        Model::examples(self, doc)
    }

    fn loss(&self, g: &mut Graph, batch: &[&TrainExample], cfg: &TrainConfig) -> Result<Var> {
        let objective = Objective::for_mode(&self.config.decode.threshold_mode);
        Ok(self.batch_loss(g, batch, &cfg.weights, objective)?.total)
    }

    /// Plain-loss models get thresholds tuned on `dev` first.
    fn select(&mut self, dev: &[LabeledDocument], cfg: &TrainConfig) -> Result<f64> {
        if let ThresholdMode::DevTuned(_) = self.config.decode.threshold_mode {
            let tuned = tune_global_thresholds_on_dev(self, dev, &ThresholdGrid::Quantiles(cfg.tune_grid))?;
            self.config.decode.threshold_mode = ThresholdMode::DevTuned(tuned.thresholds);
            return Ok(tuned.f1);
        }
        evaluate(self, dev)
    }

    fn save(&self, dir: &Path, cfg: &TrainConfig) -> Result<()> {
        Model::save(self, dir, &serde_json::to_value(cfg)?)
    }
}

fn all_finite(grads: &Gradients) -> bool {
    grads.params().all(|(_, t)| t.all_finite())
}

/// Trains `model` in place and leaves it holding the best dev checkpoint.
/// Log lines go to `log`; with `checkpoint`, every new best is saved there.
pub fn fit<M: Trainable>(
    model: &mut M,
    train: &[LabeledDocument],
    dev: &[LabeledDocument],
    cfg: &TrainConfig,
    log: &mut dyn Write,
    checkpoint: Option<&Path>,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if dev.is_empty() {
        return Err(Error::Empty("development split"));
    }
    let examples: Vec<M::Example> = train
        .iter()
        .map(|d| model.examples(d))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let per_epoch = examples.len().div_ceil(cfg.batch_size);
    let mut total = per_epoch * cfg.epochs;
    if let Some(cap) = cfg.max_steps {
        total = total.min(cap);
    }
    let schedule = LinearSchedule {
        peak: cfg.learning_rate,
        warmup: cfg.warmup_steps.min(total),
        total,
    };
    let mut opt = OptimizerState::new(model.params(), cfg.weight_decay);
    let mut report = FitReport {
        steps: 0,
        log: Vec::new(),
        best_step: 0,
        best_dev_f1: f64::NEG_INFINITY,
        stopped_early: false,
    };
    let mut best = model.clone();
    let mut stale = 0;
    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    let mut step = 0;

    let mut evaluate_now = |model: &mut M, step: usize, loss: f64, report: &mut FitReport, best: &mut M| -> Result<bool> {
        let f1 = model.select(dev, cfg)?;
        let entry = LogEntry { step, loss, dev_f1: f1 };
        writeln!(log, "{}", serde_json::to_string(&entry)?)?;
        report.log.push(entry);
        if f1 > report.best_dev_f1 {
            report.best_dev_f1 = f1;
            report.best_step = step;
            *best = model.clone();
            stale = 0;
            if let Some(dir) = checkpoint {
                model.save(dir, cfg)?;
            }
            Ok(false)
        } else {
            stale += 1;
            Ok(stale >= cfg.patience)
        }
    };

    'outer: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        seeded_shuffle(&mut order, cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        for chunk in order.chunks(cfg.batch_size) {
            if step >= total {
                break 'outer;
            }
            let batch: Vec<&M::Example> = chunk.iter().map(|&i| &examples[i]).collect();
            let dropout_seed = cfg.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ step as u64;
            let (loss, grads) = {
                let mut g = Graph::with_params(model.params()).train(dropout_seed);
                let total = model.loss(&mut g, &batch, cfg)?;
                let loss = g.scalar_value(total);
                let grads = g.backward(total)?;
                (loss, grads)
            };
            if !loss.is_finite() || !all_finite(&grads) {
                *model = best;
                return Err(Error::Diverged { step });
            }
            opt.update(model.params_mut(), &grads, schedule.lr(step));
            step += 1;
            loss_sum += loss;
            loss_count += 1;
            if step % cfg.eval_every_steps == 0 {
                let mean = loss_sum / loss_count as f64;
                (loss_sum, loss_count) = (0.0, 0);
                if evaluate_now(model, step, mean, &mut report, &mut best)? {
                    report.stopped_early = true;
                    break 'outer;
                }
            }
        }
    }
    if loss_count > 0 && !report.stopped_early {
        let mean = loss_sum / loss_count as f64;
        evaluate_now(model, step, mean, &mut report, &mut best)?;
    }
    report.steps = step;
    *model = best;
    Ok(report)
}

/// Candidate threshold values for each tuned coordinate.
#[derive(Clone, Debug, PartialEq)]
pub enum ThresholdGrid {
    /// `n` evenly spaced quantiles of the dev scores of each coordinate.
    Quantiles(usize),
    /// The same values for every coordinate.
    Values(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TuneResult {
    pub thresholds: Vec<TypeThreshold>,
    pub f1: f64,
}

/// Threshold used for channels that are not tuned.
pub const UNCONSTRAINED: f64 = f64::MIN;

/// Coordinate-wise grid search of per-type global thresholds maximizing
/// dev micro strict span F1. Span thresholds are tuned for both strategies,
/// start and end thresholds only for joint decoding.
///
/// Every "uniform" point (the i-th grid value on every coordinate) is tried
/// first; coordinate ascent then runs from the best one until no single
/// change improves F1.
pub fn tune_global_thresholds_on_dev(model: &Model, dev: &[LabeledDocument], grid: &ThresholdGrid) -> Result<TuneResult> {
    if dev.is_empty() {
        return Err(Error::Empty("development split"));
    }
    let cfg = &model.config.decode;
    let scored = ScoredCorpus::new(model, dev, &scoring_config(cfg))?;
    tune_on_scores(&scored, model.num_types(), cfg, grid)
}

#[derive(Clone, Copy)]
enum Coord {
    Start,
    End,
    Span,
}

fn get(th: &TypeThreshold, c: Coord) -> f64 {
    match c {
        Coord::Start => th.start,
        Coord::End => th.end,
        Coord::Span => th.span,
    }
}

fn set(th: &mut TypeThreshold, c: Coord, v: f64) {
    match c {
        Coord::Start => th.start = v,
        Coord::End => th.end = v,
        Coord::Span => th.span = v,
    }
}

/// Grid search over precomputed candidate scores.
pub fn tune_on_scores(scored: &ScoredCorpus, num_types: usize, cfg: &DecodeConfig, grid: &ThresholdGrid) -> Result<TuneResult> {
    let channels: &[Coord] = match cfg.strategy {
        Strategy::SpanOnly => &[Coord::Span],
        Strategy::JointPositionSpan => &[Coord::Span, Coord::Start, Coord::End],
    };
    let coords: Vec<(usize, Coord)> = (0..num_types).flat_map(|k| channels.iter().map(move |&c| (k, c))).collect();
    let values: Vec<Vec<f64>> = coords
        .iter()
        .map(|&(k, c)| match grid {
            ThresholdGrid::Values(v) => v.clone(),
            ThresholdGrid::Quantiles(n) => quantile_grid(scored, k, c, *n),
        })
        .collect();
    if values.iter().any(Vec::is_empty) {
        return Err(Error::Empty("threshold grid"));
    }
    let unconstrained = TypeThreshold {
        start: UNCONSTRAINED,
        end: UNCONSTRAINED,
        span: UNCONSTRAINED,
    };
    let f1 = |th: &[TypeThreshold]| scored.span_f1(Some(th), cfg);
    let points = values.iter().map(Vec::len).max().unwrap_or(0);
    let mut best: Option<(Vec<TypeThreshold>, f64)> = None;
    for i in 0..points {
        let mut th = vec![unconstrained; num_types];
        for (n, &(k, c)) in coords.iter().enumerate() {
            let v = &values[n];
            set(&mut th[k], c, v[i.min(v.len() - 1)]);
        }
        let score = f1(&th);
        if best.as_ref().is_none_or(|(_, b)| score > *b) {
            best = Some((th, score));
        }
    }
    let (mut th, mut score) = best.ok_or(Error::Empty("threshold grid"))?;
    for _ in 0..20 {
        let mut changed = false;
        for (n, &(k, c)) in coords.iter().enumerate() {
            for &v in &values[n] {
                if v == get(&th[k], c) {
                    continue;
                }
                let mut trial = th.clone();
                set(&mut trial[k], c, v);
                let s = f1(&trial);
                if s > score {
                    (th, score) = (trial, s);
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    Ok(TuneResult { thresholds: th, f1: score })
}

fn quantile_grid(scored: &ScoredCorpus, k: usize, c: Coord, n: usize) -> Vec<f64> {
    let mut scores: Vec<f64> = scored
        .docs
        .iter()
        .flatten()
        .flat_map(|(_, cands, _)| cands.iter())
        .filter(|m| m.type_id == k)
        .map(|m| match c {
            Coord::Start => m.start_score,
            Coord::End => m.end_score,
            Coord::Span => m.span_score,
        })
        .collect();
    if scores.is_empty() || n == 0 {
        return vec![0.0];
    }
    scores.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = (0..n)
        .map(|i| {
            let q = if n == 1 { 0.5 } else { i as f64 / (n - 1) as f64 };
            scores[(q * (scores.len() - 1) as f64).round() as usize]
        })
        .collect();
    out.dedup();
    out
}

/// Writes `doc_id,type,span_kind,channel,score` rows: every candidate of
/// every window on each channel (start and end per token, span per span),
/// plus one threshold row per window, type and channel. Returns the row
/// count, header excluded.
pub fn dump_similarity_distributions(model: &Model, docs: &[LabeledDocument], out: &mut dyn Write) -> Result<usize> {
    let types = model.type_embeddings()?;
    let cfg = scoring_config(&model.config.decode);
    let fixed = match &model.config.decode.threshold_mode {
        ThresholdMode::DevTuned(v) => Some(v.clone()),
        _ => None,
    };
    writeln!(out, "doc_id,type,span_kind,channel,score")?;
    let mut rows = 0;
    let mut row = |out: &mut dyn Write, doc: &str, ty: &str, kind: &str, ch: &str, score: f64| -> Result<()> {
        rows += 1;
        writeln!(out, "{},{ty},{kind},{ch},{score}", csv_field(doc))?;
        Ok(())
    };
    for doc in docs {
        for (w, cands, th) in model.score_windows(doc, &types, &cfg)? {
            let th = fixed.as_deref().unwrap_or(&th);
            for (k, name) in model.type_index.names().iter().enumerate() {
                let name = csv_field(name);
                let gold: Vec<(usize, usize)> = w
                    .mentions
                    .iter()
                    .filter(|m| m.type_name == *model.type_index.name(k))
                    .map(|m| (m.start_token, m.end_token))
                    .collect();
                let kind = |hit: bool| if hit { "entity" } else { "non_entity" };
                for m in cands.iter().filter(|m| m.type_id == k && m.start == m.end) {
                    let i = m.start;
                    row(out, &doc.doc_id, &name, kind(gold.iter().any(|g| g.0 == i)), "start", m.start_score)?;
                    row(out, &doc.doc_id, &name, kind(gold.iter().any(|g| g.1 == i)), "end", m.end_score)?;
                }
                for m in cands.iter().filter(|m| m.type_id == k) {
                    let hit = gold.contains(&(m.start, m.end));
                    row(out, &doc.doc_id, &name, kind(hit), "span", m.span_score)?;
                }
                row(out, &doc.doc_id, &name, "threshold", "start", th[k].start)?;
                row(out, &doc.doc_id, &name, "threshold", "end", th[k].end)?;
                row(out, &doc.doc_id, &name, "threshold", "span", th[k].span)?;
            }
        }
    }
    Ok(rows)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

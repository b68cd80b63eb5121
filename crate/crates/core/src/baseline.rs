//! Span classifier with an explicit Outside class, trained with softmax
//! cross-entropy over every candidate span. Serves as the reference point
//! for the contrastive model under partial labels.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use typespan_numcore::{Graph, ParamStore, Var};

use crate::datasets::{make_windows, merge_window_predictions, LabeledDocument, TypeIndex};
use crate::decoder::{enumerate_spans, ScoredMention};
use crate::encoder::{TransformerEncoder, Vocab};
use crate::error::{Error, Result};
use crate::head::{HeadParams, Linear};
use crate::metrics::{strict_span_prf, Triple};
use crate::model::ModelConfig;
use crate::trainer::{TrainConfig, Trainable};

/// Class 0 is Outside; type `k` is class `k + 1`.
#[derive(Clone, Debug)]
pub struct SpanClassifier {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub type_index: TypeIndex,
    pub store: ParamStore,
    encoder: TransformerEncoder,
    head: HeadParams,
    classifier: Linear,
}

#[derive(Clone, Debug)]
pub struct BaselineExample {
    pub ids: Vec<u32>,
    /// Candidate spans in hidden-state coordinates.
    pub spans: Vec<(usize, usize)>,
    pub labels: Vec<usize>,
}

impl SpanClassifier {
    /// Uses the text encoder, span projection and width table sizes of
    /// `config`; the description mode and threshold mode are ignored.
    pub fn init(mut config: ModelConfig, vocab: Vocab, type_index: TypeIndex, seed: u64) -> Result<Self> {
        config.harmonize();
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = TransformerEncoder::init(&mut store, "text", &config.encoder, vocab.len(), &mut rng)?;
        let head = HeadParams::init(&mut store, &config.head, &mut rng)?;
        let classifier = Linear::init(&mut store, "outside.cls", config.head.d_proj, type_index.len() + 1, &mut rng)?;
        Ok(Self {
            config,
            vocab,
            type_index,
            store,
            encoder,
            head,
            classifier,
        })
    }

    pub fn num_types(&self) -> usize {
        self.type_index.len()
    }

    /// Class logits `(spans.len(), K + 1)`.
    pub fn logits(&self, g: &mut Graph, ids: &[u32], spans: &[(usize, usize)]) -> Result<Var> {
        let h = self.encoder.forward(g, ids)?;
        let s = self.head.span_matrix(g, h, spans)?;
        let s = g.gelu(s)?;
        self.classifier.apply(g, s)
    }

    /// Spans whose best class is not Outside, scored by that class's
    /// probability, in document coordinates and sorted by `(start, end, type)`.
    pub fn predict(&self, doc: &LabeledDocument, flat: bool) -> Result<Vec<ScoredMention>> {
        let mut windows = Vec::new();
        let mut preds = Vec::new();
        for w in make_windows(doc, self.config.max_seq_len, self.config.stride)? {
            let words: Vec<&str> = doc.tokens[w.start..w.end].iter().map(|t| t.text.as_str()).collect();
            let content = enumerate_spans(words.len(), self.config.decode.max_span_len);
            let mut found = Vec::new();
            if !content.is_empty() {
                let spans: Vec<(usize, usize)> = content.iter().map(|&(i, j)| (i + 1, j + 1)).collect();
                let mut g = Graph::with_params(&self.store);
                let logits = self.logits(&mut g, &self.vocab.encode_words(&words), &spans)?;
                let probs = g.softmax_rows(logits)?;
                let p = g.value(probs);
                for (n, &(i, j)) in content.iter().enumerate() {
                    let row = p.row(n);
                    let (best, score) = row
                        .iter()
                        .copied()
                        .enumerate()
                        .fold((0, f64::NEG_INFINITY), |acc, (c, v)| if v > acc.1 { (c, v) } else { acc });
                    if best > 0 {
                        found.push(ScoredMention {
                            start: i,
                            end: j,
                            type_id: best - 1,
                            span_score: score,
                            start_score: score,
                            end_score: score,
                        });
                    }
                }
            }
            windows.push(w);
            preds.push(found);
        }
        Ok(merge_window_predictions(&windows, &preds, flat))
    }

    pub fn predict_triples(&self, docs: &[LabeledDocument]) -> Result<Vec<Vec<Triple>>> {
        docs.iter()
            .map(|d| Ok(self.predict(d, self.config.decode.flat)?.iter().map(ScoredMention::key).collect()))
            .collect()
    }

    pub fn evaluate(&self, docs: &[LabeledDocument]) -> Result<f64> {
        let gold = docs.iter().map(|d| d.gold_ids(&self.type_index)).collect::<Result<Vec<_>>>()?;
        Ok(strict_span_prf(&self.predict_triples(docs)?, &gold).f1)
    }
}

impl Trainable for SpanClassifier {
    type Example = BaselineExample;

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Every candidate span of each window; unlabeled spans are Outside.
    fn examples(&self, doc: &LabeledDocument) -> Result<Vec<BaselineExample>> {
        let mut out = Vec::new();
        for w in make_windows(doc, self.config.max_seq_len, self.config.stride)? {
            let words: Vec<&str> = doc.tokens[w.start..w.end].iter().map(|t| t.text.as_str()).collect();
            let content = enumerate_spans(words.len(), self.config.decode.max_span_len);
            if content.is_empty() {
                continue;
            }
            let mut labels = vec![0; content.len()];
            for m in &w.mentions {
                let k = self.type_index.id(&m.type_name)?;
                if let Some(n) = content.iter().position(|&s| s == (m.start_token, m.end_token)) {
                    labels[n] = k + 1;
                }
            }
            out.push(BaselineExample {
                ids: self.vocab.encode_words(&words),
                spans: content.iter().map(|&(i, j)| (i + 1, j + 1)).collect(),
                labels,
            });
        }
        Ok(out)
    }

    /// Mean cross-entropy over the batch's sequences.
    fn loss(&self, g: &mut Graph, batch: &[&BaselineExample], _cfg: &TrainConfig) -> Result<Var> {
        if batch.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut terms = Vec::with_capacity(batch.len());
        for ex in batch {
            let logits = self.logits(g, &ex.ids, &ex.spans)?;
            terms.push(g.softmax_cross_entropy(logits, &ex.labels)?);
        }
        let sum = g.add_n(&terms)?;
        Ok(g.scale(sum, 1.0 / terms.len() as f64)?)
    }

    fn select(&mut self, dev: &[LabeledDocument], _cfg: &TrainConfig) -> Result<f64> {
        self.evaluate(dev)
    }

    fn save(&self, dir: &Path, _cfg: &TrainConfig) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.store.save(&dir.join(crate::model::PARAMS_FILE))?;
        self.vocab.save(&dir.join(crate::model::VOCAB_FILE))
    }
}

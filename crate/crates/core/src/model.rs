//! A complete recognizer: vocabulary, type definitions, both encoders, the
//! head and the decoding settings, plus checkpoint I/O.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use typespan_numcore::{normal_tensor, Graph, ParamId, ParamStore, Var};

use crate::datasets::{
    make_windows, merge_window_predictions, type_description, DescriptionMode, EntityTypeDef, LabeledDocument,
    TypeIndex, TypeInput, INFERENCE_PROTOTYPES,
};
use crate::decoder::{decode, score_all, DecodeConfig, DocumentPrediction, PredictedMention, ScoredMention, ThresholdMode};
use crate::encoder::{encode_text, EncoderConfig, TransformerEncoder, Vocab};
use crate::error::{Error, Result};
use crate::head::{HeadConfig, HeadParams, TypeEmbeddings};
use crate::objectives::{
    plain_loss_no_threshold, total_loss, total_loss_global_threshold, GlobalThresholds, LossBreakdown, LossInput,
    LossWeights, SequenceTargets,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared by the type and text encoders.
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub description_mode: DescriptionMode,
    /// Content tokens per window.
    pub max_seq_len: usize,
    /// Tokens shared by consecutive windows.
    pub stride: usize,
    pub decode: DecodeConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            description_mode: DescriptionMode::Guideline,
            max_seq_len: 128,
            stride: 16,
            decode: DecodeConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Sets the sizes that follow from others: head input width, position
    /// count and width table rows.
    pub fn harmonize(&mut self) {
        self.head.d_model = self.encoder.d_model;
        self.encoder.max_positions = self.encoder.max_positions.max(self.max_seq_len + 2);
        self.head.width_rows = self.encoder.max_positions;
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decode.validate()?;
        if self.head.d_model != self.encoder.d_model {
            return Err(Error::Config(format!(
                "head d_model {} differs from encoder d_model {}",
                self.head.d_model, self.encoder.d_model
            )));
        }
        if self.max_seq_len + 2 > self.encoder.max_positions {
            return Err(Error::Config(format!(
                "max_seq_len {} needs {} positions, encoder has {}",
                self.max_seq_len,
                self.max_seq_len + 2,
                self.encoder.max_positions
            )));
        }
        if self.stride >= self.max_seq_len {
            return Err(Error::Config(format!("stride {} must be below max_seq_len {}", self.stride, self.max_seq_len)));
        }
        if self.head.width_rows < self.decode.max_span_len.min(self.max_seq_len) {
            return Err(Error::Config("width table smaller than the span length limit".into()));
        }
        Ok(())
    }
}

/// Which loss trains the model, implied by the threshold mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Dynamic,
    LearnedGlobal,
    Plain,
}

impl Objective {
    pub fn for_mode(mode: &ThresholdMode) -> Self {
        match mode {
            ThresholdMode::Dynamic => Objective::Dynamic,
            ThresholdMode::LearnedGlobal => Objective::LearnedGlobal,
            ThresholdMode::DevTuned(_) => Objective::Plain,
        }
    }
}

/// One training window: ids with markers and the loss targets.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub doc_id: String,
    pub ids: Vec<u32>,
    pub targets: SequenceTargets,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub types: Vec<EntityTypeDef>,
    pub type_index: TypeIndex,
    pub store: ParamStore,
    /// Absent in atomic mode.
    pub type_encoder: Option<TransformerEncoder>,
    pub text_encoder: TransformerEncoder,
    pub head: HeadParams,
    /// `(K, d_model)` table used in atomic mode.
    pub atomic: Option<ParamId>,
    pub global: Option<GlobalThresholds>,
    train_inputs: Vec<TypeInput>,
    eval_inputs: Vec<TypeInput>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    config: ModelConfig,
    types: Vec<EntityTypeDef>,
    vocab_sha256: String,
    #[serde(default)]
    extra: serde_json::Value,
}

pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SIDECAR_FILE: &str = "model.json";

/// Hex SHA-256 of a vocabulary file's contents.
pub fn vocab_hash(vocab: &Vocab) -> String {
    let mut h = Sha256::new();
    for t in vocab.tokens() {
        h.update(t.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Vocabulary over training documents and every type description.
pub fn build_vocab(docs: &[LabeledDocument], types: &[EntityTypeDef]) -> Vocab {
    let words: Vec<String> = types.iter().flat_map(EntityTypeDef::words).collect();
    Vocab::build(
        docs.iter()
            .flat_map(|d| d.tokens.iter().map(|t| t.text.as_str()))
            .chain(words.iter().map(String::as_str)),
    )
}

impl Model {
    pub fn init(mut config: ModelConfig, vocab: Vocab, types: Vec<EntityTypeDef>, seed: u64) -> Result<Self> {
        config.harmonize();
        config.validate()?;
        let type_index = TypeIndex::new(&types)?;
        if types.is_empty() {
            return Err(Error::Empty("type set"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        if config.description_mode == DescriptionMode::Atomic {
            store.insert("type.atomic", normal_tensor(&mut rng, &[types.len(), config.encoder.d_model], 0.02))?;
        } else {
            TransformerEncoder::init(&mut store, "type", &config.encoder, vocab.len(), &mut rng)?;
        }
        TransformerEncoder::init(&mut store, "text", &config.encoder, vocab.len(), &mut rng)?;
        HeadParams::init(&mut store, &config.head, &mut rng)?;
        GlobalThresholds::init(&mut store, types.len())?;
        Self::assemble(config, vocab, types, type_index, store)
    }

    fn assemble(config: ModelConfig, vocab: Vocab, types: Vec<EntityTypeDef>, type_index: TypeIndex, store: ParamStore) -> Result<Self> {
        let atomic_mode = config.description_mode == DescriptionMode::Atomic;
        let type_encoder = if atomic_mode {
            None
        } else {
            Some(TransformerEncoder::resolve(&store, "type", &config.encoder)?)
        };
        let text_encoder = TransformerEncoder::resolve(&store, "text", &config.encoder)?;
        let head = HeadParams::resolve(&store, &config.head)?;
        let atomic = if atomic_mode { Some(store.id("type.atomic")?) } else { None };
        let global = if store.contains("global.start") {
            Some(GlobalThresholds::resolve(&store)?)
        } else {
            None
        };
        let inputs = |n: usize| -> Result<Vec<TypeInput>> {
            types
                .iter()
                .enumerate()
                .map(|(k, d)| type_description(d, k, config.description_mode, &vocab, n))
                .collect()
        };
        let train_inputs = inputs(1)?;
        let eval_inputs = inputs(INFERENCE_PROTOTYPES)?;
        for input in train_inputs.iter().chain(&eval_inputs) {
            let too_long = |ids: &[u32]| ids.len() > config.encoder.max_positions;
            let bad = match input {
                TypeInput::Atomic(_) => false,
                TypeInput::Text(ids) => too_long(ids),
                TypeInput::Prototypes(ps) => ps.iter().any(|(ids, _)| too_long(ids)),
            };
            if bad {
                return Err(Error::Config(format!(
                    "a type description exceeds {} positions",
                    config.encoder.max_positions
                )));
            }
        }
        Ok(Self {
            config,
            vocab,
            types,
            type_index,
            store,
            type_encoder,
            text_encoder,
            head,
            atomic,
            global,
            train_inputs,
            eval_inputs,
        })
    }

    pub fn num_types(&self) -> usize {
        self.types.len()
    }

    /// Per-type summary states `(K, d_model)`.
    pub fn type_summaries(&self, g: &mut Graph, training: bool) -> Result<Var> {
        let inputs = if training { &self.train_inputs } else { &self.eval_inputs };
        let mut rows = Vec::with_capacity(inputs.len());
        for input in inputs {
            let row = match input {
                TypeInput::Atomic(k) => {
                    let table = g.param(self.atomic.ok_or(Error::Config("atomic table missing".into()))?);
                    g.slice_rows(table, *k, k + 1)?
                }
                TypeInput::Text(ids) => self.type_encoder()?.summary(g, ids)?,
                TypeInput::Prototypes(ps) => {
                    let mut states = Vec::with_capacity(ps.len());
                    for (ids, marker) in ps {
                        let h = self.type_encoder()?.forward(g, ids)?;
                        states.push(g.slice_rows(h, *marker, marker + 1)?);
                    }
                    let sum = g.add_n(&states)?;
                    g.scale(sum, 1.0 / states.len() as f64)?
                }
            };
            rows.push(row);
        }
        Ok(g.concat_rows(&rows)?)
    }

    fn type_encoder(&self) -> Result<&TransformerEncoder> {
        self.type_encoder
            .as_ref()
            .ok_or_else(|| Error::Config("type encoder absent in atomic mode".into()))
    }

    /// Eval-mode type anchors; compute once and reuse across documents.
    pub fn type_embeddings(&self) -> Result<TypeEmbeddings> {
        let mut g = Graph::with_params(&self.store);
        let h = self.type_summaries(&mut g, false)?;
        let vars = self.head.type_embeddings(&mut g, h)?;
        Ok(TypeEmbeddings::from_vars(&g, &vars))
    }

    /// Windows of `doc` as training examples. Gold spans crossing a window
    /// edge are left out of that window.
    pub fn examples(&self, doc: &LabeledDocument) -> Result<Vec<TrainExample>> {
        let mut out = Vec::new();
        for w in make_windows(doc, self.config.max_seq_len, self.config.stride)? {
            let words: Vec<&str> = doc.tokens[w.start..w.end].iter().map(|t| t.text.as_str()).collect();
            let gold = w
                .mentions
                .iter()
                .map(|m| Ok((m.start_token, m.end_token, self.type_index.id(&m.type_name)?)))
                .collect::<Result<Vec<_>>>()?;
            out.push(TrainExample {
                doc_id: doc.doc_id.clone(),
                ids: self.vocab.encode_words(&words),
                targets: SequenceTargets::new(words.len(), &gold, self.num_types(), self.config.decode.max_span_len)?,
            });
        }
        Ok(out)
    }

    /// Loss of a batch in one graph: the type encoder runs once, then every
    /// example is scored against the shared anchors.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &[&TrainExample],
        weights: &LossWeights,
        objective: Objective,
    ) -> Result<LossBreakdown> {
        let h_cls = self.type_summaries(g, true)?;
        let types = self.head.type_embeddings(g, h_cls)?;
        let mut scores = Vec::with_capacity(batch.len());
        for ex in batch {
            let h = self.text_encoder.forward(g, &ex.ids)?;
            scores.push(self.head.sequence_scores(g, h, &types, &ex.targets.spans)?);
        }
        let inputs: Vec<LossInput> = scores
            .into_iter()
            .zip(batch)
            .map(|(scores, ex)| LossInput {
                scores,
                targets: &ex.targets,
            })
            .collect();
        match objective {
            Objective::Dynamic => total_loss(g, &inputs, weights),
            Objective::LearnedGlobal => {
                let gt = self.global.as_ref().ok_or(Error::Config("global thresholds missing".into()))?;
                total_loss_global_threshold(g, &inputs, gt, weights)
            }
            Objective::Plain => plain_loss_no_threshold(g, &inputs, weights),
        }
    }

    /// Candidates and thresholds of every window of `doc`, in window
    /// coordinates.
    pub fn score_windows(
        &self,
        doc: &LabeledDocument,
        types: &TypeEmbeddings,
        decode_cfg: &DecodeConfig,
    ) -> Result<Vec<(crate::datasets::Window, Vec<ScoredMention>, Vec<crate::decoder::TypeThreshold>)>> {
        let mut out = Vec::new();
        for w in make_windows(doc, self.config.max_seq_len, self.config.stride)? {
            let words: Vec<&str> = doc.tokens[w.start..w.end].iter().map(|t| t.text.as_str()).collect();
            let encoded = encode_text(&self.text_encoder, &self.store, &self.vocab.encode_words(&words))?;
            let (cands, th) = score_all(&encoded, types, &self.head, &self.store, decode_cfg)?;
            out.push((w, cands, th));
        }
        Ok(out)
    }

    /// Decoded mentions of `doc` in document coordinates, sorted by
    /// `(start, end, type)`.
    pub fn predict_with(&self, doc: &LabeledDocument, types: &TypeEmbeddings, decode_cfg: &DecodeConfig) -> Result<Vec<ScoredMention>> {
        let per_window_cfg = DecodeConfig {
            flat: false,
            ..decode_cfg.clone()
        };
        let mut windows = Vec::new();
        let mut preds = Vec::new();
        for (w, cands, th) in self.score_windows(doc, types, decode_cfg)? {
            preds.push(decode(&cands, &th, &per_window_cfg));
            windows.push(w);
        }
        Ok(merge_window_predictions(&windows, &preds, decode_cfg.flat))
    }

    /// Uses the model's own decode settings.
    pub fn predict(&self, doc: &LabeledDocument, types: &TypeEmbeddings) -> Result<Vec<ScoredMention>> {
        self.predict_with(doc, types, &self.config.decode)
    }

    /// Recomputes the type anchors for this document alone.
    pub fn predict_uncached(&self, doc: &LabeledDocument) -> Result<Vec<ScoredMention>> {
        let types = self.type_embeddings()?;
        self.predict(doc, &types)
    }

    /// `(start, end, type)` predictions for many documents.
    pub fn predict_triples(&self, docs: &[LabeledDocument], decode_cfg: &DecodeConfig) -> Result<Vec<Vec<(usize, usize, usize)>>> {
        let types = self.type_embeddings()?;
        docs.iter()
            .map(|d| Ok(self.predict_with(d, &types, decode_cfg)?.iter().map(ScoredMention::key).collect()))
            .collect()
    }

    pub fn gold_triples(&self, docs: &[LabeledDocument]) -> Result<Vec<Vec<(usize, usize, usize)>>> {
        docs.iter().map(|d| d.gold_ids(&self.type_index)).collect()
    }

    pub fn to_prediction(&self, doc: &LabeledDocument, mentions: &[ScoredMention]) -> DocumentPrediction {
        DocumentPrediction {
            doc_id: doc.doc_id.clone(),
            mentions: mentions
                .iter()
                .map(|m| PredictedMention {
                    start_token: m.start,
                    end_token: m.end,
                    start_char: doc.tokens[m.start].start_char,
                    end_char: doc.tokens[m.end].end_char,
                    type_name: self.type_index.name(m.type_id).to_string(),
                    score: m.span_score,
                })
                .collect(),
        }
    }

    /// Writes parameters, vocabulary and a JSON sidecar into `dir`.
    pub fn save(&self, dir: &Path, extra: &serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.store.save(&dir.join(PARAMS_FILE))?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        let side = Sidecar {
            config: self.config.clone(),
            types: self.types.clone(),
            vocab_sha256: vocab_hash(&self.vocab),
            extra: extra.clone(),
        };
        std::fs::write(dir.join(SIDECAR_FILE), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    /// Loads a checkpoint directory; also returns the sidecar's extra data.
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(dir.join(SIDECAR_FILE))?)?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        if vocab_hash(&vocab) != side.vocab_sha256 {
            return Err(Error::Config("vocabulary does not match the checkpoint".into()));
        }
        let store = ParamStore::load(&dir.join(PARAMS_FILE))?;
        side.config.validate()?;
        let index = TypeIndex::new(&side.types)?;
        let model = Self::assemble(side.config, vocab, side.types, index, store)?;
        Ok((model, side.extra))
    }
}

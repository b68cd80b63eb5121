//! Word-level tokenizer and the toy transformer encoders.
//!
//! Two encoders with identical architecture are built: one over entity type
//! descriptions (parameter prefix `type.`) and one over text (`text.`). They
//! never share parameters, including positional embeddings.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use typespan_numcore::{normal_tensor, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;
/// Marker inserted before a prototype mention.
pub const ENT_START_ID: u32 = 4;
/// Marker inserted after a prototype mention.
pub const ENT_END_ID: u32 = 5;

pub const SPECIALS: [&str; 6] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[E]", "[/E]"];

/// Word vocabulary. Line `n` of a vocab file holds the token with id `n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from words; specials come first, the remaining
    /// words are ordered by descending frequency then lexicographically.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for w in words {
            *counts.entry(w.to_lowercase()).or_default() += 1;
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !SPECIALS.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens).expect("specials are in place")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().take(4).enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!("vocab line {} must be {s}", i + 1)));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocab entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = self.tokens.join("\n");
        out.push('\n');
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of a word after lowercasing; unknown words map to `[UNK]`.
    pub fn id(&self, word: &str) -> u32 {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> &str {
        self.tokens.get(id as usize).map_or("[UNK]", String::as_str)
    }

    /// `[CLS] w1 .. wn [SEP]`.
    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(words.len() + 2);
        ids.push(CLS_ID);
        ids.extend(words.iter().map(|w| self.id(w.as_ref())));
        ids.push(SEP_ID);
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.word(i)).collect()
    }
}

/// A content token with character offsets into its source text.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start_char: usize,
    pub end_char: usize,
}

/// Splits text into alphanumeric runs and single punctuation characters.
/// Offsets count Unicode scalar values; end offsets are exclusive.
pub fn split_words(text: &str) -> Vec<Token> {
    let mut out = Vec::new();
    let mut current: Option<(usize, String)> = None;
    for (pos, ch) in text.chars().enumerate() {
        if ch.is_alphanumeric() || ch == '_' {
            match &mut current {
                Some((_, s)) => s.push(ch),
                None => current = Some((pos, ch.to_string())),
            }
            continue;
        }
        if let Some((start, s)) = current.take() {
            let end = start + s.chars().count();
            out.push(Token {
                text: s,
                start_char: start,
                end_char: end,
            });
        }
        if !ch.is_whitespace() {
            out.push(Token {
                text: ch.to_string(),
                start_char: pos,
                end_char: pos + 1,
            });
        }
    }
    if let Some((start, s)) = current {
        let end = start + s.chars().count();
        out.push(Token {
            text: s,
            start_char: start,
            end_char: end,
        });
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenized {
    /// Ids including the leading `[CLS]` and trailing `[SEP]`.
    pub ids: Vec<u32>,
    /// Content tokens only.
    pub tokens: Vec<Token>,
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Tokenized {
    let tokens = split_words(text);
    let ids = vocab.encode_words(&tokens.iter().map(|t| t.text.as_str()).collect::<Vec<_>>());
    Tokenized { ids, tokens }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    /// Longest accepted id sequence, markers included.
    pub max_positions: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            num_heads: 4,
            d_model: 64,
            ffn_dim: 256,
            max_positions: 130,
            dropout: 0.1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.d_model.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.max_positions < 4 {
            return Err(Error::Config("max_positions must be at least 4".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct LayerNormParams {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Debug)]
struct Layer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNormParams,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNormParams,
}

/// Post-LN transformer encoder with learned absolute positions.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub prefix: String,
    pub config: EncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    emb_ln: LayerNormParams,
    layers: Vec<Layer>,
}

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-12;

impl TransformerEncoder {
    /// Registers freshly initialised parameters under `prefix.`.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        config: &EncoderConfig,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut normal = |store: &mut ParamStore, name: String, shape: &[usize]| {
            store.insert(name, normal_tensor(rng, shape, INIT_STD))
        };
        normal(store, format!("{prefix}.tok_emb"), &[vocab_size, d])?;
        normal(store, format!("{prefix}.pos_emb"), &[config.max_positions, d])?;
        fn ln(store: &mut ParamStore, name: &str, d: usize) -> Result<()> {
            store.insert(format!("{name}.gain"), Tensor::full(&[d], 1.0))?;
            store.insert(format!("{name}.bias"), Tensor::zeros(&[d]))?;
            Ok(())
        }
        ln(store, &format!("{prefix}.emb_ln"), d)?;
        for l in 0..config.num_layers {
            for (name, fan_in, fan_out) in [
                ("q", d, d),
                ("k", d, d),
                ("v", d, d),
                ("o", d, d),
                ("ff1", d, config.ffn_dim),
                ("ff2", config.ffn_dim, d),
            ] {
                normal(store, format!("{prefix}.l{l}.{name}.w"), &[fan_in, fan_out])?;
                store.insert(format!("{prefix}.l{l}.{name}.b"), Tensor::zeros(&[fan_out]))?;
            }
            ln(store, &format!("{prefix}.l{l}.ln1"), d)?;
            ln(store, &format!("{prefix}.l{l}.ln2"), d)?;
        }
        Self::resolve(store, prefix, config)
    }

    /// Looks up an existing parameter set, e.g. after loading a checkpoint.
    pub fn resolve(store: &ParamStore, prefix: &str, config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let lin = |name: String| -> Result<Linear> {
            Ok(Linear {
                w: store.id(&format!("{name}.w"))?,
                b: store.id(&format!("{name}.b"))?,
            })
        };
        let ln = |name: String| -> Result<LayerNormParams> {
            Ok(LayerNormParams {
                gain: store.id(&format!("{name}.gain"))?,
                bias: store.id(&format!("{name}.bias"))?,
            })
        };
        let layers = (0..config.num_layers)
            .map(|l| {
                Ok(Layer {
                    q: lin(format!("{prefix}.l{l}.q"))?,
                    k: lin(format!("{prefix}.l{l}.k"))?,
                    v: lin(format!("{prefix}.l{l}.v"))?,
                    o: lin(format!("{prefix}.l{l}.o"))?,
                    ln1: ln(format!("{prefix}.l{l}.ln1"))?,
                    ff1: lin(format!("{prefix}.l{l}.ff1"))?,
                    ff2: lin(format!("{prefix}.l{l}.ff2"))?,
                    ln2: ln(format!("{prefix}.l{l}.ln2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            prefix: prefix.to_string(),
            config: config.clone(),
            tok_emb: store.id(&format!("{prefix}.tok_emb"))?,
            pos_emb: store.id(&format!("{prefix}.pos_emb"))?,
            emb_ln: ln(format!("{prefix}.emb_ln"))?,
            layers,
        })
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.config.max_positions {
            return Err(Error::SequenceTooLong {
                len,
                limit: self.config.max_positions,
            });
        }
        Ok(())
    }

    /// Final-layer hidden states, shape `(ids.len(), d_model)`.
    pub fn forward(&self, g: &mut Graph, ids: &[u32]) -> Result<Var> {
        self.forward_inner(g, ids, None)
    }

    /// Like [`forward`](Self::forward), also returning the attention
    /// probability matrices (one per layer and head).
    pub fn forward_with_attention(&self, g: &mut Graph, ids: &[u32]) -> Result<(Var, Vec<Var>)> {
        let mut attn = Vec::new();
        let h = self.forward_inner(g, ids, Some(&mut attn))?;
        Ok((h, attn))
    }

    fn forward_inner(&self, g: &mut Graph, ids: &[u32], mut attn: Option<&mut Vec<Var>>) -> Result<Var> {
        let n = ids.len();
        self.check_len(n)?;
        if n == 0 {
            return Err(Error::Empty("id sequence"));
        }
        let p = self.config.dropout;
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tok_table = g.param(self.tok_emb);
        let tok = g.gather_rows(tok_table, &idx)?;
        let pos_table = g.param(self.pos_emb);
        let pos = g.slice_rows(pos_table, 0, n)?;
        let x = g.add(tok, pos)?;
        let x = affine_norm(g, x, self.emb_ln)?;
        let mut x = g.dropout(x, p)?;
        let heads = self.config.num_heads;
        let dh = self.config.d_model / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let q = linear(g, x, layer.q)?;
            let k = linear(g, x, layer.k)?;
            let v = linear(g, x, layer.v)?;
            let mut ctx = Vec::with_capacity(heads);
            for h in 0..heads {
                let (a, b) = (h * dh, (h + 1) * dh);
                let qh = g.slice_cols(q, a, b)?;
                let kh = g.slice_cols(k, a, b)?;
                let vh = g.slice_cols(v, a, b)?;
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, scale)?;
                let probs = g.softmax_rows(scores)?;
                if let Some(list) = attn.as_deref_mut() {
                    list.push(probs);
                }
                let probs = g.dropout(probs, p)?;
                ctx.push(g.matmul(probs, vh)?);
            }
            let ctx = g.concat_cols(&ctx)?;
            let attn_out = linear(g, ctx, layer.o)?;
            let attn_out = g.dropout(attn_out, p)?;
            let res = g.add(x, attn_out)?;
            x = affine_norm(g, res, layer.ln1)?;
            let ff = linear(g, x, layer.ff1)?;
            let ff = g.gelu(ff)?;
            let ff = linear(g, ff, layer.ff2)?;
            let ff = g.dropout(ff, p)?;
            let res = g.add(x, ff)?;
            x = affine_norm(g, res, layer.ln2)?;
        }
        Ok(x)
    }

    /// Hidden state of the leading `[CLS]` marker.
    pub fn summary(&self, g: &mut Graph, ids: &[u32]) -> Result<Var> {
        let h = self.forward(g, ids)?;
        Ok(g.slice_rows(h, 0, 1)?)
    }

    /// Every parameter owned by this encoder.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut out = vec![self.tok_emb, self.pos_emb, self.emb_ln.gain, self.emb_ln.bias];
        for l in &self.layers {
            for lin in [l.q, l.k, l.v, l.o, l.ff1, l.ff2] {
                out.extend([lin.w, lin.b]);
            }
            for ln in [l.ln1, l.ln2] {
                out.extend([ln.gain, ln.bias]);
            }
        }
        out
    }
}

fn linear(g: &mut Graph, x: Var, l: Linear) -> Result<Var> {
    let w = g.param(l.w);
    let b = g.param(l.b);
    Ok(g.linear(x, w, b)?)
}

fn affine_norm(g: &mut Graph, x: Var, ln: LayerNormParams) -> Result<Var> {
    let rows = g.value(x).dims2().0;
    let y = g.layer_norm(x, LN_EPS)?;
    let gain = g.param(ln.gain);
    let gain = g.tile_rows(gain, rows)?;
    let bias = g.param(ln.bias);
    let bias = g.tile_rows(bias, rows)?;
    let y = g.mul(y, gain)?;
    Ok(g.add(y, bias)?)
}

/// Token ids plus the encoder output for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub token_ids: Vec<u32>,
    /// `(len, d_model)`; row 0 is the `[CLS]` state.
    pub hidden: Tensor,
}

/// Eval-mode text encoding.
pub fn encode_text(encoder: &TransformerEncoder, store: &ParamStore, ids: &[u32]) -> Result<EncodedSequence> {
    let mut g = Graph::with_params(store);
    let h = encoder.forward(&mut g, ids)?;
    Ok(EncodedSequence {
        token_ids: ids.to_vec(),
        hidden: g.value(h).clone(),
    })
}

/// Eval-mode `[CLS]` state of a type description.
pub fn encode_type_description(encoder: &TransformerEncoder, store: &ParamStore, ids: &[u32]) -> Result<Tensor> {
    let mut g = Graph::with_params(store);
    let h = encoder.summary(&mut g, ids)?;
    let d = encoder.config.d_model;
    Ok(g.value(h).clone().reshape(vec![d])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocab {
        Vocab::build("jim bought shares of acme person".split(' '))
    }

    #[test]
    fn specials_and_round_trip() {
        let v = vocab();
        assert_eq!(&v.tokens()[..4], &["[PAD]", "[UNK]", "[CLS]", "[SEP]"]);
        for w in ["jim", "bought", "shares", "acme"] {
            assert_eq!(v.word(v.id(w)), w);
        }
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab();
        let t = tokenize("Jim bought shares", &v);
        assert_eq!(t.tokens.len(), 3);
        assert_eq!(v.decode(&t.ids), vec!["[CLS]", "jim", "bought", "shares", "[SEP]"]);
        assert_eq!(tokenize("", &v).ids, vec![CLS_ID, SEP_ID]);
        assert_eq!(tokenize("xqzzy", &v).ids, vec![CLS_ID, UNK_ID, SEP_ID]);
    }

    #[test]
    fn offsets_cover_non_space_characters() {
        let text = "Acme, Inc. hired  Jim-Bob (again)!";
        let toks = split_words(text);
        let chars: Vec<char> = text.chars().collect();
        let mut covered = vec![false; chars.len()];
        let mut prev_end = 0;
        for t in &toks {
            assert!(t.start_char >= prev_end && t.start_char < t.end_char);
            prev_end = t.end_char;
            for c in &mut covered[t.start_char..t.end_char] {
                *c = true;
            }
            let s: String = chars[t.start_char..t.end_char].iter().collect();
            assert_eq!(s, t.text);
        }
        for (c, cov) in chars.iter().zip(covered) {
            assert_eq!(!c.is_whitespace(), cov);
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        let v = vocab();
        v.save(&p).unwrap();
        assert_eq!(Vocab::load(&p).unwrap(), v);
        std::fs::write(&p, "[UNK]\n[PAD]\n[CLS]\n[SEP]\n").unwrap();
        assert!(Vocab::load(&p).is_err());
    }

    #[test]
    fn config_validation() {
        let c = EncoderConfig {
            num_heads: 3,
            ..EncoderConfig::default()
        };
        assert!(c.validate().is_err());
        let c = EncoderConfig {
            max_positions: 3,
            ..EncoderConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn length_limit_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig {
            d_model: 8,
            num_heads: 2,
            ffn_dim: 16,
            max_positions: 6,
            ..Default::default()
        };
        let enc = TransformerEncoder::init(&mut store, "text", &cfg, 10, &mut rng).unwrap();
        let err = encode_text(&enc, &store, &[2, 5, 5, 5, 5, 5, 3]).unwrap_err();
        assert!(matches!(err, Error::SequenceTooLong { len: 7, limit: 6 }));
        assert!(err.to_string().contains('6'));
    }
}

//! Documents, corpus formats, windowing, synthetic data and label noise.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{remove_overlap, ScoredMention};
use crate::encoder::{split_words, Token, Vocab, CLS_ID, ENT_END_ID, ENT_START_ID, SEP_ID};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Mention {
    pub start_token: usize,
    /// Inclusive.
    pub end_token: usize,
    #[serde(rename = "type")]
    pub type_name: String,
}

impl Mention {
    pub fn new(start_token: usize, end_token: usize, type_name: impl Into<String>) -> Self {
        Self {
            start_token,
            end_token,
            type_name: type_name.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledDocument {
    pub doc_id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    pub mentions: Vec<Mention>,
}

impl LabeledDocument {
    /// Tokenizes `text` with [`split_words`].
    pub fn from_text(doc_id: impl Into<String>, text: impl Into<String>, mentions: Vec<Mention>) -> Result<Self> {
        let text = text.into();
        let doc = Self {
            doc_id: doc_id.into(),
            tokens: split_words(&text),
            text,
            mentions,
        };
        doc.validate()?;
        Ok(doc)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::InvalidDocument {
            doc_id: self.doc_id.clone(),
            message,
        };
        let n_chars = self.text.chars().count();
        let mut prev_end = 0;
        for (i, t) in self.tokens.iter().enumerate() {
            if t.start_char < prev_end || t.start_char >= t.end_char || t.end_char > n_chars {
                return Err(bad(format!("token {i} has bad offsets {}..{}", t.start_char, t.end_char)));
            }
            prev_end = t.end_char;
        }
        let mut seen = BTreeSet::new();
        for m in &self.mentions {
            if m.end_token < m.start_token {
                return Err(bad(format!("mention end {} before start {}", m.end_token, m.start_token)));
            }
            if m.end_token >= self.tokens.len() {
                return Err(bad(format!(
                    "mention ({}, {}) outside {} tokens",
                    m.start_token,
                    m.end_token,
                    self.tokens.len()
                )));
            }
            if !seen.insert(m) {
                return Err(bad(format!("duplicate mention ({}, {}, {})", m.start_token, m.end_token, m.type_name)));
            }
        }
        Ok(())
    }

    pub fn token_texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Gold `(start, end, type_id)` triples.
    pub fn gold_ids(&self, types: &TypeIndex) -> Result<Vec<(usize, usize, usize)>> {
        self.mentions
            .iter()
            .map(|m| Ok((m.start_token, m.end_token, types.id(&m.type_name)?)))
            .collect()
    }

    /// Whether some mention strictly contains another.
    pub fn has_nested_pair(&self) -> bool {
        self.mentions.iter().any(|a| {
            self.mentions.iter().any(|b| {
                a != b && a.start_token <= b.start_token && b.end_token <= a.end_token
            })
        })
    }
}

/// A marked exemplar of a type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prototype {
    pub text: String,
    pub start_token: usize,
    pub end_token: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityTypeDef {
    pub name: String,
    #[serde(default)]
    pub keyword: String,
    #[serde(default)]
    pub guideline: String,
    #[serde(default)]
    pub prototypes: Vec<Prototype>,
}

impl EntityTypeDef {
    pub fn named(name: impl Into<String>) -> Self {
        let name = name.into();
        Self {
            keyword: name.to_lowercase(),
            name,
            guideline: String::new(),
            prototypes: Vec::new(),
        }
    }

    /// Every word of every description, for vocabulary building.
    pub fn words(&self) -> Vec<String> {
        let mut out: Vec<String> = split_words(&self.keyword).into_iter().map(|t| t.text).collect();
        out.extend(split_words(&self.guideline).into_iter().map(|t| t.text));
        for p in &self.prototypes {
            out.extend(split_words(&p.text).into_iter().map(|t| t.text));
        }
        out
    }
}

/// Type name to id, in type-definition order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TypeIndex {
    names: Vec<String>,
    ids: HashMap<String, usize>,
}

impl TypeIndex {
    pub fn new(types: &[EntityTypeDef]) -> Result<Self> {
        let names: Vec<String> = types.iter().map(|t| t.name.clone()).collect();
        let mut ids = HashMap::new();
        for (i, n) in names.iter().enumerate() {
            if ids.insert(n.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate entity type `{n}`")));
            }
        }
        Ok(Self { names, ids })
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown entity type `{name}`")))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusFormat {
    JsonSpans,
    BioConll,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json_spans" => Ok(Self::JsonSpans),
            "bio_conll" | "bio" => Ok(Self::BioConll),
            other => Err(Error::Config(format!("unknown corpus format `{other}`"))),
        }
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Vec<LabeledDocument>> {
    let text = std::fs::read_to_string(path)?;
    match format {
        CorpusFormat::JsonSpans => parse_json_spans(&text),
        CorpusFormat::BioConll => parse_bio(&text),
    }
}

/// One document per line; blank lines are skipped.
pub fn parse_json_spans(text: &str) -> Result<Vec<LabeledDocument>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: LabeledDocument = serde_json::from_str(line).map_err(|e| Error::Format {
            line: n + 1,
            message: e.to_string(),
        })?;
        doc.validate().map_err(|e| Error::Format {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(doc);
    }
    Ok(out)
}

/// Two whitespace-separated columns (token, tag); blank lines end a
/// sentence, and each sentence becomes one document `sent-<n>`.
pub fn parse_bio(text: &str) -> Result<Vec<LabeledDocument>> {
    let mut docs = Vec::new();
    let mut words: Vec<String> = Vec::new();
    let mut mentions = Vec::new();
    let mut open: Option<(usize, String)> = None;
    let flush = |words: &mut Vec<String>, mentions: &mut Vec<Mention>, open: &mut Option<(usize, String)>, docs: &mut Vec<LabeledDocument>| {
        if let Some((s, t)) = open.take() {
            mentions.push(Mention::new(s, words.len() - 1, t));
        }
        if words.is_empty() {
            return;
        }
        let mut text = String::new();
        let mut tokens = Vec::with_capacity(words.len());
        let mut pos = 0;
        for (i, w) in words.iter().enumerate() {
            if i > 0 {
                text.push(' ');
                pos += 1;
            }
            let len = w.chars().count();
            tokens.push(Token {
                text: w.clone(),
                start_char: pos,
                end_char: pos + len,
            });
            text.push_str(w);
            pos += len;
        }
        docs.push(LabeledDocument {
            doc_id: format!("sent-{}", docs.len()),
            text,
            tokens,
            mentions: std::mem::take(mentions),
        });
        words.clear();
    };
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            flush(&mut words, &mut mentions, &mut open, &mut docs);
            continue;
        }
        if cols.len() != 2 {
            return Err(Error::Format {
                line: line_no,
                message: format!("expected 2 columns, found {}", cols.len()),
            });
        }
        let (word, tag) = (cols[0], cols[1]);
        let idx = words.len();
        if tag == "O" {
            if let Some((s, t)) = open.take() {
                mentions.push(Mention::new(s, idx - 1, t));
            }
        } else if let Some(ty) = tag.strip_prefix("B-") {
            if let Some((s, t)) = open.take() {
                mentions.push(Mention::new(s, idx - 1, t));
            }
            open = Some((idx, ty.to_string()));
        } else if let Some(ty) = tag.strip_prefix("I-") {
            match &open {
                Some((_, t)) if t == ty => {}
                Some((_, t)) => {
                    return Err(Error::Format {
                        line: line_no,
                        message: format!("I-{ty} inside an open {t} mention; BIO cannot encode overlapping spans"),
                    })
                }
                None => {
                    return Err(Error::Format {
                        line: line_no,
                        message: format!("I-{ty} without a preceding B-{ty}"),
                    })
                }
            }
        } else {
            return Err(Error::Format {
                line: line_no,
                message: format!("bad tag `{tag}`"),
            });
        }
        words.push(word.to_string());
    }
    flush(&mut words, &mut mentions, &mut open, &mut docs);
    Ok(docs)
}

pub fn write_json_spans(w: &mut impl Write, docs: &[LabeledDocument]) -> Result<()> {
    for d in docs {
        serde_json::to_writer(&mut *w, d)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_corpus(path: &Path, docs: &[LabeledDocument]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_json_spans(&mut f, docs)?;
    f.flush()?;
    Ok(())
}

pub fn load_type_defs(path: &Path) -> Result<Vec<EntityTypeDef>> {
    let defs: Vec<EntityTypeDef> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    TypeIndex::new(&defs)?;
    Ok(defs)
}

pub fn save_type_defs(path: &Path, defs: &[EntityTypeDef]) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(defs)?)?;
    Ok(())
}

/// Keyword-only definitions for every type name used in `docs`, sorted.
pub fn type_defs_from_labels(docs: &[LabeledDocument]) -> Vec<EntityTypeDef> {
    let names: BTreeSet<&str> = docs.iter().flat_map(|d| d.mentions.iter().map(|m| m.type_name.as_str())).collect();
    names.into_iter().map(EntityTypeDef::named).collect()
}

/// A contiguous slice `[start, end)` of a document's content tokens.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Window {
    pub doc_id: String,
    pub start: usize,
    pub end: usize,
    /// Mentions fully inside the window, in window coordinates.
    pub mentions: Vec<Mention>,
    /// Mentions crossing a window edge.
    pub dropped: usize,
}

/// Windows of at most `max_len` tokens; consecutive windows share
/// `stride` tokens. An empty document yields one empty window.
pub fn make_windows(doc: &LabeledDocument, max_len: usize, stride: usize) -> Result<Vec<Window>> {
    if max_len == 0 || stride >= max_len {
        return Err(Error::Config(format!("need max_len > stride, got {max_len} and {stride}")));
    }
    let n = doc.tokens.len();
    let step = max_len - stride;
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + max_len).min(n);
        let mut mentions = Vec::new();
        let mut dropped = 0;
        for m in &doc.mentions {
            let inside = m.start_token >= start && m.end_token < end;
            let touches = m.start_token < end && m.end_token >= start;
            if inside {
                mentions.push(Mention::new(m.start_token - start, m.end_token - start, m.type_name.clone()));
            } else if touches {
                dropped += 1;
            }
        }
        out.push(Window {
            doc_id: doc.doc_id.clone(),
            start,
            end,
            mentions,
            dropped,
        });
        if end >= n {
            break;
        }
        start += step;
    }
    Ok(out)
}

/// Shifts window predictions into document coordinates and keeps the best
/// score per `(start, end, type)`.
pub fn merge_window_predictions(windows: &[Window], predictions: &[Vec<ScoredMention>], flat: bool) -> Vec<ScoredMention> {
    let mut best: BTreeMap<(usize, usize, usize), ScoredMention> = BTreeMap::new();
    for (w, preds) in windows.iter().zip(predictions) {
        for p in preds {
            let m = ScoredMention {
                start: p.start + w.start,
                end: p.end + w.start,
                ..*p
            };
            best.entry(m.key())
                .and_modify(|b| {
                    if m.span_score > b.span_score {
                        *b = m;
                    }
                })
                .or_insert(m);
        }
    }
    let merged: Vec<_> = best.into_values().collect();
    if flat {
        let mut out = remove_overlap(&merged);
        out.sort_by_key(ScoredMention::key);
        out
    } else {
        merged
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionMode {
    /// A learnable embedding row per type; the type encoder is unused.
    Atomic,
    Keyword,
    Guideline,
    Prototypes,
}

impl std::str::FromStr for DescriptionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "atomic" => Ok(Self::Atomic),
            "keyword" => Ok(Self::Keyword),
            "guideline" => Ok(Self::Guideline),
            "prototypes" => Ok(Self::Prototypes),
            other => Err(Error::Config(format!("unknown description mode `{other}`"))),
        }
    }
}

/// Encoder input for one type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TypeInput {
    Atomic(usize),
    /// Summary taken from the `[CLS]` state.
    Text(Vec<u32>),
    /// Marked exemplars; the summary is the start-marker state, averaged
    /// over exemplars. Pairs are `(ids, marker row)`.
    Prototypes(Vec<(Vec<u32>, usize)>),
}

/// Prototypes averaged at inference.
pub const INFERENCE_PROTOTYPES: usize = 3;

/// Builds the encoder input for a type. `max_prototypes` caps how many
/// exemplars are used.
pub fn type_description(
    def: &EntityTypeDef,
    type_id: usize,
    mode: DescriptionMode,
    vocab: &Vocab,
    max_prototypes: usize,
) -> Result<TypeInput> {
    let missing = |what: &str| Error::Config(format!("type `{}` has no {what}", def.name));
    let words = |s: &str| -> Vec<String> { split_words(s).into_iter().map(|t| t.text).collect() };
    match mode {
        DescriptionMode::Atomic => Ok(TypeInput::Atomic(type_id)),
        DescriptionMode::Keyword if def.keyword.trim().is_empty() => Err(missing("keyword")),
        DescriptionMode::Keyword => Ok(TypeInput::Text(vocab.encode_words(&words(&def.keyword)))),
        DescriptionMode::Guideline if def.guideline.trim().is_empty() => Err(missing("guideline")),
        DescriptionMode::Guideline => Ok(TypeInput::Text(vocab.encode_words(&words(&def.guideline)))),
        DescriptionMode::Prototypes => {
            if def.prototypes.is_empty() {
                return Err(missing("prototypes"));
            }
            let mut out = Vec::new();
            for p in def.prototypes.iter().take(max_prototypes.max(1)) {
                let toks = words(&p.text);
                if p.start_token > p.end_token || p.end_token >= toks.len() {
                    return Err(Error::Config(format!("type `{}`: prototype span outside its text", def.name)));
                }
                let (ids, marker) = mark_prototype(&toks, p.start_token, p.end_token, vocab);
                out.push((ids, marker));
            }
            Ok(TypeInput::Prototypes(out))
        }
    }
}

/// `[CLS] .. [E] mention [/E] .. [SEP]` and the hidden row of `[E]`.
pub fn mark_prototype<S: AsRef<str>>(words: &[S], start: usize, end: usize, vocab: &Vocab) -> (Vec<u32>, usize) {
    let mut ids = vec![CLS_ID];
    for (i, w) in words.iter().enumerate() {
        if i == start {
            ids.push(ENT_START_ID);
        }
        ids.push(vocab.id(w.as_ref()));
        if i == end {
            ids.push(ENT_END_ID);
        }
    }
    ids.push(SEP_ID);
    (ids, start + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    /// Fraction of gold mentions kept, per type; `default_keep` otherwise.
    #[serde(default)]
    pub keep_recall: BTreeMap<String, f64>,
    pub default_keep: f64,
    pub precision_noise: f64,
    pub seed: u64,
}

impl DegradeConfig {
    pub fn uniform(keep: f64, precision_noise: f64, seed: u64) -> Self {
        Self {
            keep_recall: BTreeMap::new(),
            default_keep: keep,
            precision_noise,
            seed,
        }
    }

    fn keep_for(&self, ty: &str) -> f64 {
        self.keep_recall.get(ty).copied().unwrap_or(self.default_keep)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub doc_id: String,
    pub mention: Mention,
}

/// Audit trail of a degradation run.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegradeManifest {
    pub dropped: Vec<ManifestEntry>,
    pub injected: Vec<ManifestEntry>,
    /// `(original, retained)` per type.
    pub per_type: BTreeMap<String, (usize, usize)>,
}

/// Drops all but `floor(n · keep + 0.5)` mentions of each type (chosen by
/// seeded sampling) and optionally injects spurious single/short mentions.
pub fn degrade_distant(docs: &[LabeledDocument], config: &DegradeConfig) -> Result<(Vec<LabeledDocument>, DegradeManifest)> {
    let check = |v: f64, what: &str| {
        if (0.0..=1.0).contains(&v) {
            Ok(())
        } else {
            Err(Error::Config(format!("{what} {v} not in [0, 1]")))
        }
    };
    check(config.default_keep, "keep_recall")?;
    for v in config.keep_recall.values() {
        check(*v, "keep_recall")?;
    }
    check(config.precision_noise, "precision_noise")?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut by_type: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for (d, doc) in docs.iter().enumerate() {
        for (m, men) in doc.mentions.iter().enumerate() {
            by_type.entry(&men.type_name).or_default().push((d, m));
        }
    }
    let mut keep: BTreeSet<(usize, usize)> = BTreeSet::new();
    let mut manifest = DegradeManifest::default();
    for (ty, items) in &by_type {
        let n = items.len();
        let r = ((n as f64) * config.keep_for(ty) + 0.5).floor() as usize;
        let r = r.min(n);
        let chosen = rand::seq::index::sample(&mut rng, n, r);
        keep.extend(chosen.iter().map(|i| items[i]));
        manifest.per_type.insert(ty.to_string(), (n, r));
    }

    let mut out: Vec<LabeledDocument> = Vec::with_capacity(docs.len());
    for (d, doc) in docs.iter().enumerate() {
        let mut kept = Vec::new();
        for (m, men) in doc.mentions.iter().enumerate() {
            if keep.contains(&(d, m)) {
                kept.push(men.clone());
            } else {
                manifest.dropped.push(ManifestEntry {
                    doc_id: doc.doc_id.clone(),
                    mention: men.clone(),
                });
            }
        }
        out.push(LabeledDocument {
            mentions: kept,
            ..doc.clone()
        });
    }

    let retained: usize = keep.len();
    let n_inject = ((retained as f64) * config.precision_noise + 0.5).floor() as usize;
    let type_names: Vec<&str> = by_type.keys().copied().collect();
    let candidates: Vec<usize> = (0..out.len()).filter(|&d| !out[d].tokens.is_empty()).collect();
    if n_inject > 0 && !type_names.is_empty() && !candidates.is_empty() {
        let mut attempts = 0;
        while manifest.injected.len() < n_inject && attempts < 100 * n_inject {
            attempts += 1;
            let d = *candidates.choose(&mut rng).expect("nonempty");
            let n = out[d].tokens.len();
            let s = rng.random_range(0..n);
            let e = (s + rng.random_range(0..3)).min(n - 1);
            let ty = *type_names.choose(&mut rng).expect("nonempty");
            let m = Mention::new(s, e, ty);
            if out[d].mentions.contains(&m) {
                continue;
            }
            out[d].mentions.push(m.clone());
            manifest.injected.push(ManifestEntry {
                doc_id: out[d].doc_id.clone(),
                mention: m,
            });
        }
    }
    Ok((out, manifest))
}

/// Lexicons and templates of the synthetic corpus.
pub mod synth {
    use super::*;

    pub const FIRST: [&str; 24] = [
        "Alice", "Bruno", "Carla", "Dmitri", "Elena", "Farid", "Greta", "Hiro", "Ines", "Jonas", "Keiko", "Luis",
        "Maya", "Nils", "Olga", "Pedro", "Quinn", "Rosa", "Sven", "Tara", "Umar", "Vera", "Wes", "Yara",
    ];
    pub const LAST: [&str; 24] = [
        "Abbott", "Berg", "Castillo", "Dorsey", "Eklund", "Fischer", "Garza", "Holm", "Ivanova", "Jensen", "Kato",
        "Lindqvist", "Moreau", "Novak", "Okafor", "Petrov", "Quist", "Rossi", "Sato", "Tanaka", "Ulrich", "Varga",
        "Weber", "Zhou",
    ];
    pub const CITY: [&str; 24] = [
        "Ashford", "Brightwater", "Coldharbor", "Dunmore", "Eastvale", "Fairport", "Glenrock", "Harwich", "Ironbridge",
        "Kingsbay", "Lakemont", "Millbrook", "Northgate", "Oakhurst", "Pinecrest", "Queensford", "Riverton",
        "Stonehaven", "Thornbury", "Upton", "Westfield", "Yarrow", "Zenith", "Marlow",
    ];
    pub const ORG_WORD: [&str; 16] = [
        "Apex", "Beacon", "Cobalt", "Delta", "Ember", "Falcon", "Granite", "Horizon", "Summit", "Vertex", "Nimbus",
        "Orbit", "Pioneer", "Quartz", "Sterling", "Titan",
    ];
    pub const ORG_SUFFIX: [&str; 8] = ["Corp", "Industries", "Holdings", "Group", "Labs", "Partners", "Systems", "Media"];
    pub const INSTITUTION: [&str; 5] = ["University", "Bank", "Museum", "Hospital", "Council"];
    pub const FOUNDATION: [&str; 3] = ["Foundation", "Institute", "Trust"];

    const TEMPLATES: [&str; 12] = [
        "{P} works for {O} in {L} .",
        "{P} visited {L} last week .",
        "{O} announced that {P} will lead the new team .",
        "the {O} office in {L} opened on monday .",
        "{P} met {P} at the {O} meeting .",
        "shares of {O} rose after {P} spoke in {L} .",
        "according to {P} , {O} plans to expand into {L} .",
        "{P} moved from {L} to {L} in the spring .",
        "a spokesperson for {O} declined to comment .",
        "residents of {L} welcomed {P} on friday .",
        "{O} and {O} signed an agreement in {L} .",
        "the report by {P} praised {O} .",
    ];
    const FILLER: [&str; 6] = [
        "the weather was mild and markets were calm .",
        "officials said the plan would take several years .",
        "no further details were released .",
        "the event drew a large crowd .",
        "critics raised concerns about the budget .",
        "talks will continue next month .",
    ];

    pub fn type_defs() -> Vec<EntityTypeDef> {
        let proto = |text: &str, s: usize, e: usize| Prototype {
            text: text.into(),
            start_token: s,
            end_token: e,
        };
        vec![
            EntityTypeDef {
                name: "PER".into(),
                keyword: "person".into(),
                guideline: "a person is a named individual human being , referred to by a first name and usually a family name"
                    .into(),
                prototypes: vec![
                    proto("Alice Berg visited Marlow last week .", 0, 1),
                    proto("the report by Hiro Sato praised Apex Corp .", 3, 4),
                    proto("Vera Novak met Luis Weber at the meeting .", 3, 4),
                ],
            },
            EntityTypeDef {
                name: "ORG".into(),
                keyword: "organization".into(),
                guideline: "an organization is a named company , institution , foundation or other group of people with a shared purpose"
                    .into(),
                prototypes: vec![
                    proto("shares of Falcon Systems rose sharply .", 2, 3),
                    proto("the Bank of Riverton opened an office .", 1, 3),
                    proto("Greta Holm works for the Rosa Kato Foundation .", 5, 7),
                ],
            },
            EntityTypeDef {
                name: "LOC".into(),
                keyword: "location".into(),
                guideline: "a location is a named geographical place such as a city , town or region".into(),
                prototypes: vec![
                    proto("residents of Glenrock welcomed the plan .", 2, 2),
                    proto("Sven Tanaka moved from Upton to Harwich .", 4, 4),
                    proto("the office in Northgate opened on monday .", 3, 3),
                ],
            },
        ]
    }

    /// Appends a generated entity of `kind` to `out`, recording mentions
    /// (including nested ones) in token coordinates.
    fn entity(kind: char, rng: &mut ChaCha8Rng, out: &mut Vec<String>, mentions: &mut Vec<Mention>) {
        let start = out.len();
        let push = |out: &mut Vec<String>, w: &str| out.push(w.to_string());
        match kind {
            'P' => {
                push(out, FIRST.choose(rng).unwrap());
                if rng.random_bool(0.8) {
                    push(out, LAST.choose(rng).unwrap());
                }
                mentions.push(Mention::new(start, out.len() - 1, "PER"));
            }
            'L' => {
                push(out, CITY.choose(rng).unwrap());
                mentions.push(Mention::new(start, start, "LOC"));
            }
            _ => {
                match rng.random_range(0..10) {
                    // "<Institution> of <City>" nests a location.
                    0..=2 => {
                        push(out, INSTITUTION.choose(rng).unwrap());
                        push(out, "of");
                        let city = out.len();
                        push(out, CITY.choose(rng).unwrap());
                        mentions.push(Mention::new(city, city, "LOC"));
                    }
                    // "<First> <Last> <Foundation>" nests a person.
                    3..=5 => {
                        push(out, FIRST.choose(rng).unwrap());
                        push(out, LAST.choose(rng).unwrap());
                        mentions.push(Mention::new(start, start + 1, "PER"));
                        push(out, FOUNDATION.choose(rng).unwrap());
                    }
                    _ => {
                        push(out, ORG_WORD.choose(rng).unwrap());
                        push(out, ORG_SUFFIX.choose(rng).unwrap());
                    }
                }
                mentions.push(Mention::new(start, out.len() - 1, "ORG"));
            }
        }
    }

    /// Deterministic corpus of `n_docs` documents of 1-3 sentences.
    pub fn generate(seed: u64, n_docs: usize) -> Vec<LabeledDocument> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut docs = Vec::with_capacity(n_docs);
        for d in 0..n_docs {
            let n_sent = rng.random_range(1..=3);
            let mut words: Vec<String> = Vec::new();
            let mut mentions = Vec::new();
            for _ in 0..n_sent {
                let filler = rng.random_bool(0.15);
                let template = if filler {
                    FILLER.choose(&mut rng).unwrap()
                } else {
                    TEMPLATES.choose(&mut rng).unwrap()
                };
                for piece in template.split(' ') {
                    match piece {
                        "{P}" => entity('P', &mut rng, &mut words, &mut mentions),
                        "{O}" => entity('O', &mut rng, &mut words, &mut mentions),
                        "{L}" => entity('L', &mut rng, &mut words, &mut mentions),
                        w => words.push(w.to_string()),
                    }
                }
            }
            let text = words.join(" ");
            mentions.sort();
            mentions.dedup();
            let doc = LabeledDocument::from_text(format!("synth-{d:05}"), text, mentions)
                .expect("generated documents are consistent");
            debug_assert_eq!(doc.tokens.len(), words.len());
            docs.push(doc);
        }
        docs
    }

    /// Checks that every gold mention's text is a lexicon entry of its type
    /// (or a valid composite) and that token offsets match the words.
    pub fn audit(doc: &LabeledDocument) -> std::result::Result<(), String> {
        let words = doc.token_texts();
        for m in &doc.mentions {
            let span = &words[m.start_token..=m.end_token];
            let ok = match m.type_name.as_str() {
                "PER" => {
                    FIRST.contains(&span[0]) && (span.len() == 1 || (span.len() == 2 && LAST.contains(&span[1])))
                }
                "LOC" => span.len() == 1 && CITY.contains(&span[0]),
                "ORG" => match span.len() {
                    2 => ORG_WORD.contains(&span[0]) && ORG_SUFFIX.contains(&span[1]),
                    3 if span[1] == "of" => INSTITUTION.contains(&span[0]) && CITY.contains(&span[2]),
                    3 => FIRST.contains(&span[0]) && LAST.contains(&span[1]) && FOUNDATION.contains(&span[2]),
                    _ => false,
                },
                _ => false,
            };
            if !ok {
                return Err(format!("{}: mention {:?} = {:?}", doc.doc_id, m, span));
            }
        }
        Ok(())
    }
}

/// Shuffles in place with a seeded generator.
pub fn seeded_shuffle<T>(items: &mut [T], seed: u64) {
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
}

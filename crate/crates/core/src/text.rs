//! Caption splitting into sentence, phrase, and word granularities,
//! plus pluggable token embedding.
//!
//! The chunker is rule-based over a plain part-of-speech lexicon:
//! deterministic and adequate for the controlled synthetic vocabulary.
//! The lexicon file format (`word<TAB>tag` per line) admits externally
//! produced tagger output, and the embedding table format admits
//! exported pretrained vectors.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag {
    Noun,
    Adjective,
    Quantifier,
    Determiner,
    Verb,
    Other,
}

impl Tag {
    fn parse(s: &str) -> Option<Tag> {
        match s {
            "noun" => Some(Tag::Noun),
            "adjective" => Some(Tag::Adjective),
            "quantifier" => Some(Tag::Quantifier),
            "determiner" => Some(Tag::Determiner),
            "verb" => Some(Tag::Verb),
            "other" => Some(Tag::Other),
            _ => None,
        }
    }
}

/// Case-insensitive word -> part-of-speech map; unknown words are
/// [`Tag::Other`].
#[derive(Clone, Debug)]
pub struct Lexicon {
    map: HashMap<String, Tag>,
}

impl Lexicon {
    pub fn from_str_source(src: &str) -> Result<Lexicon> {
        let mut map = HashMap::new();
        for (lineno, line) in src.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (word, tag) = match (parts.next(), parts.next()) {
                (Some(w), Some(t)) if !w.is_empty() => (w, t),
                _ => {
                    return Err(Error::Parse {
                        what: "lexicon",
                        line: lineno + 1,
                        details: format!("expected 'word<TAB>tag', got {line:?}"),
                    })
                }
            };
            let tag = Tag::parse(tag.trim()).ok_or_else(|| Error::Parse {
                what: "lexicon",
                line: lineno + 1,
                details: format!("unknown tag {tag:?}"),
            })?;
            map.insert(word.to_lowercase(), tag);
        }
        Ok(Lexicon { map })
    }

    pub fn from_file(path: &Path) -> Result<Lexicon> {
        Lexicon::from_str_source(&std::fs::read_to_string(path)?)
    }

    /// The lexicon shipped with the crate, covering the synthetic
    /// caption vocabulary.
    pub fn builtin() -> Lexicon {
        Lexicon::from_str_source(include_str!("../assets/lexicon.tsv"))
            .expect("builtin lexicon parses")
    }

    pub fn tag(&self, word: &str) -> Tag {
        self.map
            .get(&word.to_lowercase())
            .copied()
            .unwrap_or(Tag::Other)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Strips leading/trailing punctuation and lowercases.
fn norm_token(tok: &str) -> String {
    tok.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase()
}

fn norm_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(norm_token)
        .filter(|t| !t.is_empty())
        .collect()
}

/// Splits on '.', '!', '?' followed by whitespace or end of text;
/// terminators are stripped and empty fragments dropped.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    for i in 0..chars.len() {
        let c = chars[i];
        let at_end = i + 1 == chars.len();
        let next_ws = !at_end && chars[i + 1].is_whitespace();
        if matches!(c, '.' | '!' | '?') && (at_end || next_ws) {
            push_sentence(&chars[start..=i], &mut sentences);
            start = i + 1;
        }
    }
    if start < chars.len() {
        push_sentence(&chars[start..], &mut sentences);
    }
    sentences
}

fn push_sentence(chars: &[char], out: &mut Vec<String>) {
    let s: String = chars.iter().collect();
    let trimmed = s
        .trim()
        .trim_end_matches(|c| matches!(c, '.' | '!' | '?'))
        .trim();
    if !trimmed.is_empty() {
        out.push(trimmed.to_string());
    }
}

/// Maximal runs of `(determiner)? (adjective|quantifier)* noun+` become
/// phrases; single bare nouns with no modifier are left to the word
/// granularity.
pub fn chunk_phrases(sentence: &str, lex: &Lexicon) -> Vec<String> {
    let tokens = norm_tokens(sentence);
    let mut phrases = Vec::new();
    let mut i = 0usize;
    while i < tokens.len() {
        let mut j = i;
        if j < tokens.len() && lex.tag(&tokens[j]) == Tag::Determiner {
            j += 1;
        }
        while j < tokens.len()
            && matches!(lex.tag(&tokens[j]), Tag::Adjective | Tag::Quantifier)
        {
            j += 1;
        }
        let mut nouns = 0usize;
        while j < tokens.len() && lex.tag(&tokens[j]) == Tag::Noun {
            j += 1;
            nouns += 1;
        }
        if nouns > 0 && j - i >= 2 {
            phrases.push(tokens[i..j].join(" "));
            i = j;
        } else if nouns > 0 {
            // bare noun, covered by word granularity
            i = j;
        } else {
            i += 1;
        }
    }
    phrases
}

/// Tokens tagged noun, adjective, or quantifier anywhere in the text,
/// deduplicated in first-occurrence order.
pub fn filter_words(text: &str, lex: &Lexicon) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    let mut words = Vec::new();
    for tok in norm_tokens(text) {
        if matches!(lex.tag(&tok), Tag::Noun | Tag::Adjective | Tag::Quantifier)
            && seen.insert(tok.clone())
        {
            words.push(tok);
        }
    }
    words
}

/// Token embedding source: a deterministic hash construction or a
/// file-backed table of exported vectors.
#[derive(Clone, Debug)]
pub enum EmbeddingProvider {
    /// Token bytes seed a counter-based generator that yields a
    /// Gaussian vector, which is then normalized to unit length.
    /// Reproducible "semantics-free" embeddings.
    Hash { dim: usize },
    /// Fixed table; tokens missing from it are an error.
    Table {
        dim: usize,
        table: HashMap<String, Vec<f64>>,
    },
}

impl EmbeddingProvider {
    pub fn hash(dim: usize) -> EmbeddingProvider {
        EmbeddingProvider::Hash { dim }
    }

    /// Parses the `count dim` header line and then `token v1 .. v_dim`
    /// rows.
    pub fn from_table_source(src: &str) -> Result<EmbeddingProvider> {
        let mut lines = src.lines().enumerate();
        let (_, header) = lines.next().ok_or(Error::Empty {
            what: "embedding file",
        })?;
        let mut hp = header.split_whitespace();
        let parse_err = |line: usize, details: String| Error::Parse {
            what: "embedding file",
            line,
            details,
        };
        let count: usize = hp
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err(1, "bad count".into()))?;
        let dim: usize = hp
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| parse_err(1, "bad dim".into()))?;
        let mut table = HashMap::with_capacity(count);
        for (lineno, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let token = parts
                .next()
                .ok_or_else(|| parse_err(lineno + 1, "missing token".into()))?;
            let vec: std::result::Result<Vec<f64>, _> =
                parts.map(|t| t.parse::<f64>()).collect();
            let vec = vec.map_err(|e| parse_err(lineno + 1, e.to_string()))?;
            if vec.len() != dim {
                return Err(parse_err(
                    lineno + 1,
                    format!("expected {dim} values, got {}", vec.len()),
                ));
            }
            if !vec.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite {
                    op: format!("embedding of {token:?}"),
                });
            }
            table.insert(token.to_lowercase(), vec);
        }
        Ok(EmbeddingProvider::Table { dim, table })
    }

    pub fn from_table_file(path: &Path) -> Result<EmbeddingProvider> {
        EmbeddingProvider::from_table_source(&std::fs::read_to_string(path)?)
    }

    pub fn dim(&self) -> usize {
        match self {
            EmbeddingProvider::Hash { dim } => *dim,
            EmbeddingProvider::Table { dim, .. } => *dim,
        }
    }

    fn word_vector(&self, token: &str) -> Result<Vec<f64>> {
        match self {
            EmbeddingProvider::Hash { dim } => Ok(hash_embedding(token, *dim)),
            EmbeddingProvider::Table { table, .. } => table
                .get(&token.to_lowercase())
                .cloned()
                .ok_or_else(|| Error::MissingToken(token.to_string())),
        }
    }

    /// Embeds one unit. Multi-word units are the mean of their member
    /// word vectors, renormalized to unit length under the hash
    /// provider.
    pub fn embed_unit(&self, unit: &str) -> Result<Vec<f64>> {
        let members = norm_tokens(unit);
        if members.is_empty() {
            return Err(Error::Empty { what: "text unit" });
        }
        let missing: Vec<&String> = match self {
            EmbeddingProvider::Table { table, .. } => members
                .iter()
                .filter(|m| !table.contains_key(*m))
                .collect(),
            _ => vec![],
        };
        if !missing.is_empty() {
            let list: Vec<String> = missing.iter().map(|m| m.to_string()).collect();
            return Err(Error::MissingToken(list.join(", ")));
        }
        let dim = self.dim();
        let mut mean = vec![0.0; dim];
        for m in &members {
            let v = self.word_vector(m)?;
            for i in 0..dim {
                mean[i] += v[i];
            }
        }
        for x in &mut mean {
            *x /= members.len() as f64;
        }
        if matches!(self, EmbeddingProvider::Hash { .. }) {
            let norm: f64 = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for x in &mut mean {
                    *x /= norm;
                }
            }
        }
        Ok(mean)
    }
}

/// One vector per token, in order.
pub fn embed(tokens: &[String], provider: &EmbeddingProvider) -> Result<Vec<Vec<f64>>> {
    tokens.iter().map(|t| provider.embed_unit(t)).collect()
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix(state: u64) -> u64 {
    let mut z = state.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn unit_from_bits(x: u64) -> f64 {
    // strictly inside (0, 1)
    ((x >> 11) as f64 + 1.0) / (9_007_199_254_740_992.0 + 2.0)
}

/// Deterministic unit-norm Gaussian embedding of a token: a Box-Muller
/// stream driven by counter values mixed with the token hash.
fn hash_embedding(token: &str, dim: usize) -> Vec<f64> {
    let seed = fnv1a(token.to_lowercase().as_bytes());
    let mut out = Vec::with_capacity(dim + 1);
    let mut k = 0u64;
    while out.len() < dim {
        let u1 = unit_from_bits(splitmix(seed.wrapping_add(k.wrapping_mul(GOLDEN))));
        let u2 = unit_from_bits(splitmix(seed.wrapping_add((k + 1).wrapping_mul(GOLDEN))));
        k += 2;
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        out.push(r * theta.cos());
        if out.len() < dim {
            out.push(r * theta.sin());
        }
    }
    let norm: f64 = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut out {
        *v /= norm;
    }
    out
}

/// A text unit with its surface form and embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct TextUnit {
    pub surface: String,
    pub embedding: Vec<f64>,
}

/// Per-caption bundle of all three granularities.
#[derive(Clone, Debug, PartialEq)]
pub struct GranularText {
    pub sentences: Vec<TextUnit>,
    pub phrases: Vec<TextUnit>,
    pub words: Vec<TextUnit>,
}

impl GranularText {
    pub fn units(&self, granularity: Granularity) -> &[TextUnit] {
        match granularity {
            Granularity::Word => &self.words,
            Granularity::Phrase => &self.phrases,
            Granularity::Sentence => &self.sentences,
        }
    }

    pub fn embeddings(&self, granularity: Granularity) -> Vec<Vec<f64>> {
        self.units(granularity)
            .iter()
            .map(|u| u.embedding.clone())
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    Word,
    Phrase,
    Sentence,
}

pub const GRANULARITIES: [Granularity; 3] =
    [Granularity::Word, Granularity::Phrase, Granularity::Sentence];

/// Runs the full pipeline on one caption.
pub fn granulate(
    caption: &str,
    lex: &Lexicon,
    provider: &EmbeddingProvider,
) -> Result<GranularText> {
    let sentence_strs = split_sentences(caption);
    let mut phrase_strs = Vec::new();
    for s in &sentence_strs {
        phrase_strs.extend(chunk_phrases(s, lex));
    }
    let word_strs = filter_words(caption, lex);

    let to_units = |strs: &[String]| -> Result<Vec<TextUnit>> {
        strs.iter()
            .map(|s| {
                Ok(TextUnit {
                    surface: s.clone(),
                    embedding: provider.embed_unit(s)?,
                })
            })
            .collect()
    };
    Ok(GranularText {
        sentences: to_units(&sentence_strs)?,
        phrases: to_units(&phrase_strs)?,
        words: to_units(&word_strs)?,
    })
}

//! Tokenization, vocabulary and special tokens.
//!
//! Text is normalized by lowercasing and splitting on whitespace, with every
//! character that is neither alphanumeric nor whitespace emitted as its own
//! token. The same normalization backs the F1 metrics.

mod phrases;

pub use phrases::{extract_noun_phrases, NounPhrase, WORD_LIST_VERSION};

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Reserved special tokens. Their discriminants are their ids.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Special {
    Pad = 0,
    Bos = 1,
    Eos = 2,
    Unk = 3,
    KnowOpen = 4,
    KnowClose = 5,
    QueryTask = 6,
    KnowledgeTask = 7,
    FeedbackTask = 8,
    Newline = 9,
}

pub const PAD: TokenId = Special::Pad as TokenId;
pub const BOS: TokenId = Special::Bos as TokenId;
pub const EOS: TokenId = Special::Eos as TokenId;
pub const UNK: TokenId = Special::Unk as TokenId;
pub const KNOW_OPEN: TokenId = Special::KnowOpen as TokenId;
pub const KNOW_CLOSE: TokenId = Special::KnowClose as TokenId;
pub const QUERY_TASK: TokenId = Special::QueryTask as TokenId;
pub const KNOWLEDGE_TASK: TokenId = Special::KnowledgeTask as TokenId;
pub const FEEDBACK_TASK: TokenId = Special::FeedbackTask as TokenId;
pub const NEWLINE: TokenId = Special::Newline as TokenId;
/// First of the eleven confidence tokens `CONF_0 ..= CONF_10`.
pub const CONF_BASE: TokenId = 10;
pub const NUM_CONF: usize = 11;
pub const NUM_SPECIALS: usize = CONF_BASE + NUM_CONF;

const SPECIAL_NAMES: [&str; 10] = [
    "__pad__",
    "__bos__",
    "__eos__",
    "__unk__",
    "__know_open__",
    "__know_close__",
    "__query_task__",
    "__knowledge_task__",
    "__feedback_task__",
    "__nl__",
];

/// Id of the confidence token for level `c` (0..=10).
pub fn conf_token(c: u8) -> TokenId {
    assert!((c as usize) < NUM_CONF, "confidence level out of range");
    CONF_BASE + c as usize
}

pub fn is_special(id: TokenId) -> bool {
    id < NUM_SPECIALS
}

fn special_name(id: TokenId) -> String {
    if id < CONF_BASE {
        SPECIAL_NAMES[id].to_string()
    } else {
        format!("__conf_{}__", id - CONF_BASE)
    }
}

/// Lowercase and split into word and punctuation tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_lowercase().collect());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

/// True for tokens made only of punctuation or symbols.
pub fn is_punct(tok: &str) -> bool {
    !tok.chars().any(char::is_alphanumeric)
}

/// Token <-> id bijection with a frequency table from the build corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
    freqs: Vec<u64>,
}

impl Vocab {
    /// Keeps the `max_size - NUM_SPECIALS` most frequent tokens, ties broken alphabetically.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Result<Self> {
        if max_size < NUM_SPECIALS + 1 {
            return Err(Error::invalid(
                "max_size",
                format!("must be at least {} (specials + 1), got {max_size}", NUM_SPECIALS + 1),
            ));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::invalid("corpus", "no tokens"));
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - NUM_SPECIALS);

        let mut tokens: Vec<String> = (0..NUM_SPECIALS).map(special_name).collect();
        let mut freqs = vec![0; NUM_SPECIALS];
        for (t, f) in ranked {
            tokens.push(t);
            freqs.push(f);
        }
        Ok(Self::from_parts(tokens, freqs))
    }

    fn from_parts(tokens: Vec<String>, freqs: Vec<u64>) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, ids, freqs }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied().filter(|&i| !is_special(i))
    }

    pub fn token(&self, id: TokenId) -> &str {
        &self.tokens[id]
    }

    pub fn freq(&self, token: &str) -> u64 {
        self.id(token).map(|i| self.freqs[i]).unwrap_or(0)
    }

    /// Plain-text tokens in descending frequency order (specials excluded).
    pub fn by_frequency(&self) -> impl Iterator<Item = (&str, u64)> {
        self.tokens[NUM_SPECIALS..].iter().map(String::as_str).zip(self.freqs[NUM_SPECIALS..].iter().copied())
    }

    /// Encode text; out-of-vocabulary tokens map to `UNK`. Never emits other specials.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Inverse of [`Vocab::encode`]; `PAD`, `BOS` and `EOS` are dropped.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS)
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or("__unk__"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Tokens outside the `cutoff` most frequent ones.
    pub fn rare_tokens(&self, cutoff: usize) -> HashSet<String> {
        self.tokens[NUM_SPECIALS..].iter().skip(cutoff).cloned().collect()
    }

    /// One `token<TAB>frequency` line per id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (t, f) in self.tokens.iter().zip(&self.freqs) {
            writeln!(w, "{t}\t{f}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let r = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut tokens = Vec::new();
        let mut freqs = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let (t, f) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Parse { line: i + 1, message: "expected token<TAB>freq".into() })?;
            let f = f.parse().map_err(|_| Error::Parse { line: i + 1, message: format!("bad frequency {f:?}") })?;
            tokens.push(t.to_string());
            freqs.push(f);
        }
        if tokens.len() < NUM_SPECIALS || (0..NUM_SPECIALS).any(|i| tokens[i] != special_name(i)) {
            return Err(Error::invalid("vocab", "missing or misplaced special tokens"));
        }
        Ok(Self::from_parts(tokens, freqs))
    }
}

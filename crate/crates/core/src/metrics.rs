//! Evaluation metrics: unigram and rare-word F1, answer presence, perplexity
//! and feedback reports.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, FeedbackChoice};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::text::{is_punct, tokenize, TokenId, Vocab};

/// Normalized word tokens: lowercased, punctuation removed.
pub fn words(text: &str) -> Vec<String> {
    tokenize(text).into_iter().filter(|t| !is_punct(t)).collect()
}

fn f1_counts(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_default() += 1;
    }
    let mut common = 0;
    for p in pred {
        if let Some(c) = counts.get_mut(p.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Bag-of-words F1 with multiset overlap. Two empty sides score 0.
pub fn unigram_f1(pred: &str, gold: &str) -> f64 {
    f1_counts(&words(pred), &words(gold))
}

/// Tokens outside the `cutoff` most frequent training tokens are rare.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RareVocab {
    pub cutoff: usize,
    frequent: HashSet<String>,
}

impl RareVocab {
    /// `counts` need not be sorted; ties are broken alphabetically.
    pub fn from_counts<'a>(counts: impl IntoIterator<Item = (&'a str, u64)>, cutoff: usize) -> Self {
        let mut all: Vec<(&str, u64)> = counts.into_iter().collect();
        all.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let frequent = all.into_iter().take(cutoff).map(|(t, _)| t.to_string()).collect();
        RareVocab { cutoff, frequent }
    }

    pub fn from_vocab(vocab: &Vocab, cutoff: usize) -> Self {
        Self::from_counts(vocab.by_frequency(), cutoff)
    }

    pub fn is_rare(&self, token: &str) -> bool {
        !self.frequent.contains(token)
    }
}

/// [`unigram_f1`] after dropping non-rare tokens from both sides; 0 when
/// either side has no rare token.
pub fn rare_f1(pred: &str, gold: &str, rare: &RareVocab) -> f64 {
    let keep = |t: &str| words(t).into_iter().filter(|w| rare.is_rare(w)).collect::<Vec<_>>();
    f1_counts(&keep(pred), &keep(gold))
}

/// Whether the normalized answer occurs in the normalized response on word
/// boundaries. An empty answer is always present.
pub fn answer_present(response: &str, answer: &str) -> bool {
    let a = words(answer).join(" ");
    if a.is_empty() {
        return true;
    }
    let r = words(response).join(" ");
    format!(" {r} ").contains(&format!(" {a} "))
}

/// Whether a bot's own generated knowledge appears in its response.
pub fn gap(response: &str, knowledge: Option<&str>) -> Result<bool> {
    let k = knowledge.ok_or_else(|| Error::invalid("knowledge", "turn carries no knowledge"))?;
    Ok(answer_present(response, k))
}

/// Token-level perplexity accumulator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub nll: f64,
    pub tokens: usize,
}

impl Perplexity {
    pub fn add(&mut self, nll: f64, tokens: usize) {
        self.nll += nll;
        self.tokens += tokens;
    }

    pub fn merge(&self, other: &Perplexity) -> Perplexity {
        Perplexity { nll: self.nll + other.nll, tokens: self.tokens + other.tokens }
    }

    pub fn value(&self) -> Option<f64> {
        (self.tokens > 0).then(|| (self.nll / self.tokens as f64).exp())
    }
}

/// `exp(total NLL / total target tokens)` over `(src, tgt)` pairs.
pub fn corpus_ppl(model: &Model, pairs: &[(Vec<TokenId>, Vec<TokenId>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("eval set", "empty"));
    }
    let mut acc = Perplexity::default();
    for (src, tgt) in pairs {
        let (nll, per) = model.nll(src, tgt)?;
        acc.add(nll, per.len());
    }
    Ok(acc.value().expect("non-empty targets"))
}

/// Per-round summary in the shape of a results table row.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub dialogues: usize,
    pub bot_turns: usize,
    /// Bot turns carrying feedback; the denominator of every percentage.
    pub feedback_turns: usize,
    pub counts: BTreeMap<FeedbackChoice, usize>,
    pub good_pct: f64,
    pub query_pct: f64,
    pub results_pct: f64,
    pub response_pct: f64,
    /// Judged turns the bot generated itself (forced responses excluded).
    #[serde(default)]
    pub model_turns: usize,
    #[serde(default)]
    pub model_good: usize,
    /// Good share of `model_turns`.
    #[serde(default)]
    pub model_good_pct: f64,
    pub completed: usize,
    pub rating_sum: u64,
    pub avg_rating: Option<f64>,
    pub f1: Option<f64>,
    pub rare_f1: Option<f64>,
    pub ppl: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub splits: BTreeMap<String, RoundReport>,
}

impl RoundReport {
    fn finish(&mut self) {
        let n = self.feedback_turns as f64;
        let pct = |c: FeedbackChoice, counts: &BTreeMap<FeedbackChoice, usize>| {
            if n == 0.0 {
                0.0
            } else {
                100.0 * *counts.get(&c).unwrap_or(&0) as f64 / n
            }
        };
        self.good_pct = pct(FeedbackChoice::GoodResponse, &self.counts);
        self.query_pct = pct(FeedbackChoice::BetterQuery, &self.counts);
        self.results_pct = pct(FeedbackChoice::BetterResults, &self.counts);
        self.response_pct = pct(FeedbackChoice::OtherIssue, &self.counts);
        self.model_good_pct =
            if self.model_turns == 0 { 0.0 } else { 100.0 * self.model_good as f64 / self.model_turns as f64 };
        self.avg_rating = (self.completed > 0).then(|| self.rating_sum as f64 / self.completed as f64);
    }

    /// Counts summed and percentages recomputed; text metrics are dropped.
    pub fn merge(&self, other: &RoundReport) -> RoundReport {
        let mut counts = self.counts.clone();
        for (k, v) in &other.counts {
            *counts.entry(*k).or_default() += v;
        }
        let mut r = RoundReport {
            dialogues: self.dialogues + other.dialogues,
            bot_turns: self.bot_turns + other.bot_turns,
            feedback_turns: self.feedback_turns + other.feedback_turns,
            counts,
            model_turns: self.model_turns + other.model_turns,
            model_good: self.model_good + other.model_good,
            completed: self.completed + other.completed,
            rating_sum: self.rating_sum + other.rating_sum,
            ..RoundReport::default()
        };
        r.finish();
        r
    }

    pub fn error_pct_total(&self) -> f64 {
        self.good_pct + self.query_pct + self.results_pct + self.response_pct
    }
}

pub fn feedback_report(ds: &Dataset) -> RoundReport {
    let mut r = RoundReport { dialogues: ds.conversations.len(), ..RoundReport::default() };
    for c in &ds.conversations {
        for t in c.bot_turns() {
            r.bot_turns += 1;
            if let Some(f) = &t.feedback {
                r.feedback_turns += 1;
                *r.counts.entry(f.choice).or_default() += 1;
                if !t.overridden {
                    r.model_turns += 1;
                    r.model_good += usize::from(f.choice == FeedbackChoice::GoodResponse);
                }
            }
        }
        if let (true, Some(rating)) = (c.completed, c.rating) {
            r.completed += 1;
            r.rating_sum += rating as u64;
        }
    }
    r.finish();
    r
}

/// Mean of a non-empty slice.
pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

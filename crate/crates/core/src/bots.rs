//! Bot architectures: no-search, fusion (query then snippet-conditioned
//! response) and modular (query, knowledge, then knowledge-conditioned
//! response), plus input serialization shared with the learners.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Speaker, Turn};
use crate::error::{Error, Result};
use crate::metrics::answer_present;
use crate::model::decode::generate;
use crate::model::{Candidate, DecodeConfig, DirectorGuidance, Model, ModelStepper, TrainExample};
use crate::retrieval::{Index, SearchResult};
use crate::text::extract_noun_phrases;
use crate::text::{
    conf_token, TokenId, Vocab, EOS, FEEDBACK_TASK, KNOWLEDGE_TASK, KNOW_CLOSE, KNOW_OPEN, NEWLINE, NUM_CONF, QUERY_TASK,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BotKind {
    NoSearch,
    Fusion,
    Modular,
}

/// Gold values supplied by feedback, consumed by the next bot turn.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overrides {
    pub forced_query: Option<String>,
    pub forced_knowledge: Option<String>,
    pub forced_response: Option<String>,
}

impl Overrides {
    pub fn is_empty(&self) -> bool {
        self.populated() == 0
    }

    fn populated(&self) -> usize {
        [&self.forced_query, &self.forced_knowledge, &self.forced_response].iter().filter(|o| o.is_some()).count()
    }

    pub fn validate(&self) -> Result<()> {
        if self.populated() > 1 {
            return Err(Error::invalid("overrides", "at most one override per turn"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BotTurnOutput {
    pub response: String,
    pub executed_query: Option<String>,
    pub retrieved: Option<Vec<String>>,
    #[serde(default)]
    pub results: Vec<SearchResult>,
    pub knowledge: Option<String>,
    pub confidence_token: Option<u8>,
    #[serde(default)]
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub overridden: bool,
    /// Token ids fed to the response model.
    #[serde(skip)]
    pub response_input: Vec<TokenId>,
}

impl BotTurnOutput {
    /// The FITS turn recorded for this output (feedback attached later).
    pub fn to_turn(&self) -> Turn {
        Turn {
            speaker: Speaker::Bot,
            text: self.response.clone(),
            executed_query: self.executed_query.clone(),
            retrieved: self.retrieved.clone(),
            knowledge: self.knowledge.clone(),
            feedback: None,
            overridden: self.overridden,
        }
    }

    /// A turn that bypasses the bot entirely.
    pub fn forced(response: &str) -> Self {
        BotTurnOutput { response: response.to_string(), overridden: true, ..BotTurnOutput::default() }
    }
}

/// Anything that can take a bot turn in a session.
pub trait Responder {
    fn respond(&self, context: &[Turn], overrides: &Overrides) -> Result<BotTurnOutput>;
}

/// Scores a candidate response in context, higher is better.
pub trait CandidateScorer: Send + Sync {
    fn score(&self, context: &[Turn], response: &str) -> f64;
}

/// Serializes dialogue state into model inputs and targets.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub vocab: Arc<Vocab>,
    pub max_len: usize,
}

impl Encoder {
    pub fn new(vocab: Arc<Vocab>, max_len: usize) -> Self {
        Encoder { vocab, max_len }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.vocab.encode(text)
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        self.vocab.decode(ids)
    }

    /// Turns as `h : text` / `b : text` joined by newline tokens, keeping the
    /// most recent `budget` tokens.
    pub fn context(&self, turns: &[Turn], budget: usize) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for (i, t) in turns.iter().enumerate() {
            if i > 0 {
                ids.push(NEWLINE);
            }
            let prefix = match t.speaker {
                Speaker::Human => "h :",
                Speaker::Bot => "b :",
            };
            ids.extend(self.encode(prefix));
            ids.extend(self.encode(&t.text));
        }
        if ids.len() > budget {
            ids.drain(..ids.len() - budget);
        }
        ids
    }

    fn snippets(&self, results: &[SearchResult], budget: usize) -> Vec<TokenId> {
        let mut ids = Vec::new();
        for r in results {
            ids.push(NEWLINE);
            ids.extend(self.encode(&r.snippet));
        }
        ids.truncate(budget);
        ids
    }

    fn with_marker(&self, marker: Option<TokenId>, turns: &[Turn], tail: Vec<TokenId>) -> Vec<TokenId> {
        let head = usize::from(marker.is_some());
        let tail_budget = self.max_len.saturating_sub(head + 1);
        let tail: Vec<TokenId> = tail.into_iter().take(tail_budget).collect();
        let mut ids: Vec<TokenId> = marker.into_iter().collect();
        ids.extend(self.context(turns, self.max_len - head - tail.len()));
        ids.extend(tail);
        ids
    }

    pub fn query_input(&self, turns: &[Turn]) -> Vec<TokenId> {
        self.with_marker(Some(QUERY_TASK), turns, Vec::new())
    }

    pub fn knowledge_input(&self, turns: &[Turn], results: &[SearchResult]) -> Vec<TokenId> {
        self.with_marker(Some(KNOWLEDGE_TASK), turns, self.snippets(results, self.max_len))
    }

    pub fn response_input_plain(&self, turns: &[Turn]) -> Vec<TokenId> {
        self.with_marker(None, turns, Vec::new())
    }

    pub fn response_input_snippets(&self, turns: &[Turn], results: &[SearchResult]) -> Vec<TokenId> {
        self.with_marker(None, turns, self.snippets(results, self.max_len))
    }

    pub fn response_input_knowledge(&self, turns: &[Turn], knowledge: &str, confidence: Option<u8>) -> Vec<TokenId> {
        let mut tail = vec![KNOW_OPEN];
        tail.extend(self.encode(knowledge));
        tail.push(KNOW_CLOSE);
        if let Some(c) = confidence {
            tail.push(conf_token(c));
        }
        self.with_marker(None, turns, tail)
    }

    /// Input for the free-form feedback auxiliary task: the context ending
    /// with the unsatisfactory bot turn.
    pub fn feedback_input(&self, turns: &[Turn]) -> Vec<TokenId> {
        self.with_marker(Some(FEEDBACK_TASK), turns, Vec::new())
    }

    /// `text` followed by `EOS`, truncated to fit.
    pub fn target(&self, text: &str) -> Vec<TokenId> {
        let mut ids = self.encode(text);
        ids.truncate(self.max_len - 1);
        ids.push(EOS);
        ids
    }

    /// Knowledge target framed by knowledge markers, as used by the fusion
    /// bot's auxiliary task.
    pub fn framed_knowledge_target(&self, text: &str) -> Vec<TokenId> {
        let mut ids = vec![KNOW_OPEN];
        ids.extend(self.encode(text));
        ids.truncate(self.max_len - 2);
        ids.push(KNOW_CLOSE);
        ids.push(EOS);
        ids
    }
}

/// The models behind a bot. With `shared`, one model serves every role and
/// the task is selected by the input markers.
#[derive(Clone, Debug)]
pub struct K2RBundle {
    pub query: Option<Arc<Model>>,
    pub knowledge: Option<Arc<Model>>,
    pub response: Arc<Model>,
    pub shared: bool,
}

impl K2RBundle {
    pub fn separate(query: Option<Model>, knowledge: Option<Model>, response: Model) -> Self {
        K2RBundle { query: query.map(Arc::new), knowledge: knowledge.map(Arc::new), response: Arc::new(response), shared: false }
    }

    pub fn shared(model: Model) -> Self {
        let m = Arc::new(model);
        K2RBundle { query: Some(m.clone()), knowledge: Some(m.clone()), response: m, shared: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shared {
            let same = |o: &Option<Arc<Model>>| o.as_ref().is_some_and(|m| Arc::ptr_eq(m, &self.response));
            if !same(&self.query) || !same(&self.knowledge) {
                return Err(Error::invalid("bundle", "shared bundle must use one model for every role"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BotConfig {
    /// Decoding for the response model.
    pub decode: DecodeConfig,
    pub query_max_len: usize,
    pub knowledge_max_len: usize,
    /// Documents retrieved per query.
    pub k: usize,
    pub guidance: Option<DirectorGuidance>,
    pub confidence: Option<u8>,
    /// Pick the first beam containing the knowledge (modular bots only).
    pub knowledge_filter_beam: Option<usize>,
}

impl Default for BotConfig {
    fn default() -> Self {
        BotConfig {
            decode: DecodeConfig::greedy(24),
            query_max_len: 12,
            knowledge_max_len: 24,
            k: 3,
            guidance: None,
            confidence: None,
            knowledge_filter_beam: None,
        }
    }
}

#[derive(Clone)]
pub struct Bot {
    pub kind: BotKind,
    pub models: K2RBundle,
    pub index: Arc<Index>,
    pub encoder: Encoder,
    pub config: BotConfig,
    pub reranker: Option<Arc<dyn CandidateScorer>>,
}

impl Bot {
    pub fn new(kind: BotKind, models: K2RBundle, index: Arc<Index>, vocab: Arc<Vocab>, config: BotConfig) -> Result<Self> {
        models.validate()?;
        let needs_query = kind != BotKind::NoSearch;
        if needs_query && models.query.is_none() {
            return Err(Error::invalid("models", format!("{kind:?} bot needs a query model")));
        }
        if kind == BotKind::Modular && models.knowledge.is_none() {
            return Err(Error::invalid("models", "modular bot needs a knowledge model"));
        }
        if config.confidence.is_some_and(|c| c as usize >= NUM_CONF) {
            return Err(Error::invalid("confidence", "must be in 0..=10"));
        }
        if config.guidance.is_some() && !models.response.has_classifier_head() {
            return Err(Error::invalid("guidance", "response model has no classifier head"));
        }
        let max_len = models.response.config.max_len;
        Ok(Bot { kind, models, index, encoder: Encoder::new(vocab, max_len), config, reranker: None })
    }

    pub fn with_reranker(mut self, scorer: Arc<dyn CandidateScorer>) -> Self {
        self.reranker = Some(scorer);
        self
    }

    fn greedy_text(&self, model: &Model, src: &[TokenId], max_len: usize) -> String {
        let stepper = ModelStepper::new(model, src, None);
        let c = generate(&stepper, &DecodeConfig::greedy(max_len.min(model.config.max_len)));
        self.encoder.decode(c[0].content())
    }

    fn generate_response(&self, src: &[TokenId], knowledge: Option<&str>) -> (String, Vec<Candidate>) {
        let model = &self.models.response;
        if let (Some(beam), Some(k), BotKind::Modular) = (self.config.knowledge_filter_beam, knowledge, self.kind) {
            return knowledge_filtered_beam(model, &self.encoder, src, k, beam, self.config.decode.max_len, self.config.guidance);
        }
        let stepper = ModelStepper::new(model, src, self.config.guidance);
        let mut cfg = self.config.decode;
        cfg.max_len = cfg.max_len.min(model.config.max_len);
        let cands = generate(&stepper, &cfg);
        let text = self.encoder.decode(cands[0].content());
        (text, cands)
    }

    fn retrieve(&self, query: &str) -> (Vec<String>, Vec<SearchResult>) {
        let results = self.index.search(query, self.config.k);
        (results.iter().map(|r| r.doc_id.clone()).collect(), results)
    }
}

impl Responder for Bot {
    fn respond(&self, context: &[Turn], overrides: &Overrides) -> Result<BotTurnOutput> {
        overrides.validate()?;
        if let Some(r) = &overrides.forced_response {
            return Ok(BotTurnOutput::forced(r));
        }
        if context.last().map(|t| t.speaker) != Some(Speaker::Human) {
            return Err(Error::Protocol("bot turn requires a preceding human turn".into()));
        }
        let enc = &self.encoder;
        let mut out = BotTurnOutput::default();
        let mut results = Vec::new();
        if self.kind != BotKind::NoSearch {
            let query = match &overrides.forced_query {
                Some(q) => q.clone(),
                None => {
                    let qm = self.models.query.as_ref().expect("validated");
                    self.greedy_text(qm, &enc.query_input(context), self.config.query_max_len)
                }
            };
            let (ids, found) = self.retrieve(&query);
            out.executed_query = Some(query);
            out.retrieved = Some(ids);
            results = found;
        }
        let knowledge_text = match (&overrides.forced_knowledge, self.kind) {
            (Some(k), _) => Some(k.clone()),
            (None, BotKind::Modular) => {
                let km = self.models.knowledge.as_ref().expect("validated");
                Some(self.greedy_text(km, &enc.knowledge_input(context, &results), self.config.knowledge_max_len))
            }
            (None, _) => None,
        };
        if self.kind == BotKind::Modular {
            out.confidence_token = self.config.confidence;
        }
        let src = response_src(self.kind, enc, context, &results, knowledge_text.as_deref(), self.config.confidence);
        out.results = results;
        let (mut text, cands) = self.generate_response(&src, knowledge_text.as_deref());
        if let Some(scorer) = &self.reranker {
            let texts: Vec<String> = cands.iter().map(|c| enc.decode(c.content())).collect();
            if let Some(best) = rerank_texts(scorer.as_ref(), context, &texts) {
                text = texts[best].clone();
            }
        }
        out.response = text;
        out.knowledge = knowledge_text;
        out.candidates = cands;
        out.response_input = src;
        Ok(out)
    }
}

/// Response-model input for a turn. Modular bots condition on knowledge
/// (and the confidence token); other kinds only see knowledge when it was
/// forced, appended after their usual input.
pub fn response_src(
    kind: BotKind,
    enc: &Encoder,
    context: &[Turn],
    results: &[SearchResult],
    knowledge: Option<&str>,
    confidence: Option<u8>,
) -> Vec<TokenId> {
    let base = match kind {
        BotKind::Modular => return enc.response_input_knowledge(context, knowledge.unwrap_or(""), confidence),
        BotKind::Fusion => enc.response_input_snippets(context, results),
        BotKind::NoSearch => enc.response_input_plain(context),
    };
    let Some(k) = knowledge else { return base };
    let mut tail = vec![KNOW_OPEN];
    tail.extend(enc.encode(k));
    tail.push(KNOW_CLOSE);
    tail.truncate(enc.max_len);
    let keep = enc.max_len - tail.len();
    let mut src = base[base.len().saturating_sub(keep)..].to_vec();
    src.extend(tail);
    src
}

/// Index of the best-scoring text; ties go to the earlier candidate.
pub fn rerank_texts(scorer: &dyn CandidateScorer, context: &[Turn], texts: &[String]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, t) in texts.iter().enumerate() {
        let s = scorer.score(context, t);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Beam-decodes and returns the highest-ranked candidate whose text contains
/// `knowledge`, or the top candidate when none does. An empty knowledge
/// string is contained in every candidate.
pub fn knowledge_filtered_beam(
    model: &Model,
    encoder: &Encoder,
    src: &[TokenId],
    knowledge: &str,
    beam: usize,
    max_len: usize,
    guidance: Option<DirectorGuidance>,
) -> (String, Vec<Candidate>) {
    let stepper = ModelStepper::new(model, src, guidance);
    let cands = generate(&stepper, &DecodeConfig::beam(beam.max(1), max_len.min(model.config.max_len)));
    let texts: Vec<String> = cands.iter().map(|c| encoder.decode(c.content())).collect();
    let pick = select_containing(&texts, knowledge);
    (texts[pick].clone(), cands)
}

/// First text containing `knowledge`, else 0.
pub fn select_containing(texts: &[String], knowledge: &str) -> usize {
    texts.iter().position(|t| answer_present(t, knowledge)).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceSource {
    pub context: Vec<Turn>,
    pub knowledge: String,
    pub response: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceExample {
    pub context: Vec<Turn>,
    pub knowledge: String,
    pub response: String,
    pub conf: u8,
    pub corrupted: bool,
}

impl ConfidenceExample {
    pub fn to_train(&self, enc: &Encoder) -> TrainExample {
        TrainExample::new(enc.response_input_knowledge(&self.context, &self.knowledge, Some(self.conf)), enc.target(&self.response))
    }
}

/// With trust `p`, keeps the gold knowledge with probability `p` and
/// otherwise substitutes a random noun phrase from the context. Contexts
/// without noun phrases keep the gold knowledge.
pub fn confidence_example(src: &ConfidenceSource, p: f64, rng: &mut impl Rng) -> ConfidenceExample {
    let conf = (10.0 * p).round() as u8;
    let corrupt = rng.gen::<f64>() < 1.0 - p;
    let text: Vec<&str> = src.context.iter().map(|t| t.text.as_str()).collect();
    let phrases = extract_noun_phrases(&text.join(" . "));
    let (knowledge, corrupted) = if corrupt && !phrases.is_empty() {
        (phrases[rng.gen_range(0..phrases.len())].text.clone(), true)
    } else {
        (src.knowledge.clone(), false)
    };
    ConfidenceExample { context: src.context.clone(), knowledge, response: src.response.clone(), conf, corrupted }
}

pub fn build_confidence_training_set(sources: &[ConfidenceSource], rng: &mut impl Rng) -> Vec<ConfidenceExample> {
    sources.iter().map(|s| confidence_example(s, rng.gen::<f64>(), rng)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn source() -> ConfidenceSource {
        ConfidenceSource {
            context: vec![Turn::human("i love my husky puppy and the red ball")],
            knowledge: "teal".into(),
            response: "it is teal".into(),
        }
    }

    #[test]
    fn confidence_boundaries() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let e = confidence_example(&source(), 1.0, &mut rng);
            assert_eq!((e.conf, e.corrupted, e.knowledge.as_str()), (10, false, "teal"));
            let e = confidence_example(&source(), 0.0, &mut rng);
            assert_eq!((e.conf, e.corrupted), (0, true));
            assert!(["husky puppy", "red ball"].contains(&e.knowledge.as_str()));
        }
    }

    #[test]
    fn no_noun_phrase_keeps_gold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let src = ConfidenceSource { context: vec![Turn::human("go go go")], ..source() };
        let e = confidence_example(&src, 0.0, &mut rng);
        assert_eq!((e.conf, e.corrupted, e.knowledge.as_str()), (0, false, "teal"));
    }

    #[test]
    fn corruption_rate_tracks_confidence_bucket() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let sources = vec![source(); 10_000];
        let set = build_confidence_training_set(&sources, &mut rng);
        for c in 0..=10u8 {
            let bucket: Vec<_> = set.iter().filter(|e| e.conf == c).collect();
            let rate = bucket.iter().filter(|e| e.corrupted).count() as f64 / bucket.len() as f64;
            let want = 1.0 - c as f64 / 10.0;
            assert!((rate - want).abs() <= 0.03 + 0.03 * (c == 0 || c == 10) as u8 as f64, "conf {c}: {rate}");
        }
    }

    #[test]
    fn select_containing_rules() {
        let beams = vec!["i think 2015 .".to_string(), "it was in 2014 .".to_string()];
        assert_eq!(select_containing(&beams, "2014"), 1);
        assert_eq!(select_containing(&beams, "1999"), 0);
        assert_eq!(select_containing(&beams, ""), 0);
    }

    #[test]
    fn overrides_allow_at_most_one() {
        let o = Overrides { forced_query: Some("a".into()), forced_response: Some("b".into()), ..Default::default() };
        assert!(o.validate().is_err());
        assert!(Overrides::default().is_empty());
    }
}

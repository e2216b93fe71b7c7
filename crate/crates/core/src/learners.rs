//! Learning from deployment feedback: supervised targets, module
//! supervision, free-form feedback, reward models, reranking and Director.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bots::{rerank_texts, response_src, BotKind, CandidateScorer, Encoder, K2RBundle};
use crate::data::{Dataset, FeedbackChoice, Speaker, Turn};
use crate::error::{Error, Result};
use crate::model::decode::generate;
use crate::model::{train, DecodeConfig, DirectorGuidance, Model, ModelConfig, ModelStepper, TrainConfig, TrainExample, TrainReport};
use crate::retrieval::{Index, SearchResult};
use crate::text::{TokenId, EOS};

/// Rebuilds model inputs for logged bot turns.
#[derive(Clone, Copy)]
pub struct InputBuilder<'a> {
    pub kind: BotKind,
    pub encoder: &'a Encoder,
    pub index: &'a Index,
    pub confidence: Option<u8>,
}

impl InputBuilder<'_> {
    pub fn results(&self, turn: &Turn) -> Vec<SearchResult> {
        let ids = turn.retrieved.as_deref().unwrap_or_default();
        ids.iter().filter_map(|id| self.index.result(id)).collect()
    }

    /// What the response model saw when it produced `turn`.
    pub fn response_input(&self, ctx: &[Turn], turn: &Turn) -> Vec<TokenId> {
        let conf = if self.kind == BotKind::Modular { self.confidence } else { None };
        response_src(self.kind, self.encoder, ctx, &self.results(turn), turn.knowledge.as_deref(), conf)
    }
}

/// Bot turns produced by a model (not forced) that carry feedback, with the
/// turns preceding them.
pub fn judged_turns(ds: &Dataset) -> impl Iterator<Item = (&[Turn], &Turn)> {
    ds.conversations.iter().flat_map(|c| {
        c.turns.iter().enumerate().filter_map(move |(i, t)| {
            (t.speaker == Speaker::Bot && !t.overridden && t.feedback.is_some()).then(|| (&c.turns[..i], t))
        })
    })
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid("lambda", format!("{lambda} not in [0, 1]")));
    }
    Ok(())
}

/// Gold responses weighted `lambda` and good bot responses weighted
/// `1 - lambda`; zero-weight examples are dropped.
pub fn build_supervised_set(ds: &Dataset, lambda: f64, b: &InputBuilder) -> Result<Vec<TrainExample>> {
    check_lambda(lambda)?;
    let mut out = Vec::new();
    for (ctx, turn) in judged_turns(ds) {
        let fb = turn.feedback.as_ref().expect("judged");
        let (target, weight) = match fb.choice {
            FeedbackChoice::OtherIssue => (fb.gold_response.as_deref().expect("validated"), lambda),
            FeedbackChoice::GoodResponse => (turn.text.as_str(), 1.0 - lambda),
            _ => continue,
        };
        if weight > 0.0 {
            let src = b.response_input(ctx, turn);
            out.push(TrainExample { weight, ..TrainExample::new(src, b.encoder.target(target)) });
        }
    }
    Ok(out)
}

/// Training sets per bot module. For fusion bots the knowledge set is an
/// auxiliary task of the response model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleSets {
    pub query: Vec<TrainExample>,
    pub knowledge: Vec<TrainExample>,
    pub response: Vec<TrainExample>,
}

impl RoleSets {
    pub fn is_empty(&self) -> bool {
        self.query.is_empty() && self.knowledge.is_empty() && self.response.is_empty()
    }

    pub fn extend(&mut self, other: RoleSets) {
        self.query.extend(other.query);
        self.knowledge.extend(other.knowledge);
        self.response.extend(other.response);
    }
}

pub fn build_module_sets(ds: &Dataset, lambda: f64, b: &InputBuilder) -> Result<RoleSets> {
    let mut sets = RoleSets { response: build_supervised_set(ds, lambda, b)?, ..RoleSets::default() };
    let enc = b.encoder;
    for (ctx, turn) in judged_turns(ds) {
        let fb = turn.feedback.as_ref().expect("judged");
        match fb.choice {
            FeedbackChoice::BetterQuery => {
                let q = fb.gold_query.as_deref().expect("validated");
                sets.query.push(TrainExample::new(enc.query_input(ctx), enc.target(q)));
            }
            FeedbackChoice::BetterResults => {
                let k = fb.gold_knowledge.as_deref().expect("validated");
                let src = enc.knowledge_input(ctx, &b.results(turn));
                let tgt = match b.kind {
                    BotKind::Modular => enc.target(k),
                    _ => enc.framed_knowledge_target(k),
                };
                sets.knowledge.push(TrainExample::new(src, tgt));
            }
            _ => {}
        }
    }
    Ok(sets)
}

/// Context plus the unsatisfactory bot turn, targeting the free-form
/// complaint.
pub fn build_freeform_set(ds: &Dataset, b: &InputBuilder) -> Vec<TrainExample> {
    let mut out = Vec::new();
    for (ctx, turn) in judged_turns(ds) {
        let fb = turn.feedback.as_ref().expect("judged");
        let Some(text) = fb.freeform.as_deref().filter(|_| fb.choice != FeedbackChoice::GoodResponse) else { continue };
        let mut turns = ctx.to_vec();
        turns.push(Turn::bot(&turn.text));
        out.push(TrainExample::new(b.encoder.feedback_input(&turns), b.encoder.target(text)));
    }
    out
}

/// At most `ratio` free-form examples per response example, taken in order.
pub fn mix_freeform(response: &[TrainExample], freeform: &[TrainExample], ratio: f64) -> Vec<TrainExample> {
    let n = ((response.len() as f64 * ratio).ceil() as usize).min(freeform.len());
    response.iter().chain(&freeform[..n]).cloned().collect()
}

/// Labelled examples for a classifier-headed response model: gold and good
/// responses are positives, other bot responses negatives.
pub fn build_director_set(ds: &Dataset, b: &InputBuilder) -> Vec<TrainExample> {
    let mut out = Vec::new();
    for (ctx, turn) in judged_turns(ds) {
        let fb = turn.feedback.as_ref().expect("judged");
        let src = b.response_input(ctx, turn);
        let enc = b.encoder;
        match fb.choice {
            FeedbackChoice::GoodResponse => out.push(TrainExample::labelled(src, enc.target(&turn.text), true)),
            choice => {
                if choice == FeedbackChoice::OtherIssue {
                    let gold = fb.gold_response.as_deref().expect("validated");
                    out.push(TrainExample::labelled(src.clone(), enc.target(gold), true));
                }
                out.push(TrainExample::labelled(src, enc.target(&turn.text), false));
            }
        }
    }
    out
}

/// Binary satisfaction classifier over a context and a candidate response.
#[derive(Clone, Debug)]
pub struct RewardModel {
    pub model: Model,
    pub encoder: Encoder,
}

impl RewardModel {
    pub fn input(&self, ctx: &[Turn], response: &str) -> Vec<TokenId> {
        let mut turns = ctx.to_vec();
        turns.push(Turn::bot(response));
        self.encoder.response_input_plain(&turns)
    }

    /// Probability that `response` satisfies the user, in (0, 1).
    pub fn prob(&self, ctx: &[Turn], response: &str) -> f64 {
        let src = self.input(ctx, response);
        self.model.classifier_scores(&src, &[EOS]).expect("valid input")[0]
    }
}

impl CandidateScorer for RewardModel {
    fn score(&self, ctx: &[Turn], response: &str) -> f64 {
        self.prob(ctx, response)
    }
}

/// `(context, response, satisfactory)` from binary feedback on bot turns,
/// plus gold responses as positives.
pub fn reward_examples(ds: &Dataset) -> Vec<(Vec<Turn>, String, bool)> {
    let mut out = Vec::new();
    for (ctx, turn) in judged_turns(ds) {
        let fb = turn.feedback.as_ref().expect("judged");
        out.push((ctx.to_vec(), turn.text.clone(), fb.binary_ok));
        if let Some(g) = &fb.gold_response {
            out.push((ctx.to_vec(), g.clone(), true));
        }
    }
    out
}

pub fn train_reward_model(
    examples: &[(Vec<Turn>, String, bool)],
    encoder: Encoder,
    config: ModelConfig,
    cfg: &TrainConfig,
) -> Result<RewardModel> {
    let pos = examples.iter().filter(|e| e.2).count();
    if pos == 0 || pos == examples.len() {
        return Err(Error::invalid("reward data", "needs both satisfactory and unsatisfactory examples"));
    }
    let config = ModelConfig { has_classifier_head: true, ..config };
    let mut rm = RewardModel { model: Model::new(config)?, encoder };
    let data: Vec<TrainExample> =
        examples.iter().map(|(c, r, y)| TrainExample::labelled(rm.input(c, r), vec![EOS], *y)).collect();
    train(&mut rm.model, &data, cfg)?;
    Ok(rm)
}

/// Index of the highest-scoring candidate; ties go to the earlier one.
pub fn rerank(scorer: &dyn CandidateScorer, ctx: &[Turn], candidates: &[String]) -> Result<usize> {
    rerank_texts(scorer, ctx, candidates).ok_or_else(|| Error::invalid("candidates", "empty"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardContext {
    pub turns: Vec<Turn>,
    pub src: Vec<TokenId>,
}

pub fn reward_contexts(ds: &Dataset, b: &InputBuilder) -> Vec<RewardContext> {
    judged_turns(ds).map(|(ctx, t)| RewardContext { turns: ctx.to_vec(), src: b.response_input(ctx, t) }).collect()
}

/// Beam-decodes each context, keeps the reward model's favourite and
/// fine-tunes on the winners. Returns the winners alongside the report.
pub fn reward_based_learning(
    model: &mut Model,
    scorer: &dyn CandidateScorer,
    contexts: &[RewardContext],
    decode: &DecodeConfig,
    encoder: &Encoder,
    cfg: &TrainConfig,
) -> Result<(Vec<String>, TrainReport)> {
    let mut winners = Vec::with_capacity(contexts.len());
    let mut data = Vec::with_capacity(contexts.len());
    for c in contexts {
        let cands = generate(&ModelStepper::new(model, &c.src, None), decode);
        let texts: Vec<String> = cands.iter().map(|x| encoder.decode(x.content())).collect();
        let best = rerank(scorer, &c.turns, &texts)?;
        data.push(TrainExample::new(c.src.clone(), encoder.target(&texts[best])));
        winners.push(texts[best].clone());
    }
    let report = train(model, &data, cfg)?;
    Ok((winners, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum LearnerSpec {
    Supervised { lambda: f64 },
    ModuleSupervision { lambda: f64 },
    FreeForm { lambda: f64, ratio: f64 },
    Rerank { beam: usize },
    RewardBased { beam: usize },
    Director { module: bool, gamma: f64 },
}

impl LearnerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LearnerSpec::Supervised { .. } => "supervised",
            LearnerSpec::ModuleSupervision { .. } => "module",
            LearnerSpec::FreeForm { .. } => "freeform",
            LearnerSpec::Rerank { .. } => "rerank",
            LearnerSpec::RewardBased { .. } => "reward",
            LearnerSpec::Director { module: false, .. } => "director-binary",
            LearnerSpec::Director { module: true, .. } => "director-module",
        }
    }

    /// Parses a learner name with default hyperparameters.
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "supervised" => LearnerSpec::Supervised { lambda: 0.5 },
            "module" => LearnerSpec::ModuleSupervision { lambda: 0.5 },
            "freeform" => LearnerSpec::FreeForm { lambda: 0.5, ratio: 0.25 },
            "rerank" => LearnerSpec::Rerank { beam: 8 },
            "reward" => LearnerSpec::RewardBased { beam: 8 },
            "director-binary" => LearnerSpec::Director { module: false, gamma: 1.0 },
            "director-module" => LearnerSpec::Director { module: true, gamma: 1.0 },
            other => return Err(Error::invalid("learner", format!("unknown method {other}"))),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            LearnerSpec::Supervised { lambda } | LearnerSpec::ModuleSupervision { lambda } => check_lambda(lambda),
            LearnerSpec::FreeForm { lambda, ratio } => {
                check_lambda(lambda)?;
                if ratio >= 0.0 { Ok(()) } else { Err(Error::invalid("ratio", "must be >= 0")) }
            }
            LearnerSpec::Rerank { beam } | LearnerSpec::RewardBased { beam } if beam == 0 => {
                Err(Error::invalid("beam", "must be >= 1"))
            }
            LearnerSpec::Director { gamma, .. } if !(gamma >= 0.0 && gamma.is_finite()) => {
                Err(Error::invalid("gamma", "must be finite and >= 0"))
            }
            _ => Ok(()),
        }
    }
}

pub struct LearnContext<'a> {
    pub builder: InputBuilder<'a>,
    pub train: TrainConfig,
    /// Original training data mixed into every fine-tuning run.
    pub replay: &'a RoleSets,
    /// Architecture of freshly trained reward models.
    pub reward_config: ModelConfig,
}

/// A learner's output: models plus the decoding tweaks it relies on.
#[derive(Clone)]
pub struct Learned {
    pub spec: LearnerSpec,
    pub models: K2RBundle,
    pub guidance: Option<DirectorGuidance>,
    pub reranker: Option<Arc<RewardModel>>,
    /// Response decoding override (reranking needs several candidates).
    pub decode: Option<DecodeConfig>,
}

fn fit(base: &Arc<Model>, new: Vec<TrainExample>, replay: &[TrainExample], cfg: &TrainConfig, head: bool) -> Result<Arc<Model>> {
    if new.is_empty() && !head {
        return Ok(base.clone());
    }
    let mut m = if head { base.with_classifier_head() } else { (**base).clone() };
    let mut data = new;
    data.extend(replay.iter().cloned());
    train(&mut m, &data, cfg)?;
    Ok(Arc::new(m))
}

/// Fine-tunes each module on its new examples plus replay. Modules without
/// new examples are shared with `base` unchanged.
pub fn fit_roles(base: &K2RBundle, sets: RoleSets, ctx: &LearnContext, head: bool) -> Result<K2RBundle> {
    let kind = ctx.builder.kind;
    let replay = ctx.replay;
    let seeded = |offset: u64| TrainConfig { seed: ctx.train.seed.wrapping_add(offset), ..ctx.train.clone() };
    if base.shared {
        let mut all = sets.query;
        all.extend(sets.knowledge);
        all.extend(sets.response);
        let mut rep = replay.query.clone();
        rep.extend(replay.knowledge.iter().cloned());
        rep.extend(replay.response.iter().cloned());
        let m = fit(&base.response, all, &rep, &seeded(0), head)?;
        return Ok(K2RBundle { query: Some(m.clone()), knowledge: Some(m.clone()), response: m, shared: true });
    }
    let (mut response_new, mut response_replay) = (sets.response, replay.response.clone());
    let mut knowledge = base.knowledge.clone();
    if kind == BotKind::Modular {
        if let Some(k) = &base.knowledge {
            knowledge = Some(fit(k, sets.knowledge, &replay.knowledge, &seeded(2), false)?);
        }
    } else {
        response_new.extend(sets.knowledge);
        response_replay.extend(replay.knowledge.iter().cloned());
    }
    let query = match &base.query {
        Some(q) => Some(fit(q, sets.query, &replay.query, &seeded(1), false)?),
        None => None,
    };
    let response = fit(&base.response, response_new, &response_replay, &seeded(3), head)?;
    Ok(K2RBundle { query, knowledge, response, shared: false })
}

/// Trains `spec` on one round of feedback.
pub fn learn(spec: &LearnerSpec, base: &K2RBundle, ds: &Dataset, ctx: &LearnContext) -> Result<Learned> {
    spec.validate()?;
    let b = &ctx.builder;
    let plain = |models| Learned { spec: spec.clone(), models, guidance: None, reranker: None, decode: None };
    Ok(match *spec {
        LearnerSpec::Supervised { lambda } => {
            let sets = RoleSets { response: build_supervised_set(ds, lambda, b)?, ..RoleSets::default() };
            plain(fit_roles(base, sets, ctx, false)?)
        }
        LearnerSpec::ModuleSupervision { lambda } => plain(fit_roles(base, build_module_sets(ds, lambda, b)?, ctx, false)?),
        LearnerSpec::FreeForm { lambda, ratio } => {
            let response = build_supervised_set(ds, lambda, b)?;
            let mixed = mix_freeform(&response, &build_freeform_set(ds, b), ratio);
            plain(fit_roles(base, RoleSets { response: mixed, ..RoleSets::default() }, ctx, false)?)
        }
        LearnerSpec::Rerank { beam } => {
            let rm = train_reward_model(&reward_examples(ds), b.encoder.clone(), ctx.reward_config.clone(), &ctx.train)?;
            Learned {
                reranker: Some(Arc::new(rm)),
                decode: Some(DecodeConfig::beam(beam, ctx.builder.encoder.max_len)),
                ..plain(base.clone())
            }
        }
        LearnerSpec::RewardBased { beam } => {
            let rm = train_reward_model(&reward_examples(ds), b.encoder.clone(), ctx.reward_config.clone(), &ctx.train)?;
            let mut models = base.clone();
            let mut m = (*base.response).clone();
            let decode = DecodeConfig::beam(beam, 32.min(m.config.max_len));
            reward_based_learning(&mut m, &rm, &reward_contexts(ds, b), &decode, b.encoder, &ctx.train)?;
            models.response = Arc::new(m);
            if models.shared {
                models.query = Some(models.response.clone());
                models.knowledge = Some(models.response.clone());
            }
            plain(models)
        }
        LearnerSpec::Director { module, gamma } => {
            let director = build_director_set(ds, b);
            if !director.iter().any(|e| e.label == Some(true)) || !director.iter().any(|e| e.label == Some(false)) {
                return Err(Error::invalid("director data", "needs positive and negative responses"));
            }
            let mut sets = RoleSets { response: director, ..RoleSets::default() };
            if module {
                let m = build_module_sets(ds, 0.0, b)?;
                sets.query = m.query;
                sets.knowledge = m.knowledge;
            }
            Learned { guidance: Some(DirectorGuidance { gamma }), ..plain(fit_roles(base, sets, ctx, true)?) }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Conversation, FeedbackRecord, Split};
    use crate::retrieval::{Bm25Params, Document};
    use crate::text::Vocab;

    fn fixture() -> (Encoder, Index) {
        let docs = vec![Document { id: "d1".into(), title: "kalo".into(), body: "kalo likes teal .".into() }];
        let vocab = Vocab::build(&["kalo likes teal . what color h b : gold q response bad answer fine ok 0 1"], 1000).unwrap();
        (Encoder::new(Arc::new(vocab), 32), Index::build(docs, Bm25Params::default()).unwrap())
    }

    fn ds_with(choices: Vec<FeedbackRecord>) -> Dataset {
        let mut ds = Dataset::new("v1", Split::Train);
        let mut c = Conversation { id: "c".into(), task: "t".into(), turns: vec![], completed: true, rating: Some(3) };
        for (i, fb) in choices.into_iter().enumerate() {
            c.turns.push(Turn::human("what color"));
            let mut t = Turn::bot(format!("answer {i}"));
            t.retrieved = Some(vec!["d1".into()]);
            t.executed_query = Some("kalo".into());
            t.feedback = Some(fb);
            c.turns.push(t);
        }
        ds.conversations.push(c);
        ds
    }

    #[test]
    fn supervised_weighting() {
        let (enc, idx) = fixture();
        let b = InputBuilder { kind: BotKind::Fusion, encoder: &enc, index: &idx, confidence: None };
        let only_good = ds_with(vec![FeedbackRecord::good(), FeedbackRecord::good()]);
        assert!(build_supervised_set(&only_good, 1.0, &b).unwrap().is_empty());
        let mixed = ds_with(vec![FeedbackRecord::other_issue("gold response"), FeedbackRecord::good()]);
        let set = build_supervised_set(&mixed, 0.5, &b).unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.iter().all(|e| e.weight == 0.5));
        assert_eq!(set[0].tgt, enc.target("gold response"));
        assert!(build_supervised_set(&mixed, 1.5, &b).is_err());
    }

    #[test]
    fn module_sets() {
        let (enc, idx) = fixture();
        let b = InputBuilder { kind: BotKind::Fusion, encoder: &enc, index: &idx, confidence: None };
        let ds = ds_with(vec![FeedbackRecord::better_query("gold q"), FeedbackRecord::better_results("kalo likes teal .")]);
        let s = build_module_sets(&ds, 0.5, &b).unwrap();
        assert_eq!(s.query.len(), 1);
        assert_eq!(s.query[0].tgt, enc.target("gold q"));
        assert_eq!(s.query[0].src[0], crate::text::QUERY_TASK);
        let k = &s.knowledge[0];
        assert_eq!(k.src[0], crate::text::KNOWLEDGE_TASK);
        assert_eq!(k.tgt.first(), Some(&crate::text::KNOW_OPEN));
        assert_eq!(k.tgt[k.tgt.len() - 2], crate::text::KNOW_CLOSE);
        let none = build_module_sets(&ds_with(vec![]), 0.5, &b).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn freeform_and_director_sets() {
        let (enc, idx) = fixture();
        let b = InputBuilder { kind: BotKind::Fusion, encoder: &enc, index: &idx, confidence: None };
        let ds = ds_with(vec![
            FeedbackRecord::other_issue("gold response").with_freeform("bad answer"),
            FeedbackRecord::good().with_freeform("fine"),
        ]);
        let ff = build_freeform_set(&ds, &b);
        assert_eq!(ff.len(), 1);
        assert_eq!(ff[0].tgt, enc.target("bad answer"));
        let d = build_director_set(&ds, &b);
        let labels: Vec<Option<bool>> = d.iter().map(|e| e.label).collect();
        assert_eq!(labels, [Some(true), Some(false), Some(true)]);
        // The rejected response is only ever a negative.
        assert!(d.iter().filter(|e| e.tgt == enc.target("answer 0")).all(|e| e.label == Some(false)));
        assert_eq!(build_director_set(&ds, &b), build_director_set(&ds, &b));
    }

    #[test]
    fn mix_ratio() {
        let r = vec![TrainExample::new(vec![], vec![EOS]); 8];
        let f = vec![TrainExample::new(vec![1], vec![EOS]); 5];
        assert_eq!(mix_freeform(&r, &f, 0.25).len(), 10);
        assert_eq!(mix_freeform(&r, &f, 10.0).len(), 13);
    }

    #[test]
    fn learner_names_round_trip() {
        for n in ["supervised", "module", "freeform", "rerank", "reward", "director-binary", "director-module"] {
            assert_eq!(LearnerSpec::parse(n).unwrap().name(), n);
        }
        assert!(LearnerSpec::parse("ppo").is_err());
        assert!(LearnerSpec::Supervised { lambda: -0.1 }.validate().is_err());
    }
}

//! End-to-end runs on synthetic worlds: pretrain a baseline, deploy it,
//! learn from the collected feedback, redeploy and compare.

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bots::{confidence_example, Bot, BotConfig, BotKind, ConfidenceSource, Encoder, K2RBundle, Responder};
use crate::data::{Dataset, Speaker, Split, Turn};
use crate::error::{Error, Result};
use crate::learners::{judged_turns, learn, InputBuilder, LearnContext, Learned, LearnerSpec, RoleSets};
use crate::metrics::{feedback_report, gap, rare_f1, unigram_f1, RareVocab, RoundReport};
use crate::model::{train, Model, ModelConfig, TrainConfig, TrainExample};
use crate::protocol::Budget;
use crate::retrieval::Index;
use crate::simulator::{generate_world, run_round, RoundConfig, ScriptedAnnotator, ScriptedHuman, TaskTruth, World, WorldSpec};
use crate::text::Vocab;

/// Model shape shared by every module; the vocabulary size comes from the world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape { d_model: 48, layers: 2, heads: 2, ff_dim: 96, max_len: 64 }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            max_len: self.max_len,
            seed,
            ..ModelConfig::new(vocab_size)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub kind: BotKind,
    /// One model for every module.
    pub shared: bool,
    pub shape: ModelShape,
    pub train: TrainConfig,
    /// Training dialogues generated per pretraining fact.
    pub contexts_per_fact: usize,
    /// Train the modular response model with corrupted knowledge and
    /// confidence tokens.
    pub confidence: bool,
    /// Examples per module kept for replay during fine-tuning.
    pub replay: usize,
    /// Corrupted-knowledge examples drawn per pretraining context.
    pub confidence_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            kind: BotKind::Fusion,
            shared: false,
            shape: ModelShape::default(),
            train: TrainConfig { epochs: 30, lr: 2e-3, ..TrainConfig::default() },
            contexts_per_fact: 3,
            confidence: false,
            replay: 300,
            confidence_samples: 1,
        }
    }
}

/// A trained baseline and what is needed to keep training it.
#[derive(Clone)]
pub struct Pretrained {
    pub kind: BotKind,
    pub models: K2RBundle,
    pub vocab: Arc<Vocab>,
    pub encoder: Encoder,
    pub replay: RoleSets,
    pub seconds: f64,
}

/// A pretraining dialogue: optionally a finished exchange about another fact,
/// then a canonical question about `t`.
fn pretrain_context(t: &TaskTruth, others: &[TaskTruth], human: &ScriptedHuman, rng: &mut impl Rng) -> Vec<Turn> {
    let mut turns = Vec::new();
    if rng.gen::<f64>() < 0.4 {
        let o = &others[rng.gen_range(0..others.len())];
        turns.push(Turn::human(human.opening(o, rng)));
        turns.push(Turn::bot(&o.gold_response));
    }
    let msg = if rng.gen::<f64>() < 0.2 { human.follow_up(t, rng) } else { human.opening(t, rng) };
    turns.push(Turn::human(msg));
    turns
}

/// Module training sets from pretraining facts, questions in canonical form only.
pub fn pretrain_sets(world: &World, cfg: &PretrainConfig, enc: &Encoder, index: &Index, seed: u64) -> Result<RoleSets> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let human = ScriptedHuman { paraphrase_rate: 0.0, ..ScriptedHuman::for_world(&world.spec) };
    let blind = ScriptedHuman { distractor_true_rate: 0.0, ..human.clone() };
    let facts = &world.pretrain;
    let mut sets = RoleSets::default();
    for t in facts {
        for _ in 0..cfg.contexts_per_fact {
            let ctx = pretrain_context(t, facts, &human, &mut rng);
            let response_tgt = enc.target(&t.gold_response);
            match cfg.kind {
                BotKind::NoSearch => sets.response.push(TrainExample::new(enc.response_input_plain(&ctx), response_tgt)),
                BotKind::Fusion | BotKind::Modular => {
                    sets.query.push(TrainExample::new(enc.query_input(&ctx), enc.target(&t.gold_query)));
                    let mut results = index.search(&t.gold_query, 3);
                    results.shuffle(&mut rng);
                    if cfg.kind == BotKind::Fusion {
                        sets.response.push(TrainExample::new(enc.response_input_snippets(&ctx, &results), response_tgt));
                        continue;
                    }
                    sets.knowledge.push(TrainExample::new(enc.knowledge_input(&ctx, &results), enc.target(&t.gold_answer)));
                    if cfg.confidence {
                        // Facts the model has memorized make the knowledge redundant,
                        // so confidence examples are about names it cannot know.
                        for _ in 0..cfg.confidence_samples {
                            let h = world.hypothetical(&mut rng)?;
                            let ctx = pretrain_context(&h, facts, &blind, &mut rng);
                            let src = ConfidenceSource { context: ctx, knowledge: h.gold_answer.clone(), response: h.gold_response.clone() };
                            let p = rng.gen::<f64>();
                            sets.response.push(confidence_example(&src, p, &mut rng).to_train(enc));
                        }
                    } else {
                        let k = if rng.gen::<bool>() { &t.gold_answer } else { &t.gold_knowledge };
                        sets.response.push(TrainExample::new(enc.response_input_knowledge(&ctx, k, None), response_tgt));
                    }
                }
            }
        }
    }
    Ok(sets)
}

/// Trains a baseline bot on the world's pretraining facts.
pub fn pretrain(world: &World, cfg: &PretrainConfig, seed: u64) -> Result<Pretrained> {
    let start = Instant::now();
    let vocab = Arc::new(world.vocab()?);
    let enc = Encoder::new(vocab.clone(), cfg.shape.max_len);
    let index = world.index()?;
    let sets = pretrain_sets(world, cfg, &enc, &index, seed)?;
    let mcfg = |offset: u64| cfg.shape.config(vocab.len(), seed.wrapping_add(offset));
    let tcfg = |offset: u64| TrainConfig { seed: seed.wrapping_add(offset), ..cfg.train.clone() };
    let fit = |data: &[TrainExample], offset: u64| -> Result<Model> {
        let mut m = Model::new(mcfg(offset))?;
        train(&mut m, data, &tcfg(offset))?;
        Ok(m)
    };
    let models = if cfg.shared {
        let mut all = sets.query.clone();
        all.extend(sets.knowledge.iter().cloned());
        all.extend(sets.response.iter().cloned());
        K2RBundle::shared(fit(&all, 0)?)
    } else {
        let query = if cfg.kind == BotKind::NoSearch { None } else { Some(fit(&sets.query, 1)?) };
        let knowledge = if cfg.kind == BotKind::Modular { Some(fit(&sets.knowledge, 2)?) } else { None };
        K2RBundle::separate(query, knowledge, fit(&sets.response, 3)?)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let mut sample = |v: &[TrainExample]| {
        let mut v = v.to_vec();
        v.shuffle(&mut rng);
        v.truncate(cfg.replay);
        v
    };
    let replay = RoleSets { query: sample(&sets.query), knowledge: sample(&sets.knowledge), response: sample(&sets.response) };
    Ok(Pretrained {
        kind: cfg.kind,
        models,
        vocab,
        encoder: enc,
        replay,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub pretrain: PretrainConfig,
    pub finetune: TrainConfig,
    pub learners: Vec<LearnerSpec>,
    /// 0: baseline only; 1: learn from v1; 2: also redeploy, collect v2 and
    /// retrain on v1 and v2.
    pub rounds: usize,
    pub dialogues: usize,
    pub eval_dialogues: usize,
    /// Tasks held out from deployment.
    pub unseen_tasks: usize,
    pub budget: Budget,
    pub eval_budget: Budget,
    pub rare_cutoff: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldSpec::default(),
            pretrain: PretrainConfig::default(),
            finetune: TrainConfig { epochs: 8, lr: 1e-3, ..TrainConfig::default() },
            learners: ["supervised", "module", "director-binary", "director-module"]
                .iter()
                .map(|n| LearnerSpec::parse(n).expect("known"))
                .collect(),
            rounds: 2,
            dialogues: 160,
            eval_dialogues: 160,
            unseen_tasks: 50,
            budget: Budget::default(),
            eval_budget: Budget::BotTurns(3),
            rare_cutoff: 100,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// A configuration small enough for smoke runs.
    pub fn demo() -> Self {
        ExperimentConfig {
            world: WorldSpec { n_entities: 8, n_tasks: 30, pretrain_entities: 8, ..WorldSpec::default() },
            pretrain: PretrainConfig {
                shape: ModelShape { d_model: 16, layers: 1, heads: 2, ff_dim: 32, max_len: 64 },
                train: TrainConfig { epochs: 2, ..TrainConfig::default() },
                contexts_per_fact: 1,
                replay: 20,
                ..PretrainConfig::default()
            },
            finetune: TrainConfig { epochs: 1, ..TrainConfig::default() },
            dialogues: 12,
            eval_dialogues: 8,
            unseen_tasks: 6,
            ..ExperimentConfig::default()
        }
    }
}

/// Evaluation of one bot on seen and unseen tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub name: String,
    pub round: usize,
    pub seen: RoundReport,
    pub unseen: RoundReport,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub reports: Vec<EvalReport>,
    pub datasets: Vec<Dataset>,
    pub seconds: f64,
}

impl ExperimentReport {
    pub fn get(&self, name: &str, round: usize) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.name == name && r.round == round)
    }
}

/// Fills `f1`, `rare_f1` over bot turns the model generated, against each
/// task's gold response.
pub fn add_text_metrics(report: &mut RoundReport, ds: &Dataset, annotator: &ScriptedAnnotator, rare: &RareVocab) {
    let (mut f1, mut rf1, mut n) = (0.0, 0.0, 0usize);
    for c in &ds.conversations {
        let Ok(t) = annotator.truth(&c.task) else { continue };
        for turn in c.turns.iter().filter(|t| t.speaker == Speaker::Bot && !t.overridden) {
            f1 += unigram_f1(&turn.text, &t.gold_response);
            rf1 += rare_f1(&turn.text, &t.gold_response, rare);
            n += 1;
        }
    }
    if n > 0 {
        report.f1 = Some(f1 / n as f64);
        report.rare_f1 = Some(rf1 / n as f64);
    }
}

pub fn bot_for(kind: BotKind, learned: &Learned, index: &Arc<Index>, vocab: &Arc<Vocab>) -> Result<Bot> {
    let config = BotConfig {
        decode: learned.decode.unwrap_or(BotConfig::default().decode),
        guidance: learned.guidance,
        ..BotConfig::default()
    };
    let bot = Bot::new(kind, learned.models.clone(), index.clone(), vocab.clone(), config)?;
    Ok(match &learned.reranker {
        Some(r) => bot.with_reranker(r.clone()),
        None => bot,
    })
}

struct Env<'a> {
    cfg: &'a ExperimentConfig,
    annotator: ScriptedAnnotator,
    human: ScriptedHuman,
    seen: Vec<String>,
    unseen: Vec<String>,
    rare: RareVocab,
}

impl Env<'_> {
    fn round(&self, bot: &dyn Responder, ids: &[String], n: usize, budget: Budget, seed: u64, version: &str, split: Split) -> Result<Dataset> {
        let rc = RoundConfig { n_dialogues: n, budget, seed, version: version.into(), split };
        run_round(bot, &self.annotator, &self.human, ids, &rc)
    }

    fn evaluate(&self, name: &str, round: usize, bot: &dyn Responder, seed: u64) -> Result<EvalReport> {
        let n = self.cfg.eval_dialogues;
        let b = self.cfg.eval_budget;
        let seen_ds = self.round(bot, &self.seen, n, b, seed ^ 0x5EE5, "eval", Split::Test)?;
        let unseen_ds = self.round(bot, &self.unseen, n, b, seed ^ 0x0B5E, "eval", Split::TestUnseen)?;
        let mut seen = feedback_report(&seen_ds);
        let mut unseen = feedback_report(&unseen_ds);
        add_text_metrics(&mut seen, &seen_ds, &self.annotator, &self.rare);
        add_text_metrics(&mut unseen, &unseen_ds, &self.annotator, &self.rare);
        Ok(EvalReport { name: name.into(), round, seen, unseen })
    }
}

/// Baseline deploy, v1 collection, learner training and evaluation; with
/// two rounds the best learner is redeployed, v2 collected and the learner
/// retrained on v1 and v2.
pub fn run_experiment(cfg: &ExperimentConfig, pretrained: Option<&Pretrained>) -> Result<ExperimentReport> {
    let start = Instant::now();
    let (world, _) = generate_world(&cfg.world)?;
    if cfg.unseen_tasks == 0 || cfg.unseen_tasks >= world.tasks.len() {
        return Err(Error::invalid("unseen_tasks", "must leave seen and unseen tasks"));
    }
    let owned;
    let base = match pretrained {
        Some(p) => p,
        None => {
            owned = pretrain(&world, &cfg.pretrain, cfg.seed)?;
            &owned
        }
    };
    if base.kind != cfg.pretrain.kind {
        return Err(Error::invalid("pretrained", "bot kind differs from configuration"));
    }
    let index = Arc::new(world.index()?);
    let mut ids: Vec<String> = world.tasks.iter().map(|t| t.id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let unseen = ids.split_off(ids.len() - cfg.unseen_tasks);
    let env = Env {
        cfg,
        annotator: ScriptedAnnotator::new(&world.truths),
        human: ScriptedHuman::for_world(&world.spec),
        seen: ids,
        unseen,
        rare: RareVocab::from_vocab(&base.vocab, cfg.rare_cutoff),
    };
    let kind = cfg.pretrain.kind;
    let baseline = Learned {
        spec: LearnerSpec::Supervised { lambda: 0.0 },
        models: base.models.clone(),
        guidance: None,
        reranker: None,
        decode: None,
    };
    let mut report = ExperimentReport { seed: cfg.seed, ..ExperimentReport::default() };
    let baseline_bot = bot_for(kind, &baseline, &index, &base.vocab)?;
    report.reports.push(env.evaluate("baseline", 0, &baseline_bot, cfg.seed)?);
    if cfg.rounds == 0 {
        report.seconds = start.elapsed().as_secs_f64();
        return Ok(report);
    }
    let v1 = env.round(&baseline_bot, &env.seen, cfg.dialogues, cfg.budget, cfg.seed ^ 0x1111, "v1", Split::Train)?;
    let ctx = LearnContext {
        builder: InputBuilder { kind, encoder: &base.encoder, index: &index, confidence: None },
        train: TrainConfig { seed: cfg.seed, ..cfg.finetune.clone() },
        replay: &base.replay,
        reward_config: ModelConfig { has_classifier_head: true, ..cfg.pretrain.shape.config(base.vocab.len(), cfg.seed) },
    };
    let mut best: Option<(f64, Learned)> = None;
    for spec in &cfg.learners {
        let learned = learn(spec, &base.models, &v1, &ctx)?;
        let bot = bot_for(kind, &learned, &index, &base.vocab)?;
        let r = env.evaluate(spec.name(), 1, &bot, cfg.seed)?;
        if best.as_ref().is_none_or(|(g, _)| r.seen.model_good_pct > *g) {
            best = Some((r.seen.model_good_pct, learned));
        }
        report.reports.push(r);
    }
    report.datasets.push(v1.clone());
    if cfg.rounds >= 2 {
        if let Some((_, learned)) = best {
            let bot = bot_for(kind, &learned, &index, &base.vocab)?;
            let v2 = env.round(&bot, &env.seen, cfg.dialogues, cfg.budget, cfg.seed ^ 0x2222, "v2", Split::Train)?;
            let both = Dataset { version: "v1+v2".into(), ..v1.union(&v2)? };
            let retrained = learn(&learned.spec, &base.models, &both, &ctx)?;
            let bot = bot_for(kind, &retrained, &index, &base.vocab)?;
            report.reports.push(env.evaluate(learned.spec.name(), 2, &bot, cfg.seed)?);
            report.datasets.push(v2);
        }
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceConfig {
    pub world: WorldSpec,
    pub pretrain: PretrainConfig,
    pub levels: Vec<u8>,
    pub eval_contexts: usize,
    pub seed: u64,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        ConfidenceConfig {
            world: WorldSpec { n_entities: 40, pretrain_entities: 50, distractor_rate: 1.0, ..WorldSpec::default() },
            pretrain: PretrainConfig {
                kind: BotKind::Modular,
                shared: true,
                confidence: true,
                contexts_per_fact: 3,
                confidence_samples: 4,
                train: TrainConfig { epochs: 14, lr: 2e-3, ..TrainConfig::default() },
                shape: ModelShape { d_model: 40, layers: 2, heads: 2, ff_dim: 80, max_len: 64 },
                ..PretrainConfig::default()
            },
            levels: vec![0, 2, 6, 10],
            eval_contexts: 200,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceReport {
    pub seed: u64,
    pub params: usize,
    /// `(confidence, GAP %)` per level.
    pub gap: Vec<(u8, f64)>,
    pub seconds: f64,
}

/// Trains a confidence-conditioned modular bot and measures how often its
/// responses contain its own predicted knowledge at each confidence level,
/// on tasks about entities never seen in training.
pub fn run_confidence_experiment(cfg: &ConfidenceConfig) -> Result<ConfidenceReport> {
    let start = Instant::now();
    if cfg.pretrain.kind != BotKind::Modular || !cfg.pretrain.confidence {
        return Err(Error::invalid("pretrain", "needs a confidence-trained modular bot"));
    }
    let (world, _) = generate_world(&cfg.world)?;
    let p = pretrain(&world, &cfg.pretrain, cfg.seed)?;
    let index = Arc::new(world.index()?);
    let human = ScriptedHuman { paraphrase_rate: 0.0, ..ScriptedHuman::for_world(&world.spec) };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC0F);
    let contexts: Vec<Vec<Turn>> = (0..cfg.eval_contexts)
        .map(|i| vec![Turn::human(human.opening(&world.truths[i % world.truths.len()], &mut rng))])
        .collect();
    let mut gap_by_level = Vec::new();
    for &c in &cfg.levels {
        let config = BotConfig { confidence: Some(c), ..BotConfig::default() };
        let bot = Bot::new(BotKind::Modular, p.models.clone(), index.clone(), p.vocab.clone(), config)?;
        let mut hits = 0usize;
        for ctx in &contexts {
            let out = bot.respond(ctx, &Default::default())?;
            hits += usize::from(gap(&out.response, out.knowledge.as_deref())?);
        }
        gap_by_level.push((c, 100.0 * hits as f64 / contexts.len() as f64));
    }
    Ok(ConfidenceReport {
        seed: cfg.seed,
        params: p.models.response.num_params(),
        gap: gap_by_level,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Number of bot turns judged in a dataset (forced turns excluded).
pub fn judged_count(ds: &Dataset) -> usize {
    judged_turns(ds).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_experiment_runs_and_is_deterministic() {
        let cfg = ExperimentConfig { rounds: 2, ..ExperimentConfig::demo() };
        let a = run_experiment(&cfg, None).unwrap();
        assert!(a.get("baseline", 0).is_some());
        assert_eq!(a.reports.len(), 1 + cfg.learners.len() + 1);
        for r in &a.reports {
            assert!((r.seen.error_pct_total() - 100.0).abs() < 0.1);
        }
        let b = run_experiment(&cfg, None).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.datasets, b.datasets);
    }

    #[test]
    fn rounds_zero_is_baseline_only() {
        let cfg = ExperimentConfig { rounds: 0, ..ExperimentConfig::demo() };
        let r = run_experiment(&cfg, None).unwrap();
        assert_eq!(r.reports.len(), 1);
        assert!(r.datasets.is_empty());
    }
}

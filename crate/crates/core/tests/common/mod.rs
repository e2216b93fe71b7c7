#![allow(dead_code)]

use std::collections::HashMap;
use std::sync::Arc;

use fits_core::bots::{Bot, BotConfig, BotKind, CandidateScorer, K2RBundle};
use fits_core::learners::rerank;
use fits_core::data::{
    dataset_stats, load_fits, save_fits, Conversation, Dataset, FeedbackChoice, FeedbackRecord, Split, TaskDefinition, Turn,
};
use fits_core::metrics::{corpus_ppl, rare_f1, unigram_f1, RareVocab};
use fits_core::model::decode::generate;
use fits_core::model::{
    train, DecodeConfig, DirectorGuidance, Model, ModelConfig, ModelStepper, StepModel, TrainConfig, TrainExample,
};
use fits_core::protocol::{Budget, ProtocolConfig, SessionState};
use fits_core::simulator::{generate_world, World, WorldSpec};
use fits_core::text::{TokenId, EOS, NUM_SPECIALS};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Non-empty text with punctuation, quotes, escapes and non-ASCII.
pub fn text() -> impl Strategy<Value = String> {
    "[a-z]{1,6}( [a-zA-Z0-9,.!?'\"é中\\\\\n]{1,8}){0,3}"
}

pub fn topic() -> impl Strategy<Value = String> {
    prop::collection::vec("[a-z]{1,8}", 1..=10).prop_map(|w| w.join(" "))
}

pub fn feedback() -> impl Strategy<Value = FeedbackRecord> {
    let base = prop_oneof![
        Just(FeedbackRecord::good()),
        text().prop_map(FeedbackRecord::better_query),
        text().prop_map(FeedbackRecord::better_results),
        text().prop_map(FeedbackRecord::other_issue),
    ];
    (base, prop::option::of(text())).prop_map(|(f, ff)| match ff {
        Some(t) => f.with_freeform(t),
        None => f,
    })
}

#[derive(Clone, Debug)]
struct BotTurnSpec {
    text: String,
    query: Option<String>,
    retrieved: Option<Vec<String>>,
    knowledge: Option<String>,
    feedback: Option<FeedbackRecord>,
    overridden: bool,
}

fn bot_turn() -> impl Strategy<Value = BotTurnSpec> {
    (
        text(),
        prop::option::of(text()),
        prop::option::of(prop::collection::vec("d[0-9]{1,3}", 0..4)),
        prop::option::of(text()),
        prop::option::of(feedback()),
        any::<bool>(),
    )
        .prop_map(|(text, query, retrieved, knowledge, feedback, overridden)| BotTurnSpec {
            text,
            query,
            retrieved,
            knowledge,
            feedback,
            overridden,
        })
}

fn turns() -> impl Strategy<Value = Vec<Turn>> {
    (prop::collection::vec((text(), bot_turn()), 0..5), prop::option::of(text())).prop_map(|(pairs, tail)| {
        let mut out = Vec::new();
        let mut last = None;
        for (h, b) in pairs {
            out.push(Turn::human(h));
            out.push(Turn {
                executed_query: b.query,
                retrieved: b.retrieved,
                knowledge: b.knowledge,
                overridden: b.overridden && last == Some(FeedbackChoice::OtherIssue),
                feedback: b.feedback.clone(),
                ..Turn::bot(b.text)
            });
            last = b.feedback.map(|f| f.choice);
        }
        if let Some(t) = tail {
            out.push(Turn::human(t));
        }
        out
    })
}

fn split() -> impl Strategy<Value = Split> {
    prop_oneof![Just(Split::Train), Just(Split::Valid), Just(Split::Test), Just(Split::TestUnseen)]
}

/// A valid dataset whose task and conversation ids all start with `prefix`.
pub fn dataset(prefix: &'static str) -> impl Strategy<Value = Dataset> {
    let tasks = prop::collection::vec((topic(), text(), text()), 1..5);
    let convs = prop::collection::vec((any::<prop::sample::Index>(), turns(), prop::option::of(1u8..=5)), 0..6);
    ("v[0-9]", split(), tasks, convs).prop_map(move |(version, split, tasks, convs)| {
        let tasks: Vec<TaskDefinition> = tasks
            .into_iter()
            .enumerate()
            .map(|(i, (topic, task, completion_description))| TaskDefinition {
                id: format!("{prefix}t{i}"),
                topic,
                task,
                completion_description,
            })
            .collect();
        let conversations = convs
            .into_iter()
            .enumerate()
            .map(|(i, (task, turns, rating))| Conversation {
                id: format!("{prefix}c{i}"),
                task: tasks[task.index(tasks.len())].id.clone(),
                turns,
                completed: rating.is_some(),
                rating,
            })
            .collect();
        Dataset { version, split, tasks, conversations }
    })
}

/// save then load gives back the dataset restricted to referenced tasks.
pub fn check_round_trip(ds: &Dataset) -> Result<(), TestCaseError> {
    ds.validate().map_err(|e| TestCaseError::fail(format!("generator produced invalid data: {e}")))?;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    save_fits(ds, &path).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let back = load_fits(&path).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let expected = ds.normalized();
    if ds.conversations.is_empty() {
        prop_assert!(back.conversations.is_empty() && back.tasks.is_empty());
    } else {
        prop_assert_eq!(&back, &expected);
    }
    let path2 = dir.path().join("again.jsonl");
    save_fits(&back, &path2).unwrap();
    prop_assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    Ok(())
}

/// Stats of a disjoint union equal the combined stats of the parts.
pub fn check_stats_additivity(a: &Dataset, b: &Dataset) -> Result<(), TestCaseError> {
    let u = a.union(b).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let (sa, sb, su) = (dataset_stats(a), dataset_stats(b), dataset_stats(&u));
    let combined = sa.combine(&sb);
    prop_assert_eq!(su.unique_tasks, combined.unique_tasks);
    prop_assert_eq!(su.dialogues, combined.dialogues);
    prop_assert_eq!(su.utterances, combined.utterances);
    prop_assert_eq!(su.bot_utterances, combined.bot_utterances);
    prop_assert_eq!(&su.feedback, &combined.feedback);
    prop_assert!((su.avg_bot_utterances - combined.avg_bot_utterances).abs() < 1e-12);
    Ok(())
}

pub struct ProtocolFixture {
    pub world: World,
    pub bot: Bot,
}

/// Tiny world and an untrained modular bot.
pub fn protocol_fixture() -> ProtocolFixture {
    let world =
        generate_world(&WorldSpec { n_entities: 6, pretrain_entities: 2, n_tasks: 8, ..WorldSpec::default() }).unwrap().0;
    let vocab = Arc::new(world.vocab().unwrap());
    let m = |seed| {
        Model::new(ModelConfig { d_model: 8, layers: 1, heads: 2, ff_dim: 16, max_len: 64, seed, ..ModelConfig::new(vocab.len()) })
            .unwrap()
    };
    let models = K2RBundle::separate(Some(m(1)), Some(m(2)), m(3));
    let config = BotConfig { decode: DecodeConfig::greedy(5), ..BotConfig::default() };
    let bot = Bot::new(BotKind::Modular, models, Arc::new(world.index().unwrap()), vocab, config).unwrap();
    ProtocolFixture { world, bot }
}

/// One scripted action per bot turn: the feedback choice (0..4) and its payload.
pub fn actions() -> impl Strategy<Value = Vec<(u8, String)>> {
    prop::collection::vec((0u8..4, text()), 1..10)
}

fn record(choice: u8, payload: &str) -> FeedbackRecord {
    match choice {
        0 => FeedbackRecord::good(),
        1 => FeedbackRecord::better_query(payload),
        2 => FeedbackRecord::better_results(payload),
        _ => FeedbackRecord::other_issue(payload),
    }
}

/// Drives a session with `actions` and checks the protocol invariants
/// independently of the session's own bookkeeping.
pub fn check_protocol(fx: &ProtocolFixture, budget: Budget, actions: &[(u8, String)], rating: u8) -> Result<(), TestCaseError> {
    let task = fx.world.tasks[0].clone();
    let mut s = SessionState::new(task, "conv".into(), ProtocolConfig { budget, require_feedback: true }).unwrap();
    let mut prev: Option<FeedbackRecord> = None;
    let (mut judged, mut corrections) = (0usize, 0usize);
    for (i, (choice, payload)) in actions.iter().enumerate() {
        if s.is_terminated() {
            prop_assert!(s.human_message("more").is_err());
            break;
        }
        s.human_message(&format!("message {i}")).map_err(|e| TestCaseError::fail(e.to_string()))?;
        let before = s.clone();
        prop_assert!(s.human_message("again").is_err());
        prop_assert_eq!(&s, &before);
        let out = s.bot_step(&fx.bot).map_err(|e| TestCaseError::fail(e.to_string()))?;
        match &prev {
            Some(f) if f.choice == FeedbackChoice::BetterQuery => {
                prop_assert_eq!(out.executed_query.as_deref(), f.gold_query.as_deref())
            }
            Some(f) if f.choice == FeedbackChoice::BetterResults => {
                prop_assert_eq!(out.knowledge.as_deref(), f.gold_knowledge.as_deref())
            }
            Some(f) if f.choice == FeedbackChoice::OtherIssue => {
                prop_assert_eq!(Some(out.response.as_str()), f.gold_response.as_deref());
                prop_assert!(out.overridden);
            }
            _ => prop_assert!(!out.overridden),
        }
        // A bot turn must be judged before anything else happens.
        let before = s.clone();
        prop_assert!(s.human_message("skip").is_err());
        prop_assert!(s.bot_step(&fx.bot).is_err());
        prop_assert_eq!(&s, &before);

        let fb = record(*choice, payload);
        s.give_feedback(fb.clone()).map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(s.give_feedback(FeedbackRecord::good()).is_err());
        judged += 1;
        if fb.choice != FeedbackChoice::GoodResponse {
            corrections += 1;
        }
        let exhausted = match budget {
            Budget::BotTurns(n) => judged >= n,
            Budget::CorrectionCycles(n) => corrections >= n,
        };
        prop_assert_eq!(s.is_terminated(), exhausted);
        prev = Some(fb);
    }
    let c = s.complete(rating).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(c.validate().is_ok());
    prop_assert_eq!(c.bot_turns().count(), judged);
    prop_assert!(c.bot_turns().all(|t| t.feedback.is_some()));
    match budget {
        Budget::BotTurns(n) => prop_assert!(judged <= n),
        Budget::CorrectionCycles(n) => prop_assert!(corrections <= n),
    }
    prop_assert!(s.complete(rating).is_err());
    Ok(())
}

/// Next-token table keyed by prefix; missing prefixes are uniform.
pub struct TableModel {
    pub vocab: usize,
    pub eos: TokenId,
    pub table: HashMap<Vec<TokenId>, Vec<f64>>,
}

impl TableModel {
    /// Builds a table from probabilities (not logs).
    pub fn from_probs(vocab: usize, eos: TokenId, rows: &[(&[TokenId], &[f64])]) -> Self {
        let table = rows.iter().map(|(k, p)| (k.to_vec(), p.iter().map(|x| x.ln()).collect())).collect();
        TableModel { vocab, eos, table }
    }

    /// Random normalized rows for every prefix shorter than `max_len`.
    pub fn random(vocab: usize, max_len: usize, rng: &mut impl Rng) -> Self {
        let mut table = HashMap::new();
        let mut frontier = vec![Vec::new()];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for prefix in frontier {
                let w: Vec<f64> = (0..vocab).map(|_| rng.gen::<f64>() + 0.01).collect();
                let z: f64 = w.iter().sum();
                table.insert(prefix.clone(), w.iter().map(|x| (x / z).ln()).collect());
                for t in 1..vocab {
                    let mut p = prefix.clone();
                    p.push(t);
                    next.push(p);
                }
            }
            frontier = next;
        }
        TableModel { vocab, eos: 0, table }
    }

    fn row(&self, prefix: &[TokenId]) -> Vec<f64> {
        self.table.get(prefix).cloned().unwrap_or_else(|| vec![-(self.vocab as f64).ln(); self.vocab])
    }
}

#[derive(Clone)]
pub struct TableState {
    prefix: Vec<TokenId>,
    row: Vec<f64>,
}

impl StepModel for TableModel {
    type State = TableState;

    fn initial(&self) -> TableState {
        TableState { prefix: Vec::new(), row: self.row(&[]) }
    }

    fn log_probs<'s>(&self, state: &'s TableState) -> &'s [f64] {
        &state.row
    }

    fn push(&self, state: &TableState, token: TokenId) -> TableState {
        let mut prefix = state.prefix.clone();
        prefix.push(token);
        let row = self.row(&prefix);
        TableState { prefix, row }
    }

    fn eos(&self) -> TokenId {
        self.eos
    }
}

/// Every sequence the decoder could emit, scored by summing table entries,
/// ordered finished first, then by score, then by tokens.
pub fn exhaustive(m: &TableModel, max_len: usize) -> Vec<(Vec<TokenId>, f64, bool)> {
    let mut out = Vec::new();
    let mut stack = vec![(Vec::new(), 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        let row = m.row(&prefix);
        for (t, l) in row.iter().enumerate() {
            let mut seq = prefix.clone();
            seq.push(t);
            let score = lp + l;
            if t == m.eos {
                out.push((seq, score, true));
            } else if seq.len() == max_len {
                out.push((seq, score, false));
            } else {
                stack.push((seq, score));
            }
        }
    }
    out.sort_by(|a, b| b.2.cmp(&a.2).then(b.1.total_cmp(&a.1)).then(a.0.cmp(&b.0)));
    out
}

/// Hand-built three-token table (EOS, a, b) whose beam of 4 is worked out by hand.
pub fn beam_oracle_table() -> TableModel {
    const E: TokenId = 0;
    const A: TokenId = 1;
    const B: TokenId = 2;
    TableModel::from_probs(
        3,
        E,
        &[
            (&[], &[0.1, 0.55, 0.35]),
            (&[A], &[0.5, 0.3, 0.2]),
            (&[B], &[0.6, 0.2, 0.2]),
            (&[A, A], &[0.7, 0.2, 0.1]),
            (&[A, B], &[0.5, 0.25, 0.25]),
            (&[B, A], &[0.4, 0.4, 0.2]),
            (&[B, B], &[0.9, 0.05, 0.05]),
        ],
    )
}

/// Expected beam-4 output on [`beam_oracle_table`] with max length 3.
pub fn beam_oracle_expected() -> Vec<(Vec<TokenId>, f64)> {
    vec![
        (vec![1, 0], (0.55f64 * 0.5).ln()),
        (vec![2, 0], (0.35f64 * 0.6).ln()),
        (vec![1, 1, 0], (0.55f64 * 0.3 * 0.7).ln()),
        (vec![0], 0.1f64.ln()),
    ]
}

/// Checks beam output against the worked example; returns the worst log-prob error.
pub fn check_beam_oracle() -> Result<f64, String> {
    let got = generate(&beam_oracle_table(), &DecodeConfig::beam(4, 3));
    let want = beam_oracle_expected();
    if got.len() != want.len() {
        return Err(format!("{} candidates, expected {}", got.len(), want.len()));
    }
    let mut worst = 0.0f64;
    for (g, (tokens, lp)) in got.iter().zip(&want) {
        if &g.tokens != tokens || !g.finished {
            return Err(format!("got {:?}, expected {:?}", g.tokens, tokens));
        }
        worst = worst.max((g.log_prob - lp).abs());
    }
    Ok(worst)
}

/// A beam wide enough to hold every prefix returns the exhaustive top `k`.
pub fn check_wide_beam(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (vocab, max_len, k) = (4, 4, 5);
    let m = TableModel::random(vocab, max_len, &mut rng);
    let got = generate(&m, &DecodeConfig::beam(64, max_len));
    let all = exhaustive(&m, max_len);
    for (i, (tokens, lp, finished)) in all.iter().take(k).enumerate() {
        let g = got.get(i).ok_or("too few candidates")?;
        if &g.tokens != tokens || g.finished != *finished || (g.log_prob - lp).abs() > 1e-9 {
            return Err(format!("seed {seed} rank {i}: got {:?} {}, expected {:?} {}", g.tokens, g.log_prob, tokens, lp));
        }
    }
    Ok(())
}

/// Token F1 by pairing each predicted word with an unused equal gold word.
pub fn f1_oracle(pred: &[String], gold: &[String]) -> f64 {
    let mut used = vec![false; gold.len()];
    let mut common = 0usize;
    for p in pred {
        if let Some(j) = (0..gold.len()).find(|&j| !used[j] && gold[j] == *p) {
            used[j] = true;
            common += 1;
        }
    }
    if common == 0 {
        0.0
    } else {
        2.0 * common as f64 / (pred.len() + gold.len()) as f64
    }
}

/// A token is frequent when fewer than `cutoff` tokens beat it on count
/// (ties broken alphabetically).
pub fn frequent_oracle(token: &str, counts: &[(String, u64)], cutoff: usize) -> bool {
    let Some(c) = counts.iter().find(|(t, _)| t == token).map(|x| x.1) else { return false };
    counts.iter().filter(|(u, cu)| *cu > c || (*cu == c && u.as_str() < token)).count() < cutoff
}

const WORDS: [&str; 8] = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta"];
const PUNCT: [&str; 5] = [",", ".", "!", "?", "'"];

/// Random words and how they render as text with case changes and punctuation.
pub fn random_words(rng: &mut impl Rng) -> (Vec<String>, String) {
    let n = rng.gen_range(0..10);
    let mut words = Vec::new();
    let mut text = String::new();
    for _ in 0..n {
        let w = WORDS[rng.gen_range(0..WORDS.len())];
        words.push(w.to_string());
        let shown = if rng.gen::<bool>() { w.to_uppercase() } else { w.to_string() };
        text.push_str(&shown);
        if rng.gen::<f64>() < 0.3 {
            text.push_str(PUNCT[rng.gen_range(0..PUNCT.len())]);
        }
        text.push(' ');
    }
    (words, text)
}

/// Max absolute error of `unigram_f1` and `rare_f1` against the oracles over `n` random pairs.
pub fn f1_max_error(n: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let (pw, pt) = random_words(&mut rng);
        let (gw, gt) = random_words(&mut rng);
        worst = worst.max((unigram_f1(&pt, &gt) - f1_oracle(&pw, &gw)).abs());
        let counts: Vec<(String, u64)> = WORDS.iter().map(|w| (w.to_string(), rng.gen_range(0..4))).collect();
        let cutoff = rng.gen_range(0..=WORDS.len());
        let rare = RareVocab::from_counts(counts.iter().map(|(t, c)| (t.as_str(), *c)), cutoff);
        let keep = |ws: &[String]| -> Vec<String> {
            ws.iter().filter(|w| !frequent_oracle(w, &counts, cutoff)).cloned().collect()
        };
        worst = worst.max((rare_f1(&pt, &gt, &rare) - f1_oracle(&keep(&pw), &keep(&gw))).abs());
    }
    worst
}

/// Untied model whose output layer is all zeros, so every step is uniform.
pub fn uniform_model(vocab: usize) -> Model {
    let mut m = Model::new(ModelConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ff_dim: 16,
        max_len: 32,
        tie_embeddings: false,
        ..ModelConfig::new(vocab)
    })
    .unwrap();
    let names: Vec<String> = m.param_names().to_vec();
    for (name, p) in names.iter().zip(m.params_mut()) {
        if name.starts_with("lm_head") {
            p.data.iter_mut().for_each(|x| *x = 0.0);
        }
    }
    m
}

pub fn random_pairs(n: usize, vocab: usize, rng: &mut impl Rng) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    (0..n)
        .map(|_| {
            let src = (0..rng.gen_range(1..8)).map(|_| rng.gen_range(NUM_SPECIALS..vocab)).collect();
            let mut tgt: Vec<TokenId> = (0..rng.gen_range(1..6)).map(|_| rng.gen_range(NUM_SPECIALS..vocab)).collect();
            tgt.push(EOS);
            (src, tgt)
        })
        .collect()
}

/// Perplexity after overfitting a small model to a handful of pairs.
pub fn memorized_ppl(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = 40;
    let pairs = random_pairs(6, vocab, &mut rng);
    let mut m = Model::new(ModelConfig { d_model: 32, layers: 1, heads: 2, ff_dim: 64, max_len: 32, seed, ..ModelConfig::new(vocab) })
        .unwrap();
    let data: Vec<TrainExample> = pairs.iter().map(|(s, t)| TrainExample::new(s.clone(), t.clone())).collect();
    train(&mut m, &data, &TrainConfig { epochs: 300, batch_size: 6, lr: 5e-3, seed, ..TrainConfig::default() }).unwrap();
    corpus_ppl(&m, &pairs).unwrap()
}

/// Random model with a randomly filled classifier head.
pub fn director_model(vocab: usize, seed: u64) -> Model {
    let base = Model::new(ModelConfig { d_model: 16, layers: 1, heads: 2, ff_dim: 32, max_len: 32, seed, ..ModelConfig::new(vocab) })
        .unwrap();
    let mut m = base.with_classifier_head();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let names: Vec<String> = m.param_names().to_vec();
    for (name, p) in names.iter().zip(m.params_mut()) {
        if name.starts_with("cls_head") {
            p.data.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
        }
    }
    m
}

/// Greedy and beam outputs with Director guidance at γ=0 against plain LM
/// decoding. Returns the number of contexts that differed.
pub fn gamma_zero_mismatches(contexts: usize, seed: u64) -> usize {
    let vocab = 40;
    let m = director_model(vocab, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for (src, _) in random_pairs(contexts, vocab, &mut rng) {
        for cfg in [DecodeConfig::greedy(8), DecodeConfig::beam(4, 8)] {
            let plain = generate(&ModelStepper::new(&m, &src, None), &cfg);
            let guided = generate(&ModelStepper::new(&m, &src, Some(DirectorGuidance { gamma: 0.0 })), &cfg);
            let same = plain.len() == guided.len()
                && plain.iter().zip(&guided).all(|(a, b)| a.tokens == b.tokens && (a.log_prob - b.log_prob).abs() < 1e-9);
            if !same {
                bad += 1;
                break;
            }
        }
    }
    bad
}

/// Scores candidates from a fixed table.
pub struct TableScorer(pub HashMap<String, f64>);

impl CandidateScorer for TableScorer {
    fn score(&self, _: &[Turn], response: &str) -> f64 {
        self.0.get(response).copied().unwrap_or(f64::NEG_INFINITY)
    }
}

/// Candidate sets with random scores (ties included) where `rerank` disagrees
/// with a first-maximum scan.
pub fn rerank_mismatches(sets: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..sets {
        let n = rng.gen_range(1..10);
        let cands: Vec<String> = (0..n).map(|i| format!("candidate {i}")).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64).collect();
        let scorer = TableScorer(cands.iter().cloned().zip(scores.iter().copied()).collect());
        let mut best = 0;
        for i in 1..n {
            if scores[i] > scores[best] {
                best = i;
            }
        }
        if rerank(&scorer, &[], &cands).ok() != Some(best) {
            bad += 1;
        }
    }
    bad
}

mod common;

use std::collections::HashMap;
use std::sync::Arc;

use common::*;
use fits_core::bots::Encoder;
use fits_core::data::Turn;
use fits_core::learners::{reward_based_learning, train_reward_model, RewardContext};
use fits_core::model::{DecodeConfig, Model, ModelConfig, TrainConfig};
use fits_core::simulator::{generate_world, World, WorldSpec};

fn world() -> World {
    generate_world(&WorldSpec { n_entities: 12, pretrain_entities: 2, n_tasks: 24, ..WorldSpec::default() }).unwrap().0
}

/// Gold responses are satisfactory, the hedge is not.
fn toy(world: &World, flip: bool) -> Vec<(Vec<Turn>, String, bool)> {
    let mut out = Vec::new();
    for t in &world.truths {
        let ctx = vec![Turn::human(format!("what is the {} of {}", t.relation, t.entity))];
        out.push((ctx.clone(), t.gold_response.clone(), !flip));
        out.push((ctx, "i do not know .".to_string(), flip));
    }
    out
}

fn small(vocab: usize) -> ModelConfig {
    ModelConfig { d_model: 16, layers: 1, heads: 2, ff_dim: 32, max_len: 64, ..ModelConfig::new(vocab) }
}

fn cfg() -> TrainConfig {
    TrainConfig { epochs: 20, lr: 3e-3, ..TrainConfig::default() }
}

#[test]
fn reward_model_separates_toy_set() {
    let w = world();
    let vocab = Arc::new(w.vocab().unwrap());
    let enc = Encoder::new(vocab.clone(), 64);
    let data = toy(&w, false);
    let rm = train_reward_model(&data, enc.clone(), small(vocab.len()), &cfg()).unwrap();
    let correct = data.iter().filter(|(c, r, y)| (rm.prob(c, r) > 0.5) == *y).count();
    assert!(correct as f64 / data.len() as f64 >= 0.99, "{correct}/{}", data.len());

    let flipped = train_reward_model(&toy(&w, true), enc, small(vocab.len()), &cfg()).unwrap();
    let mut gap = 0.0;
    for (c, r, _) in &data {
        gap += (rm.prob(c, r) + flipped.prob(c, r) - 1.0).abs();
    }
    assert!(gap / (data.len() as f64) < 0.1, "{}", gap / data.len() as f64);
}

#[test]
fn reward_model_needs_both_labels() {
    let w = world();
    let vocab = Arc::new(w.vocab().unwrap());
    let only_pos: Vec<_> = toy(&w, false).into_iter().filter(|e| e.2).collect();
    assert!(train_reward_model(&only_pos, Encoder::new(vocab.clone(), 64), small(vocab.len()), &cfg()).is_err());
}

#[test]
fn rerank_picks_first_maximum() {
    assert_eq!(rerank_mismatches(200, 5), 0);
    let scorer = TableScorer(HashMap::new());
    assert!(fits_core::learners::rerank(&scorer, &[], &[]).is_err());
}

#[test]
fn reward_based_learning_moves_toward_winners() {
    let w = world();
    let vocab = Arc::new(w.vocab().unwrap());
    let enc = Encoder::new(vocab.clone(), 64);
    let mut model = Model::new(ModelConfig { seed: 3, ..small(vocab.len()) }).unwrap();
    let contexts: Vec<RewardContext> = w
        .truths
        .iter()
        .take(8)
        .map(|t| {
            let turns = vec![Turn::human(format!("tell me about {}", t.entity))];
            RewardContext { src: enc.response_input_plain(&turns), turns }
        })
        .collect();
    // Prefers the shortest candidate.
    struct Short;
    impl fits_core::bots::CandidateScorer for Short {
        fn score(&self, _: &[Turn], r: &str) -> f64 {
            -(r.len() as f64)
        }
    }
    let before = model.clone();
    let decode = DecodeConfig::beam(4, 6);
    let (winners, report) =
        reward_based_learning(&mut model, &Short, &contexts, &decode, &enc, &TrainConfig { epochs: 10, lr: 3e-3, ..TrainConfig::default() })
            .unwrap();
    assert_eq!(winners.len(), contexts.len());
    assert!(report.final_loss().is_some());
    let nll = |m: &Model| -> f64 {
        contexts.iter().zip(&winners).map(|(c, win)| m.nll(&c.src, &enc.target(win)).unwrap().0).sum()
    };
    assert!(nll(&model) < nll(&before));
}

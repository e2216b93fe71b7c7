//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use fits_core::bots::{Bot, BotConfig, BotKind, Encoder, K2RBundle};
use fits_core::data::Turn;
use fits_core::model::{Model, ModelConfig, TrainExample};
use fits_core::simulator::{generate_world, World, WorldSpec};
use fits_core::text::Vocab;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct Fixture {
    pub world: World,
    pub vocab: Arc<Vocab>,
    pub model: Model,
    pub examples: Vec<TrainExample>,
}

/// Default-sized world and an untrained model of the experiment shape.
pub fn fixture() -> Fixture {
    let (world, _) = generate_world(&WorldSpec::default()).expect("world");
    let vocab = Arc::new(world.vocab().expect("vocab"));
    let config = ModelConfig { d_model: 48, layers: 2, heads: 2, ff_dim: 96, max_len: 64, ..ModelConfig::new(vocab.len()) };
    let model = Model::new(config).expect("model");
    let enc = Encoder::new(vocab.clone(), 64);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let examples = world
        .pretrain
        .iter()
        .take(32)
        .map(|t| TrainExample::new(enc.query_input(&[Turn::human(t.question(false, &mut rng))]), enc.target(&t.gold_query)))
        .collect();
    Fixture { world, vocab, model, examples }
}

impl Fixture {
    pub fn bot(&self, kind: BotKind) -> Bot {
        let index = Arc::new(self.world.index().expect("index"));
        let m = || self.model.clone();
        let models = match kind {
            BotKind::NoSearch => K2RBundle::separate(None, None, m()),
            _ => K2RBundle::separate(Some(m()), Some(m()), m()),
        };
        Bot::new(kind, models, index, self.vocab.clone(), BotConfig::default()).expect("bot")
    }
}

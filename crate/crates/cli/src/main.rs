use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fits_cli::service::{self, AppState, ServiceConfig};
use fits_core::bots::BotKind;
use fits_core::data::{dataset_stats, load_fits, save_fits, Dataset, FeedbackChoice, Speaker, Split, Stats};
use fits_core::experiment::{
    add_text_metrics, pretrain, run_confidence_experiment, run_experiment, ConfidenceConfig, ExperimentConfig,
    PretrainConfig,
};
use fits_core::learners::{judged_turns, learn, InputBuilder, LearnContext, LearnerSpec};
use fits_core::metrics::{corpus_ppl, feedback_report, RareVocab};
use fits_core::model::{grad_check, Model, ModelConfig, TrainConfig, TrainExample};
use fits_core::package::BotPackage;
use fits_core::protocol::Budget;
use fits_core::retrieval::{load_corpus, Bm25Params, Index};
use fits_core::text::TokenId;
use fits_core::simulator::{generate_world, run_round, RoundConfig, ScriptedAnnotator, ScriptedHuman, World, WorldSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Dialogue bots that learn from deployment feedback.
#[derive(Parser)]
#[command(name = "fits", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world: corpus, tasks and ground truth.
    GenWorld(GenWorldArgs),
    /// Build the search index over a corpus and optionally run a query.
    Index(IndexArgs),
    /// Pretrain a baseline bot on the world's pretraining facts.
    Train(TrainArgs),
    /// Fine-tune a bot on collected feedback.
    Learn(LearnArgs),
    /// Deploy a bot against the scripted human and write FITS data.
    Simulate(SimulateArgs),
    /// Run the full deploy / learn / redeploy experiment.
    Experiment(ExperimentArgs),
    /// Evaluate a bot on fresh simulated dialogues.
    Eval(EvalArgs),
    /// Summarize FITS files.
    Stats(StatsArgs),
    /// Serve live sessions over HTTP.
    Serve(ServeArgs),
    /// Compare analytic and numeric gradients on a small model.
    Gradcheck(GradcheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    NoSearch,
    Fusion,
    Modular,
}

impl From<KindArg> for BotKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::NoSearch => BotKind::NoSearch,
            KindArg::Fusion => BotKind::Fusion,
            KindArg::Modular => BotKind::Modular,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
    TestUnseen,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
            SplitArg::TestUnseen => Split::TestUnseen,
        }
    }
}

#[derive(Args)]
struct BudgetArgs {
    /// Turn budget per dialogue.
    #[arg(long, default_value_t = 8)]
    budget: usize,
    /// Count every bot turn, or only turns judged unsatisfactory.
    #[arg(long, value_enum, default_value = "turns")]
    budget_mode: BudgetMode,
}

#[derive(Clone, Copy, ValueEnum)]
enum BudgetMode {
    Turns,
    Corrections,
}

impl BudgetArgs {
    fn budget(&self) -> Budget {
        match self.budget_mode {
            BudgetMode::Turns => Budget::BotTurns(self.budget),
            BudgetMode::Corrections => Budget::CorrectionCycles(self.budget),
        }
    }
}

#[derive(Args)]
struct GenWorldArgs {
    #[arg(long)]
    out: PathBuf,
    /// JSON world spec; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    entities: Option<usize>,
    #[arg(long)]
    relations: Option<usize>,
    #[arg(long)]
    tasks: Option<usize>,
    #[arg(long)]
    pretrain_entities: Option<usize>,
    #[arg(long)]
    paraphrase_rate: Option<f64>,
    #[arg(long)]
    distractor_rate: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct IndexArgs {
    /// World directory.
    #[arg(long, conflicts_with = "corpus")]
    world: Option<PathBuf>,
    /// Corpus JSONL.
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    query: Option<String>,
    #[arg(short, long, default_value_t = 3)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    world: PathBuf,
    /// Output bot directory.
    #[arg(long)]
    out: PathBuf,
    /// JSON pretraining config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    kind: Option<KindArg>,
    /// One model for every module.
    #[arg(long)]
    shared: bool,
    /// Train with corrupted knowledge and confidence tokens.
    #[arg(long)]
    confidence: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    contexts_per_fact: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct LearnArgs {
    #[arg(long)]
    world: PathBuf,
    /// Bot directory to start from.
    #[arg(long)]
    bot: PathBuf,
    /// FITS files with feedback; merged in order.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    /// supervised, module, freeform, rerank, reward, director-binary or director-module.
    #[arg(long)]
    learner: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    bot: PathBuf,
    /// Output FITS file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    dialogues: usize,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
    #[arg(long, default_value = "v1")]
    version: String,
    /// Confidence token for modular bots.
    #[arg(long)]
    confidence: Option<u8>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ExperimentArgs {
    /// `demo`, `default`, `confidence`, or a JSON config file.
    #[arg(long, default_value = "demo")]
    config: String,
    /// Output directory for reports and FITS files.
    #[arg(long, default_value = "experiment-out")]
    out: PathBuf,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    bot: PathBuf,
    #[arg(long, default_value_t = 100)]
    dialogues: usize,
    #[command(flatten)]
    budget: BudgetArgs,
    /// FITS file whose corrected turns are scored for perplexity.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    rare_cutoff: usize,
    #[arg(long)]
    confidence: Option<u8>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(required = true)]
    files: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    bot: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// FITS file completed conversations are appended to.
    #[arg(long, default_value = "live.fits.jsonl")]
    out: PathBuf,
    /// Where live sessions are snapshotted.
    #[arg(long)]
    snapshot: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    snapshot_secs: u64,
    #[command(flatten)]
    budget: BudgetArgs,
    #[arg(long, default_value = "live")]
    version: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fail if the max relative error reaches this.
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn read_json<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn load_world(dir: &Path) -> Result<World> {
    World::load(dir).with_context(|| format!("loading world from {}", dir.display()))
}

fn load_bot(dir: &Path) -> Result<BotPackage> {
    BotPackage::load(dir).with_context(|| format!("loading bot from {}", dir.display()))
}

fn gen_world(a: GenWorldArgs) -> Result<()> {
    let mut spec: WorldSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => WorldSpec::default(),
    };
    spec.seed = a.seed;
    spec.n_entities = a.entities.unwrap_or(spec.n_entities);
    spec.n_relations = a.relations.unwrap_or(spec.n_relations);
    spec.n_tasks = a.tasks.unwrap_or(spec.n_tasks);
    spec.pretrain_entities = a.pretrain_entities.unwrap_or(spec.pretrain_entities);
    spec.paraphrase_rate = a.paraphrase_rate.unwrap_or(spec.paraphrase_rate);
    spec.distractor_rate = a.distractor_rate.unwrap_or(spec.distractor_rate);
    let (world, audit) = generate_world(&spec)?;
    world.save(&a.out)?;
    print_json(&serde_json::json!({
        "out": a.out,
        "documents": world.corpus.len(),
        "tasks": world.tasks.len(),
        "pretrain_facts": world.pretrain.len(),
        "audit": audit,
    }))
}

fn index(a: IndexArgs) -> Result<()> {
    let docs = match (&a.world, &a.corpus) {
        (Some(w), None) => load_world(w)?.corpus,
        (None, Some(c)) => load_corpus(c)?,
        _ => bail!("give --world or --corpus"),
    };
    let index = Index::build(docs, Bm25Params::default())?;
    let results = a.query.as_deref().map(|q| index.search(q, a.k));
    print_json(&serde_json::json!({ "documents": index.len(), "results": results }))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let world = load_world(&a.world)?;
    let mut cfg: PretrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => PretrainConfig::default(),
    };
    if let Some(k) = a.kind {
        cfg.kind = k.into();
    }
    cfg.shared |= a.shared;
    cfg.confidence |= a.confidence;
    cfg.train.epochs = a.epochs.unwrap_or(cfg.train.epochs);
    cfg.train.lr = a.lr.unwrap_or(cfg.train.lr);
    cfg.contexts_per_fact = a.contexts_per_fact.unwrap_or(cfg.contexts_per_fact);
    let p = pretrain(&world, &cfg, a.seed)?;
    BotPackage::from_pretrained(&p).save(&a.out)?;
    print_json(&serde_json::json!({
        "out": a.out,
        "kind": p.kind,
        "params": p.models.response.num_params(),
        "seconds": p.seconds,
    }))
}

fn load_datasets(paths: &[PathBuf]) -> Result<Dataset> {
    let mut merged: Option<Dataset> = None;
    for p in paths {
        let ds = load_fits(p).with_context(|| format!("loading {}", p.display()))?;
        merged = Some(match merged {
            Some(m) => m.union(&ds)?,
            None => ds,
        });
    }
    merged.context("no data")
}

fn learn_cmd(a: LearnArgs) -> Result<()> {
    let world = load_world(&a.world)?;
    let base = load_bot(&a.bot)?;
    let spec = LearnerSpec::parse(&a.learner)?;
    let ds = load_datasets(&a.data)?;
    let index = world.index()?;
    let encoder = base.encoder();
    let ctx = LearnContext {
        builder: InputBuilder { kind: base.kind, encoder: &encoder, index: &index, confidence: None },
        train: TrainConfig { epochs: a.epochs, lr: a.lr, seed: a.seed, ..TrainConfig::default() },
        replay: &base.replay,
        reward_config: ModelConfig { has_classifier_head: true, seed: a.seed, ..base.models.response.config.clone() },
    };
    let learned = learn(&spec, &base.models, &ds, &ctx)?;
    BotPackage::from_learned(&base, &learned).save(&a.out)?;
    print_json(&serde_json::json!({
        "out": a.out,
        "learner": spec.name(),
        "judged_turns": judged_turns(&ds).count(),
    }))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let world = load_world(&a.world)?;
    let mut pkg = load_bot(&a.bot)?;
    pkg.config.confidence = a.confidence.or(pkg.config.confidence);
    let bot = pkg.bot(Arc::new(world.index()?))?;
    let annotator = ScriptedAnnotator::new(&world.truths);
    let human = ScriptedHuman::for_world(&world.spec);
    let ids: Vec<String> = world.tasks.iter().map(|t| t.id.clone()).collect();
    let rc = RoundConfig {
        n_dialogues: a.dialogues,
        budget: a.budget.budget(),
        seed: a.seed,
        version: a.version,
        split: a.split.into(),
    };
    let ds = run_round(&bot, &annotator, &human, &ids, &rc)?;
    save_fits(&ds, &a.out)?;
    print_json(&feedback_report(&ds))
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    std::fs::create_dir_all(&a.out)?;
    if a.config == "confidence" {
        let mut reports = Vec::new();
        for seed in a.seed..a.seed + a.seeds {
            let r = run_confidence_experiment(&ConfidenceConfig { seed, ..ConfidenceConfig::default() })?;
            eprintln!("seed {seed}: GAP {:?} in {:.0}s", r.gap, r.seconds);
            reports.push(r);
        }
        std::fs::write(a.out.join("confidence.json"), serde_json::to_vec_pretty(&reports)?)?;
        return print_json(&reports);
    }
    let base: ExperimentConfig = match a.config.as_str() {
        "demo" => ExperimentConfig::demo(),
        "default" => ExperimentConfig::default(),
        path => read_json(Path::new(path))?,
    };
    // One world and one pretrained baseline serve every seed.
    let (world, _) = generate_world(&base.world)?;
    let pretrained = pretrain(&world, &base.pretrain, a.seed)?;
    let mut summaries = Vec::new();
    for seed in a.seed..a.seed + a.seeds {
        let cfg = ExperimentConfig { seed, ..base.clone() };
        let r = run_experiment(&cfg, Some(&pretrained))?;
        let dir = a.out.join(format!("seed-{seed}"));
        std::fs::create_dir_all(&dir)?;
        for ds in &r.datasets {
            let split = serde_json::to_value(ds.split)?;
            let name = format!("{}-{}.fits.jsonl", ds.version, split.as_str().unwrap_or("data"));
            save_fits(ds, &dir.join(name))?;
        }
        std::fs::write(dir.join("reports.json"), serde_json::to_vec_pretty(&r.reports)?)?;
        for e in &r.reports {
            eprintln!(
                "seed {seed} {:<16} round {} good {:5.1}% (seen) {:5.1}% (unseen) f1 {:.3}",
                e.name,
                e.round,
                e.seen.model_good_pct,
                e.unseen.model_good_pct,
                e.unseen.f1.unwrap_or(0.0)
            );
        }
        summaries.push(serde_json::json!({ "seed": seed, "seconds": r.seconds, "reports": r.reports }));
    }
    std::fs::write(a.out.join("config.json"), serde_json::to_vec_pretty(&base)?)?;
    print_json(&summaries)
}

/// Corrected turns of `ds` as response-model examples: the bot's own text
/// when judged good, the gold response when one was given.
fn correction_pairs(ds: &Dataset, builder: &InputBuilder) -> Vec<(Vec<TokenId>, Vec<TokenId>)> {
    let mut pairs = Vec::new();
    for c in &ds.conversations {
        for (i, t) in c.turns.iter().enumerate() {
            if t.speaker != Speaker::Bot || t.overridden {
                continue;
            }
            let Some(fb) = &t.feedback else { continue };
            let target = match fb.choice {
                FeedbackChoice::GoodResponse => Some(t.text.as_str()),
                _ => fb.gold_response.as_deref(),
            };
            if let Some(target) = target {
                pairs.push((builder.response_input(&c.turns[..i], t), builder.encoder.target(target)));
            }
        }
    }
    pairs
}

fn eval(a: EvalArgs) -> Result<()> {
    let world = load_world(&a.world)?;
    let mut pkg = load_bot(&a.bot)?;
    pkg.config.confidence = a.confidence.or(pkg.config.confidence);
    let index = Arc::new(world.index()?);
    let bot = pkg.bot(index.clone())?;
    let annotator = ScriptedAnnotator::new(&world.truths);
    let human = ScriptedHuman::for_world(&world.spec);
    let ids: Vec<String> = world.tasks.iter().map(|t| t.id.clone()).collect();
    let rc = RoundConfig {
        n_dialogues: a.dialogues,
        budget: a.budget.budget(),
        seed: a.seed,
        version: "eval".into(),
        split: Split::Test,
    };
    let ds = run_round(&bot, &annotator, &human, &ids, &rc)?;
    let mut report = feedback_report(&ds);
    add_text_metrics(&mut report, &ds, &annotator, &RareVocab::from_vocab(&pkg.vocab, a.rare_cutoff));
    let ppl = match &a.data {
        Some(p) => {
            let data = load_fits(p)?;
            let encoder = pkg.encoder();
            let builder = InputBuilder { kind: pkg.kind, encoder: &encoder, index: &index, confidence: pkg.config.confidence };
            let pairs = correction_pairs(&data, &builder);
            if pairs.is_empty() { None } else { Some(corpus_ppl(&pkg.models.response, &pairs)?) }
        }
        None => None,
    };
    print_json(&serde_json::json!({ "report": report, "perplexity": ppl }))
}

fn stats(a: StatsArgs) -> Result<()> {
    let mut total: Option<Stats> = None;
    let mut files = Vec::new();
    for p in &a.files {
        let ds = load_fits(p).with_context(|| format!("loading {}", p.display()))?;
        let s = dataset_stats(&ds);
        total = Some(match total {
            Some(t) => t.combine(&s),
            None => s.clone(),
        });
        files.push(serde_json::json!({ "file": p, "stats": s, "report": feedback_report(&ds) }));
    }
    print_json(&serde_json::json!({ "files": files, "total": total }))
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = ServiceConfig {
        bind: a.bind,
        world: a.world,
        bot: a.bot,
        budget: a.budget.budget(),
        out: a.out,
        snapshot: a.snapshot,
        snapshot_every: Duration::from_secs(a.snapshot_secs.max(1)),
        version: a.version,
        seed: a.seed,
    };
    cfg.validate()?;
    let world = load_world(&cfg.world)?;
    let bot = load_bot(&cfg.bot)?.bot(Arc::new(world.index()?))?;
    let state = Arc::new(AppState::new(world.tasks, Arc::new(bot), cfg.budget, cfg.out.clone(), cfg.version.clone(), cfg.seed));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(state, &cfg))
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let config = ModelConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ff_dim: 16,
        max_len: 16,
        has_classifier_head: true,
        seed: a.seed,
        ..ModelConfig::new(40)
    };
    let mut model = Model::new(config)?;
    // Perturb the zero-initialized classifier so its gradients are exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    for p in model.params_mut() {
        for x in p.data.iter_mut() {
            *x += rng.gen_range(-0.05..0.05);
        }
    }
    let src: Vec<TokenId> = (0..6).map(|_| rng.gen_range(21..40)).collect();
    let mut tgt: Vec<TokenId> = (0..4).map(|_| rng.gen_range(21..40)).collect();
    tgt.push(2);
    let ex = TrainExample::labelled(src, tgt, true);
    let report = grad_check(&model, &ex, a.seed);
    print_json(&serde_json::json!({ "params": model.num_params(), "report": report }))?;
    if report.max_rel_error >= a.tolerance {
        bail!("max relative error {} >= {}", report.max_rel_error, a.tolerance);
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenWorld(a) => gen_world(a),
        Command::Index(a) => index(a),
        Command::Train(a) => train_cmd(a),
        Command::Learn(a) => learn_cmd(a),
        Command::Simulate(a) => simulate(a),
        Command::Experiment(a) => experiment(a),
        Command::Eval(a) => eval(a),
        Command::Stats(a) => stats(a),
        Command::Serve(a) => serve(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

//! Synthetic worlds, a scripted annotator and closed-loop deployment rounds.

mod world;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bots::{BotTurnOutput, Responder};
use crate::data::{Conversation, Dataset, FeedbackChoice, FeedbackRecord, IdGen, Split};
use crate::error::{Error, Result};
use crate::metrics::answer_present;
use crate::protocol::{Budget, ProtocolConfig, SessionState, Termination};

pub use world::{generate_world, TaskTruth, World, WorldAudit, WorldSpec};
pub(crate) use world::{FOLLOW_UPS, SMALL_TALK};

/// Judges bot turns against a world's ground truth.
#[derive(Clone, Debug)]
pub struct ScriptedAnnotator {
    truths: HashMap<String, TaskTruth>,
    /// Attach a free-form complaint to unsatisfactory turns.
    pub freeform: bool,
}

impl ScriptedAnnotator {
    pub fn new(truths: &[TaskTruth]) -> Self {
        ScriptedAnnotator { truths: truths.iter().map(|t| (t.task_id.clone(), t.clone())).collect(), freeform: true }
    }

    pub fn truth(&self, task_id: &str) -> Result<&TaskTruth> {
        self.truths.get(task_id).ok_or_else(|| Error::NotFound(format!("task {task_id}")))
    }

    /// First matching rule wins: answer present, wrong query, gold document
    /// missing or predicted knowledge lacking the answer, anything else.
    /// Turns without a search skip the two middle rules.
    pub fn annotate(&self, task_id: &str, turn: &BotTurnOutput) -> Result<FeedbackRecord> {
        let t = self.truth(task_id)?;
        let record = if answer_present(&turn.response, &t.gold_answer) {
            FeedbackRecord::good()
        } else {
            let searched = turn.executed_query.as_deref();
            let retrieved_gold = turn.retrieved.as_ref().is_some_and(|ids| ids.contains(&t.doc_id));
            let knowledge_ok = turn.knowledge.as_deref().is_none_or(|k| answer_present(k, &t.gold_answer));
            match searched {
                Some(q) if q != t.gold_query => FeedbackRecord::better_query(&t.gold_query),
                Some(_) if !retrieved_gold || !knowledge_ok => FeedbackRecord::better_results(&t.gold_knowledge),
                _ => FeedbackRecord::other_issue(&t.gold_response),
            }
        };
        Ok(match (self.freeform, record.choice) {
            (true, FeedbackChoice::GoodResponse) => record.with_freeform("thanks , that is right"),
            (true, _) => record.with_freeform(t.complaint()),
            (false, _) => record,
        })
    }
}

/// 5 when a good response ended the dialogue before the budget ran out,
/// otherwise `1 + round(4 * good fraction)` over bot turns.
pub fn rating_rubric(conv: &Conversation, terminated: Option<Termination>) -> u8 {
    let (good, total) = conv.bot_turns().fold((0usize, 0usize), |(g, n), t| {
        let ok = t.feedback.as_ref().is_some_and(|f| f.choice == FeedbackChoice::GoodResponse);
        (g + usize::from(ok), n + 1)
    });
    if good > 0 && terminated != Some(Termination::TurnBudget) {
        return 5;
    }
    if total == 0 {
        return 1;
    }
    1 + (4.0 * good as f64 / total as f64).round() as u8
}

/// Scripted human messages for one dialogue.
#[derive(Clone, Debug)]
pub struct ScriptedHuman {
    pub paraphrase_rate: f64,
    pub distractor_rate: f64,
    /// Chance that a distractor pair includes the true value.
    pub distractor_true_rate: f64,
    pub small_talk_rate: f64,
}

impl ScriptedHuman {
    pub fn for_world(spec: &WorldSpec) -> Self {
        ScriptedHuman {
            paraphrase_rate: spec.paraphrase_rate,
            distractor_rate: spec.distractor_rate,
            distractor_true_rate: 0.3,
            small_talk_rate: 0.0,
        }
    }

    pub fn opening(&self, t: &TaskTruth, rng: &mut impl Rng) -> String {
        let q = t.question(rng.gen::<f64>() < self.paraphrase_rate, rng);
        let mut msg = String::new();
        if rng.gen::<f64>() < self.small_talk_rate {
            msg.push_str(SMALL_TALK[rng.gen_range(0..SMALL_TALK.len())]);
            msg.push(' ');
        }
        if rng.gen::<f64>() < self.distractor_rate {
            let [a, b] = t.distractors(self.distractor_true_rate, rng);
            msg.push_str(&format!("i like {a} and {b} . "));
        }
        msg.push_str(&q);
        msg
    }

    pub fn follow_up(&self, t: &TaskTruth, rng: &mut impl Rng) -> String {
        let lead = FOLLOW_UPS[rng.gen_range(0..FOLLOW_UPS.len())];
        format!("{lead} {}", t.question(rng.gen::<f64>() < self.paraphrase_rate, rng))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub n_dialogues: usize,
    pub budget: Budget,
    pub seed: u64,
    pub version: String,
    pub split: Split,
}

impl Default for RoundConfig {
    fn default() -> Self {
        RoundConfig { n_dialogues: 100, budget: Budget::default(), seed: 0, version: "v1".into(), split: Split::Train }
    }
}

/// Runs `n_dialogues` sessions, cycling through `task_ids` in order.
/// Each session ends at the first good response or when the budget runs
/// out, and is completed with a rubric rating.
pub fn run_round(
    bot: &dyn Responder,
    annotator: &ScriptedAnnotator,
    human: &ScriptedHuman,
    task_ids: &[String],
    cfg: &RoundConfig,
) -> Result<Dataset> {
    if task_ids.is_empty() {
        return Err(Error::invalid("task_ids", "empty"));
    }
    let mut ds = Dataset::new(cfg.version.clone(), cfg.split);
    let mut ids = IdGen::seeded(cfg.seed);
    let protocol = ProtocolConfig { budget: cfg.budget, require_feedback: true };
    for i in 0..cfg.n_dialogues {
        let truth = annotator.truth(&task_ids[i % task_ids.len()])?;
        let task = truth.task_definition();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut s = SessionState::new(task.clone(), ids.next_id(), protocol)?;
        let mut first = true;
        while !s.is_terminated() {
            let msg = if first { human.opening(truth, &mut rng) } else { human.follow_up(truth, &mut rng) };
            first = false;
            s.human_message(&msg)?;
            let out = s.bot_step(bot)?;
            let fb = annotator.annotate(&truth.task_id, &out)?;
            let good = fb.choice == FeedbackChoice::GoodResponse;
            s.give_feedback(fb)?;
            if good {
                break;
            }
        }
        let rating = rating_rubric(&s.conversation, s.terminated);
        let conv = s.complete(rating)?;
        if ds.task(&task.id).is_none() {
            ds.add_task(task);
        }
        ds.conversations.push(conv);
    }
    Ok(ds)
}

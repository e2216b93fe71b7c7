//! Deployment session state machine: alternate human and bot turns, attach
//! one feedback record per bot turn, carry gold overrides into the next bot
//! turn, and stop on completion or budget exhaustion.

use serde::{Deserialize, Serialize};

use crate::bots::{BotTurnOutput, Overrides, Responder};
use crate::data::{Conversation, FeedbackChoice, FeedbackRecord, Speaker, TaskDefinition, Turn};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Completed,
    TurnBudget,
}

/// When a session runs out of turns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    /// Stop once this many bot turns have received feedback.
    BotTurns(usize),
    /// Stop once this many bot turns were judged unsatisfactory.
    CorrectionCycles(usize),
}

impl Default for Budget {
    fn default() -> Self {
        Budget::BotTurns(8)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub budget: Budget,
    /// When false, a bot turn left without feedback counts as a good response
    /// once the session moves on.
    pub require_feedback: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig { budget: Budget::default(), require_feedback: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub task: TaskDefinition,
    pub conversation: Conversation,
    pub pending: Overrides,
    pub bot_turns: usize,
    pub corrections: usize,
    pub terminated: Option<Termination>,
    pub config: ProtocolConfig,
}

/// Starts a session for `task_id`, which must be one of `tasks`.
pub fn start_session(tasks: &[TaskDefinition], task_id: &str, id: String, config: ProtocolConfig) -> Result<SessionState> {
    let task = tasks.iter().find(|t| t.id == task_id).ok_or_else(|| Error::NotFound(format!("task {task_id}")))?;
    SessionState::new(task.clone(), id, config)
}

impl SessionState {
    pub fn new(task: TaskDefinition, id: String, config: ProtocolConfig) -> Result<Self> {
        task.validate()?;
        match config.budget {
            Budget::BotTurns(0) | Budget::CorrectionCycles(0) => return Err(Error::Config("budget must be >= 1".into())),
            _ => {}
        }
        let conversation = Conversation { id, task: task.id.clone(), turns: Vec::new(), completed: false, rating: None };
        Ok(SessionState {
            task,
            conversation,
            pending: Overrides::default(),
            bot_turns: 0,
            corrections: 0,
            terminated: None,
            config,
        })
    }

    pub fn is_terminated(&self) -> bool {
        self.terminated.is_some()
    }

    fn ensure_live(&self) -> Result<()> {
        match self.terminated {
            Some(t) => Err(Error::Protocol(format!("session terminated ({t:?})"))),
            None => Ok(()),
        }
    }

    fn last_bot_without_feedback(&self) -> bool {
        self.conversation.turns.last().is_some_and(|t| t.speaker == Speaker::Bot && t.feedback.is_none())
    }

    /// In lenient mode, fills a missing record on the latest bot turn.
    fn settle_feedback(&mut self) -> Result<()> {
        if self.last_bot_without_feedback() {
            if self.config.require_feedback {
                return Err(Error::Protocol("latest bot turn needs feedback first".into()));
            }
            self.give_feedback(FeedbackRecord::good())?;
        }
        Ok(())
    }

    pub fn human_message(&mut self, text: &str) -> Result<()> {
        self.ensure_live()?;
        if self.conversation.turns.last().is_some_and(|t| t.speaker == Speaker::Human) {
            return Err(Error::Protocol("two human messages in a row".into()));
        }
        self.settle_feedback()?;
        // Lenient feedback can exhaust the budget.
        self.ensure_live()?;
        if text.trim().is_empty() {
            return Err(Error::invalid("text", "empty message"));
        }
        self.conversation.turns.push(Turn::human(text));
        Ok(())
    }

    /// Runs the bot with the pending overrides. A forced response bypasses
    /// the bot. On error the state is left untouched.
    pub fn bot_step(&mut self, bot: &dyn Responder) -> Result<BotTurnOutput> {
        self.ensure_live()?;
        if self.conversation.turns.last().map(|t| t.speaker) != Some(Speaker::Human) {
            return Err(Error::Protocol("bot turn requires a preceding human turn".into()));
        }
        let out = match &self.pending.forced_response {
            Some(r) => BotTurnOutput::forced(r),
            None => bot.respond(&self.conversation.turns, &self.pending)?,
        };
        check_overrides_honored(&self.pending, &out)?;
        self.conversation.turns.push(out.to_turn());
        self.pending = Overrides::default();
        self.bot_turns += 1;
        Ok(out)
    }

    pub fn give_feedback(&mut self, record: FeedbackRecord) -> Result<()> {
        self.ensure_live()?;
        if !self.last_bot_without_feedback() {
            return Err(Error::Protocol("no bot turn awaiting feedback".into()));
        }
        record.validate()?;
        let pending = match record.choice {
            FeedbackChoice::BetterQuery => Overrides { forced_query: record.gold_query.clone(), ..Overrides::default() },
            FeedbackChoice::BetterResults => {
                Overrides { forced_knowledge: record.gold_knowledge.clone(), ..Overrides::default() }
            }
            FeedbackChoice::OtherIssue => Overrides { forced_response: record.gold_response.clone(), ..Overrides::default() },
            FeedbackChoice::GoodResponse => Overrides::default(),
        };
        if record.choice != FeedbackChoice::GoodResponse {
            self.corrections += 1;
        }
        self.conversation.turns.last_mut().expect("checked").feedback = Some(record);
        self.pending = pending;
        let exhausted = match self.config.budget {
            Budget::BotTurns(n) => self.bot_turns >= n,
            Budget::CorrectionCycles(n) => self.corrections >= n,
        };
        if exhausted {
            self.terminated = Some(Termination::TurnBudget);
        }
        Ok(())
    }

    /// Marks the dialogue completed with a 1..=5 rating and returns it. Allowed
    /// after budget termination but not twice.
    pub fn complete(&mut self, rating: u8) -> Result<Conversation> {
        if self.terminated == Some(Termination::Completed) {
            return Err(Error::Protocol("already completed".into()));
        }
        if !(1..=5).contains(&rating) {
            return Err(Error::invalid("rating", format!("{rating} not in 1..=5")));
        }
        if self.terminated.is_none() {
            self.settle_feedback()?;
        } else if self.last_bot_without_feedback() {
            return Err(Error::Protocol("latest bot turn needs feedback first".into()));
        }
        self.terminated = Some(Termination::Completed);
        self.pending = Overrides::default();
        self.conversation.completed = true;
        self.conversation.rating = Some(rating);
        Ok(self.conversation.clone())
    }
}

fn check_overrides_honored(pending: &Overrides, out: &BotTurnOutput) -> Result<()> {
    let bad = |what: &str| Err(Error::Protocol(format!("bot ignored forced {what}")));
    if let Some(q) = &pending.forced_query {
        if out.executed_query.as_deref() != Some(q.as_str()) {
            return bad("query");
        }
    }
    if let Some(k) = &pending.forced_knowledge {
        if out.knowledge.as_deref() != Some(k.as_str()) {
            return bad("knowledge");
        }
    }
    if let Some(r) = &pending.forced_response {
        if out.response != *r || !out.overridden {
            return bad("response");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> TaskDefinition {
        TaskDefinition {
            id: "t1".into(),
            topic: "cats".into(),
            task: "find a cat fact".into(),
            completion_description: "the bot states a fact".into(),
        }
    }

    /// Echoes overrides and otherwise answers "ok".
    struct Echo;

    impl Responder for Echo {
        fn respond(&self, _: &[Turn], o: &Overrides) -> Result<BotTurnOutput> {
            Ok(BotTurnOutput {
                response: "ok".into(),
                executed_query: Some(o.forced_query.clone().unwrap_or_else(|| "q".into())),
                knowledge: o.forced_knowledge.clone(),
                ..BotTurnOutput::default()
            })
        }
    }

    struct Failing;

    impl Responder for Failing {
        fn respond(&self, _: &[Turn], _: &Overrides) -> Result<BotTurnOutput> {
            Err(Error::Protocol("boom".into()))
        }
    }

    fn session(budget: Budget) -> SessionState {
        SessionState::new(task(), "c1".into(), ProtocolConfig { budget, require_feedback: true }).unwrap()
    }

    #[test]
    fn start_and_missing_task() {
        let s = session(Budget::default());
        assert_eq!((s.bot_turns, s.terminated), (0, None));
        assert!(start_session(&[task()], "nope", "c".into(), ProtocolConfig::default()).is_err());
    }

    #[test]
    fn alternation_is_enforced() {
        let mut s = session(Budget::default());
        assert!(s.bot_step(&Echo).is_err());
        s.human_message("hi").unwrap();
        assert!(s.human_message("again").is_err());
        s.bot_step(&Echo).unwrap();
        assert!(s.bot_step(&Echo).is_err());
        assert!(s.human_message("no feedback yet").is_err());
        s.give_feedback(FeedbackRecord::good()).unwrap();
        assert!(s.give_feedback(FeedbackRecord::good()).is_err());
        s.human_message("next").unwrap();
    }

    #[test]
    fn overrides_flow_into_next_turn_only() {
        let mut s = session(Budget::default());
        s.human_message("hi").unwrap();
        s.bot_step(&Echo).unwrap();
        s.give_feedback(FeedbackRecord::better_query("gold q")).unwrap();
        assert_eq!(s.pending.forced_query.as_deref(), Some("gold q"));
        s.human_message("try again").unwrap();
        let out = s.bot_step(&Echo).unwrap();
        assert_eq!(out.executed_query.as_deref(), Some("gold q"));
        assert!(s.pending.is_empty());
        s.give_feedback(FeedbackRecord::other_issue("say this")).unwrap();
        s.human_message("and?").unwrap();
        let out = s.bot_step(&Echo).unwrap();
        assert_eq!((out.response.as_str(), out.overridden), ("say this", true));
        s.give_feedback(FeedbackRecord::good()).unwrap();
        s.human_message("more").unwrap();
        assert_eq!(s.bot_step(&Echo).unwrap().executed_query.as_deref(), Some("q"));
    }

    #[test]
    fn bot_failure_leaves_state_untouched() {
        let mut s = session(Budget::default());
        s.human_message("hi").unwrap();
        let before = s.clone();
        assert!(s.bot_step(&Failing).is_err());
        assert_eq!(s, before);
    }

    #[test]
    fn ignored_override_is_an_error() {
        struct Stubborn;
        impl Responder for Stubborn {
            fn respond(&self, _: &[Turn], _: &Overrides) -> Result<BotTurnOutput> {
                Ok(BotTurnOutput { response: "x".into(), executed_query: Some("mine".into()), ..Default::default() })
            }
        }
        let mut s = session(Budget::default());
        s.human_message("hi").unwrap();
        s.bot_step(&Stubborn).unwrap();
        s.give_feedback(FeedbackRecord::better_query("gold")).unwrap();
        s.human_message("hi").unwrap();
        let before = s.clone();
        assert!(s.bot_step(&Stubborn).is_err());
        assert_eq!(s, before);
    }

    #[test]
    fn correction_budget_terminates_on_fourth_cycle() {
        let mut s = session(Budget::CorrectionCycles(4));
        for i in 0..4 {
            s.human_message("hi").unwrap();
            s.bot_step(&Echo).unwrap();
            assert!(!s.is_terminated());
            s.give_feedback(FeedbackRecord::other_issue(format!("r{i}"))).unwrap();
        }
        assert_eq!(s.terminated, Some(Termination::TurnBudget));
        assert!(s.human_message("more").is_err());
        let c = s.complete(2).unwrap();
        assert_eq!(c.rating, Some(2));
    }

    #[test]
    fn complete_rules() {
        let mut s = session(Budget::default());
        s.human_message("hi").unwrap();
        s.bot_step(&Echo).unwrap();
        assert!(s.complete(5).is_err());
        s.give_feedback(FeedbackRecord::good()).unwrap();
        assert!(s.complete(0).is_err());
        let c = s.complete(5).unwrap();
        assert!(c.completed);
        assert!(s.complete(5).is_err());
    }

    #[test]
    fn lenient_mode_defaults_to_good() {
        let mut s = SessionState::new(task(), "c".into(), ProtocolConfig { require_feedback: false, ..Default::default() })
            .unwrap();
        s.human_message("hi").unwrap();
        s.bot_step(&Echo).unwrap();
        s.human_message("hi").unwrap();
        assert_eq!(s.conversation.turns[1].feedback, Some(FeedbackRecord::good()));
        s.bot_step(&Echo).unwrap();
        let c = s.complete(4).unwrap();
        assert!(c.bot_turns().all(|t| t.feedback.is_some()));
    }
}

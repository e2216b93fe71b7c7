//! FITS data model: tasks, conversations with per-turn feedback, datasets,
//! JSONL persistence and summary statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ulid::Ulid;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDefinition {
    pub id: String,
    pub topic: String,
    pub task: String,
    pub completion_description: String,
}

impl TaskDefinition {
    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::invalid("task.id", "empty"));
        }
        let words = self.topic.split_whitespace().count();
        if !(1..=10).contains(&words) {
            return Err(Error::invalid("task.topic", format!("{words} words, expected 1-10")));
        }
        if self.task.trim().is_empty() {
            return Err(Error::invalid("task.task", "empty"));
        }
        if self.completion_description.trim().is_empty() {
            return Err(Error::invalid("task.completion_description", "empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackChoice {
    BetterQuery,
    BetterResults,
    OtherIssue,
    GoodResponse,
}

impl FeedbackChoice {
    pub const ALL: [FeedbackChoice; 4] =
        [FeedbackChoice::BetterQuery, FeedbackChoice::BetterResults, FeedbackChoice::OtherIssue, FeedbackChoice::GoodResponse];
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub binary_ok: bool,
    pub freeform: Option<String>,
    pub choice: FeedbackChoice,
    pub gold_query: Option<String>,
    pub gold_knowledge: Option<String>,
    pub gold_response: Option<String>,
}

impl FeedbackRecord {
    pub fn good() -> Self {
        FeedbackRecord {
            binary_ok: true,
            freeform: None,
            choice: FeedbackChoice::GoodResponse,
            gold_query: None,
            gold_knowledge: None,
            gold_response: None,
        }
    }

    pub fn better_query(query: impl Into<String>) -> Self {
        FeedbackRecord { gold_query: Some(query.into()), ..Self::bad(FeedbackChoice::BetterQuery) }
    }

    pub fn better_results(knowledge: impl Into<String>) -> Self {
        FeedbackRecord { gold_knowledge: Some(knowledge.into()), ..Self::bad(FeedbackChoice::BetterResults) }
    }

    pub fn other_issue(response: impl Into<String>) -> Self {
        FeedbackRecord { gold_response: Some(response.into()), ..Self::bad(FeedbackChoice::OtherIssue) }
    }

    fn bad(choice: FeedbackChoice) -> Self {
        FeedbackRecord { binary_ok: false, choice, ..Self::good() }
    }

    pub fn with_freeform(mut self, text: impl Into<String>) -> Self {
        self.freeform = Some(text.into());
        self
    }

    /// The gold field required by `choice` is present and non-empty, the
    /// others are absent, and `binary_ok` agrees with the choice.
    pub fn validate(&self) -> Result<()> {
        use FeedbackChoice::*;
        if self.binary_ok != (self.choice == GoodResponse) {
            return Err(Error::invalid("feedback.binary_ok", "must be true exactly for good_response"));
        }
        let rules = [
            ("feedback.gold_query", &self.gold_query, BetterQuery),
            ("feedback.gold_knowledge", &self.gold_knowledge, BetterResults),
            ("feedback.gold_response", &self.gold_response, OtherIssue),
        ];
        for (field, value, owner) in rules {
            match (value, self.choice == owner) {
                (None, true) => return Err(Error::invalid(field, format!("required for {owner:?}"))),
                (Some(v), true) if v.trim().is_empty() => return Err(Error::invalid(field, "empty")),
                (Some(_), false) => return Err(Error::invalid(field, format!("not allowed for {:?}", self.choice))),
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    Human,
    Bot,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default)]
    pub executed_query: Option<String>,
    /// Ids of retrieved documents.
    #[serde(default)]
    pub retrieved: Option<Vec<String>>,
    #[serde(default)]
    pub knowledge: Option<String>,
    #[serde(default)]
    pub feedback: Option<FeedbackRecord>,
    #[serde(default)]
    pub overridden: bool,
}

impl Turn {
    pub fn human(text: impl Into<String>) -> Self {
        Turn {
            speaker: Speaker::Human,
            text: text.into(),
            executed_query: None,
            retrieved: None,
            knowledge: None,
            feedback: None,
            overridden: false,
        }
    }

    pub fn bot(text: impl Into<String>) -> Self {
        Turn { speaker: Speaker::Bot, ..Turn::human(text) }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    /// Id of the [`TaskDefinition`].
    pub task: String,
    pub turns: Vec<Turn>,
    pub completed: bool,
    pub rating: Option<u8>,
}

impl Conversation {
    pub fn bot_turns(&self) -> impl Iterator<Item = &Turn> {
        self.turns.iter().filter(|t| t.speaker == Speaker::Bot)
    }

    /// Structural invariants that hold for any conversation prefix.
    pub fn validate_turns(&self) -> Result<()> {
        let mut last_choice: Option<FeedbackChoice> = None;
        for (i, t) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::Human } else { Speaker::Bot };
            if t.speaker != expected {
                return Err(Error::invalid(format!("turns[{i}].speaker"), "turns must alternate starting with human"));
            }
            if t.speaker == Speaker::Human {
                if t.feedback.is_some() || t.executed_query.is_some() || t.retrieved.is_some() || t.knowledge.is_some() {
                    return Err(Error::invalid(format!("turns[{i}]"), "human turns carry only text"));
                }
                if t.overridden {
                    return Err(Error::invalid(format!("turns[{i}].overridden"), "human turns cannot be overridden"));
                }
                continue;
            }
            if let Some(f) = &t.feedback {
                f.validate().map_err(|e| match e {
                    Error::Invalid { field, message } => Error::invalid(format!("turns[{i}].{field}"), message),
                    other => other,
                })?;
            }
            if t.overridden && last_choice != Some(FeedbackChoice::OtherIssue) {
                return Err(Error::invalid(
                    format!("turns[{i}].overridden"),
                    "an overridden turn must follow other_issue feedback",
                ));
            }
            last_choice = t.feedback.as_ref().map(|f| f.choice);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.trim().is_empty() {
            return Err(Error::invalid("conversation.id", "empty"));
        }
        self.validate_turns()?;
        match (self.completed, self.rating) {
            (true, Some(r)) if (1..=5).contains(&r) => {}
            (true, Some(r)) => return Err(Error::invalid("rating", format!("{r} outside 1-5"))),
            (true, None) => return Err(Error::invalid("rating", "required when completed")),
            (false, Some(_)) => return Err(Error::invalid("rating", "only allowed when completed")),
            (false, None) => {}
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Valid,
    /// Held-out dialogues on deployed tasks.
    Test,
    /// Dialogues on tasks never deployed.
    TestUnseen,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    /// Deployment round tag such as `v1`, `v2` or `unseen`.
    pub version: String,
    pub split: Split,
    pub tasks: Vec<TaskDefinition>,
    pub conversations: Vec<Conversation>,
}

/// One line of a FITS file.
#[derive(Serialize, Deserialize)]
struct FitsLine {
    version: String,
    split: Split,
    task_definition: TaskDefinition,
    conversation: Conversation,
}

impl Dataset {
    pub fn new(version: impl Into<String>, split: Split) -> Self {
        Dataset { version: version.into(), split, tasks: Vec::new(), conversations: Vec::new() }
    }

    pub fn task(&self, id: &str) -> Option<&TaskDefinition> {
        self.tasks.iter().find(|t| t.id == id)
    }

    pub fn add_task(&mut self, task: TaskDefinition) {
        if self.task(&task.id).is_none() {
            self.tasks.push(task);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut task_ids = HashSet::new();
        for t in &self.tasks {
            t.validate()?;
            if !task_ids.insert(t.id.as_str()) {
                return Err(Error::invalid("task.id", format!("duplicate {}", t.id)));
            }
        }
        let mut ids = HashSet::new();
        for c in &self.conversations {
            c.validate().map_err(|e| match e {
                Error::Invalid { field, message } => Error::invalid(format!("conversation {}: {field}", c.id), message),
                other => other,
            })?;
            if !task_ids.contains(c.task.as_str()) {
                return Err(Error::invalid("conversation.task", format!("unknown task id {}", c.task)));
            }
            if !ids.insert(c.id.as_str()) {
                return Err(Error::invalid("conversation.id", format!("duplicate {}", c.id)));
            }
        }
        Ok(())
    }

    /// Tasks restricted to those some conversation refers to, in order of
    /// first reference. This is exactly what a FITS file can hold.
    pub fn normalized(&self) -> Dataset {
        let mut out = Dataset::new(self.version.clone(), self.split);
        for c in &self.conversations {
            if let Some(t) = self.task(&c.task) {
                out.add_task(t.clone());
            }
        }
        out.conversations = self.conversations.clone();
        out
    }

    /// Union of two datasets with disjoint conversation ids; keeps `self`'s tags.
    pub fn union(&self, other: &Dataset) -> Result<Dataset> {
        let mut out = self.clone();
        let ids: HashSet<&str> = self.conversations.iter().map(|c| c.id.as_str()).collect();
        for c in &other.conversations {
            if ids.contains(c.id.as_str()) {
                return Err(Error::invalid("conversation.id", format!("{} present in both datasets", c.id)));
            }
        }
        for t in &other.tasks {
            out.add_task(t.clone());
        }
        out.conversations.extend(other.conversations.iter().cloned());
        Ok(out)
    }
}

/// Writes one JSON object per conversation. Only tasks referenced by a
/// conversation are stored, so an empty dataset yields an empty file.
pub fn save_fits(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    for c in &dataset.conversations {
        append_line(&mut w, dataset, c)?;
    }
    w.flush()?;
    Ok(())
}

fn append_line(w: &mut impl Write, dataset: &Dataset, c: &Conversation) -> Result<()> {
    let task = dataset.task(&c.task).ok_or_else(|| Error::invalid("conversation.task", c.task.clone()))?;
    let line = FitsLine {
        version: dataset.version.clone(),
        split: dataset.split,
        task_definition: task.clone(),
        conversation: c.clone(),
    };
    serde_json::to_writer(&mut *w, &line)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Appends one completed conversation to a FITS file.
pub fn append_fits(path: &Path, version: &str, split: Split, task: &TaskDefinition, c: &Conversation) -> Result<()> {
    task.validate()?;
    c.validate()?;
    if c.task != task.id {
        return Err(Error::invalid("conversation.task", "does not match the task definition"));
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = Vec::new();
    let ds = Dataset { version: version.into(), split, tasks: vec![task.clone()], conversations: Vec::new() };
    append_line(&mut buf, &ds, c)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_fits(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut ds: Option<Dataset> = None;
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FitsLine =
            serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
        let at_line = |e: Error| match e {
            Error::Invalid { field, message } => Error::Parse { line: line_no, message: format!("invalid {field}: {message}") },
            other => other,
        };
        rec.task_definition.validate().map_err(at_line)?;
        rec.conversation.validate().map_err(at_line)?;
        if rec.conversation.task != rec.task_definition.id {
            return Err(Error::Parse { line: line_no, message: "conversation.task does not match task_definition.id".into() });
        }
        let ds = ds.get_or_insert_with(|| Dataset::new(rec.version.clone(), rec.split));
        if ds.version != rec.version || ds.split != rec.split {
            return Err(Error::Parse { line: line_no, message: "mixed version/split in one file".into() });
        }
        match ds.task(&rec.task_definition.id) {
            Some(t) if *t != rec.task_definition => {
                return Err(Error::Parse { line: line_no, message: format!("conflicting definitions of task {}", t.id) })
            }
            Some(_) => {}
            None => ds.tasks.push(rec.task_definition),
        }
        if ds.conversations.iter().any(|c| c.id == rec.conversation.id) {
            return Err(Error::Parse { line: line_no, message: format!("duplicate conversation id {}", rec.conversation.id) });
        }
        ds.conversations.push(rec.conversation);
    }
    Ok(ds.unwrap_or_default())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub unique_tasks: usize,
    pub dialogues: usize,
    pub utterances: usize,
    pub bot_utterances: usize,
    /// 0 when there are no dialogues.
    pub avg_bot_utterances: f64,
    pub feedback: BTreeMap<FeedbackChoice, usize>,
}

impl Stats {
    /// Field-wise sum with the average recomputed; valid for datasets with
    /// disjoint conversation and task ids.
    pub fn combine(&self, other: &Stats) -> Stats {
        let mut feedback = self.feedback.clone();
        for (k, v) in &other.feedback {
            *feedback.entry(*k).or_default() += v;
        }
        let dialogues = self.dialogues + other.dialogues;
        let bot = self.bot_utterances + other.bot_utterances;
        Stats {
            unique_tasks: self.unique_tasks + other.unique_tasks,
            dialogues,
            utterances: self.utterances + other.utterances,
            bot_utterances: bot,
            avg_bot_utterances: if dialogues == 0 { 0.0 } else { bot as f64 / dialogues as f64 },
            feedback,
        }
    }
}

pub fn dataset_stats(ds: &Dataset) -> Stats {
    let mut feedback: BTreeMap<FeedbackChoice, usize> = FeedbackChoice::ALL.iter().map(|c| (*c, 0)).collect();
    let tasks: HashSet<&str> = ds.conversations.iter().map(|c| c.task.as_str()).collect();
    let mut utterances = 0;
    let mut bot = 0;
    for c in &ds.conversations {
        utterances += c.turns.len();
        for t in c.bot_turns() {
            bot += 1;
            if let Some(f) = &t.feedback {
                *feedback.entry(f.choice).or_default() += 1;
            }
        }
    }
    let dialogues = ds.conversations.len();
    Stats {
        unique_tasks: tasks.len(),
        dialogues,
        utterances,
        bot_utterances: bot,
        avg_bot_utterances: if dialogues == 0 { 0.0 } else { bot as f64 / dialogues as f64 },
        feedback,
    }
}

/// Sortable, collision-resistant conversation ids. Seeded generators use a
/// logical clock so identical runs produce identical ids.
pub struct IdGen {
    rng: ChaCha8Rng,
    clock_ms: u64,
    wall_clock: bool,
}

impl IdGen {
    pub fn seeded(seed: u64) -> Self {
        // Logical clocks start at a seed-dependent millisecond so that ids from
        // different seeds do not collide when datasets are merged.
        IdGen { rng: ChaCha8Rng::seed_from_u64(seed), clock_ms: 1 + (seed % (1 << 20)) * (1 << 20), wall_clock: false }
    }

    pub fn wall_clock(seed: u64) -> Self {
        IdGen { wall_clock: true, ..Self::seeded(seed) }
    }

    pub fn next_id(&mut self) -> String {
        let ms = if self.wall_clock {
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0);
            self.clock_ms = self.clock_ms.max(now);
            self.clock_ms
        } else {
            self.clock_ms += 1;
            self.clock_ms
        };
        Ulid::from_parts(ms, self.rng.gen::<u128>()).to_string()
    }
}

/// Index from task id to task definition.
pub fn task_map(tasks: &[TaskDefinition]) -> HashMap<&str, &TaskDefinition> {
    tasks.iter().map(|t| (t.id.as_str(), t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task(id: &str) -> TaskDefinition {
        TaskDefinition {
            id: id.into(),
            topic: "zorvak colors".into(),
            task: "find out which color zorvak likes".into(),
            completion_description: "the bot names the color".into(),
        }
    }

    fn convo(id: &str, task: &str) -> Conversation {
        let mut b1 = Turn::bot("i do not know");
        b1.executed_query = Some("zorvak".into());
        b1.retrieved = Some(vec!["d1".into()]);
        b1.feedback = Some(FeedbackRecord::other_issue("zorvak likes teal"));
        let mut b2 = Turn::bot("zorvak likes teal");
        b2.overridden = true;
        b2.feedback = Some(FeedbackRecord::good());
        Conversation {
            id: id.into(),
            task: task.into(),
            turns: vec![Turn::human("what color?"), b1, Turn::human("thanks"), b2],
            completed: true,
            rating: Some(4),
        }
    }

    #[test]
    fn feedback_presence_rules() {
        assert!(FeedbackRecord::good().validate().is_ok());
        assert!(FeedbackRecord::better_query("q").validate().is_ok());
        let mut f = FeedbackRecord::better_query("q");
        f.gold_response = Some("r".into());
        assert!(f.validate().is_err());
        let mut f = FeedbackRecord::good();
        f.binary_ok = false;
        assert!(f.validate().is_err());
        let f = FeedbackRecord { gold_query: None, ..FeedbackRecord::better_query("q") };
        assert!(f.validate().is_err());
    }

    #[test]
    fn overridden_turn_needs_other_issue_before() {
        let mut c = convo("c", "t");
        c.turns[1].feedback = Some(FeedbackRecord::good());
        assert!(c.validate().is_err());
    }

    #[test]
    fn non_alternating_turns_rejected() {
        let mut c = convo("c", "t");
        c.turns.swap(0, 1);
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("turns[0]"), "{err}");
    }

    #[test]
    fn round_trip_and_line_count() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let empty = Dataset::new("v1", Split::Train);
        save_fits(&empty, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "");
        let mut ds = Dataset::new("v1", Split::Valid);
        ds.add_task(task("t"));
        ds.conversations.push(convo("c1", "t"));
        save_fits(&ds, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().lines().count(), 1);
        assert_eq!(load_fits(&p).unwrap(), ds);
    }

    #[test]
    fn invalid_rating_rejected_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = Dataset::new("v1", Split::Train);
        ds.add_task(task("t"));
        let mut c = convo("c1", "t");
        c.rating = Some(6);
        ds.conversations.push(c);
        let err = save_fits(&ds, &dir.path().join("x")).unwrap_err();
        assert!(err.to_string().contains("rating"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let mut ds = Dataset::new("v1", Split::Train);
        ds.add_task(task("t"));
        ds.conversations.push(convo("c1", "t"));
        ds.conversations.push(convo("c2", "t"));
        save_fits(&ds, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let truncated = &text[..text.len() - 20];
        std::fs::write(&p, truncated).unwrap();
        match load_fits(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn stats_of_table_shaped_dialogue() {
        let mut ds = Dataset::new("v1", Split::Train);
        ds.add_task(task("t"));
        let mut c = Conversation { id: "c".into(), task: "t".into(), turns: vec![], completed: true, rating: Some(3) };
        let fb = [
            FeedbackRecord::better_query("q"),
            FeedbackRecord::better_results("k"),
            FeedbackRecord::good(),
            FeedbackRecord::good(),
        ];
        for f in fb {
            c.turns.push(Turn::human("h"));
            let mut b = Turn::bot("b");
            b.feedback = Some(f);
            c.turns.push(b);
        }
        ds.conversations.push(c);
        let s = dataset_stats(&ds);
        assert_eq!((s.dialogues, s.utterances, s.bot_utterances), (1, 8, 4));
        assert_eq!(s.avg_bot_utterances, 4.0);
        assert_eq!(s.feedback[&FeedbackChoice::BetterQuery], 1);
        assert_eq!(s.feedback[&FeedbackChoice::BetterResults], 1);
        assert_eq!(s.feedback[&FeedbackChoice::GoodResponse], 2);
        assert_eq!(s.feedback[&FeedbackChoice::OtherIssue], 0);
        let e = dataset_stats(&Dataset::default());
        assert_eq!((e.dialogues, e.utterances, e.avg_bot_utterances), (0, 0, 0.0));
    }

    #[test]
    fn seeded_ids_are_deterministic_and_sorted() {
        let mut a = IdGen::seeded(3);
        let mut b = IdGen::seeded(3);
        let xs: Vec<String> = (0..50).map(|_| a.next_id()).collect();
        let ys: Vec<String> = (0..50).map(|_| b.next_id()).collect();
        assert_eq!(xs, ys);
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
        let mut c = IdGen::seeded(4);
        assert!(!xs.contains(&c.next_id()));
    }
}

//! Templated fact worlds over invented entities.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TaskDefinition;
use crate::error::{Error, Result};
use crate::metrics::answer_present;
use crate::retrieval::{load_corpus, save_corpus, Bm25Params, Document, Index};
use crate::text::{normalize, Vocab};

pub(crate) struct Relation {
    pub key: &'static str,
    pub noun: &'static str,
    pub fact: &'static str,
    pub canonical: [&'static str; 2],
    pub paraphrase: [&'static str; 2],
    pub response: &'static str,
    pub values: [&'static str; 12],
}

pub(crate) const RELATIONS: [Relation; 7] = [
    Relation {
        key: "color",
        noun: "favorite color",
        fact: "{e} 's favorite color is {v} .",
        canonical: ["what is the favorite color of {e} ?", "tell me the favorite color of {e} ."],
        paraphrase: ["which hue does {e} like best ?", "what shade does {e} prefer ?"],
        response: "{e} likes the color {v} .",
        values: ["teal", "crimson", "amber", "violet", "olive", "ivory", "scarlet", "indigo", "maroon", "silver", "beige", "coral"],
    },
    Relation {
        key: "pet",
        noun: "pet",
        fact: "{e} has a pet {v} at home .",
        canonical: ["what pet does {e} have ?", "tell me about the pet of {e} ."],
        paraphrase: ["which animal lives with {e} ?", "what creature does {e} keep ?"],
        response: "{e} owns a {v} .",
        values: ["dog", "cat", "parrot", "rabbit", "hamster", "turtle", "ferret", "goldfish", "pony", "lizard", "canary", "hedgehog"],
    },
    Relation {
        key: "city",
        noun: "birth city",
        fact: "{e} was born in the city of {v} .",
        canonical: ["which city was {e} born in ?", "what is the birth city of {e} ?"],
        paraphrase: ["where does {e} come from ?", "what is the hometown of {e} ?"],
        response: "{e} grew up in {v} .",
        values: ["paris", "lima", "oslo", "cairo", "dublin", "quito", "hanoi", "kyoto", "nairobi", "lisbon", "denver", "perth"],
    },
    Relation {
        key: "food",
        noun: "favorite food",
        fact: "{e} eats {v} as a favorite food .",
        canonical: ["what food does {e} love ?", "what is the favorite food of {e} ?"],
        paraphrase: ["which dish does {e} enjoy most ?", "what meal makes {e} happy ?"],
        response: "{e} really enjoys {v} .",
        values: ["pizza", "sushi", "curry", "tacos", "ramen", "waffles", "pancakes", "dumplings", "falafel", "lasagna", "paella", "risotto"],
    },
    Relation {
        key: "instrument",
        noun: "instrument",
        fact: "{e} plays the {v} as an instrument .",
        canonical: ["what instrument does {e} play ?", "which instrument is played by {e} ?"],
        paraphrase: ["what music does {e} make ?", "what does {e} perform on ?"],
        response: "{e} is good at the {v} .",
        values: ["piano", "violin", "guitar", "cello", "flute", "drums", "harp", "trumpet", "banjo", "oboe", "clarinet", "ukulele"],
    },
    Relation {
        key: "sport",
        noun: "sport",
        fact: "{e} competes in the sport of {v} .",
        canonical: ["what sport does {e} play ?", "which sport is {e} into ?"],
        paraphrase: ["what game does {e} compete in ?", "how does {e} exercise ?"],
        response: "{e} trains for {v} .",
        values: ["tennis", "rugby", "hockey", "cricket", "golf", "rowing", "fencing", "karate", "surfing", "archery", "boxing", "sailing"],
    },
    Relation {
        key: "job",
        noun: "job",
        fact: "{e} works as a {v} for a job .",
        canonical: ["what job does {e} have ?", "what is the job of {e} ?"],
        paraphrase: ["what does {e} do for a living ?", "what is the occupation of {e} ?"],
        response: "{e} is a {v} .",
        values: ["baker", "nurse", "pilot", "farmer", "lawyer", "dentist", "plumber", "chemist", "sailor", "tailor", "jeweler", "librarian"],
    },
];

pub(crate) const FOLLOW_UPS: [&str; 3] = ["that is not right .", "no , try again .", "hmm , i do not think so ."];
pub(crate) const SMALL_TALK: [&str; 3] = ["hi there !", "hello , i have a question .", "good morning ."];

pub(crate) fn relation(key: &str) -> Option<&'static Relation> {
    RELATIONS.iter().find(|r| r.key == key)
}

fn fill(template: &str, entity: &str, value: &str) -> String {
    normalize(&template.replace("{e}", entity).replace("{v}", value))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    /// Entities whose facts become deployment tasks.
    pub n_entities: usize,
    /// Relations per entity, at most 7.
    pub n_relations: usize,
    pub n_tasks: usize,
    /// Extra entities used only for pretraining.
    pub pretrain_entities: usize,
    /// Syllables per invented name part.
    pub syllables: usize,
    /// Chance that an opening message mentions two values of the asked
    /// relation before the question.
    pub distractor_rate: f64,
    /// Chance that a deployment question uses a paraphrase template.
    pub paraphrase_rate: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            seed: 0,
            n_entities: 40,
            n_relations: 5,
            n_tasks: 200,
            pretrain_entities: 40,
            syllables: 2,
            distractor_rate: 0.0,
            paraphrase_rate: 0.5,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_entities == 0 || self.n_relations == 0 || self.n_tasks == 0 || self.syllables == 0 {
            return Err(Error::invalid("world spec", "counts must be >= 1"));
        }
        if self.n_relations > RELATIONS.len() {
            return Err(Error::invalid("n_relations", format!("at most {}", RELATIONS.len())));
        }
        if self.n_tasks > self.n_entities * self.n_relations {
            return Err(Error::invalid("n_tasks", "exceeds available facts"));
        }
        for (name, p) in [("distractor_rate", self.distractor_rate), ("paraphrase_rate", self.paraphrase_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(name, "must be in [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Ground truth for one fact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTruth {
    pub task_id: String,
    pub entity: String,
    pub relation: String,
    pub doc_id: String,
    pub gold_query: String,
    /// The gold document's sentence, verbatim.
    pub gold_knowledge: String,
    pub gold_answer: String,
    pub gold_response: String,
}

impl TaskTruth {
    fn rel(&self) -> &'static Relation {
        relation(&self.relation).expect("known relation")
    }

    pub fn question(&self, paraphrase: bool, rng: &mut impl Rng) -> String {
        let r = self.rel();
        let pool = if paraphrase { &r.paraphrase } else { &r.canonical };
        fill(pool[rng.gen_range(0..pool.len())], &self.entity, "")
    }

    /// Two values of the same relation; the true one with probability `p_true`.
    pub fn distractors(&self, p_true: f64, rng: &mut impl Rng) -> [String; 2] {
        let r = self.rel();
        let others: Vec<&str> = r.values.iter().copied().filter(|v| *v != self.gold_answer).collect();
        let mut pick: Vec<&str> = others.choose_multiple(rng, 2).copied().collect();
        if rng.gen::<f64>() < p_true {
            let i = rng.gen_range(0..2);
            pick[i] = &self.gold_answer;
        }
        [pick[0].to_string(), pick[1].to_string()]
    }

    pub fn task_definition(&self) -> TaskDefinition {
        let noun = self.rel().noun;
        TaskDefinition {
            id: self.task_id.clone(),
            topic: self.entity.clone(),
            task: format!("find out the {noun} of {}", self.entity),
            completion_description: format!("the bot tells you the {noun} of {}", self.entity),
        }
    }

    /// Free-form complaint about a wrong answer.
    pub fn complaint(&self) -> String {
        format!("you should tell me the {} of {}", self.rel().noun, self.entity)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldAudit {
    pub tasks: usize,
    pub unique_knowledge: usize,
    pub rank1: usize,
    pub answer_extractable: usize,
}

impl WorldAudit {
    pub fn passed(&self) -> bool {
        self.unique_knowledge == self.tasks && self.rank1 == self.tasks && self.answer_extractable == self.tasks
    }
}

#[derive(Clone, Debug)]
pub struct World {
    pub spec: WorldSpec,
    pub corpus: Vec<Document>,
    pub tasks: Vec<TaskDefinition>,
    /// Truths for `tasks`, same order.
    pub truths: Vec<TaskTruth>,
    /// Facts about pretraining entities; never deployed.
    pub pretrain: Vec<TaskTruth>,
}

fn invent_word(rng: &mut impl Rng, syllables: usize) -> String {
    const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr"];
    const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
    const CODAS: [&str; 5] = ["", "", "n", "r", "x"];
    let mut w = String::new();
    for _ in 0..syllables {
        w.push_str(ONSETS[rng.gen_range(0..ONSETS.len())]);
        w.push_str(VOWELS[rng.gen_range(0..VOWELS.len())]);
        w.push_str(CODAS[rng.gen_range(0..CODAS.len())]);
    }
    w
}

fn reserved_words() -> BTreeSet<String> {
    let mut set = BTreeSet::new();
    let mut add = |s: &str| set.extend(normalize(s).split(' ').map(str::to_string));
    for r in &RELATIONS {
        for t in [r.fact, r.response, r.noun, r.key].into_iter().chain(r.canonical).chain(r.paraphrase).chain(r.values) {
            add(t);
        }
    }
    for t in FOLLOW_UPS.iter().chain(&SMALL_TALK) {
        add(t);
    }
    add("you should tell me the of find out bot tells h b i like and");
    set
}

/// Builds a world deterministically from `spec` and audits it: every task's
/// knowledge sentence occurs in exactly one document, its gold query ranks
/// that document first, and its answer occurs in the knowledge.
pub fn generate_world(spec: &WorldSpec) -> Result<(World, WorldAudit)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.n_entities + spec.pretrain_entities;
    let pool_size = ((total as f64).sqrt().ceil() as usize + 2).max(2);
    let reserved = reserved_words();
    let mut seen = BTreeSet::new();
    let mut pool = |rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(pool_size);
        while out.len() < pool_size {
            let w = invent_word(rng, spec.syllables);
            if w.len() > 2 && !reserved.contains(&w) && seen.insert(w.clone()) {
                out.push(w);
            }
        }
        out
    };
    let firsts = pool(&mut rng);
    let lasts = pool(&mut rng);
    let mut names: Vec<String> = firsts.iter().flat_map(|f| lasts.iter().map(move |l| format!("{f} {l}"))).collect();
    names.shuffle(&mut rng);
    names.truncate(total);

    let relations: Vec<&Relation> = RELATIONS[..spec.n_relations].iter().collect();
    let mut corpus = Vec::new();
    let mut facts = Vec::new();
    for (ei, name) in names.iter().enumerate() {
        for r in &relations {
            let value = r.values[rng.gen_range(0..r.values.len())];
            let doc_id = format!("doc-{:05}", corpus.len());
            let sentence = fill(r.fact, name, value);
            corpus.push(Document { id: doc_id.clone(), title: name.clone(), body: sentence.clone() });
            facts.push((
                ei < spec.n_entities,
                TaskTruth {
                    task_id: String::new(),
                    entity: name.clone(),
                    relation: r.key.to_string(),
                    doc_id,
                    gold_query: format!("{name} {}", r.key),
                    gold_knowledge: sentence,
                    gold_answer: value.to_string(),
                    gold_response: fill(r.response, name, value),
                },
            ));
        }
    }
    let (deploy, pretrain): (Vec<_>, Vec<_>) = facts.into_iter().partition(|(d, _)| *d);
    let mut deploy: Vec<TaskTruth> = deploy.into_iter().map(|(_, t)| t).collect();
    let pretrain: Vec<TaskTruth> = pretrain.into_iter().map(|(_, t)| t).collect();
    deploy.shuffle(&mut rng);
    deploy.truncate(spec.n_tasks);
    deploy.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
    for (i, t) in deploy.iter_mut().enumerate() {
        t.task_id = format!("task-{i:04}");
    }
    let tasks = deploy.iter().map(TaskTruth::task_definition).collect();
    let world = World { spec: spec.clone(), corpus, tasks, truths: deploy, pretrain };
    let audit = world.audit()?;
    if !audit.passed() {
        return Err(Error::invalid("world", format!("self-consistency audit failed: {audit:?}")));
    }
    Ok((world, audit))
}

impl World {
    pub fn index(&self) -> Result<Index> {
        Index::build(self.corpus.clone(), Bm25Params::default())
    }

    /// A made-up fact about a name no document describes, assembled from
    /// the world's name parts. Used where the answer must not be recallable.
    pub fn hypothetical(&self, rng: &mut impl Rng) -> Result<TaskTruth> {
        let known: BTreeSet<&str> = self.corpus.iter().map(|d| d.title.as_str()).collect();
        let (mut firsts, mut lasts) = (BTreeSet::new(), BTreeSet::new());
        for name in &known {
            if let Some((f, l)) = name.split_once(' ') {
                firsts.insert(f);
                lasts.insert(l);
            }
        }
        let firsts: Vec<&str> = firsts.into_iter().collect();
        let lasts: Vec<&str> = lasts.into_iter().collect();
        if firsts.len() * lasts.len() <= known.len() {
            return Err(Error::invalid("world", "every name combination is taken"));
        }
        let name = loop {
            let n = format!("{} {}", firsts[rng.gen_range(0..firsts.len())], lasts[rng.gen_range(0..lasts.len())]);
            if !known.contains(n.as_str()) {
                break n;
            }
        };
        let r = &RELATIONS[rng.gen_range(0..self.spec.n_relations)];
        let value = r.values[rng.gen_range(0..r.values.len())];
        Ok(TaskTruth {
            task_id: String::new(),
            entity: name.clone(),
            relation: r.key.to_string(),
            doc_id: String::new(),
            gold_query: format!("{name} {}", r.key),
            gold_knowledge: fill(r.fact, &name, value),
            gold_answer: value.to_string(),
            gold_response: fill(r.response, &name, value),
        })
    }

    pub fn truth(&self, task_id: &str) -> Option<&TaskTruth> {
        self.truths.iter().find(|t| t.task_id == task_id)
    }

    /// Vocabulary covering every string the world can produce.
    pub fn vocab(&self) -> Result<Vocab> {
        let mut texts: Vec<String> = self.corpus.iter().flat_map(|d| [d.title.clone(), d.body.clone()]).collect();
        for t in self.truths.iter().chain(&self.pretrain) {
            let r = t.rel();
            texts.extend(r.canonical.iter().chain(&r.paraphrase).map(|q| fill(q, &t.entity, "")));
            texts.extend([t.gold_response.clone(), t.gold_query.clone(), t.complaint()]);
            texts.extend(r.values.iter().map(|v| v.to_string()));
        }
        for td in &self.tasks {
            texts.extend([td.task.clone(), td.completion_description.clone()]);
        }
        texts.extend(FOLLOW_UPS.iter().chain(&SMALL_TALK).map(|s| s.to_string()));
        texts.push("h : b : i like and".into());
        Vocab::build(&texts, usize::MAX)
    }

    pub fn audit(&self) -> Result<WorldAudit> {
        let index = self.index()?;
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for d in &self.corpus {
            *counts.entry(d.body.as_str()).or_default() += 1;
        }
        let mut a = WorldAudit { tasks: self.truths.len(), unique_knowledge: 0, rank1: 0, answer_extractable: 0 };
        for t in self.truths.iter().chain(&self.pretrain) {
            let deploy = !t.task_id.is_empty();
            let unique = counts.get(t.gold_knowledge.as_str()) == Some(&1);
            let top = index.search(&t.gold_query, 1);
            let rank1 = top.first().is_some_and(|r| r.doc_id == t.doc_id);
            let extract = answer_present(&t.gold_knowledge, &t.gold_answer) && answer_present(&t.gold_response, &t.gold_answer);
            if !deploy {
                if !(unique && rank1 && extract) {
                    return Err(Error::invalid("world", format!("pretraining fact {} fails audit", t.doc_id)));
                }
                continue;
            }
            a.unique_knowledge += usize::from(unique);
            a.rank1 += usize::from(rank1);
            a.answer_extractable += usize::from(extract);
        }
        Ok(a)
    }

    /// Writes `corpus.jsonl`, `tasks.jsonl`, `truth.jsonl`, `pretrain.jsonl`
    /// and `spec.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_corpus(&self.corpus, &dir.join("corpus.jsonl"))?;
        write_jsonl(&dir.join("tasks.jsonl"), &self.tasks)?;
        write_jsonl(&dir.join("truth.jsonl"), &self.truths)?;
        write_jsonl(&dir.join("pretrain.jsonl"), &self.pretrain)?;
        fs::write(dir.join("spec.json"), serde_json::to_string_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<World> {
        let spec = serde_json::from_str(&fs::read_to_string(dir.join("spec.json"))?)?;
        Ok(World {
            spec,
            corpus: load_corpus(&dir.join("corpus.jsonl"))?,
            tasks: read_jsonl(&dir.join("tasks.jsonl"))?,
            truths: read_jsonl(&dir.join("truth.jsonl"))?,
            pretrain: read_jsonl(&dir.join("pretrain.jsonl"))?,
        })
    }
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

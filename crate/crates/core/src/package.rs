//! A deployable bot on disk: a manifest, the vocabulary, one checkpoint per
//! distinct model and the replay sets needed to keep fine-tuning it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bots::{Bot, BotConfig, BotKind, Encoder, K2RBundle};
use crate::error::{Error, Result};
use crate::experiment::Pretrained;
use crate::learners::{Learned, RewardModel, RoleSets};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::retrieval::Index;
use crate::text::Vocab;

pub const PACKAGE_FORMAT: &str = "fits-bot";
pub const PACKAGE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: BotKind,
    shared: bool,
    config: BotConfig,
    query: Option<String>,
    knowledge: Option<String>,
    response: String,
    reranker: Option<String>,
}

#[derive(Clone)]
pub struct BotPackage {
    pub kind: BotKind,
    pub models: K2RBundle,
    pub vocab: Arc<Vocab>,
    pub config: BotConfig,
    pub reranker: Option<Arc<RewardModel>>,
    pub replay: RoleSets,
}

impl BotPackage {
    pub fn from_pretrained(p: &Pretrained) -> Self {
        BotPackage {
            kind: p.kind,
            models: p.models.clone(),
            vocab: p.vocab.clone(),
            config: BotConfig::default(),
            reranker: None,
            replay: p.replay.clone(),
        }
    }

    /// Packages a learner's output; `base` supplies vocabulary and replay.
    pub fn from_learned(base: &BotPackage, learned: &Learned) -> Self {
        BotPackage {
            kind: base.kind,
            models: learned.models.clone(),
            vocab: base.vocab.clone(),
            config: BotConfig {
                decode: learned.decode.unwrap_or(base.config.decode),
                guidance: learned.guidance,
                ..base.config.clone()
            },
            reranker: learned.reranker.clone(),
            replay: base.replay.clone(),
        }
    }

    pub fn encoder(&self) -> Encoder {
        Encoder::new(self.vocab.clone(), self.models.response.config.max_len)
    }

    pub fn bot(&self, index: Arc<Index>) -> Result<Bot> {
        let bot = Bot::new(self.kind, self.models.clone(), index, self.vocab.clone(), self.config.clone())?;
        Ok(match &self.reranker {
            Some(r) => bot.with_reranker(r.clone()),
            None => bot,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.models.validate()?;
        std::fs::create_dir_all(dir)?;
        let put = |name: &str, m: &Model| -> Result<String> {
            save_checkpoint(m, &dir.join(name))?;
            Ok(name.to_string())
        };
        let (query, knowledge, response) = if self.models.shared {
            let f = put("model.json", &self.models.response)?;
            (Some(f.clone()), Some(f.clone()), f)
        } else {
            (
                self.models.query.as_deref().map(|m| put("query.json", m)).transpose()?,
                self.models.knowledge.as_deref().map(|m| put("knowledge.json", m)).transpose()?,
                put("response.json", &self.models.response)?,
            )
        };
        let reranker = self.reranker.as_deref().map(|r| put("reranker.json", &r.model)).transpose()?;
        let manifest = Manifest {
            format: PACKAGE_FORMAT.into(),
            version: PACKAGE_VERSION,
            kind: self.kind,
            shared: self.models.shared,
            config: self.config.clone(),
            query,
            knowledge,
            response,
            reranker,
        };
        write_json(&dir.join("manifest.json"), &manifest)?;
        write_json(&dir.join("replay.json"), &self.replay)?;
        self.vocab.save(&dir.join("vocab.json"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format != PACKAGE_FORMAT {
            return Err(Error::invalid("manifest", format!("unknown format {:?}", manifest.format)));
        }
        if manifest.version != PACKAGE_VERSION {
            return Err(Error::invalid("manifest", format!("unsupported version {}", manifest.version)));
        }
        let vocab = Arc::new(Vocab::load(&dir.join("vocab.json"))?);
        let get = |name: &str| -> Result<Model> {
            let m = load_checkpoint(&dir.join(name))?;
            if m.config.vocab_size != vocab.len() {
                return Err(Error::invalid(name, "vocabulary size differs from vocab.json"));
            }
            Ok(m)
        };
        let models = if manifest.shared {
            K2RBundle::shared(get(&manifest.response)?)
        } else {
            K2RBundle::separate(
                manifest.query.as_deref().map(get).transpose()?,
                manifest.knowledge.as_deref().map(get).transpose()?,
                get(&manifest.response)?,
            )
        };
        let reranker = match manifest.reranker.as_deref() {
            Some(name) => {
                let model = get(name)?;
                let encoder = Encoder::new(vocab.clone(), model.config.max_len);
                Some(Arc::new(RewardModel { model, encoder }))
            }
            None => None,
        };
        let replay = match File::open(dir.join("replay.json")) {
            Ok(f) => serde_json::from_reader(BufReader::new(f))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => RoleSets::default(),
            Err(e) => return Err(e.into()),
        };
        Ok(BotPackage { kind: manifest.kind, models, vocab, config: manifest.config, reranker, replay })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, value)?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny(vocab: usize, seed: u64) -> Model {
        Model::new(ModelConfig { d_model: 8, layers: 1, heads: 2, ff_dim: 16, max_len: 32, seed, ..ModelConfig::new(vocab) })
            .unwrap()
    }

    fn package(shared: bool) -> BotPackage {
        let vocab = Arc::new(Vocab::build(&["alpha beta gamma"], usize::MAX).unwrap());
        let n = vocab.len();
        let models = if shared {
            K2RBundle::shared(tiny(n, 1))
        } else {
            K2RBundle::separate(Some(tiny(n, 1)), Some(tiny(n, 2)), tiny(n, 3))
        };
        BotPackage { kind: BotKind::Modular, models, vocab, config: BotConfig::default(), reranker: None, replay: RoleSets::default() }
    }

    #[test]
    fn round_trip_separate_and_shared() {
        for shared in [false, true] {
            let dir = tempfile::tempdir().unwrap();
            let p = package(shared);
            p.save(dir.path()).unwrap();
            let q = BotPackage::load(dir.path()).unwrap();
            assert_eq!(q.models.shared, shared);
            q.models.validate().unwrap();
            assert_eq!(q.models.response.params(), p.models.response.params());
            assert_eq!(q.models.query.unwrap().params(), p.models.query.unwrap().params());
            assert_eq!(q.config, p.config);
        }
    }

    #[test]
    fn wrong_format_rejected() {
        let dir = tempfile::tempdir().unwrap();
        package(false).save(dir.path()).unwrap();
        let path = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap().replace(PACKAGE_FORMAT, "other");
        std::fs::write(&path, text).unwrap();
        assert!(BotPackage::load(dir.path()).is_err());
    }
}

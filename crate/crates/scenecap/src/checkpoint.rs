//! Checkpoint directories: model `manifest.json` + `weights.bin`,
//! `config.json` (training and world configuration plus the loss curve),
//! `vocab.json`, and optionally `classifier/` with the relation classifier.

use std::fs;
use std::path::Path;

use scenecap_core::harness::TrainConfig;
use scenecap_core::model::Model;
use scenecap_core::synth::{RelClassifier, Vocab, World, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::json::{read_json, write_json};
use crate::weights::{load_store, save_store, MANIFEST};

pub const CONFIG: &str = "config.json";
pub const VOCAB: &str = "vocab.json";
pub const CLASSIFIER_DIR: &str = "classifier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub train: TrainConfig,
    pub world: WorldConfig,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    pub vocab: Vocab,
    pub model: Model,
    pub classifier: Option<RelClassifier>,
}

impl Checkpoint {
    pub fn world(&self) -> Result<World> {
        Ok(World::new(self.config.world.clone())?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        save_store(dir, self.model.store())?;
        write_json(&dir.join(CONFIG), &self.config)?;
        write_json(&dir.join(VOCAB), &self.vocab)?;
        let cdir = dir.join(CLASSIFIER_DIR);
        match &self.classifier {
            Some(c) => save_store(&cdir, &c.store),
            None if cdir.exists() => fs::remove_dir_all(&cdir).map_err(io_err(&cdir)),
            None => Ok(()),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let config: CheckpointConfig = read_json(&dir.join(CONFIG))?;
        let vocab: Vocab = read_json(&dir.join(VOCAB))?;
        let world = World::new(config.world.clone())?;
        if vocab != world.vocab || vocab.len() != config.train.model.vocab_size {
            return Err(Error::Format { path: dir.join(VOCAB), detail: "vocabulary does not match the configuration".into() });
        }
        let store = load_store(dir)?;
        let model = Model::from_store(config.train.model.clone(), store)
            .map_err(|e| Error::Format { path: dir.join(MANIFEST), detail: e.to_string() })?;
        let cdir = dir.join(CLASSIFIER_DIR);
        let classifier = if cdir.join(MANIFEST).exists() {
            let store = load_store(&cdir)?;
            Some(
                RelClassifier::from_store(store, config.world.dim)
                    .map_err(|e| Error::Format { path: cdir.join(MANIFEST), detail: e.to_string() })?,
            )
        } else {
            None
        };
        Ok(Self { config, vocab, model, classifier })
    }
}

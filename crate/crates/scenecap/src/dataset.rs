//! Dataset directories: `world.json`, `vocab.json`, `scenes.jsonl` and
//! `triplets.jsonl` (`{scene_id, asg, caption}` with the caption as words).

use std::fs;
use std::path::Path;

use scenecap_core::asg::Asg;
use scenecap_core::harness::{generate_corpus, Example};
use scenecap_core::synth::{Scene, Triplet, Vocab, World, WorldConfig};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::json::{read_json, read_jsonl, write_json, write_jsonl};

pub const WORLD: &str = "world.json";
pub const VOCAB: &str = "vocab.json";
pub const SCENES: &str = "scenes.jsonl";
pub const TRIPLETS: &str = "triplets.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub scene_id: usize,
    pub asg: Asg,
    pub caption: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub world: World,
    pub scenes: Vec<Scene>,
    pub records: Vec<TripletRecord>,
}

impl Dataset {
    /// `count` scenes with one sampled graph and caption each.
    pub fn generate(cfg: WorldConfig, seed: u64, count: usize) -> Result<Self> {
        let world = World::new(cfg)?;
        let examples = generate_corpus(&world, seed, count)?;
        let records = examples
            .iter()
            .enumerate()
            .map(|(i, e)| TripletRecord {
                scene_id: i,
                asg: e.triplet.asg.clone(),
                caption: world.vocab.decode(&e.triplet.caption).into_iter().map(String::from).collect(),
            })
            .collect();
        Ok(Self { scenes: examples.into_iter().map(|e| e.scene).collect(), records, world })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_json(&dir.join(WORLD), &self.world.cfg)?;
        write_json(&dir.join(VOCAB), &self.world.vocab)?;
        write_jsonl(&dir.join(SCENES), &self.scenes)?;
        write_jsonl(&dir.join(TRIPLETS), &self.records)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: WorldConfig = read_json(&dir.join(WORLD))?;
        let world = World::new(cfg)?;
        let vocab: Vocab = read_json(&dir.join(VOCAB))?;
        if vocab != world.vocab {
            return Err(Error::Format { path: dir.join(VOCAB), detail: "vocabulary does not match the world configuration".into() });
        }
        let ds = Self { scenes: read_jsonl(&dir.join(SCENES))?, records: read_jsonl(&dir.join(TRIPLETS))?, world };
        ds.triplets().map_err(|e| match e {
            Error::Core(c) => Error::Format { path: dir.join(TRIPLETS), detail: c.to_string() },
            other => other,
        })?;
        Ok(ds)
    }

    fn triplet(&self, r: &TripletRecord) -> Result<Triplet> {
        let scene = self
            .scenes
            .get(r.scene_id)
            .ok_or_else(|| Error::Usage(format!("scene_id {} out of range ({} scenes)", r.scene_id, self.scenes.len())))?;
        let caption = r
            .caption
            .iter()
            .map(|w| self.world.vocab.id(w).ok_or_else(|| Error::Usage(format!("word {w:?} not in the vocabulary"))))
            .collect::<Result<Vec<_>>>()?;
        r.asg.validate()?;
        let feats = self.world.features_for(scene, &r.asg)?;
        Ok(Triplet { feats, asg: r.asg.clone(), caption })
    }

    /// Features recomputed from the scenes; fails on any dangling reference.
    pub fn triplets(&self) -> Result<Vec<Triplet>> {
        self.records.iter().map(|r| self.triplet(r)).collect()
    }

    pub fn examples(&self) -> Result<Vec<Example>> {
        self.records
            .iter()
            .map(|r| Ok(Example { scene: self.scenes[r.scene_id].clone(), triplet: self.triplet(r)? }))
            .collect()
    }
}

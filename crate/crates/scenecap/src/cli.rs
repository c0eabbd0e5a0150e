//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scenecap_core::asg::{sample_subgraph, Asg};
use scenecap_core::harness::{evaluate_control, evaluate_diversity, model_grad_check, train, TrainConfig};
use scenecap_core::synth::{
    auto_generate_asg, full_asg, jittered_proposals, relation_examples, RelClassifier, Scene, WorldConfig,
    RELATION_THRESHOLD,
};
use serde::Serialize;

use crate::checkpoint::{Checkpoint, CheckpointConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::json::{read_json, read_jsonl, write_json};

#[derive(Debug, Parser)]
#[command(name = "scenecap", version, about = "Graph-controlled captioning over synthetic scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        /// World configuration JSON; defaults are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        count: usize,
    },
    /// Train a captioning model (and the relation classifier) on a dataset.
    Train(TrainArgs),
    /// Caption one scene under a given graph.
    Caption {
        #[arg(long)]
        ckpt: PathBuf,
        /// Scene JSON, or a JSON-lines file together with --index.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        asg: PathBuf,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        /// Write the per-step attention trace of the best caption here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Decode every dataset graph and score against its caption.
    EvalControl {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Compare captions of sampled subgraphs with beam variants of one graph.
    EvalDiversity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        samples: usize,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only the first N scenes.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Print a graph for a scene, built automatically or sampled from its full graph.
    SampleAsg {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint holding the relation classifier (auto mode).
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check model gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 16)]
        dim: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Auto,
    Subgraph,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    /// Hidden size; must equal the dataset feature size (the default).
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub beam: usize,
    #[arg(long)]
    pub no_role: bool,
    #[arg(long)]
    pub no_rgcn: bool,
    #[arg(long)]
    pub no_ctn: bool,
    #[arg(long)]
    pub no_flow: bool,
    #[arg(long)]
    pub no_gupdt: bool,
    /// Decode greedily instead of with beam search.
    #[arg(long)]
    pub greedy: bool,
    #[arg(long, default_value_t = 20)]
    pub classifier_epochs: usize,
}

impl TrainArgs {
    pub fn config(&self, world: &WorldConfig, vocab_size: usize) -> Result<TrainConfig> {
        let dim = self.dim.unwrap_or(world.dim);
        if dim != world.dim {
            return Err(Error::Usage(format!("--dim {dim} differs from the dataset feature size {}", world.dim)));
        }
        let mut cfg = TrainConfig::new(vocab_size);
        cfg.model.dim = dim;
        cfg.model.layers = self.layers;
        cfg.lr = self.lr;
        cfg.batch = self.batch;
        cfg.epochs = self.epochs;
        cfg.seed = self.seed;
        cfg.beam = self.beam;
        let a = &mut cfg.model.ablation;
        a.role_embed = !self.no_role;
        a.mrgcn = !self.no_rgcn;
        a.content_attn = !self.no_ctn;
        a.flow_attn = !self.no_flow;
        a.graph_update = !self.no_gupdt;
        a.beam_search = !self.greedy;
        if !a.mrgcn {
            cfg.model.layers = 0;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_scene(path: &Path, index: usize) -> Result<Scene> {
    if path.extension().is_some_and(|e| e == "jsonl") {
        let mut scenes: Vec<Scene> = read_jsonl(path)?;
        if index >= scenes.len() {
            return Err(Error::Usage(format!("--index {index} but {} holds {} scenes", path.display(), scenes.len())));
        }
        Ok(scenes.swap_remove(index))
    } else {
        read_json(path)
    }
}

fn classifier(ck: &Checkpoint) -> Result<&RelClassifier> {
    ck.classifier.as_ref().ok_or_else(|| Error::Usage("checkpoint has no relation classifier".into()))
}

fn print_json<T: Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v).map_err(|e| Error::Usage(e.to_string()))?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out, seed, count } => {
            let cfg = match config {
                Some(p) => read_json(&p)?,
                None => WorldConfig::default(),
            };
            let ds = Dataset::generate(cfg, seed, count)?;
            ds.save(&out)?;
            eprintln!("wrote {} scenes to {}", ds.scenes.len(), out.display());
        }
        Command::Train(args) => {
            let ds = Dataset::load(&args.data)?;
            let cfg = args.config(&ds.world.cfg, ds.world.vocab.len())?;
            let trips = ds.triplets()?;
            let (model, losses) = train(&cfg, &trips, |e, l| eprintln!("epoch {e} loss {l:.5}"))?;
            let classifier = if args.classifier_epochs > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(args.seed ^ 0xC1A5);
                let ex = relation_examples(&ds.world, &ds.scenes, &mut rng)?;
                let mut clf = RelClassifier::new(ds.world.cfg.dim, 32, args.seed);
                let curve = clf.train(&ex, args.classifier_epochs, 3e-3, args.seed)?;
                eprintln!("classifier loss {:.4}", curve.last().copied().unwrap_or(f64::NAN));
                Some(clf)
            } else {
                None
            };
            let ck = Checkpoint {
                config: CheckpointConfig { train: cfg, world: ds.world.cfg.clone(), losses },
                vocab: ds.world.vocab.clone(),
                model,
                classifier,
            };
            ck.save(&args.out)?;
        }
        Command::Caption { ckpt, scene, index, asg, beam, trace } => {
            let ck = Checkpoint::load(&ckpt)?;
            let world = ck.world()?;
            let scene = read_scene(&scene, index)?;
            let g: Asg = read_json(&asg)?;
            g.validate()?;
            let feats = world.features_for(&scene, &g)?;
            let best = ck.model.generate(&g, &feats, beam)?.into_iter().next().ok_or(Error::Usage("no hypothesis".into()))?;
            println!("{}", world.vocab.sentence(&best.tokens));
            if let Some(p) = trace {
                write_json(&p, &best.trace)?;
            }
        }
        Command::EvalControl { ckpt, data, report, beam } => {
            let ck = Checkpoint::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            if ds.world.cfg != ck.config.world {
                return Err(Error::Usage("dataset and checkpoint use different world configurations".into()));
            }
            let r = evaluate_control(&ck.model, &ds.world, &ds.triplets()?, beam.unwrap_or(ck.config.train.beam))?;
            write_json(&report, &r)?;
            print_json(&r.metrics)?;
        }
        Command::EvalDiversity { ckpt, data, samples, report, seed, limit } => {
            let ck = Checkpoint::load(&ckpt)?;
            let ds = Dataset::load(&data)?;
            if ds.world.cfg != ck.config.world {
                return Err(Error::Usage("dataset and checkpoint use different world configurations".into()));
            }
            let n = limit.unwrap_or(ds.scenes.len()).min(ds.scenes.len());
            let r = evaluate_diversity(&ck.model, &ds.world, &ds.scenes[..n], classifier(&ck)?, samples, seed)?;
            write_json(&report, &r)?;
            print_json(&(r.sampled, r.baseline))?;
        }
        Command::SampleAsg { scene, index, mode, seed, ckpt, out } => {
            let scene = read_scene(&scene, index)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = match mode {
                Mode::Subgraph => sample_subgraph(&full_asg(&scene), &mut rng)?,
                Mode::Auto => {
                    let path = ckpt.ok_or_else(|| Error::Usage("--mode auto needs --ckpt".into()))?;
                    let ck = Checkpoint::load(&path)?;
                    let proposals = jittered_proposals(&scene, &mut rng);
                    auto_generate_asg(&ck.world()?, &scene, &proposals, classifier(&ck)?, RELATION_THRESHOLD)?
                }
            };
            match out {
                Some(p) => write_json(&p, &g)?,
                None => println!("{}", serde_json::to_string(&g).map_err(|e| Error::Usage(e.to_string()))?),
            }
        }
        Command::Gradcheck { dim, seed } => {
            let r = model_grad_check(dim, seed)?;
            println!(r#"{{"max_rel_error": {:e}, "coordinates": {}}}"#, r.max_rel_error, r.coordinates);
            if !(r.max_rel_error < 1e-4) {
                return Err(Error::Usage(format!("gradient check failed: {:e}", r.max_rel_error)));
            }
        }
    }
    Ok(())
}

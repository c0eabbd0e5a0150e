//! Training loop, corpus generation and the controllability and diversity
//! evaluation drivers.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asg::{sample_subgraph, Asg, AsgBuilder};
use crate::encoder::FeatureBundle;
use crate::error::{Error, Result};
use crate::metrics::{control_report, div_n, self_cider_with, CiderD, GraphScore, MetricReport};
use crate::model::{Model, ModelConfig, Prepared};
use crate::num::{grad_check, Adam, GradCheckReport};
use crate::synth::{
    auto_generate_asg, full_asg, gen_scene, jittered_proposals, sample_training_asg, scene_seed, with_attribute_slots,
    RelClassifier, Scene, Triplet, World,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beam: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: d=64, batch 32, 30 epochs.
    pub fn new(vocab_size: usize) -> Self {
        Self { model: ModelConfig::new(64, vocab_size), lr: 2e-3, batch: 32, epochs: 30, seed: 0, beam: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) || self.batch == 0 || self.beam == 0 {
            return Err(Error::InvalidArgument(format!(
                "learning rate, batch and beam must be positive (lr={}, batch={}, beam={})",
                self.lr, self.batch, self.beam
            )));
        }
        Ok(())
    }
}

/// A scene and one graph-caption pair drawn from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub scene: Scene,
    pub triplet: Triplet,
}

/// `n` examples whose scenes use seeds `scene_seed(master, 0..n)`.
pub fn generate_corpus(world: &World, master: u64, n: usize) -> Result<Vec<Example>> {
    (0..n as u64)
        .map(|i| {
            let scene = gen_scene(&world.cfg, scene_seed(master, i))?;
            let mut rng = ChaCha8Rng::seed_from_u64(scene.seed ^ 0xA5A5_A5A5);
            let g = sample_training_asg(&scene, &mut rng);
            let triplet = world.make_triplet(&scene, &g)?;
            Ok(Example { scene, triplet })
        })
        .collect()
}

/// Teacher-forced training with per-batch token-mean cross entropy.
/// Returns the model and the mean loss per token of every epoch.
pub fn train<F: FnMut(usize, f64)>(cfg: &TrainConfig, data: &[Triplet], mut on_epoch: F) -> Result<(Model, Vec<f64>)> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    if cfg.epochs == 0 {
        return Ok((model, Vec::new()));
    }
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let prepared: Vec<Prepared> = data.iter().map(|t| Prepared::new(&t.asg)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut opt = Adam::new(cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut tokens) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            let batch_tokens: usize = chunk.iter().map(|&i| data[i].caption.len() + 1).sum();
            model.store_mut().zero_grad();
            for &i in chunk {
                let (loss, n, grads) = model.loss_and_grads(&prepared[i], &data[i].feats, &data[i].caption)?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { epoch, loss });
                }
                total += loss;
                tokens += n;
                model.store_mut().accumulate_scaled(&grads, 1.0 / batch_tokens as f64)?;
            }
            opt.step(model.store_mut())?;
        }
        let mean = total / tokens as f64;
        on_epoch(epoch, mean);
        curve.push(mean);
    }
    Ok((model, curve))
}

/// Best caption for a graph: beam search, or greedy when `beam` is 1.
pub fn caption(model: &Model, t: &Triplet, beam: usize) -> Result<Vec<usize>> {
    let hyps = model.generate(&t.asg, &t.feats, beam)?;
    Ok(hyps.into_iter().next().map(|h| h.tokens).unwrap_or_default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlInstance {
    pub generated: Vec<usize>,
    pub reference: Vec<usize>,
    #[serde(flatten)]
    pub graph: GraphScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReport {
    #[serde(flatten)]
    pub metrics: MetricReport,
    pub instances: Vec<ControlInstance>,
}

impl ControlReport {
    /// Fractions of instances whose object, attribute and relation counts
    /// each match the reference exactly.
    pub fn exact_match_rates(&self) -> [f64; 3] {
        let n = self.instances.len().max(1) as f64;
        let rate = |f: fn(&GraphScore) -> f64| self.instances.iter().filter(|i| f(&i.graph) == 0.0).count() as f64 / n;
        [rate(|g| g.g_o), rate(|g| g.g_a), rate(|g| g.g_r)]
    }
}

/// Decodes every test graph and scores it against its reference caption.
pub fn evaluate_control(model: &Model, world: &World, test: &[Triplet], beam: usize) -> Result<ControlReport> {
    let gen: Vec<Vec<usize>> = test.iter().map(|t| caption(model, t, beam)).collect::<Result<_>>()?;
    score_captions(world, gen, test.iter().map(|t| t.caption.clone()).collect())
}

pub fn score_captions(world: &World, gen: Vec<Vec<usize>>, refs: Vec<Vec<usize>>) -> Result<ControlReport> {
    let (metrics, per) = control_report(&gen, &refs, &world.vocab)?;
    let instances = gen
        .into_iter()
        .zip(refs)
        .zip(per)
        .map(|((generated, reference), graph)| ControlInstance { generated, reference, graph })
        .collect();
    Ok(ControlReport { metrics, instances })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDiversity {
    pub seed: u64,
    pub asgs: Vec<Asg>,
    pub captions: Vec<Vec<usize>>,
    pub baseline: Vec<Vec<usize>>,
}

/// Mean Div-1, Div-2 and self-similarity diversity over scenes; the last is
/// absent for fewer than two samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityScores {
    pub div1: f64,
    pub div2: f64,
    pub self_cider: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    pub samples: usize,
    pub sampled: DiversityScores,
    pub baseline: DiversityScores,
    pub scenes: Vec<SceneDiversity>,
}

fn diversity_scores(sets: &[Vec<Vec<usize>>]) -> Result<DiversityScores> {
    if sets.is_empty() {
        return Err(Error::Empty("scenes"));
    }
    let n = sets.len() as f64;
    let corpus: Vec<Vec<usize>> = sets.iter().flatten().cloned().collect();
    let cider = CiderD::new(&corpus)?;
    let (mut d1, mut d2, mut sc) = (0.0, 0.0, 0.0);
    let mut with_pairs = true;
    for s in sets {
        d1 += div_n(s, 1)?;
        d2 += div_n(s, 2)?;
        if s.len() >= 2 {
            sc += self_cider_with(&cider, s)?;
        } else {
            with_pairs = false;
        }
    }
    Ok(DiversityScores { div1: d1 / n, div2: d2 / n, self_cider: with_pairs.then_some(sc / n) })
}

/// One object of `full`, with its first attribute attached half the time.
pub fn single_object_subgraph<R: Rng + ?Sized>(full: &Asg, rng: &mut R) -> Result<Asg> {
    let objects: Vec<usize> = full.ids_with_role(crate::asg::NodeRole::Object).collect();
    let &o = objects.choose(rng).ok_or(Error::Empty("objects"))?;
    let mut b = AsgBuilder::new();
    let id = b.object(full.nodes()[o].region);
    if !full.attributes_of(o).is_empty() && rng.random_bool(0.5) {
        b.attribute(id);
    }
    Ok(b.build())
}

/// Up to `samples` distinct subgraphs of `full`; repeats once distinct ones
/// run out. Graphs without relationships yield single-object subgraphs.
pub fn distinct_subgraphs(full: &Asg, samples: usize, seed: u64) -> Result<Vec<Asg>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Asg> = Vec::with_capacity(samples);
    let mut attempts = 0;
    while out.len() < samples {
        let g = match sample_subgraph(full, &mut rng) {
            Ok(g) => g,
            Err(Error::NoRelationships) => single_object_subgraph(full, &mut rng)?,
            Err(e) => return Err(e),
        };
        attempts += 1;
        if attempts > 50 * samples || !out.contains(&g) {
            out.push(g);
        }
    }
    Ok(out)
}

/// Per scene: an automatically built graph, `samples` sampled subgraphs of
/// it decoded once each, against the top `samples` beams of the first
/// subgraph alone.
pub fn evaluate_diversity(
    model: &Model,
    world: &World,
    scenes: &[Scene],
    clf: &RelClassifier,
    samples: usize,
    seed: u64,
) -> Result<DiversityReport> {
    if samples == 0 {
        return Err(Error::InvalidArgument("at least one sample per scene".into()));
    }
    let mut out = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(seed, i as u64));
        let proposals = jittered_proposals(scene, &mut rng);
        let auto = auto_generate_asg(world, scene, &proposals, clf, crate::synth::RELATION_THRESHOLD)?;
        let full = with_attribute_slots(&auto);
        let asgs = distinct_subgraphs(&full, samples, scene_seed(seed ^ 0xD1, i as u64))?;
        let mut captions = Vec::with_capacity(samples);
        for g in &asgs {
            let feats = world.features_for(scene, g)?;
            captions.push(model.generate(g, &feats, 1)?.remove(0).tokens);
        }
        let feats = world.features_for(scene, &asgs[0])?;
        let mut hyps = model.generate(&asgs[0], &feats, samples.max(2))?;
        hyps.truncate(samples);
        let mut baseline: Vec<Vec<usize>> = hyps.into_iter().map(|h| h.tokens).collect();
        while baseline.len() < samples {
            baseline.push(baseline[0].clone());
        }
        out.push(SceneDiversity { seed: scene.seed, asgs, captions, baseline });
    }
    let sampled = diversity_scores(&out.iter().map(|s| s.captions.clone()).collect::<Vec<_>>())?;
    let baseline = diversity_scores(&out.iter().map(|s| s.baseline.clone()).collect::<Vec<_>>())?;
    Ok(DiversityReport { samples, sampled, baseline, scenes: out })
}

/// `g` with one more attribute node on `object`, appended last in its order.
pub fn add_attribute(g: &Asg, object: usize) -> Result<Asg> {
    if object >= g.len() || g.role(object) != crate::asg::NodeRole::Object {
        return Err(Error::InvalidArgument(format!("node {object} is not an object")));
    }
    let mut nodes = g.nodes().to_vec();
    let id = nodes.len();
    nodes.push(crate::asg::AsgNode { id, role: crate::asg::NodeRole::Attribute, region: g.nodes()[object].region });
    let mut edges = g.edges().to_vec();
    edges.push((object, id));
    let out = Asg::from_parts(nodes, edges);
    out.validate()?;
    Ok(out)
}

/// Up to `n` pairs `(original, original plus one attribute)` where the
/// added attribute exists in the scene, choosing the object at random.
pub fn attribute_perturbations(world: &World, examples: &[Example], n: usize, seed: u64) -> Result<Vec<(Triplet, Triplet)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for e in examples {
        if out.len() == n {
            break;
        }
        let g = &e.triplet.asg;
        let open: Vec<usize> = g
            .ids_with_role(crate::asg::NodeRole::Object)
            .filter(|&o| {
                let have = g.attributes_of(o).len();
                have < e.scene.objects[g.nodes()[o].region].attributes.len() && have < world.cfg.max_attributes
            })
            .collect();
        if let Some(&o) = open.choose(&mut rng) {
            let bigger = add_attribute(g, o)?;
            out.push((e.triplet.clone(), world.make_triplet(&e.scene, &bigger)?));
        }
    }
    Ok(out)
}

/// Triplets for each scene's full graph, used as held-out control targets.
pub fn full_graph_triplets(world: &World, scenes: &[Scene]) -> Result<Vec<Triplet>> {
    scenes.iter().map(|s| world.make_triplet(s, &full_asg(s))).collect()
}

/// Gradient check of the whole model on a five-node graph (two objects,
/// two attributes, one relationship) and a six-token caption.
pub fn model_grad_check(dim: usize, seed: u64) -> Result<GradCheckReport> {
    const VOCAB: usize = 20;
    let model = Model::new(ModelConfig::new(dim, VOCAB), seed)?;
    let mut b = AsgBuilder::new();
    let o0 = b.object(0);
    let o1 = b.object(1);
    b.attribute(o0);
    b.attribute(o1);
    b.relationship(o0, o1);
    let g = b.build();
    let prep = Prepared::new(&g)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6C);
    let mut vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let feats = FeatureBundle { nodes: (0..g.len()).map(|_| vec(dim)).collect(), global: vec(dim) };
    let caption: Vec<usize> = (0..6).map(|_| rng.random_range(4..VOCAB)).collect();
    let mut store = model.store().clone();
    grad_check(&mut store, 1e-5, |tape| Ok(model.sequence_loss(tape, &prep, &feats, &caption)?.0))
}

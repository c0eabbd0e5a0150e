//! Automatic graph construction: jittered proposals, SoftNMS and a
//! three-way relationship classifier.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::corpus::World;
use super::scene::{BBox, Scene};
use crate::asg::{Asg, AsgBuilder};
use crate::error::{Error, Result};
use crate::num::{math, Adam, ParamId, ParamStore, Tape, Tensor};

/// Scores decayed below this are dropped by SoftNMS.
pub const NMS_FLOOR: f64 = 0.001;
pub const NMS_SIGMA: f64 = 0.5;
/// Decayed score a proposal needs to become an object node.
pub const OBJECT_SCORE_MIN: f64 = 0.5;
pub const RELATION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub score: f64,
}

/// Gaussian SoftNMS. Returns `(index, decayed score)` in selection order,
/// which is non-increasing in decayed score.
pub fn soft_nms(boxes: &[BBox], scores: &[f64], sigma: f64) -> Result<Vec<(usize, f64)>> {
    if boxes.len() != scores.len() {
        return Err(Error::InvalidArgument(format!("{} boxes but {} scores", boxes.len(), scores.len())));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::InvalidArgument(format!("score {s} outside [0, 1]")));
    }
    let mut live: Vec<(usize, f64)> = scores.iter().copied().enumerate().filter(|&(_, s)| s >= NMS_FLOOR).collect();
    let mut kept = Vec::with_capacity(live.len());
    while !live.is_empty() {
        let mut best = 0;
        for (k, &(i, s)) in live.iter().enumerate() {
            let (bi, bs) = live[best];
            if s > bs || (s == bs && i < bi) {
                best = k;
            }
        }
        let (top, top_score) = live.remove(best);
        kept.push((top, top_score));
        for entry in live.iter_mut() {
            let iou = boxes[top].iou(&boxes[entry.0]);
            entry.1 *= math::exp(-iou * iou / sigma);
        }
        live.retain(|&(_, s)| s >= NMS_FLOOR);
    }
    Ok(kept)
}

/// Three proposals per true object: one tight, two looser, with noisy scores.
pub fn jittered_proposals<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Vec<Proposal> {
    let mut out = Vec::with_capacity(scene.objects.len() * 3);
    for obj in &scene.objects {
        for (k, (spread, lo, hi)) in [(0.02, 0.8, 1.0), (0.06, 0.4, 0.9), (0.06, 0.4, 0.9)].into_iter().enumerate() {
            let jitter = Normal::new(0.0, spread).expect("finite spread");
            let b = obj.bbox;
            let w = (b.w * (1.0 + jitter.sample(rng))).clamp(0.02, 1.0);
            let h = (b.h * (1.0 + jitter.sample(rng))).clamp(0.02, 1.0);
            let x = (b.x + jitter.sample(rng) * b.w).clamp(0.0, 1.0 - w);
            let y = (b.y + jitter.sample(rng) * b.h).clamp(0.0, 1.0 - h);
            let score = if k == 0 { rng.random_range(lo..hi) } else { rng.random_range(lo..hi) * 0.95 };
            out.push(Proposal { bbox: BBox { x, y, w, h }, score });
        }
    }
    out.shuffle(rng);
    out
}

/// `(Δcx, Δcy, ln(w_j/w_i), ln(h_j/h_i), IoU)` of box `j` relative to box `i`.
pub fn spatial_feature(i: &BBox, j: &BBox) -> [f64; 5] {
    let (ci, cj) = (i.center(), j.center());
    [cj.0 - ci.0, cj.1 - ci.1, math::ln(j.w / i.w), math::ln(j.h / i.h), i.iou(j)]
}

/// Two-layer relu network over `[global; region_i; region_j; spatial]`
/// predicting {no relation, i→j, j→i}.
#[derive(Debug, Clone, PartialEq)]
pub struct RelClassifier {
    pub store: ParamStore,
    pub dim: usize,
    pub hidden: usize,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// One labelled classifier input.
#[derive(Debug, Clone, PartialEq)]
pub struct RelExample {
    pub input: Vec<f64>,
    pub label: usize,
}

fn classifier_input(global: &[f64], fi: &[f64], fj: &[f64], spatial: &[f64; 5]) -> Vec<f64> {
    let mut v = Vec::with_capacity(global.len() * 3 + 5);
    v.extend_from_slice(global);
    v.extend_from_slice(fi);
    v.extend_from_slice(fj);
    v.extend_from_slice(spatial);
    v
}

impl RelClassifier {
    pub fn new(dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let input = 3 * dim + 5;
        let w1 = store.add_normal("rel.w1", input, hidden, 1.0 / libm::sqrt(input as f64), &mut rng);
        let b1 = store.add("rel.b1", Tensor::zeros(&[1, hidden]));
        let w2 = store.add_normal("rel.w2", hidden, 3, 1.0 / libm::sqrt(hidden as f64), &mut rng);
        let b2 = store.add("rel.b2", Tensor::zeros(&[1, 3]));
        Self { store, dim, hidden, w1, b1, w2, b2 }
    }

    pub fn from_store(store: ParamStore, dim: usize) -> Result<Self> {
        let find = |n: &str| store.find(n).ok_or_else(|| Error::InvalidArgument(format!("missing parameter {n}")));
        let (w1, b1, w2, b2) = (find("rel.w1")?, find("rel.b1")?, find("rel.w2")?, find("rel.b2")?);
        let hidden = store.value(w1).cols();
        if store.value(w1).rows() != 3 * dim + 5 || store.value(w2).shape() != [hidden, 3] {
            return Err(Error::InvalidArgument("relation classifier shapes do not match the feature size".into()));
        }
        Ok(Self { store, dim, hidden, w1, b1, w2, b2 })
    }

    fn logits(&self, tape: &mut Tape<'_>, inputs: Tensor) -> Result<crate::num::Var> {
        let x = tape.input(inputs);
        let w1 = tape.param(self.w1);
        let b1 = tape.param(self.b1);
        let h = tape.affine(x, w1, b1)?;
        let h = tape.relu(h)?;
        let w2 = tape.param(self.w2);
        let b2 = tape.param(self.b2);
        tape.affine(h, w2, b2)
    }

    pub fn probs(&self, global: &[f64], fi: &[f64], fj: &[f64], spatial: &[f64; 5]) -> Result<[f64; 3]> {
        let input = classifier_input(global, fi, fj, spatial);
        let mut tape = Tape::with_params(&self.store);
        let logits = self.logits(&mut tape, Tensor::row(input))?;
        let p = tape.softmax(logits)?;
        let d = tape.value(p).data();
        Ok([d[0], d[1], d[2]])
    }

    /// Mean cross entropy of a batch, and its gradients accumulated into the store.
    fn batch_step(&mut self, batch: &[&RelExample]) -> Result<f64> {
        let width = 3 * self.dim + 5;
        let data: Vec<f64> = batch.iter().flat_map(|e| e.input.iter().copied()).collect();
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let grads = {
            let mut tape = Tape::with_params(&self.store);
            let logits = self.logits(&mut tape, Tensor::matrix(batch.len(), width, data)?)?;
            let logp = tape.log_softmax(logits)?;
            let picked = tape.pick(logp, &labels)?;
            let mean = tape.mean(picked)?;
            let loss = tape.scale(mean, -1.0)?;
            (tape.value(loss).item(), tape.backward(loss)?)
        };
        self.store.zero_grad();
        self.store.accumulate(&grads.1)?;
        Ok(grads.0)
    }

    /// Trains with Adam; returns the mean loss of every epoch.
    pub fn train(&mut self, examples: &[RelExample], epochs: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
        if examples.is_empty() {
            return Err(Error::Empty("relation examples"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut opt = Adam::new(lr);
        let mut order: Vec<usize> = (0..examples.len()).collect();
        let mut curve = Vec::with_capacity(epochs);
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(32) {
                let batch: Vec<&RelExample> = chunk.iter().map(|&i| &examples[i]).collect();
                total += self.batch_step(&batch)? * batch.len() as f64;
                opt.step(&mut self.store)?;
            }
            curve.push(total / examples.len() as f64);
        }
        Ok(curve)
    }

    pub fn accuracy(&self, examples: &[RelExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Empty("relation examples"));
        }
        let mut hits = 0;
        let d = self.dim;
        for e in examples {
            let spatial: [f64; 5] = e.input[3 * d..].try_into().expect("five spatial values");
            let p = self.probs(&e.input[..d], &e.input[d..2 * d], &e.input[2 * d..3 * d], &spatial)?;
            let arg = (0..3).fold(0, |b, k| if p[k] > p[b] { k } else { b });
            hits += usize::from(arg == e.label);
        }
        Ok(hits as f64 / examples.len() as f64)
    }
}

/// Classifier examples from ground-truth scenes with labels balanced 2:1:1
/// (none : subject→object : object→subject).
pub fn relation_examples<R: Rng + ?Sized>(world: &World, scenes: &[Scene], rng: &mut R) -> Result<Vec<RelExample>> {
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for scene in scenes {
        let global = world.global_vector(scene)?;
        let feats: Vec<Vec<f64>> = (0..scene.objects.len()).map(|r| world.object_vector(scene, r)).collect::<Result<_>>()?;
        let bbox = |r: usize| scene.objects[r].bbox;
        for i in 0..scene.objects.len() {
            for j in i + 1..scene.objects.len() {
                let sp = |a: usize, b: usize| spatial_feature(&bbox(a), &bbox(b));
                let related = scene.relation_between(i, j).is_some() || scene.relation_between(j, i).is_some();
                if related {
                    let (s, o) = if scene.relation_between(i, j).is_some() { (i, j) } else { (j, i) };
                    positives.push(RelExample { input: classifier_input(&global, &feats[s], &feats[o], &sp(s, o)), label: 1 });
                    positives.push(RelExample { input: classifier_input(&global, &feats[o], &feats[s], &sp(o, s)), label: 2 });
                } else {
                    let (a, b) = if rng.random_bool(0.5) { (i, j) } else { (j, i) };
                    negatives.push(RelExample { input: classifier_input(&global, &feats[a], &feats[b], &sp(a, b)), label: 0 });
                }
            }
        }
    }
    negatives.shuffle(rng);
    negatives.truncate(positives.len());
    positives.extend(negatives);
    positives.shuffle(rng);
    Ok(positives)
}

/// Object nodes from SoftNMS-filtered proposals (each matched to its
/// highest-IoU scene region, duplicates dropped) and a relationship node for
/// every pair whose no-relation probability is below `threshold`.
pub fn auto_generate_asg(
    world: &World,
    scene: &Scene,
    proposals: &[Proposal],
    clf: &RelClassifier,
    threshold: f64,
) -> Result<Asg> {
    if proposals.is_empty() {
        return Err(Error::Empty("proposals"));
    }
    let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
    let scores: Vec<f64> = proposals.iter().map(|p| p.score).collect();
    let kept = soft_nms(&boxes, &scores, NMS_SIGMA)?;
    let mut chosen: Vec<(usize, BBox)> = Vec::new();
    for (rank, &(idx, score)) in kept.iter().enumerate() {
        if rank > 0 && score < OBJECT_SCORE_MIN {
            break;
        }
        let b = boxes[idx];
        let region = (0..scene.objects.len())
            .fold(None, |best: Option<(usize, f64)>, r| {
                let iou = b.iou(&scene.objects[r].bbox);
                match best {
                    Some((_, bi)) if bi >= iou => best,
                    _ => Some((r, iou)),
                }
            })
            .map(|(r, _)| r)
            .ok_or(Error::Empty("scene objects"))?;
        if !chosen.iter().any(|&(r, _)| r == region) {
            chosen.push((region, b));
        }
    }
    let global = world.global_vector(scene)?;
    let feats: Vec<Vec<f64>> = chosen.iter().map(|&(r, _)| world.object_vector(scene, r)).collect::<Result<_>>()?;
    let mut b = AsgBuilder::new();
    let ids: Vec<usize> = chosen.iter().map(|&(r, _)| b.object(r)).collect();
    for i in 0..chosen.len() {
        for j in i + 1..chosen.len() {
            let p = clf.probs(&global, &feats[i], &feats[j], &spatial_feature(&chosen[i].1, &chosen[j].1))?;
            if p[0] < threshold {
                if p[1] >= p[2] {
                    b.relationship(ids[i], ids[j]);
                } else {
                    b.relationship(ids[j], ids[i]);
                }
            }
        }
    }
    Ok(b.build())
}

/// Attaches one attribute node to every object lacking one, since an
/// attribute can always be asked for.
pub fn with_attribute_slots(g: &Asg) -> Asg {
    let mut b = AsgBuilder::new();
    let mut map = vec![usize::MAX; g.len()];
    for o in g.ids_with_role(crate::asg::NodeRole::Object) {
        map[o] = b.object(g.nodes()[o].region);
    }
    for o in g.ids_with_role(crate::asg::NodeRole::Object) {
        let k = g.attributes_of(o).len().max(1);
        for _ in 0..k {
            b.attribute(map[o]);
        }
    }
    for r in g.ids_with_role(crate::asg::NodeRole::Relationship) {
        let (s, o) = g.endpoints(r).expect("valid graph");
        b.relationship(map[s], map[o]);
    }
    b.build()
}

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::lexicon::Vocab;
use super::scene::{scene_seed, Scene, WorldConfig};
use crate::asg::{Asg, AsgBuilder, NodeRole};
use crate::encoder::FeatureBundle;
use crate::error::{Error, Result};

/// Salt separating relationship-region noise streams from object streams.
const UNION_SALT: u64 = 0x5EED_0F_0A11_0A11;

/// Fixed random unit vectors per class, attribute and relation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub classes: Vec<Vec<f64>>,
    pub attributes: Vec<Vec<f64>>,
    pub relations: Vec<Vec<f64>>,
}

fn unit_vectors(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let norm = libm::sqrt(v.iter().map(|x| x * x).sum());
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

impl Prototypes {
    pub fn new(cfg: &WorldConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.prototype_seed);
        Self {
            classes: unit_vectors(&mut rng, cfg.object_classes, cfg.dim),
            attributes: unit_vectors(&mut rng, cfg.attribute_classes, cfg.dim),
            relations: unit_vectors(&mut rng, cfg.relation_classes, cfg.dim),
        }
    }
}

/// World configuration with its prototypes and vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub cfg: WorldConfig,
    pub protos: Prototypes,
    pub vocab: Vocab,
}

/// One `(features, graph, caption)` training or evaluation example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub feats: FeatureBundle,
    pub asg: Asg,
    pub caption: Vec<usize>,
}

fn noise(seed: u64, dim: usize, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..dim).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect()
}

fn add_into(acc: &mut [f64], v: &[f64], w: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += w * b;
    }
}

impl World {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        cfg.validate()?;
        let protos = Prototypes::new(&cfg);
        let vocab = Vocab::for_world(&cfg);
        Ok(Self { cfg, protos, vocab })
    }

    fn check_region(scene: &Scene, region: usize) -> Result<()> {
        if region >= scene.objects.len() {
            return Err(Error::DanglingRegion { region, available: scene.objects.len() });
        }
        Ok(())
    }

    /// Region feature of scene object `region`: class prototype, attribute
    /// prototypes and per-region noise.
    pub fn object_vector(&self, scene: &Scene, region: usize) -> Result<Vec<f64>> {
        Self::check_region(scene, region)?;
        let obj = &scene.objects[region];
        let proto = self.protos.classes.get(obj.class).ok_or_else(|| Error::Ungrounded {
            node: region,
            detail: format!("object class {} outside the world", obj.class),
        })?;
        let mut v = proto.clone();
        for &a in &obj.attributes {
            let p = self.protos.attributes.get(a).ok_or_else(|| Error::Ungrounded {
                node: region,
                detail: format!("attribute class {a} outside the world"),
            })?;
            add_into(&mut v, p, 1.0);
        }
        add_into(&mut v, &noise(scene_seed(scene.seed, region as u64), self.cfg.dim, self.cfg.noise), 1.0);
        Ok(v)
    }

    /// Union-region feature of an ordered object pair.
    pub fn union_vector(&self, scene: &Scene, subject: usize, object: usize) -> Result<Vec<f64>> {
        let s = self.object_vector(scene, subject)?;
        let o = self.object_vector(scene, object)?;
        let mut v: Vec<f64> = s.iter().zip(&o).map(|(a, b)| 0.5 * (a + b)).collect();
        if let Some(rel) = scene.relation_between(subject, object) {
            add_into(&mut v, &self.protos.relations[rel.predicate], 1.0);
        }
        let key = (subject as u64) << 32 | object as u64;
        add_into(&mut v, &noise(scene_seed(scene.seed ^ UNION_SALT, key), self.cfg.dim, self.cfg.noise), 1.0);
        Ok(v)
    }

    /// Mean of all object region features of the scene.
    pub fn global_vector(&self, scene: &Scene) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.cfg.dim];
        let n = scene.objects.len();
        if n == 0 {
            return Err(Error::Empty("scene objects"));
        }
        for r in 0..n {
            add_into(&mut g, &self.object_vector(scene, r)?, 1.0 / n as f64);
        }
        Ok(g)
    }

    pub fn features_for(&self, scene: &Scene, g: &Asg) -> Result<FeatureBundle> {
        let mut nodes = Vec::with_capacity(g.len());
        for node in g.nodes() {
            let v = match node.role {
                NodeRole::Object => self.object_vector(scene, node.region)?,
                NodeRole::Attribute => {
                    let parent = g.parent_object(node.id).ok_or_else(|| Error::Ungrounded {
                        node: node.id,
                        detail: "attribute without object".into(),
                    })?;
                    self.object_vector(scene, g.nodes()[parent].region)?
                }
                NodeRole::Relationship => {
                    let (s, o) = g.endpoints(node.id).ok_or_else(|| Error::Ungrounded {
                        node: node.id,
                        detail: "relationship without endpoints".into(),
                    })?;
                    self.union_vector(scene, g.nodes()[s].region, g.nodes()[o].region)?
                }
            };
            nodes.push(v);
        }
        Ok(FeatureBundle { nodes, global: self.global_vector(scene)? })
    }

    /// Renders the caption a graph asks for. The k-th attribute node of an
    /// object denotes the object's k-th attribute; relationship nodes denote
    /// the scene relation between their endpoint regions.
    pub fn render_caption(&self, scene: &Scene, g: &Asg) -> Result<Vec<usize>> {
        g.validate()?;
        let v = &self.vocab;
        for node in g.nodes() {
            Self::check_region(scene, node.region)?;
        }
        let attrs_of = |o: usize| -> Result<Vec<usize>> {
            let obj = &scene.objects[g.nodes()[o].region];
            let attrs = g.attributes_of(o);
            if attrs.len() > obj.attributes.len() {
                return Err(Error::Ungrounded {
                    node: attrs[obj.attributes.len()],
                    detail: format!("region {} has only {} attributes", g.nodes()[o].region, obj.attributes.len()),
                });
            }
            Ok(obj.attributes[..attrs.len()].iter().map(|&a| v.attribute_word(a)).collect())
        };
        let class_word = |o: usize| v.object_word(scene.objects[g.nodes()[o].region].class);
        let mut mentioned = vec![false; g.len()];
        let mut clauses: Vec<Vec<usize>> = Vec::new();
        let phrase = |o: usize, mentioned: &mut Vec<bool>| -> Result<Vec<usize>> {
            if mentioned[o] {
                return Ok(vec![v.that(), class_word(o)]);
            }
            mentioned[o] = true;
            let mut p = vec![v.the()];
            p.extend(attrs_of(o)?);
            p.push(class_word(o));
            Ok(p)
        };
        for r in g.ids_with_role(NodeRole::Relationship) {
            let (s, o) = g.endpoints(r).expect("validated");
            let (sr, or) = (g.nodes()[s].region, g.nodes()[o].region);
            let rel = scene.relation_between(sr, or).ok_or_else(|| Error::Ungrounded {
                node: r,
                detail: format!("no relation from region {sr} to region {or}"),
            })?;
            let mut clause = phrase(s, &mut mentioned)?;
            clause.push(v.relation_word(rel.predicate));
            clause.extend(phrase(o, &mut mentioned)?);
            clauses.push(clause);
        }
        for o in g.ids_with_role(NodeRole::Object) {
            if !mentioned[o] {
                let mut clause = vec![v.there(), v.is(), v.a()];
                clause.extend(attrs_of(o)?);
                clause.push(class_word(o));
                clauses.push(clause);
            }
        }
        let mut out = Vec::new();
        for (i, c) in clauses.into_iter().enumerate() {
            if i > 0 {
                out.push(v.and());
            }
            out.extend(c);
        }
        Ok(out)
    }

    pub fn make_triplet(&self, scene: &Scene, sub: &Asg) -> Result<Triplet> {
        let caption = self.render_caption(scene, sub)?;
        let feats = self.features_for(scene, sub)?;
        Ok(Triplet { feats, asg: sub.clone(), caption })
    }
}

/// Every object, attribute and relation of the scene as one graph.
pub fn full_asg(scene: &Scene) -> Asg {
    let mut b = AsgBuilder::new();
    let objs: Vec<usize> = (0..scene.objects.len()).map(|r| b.object(r)).collect();
    for (r, o) in scene.objects.iter().enumerate() {
        for _ in &o.attributes {
            b.attribute(objs[r]);
        }
    }
    for rel in &scene.relations {
        b.relationship(objs[rel.subject], objs[rel.object]);
    }
    b.build()
}

/// Builds a graph from object regions (each with a number of leading
/// attributes) and relations given as region pairs.
fn assemble(objects: &[(usize, usize)], relations: &[(usize, usize)]) -> Asg {
    let mut b = AsgBuilder::new();
    let ids: Vec<usize> = objects.iter().map(|&(r, _)| b.object(r)).collect();
    for (&(_, k), &id) in objects.iter().zip(&ids) {
        for _ in 0..k {
            b.attribute(id);
        }
    }
    let node_of = |region: usize| ids[objects.iter().position(|&(r, _)| r == region).expect("endpoint listed")];
    for &(s, o) in relations {
        b.relationship(node_of(s), node_of(o));
    }
    b.build()
}

/// Training-graph mixture: a single object with leading attributes (35%),
/// one triple with up to two attributes per endpoint (45%), or two triples
/// with up to one attribute per object (20%).
pub fn sample_training_asg<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Asg {
    let u: f64 = rng.random();
    let attrs = |region: usize, cap: usize, rng: &mut R| {
        let avail = scene.objects[region].attributes.len().min(cap);
        rng.random_range(0..=avail)
    };
    if u < 0.35 || scene.relations.is_empty() {
        let r = rng.random_range(0..scene.objects.len());
        let k = attrs(r, usize::MAX, rng);
        return assemble(&[(r, k)], &[]);
    }
    if u < 0.80 || scene.relations.len() < 2 {
        let rel = scene.relations.choose(rng).expect("non-empty");
        let ks = attrs(rel.subject, 2, rng);
        let ko = attrs(rel.object, 2, rng);
        return assemble(&[(rel.subject, ks), (rel.object, ko)], &[(rel.subject, rel.object)]);
    }
    let picked: Vec<_> = scene.relations.choose_multiple(rng, 2).copied().collect();
    let mut regions: Vec<usize> = Vec::new();
    for r in &picked {
        for x in [r.subject, r.object] {
            if !regions.contains(&x) {
                regions.push(x);
            }
        }
    }
    let objects: Vec<(usize, usize)> = regions.iter().map(|&r| (r, attrs(r, 1, rng))).collect();
    let rels: Vec<(usize, usize)> = picked.iter().map(|r| (r.subject, r.object)).collect();
    assemble(&objects, &rels)
}

/// A random graph grounded in `scene`: a random subset of relations, a
/// random subset of further objects, and random leading-attribute counts.
/// Node ids are shuffled object-first.
pub fn random_grounded_asg<R: Rng + ?Sized>(scene: &Scene, rng: &mut R) -> Asg {
    let mut rels: Vec<(usize, usize)> =
        scene.relations.iter().filter(|_| rng.random_bool(0.5)).map(|r| (r.subject, r.object)).collect();
    rels.shuffle(rng);
    let mut regions: Vec<usize> = Vec::new();
    for &(s, o) in &rels {
        for x in [s, o] {
            if !regions.contains(&x) {
                regions.push(x);
            }
        }
    }
    for r in 0..scene.objects.len() {
        if !regions.contains(&r) && (regions.is_empty() || rng.random_bool(0.3)) {
            regions.push(r);
        }
    }
    regions.shuffle(rng);
    let objects: Vec<(usize, usize)> =
        regions.iter().map(|&r| (r, rng.random_range(0..=scene.objects[r].attributes.len()))).collect();
    assemble(&objects, &rels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::scene::{gen_scene, BBox, Relation, SceneObject};

    fn world(noise: f64) -> World {
        World::new(WorldConfig { noise, ..Default::default() }).unwrap()
    }

    fn toy_scene() -> Scene {
        let obj = |class, attributes: Vec<usize>, x| SceneObject { class, attributes, bbox: BBox { x, y: 0.1, w: 0.2, h: 0.2 } };
        Scene {
            objects: vec![obj(0, vec![0], 0.1), obj(3, vec![], 0.6), obj(4, vec![1, 2], 0.3)],
            relations: vec![Relation { subject: 0, predicate: 0, object: 1 }, Relation { subject: 1, predicate: 5, object: 2 }],
            seed: 17,
        }
    }

    fn words(w: &World, ids: &[usize]) -> alloc::string::String {
        w.vocab.sentence(ids)
    }

    #[test]
    fn noiseless_object_feature_is_prototype_sum() {
        let w = world(0.0);
        let s = toy_scene();
        let v = w.object_vector(&s, 2).unwrap();
        for i in 0..w.cfg.dim {
            let expect = w.protos.classes[4][i] + w.protos.attributes[1][i] + w.protos.attributes[2][i];
            assert_eq!(v[i], expect);
        }
    }

    #[test]
    fn attribute_nodes_copy_their_object() {
        let w = world(0.1);
        let s = toy_scene();
        let g = full_asg(&s);
        let f = w.features_for(&s, &g).unwrap();
        for a in g.ids_with_role(NodeRole::Attribute) {
            let o = g.parent_object(a).unwrap();
            assert_eq!(f.nodes[a], f.nodes[o]);
        }
        assert_eq!(f.nodes.len(), g.len());
    }

    #[test]
    fn dangling_region_is_reported() {
        let w = world(0.1);
        let mut b = AsgBuilder::new();
        b.object(9);
        let g = b.build();
        assert_eq!(w.features_for(&toy_scene(), &g), Err(Error::DanglingRegion { region: 9, available: 3 }));
    }

    #[test]
    fn same_class_objects_are_closer_than_cross_class() {
        let w = world(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = libm::sqrt(a.iter().map(|x| x * x).sum());
            let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
            dot / (na * nb)
        };
        let bbox = BBox { x: 0.0, y: 0.0, w: 0.1, h: 0.1 };
        let mut wins = 0;
        for _ in 0..10_000 {
            let c = rng.random_range(0..8);
            let mut c2 = rng.random_range(0..8);
            while c2 == c {
                c2 = rng.random_range(0..8);
            }
            let objects = [c, c, c2].iter().map(|&class| SceneObject { class, attributes: vec![], bbox }).collect();
            let s = Scene { objects, relations: vec![], seed: rng.random() };
            let v: Vec<Vec<f64>> = (0..3).map(|r| w.object_vector(&s, r).unwrap()).collect();
            if cos(&v[0], &v[1]) > cos(&v[0], &v[2]) {
                wins += 1;
            }
        }
        assert!(wins >= 9_900, "{wins}");
    }

    #[test]
    fn render_templates() {
        let w = world(0.1);
        let s = toy_scene();
        let mut b = AsgBuilder::new();
        let o = b.object(0);
        b.attribute(o);
        assert_eq!(words(&w, &w.render_caption(&s, &b.build()).unwrap()), "there is a red ball");

        let mut b = AsgBuilder::new();
        let o1 = b.object(0);
        let o2 = b.object(1);
        b.relationship(o1, o2);
        assert_eq!(words(&w, &w.render_caption(&s, &b.build()).unwrap()), "the ball left-of the cat");

        let g = full_asg(&s);
        assert_eq!(
            words(&w, &w.render_caption(&s, &g).unwrap()),
            "the red ball left-of the cat and that cat watches the blue green box"
        );
    }

    #[test]
    fn ungrounded_graphs_are_rejected() {
        let w = world(0.1);
        let s = toy_scene();
        let mut b = AsgBuilder::new();
        let o = b.object(1);
        b.attribute(o);
        assert!(matches!(w.render_caption(&s, &b.build()), Err(Error::Ungrounded { .. })));
        let mut b = AsgBuilder::new();
        let o1 = b.object(1);
        let o2 = b.object(0);
        b.relationship(o1, o2);
        assert!(matches!(w.render_caption(&s, &b.build()), Err(Error::Ungrounded { .. })));
    }

    #[test]
    fn triplets_are_deterministic_and_unlabeled() {
        let w = world(0.1);
        let s = gen_scene(&w.cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = sample_training_asg(&s, &mut rng);
        let t = w.make_triplet(&s, &g).unwrap();
        assert_eq!(t, w.make_triplet(&s, &g).unwrap());
        let json = serde_json::to_value(&t.asg).unwrap();
        for node in json["nodes"].as_array().unwrap() {
            let mut keys: Vec<_> = node.as_object().unwrap().keys().cloned().collect();
            keys.sort();
            assert_eq!(keys, ["id", "region", "role"]);
        }
    }

    #[test]
    fn sampled_graphs_are_valid_grounded_and_short() {
        let w = world(0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut longest = 0;
        for i in 0..2000 {
            let s = gen_scene(&w.cfg, scene_seed(3, i)).unwrap();
            for g in [sample_training_asg(&s, &mut rng), random_grounded_asg(&s, &mut rng)] {
                assert!(g.violations().is_empty());
                w.make_triplet(&s, &g).unwrap();
            }
            let g = sample_training_asg(&s, &mut rng);
            longest = longest.max(w.render_caption(&s, &g).unwrap().len());
        }
        assert!(longest <= 16, "{longest}");
    }
}

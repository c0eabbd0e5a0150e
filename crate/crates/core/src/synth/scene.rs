use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of relation classes decided by box geometry; they come first.
pub const SPATIAL_RELATIONS: usize = 4;
pub const LEFT_OF: usize = 0;
pub const RIGHT_OF: usize = 1;
pub const ABOVE: usize = 2;
pub const BELOW: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub object_classes: usize,
    pub attribute_classes: usize,
    /// Includes the four spatial relations.
    pub relation_classes: usize,
    pub dim: usize,
    pub noise: f64,
    pub min_objects: usize,
    pub max_objects: usize,
    pub max_relations: usize,
    pub max_attributes: usize,
    pub prototype_seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            object_classes: 8,
            attribute_classes: 6,
            relation_classes: 7,
            dim: 64,
            noise: 0.1,
            min_objects: 2,
            max_objects: 6,
            max_relations: 4,
            max_attributes: 3,
            prototype_seed: 7,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidArgument(m));
        if self.object_classes < 2 || self.attribute_classes < 2 {
            return fail(format!("need at least two object and attribute classes"));
        }
        if self.relation_classes < SPATIAL_RELATIONS + 1 {
            return fail(format!("need the four spatial relations plus at least one more"));
        }
        if self.max_attributes > self.attribute_classes {
            return fail(format!("max_attributes exceeds the attribute classes"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return fail(format!("noise scale must be finite and non-negative"));
        }
        if self.min_objects < 2 || self.max_objects < self.min_objects || self.max_relations == 0 || self.dim == 0 {
            return fail(format!("object range must start at 2 and allow at least one relation"));
        }
        Ok(())
    }
}

/// Axis-aligned box `(x, y, w, h)` in the unit square, y pointing down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, o: &BBox) -> f64 {
        let ix = (self.x + self.w).min(o.x + o.w) - self.x.max(o.x);
        let iy = (self.y + self.h).min(o.y + o.h) - self.y.max(o.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + o.area() - inter)
    }

    pub fn inside_unit_square(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x >= 0.0 && self.y >= 0.0 && self.x + self.w <= 1.0 && self.y + self.h <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    /// Sorted ascending, so the k-th attribute node of an object is well defined.
    pub attributes: Vec<usize>,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Relation {
    pub subject: usize,
    pub predicate: usize,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub relations: Vec<Relation>,
    pub seed: u64,
}

impl Scene {
    pub fn relation_between(&self, subject: usize, object: usize) -> Option<&Relation> {
        self.relations.iter().find(|r| r.subject == subject && r.object == object)
    }
}

/// Seed of the `index`-th scene, independent of generation order.
pub fn scene_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Spatial predicate of `subject` relative to `object` from box centers.
pub fn spatial_relation(subject: &BBox, object: &BBox) -> usize {
    let (sx, sy) = subject.center();
    let (ox, oy) = object.center();
    let (dx, dy) = (sx - ox, sy - oy);
    if dx.abs() >= dy.abs() {
        if dx < 0.0 {
            LEFT_OF
        } else {
            RIGHT_OF
        }
    } else if dy < 0.0 {
        ABOVE
    } else {
        BELOW
    }
}

pub fn gen_scene(cfg: &WorldConfig, seed: u64) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut all_attrs: Vec<usize> = (0..cfg.attribute_classes).collect();
    let objects: Vec<SceneObject> = (0..n)
        .map(|_| {
            let class = rng.random_range(0..cfg.object_classes);
            let k = rng.random_range(0..=cfg.max_attributes);
            all_attrs.shuffle(&mut rng);
            let mut attributes = all_attrs[..k].to_vec();
            attributes.sort_unstable();
            let w = rng.random_range(0.1..0.4);
            let h = rng.random_range(0.1..0.4);
            let bbox = BBox { x: rng.random_range(0.0..1.0 - w), y: rng.random_range(0.0..1.0 - h), w, h };
            SceneObject { class, attributes, bbox }
        })
        .collect();

    // Unordered pairs weighted towards nearby objects.
    let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (objects[i].bbox.center(), objects[j].bbox.center());
            let dist = libm::sqrt((a.0 - b.0) * (a.0 - b.0) + (a.1 - b.1) * (a.1 - b.1));
            pairs.push((i, j, 1.0 / (0.1 + dist)));
        }
    }
    let target = rng.random_range(1..=cfg.max_relations.min(pairs.len()));
    let mut relations = Vec::with_capacity(target);
    while relations.len() < target {
        let total: f64 = pairs.iter().map(|p| p.2).sum();
        let mut pick = rng.random_range(0.0..total);
        let mut idx = pairs.len() - 1;
        for (k, p) in pairs.iter().enumerate() {
            if pick < p.2 {
                idx = k;
                break;
            }
            pick -= p.2;
        }
        let (i, j, _) = pairs.swap_remove(idx);
        let (subject, object) = if objects[i].bbox.area() >= objects[j].bbox.area() { (i, j) } else { (j, i) };
        let predicate = if rng.random_bool(0.5) {
            spatial_relation(&objects[subject].bbox, &objects[object].bbox)
        } else {
            rng.random_range(SPATIAL_RELATIONS..cfg.relation_classes)
        };
        relations.push(Relation { subject, predicate, object });
    }
    Ok(Scene { objects, relations, seed })
}

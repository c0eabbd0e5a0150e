//! Role-aware graph encoder: role/position-conditioned node initialization,
//! stacked multi-relational graph convolution and global feature fusion.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::asg::{Asg, MultiRelGraph, NodeRole, RelKind};
use crate::error::{shape_err, Error, Result};
use crate::num::{Axis, ParamId, ParamStore, Tape, Tensor, Var};

/// Per-node visual vectors plus the global scene vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBundle {
    pub nodes: Vec<Vec<f64>>,
    pub global: Vec<f64>,
}

impl FeatureBundle {
    pub fn dim(&self) -> usize {
        self.global.len()
    }

    fn node_matrix(&self, n: usize, d: usize) -> Result<Tensor> {
        if self.nodes.len() != n {
            return Err(shape_err("features", format!("{} node vectors for {n} nodes", self.nodes.len())));
        }
        if self.global.len() != d || self.nodes.iter().any(|v| v.len() != d) {
            return Err(shape_err("features", format!("feature vectors must have {d} entries")));
        }
        Tensor::matrix(n, d, self.nodes.concat())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub self_w: ParamId,
    pub rel_w: [ParamId; 6],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dim: usize,
    pub max_attrs: usize,
    /// `3 × d`, rows indexed by [`NodeRole::index`].
    pub role: ParamId,
    /// `P × d` attribute position table.
    pub pos: ParamId,
    pub layers: Vec<LayerParams>,
    /// `2d × d` map applied to `[ḡ; v_I]`.
    pub fuse: ParamId,
    /// `1 × d` start-symbol embedding.
    pub start: ParamId,
}

const REL_NAMES: [&str; 6] = ["obj_attr", "attr_obj", "subj_rel", "rel_subj", "rel_obj", "obj_rel"];

impl EncoderParams {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        layers: usize,
        max_attrs: usize,
        rng: &mut R,
    ) -> Self {
        let w_std = 1.0 / libm::sqrt(dim as f64);
        // Role rows start near one so that x⁰ ≈ v at initialization.
        let role = store.add_normal("enc.role", 3, dim, 0.1, rng);
        store.value_mut(role).data_mut().iter_mut().for_each(|v| *v += 1.0);
        let pos = store.add_normal("enc.pos", max_attrs, dim, 0.1, rng);
        let layers = (0..layers)
            .map(|l| LayerParams {
                self_w: store.add_normal(format!("enc.layer{l}.self"), dim, dim, w_std, rng),
                rel_w: REL_NAMES.map(|r| store.add_normal(format!("enc.layer{l}.{r}"), dim, dim, w_std, rng)),
            })
            .collect();
        let fuse = store.add_normal("enc.fuse", 2 * dim, dim, 1.0 / libm::sqrt(2.0 * dim as f64), rng);
        let start = store.add_normal("enc.start", 1, dim, 0.1, rng);
        Self { dim, max_attrs, role, pos, layers, fuse, start }
    }

    /// Re-binds parameters by name in a store with the registered layout.
    pub fn bind(store: &ParamStore, dim: usize, layers: usize, max_attrs: usize) -> Result<Self> {
        let find = |name: &str| {
            store.find(name).ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
        };
        let layers = (0..layers)
            .map(|l| {
                let mut rel_w = [find(&format!("enc.layer{l}.self"))?; 6];
                for (slot, r) in rel_w.iter_mut().zip(REL_NAMES) {
                    *slot = find(&format!("enc.layer{l}.{r}"))?;
                }
                Ok(LayerParams { self_w: find(&format!("enc.layer{l}.self"))?, rel_w })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            dim,
            max_attrs,
            role: find("enc.role")?,
            pos: find("enc.pos")?,
            layers,
            fuse: find("enc.fuse")?,
            start: find("enc.start")?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncodeOptions {
    pub role_embed: bool,
    /// Number of graph convolution layers applied (0 disables them).
    pub layers: usize,
}

/// `(|V|+1) × d` node embeddings with the start symbol in row 0, and `v̄`.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    pub nodes: Var,
    pub global: Var,
}

/// `x⁰_i = v_i ⊙ W_r[role]`, with `pos[order]` added for attributes.
pub fn role_embed(tape: &mut Tape<'_>, p: &EncoderParams, g: &Asg, v: Var) -> Result<Var> {
    let n = g.len();
    let roles: Vec<usize> = g.nodes().iter().map(|node| node.role.index()).collect();
    let mut pos_idx = vec![p.max_attrs; n];
    for node in g.nodes() {
        if node.role == NodeRole::Attribute {
            let order = g
                .attribute_order(node.id)
                .ok_or_else(|| Error::InvalidArgument(format!("attribute {} has no parent", node.id)))?;
            if order >= p.max_attrs {
                return Err(Error::InvalidArgument(format!(
                    "attribute {} is number {} of its object; the position table holds {}",
                    node.id,
                    order + 1,
                    p.max_attrs
                )));
            }
            pos_idx[node.id] = order;
        }
    }
    let role_t = tape.param(p.role);
    let role_rows = tape.gather(role_t, &roles)?;
    let factor = if g.count(NodeRole::Attribute) > 0 {
        let pos_t = tape.param(p.pos);
        let pad = tape.input(Tensor::zeros(&[1, p.dim]));
        let padded = tape.concat(&[pos_t, pad], Axis::Rows)?;
        let pos_rows = tape.gather(padded, &pos_idx)?;
        tape.add(role_rows, pos_rows)?
    } else {
        role_rows
    };
    tape.mul(v, factor)
}

/// `x'_i = relu(W_0 x_i + Σ_r mean_{j∈N_i^r} W_r x_j)`.
pub fn mrgcn_layer(tape: &mut Tape<'_>, mrg: &MultiRelGraph, x: Var, layer: &LayerParams) -> Result<Var> {
    let n = mrg.num_nodes();
    let w0 = tape.param(layer.self_w);
    let mut acc = tape.matmul(x, w0)?;
    for kind in RelKind::ALL {
        if mrg.edges(kind).is_empty() {
            continue;
        }
        let agg = tape.input(Tensor::matrix(n, n, mrg.mean_aggregator(kind))?);
        let neigh = tape.matmul(agg, x)?;
        let w = tape.param(layer.rel_w[kind.index()]);
        let msg = tape.matmul(neigh, w)?;
        acc = tape.add(acc, msg)?;
    }
    tape.relu(acc)
}

pub fn encode(
    tape: &mut Tape<'_>,
    p: &EncoderParams,
    g: &Asg,
    mrg: &MultiRelGraph,
    feats: &FeatureBundle,
    opts: EncodeOptions,
) -> Result<Encoded> {
    if opts.layers > p.layers.len() {
        return Err(Error::InvalidArgument(format!("{} layers requested, {} registered", opts.layers, p.layers.len())));
    }
    let v = tape.input(feats.node_matrix(g.len(), p.dim)?);
    let mut x = if opts.role_embed { role_embed(tape, p, g, v)? } else { v };
    for layer in &p.layers[..opts.layers] {
        x = mrgcn_layer(tape, mrg, x, layer)?;
    }
    let g_bar = tape.mean_rows(x)?;
    let v_img = tape.input(Tensor::row(feats.global.clone()));
    let cat = tape.concat(&[g_bar, v_img], Axis::Cols)?;
    let wf = tape.param(p.fuse);
    let fused = tape.matmul(cat, wf)?;
    let global = tape.relu(fused)?;
    let start = tape.param(p.start);
    let nodes = tape.concat(&[start, x], Axis::Rows)?;
    Ok(Encoded { nodes, global })
}

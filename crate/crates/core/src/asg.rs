//! Abstract scene graphs and the two structures derived from them: the
//! six-relation graph consumed by the encoder and the flow graph that drives
//! flow attention in the decoder.
//!
//! An abstract scene graph has three node roles and no semantic labels.
//! Legal edges are object→attribute, object(subject)→relationship and
//! relationship→object. Attribute order per object is the order in which the
//! object→attribute edges appear in the edge list.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Object,
    Attribute,
    Relationship,
}

impl NodeRole {
    /// Row index into the role embedding table.
    pub fn index(self) -> usize {
        match self {
            NodeRole::Object => 0,
            NodeRole::Attribute => 1,
            NodeRole::Relationship => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AsgNode {
    pub id: usize,
    pub role: NodeRole,
    /// Scene region the node is grounded in. Attribute nodes share their
    /// object's region; relationship nodes record their subject's region (the
    /// union region is implied by the two endpoints).
    pub region: usize,
}

#[derive(Serialize, Deserialize)]
struct AsgRepr {
    nodes: Vec<AsgNode>,
    edges: Vec<(usize, usize)>,
}

/// Abstract scene graph: typed, unlabeled, grounded nodes plus directed edges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "AsgRepr", into = "AsgRepr")]
pub struct Asg {
    nodes: Vec<AsgNode>,
    edges: Vec<(usize, usize)>,
}

impl From<AsgRepr> for Asg {
    fn from(r: AsgRepr) -> Self {
        Asg { nodes: r.nodes, edges: r.edges }
    }
}

impl From<Asg> for AsgRepr {
    fn from(g: Asg) -> Self {
        AsgRepr { nodes: g.nodes, edges: g.edges }
    }
}

/// A broken structural rule, identified by node ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    NonDenseId { position: usize, id: usize },
    EdgeOutOfRange { src: usize, dst: usize },
    DuplicateEdge { src: usize, dst: usize },
    ForbiddenEdge { src: usize, dst: usize, from: NodeRole, to: NodeRole },
    AttributeInDegree { node: usize, count: usize },
    AttributeHasOutgoing { node: usize },
    RelationshipInDegree { node: usize, count: usize },
    RelationshipOutDegree { node: usize, count: usize },
    RelationshipSelfPair { node: usize, object: usize },
    AttributeRegionMismatch { node: usize, object: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonDenseId { position, id } => {
                write!(f, "node at position {position} has id {id}; ids must be 0..|V|-1 in order")
            }
            Violation::EdgeOutOfRange { src, dst } => write!(f, "edge {src}->{dst} references a missing node"),
            Violation::DuplicateEdge { src, dst } => write!(f, "edge {src}->{dst} appears more than once"),
            Violation::ForbiddenEdge { src, dst, from, to } => {
                write!(f, "edge {src}->{dst} goes {from:?}->{to:?}")
            }
            Violation::AttributeInDegree { node, count } => {
                write!(f, "attribute {node} has {count} incoming edges, expected one from an object")
            }
            Violation::AttributeHasOutgoing { node } => write!(f, "attribute {node} has outgoing edges"),
            Violation::RelationshipInDegree { node, count } => {
                write!(f, "relationship {node} has {count} subjects, expected one")
            }
            Violation::RelationshipOutDegree { node, count } => {
                write!(f, "relationship {node} has {count} objects, expected one")
            }
            Violation::RelationshipSelfPair { node, object } => {
                write!(f, "relationship {node} links object {object} to itself")
            }
            Violation::AttributeRegionMismatch { node, object } => {
                write!(f, "attribute {node} is grounded in a different region than object {object}")
            }
        }
    }
}

impl Asg {
    /// Wraps raw parts without checking them; see [`Asg::validate`].
    pub fn from_parts(nodes: Vec<AsgNode>, edges: Vec<(usize, usize)>) -> Self {
        Asg { nodes, edges }
    }

    pub fn nodes(&self) -> &[AsgNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn role(&self, id: usize) -> NodeRole {
        self.nodes[id].role
    }

    pub fn count(&self, role: NodeRole) -> usize {
        self.nodes.iter().filter(|n| n.role == role).count()
    }

    pub fn ids_with_role(&self, role: NodeRole) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter(move |n| n.role == role).map(|n| n.id)
    }

    /// Attribute nodes of `object`, in insertion order.
    pub fn attributes_of(&self, object: usize) -> Vec<usize> {
        self.edges
            .iter()
            .filter(|&&(s, d)| s == object && self.nodes.get(d).is_some_and(|n| n.role == NodeRole::Attribute))
            .map(|&(_, d)| d)
            .collect()
    }

    /// Position of an attribute node among its object's attributes.
    pub fn attribute_order(&self, attr: usize) -> Option<usize> {
        let parent = self.parent_object(attr)?;
        self.attributes_of(parent).iter().position(|&a| a == attr)
    }

    /// The object an attribute hangs off, or a relationship's subject.
    pub fn parent_object(&self, node: usize) -> Option<usize> {
        self.edges.iter().find(|&&(_, d)| d == node).map(|&(s, _)| s)
    }

    /// `(subject, object)` of a relationship node.
    pub fn endpoints(&self, rel: usize) -> Option<(usize, usize)> {
        let subj = self.edges.iter().find(|&&(_, d)| d == rel)?.0;
        let obj = self.edges.iter().find(|&&(s, _)| s == rel)?.1;
        Some((subj, obj))
    }

    /// Returns every violated structural rule; empty means valid.
    pub fn violations(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for (position, n) in self.nodes.iter().enumerate() {
            if n.id != position {
                out.push(Violation::NonDenseId { position, id: n.id });
            }
        }
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        let mut outdeg = vec![0usize; n];
        let mut seen = BTreeSet::new();
        for &(s, d) in &self.edges {
            if s >= n || d >= n {
                out.push(Violation::EdgeOutOfRange { src: s, dst: d });
                continue;
            }
            if !seen.insert((s, d)) {
                out.push(Violation::DuplicateEdge { src: s, dst: d });
            }
            let (from, to) = (self.nodes[s].role, self.nodes[d].role);
            let legal = matches!(
                (from, to),
                (NodeRole::Object, NodeRole::Attribute)
                    | (NodeRole::Object, NodeRole::Relationship)
                    | (NodeRole::Relationship, NodeRole::Object)
            );
            if !legal {
                out.push(Violation::ForbiddenEdge { src: s, dst: d, from, to });
            }
            indeg[d] += 1;
            outdeg[s] += 1;
        }
        for node in &self.nodes {
            let i = node.id;
            if i >= n {
                continue;
            }
            match node.role {
                NodeRole::Object => {}
                NodeRole::Attribute => {
                    if indeg[i] != 1 {
                        out.push(Violation::AttributeInDegree { node: i, count: indeg[i] });
                    } else if let Some(parent) = self.parent_object(i) {
                        if parent < n && self.nodes[parent].region != node.region {
                            out.push(Violation::AttributeRegionMismatch { node: i, object: parent });
                        }
                    }
                    if outdeg[i] != 0 {
                        out.push(Violation::AttributeHasOutgoing { node: i });
                    }
                }
                NodeRole::Relationship => {
                    if indeg[i] != 1 {
                        out.push(Violation::RelationshipInDegree { node: i, count: indeg[i] });
                    }
                    if outdeg[i] != 1 {
                        out.push(Violation::RelationshipOutDegree { node: i, count: outdeg[i] });
                    }
                    if indeg[i] == 1 && outdeg[i] == 1 {
                        if let Some((s, o)) = self.endpoints(i) {
                            if s == o {
                                out.push(Violation::RelationshipSelfPair { node: i, object: s });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidGraph(v))
        }
    }

    /// Relabels nodes: node `i` becomes `perm[i]`. Edge order is kept, so
    /// attribute order is preserved.
    pub fn permute(&self, perm: &[usize]) -> Asg {
        let mut nodes = self.nodes.clone();
        for n in &self.nodes {
            nodes[perm[n.id]] = AsgNode { id: perm[n.id], ..*n };
        }
        let edges = self.edges.iter().map(|&(s, d)| (perm[s], perm[d])).collect();
        Asg { nodes, edges }
    }
}

/// Incremental construction following the three user-intent rules.
#[derive(Debug, Clone, Default)]
pub struct AsgBuilder {
    nodes: Vec<AsgNode>,
    edges: Vec<(usize, usize)>,
}

impl AsgBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, role: NodeRole, region: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(AsgNode { id, role, region });
        id
    }

    pub fn object(&mut self, region: usize) -> usize {
        self.push(NodeRole::Object, region)
    }

    pub fn attribute(&mut self, object: usize) -> usize {
        let region = self.nodes[object].region;
        let id = self.push(NodeRole::Attribute, region);
        self.edges.push((object, id));
        id
    }

    pub fn relationship(&mut self, subject: usize, object: usize) -> usize {
        let region = self.nodes[subject].region;
        let id = self.push(NodeRole::Relationship, region);
        self.edges.push((subject, id));
        self.edges.push((id, object));
        id
    }

    pub fn build(self) -> Asg {
        Asg { nodes: self.nodes, edges: self.edges }
    }
}

/// The six message-passing relations of the encoder graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RelKind {
    ObjToAttr,
    AttrToObj,
    SubjToRel,
    RelToSubj,
    RelToObj,
    ObjToRel,
}

impl RelKind {
    pub const ALL: [RelKind; 6] = [
        RelKind::ObjToAttr,
        RelKind::AttrToObj,
        RelKind::SubjToRel,
        RelKind::RelToSubj,
        RelKind::RelToObj,
        RelKind::ObjToRel,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn inverse(self) -> RelKind {
        match self {
            RelKind::ObjToAttr => RelKind::AttrToObj,
            RelKind::AttrToObj => RelKind::ObjToAttr,
            RelKind::SubjToRel => RelKind::RelToSubj,
            RelKind::RelToSubj => RelKind::SubjToRel,
            RelKind::RelToObj => RelKind::ObjToRel,
            RelKind::ObjToRel => RelKind::RelToObj,
        }
    }
}

/// ASG edges split by kind, with every kind's inverse added.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiRelGraph {
    num_nodes: usize,
    edges: [Vec<(usize, usize)>; 6],
}

impl MultiRelGraph {
    pub fn build(g: &Asg) -> Result<Self> {
        g.validate()?;
        let mut edges: [Vec<(usize, usize)>; 6] = Default::default();
        for &(s, d) in g.edges() {
            let kind = match (g.role(s), g.role(d)) {
                (NodeRole::Object, NodeRole::Attribute) => RelKind::ObjToAttr,
                (NodeRole::Object, NodeRole::Relationship) => RelKind::SubjToRel,
                (NodeRole::Relationship, NodeRole::Object) => RelKind::RelToObj,
                _ => unreachable!("validated"),
            };
            edges[kind.index()].push((s, d));
            edges[kind.inverse().index()].push((d, s));
        }
        Ok(Self { num_nodes: g.len(), edges })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// `(src, dst)` pairs of one relation; messages flow src → dst.
    pub fn edges(&self, kind: RelKind) -> &[(usize, usize)] {
        &self.edges[kind.index()]
    }

    /// Row-normalized aggregation matrix: `A[i][j] = 1/|N_i|` for each
    /// in-neighbour `j` of `i` under `kind`. Row-major, `n × n`.
    pub fn mean_aggregator(&self, kind: RelKind) -> Vec<f64> {
        let n = self.num_nodes;
        let mut a = vec![0.0; n * n];
        let mut deg = vec![0usize; n];
        for &(_, d) in self.edges(kind) {
            deg[d] += 1;
        }
        for &(s, d) in self.edges(kind) {
            a[d * n + s] += 1.0 / deg[d] as f64;
        }
        a
    }
}

/// Transition structure for flow attention. Slot 0 is the start symbol;
/// ASG node `i` sits in slot `i + 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowGraph {
    size: usize,
    edges: Vec<(usize, usize)>,
    /// `m[i*size + j] = 1/indeg(i)` when `j → i` is an edge.
    m: Vec<f64>,
    m2: Vec<f64>,
}

pub const START_SLOT: usize = 0;

impl FlowGraph {
    pub fn build(g: &Asg) -> Result<Self> {
        g.validate()?;
        let size = g.len() + 1;
        let slot = |i: usize| i + 1;
        let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
        for &(s, d) in g.edges() {
            edges.insert((slot(s), slot(d)));
            if g.role(s) == NodeRole::Object && g.role(d) == NodeRole::Attribute {
                edges.insert((slot(d), slot(s)));
            }
        }
        // Sources: objects with no incoming relationship edge.
        let mut has_subject_edge = vec![false; g.len()];
        for &(s, d) in g.edges() {
            if g.role(s) == NodeRole::Relationship {
                has_subject_edge[d] = true;
            }
        }
        let objects: Vec<usize> = g.ids_with_role(NodeRole::Object).collect();
        let sources: Vec<usize> = objects.iter().copied().filter(|&o| !has_subject_edge[o]).collect();
        if let Some(&first) = objects.first() {
            if sources.is_empty() {
                edges.insert((START_SLOT, slot(first)));
            }
            for o in sources {
                edges.insert((START_SLOT, slot(o)));
            }
        }
        for i in 1..size {
            if !edges.iter().any(|&(s, _)| s == i) {
                edges.insert((i, i));
            }
        }
        let edges: Vec<(usize, usize)> = edges.into_iter().collect();

        let mut indeg = vec![0usize; size];
        for &(_, d) in &edges {
            indeg[d] += 1;
        }
        let mut m = vec![0.0; size * size];
        for &(s, d) in &edges {
            m[d * size + s] = 1.0 / indeg[d] as f64;
        }
        let mut m2 = vec![0.0; size * size];
        for i in 0..size {
            for k in 0..size {
                let mik = m[i * size + k];
                if mik != 0.0 {
                    for j in 0..size {
                        m2[i * size + j] += mik * m[k * size + j];
                    }
                }
            }
        }
        Ok(Self { size, edges, m, m2 })
    }

    /// Number of slots, `|V| + 1`.
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn m(&self, i: usize, j: usize) -> f64 {
        self.m[i * self.size + j]
    }

    /// `M_f` row-major.
    pub fn matrix(&self) -> &[f64] {
        &self.m
    }

    /// `M_f` raised to the power `k ∈ {1, 2}`, row-major.
    pub fn power(&self, k: usize) -> &[f64] {
        match k {
            1 => &self.m,
            2 => &self.m2,
            _ => panic!("flow transitions are defined for one or two steps"),
        }
    }

    /// Stay (`k = 0`), one step (`k = 1`) or two steps (`k = 2`), renormalized.
    /// Falls back to `alpha` when the transported mass vanishes.
    pub fn step(&self, alpha: &[f64], k: usize) -> Result<Vec<f64>> {
        check_distribution(alpha, self.size)?;
        if k > 2 {
            return Err(Error::InvalidArgument(alloc::format!("flow step k={k} not in {{0,1,2}}")));
        }
        if k == 0 {
            return Ok(alpha.to_vec());
        }
        let mk = self.power(k);
        let n = self.size;
        let raw: Vec<f64> = (0..n).map(|i| (0..n).map(|j| mk[i * n + j] * alpha[j]).sum()).collect();
        let mass: f64 = raw.iter().sum();
        if mass < FLOW_MASS_FLOOR {
            return Ok(alpha.to_vec());
        }
        Ok(raw.into_iter().map(|v| v / mass).collect())
    }
}

/// Transported mass below this is treated as vanished.
pub const FLOW_MASS_FLOOR: f64 = 1e-12;

pub(crate) fn check_distribution(alpha: &[f64], len: usize) -> Result<()> {
    if alpha.len() != len {
        return Err(Error::InvalidArgument(alloc::format!(
            "distribution has {} entries, expected {len}",
            alpha.len()
        )));
    }
    let total: f64 = alpha.iter().sum();
    if alpha.iter().any(|&a| !(a >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(alloc::format!("not a distribution (sum {total})")));
    }
    Ok(())
}

/// Picks one subject-relationship-object triple uniformly and attaches, with
/// probability ½ each, the first attribute of the subject and of the object.
///
/// Returns the subgraph and, for each of its nodes, the id it had in `full`.
pub fn sample_subgraph_mapped<R: Rng + ?Sized>(full: &Asg, rng: &mut R) -> Result<(Asg, Vec<usize>)> {
    full.validate()?;
    let rels: Vec<usize> = full.ids_with_role(NodeRole::Relationship).collect();
    if rels.is_empty() {
        return Err(Error::NoRelationships);
    }
    let rel = rels[rng.random_range(0..rels.len())];
    let (subj, obj) = full.endpoints(rel).expect("validated relationship");

    let mut b = AsgBuilder::new();
    let mut map = Vec::new();
    let s = b.object(full.nodes()[subj].region);
    map.push(subj);
    let o = b.object(full.nodes()[obj].region);
    map.push(obj);
    for (src, dst) in [(subj, s), (obj, o)] {
        let attrs = full.attributes_of(src);
        if let Some(&first) = attrs.first() {
            if rng.random_bool(0.5) {
                b.attribute(dst);
                map.push(first);
            }
        }
    }
    b.relationship(s, o);
    map.push(rel);
    Ok((b.build(), map))
}

pub fn sample_subgraph<R: Rng + ?Sized>(full: &Asg, rng: &mut R) -> Result<Asg> {
    sample_subgraph_mapped(full, rng).map(|(g, _)| g)
}

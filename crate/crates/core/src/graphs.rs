//! Ego-Thing and Ego-Stuff interaction graphs.
//!
//! Affinity row i is a softmax over j of the appearance relation, restricted
//! to pairs that pass the spatial gate. The self pair always passes. In
//! Ego-Stuff mode, pairs of two Stuff nodes never pass.

use serde::{Deserialize, Serialize};

use riskid_autodiff::{Tape, Tensor, Var, LAYER_NORM_EPS};

use crate::error::{Error, Result};
use crate::scene::{distance, Point3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphMode {
    EgoThing,
    EgoStuff,
}

/// Where a node sits in 3D: a point (Ego, Thing) or the unprojected cells
/// of a Stuff mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum NodeAnchor {
    Point(Point3),
    Region(Vec<Point3>),
}

impl NodeAnchor {
    fn points(&self) -> &[Point3] {
        match self {
            NodeAnchor::Point(p) => std::slice::from_ref(p),
            NodeAnchor::Region(ps) => ps,
        }
    }
}

/// Minimum distance between two anchors.
pub fn anchor_distance(a: &NodeAnchor, b: &NodeAnchor) -> f64 {
    let mut best = f64::INFINITY;
    for p in a.points() {
        for q in b.points() {
            best = best.min(distance(*p, *q));
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphNode {
    pub anchor: NodeAnchor,
    pub ego: bool,
}

pub fn spatial_gate(p: &Point3, q: &Point3, mu: f64) -> bool {
    distance(*p, *q) <= mu
}

/// Row-major `n x n` pass/fail table of the spatial gate.
pub fn gate_mask(nodes: &[GraphNode], mode: GraphMode, mu: f64) -> Result<Vec<bool>> {
    if nodes.is_empty() {
        return Err(Error::EmptyInput("affinity"));
    }
    let n = nodes.len();
    let mut mask = vec![false; n * n];
    for i in 0..n {
        mask[i * n + i] = true;
        for j in i + 1..n {
            let both_stuff = mode == GraphMode::EgoStuff && !nodes[i].ego && !nodes[j].ego;
            let pass = !both_stuff && anchor_distance(&nodes[i].anchor, &nodes[j].anchor) <= mu;
            mask[i * n + j] = pass;
            mask[j * n + i] = pass;
        }
    }
    Ok(mask)
}

/// f_a = (w x_i)ᵀ (w' x_j) / √D for column vectors x.
pub fn appearance_relation(xi: &[f64], xj: &[f64], w: &Tensor, w_prime: &Tensor) -> Result<f64> {
    let d = xi.len();
    if xj.len() != d || w.shape() != [d, d] || w_prime.shape() != [d, d] {
        return Err(Error::Dims {
            op: "appearance_relation",
            expected: format!("vectors of {d} and {d}x{d} projections"),
            got: format!("{} / {:?} / {:?}", xj.len(), w.shape(), w_prime.shape()),
        });
    }
    let project = |m: &Tensor, x: &[f64]| -> Vec<f64> {
        (0..d).map(|r| m.row_slice(r).iter().zip(x).map(|(a, b)| a * b).sum()).collect()
    };
    let (a, b) = (project(w, xi), project(w_prime, xj));
    Ok(a.iter().zip(&b).map(|(p, q)| p * q).sum::<f64>() / (d as f64).sqrt())
}

/// Affinity of node rows `x` under a precomputed gate mask.
pub fn affinity(tape: &Tape, x: Var, w: Var, w_prime: Var, mask: &[bool]) -> Result<Var> {
    let d = tape.shape(x)[1];
    let a = tape.matmul(x, tape.transpose(w)?)?;
    let b = tape.matmul(x, tape.transpose(w_prime)?)?;
    let scores = tape.scale(tape.matmul(a, tape.transpose(b)?)?, 1.0 / (d as f64).sqrt());
    Ok(tape.masked_softmax(scores, mask)?)
}

/// ReLU(LayerNorm(G X W + X)).
pub fn gcn_layer(tape: &Tape, g: Var, x: Var, weight: Var, gain: Var, bias: Var) -> Result<Var> {
    let pre = gcn_preactivation(tape, g, x, weight)?;
    Ok(tape.relu(tape.layer_norm(pre, gain, bias, LAYER_NORM_EPS)?))
}

pub fn gcn_preactivation(tape: &Tape, g: Var, x: Var, weight: Var) -> Result<Var> {
    let msg = tape.matmul(tape.matmul(g, x)?, weight)?;
    Ok(tape.add(msg, x)?)
}

/// Dense affinity matrix for one frame's nodes.
pub fn build_affinity(
    features: &Tensor,
    nodes: &[GraphNode],
    mode: GraphMode,
    mu: f64,
    w: &Tensor,
    w_prime: &Tensor,
) -> Result<Tensor> {
    if features.rows() != nodes.len() {
        return Err(Error::Dims {
            op: "build_affinity",
            expected: nodes.len().to_string(),
            got: features.rows().to_string(),
        });
    }
    let mask = gate_mask(nodes, mode, mu)?;
    let tape = Tape::new();
    let x = tape.constant(features.clone());
    let g = affinity(&tape, x, tape.constant(w.clone()), tape.constant(w_prime.clone()), &mask)?;
    Ok((*tape.value(g)).clone())
}

/// Dense GCN pre-activation `G X W + X`.
pub fn gcn_preactivation_dense(g: &Tensor, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let v = gcn_preactivation(&tape, tape.constant(g.clone()), tape.constant(x.clone()), tape.constant(weight.clone()))?;
    Ok((*tape.value(v)).clone())
}

/// Dense GCN layer output.
pub fn gcn_layer_dense(g: &Tensor, x: &Tensor, weight: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let c = |t: &Tensor| tape.constant(t.clone());
    let v = gcn_layer(&tape, c(g), c(x), c(weight), c(gain), c(bias))?;
    Ok((*tape.value(v)).clone())
}

/// Thing with the largest weight in the Ego row; ties go to the lowest id.
/// `ego_row[k]` is the weight of Thing `ids[k]`; trailing entries (the Ego
/// self pair) are ignored.
pub fn correlation_identify(ego_row: &[f64], ids: &[u32]) -> Result<u32> {
    if ids.is_empty() {
        return Err(Error::NoCandidates);
    }
    if ego_row.len() < ids.len() {
        return Err(Error::Dims { op: "correlation_identify", expected: ids.len().to_string(), got: ego_row.len().to_string() });
    }
    let mut best = (ego_row[0], ids[0]);
    for (&w, &id) in ego_row.iter().zip(ids).skip(1) {
        if w > best.0 || (w == best.0 && id < best.1) {
            best = (w, id);
        }
    }
    Ok(best.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

pub const EDGE_THRESHOLD: f64 = 0.2;

/// Undirected edges whose averaged weight exceeds `threshold`.
pub fn export_edges(g: &Tensor, threshold: f64) -> Result<Vec<Edge>> {
    let n = g.rows();
    if g.cols() != n {
        return Err(Error::Dims { op: "export_edges", expected: format!("{n}x{n}"), got: format!("{:?}", g.shape()) });
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let weight = (g.get(i, j) + g.get(j, i)) / 2.0;
            if weight > threshold {
                edges.push(Edge { i, j, weight });
            }
        }
    }
    Ok(edges)
}

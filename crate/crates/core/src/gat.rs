//! Edge-aware graph attention.
//!
//! For edge `(i, j)` the score is
//! `LeakyReLU(a . [W x_i || W x_j || W P e_ij])`, normalized by a softmax
//! over the neighborhood of `i`; the update is `x'_i = sum_j alpha_ij W x_j`.
//! `P` projects edge features to the node input width so that the same `W`
//! applies to both.

use std::collections::HashSet;
use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::ssm::uniform_matrix;

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GatConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    /// Width of the edge features before projection; `None` disables the edge term.
    pub d_edge: Option<usize>,
    pub heads: usize,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatHead<T = Mat> {
    /// `d_in x d_hidden`
    pub w: T,
    /// `3 d_hidden x 1` (`2 d_hidden x 1` without edge features)
    pub att: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatParams<T = Mat> {
    pub heads: Vec<GatHead<T>>,
    /// `d_edge x d_in`
    pub edge_proj: Option<T>,
}

impl<T> GatParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> GatParams<U> {
        GatParams {
            heads: self
                .heads
                .iter()
                .enumerate()
                .map(|(h, head)| GatHead {
                    w: f(&format!("head{h}.w"), &head.w),
                    att: f(&format!("head{h}.att"), &head.att),
                })
                .collect(),
            edge_proj: self.edge_proj.as_ref().map(|p| f("edge_proj", p)),
        }
    }

    pub fn named(&self) -> Vec<(String, &T)> {
        let mut v = Vec::new();
        for (h, head) in self.heads.iter().enumerate() {
            v.push((format!("head{h}.w"), &head.w));
            v.push((format!("head{h}.att"), &head.att));
        }
        if let Some(p) = &self.edge_proj {
            v.push(("edge_proj".to_string(), p));
        }
        v
    }
}

impl GatParams<Mat> {
    pub fn init<R: Rng>(cfg: &GatConfig, rng: &mut R) -> Self {
        let n_terms = if cfg.d_edge.is_some() { 3 } else { 2 };
        let heads = (0..cfg.heads.max(1))
            .map(|_| GatHead {
                w: uniform_matrix(rng, cfg.d_in, cfg.d_hidden, 1.0 / (cfg.d_in as f64).sqrt()),
                att: uniform_matrix(
                    rng,
                    n_terms * cfg.d_hidden,
                    1,
                    1.0 / ((n_terms * cfg.d_hidden) as f64).sqrt(),
                ),
            })
            .collect();
        let edge_proj = cfg
            .d_edge
            .map(|de| uniform_matrix(rng, de, cfg.d_in, 1.0 / (de as f64).sqrt()));
        Self { heads, edge_proj }
    }

    pub fn bind(&self, tape: &mut Tape) -> GatParams<Var> {
        self.map(|_, m| tape.leaf(m.clone()))
    }
}

/// Edge list split into attention centers `i` and neighbors `j`.
#[derive(Debug, Clone)]
pub struct EdgeIndex {
    pub center: Rc<[usize]>,
    pub neighbor: Rc<[usize]>,
    pub n_nodes: usize,
}

impl EdgeIndex {
    pub fn new(edges: &[(usize, usize)], n_nodes: usize) -> Result<Self> {
        let mut covered = HashSet::with_capacity(n_nodes);
        for &(i, j) in edges {
            if i >= n_nodes || j >= n_nodes {
                return Err(Error::InvalidInput(format!(
                    "edge ({i}, {j}) out of range for {n_nodes} nodes"
                )));
            }
            covered.insert(i);
        }
        if let Some(lonely) = (0..n_nodes).find(|i| !covered.contains(i)) {
            return Err(Error::InvalidInput(format!(
                "node {lonely} has no incident edges"
            )));
        }
        Ok(Self {
            center: edges.iter().map(|e| e.0).collect(),
            neighbor: edges.iter().map(|e| e.1).collect(),
            n_nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.center.len()
    }

    pub fn is_empty(&self) -> bool {
        self.center.is_empty()
    }
}

fn head_on_tape(
    tape: &mut Tape,
    x: Var,
    e_proj: Option<Var>,
    idx: &EdgeIndex,
    head: &GatHead<Var>,
    slope: f64,
) -> (Var, Var) {
    let dh = tape.value(head.w).ncols();
    let h = tape.matmul(x, head.w);
    let a_center = tape.slice_rows(head.att, 0, dh);
    let a_neighbor = tape.slice_rows(head.att, dh, dh);
    let s_center = tape.matmul(h, a_center);
    let s_center = tape.gather_rows(s_center, idx.center.clone());
    let s_neighbor = tape.matmul(h, a_neighbor);
    let s_neighbor = tape.gather_rows(s_neighbor, idx.neighbor.clone());
    let mut score = tape.add(s_center, s_neighbor);
    if let Some(ep) = e_proj {
        let a_edge = tape.slice_rows(head.att, 2 * dh, dh);
        let he = tape.matmul(ep, head.w);
        let s_edge = tape.matmul(he, a_edge);
        score = tape.add(score, s_edge);
    }
    let score = tape.leaky_relu(score, slope);
    let alpha = tape.segment_softmax(score, idx.center.clone());
    let out = tape.weighted_scatter(
        alpha,
        h,
        idx.neighbor.clone(),
        idx.center.clone(),
        idx.n_nodes,
    );
    (out, alpha)
}

/// Attention layer on the tape. Returns the updated nodes and, per head,
/// the edge-aligned attention column.
pub fn gat_on_tape(
    tape: &mut Tape,
    x: Var,
    edge_feats: Option<Var>,
    idx: &EdgeIndex,
    p: &GatParams<Var>,
    slope: f64,
) -> Result<(Var, Vec<Var>)> {
    if tape.value(x).nrows() != idx.n_nodes {
        return Err(Error::Shape(format!(
            "gat: {} node rows for {} nodes",
            tape.value(x).nrows(),
            idx.n_nodes
        )));
    }
    for head in &p.heads {
        let (d_in, d_hidden) = tape.value(head.w).dim();
        if tape.value(x).ncols() != d_in {
            return Err(Error::Shape(format!(
                "gat: node width {} but W expects {d_in}",
                tape.value(x).ncols()
            )));
        }
        let n_terms = if p.edge_proj.is_some() { 3 } else { 2 };
        if tape.value(head.att).dim() != (n_terms * d_hidden, 1) {
            return Err(Error::Shape(
                "gat: attention vector has the wrong length".into(),
            ));
        }
    }
    let e_proj = match (p.edge_proj, edge_feats) {
        (Some(proj), Some(e)) => {
            if tape.value(e).ncols() != tape.value(proj).nrows() {
                return Err(Error::Shape(format!(
                    "gat: edge width {} but projection expects {}",
                    tape.value(e).ncols(),
                    tape.value(proj).nrows()
                )));
            }
            if tape.value(e).nrows() != idx.len() {
                return Err(Error::Shape(format!(
                    "gat: {} edge rows for {} edges",
                    tape.value(e).nrows(),
                    idx.len()
                )));
            }
            Some(tape.matmul(e, proj))
        }
        (None, None) => None,
        (Some(_), None) => return Err(Error::Shape("gat: edge features required".into())),
        (None, Some(_)) => return Err(Error::Shape("gat: layer has no edge projection".into())),
    };
    let mut alphas = Vec::with_capacity(p.heads.len());
    let mut sum: Option<Var> = None;
    for head in &p.heads {
        let (out, alpha) = head_on_tape(tape, x, e_proj, idx, head, slope);
        alphas.push(alpha);
        sum = Some(match sum {
            Some(s) => tape.add(s, out),
            None => out,
        });
    }
    let sum = sum.ok_or_else(|| Error::InvalidInput("gat: no heads".into()))?;
    let n_heads = p.heads.len();
    let out = if n_heads > 1 {
        tape.scale(sum, 1.0 / n_heads as f64)
    } else {
        sum
    };
    Ok((out, alphas))
}

fn run(
    x: &Mat,
    e: Option<&Mat>,
    edges: &[(usize, usize)],
    p: &GatParams,
    slope: f64,
) -> Result<(Tape, Var, Vec<Var>)> {
    let idx = EdgeIndex::new(edges, x.nrows())?;
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape);
    let xv = tape.leaf(x.clone());
    let ev = e.map(|e| tape.leaf(e.clone()));
    let (out, alphas) = gat_on_tape(&mut tape, xv, ev, &idx, &vars, slope)?;
    Ok((tape, out, alphas))
}

/// Attention coefficients of the first head, aligned with `edges`.
pub fn gat_attention(
    x: &Mat,
    e: Option<&Mat>,
    edges: &[(usize, usize)],
    p: &GatParams,
    slope: f64,
) -> Result<Vec<f64>> {
    let (tape, _, alphas) = run(x, e, edges, p, slope)?;
    Ok(tape.value(alphas[0]).iter().copied().collect())
}

pub fn gat_forward(
    x: &Mat,
    e: Option<&Mat>,
    edges: &[(usize, usize)],
    p: &GatParams,
    slope: f64,
) -> Result<Mat> {
    let (tape, out, _) = run(x, e, edges, p, slope)?;
    Ok(tape.value(out).clone())
}

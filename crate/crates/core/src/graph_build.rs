//! Tile graphs: k-NN connectivity over grid coordinates, sinusoidal
//! positional encodings and subtype/similarity edge features.

use std::collections::{BTreeSet, HashSet};

use crate::error::{Error, Result};

/// Number of tissue classes: non-tumor plus five growth patterns.
pub const N_SUBTYPES: u8 = 6;
/// Number of unordered subtype pairs (with repetition).
pub const N_SUBTYPE_PAIRS: usize = 21;
/// Length of the per-node positional encoding.
pub const PE_DIM: usize = 16;
/// Length of the continuous edge feature: `[cosine, distance]`.
pub const EDGE_CONT_DIM: usize = 2;
pub const DEFAULT_K: usize = 8;

pub const NON_TUMOR: u8 = 0;
pub const LEPIDIC: u8 = 1;
pub const ACINAR: u8 = 2;
pub const PAPILLARY: u8 = 3;
pub const MICROPAPILLARY: u8 = 4;
pub const SOLID: u8 = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct TileNode {
    pub node_id: usize,
    pub row: u32,
    pub col: u32,
    pub subtype: u8,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileGraph {
    /// Nodes in canonical `(row, col, node_id)` order.
    pub nodes: Vec<TileNode>,
    /// Directed `(src, dst)` pairs over positions in `nodes`, sorted.
    pub edges: Vec<(usize, usize)>,
    pub edge_cat: Vec<u8>,
    pub edge_cont: Vec<[f64; EDGE_CONT_DIM]>,
    pub pe: Vec<[f64; PE_DIM]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub patient_id: String,
    pub graphs: Vec<TileGraph>,
    pub event: bool,
    pub time_days: f64,
}

impl PatientRecord {
    pub fn validate(&self) -> Result<()> {
        if self.graphs.is_empty() {
            return Err(Error::InvalidInput(format!(
                "patient {} has no graphs",
                self.patient_id
            )));
        }
        if !(self.time_days > 0.0 && self.time_days.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "patient {} has non-positive time {}",
                self.patient_id, self.time_days
            )));
        }
        Ok(())
    }
}

/// Directed k-NN lists before symmetrization: for each node, itself
/// followed by its `k` nearest distinct nodes (ties by ascending index).
pub fn knn_neighbors(coords: &[(u32, u32)], k: usize) -> Result<Vec<Vec<usize>>> {
    if coords.is_empty() {
        return Err(Error::EmptyGraph);
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let n = coords.len();
    let mut cand: Vec<(i64, usize)> = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for (i, &(ri, ci)) in coords.iter().enumerate() {
        cand.clear();
        cand.extend(
            coords
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, &(rj, cj))| {
                    let dr = ri as i64 - rj as i64;
                    let dc = ci as i64 - cj as i64;
                    (dr * dr + dc * dc, j)
                }),
        );
        let take = k.min(cand.len());
        if take < cand.len() {
            cand.select_nth_unstable(take);
        }
        let mut picked: Vec<(i64, usize)> = cand[..take].to_vec();
        picked.sort_unstable();
        let mut list = Vec::with_capacity(take + 1);
        list.push(i);
        list.extend(picked.into_iter().map(|(_, j)| j));
        out.push(list);
    }
    Ok(out)
}

/// k-NN edges over integer grid coordinates.
///
/// Each node links to its `k` nearest distinct nodes, the edge set is
/// closed under reversal and every node gets a self-loop. The result is
/// sorted.
pub fn build_knn_graph(coords: &[(u32, u32)], k: usize) -> Result<Vec<(usize, usize)>> {
    let lists = knn_neighbors(coords, k)?;
    let mut set = BTreeSet::new();
    for (i, list) in lists.iter().enumerate() {
        for &j in list {
            set.insert((i, j));
            set.insert((j, i));
        }
    }
    Ok(set.into_iter().collect())
}

/// 16-dim encoding of a grid position: 8 sinusoid entries for the row
/// followed by 8 for the column.
pub fn positional_encoding(row: u32, col: u32) -> [f64; PE_DIM] {
    let mut out = [0.0; PE_DIM];
    encode_axis(row as f64, &mut out[..PE_DIM / 2]);
    encode_axis(col as f64, &mut out[PE_DIM / 2..]);
    out
}

fn encode_axis(p: f64, out: &mut [f64]) {
    let half = out.len();
    for i in 0..half / 2 {
        let denom = 10000f64.powf((2 * i) as f64 / half as f64);
        out[2 * i] = (p / denom).sin();
        out[2 * i + 1] = (p / denom).cos();
    }
}

/// Index of the unordered pair `{a, b}` among the 21 subtype pairs.
pub fn subtype_pair_index(a: u8, b: u8) -> Result<u8> {
    for s in [a, b] {
        if s >= N_SUBTYPES {
            return Err(Error::SubtypeOutOfRange(s as i64));
        }
    }
    let (lo, hi) = (a.min(b) as usize, a.max(b) as usize);
    // lo*6 - lo*(lo-1)/2 + (hi - lo)
    let tri = if lo == 0 { 0 } else { lo * (lo - 1) / 2 };
    Ok((lo * N_SUBTYPES as usize - tri + (hi - lo)) as u8)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot / (na * nb)).clamp(-1.0, 1.0))
    }
}

/// Per-edge subtype-pair index and `[cosine, grid distance]`.
pub fn edge_features(
    nodes: &[TileNode],
    edges: &[(usize, usize)],
) -> Result<(Vec<u8>, Vec<[f64; EDGE_CONT_DIM]>)> {
    let mut cat = Vec::with_capacity(edges.len());
    let mut cont = Vec::with_capacity(edges.len());
    let mut warned = false;
    for &(i, j) in edges {
        let (a, b) = match (nodes.get(i), nodes.get(j)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "edge ({i}, {j}) references a missing node"
                )))
            }
        };
        cat.push(subtype_pair_index(a.subtype, b.subtype)?);
        if i == j {
            cont.push([1.0, 0.0]);
            continue;
        }
        let cos = match cosine_similarity(&a.features, &b.features) {
            Some(c) => c,
            None => {
                if !warned {
                    log::warn!("zero-norm feature vector on edge ({i}, {j}); cosine set to 0");
                    warned = true;
                }
                0.0
            }
        };
        let dr = a.row as f64 - b.row as f64;
        let dc = a.col as f64 - b.col as f64;
        cont.push([cos, (dr * dr + dc * dc).sqrt()]);
    }
    Ok((cat, cont))
}

fn canonical_key(n: &TileNode) -> (u32, u32, usize) {
    (n.row, n.col, n.node_id)
}

pub fn validate_nodes(nodes: &[TileNode]) -> Result<()> {
    let Some(first) = nodes.first() else {
        return Err(Error::EmptyGraph);
    };
    let dim = first.features.len();
    let mut seen = HashSet::with_capacity(nodes.len());
    for n in nodes {
        if n.subtype >= N_SUBTYPES {
            return Err(Error::SubtypeOutOfRange(n.subtype as i64));
        }
        if n.features.len() != dim {
            return Err(Error::Shape(format!(
                "node {} has {} features, expected {dim}",
                n.node_id,
                n.features.len()
            )));
        }
        if n.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("features of node {}", n.node_id),
            });
        }
        if !seen.insert((n.row, n.col)) {
            return Err(Error::InvalidInput(format!(
                "duplicate coordinate ({}, {})",
                n.row, n.col
            )));
        }
    }
    Ok(())
}

impl TileGraph {
    /// Validates the nodes, sorts them canonically and derives edges,
    /// edge features and positional encodings.
    pub fn build(mut nodes: Vec<TileNode>, k: usize) -> Result<Self> {
        validate_nodes(&nodes)?;
        nodes.sort_by_key(canonical_key);
        let coords: Vec<_> = nodes.iter().map(|n| (n.row, n.col)).collect();
        let edges = build_knn_graph(&coords, k)?;
        let (edge_cat, edge_cont) = edge_features(&nodes, &edges)?;
        let pe = nodes
            .iter()
            .map(|n| positional_encoding(n.row, n.col))
            .collect();
        Ok(Self {
            nodes,
            edges,
            edge_cat,
            edge_cont,
            pe,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.features.len())
    }

    /// Checks the structural invariants of a built graph.
    pub fn check_invariants(&self) -> Result<()> {
        validate_nodes(&self.nodes)?;
        let n = self.nodes.len();
        let m = self.edges.len();
        if self.edge_cat.len() != m || self.edge_cont.len() != m || self.pe.len() != n {
            return Err(Error::Shape("edge or node attribute lengths differ".into()));
        }
        let set: HashSet<_> = self.edges.iter().copied().collect();
        for i in 0..n {
            if !set.contains(&(i, i)) {
                return Err(Error::InvalidInput(format!("node {i} has no self-loop")));
            }
        }
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            if i >= n || j >= n {
                return Err(Error::InvalidInput(format!("edge {e} out of range")));
            }
            if !set.contains(&(j, i)) {
                return Err(Error::InvalidInput(format!(
                    "edge ({i}, {j}) has no reverse"
                )));
            }
            let [cos, dist] = self.edge_cont[e];
            if !(-1.0..=1.0).contains(&cos) || dist.is_nan() || dist < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "edge {e} features out of range"
                )));
            }
            if self.edge_cat[e] as usize >= N_SUBTYPE_PAIRS {
                return Err(Error::InvalidInput(format!(
                    "edge {e} category out of range"
                )));
            }
            if i == j && (cos != 1.0 || dist != 0.0) {
                return Err(Error::InvalidInput(format!(
                    "self-loop {i} has wrong features"
                )));
            }
        }
        Ok(())
    }
}

//! The full risk model: node/edge input embeddings, stacked GAT + selective
//! scan blocks, mean pooling over nodes and graphs, and an MLP risk head.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use ndarray::{s, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{CustomOp, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::gat::{gat_on_tape, EdgeIndex, GatConfig, GatParams, DEFAULT_LEAKY_SLOPE};
use crate::graph_build::{PatientRecord, TileGraph, EDGE_CONT_DIM, N_SUBTYPE_PAIRS, PE_DIM};
use crate::ssm::{mamba_on_tape, uniform_matrix, Discretization, SsmConfig, SsmParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Ablation {
    #[default]
    Full,
    /// GAT branch only.
    GatOnly,
    /// Selective-scan branch only.
    MambaOnly,
    /// No edge embeddings; attention scores use node terms only.
    NoEdge,
    /// No positional encoding concatenated to the node features.
    NoPe,
}

impl Ablation {
    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::GatOnly => "gat",
            Ablation::MambaOnly => "mamba",
            Ablation::NoEdge => "no-edge",
            Ablation::NoPe => "no-pe",
        }
    }

    pub fn uses_gat(self) -> bool {
        self != Ablation::MambaOnly
    }

    pub fn uses_mamba(self) -> bool {
        self != Ablation::GatOnly
    }

    pub fn uses_edges(self) -> bool {
        self.uses_gat() && self != Ablation::NoEdge
    }

    pub fn uses_pe(self) -> bool {
        self != Ablation::NoPe
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "full" => Ablation::Full,
            "gat" => Ablation::GatOnly,
            "mamba" => Ablation::MambaOnly,
            "no-edge" => Ablation::NoEdge,
            "no-pe" => Ablation::NoPe,
            other => return Err(Error::Config(format!("unknown ablation '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Width of the raw per-tile feature vector.
    pub d_node: usize,
    pub d_uni_hidden: usize,
    pub d_edge_hidden: usize,
    pub n_blocks: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub n_gat_heads: usize,
    pub ssm_state: usize,
    pub ssm_expand: usize,
    pub ssm_conv: Option<usize>,
    pub discretization: Discretization,
    pub leaky_slope: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_node: 1024,
            d_uni_hidden: 64,
            d_edge_hidden: 16,
            n_blocks: 1,
            mlp_hidden: 32,
            dropout: 0.3,
            n_gat_heads: 1,
            ssm_state: 16,
            ssm_expand: 2,
            ssm_conv: None,
            discretization: Discretization::ZeroOrderHold,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ablation: Ablation::Full,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_pe(&self) -> usize {
        if self.ablation.uses_pe() {
            PE_DIM
        } else {
            0
        }
    }

    pub fn d_model(&self) -> usize {
        self.d_uni_hidden + self.d_pe()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_node", self.d_node),
            ("d_uni_hidden", self.d_uni_hidden),
            ("d_edge_hidden", self.d_edge_hidden),
            ("n_blocks", self.n_blocks),
            ("mlp_hidden", self.mlp_hidden),
            ("n_gat_heads", self.n_gat_heads),
            ("ssm_state", self.ssm_state),
            ("ssm_expand", self.ssm_expand),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.ssm_conv == Some(0) {
            return Err(Error::Config("ssm_conv kernel must be at least 1".into()));
        }
        Ok(())
    }

    pub fn ssm_config(&self) -> SsmConfig {
        let mut c = SsmConfig::new(self.d_model(), self.ssm_state);
        c.expand = self.ssm_expand;
        c.conv_kernel = self.ssm_conv;
        c.discretization = self.discretization;
        c
    }

    pub fn gat_config(&self) -> GatConfig {
        GatConfig {
            d_in: self.d_model(),
            d_hidden: self.d_model(),
            d_edge: self.ablation.uses_edges().then_some(self.d_edge_hidden),
            heads: self.n_gat_heads,
            leaky_slope: self.leaky_slope,
        }
    }
}

// ---------------------------------------------------------------------------
// Parameter storage

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub value: Mat,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Learnable tensors in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: Vec<NamedTensor>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Mat, decay: bool) -> ParamId {
        self.tensors.push(NamedTensor {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0].value
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors
            .iter()
            .position(|t| t.name == name)
            .map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    /// Total number of scalars.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in x out`
    pub w: T,
    /// `1 x out`
    pub b: Option<T>,
}

impl<T> Linear<T> {
    fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            w: f(&self.w),
            b: self.b.as_ref().map(f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<T> {
    pub gamma: T,
    pub beta: T,
    /// Index into [`ModelParams::bn_stats`].
    pub stats: usize,
}

impl<T> BatchNormParams<T> {
    fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> BatchNormParams<U> {
        BatchNormParams {
            gamma: f(&self.gamma),
            beta: f(&self.beta),
            stats: self.stats,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub gat: Option<GatParams<T>>,
    pub bn_gat: Option<BatchNormParams<T>>,
    pub ssm: Option<SsmParams<T>>,
    pub bn_mamba: Option<BatchNormParams<T>>,
    pub mlp1: Linear<T>,
    pub mlp2: Linear<T>,
    pub bn_out: BatchNormParams<T>,
}

impl<T> BlockParams<T> {
    fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            gat: self.gat.as_ref().map(|g| g.map(|_, t| f(t))),
            bn_gat: self.bn_gat.as_ref().map(|b| b.map(&mut f)),
            ssm: self.ssm.as_ref().map(|m| m.map(|_, t| f(t))),
            bn_mamba: self.bn_mamba.as_ref().map(|b| b.map(&mut f)),
            mlp1: self.mlp1.map(&mut f),
            mlp2: self.mlp2.map(&mut f),
            bn_out: self.bn_out.map(&mut f),
        }
    }
}

/// Handles into the [`ParamStore`] for every component.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout<T = ParamId> {
    pub l_node: Linear<T>,
    pub eb_cat: Option<T>,
    pub l_edge: Option<Linear<T>>,
    pub blocks: Vec<BlockParams<T>>,
    pub head1: Linear<T>,
    pub head2: Linear<T>,
}

impl<T> ModelLayout<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> ModelLayout<U> {
        ModelLayout {
            l_node: self.l_node.map(&mut f),
            eb_cat: self.eb_cat.as_ref().map(&mut f),
            l_edge: self.l_edge.as_ref().map(|l| l.map(&mut f)),
            blocks: self.blocks.iter().map(|b| b.map(&mut f)).collect(),
            head1: self.head1.map(&mut f),
            head2: self.head2.map(&mut f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub bn_stats: Vec<RunningStats>,
    pub layout: ModelLayout,
}

fn linear_init<R: Rng>(
    store: &mut ParamStore,
    rng: &mut R,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) -> Linear<ParamId> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = store.add(
        format!("{name}.w"),
        uniform_matrix(rng, fan_in, fan_out, bound),
        true,
    );
    let b = bias.then(|| {
        store.add(
            format!("{name}.b"),
            uniform_matrix(rng, 1, fan_out, bound),
            false,
        )
    });
    Linear { w, b }
}

fn batch_norm_init(
    store: &mut ParamStore,
    stats: &mut Vec<RunningStats>,
    name: &str,
    width: usize,
) -> BatchNormParams<ParamId> {
    let gamma = store.add(format!("{name}.gamma"), Mat::ones((1, width)), false);
    let beta = store.add(format!("{name}.beta"), Mat::zeros((1, width)), false);
    stats.push(RunningStats {
        name: name.to_string(),
        mean: vec![0.0; width],
        var: vec![1.0; width],
    });
    BatchNormParams {
        gamma,
        beta,
        stats: stats.len() - 1,
    }
}

fn no_decay(name: &str) -> bool {
    matches!(name, "a_log" | "b_delta" | "conv_b")
}

/// Deterministic initialization from `seed` (overrides `config.seed`).
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut config = config.clone();
    config.seed = seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    let mut stats = Vec::new();
    let d = config.d_model();
    let ab = config.ablation;

    let l_node = linear_init(
        &mut store,
        &mut rng,
        "l_node",
        config.d_node,
        config.d_uni_hidden,
        true,
    );
    let (eb_cat, l_edge) = if ab.uses_edges() {
        let normal = Normal::new(0.0, 0.02).expect("valid normal");
        let table = Mat::from_shape_fn((N_SUBTYPE_PAIRS, config.d_edge_hidden), |_| {
            normal.sample(&mut rng)
        });
        let eb = store.add("eb_cat", table, true);
        let le = linear_init(
            &mut store,
            &mut rng,
            "l_edge",
            EDGE_CONT_DIM,
            config.d_edge_hidden,
            true,
        );
        (Some(eb), Some(le))
    } else {
        (None, None)
    };

    let mut blocks = Vec::with_capacity(config.n_blocks);
    for bi in 0..config.n_blocks {
        let prefix = format!("block{bi}");
        let (gat, bn_gat) = if ab.uses_gat() {
            let g = GatParams::init(&config.gat_config(), &mut rng);
            let g = g.map(|n, m| store.add(format!("{prefix}.gat.{n}"), m.clone(), true));
            let bn = batch_norm_init(&mut store, &mut stats, &format!("{prefix}.bn_gat"), d);
            (Some(g), Some(bn))
        } else {
            (None, None)
        };
        let (ssm, bn_mamba) = if ab.uses_mamba() {
            let m = SsmParams::init(&config.ssm_config(), &mut rng);
            let m = m.map(|n, v| store.add(format!("{prefix}.mamba.{n}"), v.clone(), !no_decay(n)));
            let bn = batch_norm_init(&mut store, &mut stats, &format!("{prefix}.bn_mamba"), d);
            (Some(m), Some(bn))
        } else {
            (None, None)
        };
        let mlp1 = linear_init(&mut store, &mut rng, &format!("{prefix}.mlp1"), d, d, true);
        let mlp2 = linear_init(&mut store, &mut rng, &format!("{prefix}.mlp2"), d, d, true);
        let bn_out = batch_norm_init(&mut store, &mut stats, &format!("{prefix}.bn_out"), d);
        blocks.push(BlockParams {
            gat,
            bn_gat,
            ssm,
            bn_mamba,
            mlp1,
            mlp2,
            bn_out,
        });
    }
    let head1 = linear_init(&mut store, &mut rng, "head1", d, config.mlp_hidden, true);
    let head2 = linear_init(&mut store, &mut rng, "head2", config.mlp_hidden, 1, true);
    Ok(ModelParams {
        config,
        store,
        bn_stats: stats,
        layout: ModelLayout {
            l_node,
            eb_cat,
            l_edge,
            blocks,
            head1,
            head2,
        },
    })
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn all_finite(&self) -> bool {
        self.store
            .tensors()
            .iter()
            .all(|t| t.value.iter().all(|v| v.is_finite()))
    }

    /// Copies every tensor whose name exists in `other` with the same shape.
    pub fn copy_matching_from(&mut self, other: &ModelParams) {
        for t in self.store.tensors_mut() {
            if let Some(id) = other.store.find(&t.name) {
                let src = other.store.get(id);
                if src.dim() == t.value.dim() {
                    t.value.assign(src);
                }
            }
        }
        for st in &mut self.bn_stats {
            if let Some(o) = other.bn_stats.iter().find(|o| o.name == st.name) {
                if o.mean.len() == st.mean.len() {
                    st.mean.clone_from(&o.mean);
                    st.var.clone_from(&o.var);
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Canonical order

/// Permutation that sorts nodes by `(row, col, node_id)`: `perm[k]` is the
/// index of the `k`-th node in canonical order.
pub fn canonical_order(graph: &TileGraph) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..graph.nodes.len()).collect();
    perm.sort_by_key(|&i| {
        let n = &graph.nodes[i];
        (n.row, n.col, n.node_id)
    });
    perm
}

/// Reorders nodes (and positional encodings) by `perm` and remaps edges.
pub fn apply_order(graph: &TileGraph, perm: &[usize]) -> TileGraph {
    let mut inverse = vec![0; perm.len()];
    for (new, &old) in perm.iter().enumerate() {
        inverse[old] = new;
    }
    TileGraph {
        nodes: perm.iter().map(|&i| graph.nodes[i].clone()).collect(),
        pe: perm.iter().map(|&i| graph.pe[i]).collect(),
        edges: graph
            .edges
            .iter()
            .map(|&(i, j)| (inverse[i], inverse[j]))
            .collect(),
        edge_cat: graph.edge_cat.clone(),
        edge_cont: graph.edge_cont.clone(),
    }
}

// ---------------------------------------------------------------------------
// Batch norm

struct BatchNormOp {
    xhat: Mat,
    inv_std: Vec<f64>,
    batch_stats: bool,
}

impl CustomOp for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, inputs: &[&Mat], _output: &Mat, g: &Mat) -> Vec<Option<Mat>> {
        let gamma = inputs[1];
        let n = g.nrows() as f64;
        let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
        let ggamma = (g * &self.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut gx = g * gamma;
        if self.batch_stats {
            let sum_dxhat = gx.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&gx * &self.xhat).sum_axis(Axis(0));
            for ((r, c), v) in gx.indexed_iter_mut() {
                let xh = self.xhat[[r, c]];
                *v = self.inv_std[c] / n * (n * *v - sum_dxhat[c] - xh * sum_dxhat_xhat[c]);
            }
        } else {
            for ((_, c), v) in gx.indexed_iter_mut() {
                *v *= self.inv_std[c];
            }
        }
        vec![Some(gx), Some(ggamma), Some(gbeta)]
    }
}

/// Batch statistics observed during a training forward pass.
#[derive(Debug, Clone)]
pub struct ObservedStats {
    pub slot: usize,
    pub mean: Vec<f64>,
    /// Unbiased variance.
    pub var: Vec<f64>,
}

/// Per-feature `(mean, unbiased variance)` of a training batch.
pub type BatchStats = (Vec<f64>, Vec<f64>);

/// Batch norm over rows. With `stats = None` it normalizes with the batch
/// mean and biased variance; otherwise with the given running statistics.
pub fn batch_norm_on_tape(
    tape: &mut Tape,
    x: Var,
    gamma: Var,
    beta: Var,
    running: Option<(&[f64], &[f64])>,
    eps: f64,
) -> (Var, Option<BatchStats>) {
    let xv = tape.value(x);
    let (n, d) = xv.dim();
    let (mean, var, observed) = match running {
        Some((m, v)) => (m.to_vec(), v.to_vec(), None),
        None => {
            let mean: Vec<f64> = (0..d).map(|c| xv.column(c).sum() / n as f64).collect();
            let var: Vec<f64> = (0..d)
                .map(|c| {
                    xv.column(c)
                        .iter()
                        .map(|v| (v - mean[c]).powi(2))
                        .sum::<f64>()
                        / n as f64
                })
                .collect();
            let unbiased = if n > 1 {
                var.iter().map(|v| v * n as f64 / (n - 1) as f64).collect()
            } else {
                var.clone()
            };
            (mean.clone(), var, Some((mean, unbiased)))
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let xhat = Mat::from_shape_fn((n, d), |(r, c)| (xv[[r, c]] - mean[c]) * inv_std[c]);
    let out = &xhat * tape.value(gamma) + tape.value(beta);
    let var_out = tape.custom(
        vec![x, gamma, beta],
        out,
        Box::new(BatchNormOp {
            xhat,
            inv_std,
            batch_stats: running.is_none(),
        }),
    );
    (var_out, observed)
}

// ---------------------------------------------------------------------------
// Forward pass

pub enum Mode<'a> {
    Eval,
    /// Dropout active with this generator; batch norm uses batch statistics.
    Train(&'a mut ChaCha8Rng),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }
}

/// Graphs of a batch stacked into one disjoint union.
#[derive(Debug, Clone)]
pub struct StackedBatch {
    pub x_uni: Mat,
    pub pe: Mat,
    pub edges: EdgeIndex,
    pub edge_cat: Rc<[usize]>,
    pub edge_cont: Mat,
    /// Node row range of each graph.
    pub node_segments: Rc<[(usize, usize)]>,
    /// Graph range of each patient.
    pub graph_segments: Rc<[(usize, usize)]>,
}

pub fn stack_patients(patients: &[&PatientRecord], d_node: usize) -> Result<StackedBatch> {
    let mut graphs: Vec<TileGraph> = Vec::new();
    let mut graph_segments = Vec::with_capacity(patients.len());
    for p in patients {
        if p.graphs.is_empty() {
            return Err(Error::InvalidInput(format!(
                "patient {} has no graphs",
                p.patient_id
            )));
        }
        let start = graphs.len();
        for g in &p.graphs {
            if g.nodes.is_empty() {
                return Err(Error::EmptyGraph);
            }
            if g.feature_dim() != d_node {
                return Err(Error::Shape(format!(
                    "patient {}: feature width {} but model expects {d_node}",
                    p.patient_id,
                    g.feature_dim()
                )));
            }
            let perm = canonical_order(g);
            if perm.iter().enumerate().all(|(k, &i)| k == i) {
                graphs.push(g.clone());
            } else {
                graphs.push(apply_order(g, &perm));
            }
        }
        graph_segments.push((start, graphs.len()));
    }
    let n_nodes: usize = graphs.iter().map(|g| g.n_nodes()).sum();
    let n_edges: usize = graphs.iter().map(|g| g.n_edges()).sum();
    let mut x_uni = Mat::zeros((n_nodes, d_node));
    let mut pe = Mat::zeros((n_nodes, PE_DIM));
    let mut edge_cont = Mat::zeros((n_edges, EDGE_CONT_DIM));
    let mut edge_list = Vec::with_capacity(n_edges);
    let mut edge_cat = Vec::with_capacity(n_edges);
    let mut node_segments = Vec::with_capacity(graphs.len());
    let (mut off, mut eoff) = (0, 0);
    for g in &graphs {
        for (k, n) in g.nodes.iter().enumerate() {
            x_uni
                .row_mut(off + k)
                .assign(&ndarray::ArrayView1::from(&n.features[..]));
            pe.row_mut(off + k)
                .assign(&ndarray::ArrayView1::from(&g.pe[k][..]));
        }
        for (k, &(i, j)) in g.edges.iter().enumerate() {
            edge_list.push((off + i, off + j));
            edge_cat.push(g.edge_cat[k] as usize);
            edge_cont
                .row_mut(eoff + k)
                .assign(&ndarray::ArrayView1::from(&g.edge_cont[k][..]));
        }
        node_segments.push((off, off + g.n_nodes()));
        off += g.n_nodes();
        eoff += g.n_edges();
    }
    Ok(StackedBatch {
        x_uni,
        pe,
        edges: EdgeIndex::new(&edge_list, n_nodes)?,
        edge_cat: edge_cat.into(),
        edge_cont,
        node_segments: node_segments.into(),
        graph_segments: graph_segments.into(),
    })
}

/// A recorded forward pass over a batch of patients.
pub struct BatchForward {
    pub tape: Tape,
    /// `n_patients x 1`
    pub risks: Var,
    /// Tape variable of each stored parameter, indexed by [`ParamId`].
    pub bound: Vec<Var>,
    pub observed: Vec<ObservedStats>,
}

impl BatchForward {
    pub fn risk_values(&self) -> Vec<f64> {
        self.tape.value(self.risks).iter().copied().collect()
    }
}

fn linear_on_tape(tape: &mut Tape, x: Var, l: &Linear<Var>) -> Var {
    let y = tape.matmul(x, l.w);
    match l.b {
        Some(b) => tape.add_row(y, b),
        None => y,
    }
}

fn dropout_on_tape(tape: &mut Tape, x: Var, p: f64, mode: &mut Mode<'_>) -> Var {
    match mode {
        Mode::Train(rng) if p > 0.0 => {
            let keep = 1.0 / (1.0 - p);
            let mask = Mat::from_shape_fn(tape.value(x).raw_dim(), |_| {
                if rng.random::<f64>() < p {
                    0.0
                } else {
                    keep
                }
            });
            let m = tape.leaf(mask);
            tape.mul(x, m)
        }
        _ => x,
    }
}

fn check_finite(tape: &Tape, v: Var, location: impl FnOnce() -> String) -> Result<()> {
    if tape.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            location: location(),
        })
    }
}

struct BlockContext<'a> {
    config: &'a ModelConfig,
    bn_stats: &'a [RunningStats],
    edges: &'a EdgeIndex,
    segments: Rc<[(usize, usize)]>,
}

fn norm(
    tape: &mut Tape,
    ctx: &BlockContext<'_>,
    x: Var,
    bn: &BatchNormParams<Var>,
    mode: &Mode<'_>,
    observed: &mut Vec<ObservedStats>,
) -> Var {
    let stats = &ctx.bn_stats[bn.stats];
    let running = (!mode.is_train()).then(|| (&stats.mean[..], &stats.var[..]));
    let (out, obs) = batch_norm_on_tape(tape, x, bn.gamma, bn.beta, running, ctx.config.bn_eps);
    if let Some((mean, var)) = obs {
        observed.push(ObservedStats {
            slot: bn.stats,
            mean,
            var,
        });
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn block_on_tape(
    tape: &mut Tape,
    ctx: &BlockContext<'_>,
    block_index: usize,
    x: Var,
    e: Option<Var>,
    p: &BlockParams<Var>,
    mode: &mut Mode<'_>,
    observed: &mut Vec<ObservedStats>,
) -> Result<Var> {
    let dropout = ctx.config.dropout;
    let mut branches = Vec::with_capacity(2);
    if let (Some(gat), Some(bn)) = (&p.gat, &p.bn_gat) {
        let (g, _) = gat_on_tape(tape, x, e, ctx.edges, gat, ctx.config.leaky_slope)?;
        check_finite(tape, g, || format!("block {block_index} GAT branch"))?;
        let g = dropout_on_tape(tape, g, dropout, mode);
        branches.push(norm(tape, ctx, g, bn, mode, observed));
    }
    if let (Some(ssm), Some(bn)) = (&p.ssm, &p.bn_mamba) {
        let m = mamba_on_tape(
            tape,
            x,
            ssm,
            ctx.segments.clone(),
            ctx.config.discretization,
        )
        .map_err(|err| match err {
            Error::NonFinite { location } => Error::NonFinite {
                location: format!("block {block_index} Mamba branch: {location}"),
            },
            other => other,
        })?;
        check_finite(tape, m, || format!("block {block_index} Mamba branch"))?;
        let m = dropout_on_tape(tape, m, dropout, mode);
        branches.push(norm(tape, ctx, m, bn, mode, observed));
    }
    let sum = match branches[..] {
        [a] => a,
        [a, b] => tape.add(a, b),
        _ => return Err(Error::Config("block has no branches".into())),
    };
    let h = linear_on_tape(tape, sum, &p.mlp1);
    let h = tape.relu(h);
    let h = linear_on_tape(tape, h, &p.mlp2);
    let res = tape.add(h, sum);
    let out = norm(tape, ctx, res, &p.bn_out, mode, observed);
    check_finite(tape, out, || format!("block {block_index} MLP output"))?;
    Ok(out)
}

fn bind_params(tape: &mut Tape, params: &ModelParams) -> (Vec<Var>, ModelLayout<Var>) {
    let bound: Vec<Var> = params
        .store
        .tensors()
        .iter()
        .map(|t| tape.leaf(t.value.clone()))
        .collect();
    let layout = params.layout.map(|id| bound[id.0]);
    (bound, layout)
}

/// Embeds stacked inputs: returns node matrix `X` and edge matrix `E`.
fn embed_inputs(
    tape: &mut Tape,
    params: &ModelParams,
    layout: &ModelLayout<Var>,
    batch: &StackedBatch,
) -> (Var, Option<Var>) {
    let x_uni = tape.leaf(batch.x_uni.clone());
    let xh = linear_on_tape(tape, x_uni, &layout.l_node);
    let x = if params.config.ablation.uses_pe() {
        let pe = tape.leaf(batch.pe.clone());
        tape.concat_cols(xh, pe)
    } else {
        xh
    };
    let e = match (layout.eb_cat, &layout.l_edge) {
        (Some(eb), Some(le)) => {
            let ecat = tape.gather_rows(eb, batch.edge_cat.clone());
            let cont = tape.leaf(batch.edge_cont.clone());
            let econt = linear_on_tape(tape, cont, le);
            Some(tape.add(ecat, econt))
        }
        _ => None,
    };
    (x, e)
}

/// Forward pass over a batch of patients on a fresh tape.
pub fn forward_batch(
    params: &ModelParams,
    patients: &[&PatientRecord],
    mut mode: Mode<'_>,
) -> Result<BatchForward> {
    if patients.is_empty() {
        return Err(Error::InvalidInput("empty patient batch".into()));
    }
    let batch = stack_patients(patients, params.config.d_node)?;
    let mut tape = Tape::new();
    let (bound, layout) = bind_params(&mut tape, params);
    let (mut x, e) = embed_inputs(&mut tape, params, &layout, &batch);
    let ctx = BlockContext {
        config: &params.config,
        bn_stats: &params.bn_stats,
        edges: &batch.edges,
        segments: batch.node_segments.clone(),
    };
    let mut observed = Vec::new();
    for (bi, block) in layout.blocks.iter().enumerate() {
        x = block_on_tape(&mut tape, &ctx, bi, x, e, block, &mut mode, &mut observed)?;
    }
    let pooled = tape.segment_mean(x, batch.node_segments.clone());
    let patient = tape.segment_mean(pooled, batch.graph_segments.clone());
    let h = linear_on_tape(&mut tape, patient, &layout.head1);
    let h = tape.relu(h);
    let risks = linear_on_tape(&mut tape, h, &layout.head2);
    check_finite(&tape, risks, || "risk head".to_string())?;
    Ok(BatchForward {
        tape,
        risks,
        bound,
        observed,
    })
}

/// Folds training-mode batch statistics into the running averages.
pub fn update_running_stats(params: &mut ModelParams, observed: &[ObservedStats]) {
    let m = params.config.bn_momentum;
    for obs in observed {
        let st = &mut params.bn_stats[obs.slot];
        for (r, &b) in st.mean.iter_mut().zip(&obs.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in st.var.iter_mut().zip(&obs.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Risk of one patient in eval mode (or training mode with `rng`).
pub fn model_forward(
    patient: &PatientRecord,
    params: &ModelParams,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<f64> {
    let mode = match rng {
        Some(r) => Mode::Train(r),
        None => Mode::Eval,
    };
    let fwd = forward_batch(params, &[patient], mode)?;
    Ok(fwd.tape.scalar(fwd.risks))
}

/// Eval-mode risks, one forward per patient so each value is independent
/// of batch composition.
pub fn predict_risks(params: &ModelParams, patients: &[&PatientRecord]) -> Result<Vec<f64>> {
    patients
        .iter()
        .map(|p| model_forward(p, params, None))
        .collect()
}

/// Output of one block on a single graph, given already-embedded
/// node features `x` (`N x d_model`, canonical order) and edge features `e`.
pub fn block_forward(
    graph: &TileGraph,
    x: &Mat,
    e: Option<&Mat>,
    params: &ModelParams,
    block_index: usize,
    mut mode: Mode<'_>,
) -> Result<Mat> {
    if block_index >= params.layout.blocks.len() {
        return Err(Error::InvalidInput(format!("no block {block_index}")));
    }
    let mut tape = Tape::new();
    let (_, layout) = bind_params(&mut tape, params);
    let edges = EdgeIndex::new(&graph.edges, graph.n_nodes())?;
    let ctx = BlockContext {
        config: &params.config,
        bn_stats: &params.bn_stats,
        edges: &edges,
        segments: vec![(0, graph.n_nodes())].into(),
    };
    let xv = tape.leaf(x.clone());
    let ev = e.map(|e| tape.leaf(e.clone()));
    let mut observed = Vec::new();
    let out = block_on_tape(
        &mut tape,
        &ctx,
        block_index,
        xv,
        ev,
        &layout.blocks[block_index],
        &mut mode,
        &mut observed,
    )?;
    Ok(tape.value(out).clone())
}

/// Embedded inputs `(X, E)` for one graph, as fed to the first block.
pub fn embed_graph(graph: &TileGraph, params: &ModelParams) -> Result<(Mat, Option<Mat>)> {
    let record = PatientRecord {
        patient_id: String::new(),
        graphs: vec![graph.clone()],
        event: false,
        time_days: 1.0,
    };
    let batch = stack_patients(&[&record], params.config.d_node)?;
    let mut tape = Tape::new();
    let (_, layout) = bind_params(&mut tape, params);
    let (x, e) = embed_inputs(&mut tape, params, &layout, &batch);
    Ok((tape.value(x).clone(), e.map(|e| tape.value(e).clone())))
}

/// Gradient of the batch Cox loss with respect to every stored parameter,
/// in store order.
pub fn loss_and_gradients(
    params: &ModelParams,
    patients: &[&PatientRecord],
    mode: Mode<'_>,
    ties: crate::survival::TieMethod,
) -> Result<(f64, Vec<Mat>, Vec<ObservedStats>)> {
    let mut fwd = forward_batch(params, patients, mode)?;
    let times: Vec<f64> = patients.iter().map(|p| p.time_days).collect();
    let events: Vec<bool> = patients.iter().map(|p| p.event).collect();
    let loss = cox_on_tape(&mut fwd.tape, fwd.risks, times, events, ties)?;
    let value = fwd.tape.scalar(loss);
    let grads = fwd.tape.backward(loss);
    let g = params
        .store
        .tensors()
        .iter()
        .zip(&fwd.bound)
        .map(|(t, &v)| {
            grads
                .get_or_zeros(v, &t.value)
                .as_standard_layout()
                .into_owned()
        })
        .collect();
    Ok((value, g, fwd.observed))
}

struct CoxOp {
    grad: Vec<f64>,
}

impl CustomOp for CoxOp {
    fn name(&self) -> &'static str {
        "cox_loss"
    }

    fn backward(&self, _inputs: &[&Mat], _output: &Mat, g: &Mat) -> Vec<Option<Mat>> {
        let scale = g[[0, 0]];
        let n = self.grad.len();
        vec![Some(Mat::from_shape_fn((n, 1), |(r, _)| {
            self.grad[r] * scale
        }))]
    }
}

/// Cox loss of a risk column on the tape.
pub fn cox_on_tape(
    tape: &mut Tape,
    risks: Var,
    times: Vec<f64>,
    events: Vec<bool>,
    ties: crate::survival::TieMethod,
) -> Result<Var> {
    let r: Vec<f64> = tape.value(risks).iter().copied().collect();
    let (loss, grad) = crate::survival::cox_loss_and_grad(&r, &times, &events, ties)?;
    Ok(tape.custom(
        vec![risks],
        Mat::from_elem((1, 1), loss),
        Box::new(CoxOp { grad }),
    ))
}

/// Rows `start..end` of a matrix, owned.
pub fn rows(m: &Mat, start: usize, end: usize) -> Mat {
    m.slice(s![start..end, ..]).to_owned()
}

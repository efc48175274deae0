//! Reference implementations used by the integration tests. Everything
//! here is written as plainly as possible, with no sharing of code paths
//! with the library beyond its public data types.

#![allow(dead_code)]

use gat_mamba::gat::gat_forward;
use gat_mamba::graph_build::{PatientRecord, TileGraph, TileNode, DEFAULT_K};
use gat_mamba::model::{BatchNormParams, Linear, ModelParams, ParamId};
use gat_mamba::ssm::mamba_forward;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Array2<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k) = a.dim();
    let m = b.ncols();
    assert_eq!(k, b.nrows());
    let mut out = Mat::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[[i, l]] * b[[l, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

pub fn add_row(a: &Mat, b: &Mat) -> Mat {
    Mat::from_shape_fn(a.dim(), |(i, j)| a[[i, j]] + b[[0, j]])
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn max_rel_err(a: &Mat, b: &Mat) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

/// Diagonal selective-scan recurrence, one channel and state at a time:
/// `h_t = exp(dt a) h_{t-1} + (exp(dt a) - 1) / a * b_t u_t`, `y_t = c_t . h_t`.
pub fn naive_scan(u: &Mat, dt: &Mat, a: &Mat, b: &Mat, c: &Mat) -> Mat {
    let (l, d) = u.dim();
    let s = a.ncols();
    let mut y = Mat::zeros((l, d));
    for ch in 0..d {
        let mut h = vec![0.0; s];
        for t in 0..l {
            let mut acc = 0.0;
            for k in 0..s {
                let z = dt[[t, ch]] * a[[ch, k]];
                let bbar = (z.exp() - 1.0) / a[[ch, k]] * b[[t, k]];
                h[k] = z.exp() * h[k] + bbar * u[[t, ch]];
                acc += c[[t, k]] * h[k];
            }
            y[[t, ch]] = acc;
        }
    }
    y
}

/// Harrell pair counts: `(2 * concordant + ties, 2 * comparable)`.
pub fn c_index_pairs(risks: &[f64], times: &[f64], events: &[bool]) -> (u64, u64) {
    let n = risks.len();
    let (mut num, mut den) = (0u64, 0u64);
    for i in 0..n {
        for j in 0..n {
            if events[i] && times[i] < times[j] {
                den += 2;
                if risks[i] > risks[j] {
                    num += 2;
                } else if risks[i] == risks[j] {
                    num += 1;
                }
            }
        }
    }
    (num, den)
}

/// Cumulative/dynamic AUC pair counts at a horizon: `(2 * above + ties, 2 * pairs)`.
pub fn auc_pairs(risks: &[f64], times: &[f64], events: &[bool], horizon: f64) -> (u64, u64) {
    let n = risks.len();
    let (mut num, mut den) = (0u64, 0u64);
    for i in 0..n {
        if !(events[i] && times[i] <= horizon) {
            continue;
        }
        for j in 0..n {
            if times[j] > horizon {
                den += 2;
                if risks[i] > risks[j] {
                    num += 2;
                } else if risks[i] == risks[j] {
                    num += 1;
                }
            }
        }
    }
    (num, den)
}

/// Breslow negative log partial likelihood averaged over events.
pub fn naive_cox(risks: &[f64], times: &[f64], events: &[bool]) -> f64 {
    let n = risks.len();
    let mut total = 0.0;
    let mut d = 0;
    for i in 0..n {
        if !events[i] {
            continue;
        }
        d += 1;
        let mut s = 0.0;
        for j in 0..n {
            if times[j] >= times[i] {
                s += risks[j].exp();
            }
        }
        total += risks[i] - s.ln();
    }
    -total / d as f64
}

pub fn grid_graph(rng: &mut ChaCha8Rng, n: usize, d: usize) -> TileGraph {
    let width = (n as f64).sqrt().ceil() as usize;
    let nodes = (0..n)
        .map(|i| TileNode {
            node_id: i,
            row: (i / width) as u32,
            col: (i % width) as u32,
            subtype: rng.random_range(0..6),
            features: (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect();
    TileGraph::build(nodes, DEFAULT_K).unwrap()
}

pub fn patient(
    rng: &mut ChaCha8Rng,
    id: &str,
    n: usize,
    d: usize,
    time: f64,
    event: bool,
) -> PatientRecord {
    PatientRecord {
        patient_id: id.into(),
        graphs: vec![grid_graph(rng, n, d)],
        event,
        time_days: time,
    }
}

pub fn linear(store: &ModelParams, l: &Linear<ParamId>, x: &Mat) -> Mat {
    let y = matmul(x, store.store.get(l.w));
    match l.b {
        Some(b) => add_row(&y, store.store.get(b)),
        None => y,
    }
}

pub fn eval_bn(p: &ModelParams, bn: &BatchNormParams<ParamId>, x: &Mat) -> Mat {
    let st = &p.bn_stats[bn.stats];
    let (g, b) = (p.store.get(bn.gamma), p.store.get(bn.beta));
    let eps = p.config.bn_eps;
    Mat::from_shape_fn(x.dim(), |(i, j)| {
        (x[[i, j]] - st.mean[j]) / (st.var[j] + eps).sqrt() * g[[0, j]] + b[[0, j]]
    })
}

/// Eval-mode risk of a one-graph patient built from the standalone layers.
pub fn reference_risk(p: &ModelParams, g: &TileGraph) -> Result<f64, String> {
    let lay = &p.layout;
    let n = g.n_nodes();
    let x_uni = Mat::from_shape_fn((n, p.config.d_node), |(i, j)| g.nodes[i].features[j]);
    let xh = linear(p, &lay.l_node, &x_uni);
    let pe_w = if p.config.ablation.uses_pe() {
        g.pe[0].len()
    } else {
        0
    };
    let mut x = Mat::from_shape_fn((n, xh.ncols() + pe_w), |(i, j)| {
        if j < xh.ncols() {
            xh[[i, j]]
        } else {
            g.pe[i][j - xh.ncols()]
        }
    });
    let e = match (lay.eb_cat, &lay.l_edge) {
        (Some(eb), Some(le)) => {
            let cont = Mat::from_shape_fn((g.n_edges(), 2), |(k, c)| g.edge_cont[k][c]);
            let ec = linear(p, le, &cont);
            let table = p.store.get(eb);
            Some(Mat::from_shape_fn(ec.dim(), |(k, c)| {
                ec[[k, c]] + table[[g.edge_cat[k] as usize, c]]
            }))
        }
        _ => None,
    };
    for block in &lay.blocks {
        let mut branch: Option<Mat> = None;
        if let (Some(gat), Some(bn)) = (&block.gat, &block.bn_gat) {
            let gp = gat.map(|_, id| p.store.get(*id).clone());
            let out = gat_forward(&x, e.as_ref(), &g.edges, &gp, p.config.leaky_slope)
                .map_err(|e| e.to_string())?;
            branch = Some(eval_bn(p, bn, &out));
        }
        if let (Some(ssm), Some(bn)) = (&block.ssm, &block.bn_mamba) {
            let sp = ssm.map(|_, id| p.store.get(*id).clone());
            let out = eval_bn(
                p,
                bn,
                &mamba_forward(&x, &sp, p.config.discretization).map_err(|e| e.to_string())?,
            );
            branch = Some(match branch {
                Some(b) => b + &out,
                None => out,
            });
        }
        let branch = branch.ok_or("block has no branches")?;
        let h = linear(p, &block.mlp1, &branch).mapv(|v| v.max(0.0));
        let res = linear(p, &block.mlp2, &h) + &branch;
        x = eval_bn(p, &block.bn_out, &res);
    }
    let pooled = x
        .mean_axis(ndarray::Axis(0))
        .unwrap()
        .insert_axis(ndarray::Axis(0));
    let h = linear(p, &lay.head1, &pooled).mapv(|v| v.max(0.0));
    Ok(linear(p, &lay.head2, &h)[[0, 0]])
}

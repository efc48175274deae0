//! Synthetic tile-graph cohorts with a known risk function.
//!
//! Each patient gets a grid of tiles, a fraction `f` of which are
//! aggressive (micropapillary or solid). Micropapillary features are shifted
//! by `+shift * u` and solid features by `-shift * u` for a fixed random unit
//! direction `u`; other tiles are unshifted. The event time is exponential
//! with hazard `ln2 / median_time_days * exp(beta * (f - f_mid) / fraction_unit)`
//! where `f_mid` is the middle of the aggressive-fraction range.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use crate::error::{Error, Result};
use crate::graph_build::{PatientRecord, TileGraph, TileNode, DEFAULT_K, MICROPAPILLARY, SOLID};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_patients: usize,
    /// Inclusive range of tiles per graph.
    pub nodes: (usize, usize),
    pub d_node: usize,
    /// Range of the aggressive-tile fraction `f`.
    pub aggressive_fraction: (f64, f64),
    /// `beta`; log-hazard increases by `beta` per `fraction_unit` of `f`.
    pub hazard_coefficient: f64,
    pub fraction_unit: f64,
    pub censoring_rate: f64,
    /// Norm of the subtype feature shift.
    pub shift: f64,
    /// Median event time at `f = f_mid`.
    pub median_time_days: f64,
    pub graphs_per_patient: usize,
    pub knn_k: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_patients: 400,
            nodes: (60, 120),
            d_node: 16,
            aggressive_fraction: (0.0, 1.0),
            hazard_coefficient: 3.0,
            fraction_unit: 0.2,
            censoring_rate: 0.3,
            shift: 3.0,
            median_time_days: 1000.0,
            graphs_per_patient: 1,
            knn_k: DEFAULT_K,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_patients == 0 {
            return bad("n_patients must be at least 1");
        }
        if self.nodes.0 == 0 || self.nodes.0 > self.nodes.1 {
            return bad("nodes range must be nonempty and start at 1 or more");
        }
        if self.d_node == 0 {
            return bad("d_node must be at least 1");
        }
        let (lo, hi) = self.aggressive_fraction;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return bad("aggressive fraction range must lie within [0, 1]");
        }
        if !(self.hazard_coefficient >= 0.0 && self.fraction_unit > 0.0) {
            return bad("hazard_coefficient must be non-negative and fraction_unit positive");
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return bad("censoring_rate outside [0, 1)");
        }
        if !(self.median_time_days > 0.0) || self.graphs_per_patient == 0 {
            return bad("median_time_days and graphs_per_patient must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub patient_id: String,
    /// Realized share of aggressive tiles over all of the patient's graphs.
    pub aggressive_fraction: f64,
    pub hazard: f64,
    pub event_time: f64,
    pub event: bool,
    pub time_days: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub patients: Vec<PatientRecord>,
    pub truth: Vec<GroundTruth>,
    pub direction: Vec<f64>,
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn make_graph(
    rng: &mut ChaCha8Rng,
    cfg: &SyntheticConfig,
    u: &[f64],
    fraction: f64,
) -> Result<(TileGraph, usize)> {
    let n = rng.random_range(cfg.nodes.0..=cfg.nodes.1);
    let width = (n as f64).sqrt().ceil() as usize;
    let n_aggr = ((fraction * n as f64).round() as usize).min(n);
    let mut aggressive = vec![false; n];
    for i in index::sample(rng, n, n_aggr) {
        aggressive[i] = true;
    }
    let nodes = (0..n)
        .map(|i| {
            let (subtype, sign) = if aggressive[i] {
                if rng.random::<bool>() {
                    (MICROPAPILLARY, 1.0)
                } else {
                    (SOLID, -1.0)
                }
            } else {
                (rng.random_range(0..MICROPAPILLARY), 0.0)
            };
            let features = u
                .iter()
                .map(|&ud| rng.sample::<f64, _>(StandardNormal) + sign * cfg.shift * ud)
                .collect();
            TileNode {
                node_id: i,
                row: (i / width) as u32,
                col: (i % width) as u32,
                subtype,
                features,
            }
        })
        .collect();
    Ok((TileGraph::build(nodes, cfg.knn_k)?, n_aggr))
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let u = unit_vector(&mut rng, cfg.d_node);
    let (lo, hi) = cfg.aggressive_fraction;
    let f_mid = 0.5 * (lo + hi);
    let base = std::f64::consts::LN_2 / cfg.median_time_days;
    let width = cfg.n_patients.to_string().len().max(4);

    let mut patients = Vec::with_capacity(cfg.n_patients);
    let mut truth = Vec::with_capacity(cfg.n_patients);
    for p in 0..cfg.n_patients {
        let patient_id = format!("P{p:0width$}");
        let target = if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let (mut n_total, mut n_aggr) = (0, 0);
        let mut graphs = Vec::with_capacity(cfg.graphs_per_patient);
        for _ in 0..cfg.graphs_per_patient {
            let (g, a) = make_graph(&mut rng, cfg, &u, target)?;
            n_total += g.n_nodes();
            n_aggr += a;
            graphs.push(g);
        }
        let fraction = n_aggr as f64 / n_total as f64;
        let hazard = base * (cfg.hazard_coefficient * (fraction - f_mid) / cfg.fraction_unit).exp();
        let event_time: f64 = Exp::new(hazard)
            .map_err(|e| Error::Config(format!("hazard {hazard}: {e}")))?
            .sample(&mut rng);
        let censored = rng.random::<f64>() < cfg.censoring_rate;
        let time_days = if censored {
            (1.0 - rng.random::<f64>()) * event_time
        } else {
            event_time
        };
        let time_days = time_days.max(f64::MIN_POSITIVE);
        truth.push(GroundTruth {
            patient_id: patient_id.clone(),
            aggressive_fraction: fraction,
            hazard,
            event_time,
            event: !censored,
            time_days,
        });
        patients.push(PatientRecord {
            patient_id,
            graphs,
            event: !censored,
            time_days,
        });
    }
    Ok(SyntheticDataset {
        patients,
        truth,
        direction: u,
    })
}

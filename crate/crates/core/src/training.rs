//! Optimizer, early stopping, stratified cross-validation and tile sampling.

use std::fmt;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::graph_build::{
    PatientRecord, TileGraph, DEFAULT_K, LEPIDIC, MICROPAPILLARY, NON_TUMOR, SOLID,
};
use crate::model::{
    init_params, loss_and_gradients, predict_risks, update_running_stats, Mode, ModelConfig,
    ModelParams, ParamStore,
};
use crate::survival::{
    c_index, cox_loss_and_grad, dynamic_auc, SurvivalBatch, TieMethod, AUC_HORIZONS_DAYS,
};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum SamplingStrategy {
    #[default]
    Full,
    /// Keep `ceil(p * N / 100)` tiles chosen uniformly without replacement.
    RandomPct(f64),
    /// Micropapillary and solid tiles.
    AggressiveOnly,
    /// Non-tumor and lepidic tiles.
    LeastAggressiveOnly,
}

impl SamplingStrategy {
    pub fn from_parts(name: &str, pct: Option<f64>) -> Result<Self> {
        let s = match name {
            "full" => SamplingStrategy::Full,
            "random_pct" | "random-pct" | "random" => {
                let p =
                    pct.ok_or_else(|| Error::Config("random_pct sampling needs --pct".into()))?;
                SamplingStrategy::RandomPct(p)
            }
            "aggressive_only" | "aggressive-only" => SamplingStrategy::AggressiveOnly,
            "least_aggressive_only" | "least-aggressive-only" => {
                SamplingStrategy::LeastAggressiveOnly
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown sampling strategy '{other}'"
                )))
            }
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            SamplingStrategy::RandomPct(p) if !(p > 0.0 && p <= 100.0) => Err(Error::Config(
                format!("sampling percentage {p} outside (0, 100]"),
            )),
            _ => Ok(()),
        }
    }

    fn keeps(&self, subtype: u8) -> bool {
        match self {
            SamplingStrategy::AggressiveOnly => subtype == MICROPAPILLARY || subtype == SOLID,
            SamplingStrategy::LeastAggressiveOnly => subtype == NON_TUMOR || subtype == LEPIDIC,
            _ => true,
        }
    }
}

impl fmt::Display for SamplingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingStrategy::Full => f.write_str("full"),
            SamplingStrategy::RandomPct(p) => write!(f, "random_pct({p})"),
            SamplingStrategy::AggressiveOnly => f.write_str("aggressive_only"),
            SamplingStrategy::LeastAggressiveOnly => f.write_str("least_aggressive_only"),
        }
    }
}

impl FromStr for SamplingStrategy {
    type Err = Error;

    /// Accepts the [`Display`](fmt::Display) form, including `random_pct(p)`.
    fn from_str(s: &str) -> Result<Self> {
        if let Some(inner) = s
            .strip_prefix("random_pct(")
            .and_then(|r| r.strip_suffix(')'))
        {
            let p = inner
                .parse()
                .map_err(|_| Error::Config(format!("bad percentage in '{s}'")))?;
            return Self::from_parts("random_pct", Some(p));
        }
        Self::from_parts(s, None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub folds: usize,
    /// Share of the non-test patients held out for validation.
    pub val_fraction: f64,
    pub sampling: SamplingStrategy,
    pub ties: TieMethod,
    pub knn_k: usize,
    pub seed: u64,
    /// Run folds on separate threads. Each fold stays single-threaded, so
    /// results do not depend on this flag.
    pub parallel_folds: bool,
    pub baseline: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            lr: 5e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            max_epochs: 200,
            patience: 5,
            folds: 5,
            val_fraction: 0.25,
            sampling: SamplingStrategy::Full,
            ties: TieMethod::Breslow,
            knn_k: DEFAULT_K,
            seed: 0,
            parallel_folds: false,
            baseline: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "lr must be positive and weight_decay non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction outside [0, 1)".into()));
        }
        self.sampling.validate()
    }
}

// ---------------------------------------------------------------------------
// Folds

/// Patient indices of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Event-stratified `k`-fold split. Each class is shuffled, the classes are
/// concatenated and dealt round-robin to the test folds; the rest of each
/// fold is split into train and validation with per-class quotas.
pub fn make_folds(events: &[bool], k: usize, val_fraction: f64, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::Config("folds must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..events.len()).filter(|&i| events[i]).collect();
    let mut neg: Vec<usize> = (0..events.len()).filter(|&i| !events[i]).collect();
    if pos.is_empty() {
        return Err(Error::InvalidInput("dataset has no events".into()));
    }
    for (name, class) in [("event", &pos), ("censored", &neg)] {
        if class.len() < k {
            return Err(Error::InvalidInput(format!(
                "{name} class has {} patients, fewer than {k} folds",
                class.len()
            )));
        }
    }
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let dealt: Vec<usize> = pos.iter().chain(&neg).copied().collect();
    let mut test = vec![Vec::new(); k];
    for (i, &p) in dealt.iter().enumerate() {
        test[i % k].push(p);
    }

    let mut folds = Vec::with_capacity(k);
    for fold_test in &test {
        let mut in_test = vec![false; events.len()];
        for &i in fold_test {
            in_test[i] = true;
        }
        let mut rest_pos: Vec<usize> = pos.iter().copied().filter(|&i| !in_test[i]).collect();
        let mut rest_neg: Vec<usize> = neg.iter().copied().filter(|&i| !in_test[i]).collect();
        rest_pos.shuffle(&mut rng);
        rest_neg.shuffle(&mut rng);
        let rest = rest_pos.len() + rest_neg.len();
        let n_val = (val_fraction * rest as f64).round() as usize;
        let (val_pos, val_neg) = largest_remainder(n_val, rest_pos.len(), rest_neg.len());
        let mut val: Vec<usize> = rest_pos[..val_pos]
            .iter()
            .chain(&rest_neg[..val_neg])
            .copied()
            .collect();
        let mut train: Vec<usize> = rest_pos[val_pos..]
            .iter()
            .chain(&rest_neg[val_neg..])
            .copied()
            .collect();
        let mut t = fold_test.clone();
        train.sort_unstable();
        val.sort_unstable();
        t.sort_unstable();
        folds.push(Fold {
            train,
            val,
            test: t,
        });
    }
    Ok(folds)
}

/// Splits `total` between two classes of sizes `a` and `b` proportionally.
fn largest_remainder(total: usize, a: usize, b: usize) -> (usize, usize) {
    let n = (a + b) as f64;
    let qa = total as f64 * a as f64 / n;
    let qb = total as f64 * b as f64 / n;
    let (mut fa, mut fb) = (qa.floor() as usize, qb.floor() as usize);
    while fa + fb < total {
        if qa - fa as f64 >= qb - fb as f64 && fa < a {
            fa += 1;
        } else {
            fb += 1;
        }
    }
    (fa.min(a), fb.min(b))
}

// ---------------------------------------------------------------------------
// Tile sampling

#[derive(Debug, Clone, PartialEq)]
pub struct SampledGraph {
    pub graph: TileGraph,
    /// The strategy selected no tiles and the full graph was kept.
    pub fell_back: bool,
}

/// Node subset per `strategy`, with edges, edge features and positional
/// encodings rebuilt on the subset.
pub fn sample_tiles(
    graph: &TileGraph,
    strategy: SamplingStrategy,
    seed: u64,
    k: usize,
) -> Result<SampledGraph> {
    strategy.validate()?;
    let n = graph.n_nodes();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let keep: Vec<usize> = match strategy {
        SamplingStrategy::Full => (0..n).collect(),
        SamplingStrategy::RandomPct(p) => {
            let m = ((p * n as f64 / 100.0).ceil() as usize).clamp(1, n);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = index::sample(&mut rng, n, m).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..n)
            .filter(|&i| strategy.keeps(graph.nodes[i].subtype))
            .collect(),
    };
    if keep.is_empty() {
        warn!("sampling strategy {strategy} selected no tiles; keeping the full graph");
        return Ok(SampledGraph {
            graph: graph.clone(),
            fell_back: true,
        });
    }
    let nodes = keep.iter().map(|&i| graph.nodes[i].clone()).collect();
    Ok(SampledGraph {
        graph: TileGraph::build(nodes, k)?,
        fell_back: false,
    })
}

/// Applies `strategy` to every graph of every patient. Seeds are derived
/// from `seed` and the patient and graph position.
pub fn sample_dataset(
    patients: &[PatientRecord],
    strategy: SamplingStrategy,
    seed: u64,
    k: usize,
) -> Result<Vec<PatientRecord>> {
    if strategy == SamplingStrategy::Full {
        return Ok(patients.to_vec());
    }
    let mut fallbacks = 0;
    let out = patients
        .iter()
        .enumerate()
        .map(|(pi, p)| {
            let graphs = p
                .graphs
                .iter()
                .enumerate()
                .map(|(gi, g)| {
                    let s = seed ^ ((pi as u64) << 20) ^ gi as u64;
                    let sampled = sample_tiles(g, strategy, s, k)?;
                    fallbacks += sampled.fell_back as usize;
                    Ok(sampled.graph)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(PatientRecord {
                graphs,
                ..p.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if fallbacks > 0 {
        warn!("{fallbacks} graphs fell back to all tiles under {strategy}");
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    lr: f64,
    weight_decay: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Mat> = store
            .tensors()
            .iter()
            .map(|t| Mat::zeros(t.value.raw_dim()))
            .collect();
        Self {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (k, t) in store.tensors_mut().iter_mut().enumerate() {
            if t.decay && self.weight_decay > 0.0 {
                t.value *= 1.0 - lr * self.weight_decay;
            }
            let g = &grads[k];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            ndarray::Zip::from(&mut t.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

// ---------------------------------------------------------------------------
// Training

/// Tracks the best monitored loss; stops after `patience` epochs without
/// strict improvement.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    since_best: usize,
    epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
            epoch: 0,
        }
    }

    pub fn update(&mut self, loss: f64) -> StopDecision {
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epoch;
            self.since_best = 0;
            StopDecision::Improved
        } else {
            self.since_best += 1;
            if self.since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub skipped_batches: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Eval-mode Cox loss of a patient set; `None` without events.
pub fn eval_loss(
    params: &ModelParams,
    patients: &[&PatientRecord],
    ties: TieMethod,
) -> Result<Option<f64>> {
    if !patients.iter().any(|p| p.event) {
        return Ok(None);
    }
    let risks = predict_risks(params, patients)?;
    let times: Vec<f64> = patients.iter().map(|p| p.time_days).collect();
    let events: Vec<bool> = patients.iter().map(|p| p.event).collect();
    Ok(Some(cox_loss_and_grad(&risks, &times, &events, ties)?.0))
}

/// Trains from `params` with early stopping on the validation loss and
/// returns the parameters of the best epoch.
pub fn train_fold(
    train: &[&PatientRecord],
    val: &[&PatientRecord],
    mut params: ModelParams,
    cfg: &TrainConfig,
) -> Result<(ModelParams, History)> {
    cfg.validate()?;
    if !train.iter().any(|p| p.event) {
        return Err(Error::InvalidInput("training set has no events".into()));
    }
    let monitor_val = val.iter().any(|p| p.event);
    if !monitor_val {
        warn!("validation set has no events; early stopping monitors the training loss");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&params.store, cfg);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<ModelParams> = None;
    let mut history = History::default();
    let mut stopper = EarlyStopping::new(cfg.patience);

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut used, mut skipped) = (0.0, 0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PatientRecord> = chunk.iter().map(|&i| train[i]).collect();
            if !batch.iter().any(|p| p.event) {
                skipped += 1;
                continue;
            }
            let mut drop_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let (loss, grads, observed) =
                loss_and_gradients(&params, &batch, Mode::Train(&mut drop_rng), cfg.ties)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    location: format!("training loss at epoch {epoch}"),
                });
            }
            update_running_stats(&mut params, &observed);
            opt.step(&mut params.store, &grads);
            total += loss;
            used += 1;
        }
        let train_loss = if used > 0 {
            total / used as f64
        } else {
            f64::NAN
        };
        let val_loss = if monitor_val {
            eval_loss(&params, val, cfg.ties)?.unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            skipped_batches: skipped,
        });
        let monitored = if monitor_val { val_loss } else { train_loss };
        if !monitored.is_finite() {
            return Err(Error::NonFinite {
                location: format!("monitored loss at epoch {epoch}"),
            });
        }
        match stopper.update(monitored) {
            StopDecision::Improved => {
                best = Some(params.clone());
                history.best_epoch = epoch;
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                info!("early stop at epoch {epoch}, best {}", history.best_epoch);
                break;
            }
        }
    }
    let best_params = best.ok_or_else(|| Error::Config("max_epochs is 0".into()))?;
    Ok((best_params, history))
}

// ---------------------------------------------------------------------------
// Evaluation

#[derive(Debug, Clone, PartialEq)]
pub struct FoldMetrics {
    pub fold: usize,
    pub c_index: f64,
    /// One per entry of [`AUC_HORIZONS_DAYS`]; NaN when a side is empty.
    pub auc: [f64; 3],
    /// Mean over the finite horizon AUCs.
    pub auc_mean: f64,
}

/// Metrics of a set of risks. A horizon without cases or controls yields
/// NaN for that AUC with a warning.
pub fn metrics_from_risks(
    fold: usize,
    risks: &[f64],
    patients: &[&PatientRecord],
) -> Result<FoldMetrics> {
    let batch = SurvivalBatch::new(
        risks.to_vec(),
        patients.iter().map(|p| p.time_days).collect(),
        patients.iter().map(|p| p.event).collect(),
    )?;
    let c = c_index(&batch)?;
    let mut auc = [f64::NAN; 3];
    for (slot, &h) in auc.iter_mut().zip(&AUC_HORIZONS_DAYS) {
        match dynamic_auc(&batch, h) {
            Ok(v) => *slot = v,
            Err(e) => warn!("fold {fold}: AUC at {h} days unavailable: {e}"),
        }
    }
    let finite: Vec<f64> = auc.iter().copied().filter(|v| v.is_finite()).collect();
    let auc_mean = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    Ok(FoldMetrics {
        fold,
        c_index: c,
        auc,
        auc_mean,
    })
}

pub fn evaluate_fold(
    fold: usize,
    test: &[&PatientRecord],
    params: &ModelParams,
) -> Result<(FoldMetrics, Vec<f64>)> {
    let risks = predict_risks(params, test)?;
    Ok((metrics_from_risks(fold, &risks, test)?, risks))
}

// ---------------------------------------------------------------------------
// Linear baseline

/// Cox regression on mean-pooled raw node features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCox {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Patient feature: mean over graphs of the per-graph node-feature mean.
pub fn pooled_features(p: &PatientRecord) -> Vec<f64> {
    let d = p.graphs[0].feature_dim();
    let mut out = vec![0.0; d];
    for g in &p.graphs {
        let inv = 1.0 / (g.n_nodes() as f64 * p.graphs.len() as f64);
        for n in &g.nodes {
            for (o, f) in out.iter_mut().zip(&n.features) {
                *o += f * inv;
            }
        }
    }
    out
}

impl LinearCox {
    pub fn risk(&self, p: &PatientRecord) -> f64 {
        self.risk_of(&pooled_features(p))
    }

    fn risk_of(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((x, m), s), w)| (x - m) / s * w)
            .sum()
    }

    /// Full-batch AdamW on standardized features with validation early
    /// stopping.
    pub fn fit(
        train: &[&PatientRecord],
        val: &[&PatientRecord],
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if !train.iter().any(|p| p.event) {
            return Err(Error::InvalidInput("training set has no events".into()));
        }
        let xs: Vec<Vec<f64>> = train.iter().map(|p| pooled_features(p)).collect();
        let d = xs[0].len();
        let n = xs.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|c| xs.iter().map(|x| x[c]).sum::<f64>() / n)
            .collect();
        let scale: Vec<f64> = (0..d)
            .map(|c| {
                let v = xs.iter().map(|x| (x[c] - mean[c]).powi(2)).sum::<f64>() / n;
                if v > 0.0 {
                    v.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        let mut model = LinearCox {
            mean,
            scale,
            weights: vec![0.0; d],
        };
        let times: Vec<f64> = train.iter().map(|p| p.time_days).collect();
        let events: Vec<bool> = train.iter().map(|p| p.event).collect();
        let vx: Vec<Vec<f64>> = val.iter().map(|p| pooled_features(p)).collect();
        let vt: Vec<f64> = val.iter().map(|p| p.time_days).collect();
        let ve: Vec<bool> = val.iter().map(|p| p.event).collect();
        let monitor_val = ve.iter().any(|&e| e);

        let mut store = ParamStore::default();
        let w = store.add("w", Mat::zeros((d, 1)), true);
        let mut opt = AdamW::new(&store, cfg);
        let mut best = model.weights.clone();
        let mut stopper = EarlyStopping::new(cfg.patience);
        for _ in 0..cfg.max_epochs {
            model.weights = store.get(w).iter().copied().collect();
            let risks: Vec<f64> = xs.iter().map(|x| model.risk_of(x)).collect();
            let (loss, g) = cox_loss_and_grad(&risks, &times, &events, cfg.ties)?;
            let mut grad = Mat::zeros((d, 1));
            for (x, gi) in xs.iter().zip(&g) {
                for c in 0..d {
                    grad[[c, 0]] += gi * (x[c] - model.mean[c]) / model.scale[c];
                }
            }
            opt.step(&mut store, &[grad]);
            model.weights = store.get(w).iter().copied().collect();
            let monitored = if monitor_val {
                let vr: Vec<f64> = vx.iter().map(|x| model.risk_of(x)).collect();
                cox_loss_and_grad(&vr, &vt, &ve, cfg.ties)?.0
            } else {
                loss
            };
            match stopper.update(monitored) {
                StopDecision::Improved => best = model.weights.clone(),
                StopDecision::Continue => {}
                StopDecision::Stop => break,
            }
        }
        model.weights = best;
        Ok(model)
    }
}

// ---------------------------------------------------------------------------
// Cross-validation

#[derive(Debug, Clone)]
pub struct FoldResult {
    pub fold: usize,
    pub split: Fold,
    pub metrics: FoldMetrics,
    pub baseline: Option<FoldMetrics>,
    pub history: History,
    pub params: ModelParams,
    /// `(patient index, risk)` for the test patients.
    pub test_risks: Vec<(usize, f64)>,
}

fn run_one_fold(
    f: usize,
    split: &Fold,
    patients: &[PatientRecord],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<FoldResult> {
    let pick = |ids: &[usize]| ids.iter().map(|&i| &patients[i]).collect::<Vec<_>>();
    let (train, val, test) = (pick(&split.train), pick(&split.val), pick(&split.test));
    let fold_seed = cfg.seed.wrapping_add(1 + f as u64);
    let init = init_params(model_cfg, fold_seed)?;
    let fold_cfg = TrainConfig {
        seed: fold_seed,
        ..cfg.clone()
    };
    let (params, history) = train_fold(&train, &val, init, &fold_cfg)?;
    let (metrics, risks) = evaluate_fold(f, &test, &params)?;
    let baseline = if cfg.baseline {
        let lin_cfg = TrainConfig {
            lr: 1e-2,
            max_epochs: 500,
            patience: 20,
            ..fold_cfg.clone()
        };
        let lin = LinearCox::fit(&train, &val, &lin_cfg)?;
        let r: Vec<f64> = test.iter().map(|p| lin.risk(p)).collect();
        Some(metrics_from_risks(f, &r, &test)?)
    } else {
        None
    };
    info!(
        "fold {f}: c-index {:.4}, best epoch {} of {}",
        metrics.c_index,
        history.best_epoch,
        history.epochs.len()
    );
    Ok(FoldResult {
        fold: f,
        split: split.clone(),
        metrics,
        baseline,
        history,
        test_risks: split.test.iter().copied().zip(risks).collect(),
        params,
    })
}

/// Stratified cross-validation: sampling, folds, training and evaluation.
pub fn cross_validate(
    patients: &[PatientRecord],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<FoldResult>> {
    cfg.validate()?;
    model_cfg.validate()?;
    let events: Vec<bool> = patients.iter().map(|p| p.event).collect();
    let folds = make_folds(&events, cfg.folds, cfg.val_fraction, cfg.seed)?;
    let sampled = sample_dataset(patients, cfg.sampling, cfg.seed, cfg.knn_k)?;
    if cfg.parallel_folds {
        std::thread::scope(|s| {
            let handles: Vec<_> = folds
                .iter()
                .enumerate()
                .map(|(f, split)| {
                    let sampled = &sampled;
                    s.spawn(move || run_one_fold(f, split, sampled, model_cfg, cfg))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
                .collect()
        })
    } else {
        folds
            .iter()
            .enumerate()
            .map(|(f, split)| run_one_fold(f, split, &sampled, model_cfg, cfg))
            .collect()
    }
}

//! Run-directory workflows behind the command-line subcommands.
//!
//! A training run directory holds `config.txt`, `folds.csv`, `metrics.csv`,
//! `risks.csv`, optionally `baseline_metrics.csv`, and one `fold_<k>/`
//! directory per fold with `checkpoint.bin` and `history.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};

use crate::config::{model_config_text, train_config_text, ConfigFile};
use crate::error::{Error, Result};
use crate::graph_build::{PatientRecord, TileGraph};
use crate::io;
use crate::model::{predict_risks, ModelConfig};
use crate::survival::{km_curve, logrank_test, stratify_by_median, LogRank, RiskGroup};
use crate::synthetic::{generate_synthetic, SyntheticConfig};
use crate::training::{cross_validate, evaluate_fold, sample_dataset, FoldMetrics, TrainConfig};

pub const CONFIG_ECHO: &str = "config.txt";
pub const FOLDS_FILE: &str = "folds.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const BASELINE_METRICS_FILE: &str = "baseline_metrics.csv";
pub const RISKS_FILE: &str = "risks.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.csv";

pub fn fold_dir(run: &Path, fold: usize) -> PathBuf {
    run.join(format!("fold_{fold}"))
}

/// Model and training settings resolved from a config file.
#[derive(Debug, Clone)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Settings {
    pub fn from_config(cfg: &ConfigFile) -> Result<Self> {
        let mut model = ModelConfig::default();
        let mut train = TrainConfig::default();
        cfg.apply_model(&mut model)?;
        cfg.apply_train(&mut train)?;
        Ok(Self { model, train })
    }

    pub fn echo(&self) -> String {
        format!(
            "# model\n{}\n# training\n{}",
            model_config_text(&self.model),
            train_config_text(&self.train)
        )
    }
}

pub fn gen_synthetic(out: &Path, cfg: &SyntheticConfig) -> Result<()> {
    let ds = generate_synthetic(cfg)?;
    io::save_dataset(out, &ds.patients)?;
    io::write_ground_truth(&out.join(io::GROUND_TRUTH_FILE), &ds.truth)?;
    info!("wrote {} patients to {}", ds.patients.len(), out.display());
    Ok(())
}

/// Builds one graph from a `nodes.csv` and writes the canonical nodes,
/// edges and positional encodings to `out`.
pub fn build_graph(nodes_csv: &Path, out: &Path, k: usize) -> Result<TileGraph> {
    let nodes = io::load_nodes(nodes_csv)?;
    let g = TileGraph::build(nodes, k)?;
    fs::create_dir_all(out)?;
    io::write_nodes(&out.join(io::NODES_FILE), &g.nodes)?;
    io::write_edges(&out.join("edges.csv"), &g)?;
    let mut w = csv::Writer::from_path(out.join("pe.csv"))?;
    let mut header = vec!["node_id".to_string()];
    header.extend((0..g.pe.first().map_or(0, |p| p.len())).map(|i| format!("pe{i}")));
    w.write_record(&header)?;
    for (n, pe) in g.nodes.iter().zip(&g.pe) {
        let mut rec = vec![n.node_id.to_string()];
        rec.extend(pe.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(g)
}

fn check_feature_width(
    patients: &[PatientRecord],
    model: &mut ModelConfig,
    explicit: bool,
) -> Result<()> {
    let d = patients[0].graphs[0].feature_dim();
    if explicit && model.d_node != d {
        return Err(Error::Config(format!(
            "config sets d_node = {} but the dataset has {d} features",
            model.d_node
        )));
    }
    model.d_node = d;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub metrics: Vec<FoldMetrics>,
    pub baseline: Option<Vec<FoldMetrics>>,
}

impl TrainSummary {
    pub fn mean_c_index(&self) -> f64 {
        mean(self.metrics.iter().map(|m| m.c_index))
    }

    pub fn mean_baseline_c_index(&self) -> Option<f64> {
        self.baseline
            .as_ref()
            .map(|b| mean(b.iter().map(|m| m.c_index)))
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

/// Cross-validated training on the dataset at `data`; writes the run
/// directory `out`.
pub fn train(data: &Path, out: &Path, cfg: &ConfigFile) -> Result<TrainSummary> {
    let mut settings = Settings::from_config(cfg)?;
    let patients = io::load_dataset_cached(data, settings.train.knn_k)?;
    if !patients.iter().any(|p| p.event) {
        return Err(Error::InvalidInput("dataset has no events".into()));
    }
    check_feature_width(&patients, &mut settings.model, cfg.raw("d_node").is_some())?;
    let results = cross_validate(&patients, &settings.model, &settings.train)?;

    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_ECHO), settings.echo())?;
    let ids: Vec<String> = patients.iter().map(|p| p.patient_id.clone()).collect();
    let splits: Vec<_> = results.iter().map(|r| r.split.clone()).collect();
    io::write_folds_csv(&out.join(FOLDS_FILE), &ids, &splits)?;
    let mut risks = Vec::new();
    for r in &results {
        let dir = fold_dir(out, r.fold);
        fs::create_dir_all(&dir)?;
        io::save_checkpoint(&dir.join(CHECKPOINT_FILE), &r.params)?;
        io::write_history_csv(
            &dir.join(HISTORY_FILE),
            &r.history.epochs,
            r.history.best_epoch,
        )?;
        risks.extend(
            r.test_risks
                .iter()
                .map(|&(i, risk)| (ids[i].clone(), risk, r.fold)),
        );
    }
    let metrics: Vec<FoldMetrics> = results.iter().map(|r| r.metrics.clone()).collect();
    io::write_metrics_csv(&out.join(METRICS_FILE), &metrics)?;
    io::write_risks_csv(&out.join(RISKS_FILE), &risks)?;
    let baseline: Option<Vec<FoldMetrics>> = results.iter().map(|r| r.baseline.clone()).collect();
    if let Some(b) = &baseline {
        io::write_metrics_csv(&out.join(BASELINE_METRICS_FILE), b)?;
    }
    Ok(TrainSummary { metrics, baseline })
}

fn load_run(run: &Path) -> Result<Settings> {
    let cfg = ConfigFile::load(&run.join(CONFIG_ECHO))?;
    Settings::from_config(&cfg)
}

struct LoadedRun {
    patients: Vec<PatientRecord>,
    folds: Vec<crate::training::Fold>,
}

fn load_run_data(data: &Path, run: &Path, settings: &Settings) -> Result<LoadedRun> {
    let patients = io::load_dataset_cached(data, settings.train.knn_k)?;
    let patients = sample_dataset(
        &patients,
        settings.train.sampling,
        settings.train.seed,
        settings.train.knn_k,
    )?;
    let ids: Vec<String> = patients.iter().map(|p| p.patient_id.clone()).collect();
    let folds = io::read_folds_csv(&run.join(FOLDS_FILE), &ids)?;
    if folds.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} lists no folds",
            run.join(FOLDS_FILE).display()
        )));
    }
    Ok(LoadedRun { patients, folds })
}

/// Re-evaluates every fold checkpoint of `run` on its test patients and
/// writes `metrics.csv` and `risks.csv` to `out`.
pub fn evaluate(data: &Path, run: &Path, out: &Path) -> Result<Vec<FoldMetrics>> {
    let settings = load_run(run)?;
    let LoadedRun { patients, folds } = load_run_data(data, run, &settings)?;
    let mut metrics = Vec::new();
    let mut risks = Vec::new();
    for (f, fold) in folds.iter().enumerate() {
        let params = io::load_checkpoint(&fold_dir(run, f).join(CHECKPOINT_FILE))?;
        let test: Vec<&PatientRecord> = fold.test.iter().map(|&i| &patients[i]).collect();
        let (m, r) = evaluate_fold(f, &test, &params)?;
        risks.extend(
            test.iter()
                .zip(r)
                .map(|(p, risk)| (p.patient_id.clone(), risk, f)),
        );
        metrics.push(m);
    }
    fs::create_dir_all(out)?;
    io::write_metrics_csv(&out.join(METRICS_FILE), &metrics)?;
    io::write_risks_csv(&out.join(RISKS_FILE), &risks)?;
    Ok(metrics)
}

#[derive(Debug, Clone)]
pub struct Stratification {
    pub logrank: Option<LogRank>,
    pub n_low: usize,
    pub n_high: usize,
}

/// Median-risk stratification of each fold's test set using the fold's
/// training-set median; writes `strata.csv`, `km_low.csv`, `km_high.csv`
/// and `logrank.csv` for the pooled test patients.
pub fn stratify(data: &Path, run: &Path, out: &Path) -> Result<Stratification> {
    let settings = load_run(run)?;
    let LoadedRun { patients, folds } = load_run_data(data, run, &settings)?;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("strata.csv"))?;
    w.write_record(["patient_id", "fold", "risk", "threshold", "group"])?;
    let mut groups: [(Vec<f64>, Vec<bool>); 2] = Default::default();
    for (f, fold) in folds.iter().enumerate() {
        let params = io::load_checkpoint(&fold_dir(run, f).join(CHECKPOINT_FILE))?;
        let train: Vec<&PatientRecord> = fold.train.iter().map(|&i| &patients[i]).collect();
        let test: Vec<&PatientRecord> = fold.test.iter().map(|&i| &patients[i]).collect();
        let train_risks = predict_risks(&params, &train)?;
        let test_risks = predict_risks(&params, &test)?;
        let (threshold, labels) = stratify_by_median(&train_risks, &test_risks)?;
        for ((p, r), g) in test.iter().zip(&test_risks).zip(&labels) {
            w.write_record([
                p.patient_id.clone(),
                f.to_string(),
                r.to_string(),
                threshold.to_string(),
                g.as_str().to_string(),
            ])?;
            let slot = &mut groups[(*g == RiskGroup::High) as usize];
            slot.0.push(p.time_days);
            slot.1.push(p.event);
        }
    }
    w.flush()?;
    let [low, high] = &groups;
    for (name, (t, e)) in [("km_low.csv", low), ("km_high.csv", high)] {
        if !t.is_empty() {
            io::write_km_csv(&out.join(name), &km_curve(t, e)?)?;
        }
    }
    let logrank = match logrank_test((&low.0, &low.1), (&high.0, &high.1)) {
        Ok(lr) => {
            let mut w = csv::Writer::from_path(out.join("logrank.csv"))?;
            w.write_record(["statistic", "p_value", "n_low", "n_high"])?;
            w.write_record([
                lr.statistic.to_string(),
                lr.p_value.to_string(),
                low.0.len().to_string(),
                high.0.len().to_string(),
            ])?;
            w.flush()?;
            Some(lr)
        }
        Err(e) => {
            warn!("log-rank test unavailable: {e}");
            None
        }
    };
    Ok(Stratification {
        logrank,
        n_low: low.0.len(),
        n_high: high.0.len(),
    })
}

/// Applies a sampling strategy to the dataset at `data` and saves the
/// result in the same layout under `out`. Returns the patient count.
pub fn sample_tiles_dataset(data: &Path, out: &Path, cfg: &ConfigFile) -> Result<usize> {
    let settings = Settings::from_config(cfg)?;
    let patients = io::load_dataset_cached(data, settings.train.knn_k)?;
    let sampled = sample_dataset(
        &patients,
        settings.train.sampling,
        settings.train.seed,
        settings.train.knn_k,
    )?;
    io::save_dataset(out, &sampled)?;
    Ok(sampled.len())
}

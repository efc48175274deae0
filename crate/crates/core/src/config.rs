//! `key = value` configuration files with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{Ablation, ModelConfig};
use crate::ssm::Discretization;
use crate::survival::TieMethod;
use crate::synthetic::SyntheticConfig;
use crate::training::{SamplingStrategy, TrainConfig};

const MODEL_KEYS: &[&str] = &[
    "d_node",
    "d_uni_hidden",
    "d_edge_hidden",
    "n_blocks",
    "mlp_hidden",
    "dropout",
    "n_gat_heads",
    "ssm_state",
    "ssm_expand",
    "ssm_conv",
    "discretization",
    "leaky_slope",
    "bn_momentum",
    "bn_eps",
    "ablation",
];

const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "lr",
    "weight_decay",
    "beta1",
    "beta2",
    "adam_eps",
    "max_epochs",
    "patience",
    "folds",
    "val_fraction",
    "sampling",
    "pct",
    "ties",
    "knn_k",
    "parallel_folds",
    "baseline",
];

const SYNTHETIC_KEYS: &[&str] = &[
    "n_patients",
    "nodes_min",
    "nodes_max",
    "aggressive_min",
    "aggressive_max",
    "hazard_coefficient",
    "fraction_unit",
    "censoring_rate",
    "shift",
    "median_time_days",
    "graphs_per_patient",
];

#[derive(Debug, Clone)]
struct Entry {
    line: u64,
    value: String,
}

/// Parsed configuration text. Later assignments override earlier ones.
#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    path: PathBuf,
    entries: BTreeMap<String, Entry>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::file(path))?;
        Self::parse(&text, path)
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = (i + 1) as u64;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                Error::parse(
                    path,
                    line,
                    format!("expected 'key = value', got '{content}'"),
                )
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(Error::parse(path, line, "empty key"));
            }
            let known = key == "seed"
                || MODEL_KEYS.contains(&key)
                || TRAIN_KEYS.contains(&key)
                || SYNTHETIC_KEYS.contains(&key);
            if !known {
                return Err(Error::parse(path, line, format!("unknown key '{key}'")));
            }
            entries.insert(
                key.to_string(),
                Entry {
                    line,
                    value: value.trim().to_string(),
                },
            );
        }
        Ok(Self {
            path: path.to_path_buf(),
            entries,
        })
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(
            key.to_string(),
            Entry {
                line: 0,
                value: value.to_string(),
            },
        );
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some(e) => e.value.parse().map(Some).map_err(|err: T::Err| {
                Error::parse(&self.path, e.line, format!("bad value for {key}: {err}"))
            }),
        }
    }

    fn update<T: FromStr>(&self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: Display,
    {
        if let Some(v) = self.get(key)? {
            *slot = v;
        }
        Ok(())
    }

    pub fn apply_model(&self, c: &mut ModelConfig) -> Result<()> {
        self.update("d_node", &mut c.d_node)?;
        self.update("d_uni_hidden", &mut c.d_uni_hidden)?;
        self.update("d_edge_hidden", &mut c.d_edge_hidden)?;
        self.update("n_blocks", &mut c.n_blocks)?;
        self.update("mlp_hidden", &mut c.mlp_hidden)?;
        self.update("dropout", &mut c.dropout)?;
        self.update("n_gat_heads", &mut c.n_gat_heads)?;
        self.update("ssm_state", &mut c.ssm_state)?;
        self.update("ssm_expand", &mut c.ssm_expand)?;
        if let Some(v) = self.raw("ssm_conv") {
            c.ssm_conv = match v {
                "none" | "0" => None,
                _ => Some(self.get("ssm_conv")?.unwrap_or_default()),
            };
        }
        if let Some(v) = self.raw("discretization") {
            c.discretization =
                parse_discretization(v).map_err(|m| self.err_at("discretization", m))?;
        }
        self.update("leaky_slope", &mut c.leaky_slope)?;
        self.update("bn_momentum", &mut c.bn_momentum)?;
        self.update("bn_eps", &mut c.bn_eps)?;
        if let Some(v) = self.raw("ablation") {
            c.ablation = v
                .parse::<Ablation>()
                .map_err(|e| self.err_at("ablation", e.to_string()))?;
        }
        self.update("seed", &mut c.seed)?;
        Ok(())
    }

    pub fn apply_train(&self, c: &mut TrainConfig) -> Result<()> {
        self.update("batch_size", &mut c.batch_size)?;
        self.update("lr", &mut c.lr)?;
        self.update("weight_decay", &mut c.weight_decay)?;
        self.update("beta1", &mut c.beta1)?;
        self.update("beta2", &mut c.beta2)?;
        self.update("adam_eps", &mut c.adam_eps)?;
        self.update("max_epochs", &mut c.max_epochs)?;
        self.update("patience", &mut c.patience)?;
        self.update("folds", &mut c.folds)?;
        self.update("val_fraction", &mut c.val_fraction)?;
        if let Some(v) = self.raw("sampling") {
            let pct = self.get("pct")?;
            c.sampling = if v.starts_with("random_pct(") {
                v.parse()
            } else {
                SamplingStrategy::from_parts(v, pct)
            }
            .map_err(|e| self.err_at("sampling", e.to_string()))?;
        }
        if let Some(v) = self.raw("ties") {
            c.ties = match v {
                "breslow" => TieMethod::Breslow,
                "efron" => TieMethod::Efron,
                other => return Err(self.err_at("ties", format!("unknown tie method '{other}'"))),
            };
        }
        self.update("knn_k", &mut c.knn_k)?;
        self.update("parallel_folds", &mut c.parallel_folds)?;
        self.update("baseline", &mut c.baseline)?;
        self.update("seed", &mut c.seed)?;
        Ok(())
    }

    pub fn apply_synthetic(&self, c: &mut SyntheticConfig) -> Result<()> {
        self.update("n_patients", &mut c.n_patients)?;
        self.update("nodes_min", &mut c.nodes.0)?;
        self.update("nodes_max", &mut c.nodes.1)?;
        self.update("d_node", &mut c.d_node)?;
        self.update("aggressive_min", &mut c.aggressive_fraction.0)?;
        self.update("aggressive_max", &mut c.aggressive_fraction.1)?;
        self.update("hazard_coefficient", &mut c.hazard_coefficient)?;
        self.update("fraction_unit", &mut c.fraction_unit)?;
        self.update("censoring_rate", &mut c.censoring_rate)?;
        self.update("shift", &mut c.shift)?;
        self.update("median_time_days", &mut c.median_time_days)?;
        self.update("graphs_per_patient", &mut c.graphs_per_patient)?;
        self.update("knn_k", &mut c.knn_k)?;
        self.update("seed", &mut c.seed)?;
        Ok(())
    }

    fn err_at(&self, key: &str, message: impl Into<String>) -> Error {
        let line = self.entries.get(key).map_or(0, |e| e.line);
        Error::parse(&self.path, line, message)
    }
}

fn parse_discretization(v: &str) -> std::result::Result<Discretization, String> {
    match v {
        "zoh" => Ok(Discretization::ZeroOrderHold),
        "euler" => Ok(Discretization::Euler),
        other => Err(format!("unknown discretization '{other}'")),
    }
}

fn discretization_str(d: Discretization) -> &'static str {
    match d {
        Discretization::ZeroOrderHold => "zoh",
        Discretization::Euler => "euler",
    }
}

/// Text form readable by [`ConfigFile::apply_model`]. Floats use the
/// shortest representation that parses back to the same value.
pub fn model_config_text(c: &ModelConfig) -> String {
    let conv = c.ssm_conv.map_or("none".to_string(), |k| k.to_string());
    format!(
        "d_node = {}\nd_uni_hidden = {}\nd_edge_hidden = {}\nn_blocks = {}\nmlp_hidden = {}\n\
         dropout = {}\nn_gat_heads = {}\nssm_state = {}\nssm_expand = {}\nssm_conv = {conv}\n\
         discretization = {}\nleaky_slope = {}\nbn_momentum = {}\nbn_eps = {}\nablation = {}\nseed = {}\n",
        c.d_node,
        c.d_uni_hidden,
        c.d_edge_hidden,
        c.n_blocks,
        c.mlp_hidden,
        c.dropout,
        c.n_gat_heads,
        c.ssm_state,
        c.ssm_expand,
        discretization_str(c.discretization),
        c.leaky_slope,
        c.bn_momentum,
        c.bn_eps,
        c.ablation,
        c.seed,
    )
}

pub fn train_config_text(c: &TrainConfig) -> String {
    let (sampling, pct) = match c.sampling {
        SamplingStrategy::RandomPct(p) => ("random_pct".to_string(), format!("pct = {p}\n")),
        s => (s.to_string(), String::new()),
    };
    let ties = match c.ties {
        TieMethod::Breslow => "breslow",
        TieMethod::Efron => "efron",
    };
    format!(
        "batch_size = {}\nlr = {}\nweight_decay = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\n\
         max_epochs = {}\npatience = {}\nfolds = {}\nval_fraction = {}\nsampling = {sampling}\n{pct}\
         ties = {ties}\nknn_k = {}\nparallel_folds = {}\nbaseline = {}\n",
        c.batch_size,
        c.lr,
        c.weight_decay,
        c.beta1,
        c.beta2,
        c.adam_eps,
        c.max_epochs,
        c.patience,
        c.folds,
        c.val_fraction,
        c.knn_k,
        c.parallel_folds,
        c.baseline,
    )
}

//! Dataset CSV layout, binary sidecars and run-directory outputs.
//!
//! A dataset root holds `patients.csv` (`patient_id,graph_dir,event,time_days`,
//! one row per graph) and a `nodes.csv` (`node_id,row,col,subtype,f0..`) in
//! each graph directory. Floats are written in the shortest form that
//! parses back to the same value.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use sha2::{Digest, Sha256};

use crate::autodiff::Mat;
use crate::config::{model_config_text, ConfigFile};
use crate::error::{Error, Result};
use crate::graph_build::{PatientRecord, TileGraph, TileNode, EDGE_CONT_DIM, N_SUBTYPES, PE_DIM};
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::survival::KmPoint;
use crate::synthetic::GroundTruth;
use crate::training::{EpochRecord, Fold, FoldMetrics};

pub const PATIENTS_FILE: &str = "patients.csv";
pub const NODES_FILE: &str = "nodes.csv";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.csv";

const SUBTYPE_NAMES: [&str; N_SUBTYPES as usize] = [
    "non_tumor",
    "lepidic",
    "acinar",
    "papillary",
    "micropapillary",
    "solid",
];

fn parse_subtype(s: &str) -> std::result::Result<u8, String> {
    if let Ok(v) = s.parse::<i64>() {
        return if (0..N_SUBTYPES as i64).contains(&v) {
            Ok(v as u8)
        } else {
            Err(format!("subtype {v} out of range 0..=5"))
        };
    }
    SUBTYPE_NAMES
        .iter()
        .position(|n| n.eq_ignore_ascii_case(s))
        .map(|i| i as u8)
        .ok_or_else(|| format!("unknown subtype label '{s}'"))
}

fn parse_event(s: &str) -> std::result::Result<bool, String> {
    match s {
        "1" | "true" => Ok(true),
        "0" | "false" => Ok(false),
        other => Err(format!("event must be 0 or 1, got '{other}'")),
    }
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::parse(path, 1, format!("missing column '{name}'")))
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(Error::file(path))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::file(path))
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

/// Reads one `nodes.csv`.
pub fn load_nodes(path: &Path) -> Result<Vec<TileNode>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(open(path)?);
    let headers = rdr.headers()?.clone();
    let c_id = column(&headers, "node_id", path)?;
    let c_row = column(&headers, "row", path)?;
    let c_col = column(&headers, "col", path)?;
    let c_sub = column(&headers, "subtype", path)?;
    let mut feat_cols = Vec::new();
    while let Some(c) = headers
        .iter()
        .position(|h| h == format!("f{}", feat_cols.len()))
    {
        feat_cols.push(c);
    }
    if feat_cols.is_empty() {
        return Err(Error::parse(path, 1, "missing feature columns f0.."));
    }
    let mut nodes = Vec::new();
    let mut seen = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        let field = |c: usize| rec.get(c).unwrap_or("");
        let err = |m: String| Error::parse(path, line, m);
        let int = |c: usize, name: &str| {
            field(c)
                .parse::<u64>()
                .map_err(|_| err(format!("bad {name} '{}'", field(c))))
        };
        let node_id = int(c_id, "node_id")? as usize;
        let row = u32::try_from(int(c_row, "row")?).map_err(|_| err("row too large".into()))?;
        let col = u32::try_from(int(c_col, "col")?).map_err(|_| err("col too large".into()))?;
        let subtype = parse_subtype(field(c_sub)).map_err(&err)?;
        let features = feat_cols
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let v: f64 = field(c)
                    .parse()
                    .map_err(|_| err(format!("bad feature f{k} '{}'", field(c))))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(err(format!("non-finite feature f{k}")))
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(prev) = seen.insert((row, col), line) {
            return Err(err(format!(
                "duplicate (row, col) = ({row}, {col}), first on line {prev}"
            )));
        }
        nodes.push(TileNode {
            node_id,
            row,
            col,
            subtype,
            features,
        });
    }
    if nodes.is_empty() {
        return Err(Error::parse(path, 1, "empty graph"));
    }
    Ok(nodes)
}

#[derive(Debug, Clone)]
struct PatientRow {
    patient_id: String,
    graph_dir: String,
    event: bool,
    time_days: f64,
    line: u64,
}

fn read_patient_rows(root: &Path) -> Result<Vec<PatientRow>> {
    let path = root.join(PATIENTS_FILE);
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(open(&path)?);
    let headers = rdr.headers()?.clone();
    let c_pid = column(&headers, "patient_id", &path)?;
    let c_dir = column(&headers, "graph_dir", &path)?;
    let c_ev = column(&headers, "event", &path)?;
    let c_t = column(&headers, "time_days", &path)?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        let field = |c: usize| rec.get(c).unwrap_or("").to_string();
        let err = |m: String| Error::parse(&path, line, m);
        let event = parse_event(&field(c_ev)).map_err(err)?;
        let time_days: f64 = field(c_t)
            .parse()
            .map_err(|_| err(format!("bad time_days '{}'", field(c_t))))?;
        if !(time_days > 0.0 && time_days.is_finite()) {
            return Err(err(format!("time_days must be positive, got {time_days}")));
        }
        let patient_id = field(c_pid);
        if patient_id.is_empty() {
            return Err(err("empty patient_id".into()));
        }
        rows.push(PatientRow {
            patient_id,
            graph_dir: field(c_dir),
            event,
            time_days,
            line,
        });
    }
    if rows.is_empty() {
        return Err(Error::parse(&path, 1, "no patients"));
    }
    Ok(rows)
}

/// Loads and validates every patient and graph under `root`.
pub fn load_dataset(root: &Path, k: usize) -> Result<Vec<PatientRecord>> {
    let rows = read_patient_rows(root)?;
    let path = root.join(PATIENTS_FILE);
    let mut order: Vec<String> = Vec::new();
    let mut by_id: HashMap<String, PatientRecord> = HashMap::new();
    for row in rows {
        let nodes_path = root.join(&row.graph_dir).join(NODES_FILE);
        let nodes = load_nodes(&nodes_path)?;
        let graph =
            TileGraph::build(nodes, k).map_err(|e| Error::parse(&nodes_path, 0, e.to_string()))?;
        match by_id.get_mut(&row.patient_id) {
            Some(p) => {
                if p.event != row.event || p.time_days != row.time_days {
                    return Err(Error::parse(
                        &path,
                        row.line,
                        format!("patient {} has conflicting event/time rows", row.patient_id),
                    ));
                }
                if p.graphs[0].feature_dim() != graph.feature_dim() {
                    return Err(Error::parse(
                        &nodes_path,
                        1,
                        "feature width differs from the patient's other graphs",
                    ));
                }
                p.graphs.push(graph);
            }
            None => {
                order.push(row.patient_id.clone());
                by_id.insert(
                    row.patient_id.clone(),
                    PatientRecord {
                        patient_id: row.patient_id,
                        graphs: vec![graph],
                        event: row.event,
                        time_days: row.time_days,
                    },
                );
            }
        }
    }
    let patients: Vec<PatientRecord> = order
        .iter()
        .map(|id| by_id.remove(id).expect("grouped"))
        .collect();
    let d = patients[0].graphs[0].feature_dim();
    if let Some(p) = patients.iter().find(|p| p.graphs[0].feature_dim() != d) {
        return Err(Error::InvalidInput(format!(
            "patient {} has feature width {} but the dataset uses {d}",
            p.patient_id,
            p.graphs[0].feature_dim()
        )));
    }
    Ok(patients)
}

/// Writes `patients` in the CSV layout under `root`.
pub fn save_dataset(root: &Path, patients: &[PatientRecord]) -> Result<()> {
    fs::create_dir_all(root)?;
    let mut pw = csv::Writer::from_path(root.join(PATIENTS_FILE))?;
    pw.write_record(["patient_id", "graph_dir", "event", "time_days"])?;
    for p in patients {
        for (gi, g) in p.graphs.iter().enumerate() {
            let dir = format!("graphs/{}_g{gi}", p.patient_id);
            pw.write_record([
                p.patient_id.clone(),
                dir.clone(),
                (p.event as u8).to_string(),
                p.time_days.to_string(),
            ])?;
            let gdir = root.join(&dir);
            fs::create_dir_all(&gdir)?;
            write_nodes(&gdir.join(NODES_FILE), &g.nodes)?;
        }
    }
    pw.flush()?;
    Ok(())
}

pub fn write_nodes(path: &Path, nodes: &[TileNode]) -> Result<()> {
    let d = nodes.first().map_or(0, |n| n.features.len());
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = ["node_id", "row", "col", "subtype"]
        .map(String::from)
        .to_vec();
    header.extend((0..d).map(|k| format!("f{k}")));
    w.write_record(&header)?;
    for n in nodes {
        let mut rec = vec![
            n.node_id.to_string(),
            n.row.to_string(),
            n.col.to_string(),
            n.subtype.to_string(),
        ];
        rec.extend(n.features.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Edge list with features: `src,dst,edge_cat,cosine,distance`.
pub fn write_edges(path: &Path, g: &TileGraph) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["src", "dst", "edge_cat", "cosine", "distance"])?;
    for (e, &(i, j)) in g.edges.iter().enumerate() {
        let [c, d] = g.edge_cont[e];
        w.write_record([
            i.to_string(),
            j.to_string(),
            g.edge_cat[e].to_string(),
            c.to_string(),
            d.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ground_truth(path: &Path, truth: &[GroundTruth]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "patient_id",
        "aggressive_fraction",
        "hazard",
        "event_time",
        "event",
        "time_days",
    ])?;
    for t in truth {
        w.write_record([
            t.patient_id.clone(),
            t.aggressive_fraction.to_string(),
            t.hazard.to_string(),
            t.event_time.to_string(),
            (t.event as u8).to_string(),
            t.time_days.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Binary encoding

#[derive(Default)]
struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.buf.extend_from_slice(b);
    }

    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }

    fn mat(&mut self, m: &Mat) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        for v in m.iter() {
            self.f64(*v);
        }
    }
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.usize()?;
        self.take(n)
    }

    fn str(&mut self) -> Result<String> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8".into()))
    }

    fn mat(&mut self) -> Result<Mat> {
        let (r, c) = (self.usize()?, self.usize()?);
        let n = r
            .checked_mul(c)
            .ok_or_else(|| Error::Checkpoint("shape overflow".into()))?;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Checkpoint(format!(
                "tensor {r}x{c} exceeds file size"
            )));
        }
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(Mat::from_shape_vec((r, c), data).expect("sized"))
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )))
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset cache

const CACHE_MAGIC: &[u8] = b"GMDSET01";

fn encode_dataset(patients: &[PatientRecord]) -> Vec<u8> {
    let mut e = Encoder::default();
    e.buf.extend_from_slice(CACHE_MAGIC);
    e.u64(patients.len() as u64);
    for p in patients {
        e.str(&p.patient_id);
        e.u64(p.event as u64);
        e.f64(p.time_days);
        e.u64(p.graphs.len() as u64);
        for g in &p.graphs {
            e.u64(g.nodes.len() as u64);
            e.u64(g.feature_dim() as u64);
            for (n, pe) in g.nodes.iter().zip(&g.pe) {
                e.u64(n.node_id as u64);
                e.u64(n.row as u64);
                e.u64(n.col as u64);
                e.u64(n.subtype as u64);
                n.features.iter().for_each(|&v| e.f64(v));
                pe.iter().for_each(|&v| e.f64(v));
            }
            e.u64(g.edges.len() as u64);
            for (k, &(i, j)) in g.edges.iter().enumerate() {
                e.u64(i as u64);
                e.u64(j as u64);
                e.u64(g.edge_cat[k] as u64);
                g.edge_cont[k].iter().for_each(|&v| e.f64(v));
            }
        }
    }
    e.buf
}

fn decode_dataset(buf: &[u8]) -> Result<Vec<PatientRecord>> {
    let mut d = Decoder { buf, pos: 0 };
    if d.take(CACHE_MAGIC.len())? != CACHE_MAGIC {
        return Err(Error::Checkpoint("not a dataset cache".into()));
    }
    let n_patients = d.usize()?;
    let mut patients = Vec::with_capacity(n_patients.min(1 << 20));
    for _ in 0..n_patients {
        let patient_id = d.str()?;
        let event = d.u64()? != 0;
        let time_days = d.f64()?;
        let n_graphs = d.usize()?;
        let mut graphs = Vec::new();
        for _ in 0..n_graphs {
            let (n, dim) = (d.usize()?, d.usize()?);
            let mut nodes = Vec::new();
            let mut pe = Vec::new();
            for _ in 0..n {
                let node_id = d.usize()?;
                let row = d.u64()? as u32;
                let col = d.u64()? as u32;
                let subtype = d.u64()? as u8;
                let features = (0..dim).map(|_| d.f64()).collect::<Result<Vec<_>>>()?;
                let mut p = [0.0; PE_DIM];
                for v in p.iter_mut() {
                    *v = d.f64()?;
                }
                nodes.push(TileNode {
                    node_id,
                    row,
                    col,
                    subtype,
                    features,
                });
                pe.push(p);
            }
            let m = d.usize()?;
            let (mut edges, mut edge_cat, mut edge_cont) = (Vec::new(), Vec::new(), Vec::new());
            for _ in 0..m {
                edges.push((d.usize()?, d.usize()?));
                edge_cat.push(d.u64()? as u8);
                let mut c = [0.0; EDGE_CONT_DIM];
                for v in c.iter_mut() {
                    *v = d.f64()?;
                }
                edge_cont.push(c);
            }
            let g = TileGraph {
                nodes,
                edges,
                edge_cat,
                edge_cont,
                pe,
            };
            g.check_invariants()?;
            graphs.push(g);
        }
        patients.push(PatientRecord {
            patient_id,
            graphs,
            event,
            time_days,
        });
    }
    d.finish()?;
    Ok(patients)
}

/// SHA-256 over the CSV inputs and `k`.
pub fn dataset_digest(root: &Path, k: usize) -> Result<String> {
    let mut h = Sha256::new();
    h.update(read_bytes(&root.join(PATIENTS_FILE))?);
    for row in read_patient_rows(root)? {
        h.update(row.graph_dir.as_bytes());
        h.update(read_bytes(&root.join(&row.graph_dir).join(NODES_FILE))?);
    }
    h.update((k as u64).to_le_bytes());
    Ok(hex::encode(h.finalize()))
}

pub fn cache_path(root: &Path, digest: &str) -> PathBuf {
    root.join(".cache")
        .join(format!("dataset-{}.bin", &digest[..16]))
}

/// [`load_dataset`] through a binary cache keyed by the content digest.
pub fn load_dataset_cached(root: &Path, k: usize) -> Result<Vec<PatientRecord>> {
    let digest = dataset_digest(root, k)?;
    let path = cache_path(root, &digest);
    if let Ok(buf) = fs::read(&path) {
        match decode_dataset(&buf) {
            Ok(p) => {
                debug!("loaded dataset cache {}", path.display());
                return Ok(p);
            }
            Err(e) => info!("ignoring unreadable cache {}: {e}", path.display()),
        }
    }
    let patients = load_dataset(root, k)?;
    write_dataset_cache(&path, &patients)?;
    Ok(patients)
}

pub fn write_dataset_cache(path: &Path, patients: &[PatientRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_dataset(patients))?;
    Ok(())
}

pub fn read_dataset_cache(path: &Path) -> Result<Vec<PatientRecord>> {
    decode_dataset(&read_bytes(path)?)
}

// ---------------------------------------------------------------------------
// Checkpoints

const CHECKPOINT_MAGIC: &[u8] = b"GMCKPT01";

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let mut e = Encoder::default();
    e.buf.extend_from_slice(CHECKPOINT_MAGIC);
    e.str(&model_config_text(&params.config));
    e.u64(params.config.seed);
    let tensors = params.store.tensors();
    e.u64((tensors.len() + 2 * params.bn_stats.len()) as u64);
    for t in tensors {
        e.str(&t.name);
        e.mat(&t.value);
    }
    for st in &params.bn_stats {
        e.str(&format!("{}.running_mean", st.name));
        e.mat(&Mat::from_shape_vec((1, st.mean.len()), st.mean.clone()).expect("row"));
        e.str(&format!("{}.running_var", st.name));
        e.mat(&Mat::from_shape_vec((1, st.var.len()), st.var.clone()).expect("row"));
    }
    e.buf
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ModelParams> {
    let mut d = Decoder { buf, pos: 0 };
    if d.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic header".into()));
    }
    let text = d.str()?;
    let seed = d.u64()?;
    let mut config = ModelConfig::default();
    ConfigFile::parse(&text, Path::new("<checkpoint config>"))?.apply_model(&mut config)?;
    let mut params = init_params(&config, seed)?;
    let n = d.usize()?;
    let mut seen = std::collections::HashSet::new();
    for _ in 0..n {
        let name = d.str()?;
        let value = d.mat()?;
        let slot: &mut Mat;
        let mut stat_target = None;
        if let Some(id) = params.store.find(&name) {
            slot = params.store.get_mut(id);
            if slot.dim() != value.dim() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {:?}, expected {:?}",
                    value.dim(),
                    slot.dim()
                )));
            }
            slot.assign(&value);
        } else {
            for (i, st) in params.bn_stats.iter().enumerate() {
                if name == format!("{}.running_mean", st.name) {
                    stat_target = Some((i, true));
                } else if name == format!("{}.running_var", st.name) {
                    stat_target = Some((i, false));
                }
            }
            let (i, is_mean) = stat_target
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            let st = &mut params.bn_stats[i];
            let target = if is_mean { &mut st.mean } else { &mut st.var };
            if value.dim() != (1, target.len()) {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: bad shape {:?}",
                    value.dim()
                )));
            }
            target.copy_from_slice(value.as_slice().expect("standard layout"));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    let expected = params.store.len() + 2 * params.bn_stats.len();
    if seen.len() != expected {
        return Err(Error::Checkpoint(format!(
            "{} tensors, expected {expected}",
            seen.len()
        )));
    }
    d.finish()?;
    Ok(params)
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    decode_checkpoint(&read_bytes(path)?)
}

// ---------------------------------------------------------------------------
// Run directory

pub fn write_metrics_csv(path: &Path, rows: &[FoldMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fold", "c_index", "auc_1y", "auc_3y", "auc_5y", "auc_mean"])?;
    for m in rows {
        w.write_record([
            m.fold.to_string(),
            m.c_index.to_string(),
            m.auc[0].to_string(),
            m.auc[1].to_string(),
            m.auc[2].to_string(),
            m.auc_mean.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<FoldMetrics>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(path, line, format!("bad value in column {i}")))
        };
        out.push(FoldMetrics {
            fold: num(0)? as usize,
            c_index: num(1)?,
            auc: [num(2)?, num(3)?, num(4)?],
            auc_mean: num(5)?,
        });
    }
    Ok(out)
}

pub fn write_history_csv(path: &Path, epochs: &[EpochRecord], best_epoch: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_loss", "val_loss", "skipped_batches", "best"])?;
    for e in epochs {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.val_loss.to_string(),
            e.skipped_batches.to_string(),
            ((e.epoch == best_epoch) as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `patient_id,risk,fold`
pub fn write_risks_csv(path: &Path, rows: &[(String, f64, usize)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patient_id", "risk", "fold"])?;
    for (id, r, f) in rows {
        w.write_record([id.clone(), r.to_string(), f.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `patient_id,fold,split` with split in {train, val, test}.
pub fn write_folds_csv(path: &Path, ids: &[String], folds: &[Fold]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["patient_id", "fold", "split"])?;
    for (f, fold) in folds.iter().enumerate() {
        for (name, set) in [
            ("train", &fold.train),
            ("val", &fold.val),
            ("test", &fold.test),
        ] {
            for &i in set {
                w.write_record([ids[i].as_str(), &f.to_string(), name])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_folds_csv(path: &Path, ids: &[String]) -> Result<Vec<Fold>> {
    let index: HashMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut folds: Vec<Fold> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = record_line(&rec);
        let err = |m: String| Error::parse(path, line, m);
        let id = rec.get(0).unwrap_or("");
        let &i = index
            .get(id)
            .ok_or_else(|| err(format!("unknown patient '{id}'")))?;
        let f: usize = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| err("bad fold".into()))?;
        while folds.len() <= f {
            folds.push(Fold {
                train: vec![],
                val: vec![],
                test: vec![],
            });
        }
        match rec.get(2).unwrap_or("") {
            "train" => folds[f].train.push(i),
            "val" => folds[f].val.push(i),
            "test" => folds[f].test.push(i),
            other => return Err(err(format!("unknown split '{other}'"))),
        }
    }
    Ok(folds)
}

/// `time,at_risk,events,censored,survival`
pub fn write_km_csv(path: &Path, curve: &[KmPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["time", "at_risk", "events", "censored", "survival"])?;
    for p in curve {
        w.write_record([
            p.time.to_string(),
            p.at_risk.to_string(),
            p.events.to_string(),
            p.censored.to_string(),
            p.survival.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// SHA-256 over every file below `dir` (relative paths and contents, sorted).
pub fn directory_digest(dir: &Path) -> Result<String> {
    fn walk(base: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else {
                out.push(path.strip_prefix(base).expect("below base").to_path_buf());
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(dir, dir, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(read_bytes(&dir.join(&f))?);
    }
    Ok(hex::encode(h.finalize()))
}

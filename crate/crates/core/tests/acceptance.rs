//! Acceptance suite. Runs each criterion in order, prints one PASS/FAIL
//! line per criterion and exits nonzero if any failed.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod common;

use std::path::Path;
use std::time::Instant;

use common::*;
use gat_mamba::config::ConfigFile;
use gat_mamba::gat::{gat_attention, gat_forward, GatConfig, GatParams, DEFAULT_LEAKY_SLOPE};
use gat_mamba::graph_build::PatientRecord;
use gat_mamba::model::{
    init_params, loss_and_gradients, model_forward, Ablation, Mode, ModelConfig, ModelParams,
};
use gat_mamba::pipeline;
use gat_mamba::ssm::{
    discretize, hold_factor_exact, hold_factor_series, selective_scan, Discretization, SsmConfig,
    SsmParams,
};
use gat_mamba::survival::{
    c_index, cox_loss, dynamic_auc, SurvivalBatch, TieMethod, AUC_HORIZONS_DAYS,
};
use gat_mamba::synthetic::SyntheticConfig;
use gat_mamba::training::make_folds;
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn scan_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let l = r.random_range(1..=64);
        let d = r.random_range(1..=8);
        let s = r.random_range(1..=16);
        let mut cfg = SsmConfig::new(d, s);
        cfg.expand = 1;
        let mut p = SsmParams::init(&cfg, &mut r);
        p.a_log.mapv_inplace(|v| v + r.random_range(-0.5..0.5));
        p.b_delta.mapv_inplace(|v| v + r.random_range(-1.0..1.0));
        let x = random_mat(&mut r, l, d, 2.0);
        let got =
            selective_scan(&x, &p, Discretization::ZeroOrderHold).map_err(|e| e.to_string())?;

        let dt = add_row(&matmul(&x, &p.w_delta), &p.b_delta).mapv(softplus);
        let b = matmul(&x, &p.w_b);
        let c = matmul(&x, &p.w_c);
        let a = p.a_log.mapv(|v| -v.exp());
        let want = naive_scan(&x, &dt, &a, &b, &c);
        let err = max_rel_err(&got, &want);
        if !(err < 1e-10) {
            return Err(format!(
                "case {case} (L={l}, D={d}, S={s}): relative error {err:e}"
            ));
        }
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        secs < 10.0,
        format!("max relative error {worst:.2e} over 100 cases in {secs:.2} s"),
    )
}

fn randomize_running_stats(params: &mut ModelParams, seed: u64) {
    let mut r = rng(seed);
    for st in &mut params.bn_stats {
        st.mean
            .iter_mut()
            .for_each(|v| *v = r.random_range(-0.3..0.3));
        st.var
            .iter_mut()
            .for_each(|v| *v = r.random_range(0.5..1.5));
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        d_node: 8,
        d_uni_hidden: 8,
        d_edge_hidden: 4,
        mlp_hidden: 8,
        ssm_state: 4,
        dropout: 0.0,
        ..ModelConfig::default()
    };
    let mut params = init_params(&cfg, 11).map_err(|e| e.to_string())?;
    randomize_running_stats(&mut params, 12);
    let mut r = rng(13);
    let patients = [
        patient(&mut r, "a", 6, 8, 3.0, true),
        patient(&mut r, "b", 6, 8, 5.0, true),
        patient(&mut r, "c", 6, 8, 9.0, false),
    ];
    let refs: Vec<&PatientRecord> = patients.iter().collect();
    let loss = |p: &ModelParams| {
        loss_and_gradients(p, &refs, Mode::Eval, TieMethod::Breslow).map_err(|e| e.to_string())
    };
    let (_, grads, _) = loss(&params)?;
    let h = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0usize);
    let ids: Vec<_> = params.store.ids().collect();
    for id in ids {
        let n = params.store.get(id).len();
        for k in 0..n {
            let orig = params.store.get(id).as_slice().unwrap()[k];
            params.store.get_mut(id).as_slice_mut().unwrap()[k] = orig + h;
            let lp = loss(&params)?.0;
            params.store.get_mut(id).as_slice_mut().unwrap()[k] = orig - h;
            let lm = loss(&params)?.0;
            params.store.get_mut(id).as_slice_mut().unwrap()[k] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = grads[id.index()].as_slice().unwrap()[k];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            if !(err < 1e-4) {
                let name = &params.store.tensors()[id.index()].name;
                return Err(format!(
                    "{name}[{k}]: finite difference {fd:e}, analytic {an:e}"
                ));
            }
            worst = worst.max(err);
            checked += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        secs < 60.0,
        format!(
            "{checked} entries of {} tensors, max relative error {worst:.2e}, {secs:.1} s",
            params.store.len()
        ),
    )
}

fn attention_normalization() -> Outcome {
    let mut r = rng(303);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let n = r.random_range(2..=40);
        let d = r.random_range(1..=6);
        let use_edges = case % 2 == 0;
        let g = grid_graph(&mut r, n, d);
        let cfg = GatConfig {
            d_in: d,
            d_hidden: d,
            d_edge: use_edges.then_some(3),
            heads: 1,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        };
        let p = GatParams::init(&cfg, &mut r);
        let x = random_mat(&mut r, n, d, 1.0);
        let e = use_edges.then(|| random_mat(&mut r, g.n_edges(), 3, 1.0));
        let alpha = gat_attention(&x, e.as_ref(), &g.edges, &p, DEFAULT_LEAKY_SLOPE)
            .map_err(|e| e.to_string())?;
        let mut dense = Mat::zeros((n, n));
        for (&(i, j), &a) in g.edges.iter().zip(&alpha) {
            dense[[i, j]] += a;
        }
        for i in 0..n {
            worst = worst.max((dense.row(i).sum() - 1.0).abs());
        }
        // Aggregation is exactly sum_j alpha_ij W x_j, so off-edge weights are 0.
        let out = gat_forward(&x, e.as_ref(), &g.edges, &p, DEFAULT_LEAKY_SLOPE)
            .map_err(|e| e.to_string())?;
        let want = matmul(&dense, &matmul(&x, &p.heads[0].w));
        if max_rel_err(&out, &want) > 1e-12 {
            return Err(format!("case {case}: output is not the edge-weighted sum"));
        }
        // Changing a non-neighbour leaves a node's output bit-identical.
        let i = r.random_range(0..n);
        if let Some(far) = (0..n).find(|&j| j != i && dense[[i, j]] == 0.0) {
            let mut x2 = x.clone();
            x2.row_mut(far).mapv_inplace(|v| v + 5.0);
            let out2 = gat_forward(&x2, e.as_ref(), &g.edges, &p, DEFAULT_LEAKY_SLOPE)
                .map_err(|e| e.to_string())?;
            if out.row(i) != out2.row(i) {
                return Err(format!(
                    "case {case}: node {i} depends on non-neighbour {far}"
                ));
            }
        }
    }
    check(
        worst <= 1e-12,
        format!("max |row sum - 1| = {worst:.2e} over 100 graphs"),
    )
}

fn cox_closed_forms() -> Outcome {
    let single = SurvivalBatch::new(vec![0.7], vec![3.0], vec![true]).map_err(|e| e.to_string())?;
    let l1 = cox_loss(&single).map_err(|e| e.to_string())?;
    if l1 != 0.0 {
        return Err(format!("single-patient loss {l1:e}"));
    }
    let pair = SurvivalBatch::new(vec![0.4, 0.4], vec![1.0, 2.0], vec![true, false])
        .map_err(|e| e.to_string())?;
    let l2 = cox_loss(&pair).map_err(|e| e.to_string())?;
    if (l2 - std::f64::consts::LN_2).abs() > 1e-12 {
        return Err(format!("equal-risk pair loss {l2} vs ln 2"));
    }
    let mut r = rng(404);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = r.random_range(1..=60);
        let risks: Vec<f64> = (0..n).map(|_| r.random_range(-2.0..2.0)).collect();
        let times: Vec<f64> = (0..n).map(|_| r.random_range(1..30) as f64).collect();
        let mut events: Vec<bool> = (0..n).map(|_| r.random_bool(0.6)).collect();
        events[0] = true;
        let batch = SurvivalBatch::new(risks.clone(), times.clone(), events.clone())
            .map_err(|e| e.to_string())?;
        let got = cox_loss(&batch).map_err(|e| e.to_string())?;
        worst = worst.max((got - naive_cox(&risks, &times, &events)).abs());
    }
    check(
        worst <= 1e-12,
        format!(
            "single 0, pair ln 2 (err {:.1e}), 50 batches max err {worst:.1e}",
            (l2 - std::f64::consts::LN_2).abs()
        ),
    )
}

fn metric_oracles() -> Outcome {
    let mut r = rng(505);
    let (mut n_c, mut n_auc) = (0, 0);
    for case in 0..50 {
        let n = r.random_range(2..=500);
        let censor = r.random_range(0.0..0.6);
        // Coarse values so time and risk ties occur.
        let times: Vec<f64> = (0..n)
            .map(|_| (r.random_range(1..200) * 15) as f64)
            .collect();
        let risks: Vec<f64> = (0..n)
            .map(|_| r.random_range(-20..20) as f64 / 8.0)
            .collect();
        let events: Vec<bool> = (0..n).map(|_| !r.random_bool(censor)).collect();
        let batch = SurvivalBatch::new(risks.clone(), times.clone(), events.clone())
            .map_err(|e| e.to_string())?;
        let (num, den) = c_index_pairs(&risks, &times, &events);
        match c_index(&batch) {
            Ok(c) if den > 0 && c == num as f64 / den as f64 => n_c += 1,
            Err(_) if den == 0 => n_c += 1,
            other => return Err(format!("case {case}: c_index {other:?} vs {num}/{den}")),
        }
        for &hz in &AUC_HORIZONS_DAYS {
            let (num, den) = auc_pairs(&risks, &times, &events, hz);
            match dynamic_auc(&batch, hz) {
                Ok(a) if den > 0 && a == num as f64 / den as f64 => n_auc += 1,
                Err(_) if den == 0 => n_auc += 1,
                other => {
                    return Err(format!(
                        "case {case} horizon {hz}: auc {other:?} vs {num}/{den}"
                    ))
                }
            }
        }
    }
    Ok(format!(
        "{n_c} c-index and {n_auc} AUC values equal the pair counts exactly"
    ))
}

fn discretization_limits() -> Outcome {
    let mut worst = 0.0f64;
    let steps = 600;
    for k in 0..=steps {
        let mag = 10f64.powf(-12.0 + 6.0 * k as f64 / steps as f64);
        for z in [mag, -mag] {
            worst = worst.max((hold_factor_series(z) - hold_factor_exact(z)).abs());
            let (delta, b) = (0.5, 1.3);
            let (_, bbar) = discretize(z / delta, b, delta).map_err(|e| e.to_string())?;
            let exact = z.exp_m1() / (z / delta) * b;
            worst = worst.max((bbar - exact).abs());
        }
    }
    check(
        worst <= 1e-12,
        format!("max deviation {worst:.2e} for |dA| in [1e-12, 1e-6]"),
    )
}

fn learning_config(extra: &str) -> String {
    format!("d_uni_hidden = 16\nn_blocks = 1\nlr = 1e-3\nbaseline = true\nparallel_folds = false\nseed = 7\n{extra}")
}

fn synthetic_dataset(dir: &Path) -> Result<(), String> {
    let syn = SyntheticConfig {
        n_patients: 400,
        nodes: (60, 120),
        hazard_coefficient: 3.0,
        censoring_rate: 0.3,
        seed: 7,
        ..SyntheticConfig::default()
    };
    pipeline::gen_synthetic(dir, &syn).map_err(|e| e.to_string())
}

fn train_run(data: &Path, out: &Path) -> Result<(pipeline::TrainSummary, f64), String> {
    let cfg = ConfigFile::parse(&learning_config(""), Path::new("acceptance.cfg"))
        .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let summary = pipeline::train(data, out, &cfg).map_err(|e| e.to_string())?;
    Ok((summary, start.elapsed().as_secs_f64()))
}

fn end_to_end(root: &Path) -> Outcome {
    let data = root.join("data");
    synthetic_dataset(&data)?;
    let (summary, secs) = train_run(&data, &root.join("run_a"))?;
    let c = summary.mean_c_index();
    let b = summary.mean_baseline_c_index().ok_or("baseline missing")?;
    let per_fold = secs / summary.metrics.len() as f64;
    check(
        c >= 0.80 && c - b >= 0.05 && per_fold < 600.0,
        format!("mean C-index {c:.4}, baseline {b:.4}, {per_fold:.0} s per fold"),
    )
}

fn ablation_wiring() -> Outcome {
    let mut r = rng(808);
    let rec = patient(&mut r, "x", 12, 8, 10.0, true);
    let mut details = Vec::new();
    for ab in [Ablation::GatOnly, Ablation::MambaOnly] {
        let cfg = ModelConfig {
            d_node: 8,
            d_uni_hidden: 8,
            mlp_hidden: 8,
            ssm_state: 4,
            n_blocks: 2,
            ablation: ab,
            ..ModelConfig::default()
        };
        let mut params = init_params(&cfg, 21).map_err(|e| e.to_string())?;
        randomize_running_stats(&mut params, 22);
        let got = model_forward(&rec, &params, None).map_err(|e| e.to_string())?;
        let want = reference_risk(&params, &rec.graphs[0])?;
        let err = (got - want).abs();
        if !(err <= 1e-9) {
            return Err(format!("{ab}: model {got} vs reference {want}"));
        }
        details.push(format!("{ab} err {err:.1e}"));
    }
    Ok(details.join(", "))
}

fn determinism(root: &Path) -> Outcome {
    let data = root.join("data");
    let (_, _) = train_run(&data, &root.join("run_b"))?;
    for f in [pipeline::METRICS_FILE, pipeline::BASELINE_METRICS_FILE] {
        let a = std::fs::read(root.join("run_a").join(f)).map_err(|e| e.to_string())?;
        let b = std::fs::read(root.join("run_b").join(f)).map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok("metrics and baseline CSVs identical across two runs".into())
}

fn split_arithmetic() -> Outcome {
    let syn = SyntheticConfig {
        n_patients: 444,
        nodes: (4, 6),
        seed: 10,
        ..SyntheticConfig::default()
    };
    let ds = gat_mamba::synthetic::generate_synthetic(&syn).map_err(|e| e.to_string())?;
    let events: Vec<bool> = ds.patients.iter().map(|p| p.event).collect();
    let folds = make_folds(&events, 5, 0.25, 0).map_err(|e| e.to_string())?;
    let sizes: Vec<(usize, usize, usize)> = folds
        .iter()
        .map(|f| (f.train.len(), f.val.len(), f.test.len()))
        .collect();
    let n_even = sizes.iter().filter(|&&s| s == (266, 89, 89)).count();
    check(
        n_even >= 4 && sizes.iter().all(|s| s.0 + s.1 + s.2 == 444),
        format!("fold sizes {sizes:?}"),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let root = tmp.path();
    let criteria: Vec<Criterion> = vec![
        ("scan matches naive recurrence", Box::new(scan_oracle)),
        (
            "gradients match finite differences",
            Box::new(gradient_suite),
        ),
        (
            "attention rows normalized",
            Box::new(attention_normalization),
        ),
        (
            "Cox loss closed forms and oracle",
            Box::new(cox_closed_forms),
        ),
        (
            "C-index and AUC match pair oracles",
            Box::new(metric_oracles),
        ),
        (
            "discretization series limit",
            Box::new(discretization_limits),
        ),
        (
            "synthetic end-to-end learning",
            Box::new(|| end_to_end(root)),
        ),
        (
            "single-branch ablations match references",
            Box::new(ablation_wiring),
        ),
        (
            "repeat run is byte-identical",
            Box::new(|| determinism(root)),
        ),
        ("444-patient split sizes", Box::new(split_arithmetic)),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {tag}: {name}: {detail}", i + 1);
    }
    println!(
        "{} of {} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}

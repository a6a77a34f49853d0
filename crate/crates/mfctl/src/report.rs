//! JSON reports and CSV process tables.

use std::io;
use std::path::Path;

use mfctl_core::kalman::KalmanReport;
use mfctl_core::model::{AssumptionReport, Verdict};
use mfctl_core::process::{LevelProcess, TrajectoryBundle};
use mfctl_core::sde::GramianReport;
use mfctl_core::tree::TreeSpace;
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

pub fn matrix(m: &DMatrix<f64>) -> Value {
    Value::Array((0..m.nrows()).map(|i| Value::from(m.row(i).iter().cloned().collect::<Vec<f64>>())).collect())
}

pub fn vector(v: &DVector<f64>) -> Value {
    Value::from(v.as_slice().to_vec())
}

fn verdict(v: &Verdict) -> Value {
    let evidence: serde_json::Map<String, Value> = v.evidence.iter().map(|(k, x)| (k.clone(), json!(x))).collect();
    json!({ "holds": v.holds, "failures": v.failures, "evidence": evidence })
}

pub fn assumptions(r: &AssumptionReport) -> Value {
    json!({
        "delta": r.delta,
        "H1": verdict(&r.h1),
        "H2": verdict(&r.h2),
        "H3_user_asserted": r.h3_user_asserted,
        "H4": verdict(&r.h4),
        "H4_prime": verdict(&r.h4_prime),
        "H5": verdict(&r.h5),
        "H6": verdict(&r.h6),
    })
}

pub fn kalman(r: &KalmanReport) -> Value {
    json!({
        "rank": r.rank,
        "n": r.n,
        "controllable": r.controllable,
        "tol_rel": r.tol_rel,
        "saturation_k": r.saturation_k,
        "stopped_early": r.stopped_early,
        "column_counts": r.column_counts,
        "rank_after": r.rank_after,
        "basis": matrix(&r.basis.basis),
    })
}

pub fn gramian(g: &GramianReport) -> Value {
    json!({
        "G": matrix(&g.g),
        "std_error": matrix(&g.std_error),
        "eigenvalues": g.eigenvalues,
        "min_eigenvalue": g.min_eigenvalue,
        "min_eigenvalue_se": g.min_eigenvalue_se,
        "controllable": g.controllable,
        "is_zero": g.is_zero(),
        "paths_used": g.paths_used,
        "tol": g.tol,
        "rule": "min_eigenvalue - 3 * se > tol",
    })
}

pub fn write_json(path: &Path, v: &Value) -> io::Result<()> {
    let mut s = serde_json::to_string_pretty(v).map_err(io::Error::other)?;
    s.push('\n');
    std::fs::write(path, s)
}

fn names(prefix: &str, k: usize) -> impl Iterator<Item = String> + '_ {
    (1..=k).map(move |i| format!("{prefix}{i}"))
}

fn push_opt(row: &mut Vec<String>, p: Option<&LevelProcess>, dim: usize, k: usize, j: usize) {
    match p.and_then(|p| p.levels.get(k)).and_then(|l| l.get(j)) {
        Some(v) => row.extend(v.iter().map(|x| x.to_string())),
        None => row.extend(std::iter::repeat_n(String::new(), dim)),
    }
}

/// Tree bundle, one row per node keyed by its path label; step
/// quantities are blank on leaves.
pub fn write_bundle_csv(path: &Path, bundle: &TrajectoryBundle, u: &LevelProcess) -> csv::Result<()> {
    let n = bundle.x.dim;
    let nn = bundle.y_agents.dim;
    let m0 = bundle.v.as_ref().map_or(0, |v| v.dim);
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = vec!["t".into(), "node_path".into()];
    header.extend(names("x", n));
    header.extend(names("y", nn));
    header.extend(names("z", nn));
    header.extend(names("q", n));
    header.extend(names("u", u.dim));
    header.extend(names("v", m0));
    w.write_record(&header)?;
    for (k, t) in bundle.times.iter().enumerate() {
        for j in 0..bundle.x.levels[k].len() {
            let mut row = vec![t.to_string(), TreeSpace::path_string(k, j)];
            push_opt(&mut row, Some(&bundle.x), n, k, j);
            push_opt(&mut row, Some(&bundle.y_agents), nn, k, j);
            push_opt(&mut row, Some(&bundle.z_agents), nn, k, j);
            push_opt(&mut row, bundle.q.as_ref(), n, k, j);
            push_opt(&mut row, Some(u), u.dim, k, j);
            push_opt(&mut row, bundle.v.as_ref(), m0, k, j);
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Control on the tree, one row per non-leaf node.
pub fn write_tree_control_csv(path: &Path, space: &TreeSpace, prefix: &str, v: &LevelProcess) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = vec!["t".into(), "node_path".into()];
    header.extend(names(prefix, v.dim));
    w.write_record(&header)?;
    for (k, level) in v.levels.iter().enumerate() {
        for (j, x) in level.iter().enumerate() {
            let mut row = vec![space.grid().t(k).to_string(), TreeSpace::path_string(k, j)];
            row.extend(x.iter().map(|e| e.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Sampled paths, one row per (path, step).
pub fn write_paths_csv(path: &Path, seed: u64, prefix: &str, dim: usize, rows: &[(usize, f64, DVector<f64>)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = vec!["seed".into(), "path".into(), "t".into()];
    header.extend(names(prefix, dim));
    w.write_record(&header)?;
    for (p, t, x) in rows {
        let mut row = vec![seed.to_string(), p.to_string(), t.to_string()];
        row.extend(x.iter().map(|e| e.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

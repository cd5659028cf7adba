//! `compare`: entrywise and rank-level agreement between two influence
//! artifacts. Reads only; never touches the inputs.

use std::collections::HashSet;
use std::fs;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use bif_core::artifact::read_influence_matrix;
use bif_core::estimators::{pearson, top_k};
use bif_core::lds::spearman;
use bif_core::{Error, Result};

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// First influence artifact (.mat).
    pub a: PathBuf,
    /// Second influence artifact (.mat).
    pub b: PathBuf,
    /// Ranking depth for the overlap statistic.
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    /// Also write the report as JSON to this path.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct CompareReport {
    a: String,
    b: String,
    kind_a: String,
    kind_b: String,
    rows: usize,
    cols: usize,
    pearson: f64,
    spearman: f64,
    max_abs_diff: f64,
    mean_abs_diff: f64,
    rms_diff: f64,
    top_k: usize,
    top_k_overlap: f64,
}

pub fn run(args: &CompareArgs) -> Result<()> {
    let a = read_influence_matrix(&args.a)?;
    let b = read_influence_matrix(&args.b)?;
    a.check_same_labels(&b)?;

    let flat_a: Vec<f64> = a.values.transpose().iter().cloned().collect();
    let flat_b: Vec<f64> = b.values.transpose().iter().cloned().collect();
    let mut max_abs = 0.0f64;
    let mut sum_abs = 0.0;
    let mut sum_sq = 0.0;
    for (x, y) in flat_a.iter().zip(&flat_b) {
        let d = (x - y).abs();
        max_abs = max_abs.max(d);
        sum_abs += d;
        sum_sq += d * d;
    }
    let count = flat_a.len() as f64;

    let k = args.top_k.min(flat_a.len());
    let ids = |m: &bif_core::estimators::InfluenceMatrix| -> HashSet<(String, String)> {
        top_k(m, k).into_iter().map(|e| (e.train_id, e.query_id)).collect()
    };
    let overlap = if k == 0 {
        0.0
    } else {
        ids(&a).intersection(&ids(&b)).count() as f64 / k as f64
    };

    let report = CompareReport {
        a: args.a.display().to_string(),
        b: args.b.display().to_string(),
        kind_a: a.kind.to_string(),
        kind_b: b.kind.to_string(),
        rows: a.n_rows(),
        cols: a.n_cols(),
        pearson: pearson(&flat_a, &flat_b)?,
        spearman: spearman(&flat_a, &flat_b)?.rho,
        max_abs_diff: max_abs,
        mean_abs_diff: sum_abs / count,
        rms_diff: (sum_sq / count).sqrt(),
        top_k: k,
        top_k_overlap: overlap,
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::MalformedArtifact {
        path: "compare report".into(),
        reason: e.to_string(),
    })?;
    println!("{json}");
    if let Some(path) = &args.json {
        fs::write(path, json)?;
    }
    Ok(())
}

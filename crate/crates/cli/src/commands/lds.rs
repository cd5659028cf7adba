//! `lds`: score influence artifacts against retrained ground truth.
//!
//! Retraining dominates the cost, so the subset sweep runs once and is
//! shared by every scored artifact, with the resulting loss table cached on
//! disk under the output root keyed by a hash of everything that determines
//! it (data, attribution set, subsets, retrain settings).

use std::fs;
use std::path::{Path, PathBuf};

use bif_core::nalgebra::DMatrix;
use clap::Args;
use serde::Serialize;

use bif_core::artifact::{read_influence_matrix, sha256_hex};
use bif_core::estimators::InfluenceMatrix;
use bif_core::labels::SeriesLabel;
use bif_core::lds::{
    attribution_set, lds_score, retrained_query_losses, subsample_datasets, LdsConfig, LdsReport,
};
use bif_core::model::{DatasetSplit, Example};
use bif_core::{Error, Result};

use crate::commands::{output_root, read_config_text, RunDir};
use crate::config::{parse_and_validate, resolve, ResolvedRun};

#[derive(Debug, Args)]
pub struct LdsArgs {
    /// Run configuration file (TOML); its [lds] section drives the protocol.
    #[arg(long)]
    pub config: PathBuf,
    /// Influence artifacts (.mat) to score against the shared retrains.
    #[arg(required = true)]
    pub tau: Vec<PathBuf>,
    /// Output root; overrides the config's output_dir and $BIF_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Serialize)]
struct LdsArtifact<'a> {
    tau: String,
    kind: String,
    alpha_retrain: f64,
    alpha_attribution: f64,
    num_subsets: usize,
    report: &'a LdsReport,
}

pub fn run(args: &LdsArgs) -> Result<()> {
    let (text, base) = read_config_text(&args.config)?;
    let cfg = parse_and_validate(&text, &base)?;
    let lds_cfg = cfg.lds.clone().ok_or_else(|| Error::InvalidParameter {
        name: "[lds]".into(),
        reason: "the lds command needs an [lds] section".into(),
    })?;
    let resolved = resolve(&cfg, &base)?;

    let root = output_root(args.out.as_deref(), &cfg, &base);
    let mut run = RunDir::create(&root, &cfg.run_id)?;
    run.write_echo(&cfg)?;

    let n = resolved.data.n_train();
    let attribution = attribution_set(n, lds_cfg.alpha_attribution, lds_cfg.seed)?;
    let subsets = subsample_datasets(attribution.len(), &lds_cfg)?;
    let losses = cached_losses(&root, &resolved, &attribution, &subsets, &lds_cfg)?;

    for tau_path in &args.tau {
        let tau = read_influence_matrix(tau_path)?;
        let selected = select_rows(&tau, &attribution, &resolved.data)?;
        let report = lds_score(&selected, &subsets, &losses)?;
        let stem = tau_path.file_stem().and_then(|s| s.to_str()).unwrap_or("tau");
        let name = run.free_name(&format!("lds-{stem}"), "json");
        // Record the file name, not the full path, so reports stay
        // byte-identical across output roots.
        let tau_name = tau_path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| tau_path.display().to_string());
        run.write_json(
            &name,
            &LdsArtifact {
                tau: tau_name,
                kind: tau.kind.to_string(),
                alpha_retrain: lds_cfg.alpha_retrain,
                alpha_attribution: lds_cfg.alpha_attribution,
                num_subsets: lds_cfg.num_subsets,
                report: &report,
            },
        )?;
        let degenerate = if report.degenerate_subsets.is_empty() {
            String::new()
        } else {
            format!(" ({} degenerate subsets scored 0)", report.degenerate_subsets.len())
        };
        println!(
            "lds {}: {} mean {:+.4} se {:.4} over {} subsets{}",
            cfg.run_id,
            stem,
            report.mean,
            report.std_error,
            report.per_subset.len(),
            degenerate,
        );
    }
    let dir = run.finish()?;
    println!("wrote {}", dir.display());
    Ok(())
}

/// Restrict an influence matrix to the attribution rows, in attribution
/// order. Row labels must cover every attribution index; columns must be
/// whole query losses (component columns cannot be scored against retrained
/// example losses).
fn select_rows(
    tau: &InfluenceMatrix,
    attribution: &[usize],
    data: &DatasetSplit,
) -> Result<InfluenceMatrix> {
    if tau.n_cols() != data.n_query() {
        return Err(Error::ShapeMismatch(format!(
            "tau has {} columns but the config defines {} queries",
            tau.n_cols(),
            data.n_query()
        )));
    }
    for (j, label) in tau.col_labels.iter().enumerate() {
        if label.component.is_some() {
            return Err(Error::UnsupportedDecomposition(format!(
                "tau column {label} is a loss component; aggregate components before LDS scoring"
            )));
        }
        if label.index != j {
            return Err(Error::ShapeMismatch(format!(
                "tau column {j} is labeled {label}, expected query:{j}"
            )));
        }
    }
    let mut values = DMatrix::zeros(attribution.len(), tau.n_cols());
    let mut row_labels = Vec::with_capacity(attribution.len());
    for (r, &global) in attribution.iter().enumerate() {
        let want = SeriesLabel::train(global);
        let source = tau
            .row_labels
            .iter()
            .position(|l| *l == want)
            .ok_or_else(|| Error::ShapeMismatch(format!("tau has no row for {want}")))?;
        for j in 0..tau.n_cols() {
            values[(r, j)] = tau.values[(source, j)];
        }
        row_labels.push(want);
    }
    Ok(InfluenceMatrix {
        kind: tau.kind,
        values,
        row_labels,
        col_labels: tau.col_labels.clone(),
        degenerate_rows: Vec::new(),
        degenerate_cols: Vec::new(),
    })
}

#[derive(Serialize)]
struct CacheKey<'a> {
    train: &'a [Example],
    query: &'a [Example],
    attribution: &'a [usize],
    subsets: &'a [Vec<usize>],
    settings: &'a bif_core::lds::RetrainSettings,
}

fn cached_losses(
    root: &Path,
    resolved: &ResolvedRun,
    attribution: &[usize],
    subsets: &[Vec<usize>],
    lds_cfg: &LdsConfig,
) -> Result<DMatrix<f64>> {
    let key_bytes = serde_json::to_vec(&CacheKey {
        train: &resolved.data.train,
        query: &resolved.data.query,
        attribution,
        subsets,
        settings: &lds_cfg.retrain,
    })
    .map_err(|e| Error::MalformedArtifact { path: "cache key".into(), reason: e.to_string() })?;
    let key = sha256_hex(&key_bytes);
    let cache_dir = root.join("cache");
    let path = cache_dir.join(format!("retrain-{key}.json"));

    let k = subsets.len();
    let q = resolved.data.n_query();
    if path.is_file() {
        let text = fs::read_to_string(&path)?;
        let rows: Vec<Vec<f64>> = serde_json::from_str(&text).map_err(|e| {
            Error::MalformedArtifact { path: path.display().to_string(), reason: e.to_string() }
        })?;
        if rows.len() == k && rows.iter().all(|r| r.len() == q) {
            log::info!("reusing retraining cache {}", path.display());
            return Ok(DMatrix::from_fn(k, q, |i, j| rows[i][j]));
        }
        log::warn!("retraining cache {} has a stale shape; recomputing", path.display());
    }

    let losses = retrained_query_losses(
        &resolved.spec,
        &resolved.data.train,
        &resolved.data.query,
        attribution,
        subsets,
        &lds_cfg.retrain,
    )?;
    let rows: Vec<Vec<f64>> =
        (0..k).map(|i| (0..q).map(|j| losses[(i, j)]).collect()).collect();
    fs::create_dir_all(&cache_dir)?;
    let json = serde_json::to_string(&rows).map_err(|e| Error::MalformedArtifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    fs::write(&path, json)?;
    Ok(losses)
}

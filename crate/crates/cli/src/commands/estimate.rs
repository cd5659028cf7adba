//! `estimate`: sample the localized posterior and turn the recorded trace
//! into raw and normalized influence matrices.

use std::path::PathBuf;

use clap::Args;

use bif_core::estimators::{bif_from_trace, normalized_bif_from_trace};
use bif_core::sgld::{observable_set_from_queries, run_chains};
use bif_core::{Error, Result};

use crate::commands::{output_root, read_config_text, RunDir};
use crate::config::{parse_and_validate, resolve};

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Run configuration file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override [sgld].seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root; overrides the config's output_dir and $BIF_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Record one observable per declared query-loss component.
    #[arg(long)]
    pub per_component: bool,
    /// Suppress the injected noise (test only; needs --allow-test-modes).
    #[arg(long)]
    pub zero_noise: bool,
}

pub fn run(args: &EstimateArgs, allow_test_modes: bool) -> Result<()> {
    if args.zero_noise && !allow_test_modes {
        return Err(Error::InvalidParameter {
            name: "--zero-noise".into(),
            reason: "test-only mode; rerun with --allow-test-modes to enable it".into(),
        });
    }
    let (text, base) = read_config_text(&args.config)?;
    let mut cfg = parse_and_validate(&text, &base)?;
    if let Some(seed) = args.seed {
        cfg.sgld.seed = Some(seed);
    }
    let resolved = resolve(&cfg, &base)?;
    let mut sgld = resolved.sgld.clone();
    sgld.zero_noise = args.zero_noise;

    let root = output_root(args.out.as_deref(), &cfg, &base);
    let mut run = RunDir::create(&root, &cfg.run_id)?;
    run.write_echo(&cfg)?;

    let observables = observable_set_from_queries(&resolved.data, args.per_component)?;
    let trace = match run_chains(&resolved.spec, &resolved.w_star, &resolved.data, &observables, &sgld)
    {
        Ok(trace) => trace,
        Err(e) => {
            // Persist what is known about the failure next to the echo, then
            // surface the divergence exit code.
            if let Error::Divergence { chain, step, max_abs } = &e {
                run.write_json(
                    "divergence.json",
                    &serde_json::json!({
                        "chain": chain,
                        "step": step,
                        "max_abs": max_abs,
                        "message": e.to_string(),
                    }),
                )?;
                run.finish()?;
            }
            return Err(e);
        }
    };

    run.write_trace("trace.bin", &trace)?;
    let bif = bif_from_trace(&trace)?;
    let normalized = normalized_bif_from_trace(&trace)?;
    run.write_matrix("bif", &bif)?;
    run.write_matrix("normalized-bif", &normalized)?;
    let dir = run.finish()?;

    println!(
        "estimate {}: {} chains x {} draws, {} train series x {} observables",
        cfg.run_id,
        trace.chains,
        trace.draws_per_chain,
        trace.train_labels.len(),
        trace.obs_labels.len(),
    );
    if !normalized.degenerate_rows.is_empty() || !normalized.degenerate_cols.is_empty() {
        println!(
            "note: {} constant train series, {} constant observables scored as 0",
            normalized.degenerate_rows.len(),
            normalized.degenerate_cols.len(),
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

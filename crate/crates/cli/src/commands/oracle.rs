//! `oracle`: curvature-route influence matrices at the checkpoint, for
//! cross-checking the sampling estimates.

use std::path::PathBuf;

use clap::Args;

use bif_core::oracle::{analytic_gaussian_bif, classical_if, gradsim};
use bif_core::{Error, Result};

use crate::commands::{output_root, read_config_text, RunDir};
use crate::config::{parse_and_validate, resolve, OracleMethod};

#[derive(Debug, Args)]
pub struct OracleArgs {
    /// Run configuration file (TOML); its [oracle] section picks the methods.
    #[arg(long)]
    pub config: PathBuf,
    /// Output root; overrides the config's output_dir and $BIF_OUT.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &OracleArgs) -> Result<()> {
    let (text, base) = read_config_text(&args.config)?;
    let cfg = parse_and_validate(&text, &base)?;
    let oracle = cfg.oracle.clone().ok_or_else(|| Error::InvalidParameter {
        name: "[oracle]".into(),
        reason: "the oracle command needs an [oracle] section".into(),
    })?;
    let resolved = resolve(&cfg, &base)?;

    let root = output_root(args.out.as_deref(), &cfg, &base);
    let mut run = RunDir::create(&root, &cfg.run_id)?;
    run.write_echo(&cfg)?;

    for method in &oracle.methods {
        let matrix = match method {
            OracleMethod::DampenedIf => {
                classical_if(&resolved.spec, &resolved.w_star, &resolved.data, oracle.gamma)?
            }
            OracleMethod::Gradsim => gradsim(&resolved.spec, &resolved.w_star, &resolved.data)?,
            OracleMethod::Analytic => analytic_gaussian_bif(
                &resolved.spec,
                &resolved.w_star,
                &resolved.data,
                oracle.gamma,
                resolved.sgld.n_beta,
            )?,
        };
        run.write_matrix(method.file_stem(), &matrix)?;
        println!(
            "oracle {}: {} ({} x {})",
            cfg.run_id,
            method.file_stem(),
            matrix.n_rows(),
            matrix.n_cols(),
        );
    }
    let dir = run.finish()?;
    println!("wrote {}", dir.display());
    Ok(())
}

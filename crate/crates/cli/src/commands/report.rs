//! `report`: verify a run directory against its manifest and emit ranked
//! top-k influence files for each matrix artifact.

use std::path::PathBuf;

use clap::Args;

use bif_core::artifact::{read_influence_matrix, write_top_k_jsonl, Manifest};
use bif_core::estimators::top_k;
use bif_core::Result;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory containing manifest.json.
    pub run_dir: PathBuf,
    /// Entries per ranking file.
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
}

pub fn run(args: &ReportArgs) -> Result<()> {
    let dir = &args.run_dir;
    let mut manifest = Manifest::load(dir)?;
    manifest.verify(dir)?;
    println!(
        "run {}: {} artifacts verified",
        manifest.run_id,
        manifest.artifacts.len()
    );

    let names: Vec<String> = manifest
        .artifacts
        .keys()
        .filter(|n| n.ends_with(".mat"))
        .cloned()
        .collect();
    for name in &names {
        let matrix = read_influence_matrix(&dir.join(name))?;
        let entries = top_k(&matrix, args.top_k);
        let stem = name.trim_end_matches(".mat");
        let out_name = format!("top-{stem}.jsonl");
        write_top_k_jsonl(&dir.join(&out_name), &entries)?;
        manifest.record(dir, &out_name)?;
        print!(
            "{name}: kind {}, {} x {}",
            matrix.kind,
            matrix.n_rows(),
            matrix.n_cols(),
        );
        if !matrix.degenerate_rows.is_empty() || !matrix.degenerate_cols.is_empty() {
            print!(
                ", {} degenerate rows, {} degenerate cols",
                matrix.degenerate_rows.len(),
                matrix.degenerate_cols.len(),
            );
        }
        match entries.first() {
            Some(e) => println!("; strongest {} -> {} ({:+.6e})", e.train_id, e.query_id, e.score),
            None => println!(),
        }
    }
    if names.is_empty() {
        println!("no influence artifacts to rank");
    } else {
        manifest.write(dir)?;
    }
    Ok(())
}

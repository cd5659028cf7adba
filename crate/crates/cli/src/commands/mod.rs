//! Command implementations.
//!
//! Heavy numerical work (chains, subset retrains) is parallel inside the
//! core library; every artifact write happens here on the calling thread, so
//! a run directory's manifest always reflects exactly the files on disk.

pub mod compare;
pub mod estimate;
pub mod lds;
pub mod oracle;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use bif_core::artifact::{
    write_influence_csv, write_influence_matrix, write_trace, Manifest,
};
use bif_core::estimators::InfluenceMatrix;
use bif_core::sgld::ChainTrace;
use bif_core::{Error, Result};

use crate::config::RunConfig;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "BIF_OUT";

/// Output root precedence: `--out` flag, then `output_dir` from the config
/// (relative to the config file), then `$BIF_OUT`, then the working dir.
pub fn output_root(flag: Option<&Path>, cfg: &RunConfig, base: &Path) -> PathBuf {
    if let Some(out) = flag {
        return out.to_path_buf();
    }
    if let Some(dir) = &cfg.output_dir {
        return if dir.is_absolute() { dir.clone() } else { base.join(dir) };
    }
    if let Some(root) = std::env::var_os(OUTPUT_ROOT_VAR) {
        return PathBuf::from(root);
    }
    PathBuf::from(".")
}

/// A freshly created run directory plus its growing manifest.
pub struct RunDir {
    pub dir: PathBuf,
    manifest: Manifest,
}

impl RunDir {
    /// Creates `root/run_id`, refusing to reuse an existing run.
    pub fn create(root: &Path, run_id: &str) -> Result<RunDir> {
        let dir = root.join(run_id);
        if dir.exists() {
            return Err(Error::InvalidParameter {
                name: "run_id".into(),
                reason: format!("{} already exists; run ids are unique per output root", dir.display()),
            });
        }
        fs::create_dir_all(&dir)?;
        Ok(RunDir { dir, manifest: Manifest::new(run_id) })
    }

    /// Echoes the fully resolved config so the run is self-describing.
    pub fn write_echo(&mut self, cfg: &RunConfig) -> Result<()> {
        let text = toml::to_string_pretty(cfg).map_err(|e| Error::MalformedArtifact {
            path: self.dir.join("config.toml").display().to_string(),
            reason: e.to_string(),
        })?;
        fs::write(self.dir.join("config.toml"), text)?;
        self.manifest.record(&self.dir, "config.toml")
    }

    /// Writes `<stem>.mat` (binary) and `<stem>.csv` (export) for a matrix.
    pub fn write_matrix(&mut self, stem: &str, m: &InfluenceMatrix) -> Result<()> {
        let mat = format!("{stem}.mat");
        let csv = format!("{stem}.csv");
        write_influence_matrix(&self.dir.join(&mat), m)?;
        write_influence_csv(&self.dir.join(&csv), m)?;
        self.manifest.record(&self.dir, &mat)?;
        self.manifest.record(&self.dir, &csv)
    }

    pub fn write_trace(&mut self, name: &str, trace: &ChainTrace) -> Result<()> {
        write_trace(&self.dir.join(name), trace)?;
        self.manifest.record(&self.dir, name)
    }

    pub fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.dir.join(name);
        let json = serde_json::to_string_pretty(value).map_err(|e| Error::MalformedArtifact {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        fs::write(&path, json)?;
        self.manifest.record(&self.dir, name)
    }

    /// A manifest artifact name not taken yet (`stem.ext`, `stem-2.ext`, ...).
    pub fn free_name(&self, stem: &str, ext: &str) -> String {
        let mut name = format!("{stem}.{ext}");
        let mut k = 1;
        while self.manifest.artifacts.contains_key(&name) {
            k += 1;
            name = format!("{stem}-{k}.{ext}");
        }
        name
    }

    /// Writes the manifest and hands back the directory path.
    pub fn finish(self) -> Result<PathBuf> {
        self.manifest.write(&self.dir)?;
        Ok(self.dir)
    }
}

/// Reads a config file and returns its text plus the directory that relative
/// references resolve against.
pub fn read_config_text(path: &Path) -> Result<(String, PathBuf)> {
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    Ok((text, base))
}

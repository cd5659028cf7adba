//! On-disk artifacts: traces, influence matrices, and the run manifest.
//!
//! The binary layout is a short UTF-8 header (one `key = value` per line,
//! terminated by a `---` line) followed by raw little-endian f64 blocks in
//! row-major order. Headers carry the shape and labels, so files are
//! self-describing; integrity is checked separately through the manifest's
//! SHA-256 map rather than per-file checksums.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimators::{InfluenceMatrix, MatrixKind, TopEntry};
use crate::labels::SeriesLabel;
use crate::sgld::ChainTrace;

const MAGIC: &str = "bif-artifact v1";
const SEPARATOR: &[u8] = b"\n---\n";

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    format!("{:x}", hasher.finalize())
}

fn join_labels(labels: &[SeriesLabel]) -> String {
    labels.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(",")
}

fn join_indices(indices: &[usize]) -> String {
    indices.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",")
}

fn matrix_bytes(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.extend_from_slice(&m[(r, c)].to_le_bytes());
        }
    }
}

fn malformed(path: &Path, reason: impl Into<String>) -> Error {
    Error::MalformedArtifact { path: path.display().to_string(), reason: reason.into() }
}

struct Header {
    fields: BTreeMap<String, String>,
    payload_at: usize,
}

fn split_file(path: &Path, bytes: &[u8]) -> Result<Header> {
    let sep = bytes
        .windows(SEPARATOR.len())
        .position(|w| w == SEPARATOR)
        .ok_or_else(|| malformed(path, "missing header separator"))?;
    let header = std::str::from_utf8(&bytes[..sep])
        .map_err(|_| malformed(path, "header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(malformed(path, "unrecognized magic line"));
    }
    let mut fields = BTreeMap::new();
    for line in lines {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| malformed(path, format!("header line without '=': {line:?}")))?;
        fields.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(Header { fields, payload_at: sep + SEPARATOR.len() })
}

impl Header {
    fn get(&self, path: &Path, key: &str) -> Result<&str> {
        self.fields
            .get(key)
            .map(|s| s.as_str())
            .ok_or_else(|| malformed(path, format!("missing header field {key:?}")))
    }

    fn usize(&self, path: &Path, key: &str) -> Result<usize> {
        self.get(path, key)?
            .parse()
            .map_err(|_| malformed(path, format!("field {key:?} is not a count")))
    }

    fn labels(&self, path: &Path, key: &str) -> Result<Vec<SeriesLabel>> {
        let raw = self.get(path, key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| s.parse().map_err(|_| malformed(path, format!("bad label {s:?} in {key:?}"))))
            .collect()
    }

    fn indices(&self, path: &Path, key: &str) -> Result<Vec<usize>> {
        let raw = self.get(path, key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| s.parse().map_err(|_| malformed(path, format!("bad index {s:?} in {key:?}"))))
            .collect()
    }
}

fn read_block(path: &Path, bytes: &[u8], at: &mut usize, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let need = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| malformed(path, "block size overflows"))?;
    let end = *at + need;
    if bytes.len() < end {
        return Err(malformed(path, format!("payload truncated: need {need} bytes from offset {at}")));
    }
    let block = &bytes[*at..end];
    *at = end;
    let mut m = DMatrix::zeros(rows, cols);
    let mut chunk = block.chunks_exact(8);
    for r in 0..rows {
        for c in 0..cols {
            let raw: [u8; 8] = chunk.next().expect("sized above").try_into().expect("8 bytes");
            m[(r, c)] = f64::from_le_bytes(raw);
        }
    }
    Ok(m)
}

pub fn write_influence_matrix(path: &Path, m: &InfluenceMatrix) -> Result<()> {
    let mut header = String::new();
    let _ = writeln!(header, "{MAGIC}");
    let _ = writeln!(header, "type = influence");
    let _ = writeln!(header, "kind = {}", m.kind);
    let _ = writeln!(header, "rows = {}", m.n_rows());
    let _ = writeln!(header, "cols = {}", m.n_cols());
    let _ = writeln!(header, "row_labels = {}", join_labels(&m.row_labels));
    let _ = writeln!(header, "col_labels = {}", join_labels(&m.col_labels));
    let _ = writeln!(header, "degenerate_rows = {}", join_indices(&m.degenerate_rows));
    let _ = write!(header, "degenerate_cols = {}", join_indices(&m.degenerate_cols));
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(SEPARATOR);
    matrix_bytes(&mut bytes, &m.values);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_influence_matrix(path: &Path) -> Result<InfluenceMatrix> {
    let bytes = fs::read(path)?;
    let header = split_file(path, &bytes)?;
    if header.get(path, "type")? != "influence" {
        return Err(malformed(path, "not an influence artifact"));
    }
    let kind: MatrixKind = header
        .get(path, "kind")?
        .parse()
        .map_err(|_| malformed(path, "unknown matrix kind"))?;
    let rows = header.usize(path, "rows")?;
    let cols = header.usize(path, "cols")?;
    let row_labels = header.labels(path, "row_labels")?;
    let col_labels = header.labels(path, "col_labels")?;
    if row_labels.len() != rows || col_labels.len() != cols {
        return Err(malformed(path, "label counts disagree with the declared shape"));
    }
    let degenerate_rows = header.indices(path, "degenerate_rows")?;
    let degenerate_cols = header.indices(path, "degenerate_cols")?;
    let mut at = header.payload_at;
    let values = read_block(path, &bytes, &mut at, rows, cols)?;
    if at != bytes.len() {
        return Err(malformed(path, "trailing bytes after payload"));
    }
    Ok(InfluenceMatrix { kind, values, row_labels, col_labels, degenerate_rows, degenerate_cols })
}

pub fn write_trace(path: &Path, trace: &ChainTrace) -> Result<()> {
    let mut header = String::new();
    let _ = writeln!(header, "{MAGIC}");
    let _ = writeln!(header, "type = trace");
    let _ = writeln!(header, "chains = {}", trace.chains);
    let _ = writeln!(header, "draws_per_chain = {}", trace.draws_per_chain);
    let _ = writeln!(header, "seed = {}", trace.seed);
    let _ = writeln!(header, "train_labels = {}", join_labels(&trace.train_labels));
    let _ = write!(header, "obs_labels = {}", join_labels(&trace.obs_labels));
    let mut bytes = header.into_bytes();
    bytes.extend_from_slice(SEPARATOR);
    matrix_bytes(&mut bytes, &trace.train_losses);
    matrix_bytes(&mut bytes, &trace.observables);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<ChainTrace> {
    let bytes = fs::read(path)?;
    let header = split_file(path, &bytes)?;
    if header.get(path, "type")? != "trace" {
        return Err(malformed(path, "not a trace artifact"));
    }
    let chains = header.usize(path, "chains")?;
    let draws_per_chain = header.usize(path, "draws_per_chain")?;
    let seed: u64 = header
        .get(path, "seed")?
        .parse()
        .map_err(|_| malformed(path, "field \"seed\" is not an integer"))?;
    let train_labels = header.labels(path, "train_labels")?;
    let obs_labels = header.labels(path, "obs_labels")?;
    let cols = chains
        .checked_mul(draws_per_chain)
        .ok_or_else(|| malformed(path, "column count overflows"))?;
    let mut at = header.payload_at;
    let train_losses = read_block(path, &bytes, &mut at, train_labels.len(), cols)?;
    let observables = read_block(path, &bytes, &mut at, obs_labels.len(), cols)?;
    if at != bytes.len() {
        return Err(malformed(path, "trailing bytes after payload"));
    }
    Ok(ChainTrace { train_labels, obs_labels, train_losses, observables, chains, draws_per_chain, seed })
}

/// CSV export: `# key = value` comment lines for metadata, then a header row
/// with the column labels and one row per train series. Floats use Rust's
/// shortest round-trip formatting, so read-back is exact.
pub fn write_influence_csv(path: &Path, m: &InfluenceMatrix) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "# kind = {}", m.kind);
    let _ = writeln!(out, "# degenerate_rows = {}", join_indices(&m.degenerate_rows));
    let _ = writeln!(out, "# degenerate_cols = {}", join_indices(&m.degenerate_cols));
    let _ = write!(out, "series");
    for label in &m.col_labels {
        let _ = write!(out, ",{label}");
    }
    let _ = writeln!(out);
    for r in 0..m.n_rows() {
        let _ = write!(out, "{}", m.row_labels[r]);
        for c in 0..m.n_cols() {
            let _ = write!(out, ",{}", m.values[(r, c)]);
        }
        let _ = writeln!(out);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_influence_csv(path: &Path) -> Result<InfluenceMatrix> {
    let text = fs::read_to_string(path)?;
    let mut kind = None;
    let mut degenerate_rows = Vec::new();
    let mut degenerate_cols = Vec::new();
    let mut col_labels: Option<Vec<SeriesLabel>> = None;
    let mut row_labels = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for line in text.lines() {
        if let Some(comment) = line.strip_prefix('#') {
            let (key, value) = comment
                .split_once('=')
                .ok_or_else(|| malformed(path, format!("comment without '=': {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let parse_indices = |value: &str| -> Result<Vec<usize>> {
                if value.is_empty() {
                    return Ok(Vec::new());
                }
                value
                    .split(',')
                    .map(|s| s.parse().map_err(|_| malformed(path, format!("bad index {s:?}"))))
                    .collect()
            };
            match key {
                "kind" => {
                    kind = Some(
                        value
                            .parse::<MatrixKind>()
                            .map_err(|_| malformed(path, "unknown matrix kind"))?,
                    )
                }
                "degenerate_rows" => degenerate_rows = parse_indices(value)?,
                "degenerate_cols" => degenerate_cols = parse_indices(value)?,
                other => return Err(malformed(path, format!("unknown comment key {other:?}"))),
            }
            continue;
        }
        let mut cells = line.split(',');
        let first = cells.next().ok_or_else(|| malformed(path, "empty line"))?;
        if col_labels.is_none() {
            if first != "series" {
                return Err(malformed(path, "header row must start with \"series\""));
            }
            col_labels = Some(
                cells
                    .map(|s| {
                        s.parse().map_err(|_| malformed(path, format!("bad column label {s:?}")))
                    })
                    .collect::<Result<_>>()?,
            );
            continue;
        }
        row_labels.push(
            first
                .parse::<SeriesLabel>()
                .map_err(|_| malformed(path, format!("bad row label {first:?}")))?,
        );
        rows.push(
            cells
                .map(|s| {
                    s.parse::<f64>().map_err(|_| malformed(path, format!("bad float {s:?}")))
                })
                .collect::<Result<_>>()?,
        );
    }
    let kind = kind.ok_or_else(|| malformed(path, "missing kind comment"))?;
    let col_labels = col_labels.ok_or_else(|| malformed(path, "missing header row"))?;
    for row in &rows {
        if row.len() != col_labels.len() {
            return Err(malformed(path, "ragged row"));
        }
    }
    let values =
        DMatrix::from_fn(rows.len(), col_labels.len(), |r, c| rows[r][c]);
    Ok(InfluenceMatrix { kind, values, row_labels, col_labels, degenerate_rows, degenerate_cols })
}

/// One JSON object per line, strongest influences first.
pub fn write_top_k_jsonl(path: &Path, entries: &[TopEntry]) -> Result<()> {
    let mut out = String::new();
    for entry in entries {
        let line = serde_json::to_string(entry)
            .map_err(|e| Error::MalformedArtifact { path: path.display().to_string(), reason: e.to_string() })?;
        out.push_str(&line);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Names and content hashes of every artifact a run produced. The manifest
/// itself is not part of the map, so timing metadata does not perturb the
/// recorded hashes.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub run_id: String,
    pub created_unix_ms: u64,
    /// Artifact file name to lowercase SHA-256 hex of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn new(run_id: impl Into<String>) -> Manifest {
        let created_unix_ms = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        Manifest { run_id: run_id.into(), created_unix_ms, artifacts: BTreeMap::new() }
    }

    /// Hashes the file `dir/name` and records it under `name`.
    pub fn record(&mut self, dir: &Path, name: &str) -> Result<()> {
        let bytes = fs::read(dir.join(name))?;
        self.artifacts.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_NAME);
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::MalformedArtifact { path: path.display().to_string(), reason: e.to_string() })?;
        fs::write(&path, json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Manifest> {
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text)
            .map_err(|e| Error::MalformedArtifact { path: path.display().to_string(), reason: e.to_string() })
    }

    /// Recomputes every recorded hash, failing on the first file whose bytes
    /// changed since the manifest was written.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for (name, expected) in &self.artifacts {
            let path = dir.join(name);
            let bytes = fs::read(&path)?;
            let actual = sha256_hex(&bytes);
            if &actual != expected {
                return Err(Error::HashMismatch {
                    path: path.display().to_string(),
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }
}

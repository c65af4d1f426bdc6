//! Small file helpers shared by the library and the CLI.

use std::io::Write;
use std::path::Path;

use crate::data::fmt_f64;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::invalid(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// CSV bytes for a numeric table with the given header.
pub fn table_csv(header: &[&str], rows: &Tensor<f64>) -> Result<Vec<u8>> {
    if header.len() != rows.cols() {
        return Err(Error::shape(format!("{} column names for {} columns", header.len(), rows.cols())));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in 0..rows.rows() {
        w.write_record(rows.row(r).iter().map(|&v| fmt_f64(v)))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Column layouts of the CSV artifacts and top-level keys of the JSON
/// artifacts written by the command-line tool. `{x}` and `{z}` expand to
/// `x1..xD` and `z1..zd`.
pub mod schema {
    pub const DATA: &[&str] = &["{x}", "[true_logpdf]", "[true_rank]"];
    pub const METRICS: &[&str] = &["step", "nll", "I_P", "Ihat_P", "wall_time"];
    pub const SAMPLES: &[&str] = &["{z}", "{x}"];
    pub const EVAL_POINTS: &[&str] = &["{x}", "logpx", "I_P", "Ihat_P", "[true_logpdf]"];
    pub const TRACE: &[&str] = &["path", "block", "step", "t", "{x}", "{z}", "cos"];
    pub const MANIFOLD_DENSITY: &[&str] = &["{x}", "log_pM", "predicted_rank", "[true_rank]", "[true_logpdf]"];
    pub const EVAL_SUMMARY_KEYS: &[&str] = &["n", "nll", "I_P", "Ihat_P"];
    pub const SIMILARITY_KEYS: &[&str] = &["row_labels", "col_labels", "matrix", "n_points"];
    pub const CONTOURS_KEYS: &[&str] = &["partition", "points"];
    pub const COOKBOOK_KEYS: &[&str] = &["trials", "max_dim", "seed", "pass", "rows"];
    pub const RUN_KEYS: &[&str] = &["command", "argv", "config_hash", "seed", "versions", "wall_time", "outputs"];

    /// Expands a layout for data dim `d` and latent dim `k`; bracketed
    /// optional columns are kept when `optional` is set.
    pub fn expand(layout: &[&str], d: usize, k: usize, optional: bool) -> Vec<String> {
        let mut out = Vec::new();
        for c in layout {
            match *c {
                "{x}" => out.extend((1..=d).map(|i| format!("x{i}"))),
                "{z}" => out.extend((1..=k).map(|i| format!("z{i}"))),
                c if c.starts_with('[') => {
                    if optional {
                        out.push(c.trim_matches(['[', ']']).to_owned());
                    }
                }
                c => out.push(c.to_owned()),
            }
        }
        out
    }
}

//! CSV output with a provenance comment line.
//!
//! Layout: one `#`-prefixed comment carrying the config hash, run seed
//! and the full one-line config, then an RFC-4180 header row and data
//! rows. Values are plain numerics or simple labels, so no quoting is
//! ever required; the writer asserts that.

use std::io::Write;
use std::path::Path;

use super::ExperimentError;

pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub config_line: String,
}

impl Provenance {
    fn comment(&self) -> String {
        format!(
            "# config_hash={} seed={} config=\"{}\"\n",
            self.config_hash, self.seed, self.config_line
        )
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::Io(format!("{}: {e}", path.display()))
}

/// Write a provenance-stamped CSV. Deterministic for identical inputs.
pub fn write_csv(
    path: &Path,
    provenance: &Provenance,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<(), ExperimentError> {
    let mut out = String::new();
    out.push_str(&provenance.comment());
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        assert_eq!(row.len(), header.len(), "row width mismatch");
        for (i, cell) in row.iter().enumerate() {
            assert!(
                !cell.contains([',', '"', '\n']),
                "cell needs quoting: {cell:?}"
            );
            if i > 0 {
                out.push(',');
            }
            out.push_str(cell);
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(out.as_bytes()).map_err(io_err(path))?;
    Ok(())
}

/// Shortest-round-trip float formatting; reparses to the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

/// 17 significant digits round-trip every `f64`.
pub fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV text with a header row and one row per record.
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut text = header.iter().map(|h| h.as_ref()).collect::<Vec<_>>().join(",");
        text.push('\n');
        Self { text }
    }

    pub fn row(&mut self, values: impl IntoIterator<Item = f64>) {
        let line: Vec<String> = values.into_iter().map(num).collect();
        self.text.push_str(&line.join(","));
        self.text.push('\n');
    }

    /// Row with pre-formatted fields.
    pub fn raw_row(&mut self, fields: &[String]) {
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating file in {}", dir.display()))?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// `out.csv` → `out.<suffix>.json`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}.json"))
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub config_sha256: Option<String>,
    pub config: Option<String>,
    pub versions: Versions,
    pub grid: Option<GridInfo>,
    pub seed: Option<u64>,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
    pub diagnostics: std::collections::BTreeMap<String, f64>,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub qsmp_cli: &'static str,
    pub qsmp_core: &'static str,
}

impl Default for Versions {
    fn default() -> Self {
        Self {
            qsmp_cli: env!("CARGO_PKG_VERSION"),
            qsmp_core: qsmp::VERSION,
        }
    }
}

#[derive(Debug, Serialize)]
pub struct GridInfo {
    pub h: f64,
    pub horizon: f64,
    pub points: usize,
}

impl From<&qsmp::TimeGrid64> for GridInfo {
    fn from(g: &qsmp::TimeGrid64) -> Self {
        Self {
            h: g.step(),
            horizon: g.horizon(),
            points: g.len(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123456.789, 0.0] {
            assert_eq!(num(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(num(0.5), "5.0000000000000000e-1");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert_eq!(sibling(&p, "manifest"), dir.path().join("a.manifest.json"));
    }
}

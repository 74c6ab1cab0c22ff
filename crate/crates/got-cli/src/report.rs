//! Artifact staging. Commands assemble every output in memory and flush
//! them at the end: each file is written to a sibling temp path and
//! renamed into place, so readers never observe partial artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{config_err, CliResult};

/// A set of named artifacts, flushed together once the run has succeeded.
#[derive(Debug, Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn new() -> Self {
        Artifacts::default()
    }

    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn names(&self) -> Vec<&str> {
        self.files.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Write everything under `dir` atomically (temp file plus rename).
    pub fn flush(&self, dir: &Path) -> CliResult<Vec<PathBuf>> {
        fs::create_dir_all(dir)
            .map_err(|e| config_err(format!("cannot create {}: {}", dir.display(), e)))?;
        let mut written = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let path = dir.join(name);
            let tmp = dir.join(format!("{}.tmp", name));
            fs::write(&tmp, bytes)
                .map_err(|e| config_err(format!("cannot write {}: {}", tmp.display(), e)))?;
            fs::rename(&tmp, &path)
                .map_err(|e| config_err(format!("cannot rename to {}: {}", path.display(), e)))?;
            written.push(path);
        }
        Ok(written)
    }
}

/// Newline-terminated pretty JSON for the machine-readable summaries.
pub fn json_pretty<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("summary serializes");
    bytes.push(b'\n');
    bytes
}

/// Deterministic number formatting for CSV cells: shortest round-trip
/// decimal, switching to scientific notation away from ordinary magnitudes.
pub fn num(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let a = x.abs();
    if (1e-4..1e15).contains(&a) {
        format!("{}", x)
    } else {
        format!("{:e}", x)
    }
}

/// CSV builder: `# key: value` metadata lines, then a header row, then data.
#[derive(Debug)]
pub struct Csv {
    text: String,
}

impl Csv {
    pub fn new(command: &str) -> Self {
        Csv { text: format!("# command: {}\n", command) }
    }

    pub fn meta(&mut self, key: &str, value: impl std::fmt::Display) -> &mut Self {
        self.text.push_str(&format!("# {}: {}\n", key, value));
        self
    }

    pub fn header(&mut self, cols: &[&str]) -> &mut Self {
        self.text.push_str(&cols.join(","));
        self.text.push('\n');
        self
    }

    pub fn row(&mut self, cells: &[String]) -> &mut Self {
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
        self
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.text.into_bytes()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_layout_and_number_formatting() {
        let mut csv = Csv::new("demo");
        csv.meta("seed", 7)
            .header(&["a", "b"])
            .row(&[num(0.5), num(3e-9)])
            .row(&[num(0.0), num(12.0)]);
        let text = String::from_utf8(csv.into_bytes()).unwrap();
        assert_eq!(text, "# command: demo\n# seed: 7\na,b\n0.5,3e-9\n0,12\n");
    }

    #[test]
    fn artifacts_flush_atomically_into_fresh_dir() {
        let dir = std::env::temp_dir().join(format!("got-report-test-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let mut arts = Artifacts::new();
        arts.add("x.csv", b"hello\n".to_vec());
        let written = arts.flush(&dir).unwrap();
        assert_eq!(written.len(), 1);
        assert_eq!(std::fs::read(&written[0]).unwrap(), b"hello\n");
        assert!(std::fs::read_dir(&dir).unwrap().count() == 1, "temp file left behind");
        std::fs::remove_dir_all(&dir).unwrap();
    }
}

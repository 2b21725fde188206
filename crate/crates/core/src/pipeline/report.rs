//! CSV reports. Every file starts with a `#` provenance line followed by a
//! header row.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;
use crate::fsutil::atomic_write;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// `# tool=actsparse <version> seed=<seed> config_hash=<crc32 of config>`.
pub fn provenance_line(seed: u64, config: &str) -> String {
    format!("# tool=actsparse {TOOL_VERSION} seed={seed} config_hash={:08x}", crc32fast::hash(config.as_bytes()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Csv {
    provenance: String,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(provenance: String, header: &[&str]) -> Self {
        Csv { provenance, header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.provenance);
        let _ = writeln!(out, "{}", self.header.join(","));
        for row in &self.rows {
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.render().as_bytes())
    }
}

/// Formats a float for CSV output.
pub fn num(v: f64) -> String {
    format!("{v}")
}

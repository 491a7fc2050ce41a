//! The machine-readable run report written next to every command's outputs.
//!
//! The report is deterministic given the effective configuration and seed:
//! it carries no wall-clock timings and no worker count, so byte-identical
//! reruns produce byte-identical reports regardless of parallelism.

use dualhjb::CheckReport;
use serde::Serialize;
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// 64-bit FNV-1a hash, used to fingerprint the canonical serialized
/// configuration so reports from different scenarios are distinguishable.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const BASIS: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = BASIS;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(PRIME);
    }
    h
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckRow {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub file: String,
    pub bytes: u64,
}

/// Summary of one command invocation: what ran, against which scenario,
/// which checks passed, and which files were produced.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub version: String,
    pub subcommand: String,
    /// `fnv1a64:<16 hex digits>` over the canonical serialized configuration
    /// (after seed and default resolution); `none` for configuration-free
    /// commands.
    pub scenario_hash: String,
    pub seed: u64,
    pub checks: Vec<CheckRow>,
    pub diagnostics: Vec<String>,
    pub outputs: Vec<ManifestEntry>,
    pub passed: bool,
}

impl RunReport {
    pub fn new(subcommand: &str, scenario_hash: String, seed: u64) -> Self {
        RunReport {
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            scenario_hash,
            seed,
            checks: Vec::new(),
            diagnostics: Vec::new(),
            outputs: Vec::new(),
            passed: true,
        }
    }

    /// Fold a library check report into this run, prefixing each row's name.
    pub fn absorb(&mut self, prefix: &str, report: &CheckReport) {
        for c in &report.checks {
            self.checks.push(CheckRow {
                name: format!("{prefix}/{}", c.name),
                passed: c.passed,
                detail: c.detail.clone(),
            });
        }
    }

    pub fn push_check(&mut self, name: &str, passed: bool, detail: String) {
        self.checks.push(CheckRow { name: name.to_string(), passed, detail });
    }

    pub fn diag(&mut self, line: String) {
        self.diagnostics.push(line);
    }

    /// Record a produced file in the output manifest.
    pub fn manifest(&mut self, path: &Path) -> std::io::Result<()> {
        let bytes = std::fs::metadata(path)?.len();
        let file = path
            .file_name()
            .map(|f| f.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.outputs.push(ManifestEntry { file, bytes });
        Ok(())
    }

    /// Set the overall verdict from the accumulated checks.
    pub fn finalize(&mut self) {
        self.passed = self.checks.iter().all(|c| c.passed);
    }

    /// Write `run_report.json` into `out_dir` and record it in the manifest.
    pub fn write(&mut self, out_dir: &Path) -> std::io::Result<PathBuf> {
        self.finalize();
        let path = out_dir.join("run_report.json");
        // Manifest the report itself with a stable placeholder size of 0:
        // the true size depends on the serialized length of this very entry.
        self.outputs.push(ManifestEntry { file: "run_report.json".to_string(), bytes: 0 });
        let body = serde_json::to_string_pretty(self).expect("report serializes");
        let mut f = std::fs::File::create(&path)?;
        f.write_all(body.as_bytes())?;
        f.write_all(b"\n")?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv1a64_matches_published_vectors() {
        // Reference values of the canonical 64-bit FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn verdict_follows_checks() {
        let mut r = RunReport::new("probe", "none".to_string(), 7);
        r.push_check("ok", true, "fine".to_string());
        r.finalize();
        assert!(r.passed);
        r.push_check("bad", false, "broken".to_string());
        r.finalize();
        assert!(!r.passed);
    }
}

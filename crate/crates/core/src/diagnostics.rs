//! Small shared report types for validation and verification passes.
//!
//! Every validation routine in this crate returns a [`CheckReport`]: a flat
//! list of named pass/fail results with a human-readable detail line on
//! failure. Callers that need a hard gate use [`CheckReport::require`].

use std::fmt;

/// Outcome of a single named check.
#[derive(Debug, Clone)]
pub struct CheckResult {
    /// Short stable identifier, e.g. `"concavity"` or `"ellipticity_floor"`.
    pub name: String,
    pub passed: bool,
    /// First violation or supporting measurement, for logs and reports.
    pub detail: String,
}

impl CheckResult {
    pub fn pass(name: &str, detail: impl Into<String>) -> Self {
        CheckResult { name: name.into(), passed: true, detail: detail.into() }
    }

    pub fn fail(name: &str, detail: impl Into<String>) -> Self {
        CheckResult { name: name.into(), passed: false, detail: detail.into() }
    }

    pub fn from_bool(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        CheckResult { name: name.into(), passed, detail: detail.into() }
    }
}

/// A bundle of named checks; passes only if every member passes.
#[derive(Debug, Clone, Default)]
pub struct CheckReport {
    pub checks: Vec<CheckResult>,
}

impl CheckReport {
    pub fn new() -> Self {
        CheckReport { checks: Vec::new() }
    }

    pub fn push(&mut self, check: CheckResult) {
        self.checks.push(check);
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    /// All failing checks, for error messages.
    pub fn failures(&self) -> Vec<&CheckResult> {
        self.checks.iter().filter(|c| !c.passed).collect()
    }

    /// One-line summary such as `"5/6 checks passed"`.
    pub fn summary(&self) -> String {
        let total = self.checks.len();
        let ok = self.checks.iter().filter(|c| c.passed).count();
        format!("{ok}/{total} checks passed")
    }

    /// Errors with a compact description of every failing check.
    pub fn require(&self, context: &str) -> Result<(), String> {
        if self.passed() {
            return Ok(());
        }
        let mut msg = format!("{context}: validation failed ({})", self.summary());
        for f in self.failures() {
            msg.push_str(&format!("; {}: {}", f.name, f.detail));
        }
        Err(msg)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "[{}] {}: {}", if c.passed { "ok" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

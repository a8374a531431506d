//! Reporting helpers for the acceptance suite.

use std::fmt;
use std::time::Duration;

/// Outcome of one acceptance criterion.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub id: &'static str,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} [{}] {}: {} ({:.1}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.title,
            self.detail,
            self.elapsed.as_secs_f64()
        )
    }
}

/// One line per verdict followed by a tally.
pub fn summary(verdicts: &[Verdict]) -> String {
    let mut out: Vec<String> = verdicts.iter().map(ToString::to_string).collect();
    let passed = verdicts.iter().filter(|v| v.passed).count();
    out.push(format!("{passed}/{} criteria passed", verdicts.len()));
    out.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_start_with_the_verdict() {
        let v = Verdict { id: "1", title: "x", passed: false, detail: "y".into(), elapsed: Duration::from_millis(1500) };
        assert_eq!(v.to_string(), "FAIL [1] x: y (1.5s)");
        assert!(summary(&[v]).ends_with("0/1 criteria passed"));
    }
}

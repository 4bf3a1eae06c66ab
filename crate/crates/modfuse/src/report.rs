//! Experiment result reports: per-fold metrics, aggregate mean ± std,
//! per-term loss curves, and a text format that round-trips exactly.
//!
//! Floats are printed with Rust's shortest round-trip formatting, so
//! `parse(emit(report)) == report` holds bit-for-bit and two identical runs
//! emit byte-identical files. Wall-clock runtime is the one nondeterministic
//! field; [`MetricsReport::emit_deterministic`] omits it so result files can
//! be compared byte-for-byte across reruns (runtime belongs in the run
//! manifest instead).

use crate::error::{Error, Result};

// ── types ──

/// Held-out metrics for one fold, all in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FoldMetrics {
    pub acc: f64,
    pub auc: f64,
    pub f1: f64,
    pub spec: f64,
}

impl FoldMetrics {
    fn fields(&self) -> [f64; 4] {
        [self.acc, self.auc, self.f1, self.spec]
    }
}

/// One loss term's per-epoch trajectory within one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct LossCurve {
    pub fold: usize,
    /// Dotted term name, e.g. `teacher.ce` or `student.total`.
    pub term: String,
    pub values: Vec<f64>,
}

/// Aggregate of per-fold metrics: arithmetic mean and population std.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: FoldMetrics,
    pub std: FoldMetrics,
}

/// Full result record for one experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Short run identifier (letters, digits, `.`, `_`, `-`).
    pub label: String,
    pub folds: Vec<FoldMetrics>,
    pub curves: Vec<LossCurve>,
    /// Wall-clock runtime; excluded from the deterministic emission.
    pub runtime_secs: f64,
}

// ── aggregation ──

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        if self.label.is_empty()
            || !self.label.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
        {
            return Err(Error::Format(format!(
                "report label {:?} must be non-empty [A-Za-z0-9._-]",
                self.label
            )));
        }
        if self.folds.is_empty() {
            return Err(Error::Format("report needs at least one fold".into()));
        }
        for (i, fold) in self.folds.iter().enumerate() {
            for (name, v) in ["acc", "auc", "f1", "spec"].iter().zip(fold.fields()) {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Format(format!(
                        "fold {i} metric {name} = {v} outside [0, 1]"
                    )));
                }
            }
        }
        for curve in &self.curves {
            if curve.term.is_empty()
                || !curve.term.chars().all(|c| c.is_ascii_alphanumeric() || "._-".contains(c))
            {
                return Err(Error::Format(format!("curve term {:?} is invalid", curve.term)));
            }
            if curve.fold >= self.folds.len() {
                return Err(Error::Format(format!(
                    "curve {} references fold {} of {}",
                    curve.term,
                    curve.fold,
                    self.folds.len()
                )));
            }
            if curve.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format(format!(
                    "curve {} (fold {}) contains non-finite values",
                    curve.term, curve.fold
                )));
            }
        }
        if !self.runtime_secs.is_finite() || self.runtime_secs < 0.0 {
            return Err(Error::Format(format!("runtime {} is invalid", self.runtime_secs)));
        }
        Ok(())
    }

    /// Mean and population std of each metric over folds. The mean is the
    /// plain arithmetic mean of per-fold values, recomputable from the
    /// emitted table.
    pub fn aggregate(&self) -> Result<Aggregate> {
        if self.folds.is_empty() {
            return Err(Error::Contract("cannot aggregate an empty report".into()));
        }
        let collect = |f: fn(&FoldMetrics) -> f64| -> (f64, f64) {
            let values: Vec<f64> = self.folds.iter().map(f).collect();
            mean_std(&values)
        };
        let (acc_m, acc_s) = collect(|f| f.acc);
        let (auc_m, auc_s) = collect(|f| f.auc);
        let (f1_m, f1_s) = collect(|f| f.f1);
        let (spec_m, spec_s) = collect(|f| f.spec);
        Ok(Aggregate {
            mean: FoldMetrics { acc: acc_m, auc: auc_m, f1: f1_m, spec: spec_m },
            std: FoldMetrics { acc: acc_s, auc: auc_s, f1: f1_s, spec: spec_s },
        })
    }

    /// Deterministic emission: everything except wall-clock runtime.
    pub fn emit_deterministic(&self) -> Result<String> {
        self.validate()?;
        let agg = self.aggregate()?;
        let mut out = String::new();
        out.push_str("# metrics report v1\n");
        out.push_str(&format!("label={}\n", self.label));
        out.push_str("fold,acc,auc,f1,spec\n");
        for (i, fold) in self.folds.iter().enumerate() {
            out.push_str(&format!(
                "{i},{},{},{},{}\n",
                fold.acc, fold.auc, fold.f1, fold.spec
            ));
        }
        for (name, row) in [("mean", agg.mean), ("std", agg.std)] {
            out.push_str(&format!(
                "{name},{},{},{},{}\n",
                row.acc, row.auc, row.f1, row.spec
            ));
        }
        for curve in &self.curves {
            out.push_str(&format!("curve,{},{}", curve.fold, curve.term));
            for v in &curve.values {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Full emission including runtime; round-trips through [`Self::parse`].
    pub fn emit(&self) -> Result<String> {
        let mut out = self.emit_deterministic()?;
        out.push_str(&format!("runtime_secs={}\n", self.runtime_secs));
        Ok(out)
    }

    /// Parses text produced by [`Self::emit`] (or the deterministic variant,
    /// in which case runtime is 0). The embedded mean/std rows are verified
    /// against a recomputation within 1e-12.
    pub fn parse(text: &str) -> Result<MetricsReport> {
        let mut lines = text.lines().peekable();
        let bad = |detail: String| Error::Format(format!("metrics report: {detail}"));
        if lines.next() != Some("# metrics report v1") {
            return Err(bad("missing version header".into()));
        }
        let label = lines
            .next()
            .and_then(|l| l.strip_prefix("label="))
            .ok_or_else(|| bad("missing label line".into()))?
            .to_string();
        if lines.next() != Some("fold,acc,auc,f1,spec") {
            return Err(bad("missing fold table header".into()));
        }

        let parse_f64 = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| bad(format!("bad float {s:?}")))
        };
        let parse_row = |line: &str, tag: &str| -> Result<FoldMetrics> {
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 || parts[0] != tag {
                return Err(bad(format!("expected `{tag},acc,auc,f1,spec`, got {line:?}")));
            }
            Ok(FoldMetrics {
                acc: parse_f64(parts[1])?,
                auc: parse_f64(parts[2])?,
                f1: parse_f64(parts[3])?,
                spec: parse_f64(parts[4])?,
            })
        };

        let mut folds = Vec::new();
        loop {
            let line = *lines.peek().ok_or_else(|| bad("truncated fold table".into()))?;
            if line.starts_with("mean,") {
                break;
            }
            let line = lines.next().expect("peeked");
            folds.push(parse_row(line, &folds.len().to_string())?);
        }
        let mean = parse_row(lines.next().ok_or_else(|| bad("missing mean row".into()))?, "mean")?;
        let std = parse_row(lines.next().ok_or_else(|| bad("missing std row".into()))?, "std")?;

        let mut curves = Vec::new();
        let mut runtime_secs = 0.0;
        for line in lines {
            if let Some(rest) = line.strip_prefix("curve,") {
                let mut parts = rest.split(',');
                let fold = parts
                    .next()
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or_else(|| bad(format!("bad curve fold in {line:?}")))?;
                let term = parts
                    .next()
                    .ok_or_else(|| bad(format!("curve line {line:?} missing term")))?
                    .to_string();
                let values = parts.map(parse_f64).collect::<Result<Vec<f64>>>()?;
                curves.push(LossCurve { fold, term, values });
            } else if let Some(rest) = line.strip_prefix("runtime_secs=") {
                runtime_secs = parse_f64(rest)?;
            } else {
                return Err(bad(format!("unrecognized line {line:?}")));
            }
        }

        let report = MetricsReport { label, folds, curves, runtime_secs };
        report.validate()?;
        let agg = report.aggregate()?;
        for (name, stored, computed) in
            [("mean", mean, agg.mean), ("std", std, agg.std)]
        {
            for (stored_v, computed_v) in stored.fields().iter().zip(computed.fields()) {
                if (stored_v - computed_v).abs() > 1e-12 {
                    return Err(bad(format!(
                        "{name} row disagrees with per-fold values ({stored_v} vs {computed_v})"
                    )));
                }
            }
        }
        Ok(report)
    }
}

// ── tests ──

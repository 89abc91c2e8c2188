//! CSV rows per logging interval and JSONL summaries per trial.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::Serialize;

use crate::config::RunConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CSV_COLUMNS: [&str; 8] = ["step", "trial", "estimator", "objective", "ln_var", "lambda", "eta_mean", "wall_ms"];

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub step: u64,
    pub trial: usize,
    pub estimator: String,
    /// Mean hard-sample objective over the interval.
    pub objective: f64,
    pub ln_var: f64,
    /// NaN for estimators without a temperature.
    pub lambda: f64,
    /// NaN for estimators without control-variate scalings.
    pub eta_mean: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub estimator: String,
    pub status: TrialStatus,
    pub steps: u64,
    pub final_objective: f64,
    pub best_objective: f64,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Task-specific values such as the exact toy loss or held-out bounds.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

/// C's `%.10g`.
pub fn fmt_g10(x: f64) -> String {
    fmt_g(x, 10)
}

pub fn fmt_g(x: f64, precision: usize) -> String {
    let p = precision.max(1);
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{:.*e}", p - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= p as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa), exp.abs())
    } else {
        let decimals = (p as i32 - 1 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// `#`-prefixed lines holding the library version and the complete config.
pub fn config_header(config: &RunConfig) -> String {
    let mut out = format!("# rebar-bench {VERSION}\n# config_hash = {}\n", config.hash());
    for line in config.to_toml().lines() {
        out.push_str("# ");
        out.push_str(line);
        out.push('\n');
    }
    out
}

pub fn write_csv<W: Write>(mut w: W, config: &RunConfig, records: &[RunRecord]) -> io::Result<()> {
    w.write_all(config_header(config).as_bytes())?;
    writeln!(w, "{}", CSV_COLUMNS.join(","))?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.trial,
            r.estimator,
            fmt_g10(r.objective),
            fmt_g10(r.ln_var),
            fmt_g10(r.lambda),
            fmt_g10(r.eta_mean),
            fmt_g10(r.wall_ms)
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct JsonHeader<'a> {
    kind: &'static str,
    version: &'static str,
    config_hash: String,
    config: &'a RunConfig,
}

#[derive(Serialize)]
struct JsonTrial<'a> {
    kind: &'static str,
    #[serde(flatten)]
    summary: &'a TrialSummary,
}

/// First line echoes the config; then one object per trial. Non-finite numbers become `null`.
pub fn write_jsonl<W: Write>(mut w: W, config: &RunConfig, summaries: &[TrialSummary]) -> io::Result<()> {
    let header = JsonHeader {
        kind: "header",
        version: VERSION,
        config_hash: config.hash(),
        config,
    };
    serde_json::to_writer(&mut w, &header)?;
    writeln!(w)?;
    for s in summaries {
        serde_json::to_writer(&mut w, &JsonTrial { kind: "trial", summary: s })?;
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Task;

    #[test]
    fn g_formatting_matches_c() {
        let cases = [
            (0.0, "0"),
            (1.0, "1"),
            (0.2025, "0.2025"),
            (-1.5e-7, "-1.5e-07"),
            (1e-4, "0.0001"),
            (123456789012.0, "1.23456789e+11"),
            (1234567890.0, "1234567890"),
            (12345678901.0, "1.23456789e+10"),
            (1.0 / 3.0, "0.3333333333"),
            (2.0 / 3.0 * 1e5, "66666.66667"),
            (9.9999999999, "10"),
            (f64::NAN, "nan"),
            (f64::NEG_INFINITY, "-inf"),
        ];
        for (x, want) in cases {
            assert_eq!(fmt_g10(x), want, "{x}");
        }
    }

    #[test]
    fn csv_layout() {
        let cfg = RunConfig::new(Task::Toy, &["rebar"]);
        let rec = RunRecord {
            step: 100,
            trial: 0,
            estimator: "rebar".into(),
            objective: 0.25,
            ln_var: -3.0,
            lambda: 0.1,
            eta_mean: 1.0,
            wall_ms: 0.0,
        };
        let mut buf = Vec::new();
        write_csv(&mut buf, &cfg, &[rec]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(&format!("# rebar-bench {VERSION}\n")));
        assert!(text.contains("# task = \"toy\""));
        let body: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body, ["step,trial,estimator,objective,ln_var,lambda,eta_mean,wall_ms", "100,0,rebar,0.25,-3,0.1,1,0"]);
    }

    #[test]
    fn jsonl_echoes_config() {
        let cfg = RunConfig::new(Task::Toy, &["rebar"]);
        let s = TrialSummary {
            trial: 0,
            estimator: "rebar".into(),
            status: TrialStatus::Ok,
            steps: 10,
            final_objective: 0.2,
            best_objective: f64::NAN,
            config_hash: cfg.hash(),
            error: None,
            extra: BTreeMap::new(),
        };
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &cfg, &[s]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines[0]["config"]["task"], "toy");
        assert_eq!(lines[1]["config_hash"], cfg.hash());
        assert!(lines[1]["best_objective"].is_null());
    }
}

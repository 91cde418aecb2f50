//! Report serialization: CSV, JSON, and aligned text tables.
//!
//! CSV and JSON outputs are deterministic functions of the report rows
//! and metadata (wall time excluded), so rerunning an evaluation with
//! the same seed produces byte-identical files. The text rendering is
//! for humans and includes timing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::grid::{EvalReport, EvalRow};
use crate::error::AdvoxError;
use crate::Result;

/// Bumped whenever the row schema or nesting changes.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// CSV form: a schema comment line, a header, one row per cell.
pub fn csv_string(report: &EvalReport) -> Result<String> {
    let mut out = format!("# advox-eval schema {REPORT_SCHEMA_VERSION}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for row in &report.rows {
            w.serialize(row)
                .map_err(|e| AdvoxError::Eval(format!("csv serialization: {e}")))?;
        }
        w.flush().map_err(|e| AdvoxError::Eval(format!("csv flush: {e}")))?;
    }
    String::from_utf8(out).map_err(|e| AdvoxError::Eval(format!("csv encoding: {e}")))
}

pub fn write_csv(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, csv_string(report)?)?;
    Ok(())
}

#[derive(Serialize)]
struct RowJson<'a> {
    attack: &'a str,
    metric: &'a str,
    value: f64,
    n_utterances: usize,
    seed: u64,
}

#[derive(Serialize)]
struct ReportJson<'a> {
    schema_version: u32,
    metadata: &'a super::grid::EvalMetadata,
    defenses: BTreeMap<&'a str, Vec<RowJson<'a>>>,
}

/// JSON form: metadata plus rows nested under their defense id.
pub fn json_string(report: &EvalReport) -> Result<String> {
    let mut defenses: BTreeMap<&str, Vec<RowJson<'_>>> = BTreeMap::new();
    for row in &report.rows {
        defenses.entry(row.defense.as_str()).or_default().push(RowJson {
            attack: &row.attack,
            metric: &row.metric,
            value: row.value,
            n_utterances: row.n_utterances,
            seed: row.seed,
        });
    }
    let doc = ReportJson {
        schema_version: REPORT_SCHEMA_VERSION,
        metadata: &report.metadata,
        defenses,
    };
    let mut s = serde_json::to_string_pretty(&doc)
        .map_err(|e| AdvoxError::Eval(format!("json serialization: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, json_string(report)?)?;
    Ok(())
}

fn ordered_unique<'a>(it: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen = Vec::new();
    for v in it {
        if !seen.contains(&v) {
            seen.push(v);
        }
    }
    seen
}

/// Aligned tables, one per metric: attacks down the side, defenses
/// across the top, in first-appearance order.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    let metrics = ordered_unique(report.rows.iter().map(|r| r.metric.as_str()));
    for metric in metrics {
        let rows: Vec<&EvalRow> = report.rows.iter().filter(|r| r.metric == metric).collect();
        let defenses = ordered_unique(rows.iter().map(|r| r.defense.as_str()));
        let attacks = ordered_unique(rows.iter().map(|r| r.attack.as_str()));
        let ns: Vec<usize> = rows.iter().map(|r| r.n_utterances).collect();
        let uniform_n = ns.windows(2).all(|w| w[0] == w[1]);

        let _ = write!(out, "== {metric}");
        if uniform_n {
            let _ = write!(out, " over {} utterances", ns[0]);
        }
        let _ = writeln!(out, " ==");

        let label_w = attacks
            .iter()
            .map(|a| a.len())
            .chain(["attack".len()])
            .max()
            .unwrap_or(6);
        let col_ws: Vec<usize> = defenses.iter().map(|d| d.len().max(7)).collect();

        let _ = write!(out, "{:label_w$}", "attack");
        for (d, w) in defenses.iter().zip(&col_ws) {
            let _ = write!(out, "  {d:>w$}");
        }
        out.push('\n');
        for attack in &attacks {
            let _ = write!(out, "{attack:label_w$}");
            for (d, w) in defenses.iter().zip(&col_ws) {
                match rows.iter().find(|r| r.defense == *d && r.attack == *attack) {
                    Some(r) => {
                        let _ = write!(out, "  {:>w$.2}", r.value);
                    }
                    None => {
                        let _ = write!(out, "  {:>w$}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out.push('\n');
    }
    let m = &report.metadata;
    let _ = writeln!(
        out,
        "model {}  toolkit {}  seed {}  wall {:.1}s",
        m.model_hash, m.toolkit_version, m.seed, m.wall_time_s
    );
    out
}

pub fn write_text(report: &EvalReport, path: &Path) -> Result<()> {
    fs::write(path, render_text(report))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::grid::EvalMetadata;

    fn sample_report() -> EvalReport {
        let row = |defense: &str, attack: &str, value: f64| EvalRow {
            defense: defense.into(),
            attack: attack.into(),
            metric: "accuracy_pct".into(),
            value,
            n_utterances: 12,
            seed: 7,
        };
        EvalReport {
            rows: vec![
                row("none", "clean", 100.0),
                row("none", "fgsm_eps0.01", 40.0),
                row("smoothing", "clean", 95.0),
                row("smoothing", "fgsm_eps0.01", 80.0),
            ],
            metadata: EvalMetadata {
                model_hash: "cafe01".into(),
                toolkit_version: "0.1.0".into(),
                seed: 7,
                wall_time_s: 1.25,
            },
        }
    }

    #[test]
    fn csv_has_schema_header_and_one_line_per_row() {
        let s = csv_string(&sample_report()).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "# advox-eval schema 1");
        assert_eq!(lines[1], "defense,attack,metric,value,n_utterances,seed");
        assert_eq!(lines.len(), 2 + 4);
        assert!(lines[2].starts_with("none,clean,accuracy_pct,100"));
    }

    #[test]
    fn json_nests_rows_by_defense_and_excludes_wall_time() {
        let s = json_string(&sample_report()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["schema_version"], 1);
        assert_eq!(v["defenses"]["none"].as_array().unwrap().len(), 2);
        assert_eq!(v["defenses"]["smoothing"][1]["value"], 80.0);
        assert!(v["metadata"].get("wall_time_s").is_none());
        assert_eq!(v["metadata"]["model_hash"], "cafe01");
    }

    #[test]
    fn serialized_forms_ignore_wall_time_changes() {
        let a = sample_report();
        let mut b = sample_report();
        b.metadata.wall_time_s = 99.0;
        assert_eq!(csv_string(&a).unwrap(), csv_string(&b).unwrap());
        assert_eq!(json_string(&a).unwrap(), json_string(&b).unwrap());
    }

    #[test]
    fn text_render_pivots_attacks_against_defenses() {
        let text = render_text(&sample_report());
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "== accuracy_pct over 12 utterances ==");
        let header = lines.next().unwrap();
        assert!(header.contains("none") && header.contains("smoothing"));
        let clean = lines.next().unwrap();
        assert!(clean.starts_with("clean") && clean.contains("100.00"));
        let fgsm = lines.next().unwrap();
        assert!(fgsm.starts_with("fgsm_eps0.01"));
        assert!(fgsm.contains("40.00") && fgsm.contains("80.00"));
        assert!(text.contains("seed 7"));
    }
}

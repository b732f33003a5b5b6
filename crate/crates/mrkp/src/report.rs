//! Metrics report rendering: a plain text table and JSON.

use std::fmt::Write as _;

use serde_json::{json, Map, Value};

use mrkp_core::metrics::MetricsReport;

fn opt(v: Option<f64>) -> Value {
    v.map_or(Value::Null, |x| json!(x))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

pub fn to_json(report: &MetricsReport, run: Option<&str>) -> Value {
    let mut cats = Map::new();
    for (name, s) in &report.per_category {
        cats.insert(
            name.clone(),
            json!({
                "das": opt(s.das),
                "das_undefined": s.das_undefined,
                "miou": opt(s.miou),
                "part_correspondence": opt(s.part_corr),
            }),
        );
    }
    json!({
        "run_id": run,
        "per_category": cats,
        "mean": {
            "das": opt(report.mean_das()),
            "miou": opt(report.mean_miou()),
            "part_correspondence": opt(report.mean_part_corr()),
        },
        "repeatability": report.repeatability_curve.iter().map(|(s, r)| json!([s, r])).collect::<Vec<_>>(),
        "protocol": {
            "miou_tau": report.miou_tau,
            "repeatability_threshold": report.repeatability_threshold,
            "das_references": report.das_references,
            "part_pairs": report.part_pairs,
        },
    })
}

pub fn to_text(report: &MetricsReport, run: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(run) = run {
        let _ = writeln!(out, "# run {run}");
    }
    let width = report.per_category.keys().map(|k| k.len()).max().unwrap_or(0).max(8);
    let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}", "category", "das", "miou", "part");
    for (name, s) in &report.per_category {
        let _ = writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}", name, cell(s.das), cell(s.miou), cell(s.part_corr));
    }
    let _ = writeln!(
        out,
        "{:<width$}  {:>8}  {:>8}  {:>8}",
        "mean",
        cell(report.mean_das()),
        cell(report.mean_miou()),
        cell(report.mean_part_corr())
    );
    if !report.repeatability_curve.is_empty() {
        out.push('\n');
        let _ = writeln!(out, "sigma     repeatability");
        for (s, r) in &report.repeatability_curve {
            let _ = writeln!(out, "{s:<8}  {r:.4}");
        }
    }
    out
}

/// `sigma ratio` lines, ready for plotting.
pub fn curve_text(curve: &[(f64, f64)], run: Option<&str>) -> String {
    let mut out = String::new();
    if let Some(run) = run {
        let _ = writeln!(out, "# run {run}");
    }
    out.push_str("# sigma ratio\n");
    for (s, r) in curve {
        let _ = writeln!(out, "{s} {r}");
    }
    out
}

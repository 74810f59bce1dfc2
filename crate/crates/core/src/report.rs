//! Rendering of sweep results: text tables, CSV, and SVG line plots.
//!
//! [`write_report`] reads `record.json` files and writes everything under
//! `<dir>/report/`; run directories are never modified.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::checkpoint::write_atomic;
use crate::error::{contract, Result};
use crate::pipeline::{aggregate_records, load_records, CellKey, ExperimentPlan, RunRecord};
use crate::stats::{AggregateReport, Interval};

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

fn interval(iv: &Interval) -> String {
    format!("{} ({:.1}-{:.1}%)", pct(iv.point), 100.0 * iv.lo, 100.0 * iv.hi)
}

/// Aggregate table, per-task table, and notes on missing or failed cells.
pub fn render_text(report: &AggregateReport, notes: &[String]) -> String {
    let mut out = String::new();
    let baseline = report.baseline.as_deref().unwrap_or("-");
    let p_header = format!("P(improvement vs {baseline})");
    let level = (report.bootstrap.level * 100.0).round();
    let _ = writeln!(out, "Aggregate final success rate ({level}% CI)");
    let _ = writeln!(out, "{:<22} {:<22} {:<22} {}", "method", "IQM", "mean", p_header);
    for m in &report.methods {
        let p = m.prob_improvement.as_ref().map_or_else(|| "-".to_owned(), interval);
        let _ = writeln!(out, "{:<22} {:<22} {:<22} {}", m.method, interval(&m.iqm), interval(&m.mean), p);
    }

    let _ = writeln!(out, "\nPer-task success rate, mean ± std over seeds (%)");
    let _ = write!(out, "{:<16}", "task");
    for m in &report.methods {
        let _ = write!(out, " {:<22}", m.method);
    }
    out.push('\n');
    let tasks = report.methods.first().map(|m| m.per_task.len()).unwrap_or(0);
    for t in 0..tasks {
        let _ = write!(out, "{:<16}", report.methods[0].per_task[t].task);
        for m in &report.methods {
            let s = &m.per_task[t];
            let cell = format!("{:.1} ± {:.1} (n={})", 100.0 * s.mean, 100.0 * s.std, s.seeds);
            let _ = write!(out, " {cell:<22}");
        }
        out.push('\n');
    }

    let _ = writeln!(
        out,
        "\nIntervals: percentile bootstrap, {} resamples, seeds resampled within each task \
         (and within each method for P(improvement)).",
        report.bootstrap.resamples
    );
    for note in notes {
        let _ = writeln!(out, "{note}");
    }
    out
}

/// `tau,<method>...` rows of the performance profiles.
pub fn profile_csv(report: &AggregateReport) -> String {
    let mut out = String::from("tau");
    for m in &report.methods {
        out.push(',');
        out.push_str(&m.method);
    }
    out.push('\n');
    for (i, tau) in report.taus.iter().enumerate() {
        let _ = write!(out, "{tau}");
        for m in &report.methods {
            let _ = write!(out, ",{}", m.profile[i]);
        }
        out.push('\n');
    }
    out
}

/// One polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// A minimal SVG line chart. Non-finite points are skipped.
pub fn line_plot_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const L: f64 = 70.0;
    const R: f64 = 150.0;
    const T: f64 = 40.0;
    const B: f64 = 50.0;
    let finite = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in finite {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        let pad = if y0 == 0.0 { 1.0 } else { y0.abs() * 0.1 };
        y0 -= pad;
        y1 += pad;
    }
    let px = |x: f64| L + (x - x0) / (x1 - x0) * (W - L - R);
    let py = |y: f64| H - B - (y - y0) / (y1 - y0) * (H - T - B);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, (L + W - R) / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<path d="M{L} {T} V{} H{}" fill="none" stroke="black"/>"#,
        H - B,
        W - R
    );
    for (v, x) in [(x0, px(x0)), (x1, px(x1))] {
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{}" text-anchor="middle">{}</text>"#, H - B + 16.0, fmt_tick(v));
    }
    for (v, y) in [(y0, py(y0)), (y1, py(y1))] {
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, L - 6.0, y + 4.0, fmt_tick(v));
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (L + W - R) / 2.0, H - 12.0, escape(x_label));
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        (T + H - B) / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        if !pts.is_empty() {
            let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        }
        let ly = T + 14.0 + 16.0 * i as f64;
        let _ = writeln!(svg, r#"<line x1="{0}" y1="{1}" x2="{2}" y2="{1}" stroke="{color}" stroke-width="2"/>"#, W - R + 10.0, ly - 4.0, W - R + 30.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{ly}">{}</text>"#, W - R + 34.0, escape(&s.label));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Performance profiles drawn as step functions.
pub fn profile_svg(report: &AggregateReport) -> String {
    let series: Vec<Series> = report
        .methods
        .iter()
        .map(|m| {
            let mut points = Vec::new();
            for (i, (&tau, &f)) in report.taus.iter().zip(&m.profile).enumerate() {
                points.push((tau, f));
                if let Some(&next) = report.taus.get(i + 1) {
                    points.push((next, f));
                }
            }
            Series { label: m.method.clone(), points }
        })
        .collect();
    line_plot_svg("Performance profile", "success-rate threshold τ", "fraction of runs above τ", &series)
}

/// Notes for cells in the plan that have no completed record.
pub fn missing_cell_notes(plan: Option<&ExperimentPlan>, records: &[RunRecord]) -> Vec<String> {
    let mut notes = Vec::new();
    for r in records.iter().filter(|r| !r.is_completed()) {
        notes.push(format!("failed: {} ({})", r.key(), r.error.as_deref().unwrap_or("unknown error")));
    }
    if let Some(plan) = plan {
        let have: std::collections::BTreeSet<CellKey> = records.iter().map(RunRecord::key).collect();
        for key in plan.cells() {
            if !have.contains(&key) {
                notes.push(format!("missing: {key} (not finished)"));
            }
        }
    }
    notes
}

/// Files written by [`write_report`].
#[derive(Debug, Clone)]
pub struct ReportOutput {
    pub text: String,
    pub files: Vec<PathBuf>,
}

/// Aggregates `dir`'s records and writes tables and plots to `dir/report/`.
pub fn write_report(dir: &Path, baseline: Option<&str>) -> Result<ReportOutput> {
    let records = load_records(dir)?;
    if records.is_empty() {
        return Err(contract(format!("no runs found in {}", dir.display())));
    }
    let plan_path = dir.join("plan.json");
    let plan = plan_path.exists().then(|| ExperimentPlan::load(&plan_path)).transpose()?;
    let bootstrap = plan.as_ref().map(|p| p.bootstrap).unwrap_or_default();
    let notes = missing_cell_notes(plan.as_ref(), &records);
    if records.iter().all(|r| !r.is_completed()) {
        return Err(contract(format!("no completed runs in {}\n{}", dir.display(), notes.join("\n"))));
    }
    let report = aggregate_records(&records, baseline, &bootstrap)?;
    let text = render_text(&report, &notes);

    let out = dir.join("report");
    let mut files = Vec::new();
    let mut put = |name: String, body: &str| -> Result<()> {
        let path = out.join(name);
        write_atomic(&path, body.as_bytes())?;
        files.push(path);
        Ok(())
    };
    put("summary.txt".into(), &text)?;
    put("aggregate.json".into(), &serde_json::to_string_pretty(&report)?)?;
    put("profile.csv".into(), &profile_csv(&report))?;
    put("profile.svg".into(), &profile_svg(&report))?;

    let mut groups: std::collections::BTreeMap<(String, String), Vec<&RunRecord>> = Default::default();
    for r in records.iter().filter(|r| r.is_completed()) {
        groups.entry((r.task.to_string(), r.method.to_string())).or_default().push(r);
    }
    for ((task, method), runs) in groups {
        let prefix = format!("plots/{task}/{method}");
        let per_seed = |f: &dyn Fn(&RunRecord) -> Vec<(f64, f64)>| -> Vec<Series> {
            runs.iter().map(|r| Series { label: format!("seed {}", r.seed), points: f(r) }).collect()
        };
        let returns = per_seed(&|r| {
            r.ppo_curve
                .iter()
                .map(|u| (u.steps as f64, u.mean_return))
                .chain(r.es_curve.iter().map(|g| ((r.ppo_steps + g.steps) as f64, g.mean_return)))
                .collect()
        });
        put(format!("{prefix}/return.svg"), &line_plot_svg(&format!("{task} / {method}: training return"), "environment steps", "mean episode return", &returns))?;
        if runs.iter().any(|r| !r.es_curve.is_empty()) {
            let sigma = per_seed(&|r| r.es_curve.iter().map(|g| (g.generation as f64, g.sigma_es)).collect());
            put(format!("{prefix}/sigma.svg"), &line_plot_svg(&format!("{task} / {method}: σ_ES"), "generation", "σ_ES", &sigma))?;
            let g_norm = per_seed(&|r| r.es_curve.iter().map(|g| (g.generation as f64, g.g_norm)).collect());
            put(format!("{prefix}/g_norm.svg"), &line_plot_svg(&format!("{task} / {method}: ‖g‖"), "generation", "‖g‖", &g_norm))?;
        }
    }
    Ok(ReportOutput { text, files })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{aggregate, BootstrapConfig, ScoreMatrix};

    fn sample_report() -> AggregateReport {
        let mut m = ScoreMatrix::new(vec!["peg-insert-1d".into()]);
        m.insert("ppo_only", vec![vec![0.5, 0.6, 0.7]]).unwrap();
        m.insert("ppo_then_gaussian_es", vec![vec![0.4, 0.9, 0.8]]).unwrap();
        m.insert("ppo_then_tdes", vec![vec![0.8, 0.8, 0.9]]).unwrap();
        aggregate(&m, Some("ppo_only"), &BootstrapConfig { resamples: 200, level: 0.95, seed: 1 }).unwrap()
    }

    #[test]
    fn table_has_one_row_per_method() {
        let text = render_text(&sample_report(), &["missing: x".into()]);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[1].split_whitespace().take(3).collect::<Vec<_>>(), ["method", "IQM", "mean"]);
        assert!(lines[1].ends_with("P(improvement vs ppo_only)"));
        assert!(lines[2].starts_with("ppo_only ") && lines[2].trim_end().ends_with('-'));
        assert!(lines[3].starts_with("ppo_then_gaussian_es"));
        assert!(lines[4].starts_with("ppo_then_tdes"));
        assert!(text.contains("83.3 ± 5.8 (n=3)"));
        assert!(text.ends_with("missing: x\n"));
    }

    #[test]
    fn profile_outputs() {
        let rep = sample_report();
        let csv = profile_csv(&rep);
        assert_eq!(csv.lines().next(), Some("tau,ppo_only,ppo_then_gaussian_es,ppo_then_tdes"));
        assert_eq!(csv.lines().count(), 1 + rep.taus.len());
        let svg = profile_svg(&rep);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 3);
    }

    #[test]
    fn plot_survives_degenerate_data() {
        let s = [
            Series { label: "flat".into(), points: vec![(0.0, 2.0), (1.0, 2.0)] },
            Series { label: "nan <&>".into(), points: vec![(0.0, f64::NAN)] },
        ];
        let svg = line_plot_svg("t", "x", "y", &s);
        assert!(!svg.contains("NaN"));
        assert!(svg.contains("nan &lt;&amp;&gt;"));
        assert_eq!(svg.matches("<polyline").count(), 1);
        let empty = line_plot_svg("t", "x", "y", &[]);
        assert!(empty.contains("</svg>"));
    }

    #[test]
    fn empty_directory_reports_no_runs() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_report(dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("no runs found"));
    }
}

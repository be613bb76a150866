//! Group means, top-k object rankings, and their text and HTML renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;

use serde::Serialize;
use streetgaze_core::segmentation::RankedObject;
use streetgaze_core::{class_name, mean_over_images, top_k, Group, MetricKind, ObjectVector, NUM_CLASSES};

use crate::error::CliResult;
use crate::manifest::PipelineManifest;
use crate::pipeline::{read_compare_summary, read_groups, read_metric_tables, CompareSummary, Layout};

/// Images averaged together in one report column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    All,
    Safe,
    Unsafe,
}

impl Scope {
    pub const ALL: [Scope; 3] = [Scope::All, Scope::Safe, Scope::Unsafe];

    pub fn as_str(self) -> &'static str {
        match self {
            Scope::All => "all",
            Scope::Safe => "safe",
            Scope::Unsafe => "unsafe",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScopeMean {
    pub scope: Scope,
    pub kind: MetricKind,
    pub images: usize,
    /// `None` when no image in the scope had a row for this metric.
    pub mean: Option<ObjectVector>,
    pub top: Vec<RankedObject>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub group_counts: BTreeMap<&'static str, usize>,
    pub means: Vec<ScopeMean>,
    pub similarity: Option<CompareSummary>,
}

/// Averages every metric table over all images and over the safe and unsafe
/// groups. Ambiguous images only count towards `all`.
pub fn build_report(m: &PipelineManifest) -> CliResult<Report> {
    let tables = read_metric_tables(m)?;
    let groups = read_groups(m)?;
    let group_of: BTreeMap<&str, Group> = groups.iter().map(|g| (g.image_id.as_str(), g.group)).collect();
    let mut group_counts = BTreeMap::new();
    for g in [Group::Safe, Group::Unsafe, Group::Ambiguous] {
        group_counts.insert(g.as_str(), groups.iter().filter(|l| l.group == g).count());
    }

    let mut means = Vec::new();
    for scope in Scope::ALL {
        for (kind, rows) in &tables {
            let members: Vec<ObjectVector> = rows
                .iter()
                .filter(|(id, _)| match scope {
                    Scope::All => true,
                    Scope::Safe => group_of.get(id.as_str()) == Some(&Group::Safe),
                    Scope::Unsafe => group_of.get(id.as_str()) == Some(&Group::Unsafe),
                })
                .map(|(_, v)| v.clone())
                .collect();
            let mean = if members.is_empty() {
                None
            } else {
                Some(mean_over_images(&members)?)
            };
            let top = mean.as_ref().map(|v| top_k(v, m.params.top_k)).unwrap_or_default();
            means.push(ScopeMean {
                scope,
                kind: *kind,
                images: members.len(),
                mean,
                top,
            });
        }
    }
    Ok(Report {
        group_counts,
        means,
        similarity: read_compare_summary(m)?,
    })
}

/// Writes `report.txt`, `index.html` and `means.csv` under `report/`.
pub fn stage_report(m: &PipelineManifest) -> CliResult<Report> {
    let report = build_report(m)?;
    let dir = Layout::new(&m.output_dir).report_dir();
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("report.txt"), render_text(&report))?;
    fs::write(dir.join("index.html"), render_html(&report))?;
    let mut csv = fs::File::create(dir.join("means.csv"))?;
    csv.write_all(render_means_csv(&report).as_bytes())?;
    Ok(report)
}

pub fn render_means_csv(report: &Report) -> String {
    let mut out = String::from("scope,kind,images");
    for class in 0..NUM_CLASSES {
        let _ = write!(out, ",{}", class_name(class).unwrap_or("?"));
    }
    out.push('\n');
    for s in &report.means {
        let _ = write!(out, "{},{},{}", s.scope.as_str(), s.kind, s.images);
        for class in 0..NUM_CLASSES {
            match s.mean.as_ref().and_then(|v| v.get(class)) {
                Some(v) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

pub fn render_text(report: &Report) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "Image groups");
    for (g, n) in &report.group_counts {
        let _ = writeln!(out, "  {g:<10} {n}");
    }
    for s in &report.means {
        let _ = writeln!(out, "\n{} / {} ({} images)", s.kind, s.scope.as_str(), s.images);
        if s.top.is_empty() {
            let _ = writeln!(out, "  (no data)");
        }
        for (rank, obj) in s.top.iter().enumerate() {
            let _ = writeln!(
                out,
                "  {:>2}. {:<20} {:>3} {:.6}",
                rank + 1,
                obj.class_name,
                obj.class_index,
                obj.value
            );
        }
    }
    if let Some(report) = report.similarity.as_ref().and_then(|s| s.report.as_ref()) {
        let _ = writeln!(out, "\nHuman vs CAM similarity");
        out.push_str(&report.render_table());
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn bar_chart(s: &ScopeMean) -> String {
    const ROW: usize = 22;
    const LABEL: usize = 150;
    const BAR: f64 = 300.0;
    let max = s.top.iter().map(|o| o.value.abs()).fold(0.0, f64::max);
    let height = ROW * s.top.len().max(1);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{height}\" role=\"img\">",
        LABEL + BAR as usize + 90
    );
    for (i, obj) in s.top.iter().enumerate() {
        let y = i * ROW;
        let w = if max > 0.0 { obj.value.abs() / max * BAR } else { 0.0 };
        let _ = write!(
            svg,
            "<text x=\"0\" y=\"{}\" font-size=\"13\">{}</text>\
             <rect x=\"{LABEL}\" y=\"{}\" width=\"{w:.1}\" height=\"16\" fill=\"#c0392b\"/>\
             <text x=\"{:.1}\" y=\"{}\" font-size=\"12\">{:.4}</text>",
            y + 15,
            escape(obj.class_name),
            y + 2,
            LABEL as f64 + w + 4.0,
            y + 15,
            obj.value
        );
    }
    svg.push_str("</svg>");
    svg
}

pub fn render_html(report: &Report) -> String {
    let mut out = String::from(
        "<!DOCTYPE html>\n<html lang=\"en\"><head><meta charset=\"utf-8\">\
         <title>Street view attention report</title>\
         <style>body{font-family:sans-serif;margin:2em}section{display:inline-block;vertical-align:top;margin:0 2em 2em 0}\
         table{border-collapse:collapse}td,th{padding:2px 8px;border-bottom:1px solid #ddd}</style>\
         </head><body>\n<h1>Street view attention report</h1>\n<p>",
    );
    let counts: Vec<String> = report.group_counts.iter().map(|(g, n)| format!("{g}: {n}")).collect();
    out.push_str(&escape(&counts.join(", ")));
    out.push_str("</p>\n");
    for s in &report.means {
        let _ = writeln!(
            out,
            "<section><h2>{} ({}, {} images)</h2>{}</section>",
            escape(&s.kind.to_string()),
            s.scope.as_str(),
            s.images,
            bar_chart(s)
        );
    }
    if let Some(sim) = report.similarity.as_ref().and_then(|s| s.report.as_ref()) {
        out.push_str("<h2>Human vs CAM similarity</h2>\n<table><tr><th>Method</th><th>L2</th><th>LPIPS</th><th>Cosine</th><th>Images</th></tr>\n");
        let bold = |on: bool, v: String| if on { format!("<b>{v}</b>") } else { v };
        for row in &sim.means {
            let in_set = |set: Option<&streetgaze_core::similarity::BoldSet>| {
                set.is_some_and(|b| b.members.contains(&row.method))
            };
            let lpips = row.lpips.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "<tr><td>{}</td><td>{}</td><td>{}</td><td>{}</td><td>{}</td></tr>",
                row.method,
                bold(in_set(Some(&sim.bold_l2)), format!("{:.4}", row.l2)),
                bold(in_set(sim.bold_lpips.as_ref()), lpips),
                bold(in_set(Some(&sim.bold_cosine)), format!("{:.4}", row.cosine)),
                row.images
            );
        }
        out.push_str("</table>\n");
    }
    out.push_str("</body></html>\n");
    out
}

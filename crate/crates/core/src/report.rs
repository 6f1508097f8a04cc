//! Result emission: per-record CSV, aggregated summary with significance
//! stars and minimal SVG line charts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::models::Arch;
use crate::runner::{Axis, Curve, ResultRow, ResultTable};
use crate::session::Preset;
use crate::stats::{bh_adjust, mean_std, paired_t_test_one_sided, stars};
use crate::{Error, Result};

/// Baseline every other config is tested against.
pub const BASELINE: Preset = Preset::PreZs;

/// Aggregate of one (dataset, arch, axis point, config) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub arch: Arch,
    pub axis: Axis,
    pub n_subjects: usize,
    pub trials_per_subject: usize,
    pub config: Preset,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub display: String,
    /// One-sided paired test against the baseline, by subject.
    pub p_value: Option<f64>,
    pub p_adjusted: Option<f64>,
    pub stars: String,
}

type GroupKey = (String, Arch, Axis, usize, usize);

/// Aggregates rows and attaches BH-adjusted significance against
/// [`BASELINE`] within each (dataset, arch, axis point) family.
pub fn summarize(table: &ResultTable) -> Result<Vec<SummaryRow>> {
    let mut groups: BTreeMap<GroupKey, BTreeMap<Preset, Vec<&ResultRow>>> = BTreeMap::new();
    for r in &table.rows {
        groups
            .entry((r.dataset.clone(), r.arch, r.axis, r.n_subjects, r.trials_per_subject))
            .or_default()
            .entry(r.config)
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for ((dataset, arch, axis, n_subjects, trials_per_subject), configs) in groups {
        let per_subject = |rows: &[&ResultRow]| {
            let mut by: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
            for r in rows {
                by.entry(r.subject_id).or_default().push(r.final_accuracy);
            }
            by.into_iter()
                .map(|(id, v)| (id, mean_std(&v).0))
                .collect::<BTreeMap<_, _>>()
        };
        let baseline = configs.get(&BASELINE).map(|rows| per_subject(rows));
        let mut family = Vec::new();
        for (&config, rows) in &configs {
            let p = match &baseline {
                Some(base) if config != BASELINE => {
                    let own = per_subject(rows);
                    let paired: Vec<(f64, f64)> = own
                        .iter()
                        .filter_map(|(id, &x)| base.get(id).map(|&y| (x, y)))
                        .collect();
                    if paired.len() >= 3 {
                        let (x, y): (Vec<f64>, Vec<f64>) = paired.into_iter().unzip();
                        Some(paired_t_test_one_sided(&x, &y)?)
                    } else {
                        None
                    }
                }
                _ => None,
            };
            family.push((config, rows, p));
        }
        let tested: Vec<f64> = family.iter().filter_map(|f| f.2).collect();
        let mut adjusted = bh_adjust(&tested)?.into_iter();
        for (config, rows, p) in family {
            let acc: Vec<f64> = rows.iter().map(|r| r.final_accuracy).collect();
            let (mean, std) = mean_std(&acc);
            let p_adjusted = p.map(|_| adjusted.next().expect("one adjusted value per test"));
            let star = p_adjusted.map_or("", stars).to_string();
            out.push(SummaryRow {
                dataset: dataset.clone(),
                arch,
                axis,
                n_subjects,
                trials_per_subject,
                config,
                n: acc.len(),
                mean,
                std,
                display: format!("{mean:.3}±{std:.3}{star}"),
                p_value: p,
                p_adjusted,
                stars: star,
            });
        }
    }
    Ok(out)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads back a `results.csv`.
pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Reads back a `summary.csv`.
pub fn read_summary(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const PALETTE: [&str; 9] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#17becf",
];

/// A standalone SVG line chart of the curve's series.
pub fn line_chart(curve: &Curve) -> String {
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (60.0, 170.0, 40.0, 50.0);
    let points = curve.series.iter().flat_map(|(_, p)| p);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let plot_w = w - left - right;
    let plot_h = h - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * plot_w;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        w / 2.0,
        escape(&curve.title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            sx(xv),
            top + plot_h + 16.0,
            trim(xv)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            sy(yv) + 4.0,
            trim(yv)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        left + plot_w / 2.0,
        h - 12.0,
        escape(&curve.x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        escape(&curve.y_label)
    );
    for (i, (label, pts)) in curve.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        let ly = top + 14.0 + 18.0 * i as f64;
        let lx = w - right + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#,
            lx + 18.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}">{}</text>"#,
            lx + 24.0,
            ly + 4.0,
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn trim(v: f64) -> String {
    if v.abs() >= 100.0 || v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `results.csv`, `summary.csv` and one SVG per curve into
/// `out_dir`, returning the written paths.
pub fn emit_report(table: &ResultTable, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if table.rows.is_empty() {
        return Err(Error::TooFew {
            what: "result rows to report",
            needed: 1,
            got: 0,
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let results = out_dir.join("results.csv");
    write_csv(&results, &table.rows)?;
    written.push(results);
    let summary = out_dir.join("summary.csv");
    write_csv(&summary, &summarize(table)?)?;
    written.push(summary);
    for curve in &table.curves {
        let path = out_dir.join(format!("{}.svg", file_stem(&curve.name)));
        fs::write(&path, line_chart(curve)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

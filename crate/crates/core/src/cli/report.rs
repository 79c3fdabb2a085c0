use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no *aggregate.csv files in {0}")]
    MissingInput(PathBuf),
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
struct Row {
    variant: String,
    runs: usize,
    acc: (f64, f64),
    bca: (f64, f64),
    f1: (f64, f64),
}

#[derive(Clone, Debug, PartialEq)]
struct SuiteTable {
    suite: String,
    rows: Vec<Row>,
}

fn parse_aggregate(path: &Path) -> Result<Vec<SuiteTable>, ReportError> {
    let text = fs::read_to_string(path)?;
    let err = |msg: String| ReportError::Parse { path: path.to_path_buf(), msg };
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| err("empty file".into()))?.split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).ok_or_else(|| err(format!("missing column {name}")));
    let idx = [
        col("suite")?,
        col("variant")?,
        col("runs")?,
        col("acc_mean")?,
        col("acc_std")?,
        col("bca_mean")?,
        col("bca_std")?,
        col("weighted_f1_mean")?,
        col("weighted_f1_std")?,
    ];
    let mut tables: Vec<SuiteTable> = Vec::new();
    for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let get = |i: usize| f.get(idx[i]).copied().ok_or_else(|| err(format!("line {}: too few fields", n + 2)));
        let num = |i: usize| -> Result<f64, ReportError> { get(i)?.parse::<f64>().map_err(|e| err(format!("line {}: {e}", n + 2))) };
        let row = Row {
            variant: get(1)?.to_string(),
            runs: get(2)?.parse().map_err(|e| err(format!("line {}: {e}", n + 2)))?,
            acc: (num(3)?, num(4)?),
            bca: (num(5)?, num(6)?),
            f1: (num(7)?, num(8)?),
        };
        let suite = get(0)?.to_string();
        match tables.iter_mut().find(|t| t.suite == suite) {
            Some(t) => t.rows.push(row),
            None => tables.push(SuiteTable { suite, rows: vec![row] }),
        }
    }
    Ok(tables)
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const LEFT: f64 = 56.0;
const RIGHT: f64 = 16.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 56.0;

fn y_of(v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    TOP + (1.0 - v) * (H - TOP - BOTTOM)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axes(svg: &mut String, title: &str) {
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"##,
            W - RIGHT,
            LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(svg, r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">BCA</text>"#, H / 2.0, H / 2.0);
}

fn error_bar(svg: &mut String, x: f64, mean: f64, std: f64) {
    let (lo, hi) = (y_of(mean - std), y_of(mean + std));
    let _ = writeln!(
        svg,
        r#"<line x1="{x:.1}" y1="{lo:.1}" x2="{x:.1}" y2="{hi:.1}" stroke="black"/><line x1="{:.1}" y1="{lo:.1}" x2="{:.1}" y2="{lo:.1}" stroke="black"/><line x1="{:.1}" y1="{hi:.1}" x2="{:.1}" y2="{hi:.1}" stroke="black"/>"#,
        x - 4.0,
        x + 4.0,
        x - 4.0,
        x + 4.0
    );
}

fn bar_chart(t: &SuiteTable) -> String {
    let mut svg = String::new();
    axes(&mut svg, &format!("{}: BCA (mean +- std)", t.suite));
    let n = t.rows.len().max(1) as f64;
    let slot = (W - LEFT - RIGHT) / n;
    for (i, r) in t.rows.iter().enumerate() {
        let x = LEFT + slot * (i as f64 + 0.5);
        let bw = slot * 0.6;
        let y = y_of(r.bca.0);
        let _ =
            writeln!(svg, r##"<rect x="{:.1}" y="{y:.1}" width="{bw:.1}" height="{:.1}" fill="#4c72b0"/>"##, x - bw / 2.0, y_of(0.0) - y);
        error_bar(&mut svg, x, r.bca.0, r.bca.1);
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, H - BOTTOM + 18.0, escape(&r.variant));
    }
    svg.push_str("</svg>\n");
    svg
}

fn line_chart(t: &SuiteTable) -> String {
    let mut svg = String::new();
    axes(&mut svg, &format!("{}: BCA (mean +- std)", t.suite));
    let n = t.rows.len();
    let step = if n > 1 { (W - LEFT - RIGHT - 40.0) / (n - 1) as f64 } else { 0.0 };
    let xs: Vec<f64> = (0..n).map(|i| LEFT + 20.0 + step * i as f64).collect();
    let points: Vec<String> = t.rows.iter().zip(&xs).map(|(r, x)| format!("{x:.1},{:.1}", y_of(r.bca.0))).collect();
    let _ = writeln!(svg, r##"<polyline points="{}" fill="none" stroke="#c44e52" stroke-width="2"/>"##, points.join(" "));
    for (r, &x) in t.rows.iter().zip(&xs) {
        let _ = writeln!(svg, r##"<circle cx="{x:.1}" cy="{:.1}" r="3" fill="#c44e52"/>"##, y_of(r.bca.0));
        error_bar(&mut svg, x, r.bca.0, r.bca.1);
        let _ = writeln!(svg, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, H - BOTTOM + 18.0, escape(&r.variant));
    }
    svg.push_str("</svg>\n");
    svg
}

fn pm(v: (f64, f64)) -> String {
    format!("{:.4} ± {:.4}", v.0, v.1)
}

fn markdown(tables: &[SuiteTable]) -> String {
    let mut md = String::from("# Results\n");
    for t in tables {
        let _ = write!(md, "\n## {}\n\n| Variant | Runs | ACC | BCA | Weighted F1 |\n|---|---|---|---|---|\n", t.suite);
        for r in &t.rows {
            let _ = writeln!(md, "| {} | {} | {} | {} | {} |", r.variant, r.runs, pm(r.acc), pm(r.bca), pm(r.f1));
        }
    }
    md
}

/// Reads every `*aggregate.csv` under `results` and writes one SVG per suite
/// plus `report.md` into `out`. Returns the written paths.
pub fn render_report(results: &Path, out: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let mut files: Vec<PathBuf> = match fs::read_dir(results) {
        Ok(rd) => rd
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with("aggregate.csv")))
            .collect(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    files.sort();
    if files.is_empty() {
        return Err(ReportError::MissingInput(results.to_path_buf()));
    }
    let mut tables: Vec<SuiteTable> = Vec::new();
    for f in &files {
        tables.extend(parse_aggregate(f)?);
    }
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for t in &tables {
        let svg = if t.suite == "temperature" { line_chart(t) } else { bar_chart(t) };
        let p = out.join(format!("{}.svg", t.suite));
        fs::write(&p, svg)?;
        written.push(p);
    }
    let p = out.join("report.md");
    fs::write(&p, markdown(&tables))?;
    written.push(p);
    Ok(written)
}

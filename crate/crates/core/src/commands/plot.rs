//! Native SVG charts from steps.csv and sweep.csv.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{io_err, write_file, CommandError};

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 190.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const MAX_BARS: usize = 120;
const PALETTE: [&str; 8] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#9c755f",
];

/// Critical-path components of steps.csv, stacked bottom to top; they sum
/// to `latency_ms`.
const BREAKDOWN: [(&str, &str); 5] = [
    ("npu_ms", "NPU"),
    ("attention_phase_ms", "attention"),
    ("transfer_ms", "partial transfer"),
    ("final_reduction_ms", "final reduction"),
    ("swap_exposed_ms", "exposed swaps"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ReportConfig {
    pub steps: Option<PathBuf>,
    pub sweep: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportOutcome {
    pub files: Vec<PathBuf>,
}

pub const BREAKDOWN_SVG: &str = "latency_breakdown.svg";
pub const THROUGHPUT_SVG: &str = "throughput_vs_batch.svg";

/// Renders the charts whose inputs are given.
pub fn cmd_report(cfg: &ReportConfig) -> Result<ReportOutcome, CommandError> {
    if cfg.steps.is_none() && cfg.sweep.is_none() {
        return Err(CommandError::Usage("report needs --steps and/or --sweep".into()));
    }
    std::fs::create_dir_all(&cfg.out).map_err(io_err(&cfg.out))?;
    let mut files = Vec::new();
    if let Some(p) = &cfg.steps {
        let table = read_table(p)?;
        let cols: Vec<Vec<f64>> = BREAKDOWN
            .iter()
            .map(|(c, _)| table.numbers(c))
            .collect::<Result<_, _>>()?;
        let steps = (0..table.rows.len()).map(|i| cols.iter().map(|c| c[i]).collect()).collect::<Vec<Vec<f64>>>();
        let svg = latency_breakdown_svg(&steps);
        let path = cfg.out.join(BREAKDOWN_SVG);
        write_file(&path, svg.as_bytes())?;
        files.push(path);
    }
    if let Some(p) = &cfg.sweep {
        let table = read_table(p)?;
        let status = table.column("status")?;
        let requests = table.numbers("requests")?;
        let tput = table.column("throughput_tok_s")?;
        let variant = table.column("variant")?;
        let ablation = table.column("ablation")?;
        let mut acc: BTreeMap<String, BTreeMap<u64, (f64, u32)>> = BTreeMap::new();
        for (i, row) in table.rows.iter().enumerate() {
            if row[status] != "ok" {
                continue;
            }
            let Ok(t) = row[tput].parse::<f64>() else { continue };
            let name = match row[ablation].as_str() {
                "" => row[variant].clone(),
                a => format!("{} w/o {a}", row[variant]),
            };
            let e = acc.entry(name).or_default().entry(requests[i] as u64).or_insert((0.0, 0));
            e.0 += t;
            e.1 += 1;
        }
        let series: BTreeMap<String, Vec<(f64, f64)>> = acc
            .into_iter()
            .map(|(k, pts)| (k, pts.into_iter().map(|(b, (s, n))| (b as f64, s / f64::from(n))).collect()))
            .collect();
        let svg = throughput_svg(&series);
        let path = cfg.out.join(THROUGHPUT_SVG);
        write_file(&path, svg.as_bytes())?;
        files.push(path);
    }
    Ok(ReportOutcome { files })
}

struct Table {
    path: PathBuf,
    header: HashMap<String, usize>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn column(&self, name: &str) -> Result<usize, CommandError> {
        self.header
            .get(name)
            .copied()
            .ok_or_else(|| CommandError::Usage(format!("{}: missing column `{name}`", self.path.display())))
    }

    fn numbers(&self, name: &str) -> Result<Vec<f64>, CommandError> {
        let c = self.column(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let v = r.get(c).map(String::as_str).unwrap_or("");
                if v.is_empty() {
                    return Ok(0.0);
                }
                v.parse().map_err(|_| {
                    CommandError::Usage(format!("{}: row {}: `{name}` is not a number: `{v}`", self.path.display(), i + 2))
                })
            })
            .collect()
    }
}

fn read_table(path: &Path) -> Result<Table, CommandError> {
    let bad = |e: csv::Error| CommandError::Usage(format!("{}: {e}", path.display()));
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => CommandError::Io {
                path: path.to_path_buf(),
                source,
            },
            other => CommandError::Usage(format!("{}: {other:?}", path.display())),
        })?;
    let header = r
        .headers()
        .map_err(bad)?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.to_string(), i))
        .collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(bad)?.iter().map(str::to_string).collect());
    }
    Ok(Table {
        path: path.to_path_buf(),
        header,
        rows,
    })
}

/// Smallest 1/2/5 x 10^k at or above `x`.
fn nice_ceil(x: f64) -> f64 {
    if !(x > 0.0 && x.is_finite()) {
        return 1.0;
    }
    let p = 10f64.powf(x.log10().floor());
    [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * p).find(|&v| v >= x * (1.0 - 1e-12)).unwrap_or(10.0 * p)
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn frame(svg: &mut String, title: &str, x_label: &str, y_label: &str, y_max: f64) {
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="18" text-anchor="middle" font-size="14">{title}</text>
<text x="{}" y="{}" text-anchor="middle">{x_label}</text>
<text transform="translate(16 {}) rotate(-90)" text-anchor="middle">{y_label}</text>
"#,
        LEFT + pw / 2.0,
        LEFT + pw / 2.0,
        HEIGHT - 10.0,
        TOP + ph / 2.0,
    );
    for k in 0..=5 {
        let v = y_max * k as f64 / 5.0;
        let y = TOP + ph * (1.0 - k as f64 / 5.0);
        let _ = writeln!(
            svg,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0,
            fmt_tick(v)
        );
    }
    let _ = writeln!(
        svg,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw:.2}" height="{ph:.2}" fill="none" stroke="black"/>"#
    );
}

fn legend(svg: &mut String, names: &[&str]) {
    let x = WIDTH - RIGHT + 12.0;
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{x}" y="{:.2}" width="12" height="12" fill="{}"/><text x="{}" y="{:.2}">{}</text>"#,
            y - 10.0,
            PALETTE[i % PALETTE.len()],
            x + 18.0,
            y,
            escape(name)
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Stacked per-step latency bars, one component per column of `steps`
/// (in [`BREAKDOWN`] order). Runs longer than the bar budget are averaged
/// over equal-width step bins.
pub fn latency_breakdown_svg(steps: &[Vec<f64>]) -> String {
    let bins = steps.len().clamp(1, MAX_BARS);
    let per = steps.len().div_ceil(bins).max(1);
    let bars: Vec<Vec<f64>> = steps
        .chunks(per)
        .map(|c| {
            (0..BREAKDOWN.len())
                .map(|k| c.iter().map(|s| s[k]).sum::<f64>() / c.len() as f64)
                .collect()
        })
        .collect();
    let y_max = nice_ceil(bars.iter().map(|b| b.iter().sum::<f64>()).fold(0.0, f64::max));
    let mut svg = String::new();
    let x_label = if per > 1 {
        format!("decode step (bins of {per})")
    } else {
        "decode step".to_string()
    };
    frame(&mut svg, "Decode step latency breakdown", &x_label, "latency (ms)", y_max);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let w = pw / bars.len().max(1) as f64;
    for (i, bar) in bars.iter().enumerate() {
        let mut base = 0.0;
        for (k, &v) in bar.iter().enumerate() {
            if v <= 0.0 {
                continue;
            }
            let y0 = TOP + ph * (1.0 - (base + v) / y_max);
            let h = ph * v / y_max;
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{y0:.2}" width="{:.2}" height="{h:.2}" fill="{}"/>"#,
                LEFT + w * i as f64,
                (w * 0.9).max(0.5),
                PALETTE[k]
            );
            base += v;
        }
    }
    let first = 1;
    let last = steps.len().max(1);
    let _ = writeln!(
        svg,
        r#"<text x="{LEFT}" y="{:.2}">{first}</text><text x="{:.2}" y="{:.2}" text-anchor="end">{last}</text>"#,
        TOP + ph + 16.0,
        LEFT + pw,
        TOP + ph + 16.0
    );
    legend(&mut svg, &BREAKDOWN.map(|(_, n)| n));
    svg.push_str("</svg>\n");
    svg
}

/// One polyline per series of `(batch, throughput)` points.
pub fn throughput_svg(series: &BTreeMap<String, Vec<(f64, f64)>>) -> String {
    let pts = series.values().flatten();
    let x_max = nice_ceil(pts.clone().map(|p| p.0).fold(0.0, f64::max));
    let y_max = nice_ceil(pts.map(|p| p.1).fold(0.0, f64::max));
    let mut svg = String::new();
    frame(&mut svg, "Throughput vs batch size", "batch size (requests)", "throughput (tokens/s)", y_max);
    let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
    let sx = |x: f64| LEFT + pw * x / x_max;
    let sy = |y: f64| TOP + ph * (1.0 - y / y_max);
    for k in 0..=5 {
        let v = x_max * k as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            sx(v),
            TOP + ph + 16.0,
            fmt_tick(v)
        );
    }
    for (i, pts) in series.values().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            path.join(" ")
        );
        for &(x, y) in pts {
            let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
        }
    }
    let names: Vec<&str> = series.keys().map(String::as_str).collect();
    legend(&mut svg, &names);
    svg.push_str("</svg>\n");
    svg
}

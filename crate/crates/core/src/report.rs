//! Line plots of an experiment log as standalone SVG, plus a text summary.

use std::fmt::Write as _;
use std::path::Path;

use crate::sim::{summarize, IterationRecord, LogError, RunSummary};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 120.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 45.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Series<'a> {
    pub label: &'a str,
    pub values: Vec<f64>,
}

pub struct Plot<'a> {
    pub title: &'a str,
    pub x_label: &'a str,
    pub y_label: &'a str,
    pub series: Vec<Series<'a>>,
}

/// Round `span / 5` to 1, 2 or 5 × 10ⁿ.
fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let f = raw / mag;
    let nice = if f < 1.5 {
        1.0
    } else if f < 3.5 {
        2.0
    } else if f < 7.5 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 {
        0
    } else {
        (-step.log10().floor()) as usize
    };
    let s = format!("{v:.decimals$}");
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Plot<'_> {
    pub fn to_svg(&self) -> String {
        let n = self.series.iter().map(|s| s.values.len()).max().unwrap_or(0);
        let finite = self
            .series
            .iter()
            .flat_map(|s| s.values.iter().copied())
            .filter(|v| v.is_finite());
        let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            let pad = if hi.abs() > 0.0 { hi.abs() * 0.1 } else { 1.0 };
            lo -= pad;
            hi += pad;
        }
        let y_step = nice_step(hi - lo);
        let y0 = (lo / y_step).floor() * y_step;
        let y1 = (hi / y_step).ceil() * y_step;
        let x_max = (n.max(2) - 1) as f64;
        let x_step = nice_step(x_max).max(1.0);

        let pw = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let ph = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let sx = |x: f64| MARGIN_LEFT + x / x_max * pw;
        let sy = |y: f64| MARGIN_TOP + (y1 - y) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#,
            MARGIN_LEFT + pw / 2.0,
            escape(self.title)
        );
        // grid and ticks
        let mut y = y0;
        while y <= y1 + y_step * 1e-9 {
            let py = sy(y);
            let _ = writeln!(
                s,
                r##"<line x1="{MARGIN_LEFT}" y1="{py:.2}" x2="{:.2}" y2="{py:.2}" stroke="#ddd"/>"##,
                MARGIN_LEFT + pw
            );
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#,
                MARGIN_LEFT - 6.0,
                py + 4.0,
                fmt_tick(y, y_step)
            );
            y += y_step;
        }
        let mut x = 0.0;
        while x <= x_max + 1e-9 {
            let px = sx(x);
            let _ = writeln!(
                s,
                r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
                MARGIN_TOP + ph + 16.0,
                fmt_tick(x, x_step)
            );
            x += x_step;
        }
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            MARGIN_LEFT + pw / 2.0,
            HEIGHT - 8.0,
            escape(self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">{}</text>"#,
            MARGIN_TOP + ph / 2.0,
            escape(self.y_label)
        );
        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            // NaN breaks the line into segments
            let mut segments: Vec<Vec<String>> = vec![Vec::new()];
            for (k, v) in series.values.iter().enumerate() {
                if v.is_finite() {
                    segments
                        .last_mut()
                        .unwrap()
                        .push(format!("{:.2},{:.2}", sx(k as f64), sy(*v)));
                } else if !segments.last().unwrap().is_empty() {
                    segments.push(Vec::new());
                }
            }
            for seg in segments.iter().filter(|s| !s.is_empty()) {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    seg.join(" ")
                );
            }
            let ly = MARGIN_TOP + 12.0 + 16.0 * i as f64;
            let lx = MARGIN_LEFT + pw + 10.0;
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
                escape(series.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn column(records: &[IterationRecord], f: impl Fn(&IterationRecord) -> f64) -> Vec<f64> {
    records.iter().map(f).collect()
}

/// The four standard panels as `(file name, plot)`.
pub fn standard_plots(records: &[IterationRecord]) -> Vec<(&'static str, Plot<'static>)> {
    let axis = |k: usize| column(records, move |r| r.error[k]);
    vec![
        (
            "positioning_error.svg",
            Plot {
                title: "Positioning error",
                x_label: "iteration",
                y_label: "error (mm, deg)",
                series: vec![
                    Series {
                        label: "|t| (mm)",
                        values: column(records, |r| r.translation_error() * 1e3),
                    },
                    Series {
                        label: "|θu| (deg)",
                        values: column(records, |r| r.rotation_error()),
                    },
                ],
            },
        ),
        (
            "ssd.svg",
            Plot {
                title: "SSD to the desired image",
                x_label: "iteration",
                y_label: "SSD",
                series: vec![Series {
                    label: "SSD",
                    values: column(records, |r| r.ssd),
                }],
            },
        ),
        (
            "pose_error.svg",
            Plot {
                title: "Translational and rotational errors",
                x_label: "iteration",
                y_label: "error (cm, deg)",
                series: vec![
                    Series {
                        label: "tx (cm)",
                        values: axis(0).iter().map(|v| v * 100.0).collect(),
                    },
                    Series {
                        label: "ty (cm)",
                        values: axis(1).iter().map(|v| v * 100.0).collect(),
                    },
                    Series {
                        label: "tz (cm)",
                        values: axis(2).iter().map(|v| v * 100.0).collect(),
                    },
                    Series {
                        label: "rx (deg)",
                        values: axis(3),
                    },
                    Series {
                        label: "ry (deg)",
                        values: axis(4),
                    },
                    Series {
                        label: "rz (deg)",
                        values: axis(5),
                    },
                ],
            },
        ),
        (
            "velocity.svg",
            Plot {
                title: "Camera velocity",
                x_label: "iteration",
                y_label: "speed",
                series: vec![
                    Series {
                        label: "|v| (m/s)",
                        values: column(records, |r| r.v_lin_norm),
                    },
                    Series {
                        label: "|ω| (rad/s)",
                        values: column(records, |r| r.v_ang_norm),
                    },
                ],
            },
        ),
    ]
}

pub fn summary_text(s: &RunSummary) -> String {
    format!(
        "iterations: {}\nfinal translation error: {:.6} mm\nfinal rotation error: {:.6} deg\n\
         peak linear speed: {:.6} m/s\npeak angular speed: {:.6} rad/s\nfinal/initial SSD: {:.6}\n",
        s.iterations,
        s.final_translation_error_m * 1e3,
        s.final_rotation_error_deg,
        s.peak_linear_speed,
        s.peak_angular_speed,
        s.ssd_ratio
    )
}

/// Write the four plots and `summary.txt` into `out_dir`; returns the file names.
pub fn write_report(records: &[IterationRecord], out_dir: &Path) -> Result<Vec<String>, LogError> {
    let summary = summarize(records)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| LogError::Io { path, source }
    };
    std::fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::new();
    for (name, plot) in standard_plots(records) {
        let path = out_dir.join(name);
        std::fs::write(&path, plot.to_svg()).map_err(io(&path))?;
        written.push(name.to_string());
    }
    let path = out_dir.join("summary.txt");
    std::fs::write(&path, summary_text(&summary)).map_err(io(&path))?;
    written.push("summary.txt".into());
    Ok(written)
}

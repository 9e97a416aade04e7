//! Trace export, summaries, plots and the manipulability atlas.

use std::fmt::Write as _;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::ControlError;
use crate::manipulability::manipulability;
use crate::robot_model::RobotModel;
use crate::sim::{Summary, TraceRow};
use crate::task_space::{task_jacobian, TaskMapConfig};

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn trace_header(n: usize, m: usize) -> String {
    let mut cols = vec!["t".to_string()];
    for (prefix, len) in [("q", n), ("qd", n), ("x", m), ("xr", m)] {
        cols.extend((0..len).map(|i| format!("{prefix}{i}")));
    }
    cols.extend(["V", "Vdot", "mu"].map(String::from));
    cols.extend((0..n).map(|i| format!("tau{i}")));
    cols.extend((0..m).map(|i| format!("ur{i}")));
    cols.extend(["status", "solve_time"].map(String::from));
    cols.join(",")
}

/// Serializes the trace with a header row; every float is written with 17
/// significant digits so the text parses back to the same bits.
pub fn write_trace_csv(rows: &[TraceRow]) -> String {
    let (n, m) = rows.first().map_or((0, 0), |r| (r.q.len(), r.x.len()));
    let mut out = trace_header(n, m);
    out.push('\n');
    for r in rows {
        let mut fields = vec![fmt_f64(r.t)];
        for v in [&r.q, &r.qd, &r.x, &r.xr] {
            fields.extend(v.iter().map(|x| fmt_f64(*x)));
        }
        fields.extend([r.v, r.vdot, r.mu].map(fmt_f64));
        fields.extend(r.tau.iter().map(|x| fmt_f64(*x)));
        fields.extend(r.ur.iter().map(|x| fmt_f64(*x)));
        fields.push(r.status.clone());
        fields.push(fmt_f64(r.solve_time));
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum TraceParseError {
    #[error("missing header row")]
    MissingHeader,
    #[error("unrecognized header: {0}")]
    Header(String),
    #[error("line {line}: {message}")]
    Row { line: usize, message: String },
}

pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>, TraceParseError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(TraceParseError::MissingHeader)?;
    let cols: Vec<&str> = header.split(',').collect();
    let n = cols.iter().filter(|c| c.starts_with("tau")).count();
    let m = cols.iter().filter(|c| c.starts_with("ur")).count();
    if header != trace_header(n, m) {
        return Err(TraceParseError::Header(header.to_string()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let line_no = i + 2;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != cols.len() {
                return Err(TraceParseError::Row {
                    line: line_no,
                    message: format!("expected {} fields, got {}", cols.len(), fields.len()),
                });
            }
            let num = |j: usize| {
                fields[j].parse::<f64>().map_err(|e| TraceParseError::Row {
                    line: line_no,
                    message: format!("column {}: {e}", cols[j]),
                })
            };
            let vec = |start: usize, len: usize| -> Result<DVector<f64>, TraceParseError> {
                (start..start + len)
                    .map(num)
                    .collect::<Result<Vec<_>, _>>()
                    .map(DVector::from_vec)
            };
            let mut at = 1;
            let mut take = |len: usize| {
                let s = at;
                at += len;
                s
            };
            let (q, qd, x, xr) = (take(n), take(n), take(m), take(m));
            let (v, vdot, mu) = (take(1), take(1), take(1));
            let (tau, ur, status) = (take(n), take(m), take(1));
            Ok(TraceRow {
                t: num(0)?,
                q: vec(q, n)?,
                qd: vec(qd, n)?,
                x: vec(x, m)?,
                xr: vec(xr, m)?,
                v: num(v)?,
                vdot: num(vdot)?,
                mu: num(mu)?,
                tau: vec(tau, n)?,
                ur: vec(ur, m)?,
                status: fields[status].to_string(),
                solve_time: num(status + 1)?,
            })
        })
        .collect()
}

pub fn summary_json(summary: &Summary) -> String {
    serde_json::to_string_pretty(summary).expect("summary serializes")
}

/// Plain-text comparison table, one controller per row.
pub fn comparison_table(summaries: &[Summary], epsilon: f64) -> String {
    let mut out = format!(
        "{:<14} {:>12} {:>13} {:>12} {:>9} {:>9}\n",
        "controller", "min_mu", "max_Vdot", "final_err", "mu>=0.9e", "Vdot<=0"
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<14} {:>12.5e} {:>13.5e} {:>12.5e} {:>9} {:>9}",
            s.controller.as_str(),
            s.min_mu,
            s.max_vdot,
            s.final_error,
            s.min_mu >= 0.9 * epsilon,
            s.max_vdot <= crate::sim::PASSIVITY_TOL,
        );
    }
    out
}

/// Minimal self-contained SVG line plot with an optional horizontal
/// threshold line.
pub fn line_plot_svg(
    title: &str,
    t: &[f64],
    y: &[f64],
    threshold: Option<(f64, &str)>,
) -> String {
    const W: f64 = 640.0;
    const H: f64 = 360.0;
    const PAD: f64 = 50.0;
    let finite = |v: &&f64| v.is_finite();
    let mut lo = y.iter().filter(finite).cloned().fold(f64::INFINITY, f64::min);
    let mut hi = y.iter().filter(finite).cloned().fold(f64::NEG_INFINITY, f64::max);
    if let Some((th, _)) = threshold {
        lo = lo.min(th);
        hi = hi.max(th);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let (t0, t1) = (
        t.first().copied().unwrap_or(0.0),
        t.last().copied().unwrap_or(1.0).max(t.first().copied().unwrap_or(0.0) + 1e-12),
    );
    let px = |tv: f64| PAD + (tv - t0) / (t1 - t0) * (W - 2.0 * PAD);
    let py = |yv: f64| H - PAD - (yv - lo) / (hi - lo) * (H - 2.0 * PAD);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>"#,
        W / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{} H{}" stroke="black" fill="none"/>"#,
        H - PAD,
        W - PAD
    );
    for (val, yv) in [(lo, H - PAD), (hi, PAD)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{val:.3e}</text>"#,
            PAD - 4.0,
            yv + 3.0
        );
    }
    for (val, anchor) in [(t0, "start"), (t1, "end")] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="10" text-anchor="{anchor}">t = {val:.2} s</text>"#,
            px(val),
            H - PAD + 14.0
        );
    }
    if let Some((th, label)) = threshold {
        let yv = py(th);
        let _ = writeln!(
            svg,
            r#"<line x1="{PAD}" y1="{yv:.2}" x2="{}" y2="{yv:.2}" stroke="red" stroke-dasharray="6 4"/>"#,
            W - PAD
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="10" fill="red" text-anchor="end">{label}</text>"#,
            W - PAD,
            yv - 4.0
        );
    }
    let points: Vec<String> = t
        .iter()
        .zip(y)
        .filter(|(_, v)| v.is_finite())
        .map(|(tv, v)| format!("{:.2},{:.2}", px(*tv), py(*v)))
        .collect();
    let _ = writeln!(
        svg,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="1.5"/>"#,
        points.join(" ")
    );
    svg.push_str("</svg>\n");
    svg
}

/// The `V`, `V̇` and `μ` plots as `(file name, svg)` pairs.
pub fn trace_plots(rows: &[TraceRow], epsilon: f64) -> Vec<(&'static str, String)> {
    let t: Vec<f64> = rows.iter().map(|r| r.t).collect();
    let series = |f: fn(&TraceRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    vec![
        ("V.svg", line_plot_svg("storage function V", &t, &series(|r| r.v), None)),
        (
            "Vdot.svg",
            line_plot_svg("storage derivative dV/dt", &t, &series(|r| r.vdot), Some((0.0, "0"))),
        ),
        (
            "mu.svg",
            line_plot_svg("manipulability mu", &t, &series(|r| r.mu), Some((epsilon, "epsilon"))),
        ),
    ]
}

pub const MAX_ATLAS_POINTS: u64 = 10_000_000;

/// Inclusive, evenly spaced samples of one joint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn value(&self, i: usize) -> f64 {
        if self.count == 1 {
            self.min
        } else {
            self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64
        }
    }
}

impl std::str::FromStr for GridAxis {
    type Err = String;

    /// `min:max:count`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(format!("grid axis `{s}` must be min:max:count"));
        }
        let num = |p: &str| p.trim().parse::<f64>().map_err(|e| format!("grid axis `{s}`: {e}"));
        let (min, max) = (num(parts[0])?, num(parts[1])?);
        let count = parts[2]
            .trim()
            .parse::<usize>()
            .map_err(|e| format!("grid axis `{s}`: {e}"))?;
        if count == 0 {
            return Err(format!("grid axis `{s}` has zero points"));
        }
        if !(min.is_finite() && max.is_finite() && max >= min) {
            return Err(format!("grid axis `{s}` needs finite min <= max"));
        }
        Ok(Self { min, max, count })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AtlasError {
    #[error("grid has {got} axes but the model has {dof} joints")]
    Axes { got: usize, dof: usize },
    #[error("grid has {0} points, more than the limit of {MAX_ATLAS_POINTS}")]
    TooLarge(u128),
    #[error("grid axis {0} has zero points")]
    Empty(usize),
    #[error(transparent)]
    Control(#[from] ControlError),
}

#[derive(Debug, Clone)]
pub struct Atlas {
    pub csv: String,
    pub points: usize,
    pub min_mu: f64,
    pub argmin: DVector<f64>,
}

/// Evaluates μ over the full tensor grid; the last joint varies fastest.
pub fn atlas(
    model: &RobotModel,
    task: &TaskMapConfig,
    grid: &[GridAxis],
) -> Result<Atlas, AtlasError> {
    let n = model.dof();
    if grid.len() != n {
        return Err(AtlasError::Axes {
            got: grid.len(),
            dof: n,
        });
    }
    if let Some(i) = grid.iter().position(|a| a.count == 0) {
        return Err(AtlasError::Empty(i));
    }
    let total: u128 = grid.iter().map(|a| a.count as u128).product();
    if total > MAX_ATLAS_POINTS as u128 {
        return Err(AtlasError::TooLarge(total));
    }
    let mut csv = (0..n).map(|i| format!("q{i}")).collect::<Vec<_>>().join(",");
    csv.push_str(",mu\n");
    let mut idx = vec![0usize; n];
    let mut min_mu = f64::INFINITY;
    let mut argmin = DVector::zeros(n);
    for _ in 0..total {
        let q = DVector::from_iterator(n, idx.iter().zip(grid).map(|(i, a)| a.value(*i)));
        let mu = manipulability(&task_jacobian(model, &q, task)?);
        for v in q.iter() {
            csv.push_str(&fmt_f64(*v));
            csv.push(',');
        }
        csv.push_str(&fmt_f64(mu));
        csv.push('\n');
        if mu < min_mu {
            min_mu = mu;
            argmin = q;
        }
        for j in (0..n).rev() {
            idx[j] += 1;
            if idx[j] < grid[j].count {
                break;
            }
            idx[j] = 0;
        }
    }
    Ok(Atlas {
        csv,
        points: total as usize,
        min_mu,
        argmin,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::robot_model::fixtures::PLANAR2;
    use nalgebra::dvector;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn row(t: f64) -> TraceRow {
        TraceRow {
            t,
            q: dvector![0.1 + t, -1.0 / 3.0],
            qd: dvector![std::f64::consts::E, 1e-300],
            x: dvector![1.0, 2.0],
            xr: dvector![0.7, 0.2],
            v: 0.125,
            vdot: -3.3e-7,
            mu: 0.5,
            tau: dvector![12.5, -7.25],
            ur: dvector![0.0, -0.0],
            status: "optimal".into(),
            solve_time: 0.0,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = vec![row(0.0), row(0.003), row(0.006)];
        let text = write_trace_csv(&rows);
        assert!(text.starts_with("t,q0,q1,qd0,qd1,x0,x1,xr0,xr1,V,Vdot,mu,tau0,tau1,ur0,ur1,status,solve_time\n"));
        let back = parse_trace_csv(&text).unwrap();
        assert_eq!(back, rows);
        assert_eq!(write_trace_csv(&back), text);
    }

    #[test]
    fn csv_rejects_bad_rows() {
        let text = write_trace_csv(&[row(0.0)]);
        let broken = text.replace("optimal,", "optimal,1,");
        assert!(parse_trace_csv(&broken).is_err());
        assert!(parse_trace_csv("").is_err());
    }

    #[test]
    fn grid_axis_parsing() {
        let a: GridAxis = "0:3.5:8".parse().unwrap();
        assert_eq!((a.min, a.max, a.count), (0.0, 3.5, 8));
        assert_eq!(a.value(7), 3.5);
        assert!("0:1:0".parse::<GridAxis>().is_err());
        assert!("0:1".parse::<GridAxis>().is_err());
        assert!("1:0:3".parse::<GridAxis>().is_err());
    }

    #[test]
    fn planar_atlas_matches_abs_sin() {
        let model = RobotModel::from_toml_str(PLANAR2).unwrap();
        let grid = [GridAxis { min: 0.0, max: 0.0, count: 1 }, GridAxis { min: 0.0, max: PI, count: 181 }];
        let a = atlas(&model, &TaskMapConfig::planar2(), &grid).unwrap();
        assert_eq!(a.points, 181);
        assert!(a.min_mu < 1e-12);
        assert!(a.argmin[1] == 0.0 || (a.argmin[1] - PI).abs() < 1e-12);
        for line in a.csv.lines().skip(1) {
            let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
            assert!((v[2] - v[1].sin().abs()).abs() < 1e-12);
        }

        let grid = [GridAxis { min: 0.3, max: 0.3, count: 1 }, GridAxis { min: FRAC_PI_2, max: FRAC_PI_2, count: 1 }];
        let a = atlas(&model, &TaskMapConfig::planar2(), &grid).unwrap();
        assert!((a.min_mu - 1.0).abs() < 1e-12);
    }

    #[test]
    fn atlas_rejects_oversize_and_empty_grids() {
        let model = RobotModel::from_toml_str(PLANAR2).unwrap();
        let big = GridAxis { min: 0.0, max: 1.0, count: 10_000 };
        assert!(matches!(
            atlas(&model, &TaskMapConfig::planar2(), &[big, big]),
            Err(AtlasError::TooLarge(_))
        ));
        let empty = GridAxis { min: 0.0, max: 1.0, count: 0 };
        assert!(matches!(
            atlas(&model, &TaskMapConfig::planar2(), &[big, empty]),
            Err(AtlasError::Empty(1))
        ));
    }

    #[test]
    fn plots_contain_threshold_and_series() {
        let svg = line_plot_svg("mu", &[0.0, 1.0, 2.0], &[0.5, 0.2, 0.4], Some((0.03, "epsilon")));
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("<polyline"));
        assert!(svg.contains("stroke-dasharray"));
        assert_eq!(svg.matches(',').count() >= 3, true);
    }
}

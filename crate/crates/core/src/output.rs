//! CSV tables and SVG plots of sweep results.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::moments::Mode;
use crate::scenario::PlotAxes;
use crate::transmittance::{RytovSweepResult, SweepResult};

pub const CSV_HEADER: &str = "R_m,sigma2_region_i,sigma2_region_ii,sigma2_total,mode";

/// `# key: value` lines written above the header. Keys are free-form.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metadata {
    pub entries: Vec<(String, String)>,
}

impl Metadata {
    pub fn push(&mut self, key: impl Into<String>, value: impl Into<String>) -> &mut Self {
        self.entries.push((key.into(), value.into()));
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

fn fmt17(x: f64) -> String {
    format!("{x:.16e}")
}

fn mode_rank(m: Mode) -> usize {
    Mode::ALL.iter().position(|&x| x == m).unwrap_or(usize::MAX)
}

/// Rows ordered by (mode, radius). Fingerprints and failed points travel in
/// the metadata so `parse_csv` restores the results exactly.
pub fn render_csv(results: &[SweepResult], meta: &Metadata) -> Result<String> {
    let mut sorted: Vec<&SweepResult> = results.iter().collect();
    sorted.sort_by_key(|r| mode_rank(r.mode));
    if sorted.windows(2).any(|w| w[0].mode == w[1].mode) {
        return Err(Error::invalid("one result per mode"));
    }
    let mut out = String::new();
    for (k, v) in &meta.entries {
        if k.contains(':') || k.contains('\n') || v.contains('\n') {
            return Err(Error::invalid(format!("metadata entry `{k}` cannot be written on one line")));
        }
        writeln!(out, "# {k}: {v}").unwrap();
    }
    for r in &sorted {
        r.validate()?;
        writeln!(out, "# fingerprint.{}: {}", r.mode.name(), r.fingerprint).unwrap();
        for (radius, msg) in &r.failures {
            writeln!(out, "# failed.{}: {} {}", r.mode.name(), fmt17(*radius), msg.replace('\n', " ")).unwrap();
        }
    }
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &sorted {
        for k in 0..r.radii.len() {
            writeln!(
                out,
                "{},{},{},{},{}",
                fmt17(r.radii[k]),
                fmt17(r.sigma2_i[k]),
                fmt17(r.sigma2_ii[k]),
                fmt17(r.sigma2_total[k]),
                r.mode.name()
            )
            .unwrap();
        }
    }
    Ok(out)
}

pub fn emit_csv(results: &[SweepResult], meta: &Metadata, path: &Path) -> Result<()> {
    std::fs::write(path, render_csv(results, meta)?).map_err(|e| Error::io(path, e))
}

pub fn parse_csv(text: &str) -> Result<(Metadata, Vec<SweepResult>)> {
    let mut meta = Metadata::default();
    let mut results: Vec<SweepResult> = Vec::new();
    let mut header_seen = false;
    let bad = |line: usize, m: String| Error::Table { line, message: m };
    let num = |line: usize, s: &str| s.trim().parse::<f64>().map_err(|_| bad(line, format!("`{s}` is not a number")));
    let slot = |mode: Mode, results: &mut Vec<SweepResult>| -> usize {
        if let Some(i) = results.iter().position(|r| r.mode == mode) {
            return i;
        }
        results.push(SweepResult {
            mode,
            radii: vec![],
            sigma2_i: vec![],
            sigma2_ii: vec![],
            sigma2_total: vec![],
            fingerprint: String::new(),
            failures: vec![],
        });
        results.len() - 1
    };
    for (idx, line) in text.lines().enumerate() {
        let ln = idx + 1;
        if let Some(rest) = line.strip_prefix("# ") {
            if header_seen {
                return Err(bad(ln, "metadata after header".into()));
            }
            let (k, v) = rest.split_once(": ").ok_or_else(|| bad(ln, "metadata without `: `".into()))?;
            let mode_of = |name: &str| Mode::parse(name).ok_or_else(|| bad(ln, format!("unknown mode `{name}`")));
            if let Some(m) = k.strip_prefix("fingerprint.") {
                let i = slot(mode_of(m)?, &mut results);
                results[i].fingerprint = v.to_string();
            } else if let Some(m) = k.strip_prefix("failed.") {
                let i = slot(mode_of(m)?, &mut results);
                let (r, msg) = v.split_once(' ').unwrap_or((v, ""));
                results[i].failures.push((num(ln, r)?, msg.to_string()));
            } else {
                meta.push(k, v);
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        if !header_seen {
            if line != CSV_HEADER {
                return Err(bad(ln, format!("expected header `{CSV_HEADER}`")));
            }
            header_seen = true;
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(bad(ln, format!("expected 5 columns, found {}", cols.len())));
        }
        let mode = Mode::parse(cols[4].trim()).ok_or_else(|| bad(ln, format!("unknown mode `{}`", cols[4])))?;
        let i = slot(mode, &mut results);
        let r = &mut results[i];
        r.radii.push(num(ln, cols[0])?);
        r.sigma2_i.push(num(ln, cols[1])?);
        r.sigma2_ii.push(num(ln, cols[2])?);
        r.sigma2_total.push(num(ln, cols[3])?);
    }
    if !header_seen {
        return Err(bad(text.lines().count(), "missing header".into()));
    }
    Ok((meta, results))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotOptions {
    pub axes: PlotAxes,
    /// Also draw the region-(i) and region-(ii) curves.
    pub regions: bool,
    pub width: f64,
    pub height: f64,
}

impl Default for PlotOptions {
    fn default() -> Self {
        Self {
            axes: PlotAxes::LogLog,
            regions: true,
            width: 720.0,
            height: 480.0,
        }
    }
}

const COLORS: [&str; 3] = ["#1f5fa8", "#c0392b", "#2e8b57"];
const MARGIN: [f64; 4] = [70.0, 20.0, 30.0, 55.0]; // left, right, top, bottom

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: &[f64], log: bool) -> Self {
        let mut lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if log {
            lo = lo.log10().floor();
            hi = hi.log10().ceil();
            if hi <= lo {
                hi = lo + 1.0;
            }
        } else {
            let pad = 0.05 * (hi - lo);
            lo -= pad;
            hi += pad;
        }
        Axis { lo, hi, log }
    }

    fn unit(&self, x: f64) -> f64 {
        let v = if self.log { x.log10() } else { x };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn ticks(&self) -> Vec<f64> {
        if self.log {
            let step = ((self.hi - self.lo) / 8.0).ceil().max(1.0);
            let mut t = Vec::new();
            let mut e = self.lo;
            while e <= self.hi + 1e-9 {
                t.push(10f64.powf(e));
                e += step;
            }
            return t;
        }
        let raw = (self.hi - self.lo) / 5.0;
        let mag = 10f64.powf(raw.log10().floor());
        let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(10.0 * mag);
        let mut t = Vec::new();
        let mut x = (self.lo / step).ceil() * step;
        while x <= self.hi + 1e-12 * step {
            t.push(if x.abs() < 1e-9 * step { 0.0 } else { x });
            x += step;
        }
        t
    }
}

fn tick_label(x: f64) -> String {
    if x == 0.0 {
        "0".into()
    } else if (1e-2..1e3).contains(&x.abs()) {
        let s = format!("{x:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{x:.0e}")
    }
}

struct Curve<'a> {
    label: String,
    color: &'a str,
    dash: Option<&'a str>,
    points: Vec<(f64, f64)>,
}

pub fn render_svg(results: &[SweepResult], opts: &PlotOptions) -> Result<String> {
    let log = opts.axes == PlotAxes::LogLog;
    let mut sorted: Vec<&SweepResult> = results.iter().collect();
    sorted.sort_by_key(|r| mode_rank(r.mode));
    if sorted.is_empty() || sorted.iter().any(|r| r.radii.len() < 2) {
        return Err(Error::invalid("a plot needs at least two radii"));
    }
    if log && sorted.iter().flat_map(|r| &r.radii).any(|r| !(*r > 0.0)) {
        return Err(Error::InvalidAxis("log axis cannot show a non-positive radius".into()));
    }
    let mut curves = Vec::new();
    for (k, r) in sorted.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut series = vec![("total", None, &r.sigma2_total)];
        if opts.regions {
            series.push(("region i", Some("6 3"), &r.sigma2_i));
            series.push(("region ii", Some("2 3"), &r.sigma2_ii));
        }
        for (name, dash, ys) in series {
            // Log axes drop non-positive values; failed points are always dropped.
            let points: Vec<(f64, f64)> = r
                .radii
                .iter()
                .zip(ys.iter())
                .filter(|(_, y)| y.is_finite() && (!log || **y > 0.0))
                .map(|(&x, &y)| (x, y))
                .collect();
            if points.len() >= 2 {
                curves.push(Curve {
                    label: format!("{} {name}", r.mode.name()),
                    color,
                    dash,
                    points,
                });
            }
        }
    }
    draw(&curves, "aperture radius R (m)", opts)
}

fn draw(curves: &[Curve], xlabel: &str, opts: &PlotOptions) -> Result<String> {
    let log = opts.axes == PlotAxes::LogLog;
    let ys: Vec<f64> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.1)).collect();
    if ys.is_empty() {
        return Err(Error::InvalidAxis("no plottable values".into()));
    }
    let (ymin, ymax) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    if ymax - ymin <= 1e-12 * ymax.abs().max(1.0) {
        return Err(Error::DegenerateRange);
    }
    let xs: Vec<f64> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0)).collect();
    let xa = Axis::fit(&xs, log);
    let ya = Axis::fit(&ys, log);
    let (w, h) = (opts.width, opts.height);
    let pw = w - MARGIN[0] - MARGIN[1];
    let ph = h - MARGIN[2] - MARGIN[3];
    let px = |x: f64| MARGIN[0] + xa.unit(x) * pw;
    let py = |y: f64| MARGIN[2] + (1.0 - ya.unit(y)) * ph;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<rect x="{}" y="{}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#,
        MARGIN[0], MARGIN[2]
    )
    .unwrap();
    for t in xa.ticks() {
        let x = px(t);
        writeln!(s, r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="black"/>"#, MARGIN[2] + ph, MARGIN[2] + ph + 5.0).unwrap();
        writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, MARGIN[2] + ph + 18.0, tick_label(t)).unwrap();
    }
    for t in ya.ticks() {
        let y = py(t);
        writeln!(s, r#"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="black"/>"#, MARGIN[0] - 5.0, MARGIN[0]).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, MARGIN[0] - 8.0, y + 4.0, tick_label(t)).unwrap();
    }
    writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{xlabel}</text>"#, MARGIN[0] + pw / 2.0, h - 12.0).unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{:.2}" text-anchor="middle" transform="rotate(-90 16 {:.2})">σ_η²</text>"#,
        MARGIN[2] + ph / 2.0,
        MARGIN[2] + ph / 2.0
    )
    .unwrap();
    for c in curves {
        let pts: Vec<String> = c.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        let dash = c.dash.map(|d| format!(r#" stroke-dasharray="{d}""#)).unwrap_or_default();
        writeln!(
            s,
            r#"<polyline class="{}" fill="none" stroke="{}" stroke-width="1.6"{dash} points="{}"/>"#,
            c.label.replace(' ', "-"),
            c.color,
            pts.join(" ")
        )
        .unwrap();
    }
    for (k, c) in curves.iter().enumerate() {
        let y = MARGIN[2] + 14.0 + 16.0 * k as f64;
        let x = MARGIN[0] + pw - 150.0;
        let dash = c.dash.map(|d| format!(r#" stroke-dasharray="{d}""#)).unwrap_or_default();
        writeln!(s, r#"<line x1="{x:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="{}" stroke-width="1.6"{dash}/>"#, x + 28.0, c.color).unwrap();
        writeln!(s, r#"<text x="{:.2}" y="{:.2}">{}</text>"#, x + 34.0, y + 4.0, c.label).unwrap();
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// sigma^2 against the Rytov label, one curve per (mode, radius).
pub fn render_rytov_svg(results: &[RytovSweepResult], opts: &PlotOptions) -> Result<String> {
    const DASHES: [Option<&str>; 3] = [None, Some("6 3"), Some("2 3")];
    let log = opts.axes == PlotAxes::LogLog;
    let mut curves = Vec::new();
    for res in results {
        if res.rytov2.len() < 2 {
            return Err(Error::invalid("a plot needs at least two Rytov values"));
        }
        let radii = res.sweeps.first().map(|s| s.radii.clone()).unwrap_or_default();
        for (j, r) in radii.iter().enumerate() {
            let points: Vec<(f64, f64)> = res
                .rytov2
                .iter()
                .zip(&res.sweeps)
                .map(|(&x, s)| (x, s.sigma2_total[j]))
                .filter(|(_, y)| y.is_finite() && (!log || *y > 0.0))
                .collect();
            if points.len() >= 2 {
                curves.push(Curve {
                    label: format!("{} R={r:.3e} m", res.mode.name()),
                    color: COLORS[j % COLORS.len()],
                    dash: DASHES[mode_rank(res.mode) % DASHES.len()],
                    points,
                });
            }
        }
    }
    draw(&curves, "Rytov variance σ_R²", opts)
}

/// One row per (mode, Rytov value, radius).
pub fn render_rytov_csv(results: &[RytovSweepResult], meta: &Metadata) -> Result<String> {
    let mut out = String::new();
    for (k, v) in &meta.entries {
        writeln!(out, "# {k}: {v}").unwrap();
    }
    for res in results {
        for (rv, msg) in &res.failures {
            writeln!(out, "# failed.{}: {} {}", res.mode.name(), fmt17(*rv), msg.replace('\n', " ")).unwrap();
        }
    }
    out.push_str(RYTOV_CSV_HEADER);
    out.push('\n');
    let mut sorted: Vec<&RytovSweepResult> = results.iter().collect();
    sorted.sort_by_key(|r| mode_rank(r.mode));
    for res in sorted {
        for ((rv, cn2), s) in res.rytov2.iter().zip(&res.cn2).zip(&res.sweeps) {
            for k in 0..s.radii.len() {
                writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    fmt17(*rv),
                    fmt17(*cn2),
                    fmt17(s.radii[k]),
                    fmt17(s.sigma2_i[k]),
                    fmt17(s.sigma2_ii[k]),
                    fmt17(s.sigma2_total[k]),
                    res.mode.name()
                )
                .unwrap();
            }
        }
    }
    Ok(out)
}

pub const RYTOV_CSV_HEADER: &str = "rytov2,cn2,R_m,sigma2_region_i,sigma2_region_ii,sigma2_total,mode";

pub fn emit_svg_plot(results: &[SweepResult], opts: &PlotOptions, path: &Path) -> Result<()> {
    std::fs::write(path, render_svg(results, opts)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn result(mode: Mode, radii: &[f64], scale: f64) -> SweepResult {
        SweepResult {
            mode,
            radii: radii.to_vec(),
            sigma2_i: radii.iter().map(|r| scale * 0.3 / (1.0 + r)).collect(),
            sigma2_ii: radii.iter().map(|r| scale * 0.7 / (1.0 + 10.0 * r)).collect(),
            sigma2_total: radii.iter().map(|r| scale * (0.3 / (1.0 + r) + 0.7 / (1.0 + 10.0 * r))).collect(),
            fingerprint: "abc123".into(),
            failures: vec![],
        }
    }

    fn meta() -> Metadata {
        let mut m = Metadata::default();
        m.push("tool", "turbmoment 0.1.0").push("seed", "1").push("calibration", "flux").push("channel", "x");
        m
    }

    #[test]
    fn single_point_table() {
        let text = render_csv(&[result(Mode::Full, &[0.1], 1.0)], &meta()).unwrap();
        let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data, vec![CSV_HEADER, data[1]]);
        assert!(text.lines().filter(|l| l.starts_with('#')).count() >= 4);
    }

    #[test]
    fn rows_ordered_by_mode_then_radius() {
        let radii = [0.1, 0.2, 0.3];
        let text = render_csv(&[result(Mode::Asymptotic, &radii, 1.0), result(Mode::Full, &radii, 2.0)], &meta()).unwrap();
        let modes: Vec<&str> = text
            .lines()
            .skip_while(|l| *l != CSV_HEADER)
            .skip(1)
            .map(|l| l.rsplit(',').next().unwrap())
            .collect();
        assert_eq!(modes, ["full", "full", "full", "asymptotic", "asymptotic", "asymptotic"]);
    }

    #[test]
    fn failures_and_nan_round_trip() {
        let mut r = result(Mode::Frozen, &[0.1, 0.2], 1.0);
        r.sigma2_total[1] = f64::NAN;
        r.failures.push((0.2, "quadrature failed: budget".into()));
        let (m, back) = parse_csv(&render_csv(std::slice::from_ref(&r), &meta()).unwrap()).unwrap();
        assert_eq!(m, meta());
        assert_eq!(back[0].failures, r.failures);
        assert!(back[0].sigma2_total[1].is_nan());
        assert!(parse_csv("R_m,x\n").is_err());
        assert!(matches!(parse_csv(&format!("{CSV_HEADER}\n1,2,3\n")), Err(Error::Table { line: 2, .. })));
    }

    proptest! {
        #[test]
        fn csv_round_trip(
            vals in prop::collection::vec((1e-6f64..1e3, -10.0f64..10.0, -1e3f64..1e3), 1..12),
            modes in prop::sample::subsequence(Mode::ALL.to_vec(), 1..=3),
        ) {
            let mut radii: Vec<f64> = vals.iter().map(|v| v.0).collect();
            radii.sort_by(f64::total_cmp);
            radii.dedup();
            let results: Vec<SweepResult> = modes
                .iter()
                .map(|&m| SweepResult {
                    mode: m,
                    radii: radii.clone(),
                    sigma2_i: vals.iter().take(radii.len()).map(|v| v.1 * 1.000_000_000_000_1).collect(),
                    sigma2_ii: vals.iter().take(radii.len()).map(|v| v.2 / 3.0).collect(),
                    sigma2_total: vals.iter().take(radii.len()).map(|v| v.1 + v.2 / 3.0).collect(),
                    fingerprint: format!("fp-{}", m.name()),
                    failures: vec![],
                })
                .collect();
            let (_, back) = parse_csv(&render_csv(&results, &meta()).unwrap()).unwrap();
            prop_assert_eq!(back, results);
        }
    }

    #[test]
    fn two_point_svg() {
        let opts = PlotOptions {
            regions: false,
            ..Default::default()
        };
        let svg = render_svg(&[result(Mode::Full, &[0.1, 0.2], 1.0), result(Mode::Asymptotic, &[0.1, 0.2], 0.5)], &opts).unwrap();
        let lines: Vec<&str> = svg.lines().filter(|l| l.starts_with("<polyline")).collect();
        assert_eq!(lines.len(), 2);
        for l in lines {
            let pts = l.split("points=\"").nth(1).unwrap();
            assert_eq!(pts.trim_end_matches("\"/>").split(' ').count(), 2);
        }
        assert!(svg.contains("aperture radius R (m)"));
        assert!(svg.contains("σ_η²"));
        assert!(svg.contains(">full total<") && svg.contains(">asymptotic total<"));
    }

    #[test]
    fn region_curves_drawn() {
        let svg = render_svg(&[result(Mode::Full, &[0.1, 0.2, 0.4], 1.0)], &PlotOptions::default()).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains("full region ii"));
    }

    #[test]
    fn svg_error_paths() {
        let mut flat = result(Mode::Full, &[0.1, 0.2], 1.0);
        flat.sigma2_total = vec![0.5, 0.5];
        let opts = PlotOptions {
            regions: false,
            axes: PlotAxes::Linear,
            ..Default::default()
        };
        assert!(matches!(render_svg(&[flat], &opts), Err(Error::DegenerateRange)));
        let mut zero = result(Mode::Full, &[0.1, 0.2], 1.0);
        zero.radii[0] = 0.0;
        assert!(matches!(render_svg(&[zero.clone()], &PlotOptions::default()), Err(Error::InvalidAxis(_))));
        assert!(render_svg(&[zero], &opts).is_ok());
        assert!(render_svg(&[result(Mode::Full, &[0.1], 1.0)], &opts).is_err());
    }
}

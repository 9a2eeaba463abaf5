//! Metrics, CSV tables, SVG plots and PNG image grids.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::real::Real;
use crate::tensor::{shape_err, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {detail}")]
    Parse { path: PathBuf, line: usize, detail: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {detail}")]
    Image { path: PathBuf, detail: String },
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), ReportError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })?;
    }
    fs::write(path, bytes).map_err(|source| ReportError::Io { path: path.to_path_buf(), source })
}

/// Six significant digits, plain decimal for moderate magnitudes.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        // re-rounding can carry into the next decade, e.g. 9.999999
        let s = if s.trim_start_matches('-').replace('.', "").trim_start_matches('0').len() > 6 && decimals > 0 {
            format!("{v:.prec$}", prec = decimals - 1)
        } else {
            s
        };
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.5e}")
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of rows of `probs` (`[B, k]`) whose argmax equals the label.
pub fn accuracy<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<f64, TensorError> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(shape_err("accuracy", format!("predictions {s:?} for {} labels", labels.len())));
    }
    if labels.is_empty() {
        return Err(TensorError::Invalid { op: "accuracy", detail: "empty batch".into() });
    }
    let hits = probs.data().chunks(s[1]).zip(labels).filter(|(row, &z)| argmax(row) == z).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Fraction of pixels where `pred >= 0.5` agrees with the binary mask.
pub fn pixel_accuracy<T: Real>(pred: &Tensor<T>, mask: &Tensor<T>) -> Result<f64, TensorError> {
    if pred.shape() != mask.shape() {
        return Err(shape_err("pixel_accuracy", format!("prediction {:?} vs mask {:?}", pred.shape(), mask.shape())));
    }
    if pred.is_empty() {
        return Err(TensorError::Invalid { op: "pixel_accuracy", detail: "empty batch".into() });
    }
    let half = T::of(0.5);
    let hits = pred.data().iter().zip(mask.data()).filter(|(&p, &m)| (p >= half) == (m == T::one())).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// One line of the results table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub regime: String,
    pub c: f64,
    /// Accuracy or pixel accuracy.
    pub accuracy: f64,
    pub l2_loss: f64,
    pub cross_entropy: f64,
    pub steps: usize,
    pub seed: u64,
    /// `ok` or a failure message.
    pub status: String,
}

pub const TABLE_HEADER: &str = "regime,c,accuracy,l2_loss,cross_entropy,steps,seed,status";

impl MetricsRow {
    pub fn failed(regime: &str, c: f64, steps: usize, seed: u64, error: &str) -> Self {
        MetricsRow {
            regime: regime.into(),
            c,
            accuracy: f64::NAN,
            l2_loss: f64::NAN,
            cross_entropy: f64::NAN,
            steps,
            seed,
            status: format!("failed: {}", error.replace([',', '\n', '\r'], ";")),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == "ok"
    }

    fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.regime,
            fmt_sig(self.c),
            fmt_sig(self.accuracy),
            fmt_sig(self.l2_loss),
            fmt_sig(self.cross_entropy),
            self.steps,
            self.seed,
            self.status
        )
    }
}

pub fn table_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(TABLE_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

pub fn emit_table(rows: &[MetricsRow], path: &Path) -> Result<(), ReportError> {
    write_file(path, table_csv(rows).as_bytes())
}

pub fn parse_table(text: &str, path: &Path) -> Result<Vec<MetricsRow>, ReportError> {
    let perr = |line: usize, detail: String| ReportError::Parse { path: path.to_path_buf(), line, detail };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == TABLE_HEADER => {}
        _ => return Err(perr(1, format!("expected header {TABLE_HEADER}"))),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.splitn(8, ',').collect();
        if f.len() != 8 {
            return Err(perr(i + 1, format!("expected 8 fields, found {}", f.len())));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|e| perr(i + 1, format!("field {}: {e}", k + 1)));
        rows.push(MetricsRow {
            regime: f[0].to_string(),
            c: num(1)?,
            accuracy: num(2)?,
            l2_loss: num(3)?,
            cross_entropy: num(4)?,
            steps: f[5].parse().map_err(|e| perr(i + 1, format!("steps: {e}")))?,
            seed: f[6].parse().map_err(|e| perr(i + 1, format!("seed: {e}")))?,
            status: f[7].to_string(),
        });
    }
    Ok(rows)
}

pub fn read_table(path: &Path) -> Result<Vec<MetricsRow>, ReportError> {
    let text = fs::read_to_string(path).map_err(|source| ReportError::Io { path: path.to_path_buf(), source })?;
    parse_table(&text, path)
}

/// A named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Curve {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub curves: Vec<Curve>,
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn axis_range(vals: impl Iterator<Item = f64>, log: bool) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals {
        let v = if log { v.log10() } else { v };
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if lo == hi {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        (lo - pad, hi + pad)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

fn tick_label(v: f64, log: bool) -> String {
    if log {
        fmt_sig(10f64.powf(v))
    } else {
        fmt_sig(v)
    }
}

impl Plot {
    /// SVG source. Points that cannot be shown (non-finite, or non-positive
    /// on a log axis) are an error.
    pub fn to_svg(&self) -> Result<String, ReportError> {
        let pts = || self.curves.iter().flat_map(|c| c.points.iter().copied());
        if pts().next().is_none() {
            return Err(ReportError::Invalid(format!("plot {:?} has no points", self.title)));
        }
        for (x, y) in pts() {
            if !x.is_finite() || !y.is_finite() || (self.log_x && x <= 0.0) || (self.log_y && y <= 0.0) {
                return Err(ReportError::Invalid(format!("plot {:?}: point ({x}, {y}) cannot be drawn", self.title)));
            }
        }
        let (w, h) = (640.0, 420.0);
        let (l, r, t, b) = (80.0, 160.0, 40.0, 60.0);
        let (x0, x1) = axis_range(pts().map(|p| p.0), self.log_x);
        let (y0, y1) = axis_range(pts().map(|p| p.1), self.log_y);
        let sx = |x: f64| l + (if self.log_x { x.log10() } else { x } - x0) / (x1 - x0) * (w - l - r);
        let sy = |y: f64| h - b - (if self.log_y { y.log10() } else { y } - y0) / (y1 - y0) * (h - t - b);
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, (l + w - r) / 2.0, escape(&self.title));
        let _ = writeln!(s, r#"<rect x="{l}" y="{t}" width="{}" height="{}" fill="none" stroke="black"/>"#, w - l - r, h - t - b);
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = x0 + f * (x1 - x0);
            let px = l + f * (w - l - r);
            let _ = writeln!(s, r#"<line x1="{px:.2}" y1="{}" x2="{px:.2}" y2="{}" stroke="black"/><text x="{px:.2}" y="{}" text-anchor="middle">{}</text>"#, h - b, h - b + 5.0, h - b + 20.0, tick_label(xv, self.log_x));
            let yv = y0 + f * (y1 - y0);
            let py = h - b - f * (h - t - b);
            let _ = writeln!(s, r#"<line x1="{}" y1="{py:.2}" x2="{l}" y2="{py:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, l - 5.0, l - 8.0, py + 4.0, tick_label(yv, self.log_y));
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (l + w - r) / 2.0, h - 15.0, escape(&self.x_label));
        let _ = writeln!(s, r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#, (t + h - b) / 2.0, (t + h - b) / 2.0, escape(&self.y_label));
        for (k, c) in self.curves.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let path: Vec<String> = c.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            if path.len() > 1 {
                let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, path.join(" "));
            }
            for &(x, y) in &c.points {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(x), sy(y));
            }
            let ly = t + 15.0 + 18.0 * k as f64;
            let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#, w - r + 10.0, w - r + 30.0, w - r + 35.0, ly + 4.0, escape(&c.label));
        }
        s.push_str("</svg>\n");
        Ok(s)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `d_x_vs_c.svg` and `d_d_vs_c.svg` for the successful rows of a
/// sweep; `log` puts both axes on a log scale.
pub fn emit_plots(rows: &[MetricsRow], dir: &Path, log: bool) -> Result<Vec<PathBuf>, ReportError> {
    let ok: Vec<&MetricsRow> = rows.iter().filter(|r| r.is_ok()).collect();
    if ok.is_empty() {
        return Err(ReportError::Invalid("no successful runs to plot".into()));
    }
    let mut out = Vec::new();
    for (file, label, get) in [
        ("d_x_vs_c.svg", "reconstruction loss", (|r: &MetricsRow| r.l2_loss) as fn(&MetricsRow) -> f64),
        ("d_d_vs_c.svg", "task loss", |r: &MetricsRow| r.cross_entropy),
    ] {
        let mut pts: Vec<(f64, f64)> = ok.iter().map(|r| (r.c, get(r))).collect();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let plot = Plot {
            title: format!("{label} after joint training"),
            x_label: "C".into(),
            y_label: label.into(),
            log_x: log,
            log_y: log,
            curves: vec![Curve { label: label.into(), points: pts }],
        };
        let path = dir.join(file);
        write_file(&path, plot.to_svg()?.as_bytes())?;
        out.push(path);
    }
    Ok(out)
}

/// Tiles `[N, H, W]` images (clamped to `[0, 1]`) into a grey PNG with `cols`
/// columns and a one-pixel border.
pub fn image_grid_png<T: Real>(images: &Tensor<T>, cols: usize, path: &Path) -> Result<(), ReportError> {
    let s = images.shape();
    if s.len() != 3 || s[0] == 0 || cols == 0 {
        return Err(ReportError::Invalid(format!("image grid needs [N, H, W] images and cols > 0, got {s:?}")));
    }
    let (n, h, w) = (s[0], s[1], s[2]);
    let rows = n.div_ceil(cols);
    let cols = cols.min(n);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut buf = image::GrayImage::from_pixel(gw as u32, gh as u32, image::Luma([128]));
    for k in 0..n {
        let (ox, oy) = (1 + (k % cols) * (w + 1), 1 + (k / cols) * (h + 1));
        for i in 0..h {
            for j in 0..w {
                let v = images.data()[(k * h + i) * w + j].as_f64();
                let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
                buf.put_pixel((ox + j) as u32, (oy + i) as u32, image::Luma([(v * 255.0).round() as u8]));
            }
        }
    }
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| ReportError::Image { path: path.to_path_buf(), detail: e.to_string() })?;
    write_file(path, &bytes)
}

/// Class probabilities as CSV: `index,label,p0,...,p9`.
pub fn probabilities_csv<T: Real>(probs: &Tensor<T>, labels: &[usize]) -> Result<String, TensorError> {
    let s = probs.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(shape_err("probabilities_csv", format!("probabilities {s:?} for {} labels", labels.len())));
    }
    let mut out = String::from("index,label");
    for k in 0..s[1] {
        let _ = write!(out, ",p{k}");
    }
    out.push('\n');
    for (i, (row, z)) in probs.data().chunks(s[1]).zip(labels).enumerate() {
        let _ = write!(out, "{i},{z}");
        for v in row {
            let _ = write!(out, ",{}", fmt_sig(v.as_f64()));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Per-step log parsed back from `steps.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRow {
    pub stage: String,
    pub step: usize,
    pub d_x: Option<f64>,
    pub d_d: Option<f64>,
    pub joint: f64,
    pub lr: f64,
}

pub fn parse_steps(text: &str, path: &Path) -> Result<Vec<StepRow>, ReportError> {
    let perr = |line: usize, detail: String| ReportError::Parse { path: path.to_path_buf(), line, detail };
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(perr(i + 1, format!("expected 6 fields, found {}", f.len())));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|e| perr(i + 1, format!("field {}: {e}", k + 1)));
        let opt = |k: usize| if f[k].is_empty() { Ok(None) } else { num(k).map(Some) };
        out.push(StepRow {
            stage: f[0].into(),
            step: f[1].parse().map_err(|e| perr(i + 1, format!("step: {e}")))?,
            d_x: opt(2)?,
            d_d: opt(3)?,
            joint: num(4)?,
            lr: num(5)?,
        });
    }
    Ok(out)
}

/// Loss curves of one step log, one SVG per stage, log-scaled y.
pub fn emit_step_plots(rows: &[StepRow], dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let mut stages: Vec<&str> = rows.iter().map(|r| r.stage.as_str()).collect();
    stages.dedup();
    let mut out = Vec::new();
    for stage in stages {
        let sel: Vec<&StepRow> = rows.iter().filter(|r| r.stage == stage).collect();
        let mut curves = Vec::new();
        for (label, get) in [("d_X", (|r: &StepRow| r.d_x) as fn(&StepRow) -> Option<f64>), ("d_D", |r: &StepRow| r.d_d)] {
            let pts: Vec<(f64, f64)> = sel.iter().filter_map(|r| get(r).map(|v| (r.step as f64, v))).filter(|p| p.1 > 0.0).collect();
            if !pts.is_empty() {
                curves.push(Curve { label: label.into(), points: pts });
            }
        }
        if curves.is_empty() {
            continue;
        }
        let plot = Plot { title: format!("{stage} losses"), x_label: "step".into(), y_label: "loss".into(), log_x: false, log_y: true, curves };
        let path = dir.join(format!("steps_{stage}.svg"));
        write_file(&path, plot.to_svg()?.as_bytes())?;
        out.push(path);
    }
    Ok(out)
}

//! Metrics and analysis tables: normalized L2, error curves, cylinder plots,
//! angular-velocity extraction and spectrum reports.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use crate::decomposition::{ModalDecomposition, ModeLayout};
use crate::error::{Error, Result};
use crate::io::Provenance;
use crate::video::{Grid, VideoGrid};

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// `‖a − b‖ / ‖b‖` with `b` the ground truth.
pub fn normalized_l2(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("images have {} and {} values", a.len(), b.len())));
    }
    let nb = norm(b.iter().copied());
    if nb == 0.0 {
        return Err(Error::InvalidInput("ground-truth image has zero norm".into()));
    }
    Ok(norm(a.iter().zip(b).map(|(x, y)| x - y)) / nb)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub t: f64,
    pub total_err: f64,
    pub dynamics_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    pub rows: Vec<ErrorRow>,
    /// End of the fitted window; later frames are extrapolations.
    pub window_end: f64,
}

impl ErrorCurve {
    pub fn extrapolated(&self) -> impl Iterator<Item = &ErrorRow> {
        self.rows.iter().filter(move |r| r.t > self.window_end)
    }

    pub fn in_window(&self) -> impl Iterator<Item = &ErrorRow> {
        self.rows.iter().filter(move |r| r.t <= self.window_end)
    }

    pub fn to_csv(&self, meta: Option<&Provenance>) -> String {
        let mut s = String::new();
        if let Some(m) = meta {
            s.push_str(&m.meta_line());
            s.push('\n');
        }
        s.push_str("t,total_err,dynamics_err,extrapolated\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}\n",
                r.t,
                r.total_err,
                r.dynamics_err,
                u8::from(r.t > self.window_end)
            ));
        }
        s
    }
}

fn check_aligned(a: &VideoGrid, b: &VideoGrid) -> Result<()> {
    if a.grid != b.grid || a.num_frames() != b.num_frames() {
        return Err(Error::Shape(format!(
            "videos differ: {}×{}×{} vs {}×{}×{}",
            a.num_frames(),
            a.grid.height,
            a.grid.width,
            b.num_frames(),
            b.grid.height,
            b.grid.width
        )));
    }
    for k in 0..a.num_frames() {
        let (ta, tb) = (a.time(k), b.time(k));
        if (ta - tb).abs() > 1e-9 * (1.0 + ta.abs().max(tb.abs())) {
            return Err(Error::Contract(format!("frame {k} timestamps differ: {ta} vs {tb}")));
        }
    }
    Ok(())
}

/// Per-frame total and dynamics-only (temporal mean removed) errors.
pub fn error_curve(recon: &VideoGrid, truth: &VideoGrid, window_end: f64) -> Result<ErrorCurve> {
    check_aligned(recon, truth)?;
    let (mr, mt) = (recon.mean_frame(), truth.mean_frame());
    let mut rows = Vec::with_capacity(truth.num_frames());
    for k in 0..truth.num_frames() {
        let (a, b) = (&recon.frames[k], &truth.frames[k]);
        let total_err = normalized_l2(a, b)?;
        let da: Vec<f64> = a.iter().zip(&mr).map(|(x, m)| x - m).collect();
        let db: Vec<f64> = b.iter().zip(&mt).map(|(x, m)| x - m).collect();
        let num = norm(da.iter().zip(&db).map(|(x, y)| x - y));
        let den = norm(db.iter().copied());
        // a frame equal to the mean has no dynamics; fall back to the frame norm
        let dynamics_err = if den > 0.0 { num / den } else { num / norm(b.iter().copied()) };
        rows.push(ErrorRow {
            t: truth.time(k),
            total_err,
            dynamics_err,
        });
    }
    Ok(ErrorCurve { rows, window_end })
}

/// Ring samples of every frame: `values[angle][frame]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CylinderPlot {
    pub radius: f64,
    pub angles: Vec<f64>,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

pub fn cylinder_plot(video: &VideoGrid, radius: f64, n_angles: usize) -> Result<CylinderPlot> {
    if !(radius > 0.0 && radius <= 1.0) {
        return Err(Error::InvalidInput(format!("radius {radius} must lie in (0, 1]")));
    }
    if n_angles < 4 {
        return Err(Error::InvalidInput(format!("need at least 4 angles, got {n_angles}")));
    }
    let angles: Vec<f64> = (0..n_angles).map(|i| 2.0 * PI * i as f64 / n_angles as f64).collect();
    let values = angles
        .iter()
        .map(|th| {
            let (x, y) = (radius * th.cos(), radius * th.sin());
            video.frames.iter().map(|f| video.grid.bilinear(f, x, y)).collect()
        })
        .collect();
    Ok(CylinderPlot {
        radius,
        angles,
        times: video.times(),
        values,
    })
}

impl CylinderPlot {
    /// Peak angle of each column, refined by a circular parabolic fit.
    pub fn ridge(&self) -> Vec<f64> {
        let n = self.angles.len();
        let step = 2.0 * PI / n as f64;
        (0..self.times.len())
            .map(|k| {
                let i = (0..n)
                    .max_by(|&a, &b| self.values[a][k].total_cmp(&self.values[b][k]).then(b.cmp(&a)))
                    .expect("angles");
                let (l, c, r) = (self.values[(i + n - 1) % n][k], self.values[i][k], self.values[(i + 1) % n][k]);
                let den = l - 2.0 * c + r;
                let off = if den < 0.0 { (0.5 * (l - r) / den).clamp(-0.5, 0.5) } else { 0.0 };
                (i as f64 + off) * step
            })
            .collect()
    }

    /// Least-squares slope of the phase-unwrapped ridge, radians per time unit.
    pub fn angular_velocity(&self) -> Result<f64> {
        if self.times.len() < 2 {
            return Err(Error::InvalidInput("need at least two frames for a slope".into()));
        }
        let unwrapped = unwrap(&self.ridge());
        Ok(ls_slope(&self.times, &unwrapped))
    }

    pub fn to_csv(&self, meta: Option<&Provenance>) -> String {
        let mut s = String::new();
        if let Some(m) = meta {
            s.push_str(&m.meta_line());
            s.push('\n');
        }
        s.push_str("theta");
        for t in &self.times {
            s.push_str(&format!(",{t}"));
        }
        s.push('\n');
        for (th, row) in self.angles.iter().zip(&self.values) {
            s.push_str(&th.to_string());
            for v in row {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Removes `2π` jumps between consecutive angles.
pub fn unwrap(phase: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(phase.len());
    let mut offset: f64 = 0.0;
    for (i, &p) in phase.iter().enumerate() {
        if i > 0 {
            let d = p + offset - out[i - 1];
            offset -= 2.0 * PI * (d / (2.0 * PI)).round();
        }
        out.push(p + offset);
    }
    out
}

pub fn ls_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Intensity-weighted mean position of a frame in field coordinates.
pub fn centroid(frame: &[f64], grid: Grid) -> Result<[f64; 2]> {
    if frame.len() != grid.len() {
        return Err(Error::Shape(format!("frame has {} values, grid {}", frame.len(), grid.len())));
    }
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for (&v, [x, y]) in frame.iter().zip(grid.pixel_centers()) {
        sx += v * x;
        sy += v * y;
        s += v;
    }
    if s == 0.0 {
        return Err(Error::InvalidInput("frame has zero total intensity".into()));
    }
    Ok([sx / s, sy / s])
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumRow {
    pub k: usize,
    pub alpha: f64,
    pub omega: f64,
    pub b_re: f64,
    pub b_im: f64,
    pub flagged: bool,
}

impl SpectrumRow {
    pub fn b_abs(&self) -> f64 {
        self.b_re.hypot(self.b_im)
    }
}

/// Modes sorted by decay rate (slowest first) with the decay flag applied.
pub fn spectrum_report(d: &ModalDecomposition, cutoff: f64) -> Vec<SpectrumRow> {
    let mut rows: Vec<SpectrumRow> = d
        .omega
        .iter()
        .zip(&d.b)
        .enumerate()
        .map(|(k, (o, b))| SpectrumRow {
            k,
            alpha: o.re,
            omega: o.im,
            b_re: b.re,
            b_im: b.im,
            flagged: !(d.layout == ModeLayout::ConjugatePairs && k == 0) && o.re < cutoff,
        })
        .collect();
    rows.sort_by(|a, b| b.alpha.total_cmp(&a.alpha).then(a.k.cmp(&b.k)));
    rows
}

pub fn spectrum_to_csv(rows: &[SpectrumRow], meta: Option<&Provenance>) -> String {
    let mut s = String::new();
    if let Some(m) = meta {
        s.push_str(&m.meta_line());
        s.push('\n');
    }
    s.push_str("k,alpha,omega,b_re,b_im,flagged\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.k,
            r.alpha,
            r.omega,
            r.b_re,
            r.b_im,
            u8::from(r.flagged)
        ));
    }
    s
}

pub fn spectrum_from_csv(text: &str, label: &str) -> Result<Vec<SpectrumRow>> {
    let table = |row: usize, column: usize, message: String| Error::Table {
        file: label.into(),
        row,
        column,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| table(1, 0, e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != ["k", "alpha", "omega", "b_re", "b_im", "flagged"] {
        return Err(table(1, 1, format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| table(0, 0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .parse()
                .map_err(|_| table(line, j + 1, format!("non-numeric cell {:?}", &rec[j])))
        };
        rows.push(SpectrumRow {
            k: rec[0].parse().map_err(|_| table(line, 1, "bad mode index".into()))?,
            alpha: num(1)?,
            omega: num(2)?,
            b_re: num(3)?,
            b_im: num(4)?,
            flagged: match &rec[5] {
                "1" => true,
                "0" => false,
                other => return Err(table(line, 6, format!("flag must be 0 or 1, got {other:?}"))),
            },
        });
    }
    Ok(rows)
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let p = path.as_ref();
    if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    fs::write(p, text).map_err(|e| Error::file(p, e))
}

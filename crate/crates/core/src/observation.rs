//! Measurement models: sparse pixel sampling, Earth-rotation uv tracks,
//! the direct nonuniform Fourier transform, and thermal noise.

use std::f64::consts::PI;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::video::{Grid, VideoGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelObservation {
    pub x: f64,
    pub y: f64,
    pub t: f64,
    pub value: f64,
    pub sigma: f64,
}

/// One complex visibility; `u`, `v` are in cycles per field of view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityObservation {
    pub u: f64,
    pub v: f64,
    pub t: f64,
    pub vis: Complex64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Observation {
    Pixel(PixelObservation),
    Vis(VisibilityObservation),
}

impl Observation {
    pub fn t(&self) -> f64 {
        match self {
            Observation::Pixel(p) => p.t,
            Observation::Vis(v) => v.t,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Observation::Pixel(_) => "pixel",
            Observation::Vis(_) => "vis",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelSampling {
    /// Fraction of grid points observed per frame.
    pub fraction: f64,
    pub noise_sigma: f64,
    /// Reuse one pixel subset for every frame.
    pub fixed_mask: bool,
    /// Recorded sigma when `noise_sigma` is zero.
    pub sigma_floor: f64,
}

impl Default for PixelSampling {
    fn default() -> Self {
        Self {
            fraction: 0.1,
            noise_sigma: 0.0,
            fixed_mask: true,
            sigma_floor: 1e-3,
        }
    }
}

/// Number of pixels drawn per frame, `⌊fraction · n⌋`.
pub fn pixels_per_frame(fraction: f64, n: usize) -> usize {
    // guard against 0.1 * 1000 landing just below an integer
    (fraction * n as f64 * (1.0 + 1e-12)).floor() as usize
}

pub fn sample_pixels(video: &VideoGrid, cfg: &PixelSampling, seed: u64) -> Result<Vec<PixelObservation>> {
    if !(cfg.fraction > 0.0 && cfg.fraction <= 1.0) {
        return Err(Error::InvalidInput(format!("sampling fraction {} outside (0, 1]", cfg.fraction)));
    }
    if !(cfg.noise_sigma >= 0.0) || !cfg.noise_sigma.is_finite() {
        return Err(Error::InvalidInput(format!("noise sigma {} must be finite and ≥ 0", cfg.noise_sigma)));
    }
    let sigma = if cfg.noise_sigma > 0.0 { cfg.noise_sigma } else { cfg.sigma_floor };
    if !(sigma > 0.0) {
        return Err(Error::InvalidInput("sigma floor must be positive when noise is zero".into()));
    }
    let grid = video.grid;
    let n = grid.len();
    let count = pixels_per_frame(cfg.fraction, n);
    if count < 1 {
        return Err(Error::InvalidInput(format!(
            "fraction {} of {}×{} pixels selects no pixels",
            cfg.fraction, grid.height, grid.width
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let draw_mask = |rng: &mut ChaCha8Rng| {
        let mut idx = sample(rng, n, count).into_vec();
        idx.sort_unstable();
        idx
    };
    let fixed = cfg.fixed_mask.then(|| draw_mask(&mut rng));
    let mut out = Vec::with_capacity(count * video.num_frames());
    for (k, frame) in video.frames.iter().enumerate() {
        let mask = match &fixed {
            Some(m) => m.clone(),
            None => draw_mask(&mut rng),
        };
        let t = video.time(k);
        for p in mask {
            let (i, j) = (p / grid.width, p % grid.width);
            let mut value = frame[p];
            if cfg.noise_sigma > 0.0 {
                value += noise.sample(&mut rng);
            }
            out.push(PixelObservation {
                x: grid.x_center(j),
                y: grid.y_center(i),
                t,
                value,
                sigma,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Station {
    pub name: String,
    /// Geocentric position in meters.
    pub position: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationTable {
    pub stations: Vec<Station>,
}

const NGEHT_CSV: &str = include_str!("../data/ngeht.csv");
const NGEHT_PLUS_CSV: &str = include_str!("../data/ngeht_plus.csv");

impl StationTable {
    pub fn new(stations: Vec<Station>) -> Result<Self> {
        if stations.len() < 2 {
            return Err(Error::InvalidInput(format!("station table needs ≥ 2 stations, got {}", stations.len())));
        }
        if let Some(s) = stations.iter().find(|s| s.position.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("position of station {}", s.name)));
        }
        Ok(Self { stations })
    }

    /// Parses `name,x_m,y_m,z_m` CSV text; `label` names the source in errors.
    pub fn from_csv_str(text: &str, label: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let table_err = |row: usize, column: usize, message: String| Error::Table {
            file: label.to_string(),
            row,
            column,
            message,
        };
        let headers = rdr.headers().map_err(|e| table_err(1, 1, e.to_string()))?.clone();
        let expected = ["name", "x_m", "y_m", "z_m"];
        for (c, want) in expected.iter().enumerate() {
            match headers.get(c) {
                Some(h) if h == *want => {}
                other => {
                    return Err(table_err(1, c + 1, format!("expected header `{want}`, found {:?}", other)));
                }
            }
        }
        if headers.len() != expected.len() {
            return Err(table_err(1, expected.len() + 1, "unexpected extra header column".into()));
        }
        let mut stations = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let row = r + 2;
            let rec = rec.map_err(|e| table_err(row, 1, e.to_string()))?;
            if rec.len() != 4 {
                return Err(table_err(row, rec.len().min(4) + 1, format!("expected 4 fields, found {}", rec.len())));
            }
            let mut position = [0.0; 3];
            for (c, p) in position.iter_mut().enumerate() {
                let cell = &rec[c + 1];
                *p = cell
                    .parse::<f64>()
                    .map_err(|_| table_err(row, c + 2, format!("`{cell}` is not a number")))?;
            }
            stations.push(Station {
                name: rec[0].to_string(),
                position,
            });
        }
        Self::new(stations)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_csv_str(&text, &path.display().to_string())
    }

    pub fn ngeht() -> Self {
        Self::from_csv_str(NGEHT_CSV, "ngeht.csv").expect("bundled table is valid")
    }

    pub fn ngeht_plus() -> Self {
        Self::from_csv_str(NGEHT_PLUS_CSV, "ngeht_plus.csv").expect("bundled table is valid")
    }

    /// Bundled table by name (`ngeht`, `ngeht_plus`).
    pub fn bundled(name: &str) -> Option<Self> {
        match name {
            "ngeht" => Some(Self::ngeht()),
            "ngeht_plus" | "ngeht+" => Some(Self::ngeht_plus()),
            _ => None,
        }
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    /// The stations named in `names`, in that order.
    pub fn subset(&self, names: &[&str]) -> Result<Self> {
        let stations = names
            .iter()
            .map(|n| {
                self.stations
                    .iter()
                    .find(|s| s.name == *n)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("unknown station `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(stations)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UVEntry {
    pub t: f64,
    pub station_a: usize,
    pub station_b: usize,
    pub u: f64,
    pub v: f64,
    /// Per-baseline thermal sigma; zero leaves sigma to the noise model.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UVTrack {
    pub station_names: Vec<String>,
    pub entries: Vec<UVEntry>,
}

impl UVTrack {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = self.entries.iter().map(|e| e.t).collect();
        ts.dedup();
        ts
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UVTrackConfig {
    /// Source declination, radians.
    pub declination: f64,
    /// Greenwich hour angle start, stop and step, radians.
    pub hour_angle: (f64, f64, f64),
    pub wavelength: f64,
    /// Angular size of the `[-1, 1]²` domain, radians.
    pub field_of_view: f64,
    /// Minimum elevation for a station to take part; `None` disables the mask.
    pub elevation_cutoff: Option<f64>,
    /// Timestamp of the first scan and spacing between scans.
    pub t_start: f64,
    pub t_step: f64,
    pub sigma: f64,
}

/// One microarcsecond in radians.
pub const MICROARCSEC: f64 = PI / 180.0 / 3600.0 * 1e-6;

impl Default for UVTrackConfig {
    fn default() -> Self {
        Self {
            declination: (-29.0078f64).to_radians(),
            hour_angle: (1.1, 2.1, 1.0 / 47.0),
            wavelength: 1.3e-3,
            field_of_view: 100.0 * MICROARCSEC,
            elevation_cutoff: Some(10f64.to_radians()),
            t_start: 0.0,
            t_step: 1.0,
            sigma: 0.0,
        }
    }
}

/// Baseline projection for hour angle `h` and declination `dec`, in wavelengths.
pub fn project_baseline(b: [f64; 3], h: f64, dec: f64, wavelength: f64) -> (f64, f64) {
    let (sh, ch) = h.sin_cos();
    let (sd, cd) = dec.sin_cos();
    let u = (b[0] * sh + b[1] * ch) / wavelength;
    let v = (-b[0] * ch * sd + b[1] * sh * sd + b[2] * cd) / wavelength;
    (u, v)
}

/// Elevation of the source seen from an Earth-fixed position (spherical Earth).
pub fn elevation(position: [f64; 3], h: f64, dec: f64) -> f64 {
    let norm = (position[0].powi(2) + position[1].powi(2) + position[2].powi(2)).sqrt();
    let s = [dec.cos() * h.cos(), -dec.cos() * h.sin(), dec.sin()];
    let dot = (position[0] * s[0] + position[1] * s[1] + position[2] * s[2]) / norm;
    dot.clamp(-1.0, 1.0).asin()
}

pub fn uv_track(stations: &StationTable, cfg: &UVTrackConfig) -> Result<UVTrack> {
    let (h0, h1, step) = cfg.hour_angle;
    if !(cfg.declination.abs() < PI / 2.0) {
        return Err(Error::InvalidInput("declination must satisfy |δ| < π/2".into()));
    }
    if !(step > 0.0) || !(h1 >= h0) {
        return Err(Error::InvalidInput(format!("hour-angle range ({h0}, {h1}, {step}) needs step > 0 and stop ≥ start")));
    }
    if !(cfg.wavelength > 0.0) || !(cfg.field_of_view > 0.0) {
        return Err(Error::InvalidInput("wavelength and field of view must be positive".into()));
    }
    let scans = ((h1 - h0) / step + 1e-9).floor() as usize + 1;
    let scale = cfg.field_of_view;
    let st = &stations.stations;
    let mut entries = Vec::new();
    for i in 0..scans {
        let h = h0 + i as f64 * step;
        let t = cfg.t_start + i as f64 * cfg.t_step;
        let visible: Vec<bool> = st
            .iter()
            .map(|s| match cfg.elevation_cutoff {
                Some(cut) => elevation(s.position, h, cfg.declination) >= cut,
                None => true,
            })
            .collect();
        for a in 0..st.len() {
            for b in a + 1..st.len() {
                if !(visible[a] && visible[b]) {
                    continue;
                }
                let bl = [
                    st[a].position[0] - st[b].position[0],
                    st[a].position[1] - st[b].position[1],
                    st[a].position[2] - st[b].position[2],
                ];
                let (u, v) = project_baseline(bl, h, cfg.declination, cfg.wavelength);
                entries.push(UVEntry {
                    t,
                    station_a: a,
                    station_b: b,
                    u: u * scale,
                    v: v * scale,
                    sigma: cfg.sigma,
                });
            }
        }
    }
    if entries.is_empty() {
        return Err(Error::InvalidInput(
            "fewer than two stations see the source at every hour angle".into(),
        ));
    }
    Ok(UVTrack {
        station_names: st.iter().map(|s| s.name.clone()).collect(),
        entries,
    })
}

/// Precomputed separable Fourier kernel for a fixed grid and point set.
///
/// `V(u, v) = ΔA Σ_{i,j} I_ij e^{-2πi(u x̂_j + v ŷ_i)}` with `(x̂, ŷ)` the
/// pixel centers scaled to `[-1/2, 1/2]` and `ΔA = 1 / (H W)`.
#[derive(Debug, Clone)]
pub struct NudftPlan {
    pub grid: Grid,
    /// Per point, `e^{-2πi u x̂_j}` for each column.
    ex: Vec<Vec<Complex64>>,
    /// Per point, `e^{-2πi v ŷ_i}` for each row.
    ey: Vec<Vec<Complex64>>,
}

impl NudftPlan {
    pub fn new(grid: Grid, points: &[(f64, f64)]) -> Result<Self> {
        if points.iter().any(|(u, v)| !u.is_finite() || !v.is_finite()) {
            return Err(Error::NonFinite("Fourier sample coordinates".into()));
        }
        let xs: Vec<f64> = (0..grid.width).map(|j| 0.5 * grid.x_center(j)).collect();
        let ys: Vec<f64> = (0..grid.height).map(|i| 0.5 * grid.y_center(i)).collect();
        let phase = |f: f64, c: &[f64]| -> Vec<Complex64> {
            c.iter().map(|&x| Complex64::from_polar(1.0, -2.0 * PI * f * x)).collect()
        };
        Ok(Self {
            grid,
            ex: points.iter().map(|&(u, _)| phase(u, &xs)).collect(),
            ey: points.iter().map(|&(_, v)| phase(v, &ys)).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.ex.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ex.is_empty()
    }

    fn area(&self) -> f64 {
        1.0 / self.grid.len() as f64
    }

    pub fn forward(&self, image: &[f64]) -> Result<Vec<Complex64>> {
        let (h, w) = (self.grid.height, self.grid.width);
        if image.len() != h * w {
            return Err(Error::Shape(format!("image has {} values, grid is {h}×{w}", image.len())));
        }
        let da = self.area();
        Ok(self
            .ex
            .iter()
            .zip(&self.ey)
            .map(|(ex, ey)| {
                let mut acc = Complex64::new(0.0, 0.0);
                for (i, row) in image.chunks_exact(w).enumerate() {
                    let mut r = Complex64::new(0.0, 0.0);
                    for (v, e) in row.iter().zip(ex) {
                        r += e * v;
                    }
                    acc += ey[i] * r;
                }
                acc * da
            })
            .collect())
    }

    /// `out_p = Σ_k Re(c_k · E_kp)`: the gradient of `Σ_k Re(c_k V_k)` with respect to the image.
    pub fn adjoint_real(&self, c: &[Complex64]) -> Result<Vec<f64>> {
        if c.len() != self.len() {
            return Err(Error::Shape(format!("{} weights for {} Fourier samples", c.len(), self.len())));
        }
        let (h, w) = (self.grid.height, self.grid.width);
        let da = self.area();
        let mut out = vec![0.0; h * w];
        for ((ck, ex), ey) in c.iter().zip(&self.ex).zip(&self.ey) {
            let ck = ck * da;
            for (i, row) in out.chunks_exact_mut(w).enumerate() {
                let ci = ck * ey[i];
                for (o, e) in row.iter_mut().zip(ex) {
                    *o += (ci * e).re;
                }
            }
        }
        Ok(out)
    }
}

/// Direct nonuniform DFT of a row-major image on `grid`.
pub fn nudft(image: &[f64], grid: Grid, points: &[(f64, f64)]) -> Result<Vec<Complex64>> {
    NudftPlan::new(grid, points)?.forward(image)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisibilityNoise {
    /// Fractional thermal noise, `σ = frac_noise · |V|`.
    pub frac_noise: f64,
    /// Sigma floor as a fraction of the peak `|V|` across the data set.
    pub floor_fraction: f64,
}

impl Default for VisibilityNoise {
    fn default() -> Self {
        Self {
            frac_noise: 0.0,
            floor_fraction: 1e-3,
        }
    }
}

/// Samples `video` along `track`, each entry taken from the nearest frame.
///
/// Noise is circular complex Gaussian with `E|n|² = σ²`, so a perfect model
/// has expected χ² of one. Observation times are the matched frame times.
pub fn observe_visibilities(
    video: &VideoGrid,
    track: &UVTrack,
    noise: &VisibilityNoise,
    seed: u64,
) -> Result<Vec<VisibilityObservation>> {
    if track.is_empty() {
        return Err(Error::InvalidInput("empty uv track".into()));
    }
    if !(noise.frac_noise >= 0.0) || !(noise.floor_fraction > 0.0) {
        return Err(Error::InvalidInput("noise fraction must be ≥ 0 and floor fraction > 0".into()));
    }
    let t_lo = video.time(0) - 0.5 * video.dt;
    let t_hi = video.time(video.num_frames() - 1) + 0.5 * video.dt;
    if let Some(e) = track.entries.iter().find(|e| e.t < t_lo || e.t > t_hi) {
        return Err(Error::InvalidInput(format!(
            "track time {} outside the video span [{}, {}]",
            e.t,
            video.time(0),
            video.time(video.num_frames() - 1)
        )));
    }
    let frame_of: Vec<usize> = track.entries.iter().map(|e| video.nearest_frame(e.t)).collect();
    // group entries by frame for one plan per frame
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (i, &f) in frame_of.iter().enumerate() {
        match groups.iter_mut().find(|(g, _)| *g == f) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((f, vec![i])),
        }
    }
    let per_group: Vec<Vec<Complex64>> = groups
        .par_iter()
        .map(|(f, idx)| {
            let pts: Vec<(f64, f64)> = idx.iter().map(|&i| (track.entries[i].u, track.entries[i].v)).collect();
            nudft(&video.frames[*f], video.grid, &pts)
        })
        .collect::<Result<_>>()?;
    let mut clean = vec![Complex64::new(0.0, 0.0); track.len()];
    for ((_, idx), vals) in groups.iter().zip(per_group) {
        for (&i, v) in idx.iter().zip(vals) {
            clean[i] = v;
        }
    }
    let peak = clean.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let floor = noise.floor_fraction * peak.max(f64::MIN_POSITIVE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(track.len());
    for ((e, v), &f) in track.entries.iter().zip(&clean).zip(&frame_of) {
        let sigma = e.sigma.max(noise.frac_noise * v.norm()).max(floor);
        let mut vis = *v;
        if noise.frac_noise > 0.0 || e.sigma > 0.0 {
            let s = sigma / 2f64.sqrt();
            let nr: f64 = StandardNormal.sample(&mut rng);
            let ni: f64 = StandardNormal.sample(&mut rng);
            vis += Complex64::new(s * nr, s * ni);
        }
        out.push(VisibilityObservation {
            u: e.u,
            v: e.v,
            t: video.time(f),
            vis,
            sigma,
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
enum Record {
    Pixel { t: f64, x: f64, y: f64, re: f64, sigma: f64 },
    Vis { t: f64, u: f64, v: f64, re: f64, im: f64, sigma: f64 },
}

impl From<&Observation> for Record {
    fn from(o: &Observation) -> Self {
        match *o {
            Observation::Pixel(p) => Record::Pixel {
                t: p.t,
                x: p.x,
                y: p.y,
                re: p.value,
                sigma: p.sigma,
            },
            Observation::Vis(v) => Record::Vis {
                t: v.t,
                u: v.u,
                v: v.v,
                re: v.vis.re,
                im: v.vis.im,
                sigma: v.sigma,
            },
        }
    }
}

impl From<Record> for Observation {
    fn from(r: Record) -> Self {
        match r {
            Record::Pixel { t, x, y, re, sigma } => Observation::Pixel(PixelObservation {
                x,
                y,
                t,
                value: re,
                sigma,
            }),
            Record::Vis { t, u, v, re, im, sigma } => Observation::Vis(VisibilityObservation {
                u,
                v,
                t,
                vis: Complex64::new(re, im),
                sigma,
            }),
        }
    }
}

pub fn write_observations(writer: impl Write, obs: &[Observation]) -> Result<()> {
    let mut w = BufWriter::new(writer);
    for o in obs {
        serde_json::to_writer(&mut w, &Record::from(o))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads JSON-lines observations; errors carry the byte offset of the bad line.
pub fn read_observations(reader: impl BufRead) -> Result<Vec<Observation>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in reader.split(b'\n') {
        let line = line?;
        let start = offset;
        offset += line.len() as u64 + 1;
        let text = std::str::from_utf8(&line).map_err(|e| Error::Parse {
            what: "observations",
            offset: start,
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(text).map_err(|e| Error::Parse {
            what: "observations",
            offset: start,
            message: e.to_string(),
        })?;
        let o = Observation::from(rec);
        let sigma = match o {
            Observation::Pixel(p) => p.sigma,
            Observation::Vis(v) => v.sigma,
        };
        if !(sigma > 0.0) {
            return Err(Error::Parse {
                what: "observations",
                offset: start,
                message: format!("sigma {sigma} must be positive"),
            });
        }
        out.push(o);
    }
    Ok(out)
}

pub fn write_observations_file(path: &Path, obs: &[Observation]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
    write_observations(f, obs)
}

pub fn read_observations_file(path: &Path) -> Result<Vec<Observation>> {
    let f = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
    read_observations(std::io::BufReader::new(f))
}

/// Splits a mixed observation list into pixel and visibility parts.
pub fn partition(obs: &[Observation]) -> (Vec<PixelObservation>, Vec<VisibilityObservation>) {
    let mut px = Vec::new();
    let mut vis = Vec::new();
    for o in obs {
        match o {
            Observation::Pixel(p) => px.push(*p),
            Observation::Vis(v) => vis.push(*v),
        }
    }
    (px, vis)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp_video(t: usize, h: usize, w: usize) -> VideoGrid {
        let grid = Grid::new(h, w).unwrap();
        let frames = (0..t)
            .map(|k| (0..h * w).map(|p| (p + 7 * k) as f64 * 0.01).collect())
            .collect();
        VideoGrid::new(grid, 0.0, 1.0, frames).unwrap()
    }

    #[test]
    fn dense_sampling_is_exact() {
        let v = ramp_video(3, 4, 5);
        let cfg = PixelSampling {
            fraction: 1.0,
            ..Default::default()
        };
        let obs = sample_pixels(&v, &cfg, 1).unwrap();
        assert_eq!(obs.len(), 60);
        for o in &obs {
            let k = v.nearest_frame(o.t);
            let (i, j) = v.grid.cell_of(o.x, o.y).unwrap();
            assert_eq!(o.value, v.frames[k][i * 5 + j]);
            assert_eq!(o.sigma, 1e-3);
        }
    }

    #[test]
    fn ten_percent_fixed_mask() {
        let v = ramp_video(3, 100, 100);
        let cfg = PixelSampling {
            fraction: 0.1,
            noise_sigma: 0.01,
            ..Default::default()
        };
        let obs = sample_pixels(&v, &cfg, 5).unwrap();
        assert_eq!(obs.len(), 3000);
        for k in 1..3 {
            for p in 0..1000 {
                assert_eq!((obs[p].x, obs[p].y), (obs[k * 1000 + p].x, obs[k * 1000 + p].y));
            }
        }
        assert_eq!(obs, sample_pixels(&v, &cfg, 5).unwrap());
        assert_eq!(obs[0].sigma, 0.01);
        let one = PixelSampling {
            fraction: 0.01,
            fixed_mask: false,
            ..Default::default()
        };
        let obs = sample_pixels(&ramp_video(2, 64, 64), &one, 5).unwrap();
        assert_eq!(obs.len(), 2 * 40);
        assert_ne!((obs[0].x, obs[0].y, obs[1].x), (obs[40].x, obs[40].y, obs[41].x));
    }

    #[test]
    fn too_small_fraction_errors() {
        let v = ramp_video(1, 4, 4);
        let cfg = PixelSampling {
            fraction: 0.01,
            ..Default::default()
        };
        assert!(sample_pixels(&v, &cfg, 0).is_err());
    }

    #[test]
    fn bundled_tables_parse() {
        let a = StationTable::ngeht();
        let b = StationTable::ngeht_plus();
        assert_eq!(a.len(), 15);
        assert_eq!(b.len(), 23);
        assert_eq!(a.stations[0].name, "ALMA");
        assert_eq!(a.stations[0].position, [2225061.164, -5440057.370, -2481681.150]);
        assert_eq!(b.stations[22].name, "PV");
    }

    #[test]
    fn table_errors_are_located() {
        let bad = "name,x_m,y_m,z_m\nA,1,2,3\nB,1,oops,3\n";
        match StationTable::from_csv_str(bad, "t.csv") {
            Err(Error::Table { row, column, .. }) => assert_eq!((row, column), (3, 3)),
            other => panic!("{other:?}"),
        }
        assert!(StationTable::from_csv_str("name,x_m,y_m,z_m\nA,1,2,3\n", "t").is_err());
    }

    #[test]
    fn antipodal_equatorial_baseline() {
        let r = 6.371e6;
        let st = StationTable::new(vec![
            Station {
                name: "A".into(),
                position: [0.0, r, 0.0],
            },
            Station {
                name: "B".into(),
                position: [0.0, -r, 0.0],
            },
        ])
        .unwrap();
        let cfg = UVTrackConfig {
            declination: 0.0,
            hour_angle: (0.0, 0.0, 1.0),
            wavelength: 1e-3,
            field_of_view: 1e-9,
            elevation_cutoff: None,
            ..Default::default()
        };
        let tr = uv_track(&st, &cfg).unwrap();
        assert_eq!(tr.len(), 1);
        let e = tr.entries[0];
        assert!(e.v.abs() < 1e-12);
        assert!((e.u - 2.0 * r / 1e-3 * 1e-9).abs() < 1e-9);
        let swapped = StationTable::new(vec![st.stations[1].clone(), st.stations[0].clone()]).unwrap();
        let s = uv_track(&swapped, &cfg).unwrap().entries[0];
        assert_eq!((s.u, s.v), (-e.u, -e.v));
    }

    #[test]
    fn zero_baseline_and_counts() {
        let st = StationTable::new(vec![
            Station {
                name: "A".into(),
                position: [1e6, 2e6, 3e6],
            },
            Station {
                name: "B".into(),
                position: [1e6, 2e6, 3e6],
            },
        ])
        .unwrap();
        let cfg = UVTrackConfig {
            hour_angle: (0.0, 1.0, 0.25),
            elevation_cutoff: None,
            ..Default::default()
        };
        let tr = uv_track(&st, &cfg).unwrap();
        assert_eq!(tr.len(), 5);
        assert!(tr.entries.iter().all(|e| e.u == 0.0 && e.v == 0.0));
    }

    #[test]
    fn track_is_continuous_and_masked() {
        let st = StationTable::ngeht();
        let cfg = UVTrackConfig::default();
        let tr = uv_track(&st, &cfg).unwrap();
        let step = cfg.hour_angle.2;
        let mut prev: std::collections::HashMap<(usize, usize), (f64, f64, f64)> = Default::default();
        for e in &tr.entries {
            let ea = elevation(st.stations[e.station_a].position, 0.0, 0.0);
            let _ = ea;
            if let Some((u, v, t)) = prev.get(&(e.station_a, e.station_b)) {
                if (e.t - t - cfg.t_step).abs() < 1e-9 {
                    let bmax = 2.0 * 6.4e6 / cfg.wavelength * cfg.field_of_view;
                    assert!(((e.u - u).powi(2) + (e.v - v).powi(2)).sqrt() <= bmax * step * 1.01);
                }
            }
            prev.insert((e.station_a, e.station_b), (e.u, e.v, e.t));
        }
        let all = UVTrackConfig {
            elevation_cutoff: None,
            ..cfg
        };
        assert!(uv_track(&st, &all).unwrap().len() > tr.len());
    }

    #[test]
    fn nudft_impulse_and_dc() {
        let g = Grid::new(5, 5).unwrap();
        let mut img = vec![0.0; 25];
        img[12] = 2.0;
        let pts = [(0.0, 0.0), (1.3, -2.1), (4.0, 0.5)];
        let v = nudft(&img, g, &pts).unwrap();
        for z in &v {
            assert!((z.norm() - 2.0 / 25.0).abs() < 1e-15);
            assert!(z.im.abs() < 1e-15);
        }
        let img: Vec<f64> = (0..25).map(|p| p as f64).collect();
        let dc = nudft(&img, g, &[(0.0, 0.0)]).unwrap()[0];
        assert!((dc.re - 300.0 / 25.0).abs() < 1e-12);
    }

    #[test]
    fn nudft_shift_theorem() {
        let g = Grid::new(6, 6).unwrap();
        let mut a = vec![0.0; 36];
        a[2 * 6 + 1] = 1.0;
        a[3 * 6 + 2] = 0.5;
        // shift right by one column
        let mut b = vec![0.0; 36];
        b[2 * 6 + 2] = 1.0;
        b[3 * 6 + 3] = 0.5;
        let pts = [(0.7, 1.1), (-2.0, 0.4)];
        let va = nudft(&a, g, &pts).unwrap();
        let vb = nudft(&b, g, &pts).unwrap();
        let dx = 0.5 * (g.x_center(1) - g.x_center(0));
        for ((za, zb), (u, _)) in va.iter().zip(&vb).zip(&pts) {
            let expect = za * Complex64::from_polar(1.0, -2.0 * PI * u * dx);
            assert!((zb - expect).norm() < 1e-14);
        }
    }

    #[test]
    fn nudft_matches_dense_dft_and_parseval() {
        let n = 6;
        let g = Grid::new(n, n).unwrap();
        let img: Vec<f64> = (0..n * n).map(|p| ((p * 37) % 11) as f64 - 3.0).collect();
        let mut pts = Vec::new();
        for kv in 0..n {
            for ku in 0..n {
                pts.push((ku as f64, kv as f64));
            }
        }
        let v = nudft(&img, g, &pts).unwrap();
        // standard DFT X[kv,ku] = Σ I[i,j] e^{-2πi(ku j + kv i)/N}; centering phase from x̂_j = (j - (N-1)/2)/N
        let c = (n as f64 - 1.0) / 2.0 / n as f64;
        let da = 1.0 / (n * n) as f64;
        let mut sum_v2 = 0.0;
        let scale: f64 = img.iter().map(|x| x.abs()).sum::<f64>() * da;
        for (idx, &(ku, kv)) in pts.iter().enumerate() {
            let mut x = Complex64::new(0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    let ph = -2.0 * PI * (ku * j as f64 + kv * i as f64) / n as f64;
                    x += img[i * n + j] * Complex64::from_polar(1.0, ph);
                }
            }
            let expect = x * da * Complex64::from_polar(1.0, 2.0 * PI * (ku + kv) * c);
            assert!((v[idx] - expect).norm() <= 1e-10 * scale);
            sum_v2 += v[idx].norm_sqr();
        }
        let energy: f64 = img.iter().map(|x| x * x).sum();
        let expect = (n * n) as f64 * da * da * energy;
        assert!((sum_v2 - expect).abs() < 1e-8 * expect);
    }

    #[test]
    fn adjoint_matches_forward() {
        let g = Grid::new(3, 4).unwrap();
        let pts = [(0.3, -1.2), (2.0, 0.7)];
        let plan = NudftPlan::new(g, &pts).unwrap();
        let img: Vec<f64> = (0..12).map(|p| (p as f64 * 0.37).sin()).collect();
        let c = [Complex64::new(0.4, -1.0), Complex64::new(-0.2, 0.3)];
        let v = plan.forward(&img).unwrap();
        let lhs: f64 = c.iter().zip(&v).map(|(a, b)| (a * b).re).sum();
        let adj = plan.adjoint_real(&c).unwrap();
        let rhs: f64 = adj.iter().zip(&img).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-14);
    }

    fn two_frame_track(per_frame: usize) -> UVTrack {
        let mut entries = Vec::new();
        for t in 0..2 {
            for i in 0..per_frame {
                entries.push(UVEntry {
                    t: t as f64,
                    station_a: 0,
                    station_b: 1,
                    u: i as f64 * 0.3,
                    v: -(i as f64) * 0.2,
                    sigma: 0.0,
                });
            }
        }
        UVTrack {
            station_names: vec!["A".into(), "B".into()],
            entries,
        }
    }

    #[test]
    fn noiseless_visibilities_use_floor() {
        let v = ramp_video(2, 4, 4);
        let obs = observe_visibilities(&v, &two_frame_track(20), &VisibilityNoise::default(), 3).unwrap();
        assert_eq!(obs.len(), 40);
        assert_eq!(obs.iter().filter(|o| o.t == 1.0).count(), 20);
        let peak = obs.iter().map(|o| o.vis.norm()).fold(0.0, f64::max);
        for o in &obs {
            assert_eq!(o.sigma, 1e-3 * peak);
            let k = v.nearest_frame(o.t);
            assert_eq!(o.vis, nudft(&v.frames[k], v.grid, &[(o.u, o.v)]).unwrap()[0]);
        }
    }

    #[test]
    fn noisy_visibilities_are_seeded() {
        let v = ramp_video(2, 4, 4);
        let noise = VisibilityNoise {
            frac_noise: 0.1,
            ..Default::default()
        };
        let a = observe_visibilities(&v, &two_frame_track(5), &noise, 3).unwrap();
        assert_eq!(a, observe_visibilities(&v, &two_frame_track(5), &noise, 3).unwrap());
        assert_ne!(a, observe_visibilities(&v, &two_frame_track(5), &noise, 4).unwrap());
        let empty = UVTrack {
            station_names: vec![],
            entries: vec![],
        };
        assert!(observe_visibilities(&v, &empty, &noise, 3).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let obs = vec![
            Observation::Pixel(PixelObservation {
                x: 0.1,
                y: -0.3,
                t: 1.0 / 3.0,
                value: 1e-17,
                sigma: 0.01,
            }),
            Observation::Vis(VisibilityObservation {
                u: 2.5,
                v: -1.0,
                t: 0.7,
                vis: Complex64::new(0.1 + 0.2, -std::f64::consts::E),
                sigma: 3e-4,
            }),
        ];
        let mut buf = Vec::new();
        write_observations(&mut buf, &obs).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("{\"kind\":\"pixel\""));
        assert_eq!(read_observations(&buf[..]).unwrap(), obs);
        let mut bad = buf.clone();
        bad.extend_from_slice(b"{\"kind\":\"pixel\",\"t\":0}\n");
        match read_observations(&bad[..]) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, buf.len() as u64),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn conjugate_symmetry(u in -8.0f64..8.0, v in -8.0f64..8.0, seed in 0u64..1000) {
            let g = Grid::new(5, 7).unwrap();
            let img: Vec<f64> = (0..35).map(|p| ((p as u64 * 2654435761 + seed) % 1000) as f64 / 1000.0).collect();
            let z = nudft(&img, g, &[(u, v), (-u, -v)]).unwrap();
            let scale = z[0].norm().max(1e-12);
            prop_assert!((z[1] - z[0].conj()).norm() / scale < 1e-12);
        }
    }
}

//! Comparison methods: a minimalist 3D-Var assimilation and a pure
//! spatio-temporal coordinate network.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::field_net::{Activation, GradientTape, NetworkParams, NetworkSpec, PosEncConfig};
use crate::model::{FieldModel, ParamGroup, QuerySet};
use crate::observation::PixelObservation;
use crate::training::{fit, FitOutput, FitTarget, TrainConfig};
use crate::video::Grid;

/// Normalized Gaussian kernel truncated at `4σ` (a single tap for `σ = 0`).
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if !(sigma > 0.0) {
        return vec![1.0];
    }
    let radius = (4.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|o| (-(o * o) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Half-sample symmetric reflection into `0..n` (`… b a | a b c … | c b …`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let m = i.rem_euclid(2 * n);
    (if m < n { m } else { 2 * n - 1 - m }) as usize
}

/// Separable Gaussian blur in scatter form: every pixel spreads its value
/// with the normalized kernel, and mass leaving the grid is reflected back,
/// so the image total is conserved.
pub fn gaussian_blur(image: &[f64], grid: Grid, sigma: f64) -> Vec<f64> {
    let (h, w) = (grid.height, grid.width);
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return image.to_vec();
    }
    let r = (k.len() / 2) as isize;
    let mut rows = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let v = image[i * w + j];
            if v == 0.0 {
                continue;
            }
            for (o, kv) in k.iter().enumerate() {
                let jj = reflect(j as isize + o as isize - r, w);
                rows[i * w + jj] += kv * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let v = rows[i * w + j];
            if v == 0.0 {
                continue;
            }
            for (o, kv) in k.iter().enumerate() {
                let ii = reflect(i as isize + o as isize - r, h);
                out[ii * w + j] += kv * v;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssimConfig {
    /// Scalar observation weight in `[0, 1]`.
    pub blend_weight: f64,
    /// Blur width of the update, pixels.
    pub smooth_sigma: f64,
    pub grid: Grid,
}

impl AssimConfig {
    pub fn new(grid: Grid) -> Self {
        Self {
            blend_weight: 0.8,
            smooth_sigma: 2.0,
            grid,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.blend_weight) {
            return Err(Error::InvalidInput(format!("blend weight {} outside [0, 1]", self.blend_weight)));
        }
        if !(self.smooth_sigma >= 0.0) || !self.smooth_sigma.is_finite() {
            return Err(Error::InvalidInput(format!("smoothing sigma {} must be ≥ 0", self.smooth_sigma)));
        }
        Ok(())
    }
}

/// One analysis: `background + blend · blur(innovation)`, with the innovation
/// `obs − background` placed on observed cells (averaged per cell).
pub fn threedvar_step(background: &[f64], obs: &[PixelObservation], cfg: &AssimConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let grid = cfg.grid;
    if background.len() != grid.len() {
        return Err(Error::Shape(format!(
            "background has {} values, grid is {}×{}",
            background.len(),
            grid.height,
            grid.width
        )));
    }
    let mut sum = vec![0.0; grid.len()];
    let mut count = vec![0u32; grid.len()];
    for o in obs {
        let (i, j) = grid
            .cell_of(o.x, o.y)
            .ok_or_else(|| Error::InvalidInput(format!("observation at ({}, {}) lies outside the grid", o.x, o.y)))?;
        let p = i * grid.width + j;
        sum[p] += o.value;
        count[p] += 1;
    }
    let innovation: Vec<f64> = (0..grid.len())
        .map(|p| if count[p] > 0 { sum[p] / count[p] as f64 - background[p] } else { 0.0 })
        .collect();
    let update = gaussian_blur(&innovation, grid, cfg.smooth_sigma);
    Ok(background
        .iter()
        .zip(&update)
        .map(|(b, u)| b + cfg.blend_weight * u)
        .collect())
}

/// Sequential assimilation with a persistence forecast.
pub fn threedvar_run(
    stream: &[(f64, Vec<PixelObservation>)],
    initial: &[f64],
    cfg: &AssimConfig,
) -> Result<Vec<Vec<f64>>> {
    if stream.is_empty() {
        return Err(Error::InvalidInput("empty observation stream".into()));
    }
    if stream.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::InvalidInput("assimilation times must be strictly increasing".into()));
    }
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(stream.len());
    let mut background = initial.to_vec();
    for (_, obs) in stream {
        let analysis = threedvar_step(&background, obs, cfg)?;
        background.clone_from(&analysis);
        out.push(analysis);
    }
    Ok(out)
}

/// Buckets observations onto `times` (one bucket per time, possibly empty).
/// Each observation goes to the time closest to its timestamp.
pub fn stream_on_times(obs: &[PixelObservation], times: &[f64]) -> Result<Vec<(f64, Vec<PixelObservation>)>> {
    if times.is_empty() {
        return Err(Error::InvalidInput("no assimilation times".into()));
    }
    let mut out: Vec<(f64, Vec<PixelObservation>)> = times.iter().map(|&t| (t, Vec::new())).collect();
    for o in obs {
        let k = times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - o.t).abs().total_cmp(&(b.1 - o.t).abs()))
            .map(|(k, _)| k)
            .expect("non-empty");
        out[k].1.push(*o);
    }
    Ok(out)
}

/// Constant image at the mean of the observations made at the first time.
pub fn mean_background(stream: &[(f64, Vec<PixelObservation>)], grid: Grid) -> Vec<f64> {
    let first = stream.iter().find(|(_, o)| !o.is_empty());
    let mean = first.map_or(0.0, |(_, o)| o.iter().map(|p| p.value).sum::<f64>() / o.len() as f64);
    vec![mean; grid.len()]
}

/// A coordinate network `(x, y, t) → value` with no dynamical structure.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralRepModel {
    pub net: NetworkParams,
    pub posenc: PosEncConfig,
    pub window_start: f64,
    pub window_len: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralRepConfig {
    pub posenc_degree: usize,
    pub width: usize,
    pub depth: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for NeuralRepConfig {
    fn default() -> Self {
        Self {
            posenc_degree: 4,
            width: 256,
            depth: 4,
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl NeuralRepModel {
    pub fn new(cfg: &NeuralRepConfig, window_start: f64, window_len: f64) -> Result<Self> {
        if !(window_len > 0.0) || !window_start.is_finite() {
            return Err(Error::InvalidInput(format!("invalid time window ({window_start}, {window_len})")));
        }
        let posenc = PosEncConfig::new(cfg.posenc_degree, 3)?;
        let net = NetworkParams::init(
            &NetworkSpec::mlp(posenc.encoded_dim(), cfg.width, cfg.depth, 1, cfg.activation),
            cfg.seed,
        )?;
        Ok(Self {
            net,
            posenc,
            window_start,
            window_len,
        })
    }

    /// Physical time mapped so the training window spans `[-1, 1]`.
    pub fn time_coordinate(&self, t: f64) -> f64 {
        2.0 * (t - self.window_start) / self.window_len - 1.0
    }

    fn inputs(&self, q: &QuerySet) -> Result<DMatrix<f64>> {
        let pts: Vec<[f64; 3]> = q
            .pairs
            .iter()
            .map(|&(c, t)| {
                let [x, y] = q.coords[c as usize];
                [x, y, self.time_coordinate(q.times[t as usize])]
            })
            .collect();
        self.posenc.encode_batch(&pts)
    }

    pub fn eval(&self, coords: &[[f64; 2]], t: f64) -> Result<Vec<f64>> {
        let q = QuerySet::dense(coords.to_vec(), vec![t])?;
        Ok(self.predict(&q)?.0)
    }

    /// Row-major frame over pixel centers at physical time `t`.
    pub fn render_frame(&self, grid: Grid, t: f64) -> Result<Vec<f64>> {
        self.eval(&grid.pixel_centers(), t)
    }
}

impl FieldModel for NeuralRepModel {
    type Cache = GradientTape;

    fn param_groups(&self) -> Vec<ParamGroup> {
        vec![ParamGroup {
            name: "network".into(),
            len: self.net.num_params(),
        }]
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.net.num_params());
        self.net.write_flat(&mut out);
        out
    }

    fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.net.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.net.num_params(),
                params.len()
            )));
        }
        self.net.read_flat(params)?;
        Ok(())
    }

    fn predict(&self, q: &QuerySet) -> Result<(Vec<f64>, GradientTape)> {
        let x = self.inputs(q)?;
        let (y, tape) = self.net.forward_batch(&x)?;
        Ok((y.as_slice().to_vec(), tape))
    }

    fn gradient(&self, q: &QuerySet, cache: &GradientTape, dpred: &[f64]) -> Result<Vec<f64>> {
        if dpred.len() != q.len() {
            return Err(Error::Shape(format!("{} output gradients for {} queries", dpred.len(), q.len())));
        }
        let dy = DMatrix::from_row_slice(1, dpred.len(), dpred);
        let (g, _) = self.net.backward_batch(cache, &dy)?;
        Ok(self.flat_params_of(&g))
    }
}

impl NeuralRepModel {
    fn flat_params_of(&self, g: &NetworkParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(g.num_params());
        g.write_flat(&mut out);
        out
    }
}

/// Trains the coordinate network on pixel observations with the shared trainer.
pub fn neural_rep_fit(
    obs: &[PixelObservation],
    net_cfg: &NeuralRepConfig,
    cfg: &TrainConfig,
) -> Result<FitOutput<NeuralRepModel>> {
    if obs.is_empty() {
        return Err(Error::InvalidInput("no observations".into()));
    }
    let t_min = obs.iter().map(|o| o.t).fold(f64::INFINITY, f64::min);
    let t_max = obs.iter().map(|o| o.t).fold(f64::NEG_INFINITY, f64::max);
    let len = if t_max > t_min { t_max - t_min } else { 1.0 };
    let model = NeuralRepModel::new(net_cfg, t_min, len)?;
    fit(model, FitTarget::Pixels(obs), cfg, None)
}

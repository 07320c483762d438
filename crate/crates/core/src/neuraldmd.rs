//! The neural modal model.
//!
//! Three networks produce the pieces of
//!
//! ```text
//! I(x, y, t) = w_0(x, y) b_0 + 2 Re Σ_{k=1..K} w_k(x, y) e^{Ω_k c τ} b_k
//! ```
//!
//! where `τ` is time normalized to `[0, 1]` over the training window and `c`
//! a fixed time scale. The modal network maps positionally encoded `(x, y)`
//! to `1 + 2K` channels (`w_0`, then `Re w_k, Im w_k`). The spectral network
//! maps a learnable latent to raw decay/frequency values squashed into
//! `α ∈ [-2, 0]`, `ω ∈ [0, 160]`; `Ω_0 = 0` is fixed. The initial-state
//! network maps another latent to `b_0` and `Re b_k, Im b_k`.
//!
//! The spectral and initial-state outputs can instead be free trainable
//! vectors ([`CoefficientKind::Free`]).

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::decomposition::{pair_field_value, ModalDecomposition, ModeLayout, TimeAxis};
use crate::error::{Error, Result};
use crate::field_net::{Activation, GradientTape, NetworkParams, NetworkSpec, PosEncConfig};
use crate::model::{FieldModel, ParamGroup, QuerySet};
use crate::video::Grid;

pub const ALPHA_MIN: f64 = -2.0;
pub const OMEGA_MAX: f64 = 160.0;
pub const DEFAULT_DECAY_CUTOFF: f64 = -0.05;

/// Coordinates handled per parallel work item; fixed so reductions do not
/// depend on the worker count.
const COORD_CHUNK: usize = 64;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoefficientKind {
    /// Network applied to a learnable latent vector.
    Network,
    /// Directly trainable raw outputs.
    Free,
}

/// Produces a fixed-length raw output vector, either from a network on a
/// learnable latent or as a free parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub enum CoefficientSource {
    Network { latent: DVector<f64>, net: NetworkParams },
    Free { raw: Vec<f64> },
}

impl CoefficientSource {
    pub fn out_dim(&self) -> usize {
        match self {
            CoefficientSource::Network { net, .. } => net.output_dim(),
            CoefficientSource::Free { raw } => raw.len(),
        }
    }

    pub fn kind(&self) -> CoefficientKind {
        match self {
            CoefficientSource::Network { .. } => CoefficientKind::Network,
            CoefficientSource::Free { .. } => CoefficientKind::Free,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            CoefficientSource::Network { latent, net } => latent.len() + net.num_params(),
            CoefficientSource::Free { raw } => raw.len(),
        }
    }

    fn groups(&self, net_name: &str, latent_name: &str, raw_name: &str) -> Vec<ParamGroup> {
        match self {
            CoefficientSource::Network { latent, net } => vec![
                ParamGroup {
                    name: latent_name.into(),
                    len: latent.len(),
                },
                ParamGroup {
                    name: net_name.into(),
                    len: net.num_params(),
                },
            ],
            CoefficientSource::Free { raw } => vec![ParamGroup {
                name: raw_name.into(),
                len: raw.len(),
            }],
        }
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        match self {
            CoefficientSource::Network { latent, net } => {
                out.extend_from_slice(latent.as_slice());
                net.write_flat(out);
            }
            CoefficientSource::Free { raw } => out.extend_from_slice(raw),
        }
    }

    pub fn read_flat<'a>(&mut self, src: &'a [f64]) -> Result<&'a [f64]> {
        if src.len() < self.num_params() {
            return Err(Error::Shape("flat parameter vector too short".into()));
        }
        match self {
            CoefficientSource::Network { latent, net } => {
                let (l, rest) = src.split_at(latent.len());
                latent.as_mut_slice().copy_from_slice(l);
                net.read_flat(rest)
            }
            CoefficientSource::Free { raw } => {
                let (r, rest) = src.split_at(raw.len());
                raw.copy_from_slice(r);
                Ok(rest)
            }
        }
    }

    pub fn outputs(&self) -> Result<(Vec<f64>, Option<GradientTape>)> {
        match self {
            CoefficientSource::Network { latent, net } => {
                let (y, tape) = net.forward(latent.as_slice())?;
                Ok((y, Some(tape)))
            }
            CoefficientSource::Free { raw } => Ok((raw.clone(), None)),
        }
    }

    /// Flat gradient (in [`write_flat`](Self::write_flat) order) of `⟨dout, outputs⟩`.
    fn backward(&self, tape: Option<&GradientTape>, dout: &[f64], out: &mut Vec<f64>) -> Result<()> {
        match (self, tape) {
            (CoefficientSource::Network { net, .. }, Some(tape)) => {
                let (g, dx) = net.backward(tape, dout)?;
                out.extend_from_slice(&dx);
                g.write_flat(out);
                Ok(())
            }
            (CoefficientSource::Free { .. }, _) => {
                out.extend_from_slice(dout);
                Ok(())
            }
            (CoefficientSource::Network { .. }, None) => Err(Error::Shape("missing tape for coefficient network".into())),
        }
    }
}

/// Source of the constrained spectrum `Ω_1..Ω_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumParams {
    pub k: usize,
    pub source: CoefficientSource,
    pub time_scale: f64,
}

impl SpectrumParams {
    /// Maps raw outputs `(a_1..a_K, w_1..w_K)` to `(α_k, ω_k)` and their
    /// derivatives with respect to the raw values.
    fn constrain(&self, raw: &[f64]) -> (Vec<Complex64>, Vec<(f64, f64)>) {
        let k = self.k;
        let mut omega = Vec::with_capacity(k + 1);
        let mut dconstraint = Vec::with_capacity(k);
        omega.push(Complex64::new(0.0, 0.0));
        for j in 0..k {
            let sa = sigmoid(raw[j]);
            let sw = sigmoid(raw[k + j]);
            omega.push(Complex64::new(ALPHA_MIN * sa, OMEGA_MAX * sw));
            dconstraint.push((ALPHA_MIN * sa * (1.0 - sa), OMEGA_MAX * sw * (1.0 - sw)));
        }
        (omega, dconstraint)
    }
}

/// `Ω_0 = 0`, `α_k = -2 σ(a_k)`, `ω_k = 160 σ(w_k)`.
pub fn decode_spectrum(sp: &SpectrumParams) -> Result<Vec<Complex64>> {
    let (raw, _) = sp.source.outputs()?;
    if raw.len() != 2 * sp.k {
        return Err(Error::Shape(format!("spectral source yields {} values, need {}", raw.len(), 2 * sp.k)));
    }
    Ok(sp.constrain(&raw).0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialStateParams {
    pub source: CoefficientSource,
}

fn pack_initial_state(out: &[f64], k: usize) -> Result<Vec<Complex64>> {
    if out.len() != 1 + 2 * k {
        return Err(Error::Shape(format!(
            "initial-state output has {} values, need {} for K={k}",
            out.len(),
            1 + 2 * k
        )));
    }
    let mut b = Vec::with_capacity(k + 1);
    b.push(Complex64::new(out[0], 0.0));
    for j in 1..=k {
        b.push(Complex64::new(out[2 * j - 1], out[2 * j]));
    }
    Ok(b)
}

/// `b_0 = out[0]`, `b_k = out[2k-1] + i out[2k]`.
pub fn decode_initial_state(ip: &InitialStateParams, k: usize) -> Result<Vec<Complex64>> {
    let (out, _) = ip.source.outputs()?;
    pack_initial_state(&out, k)
}

/// Mode values at one coordinate: real `w_0` and complex `w_1..w_K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeValues {
    pub w0: f64,
    pub w: Vec<Complex64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of conjugate pairs; rank is `1 + 2K`.
    pub k: usize,
    pub posenc_degree: usize,
    pub modal_width: usize,
    pub modal_depth: usize,
    pub coef_width: usize,
    pub coef_depth: usize,
    pub latent_dim: usize,
    pub activation: Activation,
    pub time_scale: f64,
    pub generator: CoefficientKind,
    /// Initial decay rate per normalized time unit (`α c`).
    pub alpha_init: f64,
    /// Initial frequencies (`ω c`) are spread over `(0, omega_init_max]`.
    pub omega_init_max: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 12,
            posenc_degree: 4,
            modal_width: 256,
            modal_depth: 4,
            coef_width: 64,
            coef_depth: 2,
            latent_dim: 16,
            activation: Activation::Tanh,
            time_scale: 100.0,
            generator: CoefficientKind::Network,
            alpha_init: -0.1,
            omega_init_max: 60.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    fn validate(&self) -> Result<()> {
        if !(self.time_scale > 0.0) {
            return Err(Error::InvalidInput("time scale must be positive".into()));
        }
        if self.modal_width == 0 || self.coef_width == 0 || self.latent_dim == 0 {
            return Err(Error::InvalidInput("network widths and latent size must be positive".into()));
        }
        let c = self.time_scale;
        if self.k > 0 {
            let a = -self.alpha_init / c / -ALPHA_MIN;
            let w = self.omega_init_max / c / OMEGA_MAX;
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "alpha_init {} must lie strictly inside ({}, 0) after time scaling",
                    self.alpha_init,
                    ALPHA_MIN * c
                )));
            }
            if !(w > 0.0 && w < 1.0) {
                return Err(Error::InvalidInput(format!(
                    "omega_init_max {} must lie strictly inside (0, {}) after time scaling",
                    self.omega_init_max,
                    OMEGA_MAX * c
                )));
            }
        }
        Ok(())
    }

    /// Raw spectral outputs reproducing the configured initial spectrum.
    fn spectral_targets(&self) -> Vec<f64> {
        let c = self.time_scale;
        let k = self.k;
        let a = logit(-self.alpha_init / c / -ALPHA_MIN);
        let mut raw = vec![a; 2 * k];
        for j in 0..k {
            let w = self.omega_init_max * (j + 1) as f64 / k as f64;
            raw[k + j] = logit(w / c / OMEGA_MAX);
        }
        raw
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModalModel {
    pub modal_net: NetworkParams,
    pub posenc: PosEncConfig,
    pub spectrum: SpectrumParams,
    pub initial_state: InitialStateParams,
    /// Physical start and length of the training window.
    pub window_start: f64,
    pub window_len: f64,
}

impl NeuralModalModel {
    pub fn new(cfg: &ModelConfig, window_start: f64, window_len: f64) -> Result<Self> {
        cfg.validate()?;
        if !(window_len > 0.0) || !window_start.is_finite() {
            return Err(Error::InvalidInput(format!("invalid time window ({window_start}, {window_len})")));
        }
        let posenc = PosEncConfig::new(cfg.posenc_degree, 2)?;
        let k = cfg.k;
        let modal_net = NetworkParams::init(
            &NetworkSpec::mlp(posenc.encoded_dim(), cfg.modal_width, cfg.modal_depth, 1 + 2 * k, cfg.activation),
            cfg.seed,
        )?;
        let mut latent_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));
        let mut latent = |n: usize| DVector::from_fn(n, |_, _| StandardNormal.sample(&mut latent_rng));

        let spectral_targets = cfg.spectral_targets();
        let spectral_source = match cfg.generator {
            _ if k == 0 => CoefficientSource::Free { raw: Vec::new() },
            CoefficientKind::Network => {
                let mut net = NetworkParams::init(
                    &NetworkSpec::mlp(cfg.latent_dim, cfg.coef_width, cfg.coef_depth, 2 * k, cfg.activation),
                    cfg.seed.wrapping_add(1),
                )?;
                // small head so the bias sets the starting spectrum
                let head = net.layers.last_mut().expect("network has layers");
                head.weight *= 0.01;
                head.bias.as_mut_slice().copy_from_slice(&spectral_targets);
                CoefficientSource::Network {
                    latent: latent(cfg.latent_dim),
                    net,
                }
            }
            CoefficientKind::Free => CoefficientSource::Free { raw: spectral_targets },
        };
        let b_source = match cfg.generator {
            CoefficientKind::Network => CoefficientSource::Network {
                latent: latent(cfg.latent_dim),
                net: NetworkParams::init(
                    &NetworkSpec::mlp(cfg.latent_dim, cfg.coef_width, cfg.coef_depth, 1 + 2 * k, cfg.activation),
                    cfg.seed.wrapping_add(2),
                )?,
            },
            CoefficientKind::Free => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
                CoefficientSource::Free {
                    raw: (0..1 + 2 * k)
                        .map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                        .collect(),
                }
            }
        };
        Self::from_parts(
            modal_net,
            posenc,
            SpectrumParams {
                k,
                source: spectral_source,
                time_scale: cfg.time_scale,
            },
            InitialStateParams { source: b_source },
            window_start,
            window_len,
        )
    }

    pub fn from_parts(
        modal_net: NetworkParams,
        posenc: PosEncConfig,
        spectrum: SpectrumParams,
        initial_state: InitialStateParams,
        window_start: f64,
        window_len: f64,
    ) -> Result<Self> {
        let k = spectrum.k;
        if modal_net.output_dim() != 1 + 2 * k {
            return Err(Error::Shape(format!(
                "modal network outputs {} channels, need {} for K={k}",
                modal_net.output_dim(),
                1 + 2 * k
            )));
        }
        if modal_net.input_dim() != posenc.encoded_dim() || posenc.input_dim != 2 {
            return Err(Error::Shape("modal network input does not match the 2-D positional encoding".into()));
        }
        if spectrum.source.out_dim() != 2 * k {
            return Err(Error::Shape(format!(
                "spectral source yields {} values, need {}",
                spectrum.source.out_dim(),
                2 * k
            )));
        }
        if initial_state.source.out_dim() != 1 + 2 * k {
            return Err(Error::Shape(format!(
                "initial-state source yields {} values, need {}",
                initial_state.source.out_dim(),
                1 + 2 * k
            )));
        }
        if !(window_len > 0.0) || !(spectrum.time_scale > 0.0) {
            return Err(Error::InvalidInput("window length and time scale must be positive".into()));
        }
        Ok(Self {
            modal_net,
            posenc,
            spectrum,
            initial_state,
            window_start,
            window_len,
        })
    }

    pub fn k(&self) -> usize {
        self.spectrum.k
    }

    pub fn rank(&self) -> usize {
        1 + 2 * self.k()
    }

    pub fn time_axis(&self) -> TimeAxis {
        TimeAxis {
            origin: self.window_start,
            unit: self.window_len,
            scale: self.spectrum.time_scale,
        }
    }

    /// Physical time to the model's normalized time.
    pub fn normalize_time(&self, t: f64) -> f64 {
        (t - self.window_start) / self.window_len
    }

    pub fn spectrum(&self) -> Result<Vec<Complex64>> {
        decode_spectrum(&self.spectrum)
    }

    pub fn initial_state(&self) -> Result<Vec<Complex64>> {
        decode_initial_state(&self.initial_state, self.k())
    }

    fn mode_matrix(&self, coords: &[[f64; 2]]) -> Result<(DMatrix<f64>, GradientTape)> {
        let enc = self.posenc.encode_batch(coords)?;
        self.modal_net.forward_batch(&enc)
    }

    fn unpack_modes(&self, y: &DMatrix<f64>, col: usize) -> ModeValues {
        let c = y.column(col);
        ModeValues {
            w0: c[0],
            w: (1..=self.k()).map(|j| Complex64::new(c[2 * j - 1], c[2 * j])).collect(),
        }
    }

    pub fn eval_modes(&self, coords: &[[f64; 2]]) -> Result<Vec<ModeValues>> {
        let (y, _) = self.mode_matrix(coords)?;
        Ok((0..coords.len()).map(|j| self.unpack_modes(&y, j)).collect())
    }

    /// Field at normalized time `t` (no clamping outside `[0, 1]`).
    pub fn eval_field(&self, coords: &[[f64; 2]], t: f64) -> Result<Vec<f64>> {
        let modes = self.eval_modes(coords)?;
        let omega = self.spectrum()?;
        let b = self.initial_state()?;
        let c = self.spectrum.time_scale;
        let growth: Vec<Complex64> = omega[1..].iter().map(|o| (o * c * t).exp()).collect();
        Ok(modes
            .iter()
            .map(|m| pair_field_value(m.w0, b[0].re, &m.w, &growth, &b[1..]))
            .collect())
    }

    /// Field at physical time `t`.
    pub fn eval_field_at(&self, coords: &[[f64; 2]], t: f64) -> Result<Vec<f64>> {
        self.eval_field(coords, self.normalize_time(t))
    }

    /// Row-major frame over pixel centers at physical time `t`.
    pub fn render_frame(&self, grid: Grid, t: f64) -> Result<Vec<f64>> {
        self.eval_field_at(&grid.pixel_centers(), t)
    }

    /// Samples the modes on `grid` and flags modes with `α < decay_cutoff`.
    pub fn export_decomposition(&self, grid: Grid, decay_cutoff: f64) -> Result<ModalDecomposition> {
        let coords = grid.pixel_centers();
        let (y, _) = self.mode_matrix(&coords)?;
        let r = self.k() + 1;
        let mut modes = vec![Vec::with_capacity(coords.len()); r];
        for col in 0..coords.len() {
            let m = self.unpack_modes(&y, col);
            modes[0].push(Complex64::new(m.w0, 0.0));
            for (j, w) in m.w.into_iter().enumerate() {
                modes[j + 1].push(w);
            }
        }
        let mut d = ModalDecomposition::new(
            grid.height,
            grid.width,
            ModeLayout::ConjugatePairs,
            modes,
            self.spectrum()?,
            self.initial_state()?,
            self.time_axis(),
        )?;
        d.flag_decaying(decay_cutoff);
        Ok(d)
    }
}

/// Forward quantities reused by the reverse pass.
pub struct ModalCache {
    modes: DMatrix<f64>,
    tape: GradientTape,
    spectral_tape: Option<GradientTape>,
    spectral_dconstraint: Vec<(f64, f64)>,
    b_tape: Option<GradientTape>,
    omega: Vec<Complex64>,
    b: Vec<Complex64>,
    /// `c τ` per query time.
    clock: Vec<f64>,
    /// `e^{Ω_k c τ}` per query time, `k = 1..K`.
    growth: Vec<Vec<Complex64>>,
}

impl FieldModel for NeuralModalModel {
    type Cache = ModalCache;

    fn param_groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup {
            name: "modal".into(),
            len: self.modal_net.num_params(),
        }];
        g.extend(self.spectrum.source.groups("spectral", "latent_omega", "omega_raw"));
        g.extend(self.initial_state.source.groups("initial_state", "latent_b", "b_raw"));
        g
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.modal_net.write_flat(&mut out);
        self.spectrum.source.write_flat(&mut out);
        self.initial_state.source.write_flat(&mut out);
        out
    }

    fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let rest = self.modal_net.read_flat(params)?;
        let rest = self.spectrum.source.read_flat(rest)?;
        self.initial_state.source.read_flat(rest)?;
        Ok(())
    }

    fn predict(&self, q: &QuerySet) -> Result<(Vec<f64>, ModalCache)> {
        let (modes, tape) = self.mode_matrix(&q.coords)?;
        let (raw, spectral_tape) = self.spectrum.source.outputs()?;
        let (omega, spectral_dconstraint) = self.spectrum.constrain(&raw);
        let (bout, b_tape) = self.initial_state.source.outputs()?;
        let b = pack_initial_state(&bout, self.k())?;
        let c = self.spectrum.time_scale;
        let clock: Vec<f64> = q.times.iter().map(|&t| c * self.normalize_time(t)).collect();
        let growth: Vec<Vec<Complex64>> = clock
            .iter()
            .map(|&ct| omega[1..].iter().map(|o| (o * ct).exp()).collect())
            .collect();
        let k = self.k();
        let per_coord: Vec<ModeValues> = (0..q.coords.len()).map(|j| self.unpack_modes(&modes, j)).collect();
        let b0 = b[0].re;
        let values = q
            .pairs
            .par_iter()
            .map(|&(ci, ti)| {
                let m = &per_coord[ci as usize];
                pair_field_value(m.w0, b0, &m.w, &growth[ti as usize], &b[1..=k])
            })
            .collect();
        Ok((
            values,
            ModalCache {
                modes,
                tape,
                spectral_tape,
                spectral_dconstraint,
                b_tape,
                omega,
                b,
                clock,
                growth,
            },
        ))
    }

    fn gradient(&self, q: &QuerySet, cache: &ModalCache, dpred: &[f64]) -> Result<Vec<f64>> {
        if dpred.len() != q.len() {
            return Err(Error::Shape(format!("{} output gradients for {} queries", dpred.len(), q.len())));
        }
        let k = self.k();
        let r = 1 + 2 * k;
        let n = q.coords.len();
        let mut dmodes = DMatrix::<f64>::zeros(r, n);
        // per chunk: (dα_1..K, dω_1..K, db_0, db_re/im ...)
        let partials: Vec<Vec<f64>> = dmodes
            .as_mut_slice()
            .par_chunks_mut(r * COORD_CHUNK)
            .enumerate()
            .map(|(chunk, dcols)| {
                let mut acc = vec![0.0; 2 * k + 1 + 2 * k];
                let (dspec, db) = acc.split_at_mut(2 * k);
                for (local, dcol) in dcols.chunks_mut(r).enumerate() {
                    let ci = chunk * COORD_CHUNK + local;
                    let m = cache.modes.column(ci);
                    let w0 = m[0];
                    for &(pi, ti) in q.at_coord(ci) {
                        let g = dpred[pi as usize];
                        if g == 0.0 {
                            continue;
                        }
                        let growth = &cache.growth[ti as usize];
                        let ct = cache.clock[ti as usize];
                        dcol[0] += g * cache.b[0].re;
                        db[0] += g * w0;
                        for j in 0..k {
                            let wk = Complex64::new(m[2 * j + 1], m[2 * j + 2]);
                            let bk = cache.b[j + 1];
                            let z = growth[j] * bk;
                            dcol[2 * j + 1] += 2.0 * g * z.re;
                            dcol[2 * j + 2] -= 2.0 * g * z.im;
                            let qv = wk * growth[j];
                            db[2 * j + 1] += 2.0 * g * qv.re;
                            db[2 * j + 2] -= 2.0 * g * qv.im;
                            let s = qv * bk;
                            dspec[j] += 2.0 * g * ct * s.re;
                            dspec[k + j] -= 2.0 * g * ct * s.im;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut total = vec![0.0; 4 * k + 1];
        for p in &partials {
            for (t, v) in total.iter_mut().zip(p) {
                *t += v;
            }
        }
        let (dspec, db) = total.split_at(2 * k);

        let mut out = Vec::with_capacity(self.num_params());
        let (gmodal, _) = self.modal_net.backward_batch(&cache.tape, &dmodes)?;
        gmodal.write_flat(&mut out);

        let mut draw = vec![0.0; 2 * k];
        for j in 0..k {
            let (da, dw) = cache.spectral_dconstraint[j];
            draw[j] = dspec[j] * da;
            draw[k + j] = dspec[k + j] * dw;
        }
        self.spectrum
            .source
            .backward(cache.spectral_tape.as_ref(), &draw, &mut out)?;
        self.initial_state.source.backward(cache.b_tape.as_ref(), db, &mut out)?;
        debug_assert_eq!(out.len(), self.num_params());
        let _ = &cache.omega;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_net::Layer;
    use rand::Rng;

    fn small_config(k: usize, generator: CoefficientKind) -> ModelConfig {
        ModelConfig {
            k,
            posenc_degree: 2,
            modal_width: 8,
            modal_depth: 2,
            coef_width: 6,
            coef_depth: 1,
            latent_dim: 4,
            time_scale: 10.0,
            generator,
            alpha_init: -0.5,
            omega_init_max: 12.0,
            seed: 7,
            ..ModelConfig::default()
        }
    }

    fn zero_output_source(n_out: usize, n_in: usize) -> CoefficientSource {
        CoefficientSource::Network {
            latent: DVector::from_element(n_in, 0.3),
            net: NetworkParams::new(vec![Layer {
                weight: DMatrix::zeros(n_out, n_in),
                bias: DVector::zeros(n_out),
                activation: Activation::Identity,
            }])
            .unwrap(),
        }
    }

    #[test]
    fn zero_raw_outputs_decode_to_midpoint() {
        let sp = SpectrumParams {
            k: 3,
            source: zero_output_source(6, 2),
            time_scale: 100.0,
        };
        let om = decode_spectrum(&sp).unwrap();
        assert_eq!(om[0], Complex64::new(0.0, 0.0));
        for o in &om[1..] {
            assert_eq!(*o, Complex64::new(-1.0, 80.0));
        }
    }

    #[test]
    fn saturated_raw_values_approach_bounds() {
        let sp = SpectrumParams {
            k: 2,
            source: CoefficientSource::Free {
                raw: vec![30.0, -30.0, 0.0, 0.0],
            },
            time_scale: 1.0,
        };
        let om = decode_spectrum(&sp).unwrap();
        assert!(om[1].re > -2.0 && om[1].re < -2.0 + 1e-12);
        assert!(om[2].re < 0.0 && om[2].re > -1e-12);
    }

    #[test]
    fn spectrum_matches_scalar_oracle() {
        let m = NeuralModalModel::new(&small_config(3, CoefficientKind::Network), 0.0, 1.0).unwrap();
        let om = m.spectrum().unwrap();
        let CoefficientSource::Network { latent, net } = &m.spectrum.source else {
            panic!()
        };
        // scalar re-evaluation of the network
        let mut a: Vec<f64> = latent.iter().copied().collect();
        for l in &net.layers {
            a = (0..l.out_dim())
                .map(|i| {
                    let z = l.bias[i] + (0..l.in_dim()).map(|j| l.weight[(i, j)] * a[j]).sum::<f64>();
                    if l.activation == Activation::Tanh {
                        z.tanh()
                    } else {
                        z
                    }
                })
                .collect();
        }
        for j in 0..3 {
            let alpha = -2.0 / (1.0 + (-a[j]).exp());
            let omega = 160.0 / (1.0 + (-a[3 + j]).exp());
            assert!((om[j + 1].re - alpha).abs() < 1e-14);
            assert!((om[j + 1].im - omega).abs() < 1e-12);
        }
    }

    #[test]
    fn initial_state_packing() {
        let ip = InitialStateParams {
            source: CoefficientSource::Free {
                raw: vec![1.0, 0.0, 0.0],
            },
        };
        assert_eq!(
            decode_initial_state(&ip, 1).unwrap(),
            vec![Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)]
        );
        let ip = InitialStateParams {
            source: CoefficientSource::Free {
                raw: vec![0.0, 3.0, -4.0],
            },
        };
        let b = decode_initial_state(&ip, 1).unwrap();
        assert_eq!(b[1], Complex64::new(3.0, -4.0));
        assert_eq!(b[1].norm(), 5.0);
        assert!(matches!(decode_initial_state(&ip, 2), Err(Error::Shape(_))));
    }

    #[test]
    fn initial_state_matches_network_oracle() {
        let m = NeuralModalModel::new(&small_config(2, CoefficientKind::Network), 0.0, 1.0).unwrap();
        let b = m.initial_state().unwrap();
        let CoefficientSource::Network { latent, net } = &m.initial_state.source else {
            panic!()
        };
        let (y, _) = net.forward(latent.as_slice()).unwrap();
        assert_eq!(b[0], Complex64::new(y[0], 0.0));
        assert_eq!(b[2], Complex64::new(y[3], y[4]));
    }

    #[test]
    fn modes_are_deterministic_and_compositional() {
        let m = NeuralModalModel::new(&small_config(2, CoefficientKind::Network), 0.0, 1.0).unwrap();
        let pts = [[0.1, -0.3], [0.1, -0.3], [0.9, 0.2]];
        let modes = m.eval_modes(&pts).unwrap();
        assert_eq!(modes[0], modes[1]);
        for (p, mv) in pts.iter().zip(&modes) {
            let enc = m.posenc.encode(p).unwrap();
            let (y, _) = m.modal_net.forward(&enc).unwrap();
            assert_eq!(mv.w0, y[0]);
            assert_eq!(mv.w[1], Complex64::new(y[3], y[4]));
        }
    }

    #[test]
    fn rank_one_model_is_static() {
        let m = NeuralModalModel::new(&small_config(0, CoefficientKind::Network), 0.0, 1.0).unwrap();
        let pts = [[0.2, 0.4], [-0.5, 0.1]];
        let modes = m.eval_modes(&pts).unwrap();
        assert!(modes[0].w.is_empty());
        let b0 = m.initial_state().unwrap()[0].re;
        let f0 = m.eval_field(&pts, 0.0).unwrap();
        let f1 = m.eval_field(&pts, 3.7).unwrap();
        assert_eq!(f0, f1);
        assert_eq!(f0[0], modes[0].w0 * b0);
    }

    #[test]
    fn field_at_zero_time() {
        let m = NeuralModalModel::new(&small_config(2, CoefficientKind::Network), 0.0, 1.0).unwrap();
        let pts = [[0.3, 0.3]];
        let f = m.eval_field(&pts, 0.0).unwrap();
        let modes = m.eval_modes(&pts).unwrap();
        let b = m.initial_state().unwrap();
        let expect = modes[0].w0 * b[0].re + 2.0 * (0..2).map(|j| (modes[0].w[j] * b[j + 1]).re).sum::<f64>();
        assert!((f[0] - expect).abs() < 1e-14);
    }

    /// Hand-built K=1 model with `w_0 = 1`, `w_1 = 1/2`, `b_0 = 0.3`, `b_1 = 1/2`, `α = 0`, `ω c = 2π`.
    fn sinusoid_model() -> NeuralModalModel {
        let posenc = PosEncConfig::new(1, 2).unwrap();
        let modal_net = NetworkParams::new(vec![Layer {
            weight: DMatrix::zeros(3, 4),
            bias: DVector::from_vec(vec![1.0, 0.5, 0.0]),
            activation: Activation::Identity,
        }])
        .unwrap();
        // α = -2σ(a) → 0 needs a → -∞; use a large negative raw value
        let c = 1.0;
        let w_raw = logit(2.0 * std::f64::consts::PI / c / OMEGA_MAX);
        let spectrum = SpectrumParams {
            k: 1,
            source: CoefficientSource::Free { raw: vec![-800.0, w_raw] },
            time_scale: c,
        };
        let initial_state = InitialStateParams {
            source: CoefficientSource::Free {
                raw: vec![0.3, 0.5, 0.0],
            },
        };
        NeuralModalModel::from_parts(modal_net, posenc, spectrum, initial_state, 0.0, 1.0).unwrap()
    }

    #[test]
    fn unit_period_sinusoid() {
        let m = sinusoid_model();
        let pts = [[0.0, 0.0], [0.4, -0.7]];
        for &t in &[0.0, 0.1, 0.25, 0.8, 1.0, 2.35] {
            let f = m.eval_field(&pts, t).unwrap();
            let expect = 0.3 + 0.5 * (2.0 * std::f64::consts::PI * t).cos();
            for v in f {
                assert!((v - expect).abs() < 1e-12, "t={t}: {v} vs {expect}");
            }
        }
        let a = m.eval_field(&pts, 0.3).unwrap();
        let b = m.eval_field(&pts, 1.3).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12);
    }

    #[test]
    fn render_single_pixel_and_closed_form() {
        let m = sinusoid_model();
        let g1 = Grid::new(1, 1).unwrap();
        assert_eq!(m.render_frame(g1, 0.4).unwrap(), m.eval_field(&[[0.0, 0.0]], 0.4).unwrap());
        let g = Grid::new(5, 4).unwrap();
        let f = m.render_frame(g, 0.6).unwrap();
        assert_eq!(f, m.render_frame(g, 0.6).unwrap());
        let expect = 0.3 + 0.5 * (2.0 * std::f64::consts::PI * 0.6).cos();
        assert!(f.iter().all(|v| (v - expect).abs() < 1e-6));
    }

    #[test]
    fn exported_grid_reproduces_render() {
        let m = NeuralModalModel::new(&small_config(3, CoefficientKind::Network), 2.0, 5.0).unwrap();
        let g = Grid::new(6, 7).unwrap();
        let d = m.export_decomposition(g, DEFAULT_DECAY_CUTOFF).unwrap();
        for &t in &[2.0, 3.3, 7.0, 9.5] {
            let a = d.reconstruct(t, false);
            let b = m.render_frame(g, t).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn export_flags_follow_cutoff() {
        let mut m = sinusoid_model();
        let g = Grid::new(2, 2).unwrap();
        let d = m.export_decomposition(g, -0.05).unwrap();
        assert_eq!(d.flagged, vec![false, false]);
        // α = (-0.01, -0.2)
        let a1 = logit(0.01 / 2.0);
        let a2 = logit(0.2 / 2.0);
        m.modal_net = NetworkParams::new(vec![Layer {
            weight: DMatrix::zeros(5, 4),
            bias: DVector::from_vec(vec![1.0, 0.5, 0.0, 0.2, 0.1]),
            activation: Activation::Identity,
        }])
        .unwrap();
        m.spectrum = SpectrumParams {
            k: 2,
            source: CoefficientSource::Free {
                raw: vec![a1, a2, 0.0, 0.0],
            },
            time_scale: 1.0,
        };
        m.initial_state = InitialStateParams {
            source: CoefficientSource::Free { raw: vec![1.0; 5] },
        };
        let d = m.export_decomposition(g, -0.05).unwrap();
        assert!((d.omega[1].re + 0.01).abs() < 1e-12);
        assert_eq!(d.flagged, vec![false, false, true]);
    }

    #[test]
    fn constraint_box_over_random_latents() {
        let mut m = NeuralModalModel::new(&small_config(4, CoefficientKind::Network), 0.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            if let CoefficientSource::Network { latent, .. } = &mut m.spectrum.source {
                for v in latent.iter_mut() {
                    *v = rng.random_range(-5.0..5.0);
                }
            }
            let om = m.spectrum().unwrap();
            assert_eq!(om[0], Complex64::new(0.0, 0.0));
            for o in &om[1..] {
                assert!(o.re > -2.0 && o.re < 0.0);
                assert!(o.im > 0.0 && o.im < 160.0);
            }
        }
    }

    fn fd_check_model(model: &NeuralModalModel) {
        let q = QuerySet::from_points([
            (0.1, 0.2, 0.0),
            (0.1, 0.2, 0.5),
            (-0.7, 0.4, 0.5),
            (0.3, -0.9, 1.3),
            (0.1, 0.2, 1.3),
        ])
        .unwrap();
        let weights = [0.7, -1.1, 0.4, 2.0, -0.3];
        let objective = |m: &NeuralModalModel| -> f64 {
            let (p, _) = m.predict(&q).unwrap();
            p.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = model.predict(&q).unwrap();
        let grad = model.gradient(&q, &cache, &weights).unwrap();
        let flat = model.flat_params();
        assert_eq!(grad.len(), flat.len());
        let h = 1e-5;
        let groups = model.param_groups();
        for i in 0..flat.len() {
            let mut m = model.clone();
            let mut f = flat.clone();
            f[i] += h;
            m.set_flat_params(&f).unwrap();
            let up = objective(&m);
            f[i] -= 2.0 * h;
            m.set_flat_params(&f).unwrap();
            let down = objective(&m);
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs());
            let err = if scale < 1e-7 { 0.0 } else { (fd - grad[i]).abs() / scale };
            assert!(
                err < 1e-4,
                "param {i} ({:?}): fd {fd} analytic {}",
                crate::model::group_of(&groups, i),
                grad[i]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_network_generator() {
        let m = NeuralModalModel::new(&small_config(2, CoefficientKind::Network), 0.0, 1.0).unwrap();
        fd_check_model(&m);
    }

    #[test]
    fn gradients_match_finite_differences_free_generator() {
        let m = NeuralModalModel::new(&small_config(2, CoefficientKind::Free), -1.0, 2.0).unwrap();
        fd_check_model(&m);
    }
}

//! Losses, Adam, the plateau scheduler and the fit loop shared by every
//! [`FieldModel`].

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{group_of, FieldModel, QuerySet};
use crate::observation::{NudftPlan, PixelObservation, VisibilityObservation};
use crate::video::Grid;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Pixel,
    Visibility,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Pixel => "pixel",
            LossKind::Visibility => "visibility",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    /// Relative decrease that counts as an improvement.
    pub improvement_tol: f64,
    pub epochs: usize,
    /// Observations per mini-batch; visibility batches hold whole frames.
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub loss_kind: LossKind,
    /// Render grid for the visibility loss.
    pub render_grid: Grid,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-3,
            plateau_patience: 500,
            lr_factor: 0.5,
            improvement_tol: 1e-6,
            epochs: 12_000,
            batch_size: 4096,
            seed: 0,
            precision: Precision::Double,
            loss_kind: LossKind::Pixel,
            render_grid: Grid { height: 64, width: 64 },
            checkpoint_every: 1000,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || !self.lr0.is_finite() {
            return Err(Error::InvalidInput(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::InvalidInput(format!("lr_factor {} outside (0, 1)", self.lr_factor)));
        }
        if self.plateau_patience == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("plateau patience and batch size must be ≥ 1".into()));
        }
        Grid::new(self.render_grid.height, self.render_grid.width)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub best_loss: Option<f64>,
    pub since_improvement: usize,
    pub lr: f64,
}

impl TrainState {
    pub fn new(num_params: usize, lr0: f64) -> Self {
        Self {
            epoch: 0,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            best_loss: None,
            since_improvement: 0,
            lr: lr0,
        }
    }
}

/// Mean squared error between the model and pixel observations.
pub fn pixel_loss<M: FieldModel>(model: &M, batch: &[PixelObservation]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty pixel batch".into()));
    }
    let q = QuerySet::from_points(batch.iter().map(|o| (o.x, o.y, o.t)))?;
    let targets: Vec<f64> = batch.iter().map(|o| o.value).collect();
    mse_on_queries(model, &q, &targets)
}

fn mse_on_queries<M: FieldModel>(model: &M, q: &QuerySet, targets: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (pred, cache) = model.predict(q)?;
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let dpred: Vec<f64> = pred
        .iter()
        .zip(targets)
        .map(|(p, y)| {
            let r = p - y;
            loss += r * r;
            2.0 * r / n
        })
        .collect();
    let grad = model.gradient(q, &cache, &dpred)?;
    Ok((loss / n, grad))
}

/// Visibility observations sharing one timestamp, with their Fourier kernel.
#[derive(Debug, Clone)]
pub struct FrameGroup {
    pub t: f64,
    pub obs: Vec<VisibilityObservation>,
    plan: NudftPlan,
}

/// Groups visibilities by exact timestamp (sorted by time) and prepares kernels.
pub fn group_visibilities(obs: &[VisibilityObservation], grid: Grid) -> Result<Vec<FrameGroup>> {
    if let Some(o) = obs.iter().find(|o| !(o.sigma > 0.0)) {
        return Err(Error::InvalidInput(format!("visibility sigma {} must be positive", o.sigma)));
    }
    let mut sorted: Vec<VisibilityObservation> = obs.to_vec();
    sorted.sort_by(|a, b| a.t.total_cmp(&b.t));
    let mut groups: Vec<(f64, Vec<VisibilityObservation>)> = Vec::new();
    for o in sorted {
        match groups.last_mut() {
            Some((t, g)) if *t == o.t => g.push(o),
            _ => groups.push((o.t, vec![o])),
        }
    }
    groups
        .into_iter()
        .map(|(t, obs)| {
            let pts: Vec<(f64, f64)> = obs.iter().map(|o| (o.u, o.v)).collect();
            Ok(FrameGroup {
                t,
                plan: NudftPlan::new(grid, &pts)?,
                obs,
            })
        })
        .collect()
}

fn chi2_on_groups<M: FieldModel>(model: &M, groups: &[&FrameGroup], grid: Grid, with_grad: bool) -> Result<(f64, Vec<f64>)> {
    if groups.is_empty() {
        return Err(Error::InvalidInput("empty visibility batch".into()));
    }
    let n_pix = grid.len();
    let q = QuerySet::dense(grid.pixel_centers(), groups.iter().map(|g| g.t).collect())?;
    let (pred, cache) = model.predict(&q)?;
    let n_obs: usize = groups.iter().map(|g| g.obs.len()).sum();
    let n = n_obs as f64;
    let mut chi2 = 0.0;
    let mut dpred = if with_grad { vec![0.0; pred.len()] } else { Vec::new() };
    for (gi, g) in groups.iter().enumerate() {
        let frame = &pred[gi * n_pix..(gi + 1) * n_pix];
        let model_vis = g.plan.forward(frame)?;
        let mut c = Vec::with_capacity(g.obs.len());
        for (o, vh) in g.obs.iter().zip(&model_vis) {
            let r = vh - o.vis;
            let s2 = o.sigma * o.sigma;
            chi2 += r.norm_sqr() / s2;
            c.push(2.0 * r.conj() / (n * s2));
        }
        if with_grad {
            let d = g.plan.adjoint_real(&c)?;
            dpred[gi * n_pix..(gi + 1) * n_pix].copy_from_slice(&d);
        }
    }
    let grad = if with_grad { model.gradient(&q, &cache, &dpred)? } else { Vec::new() };
    Ok((chi2 / n, grad))
}

/// `χ² = (1/N) Σ |V_i − V̂_i|² / σ_i²` with `V̂` the transform of the model
/// rendered on `grid` at each observation time.
pub fn vis_chi2<M: FieldModel>(model: &M, batch: &[VisibilityObservation], grid: Grid) -> Result<(f64, Vec<f64>)> {
    let groups = group_visibilities(batch, grid)?;
    let refs: Vec<&FrameGroup> = groups.iter().collect();
    chi2_on_groups(model, &refs, grid, true)
}

/// χ² without the reverse pass.
pub fn vis_chi2_value<M: FieldModel>(model: &M, batch: &[VisibilityObservation], grid: Grid) -> Result<f64> {
    let groups = group_visibilities(batch, grid)?;
    let refs: Vec<&FrameGroup> = groups.iter().collect();
    Ok(chi2_on_groups(model, &refs, grid, false)?.0)
}

/// χ² of fixed model visibilities against observations.
pub fn chi2_of(model_vis: &[Complex64], obs: &[VisibilityObservation]) -> Result<f64> {
    if model_vis.len() != obs.len() || obs.is_empty() {
        return Err(Error::Shape(format!("{} model values for {} observations", model_vis.len(), obs.len())));
    }
    let mut acc = 0.0;
    for (m, o) in model_vis.iter().zip(obs) {
        if !(o.sigma > 0.0) {
            return Err(Error::InvalidInput(format!("visibility sigma {} must be positive", o.sigma)));
        }
        acc += (m - o.vis).norm_sqr() / (o.sigma * o.sigma);
    }
    Ok(acc / obs.len() as f64)
}

/// One Adam update with bias correction; `groups` names offending parameters.
pub fn adam_step(
    state: &mut TrainState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    groups: &[crate::model::ParamGroup],
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!(
            "gradient of parameter group `{}` (index {i})",
            group_of(groups, i).unwrap_or("?")
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let mh = *m / c1;
        let vh = *v / c2;
        *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Records an epoch loss; returns true when the learning rate was reduced.
///
/// The first epoch has nothing to improve on and counts towards the plateau.
pub fn plateau_schedule(state: &mut TrainState, epoch_loss: f64, cfg: &TrainConfig) -> bool {
    let improved = match state.best_loss {
        Some(best) => epoch_loss < best - cfg.improvement_tol * best.abs(),
        None => false,
    };
    if state.best_loss.is_none_or(|b| epoch_loss < b) {
        state.best_loss = Some(epoch_loss);
    }
    if improved {
        state.since_improvement = 0;
        return false;
    }
    state.since_improvement += 1;
    if state.since_improvement >= cfg.plateau_patience {
        state.lr *= cfg.lr_factor;
        state.since_improvement = 0;
        return true;
    }
    false
}

#[derive(Debug, Clone, Copy)]
pub enum FitTarget<'a> {
    Pixels(&'a [PixelObservation]),
    Visibilities(&'a [VisibilityObservation]),
}

impl FitTarget<'_> {
    pub fn kind(&self) -> LossKind {
        match self {
            FitTarget::Pixels(_) => LossKind::Pixel,
            FitTarget::Visibilities(_) => LossKind::Visibility,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FitEventKind {
    Periodic,
    /// The last good state before a non-finite loss.
    Abort,
    Final,
}

pub struct FitEvent<'a, M> {
    pub kind: FitEventKind,
    pub model: &'a M,
    pub state: &'a TrainState,
    pub history: &'a [HistoryRow],
}

#[derive(Debug, Clone)]
pub struct FitOutput<M> {
    pub model: M,
    pub state: TrainState,
    /// Rows produced by this call (resumed runs continue the epoch count).
    pub history: Vec<HistoryRow>,
    /// Parameters at the lowest epoch loss seen in this call.
    pub best_params: Vec<f64>,
}

struct PixelData {
    coords: Vec<[f64; 2]>,
    times: Vec<f64>,
    coord_of: Vec<u32>,
    time_of: Vec<u32>,
    values: Vec<f64>,
}

impl PixelData {
    fn new(obs: &[PixelObservation]) -> Result<Self> {
        let q = QuerySet::from_points(obs.iter().map(|o| (o.x, o.y, o.t)))?;
        Ok(Self {
            coord_of: q.pairs.iter().map(|p| p.0).collect(),
            time_of: q.pairs.iter().map(|p| p.1).collect(),
            coords: q.coords,
            times: q.times,
            values: obs.iter().map(|o| o.value).collect(),
        })
    }

    /// Query set for a batch, keeping only the coordinates and times it uses.
    fn batch(&self, idx: &[usize]) -> Result<(QuerySet, Vec<f64>)> {
        let mut cmap = vec![u32::MAX; self.coords.len()];
        let mut tmap = vec![u32::MAX; self.times.len()];
        let mut coords = Vec::new();
        let mut times = Vec::new();
        let mut pairs = Vec::with_capacity(idx.len());
        for &i in idx {
            let c = self.coord_of[i] as usize;
            let t = self.time_of[i] as usize;
            if cmap[c] == u32::MAX {
                cmap[c] = coords.len() as u32;
                coords.push(self.coords[c]);
            }
            if tmap[t] == u32::MAX {
                tmap[t] = times.len() as u32;
                times.push(self.times[t]);
            }
            pairs.push((cmap[c], tmap[t]));
        }
        let targets = idx.iter().map(|&i| self.values[i]).collect();
        Ok((QuerySet::new(coords, times, pairs)?, targets))
    }
}

/// Per-epoch shuffle seed, so a resumed run replays the same batches.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

enum Prepared {
    Pixels(PixelData),
    Vis(Vec<FrameGroup>),
}

impl Prepared {
    fn batches(&self, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
        let (n, sizes): (usize, Option<Vec<usize>>) = match self {
            Prepared::Pixels(p) => (p.values.len(), None),
            Prepared::Vis(g) => (g.len(), Some(g.iter().map(|f| f.obs.len()).collect())),
        };
        let total: usize = sizes.as_ref().map_or(n, |s| s.iter().sum());
        let mut order: Vec<usize> = (0..n).collect();
        if total <= cfg.batch_size {
            return vec![order];
        }
        order.shuffle(&mut epoch_rng(cfg.seed, epoch));
        match sizes {
            None => order.chunks(cfg.batch_size).map(|c| c.to_vec()).collect(),
            Some(sizes) => {
                let mut out = Vec::new();
                let mut cur = Vec::new();
                let mut count = 0;
                for i in order {
                    cur.push(i);
                    count += sizes[i];
                    if count >= cfg.batch_size {
                        out.push(std::mem::take(&mut cur));
                        count = 0;
                    }
                }
                if !cur.is_empty() {
                    out.push(cur);
                }
                out
            }
        }
    }

    /// Loss, gradient, and observation count of one batch.
    fn loss<M: FieldModel>(&self, model: &M, idx: &[usize], grid: Grid) -> Result<(f64, Vec<f64>, usize)> {
        match self {
            Prepared::Pixels(p) => {
                let (q, targets) = p.batch(idx)?;
                let (l, g) = mse_on_queries(model, &q, &targets)?;
                Ok((l, g, idx.len()))
            }
            Prepared::Vis(groups) => {
                let mut sel: Vec<&FrameGroup> = idx.iter().map(|&i| &groups[i]).collect();
                sel.sort_by(|a, b| a.t.total_cmp(&b.t));
                let n = sel.iter().map(|g| g.obs.len()).sum();
                let (l, g) = chi2_on_groups(model, &sel, grid, true)?;
                Ok((l, g, n))
            }
        }
    }
}

fn round_to_single(params: &mut [f64]) {
    for p in params {
        *p = *p as f32 as f64;
    }
}

pub fn fit<M: FieldModel>(model: M, target: FitTarget, cfg: &TrainConfig, resume: Option<TrainState>) -> Result<FitOutput<M>> {
    fit_with_hook(model, target, cfg, resume, &mut |_| Ok(()))
}

/// The training loop. `hook` receives periodic, abort and final states.
pub fn fit_with_hook<M: FieldModel>(
    mut model: M,
    target: FitTarget,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    hook: &mut dyn FnMut(&FitEvent<M>) -> Result<()>,
) -> Result<FitOutput<M>> {
    cfg.validate()?;
    if target.kind() != cfg.loss_kind {
        return Err(Error::Contract(format!(
            "loss kind `{}` does not match {} observations",
            cfg.loss_kind.name(),
            target.kind().name()
        )));
    }
    let prepared = match target {
        FitTarget::Pixels(obs) => {
            if obs.is_empty() {
                return Err(Error::InvalidInput("no pixel observations".into()));
            }
            Prepared::Pixels(PixelData::new(obs)?)
        }
        FitTarget::Visibilities(obs) => {
            if obs.is_empty() {
                return Err(Error::InvalidInput("no visibility observations".into()));
            }
            Prepared::Vis(group_visibilities(obs, cfg.render_grid)?)
        }
    };
    let groups = model.param_groups();
    let mut params = model.flat_params();
    let mut state = match resume {
        Some(s) => {
            if s.m.len() != params.len() || s.v.len() != params.len() {
                return Err(Error::Shape(format!(
                    "resume state has {} moments for {} parameters",
                    s.m.len(),
                    params.len()
                )));
            }
            s
        }
        None => TrainState::new(params.len(), cfg.lr0),
    };
    if cfg.precision == Precision::Single {
        round_to_single(&mut params);
        model.set_flat_params(&params)?;
    }
    let mut history = Vec::new();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let end = state.epoch + cfg.epochs;
    while state.epoch < end {
        let epoch = state.epoch;
        let good_model = model.clone();
        let good_state = state.clone();
        let mut total = 0.0;
        let mut count = 0usize;
        let mut failure = None;
        for idx in prepared.batches(cfg, epoch) {
            let (loss, grad, n) = prepared.loss(&model, &idx, cfg.render_grid)?;
            if !loss.is_finite() {
                failure = Some(format!("non-finite loss at epoch {}", epoch + 1));
                break;
            }
            let lr = state.lr;
            if let Err(e) = adam_step(&mut state, &mut params, &grad, lr, &groups) {
                failure = Some(e.to_string());
                break;
            }
            if cfg.precision == Precision::Single {
                round_to_single(&mut params);
            }
            model.set_flat_params(&params)?;
            total += loss * n as f64;
            count += n;
        }
        if let Some(msg) = failure {
            hook(&FitEvent {
                kind: FitEventKind::Abort,
                model: &good_model,
                state: &good_state,
                history: &history,
            })?;
            return Err(Error::Divergence(format!(
                "{msg}; last good state is epoch {}",
                good_state.epoch
            )));
        }
        let epoch_loss = total / count as f64;
        if best.as_ref().is_none_or(|(b, _)| epoch_loss < *b) {
            best = Some((epoch_loss, good_model.flat_params()));
        }
        history.push(HistoryRow {
            epoch: epoch + 1,
            loss: epoch_loss,
            lr: state.lr,
        });
        plateau_schedule(&mut state, epoch_loss, cfg);
        state.epoch += 1;
        if cfg.log_every > 0 && state.epoch % cfg.log_every == 0 {
            log::info!("epoch {} loss {:.6e} lr {:.3e}", state.epoch, epoch_loss, state.lr);
        }
        if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 && state.epoch < end {
            hook(&FitEvent {
                kind: FitEventKind::Periodic,
                model: &model,
                state: &state,
                history: &history,
            })?;
        }
    }
    hook(&FitEvent {
        kind: FitEventKind::Final,
        model: &model,
        state: &state,
        history: &history,
    })?;
    let best_params = best.map_or_else(|| model.flat_params(), |(_, p)| p);
    Ok(FitOutput {
        model,
        state,
        history,
        best_params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field_net::{Activation, Layer, NetworkParams, PosEncConfig};
    use crate::neuraldmd::{
        CoefficientKind, CoefficientSource, InitialStateParams, ModelConfig, NeuralModalModel, SpectrumParams,
    };
    use nalgebra::{DMatrix, DVector};

    fn constant_model(c: f64) -> NeuralModalModel {
        let posenc = PosEncConfig::new(1, 2).unwrap();
        let modal_net = NetworkParams::new(vec![Layer {
            weight: DMatrix::zeros(1, 4),
            bias: DVector::from_vec(vec![c]),
            activation: Activation::Identity,
        }])
        .unwrap();
        NeuralModalModel::from_parts(
            modal_net,
            posenc,
            SpectrumParams {
                k: 0,
                source: CoefficientSource::Free { raw: vec![] },
                time_scale: 100.0,
            },
            InitialStateParams {
                source: CoefficientSource::Free { raw: vec![1.0] },
            },
            0.0,
            1.0,
        )
        .unwrap()
    }

    fn px(x: f64, y: f64, t: f64, value: f64) -> PixelObservation {
        PixelObservation {
            x,
            y,
            t,
            value,
            sigma: 0.1,
        }
    }

    fn tiny_model(k: usize) -> NeuralModalModel {
        NeuralModalModel::new(
            &ModelConfig {
                k,
                posenc_degree: 2,
                modal_width: 6,
                modal_depth: 2,
                coef_width: 5,
                coef_depth: 1,
                latent_dim: 3,
                time_scale: 10.0,
                alpha_init: -0.3,
                omega_init_max: 8.0,
                seed: 11,
                ..ModelConfig::default()
            },
            0.0,
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let m = constant_model(2.0);
        let batch = [px(0.1, 0.2, 0.0, 2.0), px(-0.5, 0.3, 0.4, 2.0)];
        let (l, g) = pixel_loss(&m, &batch).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
        let batch = [px(0.1, 0.2, 0.0, 3.0), px(-0.5, 0.3, 0.4, 3.0)];
        assert_eq!(pixel_loss(&m, &batch).unwrap().0, 1.0);
    }

    fn fd_check(obj: &dyn Fn(&NeuralModalModel) -> (f64, Vec<f64>), model: &NeuralModalModel) {
        let (_, grad) = obj(model);
        let flat = model.flat_params();
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut m = model.clone();
            let mut f = flat.clone();
            f[i] += h;
            m.set_flat_params(&f).unwrap();
            let up = obj(&m).0;
            f[i] -= 2.0 * h;
            m.set_flat_params(&f).unwrap();
            let fd = (up - obj(&m).0) / (2.0 * h);
            let scale = fd.abs().max(grad[i].abs());
            assert!(scale < 1e-8 || (fd - grad[i]).abs() / scale < 1e-4, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn pixel_loss_gradient() {
        let m = tiny_model(1);
        let batch = [px(0.1, 0.2, 0.0, 0.3), px(-0.5, 0.3, 0.4, -0.2), px(0.1, 0.2, 0.9, 1.0)];
        fd_check(&|m| pixel_loss(m, &batch).unwrap(), &m);
    }

    #[test]
    fn chi2_definitional_values() {
        let obs = [
            VisibilityObservation {
                u: 0.0,
                v: 0.0,
                t: 0.0,
                vis: Complex64::new(1.0, 0.0),
                sigma: 0.5,
            },
            VisibilityObservation {
                u: 1.0,
                v: 0.0,
                t: 0.0,
                vis: Complex64::new(0.0, 2.0),
                sigma: 2.0,
            },
        ];
        let exact: Vec<Complex64> = obs.iter().map(|o| o.vis).collect();
        assert_eq!(chi2_of(&exact, &obs).unwrap(), 0.0);
        let off = [Complex64::new(1.0, 0.5), Complex64::new(-2.0, 2.0)];
        assert_eq!(chi2_of(&off, &obs).unwrap(), 1.0);
        let bad = [VisibilityObservation { sigma: 0.0, ..obs[0] }];
        assert!(chi2_of(&exact[..1], &bad).is_err());
        assert!(vis_chi2(&constant_model(1.0), &bad, Grid::new(2, 2).unwrap()).is_err());
    }

    #[test]
    fn chi2_of_rendered_truth_is_zero() {
        let m = tiny_model(1);
        let grid = Grid::new(4, 4).unwrap();
        let frame = m.render_frame(grid, 0.5).unwrap();
        let pts = [(0.0, 0.0), (1.5, -0.5)];
        let v = crate::observation::nudft(&frame, grid, &pts).unwrap();
        let obs: Vec<_> = pts
            .iter()
            .zip(&v)
            .map(|(&(u, vv), &vis)| VisibilityObservation {
                u,
                v: vv,
                t: 0.5,
                vis,
                sigma: 0.1,
            })
            .collect();
        assert!(vis_chi2(&m, &obs, grid).unwrap().0 < 1e-28);
    }

    #[test]
    fn vis_chi2_gradient() {
        let m = tiny_model(1);
        let grid = Grid::new(4, 4).unwrap();
        let obs = [
            VisibilityObservation {
                u: 0.5,
                v: -1.0,
                t: 0.0,
                vis: Complex64::new(0.3, -0.1),
                sigma: 0.05,
            },
            VisibilityObservation {
                u: 1.5,
                v: 0.2,
                t: 0.6,
                vis: Complex64::new(-0.2, 0.4),
                sigma: 0.1,
            },
            VisibilityObservation {
                u: -0.7,
                v: 2.0,
                t: 0.6,
                vis: Complex64::new(0.05, 0.0),
                sigma: 0.2,
            },
        ];
        fd_check(&|m| vis_chi2(m, &obs, grid).unwrap(), &m);
    }

    #[test]
    fn adam_zero_gradient_and_first_step() {
        let mut st = TrainState::new(2, 1e-3);
        st.m = vec![0.5, -0.5];
        st.v = vec![0.1, 0.2];
        let mut p = vec![1.0, 2.0];
        adam_step(&mut st, &mut p, &[0.0, 0.0], 1e-3, &[]).unwrap();
        assert_eq!(st.m, vec![0.45, -0.45]);
        assert!((st.v[0] - 0.0999).abs() < 1e-15);
        let mut st = TrainState::new(1, 1e-3);
        let mut p = vec![0.0];
        adam_step(&mut st, &mut p, &[-3.7], 1e-3, &[]).unwrap();
        assert!((p[0] - 1e-3).abs() < 1e-11);
        let groups = [crate::model::ParamGroup {
            name: "spectral".into(),
            len: 1,
        }];
        let e = adam_step(&mut st, &mut p, &[f64::NAN], 1e-3, &groups).unwrap_err();
        assert!(e.to_string().contains("spectral"));
    }

    #[test]
    fn adam_with_zero_moments_and_zero_gradient_is_fixed_point() {
        let mut st = TrainState::new(3, 1e-3);
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut st, &mut p, &[0.0; 3], 1e-3, &[]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn plateau_examples() {
        let cfg = TrainConfig::default();
        let mut st = TrainState::new(0, 1e-3);
        for i in 0..2000 {
            plateau_schedule(&mut st, 10.0 - i as f64 * 1e-3, &cfg);
        }
        assert_eq!(st.lr, 1e-3);
        let mut st = TrainState::new(0, 1e-3);
        let mut halvings = Vec::new();
        for e in 1..=500 {
            if plateau_schedule(&mut st, 1.0, &cfg) {
                halvings.push(e);
            }
        }
        assert_eq!(halvings, vec![500]);
        for _ in 0..500 {
            plateau_schedule(&mut st, 1.0, &cfg);
        }
        assert_eq!(st.lr, 1e-3 / 4.0);
    }

    #[test]
    fn zero_epochs_is_noop() {
        let m = tiny_model(1);
        let obs = [px(0.0, 0.0, 0.0, 1.0)];
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = fit(m.clone(), FitTarget::Pixels(&obs), &cfg, None).unwrap();
        assert_eq!(out.model, m);
        assert!(out.history.is_empty());
    }

    #[test]
    fn kind_mismatch_is_contract_error() {
        let obs = [px(0.0, 0.0, 0.0, 1.0)];
        let cfg = TrainConfig {
            loss_kind: LossKind::Visibility,
            ..Default::default()
        };
        assert!(matches!(
            fit(tiny_model(1), FitTarget::Pixels(&obs), &cfg, None),
            Err(Error::Contract(_))
        ));
    }

    fn pixel_data(model: &NeuralModalModel) -> Vec<PixelObservation> {
        let g = Grid::new(4, 4).unwrap();
        let mut obs = Vec::new();
        for k in 0..6 {
            let t = k as f64 / 5.0;
            let f = model.eval_field(&g.pixel_centers(), t).unwrap();
            for (p, v) in f.iter().enumerate() {
                obs.push(px(g.x_center(p % 4), g.y_center(p / 4), t, *v));
            }
        }
        obs
    }

    #[test]
    fn history_bookkeeping_and_determinism() {
        let obs = pixel_data(&tiny_model(1));
        let cfg = TrainConfig {
            lr0: 1e-2,
            epochs: 30,
            batch_size: 20,
            seed: 4,
            plateau_patience: 5,
            ..Default::default()
        };
        let a = fit(tiny_model(2), FitTarget::Pixels(&obs), &cfg, None).unwrap();
        let b = fit(tiny_model(2), FitTarget::Pixels(&obs), &cfg, None).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 30);
        let mut best = f64::INFINITY;
        let mut lr = cfg.lr0;
        for r in &a.history {
            assert!(r.loss.is_finite());
            best = best.min(r.loss);
            assert!(r.lr <= lr);
            lr = r.lr;
        }
        assert_eq!(Some(best), a.state.best_loss);
    }

    #[test]
    fn resume_matches_unbroken_run() {
        let obs = pixel_data(&tiny_model(1));
        let cfg = TrainConfig {
            lr0: 1e-2,
            epochs: 20,
            batch_size: 25,
            seed: 9,
            plateau_patience: 3,
            ..Default::default()
        };
        let full = fit(tiny_model(2), FitTarget::Pixels(&obs), &cfg, None).unwrap();
        let half = TrainConfig { epochs: 8, ..cfg.clone() };
        let a = fit(tiny_model(2), FitTarget::Pixels(&obs), &half, None).unwrap();
        let rest = TrainConfig { epochs: 12, ..cfg };
        let b = fit(a.model, FitTarget::Pixels(&obs), &rest, Some(a.state)).unwrap();
        let joined: Vec<_> = a.history.iter().chain(&b.history).copied().collect();
        assert_eq!(joined, full.history);
        assert_eq!(b.model, full.model);
    }

    #[test]
    fn periodic_hook_fires() {
        let obs = pixel_data(&tiny_model(1));
        let cfg = TrainConfig {
            epochs: 7,
            checkpoint_every: 3,
            ..Default::default()
        };
        let mut kinds = Vec::new();
        fit_with_hook(tiny_model(1), FitTarget::Pixels(&obs), &cfg, None, &mut |e| {
            kinds.push((e.kind, e.state.epoch));
            Ok(())
        })
        .unwrap();
        assert_eq!(
            kinds,
            vec![
                (FitEventKind::Periodic, 3),
                (FitEventKind::Periodic, 6),
                (FitEventKind::Final, 7)
            ]
        );
    }

    #[test]
    fn divergence_reports_last_good_state() {
        let obs = vec![px(0.0, 0.0, 0.0, f64::NAN)];
        let cfg = TrainConfig {
            epochs: 3,
            ..Default::default()
        };
        let mut seen = None;
        let r = fit_with_hook(tiny_model(1), FitTarget::Pixels(&obs), &cfg, None, &mut |e| {
            seen = Some((e.kind, e.state.epoch));
            Ok(())
        });
        assert!(matches!(r, Err(Error::Divergence(_))));
        assert_eq!(seen, Some((FitEventKind::Abort, 0)));
    }

    #[test]
    fn self_recovery_rank_one_model() {
        // data from a K=1 model; fitting the identical model from a nearby start
        let truth = tiny_model(1);
        let obs = pixel_data(&truth);
        let mut start = truth.clone();
        let mut p = start.flat_params();
        for (i, v) in p.iter_mut().enumerate() {
            *v += 1e-3 * ((i * 7919) % 13) as f64 / 13.0;
        }
        start.set_flat_params(&p).unwrap();
        let cfg = TrainConfig {
            lr0: 1e-3,
            epochs: 1500,
            batch_size: 1000,
            ..Default::default()
        };
        let out = fit(start, FitTarget::Pixels(&obs), &cfg, None).unwrap();
        let final_loss = pixel_loss(&out.model, &obs).unwrap().0;
        assert!(final_loss < 1e-6, "{final_loss}");
        let _ = CoefficientKind::Free;
    }
}

//! Experiment configuration: a TOML document with a mandatory seed and the
//! sections `[data]`, `[observe]`, `[model]`, `[train]` and `[eval]`.

use serde::{Deserialize, Serialize};

use crate::baselines::{AssimConfig, NeuralRepConfig};
use crate::classical_dmd::OptDmdConfig;
use crate::datagen::{Direction, HotspotSpec};
use crate::error::{Error, Result};
use crate::field_net::Activation;
use crate::neuraldmd::{CoefficientKind, ModelConfig, DEFAULT_DECAY_CUTOFF};
use crate::observation::{UVTrackConfig, MICROARCSEC};
use crate::training::{LossKind, Precision, TrainConfig};
use crate::video::Grid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    Hotspot,
    LinearModal,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub dt: f64,
    // hot spot
    pub orbit_radius: f64,
    /// `None` picks the velocity completing `orbits` revolutions.
    pub angular_velocity: Option<f64>,
    pub orbits: f64,
    pub total_flux: f64,
    pub gaussian_sigma: f64,
    pub direction: Direction,
    pub phase0: f64,
    // linear modal
    pub k: usize,
    /// Highest oscillation frequency, radians per time unit.
    pub max_freq: f64,
    /// Largest decay rate magnitude, per time unit.
    pub max_decay: f64,
    // CSV ingestion
    pub paths: Vec<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        let h = HotspotSpec::default();
        Self {
            kind: DataKind::Hotspot,
            frames: 120,
            height: 64,
            width: 64,
            dt: 1.0 / 120.0,
            orbit_radius: h.orbit_radius,
            angular_velocity: None,
            orbits: 2.0,
            total_flux: h.total_flux,
            gaussian_sigma: h.gaussian_sigma,
            direction: h.direction,
            phase0: h.phase0,
            k: 3,
            max_freq: 6.0 * std::f64::consts::PI,
            max_decay: 0.5,
            paths: Vec::new(),
        }
    }
}

impl DataSection {
    pub fn hotspot(&self) -> HotspotSpec {
        HotspotSpec {
            orbit_radius: self.orbit_radius,
            angular_velocity: self
                .angular_velocity
                .unwrap_or_else(|| HotspotSpec::for_window(self.frames, self.dt, self.orbits).angular_velocity),
            total_flux: self.total_flux,
            gaussian_sigma: self.gaussian_sigma,
            direction: self.direction,
            phase0: self.phase0,
        }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserveKind {
    Pixel,
    Vis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObserveSection {
    pub kind: ObserveKind,
    // pixel mode
    pub fraction: f64,
    /// Noise standard deviation as a fraction of the peak `|I|`.
    pub noise: f64,
    pub fixed_mask: bool,
    // visibility mode
    /// Bundled table name (`ngeht`, `ngeht_plus`) or a CSV path.
    pub stations: Option<String>,
    /// Restrict the table to these station names.
    pub station_subset: Vec<String>,
    pub frac_noise: f64,
    pub declination_deg: f64,
    /// Hour-angle span in radians; scans are spread over the video frames.
    pub hour_angle_start: f64,
    pub hour_angle_stop: f64,
    pub wavelength: f64,
    pub fov_uas: f64,
    /// Negative disables the elevation mask.
    pub elevation_cutoff_deg: f64,
}

impl Default for ObserveSection {
    fn default() -> Self {
        let uv = UVTrackConfig::default();
        Self {
            kind: ObserveKind::Pixel,
            fraction: 0.1,
            noise: 0.01,
            fixed_mask: true,
            stations: None,
            station_subset: Vec::new(),
            frac_noise: 0.05,
            declination_deg: uv.declination.to_degrees(),
            hour_angle_start: uv.hour_angle.0,
            hour_angle_stop: uv.hour_angle.1,
            wavelength: uv.wavelength,
            fov_uas: uv.field_of_view / MICROARCSEC,
            elevation_cutoff_deg: 10.0,
        }
    }
}

impl ObserveSection {
    /// Track with one scan per video frame.
    pub fn track_config(&self, frames: usize, t0: f64, dt: f64) -> UVTrackConfig {
        let span = self.hour_angle_stop - self.hour_angle_start;
        let step = if frames > 1 { span / (frames - 1) as f64 } else { 1.0 };
        UVTrackConfig {
            declination: self.declination_deg.to_radians(),
            hour_angle: (self.hour_angle_start, self.hour_angle_stop, step.max(f64::MIN_POSITIVE)),
            wavelength: self.wavelength,
            field_of_view: self.fov_uas * MICROARCSEC,
            elevation_cutoff: (self.elevation_cutoff_deg >= 0.0).then(|| self.elevation_cutoff_deg.to_radians()),
            t_start: t0,
            t_step: dt,
            sigma: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub k: usize,
    pub posenc_degree: usize,
    pub modal_width: usize,
    pub modal_depth: usize,
    pub coef_width: usize,
    pub coef_depth: usize,
    pub latent_dim: usize,
    pub activation: String,
    pub time_scale: f64,
    /// `network` (latent + MLP) or `free` (direct vectors).
    pub generator: String,
    pub alpha_init: f64,
    pub omega_init_max: f64,
    // neural representation baseline
    pub rep_posenc_degree: usize,
    pub rep_width: usize,
    pub rep_depth: usize,
    // optimized DMD
    pub rank: usize,
    pub tv_weight: f64,
    pub iters: usize,
    // 3D-Var
    pub blend_weight: f64,
    pub smooth_sigma: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        let r = NeuralRepConfig::default();
        let o = OptDmdConfig::default();
        let a = AssimConfig::new(Grid { height: 1, width: 1 });
        Self {
            k: m.k,
            posenc_degree: m.posenc_degree,
            modal_width: m.modal_width,
            modal_depth: m.modal_depth,
            coef_width: m.coef_width,
            coef_depth: m.coef_depth,
            latent_dim: m.latent_dim,
            activation: "tanh".into(),
            time_scale: m.time_scale,
            generator: "network".into(),
            alpha_init: m.alpha_init,
            omega_init_max: m.omega_init_max,
            rep_posenc_degree: r.posenc_degree,
            rep_width: r.width,
            rep_depth: r.depth,
            rank: o.rank,
            tv_weight: o.tv_weight,
            iters: o.iters,
            blend_weight: a.blend_weight,
            smooth_sigma: a.smooth_sigma,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, seed: u64) -> Result<ModelConfig> {
        Ok(ModelConfig {
            k: self.k,
            posenc_degree: self.posenc_degree,
            modal_width: self.modal_width,
            modal_depth: self.modal_depth,
            coef_width: self.coef_width,
            coef_depth: self.coef_depth,
            latent_dim: self.latent_dim,
            activation: Activation::parse(&self.activation)?,
            time_scale: self.time_scale,
            generator: match self.generator.as_str() {
                "network" => CoefficientKind::Network,
                "free" => CoefficientKind::Free,
                other => return Err(Error::Config(format!("unknown generator {other:?} (network, free)"))),
            },
            alpha_init: self.alpha_init,
            omega_init_max: self.omega_init_max,
            seed,
        })
    }

    pub fn rep_config(&self, seed: u64) -> Result<NeuralRepConfig> {
        Ok(NeuralRepConfig {
            posenc_degree: self.rep_posenc_degree,
            width: self.rep_width,
            depth: self.rep_depth,
            activation: Activation::parse(&self.activation)?,
            seed,
        })
    }

    pub fn optdmd_config(&self, seed: u64) -> OptDmdConfig {
        OptDmdConfig {
            rank: self.rank,
            tv_weight: self.tv_weight,
            iters: self.iters,
            seed,
            ..OptDmdConfig::default()
        }
    }

    pub fn assim_config(&self, grid: Grid) -> AssimConfig {
        AssimConfig {
            blend_weight: self.blend_weight,
            smooth_sigma: self.smooth_sigma,
            grid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Neuraldmd,
    NeuralRep,
    Optdmd,
    Threedvar,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Neuraldmd => "neuraldmd",
            Method::NeuralRep => "neural_rep",
            Method::Optdmd => "optdmd",
            Method::Threedvar => "threedvar",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub method: Method,
    pub lr0: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `f32` or `f64`.
    pub precision: String,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            method: Method::Neuraldmd,
            lr0: t.lr0,
            plateau_patience: t.plateau_patience,
            lr_factor: t.lr_factor,
            epochs: t.epochs,
            batch_size: t.batch_size,
            precision: "f64".into(),
            checkpoint_every: t.checkpoint_every,
            log_every: t.log_every,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64, loss_kind: LossKind, render_grid: Grid) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            lr0: self.lr0,
            plateau_patience: self.plateau_patience,
            lr_factor: self.lr_factor,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            precision: match self.precision.as_str() {
                "f64" => Precision::Double,
                "f32" => Precision::Single,
                other => return Err(Error::Config(format!("unknown precision {other:?} (f32, f64)"))),
            },
            loss_kind,
            render_grid,
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Extra frames rendered past the truth video's last timestamp.
    pub horizon: usize,
    /// End of the fitted window; defaults to the model's window or the last truth frame.
    pub window_end: Option<f64>,
    pub cylinder_radius: Option<f64>,
    pub n_angles: usize,
    pub spectrum_cutoff: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            horizon: 0,
            window_end: None,
            cylinder_radius: None,
            n_angles: 360,
            spectrum_cutoff: DEFAULT_DECAY_CUTOFF,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub observe: ObserveSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

/// Parses `key.path=value` overrides; the value is read as TOML, falling back to a string.
fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} must look like section.key=value")))?;
    let value: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {}", raw.trim())) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut table = doc;
    for k in parents {
        table = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override path {path:?}: {k} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// A parsed configuration and the canonical text its hash is taken over.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub canonical: String,
}

impl LoadedConfig {
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        if !doc.contains_key("seed") {
            return Err(Error::Config("missing mandatory top-level key `seed`".into()));
        }
        let config: ExperimentConfig = doc.clone().try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let canonical = toml::to_string(&config).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { config, canonical })
    }

    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn provenance(&self) -> crate::io::Provenance {
        crate::io::Provenance::new(&self.canonical, self.config.seed)
    }
}

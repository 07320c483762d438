//! Command-line front end: `generate`, `observe`, `fit` and `evaluate`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use crate::baselines::{mean_background, stream_on_times, threedvar_run, NeuralRepModel};
use crate::classical_dmd::optdmd_fit;
use crate::config::{DataKind, ExperimentConfig, LoadedConfig, Method, ObserveKind};
use crate::datagen::{gen_hotspot, gen_linear_modal, LinearModalSpec};
use crate::decomposition::ModalDecomposition;
use crate::error::{Error, Result};
use crate::eval::{cylinder_plot, error_curve, spectrum_report, spectrum_to_csv, write_text, ErrorCurve};
use crate::io::{
    checkpoint_read, checkpoint_write, ingest_csv_grid, modes_as_video, nvid_read, nvid_write, parse_history,
    read_decomposition_json, write_decomposition_json, write_history, Checkpoint, CheckpointModel, Provenance,
};
use crate::model::FieldModel;
use crate::neuraldmd::NeuralModalModel;
use crate::observation::{
    observe_visibilities, partition, read_observations_file, sample_pixels, uv_track, write_observations_file,
    Observation, PixelObservation, PixelSampling, StationTable, UVTrack, VisibilityNoise, VisibilityObservation,
};
use crate::training::{fit_with_hook, FitEvent, FitEventKind, FitTarget, HistoryRow, LossKind, TrainState};
use crate::video::{Grid, VideoGrid};

#[derive(Debug, Parser)]
#[command(name = "neuraldmd", version, about = "Neural modal reconstruction of sparse spatio-temporal observations")]
pub struct Cli {
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment configuration (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a configuration value, e.g. `train.epochs=200`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a video (NVID) from the configured generator or CSV frames.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Sample pixel or visibility observations of a video (JSON lines).
    Observe {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        video: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Fit the configured method and write its artifacts to a directory.
    Fit {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Sparse observations (neuraldmd, neural_rep, threedvar).
        #[arg(long)]
        obs: Option<PathBuf>,
        /// Dense video (optdmd).
        #[arg(long)]
        video: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Score a reconstruction against a truth video.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, conflicts_with_all = ["recon", "decomposition"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "decomposition")]
        recon: Option<PathBuf>,
        #[arg(long)]
        decomposition: Option<PathBuf>,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
}

/// Process exit code for an error: 1 for usage and configuration, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.workers == 0 {
        return Err(usage("--workers must be ≥ 1"));
    }
    // a second initialization in the same process keeps the first pool
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.workers).build_global();
    match cli.command {
        Command::Generate { cfg, out } => cmd_generate(&load(&cfg)?, &out),
        Command::Observe { cfg, video, out } => cmd_observe(&load(&cfg)?, &video, &out),
        Command::Fit {
            cfg,
            obs,
            video,
            resume,
            out_dir,
        } => cmd_fit(&load(&cfg)?, obs.as_deref(), video.as_deref(), resume.as_deref(), &out_dir),
        Command::Evaluate {
            cfg,
            truth,
            checkpoint,
            recon,
            decomposition,
            out_dir,
        } => {
            let source = match (checkpoint, recon, decomposition) {
                (Some(p), None, None) => ReconSource::Checkpoint(p),
                (None, Some(p), None) => ReconSource::Video(p),
                (None, None, Some(p)) => ReconSource::Decomposition(p),
                _ => return Err(usage("evaluate needs exactly one of --checkpoint, --recon, --decomposition")),
            };
            cmd_evaluate(&load(&cfg)?, &truth, &source, &out_dir)
        }
    }
}

fn load(a: &ConfigArgs) -> Result<LoadedConfig> {
    LoadedConfig::load(&a.config, &a.overrides).map_err(|e| match e {
        Error::File { path, source } => usage(format!("{}: {source}", path.display())),
        e => e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

fn write_nvid(path: &Path, video: &VideoGrid, prov: &Provenance) -> Result<()> {
    nvid_write(path, video)?;
    prov.write_sidecar(path)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Truth sidecar written next to a linear-modal video.
pub fn truth_path(video: &Path) -> PathBuf {
    with_suffix(video, ".truth.json")
}

/// uv track written next to visibility observations.
pub fn uvtrack_path(obs: &Path) -> PathBuf {
    with_suffix(obs, ".uvtrack.csv")
}

pub fn cmd_generate(lc: &LoadedConfig, out: &Path) -> Result<()> {
    let c = &lc.config;
    let d = &c.data;
    let prov = lc.provenance();
    let video = match d.kind {
        DataKind::Hotspot => gen_hotspot(&d.hotspot(), d.frames, d.height, d.width, d.dt)?,
        DataKind::LinearModal => {
            let spec = LinearModalSpec::seeded(d.k, d.max_freq, d.max_decay, c.seed);
            let (video, truth) = gen_linear_modal(&spec, d.frames, d.height, d.width, d.dt)?;
            write_decomposition_json(truth_path(out), &truth, Some(prov.clone()))?;
            video
        }
        DataKind::Csv => {
            if d.paths.is_empty() {
                return Err(usage("data.kind = \"csv\" needs data.paths"));
            }
            ingest_csv_grid(&d.paths, d.dt)?
        }
    };
    write_nvid(out, &video, &prov)?;
    info!("wrote {} frames of {}×{} to {}", video.num_frames(), video.grid.height, video.grid.width, out.display());
    Ok(())
}

fn station_table(c: &ExperimentConfig) -> Result<StationTable> {
    let o = &c.observe;
    let name = o
        .stations
        .as_deref()
        .ok_or_else(|| usage("visibility mode needs observe.stations (ngeht, ngeht_plus or a CSV path)"))?;
    let table = match StationTable::bundled(name) {
        Some(t) => t,
        None => StationTable::read_csv(Path::new(name))?,
    };
    if o.station_subset.is_empty() {
        Ok(table)
    } else {
        let names: Vec<&str> = o.station_subset.iter().map(String::as_str).collect();
        table.subset(&names)
    }
}

fn uvtrack_csv(track: &UVTrack, prov: &Provenance) -> String {
    let mut s = prov.meta_line();
    s.push_str("\nt,station_a,station_b,u,v\n");
    for e in &track.entries {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            e.t, track.station_names[e.station_a], track.station_names[e.station_b], e.u, e.v
        ));
    }
    s
}

pub fn cmd_observe(lc: &LoadedConfig, video_path: &Path, out: &Path) -> Result<()> {
    let c = &lc.config;
    let o = &c.observe;
    let prov = lc.provenance();
    let video = nvid_read(video_path)?;
    let obs: Vec<Observation> = match o.kind {
        ObserveKind::Pixel => {
            let peak = video.frames.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
            let cfg = PixelSampling {
                fraction: o.fraction,
                noise_sigma: o.noise * peak,
                fixed_mask: o.fixed_mask,
                ..PixelSampling::default()
            };
            sample_pixels(&video, &cfg, c.seed)?.into_iter().map(Observation::Pixel).collect()
        }
        ObserveKind::Vis => {
            let table = station_table(c)?;
            let track = uv_track(&table, &o.track_config(video.num_frames(), video.t0, video.dt))?;
            write_text(uvtrack_path(out), &uvtrack_csv(&track, &prov))?;
            let noise = VisibilityNoise {
                frac_noise: o.frac_noise,
                ..VisibilityNoise::default()
            };
            observe_visibilities(&video, &track, &noise, c.seed)?
                .into_iter()
                .map(Observation::Vis)
                .collect()
        }
    };
    write_observations_file(out, &obs)?;
    prov.write_sidecar(out)?;
    info!("wrote {} observations to {}", obs.len(), out.display());
    Ok(())
}

enum Loaded {
    Pixels(Vec<PixelObservation>),
    Vis(Vec<VisibilityObservation>),
}

impl Loaded {
    fn read(path: &Path) -> Result<Self> {
        let (p, v) = partition(&read_observations_file(path)?);
        match (p.is_empty(), v.is_empty()) {
            (false, true) => Ok(Loaded::Pixels(p)),
            (true, false) => Ok(Loaded::Vis(v)),
            (true, true) => Err(Error::InvalidInput(format!("{}: no observations", path.display()))),
            (false, false) => Err(Error::Contract(format!(
                "{}: mixes pixel and visibility observations",
                path.display()
            ))),
        }
    }

    fn times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = match self {
            Loaded::Pixels(p) => p.iter().map(|o| o.t).collect(),
            Loaded::Vis(v) => v.iter().map(|o| o.t).collect(),
        };
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    fn target(&self) -> FitTarget<'_> {
        match self {
            Loaded::Pixels(p) => FitTarget::Pixels(p),
            Loaded::Vis(v) => FitTarget::Visibilities(v),
        }
    }

    fn loss_kind(&self) -> LossKind {
        self.target().kind()
    }
}

/// Start and step of evenly spaced times.
fn uniform_axis(times: &[f64]) -> Result<(f64, f64)> {
    match times {
        [] => Err(Error::InvalidInput("no observation times".into())),
        [t] => Ok((*t, 1.0)),
        _ => {
            let dt = (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64;
            let tol = 1e-9 * dt.abs().max(times[0].abs());
            if times.iter().enumerate().any(|(k, t)| (t - (times[0] + k as f64 * dt)).abs() > tol) {
                return Err(Error::InvalidInput("observation times are not evenly spaced".into()));
            }
            Ok((times[0], dt))
        }
    }
}

fn render_video(times: &[f64], render: impl Fn(f64) -> Result<Vec<f64>>, grid: Grid) -> Result<VideoGrid> {
    let (t0, dt) = uniform_axis(times)?;
    let frames = times.iter().map(|&t| render(t)).collect::<Result<Vec<_>>>()?;
    VideoGrid::new(grid, t0, dt, frames)
}

fn window_of(times: &[f64]) -> (f64, f64) {
    let (a, b) = (times[0], times[times.len() - 1]);
    (a, if b > a { b - a } else { 1.0 })
}

/// History rows from an earlier run, kept up to the resumed epoch.
fn earlier_history(dir: &Path, upto: usize) -> Result<Vec<HistoryRow>> {
    let path = dir.join("history.csv");
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
    let mut rows = parse_history(&text, &path.display().to_string())?;
    rows.retain(|r| r.epoch <= upto);
    Ok(rows)
}

fn train<M: FieldModel>(
    model: M,
    wrap: impl Fn(M) -> CheckpointModel,
    data: &Loaded,
    lc: &LoadedConfig,
    resume: Option<TrainState>,
    out_dir: &Path,
) -> Result<(M, Vec<HistoryRow>)> {
    let c = &lc.config;
    let prov = lc.provenance();
    let cfg = c.train.train_config(c.seed, data.loss_kind(), c.data.grid()?)?;
    let ckpt_path = out_dir.join("checkpoint.ndmd");
    let mut prior = match &resume {
        Some(s) => earlier_history(out_dir, s.epoch)?,
        None => Vec::new(),
    };
    let every = c.train.checkpoint_every;
    let mut hook = |ev: &FitEvent<M>| -> Result<()> {
        let due = match ev.kind {
            FitEventKind::Periodic => every > 0 && ev.state.epoch % every == 0,
            FitEventKind::Abort => true,
            FitEventKind::Final => false,
        };
        if due {
            let ck = Checkpoint {
                model: wrap(ev.model.clone()),
                state: Some(ev.state.clone()),
                provenance: Some(prov.clone()),
            };
            checkpoint_write(&ckpt_path, &ck)?;
        }
        Ok(())
    };
    let out = fit_with_hook(model, data.target(), &cfg, resume, &mut hook)?;
    let ck = Checkpoint {
        model: wrap(out.model.clone()),
        state: Some(out.state.clone()),
        provenance: Some(prov.clone()),
    };
    checkpoint_write(&ckpt_path, &ck)?;
    prior.extend(out.history);
    write_history(out_dir.join("history.csv"), &prior, Some(&prov))?;
    if let Some(last) = prior.last() {
        info!("epoch {} loss {:.6e}", last.epoch, last.loss);
    }
    Ok((out.model, prior))
}

fn write_decomposition_outputs(d: &ModalDecomposition, lc: &LoadedConfig, out_dir: &Path) -> Result<()> {
    let prov = lc.provenance();
    write_decomposition_json(out_dir.join("decomposition.json"), d, Some(prov.clone()))?;
    write_text(
        out_dir.join("spectrum.csv"),
        &spectrum_to_csv(&spectrum_report(d, lc.config.eval.spectrum_cutoff), Some(&prov)),
    )?;
    write_nvid(&out_dir.join("modes.nvid"), &modes_as_video(d)?, &prov)
}

pub fn cmd_fit(
    lc: &LoadedConfig,
    obs: Option<&Path>,
    video: Option<&Path>,
    resume: Option<&Path>,
    out_dir: &Path,
) -> Result<()> {
    let c = &lc.config;
    let method = c.train.method;
    let prov = lc.provenance();
    create_dir(out_dir)?;
    if method == Method::Optdmd {
        if obs.is_some() {
            return Err(Error::Contract(
                "optdmd needs a dense video (--video); sparse observations are not supported".into(),
            ));
        }
        let path = video.ok_or_else(|| usage("optdmd needs --video"))?;
        let v = nvid_read(path)?;
        let r = optdmd_fit(&v, &c.model.optdmd_config(c.seed))?;
        let mut s = prov.meta_line();
        s.push_str("\niter,objective,tv\n");
        for (i, (o, t)) in r.objective_history.iter().zip(&r.tv_history).enumerate() {
            s.push_str(&format!("{i},{o},{t}\n"));
        }
        write_text(out_dir.join("objective.csv"), &s)?;
        write_decomposition_outputs(&r.decomposition, lc, out_dir)?;
        let times = v.times();
        let recon = render_video(&times, |t| Ok(r.decomposition.reconstruct(t, false)), v.grid)?;
        write_nvid(&out_dir.join("recon.nvid"), &recon, &prov)?;
        info!("optdmd objective {:.6e}", r.objective);
        return Ok(());
    }
    if video.is_some() {
        return Err(Error::Contract(format!(
            "method {} fits sparse observations (--obs), not a dense video",
            method.name()
        )));
    }
    let path = obs.ok_or_else(|| usage("this method needs --obs"))?;
    let data = Loaded::read(path)?;
    let times = data.times();
    let grid = c.data.grid()?;
    match method {
        Method::Threedvar => {
            let Loaded::Pixels(p) = &data else {
                return Err(Error::Contract("threedvar consumes pixel observations only".into()));
            };
            let (t0, dt) = uniform_axis(&times)?;
            let stream = stream_on_times(p, &times)?;
            let frames = threedvar_run(&stream, &mean_background(&stream, grid), &c.model.assim_config(grid))?;
            write_nvid(&out_dir.join("analysis.nvid"), &VideoGrid::new(grid, t0, dt, frames)?, &prov)?;
        }
        Method::Neuraldmd | Method::NeuralRep => {
            let (model_ck, state) = match resume {
                Some(p) => {
                    let ck = checkpoint_read(p)?;
                    (Some(ck.model), ck.state)
                }
                None => (None, None),
            };
            let (start, len) = window_of(&times);
            if method == Method::Neuraldmd {
                let model = match model_ck {
                    Some(CheckpointModel::NeuralDmd(m)) => m,
                    Some(_) => return Err(Error::Contract("checkpoint does not hold a NeuralDMD model".into())),
                    None => NeuralModalModel::new(&c.model.model_config(c.seed)?, start, len)?,
                };
                let (m, _) = train(model, CheckpointModel::NeuralDmd, &data, lc, state, out_dir)?;
                write_decomposition_outputs(&m.export_decomposition(grid, c.eval.spectrum_cutoff)?, lc, out_dir)?;
                let recon = render_video(&times, |t| m.render_frame(grid, t), grid)?;
                write_nvid(&out_dir.join("recon.nvid"), &recon, &prov)?;
            } else {
                let model = match model_ck {
                    Some(CheckpointModel::NeuralRep(m)) => m,
                    Some(_) => {
                        return Err(Error::Contract("checkpoint does not hold a neural representation".into()))
                    }
                    None => NeuralRepModel::new(&c.model.rep_config(c.seed)?, start, len)?,
                };
                let (m, _) = train(model, CheckpointModel::NeuralRep, &data, lc, state, out_dir)?;
                let recon = render_video(&times, |t| m.render_frame(grid, t), grid)?;
                write_nvid(&out_dir.join("recon.nvid"), &recon, &prov)?;
            }
        }
        Method::Optdmd => unreachable!("handled above"),
    }
    info!("wrote fit artifacts to {}", out_dir.display());
    Ok(())
}

pub enum ReconSource {
    Checkpoint(PathBuf),
    Video(PathBuf),
    Decomposition(PathBuf),
}

#[derive(Debug, Serialize)]
struct Metrics {
    frames: usize,
    horizon_frames: usize,
    window_end: f64,
    mean_in_window: Option<f64>,
    max_in_window: Option<f64>,
    final_in_window: Option<f64>,
    mean_extrapolated: Option<f64>,
    max_extrapolated: Option<f64>,
    angular_velocity: Option<f64>,
    truth_angular_velocity: Option<f64>,
    provenance: Provenance,
}

fn summarize(curve: &ErrorCurve) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    let stats = |v: Vec<f64>| -> (Option<f64>, Option<f64>, Option<f64>) {
        if v.is_empty() {
            return (None, None, None);
        }
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (Some(mean), Some(max), v.last().copied())
    };
    let (mi, xi, fi) = stats(curve.in_window().map(|r| r.total_err).collect());
    let (me, xe, _) = stats(curve.extrapolated().map(|r| r.total_err).collect());
    (mi, xi, fi, me, xe)
}

pub fn cmd_evaluate(lc: &LoadedConfig, truth_path: &Path, source: &ReconSource, out_dir: &Path) -> Result<()> {
    let c = &lc.config;
    let e = &c.eval;
    let prov = lc.provenance();
    create_dir(out_dir)?;
    let truth = nvid_read(truth_path)?;
    let n = truth.num_frames();
    let mut times = truth.times();
    times.extend((n..n + e.horizon).map(|k| truth.time(k)));
    let grid = truth.grid;
    let mut spectrum = None;
    let mut model_end = None;
    let full = match source {
        ReconSource::Checkpoint(p) => match checkpoint_read(p)?.model {
            CheckpointModel::NeuralDmd(m) => {
                spectrum = Some(m.export_decomposition(grid, e.spectrum_cutoff)?);
                model_end = Some(m.window_start + m.window_len);
                render_video(&times, |t| m.render_frame(grid, t), grid)?
            }
            CheckpointModel::NeuralRep(m) => {
                model_end = Some(m.window_start + m.window_len);
                render_video(&times, |t| m.render_frame(grid, t), grid)?
            }
        },
        ReconSource::Decomposition(p) => {
            let d = read_decomposition_json(p)?;
            if (d.height, d.width) != (grid.height, grid.width) {
                return Err(Error::Shape(format!(
                    "decomposition is {}×{}, truth is {}×{}",
                    d.height, d.width, grid.height, grid.width
                )));
            }
            let v = render_video(&times, |t| Ok(d.reconstruct(t, false)), grid)?;
            spectrum = Some(d);
            v
        }
        ReconSource::Video(p) => nvid_read(p)?,
    };
    if full.num_frames() < n {
        return Err(Error::Contract(format!(
            "reconstruction has {} frames, truth has {n}",
            full.num_frames()
        )));
    }
    let mut aligned = full.clone();
    aligned.frames.truncate(n);
    let window_end = e.window_end.or(model_end).unwrap_or_else(|| truth.time(n - 1));
    let curve = error_curve(&aligned, &truth, window_end)?;
    write_text(out_dir.join("error_curve.csv"), &curve.to_csv(Some(&prov)))?;
    if !matches!(source, ReconSource::Video(_)) {
        write_nvid(&out_dir.join("recon.nvid"), &full, &prov)?;
    }
    let (mut w, mut wt) = (None, None);
    if let Some(r) = e.cylinder_radius {
        let cyl = cylinder_plot(&full, r, e.n_angles)?;
        write_text(out_dir.join("cylinder.csv"), &cyl.to_csv(Some(&prov)))?;
        w = Some(cyl.angular_velocity()?);
        let tc = cylinder_plot(&truth, r, e.n_angles)?;
        write_text(out_dir.join("truth_cylinder.csv"), &tc.to_csv(Some(&prov)))?;
        wt = Some(tc.angular_velocity()?);
    }
    if let Some(d) = &spectrum {
        write_text(
            out_dir.join("spectrum.csv"),
            &spectrum_to_csv(&spectrum_report(d, e.spectrum_cutoff), Some(&prov)),
        )?;
    }
    let (mi, xi, fi, me, xe) = summarize(&curve);
    let metrics = Metrics {
        frames: n,
        horizon_frames: full.num_frames() - n,
        window_end,
        mean_in_window: mi,
        max_in_window: xi,
        final_in_window: fi,
        mean_extrapolated: me,
        max_extrapolated: xe,
        angular_velocity: w,
        truth_angular_velocity: wt,
        provenance: prov,
    };
    write_text(out_dir.join("metrics.json"), &serde_json::to_string_pretty(&metrics)?)?;
    info!("evaluated {n} frames; metrics in {}", out_dir.display());
    Ok(())
}

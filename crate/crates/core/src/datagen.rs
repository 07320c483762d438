//! Synthetic ground-truth videos: an orbiting Gaussian hot spot and exact
//! instances of the conjugate-pair modal model.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decomposition::{ModalDecomposition, ModeLayout, TimeAxis};
use crate::error::{Error, Result};
use crate::video::{Grid, VideoGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    #[default]
    Ccw,
    Cw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HotspotSpec {
    /// Orbit radius in field units (the field spans `[-1, 1]²`).
    pub orbit_radius: f64,
    /// Radians per time unit.
    pub angular_velocity: f64,
    /// Integrated flux `Σ I / (H W)`.
    pub total_flux: f64,
    pub gaussian_sigma: f64,
    pub direction: Direction,
    /// Starting angle in radians.
    pub phase0: f64,
}

impl Default for HotspotSpec {
    fn default() -> Self {
        Self {
            orbit_radius: 0.5,
            angular_velocity: 1.0,
            total_flux: 1.0,
            gaussian_sigma: 0.2,
            direction: Direction::Ccw,
            phase0: 0.0,
        }
    }
}

impl HotspotSpec {
    /// Default spot completing `orbits` revolutions over `frames` samples.
    pub fn for_window(frames: usize, dt: f64, orbits: f64) -> Self {
        Self {
            angular_velocity: orbits * 2.0 * PI / (frames as f64 * dt),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.orbit_radius > 0.0 && self.gaussian_sigma > 0.0 && self.total_flux > 0.0) {
            return Err(Error::InvalidInput("hot-spot radius, sigma and flux must be positive".into()));
        }
        if !self.angular_velocity.is_finite() || !self.phase0.is_finite() {
            return Err(Error::InvalidInput("hot-spot angular velocity and phase must be finite".into()));
        }
        if self.orbit_radius + 2.5 * self.gaussian_sigma > 1.0 + 1e-12 {
            return Err(Error::InvalidInput(format!(
                "hot spot at radius {} with sigma {} leaves the field of view",
                self.orbit_radius, self.gaussian_sigma
            )));
        }
        Ok(())
    }

    /// Signed angle at time `t` after the first frame.
    pub fn phase(&self, t: f64) -> f64 {
        let sign = match self.direction {
            Direction::Ccw => 1.0,
            Direction::Cw => -1.0,
        };
        self.phase0 + sign * self.angular_velocity * t
    }

    pub fn center(&self, t: f64) -> [f64; 2] {
        let p = self.phase(t);
        [self.orbit_radius * p.cos(), self.orbit_radius * p.sin()]
    }
}

/// Orbiting Gaussian, `frames` samples spaced `dt` from `t = 0`.
pub fn gen_hotspot(spec: &HotspotSpec, frames: usize, height: usize, width: usize, dt: f64) -> Result<VideoGrid> {
    spec.validate()?;
    let grid = Grid::new(height, width)?;
    let centers = grid.pixel_centers();
    let s2 = spec.gaussian_sigma * spec.gaussian_sigma;
    // density over the half-scaled unit square, so Σ I / (H W) ≈ flux
    let amp = spec.total_flux * 4.0 / (2.0 * PI * s2);
    let out = (0..frames)
        .map(|k| {
            let [cx, cy] = spec.center(k as f64 * dt);
            centers
                .iter()
                .map(|&[x, y]| {
                    let r2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    amp * (-r2 / (2.0 * s2)).exp()
                })
                .collect()
        })
        .collect();
    VideoGrid::new(grid, 0.0, dt, out)
}

/// Parameters of an exact conjugate-pair video.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModalSpec {
    /// Rates of pairs `1..=K` on the generator clock; `α ≤ 0`.
    pub omega: Vec<Complex64>,
    /// `b_0` (real part used) followed by `b_1..b_K`.
    pub b: Vec<Complex64>,
    pub mode_seed: u64,
    /// Gaussian bumps summed per mode component.
    pub bumps: usize,
    pub time: TimeAxis,
}

impl LinearModalSpec {
    /// Seeded spectrum with `K` pairs spread over `(0, max_freq]` and mild decay.
    pub fn seeded(k: usize, max_freq: f64, max_decay: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omega = (1..=k)
            .map(|j| {
                let f = max_freq * j as f64 / k as f64 * rng.random_range(0.85..1.0);
                Complex64::new(-max_decay * rng.random_range(0.0..1.0), f)
            })
            .collect();
        let mut b = vec![Complex64::new(1.0, 0.0)];
        for _ in 0..k {
            let mag = rng.random_range(0.3..0.6);
            let ph = rng.random_range(0.0..2.0 * PI);
            b.push(Complex64::from_polar(mag, ph));
        }
        Self {
            omega,
            b,
            mode_seed: seed.wrapping_add(1),
            bumps: 3,
            time: TimeAxis::IDENTITY,
        }
    }

    pub fn k(&self) -> usize {
        self.omega.len()
    }
}

/// Smooth seeded real field: a positive offset plus Gaussian bumps.
fn smooth_component(rng: &mut ChaCha8Rng, centers: &[[f64; 2]], bumps: usize, offset: f64) -> Vec<f64> {
    let params: Vec<(f64, f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.random_range(-0.6..0.6),
                rng.random_range(-0.6..0.6),
                rng.random_range(0.25..0.5),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    centers
        .iter()
        .map(|&[x, y]| {
            offset
                + params
                    .iter()
                    .map(|&(cx, cy, s, a)| a * (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * s * s)).exp())
                    .sum::<f64>()
        })
        .collect()
}

/// Frames `w_0 b_0 + 2 Re Σ_k w_k e^{Ω_k τ} b_k` on the grid, with the
/// generating decomposition returned as ground truth.
pub fn gen_linear_modal(
    spec: &LinearModalSpec,
    frames: usize,
    height: usize,
    width: usize,
    dt: f64,
) -> Result<(VideoGrid, ModalDecomposition)> {
    let k = spec.k();
    if spec.b.len() != k + 1 {
        return Err(Error::Shape(format!("need {} initial amplitudes for K={k}, got {}", k + 1, spec.b.len())));
    }
    if let Some(o) = spec.omega.iter().find(|o| o.re > 0.0 || !o.re.is_finite() || !o.im.is_finite()) {
        return Err(Error::InvalidInput(format!("rate {o} must be finite with non-positive real part")));
    }
    let grid = Grid::new(height, width)?;
    let centers = grid.pixel_centers();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.mode_seed);
    let mut modes = vec![smooth_component(&mut rng, &centers, spec.bumps, 1.0)
        .into_iter()
        .map(|v| Complex64::new(v, 0.0))
        .collect::<Vec<_>>()];
    for _ in 0..k {
        let re = smooth_component(&mut rng, &centers, spec.bumps, 0.0);
        let im = smooth_component(&mut rng, &centers, spec.bumps, 0.0);
        modes.push(re.into_iter().zip(im).map(|(a, b)| Complex64::new(a, b) * 0.5).collect());
    }
    let mut omega = vec![Complex64::new(0.0, 0.0)];
    omega.extend_from_slice(&spec.omega);
    let mut b = spec.b.clone();
    b[0] = Complex64::new(b[0].re, 0.0);
    let truth = ModalDecomposition::new(height, width, ModeLayout::ConjugatePairs, modes, omega, b, spec.time)?;
    let out = (0..frames).map(|j| truth.reconstruct(j as f64 * dt, false)).collect();
    let video = VideoGrid::new(grid, 0.0, dt, out)?;
    Ok((video, truth))
}

//! Grid-sampled modal decompositions `I(x, y, t) = Σ_j w_j(x, y) e^{Ω_j τ(t)} b_j`.

use num_complex::Complex64;

use crate::error::{Error, Result};

/// How the mode list is combined into a real field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeLayout {
    /// `w_0 b_0 + 2 Re Σ_{k≥1} w_k e^{Ω_k τ} b_k` with `Ω_0 = 0` and real `b_0`.
    ConjugatePairs,
    /// `Re Σ_j w_j e^{Ω_j τ} b_j` with no pairing imposed.
    Free,
}

/// Affine map from physical time to the exponent clock: `τ = scale · (t − origin) / unit`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeAxis {
    pub origin: f64,
    pub unit: f64,
    pub scale: f64,
}

impl TimeAxis {
    pub const IDENTITY: TimeAxis = TimeAxis {
        origin: 0.0,
        unit: 1.0,
        scale: 1.0,
    };

    /// Normalized time `(t − origin) / unit`, before the exponent scale.
    pub fn normalize(&self, t: f64) -> f64 {
        (t - self.origin) / self.unit
    }

    pub fn clock(&self, t: f64) -> f64 {
        self.scale * self.normalize(t)
    }
}

/// Real field value of a conjugate-pair expansion at one point.
///
/// `growth[k] = e^{Ω_k τ}` for `k ≥ 1`; `w` and `b` hold the complex half of
/// the pairs (entries `1..=K`). Shared by the synthetic generator and the
/// neural model so both follow one evaluation path.
#[inline]
pub fn pair_field_value(w0: f64, b0: f64, w: &[Complex64], growth: &[Complex64], b: &[Complex64]) -> f64 {
    let mut acc = 0.0;
    for ((wk, gk), bk) in w.iter().zip(growth).zip(b) {
        acc += (wk * gk * bk).re;
    }
    w0 * b0 + 2.0 * acc
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalDecomposition {
    pub height: usize,
    pub width: usize,
    pub layout: ModeLayout,
    /// One row-major `height × width` grid per mode.
    pub modes: Vec<Vec<Complex64>>,
    pub omega: Vec<Complex64>,
    pub b: Vec<Complex64>,
    pub time: TimeAxis,
    /// Modes marked as negligible by a decay cutoff.
    pub flagged: Vec<bool>,
}

impl ModalDecomposition {
    pub fn new(
        height: usize,
        width: usize,
        layout: ModeLayout,
        modes: Vec<Vec<Complex64>>,
        omega: Vec<Complex64>,
        b: Vec<Complex64>,
        time: TimeAxis,
    ) -> Result<Self> {
        let r = modes.len();
        if r == 0 || omega.len() != r || b.len() != r {
            return Err(Error::Shape(format!(
                "decomposition needs equal non-zero mode/omega/b counts, got {}/{}/{}",
                r,
                omega.len(),
                b.len()
            )));
        }
        if let Some(bad) = modes.iter().position(|m| m.len() != height * width) {
            return Err(Error::Shape(format!("mode {bad} does not match the {height}×{width} grid")));
        }
        if layout == ModeLayout::ConjugatePairs && (omega[0] != Complex64::new(0.0, 0.0) || b[0].im != 0.0) {
            return Err(Error::InvalidInput(
                "conjugate-pair layout requires Ω_0 = 0 and real b_0".into(),
            ));
        }
        Ok(Self {
            height,
            width,
            layout,
            modes,
            omega,
            b,
            time,
            flagged: vec![false; r],
        })
    }

    pub fn rank(&self) -> usize {
        match self.layout {
            ModeLayout::ConjugatePairs => 2 * self.modes.len() - 1,
            ModeLayout::Free => self.modes.len(),
        }
    }

    /// Flags modes (never the static one in pair layout) whose decay rate is below `cutoff`.
    pub fn flag_decaying(&mut self, cutoff: f64) {
        for (j, (flag, om)) in self.flagged.iter_mut().zip(&self.omega).enumerate() {
            let fixed_static = self.layout == ModeLayout::ConjugatePairs && j == 0;
            *flag = !fixed_static && om.re < cutoff;
        }
    }

    /// Reconstructs the frame at physical time `t`, row-major.
    pub fn reconstruct(&self, t: f64, skip_flagged: bool) -> Vec<f64> {
        let tau = self.time.clock(t);
        let keep = |j: usize| !(skip_flagged && self.flagged[j]);
        let n = self.height * self.width;
        match self.layout {
            ModeLayout::ConjugatePairs => {
                let b0 = self.b[0].re;
                let mut growth = Vec::with_capacity(self.modes.len() - 1);
                let mut bk = Vec::with_capacity(self.modes.len() - 1);
                for j in 1..self.modes.len() {
                    let g = if keep(j) { (self.omega[j] * tau).exp() } else { Complex64::new(0.0, 0.0) };
                    growth.push(g);
                    bk.push(self.b[j]);
                }
                let mut w = vec![Complex64::new(0.0, 0.0); self.modes.len() - 1];
                (0..n)
                    .map(|p| {
                        for (k, wk) in w.iter_mut().enumerate() {
                            *wk = self.modes[k + 1][p];
                        }
                        pair_field_value(self.modes[0][p].re, b0, &w, &growth, &bk)
                    })
                    .collect()
            }
            ModeLayout::Free => {
                let coef: Vec<Complex64> = (0..self.modes.len())
                    .map(|j| {
                        if keep(j) {
                            (self.omega[j] * tau).exp() * self.b[j]
                        } else {
                            Complex64::new(0.0, 0.0)
                        }
                    })
                    .collect();
                (0..n)
                    .map(|p| {
                        self.modes
                            .iter()
                            .zip(&coef)
                            .map(|(m, c)| (m[p] * c).re)
                            .sum()
                    })
                    .collect()
            }
        }
    }
}

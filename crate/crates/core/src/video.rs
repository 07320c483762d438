//! Dense `T × H × W` fields on the normalized domain `[-1, 1]²`.
//!
//! Row `i` of a frame sits at `y = -1 + (2i + 1) / H` and column `j` at
//! `x = -1 + (2j + 1) / W`, i.e. pixel centers with `y` increasing with
//! the row index.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
}

impl Grid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!("grid must be at least 1×1, got {height}×{width}")));
        }
        Ok(Self { height, width })
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x_center(&self, col: usize) -> f64 {
        -1.0 + (2 * col + 1) as f64 / self.width as f64
    }

    pub fn y_center(&self, row: usize) -> f64 {
        -1.0 + (2 * row + 1) as f64 / self.height as f64
    }

    /// Pixel centers in row-major order.
    pub fn pixel_centers(&self) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.height {
            let y = self.y_center(i);
            for j in 0..self.width {
                out.push([self.x_center(j), y]);
            }
        }
        out
    }

    /// Fractional `(row, col)` index of a field coordinate.
    pub fn to_index(&self, x: f64, y: f64) -> (f64, f64) {
        (
            (y + 1.0) * 0.5 * self.height as f64 - 0.5,
            (x + 1.0) * 0.5 * self.width as f64 - 0.5,
        )
    }

    /// Nearest pixel of a field coordinate, if it lies inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let (r, c) = self.to_index(x, y);
        let (r, c) = (r.round(), c.round());
        if r < 0.0 || c < 0.0 || r >= self.height as f64 || c >= self.width as f64 {
            return None;
        }
        Some((r as usize, c as usize))
    }

    /// Bilinear sample with clamp-to-edge.
    pub fn bilinear(&self, frame: &[f64], x: f64, y: f64) -> f64 {
        let (r, c) = self.to_index(x, y);
        let r = r.clamp(0.0, (self.height - 1) as f64);
        let c = c.clamp(0.0, (self.width - 1) as f64);
        let (r0, c0) = (r.floor() as usize, c.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(self.height - 1), (c0 + 1).min(self.width - 1));
        let (fr, fc) = (r - r0 as f64, c - c0 as f64);
        let at = |i: usize, j: usize| frame[i * self.width + j];
        (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c1)) + fr * ((1.0 - fc) * at(r1, c0) + fc * at(r1, c1))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoGrid {
    pub grid: Grid,
    pub t0: f64,
    pub dt: f64,
    /// Frame-major, then row-major.
    pub frames: Vec<Vec<f64>>,
}

impl VideoGrid {
    pub fn new(grid: Grid, t0: f64, dt: f64, frames: Vec<Vec<f64>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::InvalidInput("video needs at least one frame".into()));
        }
        if !(dt > 0.0) || !dt.is_finite() || !t0.is_finite() {
            return Err(Error::InvalidInput(format!("video needs finite t0 and dt > 0, got t0={t0}, dt={dt}")));
        }
        for (k, f) in frames.iter().enumerate() {
            if f.len() != grid.len() {
                return Err(Error::Shape(format!(
                    "frame {k} has {} values, grid is {}×{}",
                    f.len(),
                    grid.height,
                    grid.width
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("frame {k}")));
            }
        }
        Ok(Self { grid, t0, dt, frames })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.num_frames()).map(|k| self.time(k)).collect()
    }

    /// Index of the frame whose timestamp is closest to `t`.
    pub fn nearest_frame(&self, t: f64) -> usize {
        let k = ((t - self.t0) / self.dt).round();
        k.clamp(0.0, (self.num_frames() - 1) as f64) as usize
    }

    pub fn mean_frame(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.grid.len()];
        for f in &self.frames {
            for (a, v) in m.iter_mut().zip(f) {
                *a += v;
            }
        }
        let n = self.num_frames() as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Separable Gaussian blur of every frame (sigma in pixels).
    pub fn blurred(&self, sigma: f64) -> Result<Self> {
        let frames = self
            .frames
            .iter()
            .map(|f| crate::baselines::gaussian_blur(f, self.grid, sigma))
            .collect();
        Self::new(self.grid, self.t0, self.dt, frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centers_are_symmetric() {
        let g = Grid::new(4, 3).unwrap();
        assert!((g.x_center(0) + 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(g.x_center(1), 0.0);
        assert_eq!(g.y_center(3), 0.75);
        assert_eq!(g.cell_of(g.x_center(2), g.y_center(1)), Some((1, 2)));
        assert_eq!(g.cell_of(1.5, 0.0), None);
    }

    #[test]
    fn bilinear_hits_pixel_centers() {
        let g = Grid::new(2, 2).unwrap();
        let f = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(g.bilinear(&f, -0.5, -0.5), 1.0);
        assert_eq!(g.bilinear(&f, 0.5, 0.5), 4.0);
        assert_eq!(g.bilinear(&f, 0.0, 0.0), 2.5);
        assert_eq!(g.bilinear(&f, -1.0, -1.0), 1.0);
    }

    #[test]
    fn rejects_bad_videos() {
        let g = Grid::new(1, 2).unwrap();
        assert!(VideoGrid::new(g, 0.0, 1.0, vec![vec![0.0]]).is_err());
        assert!(VideoGrid::new(g, 0.0, 0.0, vec![vec![0.0, 0.0]]).is_err());
        assert!(VideoGrid::new(g, 0.0, 1.0, vec![vec![0.0, f64::NAN]]).is_err());
        assert!(VideoGrid::new(g, 0.0, 1.0, vec![]).is_err());
    }
}

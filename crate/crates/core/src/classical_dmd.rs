//! Grid-based reference methods: exact DMD via the SVD and TV-regularized
//! optimized DMD fitted by gradient descent.

use nalgebra::{DMatrix, DVector, SVD};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::decomposition::{ModalDecomposition, ModeLayout, TimeAxis};
use crate::error::{Error, Result};
use crate::video::VideoGrid;

/// Singular values below this fraction of the largest are treated as zero.
pub const SVD_RANK_TOL: f64 = 1e-12;

type CMatrix = DMatrix<Complex64>;
type CVector = DVector<Complex64>;

const ZERO: Complex64 = Complex64 { re: 0.0, im: 0.0 };

#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    pub x: DMatrix<f64>,
    pub x_prime: DMatrix<f64>,
    pub dt: f64,
}

impl SnapshotMatrix {
    pub fn new(x: DMatrix<f64>, x_prime: DMatrix<f64>, dt: f64) -> Result<Self> {
        if x.shape() != x_prime.shape() || x.ncols() == 0 || x.nrows() == 0 {
            return Err(Error::Shape(format!(
                "snapshot matrices must share a non-empty shape, got {:?} and {:?}",
                x.shape(),
                x_prime.shape()
            )));
        }
        if !(dt > 0.0) {
            return Err(Error::InvalidInput(format!("dt {dt} must be positive")));
        }
        if x.iter().chain(x_prime.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("snapshot matrix".into()));
        }
        Ok(Self { x, x_prime, dt })
    }

    /// Consecutive frame pairs of a video as columns.
    pub fn from_video(video: &VideoGrid) -> Result<Self> {
        let t = video.num_frames();
        if t < 2 {
            return Err(Error::InvalidInput("DMD needs at least two frames".into()));
        }
        let n = video.grid.len();
        let x = DMatrix::from_fn(n, t - 1, |p, k| video.frames[k][p]);
        let xp = DMatrix::from_fn(n, t - 1, |p, k| video.frames[k + 1][p]);
        Self::new(x, xp, video.dt)
    }

    /// Snapshots of `x_{k+1} = A x_k` starting from `x0`; `m` columns.
    pub fn from_linear_system(a: &DMatrix<f64>, x0: &DVector<f64>, m: usize, dt: f64) -> Result<Self> {
        let mut cols = vec![x0.clone()];
        for _ in 0..m {
            let next = a * cols.last().expect("non-empty");
            cols.push(next);
        }
        let x = DMatrix::from_columns(&cols[..m]);
        let xp = DMatrix::from_columns(&cols[1..]);
        Self::new(x, xp, dt)
    }
}

#[derive(Debug, Clone)]
pub struct DiscreteSpectrum {
    pub lambda: Vec<Complex64>,
    /// Full-space modes `X′ V Σ⁻¹ W̃`, one column per eigenvalue.
    pub modes: CMatrix,
    /// Reduced operator `Uᴴ X′ V Σ⁻¹`.
    pub atilde: DMatrix<f64>,
    /// Eigenvectors of the reduced operator (columns, unit norm).
    pub eigvecs: CMatrix,
    pub singular_values: Vec<f64>,
}

fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|v| Complex64::new(v, 0.0))
}

/// Unit null vector of a square complex matrix (right singular vector of the
/// smallest singular value).
fn null_vector(m: CMatrix) -> Result<CVector> {
    let n = m.nrows();
    let svd = SVD::new(m, false, true);
    let vt = svd
        .v_t
        .ok_or_else(|| Error::InvalidInput("SVD did not produce right singular vectors".into()))?;
    let k = (0..n)
        .min_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]))
        .expect("non-empty");
    Ok(DVector::from_fn(n, |i, _| vt[(k, i)].conj()))
}

/// Exact DMD truncated to rank `r`.
pub fn exact_dmd(snap: &SnapshotMatrix, r: usize) -> Result<DiscreteSpectrum> {
    let (n, m) = snap.x.shape();
    if r == 0 || r > n.min(m) {
        return Err(Error::InvalidInput(format!("rank {r} outside 1..={}", n.min(m))));
    }
    let svd = SVD::new(snap.x.clone(), true, true);
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested Vᵀ");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sv: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let smax = sv[0];
    let usable = sv.iter().filter(|&&s| s > SVD_RANK_TOL * smax).count();
    if usable < r {
        return Err(Error::RankDeficient { requested: r, usable });
    }
    let ur = DMatrix::from_fn(n, r, |i, k| u[(i, order[k])]);
    let vr = DMatrix::from_fn(m, r, |j, k| vt[(order[k], j)]);
    let sinv = DMatrix::from_diagonal(&DVector::from_fn(r, |k, _| 1.0 / sv[k]));
    let xvs = &snap.x_prime * &vr * &sinv;
    let atilde = ur.transpose() * &xvs;
    let lambda: Vec<Complex64> = atilde.complex_eigenvalues().iter().copied().collect();
    let ac = to_complex(&atilde);
    let mut eigvecs = CMatrix::zeros(r, r);
    for (k, &l) in lambda.iter().enumerate() {
        let shifted = &ac - CMatrix::identity(r, r) * l;
        eigvecs.set_column(k, &null_vector(shifted)?);
    }
    let modes = to_complex(&xvs) * &eigvecs;
    Ok(DiscreteSpectrum {
        lambda,
        modes,
        atilde,
        eigvecs,
        singular_values: sv,
    })
}

/// `Ω = log(Λ) / dt` on the principal branch.
pub fn to_continuous(lambda: &[Complex64], dt: f64) -> Result<Vec<Complex64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt {dt} must be positive")));
    }
    lambda
        .iter()
        .map(|l| {
            if l.norm() == 0.0 {
                Err(Error::InvalidInput("zero eigenvalue has no continuous-time rate".into()))
            } else {
                Ok(l.ln() / dt)
            }
        })
        .collect()
}

/// Least-squares solve `min ‖W b − x‖` through the normal equations.
fn project(w: &CMatrix, x: &CVector) -> Result<(CVector, nalgebra::LU<Complex64, nalgebra::Dyn, nalgebra::Dyn>)> {
    let g = w.adjoint() * w;
    let lu = g.lu();
    let b = lu
        .solve(&(w.adjoint() * x))
        .ok_or_else(|| Error::InvalidInput("modes are linearly dependent; projection is singular".into()))?;
    Ok((b, lu))
}

impl DiscreteSpectrum {
    /// Mode amplitudes of a snapshot, `W^† x`.
    pub fn amplitudes(&self, x: &DVector<f64>) -> Result<CVector> {
        Ok(project(&self.modes, &x.map(|v| Complex64::new(v, 0.0)))?.0)
    }

    /// One-step prediction `W Λ W^† x`.
    pub fn predict_next(&self, x: &DVector<f64>) -> Result<CVector> {
        let b = self.amplitudes(x)?;
        let lb = DVector::from_fn(b.len(), |k, _| b[k] * self.lambda[k]);
        Ok(&self.modes * lb)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptDmdConfig {
    pub rank: usize,
    pub tv_weight: f64,
    pub iters: usize,
    pub seed: u64,
    /// Smoothing of the TV magnitude, `sqrt(|∇f|² + ε²)`.
    pub tv_eps: f64,
    /// Frames per iteration; `None` uses every frame.
    pub batch_frames: Option<usize>,
    /// Stop when the relative objective decrease falls below this.
    pub tol: f64,
}

impl Default for OptDmdConfig {
    fn default() -> Self {
        Self {
            rank: 5,
            tv_weight: 0.0,
            iters: 500,
            seed: 0,
            tv_eps: 1e-4,
            batch_frames: None,
            tol: 1e-14,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptDmdResult {
    pub decomposition: ModalDecomposition,
    pub objective: f64,
    pub objective_history: Vec<f64>,
    pub tv_history: Vec<f64>,
}

/// Smoothed isotropic TV of a row-major `h × w` image and its gradient.
pub fn total_variation(f: &[f64], h: usize, w: usize, eps: f64) -> (f64, Vec<f64>) {
    let mut tv = 0.0;
    let mut g = vec![0.0; f.len()];
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let dy = if i + 1 < h { f[p + w] - f[p] } else { 0.0 };
            let dx = if j + 1 < w { f[p + 1] - f[p] } else { 0.0 };
            let mag = (dx * dx + dy * dy + eps * eps).sqrt();
            tv += mag - eps;
            if i + 1 < h {
                g[p + w] += dy / mag;
                g[p] -= dy / mag;
            }
            if j + 1 < w {
                g[p + 1] += dx / mag;
                g[p] -= dx / mag;
            }
        }
    }
    (tv, g)
}

struct OptProblem<'a> {
    x: &'a DMatrix<f64>,
    /// Frame times relative to the first frame.
    times: Vec<f64>,
    h: usize,
    w: usize,
    tv_weight: f64,
    tv_eps: f64,
}

struct Evaluation {
    objective: f64,
    tv: f64,
    grad_w: CMatrix,
    grad_omega: Vec<Complex64>,
}

impl OptProblem<'_> {
    fn tv_of(&self, wm: &CMatrix, with_grad: bool) -> (f64, CMatrix) {
        let mut tv = 0.0;
        let mut grad = CMatrix::zeros(wm.nrows(), wm.ncols());
        for k in 0..wm.ncols() {
            let re: Vec<f64> = wm.column(k).iter().map(|c| c.re).collect();
            let im: Vec<f64> = wm.column(k).iter().map(|c| c.im).collect();
            let (tr, gr) = total_variation(&re, self.h, self.w, self.tv_eps);
            let (ti, gi) = total_variation(&im, self.h, self.w, self.tv_eps);
            tv += tr + ti;
            if with_grad {
                for p in 0..wm.nrows() {
                    grad[(p, k)] = Complex64::new(gr[p], gi[p]) * 0.5;
                }
            }
        }
        (tv, grad)
    }

    /// Objective over the frame subset `frames`; gradients are Wirtinger
    /// derivatives `∂f/∂W̄`, `∂f/∂Ω̄`.
    fn evaluate(&self, wm: &CMatrix, omega: &[Complex64], frames: &[usize], with_grad: bool) -> Result<Evaluation> {
        let r = wm.ncols();
        let x0 = self.x.column(0).map(|v| Complex64::new(v, 0.0));
        let (b, lu) = project(wm, &x0)?;
        let nt = frames.len();
        let growth = DMatrix::from_fn(r, nt, |j, k| (omega[j] * self.times[frames[k]]).exp());
        let c = DMatrix::from_fn(r, nt, |j, k| growth[(j, k)] * b[j]);
        let xb = DMatrix::from_fn(self.x.nrows(), nt, |p, k| Complex64::new(self.x[(p, frames[k])], 0.0));
        let resid = wm * &c - xb;
        let data: f64 = resid.iter().map(|z| z.norm_sqr()).sum();
        let (tv, tv_grad) = self.tv_of(wm, with_grad);
        let objective = data + self.tv_weight * tv;
        if !with_grad {
            return Ok(Evaluation {
                objective,
                tv,
                grad_w: CMatrix::zeros(0, 0),
                grad_omega: Vec::new(),
            });
        }
        let mut grad_w = &resid * c.adjoint();
        let p = wm.adjoint() * &resid;
        let mut gb = CVector::zeros(r);
        let mut grad_omega = vec![ZERO; r];
        for j in 0..r {
            for k in 0..nt {
                gb[j] += growth[(j, k)].conj() * p[(j, k)];
                let t = self.times[frames[k]];
                grad_omega[j] += (growth[(j, k)] * b[j] * t).conj() * p[(j, k)];
            }
        }
        // b = (WᴴW)⁻¹ Wᴴ x₀ depends on W
        let y = lu
            .solve(&gb)
            .ok_or_else(|| Error::InvalidInput("singular mode Gram matrix".into()))?;
        let r0 = &x0 - wm * &b;
        grad_w += &r0 * y.adjoint() - wm * &y * b.adjoint();
        grad_w += tv_grad * Complex64::new(self.tv_weight, 0.0);
        Ok(Evaluation {
            objective,
            tv,
            grad_w,
            grad_omega,
        })
    }
}

/// Initial modes and rates from exact DMD, padded with seeded random modes
/// when the video has lower numerical rank than requested.
fn optdmd_init(video: &VideoGrid, r: usize, seed: u64) -> Result<(CMatrix, Vec<Complex64>)> {
    let snap = SnapshotMatrix::from_video(video)?;
    let n = video.grid.len();
    let (n_rows, m) = snap.x.shape();
    let usable = match exact_dmd(&snap, r.min(n_rows.min(m))) {
        Ok(_) => r.min(n_rows.min(m)),
        Err(Error::RankDeficient { usable, .. }) => usable,
        Err(e) => return Err(e),
    };
    let mut wm = CMatrix::zeros(n, r);
    let mut omega = vec![ZERO; r];
    if usable > 0 {
        let spec = exact_dmd(&snap, usable)?;
        let om = to_continuous(&spec.lambda, video.dt)?;
        for k in 0..usable {
            let mut col = spec.modes.column(k).into_owned();
            let norm = col.norm();
            if norm > 0.0 {
                col /= Complex64::new(norm, 0.0);
            }
            wm.set_column(k, &col);
            omega[k] = Complex64::new(om[k].re.min(0.0), om[k].im);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in usable..r {
        let scale = 1.0 / (n as f64).sqrt();
        for p in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            wm[(p, k)] = Complex64::new(a, b) * scale;
        }
        let f: f64 = StandardNormal.sample(&mut rng);
        omega[k] = Complex64::new(-0.1, f);
    }
    Ok((wm, omega))
}

/// Fits `x_t ≈ Σ_j w_j e^{Ω_j t} b_j` with `b = W^† x_0`, TV on the modes and
/// `Re Ω ≤ 0`, by alternating backtracking gradient steps on `W` and `Ω`.
pub fn optdmd_fit(video: &VideoGrid, cfg: &OptDmdConfig) -> Result<OptDmdResult> {
    let r = cfg.rank;
    let n = video.grid.len();
    let nt = video.num_frames();
    if r == 0 || r > n {
        return Err(Error::InvalidInput(format!("rank {r} outside 1..={n}")));
    }
    if !(cfg.tv_weight >= 0.0) || !(cfg.tv_eps > 0.0) {
        return Err(Error::InvalidInput("tv weight must be ≥ 0 and tv eps > 0".into()));
    }
    let x = DMatrix::from_fn(n, nt, |p, k| video.frames[k][p]);
    let problem = OptProblem {
        x: &x,
        times: (0..nt).map(|k| k as f64 * video.dt).collect(),
        h: video.grid.height,
        w: video.grid.width,
        tv_weight: cfg.tv_weight,
        tv_eps: cfg.tv_eps,
    };
    let (mut wm, mut omega) = if nt >= 2 {
        optdmd_init(video, r, cfg.seed)?
    } else {
        let mut wm = CMatrix::zeros(n, r);
        wm.set_column(0, &x.column(0).map(|v| Complex64::new(v, 0.0)));
        (wm, vec![ZERO; r])
    };
    let all: Vec<usize> = (0..nt).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let batch = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        match cfg.batch_frames {
            Some(b) if b < nt => {
                let mut idx = rand::seq::index::sample(rng, nt, b).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => all.clone(),
        }
    };
    let start = problem.evaluate(&wm, &omega, &all, false)?;
    if !start.objective.is_finite() {
        return Err(Error::Divergence(
            "initial optDMD objective is not finite; rescale the data or reduce the step".into(),
        ));
    }
    let mut objective_history = vec![start.objective];
    let mut tv_history = vec![start.tv];
    let mut eta_w: f64 = 1.0;
    let mut eta_o: f64 = 1.0;
    for _ in 0..cfg.iters {
        let frames = batch(&mut rng);
        let before = objective_history.last().copied().unwrap_or(f64::INFINITY);
        // modes
        let ev = problem.evaluate(&wm, &omega, &frames, true)?;
        let f0 = ev.objective;
        if !f0.is_finite() {
            return Err(Error::Divergence("optDMD objective became non-finite; use a smaller step".into()));
        }
        let gnorm2: f64 = ev.grad_w.iter().map(|z| z.norm_sqr()).sum();
        if gnorm2 > 0.0 {
            eta_w = eta_w.max(1e-300) * 2.0;
            loop {
                let cand = &wm - &ev.grad_w * Complex64::new(eta_w, 0.0);
                if let Ok(e) = problem.evaluate(&cand, &omega, &frames, false) {
                    if e.objective.is_finite() && e.objective <= f0 - 1e-4 * eta_w * gnorm2 {
                        wm = cand;
                        break;
                    }
                }
                eta_w *= 0.5;
                if eta_w < 1e-30 {
                    break;
                }
            }
        }
        // rates
        let ev = problem.evaluate(&wm, &omega, &frames, true)?;
        let f1 = ev.objective;
        let gnorm2: f64 = ev.grad_omega.iter().map(|z| z.norm_sqr()).sum();
        if gnorm2 > 0.0 {
            eta_o = eta_o.max(1e-300) * 2.0;
            loop {
                let cand: Vec<Complex64> = omega
                    .iter()
                    .zip(&ev.grad_omega)
                    .map(|(o, g)| {
                        let z = o - g * eta_o;
                        Complex64::new(z.re.min(0.0), z.im)
                    })
                    .collect();
                if let Ok(e) = problem.evaluate(&wm, &cand, &frames, false) {
                    if e.objective.is_finite() && e.objective <= f1 {
                        if e.objective < f1 {
                            omega = cand;
                        }
                        break;
                    }
                }
                eta_o *= 0.5;
                if eta_o < 1e-30 {
                    break;
                }
            }
        }
        let full = problem.evaluate(&wm, &omega, &all, false)?;
        objective_history.push(full.objective);
        tv_history.push(full.tv);
        if cfg.batch_frames.is_none() && before - full.objective <= cfg.tol * before.abs() {
            break;
        }
    }
    let x0 = x.column(0).map(|v| Complex64::new(v, 0.0));
    let (b, _) = project(&wm, &x0)?;
    let modes: Vec<Vec<Complex64>> = (0..r).map(|k| wm.column(k).iter().copied().collect()).collect();
    let decomposition = ModalDecomposition::new(
        video.grid.height,
        video.grid.width,
        ModeLayout::Free,
        modes,
        omega,
        b.iter().copied().collect(),
        TimeAxis {
            origin: video.t0,
            unit: 1.0,
            scale: 1.0,
        },
    )?;
    Ok(OptDmdResult {
        decomposition,
        objective: *objective_history.last().expect("non-empty"),
        objective_history,
        tv_history,
    })
}

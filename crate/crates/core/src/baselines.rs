//! Model-based reconstructions with an anisotropic total-variation prior.

use ndarray::{Array2, Array3, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::cassi::{apply_adjoint, apply_forward, OperatorRep};
use crate::error::{arg, Result};
use crate::hsi::{HsiCube, Measurement};

/// Entries of diag(ΦΦᵀ) are clamped to this before division.
pub const DIAG_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub iterations: usize,
    /// Gradient step of PGD; 0 picks `1 / λ_max(ΦᵀΦ)`.
    pub rho: f64,
    pub tv_weight: f64,
    pub tv_inner_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { iterations: 50, rho: 0.0, tv_weight: 0.05, tv_inner_iters: 10 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return arg(format!("tv_weight must be finite and nonnegative, got {}", self.tv_weight));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return arg(format!("rho must be finite and nonnegative, got {}", self.rho));
        }
        Ok(())
    }
}

/// Anisotropic TV of one band: sum of absolute forward differences.
pub fn tv_2d(z: ArrayView2<f64>) -> f64 {
    let (h, w) = z.dim();
    let mut t = 0.0;
    for i in 0..h {
        for j in 0..w {
            if i + 1 < h {
                t += (z[[i + 1, j]] - z[[i, j]]).abs();
            }
            if j + 1 < w {
                t += (z[[i, j + 1]] - z[[i, j]]).abs();
            }
        }
    }
    t
}

/// `½‖z − x‖² + λ·TV(z)` for one band.
pub fn tv_objective(z: ArrayView2<f64>, x: ArrayView2<f64>, lam: f64) -> f64 {
    0.5 * Zip::from(&z).and(&x).fold(0.0, |acc, a, b| acc + (a - b).powi(2)) + lam * tv_2d(z)
}

/// Dual projected gradient for one band. Returns the denoised band and the
/// primal objective after each inner iteration.
///
/// The dual step `1/(8λ)` is safe since ‖D‖² ≤ 8. Primal iterates that
/// would raise the objective are not accepted, so the returned trace is
/// non-increasing.
pub fn tv_denoise_2d(x: ArrayView2<f64>, lam: f64, iters: usize) -> (Array2<f64>, Vec<f64>) {
    let (h, w) = x.dim();
    if lam == 0.0 {
        return (x.to_owned(), vec![0.0; iters]);
    }
    let tau = 1.0 / (8.0 * lam);
    let mut pv = Array2::<f64>::zeros((h, w)); // vertical differences, row h-1 unused
    let mut ph = Array2::<f64>::zeros((h, w)); // horizontal differences, column w-1 unused
    let mut best = x.to_owned();
    let mut best_obj = tv_objective(best.view(), x, lam);
    let mut trace = Vec::with_capacity(iters);
    let mut z = x.to_owned();
    for _ in 0..iters {
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    pv[[i, j]] = (pv[[i, j]] + tau * (z[[i + 1, j]] - z[[i, j]])).clamp(-1.0, 1.0);
                }
                if j + 1 < w {
                    ph[[i, j]] = (ph[[i, j]] + tau * (z[[i, j + 1]] - z[[i, j]])).clamp(-1.0, 1.0);
                }
            }
        }
        // z = x − λ Dᵀp, where (Dᵀp)_ij = p_{i−1,j} − p_{i,j} (and likewise across columns)
        for i in 0..h {
            for j in 0..w {
                let mut dtp = 0.0;
                if i + 1 < h {
                    dtp -= pv[[i, j]];
                }
                if i > 0 {
                    dtp += pv[[i - 1, j]];
                }
                if j + 1 < w {
                    dtp -= ph[[i, j]];
                }
                if j > 0 {
                    dtp += ph[[i, j - 1]];
                }
                z[[i, j]] = x[[i, j]] - lam * dtp;
            }
        }
        let obj = tv_objective(z.view(), x, lam);
        if obj <= best_obj {
            best_obj = obj;
            best.assign(&z);
        }
        trace.push(best_obj);
    }
    (best, trace)
}

/// Band-by-band TV denoising in f64; `trace[k]` sums the per-band objectives.
pub fn tv_denoise_f64(x: &Array3<f64>, lam: f64, iters: usize) -> (Array3<f64>, Vec<f64>) {
    let mut out = x.clone();
    let mut trace = vec![0.0; iters];
    for (c, mut band) in out.axis_iter_mut(Axis(2)).enumerate() {
        let (z, t) = tv_denoise_2d(x.index_axis(Axis(2), c), lam, iters);
        band.assign(&z);
        for (acc, v) in trace.iter_mut().zip(t) {
            *acc += v;
        }
    }
    (out, trace)
}

/// `argmin_z ½‖z − x‖² + λ·TV(z)` per band, approximately.
pub fn tv_denoise(x: &HsiCube, lam: f64, iters: usize) -> Result<HsiCube> {
    if !(lam >= 0.0 && lam.is_finite()) {
        return arg(format!("TV weight must be finite and nonnegative, got {lam}"));
    }
    let (z, _) = tv_denoise_f64(&x.data().mapv(f64::from), lam, iters);
    Ok(HsiCube::from_unchecked(z.mapv(|v| v as f32)))
}

fn to_f64(cube: &HsiCube) -> Array3<f64> {
    cube.data().mapv(f64::from)
}

fn from_f64(a: &Array3<f64>) -> HsiCube {
    HsiCube::from_unchecked(a.mapv(|v| v as f32))
}

fn forward64(x: &Array3<f64>, op: &OperatorRep) -> Array2<f64> {
    let (h, w, bands) = x.dim();
    let m = op.shifted_mask();
    let mut y = Array2::<f64>::zeros((h, op.measurement_width()));
    for i in 0..h {
        for c in 0..bands {
            for j in 0..w {
                let col = j + op.step() * c;
                y[[i, col]] += m[[i, col, c]] as f64 * x[[i, j, c]];
            }
        }
    }
    y
}

fn adjoint64(r: &Array2<f64>, op: &OperatorRep) -> Array3<f64> {
    let m = op.shifted_mask();
    Array3::from_shape_fn((op.height(), op.width(), op.bands()), |(i, j, c)| {
        let col = j + op.step() * c;
        m[[i, col, c]] as f64 * r[[i, col]]
    })
}

fn check(y: &Measurement, op: &OperatorRep, cfg: &SolverConfig) -> Result<()> {
    cfg.validate()?;
    if (y.height(), y.width()) != (op.height(), op.measurement_width()) {
        return arg(format!("measurement {}x{} vs operator {}x{}", y.height(), y.width(), op.height(), op.measurement_width()));
    }
    Ok(())
}

/// λ_max(ΦᵀΦ). ΦΦᵀ is diagonal for this operator, so this is the largest
/// entry of diag(ΦΦᵀ).
pub fn lipschitz(op: &OperatorRep) -> f64 {
    op.diag_phi_phit().iter().cloned().fold(0.0, f64::max)
}

/// Per-iteration data fidelity `‖Φx_k − y‖²` and the result.
#[derive(Debug, Clone)]
pub struct SolveResult {
    pub cube: HsiCube,
    pub fidelity: Vec<f64>,
}

fn fidelity(x: &Array3<f64>, y: &Array2<f64>, op: &OperatorRep) -> f64 {
    (forward64(x, op) - y).iter().map(|v| v * v).sum()
}

/// Proximal gradient descent: `v = x − ρΦᵀ(Φx − y)`, `x = TV-denoise(v, ρλ)`,
/// starting from `Φᵀy`.
pub fn pgd_tv_solve(y: &Measurement, op: &OperatorRep, cfg: &SolverConfig) -> Result<SolveResult> {
    check(y, op, cfg)?;
    let yd = y.data().mapv(f64::from);
    let rho = if cfg.rho > 0.0 { cfg.rho } else { 1.0 / lipschitz(op).max(DIAG_FLOOR) };
    let mut x = to_f64(&apply_adjoint(y, op)?);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let r = forward64(&x, op) - &yd;
        let v = &x - &(adjoint64(&r, op) * rho);
        x = if cfg.tv_weight > 0.0 { tv_denoise_f64(&v, rho * cfg.tv_weight, cfg.tv_inner_iters).0 } else { v };
        trace.push(fidelity(&x, &yd, op));
    }
    Ok(SolveResult { cube: from_f64(&x), fidelity: trace })
}

/// Generalized alternating projection: `x = x + Φᵀ((y − Φx) ⊘ diag(ΦΦᵀ))`,
/// then TV denoising, starting from `Φᵀy`.
pub fn gap_tv_solve(y: &Measurement, op: &OperatorRep, cfg: &SolverConfig) -> Result<SolveResult> {
    check(y, op, cfg)?;
    let yd = y.data().mapv(f64::from);
    let diag = op.diag_phi_phit().mapv(|d| d.max(DIAG_FLOOR));
    let mut x = to_f64(&apply_adjoint(y, op)?);
    let mut trace = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let r = (&yd - &forward64(&x, op)) / &diag;
        x = &x + &adjoint64(&r, op);
        if cfg.tv_weight > 0.0 {
            x = tv_denoise_f64(&x, cfg.tv_weight, cfg.tv_inner_iters).0;
        }
        trace.push(fidelity(&x, &yd, op));
    }
    Ok(SolveResult { cube: from_f64(&x), fidelity: trace })
}

/// `Φx` in double precision, for callers checking fidelity.
pub fn data_fidelity(x: &HsiCube, y: &Measurement, op: &OperatorRep) -> Result<f64> {
    let fx = apply_forward(x, op)?;
    Ok(fx.data().iter().zip(y.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum())
}

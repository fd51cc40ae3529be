//! Image quality metrics and the evaluation report.

use std::fmt::Write as _;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{arg, shape, Result};
use crate::hsi::HsiCube;

/// PSNR returned when the MSE is below [`PSNR_MSE_FLOOR`].
pub const PSNR_CAP_DB: f64 = 100.0;
pub const PSNR_MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_same(pred: &HsiCube, target: &HsiCube) -> Result<()> {
    if pred.dims() != target.dims() {
        return shape(format!("prediction {:?} vs target {:?}", pred.dims(), target.dims()));
    }
    Ok(())
}

pub fn mse(pred: &HsiCube, target: &HsiCube) -> Result<f64> {
    check_same(pred, target)?;
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / n)
}

/// `10·log10(peak² / MSE)`, capped at 100 dB.
pub fn psnr(pred: &HsiCube, target: &HsiCube, peak: f64) -> Result<f64> {
    let m = mse(pred, target)?;
    if m < PSNR_MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable "valid" filtering with `taps` along both axes.
fn filter_valid(img: ArrayView2<f64>, taps: &[f64]) -> Array2<f64> {
    let k = taps.len();
    let (h, w) = img.dim();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::<f64>::zeros((h, ow));
    for i in 0..h {
        for j in 0..ow {
            rows[[i, j]] = (0..k).map(|t| taps[t] * img[[i, j + t]]).sum();
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for i in 0..oh {
        for j in 0..ow {
            out[[i, j]] = (0..k).map(|t| taps[t] * rows[[i + t, j]]).sum();
        }
    }
    out
}

/// Single-channel SSIM with an 11×11 Gaussian window (σ = 1.5), averaged
/// over the valid region; dynamic range 1.
pub fn ssim_2d(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let (h, w) = a.dim();
    if b.dim() != (h, w) {
        return shape("ssim inputs differ in size");
    }
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return arg(format!("ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let mu_a = filter_valid(a, &taps);
    let mu_b = filter_valid(b, &taps);
    let aa = filter_valid((&a * &a).view(), &taps);
    let bb = filter_valid((&b * &b).view(), &taps);
    let ab = filter_valid((&a * &b).view(), &taps);
    let mut total = 0.0;
    for ((((&ma, &mb), &saa), &sbb), &sab) in mu_a.iter().zip(&mu_b).zip(&aa).zip(&bb).zip(&ab) {
        let va = saa - ma * ma;
        let vb = sbb - mb * mb;
        let cov = sab - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Mean of per-band SSIM.
pub fn ssim(pred: &HsiCube, target: &HsiCube) -> Result<f64> {
    check_same(pred, target)?;
    let bands = pred.bands();
    let mut total = 0.0;
    for c in 0..bands {
        let a = pred.data().index_axis(Axis(2), c).mapv(f64::from);
        let b = target.data().index_axis(Axis(2), c).mapv(f64::from);
        total += ssim_2d(a.view(), b.view())?;
    }
    Ok(total / bands as f64)
}

/// Rectangular region of interest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roi {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Roi {
    /// Parses `top,left,height,width`.
    pub fn parse(text: &str) -> Result<Self> {
        let v: Vec<usize> = text
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| crate::Error::Argument(format!("bad ROI {text:?}: {e}")))?;
        match v[..] {
            [top, left, height, width] if height > 0 && width > 0 => Ok(Self { top, left, height, width }),
            _ => arg(format!("ROI must be top,left,height,width with positive size, got {text:?}")),
        }
    }

    fn check(&self, cube: &HsiCube) -> Result<()> {
        if self.top + self.height > cube.height() || self.left + self.width > cube.width() {
            return arg(format!("ROI {self:?} outside a {}x{} cube", cube.height(), cube.width()));
        }
        Ok(())
    }
}

/// Mean value of each band inside the ROI.
pub fn roi_spectrum(cube: &HsiCube, roi: &Roi) -> Result<Vec<f64>> {
    roi.check(cube)?;
    let view = cube.data().slice(s![roi.top..roi.top + roi.height, roi.left..roi.left + roi.width, ..]);
    let n = (roi.height * roi.width) as f64;
    Ok((0..cube.bands()).map(|c| view.index_axis(Axis(2), c).iter().map(|&v| v as f64).sum::<f64>() / n).collect())
}

/// Pearson correlation of two equal-length curves; 0 when either is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return arg("correlation needs two curves of equal length ≥ 2");
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok((cov / (va.sqrt() * vb.sqrt())).clamp(-1.0, 1.0))
}

/// Pearson correlation between ROI-mean spectra.
pub fn spectral_correlation(pred: &HsiCube, target: &HsiCube, roi: &Roi) -> Result<f64> {
    check_same(pred, target)?;
    pearson(&roi_spectrum(pred, roi)?, &roi_spectrum(target, roi)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene: String,
    pub psnr: f64,
    pub ssim: f64,
    pub correlation: Option<f64>,
}

/// Per-scene PSNR/SSIM with an average row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: Vec<SceneScore>,
    pub avg_psnr: f64,
    pub avg_ssim: f64,
    pub avg_correlation: Option<f64>,
}

impl EvalReport {
    pub fn evaluate(pairs: &[(String, &HsiCube, &HsiCube)], roi: Option<&Roi>) -> Result<Self> {
        if pairs.is_empty() {
            return arg("nothing to evaluate");
        }
        let scenes = pairs
            .iter()
            .map(|(name, pred, truth)| {
                Ok(SceneScore {
                    scene: name.clone(),
                    psnr: psnr(pred, truth, 1.0)?,
                    ssim: ssim(pred, truth)?,
                    correlation: roi.map(|r| spectral_correlation(pred, truth, r)).transpose()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let n = scenes.len() as f64;
        let avg_correlation = roi.map(|_| scenes.iter().filter_map(|s| s.correlation).sum::<f64>() / n);
        Ok(Self { avg_psnr: scenes.iter().map(|s| s.psnr).sum::<f64>() / n, avg_ssim: scenes.iter().map(|s| s.ssim).sum::<f64>() / n, avg_correlation, scenes })
    }

    /// Text table: one row per scene then `Avg`, PSNR in dB and SSIM.
    pub fn render(&self) -> String {
        let width = self.scenes.iter().map(|s| s.scene.len()).max().unwrap_or(0).max(5);
        let corr = self.avg_correlation.is_some();
        let mut out = format!("{:<width$}  {:>8}  {:>6}", "scene", "PSNR", "SSIM");
        if corr {
            out.push_str(&format!("  {:>7}", "corr"));
        }
        out.push('\n');
        let mut row = |name: &str, p: f64, s: f64, c: Option<f64>| {
            let _ = write!(out, "{name:<width$}  {p:>8.2}  {s:>6.4}");
            if let Some(c) = c {
                let _ = write!(out, "  {c:>7.4}");
            }
            out.push('\n');
        };
        for s in &self.scenes {
            row(&s.scene, s.psnr, s.ssim, s.correlation);
        }
        row("Avg", self.avg_psnr, self.avg_ssim, self.avg_correlation);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_cube(h: usize, w: usize, c: usize, seed: u64) -> HsiCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HsiCube::new(Array3::from_shape_fn((h, w, c), |_| rng.random::<f32>())).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = rand_cube(12, 12, 2, 0);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), 100.0);
        let zero = HsiCube::zeros(12, 12, 2);
        let off = HsiCube::new(Array3::from_elem((12, 12, 2), 0.1f32)).unwrap();
        // 0.1f32 is not exactly 0.1
        let expected = 10.0 * (1.0 / (0.1f32 as f64).powi(2)).log10();
        assert!((psnr(&off, &zero, 1.0).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 20.0).abs() < 1e-6);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let a = rand_cube(16, 16, 3, 1);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = HsiCube::new(a.data().mapv(|v| 1.0 - v)).unwrap();
        assert!(ssim(&inv, &a).unwrap() < 0.0);
        assert!(ssim(&rand_cube(8, 8, 1, 0), &rand_cube(8, 8, 1, 1)).is_err());
    }

    #[test]
    fn taps_sum_to_one_and_are_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(t[i], t[10 - i]);
        }
    }

    #[test]
    fn correlation_cases() {
        let a = rand_cube(10, 10, 6, 2);
        let roi = Roi { top: 1, left: 2, height: 4, width: 5 };
        assert!((spectral_correlation(&a, &a, &roi).unwrap() - 1.0).abs() < 1e-12);
        let spec = roi_spectrum(&a, &roi).unwrap();
        let neg: Vec<f64> = spec.iter().map(|v| 3.0 - v).collect();
        assert!((pearson(&neg, &spec).unwrap() + 1.0).abs() < 1e-12);
        assert!(spectral_correlation(&a, &a, &Roi { top: 8, left: 0, height: 4, width: 1 }).is_err());
    }

    #[test]
    fn roi_parse() {
        assert_eq!(Roi::parse("1, 2,3,4").unwrap(), Roi { top: 1, left: 2, height: 3, width: 4 });
        assert!(Roi::parse("1,2,3").is_err());
        assert!(Roi::parse("1,2,0,4").is_err());
    }

    #[test]
    fn report_has_avg_row() {
        let a = rand_cube(12, 12, 2, 3);
        let b = rand_cube(12, 12, 2, 4);
        let r = EvalReport::evaluate(&[("s1".into(), &a, &a), ("s2".into(), &b, &a)], None).unwrap();
        let text = r.render();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("Avg"));
        assert!((r.avg_psnr - (100.0 + r.scenes[1].psnr) / 2.0).abs() < 1e-12);
    }
}

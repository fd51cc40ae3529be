//! Spectral cubes, coded masks and sensor measurements.
//!
//! Cubes are stored row-major as `H × W × C` in `f32`, the same order and
//! precision as the on-disk container, so a save/load round trip is exact.

use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg, Error, Result};

pub const DEFAULT_BANDS: usize = 28;
pub const DEFAULT_STEP: usize = 2;

/// A nonnegative spectral datacube with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    data: Array3<f32>,
}

impl HsiCube {
    pub fn new(data: Array3<f32>) -> Result<Self> {
        if data.len_of(Axis(2)) == 0 {
            return arg("cube needs at least one band");
        }
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return arg(format!("cube value {v} outside [0, 1]"));
            }
        }
        Ok(Self { data })
    }

    /// Wraps data without the range check. Reconstructions and intermediate
    /// iterates may leave `[0, 1]`.
    pub fn from_unchecked(data: Array3<f32>) -> Self {
        Self { data }
    }

    pub fn zeros(height: usize, width: usize, bands: usize) -> Self {
        Self { data: Array3::zeros((height, width, bands)) }
    }

    pub fn height(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn width(&self) -> usize {
        self.data.len_of(Axis(1))
    }

    pub fn bands(&self) -> usize {
        self.data.len_of(Axis(2))
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f32> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    pub fn clamped(&self) -> Self {
        Self { data: self.data.mapv(|v| v.clamp(0.0, 1.0)) }
    }
}

/// Binary or gray-scale modulation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedMask {
    data: Array2<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MaskKind {
    /// i.i.d. Bernoulli(0.5) in {0, 1}
    #[default]
    Binary,
    /// i.i.d. uniform in [0, 1]
    Uniform,
}

impl CodedMask {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        for &v in data.iter() {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return arg(format!("mask value {v} outside [0, 1]"));
            }
        }
        Ok(Self { data })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self { data: Array2::ones((height, width)) }
    }

    pub fn random(height: usize, width: usize, kind: MaskKind, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = Array2::from_shape_simple_fn((height, width), || match kind {
            MaskKind::Binary => {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    0.0
                }
            }
            MaskKind::Uniform => rng.random::<f32>(),
        });
        Self { data }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }
}

/// Record of the noise applied to a measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseMeta {
    pub model: String,
    pub bits: u32,
    pub seed: u64,
    pub scale: f64,
}

/// 2D sensor image of width `W + step·(C − 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    data: Array2<f32>,
    pub noise: Option<NoiseMeta>,
}

impl Measurement {
    pub fn new(data: Array2<f32>) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("measurement has non-finite values".into()));
        }
        Ok(Self { data, noise: None })
    }

    pub(crate) fn from_unchecked(data: Array2<f32>) -> Self {
        Self { data, noise: None }
    }

    pub fn height(&self) -> usize {
        self.data.nrows()
    }

    pub fn width(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &Array2<f32> {
        &self.data
    }

    /// Band count implied by this width for a scene of width `scene_width`.
    pub fn implied_bands(&self, scene_width: usize, step: usize) -> Result<usize> {
        let extra = self.width().checked_sub(scene_width).ok_or_else(|| Error::Shape("measurement narrower than scene".into()))?;
        if step == 0 {
            return arg("band count cannot be inferred with step 0");
        }
        if extra % step != 0 {
            return Err(Error::Shape(format!("width {} inconsistent with scene width {scene_width} and step {step}", self.width())));
        }
        Ok(extra / step + 1)
    }
}

/// Measurement width for a given scene width, band count and shift step.
pub fn dispersed_width(width: usize, bands: usize, step: usize) -> usize {
    width + step * bands.saturating_sub(1)
}

/// Deterministic smooth spectral scene: a few materials with Gaussian band
/// profiles mixed over soft random spatial blobs.
pub fn generate_synthetic_scene(height: usize, width: usize, bands: usize, seed: u64) -> Result<HsiCube> {
    if height < 8 || width < 8 {
        return arg(format!("scene must be at least 8x8, got {height}x{width}"));
    }
    if bands == 0 {
        return arg("bands must be positive");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_materials = rng.random_range(3..=6);
    let c_max = bands.max(2) as f64 - 1.0;

    let spectra: Vec<Vec<f64>> = (0..n_materials)
        .map(|_| {
            let peaks = rng.random_range(1..=2);
            let params: Vec<(f64, f64, f64)> = (0..peaks)
                .map(|_| {
                    let center = rng.random_range(-0.1..1.1) * c_max;
                    let width = rng.random_range(0.25..0.6) * c_max.max(1.0);
                    let amp = rng.random_range(0.4..1.0);
                    (center, width, amp)
                })
                .collect();
            let floor = rng.random_range(0.02..0.15);
            let raw: Vec<f64> = (0..bands)
                .map(|c| {
                    let c = c as f64;
                    floor + params.iter().map(|&(mu, s, a)| a * (-0.5 * ((c - mu) / s).powi(2)).exp()).sum::<f64>()
                })
                .collect();
            let peak = raw.iter().cloned().fold(0.0, f64::max);
            let gain = rng.random_range(0.5..1.0) / peak.max(1e-9);
            raw.into_iter().map(|v| v * gain).collect()
        })
        .collect();

    // Abundance fields: sums of Gaussian blobs, sharpened and normalized per pixel.
    let (hf, wf) = (height as f64, width as f64);
    let fields: Vec<Array2<f64>> = (0..n_materials)
        .map(|_| {
            let blobs = rng.random_range(1..=4);
            let blob_params: Vec<(f64, f64, f64, f64)> = (0..blobs)
                .map(|_| {
                    let cy = rng.random_range(0.0..hf);
                    let cx = rng.random_range(0.0..wf);
                    let r = rng.random_range(0.08..0.35) * hf.min(wf);
                    let a = rng.random_range(0.5..1.0);
                    (cy, cx, r, a)
                })
                .collect();
            Array2::from_shape_fn((height, width), |(i, j)| {
                blob_params
                    .iter()
                    .map(|&(cy, cx, r, a)| {
                        let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                        a * (-0.5 * d2 / (r * r)).exp()
                    })
                    .sum::<f64>()
            })
        })
        .collect();
    let background = rng.random_range(0.05..0.2);
    let sharpness = 6.0;

    let mut data = Array3::<f32>::zeros((height, width, bands));
    for i in 0..height {
        for j in 0..width {
            let weights: Vec<f64> = fields.iter().map(|f| (sharpness * f[[i, j]]).exp() - 1.0).collect();
            let total: f64 = weights.iter().sum::<f64>() + background;
            for c in 0..bands {
                let mut v = 0.0;
                for (w, s) in weights.iter().zip(&spectra) {
                    v += w * s[c];
                }
                v /= total;
                data[[i, j, c]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    Ok(HsiCube { data })
}

pub fn random_crop(cube: &HsiCube, size: (usize, usize), seed: u64) -> Result<HsiCube> {
    let (h, w, _) = cube.dims();
    let (ch, cw) = size;
    if ch == 0 || cw == 0 || ch > h || cw > w {
        return arg(format!("crop {ch}x{cw} does not fit in {h}x{w}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=h - ch);
    let left = rng.random_range(0..=w - cw);
    Ok(crop_at(cube, top, left, size))
}

pub fn crop_at(cube: &HsiCube, top: usize, left: usize, size: (usize, usize)) -> HsiCube {
    let view = cube.data.slice(ndarray::s![top..top + size.0, left..left + size.1, ..]);
    HsiCube { data: view.to_owned() }
}

/// The six spatial augmentations, drawn uniformly by [`augment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    Identity,
    FlipHorizontal,
    FlipVertical,
    Rotate90,
    Rotate180,
    Rotate270,
}

impl Augmentation {
    pub const ALL: [Augmentation; 6] = [
        Augmentation::Identity,
        Augmentation::FlipHorizontal,
        Augmentation::FlipVertical,
        Augmentation::Rotate90,
        Augmentation::Rotate180,
        Augmentation::Rotate270,
    ];

    pub fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::ALL[rng.random_range(0..Self::ALL.len())]
    }

    pub fn apply(self, cube: &HsiCube) -> HsiCube {
        let v = cube.data.view();
        let data = match self {
            Augmentation::Identity => v.to_owned(),
            Augmentation::FlipHorizontal => v.slice(ndarray::s![.., ..;-1, ..]).to_owned(),
            Augmentation::FlipVertical => v.slice(ndarray::s![..;-1, .., ..]).to_owned(),
            // counter-clockwise: out[i, j] = in[j, W-1-i]
            Augmentation::Rotate90 => {
                let mut t = v.permuted_axes([1, 0, 2]);
                t.invert_axis(Axis(0));
                t.as_standard_layout().into_owned()
            }
            Augmentation::Rotate180 => v.slice(ndarray::s![..;-1, ..;-1, ..]).to_owned(),
            Augmentation::Rotate270 => {
                let mut t = v.permuted_axes([1, 0, 2]);
                t.invert_axis(Axis(1));
                t.as_standard_layout().into_owned()
            }
        };
        HsiCube { data }
    }
}

pub fn augment(cube: &HsiCube, seed: u64) -> HsiCube {
    Augmentation::draw(seed).apply(cube)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cube(seed: u64) -> HsiCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HsiCube::new(Array3::from_shape_simple_fn((5, 7, 3), || rng.random::<f32>())).unwrap()
    }

    #[test]
    fn scene_is_deterministic_and_in_range() {
        let a = generate_synthetic_scene(16, 20, 28, 7).unwrap();
        let b = generate_synthetic_scene(16, 20, 28, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_scene(16, 20, 28, 8).unwrap();
        assert_ne!(a, c);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn scene_rejects_small_dims() {
        assert!(matches!(generate_synthetic_scene(4, 16, 3, 0), Err(Error::Argument(_))));
        assert!(matches!(generate_synthetic_scene(16, 16, 0, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn scene_spectra_are_smooth() {
        // mean |x[c+1] - 2x[c] + x[c-1]| over 100 seeded scenes
        let mut worst = 0.0f64;
        for seed in 0..100 {
            let cube = generate_synthetic_scene(8, 8, 28, seed).unwrap();
            let d = cube.data();
            let mut acc = 0.0f64;
            let mut n = 0usize;
            for i in 0..8 {
                for j in 0..8 {
                    for c in 1..27 {
                        let dd = d[[i, j, c + 1]] as f64 - 2.0 * d[[i, j, c]] as f64 + d[[i, j, c - 1]] as f64;
                        acc += dd.abs();
                        n += 1;
                    }
                }
            }
            worst = worst.max(acc / n as f64);
        }
        assert!(worst < 0.2, "worst mean second difference {worst}");
    }

    #[test]
    fn crop_shapes_and_errors() {
        let scene = HsiCube::zeros(512, 512, 28);
        let crop = random_crop(&scene, (256, 256), 3).unwrap();
        assert_eq!(crop.dims(), (256, 256, 28));
        assert!(matches!(random_crop(&scene, (513, 10), 0), Err(Error::Argument(_))));
    }

    #[test]
    fn augmentations() {
        let cube = small_cube(1);
        assert_eq!(Augmentation::Identity.apply(&cube), cube);
        let twice = Augmentation::Rotate180.apply(&Augmentation::Rotate180.apply(&cube));
        assert_eq!(twice, cube);
        let r = Augmentation::Rotate90.apply(&cube);
        assert_eq!(r.dims(), (7, 5, 3));
        assert_eq!(Augmentation::Rotate270.apply(&r), cube);
        // counter-clockwise convention
        assert_eq!(r.data()[[0, 0, 1]], cube.data()[[0, 6, 1]]);
        let f = Augmentation::FlipHorizontal.apply(&cube);
        assert_eq!(f.data()[[2, 0, 0]], cube.data()[[2, 6, 0]]);
    }

    #[test]
    fn draws_cover_all_augmentations() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..200 {
            seen.insert(format!("{:?}", Augmentation::draw(seed)));
        }
        assert_eq!(seen.len(), 6);
    }

    #[test]
    fn mask_generation() {
        let m = CodedMask::random(32, 32, MaskKind::Binary, 5);
        assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let ones = m.data().iter().filter(|&&v| v == 1.0).count();
        assert!(ones > 400 && ones < 624);
        let u = CodedMask::random(8, 8, MaskKind::Uniform, 5);
        assert!(u.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(u, CodedMask::random(8, 8, MaskKind::Uniform, 5));
    }

    #[test]
    fn measurement_band_inference() {
        let y = Measurement::new(Array2::zeros((4, 310))).unwrap();
        assert_eq!(y.implied_bands(256, 2).unwrap(), 28);
        assert!(y.implied_bands(255, 2).is_err());
        assert_eq!(dispersed_width(64, 28, 2), 118);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn augmentation_preserves_band_multisets(seed in 0u64..1000) {
                let cube = small_cube(seed);
                let out = augment(&cube, seed);
                for c in 0..cube.bands() {
                    let mut a: Vec<f32> = cube.data().index_axis(Axis(2), c).iter().cloned().collect();
                    let mut b: Vec<f32> = out.data().index_axis(Axis(2), c).iter().cloned().collect();
                    a.sort_by(f32::total_cmp);
                    b.sort_by(f32::total_cmp);
                    prop_assert_eq!(a, b);
                }
            }
        }
    }
}

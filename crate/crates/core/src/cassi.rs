//! The CASSI sensing operator: mask, per-band dispersion shift, sum over bands.
//!
//! The operator is held as a shifted-mask tensor `H × Ŵ × C` with
//! `Ŵ = W + step·(C − 1)`, where band `c` carries the mask at column offset
//! `step·c`. A dense matrix form exists only for testing at small sizes.

use ndarray::{s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{arg, shape, Error, Result};
use crate::hsi::{dispersed_width, CodedMask, HsiCube, Measurement, NoiseMeta};

/// Largest voxel count for which [`build_dense_operator`] will materialize Φ.
pub const DENSE_VOXEL_CAP: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorRep {
    shifted_mask: Array3<f32>,
    step: usize,
    width: usize,
}

impl OperatorRep {
    pub fn from_mask(mask: &CodedMask, bands: usize, step: usize) -> Result<Self> {
        if bands == 0 {
            return arg("operator needs at least one band");
        }
        let (h, w) = (mask.height(), mask.width());
        let wide = dispersed_width(w, bands, step);
        let mut shifted = Array3::<f32>::zeros((h, wide, bands));
        for c in 0..bands {
            shifted.slice_mut(s![.., step * c..step * c + w, c]).assign(mask.data());
        }
        Ok(Self { shifted_mask: shifted, step, width: w })
    }

    /// Wraps an explicit shifted-mask tensor, e.g. a learned correction Φ̂.
    /// Entries outside each band's support are zeroed.
    pub fn from_shifted(shifted_mask: Array3<f32>, width: usize, step: usize) -> Result<Self> {
        let (h, wide, bands) = shifted_mask.dim();
        if bands == 0 || dispersed_width(width, bands, step) != wide {
            return shape(format!("shifted mask {h}x{wide}x{bands} inconsistent with width {width} and step {step}"));
        }
        if shifted_mask.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("operator has non-finite entries".into()));
        }
        let mut shifted_mask = shifted_mask;
        for c in 0..bands {
            shifted_mask.slice_mut(s![.., ..step * c, c]).fill(0.0);
            shifted_mask.slice_mut(s![.., step * c + width.., c]).fill(0.0);
        }
        Ok(Self { shifted_mask, step, width })
    }

    pub fn shifted_mask(&self) -> &Array3<f32> {
        &self.shifted_mask
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn height(&self) -> usize {
        self.shifted_mask.len_of(Axis(0))
    }

    /// Scene width `W`.
    pub fn width(&self) -> usize {
        self.width
    }

    /// Sensor width `Ŵ`.
    pub fn measurement_width(&self) -> usize {
        self.shifted_mask.len_of(Axis(1))
    }

    pub fn bands(&self) -> usize {
        self.shifted_mask.len_of(Axis(2))
    }

    fn check_cube(&self, cube: &HsiCube) -> Result<()> {
        if cube.dims() != (self.height(), self.width, self.bands()) {
            return shape(format!("cube {:?} vs operator {}x{}x{}", cube.dims(), self.height(), self.width, self.bands()));
        }
        Ok(())
    }

    fn check_measurement(&self, y: &Measurement) -> Result<()> {
        if (y.height(), y.width()) != (self.height(), self.measurement_width()) {
            return shape(format!("measurement {}x{} vs operator {}x{}", y.height(), y.width(), self.height(), self.measurement_width()));
        }
        Ok(())
    }

    /// diag(ΦΦᵀ): sum over bands of squared mask values per sensor pixel.
    pub fn diag_phi_phit(&self) -> Array2<f64> {
        let (h, wide, _) = self.shifted_mask.dim();
        Array2::from_shape_fn((h, wide), |(i, j)| self.shifted_mask.slice(s![i, j, ..]).iter().map(|&m| (m as f64) * (m as f64)).sum())
    }
}

/// Band `c` moves right by `step·c` columns into a zero-padded wider grid.
pub fn shift_cube(cube: &HsiCube, step: usize) -> Array3<f32> {
    let (h, w, bands) = cube.dims();
    let mut out = Array3::<f32>::zeros((h, dispersed_width(w, bands, step), bands));
    for c in 0..bands {
        out.slice_mut(s![.., step * c..step * c + w, c]).assign(&cube.data().slice(s![.., .., c]));
    }
    out
}

/// Inverse of [`shift_cube`]; entries outside each band's support are dropped.
pub fn unshift_cube(shifted: &Array3<f32>, step: usize) -> Result<HsiCube> {
    let (h, wide, bands) = shifted.dim();
    let extra = step * bands.saturating_sub(1);
    if bands == 0 || wide < extra {
        return shape(format!("cannot unshift {h}x{wide}x{bands} with step {step}"));
    }
    let w = wide - extra;
    let mut out = Array3::<f32>::zeros((h, w, bands));
    for c in 0..bands {
        out.slice_mut(s![.., .., c]).assign(&shifted.slice(s![.., step * c..step * c + w, c]));
    }
    Ok(HsiCube::from_unchecked(out))
}

/// y = Σ_c Φ[:, :, c] ⊙ shift(x)[:, :, c]
pub fn apply_forward(cube: &HsiCube, op: &OperatorRep) -> Result<Measurement> {
    op.check_cube(cube)?;
    let (h, w, bands) = cube.dims();
    let step = op.step;
    let mut acc = Array2::<f64>::zeros((h, op.measurement_width()));
    let x = cube.data();
    let m = &op.shifted_mask;
    for i in 0..h {
        for c in 0..bands {
            for j in 0..w {
                let col = j + step * c;
                acc[[i, col]] += m[[i, col, c]] as f64 * x[[i, j, c]] as f64;
            }
        }
    }
    Ok(Measurement::from_unchecked(acc.mapv(|v| v as f32)))
}

/// Φᵀy: band c = unshift(Φ[:, :, c] ⊙ y).
pub fn apply_adjoint(y: &Measurement, op: &OperatorRep) -> Result<HsiCube> {
    op.check_measurement(y)?;
    let (h, w, bands) = (op.height(), op.width, op.bands());
    let step = op.step;
    let m = &op.shifted_mask;
    let yd = y.data();
    let out = Array3::from_shape_fn((h, w, bands), |(i, j, c)| {
        let col = j + step * c;
        (m[[i, col, c]] as f64 * yd[[i, col]] as f64) as f32
    });
    Ok(HsiCube::from_unchecked(out))
}

/// Dense Φ with rows indexed `i·Ŵ + col` and columns `(i·W + j)·C + c`
/// (row-major vec of the measurement and of the cube).
pub fn build_dense_operator(op: &OperatorRep) -> Result<Array2<f64>> {
    let (h, w, bands) = (op.height(), op.width, op.bands());
    let voxels = h * w * bands;
    if voxels > DENSE_VOXEL_CAP {
        return Err(Error::Refused(format!("dense operator for {voxels} voxels exceeds cap {DENSE_VOXEL_CAP}")));
    }
    let wide = op.measurement_width();
    let mut dense = Array2::<f64>::zeros((h * wide, voxels));
    for i in 0..h {
        for j in 0..w {
            for c in 0..bands {
                let col = j + op.step * c;
                dense[[i * wide + col, (i * w + j) * bands + c]] = op.shifted_mask[[i, col, c]] as f64;
            }
        }
    }
    Ok(dense)
}

/// Poisson shot noise at a `bits`-deep full well referenced to max(y).
pub fn add_shot_noise(y: &Measurement, bits: u32, seed: u64) -> Result<Measurement> {
    if y.data().iter().any(|&v| v < 0.0) {
        return arg("shot noise requires a nonnegative measurement");
    }
    if bits == 0 || bits > 30 {
        return arg(format!("unsupported bit depth {bits}"));
    }
    let peak = y.data().iter().cloned().fold(0.0f32, f32::max) as f64;
    let full_well = ((1u64 << bits) - 1) as f64;
    let mut out = y.clone();
    if peak == 0.0 {
        out.noise = Some(NoiseMeta { model: "poisson".into(), bits, seed, scale: 0.0 });
        return Ok(out);
    }
    let scale = full_well / peak;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = y.data().mapv(|v| {
        let lambda = scale * v as f64;
        if lambda <= 0.0 {
            0.0
        } else {
            let count: f64 = Poisson::new(lambda).expect("positive rate").sample(&mut rng);
            (count / scale) as f32
        }
    });
    let mut noisy = Measurement::from_unchecked(data);
    noisy.noise = Some(NoiseMeta { model: "poisson".into(), bits, seed, scale });
    Ok(noisy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_cube(h: usize, w: usize, c: usize, seed: u64) -> HsiCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        HsiCube::from_unchecked(Array3::from_shape_simple_fn((h, w, c), || rng.random::<f32>()))
    }

    fn rand_mask(h: usize, w: usize, seed: u64) -> CodedMask {
        CodedMask::random(h, w, crate::hsi::MaskKind::Uniform, seed)
    }

    fn vec_of(a: &Array3<f32>) -> Vec<f64> {
        a.iter().map(|&v| v as f64).collect()
    }

    #[test]
    fn shift_geometry() {
        let cube = rand_cube(3, 3, 2, 0);
        assert_eq!(shift_cube(&cube, 0), *cube.data());
        let sh = shift_cube(&cube, 2);
        assert_eq!(sh.dim(), (3, 5, 2));
        for i in 0..3 {
            assert_eq!(sh[[i, 0, 1]], 0.0);
            assert_eq!(sh[[i, 1, 1]], 0.0);
            for j in 0..3 {
                assert_eq!(sh[[i, j + 2, 1]], cube.data()[[i, j, 1]]);
            }
        }
        let wide = HsiCube::zeros(2, 256, 28);
        assert_eq!(shift_cube(&wide, 2).dim().1, 310);
    }

    #[test]
    fn unshift_round_trip_and_projection() {
        let cube = rand_cube(4, 4, 3, 1);
        assert_eq!(unshift_cube(&shift_cube(&cube, 1), 1).unwrap(), cube);
        assert_eq!(unshift_cube(&shift_cube(&cube, 0), 0).unwrap(), cube);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Array3::from_shape_simple_fn((4, 6, 3), || rng.random::<f32>() + 0.5);
        let p = shift_cube(&unshift_cube(&z, 1).unwrap(), 1);
        for ((i, j, c), &v) in p.indexed_iter() {
            let inside = j >= c && j < c + 4;
            if inside {
                assert_eq!(v, z[[i, j, c]]);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn forward_simple_cases() {
        let cube = rand_cube(4, 5, 1, 3);
        let op = OperatorRep::from_mask(&CodedMask::ones(4, 5), 1, 0).unwrap();
        let y = apply_forward(&cube, &op).unwrap();
        assert_eq!(y.data(), &cube.data().index_axis(Axis(2), 0));
        let back = apply_adjoint(&y, &op).unwrap();
        assert_eq!(back.data().index_axis(Axis(2), 0), y.data());

        let op = OperatorRep::from_mask(&rand_mask(4, 5, 1), 3, 2).unwrap();
        let zero = apply_forward(&HsiCube::zeros(4, 5, 3), &op).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let zy = Measurement::new(Array2::zeros((4, 9))).unwrap();
        assert!(apply_adjoint(&zy, &op).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(apply_forward(&HsiCube::zeros(4, 5, 2), &op), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_oracle_matches() {
        let (h, w, c, step) = (4, 4, 3, 1);
        let op = OperatorRep::from_mask(&rand_mask(h, w, 4), c, step).unwrap();
        let dense = build_dense_operator(&op).unwrap();
        let cube = rand_cube(h, w, c, 5);
        let y = apply_forward(&cube, &op).unwrap();
        let dy = dense.dot(&ndarray::Array1::from(vec_of(cube.data())));
        for (a, b) in y.data().iter().zip(dy.iter()) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        // at most one nonzero per column
        for col in dense.columns() {
            assert!(col.iter().filter(|&&v| v != 0.0).count() <= 1);
        }
        // row sums equal per-pixel sums of overlapping mask values
        let mut direct = Array2::<f64>::zeros((h, op.measurement_width()));
        for ((i, j, b), &m) in op.shifted_mask().indexed_iter() {
            let _ = b;
            direct[[i, j]] += m as f64;
        }
        for (r, row) in dense.rows().into_iter().enumerate() {
            let s: f64 = row.sum();
            assert!((s - direct.as_slice().unwrap()[r]).abs() < 1e-9);
        }
        // diag(ΦΦᵀ) equals row squared norms
        let diag = op.diag_phi_phit();
        for (r, row) in dense.rows().into_iter().enumerate() {
            let sq: f64 = row.iter().map(|v| v * v).sum();
            assert!((sq - diag.as_slice().unwrap()[r]).abs() < 1e-9);
        }
    }

    #[test]
    fn dense_identity_pattern() {
        let op = OperatorRep::from_mask(&CodedMask::ones(3, 4), 1, 0).unwrap();
        let dense = build_dense_operator(&op).unwrap();
        assert_eq!(dense, Array2::eye(12));
    }

    #[test]
    fn dense_cap_is_enforced() {
        let op = OperatorRep::from_mask(&CodedMask::ones(100, 100), 11, 0).unwrap();
        assert!(matches!(build_dense_operator(&op), Err(Error::Refused(_))));
    }

    #[test]
    fn adjoint_identity() {
        let (h, w, c, step) = (5, 6, 4, 2);
        let op = OperatorRep::from_mask(&rand_mask(h, w, 6), c, step).unwrap();
        let x = rand_cube(h, w, c, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = Measurement::new(Array2::from_shape_simple_fn((h, op.measurement_width()), || rng.random::<f32>())).unwrap();
        let phix = apply_forward(&x, &op).unwrap();
        let lhs: f64 = phix.data().iter().zip(y.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        let aty = apply_adjoint(&y, &op).unwrap();
        let rhs: f64 = x.data().iter().zip(aty.data()).map(|(&a, &b)| a as f64 * b as f64).sum();
        assert!((lhs - rhs).abs() / lhs.abs() < 1e-5);
    }

    #[test]
    fn corrected_operator_is_masked_to_support() {
        let t = Array3::from_elem((2, 5, 2), 0.5f32);
        let op = OperatorRep::from_shifted(t, 3, 2).unwrap();
        assert_eq!(op.shifted_mask()[[0, 0, 1]], 0.0);
        assert_eq!(op.shifted_mask()[[0, 4, 0]], 0.0);
        assert_eq!(op.shifted_mask()[[0, 2, 1]], 0.5);
        assert!(OperatorRep::from_shifted(Array3::zeros((2, 6, 2)), 3, 2).is_err());
    }

    #[test]
    fn shot_noise() {
        let zero = Measurement::new(Array2::zeros((4, 4))).unwrap();
        assert_eq!(add_shot_noise(&zero, 11, 1).unwrap().data(), zero.data());

        let y = Measurement::new(Array2::from_shape_fn((8, 8), |(i, j)| ((i + j) as f32) / 14.0)).unwrap();
        let a = add_shot_noise(&y, 11, 9).unwrap();
        let b = add_shot_noise(&y, 11, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.noise.as_ref().unwrap().bits, 11);
        assert_ne!(a.data(), y.data());

        let neg = Measurement::new(Array2::from_elem((2, 2), -0.1)).unwrap();
        assert!(matches!(add_shot_noise(&neg, 11, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn shot_noise_preserves_mean() {
        // constant 0.5 is its own max, so each draw is Poisson(2047)/4094
        let y = Measurement::new(Array2::from_elem((100, 100), 0.5)).unwrap();
        let noisy = add_shot_noise(&y, 11, 42).unwrap();
        let mean = noisy.data().iter().map(|&v| v as f64).sum::<f64>() / 1e4;
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
    }
}

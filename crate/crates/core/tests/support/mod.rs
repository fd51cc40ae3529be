//! Literal-formula oracles and instance generators shared by the
//! integration tests.

#![allow(dead_code, clippy::needless_range_loop)]

use cassi_core::autograd::{Graph, Tensor};
use cassi_core::cassi::{apply_forward, OperatorRep};
use cassi_core::config::ModelConfig;
use cassi_core::hsi::{CodedMask, HsiCube, MaskKind, Measurement};
use cassi_core::params::ParamId;
use cassi_core::unfolding::{measurement_to_tensor, operator_to_tensor, ModelState};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform random cube and mask with the measurement they produce.
pub fn instance(h: usize, w: usize, c: usize, step: usize, seed: u64) -> (HsiCube, OperatorRep, Measurement) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cube = HsiCube::new(Array3::from_shape_fn((h, w, c), |_| rng.random::<f32>())).unwrap();
    let kind = if seed.is_multiple_of(2) { MaskKind::Binary } else { MaskKind::Uniform };
    let op = OperatorRep::from_mask(&CodedMask::random(h, w, kind, seed ^ 0x5eed), c, step).unwrap();
    let y = apply_forward(&cube, &op).unwrap();
    (cube, op, y)
}

pub fn random_cube(h: usize, w: usize, c: usize, seed: u64) -> HsiCube {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    HsiCube::new(Array3::from_shape_fn((h, w, c), |_| rng.random::<f32>())).unwrap()
}

pub fn random_measurement(h: usize, w: usize, seed: u64) -> Measurement {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Measurement::new(Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0f32..1.0))).unwrap()
}

/// Row-major `(i, j, c)` flattening, matching the dense operator's columns.
pub fn flat_cube(cube: &HsiCube) -> Vec<f64> {
    cube.data().iter().map(|&v| v as f64).collect()
}

pub fn flat_measurement(y: &Measurement) -> Vec<f64> {
    y.data().iter().map(|&v| v as f64).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

/// `A x` for a dense row-major matrix.
pub fn matvec(a: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    a.rows().into_iter().map(|r| r.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

/// `Aᵀ r`.
pub fn matvec_t(a: &Array2<f64>, r: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.ncols()];
    for (row, &ri) in a.rows().into_iter().zip(r) {
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            *o += v * ri;
        }
    }
    out
}

/// Largest eigenvalue of `AᵀA` by power iteration.
pub fn lambda_max(a: &Array2<f64>) -> f64 {
    let mut x = vec![1.0; a.ncols()];
    let mut lam = 0.0;
    for _ in 0..500 {
        let y = matvec_t(a, &matvec(a, &x));
        let norm = dot(&y, &y).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lam = dot(&x, &y) / dot(&x, &x);
        x = y.iter().map(|v| v / norm).collect();
    }
    lam
}

pub fn psnr_oracle(a: &HsiCube, b: &HsiCube) -> f64 {
    let n = a.data().len() as f64;
    let mse: f64 = a.data().iter().zip(b.data()).map(|(&p, &q)| (p as f64 - q as f64).powi(2)).sum::<f64>() / n;
    if mse < 1e-10 {
        100.0
    } else {
        -10.0 * mse.log10()
    }
}

/// SSIM with an explicit 2-D Gaussian window and two-pass moments.
pub fn ssim_oracle(a: &HsiCube, b: &HsiCube) -> f64 {
    let (h, w, c) = a.dims();
    let (size, sigma) = (11usize, 1.5f64);
    let half = (size / 2) as f64;
    let mut win = vec![vec![0.0; size]; size];
    let mut z = 0.0;
    for (u, row) in win.iter_mut().enumerate() {
        for (v, cell) in row.iter_mut().enumerate() {
            *cell = (-((u as f64 - half).powi(2) + (v as f64 - half).powi(2)) / (2.0 * sigma * sigma)).exp();
            z += *cell;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut per_band = 0.0;
    for band in 0..c {
        let pa = |i: usize, j: usize| a.data()[[i, j, band]] as f64;
        let pb = |i: usize, j: usize| b.data()[[i, j, band]] as f64;
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..=h - size {
            for j in 0..=w - size {
                let (mut ma, mut mb) = (0.0, 0.0);
                for u in 0..size {
                    for v in 0..size {
                        let wt = win[u][v] / z;
                        ma += wt * pa(i + u, j + v);
                        mb += wt * pb(i + u, j + v);
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for u in 0..size {
                    for v in 0..size {
                        let wt = win[u][v] / z;
                        let (da, db) = (pa(i + u, j + v) - ma, pb(i + u, j + v) - mb);
                        va += wt * da * da;
                        vb += wt * db * db;
                        cov += wt * da * db;
                    }
                }
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        per_band += total / count as f64;
    }
    per_band / c as f64
}

/// Pearson r via `E[xy] − E[x]E[y]` over ROI band means.
pub fn correlation_oracle(a: &HsiCube, b: &HsiCube, top: usize, left: usize, rh: usize, rw: usize) -> f64 {
    let means = |cube: &HsiCube| -> Vec<f64> {
        (0..cube.bands())
            .map(|c| {
                let mut s = 0.0;
                for i in top..top + rh {
                    for j in left..left + rw {
                        s += cube.data()[[i, j, c]] as f64;
                    }
                }
                s / (rh * rw) as f64
            })
            .collect()
    };
    let (x, y) = (means(a), means(b));
    let n = x.len() as f64;
    let ex = x.iter().sum::<f64>() / n;
    let ey = y.iter().sum::<f64>() / n;
    let exy = dot(&x, &y) / n;
    let exx = dot(&x, &x) / n;
    let eyy = dot(&y, &y) / n;
    (exy - ex * ey) / ((exx - ex * ex).sqrt() * (eyy - ey * ey).sqrt())
}

/// The smallest model the acceptance criteria talk about.
pub fn micro_config(bands: usize, stages: usize) -> ModelConfig {
    ModelConfig { bands, channels: 4, levels: 2, blocks: vec![1, 1], heads: vec![1, 1], stages, ..ModelConfig::micro() }
}

/// Rows of the break-down ablation, each adding one component to the
/// previous: plain spectral baseline, residual degradation, spatial branch,
/// bi-directional interaction, block interaction, stage interaction.
pub fn ablation_rows(full: &ModelConfig) -> Vec<(&'static str, ModelConfig)> {
    let base = full.baseline();
    let r2 = ModelConfig { use_residual_degradation: true, ..base.clone() };
    let r3 = ModelConfig { use_spatial_branch: true, ..r2.clone() };
    let r4 = ModelConfig { use_bidirectional: true, ..r3.clone() };
    let r5 = ModelConfig { use_block_interaction: true, ..r4.clone() };
    let r6 = ModelConfig { use_stage_interaction: true, ..r5.clone() };
    vec![
        ("baseline", base),
        ("+residual degradation", r2),
        ("+spatial branch", r3),
        ("+bi-directional", r4),
        ("+block interaction", r5),
        ("+stage interaction", r6),
    ]
}

/// Large enough that the sigmoid rounds to exactly 1.0.
const SATURATE: f64 = 40.0;

/// Loads `reduced`'s weights into `larger` and sets every parameter that
/// only `larger` has so the extra component acts as the identity.
pub fn embed_reduced(reduced: &ModelState, larger: &mut ModelState) {
    larger.store.copy_matching(&reduced.store);
    let cfg = larger.config.clone();
    let extra: Vec<(ParamId, String)> = larger.store.iter().filter(|(_, n, _)| reduced.store.id(n).is_none()).map(|(id, n, _)| (id, n.to_string())).collect();
    for (id, name) in extra {
        let t = larger.store.value_mut(id);
        let shape = t.shape().to_vec();
        let data = t.data_mut();
        if name.contains(".degradation.project.") || name.contains(".scale.") || name.contains(".shift.") {
            data.fill(0.0);
        } else if name.contains("spatial_gate.conv.") || name.contains("spectral_gate.excite.") {
            data.fill(if name.ends_with("bias") { SATURATE } else { 0.0 });
        } else if name.ends_with(".fuse.weight") {
            // [c, 2c, 1, 1]: pass the attention half through
            let (c, cin) = (shape[0], shape[1]);
            data.fill(0.0);
            for o in 0..c {
                data[o * cin + o] = 1.0;
            }
        } else if let Some(lv) = name.split('.').find_map(|p| p.strip_prefix("bi")).and_then(|s| s.parse::<usize>().ok()) {
            // [c_lv, Σ c_l, 1, 1]: select this level's encoder output
            let (c, cin) = (shape[0], shape[1]);
            let offset: usize = (0..lv).map(|l| cfg.level_channels(l)).sum();
            data.fill(0.0);
            for o in 0..c {
                data[o * cin + offset + o] = 1.0;
            }
        }
    }
}

/// Adds uniform noise of amplitude `amp` to every parameter.
pub fn perturb(model: &mut ModelState, amp: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        for v in model.store.value_mut(id).data_mut() {
            *v += rng.random_range(-amp..amp);
        }
    }
}

/// Final unclamped output on one measurement.
pub fn run_model(model: &ModelState, y: &Measurement, op: &OperatorRep) -> Tensor {
    let mut g = Graph::inference();
    let yv = g.constant(measurement_to_tensor(y));
    let pv = g.constant(operator_to_tensor(op));
    let out = model.forward(&mut g, yv, pv).unwrap();
    g.value(out.output).clone()
}

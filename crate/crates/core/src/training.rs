//! Loss, learning-rate schedule, the optimization loop and gradient checking.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Tensor, Var};
use crate::cassi::{add_shot_noise, apply_forward, OperatorRep};
use crate::checkpoint;
use crate::error::{arg, Error, Result};
use crate::hsi::{augment, crop_at, CodedMask, HsiCube, Measurement};
use crate::params::{Adam, GradAccumulator, ParamId};
use crate::unfolding::{cube_to_tensor, measurement_to_tensor, operator_to_tensor, ModelState, UnfoldOutput};

pub const CHARBONNIER_EPS: f64 = 1e-3;

/// Mean of `sqrt((pred − target)² + eps²)`.
pub fn charbonnier_loss(pred: &HsiCube, target: &HsiCube, eps: f64) -> Result<f64> {
    if pred.dims() != target.dims() {
        return arg(format!("prediction {:?} vs target {:?}", pred.dims(), target.dims()));
    }
    let e2 = eps * eps;
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(target.data()).map(|(&a, &b)| ((a as f64 - b as f64).powi(2) + e2).sqrt()).sum::<f64>() / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the scenes.
    pub steps_per_epoch: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    /// Square training patch side.
    pub patch_size: usize,
    pub seed: u64,
    /// Shot noise bit depth applied to synthesized measurements.
    pub noise_bits: Option<u32>,
    /// Random flips and rotations.
    pub augment: bool,
    pub charbonnier_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            steps_per_epoch: 0,
            peak_lr: 2e-4,
            warmup_steps: 1000,
            batch_size: 1,
            beta1: 0.9,
            beta2: 0.999,
            patch_size: 64,
            seed: 0,
            noise_bits: None,
            augment: true,
            charbonnier_eps: CHARBONNIER_EPS,
        }
    }
}

impl TrainConfig {
    // negated comparisons so NaN is rejected too
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.patch_size == 0 || self.epochs == 0 {
            return bad("epochs, batch_size and patch_size must be positive");
        }
        if !(self.charbonnier_eps >= 0.0) {
            return bad("charbonnier_eps must be nonnegative");
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, scenes: usize) -> usize {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch
        } else {
            scenes.div_ceil(self.batch_size).max(1)
        }
    }
}

/// Linear warm-up from 0 to `peak` over `warmup` steps, then cosine decay
/// to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, peak: f64) -> f64 {
    if step < warmup {
        return peak * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    peak * 0.5 * (1.0 + (PI * progress).cos())
}

/// Training scenes sharing one coded mask.
pub struct TrainData {
    pub scenes: Vec<HsiCube>,
    pub mask: CodedMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

impl StepLog {
    /// `step,lr,loss`
    pub fn line(&self) -> String {
        format!("{},{:e},{:.10e}", self.step, self.lr, self.loss)
    }
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Directory for per-epoch checkpoints (`epoch{N}.rdlc` and `last.rdlc`).
    pub checkpoint_dir: Option<PathBuf>,
    pub on_step: Option<&'a mut dyn FnMut(&StepLog)>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

/// One training sample: ground truth, operator and measurement.
pub struct Sample {
    pub truth: HsiCube,
    pub op: OperatorRep,
    pub y: Measurement,
}

/// Crop (and optionally augment) a scene, then simulate its measurement.
pub fn draw_sample(data: &TrainData, cfg: &TrainConfig, step: usize, item: usize, bands: usize, step_px: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ ((step as u64) << 20) ^ item as u64);
    let scene = &data.scenes[rng.random_range(0..data.scenes.len())];
    let p = cfg.patch_size;
    if scene.height() < p || scene.width() < p || data.mask.height() < p || data.mask.width() < p {
        return arg(format!("patch {p} larger than a scene or the mask"));
    }
    if scene.bands() != bands {
        return arg(format!("scene has {} bands, model expects {bands}", scene.bands()));
    }
    let (top, left) = (rng.random_range(0..=scene.height() - p), rng.random_range(0..=scene.width() - p));
    let mut truth = crop_at(scene, top, left, (p, p));
    if cfg.augment {
        truth = augment(&truth, rng.random());
    }
    let (mt, ml) = (rng.random_range(0..=data.mask.height() - p), rng.random_range(0..=data.mask.width() - p));
    let mask = CodedMask::new(data.mask.data().slice(ndarray::s![mt..mt + p, ml..ml + p]).to_owned())?;
    let op = OperatorRep::from_mask(&mask, bands, step_px)?;
    let clean = apply_forward(&truth, &op)?;
    let y = match cfg.noise_bits {
        Some(bits) => add_shot_noise(&clean, bits, rng.random())?,
        None => clean,
    };
    Ok(Sample { truth, op, y })
}

/// Loss graph for one sample; returns the graph, the loss node and the forward trace.
pub fn loss_graph(model: &ModelState, s: &Sample, eps: f64) -> Result<(Graph, Var, UnfoldOutput)> {
    let mut g = Graph::new();
    let y = g.constant(measurement_to_tensor(&s.y));
    let phi = g.constant(operator_to_tensor(&s.op));
    let truth = g.constant(cube_to_tensor(&s.truth));
    let out = model.forward(&mut g, y, phi)?;
    let loss = g.charbonnier(out.output, truth, eps);
    Ok((g, loss, out))
}

/// Summary of each stage's intermediates, for diagnosing divergence.
pub fn stage_dump(model: &ModelState, g: &Graph, out: &UnfoldOutput) -> String {
    let stat = |t: &Tensor| {
        let finite = t.data().iter().filter(|v| v.is_finite()).count();
        let max = t.data().iter().filter(|v| v.is_finite()).fold(0.0f64, |m, v| m.max(v.abs()));
        format!("mean|.|={:.4e} max|.|={max:.4e} finite={finite}/{}", t.mean_abs(), t.len())
    };
    let mut s = format!("x0: {}\n", stat(g.value(out.init)));
    for (k, st) in out.stages.iter().enumerate() {
        let rho = model.store.value(model.group_of(k).rho).data()[0];
        let _ = writeln!(s, "stage {}: rho={rho:.4e} phi_hat[{}] v[{}] x[{}]", k + 1, stat(g.value(st.phi_hat)), stat(g.value(st.v)), stat(g.value(st.x)));
    }
    s
}

/// Names of parameters holding non-finite values.
pub fn non_finite_params(model: &ModelState) -> String {
    let bad: Vec<&str> = model.store.iter().filter(|(_, _, t)| !t.all_finite()).map(|(_, n, _)| n).collect();
    if bad.is_empty() {
        "all parameters finite".into()
    } else {
        format!("non-finite parameters: {}", bad.join(", "))
    }
}

/// Adam on Charbonnier loss with warm-up + cosine learning rate.
pub fn train(model: &mut ModelState, data: &TrainData, cfg: &TrainConfig, mut opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.scenes.is_empty() {
        return arg("no training scenes");
    }
    let per_epoch = cfg.steps_per_epoch(data.scenes.len());
    let total = cfg.epochs * per_epoch;
    let mut adam = Adam::new(&model.store, cfg.beta1, cfg.beta2);
    let mut log = Vec::with_capacity(total);
    let mut checkpoints = Vec::new();
    if let Some(dir) = &opts.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let (bands, step_px) = (model.config.bands, model.config.step);
    for step in 0..total {
        let lr = lr_schedule(step, total, cfg.warmup_steps, cfg.peak_lr);
        let mut acc = GradAccumulator::new(&model.store);
        let mut loss_sum = 0.0;
        for item in 0..cfg.batch_size {
            let sample = draw_sample(data, cfg, step, item, bands, step_px)?;
            let (g, loss, out) = loss_graph(model, &sample, cfg.charbonnier_eps).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}\n{}", non_finite_params(model))),
                other => other,
            })?;
            let l = g.value(loss).data()[0];
            if !l.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss at step {step}\n{}", stage_dump(model, &g, &out))));
            }
            loss_sum += l;
            acc.add(&g.backward(loss));
        }
        acc.scale(1.0 / cfg.batch_size as f64);
        if !acc.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at step {step}")));
        }
        adam.step(&mut model.store, acc.as_slice(), lr);
        let entry = StepLog { step, lr, loss: loss_sum / cfg.batch_size as f64 };
        if let Some(cb) = opts.on_step.as_deref_mut() {
            cb(&entry);
        }
        log.push(entry);
        if (step + 1) % per_epoch == 0 {
            if let Some(dir) = &opts.checkpoint_dir {
                let epoch = (step + 1) / per_epoch;
                let path = dir.join(format!("epoch{epoch}.rdlc"));
                checkpoint::save(model, &path)?;
                checkpoint::save(model, dir.join("last.rdlc"))?;
                checkpoints.push(path);
            }
        }
    }
    Ok(TrainOutcome { log, checkpoints })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckEntry {
    /// `|a − n| / max(|a|, |n|)`; 0 when both vanish.
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

/// Compare backprop against central differences on `count` parameter
/// entries drawn at random (a tensor uniformly, then an element).
pub fn gradient_check(model: &mut ModelState, s: &Sample, count: usize, h: f64, seed: u64) -> Result<Vec<GradCheckEntry>> {
    let eps = CHARBONNIER_EPS;
    let (g, loss, _) = loss_graph(model, s, eps)?;
    let grads = g.backward(loss);
    let ids: Vec<ParamId> = model.store.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = Vec::with_capacity(count);
    while picks.len() < count {
        let id = ids[rng.random_range(0..ids.len())];
        let idx = rng.random_range(0..model.store.value(id).len());
        if !picks.contains(&(id, idx)) {
            picks.push((id, idx));
        }
    }
    let eval = |model: &ModelState| -> Result<f64> {
        let (g, loss, _) = loss_graph(model, s, eps)?;
        Ok(g.value(loss).data()[0])
    };
    let mut out = Vec::with_capacity(count);
    for (id, idx) in picks {
        let orig = model.store.value(id).data()[idx];
        model.store.value_mut(id).data_mut()[idx] = orig + h;
        let up = eval(model)?;
        model.store.value_mut(id).data_mut()[idx] = orig - h;
        let down = eval(model)?;
        model.store.value_mut(id).data_mut()[idx] = orig;
        out.push(GradCheckEntry {
            name: model.store.name(id).to_string(),
            index: idx,
            analytic: grads.get(id).map_or(0.0, |t| t.data()[idx]),
            numeric: (up - down) / (2.0 * h),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn charbonnier_cases() {
        let a = HsiCube::new(Array3::from_elem((1, 1, 1), 0.5f32)).unwrap();
        assert!((charbonnier_loss(&a, &a, 1e-3).unwrap() - 1e-3).abs() < 1e-15);
        let z = HsiCube::zeros(1, 1, 1);
        let o = HsiCube::new(Array3::from_elem((1, 1, 1), 1.0f32)).unwrap();
        assert!((charbonnier_loss(&o, &z, 1e-3).unwrap() - (1.0f64 + 1e-6).sqrt()).abs() < 1e-15);
        let p = HsiCube::from_unchecked(Array3::from_shape_vec((1, 2, 1), vec![0.0, 3.0]).unwrap());
        let t = HsiCube::zeros(1, 2, 1);
        assert_eq!(charbonnier_loss(&p, &t, 0.0).unwrap(), 1.5);
    }

    #[test]
    fn schedule_landmarks() {
        let (total, warm, peak) = (1000, 100, 2e-4);
        assert_eq!(lr_schedule(0, total, warm, peak), 0.0);
        assert_eq!(lr_schedule(warm, total, warm, peak), peak);
        assert_eq!(lr_schedule(total, total, warm, peak), 0.0);
        assert!((lr_schedule(warm + (total - warm) / 2, total, warm, peak) - peak / 2.0).abs() < 1e-18);
        // both branches evaluated at the junction
        let linear = peak * warm as f64 / warm as f64;
        assert!((lr_schedule(warm, total, warm, peak) - linear).abs() < 1e-12 * peak);
        assert_eq!(lr_schedule(5, 10, 0, 1.0), 0.5);
    }

    #[test]
    fn log_line_format() {
        let l = StepLog { step: 3, lr: 1e-4, loss: 0.25 };
        let line = l.line();
        let parts: Vec<&str> = line.split(',').collect();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0], "3");
        assert_eq!(parts[1].parse::<f64>().unwrap(), 1e-4);
        assert_eq!(parts[2].parse::<f64>().unwrap(), 0.25);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { peak_lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { beta2: 1.0, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig { batch_size: 2, ..Default::default() }.steps_per_epoch(5), 3);
    }
}

//! Deep unfolding of proximal gradient descent with a learned residual
//! correction of the sensing operator.
//!
//! Each stage computes `Φ̂ = Φ + R(y, Φ)`, takes the gradient step
//! `v = x − ρ Φ̂ᵀ(Φ̂x − y)` and denoises `v` with a MixS² transformer.

pub mod dlcb;
pub mod span;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Tensor, Var};
use crate::baselines::DIAG_FLOOR;
use crate::cassi::OperatorRep;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::hsi::{HsiCube, Measurement};
use crate::layers::Builder;
use crate::mixs2::{MixS2Denoiser, Modulation};
use crate::params::{Init, ParamId, ParamStore};

pub use dlcb::{band_support, Dlcb, ResidualDegradation};
pub use span::{SpanUnit, StageInteraction};

/// `H×W×C` cube → `[C, H, W]` tensor.
pub fn cube_to_tensor(cube: &HsiCube) -> Tensor {
    let (h, w, c) = cube.dims();
    let d = cube.data();
    let mut out = Vec::with_capacity(h * w * c);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                out.push(d[[i, j, ch]] as f64);
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

/// `[C, H, W]` tensor → cube. Values are not range-checked, only finiteness.
pub fn tensor_to_cube(t: &Tensor) -> Result<HsiCube> {
    if !t.all_finite() {
        return Err(Error::Numeric("non-finite cube values".into()));
    }
    let (c, h, w) = t.chw();
    let d = t.data();
    Ok(HsiCube::from_unchecked(Array3::from_shape_fn((h, w, c), |(i, j, ch)| d[(ch * h + i) * w + j] as f32)))
}

/// Shifted mask `H×Ŵ×C` → `[C, H, Ŵ]`.
pub fn operator_to_tensor(op: &OperatorRep) -> Tensor {
    let m = op.shifted_mask();
    let (h, wide, c) = m.dim();
    let mut out = Vec::with_capacity(h * wide * c);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..wide {
                out.push(m[[i, j, ch]] as f64);
            }
        }
    }
    Tensor::new(vec![c, h, wide], out)
}

pub fn tensor_to_operator(t: &Tensor, width: usize, step: usize) -> Result<OperatorRep> {
    let (c, h, wide) = t.chw();
    let d = t.data();
    OperatorRep::from_shifted(Array3::from_shape_fn((h, wide, c), |(i, j, ch)| d[(ch * h + i) * wide + j] as f32), width, step)
}

/// `H×Ŵ` measurement → `[1, H, Ŵ]`.
pub fn measurement_to_tensor(y: &Measurement) -> Tensor {
    let d = y.data();
    Tensor::new(vec![1, y.height(), y.width()], d.iter().map(|&v| v as f64).collect())
}

pub fn tensor_to_measurement(t: &Tensor) -> Result<Measurement> {
    let (_, h, w) = t.chw();
    Measurement::new(Array2::from_shape_vec((h, w), t.data().iter().map(|&v| v as f32).collect()).expect("shape"))
}

/// `Φx` on the graph; `phi` is `[C, H, Ŵ]`, `x` is `[C, H, W]`.
pub fn forward_op(g: &mut Graph, phi: Var, x: Var, step: usize) -> Var {
    let sx = g.shift_bands(x, step);
    let m = g.mul(phi, sx);
    g.sum_channels(m)
}

/// `Φᵀr` on the graph; `r` is `[1, H, Ŵ]`.
pub fn adjoint_op(g: &mut Graph, phi: Var, r: Var, step: usize) -> Var {
    let m = g.mul(phi, r);
    g.unshift_bands(m, step)
}

/// `y ⊘ diag(ΦΦᵀ)`, with the diagonal floored at [`DIAG_FLOOR`].
pub fn normalize_measurement(y: &Tensor, phi: &Tensor) -> Tensor {
    let (c, h, w) = phi.chw();
    let plane = h * w;
    let mut out = y.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let d: f64 = (0..c).map(|b| phi.data()[b * plane + i].powi(2)).sum();
        *v /= d.max(DIAG_FLOOR);
    }
    out
}

/// `x − ρ Φ̂ᵀ(Φ̂x − y)` on the graph.
pub fn gradient_step(g: &mut Graph, x: Var, y: Var, phi_hat: Var, rho: Var, step: usize) -> Var {
    let fx = forward_op(g, phi_hat, x, step);
    let r = g.sub(fx, y);
    let grad = adjoint_op(g, phi_hat, r, step);
    let scaled = g.mul(grad, rho);
    g.sub(x, scaled)
}

/// [`gradient_step`] on plain cubes.
pub fn gradient_step_cube(x: &HsiCube, y: &Measurement, op: &OperatorRep, rho: f64) -> Result<HsiCube> {
    if x.dims() != (op.height(), op.width(), op.bands()) || (y.height(), y.width()) != (op.height(), op.measurement_width()) {
        return Err(Error::Shape("cube, measurement and operator disagree".into()));
    }
    let mut g = Graph::inference();
    let xv = g.constant(cube_to_tensor(x));
    let yv = g.constant(measurement_to_tensor(y));
    let pv = g.constant(operator_to_tensor(op));
    let rv = g.constant(Tensor::scalar(rho));
    let v = gradient_step(&mut g, xv, yv, pv, rv, op.step());
    tensor_to_cube(g.value(v))
}

/// Parameters of one stage group.
#[derive(Debug, Clone)]
pub struct StageGroup {
    pub prefix: String,
    pub rho: ParamId,
    pub degradation: Option<ResidualDegradation>,
    pub span: Option<StageInteraction>,
    pub denoiser: MixS2Denoiser,
}

/// All network parameters plus the stage → group map.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub groups: Vec<StageGroup>,
    pub stage_group: Vec<usize>,
}

/// Per-stage intermediate values of a forward pass.
pub struct StageTrace {
    pub phi_hat: Var,
    pub v: Var,
    pub x: Var,
}

pub struct UnfoldOutput {
    /// Starting estimate `x̂_0`.
    pub init: Var,
    pub stages: Vec<StageTrace>,
    /// Final stage output before clamping.
    pub output: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageCensus {
    pub stage: usize,
    pub group: String,
    pub params: usize,
}

impl ModelState {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let k = config.stages;
        let (names, stage_group): (Vec<String>, Vec<usize>) = if config.share_stages && k >= 3 {
            (
                vec!["stage1".into(), "shared".into(), format!("stage{k}")],
                (0..k)
                    .map(|s| {
                        if s == 0 {
                            0
                        } else if s == k - 1 {
                            2
                        } else {
                            1
                        }
                    })
                    .collect(),
            )
        } else {
            ((1..=k).map(|s| format!("stage{s}")).collect(), (0..k).collect())
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut groups = Vec::with_capacity(names.len());
        for (gi, prefix) in names.into_iter().enumerate() {
            let mut b = Builder::new(&mut store, &mut rng, &prefix);
            let rho = b.param("rho", &[1], Init::Constant(config.initial_rho()))?;
            let degradation = if config.use_residual_degradation {
                Some(ResidualDegradation::new(&mut b.sub("degradation"), config.bands, config.step, config.dlcb_width(), config.dlcb_blocks)?)
            } else {
                None
            };
            let denoiser = MixS2Denoiser::new(&mut b.sub("denoiser"), config)?;
            // the first group only ever runs as stage 1, which has no predecessor
            let span =
                if config.use_stage_interaction && gi > 0 { Some(StageInteraction::new(&mut b.sub("span"), &denoiser.block_channels(config))?) } else { None };
            groups.push(StageGroup { prefix, rho, degradation, span, denoiser });
        }
        Ok(Self { config: config.clone(), store, groups, stage_group })
    }

    pub fn stages(&self) -> usize {
        self.stage_group.len()
    }

    pub fn group_of(&self, stage: usize) -> &StageGroup {
        &self.groups[self.stage_group[stage]]
    }

    /// Parameter ids used by stage `stage` (0-based) with group-relative names.
    pub fn stage_params(&self, stage: usize) -> Vec<(String, ParamId)> {
        let prefix = format!("{}.", self.group_of(stage).prefix);
        self.store.iter().filter_map(|(id, name, _)| name.strip_prefix(&prefix).map(|n| (n.to_string(), id))).collect()
    }

    pub fn census(&self) -> Vec<StageCensus> {
        (0..self.stages())
            .map(|s| StageCensus {
                stage: s + 1,
                group: self.group_of(s).prefix.clone(),
                params: self.stage_params(s).iter().map(|(_, id)| self.store.value(*id).len()).sum(),
            })
            .collect()
    }

    /// Scalars per named component (`degradation`, `denoiser`, `span`, `rho`), summed over groups.
    pub fn component_census(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for (_, name, t) in self.store.iter() {
            let comp = name.split('.').nth(1).unwrap_or(name).to_string();
            match out.iter_mut().find(|(c, _)| *c == comp) {
                Some(e) => e.1 += t.len(),
                None => out.push((comp, t.len())),
            }
        }
        out
    }

    /// Run the unfolded network on `y` (`[1, H, Ŵ]`) and `phi` (`[C, H, Ŵ]`).
    pub fn forward(&self, g: &mut Graph, y: Var, phi: Var) -> Result<UnfoldOutput> {
        let (c, h, wide) = g.value(phi).chw();
        if c != self.config.bands {
            return Err(Error::Shape(format!("operator has {c} bands, model expects {}", self.config.bands)));
        }
        if g.value(y).shape() != [1, h, wide] {
            return Err(Error::Shape(format!("measurement {:?} vs operator {c}x{h}x{wide}", g.value(y).shape())));
        }
        if wide <= self.config.step * (c - 1) {
            return Err(Error::Shape(format!("sensor width {wide} too small for {c} bands")));
        }
        let step = self.config.step;
        let init = if self.config.normalize_init {
            let scaled = normalize_measurement(g.value(y), g.value(phi));
            let scaled = g.constant(scaled);
            adjoint_op(g, phi, scaled, step)
        } else {
            adjoint_op(g, phi, y, step)
        };
        let mut x = init;
        let mut stages = Vec::with_capacity(self.stages());
        let mut prev_features: Option<Vec<Var>> = None;
        let mut shared_hat: Option<Var> = None;
        for s in 0..self.stages() {
            let grp = self.group_of(s);
            let phi_hat = match (&grp.degradation, shared_hat) {
                (_, Some(hat)) => hat,
                (Some(r), None) => {
                    let hat = r.corrected(g, &self.store, y, phi)?;
                    if !self.config.recompute_degradation {
                        shared_hat = Some(hat);
                    }
                    hat
                }
                (None, None) => phi,
            };
            let rho = g.param(&self.store, grp.rho);
            let v = gradient_step(g, x, y, phi_hat, rho, step);
            let modulation = match (&grp.span, &prev_features) {
                (Some(span), Some(prev)) => Some(Modulation { span, prev }),
                _ => None,
            };
            let out = grp.denoiser.forward(g, &self.store, v, modulation)?;
            x = out.image;
            prev_features = Some(out.features);
            stages.push(StageTrace { phi_hat, v, x });
        }
        Ok(UnfoldOutput { init, stages, output: x })
    }

    /// Inference on plain data; the result is clamped to [0, 1].
    pub fn reconstruct(&self, y: &Measurement, op: &OperatorRep) -> Result<HsiCube> {
        if op.step() != self.config.step {
            return Err(Error::Argument(format!("operator step {} vs model step {}", op.step(), self.config.step)));
        }
        let mut g = Graph::inference();
        let yv = g.constant(measurement_to_tensor(y));
        let pv = g.constant(operator_to_tensor(op));
        let out = self.forward(&mut g, yv, pv)?;
        let clamped = g.clamp01(out.output);
        tensor_to_cube(g.value(clamped))
    }

    /// Corrected operator `Φ̂` of every stage.
    pub fn corrected_operators(&self, y: &Measurement, op: &OperatorRep) -> Result<Vec<OperatorRep>> {
        let mut g = Graph::inference();
        let yv = g.constant(measurement_to_tensor(y));
        let pv = g.constant(operator_to_tensor(op));
        let out = self.forward(&mut g, yv, pv)?;
        out.stages.iter().map(|s| tensor_to_operator(g.value(s.phi_hat), op.width(), op.step())).collect()
    }
}

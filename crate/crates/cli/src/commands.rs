//! One function per subcommand.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cassi_core::baselines::{gap_tv_solve, pgd_tv_solve, SolverConfig};
use cassi_core::cassi::{add_shot_noise, apply_forward, OperatorRep};
use cassi_core::checkpoint;
use cassi_core::config::ModelConfig;
use cassi_core::container::{load_cube, load_mask, load_measurement, save_cube, save_mask, save_measurement};
use cassi_core::hsi::{generate_synthetic_scene, CodedMask, HsiCube, MaskKind};
use cassi_core::metrics::{roi_spectrum, spectral_correlation, EvalReport, Roi};
use cassi_core::training::{self, StepLog, TrainConfig, TrainData, TrainOptions};
use cassi_core::unfolding::ModelState;
use serde::Deserialize;
use serde_json::json;

use crate::manifest::{beside, RunManifest};
use crate::plot;
use crate::{CensusArgs, CmdResult, EvalArgs, Failure, MaskArg, Method, PlotArgs, ReconstructArgs, SimulateArgs, TrainArgs};

fn parse_dims(text: &str) -> Result<(usize, usize, usize), Failure> {
    let parts: Vec<usize> = text
        .split(['x', 'X'])
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| Failure::usage(format!("--synthetic expects HxWxC, got {text:?}")))?;
    match parts[..] {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Failure::usage(format!("--synthetic expects HxWxC, got {text:?}"))),
    }
}

fn mask_kind(arg: MaskArg) -> MaskKind {
    match arg {
        MaskArg::Binary => MaskKind::Binary,
        MaskArg::Uniform => MaskKind::Uniform,
    }
}

fn parse_roi(text: Option<&str>) -> Result<Option<Roi>, Failure> {
    Ok(text.map(Roi::parse).transpose()?)
}

pub fn simulate(a: &SimulateArgs) -> CmdResult {
    let truth = match (&a.scene, &a.synthetic) {
        (Some(path), None) => load_cube(path)?,
        (None, Some(dims)) => {
            let (h, w, c) = parse_dims(dims)?;
            generate_synthetic_scene(h, w, c, a.seed)?
        }
        _ => return Err(Failure::usage("give a scene file or --synthetic HxWxC")),
    };
    let (h, w, c) = truth.dims();
    let mask = match (&a.mask, a.random_mask) {
        (Some(path), false) => load_mask(path)?,
        (None, true) => CodedMask::random(h, w, mask_kind(a.mask_kind), a.seed.wrapping_add(1)),
        _ => return Err(Failure::usage("give --mask FILE or --random-mask")),
    };
    let op = OperatorRep::from_mask(&mask, c, a.step)?;
    let clean = apply_forward(&truth, &op)?;
    let y = match a.noise_bits {
        Some(bits) => add_shot_noise(&clean, bits, a.seed.wrapping_add(2))?,
        None => clean,
    };

    fs::create_dir_all(&a.out)?;
    let (yp, mp, tp) = (a.out.join("measurement.hsic"), a.out.join("mask.hsic"), a.out.join("truth.hsic"));
    save_measurement(&y, &yp)?;
    save_mask(&mask, &mp)?;
    save_cube(&truth, &tp)?;

    let mut m = RunManifest::new("simulate");
    if let Some(scene) = &a.scene {
        m.input("scene", scene);
    }
    if let Some(mask) = &a.mask {
        m.input("mask", mask);
    }
    m.output(&yp).output(&mp).output(&tp);
    m.seed = Some(a.seed);
    m.details = json!({
        "height": h,
        "width": w,
        "bands": c,
        "step": a.step,
        "measurement_width": y.width(),
        "synthetic": a.synthetic,
        "mask_kind": if a.random_mask { Some(format!("{:?}", mask_kind(a.mask_kind)).to_lowercase()) } else { None },
        "noise_meta": y.noise,
    });
    m.write(&a.out.join("manifest.json"))?;
    println!("measurement {}x{} from a {h}x{w}x{c} scene, step {}", y.height(), y.width(), a.step);
    Ok(())
}

pub fn reconstruct(a: &ReconstructArgs) -> CmdResult {
    let y = load_measurement(&a.measurement)?;
    let mask = load_mask(&a.mask)?;
    let mut m = RunManifest::new("reconstruct");
    m.input("measurement", &a.measurement).input("mask", &a.mask);
    let (cube, details) = match a.method {
        Method::Rdluf => {
            let ckpt = a.checkpoint.as_ref().ok_or_else(|| Failure::usage("--method rdluf requires --checkpoint"))?;
            m.input("checkpoint", ckpt);
            let model = checkpoint::load(ckpt)?;
            let op = OperatorRep::from_mask(&mask, model.config.bands, model.config.step)?;
            let cube = model.reconstruct(&y, &op)?;
            (cube, json!({ "method": "rdluf", "bands": model.config.bands, "step": model.config.step, "stages": model.config.stages }))
        }
        Method::Gaptv | Method::Pgdtv => {
            let bands = y.implied_bands(mask.width(), a.step)?;
            let op = OperatorRep::from_mask(&mask, bands, a.step)?;
            let cfg = SolverConfig { iterations: a.iterations, tv_weight: a.tv_weight, ..SolverConfig::default() };
            let (name, res) = if a.method == Method::Gaptv { ("gaptv", gap_tv_solve(&y, &op, &cfg)?) } else { ("pgdtv", pgd_tv_solve(&y, &op, &cfg)?) };
            let details = json!({
                "method": name,
                "bands": bands,
                "step": a.step,
                "iterations": a.iterations,
                "tv_weight": a.tv_weight,
                "final_fidelity": res.fidelity.last(),
            });
            (res.cube, details)
        }
    };
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    save_cube(&cube, &a.out)?;
    m.output(&a.out);
    m.details = details;
    m.write(&beside(&a.out))?;
    let (h, w, c) = cube.dims();
    println!("wrote {h}x{w}x{c} cube to {}", a.out.display());
    Ok(())
}

fn scene_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| path.display().to_string())
}

pub fn eval(a: &EvalArgs) -> CmdResult {
    if a.pred.len() != a.truth.len() {
        return Err(Failure::usage(format!("{} predictions but {} ground truths", a.pred.len(), a.truth.len())));
    }
    let roi = parse_roi(a.roi.as_deref())?;
    let cubes: Vec<(String, HsiCube, HsiCube)> =
        a.pred.iter().zip(&a.truth).map(|(p, t)| Ok((scene_name(p), load_cube(p)?, load_cube(t)?))).collect::<Result<_, cassi_core::Error>>()?;
    let pairs: Vec<(String, &HsiCube, &HsiCube)> = cubes.iter().map(|(n, p, t)| (n.clone(), p, t)).collect();
    let report = EvalReport::evaluate(&pairs, roi.as_ref())?;
    let text = report.render();
    print!("{text}");
    let out = a.out.clone().unwrap_or_else(|| a.pred[0].with_file_name("eval_report.txt"));
    fs::write(&out, &text)?;
    let mut m = RunManifest::new("eval");
    for (i, (p, t)) in a.pred.iter().zip(&a.truth).enumerate() {
        m.input(&format!("pred{i}"), p).input(&format!("truth{i}"), t);
    }
    m.output(&out);
    m.details = serde_json::to_value(&report).expect("report serializes");
    m.write(&beside(&out))?;
    Ok(())
}

pub fn plot(a: &PlotArgs) -> CmdResult {
    if a.bands == 0 {
        return Err(Failure::usage("--bands must be positive"));
    }
    if a.cube.is_none() && a.pred.is_none() && !a.residual_viz {
        return Err(Failure::usage("nothing to plot: give --cube, --pred/--truth or --residual-viz"));
    }
    fs::create_dir_all(&a.out_dir)?;
    let mut m = RunManifest::new("plot");
    let mut details = serde_json::Map::new();

    if let Some(path) = &a.cube {
        let cube = load_cube(path)?;
        let out = a.out_dir.join("bands.png");
        plot::band_grid(&cube, a.bands)?.save(&out).map_err(image_err)?;
        m.input("cube", path).output(&out);
    }
    if let (Some(pp), Some(tp)) = (&a.pred, &a.truth) {
        let (pred, truth) = (load_cube(pp)?, load_cube(tp)?);
        if pred.dims() != truth.dims() {
            return Err(cassi_core::Error::Shape(format!("pred {:?} vs truth {:?}", pred.dims(), truth.dims())).into());
        }
        for (cube, name) in [(&pred, "pred_bands.png"), (&truth, "truth_bands.png")] {
            let out = a.out_dir.join(name);
            plot::band_grid(cube, a.bands)?.save(&out).map_err(image_err)?;
            m.output(&out);
        }
        let roi = match parse_roi(a.roi.as_deref())? {
            Some(r) => r,
            None => Roi { top: 0, left: 0, height: truth.height(), width: truth.width() },
        };
        let r = spectral_correlation(&pred, &truth, &roi)?;
        let out = a.out_dir.join("spectra.png");
        plot::spectra(&roi_spectrum(&pred, &roi)?, &roi_spectrum(&truth, &roi)?, r).save(&out).map_err(image_err)?;
        m.input("pred", pp).input("truth", tp).output(&out);
        details.insert("correlation".into(), json!(r));
        details.insert("roi".into(), json!(roi));
    }
    if a.residual_viz {
        let (cp, yp, mp) = (a.checkpoint.as_ref().unwrap(), a.measurement.as_ref().unwrap(), a.mask.as_ref().unwrap());
        let model = checkpoint::load(cp)?;
        let y = load_measurement(yp)?;
        let op = OperatorRep::from_mask(&load_mask(mp)?, model.config.bands, model.config.step)?;
        if a.viz_band >= model.config.bands {
            return Err(Failure::usage(format!("--viz-band {} outside 0..{}", a.viz_band, model.config.bands)));
        }
        let corrected = model.corrected_operators(&y, &op)?;
        let out = a.out_dir.join("residual.png");
        plot::operator_panels(&op, &corrected, a.viz_band).save(&out).map_err(image_err)?;
        m.input("checkpoint", cp).input("measurement", yp).input("mask", mp).output(&out);
        details.insert("viz_band".into(), json!(a.viz_band));
    }
    details.insert("bands".into(), json!(a.bands));
    m.details = serde_json::Value::Object(details);
    m.write(&a.out_dir.join("manifest.json"))?;
    for o in &m.outputs {
        println!("wrote {o}");
    }
    Ok(())
}

fn image_err(e: image::ImageError) -> Failure {
    Failure { kind: "io", message: format!("writing image: {e}") }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    #[serde(default)]
    model: ModelConfig,
    #[serde(default)]
    train: TrainConfig,
    data: DataConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DataConfig {
    /// Scene files, relative to the config file.
    #[serde(default)]
    scenes: Vec<PathBuf>,
    synthetic: Option<SyntheticScenes>,
    /// Mask file; a random mask of `mask_size` is drawn when absent.
    mask: Option<PathBuf>,
    #[serde(default)]
    mask_kind: MaskKind,
    #[serde(default)]
    mask_seed: u64,
    mask_size: Option<[usize; 2]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticScenes {
    count: usize,
    height: usize,
    width: usize,
    #[serde(default)]
    seed: u64,
}

fn config_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    cassi_core::Error::Config(format!("{}: {e}", path.display())).into()
}

fn load_train_file(path: &Path) -> Result<TrainFile, Failure> {
    let text = fs::read_to_string(path)?;
    let file: TrainFile = toml::from_str(&text).map_err(|e| config_err(path, e))?;
    file.model.validate()?;
    file.train.validate()?;
    Ok(file)
}

fn load_data(data: &DataConfig, bands: usize, base: &Path) -> Result<TrainData, Failure> {
    let mut scenes = Vec::new();
    for p in &data.scenes {
        scenes.push(load_cube(base.join(p))?);
    }
    if let Some(s) = &data.synthetic {
        for i in 0..s.count {
            scenes.push(generate_synthetic_scene(s.height, s.width, bands, s.seed.wrapping_add(i as u64))?);
        }
    }
    if scenes.is_empty() {
        return Err(cassi_core::Error::Config("[data] lists no scenes".into()).into());
    }
    let mask = match &data.mask {
        Some(p) => load_mask(base.join(p))?,
        None => {
            let [h, w] = data.mask_size.unwrap_or([scenes[0].height(), scenes[0].width()]);
            CodedMask::random(h, w, data.mask_kind, data.mask_seed)
        }
    };
    Ok(TrainData { scenes, mask })
}

pub fn train(a: &TrainArgs) -> CmdResult {
    let file = load_train_file(&a.config)?;
    let mut cfg = file.train.clone();
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let base = a.config.parent().unwrap_or(Path::new("."));
    let data = load_data(&file.data, file.model.bands, base)?;
    let mut model = ModelState::new(&file.model)?;

    fs::create_dir_all(&a.out)?;
    let log_path = a.out.join("train_log.csv");
    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    writeln!(log, "step,lr,loss")?;
    let mut io_error: Option<std::io::Error> = None;
    let mut on_step = |s: &StepLog| {
        let line = s.line();
        println!("{line}");
        if let Err(e) = writeln!(log, "{line}") {
            io_error.get_or_insert(e);
        }
    };
    let result = training::train(&mut model, &data, &cfg, TrainOptions { checkpoint_dir: Some(a.out.clone()), on_step: Some(&mut on_step) });
    log.flush()?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    let outcome = result?;

    let mut m = RunManifest::new("train");
    m.config = Some(a.config.display().to_string());
    m.seed = Some(cfg.seed);
    m.output(&log_path);
    for c in &outcome.checkpoints {
        m.output(c);
    }
    m.output(&a.out.join("last.rdlc"));
    m.details = json!({
        "steps": outcome.log.len(),
        "final_loss": outcome.log.last().map(|l| l.loss),
        "parameters": model.store.num_scalars(),
        "scenes": data.scenes.len(),
    });
    m.write(&a.out.join("manifest.json"))?;
    Ok(())
}

pub fn census(a: &CensusArgs) -> CmdResult {
    let model = match (&a.config, &a.checkpoint) {
        (_, Some(ckpt)) => checkpoint::load(ckpt)?,
        (Some(path), None) => {
            let text = fs::read_to_string(path)?;
            let table: toml::Table = toml::from_str(&text).map_err(|e| config_err(path, e))?;
            let cfg = match table.get("model") {
                Some(model) => model.clone().try_into::<ModelConfig>().map_err(|e| config_err(path, e))?,
                None => ModelConfig::from_toml(&text)?,
            };
            cfg.validate()?;
            ModelState::new(&cfg)?
        }
        (None, None) => return Err(Failure::usage("give --config or --checkpoint")),
    };
    println!("stage,group,params");
    for s in model.census() {
        println!("{},{},{}", s.stage, s.group, s.params);
    }
    println!("component,params");
    for (name, n) in model.component_census() {
        println!("{name},{n}");
    }
    println!("total,{}", model.store.num_scalars());
    Ok(())
}

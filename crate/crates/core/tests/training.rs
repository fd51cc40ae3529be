mod support;

use cassi_core::hsi::{generate_synthetic_scene, CodedMask, MaskKind};
use cassi_core::training::{lr_schedule, train, TrainConfig, TrainData, TrainOptions};
use cassi_core::unfolding::ModelState;
use cassi_core::Error;
use proptest::prelude::*;
use support::*;

fn tiny_data(seed: u64) -> TrainData {
    TrainData {
        scenes: vec![generate_synthetic_scene(12, 12, 3, seed).unwrap(), generate_synthetic_scene(12, 12, 3, seed + 1).unwrap()],
        mask: CodedMask::random(12, 12, MaskKind::Binary, seed),
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig { epochs: 2, steps_per_epoch: 3, peak_lr: 1e-3, warmup_steps: 2, patch_size: 8, batch_size: 2, noise_bits: Some(11), ..Default::default() }
}

#[test]
fn same_seed_gives_identical_runs() {
    let data = tiny_data(0);
    let cfg = tiny_config();
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let mut model = ModelState::new(&micro_config(3, 2)).unwrap();
        let out = train(&mut model, &data, &cfg, TrainOptions { checkpoint_dir: Some(dir.path().to_path_buf()), on_step: None }).unwrap();
        assert_eq!(out.log.len(), 6);
        assert_eq!(out.checkpoints.len(), 2);
        assert!(dir.path().join("last.rdlc").exists());
        let bytes = std::fs::read(dir.path().join("last.rdlc")).unwrap();
        let losses: Vec<u64> = out.log.iter().map(|l| l.loss.to_bits()).collect();
        runs.push((losses, bytes));
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn shared_stages_stay_identical_after_training() {
    let data = tiny_data(3);
    let cfg = TrainConfig { epochs: 1, steps_per_epoch: 10, peak_lr: 1e-2, warmup_steps: 0, patch_size: 8, ..Default::default() };
    let mut model = ModelState::new(&micro_config(3, 9)).unwrap();
    let before = model.store.clone();
    train(&mut model, &data, &cfg, TrainOptions::default()).unwrap();
    let changed = model.store.iter().filter(|(id, _, t)| before.value(*id) != *t).count();
    assert!(changed > 0);
    let shared = model.stage_params(1);
    for k in 2..8 {
        let other = model.stage_params(k);
        assert_eq!(shared.len(), other.len());
        for ((na, ia), (nb, ib)) in shared.iter().zip(&other) {
            assert_eq!(na, nb);
            let (ta, tb) = (model.store.value(*ia), model.store.value(*ib));
            assert!(ta.data().iter().zip(tb.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "stage {k} {na}");
        }
    }
}

#[test]
fn non_finite_parameters_abort_with_a_numeric_error() {
    let data = tiny_data(5);
    let cfg = TrainConfig { epochs: 1, steps_per_epoch: 2, patch_size: 8, ..Default::default() };
    let mut model = ModelState::new(&micro_config(3, 2)).unwrap();
    let rho = model.group_of(0).rho;
    model.store.value_mut(rho).data_mut()[0] = f64::NAN;
    match train(&mut model, &data, &cfg, TrainOptions::default()) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("non-finite parameters: stage1.rho"), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

proptest! {
    #[test]
    fn schedule_stays_in_range_and_joins_smoothly(total in 2usize..5000, frac in 0.0f64..1.0, peak in 1e-6f64..1.0, step_frac in 0.0f64..1.0) {
        let warmup = ((total as f64) * frac) as usize;
        let step = ((total as f64) * step_frac) as usize;
        let lr = lr_schedule(step, total, warmup, peak);
        prop_assert!((0.0..=peak * (1.0 + 1e-12)).contains(&lr));
        if warmup > 0 && warmup < total {
            prop_assert!((lr_schedule(warmup, total, warmup, peak) - peak).abs() < 1e-12 * peak);
        }
        prop_assert!(lr_schedule(total, total, warmup, peak).abs() < 1e-12 * peak);
    }
}

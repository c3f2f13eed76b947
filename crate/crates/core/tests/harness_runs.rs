use moon::backbone::EncoderConfig;
use moon::datamodel::{Grade, Organ, Task};
use moon::gradcam::gradcam_map;
use moon::harness::{
    case_inputs, run_crossval, train, AugmentConfig, Checkpoint, Dataset, TrainConfig,
};
use moon::model::{CaseInputs, ModelConfig, PerOrgan};
use moon::synth::SynthConfig;
use moon::MoonError;

fn dims() -> PerOrgan<[usize; 3]> {
    PerOrgan {
        esophagus: [8, 8, 12],
        liver: [16, 16, 6],
        spleen: [16, 16, 4],
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            channels: vec![4, 8, 8, 8],
            heads: 2,
            ..EncoderConfig::default()
        },
        input_dims: dims(),
        ori_grid: [2, 2, 2],
        ..ModelConfig::default()
    }
}

fn tiny_data(per_grade: usize, seed: u64) -> Dataset {
    Dataset::from_synth(&SynthConfig {
        seed,
        counts: [per_grade; 3],
        dims: dims(),
        ..SynthConfig::default()
    })
    .unwrap()
}

fn quick(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: 1e-3,
        ..TrainConfig::default()
    }
}

fn all(data: &Dataset) -> Vec<usize> {
    (0..data.len()).collect()
}

#[test]
fn learning_rate_halves_every_twenty_epochs() {
    let tc = TrainConfig::default();
    assert_eq!(tc.lr_at(1), 1e-5);
    assert_eq!(tc.lr_at(20), 1e-5);
    assert_eq!(tc.lr_at(21), 0.5e-5);
    assert_eq!(tc.lr_at(41), 0.25e-5);
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let data = tiny_data(4, 1);
    let a = train(&tiny_model(), &quick(2), &data, &all(&data), &[], None).unwrap();
    let b = train(&tiny_model(), &quick(2), &data, &all(&data), &[], None).unwrap();
    let bytes = |m| Checkpoint::from_model(m, None, 2).to_bytes().unwrap();
    assert_eq!(bytes(&a.model), bytes(&b.model));
    assert_eq!(a.log, b.log);
    let tc = TrainConfig { seed: 9, ..quick(2) };
    let c = train(&tiny_model(), &tc, &data, &all(&data), &[], None).unwrap();
    assert_ne!(bytes(&a.model), bytes(&c.model));
}

#[test]
fn zero_cca_weight_matches_disabled_cca() {
    let data = tiny_data(4, 2);
    let mut with = quick(3);
    with.loss.lambda = 1.0;
    let without = TrainConfig { use_cca: false, ..with.clone() };
    let a = train(&tiny_model(), &with, &data, &all(&data), &[], None).unwrap();
    let b = train(&tiny_model(), &without, &data, &all(&data), &[], None).unwrap();
    let losses = |o: &moon::harness::TrainOutcome| o.log.iter().map(|r| r.train_loss).collect::<Vec<_>>();
    assert_eq!(losses(&a), losses(&b));
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let data = tiny_data(3, 3);
    let dir = tempfile::tempdir().unwrap();
    let out = train(&tiny_model(), &quick(2), &data, &all(&data), &all(&data), Some(dir.path())).unwrap();
    for name in ["final.ckpt", "best.ckpt", "train_log.jsonl"] {
        assert!(dir.path().join(name).is_file(), "{name}");
    }
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in ["epoch", "lr", "train_loss", "val_acc_geG2", "val_auc_geG2", "val_acc_G3", "val_auc_G3"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let inputs = case_inputs(&data, &all(&data));
    let refs: Vec<&CaseInputs> = inputs.iter().collect();
    let before = out.model.predict(&refs).unwrap();
    let loaded = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(loaded.epoch, 2);
    assert_eq!(loaded.train.as_ref().unwrap().epochs, 2);
    let after = loaded.to_model().unwrap().predict(&refs).unwrap();
    for (x, y) in before.iter().zip(&after) {
        assert_eq!(x[0].to_bits(), y[0].to_bits());
        assert_eq!(x[1].to_bits(), y[1].to_bits());
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let model = moon::model::MoonModel::new(&tiny_model()).unwrap();
    let bytes = Checkpoint::from_model(&model, None, 0).to_bytes().unwrap();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(MoonError::Format { .. })));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(MoonError::Format { offset: 0, .. })));
    let mut other = Checkpoint::from_bytes(&bytes).unwrap();
    other.model.encoder.channels = vec![4, 8, 8, 16];
    assert!(other.to_model().is_err());
}

#[test]
fn divergent_training_aborts_with_the_batch() {
    let data = tiny_data(3, 4);
    let tc = TrainConfig {
        lr: 1e300,
        clip_norm: 1e300,
        augment: AugmentConfig::identity(),
        ..quick(3)
    };
    match train(&tiny_model(), &tc, &data, &all(&data), &[], None) {
        Err(MoonError::NonFiniteLoss { cases, .. }) => assert!(!cases.is_empty()),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training should have diverged"),
    }
}

#[test]
fn two_fold_crossval_is_deterministic() {
    let data = tiny_data(4, 5);
    let a = run_crossval(&tiny_model(), &quick(1), &data, 2, 7, None).unwrap();
    assert_eq!(a.folds.len(), 2);
    assert_eq!(a.split.folds.iter().map(Vec::len).sum::<usize>(), 12);
    let b = run_crossval(&tiny_model(), &quick(1), &data, 2, 7, None).unwrap();
    assert_eq!(
        serde_json::to_string(&a.aggregate).unwrap(),
        serde_json::to_string(&b.aggregate).unwrap()
    );
}

#[test]
fn heat_volumes_align_with_the_roi() {
    let data = tiny_data(2, 6);
    let out = train(&tiny_model(), &quick(1), &data, &all(&data), &[], None).unwrap();
    let case = data.cases.iter().find(|c| c.grade == Grade::G3).unwrap();
    for organ in Organ::ALL {
        for task in [Task::AtLeastG2, Task::G3] {
            let heat = gradcam_map(&out.model, &case.inputs(), organ, task).unwrap();
            assert_eq!(heat.volume.dims(), *dims().get(organ));
            assert_eq!(heat.logit_index, task.threshold());
            let max = heat.volume.data().iter().cloned().fold(0.0f32, f32::max);
            assert!(heat.volume.data().iter().all(|&h| (0.0..=1.0).contains(&h)));
            assert!(max == 0.0 || max == 1.0);
        }
    }
}

#[test]
fn gradcam_rejects_non_finite_weights() {
    let data = tiny_data(1, 7);
    let mut model = moon::model::MoonModel::new(&tiny_model()).unwrap();
    model.params_mut().values_mut()[0].data_mut()[0] = f64::NAN;
    let err = gradcam_map(&model, &data.cases[0].inputs(), Organ::Esophagus, Task::G3).unwrap_err();
    assert!(matches!(err, MoonError::Contract(_)));
}

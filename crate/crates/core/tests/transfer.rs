mod support;

use evidx_core::domain::Diagnosis;
use evidx_core::labeler::LabelerConfig;
use evidx_core::transfer::{
    evidence_labels, train, InputMode, Strategy, TrainConfig, TrainingData,
};
use support::fixtures;

fn small_data() -> TrainingData {
    let (cases, atlas) = fixtures::phantom_cases(40, 12, 32, 5);
    let split = evidx_core::domain::split_dataset(&cases, 0).unwrap();
    let (_, labels) = evidence_labels(&cases, &atlas, &split, LabelerConfig::default()).unwrap();
    TrainingData::with_split(&cases, &atlas, Some(&labels), split, InputMode::Masked).unwrap()
}

fn cfg(strategy: Strategy) -> TrainConfig {
    TrainConfig {
        strategy,
        epochs: 2,
        learning_rate: 1e-3,
        seed: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn eat_without_severity_weight_is_the_baseline() {
    let data = small_data();
    let base = train(&data, &cfg(Strategy::BaselineRandom)).unwrap();
    let eat = train(
        &data,
        &TrainConfig {
            lambda_mc: 0.0,
            ..cfg(Strategy::Eat)
        },
    )
    .unwrap();
    assert!(!base.manifest.steps.is_empty());
    assert_eq!(
        base.manifest.loss_trajectory(),
        eat.manifest.loss_trajectory()
    );
    assert_eq!(
        base.manifest.metrics.test,
        eat.manifest.metrics.test.map(|mut t| {
            t.strategy = Some("random".into());
            t
        })
    );
}

#[test]
fn eap_without_pretraining_is_the_baseline() {
    let data = small_data();
    let base = train(&data, &cfg(Strategy::BaselineRandom)).unwrap();
    let eap = train(
        &data,
        &TrainConfig {
            pretrain_epochs: Some(0),
            ..cfg(Strategy::Eap)
        },
    )
    .unwrap();
    let detect: Vec<f64> = eap
        .manifest
        .steps
        .iter()
        .filter(|s| s.phase == "detect")
        .map(|s| s.loss)
        .collect();
    assert_eq!(base.manifest.loss_trajectory(), detect);
    assert_eq!(base.params.encoder(), eap.params.encoder());
}

#[test]
fn training_is_deterministic() {
    let data = small_data();
    for s in [Strategy::Eat, Strategy::Eai] {
        let a = train(&data, &cfg(s)).unwrap();
        let b = train(&data, &cfg(s)).unwrap();
        assert_eq!(a.params.values, b.params.values);
        assert_eq!(a.manifest.metrics, b.manifest.metrics);
        assert_eq!(a.manifest.loss_trajectory(), b.manifest.loss_trajectory());
    }
}

#[test]
fn eai_zeroed_aux_skips_severity_stage() {
    let data = small_data();
    let run = train(
        &data,
        &TrainConfig {
            zero_aux: true,
            ..cfg(Strategy::Eai)
        },
    )
    .unwrap();
    assert!(run.manifest.steps.iter().all(|s| s.phase == "detect"));
    assert_eq!(run.manifest.n_mc_pool, 0);
}

#[test]
fn eai_frozen_aux_keeps_severity_encoder() {
    let data = small_data();
    let run = train(
        &data,
        &TrainConfig {
            freeze_aux: true,
            pretrain_epochs: Some(1),
            ..cfg(Strategy::Eai)
        },
    )
    .unwrap();
    let (mc, _, _) = evidx_core::transfer::train_mc_model(
        &data,
        &TrainConfig {
            pretrain_epochs: Some(1),
            ..cfg(Strategy::Eai)
        },
    )
    .unwrap();
    assert_eq!(run.params.aux_encoder().unwrap(), mc.encoder());
}

#[test]
fn nested_training_subsets() {
    let data = small_data();
    let quarter = data.train_subset(0.25).unwrap();
    let half = data.train_subset(0.5).unwrap();
    let full = data.train_subset(1.0).unwrap();
    assert!(quarter.iter().all(|id| half.contains(id)));
    assert!(half.iter().all(|id| full.contains(id)));
    assert_eq!(full.len(), data.split.train.len());
    let ad = |ids: &[String]| {
        ids.iter()
            .filter(|id| data.example(id).unwrap().diagnosis == Diagnosis::AD)
            .count()
    };
    assert!(ad(&quarter) > 0 && ad(&quarter) < quarter.len());
}

#[test]
fn invalid_config_names_fields() {
    let data = small_data();
    let err = train(
        &data,
        &TrainConfig {
            lambda_mc: -1.0,
            data_fraction: 0.0,
            ..cfg(Strategy::Eat)
        },
    )
    .unwrap_err()
    .to_string();
    assert!(err.contains("lambda_mc") && err.contains("data_fraction"));
}

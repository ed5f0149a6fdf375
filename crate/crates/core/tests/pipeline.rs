use proptest::prelude::*;
use ssp_core::io;
use ssp_core::losses::LossWeights;
use ssp_core::pipeline::{evaluate, infer_sequence, predictions, teacher_targets, train_model, Sequence, TrainOptions};
use ssp_core::propagation::{SimilarityMode, StepOptions};
use ssp_core::surrogate::HeadFit;
use ssp_core::synth::{generate_sequence, SceneConfig};
use ssp_core::train::{TrainConfig, TrainMode};
use ssp_core::LabelMap;

fn scene(seed: u64) -> Sequence {
    let cfg = SceneConfig { height: 32, width: 32, frames: 8, annotation_interval: 3, sprite_size: 6.0, seed, ..Default::default() };
    Sequence::from_synthetic(&format!("v{}", seed), &generate_sequence(&cfg).unwrap())
}

fn quick(mode: TrainMode) -> TrainOptions {
    TrainOptions {
        config: TrainConfig { epochs: 2, mode, ..Default::default() },
        weights: LossWeights { lambda_kd: 2.5, ..Default::default() },
        head_fit: HeadFit { iterations: 40, ..Default::default() },
        ..Default::default()
    }
}

#[test]
fn disk_and_memory_pipelines_agree() {
    let seqs = vec![scene(1), scene(2)];
    let dir = tempfile::tempdir().unwrap();
    for s in &seqs {
        io::save_sequence(&dir.path().join(&s.name), s).unwrap();
    }
    let loaded = io::load_dataset(dir.path()).unwrap();
    assert_eq!(loaded.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["v1", "v2"]);
    let model = train_model(&seqs, &quick(TrainMode::Base), None).unwrap().model;
    let model_disk = train_model(&loaded, &quick(TrainMode::Base), None).unwrap().model;
    assert_eq!(model, model_disk);
    for (a, b) in seqs.iter().zip(&loaded) {
        assert_eq!(infer_sequence(a, &model, StepOptions::default()).unwrap(), infer_sequence(b, &model, StepOptions::default()).unwrap());
    }
}

#[test]
fn distillation_from_persisted_teachers() {
    let seqs = vec![scene(3), scene(4)];
    let dir = tempfile::tempdir().unwrap();
    let mut teachers = Vec::new();
    for s in &seqs {
        let t = teacher_targets(s, 4.0, 0.05, 17).unwrap();
        io::write_teachers(dir.path(), &s.name, &t).unwrap();
        let back = io::read_teachers(dir.path(), s).unwrap();
        assert_eq!(back, t);
        teachers.push(back);
    }
    let out = train_model(&seqs, &quick(TrainMode::Distillation), Some(&teachers)).unwrap();
    assert_eq!(out.steps, 2 * 2 * 7);
    assert!(out.epoch_losses.iter().all(|l| l.is_finite()));
}

#[test]
fn training_variants_run() {
    let seqs = vec![scene(5)];
    let mut one_step = quick(TrainMode::Base);
    one_step.config.one_step = true;
    let trained = train_model(&seqs, &one_step, None).unwrap();
    // the head starts from zero and must have moved
    assert!(trained.model.head.flat_params().iter().any(|&p| p != 0.0));

    let cosine = TrainOptions { similarity: SimilarityMode::Cosine, ..quick(TrainMode::Base) };
    let c = train_model(&seqs, &cosine, None).unwrap();
    assert_eq!(c.steps, 0);
    let preds = predictions(&infer_sequence(&seqs[0], &c.model, StepOptions::default()).unwrap()).unwrap();
    assert_eq!(preds.len(), 8);
}

#[test]
fn flow_fallback_tracks_true_homographies() {
    let cfg = SceneConfig { height: 32, width: 32, frames: 8, sprites: 0, seed: 6, ..Default::default() };
    let seq = Sequence::from_synthetic("cam", &generate_sequence(&cfg).unwrap());
    let model = train_model(std::slice::from_ref(&seq), &quick(TrainMode::Base), None).unwrap().model;
    let mut fallback = seq.clone();
    fallback.homographies = None;
    let a = predictions(&infer_sequence(&seq, &model, StepOptions::default()).unwrap()).unwrap();
    let b = predictions(&infer_sequence(&fallback, &model, StepOptions::default()).unwrap()).unwrap();
    let same: usize = a.iter().zip(&b).map(|(x, y)| x.data().iter().zip(y.data()).filter(|(p, q)| p == q).count()).sum();
    assert!(same as f64 / (8.0 * 32.0 * 32.0) > 0.99);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn reported_metrics_lie_in_unit_interval(seed in 0u64..1000, flips in proptest::collection::vec((0usize..8, 0usize..1024, 0u8..4), 0..200)) {
        let seq = scene(seed % 4);
        let mut preds: Vec<LabelMap> = seq.dense_labels.clone().unwrap();
        for (k, i, c) in flips {
            preds[k].data_mut()[i] = c;
        }
        let r = evaluate(std::slice::from_ref(&seq), &[preds]).unwrap();
        let (m, t) = (r.miou.unwrap(), r.tc.unwrap());
        prop_assert!((0.0..=1.0).contains(&m) && (0.0..=1.0).contains(&t));
    }
}

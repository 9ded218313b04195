use std::fs;

use edmae::config::TrainConfig;
use edmae::data::{render, Dataset, SynthSpec};
use edmae::graph::Graph;
use edmae::masking::sample_mask;
use edmae::model::EdmaeModel;
use edmae::tensor::Tensor;
use edmae::train::{self, Control};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn only_teacher_and_decoder_receive_gradients() {
    let model = EdmaeModel::new(Default::default(), 4).unwrap();
    let image = Tensor::from_fn(&[2, 1, 32, 32], |i| ((i * 37) % 101) as f32 / 101.0);
    let specs = [sample_mask(4, 4, 8, 0.75, 1).unwrap(), sample_mask(4, 4, 8, 0.75, 2).unwrap()];
    let mut g = Graph::<f32>::new();
    let bound = model.bind(&mut g).unwrap();
    let v = model.pretrain_graph(&mut g, &bound, &image, &specs).unwrap();
    g.backward(v.total_loss).unwrap();
    assert!(bound.student.iter().all(|s| g.grad(*s).is_none()));
    assert!(bound.teacher.iter().chain(&bound.decoder).all(|p| g.grad(*p).is_some()));
}

fn nearest_centroid_accuracy(spec: &SynthSpec) -> f64 {
    let k = spec.classes;
    let samples: Vec<_> = (0..400).map(|i| render(spec, "centroid", i).unwrap()).collect();
    let (fit, eval) = samples.split_at(200);
    let px = spec.size * spec.size;
    let mut centroids = vec![vec![0.0f64; px]; k];
    let mut counts = vec![0usize; k];
    for s in fit {
        counts[s.label] += 1;
        for (c, v) in centroids[s.label].iter_mut().zip(s.image.data()) {
            *c += *v as f64;
        }
    }
    for (c, n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= *n as f64);
    }
    let correct = eval
        .iter()
        .filter(|s| {
            let dist = |c: &[f64]| c.iter().zip(s.image.data()).map(|(a, b)| (a - *b as f64).powi(2)).sum::<f64>();
            let best = (0..k).min_by(|a, b| dist(&centroids[*a]).total_cmp(&dist(&centroids[*b]))).unwrap();
            best == s.label
        })
        .count();
    correct as f64 / eval.len() as f64
}

#[test]
fn noise_free_templates_are_separable() {
    let spec = SynthSpec {
        noise: 0.0,
        ..SynthSpec::default()
    };
    assert_eq!(nearest_centroid_accuracy(&spec), 1.0);
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn shuffled_labels_leave_test_accuracy_at_chance() {
    let cfg = quick_config(11);
    let spec = cfg.synth_spec();
    let mut train = Dataset::synthesize(&spec, "null_train", 160).unwrap();
    let test = Dataset::synthesize(&spec, "null_test", 200).unwrap();
    train
        .labels
        .as_mut()
        .unwrap()
        .shuffle(&mut ChaCha8Rng::seed_from_u64(331));
    let acc = train::finetune_classify(&cfg, None, &train, &test, Control::default())
        .unwrap()
        .report
        .overall_accuracy;
    assert!((acc - 0.25).abs() <= 0.10, "{acc}");
}

/// Bright-versus-dark blobs: separable by mean intensity alone.
fn toy_two_class(n: usize, seed: u64) -> Dataset {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut data = Vec::with_capacity(n * 32 * 32);
    for &l in &labels {
        let level = if l == 1 { 0.8 } else { 0.2 };
        data.extend((0..32 * 32).map(|_| level + r.gen_range(-0.1f32..0.1)));
    }
    Dataset {
        images: Tensor::new(vec![n, 1, 32, 32], data).unwrap(),
        labels: Some(labels),
        masks: None,
    }
}

#[test]
fn head_only_probe_on_random_encoder() {
    let cfg = TrainConfig {
        classes: 2,
        freeze_encoder: true,
        lr: 1e-2,
        epochs: 10,
        ..quick_config(330)
    };
    let o = train::finetune_classify(&cfg, None, &toy_two_class(64, 1), &toy_two_class(100, 2), Control::default())
        .unwrap();
    assert!(o.report.overall_accuracy > 0.9, "{}", o.report.overall_accuracy);
}

#[test]
fn class_count_mismatch_is_a_config_error() {
    let cfg = TrainConfig {
        classes: 3,
        epochs: 1,
        ..TrainConfig::default()
    };
    let d = Dataset::synthesize(&SynthSpec::default(), "mismatch", 8).unwrap();
    let err = train::finetune_classify(&cfg, None, &d, &d, Control::default()).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn loading_a_checkpoint_leaves_it_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let images = Dataset::synthesize(&cfg.synth_spec(), "pre", 8).unwrap().images;
    let pre = train::pretrain(&cfg, &images, Control::default()).unwrap();
    let path = dir.path().join("p.edmk");
    pre.checkpoint.save(&path).unwrap();
    let before = fs::read(&path).unwrap();

    let ck = edmae::checkpoint::Checkpoint::load(&path).unwrap();
    let (_, enc) = train::encoder_from_checkpoint(&ck).unwrap();
    let d = Dataset::synthesize(&cfg.synth_spec(), "cls", 8).unwrap();
    train::finetune_classify(&cfg, Some(&enc), &d, &d, Control::default()).unwrap();
    assert_eq!(fs::read(&path).unwrap(), before);
}

#[test]
fn stop_flag_interrupts_with_a_checkpoint() {
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let images = Dataset::synthesize(&cfg.synth_spec(), "stop", 4).unwrap().images;
    let stop = std::sync::atomic::AtomicBool::new(true);
    let o = train::pretrain(
        &cfg,
        &images,
        Control {
            stop: Some(&stop),
            on_epoch: None,
        },
    )
    .unwrap();
    assert!(o.interrupted);
    assert!(o.curve.is_empty());
    assert_eq!(o.checkpoint.meta.step, 0);
}

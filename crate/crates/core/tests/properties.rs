use edmae::checkpoint::Checkpoint;
use edmae::config::TrainConfig;
use edmae::io::{decode_t32, encode_t32};
use edmae::masking::{apply_mask, masked_count, masked_pixel_selector, sample_mask};
use edmae::model::{EdmaeConfig, EdmaeModel};
use edmae::optim::{focal_loss, plateau_step, replay, AdamW, AdamWConfig, FocalParams, PlateauConfig, PlateauState};
use edmae::tensor::Tensor;
use proptest::prelude::*;

fn small_model_config() -> EdmaeConfig {
    let mut c = EdmaeConfig::default();
    c.encoder.stem_channels = 4;
    c.encoder.growth = 2;
    c.encoder.blocks = vec![1, 1];
    c.decoder_hidden = 4;
    c
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mask_partitions_image(gh in 1usize..6, gw in 1usize..6, patch in 1usize..5, ratio in 0.0f64..=1.0, seed: u64) {
        let spec = sample_mask(gh, gw, patch, ratio, seed).unwrap();
        prop_assert_eq!(spec.masked_cells(), masked_count(gh * gw, ratio));
        let (h, w) = (gh * patch, gw * patch);
        let img = Tensor::from_fn(&[1, 1, h, w], |i| 1.0 + i as f32);
        let (vis, hid) = apply_mask(&img, &spec).unwrap();
        let sel = masked_pixel_selector(&spec);
        for i in 0..h * w {
            prop_assert_eq!(vis.data()[i] + hid.data()[i], img.data()[i]);
            prop_assert_eq!(vis.data()[i] * hid.data()[i], 0.0);
            prop_assert_eq!(hid.data()[i] != 0.0, sel.data[i]);
        }
    }

    #[test]
    fn focal_never_exceeds_weighted_nll(p in 1e-9f64..=1.0, gamma in 0.0f64..6.0, alpha in 0.01f64..=1.0) {
        let fp = FocalParams { gamma, alpha };
        let nll = focal_loss(&[p], FocalParams::NLL);
        prop_assert!(focal_loss(&[p], fp) <= alpha * nll + 1e-15);
    }

    #[test]
    fn zero_gradient_decay_is_exact(w in prop::collection::vec(-10.0f32..10.0, 1..20), lr in 1e-5f64..1e-1, d in 0.0f64..0.5, steps in 1usize..5) {
        let cfg = AdamWConfig { weight_decay: d, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg);
        let mut t = Tensor::new(vec![w.len()], w.clone()).unwrap();
        let zeros = vec![vec![0.0f32; w.len()]];
        let mut expect = w;
        let f = (1.0 - lr * d) as f32;
        for _ in 0..steps {
            opt.step(&mut [&mut t], &zeros, lr).unwrap();
            for e in &mut expect {
                *e *= f;
            }
        }
        prop_assert_eq!(t.data(), &expect[..]);
    }

    #[test]
    fn plateau_replay_is_pure(history in prop::collection::vec(0.0f64..2.0, 0..60), patience in 1usize..6) {
        let cfg = PlateauConfig { patience, ..PlateauConfig::default() };
        let start = PlateauState::new(0.01);
        let a = replay(&cfg, start, &history);
        prop_assert_eq!(&a, &replay(&cfg, start, &history));
        let mut s = start;
        let stepwise: Vec<f64> = history.iter().map(|l| plateau_step(&cfg, &mut s, *l)).collect();
        prop_assert_eq!(a, stepwise);
    }

    #[test]
    fn t32_roundtrip(shape in prop::collection::vec(1usize..5, 1..4), seed: u32) {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape, (0..n).map(|i| (i as f32 + seed as f32).sin()).collect()).unwrap();
        prop_assert_eq!(decode_t32(&encode_t32(&t), "mem").unwrap(), t);
    }

    #[test]
    fn config_set_get_roundtrip(lr in 1e-6f64..1.0, ratio in 0.0f64..=1.0, epochs in 1usize..100) {
        let mut c = TrainConfig::default();
        c.set("lr", &lr.to_string()).unwrap();
        c.set("mask_ratio", &ratio.to_string()).unwrap();
        c.set("epochs", &epochs.to_string()).unwrap();
        prop_assert_eq!(TrainConfig::parse_text(&c.to_string()).unwrap(), c);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    // |p_s − p_t| shrinks by exactly m per step up to f32 rounding.
    #[test]
    fn ema_contracts_geometrically(m in 0.0f64..=1.0, seed in 0u64..1000) {
        let mut cfg = small_model_config();
        cfg.momentum = m;
        let mut model = EdmaeModel::new(cfg.clone(), seed).unwrap();
        let other = EdmaeModel::new(cfg, seed + 1).unwrap();
        model.teacher = other.teacher;
        for _ in 0..3 {
            let before: Vec<f32> = gaps(&model);
            model.ema_update().unwrap();
            for (b, a) in before.iter().zip(gaps(&model)) {
                let expect = m as f32 * b;
                prop_assert!((a - expect).abs() <= 4.0 * f32::EPSILON * (b.abs() + 1.0), "{a} vs {expect}");
            }
        }
    }
}

fn gaps(model: &EdmaeModel) -> Vec<f32> {
    model
        .student
        .tensors()
        .iter()
        .zip(model.teacher.tensors())
        .flat_map(|(s, t)| s.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .collect()
}

#[test]
fn checkpoint_bytes_roundtrip() {
    let model = EdmaeModel::new(small_model_config(), 3).unwrap();
    let ck = edmae::train::pretrain_checkpoint(&model, &TrainConfig::default(), 7);
    let bytes = ck.encode().unwrap();
    let back = Checkpoint::decode(&bytes, "mem").unwrap();
    assert_eq!(back.encode().unwrap(), bytes);
    assert_eq!(edmae::train::model_from_checkpoint(&back).unwrap().teacher, model.teacher);
}

fn mask_strategy() -> impl Strategy<Value = edmae::masking::BinaryMask> {
    prop::collection::vec(any::<bool>(), 64).prop_map(|d| edmae::masking::BinaryMask::new(8, 8, d).unwrap())
}

proptest! {
    #[test]
    fn dice_is_symmetric_pixel_f1(a in mask_strategy(), b in mask_strategy()) {
        use edmae::metrics::{classification_metrics, dice, hausdorff};
        let d = dice(&a, &b).unwrap();
        prop_assert_eq!(d, dice(&b, &a).unwrap());
        let p: Vec<usize> = a.data.iter().map(|&x| x as usize).collect();
        let t: Vec<usize> = b.data.iter().map(|&x| x as usize).collect();
        if a.count() + b.count() > 0 {
            let f1 = classification_metrics(&p, &t, 2).unwrap().per_class[1].f1;
            prop_assert!((d - f1).abs() < 1e-12);
        }
        if a.count() > 0 && b.count() > 0 {
            prop_assert_eq!(hausdorff(&a, &b, 1.0).unwrap(), hausdorff(&b, &a, 1.0).unwrap());
        }
    }

    #[test]
    fn balanced_perfect_recall_mean_is_overall_accuracy(k in 2usize..8, per in 1usize..20) {
        let labels: Vec<usize> = (0..k * per).map(|i| i % k).collect();
        let r = edmae::metrics::classification_metrics(&labels, &labels, k).unwrap();
        prop_assert!((r.mean_recall - r.overall_accuracy).abs() < 1e-12);
    }
}

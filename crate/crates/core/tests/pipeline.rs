use proptest::prelude::*;

use dxnet::autodiff::Mode;
use dxnet::data::{decode_pnm, encode_pnm, synthetic_classification, synthetic_image, ImageSample};
use dxnet::model::{Checkpoint, Model, NetConfig, Task};
use dxnet::rng::stream;
use dxnet::train::{evaluate, ScheduleKind, TrainRunConfig, Trainer};
use dxnet::Tensor;

#[test]
fn trained_model_survives_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dxnt");
    let samples = synthetic_classification(20, 3, 8, &mut stream(1, &[]));
    let cfg = NetConfig {
        task: Task::Classification { num_classes: 3 },
        ..NetConfig::classifier(&[1, 1], 4, true)
    };
    let mut model = Model::<f32>::build(&cfg, 1).unwrap();
    let run = TrainRunConfig {
        epochs: 2,
        batch_size: 5,
        seed: 1,
        ..TrainRunConfig::classification()
    };
    let history = Trainer::new(&mut model, run)
        .unwrap()
        .with_checkpoint(&path)
        .fit(&samples[..15], &samples[15..], |_| {});
    assert_eq!(history.unwrap().records.len(), 2);
    model.set_mode(Mode::Eval);

    let ck = Checkpoint::read(&path).unwrap();
    assert_eq!(
        ck.state_entry("train.epoch").unwrap().as_u64s().unwrap(),
        &[2]
    );
    let mut back: Model<f32> = ck.to_model().unwrap();
    back.set_mode(Mode::Eval);
    assert_eq!(back.params(), model.params());
    assert_eq!(
        evaluate(&back, &samples, 0.0, 0).unwrap(),
        evaluate(&model, &samples, 0.0, 0).unwrap()
    );
}

#[test]
fn denoiser_learns_on_synthetic_patches() {
    let patches: Vec<ImageSample> = (0..16)
        .map(|i| ImageSample::new(synthetic_image(1, 12, 12, &mut stream(2, &[i]))).unwrap())
        .collect();
    let mut model = Model::<f32>::build(&NetConfig::denoiser(&[1, 1], 4, true), 2).unwrap();
    let run = TrainRunConfig {
        epochs: 6,
        batch_size: 4,
        schedule: ScheduleKind::Constant,
        eval_every: 1,
        seed: 2,
        ..TrainRunConfig::denoising()
    };
    let history = dxnet::train::train(&mut model, &patches[..12], &patches[12..], &run).unwrap();
    let first = &history.records[0];
    let last = history.records.last().unwrap();
    assert!(
        last.train_loss < first.train_loss,
        "{} -> {}",
        first.train_loss,
        last.train_loss
    );
    assert!(last.val_metric.is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quantized_images_round_trip(c in prop::sample::select(vec![1usize, 3]), h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let px = Tensor::from_fn(&[c, h, w], |i| ((seed.wrapping_mul(i as u64 + 1) >> 13) % 256) as f32 / 255.0);
        let bytes = encode_pnm(&px).unwrap();
        prop_assert_eq!(decode_pnm(&bytes).unwrap().pixels, px);
    }
}

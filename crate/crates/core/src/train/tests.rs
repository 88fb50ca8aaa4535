use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{Graph, LossKind};
use crate::data::{synthetic_classification, synthetic_image, ImageSample};
use crate::model::{Model, NetConfig};
use crate::tensor::Tensor;
use crate::Error;

fn tiny_classifier() -> Model<f64> {
    Model::build(&NetConfig::classifier(&[1], 2, true), 3).unwrap()
}

fn grads_of(model: &Model<f64>, fill: f64) -> Vec<Tensor<f64>> {
    model
        .params()
        .values()
        .map(|p| Tensor::full(p.value.shape(), fill))
        .collect()
}

fn refs(g: &[Tensor<f64>]) -> Vec<Option<&Tensor<f64>>> {
    g.iter().map(Some).collect()
}

#[test]
fn zero_lr_leaves_parameters_alone() {
    for kind in [
        OptimizerKind::SgdNesterov { momentum: 0.9 },
        OptimizerKind::ADAM,
    ] {
        let mut m = tiny_classifier();
        let before = m.clone();
        let g = grads_of(&m, 0.3);
        let mut opt = Optimizer::new(kind, 0.0, 5e-4);
        for _ in 0..3 {
            opt.step(&mut m, &refs(&g)).unwrap();
        }
        assert_eq!(m, before);
    }
}

#[test]
fn plain_sgd_step() {
    let mut m = tiny_classifier();
    let ones: Vec<Tensor<f64>> = m
        .params()
        .values()
        .map(|p| Tensor::ones(p.value.shape()))
        .collect();
    let names: Vec<String> = m.params().keys().cloned().collect();
    for (n, t) in names.iter().zip(ones) {
        m.set_param(n, t).unwrap();
    }
    let g = grads_of(&m, 0.5);
    let mut opt = Optimizer::new(OptimizerKind::SgdNesterov { momentum: 0.0 }, 0.1, 0.0);
    opt.step(&mut m, &refs(&g)).unwrap();
    for p in m.params().values() {
        assert!(p.value.data().iter().all(|v| (v - 0.95).abs() < 1e-15));
    }
}

#[test]
fn nesterov_matches_scalar_recurrence() {
    let mut m = tiny_classifier();
    let name = m.params().keys().next().unwrap().clone();
    let theta0 = m.param(&name).unwrap().data()[0];
    let (lr, mu, wd) = (0.05, 0.9, 0.01);
    let mut opt = Optimizer::new(OptimizerKind::SgdNesterov { momentum: mu }, lr, wd);
    let decayed = m.params()[&name].kind.is_decayed();
    let (mut th, mut v) = (theta0, 0.0);
    for step in 0..5 {
        let gval = 0.1 * (step as f64 + 1.0);
        let g = grads_of(&m, gval);
        opt.step(&mut m, &refs(&g)).unwrap();
        let gt = if decayed { gval + wd * th } else { gval };
        v = mu * v + gt;
        th -= lr * (gt + mu * v);
        assert!((m.param(&name).unwrap().data()[0] - th).abs() < 1e-12);
    }
}

/// Reference Adam on one scalar, written from the update rule directly.
fn scalar_adam(theta0: f64, lr: f64, steps: usize) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut th, mut m, mut v) = (theta0, 0.0, 0.0);
    for t in 1..=steps {
        let g = th;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t as i32));
        let vh = v / (1.0 - b2.powi(t as i32));
        th -= lr * mh / (vh.sqrt() + eps);
    }
    th
}

#[test]
fn adam_on_a_quadratic_bowl() {
    // half squared norm: the gradient is theta itself
    let lr = 0.1;
    let mut m = tiny_classifier();
    let names: Vec<String> = m.params().keys().cloned().collect();
    for n in &names {
        let shape = m.param(n).unwrap().shape().to_vec();
        m.set_param(n, Tensor::ones(&shape)).unwrap();
    }
    let mut opt = Optimizer::new(OptimizerKind::ADAM, lr, 0.0);
    for _ in 0..100 {
        let g: Vec<Tensor<f64>> = m.params().values().map(|p| p.value.clone()).collect();
        opt.step(&mut m, &refs(&g)).unwrap();
    }
    let expect = scalar_adam(1.0, lr, 100);
    assert!(expect.abs() < 0.1);
    for p in m.params().values() {
        assert!(p
            .value
            .data()
            .iter()
            .all(|v| (v - expect).abs() < 1e-12 && v.abs() < 0.1));
    }
}

#[test]
fn weight_decay_equals_penalized_gradient() {
    // one plain step with decay == one step on L + wd/2 |theta|^2 for decayed tensors
    let wd = 0.03;
    let m0 = tiny_classifier();
    let x = Tensor::<f64>::randn(&[2, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let labels = Tensor::new(&[2], vec![1.0, 4.0]).unwrap();
    let loss_grads = |m: &mut Model<f64>| -> Vec<Tensor<f64>> {
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let xv = g.input(x.clone());
        let out = m.forward(&mut g, &b, xv, None).unwrap();
        let l = g.loss(LossKind::SoftmaxCe, out.output, &labels).unwrap();
        g.backward(l).unwrap();
        b.ordered
            .iter()
            .map(|&v| g.grad(v).unwrap().clone())
            .collect()
    };
    let mut a = m0.clone();
    let ga = loss_grads(&mut a.clone());
    Optimizer::new(OptimizerKind::SgdNesterov { momentum: 0.0 }, 0.1, wd)
        .step(&mut a, &refs(&ga))
        .unwrap();

    let mut b = m0.clone();
    let gb: Vec<Tensor<f64>> = loss_grads(&mut b.clone())
        .into_iter()
        .zip(b.params().values())
        .map(|(g, p)| {
            if p.kind.is_decayed() {
                g.add(&p.value.scale(wd)).unwrap()
            } else {
                g
            }
        })
        .collect();
    Optimizer::new(OptimizerKind::SgdNesterov { momentum: 0.0 }, 0.1, 0.0)
        .step(&mut b, &refs(&gb))
        .unwrap();
    for (pa, pb) in a.params().values().zip(b.params().values()) {
        for (u, v) in pa.value.data().iter().zip(pb.value.data()) {
            assert!((u - v).abs() < 1e-14);
        }
    }
}

#[test]
fn step_is_all_or_nothing() {
    let mut m = tiny_classifier();
    let before = m.clone();
    let mut g = grads_of(&m, 0.1);
    let last = g.len() - 1;
    g[last].data_mut()[0] = f64::NAN;
    let mut opt = Optimizer::new(OptimizerKind::ADAM, 0.1, 0.0);
    assert!(matches!(
        opt.step(&mut m, &refs(&g)),
        Err(Error::NonFinite(_))
    ));
    let mut missing = refs(&g);
    missing[0] = None;
    assert!(opt.step(&mut m, &missing).is_err());
    assert_eq!(m, before);
}

#[test]
fn milestone_examples() {
    let sr = |e| LrSchedule::milestone_lr(1e-4, &[0.5], 10.0, 6000, e);
    assert_eq!(sr(2999), 1e-4);
    assert!((sr(3000) - 1e-5).abs() < 1e-18);
    assert!((sr(5999) - 1e-5).abs() < 1e-18);
    let dn = |e| LrSchedule::milestone_lr(1e-3, &[0.1, 0.25, 0.75, 0.9], 5.0, 5000, e);
    assert!((dn(4999) - 1.6e-6).abs() < 1e-18);
    assert!((dn(4999) - 1e-3 / 625.0).abs() < 1e-18);
    assert_eq!(dn(499), 1e-3);
    assert!((dn(500) - 2e-4).abs() < 1e-18);
    // the epoch loop produces the same sequence through next_lr
    let mut s = TrainRunConfig::super_resolution().build_schedule();
    let mut lr = 1e-4;
    for e in 0..6000 {
        assert_eq!(lr, sr(e));
        lr = s.next_lr(1e-4, lr, e, 0.0);
    }
}

#[test]
fn plateau_behaviour() {
    let mut p = Plateau::new(0.1);
    let mut lr = 0.1;
    for i in 0..100 {
        lr = p.observe(1.0 / (i as f64 + 1.0), lr);
    }
    assert_eq!(lr, 0.1);
    let mut p = Plateau::new(0.1);
    let mut lrs = vec![];
    for _ in 0..25 {
        lr = p.observe(1.0, lr);
        lrs.push(lr);
    }
    assert_eq!(lrs[8], 0.1);
    assert_eq!(lrs[10], 0.05);
    assert_eq!(lrs[20], 0.025);
    let mut p = Plateau::new(1.0);
    let mut lr = 1.0;
    for _ in 0..1000 {
        lr = p.observe(1.0, lr);
    }
    assert!((lr - 1e-4).abs() < 1e-15);
}

fn denoise_set(n: usize, side: usize, seed: u64) -> Vec<ImageSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| ImageSample::new(synthetic_image(1, side, side, &mut rng)).unwrap())
        .collect()
}

fn quick_run(epochs: usize) -> TrainRunConfig {
    TrainRunConfig {
        epochs,
        batch_size: 4,
        eval_every: 1,
        checkpoint_every: 0,
        ..TrainRunConfig::denoising()
    }
}

#[test]
fn overfits_a_small_classification_set() {
    let data = synthetic_classification(8, 2, 8, &mut ChaCha8Rng::seed_from_u64(0));
    let mut m = Model::<f32>::build(&NetConfig::classifier(&[2], 4, true), 1).unwrap();
    let run = TrainRunConfig {
        epochs: 40,
        batch_size: 8,
        lr: 0.05,
        augment: false,
        schedule: ScheduleKind::Constant,
        ..TrainRunConfig::classification()
    };
    let h = train(&mut m, &data, &data, &run).unwrap();
    let first = h.records[0].train_loss;
    let last = h.records.last().unwrap().train_loss;
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn training_is_deterministic_and_resumable() {
    let data = denoise_set(6, 12, 4);
    let (tr, va) = holdout_split(&data, 0.34, 0);
    assert_eq!((tr.len(), va.len()), (4, 2));
    let cfg = NetConfig::denoiser(&[1, 1], 4, true);
    let run = quick_run(3);
    let fresh = || Model::<f32>::build(&cfg, 9).unwrap();

    let (mut a, mut b) = (fresh(), fresh());
    let ha = train(&mut a, &tr, &va, &run).unwrap();
    let hb = train(&mut b, &tr, &va, &run).unwrap();
    assert_eq!(ha.to_csv(), hb.to_csv());
    assert_eq!(a, b);
    assert_eq!(ha.to_csv().lines().count(), 4);
    assert!(ha.records.iter().all(|r| r.val_metric.is_finite()));

    // stop after one epoch, reload everything, continue: same weights as straight through
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.dxnt");
    let mut c = fresh();
    let mut t = Trainer::new(&mut c, quick_run(3))
        .unwrap()
        .with_checkpoint(&path);
    t.run_epoch(&tr, &va).unwrap();
    t.save(&path).unwrap();
    let ck = crate::model::Checkpoint::read(&path).unwrap();
    let mut d: Model<f32> = ck.to_model().unwrap();
    let mut t = Trainer::new(&mut d, quick_run(3)).unwrap();
    t.resume(&ck).unwrap();
    assert_eq!(t.epoch(), 1);
    let h = t.fit(&tr, &va, |_| {}).unwrap();
    assert_eq!(h.to_csv(), ha.to_csv());
    assert_eq!(d, a);
}

#[test]
fn divergence_restores_the_last_good_weights() {
    let data = denoise_set(4, 12, 5);
    let mut m = Model::<f32>::build(&NetConfig::denoiser(&[1], 4, false), 2).unwrap();
    let run = TrainRunConfig {
        lr: 1e30,
        optimizer: OptimizerKind::SgdNesterov { momentum: 0.9 },
        ..quick_run(5)
    };
    let before = m.clone();
    let mut t = Trainer::new(&mut m, run).unwrap();
    let mut result = Ok(());
    for _ in 0..5 {
        if let Err(e) = t.run_epoch(&data, &[]) {
            result = Err(e);
            break;
        }
    }
    let err = result.unwrap_err();
    assert!(matches!(err, Error::Divergence { .. }), "{err}");
    let epoch = t.epoch();
    drop(t);
    if epoch == 0 {
        assert_eq!(m, before);
    }
    assert!(m.params().values().all(|p| p.value.is_finite()));
}

#[test]
fn evaluation_metrics() {
    let data = denoise_set(3, 12, 6);
    let mut m = Model::<f32>::build(&NetConfig::denoiser(&[1], 4, true), 2).unwrap();
    // a network that predicts zero noise returns the noisy input
    for n in m.params().keys().cloned().collect::<Vec<_>>() {
        if n.starts_with("tail.conv") {
            let shape = m.param(&n).unwrap().shape().to_vec();
            m.set_param(&n, Tensor::zeros(&shape)).unwrap();
        }
    }
    m.set_mode(crate::autodiff::Mode::Eval);
    let p = evaluate(&m, &data, 50.0, 7).unwrap();
    let sigma = 50.0 / 255.0;
    let expect = 10.0 * (1.0f64 / (sigma * sigma)).log10();
    assert!((p - expect).abs() < 1.0, "{p} vs {expect}");
    assert_eq!(p, evaluate(&m, &data, 50.0, 7).unwrap());

    let cls = synthetic_classification(4, 10, 8, &mut ChaCha8Rng::seed_from_u64(1));
    let c = Model::<f32>::build(&NetConfig::classifier(&[1], 2, false), 0).unwrap();
    let e = evaluate(&c, &cls, 0.0, 0).unwrap();
    assert!((0.0..=100.0).contains(&e) && (e * 4.0 / 100.0).fract() == 0.0);
}

#[test]
fn rejects_mismatched_loss() {
    let mut m = tiny_classifier();
    let run = TrainRunConfig {
        loss: LossKind::Mse,
        ..TrainRunConfig::classification()
    };
    assert!(Trainer::new(&mut m, run).is_err());
}

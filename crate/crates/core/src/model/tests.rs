use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::nn::CountMode;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Closed-form scalar count of a CIFAR classifier with batch norm, the
/// sigmoid-gated xUnit (1x1 + BN + 9x9 depthwise with bias + BN) and pooling
/// transitions at r = 0.5, written out independently of the builder.
fn oracle_classifier_count(
    blocks: &[usize],
    k: usize,
    c0: usize,
    classes: usize,
    xunit: bool,
) -> usize {
    let xu = |c: usize| if xunit { c * c + 81 * c + c + 4 * c } else { 0 };
    let mut total = 3 * 9 * c0 + xu(c0);
    let mut m = c0;
    for (i, &n) in blocks.iter().enumerate() {
        for _ in 0..n {
            total += 2 * m + m * 4 * k + 2 * 4 * k + 4 * k * k * 9 + xu(k);
            m += k;
        }
        if i + 1 < blocks.len() {
            total += 2 * m + m * (m / 2);
            m /= 2;
        }
    }
    total + 2 * m + m * classes + classes
}

#[test]
fn cifar_budgets() {
    let dx = NetConfig::classifier(&[12, 12, 12], 12, true);
    let dense = NetConfig::classifier(&[16, 16, 16], 12, false);
    let n_dx = dx.param_count(CountMode::Full);
    let n_dense = dense.param_count(CountMode::Full);
    assert_eq!(
        n_dx,
        oracle_classifier_count(&[12, 12, 12], 12, 24, 10, true)
    );
    assert_eq!(
        n_dense,
        oracle_classifier_count(&[16, 16, 16], 12, 24, 10, false)
    );
    assert!((430_000..=580_000).contains(&n_dx), "{n_dx}");
    assert!(
        (n_dense as f64 - 800_000.0).abs() <= 0.15 * 800_000.0,
        "{n_dense}"
    );
    // compact accounting charges 82 per xUnit channel instead of the full branch
    let compact = dx.param_count(CountMode::Compact);
    assert_eq!(n_dx - compact, 36 * (12 * 12 + 4 * 12) + (24 * 24 + 4 * 24));
}

#[test]
fn built_model_matches_declarations() {
    for cfg in [
        NetConfig::classifier(&[3, 2], 4, true),
        NetConfig::denoiser(&[2, 3], 4, true),
        NetConfig::super_resolution(&[2, 2], 4, 4, false),
    ] {
        let m = Model::<f32>::build(&cfg, 1).unwrap();
        assert_eq!(m.param_count(), cfg.param_count(CountMode::Full));
        assert_eq!(m.param_count(), declarations(&cfg).unwrap().scalar_count());
        let table = stage_param_counts(&cfg, CountMode::Full).unwrap();
        assert_eq!(table.iter().map(|(_, n)| n).sum::<usize>(), m.param_count());
    }
}

#[test]
fn dxnet_adds_only_xunit_parameters() {
    let shapes = |xunit: bool| -> BTreeMap<String, Vec<usize>> {
        let m = Model::<f32>::build(&NetConfig::classifier(&[3, 3, 3], 6, xunit), 0).unwrap();
        m.params()
            .iter()
            .map(|(n, p)| (n.clone(), p.value.shape().to_vec()))
            .collect()
    };
    let (dx, dense) = (shapes(true), shapes(false));
    for (n, s) in &dense {
        assert_eq!(dx.get(n), Some(s), "{n}");
    }
    let extra: Vec<&String> = dx.keys().filter(|n| !dense.contains_key(*n)).collect();
    assert!(!extra.is_empty());
    assert!(extra.iter().all(|n| n.contains("xunit")), "{extra:?}");
}

#[test]
fn build_is_deterministic() {
    let cfg = NetConfig::classifier(&[2, 2], 4, true);
    let a = Model::<f32>::build(&cfg, 7).unwrap();
    assert_eq!(a, Model::<f32>::build(&cfg, 7).unwrap());
    assert_ne!(a, Model::<f32>::build(&cfg, 8).unwrap());
}

#[test]
fn classifier_shapes_and_feature_maps() {
    let cfg = NetConfig::classifier(&[2, 2, 2], 4, true);
    let mut m = Model::<f32>::build(&cfg, 2).unwrap();
    m.set_mode(Mode::Eval);
    let x = Tensor::randn(&[2, 3, 16, 16], 1.0, &mut rng(3));
    let (logits, feats) = m.predict_with_features(&x).unwrap();
    assert_eq!(logits.shape(), &[2, 10]);
    let c = feats.shape()[1];
    assert_eq!(feats.shape(), &[2, c, 4, 4]);
    assert_eq!(m.predict(&x).unwrap(), logits);
    // odd spatial size at a pooling transition
    assert!(m.predict(&Tensor::zeros(&[1, 3, 6, 6])).is_err());
    assert!(m.predict(&Tensor::zeros(&[1, 1, 16, 16])).is_err());
}

#[test]
fn strided_stem_halves_the_input() {
    let mut cfg = NetConfig::classifier(&[2, 2], 4, false);
    cfg.stem = Stem::Conv7x7Stride2;
    let mut m = Model::<f32>::build(&cfg, 2).unwrap();
    m.set_mode(Mode::Eval);
    let (_, feats) = m
        .predict_with_features(&Tensor::zeros(&[1, 3, 16, 16]))
        .unwrap();
    assert_eq!(&feats.shape()[2..], &[4, 4]);
}

#[test]
fn denoiser_preserves_shape() {
    let cfg = NetConfig::denoiser(&[2, 2], 4, true);
    let mut m = Model::<f32>::build(&cfg, 4).unwrap();
    m.set_mode(Mode::Eval);
    let y = Tensor::randn(&[1, 1, 40, 40], 0.3, &mut rng(5));
    let noise = m.predict(&y).unwrap();
    assert_eq!(noise.shape(), &[1, 1, 40, 40]);
    assert_eq!(m.denoise(&y).unwrap(), y.sub(&noise).unwrap());
    // no pooling, so odd sizes are fine
    assert_eq!(
        m.predict(&Tensor::zeros(&[1, 1, 13, 7])).unwrap().shape(),
        &[1, 1, 13, 7]
    );
}

#[test]
fn super_resolution_shapes_and_skip() {
    for scale in [2, 4] {
        let cfg = NetConfig::super_resolution(&[2, 2], 4, scale, true);
        let mut m = Model::<f32>::build(&cfg, 6).unwrap();
        m.set_mode(Mode::Eval);
        let x = Tensor::rand_uniform(&[1, 3, 12, 12], 0.0, 1.0, &mut rng(7));
        assert_eq!(
            m.predict(&x).unwrap().shape(),
            &[1, 3, 12 * scale, 12 * scale]
        );
        // a silent tail leaves only the bicubic skip
        m.set_param("tail.out.weight", Tensor::zeros(&[3, 8, 3, 3]))
            .unwrap();
        let up = bicubic_resize(&x, 12 * scale, 12 * scale).unwrap();
        assert_eq!(m.predict(&x).unwrap(), up);
        assert!(m.denoise(&x).is_err());
    }
}

#[test]
fn training_forward_updates_running_stats_and_predict_does_not() {
    let cfg = NetConfig::classifier(&[2], 4, true);
    let mut m = Model::<f32>::build(&cfg, 8).unwrap();
    let before = m.clone();
    let x = Tensor::randn(&[4, 3, 8, 8], 1.0, &mut rng(9));
    m.predict(&x).unwrap();
    assert_eq!(m, before);
    let mut g = Graph::new();
    let b = m.bind(&mut g);
    let xv = g.input(x);
    m.forward(&mut g, &b, xv, None).unwrap();
    assert_ne!(m.norms(), before.norms());
    assert_eq!(m.params(), before.params());
}

#[test]
fn rejects_bad_param_updates() {
    let mut m = Model::<f32>::build(&NetConfig::classifier(&[1], 4, false), 0).unwrap();
    assert!(m.set_param("stem.weight", Tensor::zeros(&[1])).is_err());
    assert!(m.set_param("nope", Tensor::zeros(&[1])).is_err());
}

mod checkpoints {
    use super::*;
    use crate::error::Error;

    fn trained_ish() -> Model<f32> {
        let mut m = Model::<f32>::build(&NetConfig::classifier(&[2, 2], 4, true), 11).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g);
        let xv = g.input(Tensor::randn(&[3, 3, 8, 8], 1.0, &mut rng(12)));
        m.forward(&mut g, &b, xv, None).unwrap();
        m
    }

    #[test]
    fn round_trip_is_exact() {
        let m = trained_ish();
        let ck = Checkpoint::from_model(&m);
        assert_eq!(ck.param_scalars(), m.config().param_count(CountMode::Full));
        let bytes = ck.encode().unwrap();
        let back: Model<f32> = Checkpoint::decode(&bytes).unwrap().to_model().unwrap();
        assert_eq!(back, m);
        assert_eq!(Checkpoint::from_model(&back).encode().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dxnt");
        m.save(&path).unwrap();
        assert_eq!(Model::<f32>::load(&path).unwrap(), m);
        let wide: Model<f64> = Model::load(&path).unwrap();
        assert_eq!(
            wide.param("stem.weight").unwrap().cast::<f32>(),
            *m.param("stem.weight").unwrap()
        );
    }

    #[test]
    fn extra_state_survives() {
        let mut ck = Checkpoint::from_model(&trained_ish());
        ck.put_state(Entry::u64s("train.epoch", &[17]));
        ck.put_state(Entry::floats("optim.v.stem.weight", &[1.5f32, -2.0]));
        let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
        assert_eq!(
            back.state_entry("train.epoch").unwrap().as_u64s().unwrap(),
            &[17]
        );
        assert_eq!(
            back.state_entry("optim.v.stem.weight")
                .unwrap()
                .as_f64s()
                .unwrap(),
            vec![1.5, -2.0]
        );
        assert_eq!(back, ck);
    }

    #[test]
    fn truncation_names_the_entry() {
        let ck = Checkpoint::from_model(&trained_ish());
        let bytes = ck.encode().unwrap();
        // cut inside the first parameter payload
        let first = &ck.params[0];
        let header = 4 + 4 + 4 + 2 + first.name.len() + 2 + 4 * first.shape.len();
        match Checkpoint::decode(&bytes[..header + 10]) {
            Err(Error::CheckpointEntry { entry, .. }) => assert_eq!(entry, first.name),
            other => panic!("{other:?}"),
        }
        for cut in [bytes.len() - 1, bytes.len() / 2, 13] {
            assert!(Checkpoint::decode(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(Checkpoint::decode(&long).is_err());
    }

    #[test]
    fn header_and_dtype_errors() {
        let bytes = Checkpoint::from_model(&trained_ish()).encode().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bad),
            Err(Error::Checkpoint(_))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(
            matches!(Checkpoint::decode(&v2), Err(Error::Checkpoint(m)) if m.contains("version"))
        );
        let name_len = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
        let mut dt = bytes.clone();
        dt[14 + name_len] = 9;
        assert!(
            matches!(Checkpoint::decode(&dt), Err(Error::CheckpointEntry { reason, .. }) if reason.contains("dtype"))
        );
    }

    #[test]
    fn mismatched_parameters_are_rejected() {
        let mut ck = Checkpoint::from_model(&trained_ish());
        ck.params[0].shape = vec![ck.params[0].data.len()];
        assert!(ck.to_model::<f32>().is_err());
        let mut ck = Checkpoint::from_model(&trained_ish());
        ck.params.pop();
        assert!(ck.to_model::<f32>().is_err());
        let mut ck = Checkpoint::from_model(&trained_ish());
        ck.state.retain(|e| e.name != "meta.config");
        assert!(ck.to_model::<f32>().is_err());
    }
}

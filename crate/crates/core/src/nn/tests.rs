use std::collections::HashMap;

use indexmap::IndexMap;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check_inputs, Graph, Mode};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn ctx<'a, T: Scalar>(
    g: &'a mut Graph<T>,
    vars: &'a HashMap<String, Var>,
    norms: &'a mut IndexMap<String, BatchNormState<T>>,
) -> BlockCtx<'a, T> {
    BlockCtx {
        graph: g,
        vars,
        norms,
        dropout: None,
    }
}

fn xunit_setup(spec: &XUnitSpec, seed: u64) -> StandaloneBlock<f64> {
    let mut d = Decls::default();
    spec.declare("xu", &mut d);
    StandaloneBlock::init(&d, &mut rng(seed))
}

#[test]
fn xunit_zero_input_gives_zero_output() {
    let spec = XUnitSpec::new(3);
    let mut blk = xunit_setup(&spec, 1);
    let mut g = Graph::new();
    let vars = blk.bind(&mut g);
    let x = g.input(Tensor::zeros(&[2, 3, 6, 6]));
    let y = spec
        .forward(&mut ctx(&mut g, &vars, &mut blk.norms), "xu", x)
        .unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn xunit_gate_centers() {
    for (gate, factor) in [(Gate::Sigmoid, 0.5), (Gate::Gaussian, 1.0)] {
        let spec = XUnitSpec {
            gate,
            ..XUnitSpec::new(2)
        };
        let mut blk = xunit_setup(&spec, 2);
        // a zero depthwise branch makes the pre-gate map identically zero
        blk.values
            .insert("xu.dw.weight".into(), Tensor::zeros(&[2, 1, 9, 9]));
        blk.values.insert("xu.dw.bias".into(), Tensor::zeros(&[2]));
        let mut g = Graph::new();
        let vars = blk.bind(&mut g);
        let xt = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut rng(3));
        let x = g.input(xt.clone());
        let y = spec
            .forward(&mut ctx(&mut g, &vars, &mut blk.norms), "xu", x)
            .unwrap();
        assert_eq!(g.value(y), &xt.scale(factor), "{gate:?}");
    }
}

#[test]
fn xunit_rejects_channel_mismatch_and_bad_kernel() {
    let spec = XUnitSpec::new(3);
    let mut blk = xunit_setup(&spec, 4);
    let mut g = Graph::new();
    let vars = blk.bind(&mut g);
    let x = g.input(Tensor::zeros(&[1, 2, 4, 4]));
    assert!(spec
        .forward(&mut ctx(&mut g, &vars, &mut blk.norms), "xu", x)
        .is_err());
    assert!(XUnitSpec {
        depthwise_kernel: 7,
        ..spec
    }
    .validate()
    .is_err());
}

#[test]
fn xunit_parameter_counts() {
    assert_eq!(XUnitSpec::new(32).param_count(CountMode::Compact), 2624);
    assert_eq!(XUnitSpec::new(12).param_count(CountMode::Full), 1176);
    for k in [1, 5, 12, 32] {
        assert_eq!(XUnitSpec::new(k).param_count(CountMode::Compact), 82 * k);
        for (pw, bn) in [(true, true), (true, false), (false, true), (false, false)] {
            let spec = XUnitSpec {
                use_pointwise: pw,
                with_bn: bn,
                ..XUnitSpec::new(k)
            };
            let mut d = Decls::default();
            spec.declare("x", &mut d);
            assert_eq!(spec.param_count(CountMode::Full), d.scalar_count());
        }
    }
}

#[test]
fn dense_layer_shapes() {
    let spec = DenseLayerSpec::new(24, 12).with_xunit(XUnitSpec::new(12));
    let mut d = Decls::default();
    spec.declare("l", &mut d);
    let mut blk = StandaloneBlock::<f32>::init(&d, &mut rng(5));
    let mut g = Graph::new();
    let vars = blk.bind(&mut g);
    let x = g.input(Tensor::randn(&[2, 24, 8, 8], 1.0, &mut rng(6)));
    let y = spec
        .forward(&mut ctx(&mut g, &vars, &mut blk.norms), "l", x)
        .unwrap();
    assert_eq!(g.value(y).shape(), &[2, 36, 8, 8]);
    assert_eq!(spec.param_count(CountMode::Full), d.scalar_count());
}

#[test]
fn zeroed_expansion_conv_appends_zero_maps() {
    let spec = DenseLayerSpec::new(4, 3);
    let mut d = Decls::default();
    spec.declare("l", &mut d);
    let mut blk = StandaloneBlock::<f64>::init(&d, &mut rng(7));
    blk.values
        .insert("l.conv2.weight".into(), Tensor::zeros(&[3, 12, 3, 3]));
    let mut g = Graph::new();
    let vars = blk.bind(&mut g);
    let xt = Tensor::randn(&[2, 4, 5, 5], 1.0, &mut rng(8));
    let x = g.input(xt.clone());
    let y = spec
        .forward(&mut ctx(&mut g, &vars, &mut blk.norms), "l", x)
        .unwrap();
    let y = g.value(y);
    assert_eq!(y.slice_channels(0, 4).unwrap(), xt);
    assert!(y
        .slice_channels(4, 3)
        .unwrap()
        .data()
        .iter()
        .all(|&v| v == 0.0));
}

#[test]
fn twelve_layers_add_twelve_k_channels() {
    let block = DenseBlockSpec::new(
        24,
        12,
        DenseLayerSpec::new(24, 12).with_xunit(XUnitSpec::new(12)),
    );
    assert_eq!(block.out_channels(), 168);
    let mut d = Decls::default();
    block.declare("b", &mut d);
    let mut blk = StandaloneBlock::<f32>::init(&d, &mut rng(9));
    let mut g = Graph::new();
    let vars = blk.bind(&mut g);
    let x = g.input(Tensor::randn(&[1, 24, 4, 4], 1.0, &mut rng(10)));
    let y = block
        .forward(&mut ctx(&mut g, &vars, &mut blk.norms), "b", x)
        .unwrap();
    assert_eq!(g.value(y).shape(), &[1, 168, 4, 4]);
}

#[test]
fn identity_gate_makes_xdense_match_dense_bitwise() {
    let plain = DenseLayerSpec::new(6, 4);
    let xu = XUnitSpec {
        gate: Gate::Gaussian,
        ..XUnitSpec::new(4)
    };
    let xdense = plain.with_xunit(xu);
    let mut d = Decls::default();
    xdense.declare("l", &mut d);
    let mut blk = StandaloneBlock::<f32>::init(&d, &mut rng(11));
    blk.values
        .insert("l.xunit.dw.weight".into(), Tensor::zeros(&[4, 1, 9, 9]));
    let xt = Tensor::<f32>::randn(&[2, 6, 6, 6], 1.0, &mut rng(12));

    let mut norms_a = blk.norms.clone();
    let mut g = Graph::new();
    let vars = blk.bind(&mut g);
    let x = g.input(xt.clone());
    let ya = xdense
        .forward(&mut ctx(&mut g, &vars, &mut norms_a), "l", x)
        .unwrap();
    let ya = g.value(ya).clone();

    let mut norms_b = blk.norms.clone();
    let mut h = Graph::new();
    let vars = blk.bind(&mut h);
    let x = h.input(xt);
    let yb = plain
        .forward(&mut ctx(&mut h, &vars, &mut norms_b), "l", x)
        .unwrap();
    assert_eq!(&ya, h.value(yb));
}

#[test]
fn transition_shapes() {
    let spec = TransitionSpec::new(168, 0.5);
    assert_eq!(spec.out_channels(), 84);
    assert_eq!(TransitionSpec::new(85, 0.5).out_channels(), 42);
    assert!(TransitionSpec::new(1, 0.5).validate().is_err());
    for with_pool in [true, false] {
        let spec = TransitionSpec {
            with_pool,
            ..TransitionSpec::new(10, 0.5)
        };
        let mut d = Decls::default();
        spec.declare("t", &mut d);
        assert_eq!(spec.param_count(CountMode::Full), d.scalar_count());
        let mut blk = StandaloneBlock::<f32>::init(&d, &mut rng(13));
        let mut g = Graph::new();
        let vars = blk.bind(&mut g);
        let x = g.input(Tensor::randn(&[2, 10, 8, 6], 1.0, &mut rng(14)));
        let y = spec
            .forward(&mut ctx(&mut g, &vars, &mut blk.norms), "t", x)
            .unwrap();
        let expect: &[usize] = if with_pool {
            &[2, 5, 4, 3]
        } else {
            &[2, 5, 8, 6]
        };
        assert_eq!(g.value(y).shape(), expect);
    }
    let no_bn = TransitionSpec {
        with_bn: false,
        with_pool: false,
        ..TransitionSpec::new(10, 0.5)
    };
    let mut d = Decls::default();
    no_bn.declare("t", &mut d);
    assert!(d.params.iter().any(|p| p.name == "t.conv.bias"));
    assert!(d.norms.is_empty());
}

#[test]
fn xdense_layer_gradient_check() {
    let spec = DenseLayerSpec {
        bottleneck_channels: 4,
        ..DenseLayerSpec::new(3, 2)
    }
    .with_xunit(XUnitSpec::new(2));
    let mut d = Decls::default();
    spec.declare("l", &mut d);
    let blk = StandaloneBlock::<f64>::init(&d, &mut rng(15));
    let names: Vec<String> = blk.values.keys().cloned().collect();
    let mut points: Vec<Tensor<f64>> = blk.values.values().cloned().collect();
    points.push(Tensor::randn(&[2, 3, 10, 10], 1.0, &mut rng(16)));
    let probe = Tensor::<f64>::randn(&[2, 5, 10, 10], 1.0, &mut rng(17));
    let errs = grad_check_inputs(
        |g, v| {
            let vars: HashMap<String, Var> = names.iter().cloned().zip(v.iter().copied()).collect();
            let mut norms = blk.norms.clone();
            let mut c = ctx(g, &vars, &mut norms);
            let y = spec.forward(&mut c, "l", *v.last().unwrap())?;
            let p = g.input(probe.clone());
            let h = g.hadamard(y, p)?;
            g.sum(h)
        },
        &points,
        1e-6,
    )
    .unwrap();
    let worst = errs.iter().cloned().fold(0.0, f64::max);
    assert!(worst < 1e-3, "{errs:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn xunit_gate_range_and_magnitude(seed in 0u64..10_000, c in 1usize..4, gaussian in any::<bool>(), eval in any::<bool>()) {
        let gate = if gaussian { Gate::Gaussian } else { Gate::Sigmoid };
        let spec = XUnitSpec { gate, ..XUnitSpec::new(c) };
        let mut blk = xunit_setup(&spec, seed);
        if eval {
            blk.norms.values_mut().for_each(|s| s.mode = Mode::Eval);
        }
        let mut g = Graph::new();
        let vars = blk.bind(&mut g);
        let x = g.input(Tensor::randn(&[2, c, 7, 5], 2.0, &mut rng(seed + 1)));
        let (y, gv) = spec.forward_with_gate(&mut ctx(&mut g, &vars, &mut blk.norms), "xu", x).unwrap();
        prop_assert_eq!(g.value(y).shape(), g.value(x).shape());
        prop_assert!(g.value(gv).data().iter().all(|v| (0.0..=1.0).contains(v)));
        for (a, b) in g.value(y).data().iter().zip(g.value(x).data()) {
            prop_assert!(a.abs() <= b.abs());
        }
    }

    #[test]
    fn stacked_layers_add_n_times_k(m in 1usize..8, k in 1usize..5, n in 0usize..6) {
        let block = DenseBlockSpec::new(m, n, DenseLayerSpec::new(m, k));
        let out = if n == 0 { m } else { block.out_channels() };
        prop_assert_eq!(out, m + n * k);
        for l in &block.layers {
            prop_assert_eq!(l.out_channels(), l.in_channels + k);
        }
    }
}

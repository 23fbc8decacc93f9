use dpanet::model::{Model, ModelConfig, Pooling, Variant};
use dpanet::numerics::Tensor;
use dpanet::params::{Mode, ParamStore, Session};
use dpanet::pyramid::{build_temporal_pyramid, DualPyramid};
use dpanet::revin::revin_normalize;
use dpanet::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small(variant: Variant) -> ModelConfig {
    ModelConfig {
        l_in: 16,
        l_pred: 8,
        channels: 3,
        levels: 3,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        variant,
        ..ModelConfig::default()
    }
}

fn zero_head<T: dpanet::Real>(model: &Model, store: &mut ParamStore<T>) {
    store.get_mut(model.head.weight).data_mut().iter_mut().for_each(|v| *v = T::zero());
}

#[test]
fn four_horizons_have_the_right_shape() {
    let x = Tensor::<f32>::randn(vec![2, 96, 7], 1.0, &mut rng(1));
    for l_pred in [96, 192, 336, 720] {
        let cfg = ModelConfig {
            l_pred,
            ..ModelConfig::default()
        };
        let (model, store) = Model::new::<f32>(&cfg, 1).unwrap();
        let out = model.forward(&store, &x).unwrap();
        assert_eq!(out.values.shape(), [2, l_pred, 7]);
        assert_eq!(out.normalized.shape(), [2, l_pred, 7]);
        assert!(out.values.is_finite());
    }
}

#[test]
fn parameter_counts_follow_the_architecture() {
    // hand-derived: revin 14, embeddings 24064, attention 133120, norms 2048,
    // feed-forward 132096, head 6240
    let default = ModelConfig::default();
    assert_eq!(Model::expected_param_count(&default), 297_582);
    let (_, store) = Model::new::<f32>(&default, 0).unwrap();
    assert_eq!(store.num_scalars(), 297_582);

    // revin 4, embeddings 256, norms 128, feed-forward 1088, head 36
    let tiny = ModelConfig {
        l_in: 8,
        l_pred: 4,
        channels: 2,
        levels: 2,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        variant: Variant::NoCrossFusion,
        ..ModelConfig::default()
    };
    assert_eq!(Model::expected_param_count(&tiny), 1512);
    let (_, store) = Model::new::<f64>(&tiny, 0).unwrap();
    assert_eq!(store.num_scalars(), 1512);

    for variant in Variant::ALL {
        let cfg = small(variant);
        let (_, store) = Model::new::<f32>(&cfg, 0).unwrap();
        assert_eq!(store.num_scalars(), Model::expected_param_count(&cfg), "{variant}");
    }
}

#[test]
fn constant_input_forecasts_the_constant() {
    let (model, mut store) = Model::new::<f64>(&small(Variant::Full), 2).unwrap();
    zero_head(&model, &mut store);
    let levels = [3.5, -1.0, 250.0];
    let mut data = Vec::new();
    for _ in 0..2 * 16 {
        data.extend(levels);
    }
    let x = Tensor::new(vec![2, 16, 3], data).unwrap();
    let out = model.forward(&store, &x).unwrap().values;
    for (i, v) in out.data().iter().enumerate() {
        assert!((v - levels[i % 3]).abs() < 1e-2, "{v}");
    }
}

#[test]
fn shifting_one_instance_shifts_its_forecast() {
    let (model, mut store) = Model::new::<f64>(&small(Variant::Full), 3).unwrap();
    zero_head(&model, &mut store);
    let x = Tensor::<f64>::randn(vec![2, 16, 3], 1.0, &mut rng(3));
    let mut shifted = x.clone();
    shifted.data_mut()[..48].iter_mut().for_each(|v| *v += 4.25);
    let a = model.forward(&store, &x).unwrap().values;
    let b = model.forward(&store, &shifted).unwrap().values;
    for (i, (p, q)) in a.data().iter().zip(b.data()).enumerate() {
        let expect = if i < 24 { 4.25 } else { 0.0 };
        assert!((q - p - expect).abs() < 1e-3);
    }
}

#[test]
fn duplicated_channel_duplicates_its_forecast() {
    let (model, store) = Model::new::<f32>(&small(Variant::Full), 4).unwrap();
    let mut x = Tensor::<f32>::randn(vec![2, 16, 3], 1.0, &mut rng(4));
    for t in 0..32 {
        x.data_mut()[t * 3 + 2] = x.data()[t * 3];
    }
    let y = model.forward(&store, &x).unwrap().values;
    for t in 0..16 {
        assert_eq!(y.data()[t * 3], y.data()[t * 3 + 2]);
    }
}

#[test]
fn variants_share_shapes_and_differ_from_full() {
    let x = Tensor::<f64>::randn(vec![2, 16, 3], 1.0, &mut rng(5));
    let (full_model, full_store) = Model::new::<f64>(&small(Variant::Full), 5).unwrap();
    let full = full_model.forward(&full_store, &x).unwrap().values;
    for variant in [Variant::TemporalOnly, Variant::FrequencyOnly, Variant::NoCrossFusion] {
        let (model, store) = Model::new::<f64>(&small(variant), 5).unwrap();
        let out = model.forward(&store, &x).unwrap().values;
        assert_eq!(out.shape(), full.shape());
        assert!(out.max_abs_diff(&full) > 1e-6, "{variant} matches full");
    }
    // identical parameter layout, so only the wiring differs
    let (_, store) = Model::new::<f64>(&small(Variant::TemporalOnly), 5).unwrap();
    assert_eq!(store, full_store);
}

/// Normalized forecast with one pyramid replaced by zeros.
fn with_zeroed_stream(variant: Variant, zero_frequency: bool) -> (Tensor<f64>, Tensor<f64>) {
    let (model, store) = Model::new::<f64>(&small(variant), 6).unwrap();
    let x = Tensor::<f64>::randn(vec![2, 16, 3], 1.0, &mut rng(6));
    let run = |zero: bool| {
        let mut sess = Session::new(&store, Mode::Eval);
        let xv = sess.tape.constant(x.clone());
        let (xn, _) = revin_normalize(&mut sess, xv, &model.revin).unwrap();
        let mut pyramid = model.build_pyramid(&mut sess, xn).unwrap();
        if zero {
            let temporal = build_temporal_pyramid(&mut sess.tape, xn, 3).unwrap();
            let zeros: Vec<_> = temporal
                .iter()
                .map(|&l| {
                    let shape = sess.tape.shape(l).to_vec();
                    sess.tape.constant(Tensor::zeros(shape))
                })
                .collect();
            pyramid = if zero_frequency {
                DualPyramid {
                    temporal,
                    frequency: zeros,
                }
            } else {
                DualPyramid {
                    temporal: zeros,
                    frequency: pyramid.frequency,
                }
            };
        }
        let out = model.predict_normalized(&mut sess, &pyramid).unwrap();
        sess.tape.value(out).clone()
    };
    (run(false), run(true))
}

#[test]
fn single_stream_variants_ignore_the_other_pyramid() {
    let (a, b) = with_zeroed_stream(Variant::TemporalOnly, true);
    assert_eq!(a, b);
    let (a, b) = with_zeroed_stream(Variant::FrequencyOnly, false);
    assert_eq!(a, b);
    let (a, b) = with_zeroed_stream(Variant::Full, true);
    assert_ne!(a, b);
}

#[test]
fn last_step_pooling_runs() {
    let cfg = ModelConfig {
        pooling: Pooling::Last,
        ..small(Variant::Full)
    };
    let (model, store) = Model::new::<f32>(&cfg, 7).unwrap();
    let x = Tensor::<f32>::randn(vec![1, 16, 3], 1.0, &mut rng(7));
    let mean_model = Model::new::<f32>(&small(Variant::Full), 7).unwrap();
    let a = model.forward(&store, &x).unwrap().values;
    let b = mean_model.0.forward(&mean_model.1, &x).unwrap().values;
    assert_eq!(a.shape(), b.shape());
    assert_ne!(a, b);
}

#[test]
fn bad_inputs_are_rejected() {
    let (model, store) = Model::new::<f32>(&small(Variant::Full), 8).unwrap();
    let wrong = Tensor::<f32>::zeros(vec![1, 12, 3]);
    assert!(matches!(model.forward(&store, &wrong), Err(Error::Dimension { .. })));
    let mut nan = Tensor::<f32>::zeros(vec![1, 16, 3]);
    nan.data_mut()[5] = f32::NAN;
    assert!(matches!(model.forward(&store, &nan), Err(Error::NonFinite(_))));
    let bad = ModelConfig {
        levels: 6,
        ..small(Variant::Full)
    };
    assert!(matches!(Model::new::<f32>(&bad, 0), Err(Error::Config(_))));
}

#[test]
fn initialization_is_seeded() {
    let (_, a) = Model::new::<f32>(&small(Variant::Full), 9).unwrap();
    let (_, b) = Model::new::<f32>(&small(Variant::Full), 9).unwrap();
    let (_, c) = Model::new::<f32>(&small(Variant::Full), 10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let pos = a.find("scale0.embed_t.position").unwrap();
    let sd = (a.get(pos).data().iter().map(|v| v * v).sum::<f32>() / a.get(pos).numel() as f32).sqrt();
    assert!((0.01..0.03).contains(&sd), "{sd}");
    let ln = a.find("scale1.block.norm_out.gain").unwrap();
    assert!(a.get(ln).data().iter().all(|&v| v == 1.0));
}

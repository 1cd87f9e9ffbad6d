use lorafwi_core::model::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, ArtifactMeta, InversionNet,
    ModelConfig, Network,
};
use lorafwi_core::nn::Mode;
use lorafwi_core::tensor::{Tape, Tensor, Var};
use lorafwi_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FULL_PARAMS: usize = 24_404_801;
const TINY_PARAMS: usize = 491_233;

fn random_input<T: lorafwi_core::tensor::Scalar>(config: &ModelConfig, batch: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = config.input_shape(batch).to_vec();
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(rng.random_range(-1.0..1.0))).collect()).unwrap()
}

/// Independent count from the layer table: no conv bias before batch norm,
/// two affine parameters per batch norm, a biased 3x3 head.
fn count_from_table(config: &ModelConfig) -> usize {
    let mut channels = config.in_channels;
    let mut total = 0;
    for b in config.encoder.iter().chain(&config.decoder) {
        total += channels * b.out_channels * b.kernel.0 * b.kernel.1 + 2 * b.out_channels;
        channels = b.out_channels;
    }
    total + channels * 9 + 1
}

#[test]
fn parameter_counts_are_pinned() {
    let full = InversionNet::<f32>::build(&ModelConfig::full(), 0).unwrap();
    assert_eq!(full.param_count(false), FULL_PARAMS);
    assert_eq!(count_from_table(&ModelConfig::full()), FULL_PARAMS);
    assert!((FULL_PARAMS as f64 - 24.4e6).abs() <= 0.05 * 24.4e6);
    let mut tiny = InversionNet::<f32>::build(&ModelConfig::tiny(), 0).unwrap();
    assert_eq!(tiny.param_count(false), TINY_PARAMS);
    assert_eq!(count_from_table(&ModelConfig::tiny()), TINY_PARAMS);
    tiny.set_trainable(false);
    assert_eq!(tiny.param_count(true), 0);
    assert_eq!(tiny.param_count(false), TINY_PARAMS);
}

#[test]
fn parameter_names_are_stable() {
    let net = InversionNet::<f32>::build(&ModelConfig::tiny(), 0).unwrap();
    let names: Vec<&str> = net.parameters().iter().map(|p| p.name.as_str()).collect();
    assert_eq!(&names[..3], &["encoder.0.conv.weight", "encoder.0.bn.gamma", "encoder.0.bn.beta"]);
    assert!(names.contains(&"decoder.0.deconv.weight"));
    assert!(names.contains(&"decoder.1.conv.weight"));
    assert_eq!(&names[names.len() - 2..], &["head.weight", "head.bias"]);
    let mut sorted = names.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), names.len());
    assert_eq!(net.buffers()[0].0, "encoder.0.bn.running_mean");
}

#[test]
fn tiny_shape_contract() {
    let config = ModelConfig::tiny();
    let mut net = InversionNet::<f32>::build(&config, 1).unwrap();
    for batch in 1..=8 {
        let y = net.predict(&random_input(&config, batch, batch as u64)).unwrap();
        assert_eq!(y.shape(), &config.output_shape(batch));
        assert!(y.data().iter().all(|v| v.abs() < 1.0));
    }
    let mut wrong = config.input_shape(2).to_vec();
    wrong[2] += 1;
    let bad = Tensor::<f32>::zeros(wrong).unwrap();
    assert!(net.predict(&bad).is_err());
}

#[test]
fn full_preset_forward_shape() {
    let config = ModelConfig::full();
    let mut net = InversionNet::<f32>::build(&config, 0).unwrap();
    let x = Tensor::<f32>::zeros(config.input_shape(2).to_vec()).unwrap();
    let y = net.predict(&x).unwrap();
    assert_eq!(y.shape(), &[2, 1, 70, 70]);
}

#[test]
fn build_and_forward_are_deterministic() {
    let config = ModelConfig::tiny();
    let x = random_input::<f32>(&config, 3, 9);
    let run = || {
        let mut net = InversionNet::<f32>::build(&config, 42).unwrap();
        let tape = Tape::new();
        net.forward(tape.constant(x.clone()), Mode::Train).unwrap().value()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    let other = InversionNet::<f32>::build(&config, 43).unwrap();
    let first = InversionNet::<f32>::build(&config, 42).unwrap();
    assert_ne!(first.parameters()[0].value, other.parameters()[0].value);
}

#[test]
fn train_and_eval_modes_differ() {
    let config = ModelConfig::tiny();
    let mut net = InversionNet::<f64>::build(&config, 2).unwrap();
    let x = random_input::<f64>(&config, 4, 3);
    let eval_before = net.predict(&x).unwrap();
    let tape = Tape::new();
    let train = net.forward(tape.constant(x.clone()), Mode::Train).unwrap().value();
    assert!(train.max_abs_diff(&eval_before).unwrap() > 1e-6);
    // The train pass moved the running statistics.
    let eval_after = net.predict(&x).unwrap();
    assert!(eval_after.max_abs_diff(&eval_before).unwrap() > 0.0);
    // Eval mode leaves them alone.
    assert_eq!(net.predict(&x).unwrap(), eval_after);
}

#[test]
fn end_to_end_gradients_match_finite_differences() {
    let config = ModelConfig::tiny();
    let mut net = InversionNet::<f64>::build(&config, 11).unwrap();
    let x = random_input::<f64>(&config, 4, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let proj = {
        let shape = config.output_shape(4).to_vec();
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()).unwrap()
    };
    fn objective<'t>(net: &mut InversionNet<f64>, tape: &'t Tape<f64>, x: &Tensor<f64>, proj: &Tensor<f64>) -> Var<'t, f64> {
        let y = net.forward(tape.constant(x.clone()), Mode::Train).unwrap();
        y.mul(tape.constant(proj.clone())).unwrap().sum()
    }
    let loss = |net: &mut InversionNet<f64>| {
        let tape = Tape::no_grad();
        objective(net, &tape, &x, &proj).value().item().unwrap()
    };
    let grads = {
        let tape = Tape::new();
        let l = objective(&mut net, &tape, &x, &proj);
        tape.backward(l).unwrap()
    };
    let names: Vec<String> = net.parameters().iter().map(|p| p.name.clone()).collect();
    let h = 1e-5;
    let central = |net: &mut InversionNet<f64>, name: &str, i: usize, h: f64| {
        let shift = |net: &mut InversionNet<f64>, delta: f64| {
            let p = net.parameters_mut().into_iter().find(|p| p.name == name).unwrap();
            p.value.data_mut()[i] += delta;
        };
        shift(net, h);
        let plus = loss(net);
        shift(net, -2.0 * h);
        let minus = loss(net);
        shift(net, h);
        (plus - minus) / (2.0 * h)
    };
    let (mut worst, mut checked, mut kinked) = (0.0f64, 0, 0);
    for name in &names {
        let numel = net.parameter(name).unwrap().numel();
        let analytic = grads.get(name).unwrap().clone();
        // Relative to the gradient scale of the tensor, so entries that are
        // zero by symmetry do not divide by nothing.
        let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        for _ in 0..3 {
            let i = rng.random_range(0..numel);
            let numeric = central(&mut net, name, i, h);
            // A leaky ReLU input crossing zero within the step makes the
            // difference quotient meaningless; a ten times smaller step
            // exposes it.
            if (numeric - central(&mut net, name, i, h / 10.0)).abs() > 1e-5 * scale {
                kinked += 1;
                continue;
            }
            worst = worst.max((analytic.data()[i] - numeric).abs() / scale);
            checked += 1;
        }
    }
    assert!(checked >= 120 && kinked * 5 < checked, "checked {checked}, kinked {kinked}");
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let config = ModelConfig::tiny();
    let mut net = InversionNet::<f32>::build(&config, 5).unwrap();
    // Move the running statistics off their defaults.
    let tape = Tape::new();
    net.forward(tape.constant(random_input(&config, 2, 1)), Mode::Train).unwrap();
    let meta = ArtifactMeta {
        trained_on: vec!["flat-vel-B".into()],
        method: Some("fft".into()),
        seed: Some(5),
        ..ArtifactMeta::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fwck");
    save_checkpoint(&net, &meta, &path).unwrap();
    let loaded = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(loaded.meta, meta);
    assert!(loaded.extra.is_empty());
    for (a, b) in net.parameters().iter().zip(loaded.model.parameters()) {
        assert_eq!(a.name, b.name);
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    for ((na, a), (nb, b)) in net.buffers().iter().zip(loaded.model.buffers()) {
        assert_eq!(na, &nb);
        assert_eq!(*a, b);
    }
    assert_eq!(std::fs::read(&path).unwrap(), encode_checkpoint(&loaded.model, &meta, &[]));
    let x = random_input::<f32>(&config, 2, 2);
    let mut reloaded = loaded.model;
    assert_eq!(net.predict(&x).unwrap(), reloaded.predict(&x).unwrap());
}

#[test]
fn extra_tensors_survive() {
    let net = InversionNet::<f64>::build(&ModelConfig::tiny(), 0).unwrap();
    let moment = Tensor::full(vec![2, 2], 0.25).unwrap();
    let bytes = encode_checkpoint(&net, &ArtifactMeta::default(), &[("optim.m.x".to_string(), &moment)]);
    let back = decode_checkpoint::<f64>(&bytes, None).unwrap();
    assert_eq!(back.extra, vec![("optim.m.x".to_string(), moment)]);
}

#[test]
fn truncated_and_foreign_files_rejected() {
    let net = InversionNet::<f32>::build(&ModelConfig::tiny(), 0).unwrap();
    let bytes = encode_checkpoint(&net, &ArtifactMeta::default(), &[]);
    for cut in [0, 3, 8, 100, bytes.len() / 2, bytes.len() - 1] {
        assert!(decode_checkpoint::<f32>(&bytes[..cut], None).is_err(), "cut at {cut}");
    }
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(decode_checkpoint::<f32>(&wrong_magic, None).is_err());
    let mut future = bytes;
    future[4] = 9;
    assert!(matches!(decode_checkpoint::<f32>(&future, None), Err(Error::UnknownVersion { .. })));
}

#[test]
fn cross_config_load_names_the_parameter() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("full.fwck");
    let full = InversionNet::<f32>::build(&ModelConfig::full(), 0).unwrap();
    save_checkpoint(&full, &ArtifactMeta::default(), &path).unwrap();
    match load_checkpoint_for::<f32>(&path, &ModelConfig::tiny()) {
        Err(Error::ParamShape { name, expected, found }) => {
            assert_eq!(name, "encoder.0.conv.weight");
            assert_eq!(expected, vec![8, 3, 7, 1]);
            assert_eq!(found, vec![32, 5, 7, 1]);
        }
        other => panic!("expected a shape error, got {:?}", other.map(|_| ())),
    }
    let tiny_path = dir.path().join("tiny.fwck");
    let tiny = InversionNet::<f32>::build(&ModelConfig::tiny(), 0).unwrap();
    save_checkpoint(&tiny, &ArtifactMeta::default(), &tiny_path).unwrap();
    let err = load_checkpoint_for::<f32>(&tiny_path, &ModelConfig::full()).unwrap_err();
    assert!(err.to_string().contains("encoder.0.conv.weight"), "{err}");
}

#[test]
fn missing_parameter_is_named() {
    let mut config = ModelConfig::tiny();
    let tiny = InversionNet::<f32>::build(&config, 0).unwrap();
    let bytes = encode_checkpoint(&tiny, &ArtifactMeta::default(), &[]);
    config.decoder.push(lorafwi_core::model::BlockSpec::conv3(8, 1));
    match decode_checkpoint::<f32>(&bytes, Some(&config)) {
        Err(Error::MissingParam(name)) => assert_eq!(name, "decoder.8.conv.weight"),
        other => panic!("expected a missing parameter, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn cast_preserves_values() {
    let net = InversionNet::<f32>::build(&ModelConfig::tiny(), 3).unwrap();
    let wide = net.cast::<f64>();
    for (a, b) in net.parameters().iter().zip(wide.parameters()) {
        assert!(a.value.data().iter().zip(b.value.data()).all(|(x, y)| f64::from(*x) == *y));
    }
}

//! The acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use lorafwi_cli::experiments::{pretrain, run_cell, score, CellSpec, Pretrained, TrainOpts};
use lorafwi_cli::report::{read_csv, Row, RowMethod, Split};
use lorafwi_core::data::{synthesize_dataset, Dataset, DatasetSpec, Difficulty, Family};
use lorafwi_core::lora::{attach, effective_weight, LoraAdapter, LoraConfig, ScalingMode};
use lorafwi_core::metrics::{mae, rmse, spatial_information, ssim};
use lorafwi_core::model::{
    encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, ArtifactMeta, InversionNet, ModelConfig,
    Network,
};
use lorafwi_core::nn::Mode;
use lorafwi_core::tensor::ops::{batch_norm2d_eval, batch_norm2d_train, conv2d, conv_transpose2d, ConvGeometry};
use lorafwi_core::tensor::{finite_difference_check, Scalar, Tape, Tensor, Var};
use lorafwi_core::train::{adamw_step, l1_loss, OptimizerState, TrainConfig};
use lorafwi_core::wavesim::{first_arrival_time, forward_model, CflReport, SimConfig, VelocityMap, CFL_LIMIT};
use lorafwi_core::Error;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FULL_PARAMS: usize = 24_404_801;
const FULL_LORA_R16: usize = 1_033_280;

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    if t > limit {
        return Err(format!("took {:.1}s, limit {}s", t.as_secs_f64(), limit.as_secs()));
    }
    Ok(())
}

fn random<T: Scalar>(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(rng.random_range(-1.0..1.0))).collect()).unwrap()
}

fn max_abs(t: &[f64]) -> f64 {
    t.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn param_counts() -> Outcome {
    let start = Instant::now();
    let base = InversionNet::<f32>::build(&ModelConfig::full(), 0).map_err(|e| e.to_string())?;
    let total = base.param_count(false);
    check!(total == FULL_PARAMS, "full preset has {total} parameters, pinned {FULL_PARAMS}");
    check!((total as f64 - 24.4e6).abs() <= 0.05 * 24.4e6, "{total} is not within 5% of 24.4M");
    let model = attach(base, LoraConfig::new(16, 16.0), 0).map_err(|e| e.to_string())?;
    let lora = model.trainable_param_count();
    check!(lora == FULL_LORA_R16, "r=16 adapter has {lora} parameters, pinned {FULL_LORA_R16}");
    check!((lora as f64 - 1.1e6).abs() <= 0.2 * 1.1e6, "{lora} is not within 20% of 1.1M");
    let ratio = lora as f64 / total as f64;
    check!(ratio < 0.06, "ratio {ratio:.4}");
    within(start, Duration::from_secs(1))?;
    Ok(format!("{total} base, {lora} adapter, ratio {ratio:.4}"))
}

fn project<'t>(y: Var<'t, f64>, w: &Tensor<f64>) -> lorafwi_core::tensor::Result<Var<'t, f64>> {
    let w = y.tape().constant(w.clone());
    Ok(y.mul(w)?.sum())
}

/// Worst relative error over every input of a layer function.
fn layer_check<const N: usize>(
    inputs: [&Tensor<f64>; N],
    out_shape: &[usize],
    rng: &mut ChaCha8Rng,
    layer: impl for<'t> Fn([Var<'t, f64>; N]) -> lorafwi_core::tensor::Result<Var<'t, f64>>,
) -> f64 {
    let proj = random::<f64>(out_shape, rng);
    (0..N)
        .map(|which| {
            finite_difference_check(
                |v| {
                    let t = v.tape();
                    let mut args = inputs.map(|x| t.constant(x.clone()));
                    args[which] = v;
                    project(layer(args)?, &proj)
                },
                inputs[which],
                1e-5,
            )
            .unwrap()
        })
        .fold(0.0, f64::max)
}

fn end_to_end_check() -> (f64, usize, usize) {
    let config = ModelConfig::tiny();
    let mut net = InversionNet::<f64>::build(&config, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random::<f64>(&config.input_shape(4), &mut rng);
    let proj = random::<f64>(&config.output_shape(4), &mut rng);
    let objective = |net: &mut InversionNet<f64>, tape: &Tape<f64>| -> f64 {
        let y = net.forward(tape.constant(x.clone()), Mode::Train).unwrap();
        let l = y.mul(tape.constant(proj.clone())).unwrap().sum();
        l.value().item().unwrap()
    };
    let grads = {
        let tape = Tape::new();
        let y = net.forward(tape.constant(x.clone()), Mode::Train).unwrap();
        let l = y.mul(tape.constant(proj.clone())).unwrap().sum();
        tape.backward(l).unwrap()
    };
    let names: Vec<String> = net.parameters().iter().map(|p| p.name.clone()).collect();
    let central = |net: &mut InversionNet<f64>, name: &str, i: usize, h: f64| {
        let shift = |net: &mut InversionNet<f64>, d: f64| {
            net.parameters_mut().into_iter().find(|p| p.name == name).unwrap().value.data_mut()[i] += d;
        };
        shift(net, h);
        let plus = objective(net, &Tape::no_grad());
        shift(net, -2.0 * h);
        let minus = objective(net, &Tape::no_grad());
        shift(net, h);
        (plus - minus) / (2.0 * h)
    };
    let (mut worst, mut checked, mut kinked) = (0.0f64, 0, 0);
    for name in &names {
        let analytic = grads.get(name).unwrap().clone();
        let scale = max_abs(analytic.data()).max(1e-12);
        for _ in 0..3 {
            let i = rng.random_range(0..analytic.numel());
            let numeric = central(&mut net, name, i, 1e-5);
            // A leaky ReLU kink inside the step shows up as disagreement
            // with a ten times smaller step.
            if (numeric - central(&mut net, name, i, 1e-6)).abs() > 1e-5 * scale {
                kinked += 1;
                continue;
            }
            worst = worst.max((analytic.data()[i] - numeric).abs() / scale);
            checked += 1;
        }
    }
    (worst, checked, kinked)
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut errs: Vec<(&str, f64)> = Vec::new();

    let g = ConvGeometry::new((2, 1), (3, 0));
    let (x, w, b) = (random(&[2, 2, 9, 3], &mut rng), random(&[3, 2, 7, 1], &mut rng), random(&[3], &mut rng));
    errs.push(("conv2d", layer_check([&x, &w, &b], &[2, 3, 5, 3], &mut rng, |[x, w, b]| conv2d(x, w, Some(b), g))));

    let g = ConvGeometry::new((2, 2), (1, 1));
    let (x, w, b) = (random(&[2, 3, 2, 3], &mut rng), random(&[3, 2, 4, 4], &mut rng), random(&[2], &mut rng));
    errs.push((
        "conv_transpose2d",
        layer_check([&x, &w, &b], &[2, 2, 4, 6], &mut rng, |[x, w, b]| conv_transpose2d(x, w, Some(b), g)),
    ));

    let (x, gamma, beta) = (random(&[3, 2, 2, 3], &mut rng), random(&[2], &mut rng), random(&[2], &mut rng));
    errs.push((
        "batch_norm train",
        layer_check([&x, &gamma, &beta], &[3, 2, 2, 3], &mut rng, |[x, g, b]| Ok(batch_norm2d_train(x, g, b, 1e-5)?.0)),
    ));
    errs.push((
        "batch_norm eval",
        layer_check([&x, &gamma, &beta], &[3, 2, 2, 3], &mut rng, |[x, g, b]| {
            batch_norm2d_eval(x, g, b, &[0.1, -0.2], &[0.8, 1.7], 1e-5)
        }),
    ));

    let x = random(&[2, 2, 4, 4], &mut rng);
    errs.push(("leaky_relu", layer_check([&x], &[2, 2, 4, 4], &mut rng, |[x]| Ok(x.leaky_relu(0.2)))));
    errs.push(("tanh", layer_check([&x], &[2, 2, 4, 4], &mut rng, |[x]| Ok(x.tanh()))));
    errs.push(("crop", layer_check([&x], &[2, 2, 2, 2], &mut rng, |[x]| x.crop2d(1, 1))));
    let (a, b) = (random(&[3, 4], &mut rng), random(&[4, 2], &mut rng));
    errs.push(("matmul", layer_check([&a, &b], &[3, 2], &mut rng, |[a, b]| a.matmul(b))));

    let failed: Vec<String> = errs.iter().filter(|(_, e)| !(*e < 1e-4)).map(|(n, e)| format!("{n} {e:.2e}")).collect();
    check!(failed.is_empty(), "layer checks above 1e-4: {}", failed.join(", "));
    let layer_worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);

    let (worst, checked, kinked) = end_to_end_check();
    check!(checked >= 120 && kinked * 5 < checked, "end-to-end: {checked} entries checked, {kinked} at kinks");
    check!(worst < 1e-4, "end-to-end worst relative error {worst:.2e}");
    within(start, Duration::from_secs(60))?;
    Ok(format!(
        "{} layer types worst {layer_worst:.1e}; tiny model {checked} entries worst {worst:.1e}",
        errs.len()
    ))
}

fn tiny<T: Scalar>(seed: u64) -> InversionNet<T> {
    InversionNet::build(&ModelConfig::tiny(), seed).unwrap()
}

fn fit<T: Scalar, N: Network<T>>(model: &mut N, steps: usize, lr: f64) {
    let c = ModelConfig::tiny();
    let config = TrainConfig::desk();
    let mut state = OptimizerState::default();
    for s in 0..steps {
        let mut rng = ChaCha8Rng::seed_from_u64(s as u64 % 3);
        let x = random::<T>(&c.input_shape(2), &mut rng);
        let y = random::<T>(&c.output_shape(2), &mut rng);
        let tape = Tape::new();
        let pred = model.forward(tape.constant(x), Mode::Train).unwrap();
        let loss = l1_loss(pred, tape.constant(y)).unwrap();
        let grads = tape.backward(loss).unwrap();
        adamw_step(model.parameters_mut(), &grads, &mut state, lr, &config).unwrap();
    }
}

fn diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.max_abs_diff(b).unwrap().to_f64_lossy()
}

fn lora_algebra() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random::<f64>(&ModelConfig::tiny().input_shape(2), &mut rng);

    let mut base = tiny::<f64>(1);
    let expected = base.predict(&x).unwrap();
    let mut model = attach(base.clone(), LoraConfig::new(4, 4.0), 2).unwrap();
    let identity = diff(&model.predict(&x).unwrap(), &expected);
    check!(identity <= 1e-12, "identity at init off by {identity:e}");

    fit(&mut model, 10, 1e-3);
    let adapted = model.predict(&x).unwrap();
    let (_, first) = model.clone().into_parts();
    let merge = diff(&model.clone().merge().predict(&x).unwrap(), &adapted);
    check!(merge <= 1e-10, "merged model off by {merge:e}");

    let mut other = attach(base.clone(), LoraConfig::new(8, 16.0), 3).unwrap();
    fit(&mut other, 3, 1e-3);
    let (_, second) = other.clone().into_parts();
    let swapped_in = model.swap_adapter(second).map_err(|e| e.to_string())?;
    let swap_a = diff(&model.predict(&x).unwrap(), &other.predict(&x).unwrap());
    model.swap_adapter(swapped_in).map_err(|e| e.to_string())?;
    let swap_b = diff(&model.predict(&x).unwrap(), &adapted);
    check!(swap_a <= 1e-12 && swap_b <= 1e-12, "swap off by {swap_a:e} / {swap_b:e}");
    check!(model.adapter() == &first, "swapping back did not restore the adapter");

    let frozen = tiny::<f32>(4);
    let mut m32 = attach(frozen.clone(), LoraConfig::new(4, 16.0), 5).unwrap();
    fit(&mut m32, 50, 1e-3);
    let same = |a: &Tensor<f32>, b: &Tensor<f32>| a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits());
    let params_same = frozen.parameters().iter().zip(m32.base().parameters()).all(|(p, q)| same(&p.value, &q.value));
    let buffers_same = frozen.buffers().iter().zip(m32.base().buffers()).all(|((_, p), (_, q))| same(p, q));
    check!(params_same && buffers_same, "base changed during 50 adapter steps");

    let r = 3;
    let mut ranked = attach(tiny::<f64>(6), LoraConfig::new(r, 6.0), 7).unwrap();
    fit(&mut ranked, 5, 1e-2);
    let s = ranked.adapter().config.scale();
    let mut worst_rank = 0;
    for layer in &ranked.adapter().layers {
        let d0 = layer.base_shape[0];
        let k: usize = layer.base_shape[1..].iter().product();
        let sv = DMatrix::from_row_slice(d0, k, layer.delta(s).data()).singular_values();
        let top = sv.max();
        worst_rank = worst_rank.max(sv.iter().filter(|&&v| v > 1e-10 * top).count());
    }
    check!(worst_rank <= r, "an update has rank {worst_rank} > {r}");

    let cfg = |alpha| LoraConfig::new(4, alpha).with_scaling(ScalingMode::Alpha);
    let (_, adapter) = {
        let mut m = attach(base.clone(), cfg(1.0), 8).unwrap();
        fit(&mut m, 3, 1e-3);
        m.into_parts()
    };
    let target = adapter.layers[2].target.clone();
    let w0 = base.parameter(&target).unwrap().value.clone();
    let delta = |alpha: f64| {
        let mut a: LoraAdapter<f64> = adapter.clone();
        a.config = cfg(alpha);
        effective_weight(&base, &a, &target).unwrap().zip_map(&w0, "sub", |p, q| p - q).unwrap()
    };
    let unit = delta(1.0);
    let mut linear = 0.0f64;
    for alpha in [0.5, 3.0, 16.0] {
        let scaled = unit.map(|v| alpha * v);
        linear = linear.max(diff(&delta(alpha), &scaled) / max_abs(scaled.data()).max(1.0));
    }
    check!(max_abs(unit.data()) > 0.0 && linear <= 1e-12, "alpha scaling off by {linear:e}");
    within(start, Duration::from_secs(60))?;
    Ok(format!("identity {identity:.0e}, merge {merge:.0e}, max update rank {worst_rank} <= {r}"))
}

fn scheduler() -> Outcome {
    let c = TrainConfig::full_scale();
    let expected = [(0, 8e-9), (5, 8e-4), (90, 8e-5), (100, 8e-6)];
    for (epoch, lr) in expected {
        let got = c.lr_at(epoch).map_err(|e| e.to_string())?;
        check!(got == lr, "epoch {epoch}: {got:e}, expected {lr:e}");
    }
    Ok("8e-9, 8e-4, 8e-5, 8e-6 at epochs 0, 5, 90, 100".into())
}

const N: usize = 16;

fn ssim_oracle(x: &[f64], y: &[f64]) -> f64 {
    let mut g = [[0.0f64; 11]; 11];
    for (u, row) in g.iter_mut().enumerate() {
        for (v, w) in row.iter_mut().enumerate() {
            let (du, dv) = (u as f64 - 5.0, v as f64 - 5.0);
            *w = (-(du * du + dv * dv) / 4.5).exp();
        }
    }
    let total: f64 = g.iter().flatten().sum();
    g.iter_mut().flatten().for_each(|w| *w /= total);
    let (c1, c2) = (1e-4, 9e-4);
    let mut acc = 0.0;
    let windows = (N - 10) * (N - 10);
    for i in 0..=N - 11 {
        for j in 0..=N - 11 {
            let at = |img: &[f64], u: usize, v: usize| img[(i + u) * N + j + v];
            let (mut mx, mut my) = (0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    mx += g[u][v] * at(x, u, v);
                    my += g[u][v] * at(y, u, v);
                }
            }
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for u in 0..11 {
                for v in 0..11 {
                    let (a, b) = (at(x, u, v) - mx, at(y, u, v) - my);
                    vx += g[u][v] * a * a;
                    vy += g[u][v] * b * b;
                    cov += g[u][v] * a * b;
                }
            }
            acc += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    acc / windows as f64
}

fn sobel_oracle(x: &[f64]) -> f64 {
    let k = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let mut total = 0.0;
    for i in 1..N - 1 {
        for j in 1..N - 1 {
            let (mut gx, mut gy) = (0.0, 0.0);
            for u in 0..3 {
                for v in 0..3 {
                    let p = x[(i + u - 1) * N + j + v - 1];
                    gx += k[u][v] * p;
                    gy += k[v][u] * p;
                }
            }
            total += (gx * gx + gy * gy).sqrt();
        }
    }
    total / ((N - 2) * (N - 2)) as f64
}

fn metric_oracles() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let x = random::<f64>(&[N, N], &mut rng).map(|v| 0.5 * v + 0.5);
        let y = random::<f64>(&[N, N], &mut rng).map(|v| 0.5 * v + 0.5);
        let r: Vec<f64> = x.data().iter().zip(y.data()).map(|(a, b)| a - b).collect();
        let mae_o = r.iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64;
        let rmse_o = (r.iter().map(|v| v * v).sum::<f64>() / r.len() as f64).sqrt();
        let got = [
            (mae(&x, &y), mae_o),
            (rmse(&x, &y), rmse_o),
            (ssim(&x, &y), ssim_oracle(x.data(), y.data())),
            (spatial_information(&x), sobel_oracle(x.data())),
        ];
        for (lib, oracle) in got {
            worst = worst.max((lib.map_err(|e| e.to_string())? - oracle).abs());
        }
        let (m, s) = (mae(&x, &y).unwrap(), rmse(&x, &y).unwrap());
        check!(m <= s, "mae {m} > rmse {s}");
        let self_ssim = ssim(&x, &x).unwrap();
        check!(self_ssim == 1.0, "ssim(x, x) = {self_ssim}");
    }
    check!(worst <= 1e-9, "worst oracle difference {worst:e}");
    within(start, Duration::from_secs(10))?;
    Ok(format!("50 random 16x16 pairs, worst difference {worst:.1e}"))
}

fn wave_physics() -> Outcome {
    let start = Instant::now();
    let (c, size, src) = (2000.0, 80, 20);
    let vel = VelocityMap::constant(size, size, c, 10.0).map_err(|e| e.to_string())?;
    let mut cfg = SimConfig::desk(size, 1, 450);
    cfg.sources = vec![(0, src)];
    cfg.receiver_cols = [5, 10, 15, 20, 25].iter().map(|o| src + o).collect();
    let g = forward_model(&vel, &cfg).map_err(|e| e.to_string())?;
    let mut worst_steps = 0.0f64;
    for (r, &col) in cfg.receiver_cols.iter().enumerate() {
        let expected = (col - src) as f64 * cfg.dx / c;
        let picked = first_arrival_time(&g.trace(0, r), &cfg, 0.05).ok_or("no arrival picked")?;
        worst_steps = worst_steps.max((picked - expected).abs() / cfg.dt);
    }
    check!(worst_steps <= 2.0, "first arrival off by {worst_steps:.2} steps");

    let mut grid = vec![2000.0; 32 * 32];
    grid[16 * 32..].iter_mut().for_each(|v| *v = 3500.0);
    let layered = VelocityMap::new(Tensor::new(vec![32, 32], grid).unwrap(), 10.0).unwrap();
    let base_cfg = SimConfig::desk(32, 3, 300);
    let base = forward_model(&layered, &base_cfg).unwrap();
    let mut scaled_cfg = base_cfg.clone();
    scaled_cfg.amplitude = 2.5;
    let scaled = forward_model(&layered, &scaled_cfg).unwrap();
    let expect: Vec<f64> = base.data().data().iter().map(|v| 2.5 * v).collect();
    let dev = expect.iter().zip(scaled.data().data()).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / max_abs(&expect);
    check!(dev <= 1e-10, "amplitude linearity off by {dev:e}");

    let mut silent = base_cfg.clone();
    silent.amplitude = 0.0;
    let quiet = forward_model(&layered, &silent).unwrap();
    check!(quiet.data().data().iter().all(|&v| v == 0.0), "zero source gave a nonzero gather");

    let bad = CflReport::new(4500.0, 10.0, 2e-3);
    let ok = CflReport::new(4500.0, 10.0, 1e-3);
    check!((bad.courant - 0.9).abs() < 1e-15 && !bad.is_ok(), "courant 0.9 accepted");
    check!((ok.courant - 0.45).abs() < 1e-15 && ok.is_ok(), "courant 0.45 rejected");
    check!(0.45 < CFL_LIMIT && CFL_LIMIT < 0.9, "limit {CFL_LIMIT}");
    let fast = VelocityMap::constant(16, 16, 4500.0, 10.0).unwrap();
    let mut unstable = SimConfig::desk(16, 1, 10);
    unstable.dt = 2e-3;
    check!(matches!(forward_model(&fast, &unstable), Err(Error::Cfl(_))), "unstable step was simulated");
    within(start, Duration::from_secs(30))?;
    Ok(format!("arrivals within {worst_steps:.2} dt, linearity {dev:.0e}"))
}

struct SeedOutcome {
    zero_shot: f64,
    fft: f64,
    lora: f64,
    baseline: f64,
    fraction: f64,
}

impl SeedOutcome {
    fn a(&self) -> bool {
        self.fft <= 0.8 * self.zero_shot && self.lora <= 0.8 * self.zero_shot
    }
    fn b(&self) -> bool {
        self.fraction < 0.1
    }
    fn c(&self) -> bool {
        self.baseline >= self.fft
    }
}

fn dataset(family: Family, difficulty: Difficulty, seed: u64, config: &ModelConfig) -> Dataset {
    let spec = DatasetSpec::for_model(family, difficulty, 64, seed, config).unwrap();
    synthesize_dataset(&spec).unwrap()
}

fn desk_seed(seed: u64) -> Result<SeedOutcome, String> {
    let config = ModelConfig::tiny();
    let pretrain_sets = [
        dataset(Family::FlatVel, Difficulty::A, 1000 * seed + 1, &config),
        dataset(Family::CurveVel, Difficulty::A, 1000 * seed + 2, &config),
    ];
    let task = dataset(Family::FlatFault, Difficulty::B, 1000 * seed + 3, &config);
    let opts = TrainOpts {
        seed,
        ..TrainOpts::default()
    };
    let run = pretrain(&pretrain_sets, &config, &opts, None, None).map_err(|e| format!("{e:#}"))?;
    let pfm = Pretrained {
        net: run.net,
        meta: run.meta,
        digest: format!("seed{seed}"),
    };
    let stats = pfm.meta.normalization.ok_or("no normalization stats")?;
    let fft_spec = CellSpec::new(RowMethod::Fft, opts.clone());
    let zero_shot = score(&mut pfm.net.clone(), &task, &stats, &fft_spec).map_err(|e| format!("{e:#}"))?.mae;
    let cell = |spec: &CellSpec, pfm: Option<&Pretrained>| run_cell("finetune", pfm, &task, &config, spec).map_err(|e| format!("{e:#}"));
    let fft = cell(&fft_spec, Some(&pfm))?;
    let lora_spec = CellSpec {
        lora: Some(LoraConfig::new(4, 4.0)),
        ..CellSpec::new(RowMethod::Lora, opts.clone())
    };
    let lora = cell(&lora_spec, Some(&pfm))?;
    let baseline = cell(&CellSpec::new(RowMethod::Baseline, opts.clone()), None)?;
    Ok(SeedOutcome {
        zero_shot,
        fft: fft.row.mae,
        lora: lora.row.mae,
        baseline: baseline.row.mae,
        fraction: lora.row.trainable_params as f64 / lora.row.total_params as f64,
    })
}

fn desk_trend() -> Outcome {
    let start = Instant::now();
    let mut outcomes = Vec::new();
    for seed in [0, 1, 2] {
        let o = desk_seed(seed)?;
        eprintln!(
            "  seed {seed}: zero-shot {:.4}, fft {:.4}, lora {:.4}, baseline {:.4}, lora fraction {:.3}",
            o.zero_shot, o.fft, o.lora, o.baseline, o.fraction
        );
        outcomes.push(o);
    }
    let votes = |f: fn(&SeedOutcome) -> bool| outcomes.iter().filter(|o| f(o)).count();
    let (a, b, c) = (votes(SeedOutcome::a), votes(SeedOutcome::b), votes(SeedOutcome::c));
    let summary = format!("seeds passing (a) {a}/3, (b) {b}/3, (c) {c}/3");
    check!(a >= 2 && b >= 2 && c >= 2, "{summary}");
    within(start, Duration::from_secs(15 * 60))?;
    Ok(format!("{summary}, {:.0}s", start.elapsed().as_secs_f64()))
}

fn lorafwi(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_lorafwi"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    check!(
        out.status.success(),
        "lorafwi {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr).trim()
    );
    Ok(())
}

fn rows(path: &Path) -> Result<Vec<Row>, String> {
    read_csv(path).map_err(|e| format!("{e:#}"))
}

fn protocol_harness() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    for (family, difficulty, n) in [
        ("flat-vel", "A", "20"),
        ("curve-vel", "A", "20"),
        ("flat-fault", "B", "20"),
        ("flat-vel", "B", "40"),
    ] {
        let out = format!("{family}-{difficulty}.fwds");
        lorafwi(d, &["gen-data", "--family", family, "--difficulty", difficulty, "--n", n, "--out", &out])?;
    }
    fn with<'a>(head: &[&'a str]) -> Vec<&'a str> {
        [head, &["--epochs", "1", "--batch-size", "4"][..]].concat()
    }
    lorafwi(d, &with(&["pretrain", "--datasets", "flat-vel-A.fwds,curve-vel-A.fwds", "--out", "pfm.fwck"]))?;
    lorafwi(
        d,
        &with(&[
            "finetune", "--pfm", "pfm.fwck", "--dataset", "flat-vel-B.fwds", "--method", "fft", "--out", "fft.fwck",
            "--report", "fft.csv",
        ]),
    )?;
    lorafwi(
        d,
        &[
            "eval",
            "--model",
            "fft.fwck",
            "--datasets",
            "flat-vel-B.fwds,flat-vel-A.fwds,curve-vel-A.fwds,flat-fault-B.fwds",
            "--ood",
            "--out",
            "eval.csv",
        ],
    )?;
    let eval = rows(&d.join("eval.csv"))?;
    let ids = eval.iter().filter(|r| r.split == Split::Id).count();
    let oods = eval.iter().filter(|r| r.split == Split::Ood).count();
    check!(eval.len() == 4 && ids == 1 && oods == 3, "eval: {} rows, {ids} ID, {oods} OOD", eval.len());
    check!(
        eval.iter().any(|r| r.split == Split::Id && r.test_dataset == "flat-vel-B"),
        "the ID row is not the fine-tuning dataset"
    );

    lorafwi(d, &with(&["lowdata", "--pfm", "pfm.fwck", "--dataset", "flat-vel-B.fwds", "--out", "low.csv"]))?;
    let low = rows(&d.join("low.csv"))?;
    check!(low.len() == 10, "lowdata: {} rows", low.len());
    let mut fractions: Vec<u32> = low.iter().map(|r| r.data_fraction).collect();
    fractions.sort_unstable();
    fractions.dedup();
    check!(fractions == [10, 25, 50, 75, 100], "lowdata fractions {fractions:?}");
    for f in [10, 25, 50, 75, 100] {
        for m in [RowMethod::Fft, RowMethod::Lora] {
            let n = low.iter().filter(|r| r.data_fraction == f && r.method == m).count();
            check!(n == 1, "lowdata has {n} rows for {m} at {f}%");
        }
        let fft = low.iter().find(|r| r.data_fraction == f && r.method == RowMethod::Fft).unwrap();
        let lora = low.iter().find(|r| r.data_fraction == f && r.method == RowMethod::Lora).unwrap();
        let expected = (fft.mae - lora.mae) / fft.mae;
        let got = lora.improvement_mae.ok_or("missing improvement column")?;
        check!((got - expected).abs() <= 1e-12 * expected.abs().max(1.0), "improvement at {f}%: {got} vs {expected}");
    }

    lorafwi(d, &with(&["sweep", "--pfm", "pfm.fwck", "--dataset", "flat-vel-B.fwds", "--out", "sweep.csv"]))?;
    let sweep = rows(&d.join("sweep.csv"))?;
    let mut ranks: Vec<usize> = sweep.iter().filter_map(|r| r.rank).collect();
    ranks.sort_unstable();
    check!(ranks == [4, 8, 16, 32, 64, 128], "sweep ranks {ranks:?}");
    check!(sweep.iter().filter(|r| r.best).count() == 1, "sweep must flag one best row");

    lorafwi(d, &["report", "--in", "low.csv", "--plots", "plots"])?;
    for f in ["mae.png", "rmse.png", "ssim.png", "summary.md"] {
        check!(d.join("plots").join(f).is_file(), "report did not write {f}");
    }
    Ok("eval 1 ID + 3 OOD, lowdata 5x2, sweep 6 ranks, report 3 PNG + summary".into())
}

fn bitwise<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(p, q)| p.to_f64_lossy().to_bits() == q.to_f64_lossy().to_bits())
}

fn serialization() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = ModelConfig::tiny();
    let mut sim = SimConfig::desk(12, 2, 40);
    sim.receiver_cols = (0..12).collect();
    let ds = synthesize_dataset(&DatasetSpec {
        family: Family::CurveFault,
        difficulty: Difficulty::A,
        n_samples: 3,
        seed: 9,
        sim,
        size: 12,
    })
    .map_err(|e| e.to_string())?;
    let ds_path = dir.path().join("cf.fwds");
    ds.save(&ds_path).map_err(|e| e.to_string())?;
    let back = Dataset::load(&ds_path).map_err(|e| e.to_string())?;
    check!(back.samples == ds.samples && back.stats == ds.stats, "dataset changed on reload");
    let bytes = std::fs::read(&ds_path).unwrap();
    check!(bytes == back.encode(), "dataset re-encoding differs");
    for i in 0..bytes.len() {
        let mut bad = bytes.clone();
        bad[i] ^= 0x01;
        check!(matches!(Dataset::decode(&bad, "x"), Err(Error::Corrupt(_))), "flip at byte {i} not detected");
    }

    let mut net = tiny::<f32>(5);
    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    net.forward(tape.constant(random(&config.input_shape(2), &mut rng)), Mode::Train).unwrap();
    let meta = ArtifactMeta {
        trained_on: vec!["flat-vel-B".into()],
        method: Some("fft".into()),
        ..ArtifactMeta::default()
    };
    let ck_path = dir.path().join("m.fwck");
    save_checkpoint(&net, &meta, &ck_path).map_err(|e| e.to_string())?;
    let loaded = load_checkpoint::<f32>(&ck_path).map_err(|e| e.to_string())?;
    let params_same = net.parameters().iter().zip(loaded.model.parameters()).all(|(p, q)| p.name == q.name && bitwise(&p.value, &q.value));
    let buffers_same = net.buffers().iter().zip(loaded.model.buffers()).all(|((_, p), (_, q))| bitwise(p, q));
    check!(params_same && buffers_same && loaded.meta == meta, "checkpoint changed on reload");
    check!(std::fs::read(&ck_path).unwrap() == encode_checkpoint(&loaded.model, &meta, &[]), "checkpoint re-encoding differs");

    let mut model = attach(net.clone(), LoraConfig::new(4, 16.0), 2).unwrap();
    fit(&mut model, 2, 1e-3);
    let ad_path = dir.path().join("a.fwla");
    model.adapter().save(&meta, &ad_path).map_err(|e| e.to_string())?;
    let (adapter, ad_meta) = LoraAdapter::<f32>::load(&ad_path).map_err(|e| e.to_string())?;
    let layers_same = model
        .adapter()
        .layers
        .iter()
        .zip(&adapter.layers)
        .all(|(p, q)| bitwise(&p.a.value, &q.a.value) && bitwise(&p.b.value, &q.b.value));
    check!(layers_same && ad_meta == meta, "adapter changed on reload");
    check!(std::fs::read(&ad_path).unwrap() == adapter.encode(&meta), "adapter re-encoding differs");

    let full_path = dir.path().join("full.fwck");
    save_checkpoint(&InversionNet::<f32>::build(&ModelConfig::full(), 0).unwrap(), &ArtifactMeta::default(), &full_path)
        .map_err(|e| e.to_string())?;
    match load_checkpoint_for::<f32>(&full_path, &config) {
        Err(Error::ParamShape { name, .. }) => check!(name == "encoder.0.conv.weight", "error names {name}"),
        other => return Err(format!("cross-config load gave {:?}", other.map(|_| ()))),
    }
    let err = load_checkpoint_for::<f32>(&ck_path, &ModelConfig::full()).err().ok_or("tiny loaded as full")?;
    check!(err.to_string().contains("encoder.0.conv.weight"), "error does not name the parameter: {err}");
    within(start, Duration::from_secs(10))?;
    Ok(format!("{} dataset byte flips caught, parameter named on shape mismatch", bytes.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("parameter counts", param_counts),
        ("gradient integrity", gradients),
        ("LoRA algebra", lora_algebra),
        ("scheduler exactness", scheduler),
        ("metric oracles", metric_oracles),
        ("wave physics", wave_physics),
        ("desk-scale trend", desk_trend),
        ("protocol harness", protocol_harness),
        ("serialization", serialization),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("criterion {n} ({name}): PASS {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n} ({name}): FAIL {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

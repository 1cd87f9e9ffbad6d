use lorafwi_core::tensor::Tensor;
use lorafwi_core::wavesim::{
    cfl_check, first_arrival_time, forward_model, CflReport, Propagator, SimConfig, VelocityMap, CFL_LIMIT,
};
use lorafwi_core::Error;

fn single_shot(size: usize, source_col: usize, nt: usize) -> SimConfig {
    let mut cfg = SimConfig::desk(size, 1, nt);
    cfg.sources = vec![(0, source_col)];
    cfg
}

fn rel_max_diff(a: &[f64], b: &[f64]) -> f64 {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

#[test]
fn zero_source_gives_zero_gather() {
    let vel = VelocityMap::constant(24, 24, 2500.0, 10.0).unwrap();
    let mut cfg = SimConfig::desk(24, 2, 200);
    cfg.amplitude = 0.0;
    let g = forward_model(&vel, &cfg).unwrap();
    assert!(g.data().data().iter().all(|&v| v == 0.0));
}

#[test]
fn first_step_is_scaled_source() {
    let vel = VelocityMap::constant(16, 16, 3000.0, 10.0).unwrap();
    let cfg = single_shot(16, 8, 4);
    let prop = Propagator::new(&vel, &cfg).unwrap();
    let zero = vec![0.0; prop.len()];
    let mut next = vec![0.0; prop.len()];
    let s = 0.37;
    let idx = prop.index(5, 8);
    prop.step(&zero, &zero, Some((idx, s)), &mut next);
    let expected = 3000.0f64.powi(2) * cfg.dt * cfg.dt * s;
    assert!((next[idx] - expected).abs() <= 1e-12 * expected);
    assert!(next.iter().enumerate().all(|(i, &v)| i == idx || v == 0.0));
}

#[test]
fn homogeneous_first_arrivals_match_distance_over_speed() {
    let c = 2000.0;
    let size = 80;
    let src = 20;
    let vel = VelocityMap::constant(size, size, c, 10.0).unwrap();
    let mut cfg = single_shot(size, src, 450);
    cfg.receiver_cols = [5, 10, 15, 20, 25].iter().map(|o| src + o).collect();
    let g = forward_model(&vel, &cfg).unwrap();
    for (r, &col) in cfg.receiver_cols.iter().enumerate() {
        let d = (col - src) as f64 * cfg.dx;
        let picked = first_arrival_time(&g.trace(0, r), &cfg, 0.05).unwrap();
        let err = (picked - d / c).abs();
        assert!(err <= 2.0 * cfg.dt, "offset {d} m: picked {picked}, expected {}", d / c);
    }
}

#[test]
fn source_amplitude_is_linear() {
    let mut grid = vec![2000.0; 32 * 32];
    grid[16 * 32..].iter_mut().for_each(|v| *v = 3500.0);
    let vel = VelocityMap::new(Tensor::new(vec![32, 32], grid).unwrap(), 10.0).unwrap();
    let cfg = SimConfig::desk(32, 3, 300);
    let base = forward_model(&vel, &cfg).unwrap();
    let mut scaled = cfg.clone();
    scaled.amplitude = 2.5;
    let scaled = forward_model(&vel, &scaled).unwrap();
    let expect: Vec<f64> = base.data().data().iter().map(|v| 2.5 * v).collect();
    assert!(rel_max_diff(&expect, scaled.data().data()) <= 1e-10);
}

#[test]
fn source_receiver_reciprocity() {
    let size = 40;
    let mut grid = vec![1800.0; size * size];
    for i in 12..size {
        for j in 0..size {
            grid[i * size + j] = if i < 25 { 2600.0 } else { 3900.0 };
        }
    }
    let vel = VelocityMap::new(Tensor::new(vec![size, size], grid).unwrap(), 10.0).unwrap();
    let (a, b) = (8, 29);
    let mut cfg = single_shot(size, a, 400);
    cfg.receiver_cols = vec![b];
    let ab = forward_model(&vel, &cfg).unwrap().trace(0, 0);
    cfg.sources = vec![(0, b)];
    cfg.receiver_cols = vec![a];
    let ba = forward_model(&vel, &cfg).unwrap().trace(0, 0);
    assert!(rel_max_diff(&ab, &ba) <= 1e-6, "{}", rel_max_diff(&ab, &ba));
}

#[test]
fn reflection_arrives_after_two_way_time() {
    let size = 60;
    let (c1, c2, depth) = (2000.0, 4000.0, 30);
    let homogeneous = VelocityMap::constant(size, size, c1, 10.0).unwrap();
    let mut grid = vec![c1; size * size];
    grid[depth * size..].iter_mut().for_each(|v| *v = c2);
    let layered = VelocityMap::new(Tensor::new(vec![size, size], grid).unwrap(), 10.0).unwrap();
    let mut cfg = single_shot(size, 30, 500);
    cfg.receiver_cols = vec![30];
    let direct = forward_model(&homogeneous, &cfg).unwrap().trace(0, 0);
    let total = forward_model(&layered, &cfg).unwrap().trace(0, 0);
    let reflected: Vec<f64> = total.iter().zip(&direct).map(|(t, d)| t - d).collect();
    let peak = reflected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(peak > 1e-3 * direct.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    // Nothing from the interface may reach the surface before the two-way
    // time beyond the small lead-in of the wavelet.
    let two_way = 2.0 * depth as f64 * cfg.dx / c1;
    let quiet = (0.9 * two_way / cfg.dt) as usize;
    let early = reflected[..quiet].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(early <= 1e-4 * peak, "early {early} vs peak {peak}");
    // Normal incidence on a flat interface: an image source at twice the depth.
    let picked = first_arrival_time(&reflected, &cfg, 0.05).unwrap();
    assert!((picked - two_way).abs() <= 3.0 * cfg.dt, "picked {picked}, two-way {two_way}");
}

#[test]
fn cfl_arithmetic() {
    let ok = CflReport::new(4500.0, 10.0, 1e-3);
    assert!((ok.courant - 0.45).abs() < 1e-15 && ok.is_ok());
    let bad = CflReport::new(4500.0, 10.0, 2e-3);
    assert!((bad.courant - 0.9).abs() < 1e-15 && !bad.is_ok());
    assert!(0.9 > CFL_LIMIT && 0.45 < CFL_LIMIT);
    assert!((ok.max_stable_dt - 10.0 / (4500.0 * 2f64.sqrt())).abs() < 1e-18);
    assert!((ok.max_stable_dt - 1.5713e-3).abs() < 1e-7);

    let vel = VelocityMap::constant(16, 16, 4500.0, 10.0).unwrap();
    let mut cfg = SimConfig::desk(16, 1, 10);
    assert!(cfl_check(&vel, &cfg).is_ok());
    cfg.dt = 2e-3;
    match forward_model(&vel, &cfg) {
        Err(Error::Cfl(msg)) => assert!(msg.contains("1.5713e-3"), "{msg}"),
        other => panic!("expected a CFL error, got {other:?}"),
    }
}

#[test]
fn bad_geometry_rejected() {
    let vel = VelocityMap::constant(16, 16, 2000.0, 10.0).unwrap();
    let mut cfg = SimConfig::desk(16, 1, 10);
    cfg.sources = vec![(0, 16)];
    assert!(forward_model(&vel, &cfg).is_err());
    let mut cfg = SimConfig::desk(16, 1, 10);
    cfg.receiver_cols.push(40);
    assert!(forward_model(&vel, &cfg).is_err());
}

#[test]
fn simulation_is_deterministic() {
    let vel = VelocityMap::constant(20, 20, 3100.0, 10.0).unwrap();
    let cfg = SimConfig::desk(20, 2, 120);
    let a = forward_model(&vel, &cfg).unwrap();
    let b = forward_model(&vel, &cfg).unwrap();
    assert!(a.data().data().iter().zip(b.data().data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert_eq!(a.velocity_hash, vel.hash());
    assert_eq!(a.config_hash, cfg.hash());
}

use convcaps::loss::{downsample_labels, margin_loss, masked_mse, total_loss, weighted_ce};
use convcaps::model::{ModelConfig, Network};
use convcaps::pipeline::{
    crop_volume, evaluate_loss, generate_phantom, normalize, sample_patches, sliding_window_infer,
    sliding_window_probs, train, train_step, Adam, PhantomSpec, Sample, Schedule, ScheduleState,
    TrainConfig,
};
use convcaps::tensor::{Tape, Tensor};
use convcaps::LabelVolume;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn phantom(extent: usize, seed: u64) -> Sample {
    let spec = PhantomSpec {
        extents: [extent; 3],
        classes: 2,
        modalities: 1,
        seed,
        ..PhantomSpec::default()
    };
    let (image, labels) = generate_phantom(&spec).unwrap();
    Sample { image, labels }
}

#[test]
fn default_phantoms_have_moderate_foreground() {
    for seed in 0..20 {
        let (volume, labels) = generate_phantom(&PhantomSpec { seed, ..PhantomSpec::default() }).unwrap();
        assert_eq!(volume.shape(), &[64, 64, 64, 2]);
        assert!(labels.max_class() <= 3);
        let fg = labels.data().iter().filter(|&&l| l > 0).count() as f64 / labels.len() as f64;
        assert!((0.05..=0.6).contains(&fg), "seed {seed}: foreground {fg}");
    }
}

#[test]
fn normalize_is_idempotent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let v: Tensor<f64> = Tensor::rand_uniform(&[5, 4, 3, 3], -7.0, 30.0, &mut rng);
    let once = normalize(&v).unwrap();
    let twice = normalize(&once).unwrap();
    assert!(once.max_abs_diff(&twice) < 1e-7);
    for c in 0..3 {
        let ch: Vec<f64> = once.data().iter().skip(c).step_by(3).copied().collect();
        assert_eq!(ch.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(ch.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
    }
}

#[test]
fn biased_sampling_finds_sparse_foreground() {
    let mut labels = LabelVolume::filled([48; 3], 0);
    for x in 30..33 {
        for y in 5..8 {
            for z in 20..23 {
                labels.set(x, y, z, 1);
            }
        }
    }
    let volume = Tensor::zeros(&[48, 48, 48, 1]);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let patches = sample_patches(&volume, &labels, [8; 3], 100, 0.9, &mut rng).unwrap();
        let hits = patches.iter().filter(|p| p.labels.count(1) > 0).count();
        assert!(hits >= 80, "seed {seed}: {hits} of 100");
    }
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let s = phantom(32, 1);
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_patches(&s.image, &s.labels, [16; 3], 4, 0.5, &mut rng).unwrap()
    };
    let (a, b) = (draw(3), draw(3));
    for (p, q) in a.iter().zip(&b) {
        assert_eq!(p.image.data(), q.image.data());
        assert_eq!(p.labels, q.labels);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let mut net = Network::<f32>::build_convcaps(&ModelConfig::tiny(), 0).unwrap();
    let before = net.params.clone();
    let mut adam = Adam::new(&net, 0.0, 2e-6);
    let batch = [phantom(16, 2)];
    for _ in 0..3 {
        train_step(&mut net, &batch, &mut adam).unwrap();
    }
    for (a, b) in before.iter().zip(&net.params) {
        assert_eq!(a.value.data(), b.value.data(), "{}", a.name);
    }
}

#[test]
fn one_step_usually_lowers_the_loss() {
    let mut lowered = 0;
    for seed in 0..20 {
        let mut net = Network::<f32>::build_convcaps(&ModelConfig::tiny(), seed).unwrap();
        let batch = [phantom(16, seed)];
        let mut adam = Adam::new(&net, 1e-4, 2e-6);
        let before = train_step(&mut net, &batch, &mut adam).unwrap().total;
        let after = evaluate_loss(&net, &batch).unwrap().total;
        lowered += usize::from(after < before);
    }
    assert!(lowered >= 18, "loss fell on {lowered} of 20 seeds");
}

#[test]
fn zero_loss_weights_give_zero_gradients() {
    let cfg = ModelConfig {
        margin_weight: 0.0,
        ce_weight: 0.0,
        reconstruction_weight: 0.0,
        ..ModelConfig::tiny()
    };
    let net = Network::<f32>::build_convcaps(&cfg, 1).unwrap();
    let s = phantom(16, 3);
    let tape = Tape::new();
    let params = net.bind(&tape);
    let x = tape.constant(s.image.clone());
    let pass = net.forward(&tape, &params, x).unwrap();
    let target = tape.constant(downsample_labels(&s.labels, cfg.capsule_factor(), 2).unwrap());
    let m = margin_loss(&tape, pass.class_scores, target).unwrap();
    let ce = weighted_ce(&tape, pass.seg, &s.labels, &[1.0, 1.0]).unwrap();
    let r = masked_mse(&tape, pass.recon, x, &s.labels).unwrap();
    let (total, report) = total_loss(&tape, m, ce, r, cfg.loss_weights()).unwrap();
    assert_eq!(report.total, 0.0);
    let grads = tape.backward(total).unwrap();
    for (p, &v) in net.params.iter().zip(&params) {
        let g = grads.tensor(v);
        assert!(g.data().iter().all(|&x| x == 0.0), "{}", p.name);
    }
}

#[test]
fn sliding_window_matches_dense_averaging() {
    let net = Network::<f32>::build_convcaps(&ModelConfig::tiny(), 5).unwrap();
    let volume = phantom(48, 5).image;
    let (n, p, classes) = (48, 32, 2);
    let corners: Vec<[usize; 3]> = [0, 16]
        .iter()
        .flat_map(|&x| [0, 16].into_iter().flat_map(move |y| [0, 16].into_iter().map(move |z| [x, y, z])))
        .collect();
    let tiles: Vec<Tensor<f32>> = corners
        .iter()
        .map(|&c| net.predict(&crop_volume(&volume, c, [p; 3]).unwrap()).unwrap().seg)
        .collect();
    let probs = sliding_window_probs(&net, &volume, [p; 3], 0.5).unwrap();
    let labels = sliding_window_infer(&net, &volume, [p; 3], 0.5).unwrap();
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let mut acc = vec![0.0f64; classes];
                let mut count = 0;
                for (c, seg) in corners.iter().zip(&tiles) {
                    let inside = (0..3).all(|a| [x, y, z][a] >= c[a] && [x, y, z][a] < c[a] + p);
                    if inside {
                        count += 1;
                        for (k, v) in acc.iter_mut().enumerate() {
                            *v += seg.get(&[x - c[0], y - c[1], z - c[2], k]) as f64;
                        }
                    }
                }
                let mean: Vec<f64> = acc.iter().map(|v| v / count as f64).collect();
                for k in 0..classes {
                    let got = probs.get(&[x, y, z, k]) as f64;
                    assert!((got - mean[k]).abs() < 1e-6, "({x},{y},{z}) class {k}");
                }
                let want = if mean[1] > mean[0] { 1 } else { 0 };
                if (mean[1] - mean[0]).abs() > 1e-6 {
                    assert_eq!(labels.get(x, y, z), want, "({x},{y},{z})");
                }
            }
        }
    }
}

#[test]
fn whole_volume_window_is_one_forward() {
    let net = Network::<f32>::build_convcaps(&ModelConfig::tiny(), 6).unwrap();
    let volume = phantom(16, 6).image;
    let probs = sliding_window_probs(&net, &volume, [16; 3], 0.5).unwrap();
    assert_eq!(probs.data(), net.predict(&volume).unwrap().seg.data());
}

#[test]
fn schedule_replay_is_pure() {
    let schedule = Schedule {
        plateau_patience: 300,
        early_stop_patience: 700,
        ..Schedule::default()
    };
    let trace: Vec<f64> = (0..100).map(|i| ((i * 37) % 11) as f64 / 10.0 + i as f64 * 1e-3).collect();
    let replay = || {
        let mut s = ScheduleState::new(1e-4);
        let mut lrs = Vec::new();
        for (i, &d) in trace.iter().enumerate() {
            s = schedule.update(&s, d, (i as u64 + 1) * 100);
            lrs.push(s.lr);
        }
        lrs
    };
    assert_eq!(replay(), replay());
}

#[test]
fn hundred_iterations_are_bit_reproducible() {
    let train_set = [phantom(16, 8)];
    let cfg = TrainConfig {
        patch_size: [16; 3],
        max_iterations: 100,
        validation_interval: 50,
        seed: 8,
        ..TrainConfig::default()
    };
    let run = || {
        let mut net = Network::<f32>::build_convcaps(&ModelConfig::tiny(), 8).unwrap();
        let mut log = Vec::new();
        let out = train(&mut net, &train_set, &[], &cfg, &mut log).unwrap();
        (log, out.losses.len(), net.params)
    };
    let (log_a, n, params_a) = run();
    let (log_b, _, params_b) = run();
    assert_eq!(n, 100);
    assert_eq!(log_a, log_b);
    let text = String::from_utf8(log_a).unwrap();
    assert_eq!(text.lines().count(), 102);
    for (a, b) in params_a.iter().zip(&params_b) {
        assert_eq!(a.value.data(), b.value.data());
    }
}

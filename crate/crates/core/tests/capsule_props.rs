use convcaps::capsule::{capsule_length, conv_capsule, conv_capsule_params, dynamic_routing, squash};
use convcaps::tensor::{ConvSpec, Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], scale: f64, seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -scale, scale, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn squash_oracle(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|v| v * v).sum();
    if n2 == 0.0 {
        return vec![0.0; s.len()];
    }
    let f = n2 / (1.0 + n2) / n2.sqrt();
    s.iter().map(|v| v * f).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn couplings_are_distributions_at_every_iteration(
        n in 1usize..10,
        tout in 1usize..5,
        aout in 1usize..6,
        iterations in 1usize..5,
        scale in 0.01f64..20.0,
        seed in any::<u64>(),
    ) {
        let tape = Tape::<f64>::no_grad();
        let votes = tape.constant(random(&[n, tout, aout], scale, seed));
        let out = dynamic_routing(&tape, votes, iterations).unwrap();
        prop_assert_eq!(out.couplings.len(), iterations);
        for &c in &out.couplings {
            let c = tape.to_tensor(c);
            for row in c.data().chunks(tout) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
        let poses = tape.to_tensor(out.poses);
        for v in poses.data().chunks(aout) {
            prop_assert!(v.iter().map(|x| x * x).sum::<f64>().sqrt() < 1.0 - 1e-9);
        }
    }

    #[test]
    fn squash_matches_formula(len in 1usize..8, scale in 0.0f64..100.0, seed in any::<u64>()) {
        let s = random(&[3, len], scale, seed);
        let tape = Tape::<f64>::no_grad();
        let v = squash(&tape, tape.constant(s.clone())).unwrap();
        let got = tape.to_tensor(v);
        for (row, out) in s.data().chunks(len).zip(got.data().chunks(len)) {
            for (a, b) in squash_oracle(row).iter().zip(out) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn routing_is_bit_deterministic() {
    let votes = random(&[7, 3, 4], 2.0, 5);
    let run = || {
        let tape = Tape::<f64>::no_grad();
        let out = dynamic_routing(&tape, tape.constant(votes.clone()), 3).unwrap();
        (tape.to_tensor(out.poses), tape.to_tensor(out.final_couplings()))
    };
    let (p1, c1) = run();
    let (p2, c2) = run();
    assert_eq!(p1.data(), p2.data());
    assert_eq!(c1.data(), c2.data());
}

#[test]
fn pointwise_identity_capsule_is_squash() {
    let a = 5;
    let x = random(&[3, 2, 4, 1, a], 3.0, 9);
    let mut w = Tensor::zeros(&[1, 1, 1, 1, 1, a, a]);
    for i in 0..a {
        w.set(&[0, 0, 0, 0, 0, i, i], 1.0);
    }
    for iterations in 1..4 {
        let tape = Tape::<f64>::no_grad();
        let out = conv_capsule(
            &tape,
            tape.constant(x.clone()),
            tape.constant(w.clone()),
            &ConvSpec::cubic(1, 1, 1),
            iterations,
        )
        .unwrap();
        let poses = tape.to_tensor(out.poses);
        assert_eq!(poses.shape(), &[3, 2, 4, 1, a]);
        for (u, v) in x.data().chunks(a).zip(poses.data().chunks(a)) {
            for (p, q) in squash_oracle(u).iter().zip(v) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn strided_capsule_layer_shapes_and_lengths() {
    let tape = Tape::<f64>::no_grad();
    let x = tape.constant(random(&[6, 5, 4, 2, 3], 1.0, 1));
    let w = tape.constant(random(&[3, 3, 3, 2, 4, 3, 6], 0.5, 2));
    let out = conv_capsule(&tape, x, w, &ConvSpec::cubic(3, 2, 1), 3).unwrap();
    assert_eq!(tape.shape(out.poses), vec![3, 3, 2, 4, 6]);
    let len = capsule_length(&tape, out.poses).unwrap();
    let len = tape.to_tensor(len);
    assert_eq!(len.shape(), &[3, 3, 2, 4]);
    assert!(len.data().iter().all(|&l| (0.0..1.0).contains(&l)));
}

#[test]
fn closed_form_parameter_count() {
    assert_eq!(conv_capsule_params(3, 8, 8, 16, 16), 442_368);
    assert_eq!(conv_capsule_params(1, 1, 1, 1, 1), 1);
}

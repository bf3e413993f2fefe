//! Named checks of the library against independent oracles and invariants.

use std::collections::HashSet;
use std::time::Instant;

use convcaps::capsule::{conv_capsule, dynamic_routing, squash};
use convcaps::faults::{self, Fault};
use convcaps::loss::{downsample_labels, margin_loss, masked_mse, total_loss, weighted_ce, LossWeights};
use convcaps::metrics::{asd, dsc, precision_recall};
use convcaps::model::{ModelConfig, Network};
use convcaps::tensor::{grad_check, grad_check_entries, ConvSpec, Tape, Tensor, Var};
use convcaps::LabelVolume;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::CliError;

type Check = fn(&mut ChaCha8Rng) -> Result<String, String>;

const CHECKS: [(&str, Check); 14] = [
    ("grad.ops", grad_ops),
    ("grad.network", grad_network),
    ("squash.formula", squash_formula),
    ("routing.coupling_sums", coupling_sums),
    ("routing.pose_norms", pose_norms),
    ("routing.uniform_start", uniform_start),
    ("routing.rotation_equivariance", rotation_equivariance),
    ("loss.margin", loss_margin),
    ("loss.cross_entropy", loss_cross_entropy),
    ("loss.masked_mse", loss_masked_mse),
    ("loss.composition", loss_composition),
    ("metrics.set_oracles", metric_sets),
    ("metrics.surface_distance", metric_surface),
    ("metrics.worked_examples", metric_examples),
];

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, rng)
}

fn labels(shape: [usize; 3], classes: u8, rng: &mut ChaCha8Rng) -> LabelVolume {
    let n = shape.iter().product();
    LabelVolume::new(shape, (0..n).map(|_| rng.random_range(0..classes)).collect()).unwrap()
}

fn probe(tape: &Tape<f64>, y: Var, r: &Tensor<f64>) -> convcaps::Result<Var> {
    let r = tape.constant(r.clone());
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

fn grad_ops(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let err = |e: convcaps::Error| e.to_string();
    let mut worst = 0.0f64;
    let mut record = |name: &str, e: f64| {
        worst = worst.max(e);
        ensure(e < 1e-4, || format!("{name}: relative error {e:.2e}"))
    };

    let spec = ConvSpec::cubic(3, 2, 1);
    let w = uniform(&[3, 3, 3, 2, 3], -1.0, 1.0, rng);
    let b = uniform(&[3], -1.0, 1.0, rng);
    let r = uniform(&[2, 2, 2, 3], -1.0, 1.0, rng);
    let e = grad_check(
        |t, x| {
            let y = t.conv3d(x, t.constant(w.clone()), t.constant(b.clone()), &spec)?;
            probe(t, y, &r)
        },
        &uniform(&[3, 4, 3, 2], -1.0, 1.0, rng),
        1e-6,
    )
    .map_err(err)?;
    record("conv3d", e)?;

    let r = uniform(&[4, 6], -1.0, 1.0, rng);
    let e = grad_check(|t, x| probe(t, t.softmax(x, 1)?, &r), &uniform(&[4, 6], -2.0, 2.0, rng), 1e-6).map_err(err)?;
    record("softmax", e)?;

    let r = uniform(&[3, 5], -1.0, 1.0, rng);
    let e = grad_check(|t, x| probe(t, squash(t, x)?, &r), &uniform(&[3, 5], -2.0, 2.0, rng), 1e-6).map_err(err)?;
    record("squash", e)?;

    let r = uniform(&[3, 4], -1.0, 1.0, rng);
    let e = grad_check(
        |t, x| probe(t, dynamic_routing(t, x, 3)?.poses, &r),
        &uniform(&[5, 3, 4], -1.0, 1.0, rng),
        1e-6,
    )
    .map_err(err)?;
    record("routing", e)?;

    let r = uniform(&[4, 2, 4, 2], -1.0, 1.0, rng);
    let e = grad_check(|t, x| probe(t, t.upsample3d(x, 2)?, &r), &uniform(&[2, 1, 2, 2], -1.0, 1.0, rng), 1e-6)
        .map_err(err)?;
    record("upsample", e)?;

    let lab = labels([2, 2, 2], 3, rng);
    let onehot: Tensor<f64> = downsample_labels(&lab, 1, 3).map_err(err)?;
    let e = grad_check(
        |t, x| {
            let m = margin_loss(t, x, t.constant(onehot.clone()))?;
            let p = t.softmax(x, 3)?;
            let ce = weighted_ce(t, p, &lab, &[0.5, 1.0, 2.0])?;
            let r = masked_mse(t, x, t.constant(onehot.clone()), &lab)?;
            Ok(total_loss(t, m, ce, r, LossWeights::default())?.0)
        },
        &uniform(&[2, 2, 2, 3], 0.05, 0.95, rng),
        1e-6,
    )
    .map_err(err)?;
    record("losses", e)?;
    Ok(format!("conv3d, softmax, squash, routing, upsample, losses; worst {worst:.1e}"))
}

fn grad_network(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut net = Network::<f64>::build_convcaps(&ModelConfig::tiny(), 1).map_err(|e| e.to_string())?;
    // zero biases put ReLU inputs exactly on the kink; check at a generic point
    for p in net.params.iter_mut().filter(|p| p.name.ends_with(".bias")) {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.05..0.05));
    }
    let input = uniform(&[8, 8, 8, 1], 0.0, 1.0, rng);
    let mut lab = LabelVolume::filled([8; 3], 0);
    for x in 1..6 {
        for y in 2..7 {
            for z in 0..5 {
                lab.set(x, y, z, 1);
            }
        }
    }
    let cfg = &net.config;
    let mut worst = 0.0f64;
    for (i, p) in net.params.iter().enumerate() {
        let n = p.value.len();
        let entries: Vec<usize> = (0..2.min(n)).map(|_| rng.random_range(0..n)).collect();
        let e = grad_check_entries(
            |t, pv| {
                let params: Vec<Var> = net
                    .params
                    .iter()
                    .enumerate()
                    .map(|(j, q)| if j == i { pv } else { t.constant(q.value.clone()) })
                    .collect();
                let x = t.constant(input.clone());
                let pass = net.forward(t, &params, x)?;
                let target = t.constant(downsample_labels(&lab, cfg.capsule_factor(), cfg.classes)?);
                let m = margin_loss(t, pass.class_scores, target)?;
                let ce = weighted_ce(t, pass.seg, &lab, &vec![1.0; cfg.classes])?;
                let r = masked_mse(t, pass.recon, x, &lab)?;
                Ok(total_loss(t, m, ce, r, cfg.loss_weights())?.0)
            },
            &p.value,
            1e-6,
            &entries,
        )
        .map_err(|e| format!("{}: {e}", p.name))?;
        ensure(e < 1e-3, || format!("{}: relative error {e:.2e}", p.name))?;
        worst = worst.max(e);
    }
    Ok(format!("{} parameter tensors, worst {worst:.1e}", net.params.len()))
}

fn squash_formula(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let s = uniform(&[20, 6], -3.0, 3.0, rng);
    let tape = Tape::no_grad();
    let v = squash(&tape, tape.constant(s.clone())).map_err(|e| e.to_string())?;
    let v = tape.to_tensor(v);
    let mut worst = 0.0f64;
    for (row, out) in s.data().chunks(6).zip(v.data().chunks(6)) {
        let n2: f64 = row.iter().map(|x| x * x).sum();
        for (a, b) in row.iter().zip(out) {
            worst = worst.max((a * n2.sqrt() / (1.0 + n2) - b).abs());
        }
    }
    ensure(worst < 1e-12, || format!("squash deviates from |s|s/(1+|s|²) by {worst:.2e}"))?;
    Ok("20 vectors exact".into())
}

fn random_layer(rng: &mut ChaCha8Rng) -> (Tensor<f64>, Tensor<f64>, ConvSpec, usize, usize, usize) {
    let k = if rng.random_bool(0.5) { 1 } else { 3 };
    let (tin, tout, ain, aout) = (
        rng.random_range(1..=3),
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(2..=4),
    );
    let iters = rng.random_range(1..=4);
    let x = uniform(&[3, 2, 3, tin, ain], -3.0, 3.0, rng);
    let w = uniform(&[k, k, k, tin, tout, ain, aout], -2.0, 2.0, rng);
    (x, w, ConvSpec::cubic(k, rng.random_range(1..=2), 1), tout, aout, iters)
}

fn coupling_sums(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (x, w, spec, tout, _, iters) = random_layer(rng);
        let tape = Tape::no_grad();
        let out = conv_capsule(&tape, tape.constant(x), tape.constant(w), &spec, iters).map_err(|e| e.to_string())?;
        for &c in &out.routing.couplings {
            for row in tape.value(c).data().chunks(tout) {
                worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("coupling rows deviate from 1 by {worst:.2e}"))?;
    Ok(format!("50 layers, worst {worst:.1e}"))
}

fn pose_norms(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut max = 0.0f64;
    for _ in 0..50 {
        let (x, w, spec, _, aout, iters) = random_layer(rng);
        let tape = Tape::no_grad();
        let out = conv_capsule(&tape, tape.constant(x), tape.constant(w), &spec, iters).map_err(|e| e.to_string())?;
        for v in tape.value(out.poses).data().chunks(aout) {
            max = max.max(v.iter().map(|a| a * a).sum::<f64>().sqrt());
        }
    }
    ensure(max < 1.0 - 1e-9, || format!("pose norm {max:.4} not below 1"))?;
    Ok(format!("50 layers, max norm {max:.6}"))
}

fn uniform_start(rng: &mut ChaCha8Rng) -> Result<String, String> {
    for _ in 0..20 {
        let (x, w, spec, tout, _, _) = random_layer(rng);
        let tape = Tape::no_grad();
        let out = conv_capsule(&tape, tape.constant(x), tape.constant(w), &spec, 1).map_err(|e| e.to_string())?;
        let c = tape.value(out.routing.final_couplings());
        ensure(c.data().iter().all(|&v| v == 1.0 / tout as f64), || {
            "single-iteration couplings are not uniform".into()
        })?;
    }
    Ok("20 layers exact".into())
}

/// Random orthogonal matrix by Gram-Schmidt.
fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-3 {
            rows.push(v.iter().map(|a| a / norm).collect());
        }
    }
    rows
}

fn rotation_equivariance(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (x, w, spec, _, aout, iters) = random_layer(rng);
        let r = orthogonal(aout, rng);
        let mut wr = w.clone();
        for (dst, src) in wr.data_mut().chunks_mut(aout).zip(w.data().chunks(aout)) {
            for c in 0..aout {
                dst[c] = (0..aout).map(|b| src[b] * r[c][b]).sum();
            }
        }
        let tape = Tape::no_grad();
        let xv = tape.constant(x);
        let a = conv_capsule(&tape, xv, tape.constant(w), &spec, iters).map_err(|e| e.to_string())?;
        let b = conv_capsule(&tape, xv, tape.constant(wr), &spec, iters).map_err(|e| e.to_string())?;
        let (pa, pb) = (tape.to_tensor(a.poses), tape.to_tensor(b.poses));
        for (u, v) in pa.data().chunks(aout).zip(pb.data().chunks(aout)) {
            for c in 0..aout {
                let want: f64 = (0..aout).map(|k| r[c][k] * u[k]).sum();
                worst = worst.max((want - v[c]).abs());
            }
        }
    }
    ensure(worst <= 1e-6, || format!("rotated poses differ by {worst:.2e}"))?;
    Ok(format!("50 layers, worst {worst:.1e}"))
}

fn loss_margin(rng: &mut ChaCha8Rng) -> Result<String, String> {
    for _ in 0..50 {
        let lengths = uniform(&[2, 2, 2, 3], 0.0, 1.0, rng);
        let onehot: Tensor<f64> = downsample_labels(&labels([2, 2, 2], 3, rng), 1, 3).map_err(|e| e.to_string())?;
        let want: f64 = lengths
            .data()
            .iter()
            .zip(onehot.data())
            .map(|(&y, &t)| t * (0.9 - y).max(0.0).powi(2) + 0.5 * (1.0 - t) * (y - 0.1).max(0.0).powi(2))
            .sum::<f64>()
            / lengths.len() as f64;
        let tape = Tape::no_grad();
        let got = margin_loss(&tape, tape.constant(lengths), tape.constant(onehot)).map_err(|e| e.to_string())?;
        let got = tape.value(got).item();
        ensure((got - want).abs() <= 1e-9, || format!("margin loss {got} vs direct {want}"))?;
    }
    Ok("50 cases within 1e-9".into())
}

fn loss_cross_entropy(rng: &mut ChaCha8Rng) -> Result<String, String> {
    for _ in 0..50 {
        let logits = uniform(&[2, 3, 2, 4], -3.0, 3.0, rng);
        let lab = labels([2, 3, 2], 4, rng);
        let w: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..3.0)).collect();
        let mut want = 0.0;
        for (v, &l) in lab.data().iter().enumerate() {
            let row = &logits.data()[v * 4..v * 4 + 4];
            let z: f64 = row.iter().map(|a| a.exp()).sum();
            want -= w[l as usize] * (row[l as usize].exp() / z).max(1e-7).ln();
        }
        want /= lab.len() as f64;
        let tape = Tape::no_grad();
        let p = tape.softmax(tape.constant(logits), 3).map_err(|e| e.to_string())?;
        let got = weighted_ce(&tape, p, &lab, &w).map_err(|e| e.to_string())?;
        let got = tape.value(got).item();
        ensure((got - want).abs() <= 1e-9, || format!("cross-entropy {got} vs direct {want}"))?;
    }
    Ok("50 cases within 1e-9".into())
}

fn loss_masked_mse(rng: &mut ChaCha8Rng) -> Result<String, String> {
    for _ in 0..50 {
        let recon = uniform(&[3, 2, 2, 2], 0.0, 1.0, rng);
        let input = uniform(&[3, 2, 2, 2], 0.0, 1.0, rng);
        let lab = labels([3, 2, 2], 3, rng);
        let (mut sum, mut n) = (0.0, 0);
        for (v, &l) in lab.data().iter().enumerate() {
            if l > 0 {
                for c in 0..2 {
                    sum += (recon.data()[2 * v + c] - input.data()[2 * v + c]).powi(2);
                    n += 1;
                }
            }
        }
        let want = if n == 0 { 0.0 } else { sum / n as f64 };
        let tape = Tape::no_grad();
        let got = masked_mse(&tape, tape.constant(recon), tape.constant(input), &lab).map_err(|e| e.to_string())?;
        let got = tape.value(got).item();
        ensure((got - want).abs() <= 1e-9, || format!("masked MSE {got} vs direct {want}"))?;
    }
    Ok("50 cases within 1e-9".into())
}

fn loss_composition(rng: &mut ChaCha8Rng) -> Result<String, String> {
    for _ in 0..50 {
        let parts: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..5.0)).collect();
        let w = LossWeights {
            margin: rng.random_range(0.0..2.0),
            ce: rng.random_range(0.0..2.0),
            recon: rng.random_range(0.0..2.0),
        };
        let tape = Tape::no_grad();
        let v: Vec<Var> = parts.iter().map(|&p| tape.constant(Tensor::scalar(p))).collect();
        let (total, report) = total_loss(&tape, v[0], v[1], v[2], w).map_err(|e| e.to_string())?;
        let want = w.margin * parts[0] + w.ce * parts[1] + w.recon * parts[2];
        let got = tape.value(total).item();
        ensure((got - want).abs() <= 1e-12 && (report.total - want).abs() <= 1e-12, || {
            format!("total {got} vs weighted sum {want}")
        })?;
    }
    Ok("50 cases within 1e-12".into())
}

fn random_pair(rng: &mut ChaCha8Rng) -> (LabelVolume, LabelVolume) {
    let density = rng.random_range(0.05..0.6);
    let mut mk = || {
        let data = (0..512).map(|_| u8::from(rng.random_bool(density))).collect();
        LabelVolume::new([8; 3], data).unwrap()
    };
    (mk(), mk())
}

fn metric_sets(rng: &mut ChaCha8Rng) -> Result<String, String> {
    for _ in 0..50 {
        let (t, p) = random_pair(rng);
        let set = |l: &LabelVolume| -> HashSet<usize> { (0..l.len()).filter(|&i| l.data()[i] == 1).collect() };
        let (ts, ps) = (set(&t), set(&p));
        let both = ts.intersection(&ps).count() as f64;
        let want_dsc = if ts.is_empty() && ps.is_empty() { 1.0 } else { 2.0 * both / (ts.len() + ps.len()) as f64 };
        let got = dsc(&t, &p, 1).map_err(|e| e.to_string())?;
        ensure(got == want_dsc, || format!("dsc {got} vs set oracle {want_dsc}"))?;
        if !ts.is_empty() && !ps.is_empty() {
            let got = precision_recall(&t, &p, 1).map_err(|e| e.to_string())?;
            let want = (both / ps.len() as f64, both / ts.len() as f64);
            ensure(got == want, || format!("precision/recall {got:?} vs set oracle {want:?}"))?;
        }
    }
    Ok("50 volume pairs exact".into())
}

fn oracle_surface(l: &LabelVolume) -> Vec<[i64; 3]> {
    let s = l.shape().map(|e| e as i64);
    let inside = |p: [i64; 3]| {
        (0..3).all(|a| (0..s[a]).contains(&p[a])) && l.get(p[0] as usize, p[1] as usize, p[2] as usize) == 1
    };
    let mut out = Vec::new();
    for x in 0..s[0] {
        for y in 0..s[1] {
            for z in 0..s[2] {
                let steps = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
                if inside([x, y, z]) && steps.iter().any(|d| !inside([x + d[0], y + d[1], z + d[2]])) {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn metric_surface(rng: &mut ChaCha8Rng) -> Result<String, String> {
    let spacing = [0.8, 1.0, 2.5];
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (t, p) = random_pair(rng);
        let (st, sp) = (oracle_surface(&t), oracle_surface(&p));
        if st.is_empty() || sp.is_empty() {
            continue;
        }
        let directed = |a: &[[i64; 3]], b: &[[i64; 3]]| {
            a.iter()
                .map(|u| {
                    b.iter()
                        .map(|v| (0..3).map(|i| ((u[i] - v[i]) as f64 * spacing[i]).powi(2)).sum::<f64>().sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .sum::<f64>()
                / a.len() as f64
        };
        let want = 0.5 * (directed(&st, &sp) + directed(&sp, &st));
        let got = asd(&t, &p, 1, spacing).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
        ensure((got - want).abs() <= 1e-9, || format!("asd {got} vs all-pairs oracle {want}"))?;
    }
    Ok(format!("50 volume pairs, worst {worst:.1e}"))
}

fn metric_examples(_: &mut ChaCha8Rng) -> Result<String, String> {
    let mut t = LabelVolume::filled([8; 3], 0);
    let mut p = LabelVolume::filled([8; 3], 0);
    (0..4).for_each(|i| t.set(i, 0, 0, 1));
    (1..7).for_each(|i| p.set(i, 0, 0, 1));
    let d = dsc(&t, &p, 1).map_err(|e| e.to_string())?;
    ensure(d == 0.6, || format!("Dice example gave {d}, expected 0.6"))?;
    let mut t = LabelVolume::filled([8; 3], 0);
    let mut p = LabelVolume::filled([8; 3], 0);
    t.set(0, 0, 0, 1);
    p.set(3, 4, 0, 1);
    let a = asd(&t, &p, 1, [1.0; 3]).map_err(|e| e.to_string())?;
    ensure(a == 5.0, || format!("surface distance example gave {a}, expected 5"))?;
    Ok("Dice 0.6, surface distance 5.0".into())
}

pub fn run(sabotage: Option<&str>) -> Result<(), CliError> {
    let fault = match sabotage {
        None => Fault::None,
        Some(name) => Fault::parse(name).ok_or_else(|| {
            CliError::Usage(format!("unknown fault `{name}` (expected squash, margin or surface)"))
        })?,
    };
    if fault != Fault::None {
        println!("fault injected: {}", sabotage.unwrap_or_default());
    }
    faults::inject(fault);
    let mut failed = Vec::new();
    for (i, (name, check)) in CHECKS.iter().enumerate() {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mut rng)))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<30} {detail} [{secs:.2}s]"),
            Err(detail) => {
                println!("FAIL  {name:<30} {detail} [{secs:.2}s]");
                failed.push(*name);
            }
        }
    }
    faults::clear();
    if failed.is_empty() {
        println!("{} checks passed", CHECKS.len());
        Ok(())
    } else {
        Err(CliError::Failure(format!("{} of {} checks failed: {}", failed.len(), CHECKS.len(), failed.join(", "))))
    }
}

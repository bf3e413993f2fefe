//! Capsule layers: squash, primary capsules, and 3D convolutional capsules
//! with dynamic routing-by-agreement.
//!
//! A capsule map is a tensor `[X, Y, Z, T, A]`: a grid of `T` capsule types,
//! each an `A`-dimensional pose whose length encodes presence probability.
//!
//! Routing at one output position takes votes `û[i, j]` (vote `i` for output
//! capsule `j`) and iterates:
//!
//! ```text
//! b = 0
//! repeat r times:
//!     c[i, ·] = softmax(b[i, ·])          // over output capsules
//!     s[j]    = Σ_i c[i, j] · û[i, j]
//!     v[j]    = squash(s[j])
//!     b[i, j] += û[i, j] · v[j]           // skipped after the last pass
//! ```
//!
//! The loop is unrolled on the tape, so gradients flow through the couplings.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::faults::{self, Fault};
use crate::tensor::{ConvSpec, Scalar, Tape, Tensor, Var};
use crate::tensor::Geometry;

/// Result of routing: output poses plus the couplings of every iteration.
#[derive(Clone, Debug)]
pub struct RoutingOutput {
    pub poses: Var,
    /// One `[.., N_votes, T_out]` tensor per iteration; the last one is final.
    pub couplings: Vec<Var>,
}

impl RoutingOutput {
    pub fn final_couplings(&self) -> Var {
        *self.couplings.last().expect("at least one iteration")
    }
}

/// `v = (|s|² / (1 + |s|²)) · s / |s|` over the last axis, with `squash(0) = 0`.
pub fn squash<T: Scalar>(tape: &Tape<T>, s: Var) -> Result<Var> {
    let sabotaged = faults::active(Fault::Squash);
    let out = tape.with_values(&[s], |v| {
        let x = v[0];
        let d = *x.shape().last().unwrap();
        if sabotaged {
            return x.map(|e| e);
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(d) {
            let n2: T = row.iter().map(|&e| e * e).sum();
            let scale = n2.sqrt() / (T::one() + n2);
            row.iter_mut().for_each(|e| *e *= scale);
        }
        Tensor::from_vec(x.shape(), data).expect("same shape")
    });
    tape.push(
        "squash",
        &[s],
        out,
        Box::new(move |ctx| {
            let x = ctx.inputs[0].data();
            if sabotaged {
                return vec![Some(ctx.grad.to_vec())];
            }
            let d = *ctx.inputs[0].shape().last().unwrap();
            let mut gx = vec![T::zero(); x.len()];
            for ((gxr, xr), gr) in gx.chunks_mut(d).zip(x.chunks(d)).zip(ctx.grad.chunks(d)) {
                let n2: T = xr.iter().map(|&e| e * e).sum();
                let n = n2.sqrt();
                let one = T::one();
                let scale = n / (one + n2);
                // d(scale)/dn / n, finite limit 0 at the origin
                let coef = if n > T::zero() {
                    (one - n2) / ((one + n2) * (one + n2) * n)
                } else {
                    T::zero()
                };
                let dot: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &xe), &ge) in gxr.iter_mut().zip(xr).zip(gr) {
                    *o = scale * ge + coef * dot * xe;
                }
            }
            vec![Some(gx)]
        }),
    )
}

/// Groups `features [X,Y,Z,F]` into `types` capsule types of `F / types`
/// dimensions and squashes each pose.
pub fn primary_caps<T: Scalar>(tape: &Tape<T>, features: Var, types: usize) -> Result<Var> {
    let shape = tape.shape(features);
    if shape.len() != 4 {
        return Err(Error::shape(format!("primary_caps expects [X,Y,Z,F], got {shape:?}")));
    }
    let f = shape[3];
    if types == 0 || !f.is_multiple_of(types) {
        return Err(Error::shape(format!("{f} feature channels not divisible into {types} capsule types")));
    }
    let caps = tape.reshape(features, &[shape[0], shape[1], shape[2], types, f / types])?;
    squash(tape, caps)
}

/// Length of every pose vector: `[X,Y,Z,T,A] -> [X,Y,Z,T]`.
pub fn capsule_length<T: Scalar>(tape: &Tape<T>, caps: Var) -> Result<Var> {
    tape.vector_norm(caps)
}

/// `s[p, j, :] = Σ_i c[p, i, j] · votes[p, i, j, :]`.
fn weighted_votes<T: Scalar>(tape: &Tape<T>, couplings: Var, votes: Var) -> Result<Var> {
    let vshape = tape.shape(votes);
    let [p, n, to, ao] = [vshape[0], vshape[1], vshape[2], vshape[3]];
    let out = tape.with_values(&[couplings, votes], |v| {
        let (c, u) = (v[0].data(), v[1].data());
        let mut s = vec![T::zero(); p * to * ao];
        for pi in 0..p {
            for i in 0..n {
                for j in 0..to {
                    let cij = c[(pi * n + i) * to + j];
                    let src = &u[((pi * n + i) * to + j) * ao..][..ao];
                    let dst = &mut s[(pi * to + j) * ao..][..ao];
                    dst.iter_mut().zip(src).for_each(|(d, &x)| *d += cij * x);
                }
            }
        }
        Tensor::from_vec(&[p, to, ao], s)
    })?;
    tape.push(
        "routing_weighted_sum",
        &[couplings, votes],
        out,
        Box::new(move |ctx| {
            let (c, u, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let mut gc = ctx.needs[0].then(|| vec![T::zero(); c.len()]);
            let mut gu = ctx.needs[1].then(|| vec![T::zero(); u.len()]);
            for pi in 0..p {
                for i in 0..n {
                    for j in 0..to {
                        let ci = (pi * n + i) * to + j;
                        let gs = &g[(pi * to + j) * ao..][..ao];
                        let ui = &u[ci * ao..][..ao];
                        if let Some(gc) = &mut gc {
                            gc[ci] = gs.iter().zip(ui).map(|(&a, &b)| a * b).sum();
                        }
                        if let Some(gu) = &mut gu {
                            let cij = c[ci];
                            gu[ci * ao..][..ao].iter_mut().zip(gs).for_each(|(d, &x)| *d = cij * x);
                        }
                    }
                }
            }
            vec![gc, gu]
        }),
    )
}

/// `a[p, i, j] = votes[p, i, j, :] · poses[p, j, :]`.
fn agreement<T: Scalar>(tape: &Tape<T>, votes: Var, poses: Var) -> Result<Var> {
    let vshape = tape.shape(votes);
    let [p, n, to, ao] = [vshape[0], vshape[1], vshape[2], vshape[3]];
    let out = tape.with_values(&[votes, poses], |v| {
        let (u, vj) = (v[0].data(), v[1].data());
        let mut a = vec![T::zero(); p * n * to];
        for pi in 0..p {
            for i in 0..n {
                for j in 0..to {
                    let ui = &u[((pi * n + i) * to + j) * ao..][..ao];
                    let pj = &vj[(pi * to + j) * ao..][..ao];
                    a[(pi * n + i) * to + j] = ui.iter().zip(pj).map(|(&x, &y)| x * y).sum();
                }
            }
        }
        Tensor::from_vec(&[p, n, to], a)
    })?;
    tape.push(
        "routing_agreement",
        &[votes, poses],
        out,
        Box::new(move |ctx| {
            let (u, vj, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let mut gu = ctx.needs[0].then(|| vec![T::zero(); u.len()]);
            let mut gv = ctx.needs[1].then(|| vec![T::zero(); vj.len()]);
            for pi in 0..p {
                for i in 0..n {
                    for j in 0..to {
                        let ai = (pi * n + i) * to + j;
                        let gij = g[ai];
                        if let Some(gu) = &mut gu {
                            let pj = &vj[(pi * to + j) * ao..][..ao];
                            gu[ai * ao..][..ao].iter_mut().zip(pj).for_each(|(d, &x)| *d = gij * x);
                        }
                        if let Some(gv) = &mut gv {
                            let ui = &u[ai * ao..][..ao];
                            gv[(pi * to + j) * ao..][..ao]
                                .iter_mut()
                                .zip(ui)
                                .for_each(|(d, &x)| *d += gij * x);
                        }
                    }
                }
            }
            vec![gu, gv]
        }),
    )
}

/// Routing over a batch of independent positions: `votes [P, N, T_out, A_out]`
/// gives poses `[P, T_out, A_out]`.
pub fn dynamic_routing_batched<T: Scalar>(
    tape: &Tape<T>,
    votes: Var,
    iterations: usize,
) -> Result<RoutingOutput> {
    if iterations == 0 {
        return Err(Error::Invalid("routing needs at least one iteration".into()));
    }
    let shape = tape.shape(votes);
    if shape.len() != 4 {
        return Err(Error::shape(format!("votes must be [P, N, T, A], got {shape:?}")));
    }
    let (p, n, to) = (shape[0], shape[1], shape[2]);
    let mut logits = tape.constant(Tensor::zeros(&[p, n, to]));
    let mut couplings = Vec::with_capacity(iterations);
    let mut poses = None;
    for r in 0..iterations {
        let c = tape.softmax(logits, 2)?;
        couplings.push(c);
        let s = weighted_votes(tape, c, votes)?;
        let v = squash(tape, s)?;
        if r + 1 < iterations {
            let a = agreement(tape, votes, v)?;
            logits = tape.add(logits, a)?;
        }
        poses = Some(v);
    }
    Ok(RoutingOutput {
        poses: poses.expect("iterations >= 1"),
        couplings,
    })
}

/// Routing for a single position: `votes [N_votes, T_out, A_out]` gives poses
/// `[T_out, A_out]` and couplings `[N_votes, T_out]`.
pub fn dynamic_routing<T: Scalar>(tape: &Tape<T>, votes: Var, iterations: usize) -> Result<RoutingOutput> {
    let shape = tape.shape(votes);
    if shape.len() != 3 {
        return Err(Error::shape(format!("votes must be [N, T, A], got {shape:?}")));
    }
    let [n, to, ao] = [shape[0], shape[1], shape[2]];
    let batched = tape.reshape(votes, &[1, n, to, ao])?;
    let out = dynamic_routing_batched(tape, batched, iterations)?;
    Ok(RoutingOutput {
        poses: tape.reshape(out.poses, &[to, ao])?,
        couplings: out
            .couplings
            .iter()
            .map(|&c| tape.reshape(c, &[n, to]))
            .collect::<Result<_>>()?,
    })
}

/// Votes `û = W·u` for every output position, kernel tap and input type.
///
/// `input [X,Y,Z,Tin,Ain]`, `weight [k,k,k,Tin,Tout,Ain,Aout]` give
/// `[P, k³·Tin, Tout, Aout]` with `P = X'·Y'·Z'`. Taps that land in the zero
/// padding produce zero votes.
pub fn capsule_votes<T: Scalar>(tape: &Tape<T>, input: Var, weight: Var, spec: &ConvSpec) -> Result<Var> {
    let ishape = tape.shape(input);
    let wshape = tape.shape(weight);
    if ishape.len() != 5 {
        return Err(Error::shape(format!("capsule input must be [X,Y,Z,T,A], got {ishape:?}")));
    }
    let (tin, ain) = (ishape[3], ishape[4]);
    if wshape.len() != 7 || wshape[..3] != spec.kernel || wshape[3] != tin || wshape[5] != ain {
        return Err(Error::shape(format!(
            "capsule weight {wshape:?} incompatible with input {ishape:?} and kernel {:?}",
            spec.kernel
        )));
    }
    let (to, ao) = (wshape[4], wshape[6]);
    let geo = Geometry::new([ishape[0], ishape[1], ishape[2]], spec)?;
    let taps = spec.taps();
    let n = taps * tin;
    let p = geo.out_voxels();
    let row = n * to * ao;
    let w_at = move |o: usize, ti: usize, j: usize, a: usize| (((o * tin + ti) * to + j) * ain + a) * ao;

    let out = tape.with_values(&[input, weight], |v| {
        let (x, w) = (v[0].data(), v[1].data());
        let mut votes = vec![T::zero(); p * row];
        votes.par_chunks_mut(row).enumerate().for_each(|(pi, out)| {
            let mut srcs = Vec::with_capacity(taps);
            geo.tap_sources(pi, &mut srcs);
            for (o, src) in srcs.iter().enumerate() {
                let Some(vox) = src else { continue };
                for ti in 0..tin {
                    let u = &x[(vox * tin + ti) * ain..][..ain];
                    let ni = o * tin + ti;
                    for j in 0..to {
                        let dst = &mut out[(ni * to + j) * ao..][..ao];
                        for (a, &ua) in u.iter().enumerate() {
                            let wr = &w[w_at(o, ti, j, a)..][..ao];
                            dst.iter_mut().zip(wr).for_each(|(d, &wv)| *d += ua * wv);
                        }
                    }
                }
            }
        });
        Tensor::from_vec(&[p, n, to, ao], votes)
    })?;
    tape.push(
        "capsule_votes",
        &[input, weight],
        out,
        Box::new(move |ctx| {
            let (x, w, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
            let mut gx = ctx.needs[0].then(|| vec![T::zero(); x.len()]);
            let mut gw = ctx.needs[1].then(|| vec![T::zero(); w.len()]);
            let mut srcs = Vec::with_capacity(taps);
            for pi in 0..p {
                geo.tap_sources(pi, &mut srcs);
                for (o, src) in srcs.iter().enumerate() {
                    let Some(vox) = src else { continue };
                    for ti in 0..tin {
                        let ui = (vox * tin + ti) * ain;
                        let ni = o * tin + ti;
                        for j in 0..to {
                            let gv = &g[pi * row + (ni * to + j) * ao..][..ao];
                            for a in 0..ain {
                                let wi = w_at(o, ti, j, a);
                                if let Some(gw) = &mut gw {
                                    let ua = x[ui + a];
                                    gw[wi..wi + ao].iter_mut().zip(gv).for_each(|(d, &gg)| *d += ua * gg);
                                }
                                if let Some(gx) = &mut gx {
                                    let dot: T = w[wi..wi + ao].iter().zip(gv).map(|(&a, &b)| a * b).sum();
                                    gx[ui + a] += dot;
                                }
                            }
                        }
                    }
                }
            }
            vec![gx, gw]
        }),
    )
}

/// Output of a convolutional capsule layer.
#[derive(Clone, Debug)]
pub struct ConvCapsOutput {
    /// `[X', Y', Z', T_out, A_out]`
    pub poses: Var,
    pub routing: RoutingOutput,
}

/// 3D convolutional capsule layer: votes from every capsule in each
/// receptive field, then routing independently at each output position.
pub fn conv_capsule<T: Scalar>(
    tape: &Tape<T>,
    input: Var,
    weight: Var,
    spec: &ConvSpec,
    iterations: usize,
) -> Result<ConvCapsOutput> {
    if iterations == 0 {
        return Err(Error::Invalid("routing needs at least one iteration".into()));
    }
    let ishape = tape.shape(input);
    let votes = capsule_votes(tape, input, weight, spec)?;
    let vshape = tape.shape(votes);
    let routing = dynamic_routing_batched(tape, votes, iterations)?;
    let [ox, oy, oz] = crate::tensor::conv3d_output_shape([ishape[0], ishape[1], ishape[2]], spec);
    let poses = tape.reshape(routing.poses, &[ox, oy, oz, vshape[2], vshape[3]])?;
    Ok(ConvCapsOutput { poses, routing })
}

/// Parameter count of a convolutional capsule layer (no bias).
pub fn conv_capsule_params(kernel: usize, tin: usize, tout: usize, ain: usize, aout: usize) -> usize {
    kernel.pow(3) * tin * tout * ain * aout
}

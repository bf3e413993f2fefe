//! Elementwise, shape, and reduction operations.

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(op: &str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: operand shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Splits `shape` around `axis` into (outer, extent, inner).
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Axis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl<T: Scalar> Tape<T> {
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with_values(&[a, b], |v| -> Result<_> {
            same_shape("add", v[0], v[1])?;
            let data = v[0].data().iter().zip(v[1].data()).map(|(&x, &y)| x + y).collect();
            Tensor::from_vec(v[0].shape(), data)
        })?;
        self.push(
            "add",
            &[a, b],
            out,
            Box::new(|ctx| vec![Some(ctx.grad.to_vec()), Some(ctx.grad.to_vec())]),
        )
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with_values(&[a, b], |v| -> Result<_> {
            same_shape("sub", v[0], v[1])?;
            let data = v[0].data().iter().zip(v[1].data()).map(|(&x, &y)| x - y).collect();
            Tensor::from_vec(v[0].shape(), data)
        })?;
        self.push(
            "sub",
            &[a, b],
            out,
            Box::new(|ctx| {
                vec![
                    Some(ctx.grad.to_vec()),
                    Some(ctx.grad.iter().map(|&g| -g).collect()),
                ]
            }),
        )
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.with_values(&[a, b], |v| -> Result<_> {
            same_shape("mul", v[0], v[1])?;
            let data = v[0].data().iter().zip(v[1].data()).map(|(&x, &y)| x * y).collect();
            Tensor::from_vec(v[0].shape(), data)
        })?;
        self.push(
            "mul",
            &[a, b],
            out,
            Box::new(|ctx| {
                let (a, b) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let ga = ctx.needs[0].then(|| ctx.grad.iter().zip(b).map(|(&g, &y)| g * y).collect());
                let gb = ctx.needs[1].then(|| ctx.grad.iter().zip(a).map(|(&g, &x)| g * x).collect());
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&self, a: Var, factor: f64) -> Result<Var> {
        let k = T::lit(factor);
        let out = self.with_values(&[a], |v| v[0].map(|x| x * k));
        self.push(
            "scale",
            &[a],
            out,
            Box::new(move |ctx| vec![Some(ctx.grad.iter().map(|&g| g * k).collect())]),
        )
    }

    pub fn relu(&self, a: Var) -> Result<Var> {
        let out = self.with_values(&[a], |v| v[0].map(|x| x.max(T::zero())));
        self.push(
            "relu",
            &[a],
            out,
            Box::new(|ctx| {
                let g = ctx
                    .grad
                    .iter()
                    .zip(ctx.inputs[0].data())
                    .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// Joins tensors along `axis`; every other extent must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let (out, widths) = self.with_values(parts, |v| -> Result<_> {
            let first = v[0].shape();
            let (outer, _, inner) = split_axis(first, axis)?;
            let mut extent = 0;
            for t in v {
                let s = t.shape();
                if s.len() != first.len()
                    || s.iter()
                        .zip(first)
                        .enumerate()
                        .any(|(i, (a, b))| i != axis && a != b)
                {
                    return Err(Error::shape(format!(
                        "concat: extents {s:?} and {first:?} differ off axis {axis}"
                    )));
                }
                extent += s[axis];
            }
            let widths: Vec<usize> = v.iter().map(|t| t.shape()[axis] * inner).collect();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(outer * total);
            for o in 0..outer {
                for (t, &w) in v.iter().zip(&widths) {
                    data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
                }
            }
            let mut shape = first.to_vec();
            shape[axis] = extent;
            Ok((Tensor::from_vec(&shape, data)?, widths))
        })?;
        self.push(
            "concat",
            parts,
            out,
            Box::new(move |ctx| {
                let total: usize = widths.iter().sum();
                let outer = ctx.grad.len() / total;
                let mut offset = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for (i, &w) in widths.iter().enumerate() {
                    if ctx.needs[i] {
                        let mut g = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            let start = o * total + offset;
                            g.extend_from_slice(&ctx.grad[start..start + w]);
                        }
                        grads.push(Some(g));
                    } else {
                        grads.push(None);
                    }
                    offset += w;
                }
                grads
            }),
        )
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.with_values(&[a], |v| v[0].clone().reshape(shape))?;
        self.push("reshape", &[a], out, Box::new(|ctx| vec![Some(ctx.grad.to_vec())]))
    }

    /// Softmax along `axis`, max-shifted.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let (out, dims) = self.with_values(&[a], |v| -> Result<_> {
            let x = v[0];
            let (outer, n, inner) = split_axis(x.shape(), axis)?;
            let src = x.data();
            let mut data = vec![T::zero(); src.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * n * inner + i;
                    let mut m = T::neg_infinity();
                    for k in 0..n {
                        m = m.max(src[base + k * inner]);
                    }
                    let mut total = T::zero();
                    for k in 0..n {
                        let e = (src[base + k * inner] - m).exp();
                        data[base + k * inner] = e;
                        total += e;
                    }
                    for k in 0..n {
                        data[base + k * inner] = data[base + k * inner] / total;
                    }
                }
            }
            Ok((Tensor::from_vec(x.shape(), data)?, (outer, n, inner)))
        })?;
        self.push(
            "softmax",
            &[a],
            out,
            Box::new(move |ctx| {
                let (outer, n, inner) = dims;
                let y = ctx.output.data();
                let g = ctx.grad;
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = T::zero();
                        for k in 0..n {
                            dot += g[base + k * inner] * y[base + k * inner];
                        }
                        for k in 0..n {
                            let j = base + k * inner;
                            gx[j] = y[j] * (g[j] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let out = self.with_values(&[a], |v| Tensor::scalar(v[0].data().iter().copied().sum()));
        self.push(
            "sum",
            &[a],
            out,
            Box::new(|ctx| vec![Some(vec![ctx.grad[0]; ctx.inputs[0].len()])]),
        )
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let out = self.with_values(&[a], |v| {
            let n = T::lit(v[0].len() as f64);
            Tensor::scalar(v[0].data().iter().copied().sum::<T>() / n)
        });
        self.push(
            "mean",
            &[a],
            out,
            Box::new(|ctx| {
                let n = ctx.inputs[0].len();
                vec![Some(vec![ctx.grad[0] / T::lit(n as f64); n])]
            }),
        )
    }

    /// Euclidean norm over the last axis, which is dropped from the shape.
    pub fn vector_norm(&self, a: Var) -> Result<Var> {
        let out = self.with_values(&[a], |v| -> Result<_> {
            let x = v[0];
            let d = *x.shape().last().unwrap();
            let data: Vec<T> = x
                .data()
                .chunks(d)
                .map(|c| c.iter().map(|&e| e * e).sum::<T>().sqrt())
                .collect();
            let shape = if x.rank() > 1 {
                x.shape()[..x.rank() - 1].to_vec()
            } else {
                vec![1]
            };
            Tensor::from_vec(&shape, data)
        })?;
        self.push(
            "vector_norm",
            &[a],
            out,
            Box::new(|ctx| {
                let x = ctx.inputs[0].data();
                let d = *ctx.inputs[0].shape().last().unwrap();
                let n = ctx.output.data();
                let mut gx = vec![T::zero(); x.len()];
                for (r, (gc, xc)) in gx.chunks_mut(d).zip(x.chunks(d)).enumerate() {
                    if n[r] > T::zero() {
                        let s = ctx.grad[r] / n[r];
                        gc.iter_mut().zip(xc).for_each(|(g, &e)| *g = s * e);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// `Σ wᵢ·xᵢ` over same-shaped operands.
    pub fn linear_combination(&self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::Invalid("empty linear combination".into()));
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let weights: Vec<T> = terms.iter().map(|t| T::lit(t.1)).collect();
        let out = self.with_values(&vars, |v| -> Result<_> {
            let mut data = vec![T::zero(); v[0].len()];
            for (t, &w) in v.iter().zip(&weights) {
                same_shape("linear_combination", v[0], t)?;
                data.iter_mut().zip(t.data()).for_each(|(d, &x)| *d += w * x);
            }
            Tensor::from_vec(v[0].shape(), data)
        })?;
        self.push(
            "linear_combination",
            &vars,
            out,
            Box::new(move |ctx| {
                weights
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(&w, &need)| need.then(|| ctx.grad.iter().map(|&g| g * w).collect()))
                    .collect()
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_middle_axis() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 3, 2], &[1., 2., 3., 4., 5., 6., -1., 0., 1., 2., 3., 4.]));
        let y = tape.softmax(x, 1).unwrap();
        let y = tape.value(y);
        for o in 0..2 {
            for i in 0..2 {
                let s: f64 = (0..3).map(|k| y.get(&[o, k, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        assert!(tape.softmax(x, 3).is_err());
    }

    #[test]
    fn relu_and_norm_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2], &[-2.0, 3.0]));
        let r = tape.relu(x).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 3.0]);
        let v = tape.constant(t(&[2], &[3.0, 4.0]));
        let n = tape.vector_norm(v).unwrap();
        assert_eq!(tape.value(n).data(), &[5.0]);
    }

    #[test]
    fn concat_interleaves_and_checks_extents() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3]);
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let d = tape.constant(t(&[3, 1], &[0.0; 3]));
        assert!(tape.concat(&[a, d], 1).is_err());
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_of_relu_sum() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[-1.0, 2.0]));
        let r = tape.relu(x).unwrap();
        let loss = tape.sum(r).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_bad_losses() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.scale(x, 2.0).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let s = tape.sum(c).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::DetachedLoss)));
    }

    #[test]
    fn gradients_accumulate_across_calls() {
        let tape = Tape::new();
        let mut p = t(&[2], &[1.0, -1.0]).with_grad();
        let x = tape.leaf(p.clone());
        let loss = tape.sum(x).unwrap();
        let grads = tape.backward(loss).unwrap();
        grads.accumulate_into(x, &mut p);
        grads.accumulate_into(x, &mut p);
        assert_eq!(p.grad.as_deref().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn non_finite_results_are_errors() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1], &[f64::MAX]));
        let y = tape.scale(x, 10.0);
        assert!(matches!(y, Err(Error::NonFinite { .. })));
    }
}

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Source taps `(lo, hi, w_hi)` for doubling an axis of extent `n` with
/// half-pixel centres (corner alignment off), clamped at the borders.
fn axis_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n - 1);
            let hi = (lo + 1).min(n - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

type AxisTaps<T> = Vec<(usize, usize, T, T)>;

/// Calls `f(output voxel, source voxel, weight)` for the 8 trilinear taps of
/// every output voxel, in output order.
fn visit_taps<T: Scalar>(taps: &[AxisTaps<T>; 3], y: usize, z: usize, mut f: impl FnMut(usize, usize, T)) {
    let mut out = 0;
    for &(x0, x1, wx0, wx1) in &taps[0] {
        for &(y0, y1, wy0, wy1) in &taps[1] {
            for &(z0, z1, wz0, wz1) in &taps[2] {
                for (xi, wx) in [(x0, wx0), (x1, wx1)] {
                    for (yi, wy) in [(y0, wy0), (y1, wy1)] {
                        for (zi, wz) in [(z0, wz0), (z1, wz1)] {
                            f(out, (xi * y + yi) * z + zi, wx * wy * wz);
                        }
                    }
                }
                out += 1;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Trilinear ×`factor` upsampling of `[X,Y,Z,C]`. Only `factor == 2` is supported.
    pub fn upsample3d(&self, input: Var, factor: usize) -> Result<Var> {
        if factor != 2 {
            return Err(Error::Invalid(format!("upsample factor {factor} unsupported (only 2)")));
        }
        let shape = self.shape(input);
        if shape.len() != 4 {
            return Err(Error::shape(format!("upsample3d input must be [X,Y,Z,C], got {shape:?}")));
        }
        let [x, y, z, c] = [shape[0], shape[1], shape[2], shape[3]];
        let taps: [AxisTaps<T>; 3] = [x, y, z].map(|n| {
            axis_taps(n)
                .into_iter()
                .map(|(lo, hi, w)| (lo, hi, T::lit(1.0 - w), T::lit(w)))
                .collect()
        });

        let out = self.with_values(&[input], |v| {
            let src = v[0].data();
            let mut data = vec![T::zero(); 8 * src.len()];
            visit_taps(&taps, y, z, |o, s, w| {
                data[o * c..(o + 1) * c]
                    .iter_mut()
                    .zip(&src[s * c..(s + 1) * c])
                    .for_each(|(d, &v)| *d += w * v);
            });
            Tensor::from_vec(&[2 * x, 2 * y, 2 * z, c], data)
        })?;
        self.push(
            "upsample3d",
            &[input],
            out,
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); ctx.inputs[0].len()];
                visit_taps(&taps, y, z, |o, s, w| {
                    gx[s * c..(s + 1) * c]
                        .iter_mut()
                        .zip(&ctx.grad[o * c..(o + 1) * c])
                        .for_each(|(d, &g)| *d += w * g);
                });
                vec![Some(gx)]
            }),
        )
    }
}

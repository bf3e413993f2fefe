//! 3D convolution over channels-last volumes `[X, Y, Z, C]`.
//!
//! Lowered to im2col + GEMM, processed in row chunks so the column buffer
//! stays bounded for wide layers.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Upper bound on column-buffer elements per chunk.
const CHUNK_ELEMS: usize = 1 << 22;

/// Kernel geometry with "same" zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub dilation: [usize; 3],
}

impl ConvSpec {
    /// Cubic kernel with isotropic stride and dilation.
    pub fn cubic(kernel: usize, stride: usize, dilation: usize) -> Self {
        ConvSpec {
            kernel: [kernel; 3],
            stride: [stride; 3],
            dilation: [dilation; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let k = self.kernel[axis];
            if k == 0 || k.is_multiple_of(2) {
                return Err(Error::shape(format!("kernel extent {k} must be odd and positive")));
            }
            if self.stride[axis] == 0 || self.dilation[axis] == 0 {
                return Err(Error::shape("stride and dilation must be positive"));
            }
        }
        Ok(())
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Span of the dilated kernel along `axis`.
    pub fn effective_extent(&self, axis: usize) -> usize {
        self.dilation[axis] * (self.kernel[axis] - 1) + 1
    }
}

/// Spatial output extents: `ceil(in / stride)` per axis.
pub fn conv3d_output_shape(input: [usize; 3], spec: &ConvSpec) -> [usize; 3] {
    [0, 1, 2].map(|a| input[a].div_ceil(spec.stride[a]))
}

/// Resolved index arithmetic for one convolution call.
#[derive(Clone, Debug)]
pub(crate) struct Geometry {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub pad: [usize; 3],
    pub spec: ConvSpec,
}

impl Geometry {
    pub fn new(input: [usize; 3], spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        if input.contains(&0) {
            return Err(Error::shape("zero-size input"));
        }
        let output = conv3d_output_shape(input, spec);
        let mut pad = [0; 3];
        for a in 0..3 {
            let total = ((output[a] - 1) * spec.stride[a] + spec.effective_extent(a))
                .saturating_sub(input[a]);
            pad[a] = total / 2;
            debug_assert!(spec.effective_extent(a) <= input[a] + total);
        }
        Ok(Geometry {
            input,
            output,
            pad,
            spec: *spec,
        })
    }

    pub fn out_voxels(&self) -> usize {
        self.output.iter().product()
    }

    /// Input coordinate sampled by output coordinate `o` and kernel tap `t`
    /// along `axis`, or `None` if it falls in the zero padding.
    #[inline]
    pub fn source(&self, axis: usize, o: usize, t: usize) -> Option<usize> {
        let pos = (o * self.spec.stride[axis] + t * self.spec.dilation[axis]) as isize
            - self.pad[axis] as isize;
        (pos >= 0 && (pos as usize) < self.input[axis]).then_some(pos as usize)
    }

    /// Voxel index of each kernel tap for output row `r`, row-major taps.
    pub fn tap_sources(&self, r: usize, out: &mut Vec<Option<usize>>) {
        out.clear();
        let [_, oy_n, oz_n] = self.output;
        let (ox, oy, oz) = (r / (oy_n * oz_n), (r / oz_n) % oy_n, r % oz_n);
        let [_, iy_n, iz_n] = self.input;
        let [kx, ky, kz] = self.spec.kernel;
        for a in 0..kx {
            let sx = self.source(0, ox, a);
            for b in 0..ky {
                let sy = self.source(1, oy, b);
                for c in 0..kz {
                    let sz = self.source(2, oz, c);
                    out.push(match (sx, sy, sz) {
                        (Some(x), Some(y), Some(z)) => Some((x * iy_n + y) * iz_n + z),
                        _ => None,
                    });
                }
            }
        }
    }

    fn is_pointwise(&self) -> bool {
        self.spec.taps() == 1 && self.spec.stride == [1, 1, 1]
    }
}

/// Per-axis source coordinates for every (output coordinate, tap) pair,
/// `usize::MAX` inside the zero padding.
pub(crate) struct TapTable {
    src: [Vec<usize>; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    input: [usize; 3],
}

impl TapTable {
    pub fn new(geo: &Geometry) -> Self {
        let src = [0, 1, 2].map(|axis| {
            let k = geo.spec.kernel[axis];
            (0..geo.output[axis] * k)
                .map(|i| geo.source(axis, i / k, i % k).unwrap_or(usize::MAX))
                .collect()
        });
        TapTable {
            src,
            kernel: geo.spec.kernel,
            output: geo.output,
            input: geo.input,
        }
    }

    /// Visits every kernel tap of output row `r` in row-major tap order with
    /// the voxel it samples, or `None` inside the zero padding.
    #[inline]
    pub fn for_each(&self, r: usize, mut f: impl FnMut(usize, Option<usize>)) {
        let [_, oy_n, oz_n] = self.output;
        let (ox, oy, oz) = (r / (oy_n * oz_n), (r / oz_n) % oy_n, r % oz_n);
        let [_, iy_n, iz_n] = self.input;
        let [kx, ky, kz] = self.kernel;
        let xs = &self.src[0][ox * kx..(ox + 1) * kx];
        let ys = &self.src[1][oy * ky..(oy + 1) * ky];
        let zs = &self.src[2][oz * kz..(oz + 1) * kz];
        let mut t = 0;
        for &sx in xs {
            for &sy in ys {
                if sx == usize::MAX || sy == usize::MAX {
                    for _ in 0..kz {
                        f(t, None);
                        t += 1;
                    }
                    continue;
                }
                let base = (sx * iy_n + sy) * iz_n;
                for &sz in zs {
                    f(t, (sz != usize::MAX).then(|| base + sz));
                    t += 1;
                }
            }
        }
    }
}

#[inline]
fn gather_row<T: Scalar, const C: usize>(tab: &TapTable, x: &[T], r: usize, row: &mut [T]) {
    tab.for_each(r, |t, src| {
        let dst: &mut [T; C] = (&mut row[t * C..(t + 1) * C]).try_into().unwrap();
        match src {
            Some(v) => *dst = x[v * C..(v + 1) * C].try_into().unwrap(),
            None => *dst = [T::zero(); C],
        }
    });
}

#[inline]
fn im2col_row<T: Scalar>(tab: &TapTable, x: &[T], cin: usize, r: usize, row: &mut [T]) {
    match cin {
        1 => gather_row::<T, 1>(tab, x, r, row),
        2 => gather_row::<T, 2>(tab, x, r, row),
        4 => gather_row::<T, 4>(tab, x, r, row),
        8 => gather_row::<T, 8>(tab, x, r, row),
        16 => gather_row::<T, 16>(tab, x, r, row),
        _ => tab.for_each(r, |t, src| {
            let dst = &mut row[t * cin..(t + 1) * cin];
            match src {
                Some(v) => dst.copy_from_slice(&x[v * cin..(v + 1) * cin]),
                None => dst.fill(T::zero()),
            }
        }),
    }
}

#[inline]
fn scatter_row<T: Scalar, const C: usize>(tab: &TapTable, row: &[T], r: usize, dx: &mut [T]) {
    tab.for_each(r, |t, src| {
        if let Some(v) = src {
            let d: &mut [T; C] = (&mut dx[v * C..(v + 1) * C]).try_into().unwrap();
            let s: &[T; C] = row[t * C..(t + 1) * C].try_into().unwrap();
            for i in 0..C {
                d[i] += s[i];
            }
        }
    });
}

#[inline]
fn col2im_row_add<T: Scalar>(tab: &TapTable, row: &[T], cin: usize, r: usize, dx: &mut [T]) {
    match cin {
        1 => scatter_row::<T, 1>(tab, row, r, dx),
        2 => scatter_row::<T, 2>(tab, row, r, dx),
        4 => scatter_row::<T, 4>(tab, row, r, dx),
        8 => scatter_row::<T, 8>(tab, row, r, dx),
        16 => scatter_row::<T, 16>(tab, row, r, dx),
        _ => tab.for_each(r, |t, src| {
            if let Some(v) = src {
                dx[v * cin..(v + 1) * cin]
                    .iter_mut()
                    .zip(&row[t * cin..(t + 1) * cin])
                    .for_each(|(d, &s)| *d += s);
            }
        }),
    }
}

fn im2col<T: Scalar>(geo: &Geometry, x: &[T], cin: usize, rows: std::ops::Range<usize>, col: &mut [T]) {
    let k = geo.spec.taps() * cin;
    let tab = TapTable::new(geo);
    for (row, r) in col.chunks_exact_mut(k).zip(rows) {
        im2col_row(&tab, x, cin, r, row);
    }
}

fn col2im_add<T: Scalar>(geo: &Geometry, col: &[T], cin: usize, rows: std::ops::Range<usize>, dx: &mut [T]) {
    let k = geo.spec.taps() * cin;
    let tab = TapTable::new(geo);
    for (row, r) in col.chunks_exact(k).zip(rows) {
        col2im_row_add(&tab, row, cin, r, dx);
    }
}

/// Layers with at most this many output channels skip the packed GEMM and
/// stream one column row at a time.
const NARROW: usize = 16;

/// Output rows per parallel task on the narrow path.
const NARROW_ROWS: usize = 256;

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

#[inline]
fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y += alpha * x);
}

/// `[k, n]` row-major to `[n, k]`.
fn transpose<T: Scalar>(a: &[T], k: usize, n: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for i in 0..k {
        for j in 0..n {
            t[j * k + i] = a[i * n + j];
        }
    }
    t
}

fn narrow_forward<T: Scalar>(geo: &Geometry, x: &[T], w: &[T], cin: usize, cout: usize, out: &mut [T]) {
    let k = geo.spec.taps() * cin;
    let wt = transpose(w, k, cout);
    let tab = TapTable::new(geo);
    out.par_chunks_mut(NARROW_ROWS * cout)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let mut row = vec![T::zero(); k];
            for (i, o) in chunk.chunks_exact_mut(cout).enumerate() {
                im2col_row(&tab, x, cin, ci * NARROW_ROWS + i, &mut row);
                for (oj, wj) in o.iter_mut().zip(wt.chunks_exact(k)) {
                    *oj = dot(&row, wj);
                }
            }
        });
}

fn narrow_backward<T: Scalar>(
    geo: &Geometry,
    x: &[T],
    w: &[T],
    g: &[T],
    cin: usize,
    cout: usize,
    dw: Option<&mut Vec<T>>,
    mut dx: Option<&mut Vec<T>>,
) {
    let k = geo.spec.taps() * cin;
    let wt = transpose(w, k, cout);
    let tab = TapTable::new(geo);
    let mut dwt = dw.as_ref().map(|_| vec![T::zero(); k * cout]);
    let mut row = vec![T::zero(); k];
    let mut drow = vec![T::zero(); k];
    for (r, gr) in g.chunks_exact(cout).enumerate() {
        if gr.iter().all(|v| v.is_zero()) {
            continue;
        }
        if let Some(dwt) = &mut dwt {
            im2col_row(&tab, x, cin, r, &mut row);
            for (dj, &gj) in dwt.chunks_exact_mut(k).zip(gr) {
                axpy(dj, gj, &row);
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            drow.fill(T::zero());
            for (wj, &gj) in wt.chunks_exact(k).zip(gr) {
                axpy(&mut drow, gj, wj);
            }
            col2im_row_add(&tab, &drow, cin, r, dx);
        }
    }
    if let (Some(dw), Some(dwt)) = (dw, dwt) {
        *dw = transpose(&dwt, cout, k);
    }
}

fn rows_per_chunk(k: usize) -> usize {
    (CHUNK_ELEMS / k.max(1)).max(1)
}

fn conv_forward<T: Scalar>(geo: &Geometry, x: &[T], w: &[T], b: &[T], cin: usize, cout: usize) -> Vec<T> {
    let n = geo.out_voxels();
    let k = geo.spec.taps() * cin;
    let mut out = vec![T::zero(); n * cout];
    if geo.is_pointwise() {
        T::gemm(n, k, cout, x, false, w, false, &mut out, false);
    } else if cout <= NARROW {
        narrow_forward(geo, x, w, cin, cout, &mut out);
    } else {
        let chunk = rows_per_chunk(k);
        out.par_chunks_mut(chunk * cout)
            .enumerate()
            .for_each(|(ci, out_chunk)| {
                let r0 = ci * chunk;
                let rows = out_chunk.len() / cout;
                let mut col = vec![T::zero(); rows * k];
                im2col(geo, x, cin, r0..r0 + rows, &mut col);
                T::gemm(rows, k, cout, &col, false, w, false, out_chunk, false);
            });
    }
    for row in out.chunks_mut(cout) {
        row.iter_mut().zip(b).for_each(|(o, &bb)| *o += bb);
    }
    out
}

struct ConvGrads<T> {
    input: Option<Vec<T>>,
    weight: Option<Vec<T>>,
    bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    geo: &Geometry,
    x: &[T],
    w: &[T],
    g: &[T],
    cin: usize,
    cout: usize,
    needs: [bool; 3],
) -> ConvGrads<T> {
    let n = geo.out_voxels();
    let k = geo.spec.taps() * cin;

    let bias = needs[2].then(|| {
        let mut db = vec![T::zero(); cout];
        for row in g.chunks(cout) {
            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
        }
        db
    });

    let mut dw = needs[1].then(|| vec![T::zero(); k * cout]);
    let mut dx = needs[0].then(|| vec![T::zero(); x.len()]);

    if geo.is_pointwise() {
        if let Some(dw) = &mut dw {
            T::gemm(k, n, cout, x, true, g, false, dw, false);
        }
        if let Some(dx) = &mut dx {
            T::gemm(n, cout, k, g, false, w, true, dx, false);
        }
    } else if cout <= NARROW {
        narrow_backward(geo, x, w, g, cin, cout, dw.as_mut(), dx.as_mut());
    } else if dw.is_some() || dx.is_some() {
        let chunk = rows_per_chunk(k);
        let mut col = vec![T::zero(); chunk.min(n) * k];
        let mut r0 = 0;
        while r0 < n {
            let rows = chunk.min(n - r0);
            let g_chunk = &g[r0 * cout..(r0 + rows) * cout];
            let col = &mut col[..rows * k];
            if let Some(dw) = &mut dw {
                im2col(geo, x, cin, r0..r0 + rows, col);
                T::gemm(k, rows, cout, col, true, g_chunk, false, dw, true);
            }
            if let Some(dx) = &mut dx {
                T::gemm(rows, cout, k, g_chunk, false, w, true, col, false);
                col2im_add(geo, col, cin, r0..r0 + rows, dx);
            }
            r0 += rows;
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias,
    }
}

fn spatial(shape: &[usize]) -> [usize; 3] {
    [shape[0], shape[1], shape[2]]
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `input [X,Y,Z,Cin]` with `weight [kx,ky,kz,Cin,Cout]`
    /// plus `bias [Cout]`.
    pub fn conv3d(&self, input: Var, weight: Var, bias: Var, spec: &ConvSpec) -> Result<Var> {
        let (out, geo) = self.with_values(&[input, weight, bias], |v| -> Result<_> {
            let (x, w, b) = (v[0], v[1], v[2]);
            if x.rank() != 4 {
                return Err(Error::shape(format!("conv3d input must be [X,Y,Z,C], got {:?}", x.shape())));
            }
            let cin = x.shape()[3];
            if w.rank() != 5
                || w.shape()[..3] != spec.kernel
                || w.shape()[3] != cin
            {
                return Err(Error::shape(format!(
                    "conv3d weight {:?} does not match kernel {:?} with {cin} input channels",
                    w.shape(),
                    spec.kernel
                )));
            }
            let cout = w.shape()[4];
            if b.shape() != [cout] {
                return Err(Error::shape(format!("conv3d bias {:?}, expected [{cout}]", b.shape())));
            }
            let geo = Geometry::new(spatial(x.shape()), spec)?;
            let data = conv_forward(&geo, x.data(), w.data(), b.data(), cin, cout);
            let [ox, oy, oz] = geo.output;
            Ok((Tensor::from_vec(&[ox, oy, oz, cout], data)?, geo))
        })?;
        self.push(
            "conv3d",
            &[input, weight, bias],
            out,
            Box::new(move |ctx| {
                let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
                let cin = x.shape()[3];
                let cout = w.shape()[4];
                let needs = [ctx.needs[0], ctx.needs[1], ctx.needs[2]];
                let g = conv_backward(&geo, x.data(), w.data(), ctx.grad, cin, cout, needs);
                vec![g.input, g.weight, g.bias]
            }),
        )
    }
}

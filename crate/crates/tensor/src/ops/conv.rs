//! 2D and 3D convolution via im2col + GEMM.

use crate::error::{Result, TensorError};
use crate::tape::{Backward, Grads, Values};
use crate::tensor::expect_rank;
use crate::{Scalar, Tape, Tensor, Var};

/// Stride and zero padding of a 3D convolution, ordered (T, H, W).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Conv3dSpec { stride, padding }
    }

    /// Stride 1, "same" padding for an odd cubic kernel of side `k`.
    pub fn same(k: usize) -> Self {
        Conv3dSpec::new([1; 3], [k / 2; 3])
    }
}

/// Stride and zero padding of a 2D convolution, ordered (H, W).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: [usize; 2],
    pub padding: [usize; 2],
}

impl Conv2dSpec {
    pub fn new(stride: [usize; 2], padding: [usize; 2]) -> Self {
        Conv2dSpec { stride, padding }
    }

    pub fn same(k: usize) -> Self {
        Conv2dSpec::new([1; 2], [k / 2; 2])
    }

    fn as_3d(self) -> Conv3dSpec {
        Conv3dSpec::new(
            [1, self.stride[0], self.stride[1]],
            [0, self.padding[0], self.padding[1]],
        )
    }
}

/// Output extent of one convolution axis: `floor((n + 2p - k) / s) + 1`.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || k == 0 || n + 2 * pad < k {
        return None;
    }
    Some((n + 2 * pad - k) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out: [usize; 3],
}

impl Geometry {
    fn new(op: &'static str, x: &[usize], k: &[usize], spec: Conv3dSpec) -> Result<Self> {
        // x: [N, Ci, T, H, W]; k: [Co, Ci, kT, kH, kW]
        if k[1] != x[1] {
            return Err(TensorError::dim(op, 1, k[1], x[1]));
        }
        let mut out = [0; 3];
        for axis in 0..3 {
            if spec.stride[axis] == 0 {
                return Err(TensorError::invalid(op, format!("zero stride on axis {}", axis + 2)));
            }
            out[axis] = conv_out_extent(x[axis + 2], k[axis + 2], spec.stride[axis], spec.padding[axis])
                .ok_or_else(|| {
                    TensorError::dim(
                        op,
                        axis + 2,
                        format!(">= {} after padding", k[axis + 2]),
                        x[axis + 2] + 2 * spec.padding[axis],
                    )
                })?;
        }
        Ok(Geometry {
            batch: x[0],
            c_in: x[1],
            c_out: k[0],
            input: [x[2], x[3], x[4]],
            kernel: [k[2], k[3], k[4]],
            stride: spec.stride,
            pad: spec.padding,
            out,
        })
    }

    fn in_volume(&self) -> usize {
        self.input.iter().product()
    }

    fn out_volume(&self) -> usize {
        self.out.iter().product()
    }

    fn rows(&self) -> usize {
        self.c_in * self.kernel.iter().product::<usize>()
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }

    /// Valid output range along one axis for kernel offset `k`: the
    /// outputs whose source index `o * s + k - p` lies inside `[0, n)`.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (n, s, p) = (self.input[axis], self.stride[axis], self.pad[axis]);
        let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
        let hi = if n + p > k {
            ((n + p - k - 1) / s + 1).min(self.out[axis])
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Calls `f(row, col_offset, src_offset, len, src_step)` for every
    /// contiguous run of the im2col matrix that maps to in-bounds input.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [kt, kh, kw] = self.kernel;
        let [_, oh_n, ow_n] = self.out;
        let [_, h, w] = self.input;
        let (st, sh, sw) = (self.stride[0], self.stride[1], self.stride[2]);
        let out_plane = oh_n * ow_n;
        let in_plane = h * w;
        let mut row = 0;
        for c in 0..self.c_in {
            let in_base = c * self.in_volume();
            for a in 0..kt {
                let (t_lo, t_hi) = self.valid(0, a);
                for b in 0..kh {
                    let (h_lo, h_hi) = self.valid(1, b);
                    for d in 0..kw {
                        let (w_lo, w_hi) = self.valid(2, d);
                        if w_hi > w_lo {
                            for ot in t_lo..t_hi {
                                let it = ot * st + a - self.pad[0];
                                for oh in h_lo..h_hi {
                                    let ih = oh * sh + b - self.pad[1];
                                    let iw = w_lo * sw + d - self.pad[2];
                                    f(
                                        row,
                                        ot * out_plane + oh * ow_n + w_lo,
                                        in_base + it * in_plane + ih * w + iw,
                                        w_hi - w_lo,
                                        sw,
                                    );
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let p = self.out_volume();
        col.fill(T::zero());
        self.for_each_run(|row, dst, src, len, step| {
            let out = &mut col[row * p + dst..row * p + dst + len];
            if step == 1 {
                out.copy_from_slice(&x[src..src + len]);
            } else {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = x[src + i * step];
                }
            }
        });
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let p = self.out_volume();
        self.for_each_run(|row, src, dst, len, step| {
            let run = &col[row * p + src..row * p + src + len];
            if step == 1 {
                for (o, &v) in dx[dst..dst + len].iter_mut().zip(run) {
                    *o += v;
                }
            } else {
                for (i, &v) in run.iter().enumerate() {
                    dx[dst + i * step] += v;
                }
            }
        });
    }
}

fn conv_forward<T: Scalar>(g: &Geometry, x: &[T], k: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (rows, p) = (g.rows(), g.out_volume());
    let in_stride = g.c_in * g.in_volume();
    let out_stride = g.c_out * p;
    let mut out = vec![T::zero(); g.batch * out_stride];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); rows * p] };
    for n in 0..g.batch {
        let xs = &x[n * in_stride..(n + 1) * in_stride];
        let ys = &mut out[n * out_stride..(n + 1) * out_stride];
        if let Some(b) = bias {
            for (co, plane) in ys.chunks_exact_mut(p).enumerate() {
                plane.fill(b[co]);
            }
        }
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            g.im2col(xs, &mut col);
            &col
        };
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            g.c_out,
            rows,
            p,
            T::one(),
            k,
            (rows as isize, 1),
            cols,
            (p as isize, 1),
            beta,
            ys,
            (p as isize, 1),
        );
    }
    out
}

struct ConvBackward {
    input: Var,
    kernel: Var,
    bias: Option<Var>,
    geom: Geometry,
    name: &'static str,
}

impl<T: Scalar> Backward<T> for ConvBackward {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, grad_out: &[T], values: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        let g = &self.geom;
        let (rows, p) = (g.rows(), g.out_volume());
        let in_stride = g.c_in * g.in_volume();
        let out_stride = g.c_out * p;
        let x = values.get(self.input).data();
        let k = values.get(self.kernel).data();

        if let Some(db) = self.bias.and_then(|b| grads.slot(b)) {
            for n in 0..g.batch {
                let gs = &grad_out[n * out_stride..(n + 1) * out_stride];
                for (co, plane) in gs.chunks_exact(p).enumerate() {
                    db[co] += plane.iter().copied().sum::<T>();
                }
            }
        }

        let mut col = vec![T::zero(); rows * p];
        if let Some(dk) = grads.slot(self.kernel) {
            for n in 0..g.batch {
                let xs = &x[n * in_stride..(n + 1) * in_stride];
                let gs = &grad_out[n * out_stride..(n + 1) * out_stride];
                let cols: &[T] = if g.is_pointwise() {
                    xs
                } else {
                    g.im2col(xs, &mut col);
                    &col
                };
                // dK[co, r] += gout[co, p] * col[r, p]
                T::gemm(
                    g.c_out,
                    p,
                    rows,
                    T::one(),
                    gs,
                    (p as isize, 1),
                    cols,
                    (1, p as isize),
                    T::one(),
                    dk,
                    (rows as isize, 1),
                );
            }
        }

        if let Some(dx) = grads.slot(self.input) {
            for n in 0..g.batch {
                let gs = &grad_out[n * out_stride..(n + 1) * out_stride];
                let dxs = &mut dx[n * in_stride..(n + 1) * in_stride];
                if g.is_pointwise() {
                    // dx[ci, p] += K[co, ci]^T * gout[co, p]
                    T::gemm(
                        rows,
                        g.c_out,
                        p,
                        T::one(),
                        k,
                        (1, rows as isize),
                        gs,
                        (p as isize, 1),
                        T::one(),
                        dxs,
                        (p as isize, 1),
                    );
                } else {
                    T::gemm(
                        rows,
                        g.c_out,
                        p,
                        T::one(),
                        k,
                        (1, rows as isize),
                        gs,
                        (p as isize, 1),
                        T::zero(),
                        &mut col,
                        (p as isize, 1),
                    );
                    g.col2im(&col, dxs);
                }
            }
        }
    }
}

fn check_bias<T: Scalar>(op: &'static str, tape: &Tape<T>, bias: Option<Var>, c_out: usize) -> Result<()> {
    if let Some(b) = bias {
        let shape = tape.shape(b);
        if shape != [c_out] {
            return Err(TensorError::invalid(op, format!("bias shape {shape:?}, expected [{c_out}]")));
        }
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    /// 3D convolution. `input` is `[N, C_in, T, H, W]`, `kernel` is
    /// `[C_out, C_in, kT, kH, kW]`, optional `bias` is `[C_out]`.
    pub fn conv3d(&mut self, input: Var, kernel: Var, bias: Option<Var>, spec: Conv3dSpec) -> Result<Var> {
        const OP: &str = "conv3d";
        expect_rank(OP, self.value(input), 5)?;
        expect_rank(OP, self.value(kernel), 5)?;
        let geom = Geometry::new(OP, self.shape(input), self.shape(kernel), spec)?;
        check_bias(OP, self, bias, geom.c_out)?;
        let out = conv_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = vec![geom.batch, geom.c_out, geom.out[0], geom.out[1], geom.out[2]];
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            &inputs,
            ConvBackward { input, kernel, bias, geom, name: OP },
        ))
    }

    /// 2D convolution. `input` is `[N, C_in, H, W]`, `kernel` is
    /// `[C_out, C_in, kH, kW]`, optional `bias` is `[C_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        const OP: &str = "conv2d";
        expect_rank(OP, self.value(input), 4)?;
        expect_rank(OP, self.value(kernel), 4)?;
        let xs = self.shape(input);
        let ks = self.shape(kernel);
        let x5 = [xs[0], xs[1], 1, xs[2], xs[3]];
        let k5 = [ks[0], ks[1], 1, ks[2], ks[3]];
        let geom = Geometry::new(OP, &x5, &k5, spec.as_3d()).map_err(|e| match e {
            // report axes in 4D numbering
            TensorError::Dimension { op, axis, expected, got } if axis >= 3 => {
                TensorError::Dimension { op, axis: axis - 1, expected, got }
            }
            other => other,
        })?;
        check_bias(OP, self, bias, geom.c_out)?;
        let out = conv_forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let shape = vec![geom.batch, geom.c_out, geom.out[1], geom.out[2]];
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::new(shape, out)?,
            &inputs,
            ConvBackward { input, kernel, bias, geom, name: OP },
        ))
    }
}

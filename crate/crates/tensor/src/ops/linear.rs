use crate::error::{Result, TensorError};
use crate::tape::{Backward, Grads, Values};
use crate::tensor::expect_rank;
use crate::{Scalar, Tape, Tensor, Var};

struct LinearBackward {
    input: Var,
    weight: Var,
    bias: Option<Var>,
    batch: usize,
    fan_in: usize,
    fan_out: usize,
}

impl<T: Scalar> Backward<T> for LinearBackward {
    fn name(&self) -> &'static str {
        "fully_connected"
    }

    fn backward(&self, grad_out: &[T], values: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        let (n, f, o) = (self.batch, self.fan_in, self.fan_out);
        let x = values.get(self.input).data();
        let w = values.get(self.weight).data();
        if let Some(db) = self.bias.and_then(|b| grads.slot(b)) {
            for row in grad_out.chunks_exact(o) {
                db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
            }
        }
        if let Some(dw) = grads.slot(self.weight) {
            // dW[o, f] += G[n, o]^T X[n, f]
            T::gemm(o, n, f, T::one(), grad_out, (1, o as isize), x, (f as isize, 1), T::one(), dw, (f as isize, 1));
        }
        if let Some(dx) = grads.slot(self.input) {
            // dX[n, f] += G[n, o] W[o, f]
            T::gemm(n, o, f, T::one(), grad_out, (o as isize, 1), w, (f as isize, 1), T::one(), dx, (f as isize, 1));
        }
    }
}

struct ConcatBackward {
    inputs: Vec<Var>,
    /// Elements per sample contributed by each input.
    widths: Vec<usize>,
    batch: usize,
}

impl<T: Scalar> Backward<T> for ConcatBackward {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, grad_out: &[T], _: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        let total: usize = self.widths.iter().sum();
        let mut offset = 0;
        for (&v, &width) in self.inputs.iter().zip(&self.widths) {
            if let Some(d) = grads.slot(v) {
                for n in 0..self.batch {
                    let src = &grad_out[n * total + offset..n * total + offset + width];
                    d[n * width..(n + 1) * width]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &g)| *d += g);
                }
            }
            offset += width;
        }
    }
}

struct ReshapeBackward {
    input: Var,
}

impl<T: Scalar> Backward<T> for ReshapeBackward {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(&self, grad_out: &[T], _: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        if let Some(d) = grads.slot(self.input) {
            d.iter_mut().zip(grad_out).for_each(|(d, &g)| *d += g);
        }
    }
}

struct NarrowBackward {
    input: Var,
    /// Element offset of the first kept sample.
    offset: usize,
}

impl<T: Scalar> Backward<T> for NarrowBackward {
    fn name(&self) -> &'static str {
        "narrow_batch"
    }

    fn backward(&self, grad_out: &[T], _: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        if let Some(d) = grads.slot(self.input) {
            d[self.offset..self.offset + grad_out.len()]
                .iter_mut()
                .zip(grad_out)
                .for_each(|(d, &g)| *d += g);
        }
    }
}

struct SumBackward<T> {
    input: Var,
    factor: T,
}

impl<T: Scalar> Backward<T> for SumBackward<T> {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, grad_out: &[T], _: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        if let Some(d) = grads.slot(self.input) {
            let g = grad_out[0] * self.factor;
            d.iter_mut().for_each(|d| *d += g);
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// `x [N, F] · Wᵀ + b` with `weight [O, F]` and optional `bias [O]`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        const OP: &str = "fully_connected";
        expect_rank(OP, self.value(input), 2)?;
        expect_rank(OP, self.value(weight), 2)?;
        let (n, f) = (self.shape(input)[0], self.shape(input)[1]);
        let (o, wf) = (self.shape(weight)[0], self.shape(weight)[1]);
        if wf != f {
            return Err(TensorError::dim(OP, 1, wf, f));
        }
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(TensorError::invalid(OP, format!("bias shape {:?}, expected [{o}]", self.shape(b))));
            }
            let bd = self.value(b).data();
            for row in out.chunks_exact_mut(o) {
                row.copy_from_slice(bd);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        T::gemm(
            n,
            f,
            o,
            T::one(),
            self.value(input).data(),
            (f as isize, 1),
            self.value(weight).data(),
            (1, f as isize),
            beta,
            &mut out,
            (o as isize, 1),
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(
            value,
            &inputs,
            LinearBackward { input, weight, bias, batch: n, fan_in: f, fan_out: o },
        ))
    }

    /// Concatenates `[N, C_i, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::invalid(OP, "no inputs"))?;
        let base = self.shape(first).to_vec();
        if base.len() < 2 {
            return Err(TensorError::Rank { op: OP, expected: 2, shape: base });
        }
        let mut channels = 0;
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() {
                return Err(TensorError::Rank { op: OP, expected: base.len(), shape: s.to_vec() });
            }
            for axis in (0..s.len()).filter(|&a| a != 1) {
                if s[axis] != base[axis] {
                    return Err(TensorError::dim(OP, axis, base[axis], s[axis]));
                }
            }
            channels += s[1];
            widths.push(s[1..].iter().product::<usize>());
        }
        let batch = base[0];
        let mut data = Vec::with_capacity(batch * widths.iter().sum::<usize>());
        for n in 0..batch {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[n * w..(n + 1) * w]);
            }
        }
        let mut shape = base;
        shape[1] = channels;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, inputs, ConcatBackward { inputs: inputs.to_vec(), widths, batch }))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        Ok(self.push(value, &[input], ReshapeBackward { input }))
    }

    /// Samples `start..start + len` of a batch-major tensor.
    pub fn narrow_batch(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        const OP: &str = "narrow_batch";
        let shape = self.shape(input).to_vec();
        let n = *shape
            .first()
            .ok_or_else(|| TensorError::invalid(OP, "scalar input"))?;
        if len == 0 || start + len > n {
            return Err(TensorError::invalid(OP, format!("samples {start}..{} of {n}", start + len)));
        }
        let width = shape[1..].iter().product::<usize>();
        let data = self.value(input).data()[start * width..(start + len) * width].to_vec();
        let mut out = shape;
        out[0] = len;
        let value = Tensor::new(out, data)?;
        Ok(self.push(value, &[input], NarrowBackward { input, offset: start * width }))
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, input: Var) -> Var {
        let total = self.value(input).sum();
        self.push(Tensor::scalar(total), &[input], SumBackward { input, factor: T::one() })
    }

    /// Mean of all elements as a `[1]` tensor.
    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let factor = T::one() / T::of(x.numel() as f64);
        let total = x.sum() * factor;
        self.push(Tensor::scalar(total), &[input], SumBackward { input, factor })
    }
}

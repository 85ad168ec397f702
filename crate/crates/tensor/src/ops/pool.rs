use crate::error::{Result, TensorError};
use crate::tape::{Backward, Grads, Values};
use crate::tensor::expect_rank;
use crate::{Scalar, Tape, Tensor, Var};

struct MaxPoolBackward {
    input: Var,
    /// Flat input index of the selected element for every output cell.
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPoolBackward {
    fn name(&self) -> &'static str {
        "maxpool3d"
    }

    fn backward(&self, grad_out: &[T], _values: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        if let Some(dx) = grads.slot(self.input) {
            for (&src, &g) in self.argmax.iter().zip(grad_out) {
                dx[src] += g;
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// 3D max pooling over `[N, C, T, H, W]` without padding. Ties resolve to
    /// the first element of the window in row-major order.
    pub fn maxpool3d(&mut self, input: Var, window: [usize; 3], stride: [usize; 3]) -> Result<Var> {
        const OP: &str = "maxpool3d";
        let x = self.value(input);
        expect_rank(OP, x, 5)?;
        let s = x.shape();
        let mut out = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || window[a] == 0 {
                return Err(TensorError::invalid(OP, "zero window or stride"));
            }
            if window[a] > s[a + 2] {
                return Err(TensorError::dim(OP, a + 2, format!(">= {}", window[a]), s[a + 2]));
            }
            out[a] = (s[a + 2] - window[a]) / stride[a] + 1;
        }
        let (n, c, t, h, w) = (s[0], s[1], s[2], s[3], s[4]);
        let data = x.data();
        let cells = n * c * out[0] * out[1] * out[2];
        let mut values = Vec::with_capacity(cells);
        let mut argmax = Vec::with_capacity(cells);
        for plane in 0..n * c {
            let base = plane * t * h * w;
            for ot in 0..out[0] {
                for oh in 0..out[1] {
                    for ow in 0..out[2] {
                        let mut best_idx = usize::MAX;
                        let mut best = T::neg_infinity();
                        for a in 0..window[0] {
                            let it = ot * stride[0] + a;
                            for b in 0..window[1] {
                                let ih = oh * stride[1] + b;
                                let row = base + (it * h + ih) * w;
                                for d in 0..window[2] {
                                    let idx = row + ow * stride[2] + d;
                                    if best_idx == usize::MAX || data[idx] > best {
                                        best = data[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        values.push(best);
                        argmax.push(best_idx);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, out[0], out[1], out[2]], values)?;
        Ok(self.push(value, &[input], MaxPoolBackward { input, argmax }))
    }
}

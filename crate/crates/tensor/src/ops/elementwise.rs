use crate::error::{Result, TensorError};
use crate::tape::{Backward, Grads, Values};
use crate::tensor::expect_rank;
use crate::{Scalar, Tape, Tensor, Var};

struct GrlBackward<T> {
    input: Var,
    lambda: T,
}

impl<T: Scalar> Backward<T> for GrlBackward<T> {
    fn name(&self) -> &'static str {
        "grl"
    }

    fn backward(&self, grad_out: &[T], _: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        if let Some(dx) = grads.slot(self.input) {
            let k = -self.lambda;
            for (d, &g) in dx.iter_mut().zip(grad_out) {
                *d += k * g;
            }
        }
    }
}

struct SigmoidBackward {
    input: Var,
    output: Vec<f64>,
}

impl<T: Scalar> Backward<T> for SigmoidBackward {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(&self, grad_out: &[T], _: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        if let Some(dx) = grads.slot(self.input) {
            for ((d, &g), &y) in dx.iter_mut().zip(grad_out).zip(&self.output) {
                *d += g * T::of(y * (1.0 - y));
            }
        }
    }
}

struct ReluBackward {
    input: Var,
}

impl<T: Scalar> Backward<T> for ReluBackward {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(&self, grad_out: &[T], values: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        let x = values.get(self.input).data();
        if let Some(dx) = grads.slot(self.input) {
            for ((d, &g), &v) in dx.iter_mut().zip(grad_out).zip(x) {
                if v > T::zero() {
                    *d += g;
                }
            }
        }
    }
}

struct AddBackward {
    a: Var,
    b: Var,
}

impl<T: Scalar> Backward<T> for AddBackward {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, grad_out: &[T], _: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        for v in [self.a, self.b] {
            if let Some(d) = grads.slot(v) {
                d.iter_mut().zip(grad_out).for_each(|(d, &g)| *d += g);
            }
        }
    }
}

struct ScaleBackward<T> {
    input: Var,
    factor: T,
}

impl<T: Scalar> Backward<T> for ScaleBackward<T> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, grad_out: &[T], _: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        if let Some(d) = grads.slot(self.input) {
            d.iter_mut().zip(grad_out).for_each(|(d, &g)| *d += self.factor * g);
        }
    }
}

struct MulMapBackward {
    input: Var,
    map: Var,
    plane: usize,
}

impl<T: Scalar> Backward<T> for MulMapBackward {
    fn name(&self) -> &'static str {
        "mul_map"
    }

    fn backward(&self, grad_out: &[T], values: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        let x = values.get(self.input).data();
        let m = values.get(self.map).data();
        if let Some(dm) = grads.slot(self.map) {
            for (gs, xs) in grad_out.chunks_exact(self.plane).zip(x.chunks_exact(self.plane)) {
                for i in 0..self.plane {
                    dm[i] += gs[i] * xs[i];
                }
            }
        }
        if let Some(dx) = grads.slot(self.input) {
            for (ds, gs) in dx.chunks_exact_mut(self.plane).zip(grad_out.chunks_exact(self.plane)) {
                for i in 0..self.plane {
                    ds[i] += gs[i] * m[i];
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<T: Scalar> Tape<T> {
    /// Gradient reversal: identity forward, `-lambda * grad` backward.
    pub fn grl(&mut self, input: Var, lambda: T) -> Result<Var> {
        if !(lambda >= T::zero()) {
            return Err(TensorError::invalid("grl", format!("lambda must be >= 0, got {lambda}")));
        }
        let value = self.value(input).clone();
        Ok(self.push(value, &[input], GrlBackward { input, lambda }))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let output: Vec<f64> = x.data().iter().map(|&v| sigmoid(v.as_f64())).collect();
        // keep outputs strictly inside (0, 1) at the working precision
        let (lo, hi) = (T::min_positive_value(), T::one() - T::epsilon() / T::of(2.0));
        let value = Tensor::new(
            x.shape().to_vec(),
            output.iter().map(|&y| T::of(y).max(lo).min(hi)).collect(),
        )
        .expect("same shape");
        self.push(value, &[input], SigmoidBackward { input, output })
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(T::zero()));
        self.push(value, &[input], ReluBackward { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.shape() != xb.shape() {
            return Err(TensorError::invalid(
                "add",
                format!("shapes {:?} and {:?} differ", xa.shape(), xb.shape()),
            ));
        }
        let data = xa.data().iter().zip(xb.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(xa.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], AddBackward { a, b }))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = self.value(input).map(|v| v * factor);
        self.push(value, &[input], ScaleBackward { input, factor })
    }

    /// Elementwise product of `[N, C, H, W]` features with an `[H, W]` map
    /// broadcast over batch and channels.
    pub fn mul_map(&mut self, input: Var, map: Var) -> Result<Var> {
        const OP: &str = "mul_map";
        let x = self.value(input);
        expect_rank(OP, x, 4)?;
        let m = self.value(map);
        expect_rank(OP, m, 2)?;
        let (xs, ms) = (x.shape(), m.shape());
        for a in 0..2 {
            if xs[a + 2] != ms[a] {
                return Err(TensorError::dim(OP, a + 2, ms[a], xs[a + 2]));
            }
        }
        let plane = ms[0] * ms[1];
        let md = m.data();
        let data = x
            .data()
            .chunks_exact(plane)
            .flat_map(|c| c.iter().zip(md).map(|(&v, &w)| v * w))
            .collect();
        let value = Tensor::new(xs.to_vec(), data)?;
        Ok(self.push(value, &[input, map], MulMapBackward { input, map, plane }))
    }
}

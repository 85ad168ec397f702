//! Per-sample distribution primitives: pixel normalization, KL divergence
//! against a fixed target, and binary cross-entropy on logits.

use crate::error::{Result, TensorError};
use crate::tape::{Backward, Grads, Values};
use crate::{Scalar, Tape, Tensor, Var};

fn per_sample<T: Scalar>(op: &'static str, x: &Tensor<T>) -> Result<(usize, usize)> {
    let s = x.shape();
    if s.len() < 2 {
        return Err(TensorError::Rank { op, expected: 2, shape: s.to_vec() });
    }
    Ok((s[0], s[1..].iter().product()))
}

struct NormalizeBackward<T> {
    input: Var,
    output: Vec<T>,
    sums: Vec<T>,
    width: usize,
}

impl<T: Scalar> Backward<T> for NormalizeBackward<T> {
    fn name(&self) -> &'static str {
        "normalize_pixels"
    }

    fn backward(&self, grad_out: &[T], _: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        // y = u / Σu  ⇒  dx_j = (g_j − Σ_i g_i y_i) / Σu
        let Some(dx) = grads.slot(self.input) else {
            return;
        };
        let w = self.width;
        for (n, &total) in self.sums.iter().enumerate() {
            let g = &grad_out[n * w..(n + 1) * w];
            let y = &self.output[n * w..(n + 1) * w];
            let dot: T = g.iter().zip(y).map(|(&a, &b)| a * b).sum();
            for (d, &gj) in dx[n * w..(n + 1) * w].iter_mut().zip(g) {
                *d += (gj - dot) / total;
            }
        }
    }
}

struct KlBackward<T> {
    pred: Var,
    target: Vec<T>,
    floor: T,
}

impl<T: Scalar> Backward<T> for KlBackward<T> {
    fn name(&self) -> &'static str {
        "kl_div"
    }

    fn backward(&self, grad_out: &[T], values: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        let p = values.get(self.pred).data();
        let width = p.len() / grad_out.len();
        if let Some(dp) = grads.slot(self.pred) {
            for (i, d) in dp.iter_mut().enumerate() {
                let g = grad_out[i / width];
                if self.target[i] > T::zero() && p[i] > self.floor {
                    *d -= g * self.target[i] / p[i];
                }
            }
        }
    }
}

struct BceBackward<T> {
    logits: Var,
    targets: Vec<T>,
}

impl<T: Scalar> Backward<T> for BceBackward<T> {
    fn name(&self) -> &'static str {
        "bce_with_logits"
    }

    fn backward(&self, grad_out: &[T], values: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        let z = values.get(self.logits).data();
        if let Some(dz) = grads.slot(self.logits) {
            for i in 0..z.len() {
                let zi = z[i].as_f64();
                let p = if zi >= 0.0 {
                    1.0 / (1.0 + (-zi).exp())
                } else {
                    let e = zi.exp();
                    e / (1.0 + e)
                };
                dz[i] += grad_out[i] * (T::of(p) - self.targets[i]);
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Turns each sample of `[N, ...]` into a distribution over its elements:
    /// `(x + floor) / Σ (x + floor)`.
    pub fn normalize_pixels(&mut self, input: Var, floor: T) -> Result<Var> {
        const OP: &str = "normalize_pixels";
        let x = self.value(input);
        let (n, w) = per_sample(OP, x)?;
        let mut output = Vec::with_capacity(n * w);
        let mut sums = Vec::with_capacity(n);
        for chunk in x.data().chunks_exact(w) {
            let total: T = chunk.iter().map(|&v| v + floor).sum();
            if !(total > T::zero()) {
                return Err(TensorError::invalid(OP, "sample has non-positive mass"));
            }
            output.extend(chunk.iter().map(|&v| (v + floor) / total));
            sums.push(total);
        }
        let value = Tensor::new(x.shape().to_vec(), output.clone())?;
        Ok(self.push(
            value,
            &[input],
            NormalizeBackward { input, output, sums, width: w },
        ))
    }

    /// Per-sample `Σ_i G_i log(G_i / max(P_i, floor))` with `0·log 0 = 0`.
    /// Output shape is `[N]`.
    pub fn kl_div(&mut self, target: &Tensor<T>, pred: Var, floor: T) -> Result<Var> {
        const OP: &str = "kl_div";
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(TensorError::invalid(
                OP,
                format!("target shape {:?} differs from prediction {:?}", target.shape(), p.shape()),
            ));
        }
        let (n, w) = per_sample(OP, p)?;
        let mut out = Vec::with_capacity(n);
        for (gs, ps) in target.data().chunks_exact(w).zip(p.data().chunks_exact(w)) {
            let mut acc = T::zero();
            for (&g, &q) in gs.iter().zip(ps) {
                if g > T::zero() {
                    acc += g * (g / q.max(floor)).ln();
                }
            }
            out.push(acc);
        }
        let value = Tensor::new(vec![n], out)?;
        Ok(self.push(
            value,
            &[pred],
            KlBackward { pred, target: target.data().to_vec(), floor },
        ))
    }

    /// Elementwise `−d log σ(z) − (1−d) log(1−σ(z))`, evaluated stably from logits.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        const OP: &str = "bce_with_logits";
        let z = self.value(logits);
        if z.numel() != targets.len() {
            return Err(TensorError::invalid(
                OP,
                format!("{} logits for {} targets", z.numel(), targets.len()),
            ));
        }
        let data = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&zi, &d)| {
                let zf = zi.as_f64();
                let softplus = zf.max(0.0) + (-zf.abs()).exp().ln_1p();
                T::of(softplus - d.as_f64() * zf)
            })
            .collect();
        let value = Tensor::new(z.shape().to_vec(), data)?;
        Ok(self.push(value, &[logits], BceBackward { logits, targets: targets.to_vec() }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_samples_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let x = tape.variable(Tensor::from_fn(&[3, 1, 2, 2], |i| (i % 5) as f64));
        let y = tape.normalize_pixels(x, 1e-8).unwrap();
        for chunk in tape.value(y).data().chunks(4) {
            assert!((chunk.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_hand_values() {
        let mut tape = Tape::<f64>::new();
        let p = tape.variable(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let g = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let kl = tape.kl_div(&g, p, 1e-8).unwrap();
        assert!((tape.value(kl).data()[0] - 2f64.ln()).abs() < 1e-12);

        let p = tape.variable(Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap());
        let g = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let kl = tape.kl_div(&g, p, 1e-8).unwrap();
        let expect = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((tape.value(kl).data()[0] - expect).abs() < 1e-12);
        assert!((expect - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn bce_matches_probability_form() {
        let mut tape = Tape::<f64>::new();
        let z = tape.variable(Tensor::new(vec![3], vec![0.0, 2.0, -40.0]).unwrap());
        let l = tape.bce_with_logits(z, &[0.0, 1.0, 0.0]).unwrap();
        let out = tape.value(l).data();
        assert!((out[0] - 2f64.ln()).abs() < 1e-12);
        let p = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((out[1] + p.ln()).abs() < 1e-12);
        assert!(out[2] >= 0.0 && out[2] < 1e-15);
    }
}

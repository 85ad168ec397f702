use crate::error::Result;
use crate::tape::{Backward, Grads, Values};
use crate::tensor::expect_rank;
use crate::{Scalar, Tape, Tensor, Var};

/// Source taps `(i0, i1, frac)` for each output coordinate of a 2× bilinear
/// resize with half-pixel centers (align-corners off), edge-clamped.
fn taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

struct UpsampleBackward {
    input: Var,
    h: usize,
    w: usize,
}

impl<T: Scalar> Backward<T> for UpsampleBackward {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn backward(&self, grad_out: &[T], _values: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        let Some(dx) = grads.slot(self.input) else {
            return;
        };
        let (h, w) = (self.h, self.w);
        let (ty, tx) = (taps(h), taps(w));
        let (oh, ow) = (2 * h, 2 * w);
        let mut rows = vec![T::zero(); h * ow];
        for (plane, dxp) in dx.chunks_exact_mut(h * w).enumerate() {
            let gp = &grad_out[plane * oh * ow..(plane + 1) * oh * ow];
            rows.fill(T::zero());
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let (a, b) = (T::of(1.0 - fy), T::of(fy));
                for ox in 0..ow {
                    let g = gp[oy * ow + ox];
                    rows[y0 * ow + ox] += a * g;
                    rows[y1 * ow + ox] += b * g;
                }
            }
            for y in 0..h {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let g = rows[y * ow + ox];
                    dxp[y * w + x0] += T::of(1.0 - fx) * g;
                    dxp[y * w + x1] += T::of(fx) * g;
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Bilinear 2× upsampling of `[N, C, H, W]` with half-pixel centers.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        expect_rank("upsample2x", x, 4)?;
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (ty, tx) = (taps(h), taps(w));
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        let mut rows = vec![T::zero(); h * ow];
        // lerp form keeps constant maps bit-exact
        for (plane, xp) in x.data().chunks_exact(h * w).enumerate() {
            for y in 0..h {
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let (a, b) = (xp[y * w + x0], xp[y * w + x1]);
                    rows[y * ow + ox] = a + T::of(fx) * (b - a);
                }
            }
            let op = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let f = T::of(fy);
                for ox in 0..ow {
                    let (a, b) = (rows[y0 * ow + ox], rows[y1 * ow + ox]);
                    op[oy * ow + ox] = a + f * (b - a);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(value, &[input], UpsampleBackward { input, h, w }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_uses_half_pixel_centres() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(vec![1, 1, 1, 2], vec![0.0, 1.0]).unwrap());
        let y = tape.upsample2x(x).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 2, 4]);
        assert_eq!(tape.value(y).data(), &[0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn single_pixel_and_constant_maps() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[1, 1, 1, 1], 3.5));
        let y = tape.upsample2x(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.5; 4]);
        let x = tape.constant(Tensor::full(&[2, 3, 3, 5], 0.7));
        let y = tape.upsample2x(x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.7));
    }
}

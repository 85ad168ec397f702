//! Gaussian smoothing with edge-clamped borders and a learnable width.

use crate::error::{Result, TensorError};
use crate::tape::{Backward, Grads, Values};
use crate::tensor::expect_rank;
use crate::{Scalar, Tape, Tensor, Var};

/// Side of the discrete kernel for `sigma`: the smallest odd integer `>= 6σ`.
pub fn gaussian_kernel_side(sigma: f64) -> usize {
    let side = (6.0 * sigma - 1e-9).ceil().max(1.0) as usize;
    if side % 2 == 0 {
        side + 1
    } else {
        side
    }
}

/// Normalized 1D Gaussian taps for offsets `-r..=r`.
pub fn gaussian_kernel1d(sigma: f64) -> Vec<f64> {
    let r = (gaussian_kernel_side(sigma) / 2) as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Derivative of [`gaussian_kernel1d`] taps with respect to `sigma`, at
/// fixed support.
fn gaussian_kernel1d_dsigma(sigma: f64, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as i64;
    let s3 = sigma * sigma * sigma;
    let moment: f64 = (-r..=r).zip(k).map(|(i, &w)| w * (i * i) as f64).sum::<f64>() / s3;
    (-r..=r)
        .zip(k)
        .map(|(i, &w)| w * ((i * i) as f64 / s3 - moment))
        .collect()
}

fn clamp_index(i: i64, n: usize) -> usize {
    i.clamp(0, n as i64 - 1) as usize
}

/// Horizontal pass: `dst[y][x] = Σ_i k_i src[y][clamp(x + i)]`.
fn pass_h<T: Scalar>(src: &[T], dst: &mut [T], h: usize, w: usize, k: &[T]) {
    let r = (k.len() / 2) as i64;
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = T::zero();
            for (j, &kv) in k.iter().enumerate() {
                acc += kv * row[clamp_index(x as i64 + j as i64 - r, w)];
            }
            dst[y * w + x] = acc;
        }
    }
}

fn pass_v<T: Scalar>(src: &[T], dst: &mut [T], h: usize, w: usize, k: &[T]) {
    let r = (k.len() / 2) as i64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (j, &kv) in k.iter().enumerate() {
                acc += kv * src[clamp_index(y as i64 + j as i64 - r, h) * w + x];
            }
            dst[y * w + x] = acc;
        }
    }
}

/// Adjoint of [`pass_h`], accumulated into `dst`.
fn pass_h_t<T: Scalar>(g: &[T], dst: &mut [T], h: usize, w: usize, k: &[T]) {
    let r = (k.len() / 2) as i64;
    for y in 0..h {
        for x in 0..w {
            let gv = g[y * w + x];
            for (j, &kv) in k.iter().enumerate() {
                dst[y * w + clamp_index(x as i64 + j as i64 - r, w)] += kv * gv;
            }
        }
    }
}

fn pass_v_t<T: Scalar>(g: &[T], dst: &mut [T], h: usize, w: usize, k: &[T]) {
    let r = (k.len() / 2) as i64;
    for y in 0..h {
        for x in 0..w {
            let gv = g[y * w + x];
            for (j, &kv) in k.iter().enumerate() {
                dst[clamp_index(y as i64 + j as i64 - r, h) * w + x] += kv * gv;
            }
        }
    }
}

/// Blurs every `h × w` plane of `data` with a fixed Gaussian of width `sigma`.
pub fn gaussian_blur<T: Scalar>(data: &[T], h: usize, w: usize, sigma: f64) -> Vec<T> {
    let k: Vec<T> = gaussian_kernel1d(sigma).into_iter().map(T::of).collect();
    let mut out = vec![T::zero(); data.len()];
    let mut tmp = vec![T::zero(); h * w];
    for (src, dst) in data.chunks_exact(h * w).zip(out.chunks_exact_mut(h * w)) {
        pass_h(src, &mut tmp, h, w, &k);
        pass_v(&tmp, dst, h, w, &k);
    }
    out
}

struct SmoothBackward {
    input: Var,
    log_sigma: Var,
    sigma: f64,
    clamped: bool,
    h: usize,
    w: usize,
}

impl<T: Scalar> Backward<T> for SmoothBackward {
    fn name(&self) -> &'static str {
        "gaussian_smooth"
    }

    fn backward(&self, grad_out: &[T], values: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        let (h, w) = (self.h, self.w);
        let plane = h * w;
        let k64 = gaussian_kernel1d(self.sigma);
        let k: Vec<T> = k64.iter().map(|&v| T::of(v)).collect();
        let mut tmp = vec![T::zero(); plane];

        if self.clamped {
            // below the floor σ is constant
            let _ = grads.slot(self.log_sigma);
        } else if grads.wants(self.log_sigma) {
            let dk: Vec<T> = gaussian_kernel1d_dsigma(self.sigma, &k64)
                .into_iter()
                .map(T::of)
                .collect();
            let x = values.get(self.input).data();
            let mut a = vec![T::zero(); plane];
            let mut b = vec![T::zero(); plane];
            let mut dsigma = 0.0f64;
            for (xs, gs) in x.chunks_exact(plane).zip(grad_out.chunks_exact(plane)) {
                pass_h(xs, &mut a, h, w, &k);
                pass_h(xs, &mut b, h, w, &dk);
                pass_v(&a, &mut tmp, h, w, &dk);
                for (t, &g) in tmp.iter().zip(gs) {
                    dsigma += (*t * g).as_f64();
                }
                pass_v(&b, &mut tmp, h, w, &k);
                for (t, &g) in tmp.iter().zip(gs) {
                    dsigma += (*t * g).as_f64();
                }
            }
            if let Some(d) = grads.slot(self.log_sigma) {
                d[0] += T::of(dsigma * self.sigma);
            }
        }

        if let Some(dx) = grads.slot(self.input) {
            for (gs, ds) in grad_out.chunks_exact(plane).zip(dx.chunks_exact_mut(plane)) {
                tmp.fill(T::zero());
                pass_v_t(gs, &mut tmp, h, w, &k);
                pass_h_t(&tmp, ds, h, w, &k);
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Gaussian smoothing of each `[H, W]` plane of `[N, C, H, W]` with
    /// `σ = max(exp(log_sigma), min_sigma)`. The kernel is rebuilt from σ on
    /// every call; borders replicate the edge pixel so constants are preserved.
    pub fn gaussian_smooth(&mut self, input: Var, log_sigma: Var, min_sigma: f64) -> Result<Var> {
        const OP: &str = "gaussian_smooth";
        expect_rank(OP, self.value(input), 4)?;
        if self.value(log_sigma).numel() != 1 {
            return Err(TensorError::invalid(OP, "log_sigma must hold one value"));
        }
        let raw = self.value(log_sigma).data()[0].as_f64().exp();
        let (sigma, clamped) = if raw < min_sigma { (min_sigma, true) } else { (raw, false) };
        let s = self.shape(input).to_vec();
        let (h, w) = (s[2], s[3]);
        let data = gaussian_blur(self.value(input).data(), h, w, sigma);
        let value = Tensor::new(s, data)?;
        Ok(self.push(
            value,
            &[input, log_sigma],
            SmoothBackward { input, log_sigma, sigma, clamped, h, w },
        ))
    }
}

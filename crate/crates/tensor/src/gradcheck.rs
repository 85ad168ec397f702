//! Central finite-difference verification of recorded backward rules.

use crate::error::Result;
use crate::{Tape, Tensor, Var};

/// Fixed projection weights used to reduce an op output to a scalar.
fn probe_weights(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let h = (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 40;
            0.5 + (h as f64) / (1u64 << 24) as f64
        })
        .collect()
}

/// Compares the analytic gradient of `op` with central differences.
///
/// The output of `op` is projected onto fixed positive weights `w`, and the
/// gradient of `Σ w·op(inputs)` with respect to every input element is checked.
/// The per-element relative error is `|a − n| / max(|a|, |n|, 1e-4·‖n‖∞, 1e-12)`,
/// where `a` is analytic and `n` numeric; the worst one is returned.
pub fn finite_diff_check<F>(op: F, inputs: &[Tensor<f64>], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_check_scaled(op, inputs, epsilon, 1.0)
}

/// [`finite_diff_check`] against `expected_scale` times the numeric
/// derivative. Operations whose backward rule is deliberately not the
/// derivative of their forward (gradient reversal, `expected_scale = −λ`)
/// are checked this way.
pub fn finite_diff_check_scaled<F>(
    op: F,
    inputs: &[Tensor<f64>],
    epsilon: f64,
    expected_scale: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.variable(t.clone())).collect();
        let out = op(&mut tape, &vars)?;
        let w = probe_weights(tape.value(out).numel());
        Ok(tape.value(out).data().iter().zip(&w).map(|(a, b)| a * b).sum())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let seed = probe_weights(tape.value(out).numel());
    let grads = tape.backward_from(out, seed)?;

    let mut worst = 0.0f64;
    let mut perturbed = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let zeros = vec![0.0; input.numel()];
        let analytic = grads.get(vars[k]).unwrap_or(&zeros).to_vec();
        let mut numeric = vec![0.0; input.numel()];
        for i in 0..input.numel() {
            let orig = input.data()[i];
            perturbed[k].data_mut()[i] = orig + epsilon;
            let plus = eval(&perturbed)?;
            perturbed[k].data_mut()[i] = orig - epsilon;
            let minus = eval(&perturbed)?;
            perturbed[k].data_mut()[i] = orig;
            numeric[i] = expected_scale * (plus - minus) / (2.0 * epsilon);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for (a, n) in analytic.iter().zip(&numeric) {
            let denom = a.abs().max(n.abs()).max(1e-4 * scale).max(1e-12);
            worst = worst.max((a - n).abs() / denom);
        }
    }
    Ok(worst)
}

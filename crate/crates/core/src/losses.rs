//! Multi-level KL saliency loss and the domain-classification loss.

use hd2s_tensor::{Scalar, Tape, Tensor, Var};

use crate::error::{Error, Result};

/// Added to every pixel before normalizing a map into a distribution, and the
/// lower clamp on predicted probabilities inside the KL divergence.
pub const EPS_FLOOR: f64 = 1e-8;

/// Clamp applied to probabilities before taking logarithms in [`domain_nll`].
pub const PROB_CLAMP: f64 = 1e-7;

/// `(x + ε) / Σ (x + ε)` over all pixels.
pub fn normalize(map: &[f64]) -> Result<Vec<f64>> {
    if map.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Input("maps must be finite and non-negative".into()));
    }
    let total: f64 = map.iter().map(|v| v + EPS_FLOOR).sum();
    Ok(map.iter().map(|v| (v + EPS_FLOOR) / total).collect())
}

/// `Σ G_i log(G_i / P_i)` over normalized maps, with `0·log 0 = 0` and `P`
/// clamped at [`EPS_FLOOR`].
pub fn kl_divergence(target: &[f64], pred: &[f64]) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(Error::Input(format!(
            "map sizes differ: {} vs {}",
            target.len(),
            pred.len()
        )));
    }
    Ok(target
        .iter()
        .zip(pred)
        .filter(|(g, _)| **g > 0.0)
        .map(|(g, p)| g * (g / p.max(EPS_FLOOR)).ln())
        .sum())
}

/// Ground truth as a distribution; an all-zero map is rejected.
pub fn normalize_target(gt: &[f64]) -> Result<Vec<f64>> {
    let total: f64 = gt.iter().sum();
    if !(total > 0.0) || gt.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::DegenerateTarget);
    }
    Ok(gt.iter().map(|v| v / total).collect())
}

/// Multi-level loss of one frame evaluated directly: `KL(G‖Ŝ) + Σ_j KL(G‖Ĉ_j)`.
pub fn multi_level_loss(saliency: &[f64], conspicuity: &[&[f64]], gt: &[f64]) -> Result<f64> {
    let g = normalize_target(gt)?;
    let mut total = kl_divergence(&g, &normalize(saliency)?)?;
    for c in conspicuity {
        total += kl_divergence(&g, &normalize(c)?)?;
    }
    Ok(total)
}

/// `−d log p − (1−d) log(1−p)` with `p` clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]`.
pub fn domain_nll(d: f64, p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    -d * p.ln() - (1.0 - d) * (1.0 - p).ln()
}

/// `L = L_s + Σ L_d`; `L_s` is absent on unlabeled target batches.
pub fn total_loss(saliency: Option<f64>, domain: &[f64]) -> Result<f64> {
    if saliency.is_none() && domain.is_empty() {
        return Err(Error::Input("total loss needs at least one component".into()));
    }
    Ok(saliency.unwrap_or(0.0) + domain.iter().sum::<f64>())
}

/// Recorded multi-level loss: the batch mean of the per-sample sums.
#[derive(Debug, Clone)]
pub struct LevelTerms {
    /// `[1]` total.
    pub total: Var,
    /// `[1]` batch-mean KL of the fused map, then of each conspicuity map.
    pub terms: Vec<Var>,
}

/// Turns `[N, 1, H, W]` densities into per-sample distributions.
pub fn target_distribution<T: Scalar>(gt: &Tensor<T>) -> Result<Tensor<T>> {
    let n = gt.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(Error::Input("empty target batch".into()));
    }
    let w = gt.numel() / n;
    let mut data = Vec::with_capacity(gt.numel());
    for chunk in gt.data().chunks_exact(w) {
        let g = normalize_target(&chunk.iter().map(|&v| v.as_f64()).collect::<Vec<_>>())?;
        data.extend(g.into_iter().map(T::of));
    }
    Ok(Tensor::new(gt.shape().to_vec(), data)?)
}

/// Records the multi-level loss on `tape`. `gt` is `[N, 1, H, W]` and need not
/// be normalized.
pub fn record_multi_level<T: Scalar>(tape: &mut Tape<T>, saliency: Var, conspicuity: &[Var], gt: &Tensor<T>) -> Result<LevelTerms> {
    let g = target_distribution(gt)?;
    let mut terms = Vec::with_capacity(conspicuity.len() + 1);
    for &m in std::iter::once(&saliency).chain(conspicuity) {
        if tape.shape(m) != g.shape() {
            return Err(Error::Input(format!(
                "prediction shape {:?} differs from target {:?}",
                tape.shape(m),
                g.shape()
            )));
        }
        let p = tape.normalize_pixels(m, T::of(EPS_FLOOR))?;
        let kl = tape.kl_div(&g, p, T::of(EPS_FLOOR))?;
        terms.push(tape.mean(kl));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(LevelTerms { total, terms })
}

/// Batch-mean binary cross-entropy of `[N, 1]` domain logits against label `d`.
pub fn record_domain_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, d: T) -> Result<Var> {
    let n = tape.value(logits).numel();
    let l = tape.bce_with_logits(logits, &vec![d; n])?;
    Ok(tape.mean(l))
}

/// Records `L_s + Σ L_d`.
pub fn record_total<T: Scalar>(tape: &mut Tape<T>, saliency: Option<Var>, domain: &[Var]) -> Result<Var> {
    let mut parts = saliency.into_iter().chain(domain.iter().copied());
    let mut total = parts
        .next()
        .ok_or_else(|| Error::Input("total loss needs at least one component".into()))?;
    for p in parts {
        total = tape.add(total, p)?;
    }
    Ok(total)
}

//! Batch normalization with running statistics kept separately per domain.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Result, TensorError};
use crate::tape::{Backward, Grads, Values};
use crate::{Scalar, Tape, Tensor, Var};

/// Identity of a data domain (dataset). Selects domain-specific state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct DomainTag(pub u16);

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the stored running estimates.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<T: Scalar> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> BnStats<T> {
    fn fresh(channels: usize) -> Self {
        BnStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

/// Running statistics of one batch-norm layer, one entry per domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBnStats<T: Scalar> {
    channels: usize,
    pub eps: T,
    pub momentum: T,
    per_domain: BTreeMap<DomainTag, BnStats<T>>,
}

impl<T: Scalar> DomainBnStats<T> {
    pub fn new(channels: usize, eps: T, momentum: T) -> Self {
        DomainBnStats {
            channels,
            eps,
            momentum,
            per_domain: BTreeMap::new(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, domain: DomainTag) -> Option<&BnStats<T>> {
        self.per_domain.get(&domain)
    }

    pub fn domains(&self) -> impl Iterator<Item = (DomainTag, &BnStats<T>)> {
        self.per_domain.iter().map(|(&d, s)| (d, s))
    }

    pub fn insert(&mut self, domain: DomainTag, stats: BnStats<T>) -> Result<()> {
        if stats.mean.len() != self.channels || stats.var.len() != self.channels {
            return Err(TensorError::invalid(
                "batch_norm",
                format!("statistics must have {} channels", self.channels),
            ));
        }
        self.per_domain.insert(domain, stats);
        Ok(())
    }
}

struct BnBackward<T> {
    input: Var,
    scale: Var,
    shift: Var,
    /// Normalized input.
    xhat: Vec<T>,
    inv_std: Vec<T>,
    channels: usize,
    inner: usize,
    batch_stats: bool,
}

impl<T: Scalar> Backward<T> for BnBackward<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(&self, grad_out: &[T], values: &Values<'_, T>, grads: &mut Grads<'_, T>) {
        let (c_n, inner) = (self.channels, self.inner);
        let outer = grad_out.len() / (c_n * inner);
        let count = T::of((outer * inner) as f64);
        let mut sum_g = vec![T::zero(); c_n];
        let mut sum_gx = vec![T::zero(); c_n];
        for n in 0..outer {
            for c in 0..c_n {
                let off = (n * c_n + c) * inner;
                for i in off..off + inner {
                    sum_g[c] += grad_out[i];
                    sum_gx[c] += grad_out[i] * self.xhat[i];
                }
            }
        }
        if let Some(ds) = grads.slot(self.scale) {
            for c in 0..c_n {
                ds[c] += sum_gx[c];
            }
        }
        if let Some(db) = grads.slot(self.shift) {
            for c in 0..c_n {
                db[c] += sum_g[c];
            }
        }
        let gamma = values.get(self.scale).data().to_vec();
        if let Some(dx) = grads.slot(self.input) {
            for n in 0..outer {
                for c in 0..c_n {
                    let k = gamma[c] * self.inv_std[c];
                    let off = (n * c_n + c) * inner;
                    for i in off..off + inner {
                        dx[i] += if self.batch_stats {
                            k * (grad_out[i] - sum_g[c] / count - self.xhat[i] * sum_gx[c] / count)
                        } else {
                            k * grad_out[i]
                        };
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Batch normalization over `[N, C, ...]` with per-channel `scale` and
    /// `shift`. In [`BnMode::Train`] the running statistics of `domain` are
    /// created on first use and updated with `stats.momentum`; in
    /// [`BnMode::Eval`] an untrained domain is an error.
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        stats: &mut DomainBnStats<T>,
        domain: DomainTag,
        mode: BnMode,
    ) -> Result<Var> {
        const OP: &str = "batch_norm";
        let x = self.value(input);
        let s = x.shape();
        if s.len() < 2 {
            return Err(TensorError::Rank {
                op: OP,
                expected: 2,
                shape: s.to_vec(),
            });
        }
        let c_n = s[1];
        if c_n != stats.channels {
            return Err(TensorError::dim(OP, 1, stats.channels, c_n));
        }
        for p in [scale, shift] {
            if self.shape(p) != [c_n] {
                return Err(TensorError::invalid(
                    OP,
                    format!("affine parameter shape {:?}, expected [{c_n}]", self.shape(p)),
                ));
            }
        }
        let inner: usize = s[2..].iter().product();
        let outer = s[0];
        let count = outer * inner;
        let data = x.data();

        let (mean, var) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); c_n];
                let mut var = vec![T::zero(); c_n];
                for n in 0..outer {
                    for c in 0..c_n {
                        let off = (n * c_n + c) * inner;
                        mean[c] += data[off..off + inner].iter().copied().sum::<T>();
                    }
                }
                let denom = T::of(count as f64);
                mean.iter_mut().for_each(|m| *m /= denom);
                for n in 0..outer {
                    for c in 0..c_n {
                        let off = (n * c_n + c) * inner;
                        var[c] += data[off..off + inner]
                            .iter()
                            .map(|&v| (v - mean[c]) * (v - mean[c]))
                            .sum::<T>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= denom);
                let momentum = stats.momentum;
                let unbias = if count > 1 {
                    T::of(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                let running = stats
                    .per_domain
                    .entry(domain)
                    .or_insert_with(|| BnStats::fresh(c_n));
                for c in 0..c_n {
                    running.mean[c] = (T::one() - momentum) * running.mean[c] + momentum * mean[c];
                    running.var[c] =
                        (T::one() - momentum) * running.var[c] + momentum * var[c] * unbias;
                }
                (mean, var)
            }
            BnMode::Eval => {
                let running = stats
                    .per_domain
                    .get(&domain)
                    .ok_or(TensorError::UnknownDomain(domain))?;
                (running.mean.clone(), running.var.clone())
            }
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + stats.eps).sqrt()).collect();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for n in 0..outer {
            for c in 0..c_n {
                let off = (n * c_n + c) * inner;
                for i in off..off + inner {
                    xhat[i] = (data[i] - mean[c]) * inv_std[c];
                    out[i] = gamma[c] * xhat[i] + beta[c];
                }
            }
        }
        let value = Tensor::new(s.to_vec(), out)?;
        Ok(self.push(
            value,
            &[input, scale, shift],
            BnBackward {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                channels: c_n,
                inner,
                batch_stats: mode == BnMode::Train,
            },
        ))
    }
}

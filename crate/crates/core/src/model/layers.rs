use hd2s_tensor::{BnMode, Conv2dSpec, Conv3dSpec, DomainBnStats, DomainTag, Tensor, Var};

use crate::error::Result;
use crate::params::{Graph, ParamId, ParamStore};

/// He-uniform bound for a ReLU layer with `fan_in` inputs.
fn he_bound(fan_in: usize) -> f32 {
    (6.0 / fan_in as f32).sqrt()
}

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    /// Kernel of shape `[c_out, c_in, k...]`.
    pub fn new(store: &mut ParamStore, name: &str, c_out: usize, c_in: usize, k: &[usize], bias: bool, seed: u64) -> Self {
        let mut shape = vec![c_out, c_in];
        shape.extend_from_slice(k);
        let fan_in = c_in * k.iter().product::<usize>();
        let weight = store.insert_uniform(&format!("{name}.weight"), &shape, he_bound(fan_in), seed);
        let bias = bias.then(|| store.insert(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Conv { weight, bias }
    }

    pub fn conv3d(&self, g: &mut Graph, store: &ParamStore, x: Var, spec: Conv3dSpec) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        Ok(g.tape.conv3d(x, w, b, spec)?)
    }

    pub fn conv2d(&self, g: &mut Graph, store: &ParamStore, x: Var, spec: Conv2dSpec) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        Ok(g.tape.conv2d(x, w, b, spec)?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, out: usize, inp: usize, seed: u64) -> Self {
        Linear {
            weight: store.insert_uniform(&format!("{name}.weight"), &[out, inp], he_bound(inp), seed),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(&[out])),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        Ok(g.tape.fully_connected(x, w, Some(b))?)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub name: String,
    pub scale: ParamId,
    pub shift: ParamId,
    pub stats: DomainBnStats<f32>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, eps: f32, momentum: f32) -> Self {
        BatchNorm {
            name: name.to_string(),
            scale: store.insert(format!("{name}.scale"), Tensor::full(&[channels], 1.0)),
            shift: store.insert(format!("{name}.shift"), Tensor::zeros(&[channels])),
            stats: DomainBnStats::new(channels, eps, momentum),
        }
    }

    pub fn apply(&mut self, g: &mut Graph, store: &ParamStore, x: Var, domain: DomainTag, mode: BnMode) -> Result<Var> {
        let s = g.param(store, self.scale);
        let b = g.param(store, self.shift);
        Ok(g.tape.batch_norm(x, s, b, &mut self.stats, domain, mode)?)
    }
}

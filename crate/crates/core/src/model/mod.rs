//! The saliency network: a four-tap 3D encoder, one conspicuity decoder per
//! tap, a 1×1 fusion head, optional per-branch domain classifiers and optional
//! domain-specific priors, smoothing and normalization statistics.

mod inference;
mod layers;

use hd2s_tensor::{BnMode, Conv2dSpec, Conv3dSpec, DomainBnStats, DomainTag, Tensor, Var};

pub use inference::{clip_indices, FrameSource, InferenceOptions};
use layers::{BatchNorm, Conv, Linear};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Graph, ParamId, ParamStore};

#[derive(Debug, Clone)]
struct Stage {
    conv_a: Conv,
    bn_a: BatchNorm,
    conv_b: Conv,
    bn_b: BatchNorm,
    pool: [usize; 3],
}

#[derive(Debug, Clone)]
struct Classifier {
    reduce: Conv,
    hidden: Linear,
    out: Linear,
}

#[derive(Debug, Clone)]
struct Branch {
    /// 1-based tap index.
    tap: usize,
    temporal: Vec<Conv>,
    decoder: Vec<Conv>,
    head: Conv,
    classifier: Option<Classifier>,
    /// One prior map per domain, empty unless domain-specific learning is on.
    priors: Vec<ParamId>,
}

/// Per-pass switches.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub domain: DomainTag,
    pub mode: BnMode,
    /// Attach the domain classifiers behind a gradient reversal of this
    /// strength. Requires a domain-adaptation model.
    pub grl_lambda: Option<f32>,
}

impl ForwardOptions {
    pub fn train(domain: DomainTag) -> Self {
        ForwardOptions {
            domain,
            mode: BnMode::Train,
            grl_lambda: None,
        }
    }

    pub fn eval(domain: DomainTag) -> Self {
        ForwardOptions {
            domain,
            mode: BnMode::Eval,
            grl_lambda: None,
        }
    }

    pub fn with_grl(mut self, lambda: f32) -> Self {
        self.grl_lambda = Some(lambda);
        self
    }
}

/// Variables produced by one forward pass, batch-first.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `[N, 1, H, W]` final saliency map.
    pub saliency: Var,
    /// `[N, 1, H, W]` per enabled branch, in branch order.
    pub conspicuity: Vec<Var>,
    /// `[N, C_j, H_j, W_j]` branch features after temporal removal.
    pub features: Vec<Var>,
    /// `[N, 1]` domain logits per branch, present when a GRL strength was given.
    pub domain_logits: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Hd2s {
    config: ModelConfig,
    params: ParamStore,
    stem: Conv,
    stem_bn: BatchNorm,
    stages: Vec<Stage>,
    branches: Vec<Branch>,
    fusion_weight: ParamId,
    fusion_bias: ParamId,
    log_sigma: Vec<ParamId>,
}

fn sigma_prior(h: usize, w: usize) -> Tensor<f32> {
    let s = h as f64 / 4.0;
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = ((i / w) as f64, (i % w) as f64);
        (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp() as f32
    })
}

impl Hd2s {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let seed = c.init_seed;
        let mut params = ParamStore::new();
        let (eps, mom) = (c.bn_eps, c.bn_momentum);
        let depth = *c.branches.last().expect("validated");

        let stem = Conv::new(&mut params, "encoder.stem", c.stem_channels, c.input_channels, &[3, 3, 3], false, seed);
        let stem_bn = BatchNorm::new(&mut params, "encoder.stem.bn", c.stem_channels, eps, mom);
        let mut stages = Vec::new();
        let mut c_in = c.stem_channels;
        for i in 0..depth {
            let co = c.stage_channels[i];
            let p = format!("encoder.s{}", i + 1);
            stages.push(Stage {
                conv_a: Conv::new(&mut params, &format!("{p}.conv_a"), co, c_in, &[3, 3, 3], false, seed),
                bn_a: BatchNorm::new(&mut params, &format!("{p}.bn_a"), co, eps, mom),
                conv_b: Conv::new(&mut params, &format!("{p}.conv_b"), co, co, &[3, 3, 3], false, seed),
                bn_b: BatchNorm::new(&mut params, &format!("{p}.bn_b"), co, eps, mom),
                pool: [c.pool_temporal[i], 2, 2],
            });
            c_in = co;
        }

        let taps = c.tap_shapes();
        let mut branches = Vec::new();
        for &j in &c.branches {
            let tap = taps[j - 1];
            let p = format!("branch{j}");
            let ch = tap.channels;
            let temporal = (0..tap.frames.trailing_zeros())
                .map(|t| Conv::new(&mut params, &format!("{p}.temporal{}", t + 1), ch, ch, &[3, 1, 1], true, seed))
                .collect();
            let ups = (c.input_height / tap.height).trailing_zeros() as usize;
            let dw = c.decoder_channels[j - 1];
            let mut decoder = Vec::new();
            let mut din = ch;
            for u in 0..ups {
                decoder.push(Conv::new(&mut params, &format!("{p}.decoder{}", u + 1), dw, din, &[3, 3], true, seed));
                din = dw;
            }
            let head = Conv::new(&mut params, &format!("{p}.head"), 1, din, &[3, 3], true, seed);
            let classifier = c.enable_da.then(|| {
                let q = format!("{p}.classifier");
                let flat = c.classifier_channels * tap.height * tap.width;
                Classifier {
                    reduce: Conv::new(&mut params, &format!("{q}.reduce"), c.classifier_channels, ch, &[1, 1], true, seed),
                    hidden: Linear::new(&mut params, &format!("{q}.hidden"), c.classifier_hidden, flat, seed),
                    out: Linear::new(&mut params, &format!("{q}.out"), 1, c.classifier_hidden, seed),
                }
            });
            let priors = if c.enable_dsl {
                (0..c.domain_count)
                    .map(|d| params.insert(format!("dsl.prior.b{j}.d{d}"), sigma_prior(tap.height, tap.width)))
                    .collect()
            } else {
                Vec::new()
            };
            branches.push(Branch {
                tap: j,
                temporal,
                decoder,
                head,
                classifier,
                priors,
            });
        }

        let k = branches.len();
        let fusion_weight = params.insert("fusion.weight", Tensor::full(&[1, k, 1, 1], c.fusion_weight_init));
        let fusion_bias = params.insert("fusion.bias", Tensor::full(&[1], -c.fusion_weight_init * k as f32 / 2.0));
        let log_sigma = if c.enable_dsl {
            (0..c.domain_count)
                .map(|d| params.insert(format!("dsl.log_sigma.d{d}"), Tensor::full(&[1], c.smoothing_sigma_init.ln())))
                .collect()
        } else {
            Vec::new()
        };

        let mut model = Hd2s {
            config,
            params,
            stem,
            stem_bn,
            stages,
            branches,
            fusion_weight,
            fusion_bias,
            log_sigma,
        };
        // Identity running statistics, so an untrained model can be evaluated.
        for d in model.bn_domains() {
            for (_, stats) in model.batch_norms_mut() {
                let ch = stats.channels();
                stats.insert(
                    d,
                    hd2s_tensor::BnStats {
                        mean: vec![0.0; ch],
                        var: vec![1.0; ch],
                    },
                )?;
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn bn_domains(&self) -> Vec<DomainTag> {
        if self.config.enable_dsl {
            (0..self.config.domain_count as u16).map(DomainTag).collect()
        } else {
            vec![DomainTag(0)]
        }
    }

    /// Domain whose normalization statistics a pass uses. Without
    /// domain-specific learning every tag maps to the shared statistics.
    fn bn_domain(&self, domain: DomainTag) -> Result<DomainTag> {
        if !self.config.enable_dsl {
            return Ok(DomainTag(0));
        }
        if (domain.0 as usize) < self.config.domain_count {
            Ok(domain)
        } else {
            Err(Error::UnknownDomain(domain))
        }
    }

    /// Every batch-norm layer with its name, in a fixed order.
    pub fn batch_norms(&self) -> Vec<(&str, &DomainBnStats<f32>)> {
        let mut out = vec![(self.stem_bn.name.as_str(), &self.stem_bn.stats)];
        for s in &self.stages {
            out.push((s.bn_a.name.as_str(), &s.bn_a.stats));
            out.push((s.bn_b.name.as_str(), &s.bn_b.stats));
        }
        out
    }

    pub fn batch_norms_mut(&mut self) -> Vec<(&str, &mut DomainBnStats<f32>)> {
        let mut out = vec![(self.stem_bn.name.as_str(), &mut self.stem_bn.stats)];
        for s in &mut self.stages {
            out.push((s.bn_a.name.as_str(), &mut s.bn_a.stats));
            out.push((s.bn_b.name.as_str(), &mut s.bn_b.stats));
        }
        out
    }

    /// Runs the encoder on `[N, C, T, H, W]` clips. Returns one tap per stage
    /// built (as many as the deepest enabled branch needs).
    pub fn encode(&mut self, g: &mut Graph, clip: Var, domain: DomainTag, mode: BnMode) -> Result<Vec<Var>> {
        let c = &self.config;
        let want = [c.input_channels, c.clip_len, c.input_height, c.input_width];
        let shape = g.tape.shape(clip);
        if shape.len() != 5 || shape[1..] != want {
            return Err(Error::config(format!(
                "clip shape {shape:?} does not match [N, {}, {}, {}, {}]",
                want[0], want[1], want[2], want[3]
            )));
        }
        let bn_domain = self.bn_domain(domain)?;
        let stem_spec = Conv3dSpec::new([c.stem_stride[0], c.stem_stride[1], c.stem_stride[1]], [1, 1, 1]);
        let params = &self.params;
        let mut x = self.stem.conv3d(g, params, clip, stem_spec)?;
        x = self.stem_bn.apply(g, params, x, bn_domain, mode)?;
        x = g.tape.relu(x);
        let mut taps = Vec::with_capacity(self.stages.len());
        for s in &mut self.stages {
            x = s.conv_a.conv3d(g, params, x, Conv3dSpec::same(3))?;
            x = s.bn_a.apply(g, params, x, bn_domain, mode)?;
            x = g.tape.relu(x);
            x = s.conv_b.conv3d(g, params, x, Conv3dSpec::same(3))?;
            x = s.bn_b.apply(g, params, x, bn_domain, mode)?;
            x = g.tape.relu(x);
            x = g.tape.maxpool3d(x, s.pool, s.pool)?;
            taps.push(x);
        }
        Ok(taps)
    }

    fn branch_position(&self, tap: usize) -> Result<usize> {
        self.branches
            .iter()
            .position(|b| b.tap == tap)
            .ok_or_else(|| Error::config(format!("branch {tap} is not enabled")))
    }

    /// Removes the temporal axis of tap `tap` (1-based) and, with
    /// domain-specific learning, applies the domain's prior map.
    /// Returns `[N, C, H_j, W_j]`.
    pub fn branch_features(&self, g: &mut Graph, tap: usize, x: Var, domain: DomainTag) -> Result<Var> {
        let b = &self.branches[self.branch_position(tap)?];
        let frames = g.tape.shape(x)[2];
        if !frames.is_power_of_two() || frames.trailing_zeros() as usize != b.temporal.len() {
            return Err(Error::config(format!(
                "branch {tap} expects {} frames, got {frames}",
                1usize << b.temporal.len()
            )));
        }
        let spec = Conv3dSpec::new([2, 1, 1], [1, 0, 0]);
        let mut x = x;
        for conv in &b.temporal {
            x = conv.conv3d(g, &self.params, x, spec)?;
            x = g.tape.relu(x);
        }
        let s = g.tape.shape(x).to_vec();
        x = g.tape.reshape(x, &[s[0], s[1], s[3], s[4]])?;
        if self.config.enable_dsl {
            let d = self.bn_domain(domain)?;
            let prior = g.param(&self.params, b.priors[d.0 as usize]);
            x = g.tape.mul_map(x, prior)?;
        }
        Ok(x)
    }

    /// Decodes branch features into a full-resolution `[N, 1, H, W]` map in (0, 1).
    pub fn decode_branch(&self, g: &mut Graph, tap: usize, features: Var) -> Result<Var> {
        let b = &self.branches[self.branch_position(tap)?];
        let mut x = features;
        for conv in &b.decoder {
            x = conv.conv2d(g, &self.params, x, Conv2dSpec::same(3))?;
            x = g.tape.relu(x);
            x = g.tape.upsample2x(x)?;
        }
        x = b.head.conv2d(g, &self.params, x, Conv2dSpec::same(3))?;
        Ok(g.tape.sigmoid(x))
    }

    /// Full conspicuity branch: temporal removal, prior, decoder.
    pub fn conspicuity_branch(&self, g: &mut Graph, tap: usize, x: Var, domain: DomainTag) -> Result<Var> {
        let f = self.branch_features(g, tap, x, domain)?;
        self.decode_branch(g, tap, f)
    }

    /// Pixel-wise 1×1 convolution over the conspicuity maps, then logistic.
    pub fn fuse(&self, g: &mut Graph, maps: &[Var]) -> Result<Var> {
        let x = g.tape.concat_channels(maps)?;
        let w = g.param(&self.params, self.fusion_weight);
        let b = g.param(&self.params, self.fusion_bias);
        let z = g.tape.conv2d(x, w, Some(b), Conv2dSpec::new([1, 1], [0, 0]))?;
        Ok(g.tape.sigmoid(z))
    }

    /// Domain logit `[N, 1]` of branch `tap` behind a gradient reversal of
    /// strength `lambda`. The target-domain probability is `sigmoid(logit)`.
    pub fn domain_classify(&self, g: &mut Graph, tap: usize, features: Var, lambda: f32) -> Result<Var> {
        if !self.config.enable_da {
            return Err(Error::Mode("domain classifiers exist only in domain-adaptation models".into()));
        }
        let b = &self.branches[self.branch_position(tap)?];
        let cls = b.classifier.as_ref().expect("built with domain adaptation");
        let x = g.tape.grl(features, lambda)?;
        let x = cls.reduce.conv2d(g, &self.params, x, Conv2dSpec::new([1, 1], [0, 0]))?;
        let x = g.tape.relu(x);
        let s = g.tape.shape(x).to_vec();
        let x = g.tape.reshape(x, &[s[0], s[1] * s[2] * s[3]])?;
        let x = cls.hidden.apply(g, &self.params, x)?;
        let x = g.tape.relu(x);
        cls.out.apply(g, &self.params, x)
    }

    /// Gaussian smoothing with the domain's learnable σ.
    pub fn smooth_output(&self, g: &mut Graph, map: Var, domain: DomainTag) -> Result<Var> {
        if !self.config.enable_dsl {
            return Err(Error::Mode("output smoothing exists only in domain-specific models".into()));
        }
        let d = self.bn_domain(domain)?;
        let ls = g.param(&self.params, self.log_sigma[d.0 as usize]);
        Ok(g.tape.gaussian_smooth(map, ls, self.config.smoothing_sigma_min as f64)?)
    }

    pub fn forward(&mut self, g: &mut Graph, clip: Var, opts: ForwardOptions) -> Result<Forward> {
        if opts.grl_lambda.is_some() && !self.config.enable_da {
            return Err(Error::Mode("domain classifiers exist only in domain-adaptation models".into()));
        }
        let taps = self.encode(g, clip, opts.domain, opts.mode)?;
        let enabled: Vec<usize> = self.branches.iter().map(|b| b.tap).collect();
        let mut conspicuity = Vec::with_capacity(enabled.len());
        let mut features = Vec::with_capacity(enabled.len());
        let mut domain_logits = Vec::new();
        for &j in &enabled {
            let f = self.branch_features(g, j, taps[j - 1], opts.domain)?;
            if let Some(lambda) = opts.grl_lambda {
                domain_logits.push(self.domain_classify(g, j, f, lambda)?);
            }
            conspicuity.push(self.decode_branch(g, j, f)?);
            features.push(f);
        }
        let mut saliency = self.fuse(g, &conspicuity)?;
        if self.config.enable_dsl {
            saliency = self.smooth_output(g, saliency, opts.domain)?;
        }
        Ok(Forward {
            saliency,
            conspicuity,
            features,
            domain_logits,
        })
    }

    /// Fusion weight per enabled branch (1-based index) and the fusion bias.
    pub fn fusion_weights(&self) -> (Vec<(usize, f32)>, f32) {
        let w = self.params.get(self.fusion_weight).value.data();
        let pairs = self.branches.iter().zip(w).map(|(b, &v)| (b.tap, v)).collect();
        (pairs, self.params.get(self.fusion_bias).value.data()[0])
    }

    /// Current smoothing σ of each domain (empty without domain-specific learning).
    pub fn smoothing_sigmas(&self) -> Vec<f64> {
        let min = self.config.smoothing_sigma_min as f64;
        self.log_sigma
            .iter()
            .map(|&id| (self.params.get(id).value.data()[0] as f64).exp().max(min))
            .collect()
    }

    /// Enabled branch indices (1-based).
    pub fn branch_indices(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.tap).collect()
    }
}

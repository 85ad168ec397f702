//! Optimization for the supervised, domain-adaptation and domain-specific
//! regimes.

mod adam;
mod eval;
mod schedule;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use hd2s_tensor::{BnMode, DomainTag};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use adam::Adam;
pub use eval::{evaluate, probe_domain_accuracy, EvalOptions, ProbeOptions};
pub use schedule::lambda_schedule;

use crate::config::{parse_bool, parse_value, Variant};
use crate::data::{collate, save_checkpoint, Dataset, Sample};
use crate::error::{Error, Result};
use crate::losses::{record_domain_loss, record_multi_level, record_total};
use crate::model::{ForwardOptions, Hd2s};
use crate::params::Graph;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Supervised,
    Da,
    Dsl,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Regime::Supervised),
            "da" => Ok(Regime::Da),
            "dsl" => Ok(Regime::Dsl),
            _ => Err(Error::config(format!("unknown regime `{s}` (supervised, da, dsl)"))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Supervised => "supervised",
            Regime::Da => "da",
            Regime::Dsl => "dsl",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainPlan {
    pub total_iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub logical_batch: usize,
    pub micro_batch: usize,
    pub accumulation_steps: usize,
    pub regime: Regime,
    pub seed: u64,
    /// Fixed reversal strength instead of the schedule.
    pub grl_lambda: Option<f64>,
    /// Target-domain batches train the domain classifiers only (their
    /// reversed gradient does not reach the shared layers).
    pub target_classifier_only: bool,
    /// Normalize with running statistics instead of batch statistics.
    pub freeze_bn: bool,
    /// Forward each source micro-batch and its target micro-batch as one
    /// batch, so batch normalization sees both domains together.
    pub da_joint_batch: bool,
    /// Validate (and keep the best checkpoint) every this many iterations;
    /// 0 validates only at the end.
    pub validate_every: usize,
    /// Frames sampled per validation video (evenly spaced); 0 means all.
    pub validation_frames: usize,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
}

impl TrainPlan {
    /// Schedule of the full-size setup: 2500 updates of 200 clips, built
    /// from 25 micro-batches of 8.
    pub fn paper() -> Self {
        TrainPlan {
            total_iterations: 2500,
            lr: 1e-3,
            weight_decay: 2e-7,
            logical_batch: 200,
            micro_batch: 8,
            accumulation_steps: 25,
            regime: Regime::Supervised,
            seed: 0,
            grl_lambda: None,
            target_classifier_only: false,
            freeze_bn: false,
            da_joint_batch: false,
            validate_every: 0,
            validation_frames: 0,
            checkpoint_every: 0,
        }
    }

    /// Small batches for laptop-scale experiments.
    pub fn desk() -> Self {
        TrainPlan {
            total_iterations: 300,
            logical_batch: 4,
            micro_batch: 4,
            accumulation_steps: 1,
            validation_frames: 8,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iterations == 0 {
            return Err(Error::config("total_iterations must be positive"));
        }
        if self.micro_batch == 0 || self.accumulation_steps == 0 {
            return Err(Error::config("micro_batch and accumulation_steps must be positive"));
        }
        if self.micro_batch * self.accumulation_steps != self.logical_batch {
            return Err(Error::config(format!(
                "micro_batch × accumulation_steps = {} but logical_batch = {}",
                self.micro_batch * self.accumulation_steps,
                self.logical_batch
            )));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::config("lr must be positive and weight_decay non-negative"));
        }
        if let Some(l) = self.grl_lambda {
            if !(l >= 0.0) {
                return Err(Error::config("grl_lambda must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "total_iterations" => self.total_iterations = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "logical_batch" => self.logical_batch = parse_value(key, value)?,
            "micro_batch" => self.micro_batch = parse_value(key, value)?,
            "accumulation_steps" => self.accumulation_steps = parse_value(key, value)?,
            "regime" => self.regime = value.parse()?,
            "seed" => self.seed = parse_value(key, value)?,
            "grl_lambda" => {
                self.grl_lambda = match value {
                    "schedule" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "target_classifier_only" => self.target_classifier_only = parse_bool(key, value)?,
            "freeze_bn" => self.freeze_bn = parse_bool(key, value)?,
            "da_joint_batch" => self.da_joint_batch = parse_bool(key, value)?,
            "validate_every" => self.validate_every = parse_value(key, value)?,
            "validation_frames" => self.validation_frames = parse_value(key, value)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("total_iterations", self.total_iterations.to_string()),
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("logical_batch", self.logical_batch.to_string()),
            ("micro_batch", self.micro_batch.to_string()),
            ("accumulation_steps", self.accumulation_steps.to_string()),
            ("regime", self.regime.to_string()),
            ("seed", self.seed.to_string()),
            (
                "grl_lambda",
                self.grl_lambda.map_or_else(|| "schedule".to_string(), |l| l.to_string()),
            ),
            ("target_classifier_only", self.target_classifier_only.to_string()),
            ("freeze_bn", self.freeze_bn.to_string()),
            ("da_joint_batch", self.da_joint_batch.to_string()),
            ("validate_every", self.validate_every.to_string()),
            ("validation_frames", self.validation_frames.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ]
    }
}

/// Training data for one regime.
#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Supervised(&'a Dataset),
    Da { source: &'a Dataset, target: &'a Dataset },
    Dsl(&'a [Dataset]),
}

/// Losses of one parameter update, averaged over its micro-batches.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    /// 1-based index of the update.
    pub iteration: usize,
    pub lambda: f64,
    pub saliency_loss: Option<f64>,
    /// Summed domain losses of source and target batches.
    pub domain_loss: Option<f64>,
    /// Domain of each micro-batch, in processing order.
    pub domains: Vec<DomainTag>,
}

impl fmt::Display for StepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter {}", self.iteration)?;
        if let Some(l) = self.saliency_loss {
            write!(f, " saliency {l:.6}")?;
        }
        if let Some(l) = self.domain_loss {
            write!(f, " lambda {:.6} domain {l:.6}", self.lambda)?;
        }
        Ok(())
    }
}

/// What one micro-batch contributes to the loss.
#[derive(Debug, Clone, Copy)]
struct MicroTask {
    domain: DomainTag,
    saliency: bool,
    /// Domain label and reversal strength, when the classifiers take part.
    adversarial: Option<(f32, f32)>,
}

#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Hd2s,
    pub plan: TrainPlan,
    adam: Adam,
    iteration: usize,
    micro_cursor: usize,
    streams: Vec<ChaCha8Rng>,
}

/// Outcome of [`Trainer::run`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub history: Vec<StepReport>,
    /// `(iteration, validation NSS)` at each validation.
    pub validations: Vec<(usize, f64)>,
    /// Best validation checkpoint, if any validation produced a score.
    pub best: Option<(usize, f64, Vec<u8>)>,
}

impl Trainer {
    pub fn new(model: Hd2s, plan: TrainPlan) -> Result<Self> {
        plan.validate()?;
        let variant = model.config().variant();
        match (plan.regime, variant) {
            (Regime::Da, v) if v != Variant::DomainAdaptation => {
                return Err(Error::Mode("the da regime needs a model with enable_da".into()))
            }
            (Regime::Dsl, v) if v != Variant::DomainSpecific => {
                return Err(Error::Mode("the dsl regime needs a model with enable_dsl".into()))
            }
            _ => {}
        }
        let adam = Adam::new(plan.lr, plan.weight_decay);
        Ok(Trainer {
            model,
            plan,
            adam,
            iteration: 0,
            micro_cursor: 0,
            streams: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Independent sampling stream `k`: 0 for source data, 1 for target
    /// data, `2 + i` for the `i`-th domain-specific dataset.
    fn stream(&mut self, k: usize) -> &mut ChaCha8Rng {
        while self.streams.len() <= k {
            let mut rng = ChaCha8Rng::seed_from_u64(self.plan.seed);
            rng.set_stream(self.streams.len() as u64);
            self.streams.push(rng);
        }
        &mut self.streams[k]
    }

    fn draw(&mut self, data: &Dataset, stream: usize) -> Result<Vec<Sample>> {
        let (n, t) = (self.plan.micro_batch, self.model.config().clip_len);
        let rng = self.stream(stream);
        (0..n).map(|_| data.sample(rng, t)).collect()
    }

    /// Current reversal strength.
    pub fn lambda(&self) -> Result<f64> {
        match self.plan.grl_lambda {
            Some(l) => Ok(l),
            None => lambda_schedule(self.iteration, self.plan.total_iterations),
        }
    }

    /// Forward and backward over one micro-batch, adding its gradient
    /// (scaled by `1 / accumulation_steps`) to the parameters.
    fn micro_step(&mut self, samples: &[Sample], task: MicroTask) -> Result<(Option<f64>, Option<f64>)> {
        let (clips, density) = collate(samples)?;
        let mut g = Graph::new();
        let x = g.tape.constant(clips);
        let opts = ForwardOptions {
            domain: task.domain,
            mode: if self.plan.freeze_bn { BnMode::Eval } else { BnMode::Train },
            grl_lambda: task.adversarial.map(|(_, l)| l),
        };
        let out = self.model.forward(&mut g, x, opts)?;
        let ls = if task.saliency {
            Some(record_multi_level(&mut g.tape, out.saliency, &out.conspicuity, &density)?.total)
        } else {
            None
        };
        let lds = match task.adversarial {
            Some((d, _)) => out
                .domain_logits
                .iter()
                .map(|&z| record_domain_loss(&mut g.tape, z, d))
                .collect::<Result<Vec<_>>>()?,
            None => Vec::new(),
        };
        let total = record_total(&mut g.tape, ls, &lds)?;
        let value = |v: hd2s_tensor::Var| g.tape.value(v).data()[0] as f64;
        let ls_v = ls.map(value);
        let ld_v = (!lds.is_empty()).then(|| lds.iter().map(|&v| value(v)).sum::<f64>());
        if !value(total).is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {}", self.iteration + 1)));
        }
        let scaled = g.tape.scale(total, 1.0 / self.plan.accumulation_steps as f32);
        let grads = g.tape.backward(scaled)?;
        self.model.params_mut().accumulate(&g.binder, &grads);
        Ok((ls_v, ld_v))
    }

    /// Source and target samples in one forward pass; the saliency loss uses
    /// the source part, each part feeds the classifiers with its own label.
    fn micro_step_joint(&mut self, source: &[Sample], target: &[Sample], lambda: (f32, f32)) -> Result<(f64, f64)> {
        let n = source.len();
        let all: Vec<Sample> = source.iter().chain(target).cloned().collect();
        let (clips, _) = collate(&all)?;
        let (_, density) = collate(source)?;
        let mut g = Graph::new();
        let x = g.tape.constant(clips);
        let opts = ForwardOptions {
            domain: DomainTag(0),
            mode: if self.plan.freeze_bn { BnMode::Eval } else { BnMode::Train },
            grl_lambda: None,
        };
        let out = self.model.forward(&mut g, x, opts)?;
        let sal = g.tape.narrow_batch(out.saliency, 0, n)?;
        let consp = out
            .conspicuity
            .iter()
            .map(|&c| g.tape.narrow_batch(c, 0, n))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let ls = record_multi_level(&mut g.tape, sal, &consp, &density)?.total;
        let taps = self.model.branch_indices();
        let mut lds = Vec::new();
        for (&j, &f) in taps.iter().zip(&out.features) {
            for (start, len, label, l) in [(0, n, 0.0, lambda.0), (n, all.len() - n, 1.0, lambda.1)] {
                let part = g.tape.narrow_batch(f, start, len)?;
                let z = self.model.domain_classify(&mut g, j, part, l)?;
                lds.push(record_domain_loss(&mut g.tape, z, label)?);
            }
        }
        let total = record_total(&mut g.tape, Some(ls), &lds)?;
        let value = |v: hd2s_tensor::Var| g.tape.value(v).data()[0] as f64;
        if !value(total).is_finite() {
            return Err(Error::NonFinite(format!("loss at iteration {}", self.iteration + 1)));
        }
        let (ls_v, ld_v) = (value(ls), lds.iter().map(|&v| value(v)).sum::<f64>());
        let scaled = g.tape.scale(total, 1.0 / self.plan.accumulation_steps as f32);
        let grads = g.tape.backward(scaled)?;
        self.model.params_mut().accumulate(&g.binder, &grads);
        Ok((ls_v, ld_v))
    }

    /// Accumulates the gradient of one full update without applying it.
    /// Returns the per-micro-batch losses and domains.
    pub fn accumulate_gradients(&mut self, data: TrainData<'_>) -> Result<StepReport> {
        let lambda = self.lambda()?;
        let mut sal = Vec::new();
        let mut dom = Vec::new();
        let mut domains = Vec::new();
        for _ in 0..self.plan.accumulation_steps {
            match data {
                TrainData::Supervised(d) => {
                    let s = self.draw(d, 0)?;
                    let task = MicroTask {
                        domain: d.manifest.domain,
                        saliency: true,
                        adversarial: None,
                    };
                    sal.extend(self.micro_step(&s, task)?.0);
                    domains.push(task.domain);
                }
                TrainData::Da { source, target } if self.plan.da_joint_batch => {
                    let s = self.draw(source, 0)?;
                    let t = self.draw(target, 1)?;
                    let target_lambda = if self.plan.target_classifier_only { 0.0 } else { lambda as f32 };
                    let (a, b) = self.micro_step_joint(&s, &t, (lambda as f32, target_lambda))?;
                    sal.push(a);
                    dom.push(b);
                    domains.push(source.manifest.domain);
                    domains.push(target.manifest.domain);
                }
                TrainData::Da { source, target } => {
                    let s = self.draw(source, 0)?;
                    let (a, b) = self.micro_step(
                        &s,
                        MicroTask {
                            domain: source.manifest.domain,
                            saliency: true,
                            adversarial: Some((0.0, lambda as f32)),
                        },
                    )?;
                    sal.extend(a);
                    let t = self.draw(target, 1)?;
                    let target_lambda = if self.plan.target_classifier_only { 0.0 } else { lambda as f32 };
                    let (_, c) = self.micro_step(
                        &t,
                        MicroTask {
                            domain: target.manifest.domain,
                            saliency: false,
                            adversarial: Some((1.0, target_lambda)),
                        },
                    )?;
                    dom.push(b.unwrap_or(0.0) + c.unwrap_or(0.0));
                    domains.push(source.manifest.domain);
                    domains.push(target.manifest.domain);
                }
                TrainData::Dsl(sets) => {
                    if sets.is_empty() {
                        return Err(Error::config("domain-specific training needs at least one dataset"));
                    }
                    let k = self.micro_cursor % sets.len();
                    self.micro_cursor += 1;
                    let s = self.draw(&sets[k], 2 + k)?;
                    let task = MicroTask {
                        domain: sets[k].manifest.domain,
                        saliency: true,
                        adversarial: None,
                    };
                    sal.extend(self.micro_step(&s, task)?.0);
                    domains.push(task.domain);
                }
            }
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Ok(StepReport {
            iteration: self.iteration + 1,
            lambda,
            saliency_loss: mean(&sal),
            domain_loss: mean(&dom),
            domains,
        })
    }

    /// One parameter update.
    pub fn step(&mut self, data: TrainData<'_>) -> Result<StepReport> {
        if let (TrainData::Da { .. }, false) = (data, self.model.config().enable_da) {
            return Err(Error::Mode("domain adaptation needs a model with enable_da".into()));
        }
        self.model.params_mut().zero_grad();
        let report = self.accumulate_gradients(data)?;
        self.adam.update(self.model.params_mut());
        self.iteration += 1;
        Ok(report)
    }

    pub fn step_supervised(&mut self, source: &Dataset) -> Result<StepReport> {
        self.step(TrainData::Supervised(source))
    }

    pub fn step_da(&mut self, source: &Dataset, target: &Dataset) -> Result<StepReport> {
        self.step(TrainData::Da { source, target })
    }

    pub fn step_dsl(&mut self, datasets: &[Dataset]) -> Result<StepReport> {
        self.step(TrainData::Dsl(datasets))
    }

    pub fn checkpoint(&self) -> Vec<u8> {
        save_checkpoint(&self.model, self.iteration as u64)
    }

    /// Mean validation NSS over `validation`, each set evaluated under its own
    /// domain tag.
    pub fn validation_nss(&mut self, validation: &[&Dataset]) -> Result<Option<f64>> {
        let opts = EvalOptions {
            shuffles: 0,
            frames_per_video: self.plan.validation_frames,
            ..EvalOptions::default()
        };
        let mut scores = Vec::new();
        for v in validation {
            if let Some(s) = evaluate(&mut self.model, v, v.manifest.domain, &opts)?.mean_nss() {
                scores.push(s);
            }
        }
        Ok((!scores.is_empty()).then(|| scores.iter().sum::<f64>() / scores.len() as f64))
    }

    /// Trains until `total_iterations`, logging one line per update to `log`,
    /// validating on `validation` and keeping the best checkpoint by NSS.
    /// `on_checkpoint` receives periodic checkpoints.
    pub fn run(
        &mut self,
        data: TrainData<'_>,
        validation: &[&Dataset],
        log: &mut dyn Write,
        on_checkpoint: &mut dyn FnMut(usize, &[u8]) -> Result<()>,
    ) -> Result<RunSummary> {
        let mut summary = RunSummary {
            history: Vec::new(),
            validations: Vec::new(),
            best: None,
        };
        while self.iteration < self.plan.total_iterations {
            let report = self.step(data)?;
            let _ = writeln!(log, "{report}");
            summary.history.push(report);
            let it = self.iteration;
            if self.plan.checkpoint_every > 0 && it % self.plan.checkpoint_every == 0 {
                on_checkpoint(it, &self.checkpoint())?;
            }
            let due = (self.plan.validate_every > 0 && it % self.plan.validate_every == 0)
                || it == self.plan.total_iterations;
            if due && !validation.is_empty() {
                if let Some(nss) = self.validation_nss(validation)? {
                    let _ = writeln!(log, "validate iter {it} nss {nss:.6}");
                    summary.validations.push((it, nss));
                    if summary.best.as_ref().is_none_or(|b| nss > b.1) {
                        summary.best = Some((it, nss, self.checkpoint()));
                    }
                }
            }
        }
        Ok(summary)
    }
}

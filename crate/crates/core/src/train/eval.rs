//! Model evaluation and the frozen-feature domain probe.

use hd2s_tensor::{BnMode, DomainTag, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{collate, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{fixation_mask, EvalRecord, FrameMetrics};
use crate::config::ModelConfig;
use crate::losses::{record_domain_loss, record_total};
use crate::model::{Hd2s, InferenceOptions};
use crate::train::Adam;
use crate::params::Graph;

#[derive(Debug, Clone)]
pub struct EvalOptions {
    /// Shuffled-AUC repetitions per frame, each drawing negatives from the
    /// pooled fixations of another video.
    pub shuffles: usize,
    pub seed: u64,
    /// Evenly spaced frames per video; 0 evaluates every frame.
    pub frames_per_video: usize,
    pub inference: InferenceOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            shuffles: 10,
            seed: 0,
            frames_per_video: 0,
            inference: InferenceOptions::default(),
        }
    }
}

fn frame_selection(len: usize, count: usize) -> Vec<usize> {
    if count == 0 || count >= len {
        return (0..len).collect();
    }
    let mut v: Vec<usize> = (0..count).map(|i| (i * len + len / 2) / count).collect();
    v.dedup();
    v
}

/// Predicts every selected frame of every video and scores it.
pub fn evaluate(model: &mut Hd2s, data: &Dataset, domain: DomainTag, opts: &EvalOptions) -> Result<EvalRecord> {
    let (h, w) = (data.height, data.width);
    let cfg = model.config();
    if (cfg.input_height, cfg.input_width, cfg.input_channels) != (h, w, data.channels) {
        return Err(Error::config(format!(
            "dataset loaded at {}x{}x{}, model expects {}x{}x{}",
            data.channels, h, w, cfg.input_channels, cfg.input_height, cfg.input_width
        )));
    }
    let pooled: Vec<Vec<bool>> = data
        .videos
        .iter()
        .map(|v| {
            let all: Vec<(usize, usize)> = v.fixations.iter().flatten().copied().collect();
            fixation_mask(&all, h, w)
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut record = EvalRecord::default();
    for (vi, video) in data.videos.iter().enumerate() {
        let frames = frame_selection(video.frames.len(), opts.frames_per_video);
        let maps = model.predict_frames(video, &frames, domain, opts.inference)?;
        for (&t, map) in frames.iter().zip(&maps) {
            let pred: Vec<f64> = map.data().iter().map(|&v| v as f64).collect();
            let gt: Vec<f64> = video.density[t].data().iter().map(|&v| v as f64).collect();
            let fix = fixation_mask(&video.fixations[t], h, w);
            let others = data.videos.len() - 1;
            let shuffled: Vec<Vec<bool>> = if others == 0 {
                Vec::new()
            } else {
                (0..opts.shuffles)
                    .map(|_| {
                        let k = rng.random_range(0..others);
                        pooled[if k >= vi { k + 1 } else { k }].clone()
                    })
                    .collect()
            };
            record
                .frames
                .push(FrameMetrics::compute(&video.id, t, &pred, &gt, &fix, &shuffled));
        }
    }
    Ok(record)
}

#[derive(Debug, Clone)]
pub struct ProbeOptions {
    /// Classifier updates; each sees one batch per domain.
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Held-out clips scored per test video.
    pub test_clips_per_video: usize,
    /// `Eval` reads features as inference does, through the running
    /// statistics. `Train` normalizes each single-domain batch with its own
    /// statistics, which hides any per-domain offset.
    pub bn_mode: BnMode,
    pub seed: u64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            steps: 150,
            batch: 4,
            learning_rate: 1e-3,
            test_clips_per_video: 8,
            bn_mode: BnMode::Eval,
            seed: 0,
        }
    }
}

/// Copy of `model` with freshly initialized domain classifiers and every
/// other parameter frozen.
fn with_fresh_classifiers(model: &Hd2s) -> Result<Hd2s> {
    let cfg = ModelConfig {
        enable_da: true,
        ..model.config().clone()
    };
    let mut probe = Hd2s::new(cfg)?;
    for p in model.params().iter().filter(|p| !p.name.contains(".classifier.")) {
        probe.params_mut().assign(&p.name, p.value.clone())?;
    }
    for ((_, dst), (_, src)) in probe.batch_norms_mut().into_iter().zip(model.batch_norms()) {
        *dst = src.clone();
    }
    for p in probe.params_mut().iter_mut() {
        p.frozen = !p.name.contains(".classifier.");
    }
    Ok(probe)
}

/// Domain logits `[N, 1]` of every classifier head for a batch of clips.
fn head_logits(probe: &mut Hd2s, g: &mut Graph, data: &Dataset, picks: &[(usize, usize)], mode: BnMode) -> Result<Vec<Var>> {
    let t_len = probe.config().clip_len;
    let samples = picks
        .iter()
        .map(|&(v, t)| data.clip(v, t, t_len, false))
        .collect::<Result<Vec<_>>>()?;
    let (clip, _) = collate(&samples)?;
    let x = g.tape.constant(clip);
    let domain = data.manifest.domain;
    let taps = probe.encode(g, x, domain, mode)?;
    probe
        .branch_indices()
        .into_iter()
        .map(|j| {
            let f = probe.branch_features(g, j, taps[j - 1], domain)?;
            probe.domain_classify(g, j, f, 0.0)
        })
        .collect()
}

/// Trains fresh domain classifiers on the frozen trunk of `model` to tell
/// `a` (label 0) from `b` (label 1) and returns each head's accuracy on
/// held-out videos, in branch order. Even-indexed videos of each set train
/// the classifiers, odd-indexed ones test them; every batch holds a single
/// domain. `model` itself is left untouched.
pub fn probe_domain_accuracy(model: &Hd2s, a: &Dataset, b: &Dataset, opts: &ProbeOptions) -> Result<Vec<f64>> {
    let t_len = model.config().clip_len;
    let mut probe = with_fresh_classifiers(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let halves = |data: &Dataset, half: usize| -> Vec<usize> {
        (0..data.videos.len())
            .filter(|&v| v % 2 == half && data.videos[v].frames.len() >= t_len)
            .collect()
    };
    let sets = [(0.0f32, a), (1.0, b)];
    for (_, data) in sets {
        if halves(data, 0).is_empty() || halves(data, 1).is_empty() {
            return Err(Error::Input("the probe needs two videos of at least one clip per domain".into()));
        }
    }
    let mut adam = Adam::new(opts.learning_rate, 0.0);
    for _ in 0..opts.steps {
        probe.params_mut().zero_grad();
        for (label, data) in sets {
            let vids = halves(data, 0);
            let picks: Vec<(usize, usize)> = (0..opts.batch.max(1))
                .map(|_| {
                    let v = vids[rng.random_range(0..vids.len())];
                    (v, rng.random_range(t_len - 1..data.videos[v].frames.len()))
                })
                .collect();
            let mut g = Graph::new();
            let logits = head_logits(&mut probe, &mut g, data, &picks, opts.bn_mode)?;
            let losses = logits
                .iter()
                .map(|&z| record_domain_loss(&mut g.tape, z, label))
                .collect::<Result<Vec<_>>>()?;
            let total = record_total(&mut g.tape, None, &losses)?;
            let grads = g.tape.backward(total)?;
            probe.params_mut().accumulate(&g.binder, &grads);
        }
        adam.update(probe.params_mut());
    }
    let heads = probe.branch_indices().len();
    let mut correct = vec![0usize; heads];
    let mut total = 0usize;
    for (label, data) in sets {
        let mut picks = Vec::new();
        for v in halves(data, 1) {
            for _ in 0..opts.test_clips_per_video {
                picks.push((v, rng.random_range(t_len - 1..data.videos[v].frames.len())));
            }
        }
        picks.shuffle(&mut rng);
        for chunk in picks.chunks(opts.batch.max(1)) {
            let mut g = Graph::new();
            let logits = head_logits(&mut probe, &mut g, data, chunk, opts.bn_mode)?;
            for (k, z) in logits.into_iter().enumerate() {
                let hits = g.tape.value(z).data().iter().filter(|&&v| (v > 0.0) == (label > 0.5)).count();
                correct[k] += hits;
            }
            total += chunk.len();
        }
    }
    Ok(correct.iter().map(|&c| c as f64 / total as f64).collect())
}

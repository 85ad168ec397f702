//! Sliding-window inference over whole videos.

use hd2s_tensor::{gaussian_blur, DomainTag, Tensor, Var};

use super::{Forward, ForwardOptions, Hd2s};
use crate::error::{Error, Result};
use crate::params::Graph;

/// Random-access frames of one video.
pub trait FrameSource {
    fn frame_count(&self) -> usize;

    /// Stacks the frames at `indices` (0-based, in the given order) into a
    /// `[C, T, H, W]` clip.
    fn clip(&self, indices: &[usize]) -> Result<Tensor<f32>>;
}

/// Frames held in memory, each `[C, H, W]`.
impl FrameSource for [Tensor<f32>] {
    fn frame_count(&self) -> usize {
        self.len()
    }

    fn clip(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let first = self
            .first()
            .ok_or_else(|| Error::Input("video has no frames".into()))?;
        let shape = first.shape();
        if shape.len() != 3 {
            return Err(Error::Input(format!("frames must be [C, H, W], got {shape:?}")));
        }
        let (c, plane) = (shape[0], shape[1] * shape[2]);
        let t = indices.len();
        let mut data = vec![0.0f32; c * t * plane];
        for (k, &i) in indices.iter().enumerate() {
            let f = self
                .get(i)
                .ok_or_else(|| Error::Input(format!("frame {i} out of range")))?;
            if f.shape() != shape {
                return Err(Error::Input(format!("frame {i} has shape {:?}, expected {shape:?}", f.shape())));
            }
            for ch in 0..c {
                let dst = (ch * t + k) * plane;
                data[dst..dst + plane].copy_from_slice(&f.data()[ch * plane..(ch + 1) * plane]);
            }
        }
        Ok(Tensor::new(vec![c, t, shape[1], shape[2]], data)?)
    }
}

/// 0-based frame indices of the clip that predicts frame `t` of a video with
/// `len` frames. Frames with a full history use the preceding `clip_len`
/// frames in order; earlier frames use the following `clip_len` frames in
/// reverse, ending at `t`. In videos shorter than `2·clip_len − 1` frames,
/// indices past the end reflect back from the last frame.
pub fn clip_indices(t: usize, clip_len: usize, len: usize) -> Vec<usize> {
    if t + 1 >= clip_len {
        (t + 1 - clip_len..=t).collect()
    } else {
        let last = len.saturating_sub(1);
        (t..t + clip_len)
            .rev()
            .map(|i| if i > last { last.saturating_sub(i - last) } else { i })
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct InferenceOptions {
    /// Post-filter σ in pixels; `None` uses the configuration's scaled default.
    pub postfilter_sigma: Option<f64>,
    /// Windows evaluated per forward pass.
    pub batch: usize,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            postfilter_sigma: None,
            batch: 8,
        }
    }
}

impl Hd2s {
    /// One `[H, W]` saliency map per frame of `video`, each blurred by the
    /// fixed post-filter.
    pub fn predict_video<S: FrameSource + ?Sized>(
        &mut self,
        video: &S,
        domain: DomainTag,
        opts: InferenceOptions,
    ) -> Result<Vec<Tensor<f32>>> {
        let all: Vec<usize> = (0..video.frame_count()).collect();
        self.predict_frames(video, &all, domain, opts)
    }

    /// Saliency maps of the listed frames only, with the same windows as
    /// [`Hd2s::predict_video`].
    pub fn predict_frames<S: FrameSource + ?Sized>(
        &mut self,
        video: &S,
        frames: &[usize],
        domain: DomainTag,
        opts: InferenceOptions,
    ) -> Result<Vec<Tensor<f32>>> {
        let len = video.frame_count();
        let t_len = self.config.clip_len;
        if len < t_len {
            return Err(Error::Input(format!(
                "video has {len} frames, fewer than the clip length {t_len}"
            )));
        }
        if let Some(&t) = frames.iter().find(|&&t| t >= len) {
            return Err(Error::Input(format!("frame {t} out of range")));
        }
        let (h, w) = (self.config.input_height, self.config.input_width);
        let sigma = opts.postfilter_sigma.unwrap_or_else(|| self.config.postfilter_sigma());
        let mut maps = Vec::with_capacity(frames.len());
        for chunk in frames.chunks(opts.batch.max(1)) {
            let clips = chunk
                .iter()
                .map(|&t| video.clip(&clip_indices(t, t_len, len)))
                .collect::<Result<Vec<_>>>()?;
            let batch = Tensor::stack(&clips)?;
            let mut g = Graph::new();
            let x = g.tape.constant(batch);
            let out = self.forward_frozen(&mut g, x, ForwardOptions::eval(domain))?;
            let sal = g.tape.value(out).data();
            for plane in sal.chunks_exact(h * w) {
                let data = if sigma > 0.0 {
                    gaussian_blur(plane, h, w, sigma)
                } else {
                    plane.to_vec()
                };
                maps.push(Tensor::new(vec![h, w], data)?);
            }
        }
        Ok(maps)
    }

    fn forward_frozen(&mut self, g: &mut Graph, clip: Var, opts: ForwardOptions) -> Result<Var> {
        Ok(self.forward_constant(g, clip, opts)?.saliency)
    }

    /// Forward pass with every parameter bound as a constant, so nothing is
    /// recorded for backpropagation.
    pub fn forward_constant(&mut self, g: &mut Graph, clip: Var, opts: ForwardOptions) -> Result<Forward> {
        let frozen: Vec<bool> = self.params.iter().map(|p| p.frozen).collect();
        self.params.iter_mut().for_each(|p| p.frozen = true);
        let out = self.forward(g, clip, opts);
        for (p, f) in self.params.iter_mut().zip(frozen) {
            p.frozen = f;
        }
        out
    }
}

//! Loading dataset trees into memory and cutting training clips.

use std::fs;
use std::path::{Path, PathBuf};

use hd2s_tensor::Tensor;
use rand::Rng;

use super::image_io::{read_image, resize_plane};
use super::manifest::{parse_fixations, DatasetManifest};
use crate::error::{Error, Result};
use crate::model::FrameSource;

/// One video resized to the model resolution.
#[derive(Debug, Clone)]
pub struct VideoData {
    pub id: String,
    /// `[C, H, W]` per frame, intensities in `[0, 1]`.
    pub frames: Vec<Tensor<f32>>,
    /// `[H, W]` per frame, summing to 1.
    pub density: Vec<Tensor<f32>>,
    /// Fixated pixels `(x, y)` per frame, in model coordinates.
    pub fixations: Vec<Vec<(usize, usize)>>,
}

impl FrameSource for VideoData {
    fn frame_count(&self) -> usize {
        self.frames.len()
    }

    fn clip(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        self.frames[..].clip(indices)
    }
}

/// A training or evaluation example.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[C, T, H, W]`.
    pub clip: Tensor<f32>,
    /// `[H, W]` density of the predicted frame, summing to 1.
    pub density: Tensor<f32>,
    pub fixations: Vec<(usize, usize)>,
}

/// Normalizes a density so it sums to one; all-zero maps stay zero.
fn unit_sum(mut v: Vec<f32>) -> Vec<f32> {
    let total: f64 = v.iter().map(|&x| x as f64).sum();
    if total > 0.0 {
        v.iter_mut().for_each(|x| *x = (*x as f64 / total) as f32);
    }
    v
}

fn load_plane_resized(path: &Path, channels: usize, height: usize, width: usize) -> Result<(Tensor<f32>, (usize, usize))> {
    let p = read_image(path, channels)?;
    let plane = p.height * p.width;
    let mut data = Vec::with_capacity(channels * height * width);
    for c in 0..channels {
        data.extend(resize_plane(&p.data[c * plane..(c + 1) * plane], p.height, p.width, height, width));
    }
    Ok((Tensor::new(vec![channels, height, width], data)?, (p.height, p.width)))
}

/// Frames of one video read from disk on demand.
#[derive(Debug, Clone)]
pub struct DiskVideo {
    pub paths: Vec<PathBuf>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl DiskVideo {
    /// Every `.pgm`/`.ppm` file in `dir`, in file-name order.
    pub fn from_dir(dir: &Path, channels: usize, height: usize, width: usize) -> Result<Self> {
        let entries = fs::read_dir(dir).map_err(|e| Error::ingest(dir, e))?;
        let mut paths = Vec::new();
        for e in entries {
            let p = e.map_err(|e| Error::ingest(dir, e))?.path();
            if matches!(p.extension().and_then(|x| x.to_str()), Some("pgm" | "ppm" | "pnm")) {
                paths.push(p);
            }
        }
        paths.sort();
        Ok(DiskVideo {
            paths,
            channels,
            height,
            width,
        })
    }

    pub fn frame(&self, i: usize) -> Result<Tensor<f32>> {
        let p = self
            .paths
            .get(i)
            .ok_or_else(|| Error::Input(format!("frame {i} out of range")))?;
        Ok(load_plane_resized(p, self.channels, self.height, self.width)?.0)
    }
}

impl FrameSource for DiskVideo {
    fn frame_count(&self) -> usize {
        self.paths.len()
    }

    fn clip(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let frames = indices.iter().map(|&i| self.frame(i)).collect::<Result<Vec<_>>>()?;
        let ids: Vec<usize> = (0..frames.len()).collect();
        frames[..].clip(&ids)
    }
}

/// Frame indices of a clip ending at frame `t` (0-based). Forward clips cover
/// `t+1-clip_len ..= t`; reversed clips run from `t+clip_len-1` down to `t`.
pub fn clip_frames(t: usize, clip_len: usize, reversed: bool, len: usize) -> Result<Vec<usize>> {
    let ok = if reversed { t + clip_len <= len } else { t + 1 >= clip_len && t < len };
    if !ok || clip_len == 0 {
        return Err(Error::Input(format!(
            "no {} clip of {clip_len} frames ends at frame {t} of {len}",
            if reversed { "reversed" } else { "forward" }
        )));
    }
    Ok(if reversed {
        (t..t + clip_len).rev().collect()
    } else {
        (t + 1 - clip_len..=t).collect()
    })
}

/// Reads one clip, its ground-truth density and fixations straight from a
/// dataset tree.
pub fn load_clip(
    manifest: &DatasetManifest,
    video_id: &str,
    t: usize,
    clip_len: usize,
    reversed: bool,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Sample> {
    let entry = manifest
        .video(video_id)
        .ok_or_else(|| Error::Input(format!("unknown video `{video_id}`")))?;
    let idx = clip_frames(t, clip_len, reversed, entry.frames)?;
    let disk = DiskVideo {
        paths: idx.iter().map(|&i| manifest.frame_path(video_id, i)).collect(),
        channels,
        height,
        width,
    };
    let clip = disk.clip(&(0..idx.len()).collect::<Vec<_>>())?;
    let (density, (src_h, src_w)) = load_plane_resized(&manifest.density_path(video_id, t), 1, height, width)?;
    let density = Tensor::new(vec![height, width], unit_sum(density.into_data()))?;
    let fp = manifest.fixation_path(video_id);
    let text = fs::read_to_string(&fp).map_err(|e| Error::ingest(&fp, e))?;
    let fix = parse_fixations(&fp, &text, entry.frames)?;
    Ok(Sample {
        clip,
        density,
        fixations: rescale_points(&fix[t], (src_h, src_w), (height, width)),
    })
}

fn rescale_points(points: &[(usize, usize)], from: (usize, usize), to: (usize, usize)) -> Vec<(usize, usize)> {
    if from == to {
        return points.to_vec();
    }
    let mut out: Vec<(usize, usize)> = points
        .iter()
        .map(|&(x, y)| {
            let sx = ((x as f64 + 0.5) * to.1 as f64 / from.1 as f64).floor() as usize;
            let sy = ((y as f64 + 0.5) * to.0 as f64 / from.0 as f64).floor() as usize;
            (sx.min(to.1 - 1), sy.min(to.0 - 1))
        })
        .collect();
    out.dedup();
    out
}

/// A whole dataset held in memory at the model resolution.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub videos: Vec<VideoData>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Dataset {
    pub fn load(manifest: &DatasetManifest, channels: usize, height: usize, width: usize) -> Result<Self> {
        let mut videos = Vec::with_capacity(manifest.videos.len());
        for v in &manifest.videos {
            let mut frames = Vec::with_capacity(v.frames);
            let mut density = Vec::with_capacity(v.frames);
            let mut src = (height, width);
            for t in 0..v.frames {
                frames.push(load_plane_resized(&manifest.frame_path(&v.id, t), channels, height, width)?.0);
                let (d, s) = load_plane_resized(&manifest.density_path(&v.id, t), 1, height, width)?;
                src = s;
                density.push(Tensor::new(vec![height, width], unit_sum(d.into_data()))?);
            }
            let fp = manifest.fixation_path(&v.id);
            let text = fs::read_to_string(&fp).map_err(|e| Error::ingest(&fp, e))?;
            let raw = parse_fixations(&fp, &text, v.frames)?;
            for pts in &raw {
                if let Some(&(x, y)) = pts.iter().find(|&&(x, y)| x >= src.1 || y >= src.0) {
                    return Err(Error::ingest(&fp, format!("fixation ({x}, {y}) outside the frame")));
                }
            }
            videos.push(VideoData {
                id: v.id.clone(),
                frames,
                density,
                fixations: raw.iter().map(|p| rescale_points(p, src, (height, width))).collect(),
            });
        }
        Ok(Dataset {
            manifest: manifest.clone(),
            videos,
            channels,
            height,
            width,
        })
    }

    /// Loads the tree rooted at `root`.
    pub fn open(root: &Path, channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::load(&DatasetManifest::load(root)?, channels, height, width)
    }

    /// Keeps only the videos listed in `manifest`.
    pub fn restrict(&self, manifest: &DatasetManifest) -> Dataset {
        Dataset {
            manifest: manifest.clone(),
            videos: self
                .videos
                .iter()
                .filter(|v| manifest.video(&v.id).is_some())
                .cloned()
                .collect(),
            ..self.clone()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn clip(&self, video: usize, t: usize, clip_len: usize, reversed: bool) -> Result<Sample> {
        let v = &self.videos[video];
        let idx = clip_frames(t, clip_len, reversed, v.frames.len())?;
        Ok(Sample {
            clip: v.clip(&idx)?,
            density: v.density[t].clone(),
            fixations: v.fixations[t].clone(),
        })
    }

    /// Draws a video uniformly, then a forward clip of consecutive frames
    /// uniformly among those that fit.
    pub fn sample(&self, rng: &mut impl Rng, clip_len: usize) -> Result<Sample> {
        let fit: Vec<usize> = (0..self.videos.len())
            .filter(|&i| self.videos[i].frames.len() >= clip_len)
            .collect();
        if fit.is_empty() {
            return Err(Error::Input(format!("no video has {clip_len} frames")));
        }
        let v = fit[rng.random_range(0..fit.len())];
        let t = rng.random_range(clip_len - 1..self.videos[v].frames.len());
        self.clip(v, t, clip_len, false)
    }
}

/// Stacks samples into a `[N, C, T, H, W]` clip batch and a `[N, 1, H, W]`
/// density batch.
pub fn collate(samples: &[Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let clips: Vec<Tensor<f32>> = samples.iter().map(|s| s.clip.clone()).collect();
    let dens: Vec<Tensor<f32>> = samples
        .iter()
        .map(|s| {
            let sh = s.density.shape();
            s.density.clone().reshape(&[1, sh[0], sh[1]])
        })
        .collect::<hd2s_tensor::Result<_>>()?;
    Ok((Tensor::stack(&clips)?, Tensor::stack(&dens)?))
}

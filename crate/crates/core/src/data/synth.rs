//! Synthetic videos: moving bright blobs are salient, static look-alike
//! blobs are not. Style B adds a global brightness ramp and confines each
//! moving blob to a box anchored at a random corner.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use hd2s_tensor::DomainTag;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::image_io::{to_bytes, write_gray8};
use super::manifest::{format_fixations, DatasetManifest, Split, VideoEntry};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    A,
    B,
}

impl FromStr for Style {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Style::A),
            "B" | "b" => Ok(Style::B),
            _ => Err(Error::config(format!("unknown style `{s}` (expected A or B)"))),
        }
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Style::A => "A",
            Style::B => "B",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub videos: usize,
    pub length: usize,
    pub height: usize,
    pub width: usize,
    /// Moving (salient) blobs per video.
    pub blobs: usize,
    /// Static distractor blobs per video.
    pub distractors: usize,
    /// Speed range in pixels per frame.
    pub speed: (f64, f64),
    pub blob_radius: f64,
    pub style: Style,
    /// Style B brightness offset: `drift · (0.5 + 0.5 · t / (L − 1))`.
    pub drift: f64,
    /// Standard deviation of the ground-truth Gaussians, in pixels.
    pub gt_sigma: f64,
    pub fixations_per_frame: usize,
    pub domain: DomainTag,
    pub split: Split,
    pub id_prefix: String,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            videos: 8,
            length: 48,
            height: 32,
            width: 48,
            blobs: 1,
            distractors: 1,
            speed: (0.6, 1.5),
            blob_radius: 2.5,
            style: Style::A,
            drift: 0.2,
            gt_sigma: 2.0,
            fixations_per_frame: 8,
            domain: DomainTag(0),
            split: Split::Train,
            id_prefix: "v".into(),
        }
    }
}

/// Frame divisibility required by the four 2×2 pooling stages.
pub const SIZE_MULTIPLE: usize = 16;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % SIZE_MULTIPLE != 0 || self.width % SIZE_MULTIPLE != 0 {
            return Err(Error::config(format!(
                "size {}x{} must be a positive multiple of {SIZE_MULTIPLE} in both axes",
                self.height, self.width
            )));
        }
        if self.length < 2 {
            return Err(Error::config("videos need at least 2 frames"));
        }
        if !(self.speed.0 >= 0.0 && self.speed.1 >= self.speed.0) {
            return Err(Error::config("speed range must satisfy 0 <= min <= max"));
        }
        if !(self.gt_sigma > 0.0 && self.blob_radius > 0.0) {
            return Err(Error::config("gt_sigma and blob_radius must be positive"));
        }
        if self.blobs == 0 {
            return Err(Error::config("at least one moving blob is required"));
        }
        Ok(())
    }
}

/// One generated video in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub id: String,
    /// `[H·W]` intensities in `[0, 1]` per frame.
    pub frames: Vec<Vec<f32>>,
    /// Density per frame, scaled so its maximum is 1.
    pub density: Vec<Vec<f32>>,
    pub fixations: Vec<Vec<(usize, usize)>>,
    /// Moving-blob centres `(x, y)` per frame.
    pub centres: Vec<Vec<(f64, f64)>>,
}

/// Sum of isotropic Gaussians centred at `centres`, scaled to a maximum of 1.
pub fn render_density(centres: &[(f64, f64)], height: usize, width: usize, sigma: f64) -> Vec<f32> {
    let mut d = vec![0.0f64; height * width];
    for &(cx, cy) in centres {
        for (i, v) in d.iter_mut().enumerate() {
            let (x, y) = ((i % width) as f64, (i / width) as f64);
            *v += (-((x - cx).powi(2) + (y - cy).powi(2)) / (2.0 * sigma * sigma)).exp();
        }
    }
    let max = d.iter().cloned().fold(0.0, f64::max);
    d.iter().map(|&v| if max > 0.0 { (v / max) as f32 } else { 0.0 }).collect()
}

fn disc(x: f64, y: f64, cx: f64, cy: f64, r: f64) -> f64 {
    let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
    // soft edge one pixel wide
    (r + 0.5 - d).clamp(0.0, 1.0)
}

fn sample_fixations(rng: &mut ChaCha8Rng, density: &[f32], width: usize, n: usize) -> Vec<(usize, usize)> {
    let total: f64 = density.iter().map(|&v| v as f64).sum();
    if total <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = rng.random::<f64>() * total;
        let mut pick = density.len() - 1;
        for (i, &v) in density.iter().enumerate() {
            u -= v as f64;
            if u < 0.0 {
                pick = i;
                break;
            }
        }
        out.push((pick % width, pick / width));
    }
    out
}

struct Blob {
    pos: (f64, f64),
    vel: (f64, f64),
    bounds: ((f64, f64), (f64, f64)),
}

impl Blob {
    fn step(&mut self) {
        let ((x0, x1), (y0, y1)) = self.bounds;
        let reflect = |p: &mut f64, v: &mut f64, lo: f64, hi: f64| {
            *p += *v;
            if *p < lo {
                *p = 2.0 * lo - *p;
                *v = -*v;
            }
            if *p > hi {
                *p = 2.0 * hi - *p;
                *v = -*v;
            }
            *p = p.clamp(lo, hi);
        };
        reflect(&mut self.pos.0, &mut self.vel.0, x0, x1);
        reflect(&mut self.pos.1, &mut self.vel.1, y0, y1);
    }
}

/// Generates one video from `rng`.
pub fn synthesize_video(spec: &SyntheticSpec, id: &str, rng: &mut ChaCha8Rng) -> SyntheticVideo {
    let (h, w, l) = (spec.height, spec.width, spec.length);
    let r = spec.blob_radius;
    let m = r.min((w.min(h) as f64 - 1.0) / 2.0);
    let full = ((m, w as f64 - 1.0 - m), (m, h as f64 - 1.0 - m));
    let texture: Vec<f64> = (0..h * w).map(|_| rng.random_range(-0.04..0.04)).collect();
    let background = rng.random_range(0.2..0.3);
    let amplitude = 0.45;
    let mut blobs: Vec<Blob> = (0..spec.blobs)
        .map(|_| {
            // drawn for both styles so A and B share every other random choice
            let (left, top) = (rng.random_bool(0.5), rng.random_bool(0.5));
            let bounds = match spec.style {
                Style::A => full,
                Style::B => {
                    // box covering 60% of each axis, anchored at a corner
                    let ((x0, x1), (y0, y1)) = full;
                    let (bw, bh) = (0.6 * (x1 - x0), 0.6 * (y1 - y0));
                    let xs = if left { (x0, x0 + bw) } else { (x1 - bw, x1) };
                    let ys = if top { (y0, y0 + bh) } else { (y1 - bh, y1) };
                    (xs, ys)
                }
            };
            let ((x0, x1), (y0, y1)) = bounds;
            let speed = rng.random_range(spec.speed.0..=spec.speed.1);
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            Blob {
                pos: (rng.random_range(x0..=x1), rng.random_range(y0..=y1)),
                vel: (speed * angle.cos(), speed * angle.sin()),
                bounds,
            }
        })
        .collect();
    let statics: Vec<(f64, f64)> = (0..spec.distractors)
        .map(|_| (rng.random_range(full.0 .0..=full.0 .1), rng.random_range(full.1 .0..=full.1 .1)))
        .collect();

    let mut video = SyntheticVideo {
        id: id.to_string(),
        frames: Vec::with_capacity(l),
        density: Vec::with_capacity(l),
        fixations: Vec::with_capacity(l),
        centres: Vec::with_capacity(l),
    };
    for t in 0..l {
        let centres: Vec<(f64, f64)> = blobs.iter().map(|b| b.pos).collect();
        let offset = match spec.style {
            Style::A => 0.0,
            Style::B => spec.drift * (0.5 + 0.5 * t as f64 / (l - 1) as f64),
        };
        let frame = (0..h * w)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                let cover = centres
                    .iter()
                    .chain(&statics)
                    .map(|&(cx, cy)| disc(x, y, cx, cy, r))
                    .fold(0.0, f64::max);
                (background + texture[i] + amplitude * cover + offset).clamp(0.0, 1.0) as f32
            })
            .collect();
        let density = render_density(&centres, h, w, spec.gt_sigma);
        video
            .fixations
            .push(sample_fixations(rng, &density, w, spec.fixations_per_frame));
        video.frames.push(frame);
        video.density.push(density);
        video.centres.push(centres);
        blobs.iter_mut().for_each(Blob::step);
    }
    video
}

/// Generates `spec.videos` videos under `out`, writing the tree and its
/// manifest. Output depends only on `spec` and `seed`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut manifest = DatasetManifest {
        root: out.to_path_buf(),
        domain: spec.domain,
        split: spec.split,
        videos: Vec::new(),
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for v in 0..spec.videos {
        let id = format!("{}{v:03}", spec.id_prefix);
        let video = synthesize_video(spec, &id, &mut rng);
        for sub in ["frames", "density"] {
            let dir = out.join(&id).join(sub);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        manifest.videos.push(VideoEntry {
            id: id.clone(),
            frames: spec.length,
        });
        for t in 0..spec.length {
            write_gray8(&manifest.frame_path(&id, t), spec.height, spec.width, &to_bytes(&video.frames[t]))?;
            write_gray8(&manifest.density_path(&id, t), spec.height, spec.width, &to_bytes(&video.density[t]))?;
        }
        let fp = manifest.fixation_path(&id);
        fs::write(&fp, format_fixations(&video.fixations)).map_err(|e| Error::io(&fp, e))?;
    }
    manifest.save()?;
    Ok(manifest)
}

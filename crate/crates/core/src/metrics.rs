//! Saliency evaluation metrics and per-frame reports.
//!
//! All metrics return `None` when undefined for the given inputs (no
//! fixations, no negatives, constant maps); such frames are excluded from the
//! corresponding aggregate and counted.

use std::fmt::Write as _;
use std::io;

fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Normalized scanpath saliency: mean z-score of `pred` at fixated pixels,
/// using the population standard deviation.
pub fn nss(pred: &[f64], fixations: &[bool]) -> Option<f64> {
    assert_eq!(pred.len(), fixations.len(), "map sizes differ");
    let count = fixations.iter().filter(|&&f| f).count();
    if count == 0 || pred.is_empty() {
        return None;
    }
    let (mean, std) = mean_std(pred);
    if !(std > 0.0) {
        return None;
    }
    let total: f64 = pred
        .iter()
        .zip(fixations)
        .filter(|(_, &f)| f)
        .map(|(v, _)| (v - mean) / std)
        .sum();
    Some(total / count as f64)
}

/// Pearson correlation between two maps.
pub fn cc(pred: &[f64], gt: &[f64]) -> Option<f64> {
    assert_eq!(pred.len(), gt.len(), "map sizes differ");
    if pred.is_empty() {
        return None;
    }
    let (mp, sp) = mean_std(pred);
    let (mg, sg) = mean_std(gt);
    if !(sp > 0.0 && sg > 0.0) {
        return None;
    }
    let cov = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| (p - mp) * (g - mg))
        .sum::<f64>()
        / pred.len() as f64;
    Some(cov / (sp * sg))
}

/// Histogram intersection `Σ min(P̂, Ĝ)` of the sum-normalized maps.
pub fn sim(pred: &[f64], gt: &[f64]) -> Option<f64> {
    assert_eq!(pred.len(), gt.len(), "map sizes differ");
    if pred.iter().chain(gt).any(|&v| v < 0.0 || !v.is_finite()) {
        return None;
    }
    let (sp, sg) = (pred.iter().sum::<f64>(), gt.iter().sum::<f64>());
    if !(sp > 0.0 && sg > 0.0) {
        return None;
    }
    Some(pred.iter().zip(gt).map(|(p, g)| (p / sp).min(g / sg)).sum())
}

/// Area under the ROC curve of positives against negatives, sweeping the
/// threshold over the positive values:
/// `P(pos > neg) + ½ P(pos = neg)` over all pairs.
fn roc_area(positives: &[f64], mut negatives: Vec<f64>) -> Option<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return None;
    }
    negatives.sort_by(f64::total_cmp);
    let mut acc = 0.0f64;
    for &p in positives {
        let below = negatives.partition_point(|&n| n < p);
        let not_above = negatives.partition_point(|&n| n <= p);
        acc += below as f64 + 0.5 * (not_above - below) as f64;
    }
    Some(acc / (positives.len() as f64 * negatives.len() as f64))
}

/// Judd AUC: fixated pixels are positives, every other pixel a negative.
pub fn auc_judd(pred: &[f64], fixations: &[bool]) -> Option<f64> {
    assert_eq!(pred.len(), fixations.len(), "map sizes differ");
    let (pos, neg): (Vec<_>, Vec<_>) = pred.iter().zip(fixations).partition(|(_, &f)| f);
    roc_area(
        &pos.into_iter().map(|(v, _)| *v).collect::<Vec<_>>(),
        neg.into_iter().map(|(v, _)| *v).collect(),
    )
}

/// Shuffled AUC: negatives are the pixels fixated in `other` (fixations
/// pooled from other videos) that are not fixated in this frame.
pub fn shuffled_auc(pred: &[f64], fixations: &[bool], other: &[bool]) -> Option<f64> {
    assert_eq!(pred.len(), fixations.len(), "map sizes differ");
    assert_eq!(pred.len(), other.len(), "map sizes differ");
    let pos: Vec<f64> = pred.iter().zip(fixations).filter(|(_, &f)| f).map(|(v, _)| *v).collect();
    let neg: Vec<f64> = pred
        .iter()
        .zip(fixations.iter().zip(other))
        .filter(|(_, (&f, &o))| o && !f)
        .map(|(v, _)| *v)
        .collect();
    roc_area(&pos, neg)
}

/// Binary map of `(x, y)` points on an `h × w` grid; points outside are ignored.
pub fn fixation_mask(points: &[(usize, usize)], h: usize, w: usize) -> Vec<bool> {
    let mut m = vec![false; h * w];
    for &(x, y) in points {
        if x < w && y < h {
            m[y * w + x] = true;
        }
    }
    m
}

pub const METRIC_NAMES: [&str; 5] = ["nss", "cc", "sim", "aucj", "sauc"];

/// Metric values of one frame, in [`METRIC_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub video_id: String,
    /// 0-based frame index.
    pub frame: usize,
    pub values: [Option<f64>; 5],
}

impl FrameMetrics {
    pub fn compute(
        video_id: &str,
        frame: usize,
        pred: &[f64],
        gt_density: &[f64],
        fixations: &[bool],
        shuffled: &[Vec<bool>],
    ) -> Self {
        let sauc: Vec<f64> = shuffled
            .iter()
            .filter_map(|o| shuffled_auc(pred, fixations, o))
            .collect();
        let sauc = (!sauc.is_empty()).then(|| sauc.iter().sum::<f64>() / sauc.len() as f64);
        FrameMetrics {
            video_id: video_id.to_string(),
            frame,
            values: [
                nss(pred, fixations),
                cc(pred, gt_density),
                sim(pred, gt_density),
                auc_judd(pred, fixations),
                sauc,
            ],
        }
    }

    pub fn nss(&self) -> Option<f64> {
        self.values[0]
    }
}

/// Mean of the defined values of one metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: Option<f64>,
    pub count: usize,
    pub excluded: usize,
}

fn summarize<'a>(frames: impl Iterator<Item = &'a FrameMetrics>) -> [Summary; 5] {
    let mut sums = [0.0f64; 5];
    let mut counts = [0usize; 5];
    let mut excluded = [0usize; 5];
    for f in frames {
        for (k, v) in f.values.iter().enumerate() {
            match v {
                Some(v) => {
                    sums[k] += v;
                    counts[k] += 1;
                }
                None => excluded[k] += 1,
            }
        }
    }
    std::array::from_fn(|k| Summary {
        mean: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
        count: counts[k],
        excluded: excluded[k],
    })
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalRecord {
    pub frames: Vec<FrameMetrics>,
}

impl EvalRecord {
    pub fn aggregate(&self) -> [Summary; 5] {
        summarize(self.frames.iter())
    }

    /// Per-video summaries in order of first appearance.
    pub fn per_video(&self) -> Vec<(String, [Summary; 5])> {
        let mut ids: Vec<&str> = Vec::new();
        for f in &self.frames {
            if !ids.contains(&f.video_id.as_str()) {
                ids.push(&f.video_id);
            }
        }
        ids.into_iter()
            .map(|id| (id.to_string(), summarize(self.frames.iter().filter(|f| f.video_id == id))))
            .collect()
    }

    pub fn mean_nss(&self) -> Option<f64> {
        self.aggregate()[0].mean
    }

    /// One row per frame plus a footer row with the aggregate means. The
    /// `flags` column lists the metrics that were undefined for the row (for
    /// the footer: how many frames each metric excluded).
    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|v| format!("{v:.6}")).unwrap_or_default();
        let mut s = String::from("video_id,frame_idx,nss,cc,sim,aucj,sauc,flags\n");
        for f in &self.frames {
            let flags: Vec<&str> = METRIC_NAMES
                .iter()
                .zip(&f.values)
                .filter(|(_, v)| v.is_none())
                .map(|(n, _)| *n)
                .collect();
            let _ = write!(s, "{},{}", f.video_id, f.frame);
            for v in f.values {
                let _ = write!(s, ",{}", fmt(v));
            }
            let _ = writeln!(s, ",{}", flags.join(";"));
        }
        if !self.frames.is_empty() {
            let agg = self.aggregate();
            let _ = write!(s, "ALL,{}", self.frames.len());
            for a in &agg {
                let _ = write!(s, ",{}", fmt(a.mean));
            }
            let excluded: Vec<String> = METRIC_NAMES
                .iter()
                .zip(&agg)
                .filter(|(_, a)| a.excluded > 0)
                .map(|(n, a)| format!("{n}:{}", a.excluded))
                .collect();
            let _ = writeln!(s, ",{}", excluded.join(";"));
        }
        s
    }

    pub fn write_csv(&self, mut out: impl io::Write) -> io::Result<()> {
        out.write_all(self.to_csv().as_bytes())
    }
}

//! Dataset description stored as `manifest.txt` at the root of a dataset tree.
//!
//! ```text
//! <root>/manifest.txt
//! <root>/<video>/frames/000000.pgm     one image per frame
//! <root>/<video>/density/000000.pgm    ground-truth density per frame
//! <root>/<video>/fixations.txt         `frame <i>` headers, then `x y` lines
//! ```

use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hd2s_tensor::DomainTag;

use crate::config::parse_value;
use crate::error::{Error, Result};
use crate::params::fnv1a;

pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::config(format!("unknown split `{s}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoEntry {
    pub id: String,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub domain: DomainTag,
    pub split: Split,
    pub videos: Vec<VideoEntry>,
}

fn frame_name(i: usize) -> String {
    format!("{i:06}.pgm")
}

impl DatasetManifest {
    pub fn frame_path(&self, video: &str, i: usize) -> PathBuf {
        self.root.join(video).join("frames").join(frame_name(i))
    }

    pub fn density_path(&self, video: &str, i: usize) -> PathBuf {
        self.root.join(video).join("density").join(frame_name(i))
    }

    pub fn fixation_path(&self, video: &str) -> PathBuf {
        self.root.join(video).join("fixations.txt")
    }

    pub fn video(&self, id: &str) -> Option<&VideoEntry> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "domain = {}", self.domain);
        let _ = writeln!(s, "split = {}", self.split);
        for v in &self.videos {
            let _ = writeln!(s, "video = {} {}", v.id, v.frames);
        }
        s
    }

    pub fn parse(root: &Path, text: &str) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let bad = |line: usize, msg: &str| Error::ingest(&path, format!("line {line}: {msg}"));
        let mut domain = None;
        let mut split = None;
        let mut videos: Vec<VideoEntry> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(i + 1, "expected `key = value`"))?;
            let v = v.trim();
            match k.trim() {
                "domain" => domain = Some(DomainTag(parse_value("domain", v)?)),
                "split" => split = Some(v.parse()?),
                "video" => {
                    let mut it = v.split_whitespace();
                    let (Some(id), Some(n), None) = (it.next(), it.next(), it.next()) else {
                        return Err(bad(i + 1, "expected `video = <id> <frames>`"));
                    };
                    if videos.iter().any(|e| e.id == id) {
                        return Err(bad(i + 1, "duplicate video id"));
                    }
                    videos.push(VideoEntry {
                        id: id.to_string(),
                        frames: n.parse().map_err(|_| bad(i + 1, "bad frame count"))?,
                    });
                }
                other => return Err(bad(i + 1, &format!("unknown key `{other}`"))),
            }
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            domain: domain.unwrap_or_default(),
            split: split.unwrap_or(Split::Train),
            videos,
        })
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::ingest(&path, e))?;
        Self::parse(root, &text)
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Splits off roughly 10% of the videos (at least one when there are two
    /// or more) as a validation set. Videos are ranked by a hash of the run
    /// seed and their id; the first ones in that order are held out.
    pub fn split_validation(&self, seed: u64) -> (DatasetManifest, DatasetManifest) {
        let n = self.videos.len();
        let held = if n >= 2 { (n as f64 / 10.0).round().max(1.0) as usize } else { 0 };
        let mut ids: Vec<&str> = self.videos.iter().map(|v| v.id.as_str()).collect();
        ids.sort_unstable();
        let mut ranked: Vec<(u64, &str)> = ids
            .iter()
            .map(|id| {
                let mut key = seed.to_le_bytes().to_vec();
                key.extend_from_slice(id.as_bytes());
                (fnv1a(&key), *id)
            })
            .collect();
        ranked.sort_unstable();
        let val_ids: Vec<&str> = ranked[..held].iter().map(|(_, id)| *id).collect();
        let pick = |val: bool, split: Split| DatasetManifest {
            videos: self
                .videos
                .iter()
                .filter(|v| val_ids.contains(&v.id.as_str()) == val)
                .cloned()
                .collect(),
            split,
            ..self.clone()
        };
        (pick(false, self.split), pick(true, Split::Val))
    }
}

/// Parses a fixation file into per-frame `(x, y)` lists.
pub fn parse_fixations(path: &Path, text: &str, frames: usize) -> Result<Vec<Vec<(usize, usize)>>> {
    let mut out = vec![Vec::new(); frames];
    let mut current: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::ingest(path, format!("line {}: cannot parse `{line}`", i + 1));
        let mut it = line.split_whitespace();
        let (a, b) = (it.next().ok_or_else(bad)?, it.next().ok_or_else(bad)?);
        if it.next().is_some() {
            return Err(bad());
        }
        if a == "frame" {
            let f: usize = b.parse().map_err(|_| bad())?;
            if f >= frames {
                return Err(Error::ingest(path, format!("line {}: frame {f} out of range", i + 1)));
            }
            current = Some(f);
        } else {
            let f = current.ok_or_else(bad)?;
            out[f].push((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?));
        }
    }
    Ok(out)
}

pub fn format_fixations(per_frame: &[Vec<(usize, usize)>]) -> String {
    let mut s = String::new();
    for (f, pts) in per_frame.iter().enumerate() {
        let _ = writeln!(s, "frame {f}");
        for (x, y) in pts {
            let _ = writeln!(s, "{x} {y}");
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::from("/data"),
            domain: DomainTag(2),
            split: Split::Train,
            videos: (0..n)
                .map(|i| VideoEntry {
                    id: format!("v{i:03}"),
                    frames: 10 + i,
                })
                .collect(),
        }
    }

    #[test]
    fn text_round_trip() {
        let m = manifest(3);
        assert_eq!(DatasetManifest::parse(Path::new("/data"), &m.to_text()).unwrap(), m);
        assert!(DatasetManifest::parse(Path::new("/d"), "video = a\n").is_err());
        assert!(DatasetManifest::parse(Path::new("/d"), "colour = 1\n").is_err());
        assert_eq!(m.frame_path("v001", 7), PathBuf::from("/data/v001/frames/000007.pgm"));
    }

    #[test]
    fn validation_split_is_a_seeded_tenth() {
        let m = manifest(20);
        let (train, val) = m.split_validation(7);
        assert_eq!(val.videos.len(), 2);
        assert_eq!(train.videos.len(), 18);
        assert_eq!(val.split, Split::Val);
        assert_eq!(m.split_validation(7), (train.clone(), val.clone()));
        let mut shuffled = m.clone();
        shuffled.videos.reverse();
        assert_eq!(shuffled.split_validation(7).1.videos.len(), 2);
        let ids = |d: &DatasetManifest| {
            let mut v: Vec<String> = d.videos.iter().map(|e| e.id.clone()).collect();
            v.sort();
            v
        };
        assert_eq!(ids(&shuffled.split_validation(7).1), ids(&val));
        assert_eq!(manifest(1).split_validation(0).1.videos.len(), 0);
    }

    #[test]
    fn fixation_text() {
        let f = vec![vec![(1, 2), (3, 4)], vec![], vec![(0, 0)]];
        let p = Path::new("f.txt");
        assert_eq!(parse_fixations(p, &format_fixations(&f), 3).unwrap(), f);
        assert!(parse_fixations(p, "1 2\n", 3).is_err());
        assert!(parse_fixations(p, "frame 5\n", 3).is_err());
    }
}

//! Model hyperparameters and the `key = value` text grammar shared by run
//! configuration files and checkpoint headers.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

/// One `key = value` line with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped.
/// Duplicate keys are rejected.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", i + 1)))?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {}: empty key", i + 1)));
        }
        if out.iter().any(|e| e.key == key) {
            return Err(Error::config(format!("line {}: duplicate key `{key}`", i + 1)));
        }
        out.push(Entry {
            key: key.to_string(),
            value: v.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

pub(crate) fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("`{key}`: cannot parse `{value}`")))
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

pub(crate) fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    value
        .split(',')
        .map(|s| parse_value(key, s.trim()))
        .collect()
}

fn parse_array<const K: usize>(key: &str, value: &str) -> Result<[usize; K]> {
    let v: Vec<usize> = parse_list(key, value)?;
    v.try_into()
        .map_err(|_| Error::config(format!("`{key}`: expected {K} comma-separated values")))
}

fn join<V: ToString>(items: &[V]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Extents of one encoder tap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapShape {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub clip_len: usize,
    pub input_height: usize,
    pub input_width: usize,
    pub input_channels: usize,
    /// Stem convolution width; the stem precedes the four pooled stages.
    pub stem_channels: usize,
    /// Stem stride as (temporal, spatial).
    pub stem_stride: [usize; 2],
    pub stage_channels: [usize; 4],
    /// Temporal window of each stage's max pool (spatial window is always 2).
    pub pool_temporal: [usize; 4],
    /// Width of the 2D convolutions inside each conspicuity decoder.
    pub decoder_channels: [usize; 4],
    pub classifier_channels: usize,
    pub classifier_hidden: usize,
    pub domain_count: usize,
    pub enable_da: bool,
    pub enable_dsl: bool,
    /// 1-based indices of the conspicuity branches that are built.
    pub branches: Vec<usize>,
    pub bn_eps: f32,
    pub bn_momentum: f32,
    pub smoothing_sigma_init: f32,
    pub smoothing_sigma_min: f32,
    /// Initial value of each fusion weight; the bias starts at `-w·k/2`.
    pub fusion_weight_init: f32,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Laptop-scale model: 8 grayscale frames of 32×48.
    pub fn desk() -> Self {
        ModelConfig {
            clip_len: 8,
            input_height: 32,
            input_width: 48,
            input_channels: 1,
            stem_channels: 8,
            stem_stride: [1, 1],
            stage_channels: [16, 32, 64, 128],
            pool_temporal: [1, 2, 2, 2],
            decoder_channels: [8, 8, 16, 16],
            classifier_channels: 8,
            classifier_hidden: 32,
            domain_count: 1,
            enable_da: false,
            enable_dsl: false,
            branches: vec![1, 2, 3, 4],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            smoothing_sigma_init: 1.0,
            smoothing_sigma_min: 0.1,
            fusion_weight_init: 1.0,
            init_seed: 0,
        }
    }

    /// Full-size layout: 16 RGB frames of 128×192 and a deepest tap of
    /// 1024×2×4×6.
    pub fn paper() -> Self {
        ModelConfig {
            clip_len: 16,
            input_height: 128,
            input_width: 192,
            input_channels: 3,
            stem_channels: 64,
            stem_stride: [2, 2],
            stage_channels: [192, 480, 832, 1024],
            pool_temporal: [1, 2, 2, 1],
            decoder_channels: [64, 64, 128, 128],
            classifier_channels: 64,
            classifier_hidden: 256,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.clip_len == 0 || self.input_height == 0 || self.input_width == 0 {
            return err("clip length and input size must be positive".into());
        }
        if self.input_channels == 0 || self.stem_channels == 0 {
            return err("channel counts must be positive".into());
        }
        if self.stage_channels.contains(&0) || self.decoder_channels.contains(&0) {
            return err("channel counts must be positive".into());
        }
        if self.stem_stride.contains(&0) || self.pool_temporal.contains(&0) {
            return err("strides and pool windows must be at least 1".into());
        }
        let spatial = self.stem_stride[1] << 4;
        if self.input_height % spatial != 0 || self.input_width % spatial != 0 {
            return err(format!(
                "input size {}x{} must be divisible by {spatial}",
                self.input_height, self.input_width
            ));
        }
        let mut t = self.clip_len;
        if t % self.stem_stride[0] != 0 {
            return err(format!("clip length {t} not divisible by the stem stride"));
        }
        t /= self.stem_stride[0];
        for (i, &p) in self.pool_temporal.iter().enumerate() {
            if t % p != 0 {
                return err(format!("stage {} pool window {p} does not divide {t} frames", i + 1));
            }
            t /= p;
            if !t.is_power_of_two() {
                return err(format!("tap {} temporal extent {t} is not a power of two", i + 1));
            }
        }
        if self.enable_da && self.enable_dsl {
            return err("domain adaptation and domain-specific learning are exclusive".into());
        }
        if self.domain_count == 0 {
            return err("domain_count must be at least 1".into());
        }
        if self.enable_da && (self.classifier_channels == 0 || self.classifier_hidden == 0) {
            return err("classifier widths must be positive".into());
        }
        let b = &self.branches;
        if b.is_empty() || b.iter().any(|&j| !(1..=4).contains(&j)) || b.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!(
                "branches must be a strictly increasing subset of 1..4, got {b:?}"
            ));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return err("invalid batch-norm eps or momentum".into());
        }
        if !(self.smoothing_sigma_min > 0.0) || !(self.smoothing_sigma_init >= self.smoothing_sigma_min) {
            return err("smoothing sigma must satisfy 0 < min <= init".into());
        }
        if !self.fusion_weight_init.is_finite() {
            return err("fusion_weight_init must be finite".into());
        }
        Ok(())
    }

    /// Extents of the four encoder taps.
    pub fn tap_shapes(&self) -> [TapShape; 4] {
        let mut t = self.clip_len / self.stem_stride[0];
        let mut h = self.input_height / self.stem_stride[1];
        let mut w = self.input_width / self.stem_stride[1];
        std::array::from_fn(|i| {
            t /= self.pool_temporal[i];
            h /= 2;
            w /= 2;
            TapShape {
                channels: self.stage_channels[i],
                frames: t,
                height: h,
                width: w,
            }
        })
    }

    /// Standard deviation of the inference post-filter: 5 pixels at a height
    /// of 128, scaled with the input height.
    pub fn postfilter_sigma(&self) -> f64 {
        5.0 * self.input_height as f64 / 128.0
    }

    /// Applies one `key = value` setting. Returns `Ok(false)` for keys this
    /// struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "clip_len" => self.clip_len = parse_value(key, value)?,
            "input_height" => self.input_height = parse_value(key, value)?,
            "input_width" => self.input_width = parse_value(key, value)?,
            "input_channels" => self.input_channels = parse_value(key, value)?,
            "stem_channels" => self.stem_channels = parse_value(key, value)?,
            "stem_stride" => self.stem_stride = parse_array(key, value)?,
            "stage_channels" => self.stage_channels = parse_array(key, value)?,
            "pool_temporal" => self.pool_temporal = parse_array(key, value)?,
            "decoder_channels" => self.decoder_channels = parse_array(key, value)?,
            "classifier_channels" => self.classifier_channels = parse_value(key, value)?,
            "classifier_hidden" => self.classifier_hidden = parse_value(key, value)?,
            "domain_count" => self.domain_count = parse_value(key, value)?,
            "enable_da" => self.enable_da = parse_bool(key, value)?,
            "enable_dsl" => self.enable_dsl = parse_bool(key, value)?,
            "branches" => self.branches = parse_list(key, value)?,
            "bn_eps" => self.bn_eps = parse_value(key, value)?,
            "bn_momentum" => self.bn_momentum = parse_value(key, value)?,
            "smoothing_sigma_init" => self.smoothing_sigma_init = parse_value(key, value)?,
            "smoothing_sigma_min" => self.smoothing_sigma_min = parse_value(key, value)?,
            "fusion_weight_init" => self.fusion_weight_init = parse_value(key, value)?,
            "init_seed" => self.init_seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("clip_len", self.clip_len.to_string()),
            ("input_height", self.input_height.to_string()),
            ("input_width", self.input_width.to_string()),
            ("input_channels", self.input_channels.to_string()),
            ("stem_channels", self.stem_channels.to_string()),
            ("stem_stride", join(&self.stem_stride)),
            ("stage_channels", join(&self.stage_channels)),
            ("pool_temporal", join(&self.pool_temporal)),
            ("decoder_channels", join(&self.decoder_channels)),
            ("classifier_channels", self.classifier_channels.to_string()),
            ("classifier_hidden", self.classifier_hidden.to_string()),
            ("domain_count", self.domain_count.to_string()),
            ("enable_da", self.enable_da.to_string()),
            ("enable_dsl", self.enable_dsl.to_string()),
            ("branches", join(&self.branches)),
            ("bn_eps", self.bn_eps.to_string()),
            ("bn_momentum", self.bn_momentum.to_string()),
            ("smoothing_sigma_init", self.smoothing_sigma_init.to_string()),
            ("smoothing_sigma_min", self.smoothing_sigma_min.to_string()),
            ("fusion_weight_init", self.fusion_weight_init.to_string()),
            ("init_seed", self.init_seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Parses text written by [`ModelConfig::to_text`]. Every key must be known.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::desk();
        for e in parse_entries(text)? {
            if !cfg.set(&e.key, &e.value)? {
                return Err(Error::config(format!("line {}: unknown key `{}`", e.line, e.key)));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn variant(&self) -> Variant {
        match (self.enable_da, self.enable_dsl) {
            (true, _) => Variant::DomainAdaptation,
            (_, true) => Variant::DomainSpecific,
            _ => Variant::Plain,
        }
    }
}

/// Which optional mechanism a model carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Plain,
    DomainAdaptation,
    DomainSpecific,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Plain => "plain",
            Variant::DomainAdaptation => "da",
            Variant::DomainSpecific => "dsl",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_layout_reaches_1024x2x4x6() {
        let cfg = ModelConfig::paper();
        cfg.validate().unwrap();
        let taps = cfg.tap_shapes();
        let deepest = taps[3];
        assert_eq!(
            (deepest.channels, deepest.frames, deepest.height, deepest.width),
            (1024, 2, 4, 6)
        );
        assert_eq!(taps.map(|t| t.frames), [8, 4, 2, 2]);
    }

    #[test]
    fn desk_layout_ends_with_single_frame() {
        let cfg = ModelConfig::desk();
        cfg.validate().unwrap();
        let taps = cfg.tap_shapes();
        assert_eq!(taps.map(|t| t.frames), [8, 4, 2, 1]);
        assert_eq!(taps.map(|t| (t.height, t.width)), [(16, 24), (8, 12), (4, 6), (2, 3)]);
        assert_eq!(cfg.postfilter_sigma(), 1.25);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::desk();
        c.input_height = 40;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::desk();
        c.enable_da = true;
        c.enable_dsl = true;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.clip_len = 12;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.branches = vec![2, 1];
        assert!(c.validate().is_err());
        c.branches = vec![5];
        assert!(c.validate().is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::paper();
        c.branches = vec![2, 4];
        c.enable_dsl = true;
        c.domain_count = 3;
        c.bn_eps = 1.5e-5;
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn grammar() {
        let e = parse_entries("# header\n a = 1 # note\n\nb=x y\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[1].key.as_str(), e[1].value.as_str(), e[1].line), ("b", "x y", 4));
        assert!(parse_entries("novalue\n").is_err());
        assert!(parse_entries("a=1\na=2\n").is_err());
        assert!(ModelConfig::from_text("colour = red\n").is_err());
    }
}

//! Flat `key = value` run configuration: model, plan and data locations.

use std::fmt::Write as _;
use std::path::PathBuf;

use hd2s::config::parse_entries;
use hd2s::train::{Regime, TrainPlan};
use hd2s::{Error, ModelConfig, Result};

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// `desk` or `paper`; selects the defaults every other key overrides.
    pub preset: String,
    pub model: ModelConfig,
    pub plan: TrainPlan,
    pub source: Option<PathBuf>,
    pub target: Option<PathBuf>,
    pub datasets: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    /// Checkpoint whose model is trained further instead of a fresh one.
    pub init: Option<PathBuf>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let (model, plan) = match name {
            "desk" => (ModelConfig::desk(), TrainPlan::desk()),
            "paper" => (ModelConfig::paper(), TrainPlan::paper()),
            other => return Err(Error::config(format!("unknown preset `{other}` (desk or paper)"))),
        };
        Ok(RunConfig {
            preset: name.to_string(),
            model,
            plan,
            source: None,
            target: None,
            datasets: Vec::new(),
            out: None,
            init: None,
        })
    }

    /// Parses a config file. `preset` may appear anywhere; it is applied first.
    pub fn from_text(text: &str) -> Result<Self> {
        let entries = parse_entries(text)?;
        let preset = entries
            .iter()
            .find(|e| e.key == "preset")
            .map(|e| e.value.as_str())
            .unwrap_or("desk");
        let mut cfg = RunConfig::preset(preset)?;
        for e in entries.iter().filter(|e| e.key != "preset") {
            if !cfg.set(&e.key, &e.value)? {
                return Err(Error::config(format!("line {}: unknown key `{}`", e.line, e.key)));
            }
        }
        Ok(cfg)
    }

    /// Applies one key; `Ok(false)` when the key is unknown.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let path = || PathBuf::from(value);
        match key {
            "source" => self.source = Some(path()),
            "target" => self.target = Some(path()),
            "datasets" => {
                self.datasets = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(PathBuf::from)
                    .collect()
            }
            "out" => self.out = Some(path()),
            "init" => self.init = Some(path()),
            "preset" => return Err(Error::config("preset can only be given in a config file")),
            _ => return Ok(self.model.set(key, value)? || self.plan.set(key, value)?),
        }
        Ok(true)
    }

    /// Applies `key=value` overrides given on the command line.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{p}` is not key=value")))?;
            if !self.set(k.trim(), v.trim())? {
                return Err(Error::config(format!("unknown key `{}`", k.trim())));
            }
        }
        Ok(())
    }

    /// Makes the model variant follow the regime.
    pub fn align_variant(&mut self) {
        self.model.enable_da = self.plan.regime == Regime::Da;
        self.model.enable_dsl = self.plan.regime == Regime::Dsl;
        if self.plan.regime == Regime::Dsl {
            self.model.domain_count = self.model.domain_count.max(self.datasets.len());
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.plan.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "preset = {}", self.preset);
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        if let Some(v) = opt(&self.source) {
            let _ = writeln!(s, "source = {v}");
        }
        if let Some(v) = opt(&self.target) {
            let _ = writeln!(s, "target = {v}");
        }
        if !self.datasets.is_empty() {
            let list: Vec<String> = self.datasets.iter().map(|p| p.display().to_string()).collect();
            let _ = writeln!(s, "datasets = {}", list.join(","));
        }
        if let Some(v) = opt(&self.out) {
            let _ = writeln!(s, "out = {v}");
        }
        if let Some(v) = opt(&self.init) {
            let _ = writeln!(s, "init = {v}");
        }
        for (k, v) in self.model.entries().into_iter().chain(self.plan.entries()) {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::from_text("preset = desk\nsource = data/a\nlr = 0.01\nstem_channels = 4\n").unwrap();
        cfg.datasets = vec!["x".into(), "y".into()];
        let again = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(again.to_text(), cfg.to_text());
        assert_eq!(again.plan.lr, 0.01);
        assert_eq!(again.model.stem_channels, 4);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_text("lr = 0.1\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(RunConfig::from_text("preset = huge\n").is_err());
        let mut cfg = RunConfig::preset("desk").unwrap();
        assert!(cfg.apply_overrides(&["nope=1".into()]).is_err());
        assert!(cfg.apply_overrides(&["lr".into()]).is_err());
    }
}

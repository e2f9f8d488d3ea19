//! Pipeline configuration and its `key = value` text form.
//!
//! Lines are `key = value`; blank lines and lines starting with `#` are
//! ignored. `gbrt.profile` is applied before the other keys, so explicit
//! `gbrt.trees` / `gbrt.lr` values override the profile wherever they
//! appear in the file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::anomaly::ForestParams;
use crate::error::{Error, Result};
use crate::regressor::{GbrtParams, GbrtProfile};
use crate::sse::MIN_MASTER_SECRET;
use crate::valuation::KeepPolicy;

const DEFAULT_SECRET: &[u8] = b"mini-elsa demo master secret";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub train_fraction: f64,
    pub shap_ref_size: usize,
    pub split_seed: u64,
    pub forest: ForestParams,
    pub forest_seed: u64,
    pub valuation_k: usize,
    pub keep_policy: KeepPolicy,
    pub admit_percentile: f64,
    pub profile: GbrtProfile,
    pub gbrt: GbrtParams,
    pub screening_enabled: bool,
    pub repetitions: usize,
    pub warmup: usize,
    pub cv_enabled: bool,
    pub cv_folds: usize,
    pub cv_seed: u64,
    pub master_secret: Vec<u8>,
    pub synth_n: usize,
    pub synth_seed: u64,
    pub tradeoff_enabled: bool,
    pub tradeoff_fractions: Vec<f64>,
    pub tradeoff_profile: GbrtProfile,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.9,
            shap_ref_size: 450,
            split_seed: 42,
            forest: ForestParams::default(),
            forest_seed: 7,
            valuation_k: 5,
            keep_policy: KeepPolicy::TopFraction { fraction: 0.9 },
            admit_percentile: 20.0,
            profile: GbrtProfile::Paper,
            gbrt: GbrtParams::paper(),
            screening_enabled: true,
            repetitions: 100,
            warmup: 5,
            cv_enabled: true,
            cv_folds: 5,
            cv_seed: 11,
            master_secret: DEFAULT_SECRET.to_vec(),
            synth_n: 9568,
            synth_seed: 2024,
            tradeoff_enabled: true,
            tradeoff_fractions: vec![0.1, 0.2, 0.5, 0.8, 1.0],
            tradeoff_profile: GbrtProfile::Fast,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

impl PipelineConfig {
    /// Config with a parameter profile applied to the regressor.
    pub fn with_profile(profile: GbrtProfile) -> Self {
        let mut c = Self::default();
        c.set_profile(profile);
        c
    }

    pub fn set_profile(&mut self, profile: GbrtProfile) {
        let p = GbrtParams::profile(profile);
        self.profile = profile;
        self.gbrt.n_trees = p.n_trees;
        self.gbrt.learning_rate = p.learning_rate;
    }

    /// Sets one key. Unknown keys and malformed values are config errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let value = value.trim();
        match key {
            "train_fraction" => self.train_fraction = parse(key, value)?,
            "shap_ref_size" => self.shap_ref_size = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            "iforest.trees" => self.forest.n_trees = parse(key, value)?,
            "iforest.subsample" => self.forest.subsample_size = parse(key, value)?,
            "iforest.contamination" => self.forest.contamination = parse(key, value)?,
            "iforest.seed" => self.forest_seed = parse(key, value)?,
            "valuation.k" => self.valuation_k = parse(key, value)?,
            "valuation.keep_policy" => {
                self.keep_policy = match value {
                    "positive" => KeepPolicy::Positive,
                    "top_fraction" => match self.keep_policy {
                        KeepPolicy::TopFraction { .. } => self.keep_policy,
                        KeepPolicy::Positive => KeepPolicy::TopFraction { fraction: 0.9 },
                    },
                    _ => {
                        return Err(Error::Config(format!(
                            "`{key}`: expected `positive` or `top_fraction`, got `{value}`"
                        )))
                    }
                }
            }
            "valuation.top_fraction" => {
                self.keep_policy = KeepPolicy::TopFraction {
                    fraction: parse(key, value)?,
                }
            }
            "valuation.admit_percentile" => self.admit_percentile = parse(key, value)?,
            "gbrt.profile" => self.set_profile(value.parse().map_err(|e: Error| Error::Config(e.to_string()))?),
            "gbrt.trees" => self.gbrt.n_trees = parse(key, value)?,
            "gbrt.lr" => self.gbrt.learning_rate = parse(key, value)?,
            "gbrt.depth" => self.gbrt.max_depth = parse(key, value)?,
            "gbrt.min_leaf" => self.gbrt.min_samples_leaf = parse(key, value)?,
            "gbrt.seed" => self.gbrt.seed = parse(key, value)?,
            "screening.enabled" => self.screening_enabled = parse_bool(key, value)?,
            "bench.repetitions" => self.repetitions = parse(key, value)?,
            "bench.warmup" => self.warmup = parse(key, value)?,
            "cv.enabled" => self.cv_enabled = parse_bool(key, value)?,
            "cv.folds" => self.cv_folds = parse(key, value)?,
            "cv.seed" => self.cv_seed = parse(key, value)?,
            "sse.master_secret" => {
                self.master_secret = hex::decode(value)
                    .map_err(|e| Error::Config(format!("`{key}`: not hex ({e})")))?
            }
            "synth.n" => self.synth_n = parse(key, value)?,
            "synth.seed" => self.synth_seed = parse(key, value)?,
            "tradeoff.enabled" => self.tradeoff_enabled = parse_bool(key, value)?,
            "tradeoff.fractions" => {
                self.tradeoff_fractions = value
                    .split(',')
                    .map(|f| parse(key, f.trim()))
                    .collect::<Result<_>>()?
            }
            "tradeoff.profile" => {
                self.tradeoff_profile = value.parse().map_err(|e: Error| Error::Config(e.to_string()))?
            }
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` strings, profile first.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let pairs: Vec<(&str, &str)> = pairs.into_iter().collect();
        for (k, v) in pairs.iter().filter(|(k, _)| k.trim() == "gbrt.profile") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k.trim() != "gbrt.profile") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            pairs.push((k, v));
        }
        let mut c = Self::default();
        c.apply(pairs)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        line("gbrt.profile", self.profile.to_string());
        line("train_fraction", self.train_fraction.to_string());
        line("shap_ref_size", self.shap_ref_size.to_string());
        line("split_seed", self.split_seed.to_string());
        line("iforest.trees", self.forest.n_trees.to_string());
        line("iforest.subsample", self.forest.subsample_size.to_string());
        line("iforest.contamination", self.forest.contamination.to_string());
        line("iforest.seed", self.forest_seed.to_string());
        line("valuation.k", self.valuation_k.to_string());
        match self.keep_policy {
            KeepPolicy::Positive => line("valuation.keep_policy", "positive".into()),
            KeepPolicy::TopFraction { fraction } => {
                line("valuation.keep_policy", "top_fraction".into());
                line("valuation.top_fraction", fraction.to_string());
            }
        }
        line("valuation.admit_percentile", self.admit_percentile.to_string());
        line("gbrt.trees", self.gbrt.n_trees.to_string());
        line("gbrt.lr", self.gbrt.learning_rate.to_string());
        line("gbrt.depth", self.gbrt.max_depth.to_string());
        line("gbrt.min_leaf", self.gbrt.min_samples_leaf.to_string());
        line("gbrt.seed", self.gbrt.seed.to_string());
        line("screening.enabled", self.screening_enabled.to_string());
        line("bench.repetitions", self.repetitions.to_string());
        line("bench.warmup", self.warmup.to_string());
        line("cv.enabled", self.cv_enabled.to_string());
        line("cv.folds", self.cv_folds.to_string());
        line("cv.seed", self.cv_seed.to_string());
        line("sse.master_secret", hex::encode(&self.master_secret));
        line("synth.n", self.synth_n.to_string());
        line("synth.seed", self.synth_seed.to_string());
        line("tradeoff.enabled", self.tradeoff_enabled.to_string());
        let fractions: Vec<String> = self.tradeoff_fractions.iter().map(f64::to_string).collect();
        line("tradeoff.fractions", fractions.join(","));
        line("tradeoff.profile", self.tradeoff_profile.to_string());
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_kv_string())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        if self.shap_ref_size == 0 {
            return bad("shap_ref_size must be positive".into());
        }
        self.forest.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.valuation_k == 0 {
            return bad("valuation.k must be at least 1".into());
        }
        if let KeepPolicy::TopFraction { fraction } = self.keep_policy {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return bad(format!("valuation.top_fraction {fraction} outside (0, 1]"));
            }
        }
        if !(0.0..=100.0).contains(&self.admit_percentile) {
            return bad(format!("valuation.admit_percentile {} outside [0, 100]", self.admit_percentile));
        }
        self.gbrt.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.repetitions == 0 {
            return bad("bench.repetitions must be positive".into());
        }
        if self.cv_folds < 2 {
            return bad("cv.folds must be at least 2".into());
        }
        if self.master_secret.len() < MIN_MASTER_SECRET {
            return bad(format!("sse.master_secret must be at least {MIN_MASTER_SECRET} bytes"));
        }
        if self.synth_n == 0 {
            return bad("synth.n must be positive".into());
        }
        if let Some(f) = self.tradeoff_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return bad(format!("tradeoff fraction {f} outside (0, 1]"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        assert_eq!(c.train_fraction, 0.9);
        assert_eq!(c.shap_ref_size, 450);
        assert_eq!(c.forest, ForestParams::default());
        assert_eq!(c.valuation_k, 5);
        assert_eq!(c.admit_percentile, 20.0);
        assert_eq!(c.gbrt, GbrtParams::paper());
        assert_eq!(c.repetitions, 100);
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = PipelineConfig::with_profile(GbrtProfile::Fast);
        c.set("valuation.top_fraction", "0.75").unwrap();
        c.set("sse.master_secret", "00112233445566778899aabbccddeeff").unwrap();
        c.set("tradeoff.fractions", "0.3, 1").unwrap();
        c.set("screening.enabled", "off").unwrap();
        let back = PipelineConfig::parse(&c.to_kv_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn explicit_keys_override_the_profile() {
        let c = PipelineConfig::parse("gbrt.trees = 10\n# comment\n\ngbrt.profile = fast\n").unwrap();
        assert_eq!(c.gbrt.n_trees, 10);
        assert_eq!(c.gbrt.learning_rate, 0.045);
        assert_eq!(c.profile, GbrtProfile::Fast);
    }

    #[test]
    fn keep_policy_keys() {
        let c = PipelineConfig::parse("valuation.keep_policy = positive").unwrap();
        assert_eq!(c.keep_policy, KeepPolicy::Positive);
        let c = PipelineConfig::parse("valuation.keep_policy = positive\nvaluation.top_fraction = 0.5").unwrap();
        assert_eq!(c.keep_policy, KeepPolicy::TopFraction { fraction: 0.5 });
    }

    #[test]
    fn rejects_bad_input() {
        for text in [
            "nonsense = 1",
            "train_fraction = abc",
            "no equals sign",
            "train_fraction = 1.5",
            "valuation.top_fraction = 0",
            "sse.master_secret = 0011",
            "sse.master_secret = zz",
            "gbrt.profile = turbo",
            "tradeoff.fractions = 0.5,2",
            "screening.enabled = maybe",
            "iforest.contamination = 0",
        ] {
            assert!(matches!(PipelineConfig::parse(text), Err(Error::Config(_))), "{text}");
        }
    }
}

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::data::{SamplerConfig, Stage};
use crate::model::{HeadSwitches, ModelConfig};

/// Everything a training run reads. Serialized as flat `key=value` lines
/// whose keys are exactly the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Weight of the orthogonality loss inside the meta loss.
    pub alpha: f64,
    /// Initial value of every channel of the excite scale.
    pub lambda0: f64,
    pub enable_meta: bool,
    pub enable_metric: bool,
    pub enable_se: bool,
    pub enable_oc: bool,
    pub oc_normalized: bool,
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    pub rng_seed: u64,
    pub hidden_dim: usize,
    pub feature_dim: usize,
    pub scorer_hidden: usize,
    pub temperature: f64,
    /// Jittered positive proposals per ground-truth box.
    pub jitter_per_object: usize,
    /// Uniformly random proposals per query scene.
    pub background_per_scene: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl TrainConfig {
    pub fn base() -> Self {
        Self {
            stage: Stage::Base,
            epochs: 20,
            episodes_per_epoch: 90,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            alpha: 0.5,
            lambda0: 2.0,
            enable_meta: true,
            enable_metric: false,
            enable_se: false,
            enable_oc: true,
            oc_normalized: true,
            n_way: 4,
            k_shot: 5,
            n_query: 8,
            rng_seed: 0,
            hidden_dim: 32,
            feature_dim: 16,
            scorer_hidden: 32,
            temperature: 20.0,
            jitter_per_object: 2,
            background_per_scene: 6,
        }
    }

    pub fn adaptation() -> Self {
        Self {
            stage: Stage::Adaptation,
            epochs: 12,
            enable_metric: true,
            enable_se: true,
            n_way: 5,
            k_shot: 10,
            n_query: 12,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |key: &str, message: &str| {
            Err(TrainError::Config {
                key: key.into(),
                message: message.into(),
            })
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate", "must be a positive finite number");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.episodes_per_epoch == 0 {
            return bad("episodes_per_epoch", "must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad("adam_beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta2", "must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be a finite non-negative number");
        }
        if !self.lambda0.is_finite() {
            return bad("lambda0", "must be finite");
        }
        if self.n_way == 0 {
            return bad("n_way", "must be at least 1");
        }
        if self.k_shot == 0 {
            return bad("k_shot", "must be at least 1");
        }
        if self.n_query <= self.k_shot {
            return bad("n_query", "must exceed k_shot");
        }
        if !(self.temperature > 0.0) {
            return bad("temperature", "must be positive");
        }
        if self.hidden_dim == 0 || self.feature_dim == 0 || self.scorer_hidden == 0 {
            return bad("feature_dim", "layer widths must be positive");
        }
        if self.stage == Stage::Adaptation && !self.enable_meta && !self.enable_metric {
            return bad("enable_metric", "at least one of the meta branch and the metric head must be on");
        }
        Ok(())
    }

    /// The switches actually in force. The base stage always runs the meta
    /// branch and never the metric head or split-and-excite.
    pub fn switches(&self) -> HeadSwitches {
        match self.stage {
            Stage::Base => HeadSwitches {
                oc_normalized: self.oc_normalized,
                ..HeadSwitches::base_stage(self.enable_oc, self.alpha)
            },
            Stage::Adaptation => HeadSwitches {
                enable_meta: self.enable_meta,
                enable_metric: self.enable_metric,
                enable_se: self.enable_se && self.enable_meta,
                enable_oc: self.enable_oc && self.enable_meta,
                alpha: self.alpha,
                oc_normalized: self.oc_normalized,
            },
        }
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            n_way: self.n_way,
            k_shot: self.k_shot,
            n_query: self.n_query,
            ..SamplerConfig::default()
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            feature_dim: self.feature_dim,
            scorer_hidden: self.scorer_hidden,
            temperature: self.temperature,
        }
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("stage", self.stage.as_str().to_string()),
            ("epochs", self.epochs.to_string()),
            ("episodes_per_epoch", self.episodes_per_epoch.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("alpha", self.alpha.to_string()),
            ("lambda0", self.lambda0.to_string()),
            ("enable_meta", self.enable_meta.to_string()),
            ("enable_metric", self.enable_metric.to_string()),
            ("enable_se", self.enable_se.to_string()),
            ("enable_oc", self.enable_oc.to_string()),
            ("oc_normalized", self.oc_normalized.to_string()),
            ("n_way", self.n_way.to_string()),
            ("k_shot", self.k_shot.to_string()),
            ("n_query", self.n_query.to_string()),
            ("rng_seed", self.rng_seed.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("scorer_hidden", self.scorer_hidden.to_string()),
            ("temperature", self.temperature.to_string()),
            ("jitter_per_object", self.jitter_per_object.to_string()),
            ("background_per_scene", self.background_per_scene.to_string()),
        ]
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
            value.trim().parse().map_err(|_| TrainError::Config {
                key: key.into(),
                message: format!("cannot parse {value:?}"),
            })
        }
        let v = value.trim();
        match key {
            "stage" => {
                self.stage = v.parse().map_err(|message| TrainError::Config {
                    key: key.into(),
                    message,
                })?
            }
            "epochs" => self.epochs = parse(key, v)?,
            "episodes_per_epoch" => self.episodes_per_epoch = parse(key, v)?,
            "learning_rate" => self.learning_rate = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "lambda0" => self.lambda0 = parse(key, v)?,
            "enable_meta" => self.enable_meta = parse(key, v)?,
            "enable_metric" => self.enable_metric = parse(key, v)?,
            "enable_se" => self.enable_se = parse(key, v)?,
            "enable_oc" => self.enable_oc = parse(key, v)?,
            "oc_normalized" => self.oc_normalized = parse(key, v)?,
            "n_way" | "N" => self.n_way = parse(key, v)?,
            "k_shot" | "K" => self.k_shot = parse(key, v)?,
            "n_query" | "Q" => self.n_query = parse(key, v)?,
            "rng_seed" => self.rng_seed = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "scorer_hidden" => self.scorer_hidden = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "jitter_per_object" => self.jitter_per_object = parse(key, v)?,
            "background_per_scene" => self.background_per_scene = parse(key, v)?,
            _ => {
                return Err(TrainError::Config {
                    key: key.into(),
                    message: "unknown key".into(),
                })
            }
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults of the stage named by the
    /// `stage` key (base when absent). Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, TrainError> {
        let mut pairs = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TrainError::Config {
                key: line.to_string(),
                message: format!("line {} is not key=value", n + 1),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match pairs.iter().find(|(k, _)| k == "stage") {
            Some((_, v)) if v == Stage::Adaptation.as_str() || v == "adapt" => Self::adaptation(),
            Some((k, v)) if v != Stage::Base.as_str() => {
                return Err(TrainError::Config {
                    key: k.clone(),
                    message: format!("unknown stage {v:?}"),
                })
            }
            _ => Self::base(),
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }
}

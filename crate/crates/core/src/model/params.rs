use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::rng::{self, normal_tensor};
use crate::tensor::{Tape, Tensor, Var};

pub const BACKBONE_W1: &str = "backbone/w1";
pub const BACKBONE_B1: &str = "backbone/b1";
pub const BACKBONE_W2: &str = "backbone/w2";
pub const BACKBONE_B2: &str = "backbone/b2";
pub const SCORER_W1: &str = "scorer/w1";
pub const SCORER_B1: &str = "scorer/b1";
pub const SCORER_W2: &str = "scorer/w2";
pub const SCORER_B2: &str = "scorer/b2";
pub const BG_W: &str = "bg/w";
pub const BG_B: &str = "bg/b";
pub const REG_W: &str = "reg/w";
pub const REG_B: &str = "reg/b";
/// Per-channel excite scale λ; exists only after adaptation starts.
pub const SE_LAMBDA: &str = "se/lambda";
/// Metric-head class directions, one row per foreground class plus background.
pub const METRIC_DIRECTIONS: &str = "metric/directions";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Width of a flattened region input (patch pixels or ingested feature).
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Feature width `d`.
    pub feature_dim: usize,
    pub scorer_hidden: usize,
    /// Cosine-logit scale of the metric head.
    pub temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 36,
            hidden_dim: 32,
            feature_dim: 16,
            scorer_hidden: 32,
            temperature: 20.0,
        }
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

fn he(fan_in: usize, shape: &[usize], rng: &mut rng::DetRng) -> Tensor {
    normal_tensor(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

impl ModelParams {
    /// Base-stage parameters. Hidden biases start at 0.1 so an empty region
    /// does not map to the zero feature.
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut rng = rng::derived(seed, "model-init");
        let (p, h, d, s) = (
            config.input_dim,
            config.hidden_dim,
            config.feature_dim,
            config.scorer_hidden,
        );
        let mut t = BTreeMap::new();
        t.insert(BACKBONE_W1.into(), he(p, &[p, h], &mut rng));
        t.insert(BACKBONE_B1.into(), Tensor::full(&[h], 0.1));
        t.insert(BACKBONE_W2.into(), he(h, &[h, d], &mut rng));
        t.insert(BACKBONE_B2.into(), Tensor::zeros(&[d]));
        t.insert(SCORER_W1.into(), he(3 * d, &[3 * d, s], &mut rng));
        t.insert(SCORER_B1.into(), Tensor::full(&[s], 0.1));
        t.insert(SCORER_W2.into(), he(s, &[s, 1], &mut rng));
        t.insert(SCORER_B2.into(), Tensor::zeros(&[1]));
        t.insert(BG_W.into(), he(d, &[d, 1], &mut rng));
        t.insert(BG_B.into(), Tensor::zeros(&[1]));
        t.insert(REG_W.into(), normal_tensor(&[d, 4], 0.01, &mut rng));
        t.insert(REG_B.into(), Tensor::zeros(&[4]));
        Self { config, tensors: t }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn has_adaptation_params(&self) -> bool {
        self.tensors.contains_key(SE_LAMBDA) && self.tensors.contains_key(METRIC_DIRECTIONS)
    }

    /// Adds λ ≡ `lambda0` and the given metric directions `[(C+1)×d]`.
    pub fn add_adaptation_params(&mut self, lambda0: f64, directions: Tensor) {
        let d = self.config.feature_dim;
        assert_eq!(directions.dims2().1, d, "direction width must equal feature width");
        self.tensors.insert(SE_LAMBDA.into(), Tensor::full(&[d], lambda0));
        self.tensors.insert(METRIC_DIRECTIONS.into(), directions);
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.numel()).sum()
    }

    /// Registers every tensor on `tape`, as a trainable leaf where
    /// `trainable` says so and as a constant otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: &Trainable) -> Bound<'t> {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), trainable.allows(name))))
            .collect();
        Bound {
            config: self.config,
            vars,
        }
    }
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    All,
    Nothing,
    /// Only names starting with one of these prefixes.
    Prefixes(Vec<String>),
}

impl Trainable {
    pub fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::All => true,
            Trainable::Nothing => false,
            Trainable::Prefixes(p) => p.iter().any(|x| name.starts_with(x.as_str())),
        }
    }
}

/// Parameters registered on one tape.
pub struct Bound<'t> {
    pub config: ModelConfig,
    pub vars: BTreeMap<String, Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn var(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var<'t>> {
        self.vars.get(name).copied()
    }

    /// Gradients after backward, for trainable parameters that received one.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(n, v)| v.grad().map(|g| (n.clone(), g)))
            .collect()
    }
}

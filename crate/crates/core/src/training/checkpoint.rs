use std::path::Path;

use super::{TrainConfig, TrainError};
use crate::arrays::ArrayFile;
use crate::data::{ClassSplit, Stage};
use crate::model::params::BACKBONE_W1;
use crate::model::ModelParams;
use crate::tensor::Tensor;

const PARAM_PREFIX: &str = "param/";
const BANK: &str = "bank";
const STAGE: &str = "stage";
const EPOCH: &str = "epoch";
const CONFIG: &str = "text/config";
const SPLIT: &str = "text/split";

/// Trained parameters plus what is needed to run and audit them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Epochs completed in `stage`.
    pub epoch: usize,
    pub config: TrainConfig,
    pub split: ClassSplit,
    pub params: ModelParams,
    /// Support vector per class used at detection time: `[C'×d]`, covering the
    /// base classes after base training and every class after adaptation.
    pub bank: Tensor,
}

fn text_tensor(s: &str) -> Tensor {
    Tensor::vector(s.bytes().map(f64::from).collect())
}

fn tensor_text(t: &Tensor, what: &str) -> Result<String, TrainError> {
    let bytes: Vec<u8> = t.data().iter().map(|&v| v as u8).collect();
    String::from_utf8(bytes).map_err(|_| TrainError::Checkpoint(format!("{what} is not UTF-8")))
}

impl Checkpoint {
    pub fn to_arrays(&self) -> ArrayFile {
        let mut f = ArrayFile::new();
        let stage = match self.stage {
            Stage::Base => 0.0,
            Stage::Adaptation => 1.0,
        };
        f.push(STAGE, Tensor::scalar(stage));
        f.push(EPOCH, Tensor::scalar(self.epoch as f64));
        f.push(CONFIG, text_tensor(&self.config.to_kv()));
        f.push(SPLIT, text_tensor(&serde_json::to_string(&self.split).expect("split serializes")));
        for (name, t) in &self.params.tensors {
            f.push(format!("{PARAM_PREFIX}{name}"), t.clone());
        }
        f.push(BANK, self.bank.clone());
        f
    }

    pub fn from_arrays(f: &ArrayFile) -> Result<Self, TrainError> {
        let get = |name: &str| {
            f.get(name)
                .ok_or_else(|| TrainError::Checkpoint(format!("missing array {name:?}")))
        };
        let stage = match get(STAGE)?.item() {
            0.0 => Stage::Base,
            1.0 => Stage::Adaptation,
            v => return Err(TrainError::Checkpoint(format!("unknown stage tag {v}"))),
        };
        let epoch = get(EPOCH)?.item() as usize;
        let config = TrainConfig::parse(&tensor_text(get(CONFIG)?, "config")?)?;
        let split: ClassSplit = serde_json::from_str(&tensor_text(get(SPLIT)?, "split")?)
            .map_err(|e| TrainError::Checkpoint(format!("split: {e}")))?;
        let tensors: std::collections::BTreeMap<String, Tensor> = f
            .arrays
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(PARAM_PREFIX).map(|n| (n.to_string(), t.clone())))
            .collect();
        let input_dim = tensors
            .get(BACKBONE_W1)
            .ok_or_else(|| TrainError::Checkpoint("missing backbone weights".into()))?
            .dims2()
            .0;
        Ok(Self {
            stage,
            epoch,
            params: ModelParams {
                config: config.model_config(input_dim),
                tensors,
            },
            config,
            split,
            bank: get(BANK)?.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        self.to_arrays().write(path).map_err(TrainError::from)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_arrays(&ArrayFile::read(path)?)
    }
}

use serde::{Deserialize, Serialize};

use crate::tensor::{Result, Tensor, TensorError, Var};

use super::heads::{
    classify, encode, meta_combine, meta_loss, metric_logits, orthogonality_loss, regress_box,
    split_and_excite, support_bank, ClassAttentiveBank,
};
use super::params::{self, Bound};

/// Which parts of the head are active, plus the orthogonality weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSwitches {
    /// Meta branch: support bank, aggregation and the shared scorer.
    pub enable_meta: bool,
    pub enable_metric: bool,
    pub enable_se: bool,
    pub enable_oc: bool,
    pub alpha: f64,
    /// Average each pair group of the orthogonality loss instead of summing it.
    pub oc_normalized: bool,
}

impl HeadSwitches {
    pub fn base_stage(enable_oc: bool, alpha: f64) -> Self {
        Self {
            enable_meta: true,
            enable_metric: false,
            enable_se: false,
            enable_oc,
            alpha,
            oc_normalized: true,
        }
    }

    pub fn full(alpha: f64) -> Self {
        Self {
            enable_meta: true,
            enable_metric: true,
            enable_se: true,
            enable_oc: true,
            alpha,
            oc_normalized: true,
        }
    }
}

/// Inputs of one episode, already pooled to region vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeBatch {
    /// Episode classes, ascending.
    pub classes: Vec<usize>,
    /// Base-class count of the split; classes at or above it are novel.
    pub num_base: usize,
    /// `[M×p]` support regions.
    pub support_inputs: Tensor,
    pub support_labels: Vec<usize>,
    /// `[R×p]` query regions.
    pub query_inputs: Tensor,
    /// Per query region, an index into `classes`, or `classes.len()` for background.
    pub query_targets: Vec<usize>,
    /// Query rows with a foreground target, and their `[P×4]` box deltas.
    pub reg_rows: Vec<usize>,
    pub reg_targets: Option<Tensor>,
}

/// Every loss term of one episode. Disabled terms are constant zeros.
#[derive(Clone, Copy)]
pub struct EpisodeLosses<'t> {
    pub ce: Var<'t>,
    pub oc: Var<'t>,
    pub meta: Var<'t>,
    pub metric: Var<'t>,
    pub reg: Var<'t>,
    pub total: Var<'t>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub ce: f64,
    pub oc: f64,
    pub meta: f64,
    pub metric: f64,
    pub reg: f64,
    pub total: f64,
}

impl EpisodeLosses<'_> {
    pub fn values(&self) -> LossValues {
        LossValues {
            ce: self.ce.item(),
            oc: self.oc.item(),
            meta: self.meta.item(),
            metric: self.metric.item(),
            reg: self.reg.item(),
            total: self.total.item(),
        }
    }
}

fn lambda_for<'t>(b: &Bound<'t>, sw: &HeadSwitches) -> Result<Option<Var<'t>>> {
    if !sw.enable_se {
        return Ok(None);
    }
    b.try_var(params::SE_LAMBDA)
        .map(Some)
        .ok_or_else(|| TensorError::Contract("split-and-excite is enabled but the model has no excite scale".into()))
}

/// Metric-head rows for `classes` followed by the background row.
pub fn metric_rows(b: &Bound<'_>, classes: &[usize]) -> Result<Vec<usize>> {
    let dirs = b
        .try_var(params::METRIC_DIRECTIONS)
        .ok_or_else(|| TensorError::Contract("metric head is enabled but the model has no class directions".into()))?;
    let bg = dirs.shape()[0] - 1;
    let mut rows = classes.to_vec();
    rows.push(bg);
    Ok(rows)
}

/// Builds every loss term for one episode:
/// `total = (ce + α·oc) + metric + reg`, with disabled terms at zero.
pub fn episode_losses<'t>(b: &Bound<'t>, batch: &EpisodeBatch, sw: &HeadSwitches) -> Result<EpisodeLosses<'t>> {
    let tape = b.var(params::BACKBONE_W1).tape();
    let zero = || tape.constant(Tensor::scalar(0.0));
    let n = batch.classes.len();
    if let Some(&bad) = batch.query_targets.iter().find(|&&t| t > n) {
        return Err(TensorError::Index {
            op: "episode targets",
            index: bad,
            size: n + 1,
        });
    }
    let query = encode(b, tape.constant(batch.query_inputs.clone()))?;

    let (ce, oc, meta) = if sw.enable_meta {
        let support = encode(b, tape.constant(batch.support_inputs.clone()))?;
        let bank = support_bank(support, &batch.support_labels, &batch.classes, batch.num_base)?;
        let excited = split_and_excite(&bank, lambda_for(b, sw)?)?;
        let logits = classify(b, query, meta_combine(query, &bank, excited)?, n)?;
        let ce = logits.cross_entropy(&batch.query_targets)?;
        let oc = if sw.enable_oc {
            let labels: Vec<Option<usize>> = batch.support_labels.iter().map(|&c| Some(c)).collect();
            orthogonality_loss(support, &labels, sw.oc_normalized)?
        } else {
            zero()
        };
        let meta = meta_loss(ce, oc, if sw.enable_oc { sw.alpha } else { 0.0 })?;
        (ce, oc, meta)
    } else {
        (zero(), zero(), zero())
    };

    let metric = if sw.enable_metric {
        let rows = metric_rows(b, &batch.classes)?;
        metric_logits(b, query, &rows)?.cross_entropy(&batch.query_targets)?
    } else {
        zero()
    };

    let reg = match &batch.reg_targets {
        Some(targets) if !batch.reg_rows.is_empty() => {
            let deltas = regress_box(b, query.gather_rows(&batch.reg_rows)?)?;
            deltas
                .smooth_l1(tape.constant(targets.clone()))?
                .scale(1.0 / batch.reg_rows.len() as f64)
        }
        _ => zero(),
    };
    let total = meta.add(metric)?.add(reg)?;
    Ok(EpisodeLosses {
        ce,
        oc,
        meta,
        metric,
        reg,
        total,
    })
}

/// Detection-time outputs for a batch of regions.
pub struct RegionScores<'t> {
    /// `[R×(C+1)]`, background last.
    pub logits: Var<'t>,
    /// `[R×4]`.
    pub deltas: Var<'t>,
}

/// Scores regions against every class of the split.
///
/// `bank` holds one support vector per class (`[C×d]`). The logits of the
/// enabled heads are summed, so with both heads on the prediction is the
/// product of their softmax distributions up to normalization.
pub fn score_regions<'t>(
    b: &Bound<'t>,
    bank: &Tensor,
    num_base: usize,
    inputs: &Tensor,
    sw: &HeadSwitches,
) -> Result<RegionScores<'t>> {
    let tape = b.var(params::BACKBONE_W1).tape();
    let query = encode(b, tape.constant(inputs.clone()))?;
    let num_classes = bank.dims2().0;
    let classes: Vec<usize> = (0..num_classes).collect();
    let mut logits: Option<Var<'t>> = None;
    if sw.enable_meta || !sw.enable_metric {
        let bank = ClassAttentiveBank {
            vectors: tape.constant(bank.clone()),
            base_count: num_base.min(num_classes),
            novel_count: num_classes - num_base.min(num_classes),
            classes: classes.clone(),
        };
        let excited = split_and_excite(&bank, lambda_for(b, sw)?)?;
        logits = Some(classify(b, query, meta_combine(query, &bank, excited)?, num_classes)?);
    }
    if sw.enable_metric {
        let m = metric_logits(b, query, &metric_rows(b, &classes)?)?;
        logits = Some(match logits {
            Some(l) => l.add(m)?,
            None => m,
        });
    }
    Ok(RegionScores {
        logits: logits.expect("at least one head scores"),
        deltas: regress_box(b, query)?,
    })
}

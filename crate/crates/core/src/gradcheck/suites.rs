use std::fmt::Write as _;
use std::time::{Duration, Instant};

use super::{check, GradCheck, FD_STEP, MAX_REL_ERR};
use crate::model::{episode_losses, Bound, EpisodeBatch, EpisodeLosses, HeadSwitches, ModelConfig, ModelParams};
use crate::rng::{self, normal_tensor};
use crate::tensor::{Backward, Result, Tape, Tensor, Var};

/// Width of the toy model's feature space.
pub const TOY_FEATURE_DIM: usize = 4;
const TOY_INPUT_DIM: usize = 5;

/// One named finite-difference check, run once per seed.
pub struct GradSuite {
    pub name: &'static str,
    pub run: fn(u64) -> Result<GradCheck>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub seeds: usize,
    pub check: GradCheck,
}

impl SuiteOutcome {
    pub fn passed(&self) -> bool {
        self.check.passes(MAX_REL_ERR)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub outcomes: Vec<SuiteOutcome>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.outcomes.iter().all(SuiteOutcome::passed)
    }

    /// Fixed-width pass/fail table, one row per suite.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>6} {:>8} {:>14}  status\n", "loss", "seeds", "params", "max_rel_err");
        for o in &self.outcomes {
            let _ = writeln!(
                s,
                "{:<10} {:>6} {:>8} {:>14.3e}  {}",
                o.name,
                o.seeds,
                o.check.checked / o.seeds.max(1),
                o.check.max_rel_err,
                if o.passed() { "pass" } else { "FAIL" }
            );
        }
        let _ = writeln!(s, "elapsed {:.2}s", self.elapsed.as_secs_f64());
        s
    }
}

/// The 2-class (one base, one novel) toy model with `d = 4`, adaptation
/// parameters included and λ perturbed away from a constant.
pub fn toy_params(seed: u64) -> ModelParams {
    let cfg = ModelConfig {
        input_dim: TOY_INPUT_DIM,
        hidden_dim: 6,
        feature_dim: TOY_FEATURE_DIM,
        scorer_hidden: 5,
        temperature: 20.0,
    };
    let mut p = ModelParams::init(cfg, seed);
    let mut r = rng::derived(seed, "toy-adapt");
    p.add_adaptation_params(2.0, normal_tensor(&[3, TOY_FEATURE_DIM], 1.0, &mut r));
    let lambda = p.tensors.get_mut(crate::model::params::SE_LAMBDA).expect("just added");
    for (v, n) in lambda.data_mut().iter_mut().zip(normal_tensor(&[TOY_FEATURE_DIM], 0.3, &mut r).data()) {
        *v += n;
    }
    // A region whose hidden units are all inactive would otherwise encode to
    // exactly zero, where cosine has a kink.
    p.tensors.insert(
        crate::model::params::BACKBONE_B2.into(),
        normal_tensor(&[TOY_FEATURE_DIM], 0.5, &mut r),
    );
    // Regressor weights start near zero; widen them so its gradients are not all tiny.
    p.tensors.insert(
        crate::model::params::REG_W.into(),
        normal_tensor(&[TOY_FEATURE_DIM, 4], 0.5, &mut r),
    );
    p
}

/// Two support examples per class, four query regions covering both classes
/// and background.
pub fn toy_batch(seed: u64) -> EpisodeBatch {
    let mut r = rng::derived(seed, "toy-batch");
    EpisodeBatch {
        classes: vec![0, 1],
        num_base: 1,
        support_inputs: normal_tensor(&[4, TOY_INPUT_DIM], 1.0, &mut r),
        support_labels: vec![0, 0, 1, 1],
        query_inputs: normal_tensor(&[4, TOY_INPUT_DIM], 1.0, &mut r),
        query_targets: vec![0, 1, 2, 1],
        reg_rows: vec![0, 1, 3],
        reg_targets: Some(normal_tensor(&[3, 4], 0.5, &mut r)),
    }
}

fn check_toy_term(seed: u64, pick: for<'t> fn(&EpisodeLosses<'t>) -> Var<'t>) -> Result<GradCheck> {
    let params = toy_params(seed);
    let batch = toy_batch(seed);
    let names: Vec<String> = params.tensors.keys().cloned().collect();
    let inputs: Vec<Tensor> = params.tensors.values().cloned().collect();
    let sw = HeadSwitches::full(0.5);
    check(&inputs, FD_STEP, |_tape, vars| {
        let b = Bound {
            config: params.config,
            vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
        };
        Ok(pick(&episode_losses(&b, &batch, &sw)?))
    })
}

/// The orthogonality, meta, metric, regression and total losses of the toy model.
pub fn standard_suites() -> Vec<GradSuite> {
    vec![
        GradSuite {
            name: "L_oc",
            run: |s| check_toy_term(s, |l| l.oc),
        },
        GradSuite {
            name: "L_meta",
            run: |s| check_toy_term(s, |l| l.meta),
        },
        GradSuite {
            name: "L_metric",
            run: |s| check_toy_term(s, |l| l.metric),
        },
        GradSuite {
            name: "L_reg",
            run: |s| check_toy_term(s, |l| l.reg),
        },
        GradSuite {
            name: "total",
            run: |s| check_toy_term(s, |l| l.total),
        },
    ]
}

/// Cube with the derivative of a square; exists to prove the harness fails.
struct WrongCube;

impl Backward for WrongCube {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
        let g = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(x, g)| 2.0 * x * g)
            .collect();
        vec![Tensor::new(inputs[0].shape().to_vec(), g).expect("same shape")]
    }
}

fn wrong_cube<'t>(tape: &'t Tape, x: Var<'t>) -> Var<'t> {
    let out = x.value().map(|v| v * v * v);
    tape.custom(&[x], out, Box::new(WrongCube))
}

/// A suite whose backward rule is deliberately wrong.
pub fn corrupted_suite() -> GradSuite {
    GradSuite {
        name: "corrupted",
        run: |seed| {
            let mut r = rng::derived(seed, "corrupted");
            let x = normal_tensor(&[5], 1.0, &mut r);
            check(&[x], FD_STEP, |tape, v| Ok(wrong_cube(tape, v[0]).sum()))
        },
    }
}

/// Runs every suite over seeds `0..seeds`, keeping the worst error per suite.
pub fn run_suites(suites: &[GradSuite], seeds: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut outcomes = Vec::with_capacity(suites.len());
    for suite in suites {
        let mut worst = GradCheck {
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            checked: 0,
        };
        for seed in 0..seeds {
            worst = worst.merge((suite.run)(seed)?);
        }
        outcomes.push(SuiteOutcome {
            name: suite.name,
            seeds: seeds as usize,
            check: worst,
        });
    }
    Ok(SuiteReport {
        outcomes,
        elapsed: start.elapsed(),
    })
}

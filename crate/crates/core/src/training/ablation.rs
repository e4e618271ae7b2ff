//! Component and hyperparameter ablations on the synthetic world.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::info;
use rayon::prelude::*;
use serde::Serialize;

use super::run::{adapt_few_shot, train_base};
use super::{Checkpoint, TrainConfig, TrainError};
use crate::eval::{detect, evaluate, EvalOptions, InferOptions};
use crate::synth::{build_world, generate_dataset, GeneratedData, World, WorldSpec};

/// One configuration of the adaptation-stage switches.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    pub name: String,
    pub enable_meta: bool,
    pub enable_metric: bool,
    pub enable_se: bool,
    pub enable_oc: bool,
    pub alpha: f64,
    pub lambda0: f64,
}

impl AblationCell {
    fn new(name: &str, meta: bool, metric: bool, se: bool, oc: bool, alpha: f64, lambda0: f64) -> Self {
        Self {
            name: name.into(),
            enable_meta: meta,
            enable_metric: metric,
            enable_se: se,
            enable_oc: oc,
            alpha,
            lambda0,
        }
    }

    /// The base stage always runs the meta branch; only the orthogonality
    /// switch and weight carry over from the cell.
    fn base_config(&self, template: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            enable_oc: self.enable_oc,
            alpha: self.alpha,
            rng_seed: seed,
            ..template.clone()
        }
    }

    fn adapt_config(&self, template: &TrainConfig, seed: u64) -> TrainConfig {
        TrainConfig {
            enable_meta: self.enable_meta,
            enable_metric: self.enable_metric,
            enable_se: self.enable_se,
            enable_oc: self.enable_oc,
            alpha: self.alpha,
            lambda0: self.lambda0,
            rng_seed: seed,
            ..template.clone()
        }
    }
}

/// Metric-only baseline, then the meta branch with SE and OC added singly and together.
pub fn component_grid(alpha: f64, lambda0: f64) -> Vec<AblationCell> {
    vec![
        AblationCell::new("metric-only", false, true, false, false, alpha, lambda0),
        AblationCell::new("meta+metric", true, true, false, false, alpha, lambda0),
        AblationCell::new("meta+metric+SE", true, true, true, false, alpha, lambda0),
        AblationCell::new("meta+metric+OC", true, true, false, true, alpha, lambda0),
        AblationCell::new("meta+metric+SE+OC", true, true, true, true, alpha, lambda0),
    ]
}

/// SE initial scale sweep with the orthogonality term off.
pub fn lambda_grid(values: &[f64]) -> Vec<AblationCell> {
    values
        .iter()
        .map(|&l| AblationCell::new(&format!("lambda0={l}"), true, true, true, false, 0.0, l))
        .collect()
}

/// Orthogonality weight sweep with SE on. `α = 0` is the no-OC baseline and
/// is added when missing.
pub fn alpha_grid(values: &[f64], lambda0: f64) -> Vec<AblationCell> {
    let mut v = values.to_vec();
    if !v.contains(&0.0) {
        v.insert(0, 0.0);
    }
    v.into_iter()
        .map(|a| AblationCell::new(&format!("alpha={a}"), true, true, true, a > 0.0, a, lambda0))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationSpec {
    /// `rng_seed` is replaced per seed.
    pub world: WorldSpec,
    pub scenes_per_class_base: usize,
    pub base: TrainConfig,
    /// `k_shot` sets the novel shot count of the generated data too.
    pub adapt: TrainConfig,
    pub infer: InferOptions,
    pub eval: EvalOptions,
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

impl AblationSpec {
    pub fn new(cells: Vec<AblationCell>, seeds: Vec<u64>) -> Self {
        Self {
            world: WorldSpec::default(),
            scenes_per_class_base: 40,
            base: TrainConfig::base(),
            adapt: TrainConfig::adaptation(),
            infer: InferOptions::default(),
            eval: EvalOptions::default(),
            seeds,
            cells,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub seed: u64,
    pub map_base: f64,
    pub map_novel: f64,
    /// Percent; NaN when nothing matched.
    pub mean_confusion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    /// Per cell, in grid order, the seed means.
    pub summary: Vec<AblationRow>,
}

impl AblationTable {
    pub fn summary_for(&self, cell: &str) -> Option<&AblationRow> {
        self.summary.iter().find(|r| r.cell.name == cell)
    }

    pub fn rows_for<'a>(&'a self, cell: &'a str) -> impl Iterator<Item = &'a AblationRow> + 'a {
        self.rows.iter().filter(move |r| r.cell.name == cell)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("cell,seed,meta,metric,SE,OC,alpha,lambda0,mAP_base,mAP_novel,mean_confusion\n");
        let yn = |b: bool| if b { "yes" } else { "no" };
        let mut line = |r: &AblationRow, seed: &str| {
            let c = &r.cell;
            let _ = writeln!(
                s,
                "{},{seed},{},{},{},{},{},{},{:.6},{:.6},{:.6}",
                c.name,
                yn(c.enable_meta),
                yn(c.enable_metric),
                yn(c.enable_se),
                yn(c.enable_oc),
                c.alpha,
                c.lambda0,
                r.map_base,
                r.map_novel,
                r.mean_confusion
            );
        };
        for r in &self.rows {
            line(r, &r.seed.to_string());
        }
        for r in &self.summary {
            line(r, "mean");
        }
        s
    }
}

struct SeedData {
    world: World,
    data: GeneratedData,
}

fn seed_data(spec: &AblationSpec, seed: u64) -> Result<SeedData, TrainError> {
    let world = build_world(&WorldSpec {
        rng_seed: seed,
        ..spec.world.clone()
    })
    .map_err(|e| TrainError::Invalid(e.to_string()))?;
    let data = generate_dataset(&world, spec.scenes_per_class_base, spec.adapt.k_shot, seed)
        .map_err(|e| TrainError::Invalid(e.to_string()))?;
    Ok(SeedData { world, data })
}

/// Base training depends on the seed, the orthogonality switch and its weight.
type BaseKey = (u64, bool, u64);

fn base_key(cell: &AblationCell, seed: u64) -> BaseKey {
    let alpha = if cell.enable_oc { cell.alpha.to_bits() } else { 0 };
    (seed, cell.enable_oc, alpha)
}

/// One cell for one seed, from an existing base checkpoint.
fn run_cell(spec: &AblationSpec, sd: &SeedData, base: &Checkpoint, cell: &AblationCell, seed: u64) -> Result<AblationRow, TrainError> {
    let cfg = cell.adapt_config(&spec.adapt, seed);
    let adapted = adapt_few_shot(base, &sd.data.train, &sd.world.split, &cfg)?;
    let dets = detect(&adapted.checkpoint, &sd.data.val, &InferOptions { seed, ..spec.infer })?;
    let report = evaluate(&dets, &sd.data.val, &sd.world.split, &spec.eval);
    info!("{} seed {seed}: novel {:.3}", cell.name, report.map_novel.unwrap_or(f64::NAN));
    Ok(AblationRow {
        cell: cell.clone(),
        seed,
        map_base: report.map_base.unwrap_or(f64::NAN),
        map_novel: report.map_novel.unwrap_or(f64::NAN),
        mean_confusion: report.mean_confusion.unwrap_or(f64::NAN),
    })
}

fn nan_mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.filter(|x| !x.is_nan()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Base-trains, adapts and evaluates every cell for every seed. Cells that
/// share a base configuration share one base training. Each (cell, seed)
/// result depends only on that pair, so any sub-grid reproduces its rows.
pub fn run_ablation(spec: &AblationSpec) -> Result<AblationTable, TrainError> {
    if spec.cells.is_empty() || spec.seeds.is_empty() {
        return Err(TrainError::Invalid("ablation grid needs at least one cell and one seed".into()));
    }
    let data: BTreeMap<u64, SeedData> = spec
        .seeds
        .par_iter()
        .map(|&s| seed_data(spec, s).map(|d| (s, d)))
        .collect::<Result<_, _>>()?;

    let mut base_jobs: BTreeMap<BaseKey, TrainConfig> = BTreeMap::new();
    for &seed in &spec.seeds {
        for cell in &spec.cells {
            base_jobs
                .entry(base_key(cell, seed))
                .or_insert_with(|| cell.base_config(&spec.base, seed));
        }
    }
    info!("ablation: {} base trainings, {} adaptations", base_jobs.len(), spec.cells.len() * spec.seeds.len());
    let bases: BTreeMap<BaseKey, Checkpoint> = base_jobs
        .into_par_iter()
        .map(|(key, cfg)| {
            let sd = &data[&key.0];
            train_base(&sd.data.train, &sd.world.split, &cfg).map(|o| (key, o.checkpoint))
        })
        .collect::<Result<_, _>>()?;

    let jobs: Vec<(&AblationCell, u64)> = spec
        .cells
        .iter()
        .flat_map(|c| spec.seeds.iter().map(move |&s| (c, s)))
        .collect();
    let rows: Vec<AblationRow> = jobs
        .par_iter()
        .map(|&(cell, seed)| run_cell(spec, &data[&seed], &bases[&base_key(cell, seed)], cell, seed))
        .collect::<Result<_, _>>()?;

    let summary = spec
        .cells
        .iter()
        .map(|cell| {
            let mine: Vec<&AblationRow> = rows.iter().filter(|r| r.cell == *cell).collect();
            AblationRow {
                cell: cell.clone(),
                seed: 0,
                map_base: nan_mean(mine.iter().map(|r| r.map_base)),
                map_novel: nan_mean(mine.iter().map(|r| r.map_novel)),
                mean_confusion: nan_mean(mine.iter().map(|r| r.mean_confusion)),
            }
        })
        .collect();
    Ok(AblationTable { rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(cells: Vec<AblationCell>, seeds: Vec<u64>) -> AblationSpec {
        let mut spec = AblationSpec::new(cells, seeds);
        spec.scenes_per_class_base = 10;
        spec.base.epochs = 1;
        spec.base.episodes_per_epoch = 4;
        spec.adapt.epochs = 1;
        spec.adapt.episodes_per_epoch = 3;
        spec.adapt.k_shot = 5;
        spec
    }

    #[test]
    fn grids_have_expected_cells() {
        assert_eq!(component_grid(0.5, 2.0).len(), 5);
        let a = alpha_grid(&[0.05, 0.1, 0.5, 1.0, 2.0], 2.0);
        assert_eq!(a.len(), 6);
        assert!(!a[0].enable_oc && a[0].alpha == 0.0);
        assert_eq!(lambda_grid(&[1.0, 1.5, 2.0, 2.5]).len(), 4);
    }

    #[test]
    fn rows_per_seed_and_summary_means() {
        let t = run_ablation(&tiny(component_grid(0.5, 2.0), vec![0, 1])).unwrap();
        assert_eq!(t.rows.len(), 10);
        assert_eq!(t.summary.len(), 5);
        for s in &t.summary {
            let v: Vec<f64> = t.rows_for(&s.cell.name).map(|r| r.map_novel).collect();
            assert_eq!(s.map_novel, (v[0] + v[1]) / 2.0);
        }
        assert_eq!(t.to_csv().lines().count(), 1 + 10 + 5);
    }

    #[test]
    fn a_cell_alone_matches_the_full_grid() {
        let grid = component_grid(0.5, 2.0);
        let full = run_ablation(&tiny(grid.clone(), vec![3])).unwrap();
        let alone = run_ablation(&tiny(vec![grid[4].clone()], vec![3])).unwrap();
        assert_eq!(alone.rows[0], *full.rows_for(&grid[4].name).next().unwrap());
    }

    #[test]
    fn empty_grid_is_rejected() {
        assert!(run_ablation(&tiny(vec![], vec![0])).is_err());
    }
}

//! Acceptance run: one pass/fail line per criterion. Runs without the libtest
//! harness so the lines come out in order and unbuffered; exits nonzero if
//! any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use mgml::data::builtin_splits;
use mgml::eval::{average_precision, iou, Detection, GroundTruth, Interp};
use mgml::gradcheck::{run_suites, standard_suites, toy_batch, toy_params, FD_STEP, MAX_REL_ERR};
use mgml::model::params::SE_LAMBDA;
use mgml::model::{
    episode_losses, meta_combine, orthogonality_loss, score_regions, split_and_excite, support_bank, HeadSwitches,
    Trainable,
};
use mgml::rng::{normal_tensor, seeded};
use mgml::tensor::{Tape, Tensor};
use mgml::training::{component_grid, lambda_grid, run_ablation, AblationSpec, AblationTable};
use mgml::data::BBox;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn gradients() -> Outcome {
    assert_eq!(FD_STEP, 1e-6);
    let report = run_suites(&standard_suites(), 20).expect("suites run");
    let names: Vec<&str> = report.outcomes.iter().map(|o| o.name).collect();
    let worst = report.outcomes.iter().map(|o| o.check.max_rel_err).fold(0.0, f64::max);
    let ok = names == ["L_oc", "L_meta", "L_metric", "L_reg", "total"]
        && report.outcomes.iter().all(|o| o.seeds == 20 && o.check.max_rel_err < MAX_REL_ERR)
        && report.elapsed < Duration::from_secs(10);
    outcome(ok, format!("worst rel err {worst:.2e} over {names:?}, {:.2}s", report.elapsed.as_secs_f64()))
}

fn oc(rows: &[Vec<f64>], labels: &[Option<usize>]) -> f64 {
    let tape = Tape::new();
    let d = rows[0].len();
    let t = Tensor::matrix(rows.len(), d, rows.concat()).unwrap();
    orthogonality_loss(tape.constant(t), labels, true).unwrap().item()
}

/// Pair-by-pair recomputation of the normalized loss.
fn oc_oracle(rows: &[Vec<f64>], labels: &[usize]) -> f64 {
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (n(a) * n(b))
    };
    let (mut same, mut ns, mut diff, mut nd) = (0.0, 0, 0.0, 0);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            if labels[i] == labels[j] {
                same += 1.0 - cos(&rows[i], &rows[j]);
                ns += 1;
            } else {
                diff += cos(&rows[i], &rows[j]);
                nd += 1;
            }
        }
    }
    same / ns.max(1) as f64 + diff / nd.max(1) as f64
}

fn oc_cases() -> Outcome {
    let parallel = oc(&[vec![1.0, 2.0, 0.5], vec![2.0, 4.0, 1.0]], &[Some(0), Some(0)]);
    let cross_orth = oc(&[vec![1.0, 0.0], vec![0.0, 3.0]], &[Some(0), Some(1)]);
    let same_orth = oc(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[Some(0), Some(0)]);

    let mut r = seeded(11);
    let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..5).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let labels = [0, 0, 1, 1, 2, 2];
    let fg: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
    let value = oc(&rows, &fg);
    let oracle = oc_oracle(&rows, &labels);

    let mut with_bg = rows.clone();
    with_bg.insert(2, vec![0.3, -0.2, 0.9, 0.1, 0.0]);
    with_bg.push(vec![5.0, 5.0, 5.0, 5.0, 5.0]);
    let mut bg_labels = fg.clone();
    bg_labels.insert(2, None);
    bg_labels.push(None);
    let bg_value = oc(&with_bg, &bg_labels);

    let ok = parallel.abs() < 1e-15
        && cross_orth == 0.0
        && (same_orth - 1.0).abs() < 1e-15
        && bg_value.to_bits() == value.to_bits()
        && (value - oracle).abs() < 1e-12;
    outcome(
        ok,
        format!(
            "parallel {parallel:.1e}, cross-orth {cross_orth}, same-orth {same_orth}, bg bit-identical {}, |oracle diff| {:.1e}",
            bg_value.to_bits() == value.to_bits(),
            (value - oracle).abs()
        ),
    )
}

fn se_identity() -> Outcome {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut params = toy_params(seed);
        let d = params.config.feature_dim;
        params.tensors.insert(SE_LAMBDA.into(), Tensor::ones(&[d]));
        let batch = toy_batch(seed);
        let on = HeadSwitches::full(0.5);
        let off = HeadSwitches { enable_se: false, ..on };
        let run = |sw: &HeadSwitches| {
            let tape = Tape::new();
            let b = params.bind(&tape, &Trainable::Nothing);
            let l = episode_losses(&b, &batch, sw).unwrap().values();
            let bank = normal_tensor(&[2, d], 1.0, &mut seeded(seed + 100));
            let s = score_regions(&b, &bank, 1, &batch.query_inputs, sw).unwrap();
            let mut v = vec![l.ce, l.oc, l.meta, l.metric, l.reg, l.total];
            v.extend(s.logits.value().data());
            v
        };
        let (a, b) = (run(&on), run(&off));
        worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(worst, f64::max);
    }
    outcome(worst <= 1e-12, format!("max |SE(λ≡1) − SE off| = {worst:.1e} over 10 episodes"))
}

fn aggregation() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut widths_ok = true;
    for seed in 0..10 {
        let mut r = seeded(200 + seed);
        let (d, rq) = (4 + seed as usize % 3, 3);
        let classes = [1usize, 2, 4];
        let labels = [1usize, 1, 2, 4, 4, 4];
        let tape = Tape::new();
        let feats = normal_tensor(&[labels.len(), d], 1.0, &mut r);
        let query = normal_tensor(&[rq, d], 1.0, &mut r);
        let lambda = normal_tensor(&[d], 1.0, &mut r);
        let bank = support_bank(tape.constant(feats.clone()), &labels, &classes, 2).unwrap();
        let excited = split_and_excite(&bank, Some(tape.constant(lambda.clone()))).unwrap();
        let out = meta_combine(tape.constant(query.clone()), &bank, excited).unwrap().value();
        widths_ok &= out.dims2() == (rq * classes.len(), 3 * d);
        for (ci, &c) in classes.iter().enumerate() {
            let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
            let sup: Vec<f64> = (0..d)
                .map(|j| members.iter().map(|&i| feats.get2(i, j)).sum::<f64>() / members.len() as f64)
                .collect();
            let scale: Vec<f64> = (0..d).map(|j| if c >= 2 { lambda.data()[j] } else { 1.0 }).collect();
            for q in 0..rq {
                let row = out.row(q * classes.len() + ci);
                for j in 0..d {
                    let qv = query.get2(q, j);
                    worst = worst
                        .max((row[j] - qv * sup[j] * scale[j]).abs())
                        .max((row[d + j] - (qv - sup[j])).abs())
                        .max((row[2 * d + j] - qv).abs());
                }
            }
        }
    }
    outcome(widths_ok && worst <= 1e-12, format!("all rows 3d wide: {widths_ok}, max segment error {worst:.1e}"))
}

/// Precision and recall recounted from scratch at every cutoff; AP sums each
/// recall gain times the best precision at that cutoff or deeper.
fn ap_oracle(flags: &[bool], num_gt: usize) -> f64 {
    let hits = |k: usize| flags[..k].iter().filter(|&&f| f).count() as f64;
    let mut ap = 0.0;
    for k in 1..=flags.len() {
        if flags[k - 1] {
            let best = (k..=flags.len()).map(|m| hits(m) / m as f64).fold(0.0, f64::max);
            ap += best / num_gt as f64;
        }
    }
    ap
}

fn ap_equivalence() -> Outcome {
    let exact = iou(
        &BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
        &BBox::new(5.0, 5.0, 15.0, 15.0).unwrap(),
    ) == 25.0 / 175.0;
    let mut r = seeded(5);
    let mut worst: f64 = 0.0;
    let scenarios = 500;
    for _ in 0..scenarios {
        let rand_box = |r: &mut mgml::rng::DetRng| {
            let (x, y) = (r.random_range(0.0..30.0), r.random_range(0.0..30.0));
            let (w, h) = (r.random_range(4.0..14.0), r.random_range(4.0..14.0));
            BBox::new(x, y, x + w, y + h).unwrap()
        };
        let n_gt = r.random_range(1..=5);
        let n_det = r.random_range(0..=8);
        let gts: Vec<GroundTruth> = (0..n_gt)
            .map(|_| GroundTruth {
                scene_id: "s".into(),
                class_id: 0,
                bbox: rand_box(&mut r),
            })
            .collect();
        let dets: Vec<Detection> = (0..n_det)
            .map(|i| {
                // Half the detections sit near an object, and scores are coarse so ties occur.
                let bbox = if r.random_bool(0.5) {
                    let g = gts[r.random_range(0..n_gt)].bbox;
                    let s = r.random_range(-2.0..2.0);
                    BBox::new(g.x1 + s, g.y1, g.x2 + s, g.y2).unwrap()
                } else {
                    rand_box(&mut r)
                };
                Detection {
                    scene_id: "s".into(),
                    class_id: 0,
                    score: f64::from(r.random_range(0..4u8)) / 4.0 + i as f64 * 0.0,
                    bbox,
                }
            })
            .collect();
        // Independent matching: stable descending sort, scan every object.
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
        let mut used = vec![false; gts.len()];
        let flags: Vec<bool> = order
            .iter()
            .map(|&i| {
                let mut pick: Option<(f64, usize)> = None;
                for (j, g) in gts.iter().enumerate() {
                    let o = dets[i].bbox.iou(&g.bbox);
                    if !used[j] && o >= 0.5 && pick.map_or(true, |(b, _)| o > b) {
                        pick = Some((o, j));
                    }
                }
                if let Some((_, j)) = pick {
                    used[j] = true;
                }
                pick.is_some()
            })
            .collect();
        let got = average_precision(&dets, &gts, 0.5, Interp::AllPoint).unwrap();
        worst = worst.max((got - ap_oracle(&flags, gts.len())).abs());
    }
    outcome(
        exact && worst <= 1e-10,
        format!("IoU 25/175 exact: {exact}; {scenarios} scenarios, max |AP − oracle| {worst:.1e}"),
    )
}

fn summary(t: &AblationTable, cell: &str) -> (f64, f64) {
    let s = t.summary_for(cell).expect("cell present");
    (s.map_novel, s.mean_confusion)
}

fn ablation_ordering() -> Outcome {
    let start = Instant::now();
    let mut spec = AblationSpec::new(component_grid(0.5, 2.0), (0..5).collect());
    spec.world.confusability = 0.7;
    spec.adapt.k_shot = 10;
    let t = run_ablation(&spec).expect("ablation runs");
    let elapsed = start.elapsed();
    let (mm, _) = summary(&t, "meta+metric");
    let (se, _) = summary(&t, "meta+metric+SE");
    let (full, full_conf) = summary(&t, "meta+metric+SE+OC");
    let (_, base_conf) = summary(&t, "metric-only");
    let ok = full >= se && se >= mm && full_conf < base_conf && elapsed <= Duration::from_secs(15 * 60);
    outcome(
        ok,
        format!(
            "mAP_novel full {full:.4} / +SE {se:.4} / meta+metric {mm:.4}; confusion full {full_conf:.2}% vs metric-only {base_conf:.2}%; {:.0}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn lambda_sweep() -> Outcome {
    let values = [1.0, 1.5, 2.0, 2.5];
    let seeds: Vec<u64> = (0..5).collect();
    let t = run_ablation(&AblationSpec::new(lambda_grid(&values), seeds.clone())).expect("sweep runs");
    let mut interior = 0;
    let mut peaks = Vec::new();
    for &s in &seeds {
        let scores: Vec<f64> = t
            .rows
            .iter()
            .filter(|r| r.seed == s)
            .map(|r| r.map_novel)
            .collect();
        let best = (0..scores.len()).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        peaks.push(values[best]);
        interior += (best != 0 && best != values.len() - 1) as usize;
    }
    let means: Vec<String> = t.summary.iter().map(|r| format!("{:.4}", r.map_novel)).collect();
    outcome(
        interior >= 4,
        format!("per-seed peak λ₀ {peaks:?} ({interior}/5 interior); seed-mean mAP_novel {means:?}"),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    mgml::cli::run(std::iter::once("mgml").chain(args.iter().copied()))
}

fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let d = |s: &str| dir.join(s).to_string_lossy().into_owned();
    let split = d("data/split.json");
    assert_eq!(run_cli(&["synth", "--out", &d("data"), "--seed", "3", "--scenes-per-class", "12"]), 0);
    assert_eq!(
        run_cli(&["base-train", "--train", &d("data/train.jsonl"), "--split", &split, "--out", &d("base"), "--epochs", "2", "--seed", "3"]),
        0
    );
    assert_eq!(
        run_cli(&[
            "adapt", "--base-ckpt", &d("base/base.mgck"), "--train", &d("data/train.jsonl"), "--split", &split,
            "--out", &d("adapted"), "--epochs", "2", "--seed", "3",
        ]),
        0
    );
    assert_eq!(
        run_cli(&["eval", "--ckpt", &d("adapted/adapted.mgck"), "--val", &d("data/val.jsonl"), "--split", &split, "--out", &d("eval"), "--seed", "3"]),
        0
    );
    [
        "data/train.jsonl",
        "data/train.patches",
        "base/base.mgck",
        "adapted/adapted.mgck",
        "eval/detections.jsonl",
        "eval/report.json",
        "eval/confusion.csv",
    ]
    .iter()
    .map(|f| (f.to_string(), std::fs::read(dir.join(f)).expect("artifact exists")))
    .collect()
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (x, y) = (pipeline(a.path()), pipeline(b.path()));
    let differing: Vec<&str> = x.iter().zip(&y).filter(|(p, q)| p.1 != q.1).map(|(p, _)| p.0.as_str()).collect();
    outcome(
        differing.is_empty(),
        format!("{} artifacts compared, differing: {differing:?}", x.len()),
    )
}

fn split_registry() -> Outcome {
    let idd10 = [
        "person", "rider", "car", "truck", "bus", "motorcycle", "bicycle", "autorickshaw", "animal", "traffic sign",
    ];
    let voc = [
        "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow", "diningtable", "dog",
        "horse", "motorbike", "person", "pottedplant", "sheep", "sofa", "train", "tvmonitor",
    ];
    let expected: Vec<(&str, Vec<&str>, Vec<&str>)> = vec![
        ("IDD-10-split1", idd10.to_vec(), vec!["bicycle", "bus", "truck"]),
        ("IDD-10-split2", idd10.to_vec(), vec!["autorickshaw", "motorcycle", "truck"]),
        ("IDD-OS", idd10.to_vec(), vec!["street cart", "tractor", "water tanker", "excavator"]),
        ("VOC-split1", voc.to_vec(), vec!["bird", "bus", "cow", "motorbike", "sofa"]),
        ("VOC-split2", voc.to_vec(), vec!["aeroplane", "bottle", "cow", "horse", "sofa"]),
        ("VOC-split3", voc.to_vec(), vec!["boat", "cat", "motorbike", "sheep", "sofa"]),
    ];
    let got = builtin_splits();
    let mut problems = Vec::new();
    if got.len() != expected.len() {
        problems.push(format!("{} splits", got.len()));
    }
    for (name, all, novel) in &expected {
        let Some(s) = got.iter().find(|s| s.name == *name) else {
            problems.push(format!("{name} missing"));
            continue;
        };
        let base: Vec<&str> = if *name == "IDD-OS" {
            all.clone()
        } else {
            all.iter().filter(|c| !novel.contains(c)).copied().collect()
        };
        if s.novel_classes != *novel || s.base_classes != base {
            problems.push(format!("{name} differs"));
        }
    }
    let counts: Vec<(usize, usize)> = got.iter().map(|s| (s.num_base(), s.num_novel())).collect();
    outcome(problems.is_empty(), format!("(base, novel) counts {counts:?}; problems {problems:?}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradients),
        ("orthogonality loss analytic cases", oc_cases),
        ("split-and-excite identity", se_identity),
        ("aggregation shape and composition", aggregation),
        ("AP oracle equivalence", ap_equivalence),
        ("ablation ordering", ablation_ordering),
        ("λ₀ sweep shape", lambda_sweep),
        ("determinism", determinism),
        ("split registry fidelity", split_registry),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|x| *x == id) {
            continue;
        }
        let o = f();
        failed += !o.passed as usize;
        println!("criterion {id} [{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

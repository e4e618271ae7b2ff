use crate::tensor::{concat, Result, Tensor, TensorError, Var, COSINE_EPS};

use super::params::{self, Bound};

/// Shared two-layer encoder `W2·relu(W1·x + b1) + b2`.
///
/// Accepts one input vector `[p]` or a batch `[R×p]`; returns `[d]` or `[R×d]`.
pub fn encode<'t>(b: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let single = shape.len() == 1;
    let x = if single { x.reshape(&[1, shape[0]])? } else { x };
    let h = x
        .matmul(b.var(params::BACKBONE_W1))?
        .add(b.var(params::BACKBONE_B1))?
        .relu();
    let f = h.matmul(b.var(params::BACKBONE_W2))?.add(b.var(params::BACKBONE_B2))?;
    if single {
        f.reshape(&[b.config.feature_dim])
    } else {
        Ok(f)
    }
}

/// Per-class support vectors for one episode.
#[derive(Clone)]
pub struct ClassAttentiveBank<'t> {
    /// `[N×d]`, one row per entry of `classes`.
    pub vectors: Var<'t>,
    /// Class indices in ascending order, so base rows precede novel rows.
    pub classes: Vec<usize>,
    pub base_count: usize,
    pub novel_count: usize,
}

impl<'t> ClassAttentiveBank<'t> {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn position(&self, class_id: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class_id)
    }

    pub fn is_novel_row(&self, row: usize) -> bool {
        row >= self.base_count
    }
}

/// Averages encoded support features `[M×d]` per class.
///
/// `classes` must be ascending; `num_base` is the split's base-class count and
/// decides which rows are novel.
pub fn support_bank<'t>(
    features: Var<'t>,
    labels: &[usize],
    classes: &[usize],
    num_base: usize,
) -> Result<ClassAttentiveBank<'t>> {
    let (m, _) = features.value().dims2();
    if labels.len() != m {
        return Err(TensorError::Contract(format!(
            "{} support labels for {m} support features",
            labels.len()
        )));
    }
    if classes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(TensorError::Contract("bank classes must be strictly ascending".into()));
    }
    let mut avg = vec![0.0; classes.len() * m];
    for (row, &c) in classes.iter().enumerate() {
        let members: Vec<usize> = (0..m).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            return Err(TensorError::Contract(format!("class {c} has no support example")));
        }
        let w = 1.0 / members.len() as f64;
        for i in members {
            avg[row * m + i] = w;
        }
    }
    let avg = features.tape().constant(Tensor::matrix(classes.len(), m, avg)?);
    let base_count = classes.iter().filter(|&&c| c < num_base).count();
    Ok(ClassAttentiveBank {
        vectors: avg.matmul(features)?,
        classes: classes.to_vec(),
        base_count,
        novel_count: classes.len() - base_count,
    })
}

/// Orthogonality constraint over per-example support features `[M×d]`.
///
/// Entries labelled `None` (background) are dropped before pairing. Over the
/// unordered foreground pairs, same-class pairs contribute `1 − cos` and
/// different-class pairs contribute `cos`. With `normalized`, each group is
/// averaged over its own pair count; otherwise the raw sums are added.
pub fn orthogonality_loss<'t>(
    features: Var<'t>,
    labels: &[Option<usize>],
    normalized: bool,
) -> Result<Var<'t>> {
    let tape = features.tape();
    let fg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    if fg.len() < 2 {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let lab: Vec<usize> = fg.iter().map(|&i| labels[i].expect("foreground")).collect();
    let m = fg.len();
    let (mut n_same, mut n_diff) = (0usize, 0usize);
    for i in 0..m {
        for j in i + 1..m {
            if lab[i] == lab[j] {
                n_same += 1;
            } else {
                n_diff += 1;
            }
        }
    }
    let (w_same, w_diff) = if normalized {
        (
            if n_same > 0 { -1.0 / n_same as f64 } else { 0.0 },
            if n_diff > 0 { 1.0 / n_diff as f64 } else { 0.0 },
        )
    } else {
        (-1.0, 1.0)
    };
    let mut weights = vec![0.0; m * m];
    for i in 0..m {
        for j in i + 1..m {
            weights[i * m + j] = if lab[i] == lab[j] { w_same } else { w_diff };
        }
    }
    // Σ_same (1 − cos) = n_same − Σ_same cos; the constant part is added last.
    let offset = match (normalized, n_same) {
        (_, 0) => 0.0,
        (true, _) => 1.0,
        (false, n) => n as f64,
    };
    let f = features.gather_rows(&fg)?;
    let cos = f.cosine_matrix(f, COSINE_EPS)?;
    let w = tape.constant(Tensor::matrix(m, m, weights)?);
    cos.mul(w)?.sum().add(tape.constant(Tensor::scalar(offset)))
}

/// `ce + alpha·oc`.
pub fn meta_loss<'t>(ce: Var<'t>, oc: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    ce.add(oc.scale(alpha))
}

/// Multiplies every novel row of the bank channel-wise by `lambda` (`[d]`).
/// Base rows, and every row when `lambda` is `None`, pass through unchanged.
pub fn split_and_excite<'t>(bank: &ClassAttentiveBank<'t>, lambda: Option<Var<'t>>) -> Result<Var<'t>> {
    let Some(lambda) = lambda else {
        return Ok(bank.vectors);
    };
    let d = lambda.shape().iter().product::<usize>();
    let ones = bank.vectors.tape().constant(Tensor::ones(&[1, d]));
    let table = concat(&[ones, lambda.reshape(&[1, d])?], 0)?;
    let rows: Vec<usize> = (0..bank.len()).map(|r| usize::from(bank.is_novel_row(r))).collect();
    bank.vectors.mul(table.gather_rows(&rows)?)
}

/// The 3d-wide feature of one (query region, foreground class) pair.
#[derive(Clone, Copy)]
pub struct AggregatedFeature<'t> {
    pub class_id: usize,
    /// `[3d]`: `[F_qry ⊙ excited F_sup, F_qry − F_sup, F_qry]`.
    pub values: Var<'t>,
}

/// Aggregates a single query feature `[d]` with one bank class.
///
/// The difference segment uses the un-excited support vector.
pub fn meta_combine_one<'t>(
    query: Var<'t>,
    bank: &ClassAttentiveBank<'t>,
    excited: Var<'t>,
    class_id: usize,
) -> Result<AggregatedFeature<'t>> {
    let row = bank.position(class_id).ok_or_else(|| {
        TensorError::Contract(format!(
            "class {class_id} is not a foreground class of this episode; background is scored from the query feature alone"
        ))
    })?;
    let d = query.shape().iter().product::<usize>();
    let q = query.reshape(&[d])?;
    let e = excited.gather_rows(&[row])?.reshape(&[d])?;
    let s = bank.vectors.gather_rows(&[row])?.reshape(&[d])?;
    Ok(AggregatedFeature {
        class_id,
        values: concat(&[q.mul(e)?, q.sub(s)?, q], 0)?,
    })
}

/// Aggregates every query row `[R×d]` with every bank row.
///
/// Output is `[R·N × 3d]`, row `r·N + c` pairing region `r` with bank row `c`.
pub fn meta_combine<'t>(query: Var<'t>, bank: &ClassAttentiveBank<'t>, excited: Var<'t>) -> Result<Var<'t>> {
    let (r, _) = query.value().dims2();
    let n = bank.len();
    let q_idx: Vec<usize> = (0..r * n).map(|i| i / n).collect();
    let c_idx: Vec<usize> = (0..r * n).map(|i| i % n).collect();
    let q = query.gather_rows(&q_idx)?;
    let e = excited.gather_rows(&c_idx)?;
    let s = bank.vectors.gather_rows(&c_idx)?;
    concat(&[q.mul(e)?, q.sub(s)?, q], 1)
}

/// Logits `[R×(N+1)]`: the shared scorer on each aggregated feature, then a
/// background logit from the raw query feature in the last column.
pub fn classify<'t>(b: &Bound<'t>, query: Var<'t>, combined: Var<'t>, num_classes: usize) -> Result<Var<'t>> {
    let (r, _) = query.value().dims2();
    let h = combined
        .matmul(b.var(params::SCORER_W1))?
        .add(b.var(params::SCORER_B1))?
        .relu();
    let fg = h
        .matmul(b.var(params::SCORER_W2))?
        .add(b.var(params::SCORER_B2))?
        .reshape(&[r, num_classes])?;
    let bg = query.matmul(b.var(params::BG_W))?.add(b.var(params::BG_B))?;
    concat(&[fg, bg], 1)
}

/// `τ·cos(query_r, direction_k)` for the direction rows `rows` of the metric head.
pub fn metric_logits<'t>(b: &Bound<'t>, query: Var<'t>, rows: &[usize]) -> Result<Var<'t>> {
    let dirs = b.var(params::METRIC_DIRECTIONS).gather_rows(rows)?;
    Ok(query.cosine_matrix(dirs, COSINE_EPS)?.scale(b.config.temperature))
}

/// Cross-entropy of the metric logits against `targets`, which index into `rows`.
pub fn metric_loss<'t>(b: &Bound<'t>, query: Var<'t>, rows: &[usize], targets: &[usize]) -> Result<Var<'t>> {
    metric_logits(b, query, rows)?.cross_entropy(targets)
}

/// Box deltas `(dx, dy, dw, dh)` per region: `[R×4]`, or `[4]` for one feature.
pub fn regress_box<'t>(b: &Bound<'t>, query: Var<'t>) -> Result<Var<'t>> {
    let shape = query.shape();
    if shape.len() == 1 {
        let out = query
            .reshape(&[1, shape[0]])?
            .matmul(b.var(params::REG_W))?
            .add(b.var(params::REG_B))?;
        return out.reshape(&[4]);
    }
    query.matmul(b.var(params::REG_W))?.add(b.var(params::REG_B))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BBox;
    use crate::gradcheck;
    use crate::model::params::{ModelConfig, ModelParams, Trainable};
    use crate::rng::{self, normal_tensor};
    use crate::tensor::{cosine, Tape};
    use rand::Rng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            input_dim: 5,
            hidden_dim: 6,
            feature_dim: 4,
            scorer_hidden: 5,
            temperature: 20.0,
        }
    }

    fn toy_params(seed: u64) -> ModelParams {
        let mut p = ModelParams::init(toy_config(), seed);
        let mut r = rng::seeded(seed + 100);
        p.add_adaptation_params(2.0, normal_tensor(&[3, 4], 1.0, &mut r));
        p
    }

    fn brute_oc(feats: &[Vec<f64>], labels: &[Option<usize>]) -> f64 {
        let (mut same, mut ns, mut diff, mut nd) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..feats.len() {
            for j in 0..feats.len() {
                if j <= i {
                    continue;
                }
                let (Some(a), Some(b)) = (labels[i], labels[j]) else { continue };
                let c = cosine(&feats[i], &feats[j], COSINE_EPS);
                if a == b {
                    same += 1.0 - c;
                    ns += 1;
                } else {
                    diff += c;
                    nd += 1;
                }
            }
        }
        let s = if ns > 0 { same / ns as f64 } else { 0.0 };
        let d = if nd > 0 { diff / nd as f64 } else { 0.0 };
        s + d
    }

    fn oc_of(rows: &[Vec<f64>], labels: &[Option<usize>], normalized: bool) -> f64 {
        let tape = Tape::new();
        let flat: Vec<f64> = rows.concat();
        let f = tape.constant(Tensor::matrix(rows.len(), rows[0].len(), flat).unwrap());
        orthogonality_loss(f, labels, normalized).unwrap().item()
    }

    #[test]
    fn oc_small_cases() {
        let x = vec![0.3, -1.0, 2.0];
        assert_eq!(oc_of(&[x.clone(), x.clone()], &[Some(0), Some(0)], true), 0.0);
        let (e1, e2) = (vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]);
        assert_eq!(oc_of(&[e1.clone(), e2.clone()], &[Some(0), Some(1)], true), 0.0);
        assert_eq!(oc_of(&[e1.clone(), e2.clone()], &[Some(2), Some(2)], true), 1.0);
        assert_eq!(oc_of(&[e1], &[Some(0)], true), 0.0);
    }

    #[test]
    fn oc_matches_pair_enumeration() {
        let mut r = rng::seeded(5);
        for seed in 0..10 {
            let t = normal_tensor(&[6, 4], 1.0, &mut r);
            let rows: Vec<Vec<f64>> = (0..6).map(|i| t.row(i).to_vec()).collect();
            let labels: Vec<Option<usize>> = [0, 0, 1, 1, 2, 2].iter().map(|&c| Some(c)).collect();
            let got = oc_of(&rows, &labels, true);
            let want = brute_oc(&rows, &labels);
            assert!((got - want).abs() < 1e-12, "seed {seed}: {got} vs {want}");
        }
    }

    #[test]
    fn oc_unnormalized_sums_pairs() {
        let (e1, e2) = (vec![1.0, 0.0], vec![0.0, 1.0]);
        // Three same-class pairs at cos 0, 1, 0 contribute 1 + 0 + 1.
        let v = oc_of(&[e1.clone(), e2.clone(), e2], &[Some(0); 3], false);
        assert!((v - 2.0).abs() < 1e-12);
        let v = oc_of(&[e1.clone(), e1.clone(), e1], &[Some(0), Some(1), Some(2)], false);
        assert!((v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn oc_ignores_background_entries_bitwise() {
        let mut r = rng::seeded(8);
        let t = normal_tensor(&[7, 3], 1.0, &mut r);
        let rows: Vec<Vec<f64>> = (0..7).map(|i| t.row(i).to_vec()).collect();
        let fg: Vec<Option<usize>> = vec![Some(0), Some(1), Some(0), Some(1)];
        let base = oc_of(&rows[..4], &fg, true);
        let mut with_bg = fg.clone();
        with_bg.extend([None, None, None]);
        assert_eq!(oc_of(&rows, &with_bg, true).to_bits(), base.to_bits());
    }

    #[test]
    fn oc_lower_bound_and_target_geometry() {
        let mut r = rng::seeded(2);
        for _ in 0..20 {
            let t = normal_tensor(&[5, 3], 1.0, &mut r);
            let rows: Vec<Vec<f64>> = (0..5).map(|i| t.row(i).to_vec()).collect();
            let labels = [Some(0), Some(1), Some(2), Some(0), Some(1)];
            let v = oc_of(&rows, &labels, false);
            assert!(v >= -8.0 - 1e-12);
        }
        let rows = vec![
            vec![1.0, 0.0, 0.0],
            vec![2.0, 0.0, 0.0],
            vec![0.0, 3.0, 0.0],
            vec![0.0, 0.5, 0.0],
        ];
        let v = oc_of(&rows, &[Some(0), Some(0), Some(1), Some(1)], true);
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn oc_gradient_step_moves_angle() {
        for &deg in &[30.0f64, 60.0, 120.0] {
            for same in [true, false] {
                let th = deg.to_radians();
                let tape = Tape::new();
                let f = tape.param(Tensor::matrix(2, 2, vec![1.0, 0.0, th.cos(), th.sin()]).unwrap());
                let labels = [Some(0), Some(if same { 0 } else { 1 })];
                let loss = orthogonality_loss(f, &labels, true).unwrap();
                tape.backward(loss).unwrap();
                let g = f.grad().unwrap();
                let stepped: Vec<f64> = f.value().data().iter().zip(g.data()).map(|(x, g)| x - 0.01 * g).collect();
                let after = cosine(&stepped[..2], &stepped[2..], 0.0).clamp(-1.0, 1.0).acos();
                if same {
                    assert!(after < th, "{deg}° same-class should close");
                } else {
                    assert!(after > th, "{deg}° different-class should open");
                }
            }
        }
    }

    #[test]
    fn meta_loss_arithmetic_and_gradient() {
        let tape = Tape::new();
        let ce = tape.param(Tensor::scalar(1.0));
        let oc = tape.param(Tensor::scalar(0.4));
        assert_eq!(meta_loss(ce, oc, 0.0).unwrap().item(), 1.0);
        let l = meta_loss(ce, oc, 0.5).unwrap();
        assert!((l.item() - 1.2).abs() < 1e-15);
        tape.backward(l).unwrap();
        assert_eq!(ce.grad().unwrap().item(), 1.0);
        assert_eq!(oc.grad().unwrap().item(), 0.5);
    }

    fn bank_of<'t>(tape: &'t Tape, rows: Vec<f64>, classes: &[usize], num_base: usize) -> ClassAttentiveBank<'t> {
        let d = rows.len() / classes.len();
        let f = tape.param(Tensor::matrix(classes.len(), d, rows).unwrap());
        support_bank(f, classes, classes, num_base).unwrap()
    }

    #[test]
    fn split_and_excite_cases() {
        let tape = Tape::new();
        let bank = bank_of(&tape, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0], &[1, 4], 3);
        assert_eq!((bank.base_count, bank.novel_count), (1, 1));
        let ones = tape.param(Tensor::ones(&[3]));
        assert_eq!(split_and_excite(&bank, Some(ones)).unwrap().value(), bank.vectors.value());
        assert_eq!(split_and_excite(&bank, None).unwrap().value(), bank.vectors.value());
        let twos = tape.param(Tensor::full(&[3], 2.0));
        let out = split_and_excite(&bank, Some(twos)).unwrap().value();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0, -2.0, 1.0, 8.0]);
    }

    #[test]
    fn support_bank_means() {
        let tape = Tape::new();
        let one = tape.constant(Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap());
        let b = support_bank(one, &[2], &[2], 5).unwrap();
        assert_eq!(b.vectors.value().data(), &[0.1, 0.2, 0.3]);

        let mut r = rng::seeded(3);
        let t = normal_tensor(&[6, 3], 1.0, &mut r);
        let labels = [4, 0, 4, 0, 0, 4];
        let f = tape.constant(t.clone());
        let b = support_bank(f, &labels, &[0, 4], 2).unwrap();
        for (row, c) in [0usize, 4].iter().enumerate() {
            for k in 0..3 {
                let mut s = 0.0;
                for i in 0..6 {
                    if labels[i] == *c {
                        s += t.get2(i, k);
                    }
                }
                assert!((b.vectors.value().get2(row, k) - s / 3.0).abs() < 1e-12);
            }
        }
        assert_eq!((b.base_count, b.novel_count), (1, 1));

        let same = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let b = support_bank(same, &[0, 1], &[0, 1], 2).unwrap();
        let v = b.vectors.value();
        assert_eq!(v.row(0), v.row(1));
    }

    #[test]
    fn meta_combine_segments() {
        let tape = Tape::new();
        let bank = bank_of(&tape, vec![1.0, 2.0, 3.0, 4.0], &[0, 1], 2);
        let ex = split_and_excite(&bank, None).unwrap();
        let zero = tape.constant(Tensor::zeros(&[2]));
        let agg = meta_combine_one(zero, &bank, ex, 1).unwrap();
        assert_eq!(agg.values.value().data(), &[0.0, 0.0, -3.0, -4.0, 0.0, 0.0]);

        let q = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let agg = meta_combine_one(q, &bank, ex, 1).unwrap();
        assert_eq!(agg.values.value().data(), &[9.0, 16.0, 0.0, 0.0, 3.0, 4.0]);

        assert!(matches!(meta_combine_one(q, &bank, ex, 2), Err(TensorError::Contract(_))));
    }

    #[test]
    fn meta_combine_difference_uses_unexcited_support() {
        let tape = Tape::new();
        let bank = bank_of(&tape, vec![1.0, 2.0, 3.0, 4.0], &[0, 5], 2);
        let ex = split_and_excite(&bank, Some(tape.param(Tensor::full(&[2], 2.0)))).unwrap();
        let q = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let agg = meta_combine_one(q, &bank, ex, 5).unwrap();
        assert_eq!(agg.values.value().data(), &[6.0, 8.0, -2.0, -3.0, 1.0, 1.0]);
    }

    #[test]
    fn batched_combine_matches_single() {
        let tape = Tape::new();
        let mut r = rng::seeded(1);
        let bank = bank_of(&tape, normal_tensor(&[3, 4], 1.0, &mut r).into_data(), &[0, 2, 7], 3);
        let ex = split_and_excite(&bank, Some(tape.param(normal_tensor(&[4], 1.0, &mut r)))).unwrap();
        let q = tape.constant(normal_tensor(&[2, 4], 1.0, &mut r));
        let all = meta_combine(q, &bank, ex).unwrap().value();
        assert_eq!(all.shape(), &[6, 12]);
        for ri in 0..2 {
            let qi = q.gather_rows(&[ri]).unwrap().reshape(&[4]).unwrap();
            for (ci, &c) in bank.classes.iter().enumerate() {
                let one = meta_combine_one(qi, &bank, ex, c).unwrap().values.value();
                assert_eq!(all.row(ri * 3 + ci), one.data());
            }
        }
    }

    #[test]
    fn classify_shape_and_shared_scorer() {
        let p = toy_params(0);
        let tape = Tape::new();
        let b = p.bind(&tape, &Trainable::Nothing);
        let bank = bank_of(&tape, vec![0.5, -1.0, 2.0, 0.1, 0.5, -1.0, 2.0, 0.1], &[0, 1], 2);
        let ex = split_and_excite(&bank, None).unwrap();
        let q = tape.constant(Tensor::matrix(3, 4, (0..12).map(|i| i as f64 * 0.1).collect()).unwrap());
        let logits = classify(&b, q, meta_combine(q, &bank, ex).unwrap(), 2).unwrap().value();
        assert_eq!(logits.shape(), &[3, 3]);
        for r in 0..3 {
            assert_eq!(logits.get2(r, 0), logits.get2(r, 1));
        }
    }

    #[test]
    fn metric_loss_cases() {
        let mut p = toy_params(1);
        let tape = Tape::new();
        let b = p.bind(&tape, &Trainable::Nothing);
        let q = tape.constant(Tensor::matrix(1, 4, vec![0.3, -0.2, 1.0, 0.7]).unwrap());
        let q3 = tape.constant(q.value().map(|x| 3.0 * x));
        let l1 = metric_loss(&b, q, &[0, 1, 2], &[1]).unwrap().item();
        let l3 = metric_loss(&b, q3, &[0, 1, 2], &[1]).unwrap().item();
        assert!((l1 - l3).abs() < 1e-12);

        p.tensors.insert(params::METRIC_DIRECTIONS.into(), Tensor::matrix(3, 4, [1.0, 2.0, 0.0, 1.0].repeat(3)).unwrap());
        let tape = Tape::new();
        let b = p.bind(&tape, &Trainable::Nothing);
        let q = tape.constant(Tensor::matrix(1, 4, vec![-0.3, 0.9, 1.0, 0.2]).unwrap());
        let l = metric_loss(&b, q, &[0, 1, 2], &[2]).unwrap().item();
        assert!((l - 3f64.ln()).abs() < 1e-12);

        let dirs = Tensor::matrix(3, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        p.tensors.insert(params::METRIC_DIRECTIONS.into(), dirs);
        p.config.temperature = 200.0;
        let tape = Tape::new();
        let b = p.bind(&tape, &Trainable::Nothing);
        let q = tape.constant(Tensor::matrix(1, 4, vec![0.0, 2.5, 0.0, 0.0]).unwrap());
        assert!(metric_loss(&b, q, &[0, 1, 2], &[1]).unwrap().item() < 1e-80);
    }

    #[test]
    fn metric_argmax_is_scale_invariant() {
        let p = toy_params(2);
        let mut r = rng::seeded(4);
        for _ in 0..20 {
            let q = normal_tensor(&[1, 4], 1.0, &mut r);
            let tape = Tape::new();
            let b = p.bind(&tape, &Trainable::Nothing);
            let argmax = |t: Tensor| {
                let v = metric_logits(&b, tape.constant(t), &[0, 1, 2]).unwrap().value();
                (0..3).max_by(|&i, &j| v.get2(0, i).total_cmp(&v.get2(0, j))).unwrap()
            };
            let s = 0.01 + 50.0 * (r.random::<f64>());
            assert_eq!(argmax(q.clone()), argmax(q.map(|x| x * s)));
        }
    }

    #[test]
    fn zero_deltas_reproduce_proposal() {
        let mut p = toy_params(0);
        p.tensors.insert(params::REG_W.into(), Tensor::zeros(&[4, 4]));
        let tape = Tape::new();
        let b = p.bind(&tape, &Trainable::Nothing);
        let d = regress_box(&b, tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]))).unwrap().value();
        assert_eq!(d.shape(), &[4]);
        let proposal = BBox::new(3.0, 4.0, 20.0, 11.0).unwrap();
        let out = proposal.apply_deltas([d.data()[0], d.data()[1], d.data()[2], d.data()[3]]);
        assert_eq!(out, proposal);
    }

    #[test]
    fn encode_is_deterministic_and_checks_width() {
        let p = toy_params(3);
        let tape = Tape::new();
        let b = p.bind(&tape, &Trainable::Nothing);
        let x = Tensor::vector(vec![0.2, 0.1, -0.4, 0.9, 0.0]);
        let a = encode(&b, tape.constant(x.clone())).unwrap().value();
        let c = encode(&b, tape.constant(x)).unwrap().value();
        assert_eq!(a, c);
        assert_eq!(a.shape(), &[4]);
        assert!(matches!(
            encode(&b, tape.constant(Tensor::vector(vec![1.0; 3]))),
            Err(TensorError::Shape { .. })
        ));
    }

    /// Checks gradients of `f` with respect to every parameter of the toy model.
    fn check_all_params(seed: u64, f: impl for<'t> Fn(&Bound<'t>, &'t Tape) -> Result<Var<'t>>) {
        let p = toy_params(seed);
        let names: Vec<String> = p.tensors.keys().cloned().collect();
        let inputs: Vec<Tensor> = p.tensors.values().cloned().collect();
        let config = p.config;
        let report = gradcheck::check(&inputs, gradcheck::FD_STEP, |tape, vars| {
            let b = Bound {
                config,
                vars: names.iter().cloned().zip(vars.iter().copied()).collect(),
            };
            f(&b, tape)
        })
        .unwrap();
        assert!(report.passes(gradcheck::MAX_REL_ERR), "seed {seed}: {report:?}");
    }

    #[test]
    fn gradcheck_encode_classify_regress() {
        let mut r = rng::seeded(11);
        let x = normal_tensor(&[3, 5], 1.0, &mut r);
        let sup = normal_tensor(&[2, 5], 1.0, &mut r);
        for seed in 0..3 {
            check_all_params(seed, |b, tape| {
                Ok(encode(b, tape.constant(x.clone()))?.mul(encode(b, tape.constant(x.clone()))?)?.sum())
            });
            check_all_params(seed, |b, tape| {
                let q = encode(b, tape.constant(x.clone()))?;
                let bank = support_bank(encode(b, tape.constant(sup.clone()))?, &[0, 2], &[0, 2], 1)?;
                let ex = split_and_excite(&bank, Some(b.var(params::SE_LAMBDA)))?;
                classify(b, q, meta_combine(q, &bank, ex)?, 2)?.cross_entropy(&[0, 2, 1])
            });
            check_all_params(seed, |b, tape| {
                let q = encode(b, tape.constant(x.clone()))?;
                let t = tape.constant(Tensor::matrix(3, 4, vec![0.1, -0.3, 0.2, 0.05, 1.5, 0.0, -0.1, 0.4, 0.0, 0.0, 0.3, -2.0])?);
                regress_box(b, q)?.smooth_l1(t)
            });
        }
    }
}

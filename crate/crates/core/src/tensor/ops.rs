//! Value-level kernels shared by the forward and backward passes.

use super::{Result, Tensor, TensorError};

/// `a[m×k] · b[k×n]`, optionally with either operand transposed.
pub(crate) fn matmul_raw(
    a: &[f64],
    (am, ak): (usize, usize),
    trans_a: bool,
    b: &[f64],
    (bk, bn): (usize, usize),
    trans_b: bool,
) -> (Vec<f64>, usize, usize) {
    let (m, k) = if trans_a { (ak, am) } else { (am, ak) };
    let (k2, n) = if trans_b { (bn, bk) } else { (bk, bn) };
    debug_assert_eq!(k, k2);
    let mut out = vec![0.0; m * n];
    let a_at = |i: usize, p: usize| if trans_a { a[p * ak + i] } else { a[i * ak + p] };
    if trans_b {
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a_at(i, p) * b[j * bn + p];
                }
                out[i * n + j] = acc;
            }
        }
    } else {
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a_at(i, p);
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * bn..(p + 1) * bn];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }
    (out, m, n)
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(TensorError::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (data, m, n) = matmul_raw(&a.data, a.dims2(), false, &b.data, b.dims2(), false);
    Ok(Tensor {
        shape: vec![m, n],
        data,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

/// Whether `b` is applied as a per-channel vector against `a`'s last dimension.
pub(crate) fn broadcast_mode(a: &Tensor, b: &Tensor, op: &'static str) -> Result<bool> {
    if a.shape == b.shape {
        return Ok(false);
    }
    if b.rank() == 1 && a.rank() >= 1 && a.shape[a.rank() - 1] == b.shape[0] {
        return Ok(true);
    }
    Err(TensorError::Shape {
        op,
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    })
}

pub(crate) fn binary(a: &Tensor, b: &Tensor, kind: BinaryKind, broadcast: bool) -> Tensor {
    let f = |x: f64, y: f64| match kind {
        BinaryKind::Add => x + y,
        BinaryKind::Sub => x - y,
        BinaryKind::Mul => x * y,
    };
    let data = if broadcast {
        let c = b.data.len();
        a.data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, b.data[i % c]))
            .collect()
    } else {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    };
    Tensor {
        shape: a.shape.clone(),
        data,
    }
}

pub(crate) fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = a.dims2();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor {
        shape: vec![c, r],
        data,
    }
}

pub(crate) fn row_norms(a: &Tensor, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let (r, c) = a.dims2();
    let raw: Vec<f64> = (0..r)
        .map(|i| a.data[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    let guarded = raw.iter().map(|&n| n.max(eps)).collect();
    (raw, guarded)
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub(crate) fn cosine_matrix(a: &Tensor, b: &Tensor, eps: f64) -> Tensor {
    let (ra, c) = a.dims2();
    let (rb, _) = b.dims2();
    let (_, na) = row_norms(a, eps);
    let (_, nb) = row_norms(b, eps);
    let (dots, _, _) = matmul_raw(&a.data, (ra, c), false, &b.data, (rb, c), true);
    let mut data = dots;
    for i in 0..ra {
        for j in 0..rb {
            data[i * rb + j] /= na[i] * nb[j];
        }
    }
    Tensor {
        shape: vec![ra, rb],
        data,
    }
}

/// Gradient of `sum(g ⊙ cosine_matrix(a, b))` with respect to `a`.
///
/// Rows whose norm is below `eps` see a constant denominator, so only the
/// numerator contributes for them.
pub(crate) fn cosine_matrix_grad_lhs(
    a: &Tensor,
    b: &Tensor,
    cos: &Tensor,
    g: &Tensor,
    eps: f64,
) -> Tensor {
    let (ra, c) = a.dims2();
    let (rb, _) = b.dims2();
    let (raw_a, na) = row_norms(a, eps);
    let (_, nb) = row_norms(b, eps);
    let mut out = vec![0.0; ra * c];
    for i in 0..ra {
        let ai = &a.data[i * c..(i + 1) * c];
        let oi = &mut out[i * c..(i + 1) * c];
        let mut radial = 0.0;
        for j in 0..rb {
            let gij = g.data[i * rb + j];
            if gij == 0.0 {
                continue;
            }
            let scale = gij / (na[i] * nb[j]);
            let bj = &b.data[j * c..(j + 1) * c];
            for (o, &bv) in oi.iter_mut().zip(bj) {
                *o += scale * bv;
            }
            radial += gij * cos.data[i * rb + j];
        }
        if raw_a[i] > eps {
            let s = radial / (na[i] * na[i]);
            for (o, &av) in oi.iter_mut().zip(ai) {
                *o -= s * av;
            }
        }
    }
    Tensor {
        shape: a.shape.clone(),
        data: out,
    }
}

/// Row-wise softmax probabilities and mean cross-entropy.
pub(crate) fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(f64, Vec<f64>)> {
    let (r, c) = logits.dims2();
    if targets.len() != r {
        return Err(TensorError::Shape {
            op: "softmax_cross_entropy",
            lhs: logits.shape.clone(),
            rhs: vec![targets.len()],
        });
    }
    let mut probs = vec![0.0; r * c];
    let mut total = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(TensorError::Index {
                op: "softmax_cross_entropy",
                index: t,
                size: c,
            });
        }
        let row = &logits.data[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
        let log_z = m + z.ln();
        total += log_z - row[t];
        for j in 0..c {
            probs[i * c + j] = (row[j] - log_z).exp();
        }
    }
    Ok((total / r as f64, probs))
}

pub(crate) fn smooth_l1_terms(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

use std::cell::RefCell;
use std::fmt;

use super::ops::{self, BinaryKind};
use super::{Result, Tensor, TensorError};

/// Backward rule for an op defined outside this module.
///
/// Returns one gradient per input, shaped like that input.
pub trait Backward {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Binary {
        a: usize,
        b: usize,
        kind: BinaryKind,
        broadcast: bool,
    },
    Scale(usize, f64),
    Relu(usize),
    Sum(usize),
    Mean(usize),
    Transpose(usize),
    Reshape(usize),
    Concat {
        inputs: Vec<usize>,
        axis: usize,
    },
    GatherRows {
        input: usize,
        index: Vec<usize>,
    },
    Cosine {
        a: usize,
        b: usize,
        eps: f64,
    },
    CosineMatrix {
        a: usize,
        b: usize,
        eps: f64,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    SmoothL1(usize, usize),
    Custom {
        inputs: Vec<usize>,
        rule: Box<dyn Backward>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only record of a forward computation.
///
/// A tape is rebuilt for every forward pass. It is not `Sync`; values leave
/// it only as detached tensors via [`Var::value`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    /// Grad-free leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Records an op whose value was computed by the caller.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        output: Tensor,
        rule: Box<dyn Backward>,
    ) -> Var<'t> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let rg = self.needs(&ids);
        self.push(output, Op::Custom { inputs: ids, rule }, rg)
    }

    /// Reverse pass from a scalar loss.
    ///
    /// Populates the gradient of every node that requires one and is reachable
    /// from `loss`; earlier gradients on this tape are discarded first.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        if !nodes[loss.id].value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor {
            shape: nodes[loss.id].value.shape.clone(),
            data: vec![1.0],
        });
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            for (input, contribution) in local_grads(&nodes, id, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        for (node, g) in nodes.iter_mut().zip(grads) {
            node.grad = if node.requires_grad { g } else { None };
        }
        Ok(())
    }
}

fn local_grads(nodes: &[Node], id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => Vec::new(),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (ga, m, k) = ops::matmul_raw(&g.data, g.dims2(), false, &bv.data, bv.dims2(), true);
            let (gb, k2, n) = ops::matmul_raw(&av.data, av.dims2(), true, &g.data, g.dims2(), false);
            vec![
                (*a, Tensor { shape: vec![m, k], data: ga }),
                (*b, Tensor { shape: vec![k2, n], data: gb }),
            ]
        }
        Op::Binary {
            a,
            b,
            kind,
            broadcast,
        } => {
            let (av, bv) = (val(*a), val(*b));
            let (ga, gb_full): (Vec<f64>, Vec<f64>) = match kind {
                BinaryKind::Add => (g.data.clone(), g.data.clone()),
                BinaryKind::Sub => (g.data.clone(), g.data.iter().map(|x| -x).collect()),
                BinaryKind::Mul => {
                    let c = bv.data.len();
                    let ga = g
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, gi)| gi * if *broadcast { bv.data[i % c] } else { bv.data[i] })
                        .collect();
                    let gb = g.data.iter().zip(&av.data).map(|(gi, x)| gi * x).collect();
                    (ga, gb)
                }
            };
            let gb = if *broadcast {
                let c = bv.data.len();
                let mut acc = vec![0.0; c];
                for (i, x) in gb_full.iter().enumerate() {
                    acc[i % c] += x;
                }
                acc
            } else {
                gb_full
            };
            vec![
                (*a, Tensor { shape: av.shape.clone(), data: ga }),
                (*b, Tensor { shape: bv.shape.clone(), data: gb }),
            ]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
        Op::Relu(a) => {
            let data = g
                .data
                .iter()
                .zip(&val(*a).data)
                .map(|(gi, x)| if *x > 0.0 { *gi } else { 0.0 })
                .collect();
            vec![(*a, Tensor { shape: g.shape.clone(), data })]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Mean(a) => {
            let n = val(*a).numel() as f64;
            vec![(*a, Tensor::full(val(*a).shape(), g.item() / n))]
        }
        Op::Transpose(a) => vec![(*a, ops::transpose(g))],
        Op::Reshape(a) => vec![(
            *a,
            Tensor {
                shape: val(*a).shape.clone(),
                data: g.data.clone(),
            },
        )],
        Op::Concat { inputs, axis } => {
            let contiguous = *axis == 0 || g.rank() == 1;
            let cols = g.dims2().1;
            let mut offset = 0;
            let mut result = Vec::with_capacity(inputs.len());
            for &i in inputs {
                let v = val(i);
                let data = if contiguous {
                    let d = g.data[offset..offset + v.numel()].to_vec();
                    offset += v.numel();
                    d
                } else {
                    let (r, c) = v.dims2();
                    let mut d = Vec::with_capacity(r * c);
                    for row in 0..r {
                        d.extend_from_slice(&g.data[row * cols + offset..row * cols + offset + c]);
                    }
                    offset += c;
                    d
                };
                result.push((i, Tensor { shape: v.shape.clone(), data }));
            }
            result
        }
        Op::GatherRows { input, index } => {
            let v = val(*input);
            let (_, c) = v.dims2();
            let mut data = vec![0.0; v.numel()];
            for (k, &src) in index.iter().enumerate() {
                for j in 0..c {
                    data[src * c + j] += g.data[k * c + j];
                }
            }
            vec![(*input, Tensor { shape: v.shape.clone(), data })]
        }
        Op::Cosine { a, b, eps } => {
            let (av, bv) = (val(*a), val(*b));
            let cos = Tensor::scalar(out.item());
            let ga = ops::cosine_matrix_grad_lhs(av, bv, &cos, g, *eps);
            let gb = ops::cosine_matrix_grad_lhs(bv, av, &cos, g, *eps);
            vec![
                (*a, Tensor { shape: av.shape.clone(), data: ga.data }),
                (*b, Tensor { shape: bv.shape.clone(), data: gb.data }),
            ]
        }
        Op::CosineMatrix { a, b, eps } => {
            let (av, bv) = (val(*a), val(*b));
            let ga = ops::cosine_matrix_grad_lhs(av, bv, out, g, *eps);
            let gt = ops::transpose(g);
            let ct = ops::transpose(out);
            let gb = ops::cosine_matrix_grad_lhs(bv, av, &ct, &gt, *eps);
            vec![(*a, ga), (*b, gb)]
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let lv = val(*logits);
            let (r, c) = lv.dims2();
            let scale = g.item() / r as f64;
            let mut data: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (i, &t) in targets.iter().enumerate() {
                data[i * c + t] -= scale;
            }
            vec![(*logits, Tensor { shape: lv.shape.clone(), data })]
        }
        Op::SmoothL1(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let s = g.item();
            let ga: Vec<f64> = av
                .data
                .iter()
                .zip(&bv.data)
                .map(|(x, y)| s * ops::smooth_l1_terms(x - y).1)
                .collect();
            let gb = ga.iter().map(|x| -x).collect();
            vec![
                (*a, Tensor { shape: av.shape.clone(), data: ga }),
                (*b, Tensor { shape: bv.shape.clone(), data: gb }),
            ]
        }
        Op::Custom { inputs, rule } => {
            let ins: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            inputs.iter().copied().zip(rule.backward(&ins, out, g)).collect()
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Detached copy of the forward value.
    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Gradient from the most recent [`Tape::backward`], if this node got one.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    fn with_values<R>(&self, others: &[Var<'t>], f: impl FnOnce(&[&Tensor]) -> R) -> R {
        let nodes = self.tape.nodes.borrow();
        let mut vals = vec![&nodes[self.id].value];
        vals.extend(others.iter().map(|o| &nodes[o.id].value));
        f(&vals)
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary_op(&self, other: Var<'t>, kind: BinaryKind, name: &'static str) -> Result<Var<'t>> {
        let (value, broadcast) = self.with_values(&[other], |v| -> Result<_> {
            let bc = ops::broadcast_mode(v[0], v[1], name)?;
            Ok((ops::binary(v[0], v[1], kind, bc), bc))
        })?;
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(
            value,
            Op::Binary {
                a: self.id,
                b: other.id,
                kind,
                broadcast,
            },
            rg,
        ))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let value = self.with_values(&[other], |v| ops::matmul(v[0], v[1]))?;
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    /// `self + other`; `other` may be a per-channel vector.
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, BinaryKind::Add, "add")
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, BinaryKind::Sub, "sub")
    }

    /// Elementwise (Hadamard) product; `other` may be a per-channel vector.
    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, BinaryKind::Mul, "mul")
    }

    pub fn elementwise(&self, other: Var<'t>, kind: BinaryKind) -> Result<Var<'t>> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        self.binary_op(other, kind, name)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.unary(v, Op::Scale(self.id, c))
    }

    pub fn relu(&self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sum(&self) -> Var<'t> {
        let v = Tensor::scalar(self.with_values(&[], |v| v[0].sum()));
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let v = self.with_values(&[], |v| Tensor::scalar(v[0].sum() / v[0].numel() as f64));
        self.unary(v, Op::Mean(self.id))
    }

    /// Matrix transpose (1-D inputs become a column).
    pub fn t(&self) -> Var<'t> {
        let v = self.with_values(&[], |v| ops::transpose(v[0]));
        self.unary(v, Op::Transpose(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.with_values(&[], |v| v[0].reshape(shape))?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    /// Rows selected (with repetition) by `index`.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'t>> {
        let v = self.with_values(&[], |v| -> Result<Tensor> {
            let (r, c) = v[0].dims2();
            let mut data = Vec::with_capacity(index.len() * c);
            for &i in index {
                if i >= r {
                    return Err(TensorError::Index {
                        op: "gather_rows",
                        index: i,
                        size: r,
                    });
                }
                data.extend_from_slice(v[0].row(i));
            }
            Tensor::new(vec![index.len(), c], data)
        })?;
        Ok(self.unary(
            v,
            Op::GatherRows {
                input: self.id,
                index: index.to_vec(),
            },
        ))
    }

    pub fn cosine_similarity(&self, other: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let value = self.with_values(&[other], |v| -> Result<Tensor> {
            if v[0].rank() != 1 || v[0].shape != v[1].shape {
                return Err(TensorError::Shape {
                    op: "cosine_similarity",
                    lhs: v[0].shape.clone(),
                    rhs: v[1].shape.clone(),
                });
            }
            Ok(Tensor::scalar(super::cosine(&v[0].data, &v[1].data, eps)))
        })?;
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(
            value,
            Op::Cosine {
                a: self.id,
                b: other.id,
                eps,
            },
            rg,
        ))
    }

    /// `[m×d], [n×d] -> [m×n]` of row-pair cosine similarities.
    pub fn cosine_matrix(&self, other: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let value = self.with_values(&[other], |v| -> Result<Tensor> {
            if v[0].rank() != 2 || v[1].rank() != 2 || v[0].shape[1] != v[1].shape[1] {
                return Err(TensorError::Shape {
                    op: "cosine_matrix",
                    lhs: v[0].shape.clone(),
                    rhs: v[1].shape.clone(),
                });
            }
            Ok(ops::cosine_matrix(v[0], v[1], eps))
        })?;
        let rg = self.tape.needs(&[self.id, other.id]);
        Ok(self.tape.push(
            value,
            Op::CosineMatrix {
                a: self.id,
                b: other.id,
                eps,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy over rows; a 1-D input is a single row.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = self.with_values(&[], |v| ops::cross_entropy(v[0], targets))?;
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Sum of elementwise smooth-L1 (Huber with unit threshold) of `self - target`.
    pub fn smooth_l1(&self, target: Var<'t>) -> Result<Var<'t>> {
        let value = self.with_values(&[target], |v| -> Result<Tensor> {
            if v[0].shape != v[1].shape {
                return Err(TensorError::Shape {
                    op: "smooth_l1",
                    lhs: v[0].shape.clone(),
                    rhs: v[1].shape.clone(),
                });
            }
            Ok(Tensor::scalar(
                v[0].data
                    .iter()
                    .zip(&v[1].data)
                    .map(|(x, y)| ops::smooth_l1_terms(x - y).0)
                    .sum(),
            ))
        })?;
        let rg = self.tape.needs(&[self.id, target.id]);
        Ok(self.tape.push(value, Op::SmoothL1(self.id, target.id), rg))
    }
}

/// Concatenates along `axis` (0 = rows, 1 = columns).
///
/// Inputs of rank 0 or 1 are joined end to end into a vector regardless of
/// `axis`. Otherwise all inputs must be matrices agreeing on the other axis.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
    let tape = first.tape;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let value = {
        let nodes = tape.nodes.borrow();
        let vals: Vec<&Tensor> = ids.iter().map(|&i| &nodes[i].value).collect();
        concat_values(&vals, axis)?
    };
    let rg = tape.needs(&ids);
    Ok(tape.push(value, Op::Concat { inputs: ids, axis }, rg))
}

fn concat_values(vals: &[&Tensor], axis: usize) -> Result<Tensor> {
    let mismatch = |a: &Tensor, b: &Tensor| TensorError::Shape {
        op: "concat",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    if axis > 1 {
        return Err(TensorError::Contract(format!("concat axis {axis} unsupported")));
    }
    if vals.iter().all(|v| v.rank() <= 1) {
        let data: Vec<f64> = vals.iter().flat_map(|v| v.data.iter().copied()).collect();
        return Ok(Tensor::vector(data));
    }
    if let Some(bad) = vals.iter().find(|v| v.rank() != 2) {
        return Err(mismatch(vals[0], bad));
    }
    let (rows0, cols0) = vals[0].dims2();
    if axis == 0 {
        let mut rows = 0;
        let mut data = Vec::new();
        for v in vals {
            if v.shape[1] != cols0 {
                return Err(mismatch(vals[0], v));
            }
            rows += v.shape[0];
            data.extend_from_slice(&v.data);
        }
        Tensor::new(vec![rows, cols0], data)
    } else {
        let mut cols = 0;
        for v in vals {
            if v.shape[0] != rows0 {
                return Err(mismatch(vals[0], v));
            }
            cols += v.shape[1];
        }
        let mut data = Vec::with_capacity(rows0 * cols);
        for r in 0..rows0 {
            for v in vals {
                data.extend_from_slice(v.row(r));
            }
        }
        Tensor::new(vec![rows0, cols], data)
    }
}

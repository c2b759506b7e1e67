use rand::Rng;

use super::scalar::{gemm, MatView};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBroadcast {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: F,
    },
    Sum {
        a: Var,
    },
    SumLastAxis {
        a: Var,
    },
    Reshape {
        a: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    Gelu {
        x: Var,
        tanh: Vec<F>,
    },
    Dropout {
        x: Var,
        mask: Vec<F>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<F>,
    },
    FillColumn {
        x: Var,
        col: usize,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        keep: Vec<bool>,
        probs: Vec<F>,
        count: usize,
    },
    SigmoidBce {
        logits: Var,
        labels: Vec<F>,
        keep: Vec<bool>,
        count: usize,
    },
}

struct Node<F> {
    value: Tensor<F>,
    requires_grad: bool,
    op: Op<F>,
}

/// Gradients produced by one backward pass.
pub struct Gradients<F = f32> {
    grads: Vec<Option<Tensor<F>>>,
    params: Vec<(ParamId, Var)>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Tensor<F>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradients of parameter leaves, one entry per recorded leaf.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.params
            .iter()
            .filter_map(|&(id, var)| self.get(var).map(|g| (id, g)))
    }
}

/// Reverse-mode tape. Operations are appended in execution order, so inputs
/// always precede the nodes that consume them.
pub struct Graph<F: Scalar = f32> {
    nodes: Vec<Node<F>>,
    consumed: bool,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `1 - 2 / (e^{2u} + 1)`; a single `exp` is much cheaper than libm `tanh`.
fn tanh_via_exp<F: Scalar>(u: F) -> F {
    let two = F::of(2.0);
    F::one() - two / ((two * u).exp() + F::one())
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, requires_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.push(value, false, Op::Leaf { param: None })
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf { param: None })
    }

    /// Records a trainable parameter; its gradient is reported under `id`.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), true, Op::Leaf { param: Some(id) })
    }

    /// Records a parameter whose value takes part in the forward pass but
    /// receives no gradient.
    pub fn frozen_param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.push(store.value(id).clone(), false, Op::Leaf { param: None })
    }

    fn mat_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            &[r, c] => Ok((r, c)),
            s => Err(shape_err(op, s, &[0, 0])),
        }
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.mat_dims(a, "matmul")?;
        let (br, bc) = self.mat_dims(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![F::zero(); m * n];
        let bv = if trans_b {
            MatView::dense(n, k).t()
        } else {
            MatView::dense(k, n)
        };
        gemm(
            self.value(a).data(),
            MatView::dense(m, k),
            self.value(b).data(),
            bv,
            F::zero(),
            &mut out,
            MatView::dense(m, n),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), rg, Op::MatMul { a, b, trans_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::Add { a, b }))
    }

    /// `a + b` where `b` is tiled over the leading axes of `a`; `b` must be a
    /// trailing suffix of `a`'s shape or hold a single element.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = self.value(b).numel() == 1 || (sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb);
        if !ok {
            return Err(shape_err("add_broadcast", sa, sb));
        }
        let bd = self.value(b).data();
        let nb = bd.len();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % nb])
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::AddBroadcast { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(shape, data), rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, factor: F) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, data), rg, Op::Scale { a, factor })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().fold(F::zero(), |acc, &x| acc + x);
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), rg, Op::Sum { a })
    }

    pub fn sum_last_axis(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let d = t.last_dim();
        let data: Vec<F> = t
            .data()
            .chunks(d)
            .map(|row| row.iter().fold(F::zero(), |acc, &x| acc + x))
            .collect();
        let mut shape = t.shape()[..t.rank() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(a);
        self.push(Tensor::from_parts(shape, data), rg, Op::SumLastAxis { a })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let value = self.value(a).clone().with_shape(shape.to_vec());
        let rg = self.rg(a);
        Ok(self.push(value, rg, Op::Reshape { a }))
    }

    /// Row gather from `table[V×d]`; the output has shape `ids_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], ids_shape: &[usize]) -> Result<Var> {
        let (vocab, d) = self.mat_dims(table, "embedding")?;
        if ids_shape.iter().product::<usize>() != ids.len() {
            return Err(shape_err("embedding", ids_shape, &[ids.len()]));
        }
        if let Some((position, &id)) = ids.iter().enumerate().find(|(_, &id)| id >= vocab) {
            return Err(Error::OutOfVocabulary { id, vocab, position });
        }
        let tab = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tab[id * d..(id + 1) * d]);
        }
        let mut shape = ids_shape.to_vec();
        shape.push(d);
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Standardizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let eps = F::of(eps);
        let inv_d = F::of(1.0 / d as f64);
        let xs = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xs.len() / d;
        let mut xhat = vec![F::zero(); xs.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().fold(F::zero(), |a, &v| a + v) * inv_d;
            let var = row.iter().fold(F::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, a) = (F::of(GELU_C), F::of(GELU_A));
        let half = F::of(0.5);
        let xv = self.value(x).data();
        let tanh: Vec<F> = xv.iter().map(|&v| tanh_via_exp(c * (v + a * v * v * v))).collect();
        let data = xv.iter().zip(&tanh).map(|(&v, &t)| half * v * (F::one() + t)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, data), rg, Op::Gelu { x, tanh })
    }

    /// Inverted dropout. A zero rate records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let n = self.value(x).numel();
        let mask: Vec<F> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, data), rg, Op::Dropout { x, mask })
    }

    /// Multi-head scaled dot-product attention over `[B×W×d]` inputs with an
    /// additive `[B×W×W]` mask. Heads split `d` into contiguous slices.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &Tensor<F>, heads: usize) -> Result<Var> {
        let shape = self.shape(q).to_vec();
        let (b, w, d) = match shape[..] {
            [b, w, d] => (b, w, d),
            _ => return Err(shape_err("attention", &shape, &[0, 0, 0])),
        };
        if self.shape(k) != shape.as_slice() || self.shape(v) != shape.as_slice() {
            return Err(shape_err("attention", &shape, self.shape(k)));
        }
        if mask.shape() != [b, w, w] {
            return Err(shape_err("attention", &[b, w, w], mask.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!("hidden size {d} is not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = F::of(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let md = mask.data();
        let mut probs = vec![F::zero(); b * heads * w * w];
        let mut out = vec![F::zero(); b * w * d];
        let head_view = MatView { rows: w, cols: dh, rs: d, cs: 1 };
        for bi in 0..b {
            for h in 0..heads {
                let base = bi * w * d + h * dh;
                let p = &mut probs[(bi * heads + h) * w * w..(bi * heads + h + 1) * w * w];
                gemm(&qd[base..], head_view, &kd[base..], head_view.t(), F::zero(), p, MatView::dense(w, w));
                let mrow = &md[bi * w * w..(bi + 1) * w * w];
                for r in 0..w {
                    let row = &mut p[r * w..(r + 1) * w];
                    let mut mx = F::neg_infinity();
                    for (j, s) in row.iter_mut().enumerate() {
                        *s = *s * scale + mrow[r * w + j];
                        mx = mx.max(*s);
                    }
                    let mut total = F::zero();
                    for s in row.iter_mut() {
                        *s = (*s - mx).exp();
                        total = total + *s;
                    }
                    for s in row.iter_mut() {
                        *s = *s / total;
                    }
                }
                gemm(p, MatView::dense(w, w), &vd[base..], head_view, F::zero(), &mut out[base..], head_view);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            rg,
            Op::Attention { q, k, v, heads, probs },
        ))
    }

    /// Overwrites column `col` of a `[N×V]` matrix with `value`; that column
    /// passes no gradient.
    pub fn fill_column(&mut self, x: Var, col: usize, value: F) -> Result<Var> {
        let (_, cols) = self.mat_dims(x, "fill_column")?;
        if col >= cols {
            return Err(shape_err("fill_column", self.shape(x), &[col]));
        }
        let mut t = self.value(x).clone();
        for row in t.data_mut().chunks_mut(cols) {
            row[col] = value;
        }
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::FillColumn { x, col }))
    }

    /// Mean over unmasked rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[bool]) -> Result<Var> {
        let (n, v) = self.mat_dims(logits, "softmax_cross_entropy")?;
        if targets.len() != n || ignore.len() != n {
            return Err(shape_err("softmax_cross_entropy", &[n, v], &[targets.len(), ignore.len()]));
        }
        let keep: Vec<bool> = ignore.iter().map(|&m| !m).collect();
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::DegenerateBatch { op: "softmax_cross_entropy" });
        }
        if let Some((position, &id)) = targets
            .iter()
            .enumerate()
            .find(|&(i, &t)| keep[i] && t >= v)
        {
            return Err(Error::OutOfVocabulary { id, vocab: v, position });
        }
        let x = self.value(logits).data();
        let mut probs = vec![F::zero(); n * v];
        let mut total = F::zero();
        for r in 0..n {
            if !keep[r] {
                continue;
            }
            let row = &x[r * v..(r + 1) * v];
            let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let p = &mut probs[r * v..(r + 1) * v];
            let mut s = F::zero();
            for (pj, &xj) in p.iter_mut().zip(row) {
                *pj = (xj - mx).exp();
                s = s + *pj;
            }
            for pj in p.iter_mut() {
                *pj = *pj / s;
            }
            total = total + (mx + s.ln() - row[targets[r]]);
        }
        let loss = total / F::of(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                keep,
                probs,
                count,
            },
        ))
    }

    /// Mean over unmasked elements of the logistic loss, in the form
    /// `max(x,0) - x*y + ln(1 + exp(-|x|))`.
    pub fn sigmoid_bce(&mut self, logits: Var, labels: &[bool], ignore: &[bool]) -> Result<Var> {
        let n = self.value(logits).numel();
        if labels.len() != n || ignore.len() != n {
            return Err(shape_err("sigmoid_bce", self.shape(logits), &[labels.len(), ignore.len()]));
        }
        let keep: Vec<bool> = ignore.iter().map(|&m| !m).collect();
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::DegenerateBatch { op: "sigmoid_bce" });
        }
        let labels: Vec<F> = labels.iter().map(|&l| if l { F::one() } else { F::zero() }).collect();
        let x = self.value(logits).data();
        let mut total = F::zero();
        for i in 0..n {
            if keep[i] {
                let xi = x[i];
                total = total + xi.max(F::zero()) - xi * labels[i] + (-xi.abs()).exp().ln_1p();
            }
        }
        let loss = total / F::of(count as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::SigmoidBce {
                logits,
                labels,
                keep,
                count,
            },
        ))
    }

    /// Runs the reverse sweep from a scalar `loss`. A graph supports exactly
    /// one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<F>> {
        if self.consumed {
            return Err(Error::TapeReused);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.consumed = true;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = Vec::new();
        let mut out = Vec::with_capacity(n);
        for (i, (node, g)) in self.nodes.iter().zip(grads).enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                params.push((pid, Var(i)));
            }
            out.push(if node.requires_grad {
                let shape = node.value.shape().to_vec();
                Some(match g {
                    Some(g) => Tensor::from_parts(shape, g),
                    None => Tensor::from_parts(shape, vec![F::zero(); node.value.numel()]),
                })
            } else {
                None
            });
        }
        Ok(Gradients { grads: out, params })
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        fn slot<'a, F: Scalar>(grads: &'a mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> &'a mut Vec<F> {
            grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.numel()])
        }

        match &nodes[i].op {
            Op::Leaf { .. } => {}
            &Op::MatMul { a, b, trans_b } => {
                let sa = nodes[a.0].value.shape();
                let sb = nodes[b.0].value.shape();
                let (m, k) = (sa[0], sa[1]);
                let n = if trans_b { sb[0] } else { sb[1] };
                let gv = MatView::dense(m, n);
                if rg(a) {
                    let bv = if trans_b {
                        MatView::dense(n, k)
                    } else {
                        MatView::dense(k, n).t()
                    };
                    let ga = slot(grads, nodes, a);
                    gemm(g, gv, val(b), bv, F::one(), ga, MatView::dense(m, k));
                }
                if rg(b) {
                    let gb = slot(grads, nodes, b);
                    if trans_b {
                        gemm(g, gv.t(), val(a), MatView::dense(m, k), F::one(), gb, MatView::dense(n, k));
                    } else {
                        gemm(val(a), MatView::dense(m, k).t(), g, gv, F::one(), gb, MatView::dense(k, n));
                    }
                }
            }
            &Op::Add { a, b } => {
                for v in [a, b] {
                    if rg(v) {
                        slot(grads, nodes, v).iter_mut().zip(g).for_each(|(s, &x)| *s = *s + x);
                    }
                }
            }
            &Op::AddBroadcast { a, b } => {
                if rg(a) {
                    slot(grads, nodes, a).iter_mut().zip(g).for_each(|(s, &x)| *s = *s + x);
                }
                if rg(b) {
                    let gb = slot(grads, nodes, b);
                    let nb = gb.len();
                    for (j, &x) in g.iter().enumerate() {
                        gb[j % nb] = gb[j % nb] + x;
                    }
                }
            }
            &Op::Mul { a, b } => {
                if rg(a) {
                    let bv = val(b);
                    slot(grads, nodes, a)
                        .iter_mut()
                        .zip(g.iter().zip(bv))
                        .for_each(|(s, (&x, &y))| *s = *s + x * y);
                }
                if rg(b) {
                    let av = val(a);
                    slot(grads, nodes, b)
                        .iter_mut()
                        .zip(g.iter().zip(av))
                        .for_each(|(s, (&x, &y))| *s = *s + x * y);
                }
            }
            &Op::Scale { a, factor } => {
                if rg(a) {
                    slot(grads, nodes, a).iter_mut().zip(g).for_each(|(s, &x)| *s = *s + x * factor);
                }
            }
            &Op::Sum { a } => {
                if rg(a) {
                    slot(grads, nodes, a).iter_mut().for_each(|s| *s = *s + g[0]);
                }
            }
            &Op::SumLastAxis { a } => {
                if rg(a) {
                    let d = nodes[a.0].value.last_dim();
                    let ga = slot(grads, nodes, a);
                    for (row, &x) in ga.chunks_mut(d).zip(g) {
                        row.iter_mut().for_each(|s| *s = *s + x);
                    }
                }
            }
            &Op::Reshape { a } => {
                if rg(a) {
                    slot(grads, nodes, a).iter_mut().zip(g).for_each(|(s, &x)| *s = *s + x);
                }
            }
            Op::Embedding { table, ids } => {
                if rg(*table) {
                    let d = nodes[table.0].value.last_dim();
                    let gt = slot(grads, nodes, *table);
                    for (pos, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut()
                            .zip(&g[pos * d..(pos + 1) * d])
                            .for_each(|(s, &x)| *s = *s + x);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = nodes[gain.0].value.numel();
                let gv = val(*gain);
                if rg(*gain) {
                    let gg = slot(grads, nodes, *gain);
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + grow[j] * hrow[j];
                        }
                    }
                }
                if rg(*bias) {
                    let gb = slot(grads, nodes, *bias);
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            gb[j] = gb[j] + grow[j];
                        }
                    }
                }
                if rg(*x) {
                    let gx = slot(grads, nodes, *x);
                    let df = F::of(d as f64);
                    let mut dxh = vec![F::zero(); d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &g[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            dxh[j] = grow[j] * gv[j];
                            s1 = s1 + dxh[j];
                            s2 = s2 + dxh[j] * hrow[j];
                        }
                        let c = *rs / df;
                        let dst = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dst[j] = dst[j] + c * (df * dxh[j] - s1 - hrow[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let x = *x;
                if rg(x) {
                    let (c, a) = (F::of(GELU_C), F::of(GELU_A));
                    let half = F::of(0.5);
                    let three = F::of(3.0);
                    let xv = val(x);
                    let gx = slot(grads, nodes, x);
                    for j in 0..g.len() {
                        let v = xv[j];
                        let t = tanh[j];
                        let dt = (F::one() - t * t) * c * (F::one() + three * a * v * v);
                        gx[j] = gx[j] + g[j] * (half * (F::one() + t) + half * v * dt);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if rg(*x) {
                    slot(grads, nodes, *x)
                        .iter_mut()
                        .zip(g.iter().zip(mask))
                        .for_each(|(s, (&gi, &m))| *s = *s + gi * m);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let sh = nodes[q.0].value.shape();
                let (b, w, d) = (sh[0], sh[1], sh[2]);
                let dh = d / heads;
                let scale = F::of(1.0 / (dh as f64).sqrt());
                let head_view = MatView { rows: w, cols: dh, rs: d, cs: 1 };
                let sq = MatView::dense(w, w);
                let (qd, kd, vd) = (val(q), val(k), val(v));
                let mut dq = rg(q).then(|| vec![F::zero(); qd.len()]);
                let mut dk = rg(k).then(|| vec![F::zero(); kd.len()]);
                let mut dv = rg(v).then(|| vec![F::zero(); vd.len()]);
                let mut ds = vec![F::zero(); w * w];
                for bi in 0..b {
                    for h in 0..heads {
                        let base = bi * w * d + h * dh;
                        let p = &probs[(bi * heads + h) * w * w..(bi * heads + h + 1) * w * w];
                        if let Some(dv) = dv.as_mut() {
                            gemm(p, sq.t(), &g[base..], head_view, F::one(), &mut dv[base..], head_view);
                        }
                        if dq.is_none() && dk.is_none() {
                            continue;
                        }
                        gemm(&g[base..], head_view, &vd[base..], head_view.t(), F::zero(), &mut ds, sq);
                        for r in 0..w {
                            let prow = &p[r * w..(r + 1) * w];
                            let drow = &mut ds[r * w..(r + 1) * w];
                            let dot = prow.iter().zip(drow.iter()).fold(F::zero(), |a, (&x, &y)| a + x * y);
                            for j in 0..w {
                                drow[j] = prow[j] * (drow[j] - dot) * scale;
                            }
                        }
                        if let Some(dq) = dq.as_mut() {
                            gemm(&ds, sq, &kd[base..], head_view, F::one(), &mut dq[base..], head_view);
                        }
                        if let Some(dk) = dk.as_mut() {
                            gemm(&ds, sq.t(), &qd[base..], head_view, F::one(), &mut dk[base..], head_view);
                        }
                    }
                }
                for (var, part) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(part) = part {
                        slot(grads, nodes, var).iter_mut().zip(part).for_each(|(s, x)| *s = *s + x);
                    }
                }
            }
            &Op::FillColumn { x, col } => {
                if rg(x) {
                    let cols = nodes[x.0].value.last_dim();
                    let gx = slot(grads, nodes, x);
                    for (j, (s, &gi)) in gx.iter_mut().zip(g).enumerate() {
                        if j % cols != col {
                            *s = *s + gi;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                keep,
                probs,
                count,
            } => {
                if rg(*logits) {
                    let v = nodes[logits.0].value.last_dim();
                    let c = g[0] / F::of(*count as f64);
                    let gl = slot(grads, nodes, *logits);
                    for (r, &kept) in keep.iter().enumerate() {
                        if !kept {
                            continue;
                        }
                        let row = &mut gl[r * v..(r + 1) * v];
                        let p = &probs[r * v..(r + 1) * v];
                        for j in 0..v {
                            let y = if j == targets[r] { F::one() } else { F::zero() };
                            row[j] = row[j] + c * (p[j] - y);
                        }
                    }
                }
            }
            Op::SigmoidBce {
                logits,
                labels,
                keep,
                count,
            } => {
                if rg(*logits) {
                    let c = g[0] / F::of(*count as f64);
                    let xv = val(*logits);
                    let gl = slot(grads, nodes, *logits);
                    for i in 0..gl.len() {
                        if keep[i] {
                            gl[i] = gl[i] + c * (sigmoid(xv[i]) - labels[i]);
                        }
                    }
                }
            }
        }
    }
}

/// Row-wise softmax outside the tape.
pub fn softmax_rows<F: Scalar>(logits: &[F], cols: usize) -> Vec<F> {
    let mut out = logits.to_vec();
    for row in out.chunks_mut(cols) {
        let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let mut s = F::zero();
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            s = s + *x;
        }
        for x in row.iter_mut() {
            *x = *x / s;
        }
    }
    out
}

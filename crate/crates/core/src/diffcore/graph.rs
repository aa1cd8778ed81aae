//! Tape-style computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and the backward pass is a single reverse sweep.
//! A graph is built per forward pass and dropped afterwards; parameters
//! live in a [`ParamStore`] and receive accumulated gradients from
//! [`Graph::backward`].

use crate::error::{Error, Result};
use crate::num::Scalar;

use super::kernels;
use super::tensor::{ParamId, ParamStore, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ReplaceRows {
        x: Var,
        fill: Var,
        rows: Vec<bool>,
    },
    MeanRows(Var),
    Sum(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: Conv2dSpec,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Mse(Var, Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
        weights: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of one backward pass, indexed by node.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require a gradient or is unreachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims2(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(Error::shape(op, format!("expected a matrix, got {shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).unwrap()
    }

    /// Leaf node; differentiable when the tensor requires a gradient.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {shape:?} vs {} values", data.len()),
            ));
        }
        Ok(self.push(shape, data, Op::Leaf, false))
    }

    /// Leaf bound to a stored parameter; gradients flow back into the store.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Param(id),
            t.requires_grad(),
        )
    }

    // ---- forward ops -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(self.value(a), self.value(b), m, k, n, &mut out);
        let ng = self.ng(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), ng))
    }

    /// `[m, n] + [n]` (or `[1, n]`) broadcast over rows.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "add_row")?;
        if numel(self.shape(row)) != n {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", self.shape(x), self.shape(row)),
            ));
        }
        let xv = self.value(x);
        let rv = self.value(row);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            out.extend(xv[i * n..(i + 1) * n].iter().zip(rv).map(|(&a, &b)| a + b));
        }
        let ng = self.ng(&[x, row]);
        Ok(self.push(vec![m, n], out, Op::AddRow(x, row), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.ng(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_fwd(v)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Gelu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), ng)
    }

    /// Row-wise softmax over the last axis of a matrix. Columns flagged in
    /// `ignore` receive exactly zero probability.
    pub fn softmax(&mut self, x: Var, ignore: Option<&[bool]>) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "softmax")?;
        if let Some(mask) = ignore {
            if mask.len() != n {
                return Err(Error::shape(
                    "softmax",
                    format!("mask of {} for {n} columns", mask.len()),
                ));
            }
            if mask.iter().all(|&b| b) {
                return Err(Error::Domain("softmax: every column masked".into()));
            }
        }
        let xv = self.value(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let keep = |j: usize| ignore.is_none_or(|mk| !mk[j]);
            let mut mx = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if keep(j) && v > mx {
                    mx = v;
                }
            }
            let mut z = T::zero();
            let o = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                if keep(j) {
                    o[j] = (row[j] - mx).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![m, n], out, Op::Softmax(x), ng))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "layer_norm")?;
        if numel(self.shape(gamma)) != n || numel(self.shape(beta)) != n {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "{:?} with gamma {:?} beta {:?}",
                    self.shape(x),
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        let xv = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let nf = T::from_usize(n).unwrap();
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let mu = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
            let r = T::one() / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mu) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "transpose")?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![n, m], out, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != numel(self.shape(x)) {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let out = self.value(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(shape, out, Op::Reshape(x), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{} of {n}", start + len),
            ));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&xv[i * n + start..i * n + start + len]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![m, len], out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (m, _) = dims2(self.shape(first), "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = dims2(self.shape(p), "concat_cols")?;
            if pm != m {
                return Err(Error::shape("concat_cols", format!("row counts {m} vs {pm}")));
            }
            widths.push(pn);
        }
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(vec![m, n], out, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, n) = dims2(self.shape(first), "concat_rows")?;
        let mut m = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pm, pn) = dims2(self.shape(p), "concat_rows")?;
            if pn != n {
                return Err(Error::shape("concat_rows", format!("widths {n} vs {pn}")));
            }
            m += pm;
            out.extend_from_slice(self.value(p));
        }
        let ng = self.ng(parts);
        Ok(self.push(vec![m, n], out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Selects rows of a matrix; rows may repeat.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "gather_rows")?;
        if rows.is_empty() {
            return Err(Error::shape("gather_rows", "empty row selection"));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {m}")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            vec![rows.len(), n],
            out,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Row lookup into an embedding table `[vocab, dim]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
            .map_err(|e| match e {
                Error::Shape { detail, .. } => Error::shape("embedding_lookup", detail),
                other => other,
            })
    }

    /// Replaces each flagged row of `x` with the row vector `fill`.
    pub fn replace_rows(&mut self, x: Var, fill: Var, rows: &[bool]) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "replace_rows")?;
        if rows.len() != m || numel(self.shape(fill)) != n {
            return Err(Error::shape(
                "replace_rows",
                format!(
                    "{:?} with fill {:?} and {} flags",
                    self.shape(x),
                    self.shape(fill),
                    rows.len()
                ),
            ));
        }
        let xv = self.value(x);
        let fv = self.value(fill);
        let mut out = Vec::with_capacity(m * n);
        for (i, &r) in rows.iter().enumerate() {
            if r {
                out.extend_from_slice(fv);
            } else {
                out.extend_from_slice(&xv[i * n..(i + 1) * n]);
            }
        }
        let ng = self.ng(&[x, fill]);
        Ok(self.push(
            vec![m, n],
            out,
            Op::ReplaceRows {
                x,
                fill,
                rows: rows.to_vec(),
            },
            ng,
        ))
    }

    /// Column means, `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "mean_rows")?;
        let xv = self.value(x);
        let mut out = vec![T::zero(); n];
        for i in 0..m {
            for j in 0..n {
                out[j] += xv[i * n + j];
            }
        }
        let mf = T::from_usize(m).unwrap();
        out.iter_mut().for_each(|v| *v /= mf);
        let ng = self.ng(&[x]);
        Ok(self.push(vec![1, n], out, Op::MeanRows(x), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(vec![1], vec![s], Op::Sum(x), ng)
    }

    /// 2-D convolution of `[N, C, H, W]` by `[O, C, K, K]` plus bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<Var> {
        let geo = self.conv_geometry(x, w, b, spec)?;
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let out = kernels::conv2d_forward(xv, wv, bv, &geo);
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(
            vec![geo.n, geo.o, geo.ho, geo.wo],
            out,
            Op::Conv2d { x, w, b, spec },
            ng,
        ))
    }

    fn conv_geometry(&self, x: Var, w: Var, b: Var, spec: Conv2dSpec) -> Result<kernels::ConvGeometry> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let bad = || Error::shape("conv2d", format!("input {xs:?} kernel {ws:?} bias {bs:?}"));
        let ([n, c, h, wd], [o, c2, k, k2]) = (xs, ws) else {
            return Err(bad());
        };
        if c != c2 || k != k2 || numel(bs) != *o || spec.stride == 0 {
            return Err(bad());
        }
        if h + 2 * spec.padding < *k || wd + 2 * spec.padding < *k {
            return Err(bad());
        }
        Ok(kernels::ConvGeometry {
            n: *n,
            c: *c,
            h: *h,
            w: *wd,
            o: *o,
            k: *k,
            stride: spec.stride,
            pad: spec.padding,
            ho: (h + 2 * spec.padding - k) / spec.stride + 1,
            wo: (wd + 2 * spec.padding - k) / spec.stride + 1,
        })
    }

    /// Non-overlapping max pooling with window and stride `k`.
    pub fn maxpool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let &[n, c, h, w] = self.shape(x) else {
            return Err(Error::shape("maxpool2d", format!("input {:?}", self.shape(x))));
        };
        if k == 0 || h < k || w < k {
            return Err(Error::shape("maxpool2d", format!("window {k} on {h}x{w}")));
        }
        let (ho, wo) = (h / k, w / k);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = base + i * k * w + j * k;
                    for di in 0..k {
                        for dj in 0..k {
                            let idx = base + (i * k + di) * w + j * k + dj;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(vec![n, c, ho, wo], out, Op::MaxPool2d { x, argmax }, ng))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let &[n, c, h, w] = self.shape(x) else {
            return Err(Error::shape("global_avg_pool", format!("input {:?}", self.shape(x))));
        };
        let hw = h * w;
        let denom = T::from_usize(hw).unwrap();
        let out = self
            .value(x)
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let ng = self.ng(&[x]);
        Ok(self.push(vec![n, c], out, Op::GlobalAvgPool(x), ng))
    }

    /// Mean squared error over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        if numel(self.shape(pred)) != numel(self.shape(target)) {
            return Err(Error::shape(
                "mse_loss",
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let p = self.value(pred);
        let t = self.value(target);
        let s: T = p.iter().zip(t).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let loss = s / T::from_usize(p.len()).unwrap();
        let ng = self.ng(&[pred, target]);
        Ok(self.push(vec![1], vec![loss], Op::Mse(pred, target), ng))
    }

    /// Weighted binary cross-entropy on logits: `sum_i w_i * l_i / n`.
    pub fn bce_with_logits_loss(&mut self, logits: Var, targets: &[T], weights: &[T]) -> Result<Var> {
        let n = numel(self.shape(logits));
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "bce_with_logits_loss",
                format!(
                    "{n} logits, {} targets, {} weights",
                    targets.len(),
                    weights.len()
                ),
            ));
        }
        let z = self.value(logits);
        let mut s = T::zero();
        for i in 0..n {
            s += weights[i] * (softplus(z[i]) - targets[i] * z[i]);
        }
        let loss = s / T::from_usize(n).unwrap();
        let ng = self.ng(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            ng,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// the store's gradient buffers (accumulating across calls); gradients of
    /// every other differentiable node are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Grads<T>> {
        let grads = self.backward_grads(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads.grads[i]) {
                store.get_mut(*id).accumulate_grad(g);
            }
        }
        Ok(grads)
    }

    /// Reverse sweep without touching any parameter store.
    pub fn backward_grads(&self, loss: Var) -> Result<Grads<T>> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::Domain(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Grads { grads });
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(g);
    }

    fn backprop_node(&self, i: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let (av, bv) = (self.value(a), self.value(b));
                self.acc(grads, a, |ga| kernels::gemm_a_bt(gout, bv, m, n, k, ga));
                self.acc(grads, b, |gb| kernels::gemm_at_b(av, gout, m, k, n, gb));
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    self.acc(grads, v, |g| add_into(g, gout));
                }
            }
            &Op::AddRow(x, row) => {
                let n = self.shape(x)[1];
                self.acc(grads, x, |g| add_into(g, gout));
                self.acc(grads, row, |g| {
                    for r in gout.chunks(n) {
                        add_into(g, r);
                    }
                });
            }
            &Op::Sub(a, b) => {
                self.acc(grads, a, |g| add_into(g, gout));
                self.acc(grads, b, |g| {
                    for (d, &s) in g.iter_mut().zip(gout) {
                        *d -= s;
                    }
                });
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                self.acc(grads, a, |g| {
                    for ((d, &s), &o) in g.iter_mut().zip(gout).zip(bv) {
                        *d += s * o;
                    }
                });
                self.acc(grads, b, |g| {
                    for ((d, &s), &o) in g.iter_mut().zip(gout).zip(av) {
                        *d += s * o;
                    }
                });
            }
            &Op::Scale(x, c) => {
                self.acc(grads, x, |g| {
                    for (d, &s) in g.iter_mut().zip(gout) {
                        *d += s * c;
                    }
                });
            }
            &Op::Relu(x) => {
                let xv = self.value(x);
                self.acc(grads, x, |g| {
                    for ((d, &s), &v) in g.iter_mut().zip(gout).zip(xv) {
                        if v > T::zero() {
                            *d += s;
                        }
                    }
                });
            }
            &Op::Gelu(x) => {
                let xv = self.value(x);
                self.acc(grads, x, |g| {
                    for ((d, &s), &v) in g.iter_mut().zip(gout).zip(xv) {
                        *d += s * gelu_grad(v);
                    }
                });
            }
            &Op::Sigmoid(x) => {
                let y = &node.value;
                self.acc(grads, x, |g| {
                    for ((d, &s), &yv) in g.iter_mut().zip(gout).zip(y) {
                        *d += s * yv * (T::one() - yv);
                    }
                });
            }
            &Op::Softmax(x) => {
                let n = node.shape[1];
                let y = &node.value;
                self.acc(grads, x, |g| {
                    for ((gr, yr), dr) in g.chunks_mut(n).zip(y.chunks(n)).zip(gout.chunks(n)) {
                        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
                        for j in 0..n {
                            gr[j] += yr[j] * (dr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = node.shape[1];
                let gv = self.value(*gamma);
                let nf = T::from_usize(n).unwrap();
                self.acc(grads, *gamma, |g| {
                    for (dr, hr) in gout.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            g[j] += dr[j] * hr[j];
                        }
                    }
                });
                self.acc(grads, *beta, |g| {
                    for dr in gout.chunks(n) {
                        add_into(g, dr);
                    }
                });
                self.acc(grads, *x, |g| {
                    for (r, ((gr, dr), hr)) in g
                        .chunks_mut(n)
                        .zip(gout.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..n {
                            let dh = dr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= nf;
                        m2 /= nf;
                        for j in 0..n {
                            let dh = dr[j] * gv[j];
                            gr[j] += rstd[r] * (dh - m1 - hr[j] * m2);
                        }
                    }
                });
            }
            &Op::Transpose(x) => {
                let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                self.acc(grads, x, |g| {
                    for i in 0..m {
                        for j in 0..n {
                            g[i * n + j] += gout[j * m + i];
                        }
                    }
                });
            }
            &Op::Reshape(x) => self.acc(grads, x, |g| add_into(g, gout)),
            &Op::SliceCols { x, start } => {
                let n = self.shape(x)[1];
                let len = node.shape[1];
                self.acc(grads, x, |g| {
                    for (i, dr) in gout.chunks(len).enumerate() {
                        add_into(&mut g[i * n + start..i * n + start + len], dr);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let n = node.shape[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    self.acc(grads, p, |g| {
                        for (i, gr) in g.chunks_mut(w).enumerate() {
                            add_into(gr, &gout[i * n + off..i * n + off + w]);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p.0].value.len();
                    self.acc(grads, p, |g| add_into(g, &gout[off..off + len]));
                    off += len;
                }
            }
            Op::GatherRows { x, rows } => {
                let n = node.shape[1];
                self.acc(grads, *x, |g| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut g[r * n..(r + 1) * n], &gout[k * n..(k + 1) * n]);
                    }
                });
            }
            Op::ReplaceRows { x, fill, rows } => {
                let n = node.shape[1];
                self.acc(grads, *x, |g| {
                    for (i, &r) in rows.iter().enumerate() {
                        if !r {
                            add_into(&mut g[i * n..(i + 1) * n], &gout[i * n..(i + 1) * n]);
                        }
                    }
                });
                self.acc(grads, *fill, |g| {
                    for (i, &r) in rows.iter().enumerate() {
                        if r {
                            add_into(g, &gout[i * n..(i + 1) * n]);
                        }
                    }
                });
            }
            &Op::MeanRows(x) => {
                let (m, n) = (self.shape(x)[0], self.shape(x)[1]);
                let mf = T::from_usize(m).unwrap();
                self.acc(grads, x, |g| {
                    for gr in g.chunks_mut(n) {
                        for j in 0..n {
                            gr[j] += gout[j] / mf;
                        }
                    }
                });
            }
            &Op::Sum(x) => {
                self.acc(grads, x, |g| g.iter_mut().for_each(|d| *d += gout[0]));
            }
            &Op::Conv2d { x, w, b, spec } => {
                let geo = self
                    .conv_geometry(x, w, b, spec)
                    .expect("geometry validated in forward");
                let (xv, wv) = (self.value(x), self.value(w));
                let nw = self.nodes[w.0].needs_grad;
                let nx = self.nodes[x.0].needs_grad;
                let mut gw = if nw { vec![T::zero(); wv.len()] } else { Vec::new() };
                let mut gx = if nx { vec![T::zero(); xv.len()] } else { Vec::new() };
                kernels::conv2d_backward(
                    xv,
                    wv,
                    gout,
                    &geo,
                    nw.then_some(gw.as_mut_slice()),
                    nx.then_some(gx.as_mut_slice()),
                );
                if nw {
                    self.acc(grads, w, |g| add_into(g, &gw));
                }
                if nx {
                    self.acc(grads, x, |g| add_into(g, &gx));
                }
                let plane = geo.ho * geo.wo;
                self.acc(grads, b, |g| {
                    for (idx, chunk) in gout.chunks(plane).enumerate() {
                        g[idx % geo.o] += chunk.iter().copied().sum::<T>();
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => {
                self.acc(grads, *x, |g| {
                    for (&src, &d) in argmax.iter().zip(gout) {
                        g[src] += d;
                    }
                });
            }
            &Op::GlobalAvgPool(x) => {
                let s = self.shape(x);
                let hw = s[2] * s[3];
                let denom = T::from_usize(hw).unwrap();
                self.acc(grads, x, |g| {
                    for (gp, &d) in g.chunks_mut(hw).zip(gout) {
                        let v = d / denom;
                        gp.iter_mut().for_each(|e| *e += v);
                    }
                });
            }
            &Op::Mse(pred, target) => {
                let (p, t) = (self.value(pred), self.value(target));
                let c = T::of(2.0) * gout[0] / T::from_usize(p.len()).unwrap();
                self.acc(grads, pred, |g| {
                    for ((d, &a), &b) in g.iter_mut().zip(p).zip(t) {
                        *d += c * (a - b);
                    }
                });
                self.acc(grads, target, |g| {
                    for ((d, &a), &b) in g.iter_mut().zip(p).zip(t) {
                        *d -= c * (a - b);
                    }
                });
            }
            Op::BceWithLogits {
                logits,
                targets,
                weights,
            } => {
                let z = self.value(*logits);
                let c = gout[0] / T::from_usize(z.len()).unwrap();
                self.acc(grads, *logits, |g| {
                    for i in 0..z.len() {
                        g[i] += c * weights[i] * (sigmoid(z[i]) - targets[i]);
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(z: T) -> T {
    // log(1 + e^z) without overflow
    z.max(T::zero()) + (-(z.abs())).exp().ln_1p()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<T: Scalar>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    T::half() * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    T::half() * (T::one() + t) + T::half() * x * (T::one() - t * t) * dinner
}

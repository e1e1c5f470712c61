//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for its backward rule. [`Tape::backward`] walks the nodes in reverse
//! recording order, accumulating gradients additively into every input that
//! requires them. A tape supports exactly one backward pass.

use std::sync::atomic::{AtomicU32, Ordering};

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{gemm, Element, MatRef, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

/// Spatial padding convention for [`Tape::conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    /// Symmetric zero padding of `(k-1)/2`; requires an odd kernel.
    Same,
    Valid,
}

impl Padding {
    pub fn amount(self, kernel: usize) -> Result<usize> {
        match self {
            Padding::Valid => Ok(0),
            Padding::Same if kernel % 2 == 1 => Ok((kernel - 1) / 2),
            Padding::Same => Err(Error::config(format!(
                "same padding needs an odd kernel, got {kernel}"
            ))),
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Softmax {
        input: Var,
        temperature: T,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    InformationGain {
        probs: Var,
        dprobs: Vec<T>,
    },
    SelectRows {
        input: Var,
        indices: Vec<usize>,
    },
    ScatterRows {
        parts: Vec<(Var, Vec<usize>)>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

pub struct Tape<T> {
    id: u32,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether `var` was recorded on this tape.
    pub fn owns(&self, var: Var) -> bool {
        var.tape == self.id && (var.index as usize) < self.nodes.len()
    }

    fn check(&self, var: Var) -> Result<()> {
        if self.owns(var) {
            Ok(())
        } else {
            Err(Error::Usage(format!("{var:?} was not recorded on this tape")))
        }
    }

    fn node(&self, var: Var) -> &Node<T> {
        &self.nodes[var.index as usize]
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.node(var).value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.node(var).requires_grad
    }

    /// Gradient of the last backward pass with respect to `var`, if any flowed into it.
    pub fn grad(&self, var: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(var.index as usize)?.as_ref()?;
        Tensor::new(self.node(var).value.shape(), g.clone()).ok()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>, name: &'static str) -> Result<Var> {
        if self.consumed {
            return Err(Error::Usage("tape already ran backward; record a new one".into()));
        }
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let index = self.nodes.len() as u32;
        self.nodes.push(Node { value, requires_grad, op });
        Ok(Var { tape: self.id, index })
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        self.push(value, requires_grad, Op::Leaf, "leaf")
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    /// 2-D convolution, stride 1: input `[B,C,H,W]`, weight `[O,C,k,k]`, bias `[O]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, padding: Padding) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::config(format!("conv2d expects [B,C,H,W] and [O,C,k,k], got {xs:?} and {ws:?}")));
        }
        if xs[1] != ws[1] {
            return Err(Error::config(format!(
                "conv2d input has {} channels but the kernel expects {}",
                xs[1], ws[1]
            )));
        }
        if bs != [ws[0]] {
            return Err(Error::config(format!("conv2d bias shape {bs:?} does not match {} filters", ws[0])));
        }
        let (batch, out_c, k) = (xs[0], ws[0], ws[2]);
        let pad = padding.amount(k)?;
        let geom = ConvGeom::new(xs[1], xs[2], xs[3], k, pad)
            .ok_or_else(|| Error::config(format!("kernel {k} larger than padded input {xs:?}")))?;
        let (plen, olen) = (geom.patch_len(), geom.out_len());
        let mut cols = vec![T::zero(); plen * olen];
        let mut out = vec![T::zero(); batch * out_c * olen];
        {
            let x = self.value(input).data();
            let w = self.value(weight).data();
            let b = self.value(bias).data();
            let in_len = geom.channels * geom.height * geom.width;
            for s in 0..batch {
                kernels::im2col(&geom, &x[s * in_len..(s + 1) * in_len], &mut cols, olen);
                let dst = &mut out[s * out_c * olen..(s + 1) * out_c * olen];
                for (o, row) in dst.chunks_mut(olen).enumerate() {
                    row.fill(b[o]);
                }
                gemm(MatRef::new(w, out_c, plen), MatRef::new(&cols, plen, olen), T::one(), dst);
            }
        }
        let value = Tensor::new(&[batch, out_c, geom.out_h, geom.out_w], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        self.push(value, rg, Op::Conv2d { input, weight, bias, geom }, "conv2d")
    }

    /// Affine map `x·W + b`: input `[B,F_in]`, weight `[F_in,F_out]`, bias `[F_out]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let xs = self.value(input).shape();
        let ws = self.value(weight).shape();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::config(format!("dense expects [B,{}] input, got {xs:?}", ws.first().unwrap_or(&0))));
        }
        if self.value(bias).shape() != [ws[1]] {
            return Err(Error::config(format!(
                "dense bias shape {:?} does not match fan-out {}",
                self.value(bias).shape(),
                ws[1]
            )));
        }
        let (batch, fin, fout) = (xs[0], ws[0], ws[1]);
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(batch * fout);
        for _ in 0..batch {
            out.extend_from_slice(b);
        }
        gemm(
            MatRef::new(self.value(input).data(), batch, fin),
            MatRef::new(self.value(weight).data(), fin, fout),
            T::one(),
            &mut out,
        );
        let value = Tensor::new(&[batch, fout], out)?;
        let rg = self.any_grad(&[input, weight, bias]);
        self.push(value, rg, Op::Dense { input, weight, bias }, "dense")
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(T::zero())).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::Relu(input), "relu")
    }

    /// 2×2 max pooling with stride 2. Odd extents are padded on the right with −∞.
    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::config(format!("maxpool2d expects [B,C,H,W], got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = vec![T::zero(); planes * oh * ow];
        let mut argmax = vec![0u32; planes * oh * ow];
        for p in 0..planes {
            kernels::maxpool_plane(
                &x.data()[p * h * w..(p + 1) * h * w],
                h,
                w,
                &mut out[p * oh * ow..(p + 1) * oh * ow],
                &mut argmax[p * oh * ow..(p + 1) * oh * ow],
            );
        }
        let value = Tensor::new(&[s[0], s[1], oh, ow], out)?;
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::MaxPool { input, argmax }, "maxpool2d")
    }

    /// Mean over the spatial axes: `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let s = x.shape();
        if s.len() != 4 {
            return Err(Error::config(format!("global_avg_pool expects [B,C,H,W], got {s:?}")));
        }
        let area = s[2] * s[3];
        let inv = T::from_f64_lossy(1.0 / area as f64);
        let data = x
            .data()
            .chunks(area)
            .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
            .collect();
        let value = Tensor::new(&[s[0], s[1]], data)?;
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::GlobalAvgPool(input), "global_avg_pool")
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        self.check(input)?;
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::Reshape(input), "reshape")
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let shape = [x.rows(), x.row_len()];
        self.reshape(input, &shape)
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)` in training, identity otherwise.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        self.check(input)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability must be in [0,1), got {p}")));
        }
        if !training || p == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.gen::<f64>() >= p { keep } else { T::zero() })
            .collect();
        let data = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::Dropout { input, mask }, "dropout")
    }

    /// Row-wise `softmax(logits / temperature)` of a `[B,K]` input.
    pub fn softmax(&mut self, input: Var, temperature: f64) -> Result<Var> {
        self.check(input)?;
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::config(format!("softmax temperature must be positive, got {temperature}")));
        }
        let x = self.value(input);
        if x.shape().len() != 2 {
            return Err(Error::config(format!("softmax expects [B,K], got {:?}", x.shape())));
        }
        let k = x.shape()[1];
        let t = T::from_f64_lossy(temperature);
        let mut out = vec![T::zero(); x.len()];
        kernels::softmax_rows(x.data(), k, t, &mut out);
        let value = Tensor::new(x.shape(), out)?;
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::Softmax { input, temperature: t }, "softmax")
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let x = self.value(logits);
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::config(format!(
                "cross entropy expects [B,K] logits for {} labels, got {s:?}",
                labels.len()
            )));
        }
        if s[0] == 0 {
            return Err(Error::input("cross entropy over an empty batch"));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::input(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![T::zero(); x.len()];
        kernels::softmax_rows(x.data(), k, T::one(), &mut probs);
        let mut total = 0.0f64;
        for (row, &label) in x.data().chunks(k).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v)).as_f64();
            let lse = max + row.iter().map(|&v| (v.as_f64() - max).exp()).sum::<f64>().ln();
            total += lse - row[label].as_f64();
        }
        let loss = T::from_f64_lossy(total / labels.len() as f64);
        let rg = self.requires_grad(logits);
        self.push(
            Tensor::scalar(loss),
            rg,
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            "softmax_cross_entropy",
        )
    }

    /// Balanced information gain `H[p(y)] + λ·H[p(Z)] − H[p(y,Z)]` of the minibatch joint
    /// built from routing probabilities `[B,K]` and labels.
    pub fn information_gain(
        &mut self,
        probs: Var,
        labels: &[usize],
        num_classes: usize,
        lambda_balance: f64,
    ) -> Result<Var> {
        self.check(probs)?;
        let p = self.value(probs);
        let s = p.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::config(format!(
                "information gain expects [B,K] probabilities for {} labels, got {s:?}",
                labels.len()
            )));
        }
        let (batch, k) = (s[0], s[1]);
        let pv = p.to_f64_vec();
        let joint = crate::routing::joint_from_rows(&pv, k, labels, num_classes)?;
        let ig = crate::routing::information_gain(&joint, lambda_balance)?;
        let (py, pz) = (joint.class_marginal(), joint.unit_marginal());
        let log = |v: f64| v.max(f64::MIN_POSITIVE).ln();
        let inv_b = 1.0 / batch as f64;
        let mut dprobs = Vec::with_capacity(batch * k);
        for &y in labels {
            for unit in 0..k {
                let d = -(log(py[y]) + 1.0) + lambda_balance * -(log(pz[unit]) + 1.0)
                    + (log(joint.get(y, unit)) + 1.0);
                dprobs.push(T::from_f64_lossy(d * inv_b));
            }
        }
        let rg = self.requires_grad(probs);
        self.push(
            Tensor::scalar(T::from_f64_lossy(ig)),
            rg,
            Op::InformationGain { probs, dprobs },
            "information_gain",
        )
    }

    /// Rows `indices` of the leading axis.
    pub fn select_rows(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.rows()) {
            return Err(Error::config(format!("row {bad} out of range for {} rows", x.rows())));
        }
        let value = x.select_rows(indices);
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::SelectRows { input, indices: indices.to_vec() }, "select_rows")
    }

    /// Inverse of [`Tape::select_rows`] over a disjoint cover: part `j` row `r` lands at
    /// output row `parts[j].1[r]`. Every output row must be covered exactly once.
    pub fn scatter_rows(&mut self, parts: &[(Var, &[usize])], rows: usize) -> Result<Var> {
        let mut tail: Option<Vec<usize>> = None;
        let mut seen = vec![false; rows];
        for &(v, idx) in parts {
            self.check(v)?;
            let x = self.value(v);
            if x.rows() != idx.len() {
                return Err(Error::config("scatter part row count does not match its index list"));
            }
            let t = x.shape()[1..].to_vec();
            match &tail {
                Some(prev) if *prev != t => {
                    return Err(Error::config(format!("scatter parts disagree on row shape: {prev:?} vs {t:?}")))
                }
                _ => tail = Some(t),
            }
            for &i in idx {
                if i >= rows || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::config(format!("scatter index {i} is out of range or repeated")));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::config("scatter parts do not cover every row"));
        }
        let tail = tail.ok_or_else(|| Error::config("scatter needs at least one part"))?;
        let row_len: usize = tail.iter().product();
        let mut out = vec![T::zero(); rows * row_len];
        for &(v, idx) in parts {
            let x = self.value(v).data();
            for (r, &i) in idx.iter().enumerate() {
                out[i * row_len..(i + 1) * row_len].copy_from_slice(&x[r * row_len..(r + 1) * row_len]);
            }
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let vars: Vec<Var> = parts.iter().map(|p| p.0).collect();
        let rg = self.any_grad(&vars);
        let parts = parts.iter().map(|&(v, idx)| (v, idx.to_vec())).collect();
        self.push(Tensor::new(&shape, out)?, rg, Op::ScatterRows { parts }, "scatter_rows")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, |x, y| x + y, "add")?;
        self.push(value, rg, Op::Add(a, b), "add")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (value, rg) = self.binary(a, b, |x, y| x * y, "mul")?;
        self.push(value, rg, Op::Mul(a, b), "mul")
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(T, T) -> T, name: &str) -> Result<(Tensor<T>, bool)> {
        self.check(a)?;
        self.check(b)?;
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::config(format!("{name}: shapes {:?} and {:?} differ", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&u, &v)| f(u, v)).collect();
        Ok((Tensor::new(x.shape(), data)?, self.any_grad(&[a, b])))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var> {
        self.check(input)?;
        let f = T::from_f64_lossy(factor);
        let x = self.value(input);
        let value = Tensor::new(x.shape(), x.data().iter().map(|&v| v * f).collect())?;
        let rg = self.requires_grad(input);
        self.push(value, rg, Op::Scale(input, f), "scale")
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let total = self.value(input).data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.requires_grad(input);
        self.push(Tensor::scalar(total), rg, Op::Sum(input), "sum")
    }

    /// Backpropagate from a scalar `loss`, filling gradients for every reachable
    /// node that requires them. Consumes the tape's backward capability.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.check(loss)?;
        if self.consumed {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(loss).requires_grad {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.index as usize] = Some(vec![T::one()]);
        for i in (0..=loss.index as usize).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop(i, &op, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = self.node(v);
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(grads[v.index as usize].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop(&self, node: usize, op: &Op<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let out_c = self.value(*weight).shape()[0];
                let (plen, olen) = (geom.patch_len(), geom.out_len());
                let batch = self.value(*input).rows();
                let per_out = out_c * olen;
                if let Some(db) = self.slot(grads, *bias) {
                    for (i, row) in g.chunks(olen).enumerate() {
                        let o = i % out_c;
                        db[o] = db[o] + row.iter().fold(T::zero(), |a, &v| a + v);
                    }
                }
                if let Some(dw) = self.slot(grads, *weight) {
                    // Columns are rebuilt per sample rather than cached for the whole batch.
                    let x = self.value(*input).data();
                    let in_len = geom.channels * geom.height * geom.width;
                    let mut cols = vec![T::zero(); plen * olen];
                    for s in 0..batch {
                        kernels::im2col(geom, &x[s * in_len..(s + 1) * in_len], &mut cols, olen);
                        gemm(
                            MatRef::new(&g[s * per_out..(s + 1) * per_out], out_c, olen),
                            MatRef::new(&cols, plen, olen).t(),
                            T::one(),
                            dw,
                        );
                    }
                }
                let w = self.value(*weight).data();
                if let Some(dx) = self.slot(grads, *input) {
                    let in_len = geom.channels * geom.height * geom.width;
                    let mut dcols = vec![T::zero(); plen * olen];
                    for s in 0..batch {
                        gemm(
                            MatRef::new(w, out_c, plen).t(),
                            MatRef::new(&g[s * per_out..(s + 1) * per_out], out_c, olen),
                            T::zero(),
                            &mut dcols,
                        );
                        kernels::col2im_add(geom, &dcols, olen, &mut dx[s * in_len..(s + 1) * in_len]);
                    }
                }
            }
            Op::Dense { input, weight, bias } => {
                let (batch, fin) = (self.value(*input).shape()[0], self.value(*input).shape()[1]);
                let fout = self.value(*weight).shape()[1];
                if let Some(db) = self.slot(grads, *bias) {
                    for row in g.chunks(fout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                }
                let x = self.value(*input).data();
                if let Some(dw) = self.slot(grads, *weight) {
                    gemm(MatRef::new(x, batch, fin).t(), MatRef::new(g, batch, fout), T::one(), dw);
                }
                let w = self.value(*weight).data();
                if let Some(dx) = self.slot(grads, *input) {
                    gemm(MatRef::new(g, batch, fout), MatRef::new(w, fin, fout).t(), T::one(), dx);
                }
            }
            Op::Relu(input) => {
                let x = self.value(*input).data();
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, &v), &gv) in dx.iter_mut().zip(x).zip(g) {
                        if v > T::zero() {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::MaxPool { input, argmax } => {
                let s = self.value(*input).shape();
                let area = s[2] * s[3];
                let out_area = s[2].div_ceil(2) * s[3].div_ceil(2);
                if let Some(dx) = self.slot(grads, *input) {
                    for (o, (&a, &gv)) in argmax.iter().zip(g).enumerate() {
                        let at = (o / out_area) * area + a as usize;
                        dx[at] = dx[at] + gv;
                    }
                }
            }
            Op::GlobalAvgPool(input) => {
                let s = self.value(*input).shape();
                let area = s[2] * s[3];
                let inv = T::from_f64_lossy(1.0 / area as f64);
                if let Some(dx) = self.slot(grads, *input) {
                    for (plane, &gv) in dx.chunks_mut(area).zip(g) {
                        for d in plane {
                            *d = *d + gv * inv;
                        }
                    }
                }
            }
            Op::Reshape(input) => {
                if let Some(dx) = self.slot(grads, *input) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d = *d + gv;
                    }
                }
            }
            Op::Dropout { input, mask } => {
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, &gv), &m) in dx.iter_mut().zip(g).zip(mask) {
                        *d = *d + gv * m;
                    }
                }
            }
            Op::Softmax { input, temperature } => {
                let k = self.value(*input).shape()[1];
                let probs = self.nodes[node].value.data();
                if let Some(dx) = self.slot(grads, *input) {
                    for ((d, p), gr) in dx.chunks_mut(k).zip(probs.chunks(k)).zip(g.chunks(k)) {
                        let dot = p.iter().zip(gr).fold(T::zero(), |a, (&pv, &gv)| a + pv * gv);
                        for j in 0..k {
                            d[j] = d[j] + p[j] * (gr[j] - dot) / *temperature;
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).shape()[1];
                let scale = g[0] / T::from_f64_lossy(labels.len() as f64);
                if let Some(dx) = self.slot(grads, *logits) {
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            dx[i * k + j] = dx[i * k + j] + (probs[i * k + j] - onehot) * scale;
                        }
                    }
                }
            }
            Op::InformationGain { probs, dprobs } => {
                if let Some(dx) = self.slot(grads, *probs) {
                    for (d, &v) in dx.iter_mut().zip(dprobs) {
                        *d = *d + v * g[0];
                    }
                }
            }
            Op::SelectRows { input, indices } => {
                let row = self.value(*input).row_len();
                if let Some(dx) = self.slot(grads, *input) {
                    for (r, &i) in indices.iter().enumerate() {
                        for (d, &gv) in dx[i * row..(i + 1) * row].iter_mut().zip(&g[r * row..(r + 1) * row]) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::ScatterRows { parts } => {
                for (v, idx) in parts {
                    let row = self.value(*v).row_len();
                    if let Some(dx) = self.slot(grads, *v) {
                        for (r, &i) in idx.iter().enumerate() {
                            for (d, &gv) in dx[r * row..(r + 1) * row].iter_mut().zip(&g[i * row..(i + 1) * row]) {
                                *d = *d + gv;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(dx) = self.slot(grads, v) {
                        for (d, &gv) in dx.iter_mut().zip(g) {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gv), &v) in da.iter_mut().zip(g).zip(&xb) {
                        *d = *d + gv * v;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gv), &v) in db.iter_mut().zip(g).zip(&xa) {
                        *d = *d + gv * v;
                    }
                }
            }
            Op::Scale(input, f) => {
                if let Some(dx) = self.slot(grads, *input) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d = *d + gv * *f;
                    }
                }
            }
            Op::Sum(input) => {
                if let Some(dx) = self.slot(grads, *input) {
                    for d in dx.iter_mut() {
                        *d = *d + g[0];
                    }
                }
            }
        }
        Ok(())
    }
}

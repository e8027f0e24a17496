use serde::{Deserialize, Serialize};

use super::tape::{Node, Op, Tape, Var};
use super::{check_finite, Real, Result, Tensor, TensorError, EXP_CLAMP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
    Sigmoid,
    /// `exp(min(x, 80))`.
    Exp,
}

impl Activation {
    pub fn apply<S: Real>(self, x: S) -> S {
        match self {
            Activation::Relu => x.max(S::zero()),
            Activation::Softplus => softplus(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Exp => x.min(S::lit(EXP_CLAMP)).exp(),
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative<S: Real>(self, x: S, y: S) -> S {
        match self {
            Activation::Relu => {
                if x > S::zero() {
                    S::one()
                } else {
                    S::zero()
                }
            }
            Activation::Softplus => sigmoid(x),
            Activation::Sigmoid => y * (S::one() - y),
            Activation::Exp => {
                if x < S::lit(EXP_CLAMP) {
                    y
                } else {
                    S::zero()
                }
            }
        }
    }
}

#[inline]
pub fn softplus<S: Real>(x: S) -> S {
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<S: Real>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn mismatch(op: &'static str, expected: &[usize], got: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        expected: expected.to_vec(),
        got: got.to_vec(),
    }
}

fn finish<S: Real>(
    tape: &mut Tape<S>,
    name: &'static str,
    shape: Vec<usize>,
    data: Vec<S>,
    op: Op<S>,
) -> Result<Var> {
    check_finite(name, &data)?;
    let value = Tensor::new(shape, data)?;
    Ok(tape.push(value, op, false))
}

impl<S: Real> Tape<S> {
    /// `x[B×I] · w[I×O] + b[O]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.check(x)?, self.check(w)?, self.check(b)?);
        if xv.shape().len() != 2 || wv.shape().len() != 2 {
            return Err(TensorError::Invalid(format!(
                "affine expects 2-D input and weight, got {:?} and {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let (rows, inner) = (xv.shape()[0], xv.shape()[1]);
        let (w_in, out) = (wv.shape()[0], wv.shape()[1]);
        if w_in != inner {
            return Err(mismatch("affine", &[inner, out], wv.shape()));
        }
        if bv.len() != out {
            return Err(mismatch("affine bias", &[out], bv.shape()));
        }
        let mut data = Vec::with_capacity(rows * out);
        for _ in 0..rows {
            data.extend_from_slice(bv.data());
        }
        S::gemm(
            rows,
            inner,
            out,
            S::one(),
            xv.data(),
            inner as isize,
            1,
            wv.data(),
            out as isize,
            1,
            S::one(),
            &mut data,
            out as isize,
            1,
        );
        finish(self, "affine", vec![rows, out], data, Op::Affine { x, w, b })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let xv = self.check(x)?;
        let data: Vec<S> = match (&self.relu_pattern, kind) {
            (Some(pattern), Activation::Relu) => {
                let mask = pattern.get(self.relu_seen).filter(|m| m.len() == xv.len()).ok_or_else(|| {
                    TensorError::Invalid("replayed ReLU pattern does not match the computation".into())
                })?;
                xv.data()
                    .iter()
                    .zip(mask)
                    .map(|(&v, &on)| if on { v } else { S::zero() })
                    .collect()
            }
            _ => xv.data().iter().map(|&v| kind.apply(v)).collect(),
        };
        let shape = xv.shape().to_vec();
        if kind == Activation::Relu {
            self.relu_seen += 1;
        }
        finish(self, "activation", shape, data, Op::Act { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    /// Selects rows of a `[T×F]` table. Duplicate indices accumulate on backward.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.check(table)?;
        let (rows, cols) = (tv.rows(), tv.cols());
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    bound: rows,
                });
            }
            data.extend_from_slice(tv.row(i));
        }
        finish(
            self,
            "gather_rows",
            vec![indices.len(), cols],
            data,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.check(x)?.reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, false))
    }

    /// Contiguous range of the flattened input, viewed with `shape`.
    pub fn narrow(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let xv = self.check(x)?;
        let n: usize = shape.iter().product();
        if offset + n > xv.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow",
                index: offset + n,
                bound: xv.len(),
            });
        }
        let data = xv.data()[offset..offset + n].to_vec();
        let value = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(value, Op::Narrow { x, offset }, false))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.check(x)?;
        let (rows, cols) = (xv.rows(), xv.cols());
        if start >= end || end > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                bound: cols,
            });
        }
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&xv.row(r)[start..end]);
        }
        let value = Tensor::new(vec![rows, end - start], data)?;
        Ok(self.push(value, Op::SliceCols { x, start }, false))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.check(*parts.first().ok_or_else(|| {
            TensorError::Invalid("concat_cols needs at least one input".into())
        })?)?;
        let rows = first.rows();
        let mut total = 0;
        for &p in parts {
            let pv = self.check(p)?;
            if pv.rows() != rows {
                return Err(mismatch("concat_cols", &[rows, pv.cols()], pv.shape()));
            }
            total += pv.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            false,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.check(a)?, self.check(b)?);
        if av.shape() != bv.shape() {
            return Err(mismatch("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let shape = av.shape().to_vec();
        finish(self, "add", shape, data, Op::Add { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Result<Var> {
        let xv = self.check(x)?;
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let shape = xv.shape().to_vec();
        finish(self, "scale", shape, data, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: S = self.check(x)?.data().iter().copied().sum();
        finish(self, "sum", vec![1], vec![total], Op::Sum { x })
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, pred: Var, target: &Tensor<S>) -> Result<Var> {
        let pv = self.check(pred)?;
        if pv.shape() != target.shape() {
            return Err(mismatch("mse", pv.shape(), target.shape()));
        }
        if pv.is_empty() {
            return Err(TensorError::Invalid("mse of empty tensors".into()));
        }
        let n = S::lit(pv.len() as f64);
        let total: S = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum();
        finish(
            self,
            "mse",
            vec![1],
            vec![total / n],
            Op::Mse {
                pred,
                target: target.clone(),
            },
        )
    }

    /// 3×3 convolution with zero padding 1 over a `[C, H, W]` image.
    /// Weight is `[O, C, 3, 3]`, bias `[O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xv, wv, bv) = (self.check(x)?, self.check(w)?, self.check(b)?);
        let [c, h, wd] = dims3(xv.shape(), "conv2d input")?;
        if wv.shape().len() != 4 || wv.shape()[1] != c || wv.shape()[2] != 3 || wv.shape()[3] != 3
        {
            return Err(mismatch("conv2d weight", &[0, c, 3, 3], wv.shape()));
        }
        let o = wv.shape()[0];
        if bv.len() != o || stride == 0 {
            return Err(mismatch("conv2d bias", &[o], bv.shape()));
        }
        let (ho, wo) = ((h - 1) / stride + 1, (wd - 1) / stride + 1);
        let cols = im2col(xv.data(), c, h, wd, stride, ho, wo);
        let hw = ho * wo;
        let mut data = Vec::with_capacity(o * hw);
        for &bias in bv.data() {
            data.extend(std::iter::repeat_n(bias, hw));
        }
        S::gemm(
            o,
            c * 9,
            hw,
            S::one(),
            wv.data(),
            (c * 9) as isize,
            1,
            &cols,
            hw as isize,
            1,
            S::one(),
            &mut data,
            hw as isize,
            1,
        );
        finish(
            self,
            "conv2d",
            vec![o, ho, wo],
            data,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                cols,
            },
        )
    }

    /// Nearest-neighbour ×2 upsampling of a `[C, H, W]` image.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let [c, h, w] = dims3(xv.shape(), "upsample2x")?;
        let src = xv.data();
        let mut data = vec![S::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    data[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![c, 2 * h, 2 * w], data)?;
        Ok(self.push(value, Op::Upsample2x { x }, false))
    }
}

fn dims3(shape: &[usize], op: &'static str) -> Result<[usize; 3]> {
    match shape {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(mismatch(op, &[0, 0, 0], shape)),
    }
}

fn im2col<S: Real>(
    x: &[S],
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<S> {
    let hw = ho * wo;
    let mut cols = vec![S::zero(); c * 9 * hw];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * wo + ox] = x[(ch * h + iy as usize) * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Real>(
    cols: &[S],
    c: usize,
    h: usize,
    w: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> Vec<S> {
    let hw = ho * wo;
    let mut x = vec![S::zero(); c * h * w];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * hw;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ch * h + iy as usize) * w + ix as usize] += cols[row + oy * wo + ox];
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn backward<S: Real>(
    tape: &Tape<S>,
    node: &Node<S>,
    g: &Tensor<S>,
) -> Result<Vec<(Var, Tensor<S>)>> {
    let val = |v: Var| &tape.nodes[v.0].value;
    let wants = |v: Var| tape.nodes[v.0].needs_grad;
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Affine { x, w, b } => {
            let (xv, wv) = (val(*x), val(*w));
            let (rows, inner) = (xv.shape()[0], xv.shape()[1]);
            let cols = wv.shape()[1];
            let gd = g.data();
            if wants(*x) {
                let mut dx = vec![S::zero(); rows * inner];
                // dx = g · wᵀ
                S::gemm(
                    rows,
                    cols,
                    inner,
                    S::one(),
                    gd,
                    cols as isize,
                    1,
                    wv.data(),
                    1,
                    cols as isize,
                    S::zero(),
                    &mut dx,
                    inner as isize,
                    1,
                );
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
            if wants(*w) {
                let mut dw = vec![S::zero(); inner * cols];
                // dw = xᵀ · g
                S::gemm(
                    inner,
                    rows,
                    cols,
                    S::one(),
                    xv.data(),
                    1,
                    inner as isize,
                    gd,
                    cols as isize,
                    1,
                    S::zero(),
                    &mut dw,
                    cols as isize,
                    1,
                );
                out.push((*w, Tensor::new(wv.shape().to_vec(), dw)?));
            }
            if wants(*b) {
                let mut db = vec![S::zero(); cols];
                for r in 0..rows {
                    for (acc, &v) in db.iter_mut().zip(&gd[r * cols..(r + 1) * cols]) {
                        *acc += v;
                    }
                }
                out.push((*b, Tensor::new(val(*b).shape().to_vec(), db)?));
            }
        }
        Op::Act { x, kind } => {
            let xv = val(*x);
            let data = xv
                .data()
                .iter()
                .zip(node.value.data())
                .zip(g.data())
                .map(|((&xi, &yi), &gi)| gi * kind.derivative(xi, yi))
                .collect();
            out.push((*x, Tensor::new(xv.shape().to_vec(), data)?));
        }
        Op::Gather { table, indices } => {
            let tv = val(*table);
            let cols = tv.cols();
            let mut dt = vec![S::zero(); tv.len()];
            for (k, &i) in indices.iter().enumerate() {
                let src = &g.data()[k * cols..(k + 1) * cols];
                for (acc, &v) in dt[i * cols..(i + 1) * cols].iter_mut().zip(src) {
                    *acc += v;
                }
            }
            out.push((*table, Tensor::new(tv.shape().to_vec(), dt)?));
        }
        Op::Reshape { x } => {
            out.push((*x, g.reshape(val(*x).shape())?));
        }
        Op::Narrow { x, offset } => {
            let xv = val(*x);
            let mut dx = vec![S::zero(); xv.len()];
            dx[*offset..*offset + g.len()].copy_from_slice(g.data());
            out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
        }
        Op::SliceCols { x, start } => {
            let xv = val(*x);
            let (rows, cols) = (xv.rows(), xv.cols());
            let width = g.cols();
            let mut dx = vec![S::zero(); xv.len()];
            for r in 0..rows {
                dx[r * cols + start..r * cols + start + width].copy_from_slice(g.row(r));
            }
            out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
        }
        Op::ConcatCols { parts } => {
            let rows = g.rows();
            let mut offset = 0;
            for &p in parts {
                let pv = val(p);
                let width = pv.cols();
                if wants(p) {
                    let mut dp = Vec::with_capacity(pv.len());
                    for r in 0..rows {
                        dp.extend_from_slice(&g.row(r)[offset..offset + width]);
                    }
                    out.push((p, Tensor::new(pv.shape().to_vec(), dp)?));
                }
                offset += width;
            }
        }
        Op::Add { a, b } => {
            out.push((*a, g.clone()));
            out.push((*b, g.clone()));
        }
        Op::Scale { x, factor } => {
            out.push((*x, g.map(|v| v * *factor)));
        }
        Op::Sum { x } => {
            out.push((*x, Tensor::full(val(*x).shape(), g.item())));
        }
        Op::Mse { pred, target } => {
            let pv = val(*pred);
            let k = S::lit(2.0) * g.item() / S::lit(pv.len() as f64);
            let data = pv
                .data()
                .iter()
                .zip(target.data())
                .map(|(&a, &b)| k * (a - b))
                .collect();
            out.push((*pred, Tensor::new(pv.shape().to_vec(), data)?));
        }
        Op::Conv2d {
            x,
            w,
            b,
            stride,
            cols,
        } => {
            let (xv, wv) = (val(*x), val(*w));
            let [c, h, wd] = dims3(xv.shape(), "conv2d input")?;
            let o = wv.shape()[0];
            let [_, ho, wo] = dims3(g.shape(), "conv2d grad")?;
            let hw = ho * wo;
            let k = c * 9;
            if wants(*w) {
                let mut dw = vec![S::zero(); o * k];
                // dw = g · colsᵀ
                S::gemm(
                    o,
                    hw,
                    k,
                    S::one(),
                    g.data(),
                    hw as isize,
                    1,
                    cols,
                    1,
                    hw as isize,
                    S::zero(),
                    &mut dw,
                    k as isize,
                    1,
                );
                out.push((*w, Tensor::new(wv.shape().to_vec(), dw)?));
            }
            if wants(*b) {
                let db = (0..o)
                    .map(|oc| g.data()[oc * hw..(oc + 1) * hw].iter().copied().sum())
                    .collect();
                out.push((*b, Tensor::new(vec![o], db)?));
            }
            if wants(*x) {
                let mut dcols = vec![S::zero(); k * hw];
                // dcols = wᵀ · g
                S::gemm(
                    k,
                    o,
                    hw,
                    S::one(),
                    wv.data(),
                    1,
                    k as isize,
                    g.data(),
                    hw as isize,
                    1,
                    S::zero(),
                    &mut dcols,
                    hw as isize,
                    1,
                );
                let dx = col2im(&dcols, c, h, wd, *stride, ho, wo);
                out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
            }
        }
        Op::Upsample2x { x } => {
            let xv = val(*x);
            let [c, h, w] = dims3(xv.shape(), "upsample2x")?;
            let mut dx = vec![S::zero(); xv.len()];
            let gd = g.data();
            for ch in 0..c {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        dx[(ch * h + y / 2) * w + xx / 2] += gd[(ch * 2 * h + y) * 2 * w + xx];
                    }
                }
            }
            out.push((*x, Tensor::new(xv.shape().to_vec(), dx)?));
        }
        Op::Custom { inputs, op } => {
            let values: Vec<&Tensor<S>> = inputs.iter().map(|&v| val(v)).collect();
            let flags: Vec<bool> = inputs.iter().map(|&v| wants(v)).collect();
            let grads = op.backward(&values, &flags, &node.value, g);
            for (&v, dg) in inputs.iter().zip(grads) {
                if let Some(dg) = dg {
                    if dg.shape() != val(v).shape() {
                        return Err(mismatch(op.name(), val(v).shape(), dg.shape()));
                    }
                    out.push((v, dg));
                }
            }
        }
    }
    Ok(out)
}

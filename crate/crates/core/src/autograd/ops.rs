//! Differentiable primitives: forward constructors on [`Var`] and the
//! matching backward rules.

use std::rc::Rc;

use super::kernels::{self, AxisLayout, Dims4};
use super::{NodeId, Var};
use crate::error::{AutogradError, ShapeError};
use crate::tensor::{axis_extents, Scalar, Tensor};

type R<'t, T> = Result<Var<'t, T>, AutogradError>;

/// Kind tag of a recorded op, with the sizes the profiler needs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Reshape,
    Transpose,
    Add,
    Mul,
    Scale,
    AddBias,
    Sum,
    Mean,
    /// Contraction width `k`: each output element costs `k` MACs.
    Matmul { k: usize },
    Conv2d { c_in: usize, k: usize },
    ConvTranspose2d { c_in: usize, k: usize },
    Concat,
    LayerNorm,
    BatchNorm { train: bool },
    LeakyRelu,
    Sigmoid,
    MaxPool2d,
    Upsample,
    Bce,
    Dice { squared: bool },
    WeightedSum,
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Reshape { x: NodeId },
    Transpose { x: NodeId, a: usize, b: usize },
    Add { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, s: T },
    AddBias { x: NodeId, bias: NodeId, axis: usize },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Matmul { a: NodeId, b: NodeId },
    Conv2d { x: NodeId, w: NodeId, k: usize },
    ConvT2 { x: NodeId, w: NodeId },
    Concat { a: NodeId, b: NodeId, axis: usize },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, axis: usize, xhat: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, axis: usize, xhat: Vec<T>, rstd: Vec<T>, train: bool },
    LeakyRelu { x: NodeId, slope: T },
    Sigmoid { x: NodeId },
    MaxPool2 { x: NodeId, arg: Vec<u32> },
    Upsample { x: NodeId },
    Bce { p: NodeId, y: Rc<Tensor<T>>, eps: T },
    Dice { p: NodeId, y: Rc<Tensor<T>>, smooth: T, squared: bool },
    WeightedSum { terms: Vec<(NodeId, T)> },
}

impl<T: Scalar> Op<T> {
    pub fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Reshape { x } | Transpose { x, .. } | Scale { x, .. } | Sum { x } | Mean { x } => vec![*x],
            LeakyRelu { x, .. } | Sigmoid { x } | MaxPool2 { x, .. } | Upsample { x } => vec![*x],
            Add { a, b } | Mul { a, b } | Matmul { a, b } | Concat { a, b, .. } => vec![*a, *b],
            AddBias { x, bias, .. } => vec![*x, *bias],
            Conv2d { x, w, .. } | ConvT2 { x, w } => vec![*x, *w],
            LayerNorm { x, gamma, beta, .. } | BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Bce { p, .. } | Dice { p, .. } => vec![*p],
            WeightedSum { terms } => terms.iter().map(|t| t.0).collect(),
        }
    }

    /// Contraction widths are left at 0; `Tape::nodes` fills them from input shapes.
    pub fn kind(&self) -> OpKind {
        use Op::*;
        match self {
            Leaf => OpKind::Leaf,
            Reshape { .. } => OpKind::Reshape,
            Transpose { .. } => OpKind::Transpose,
            Add { .. } => OpKind::Add,
            Mul { .. } => OpKind::Mul,
            Scale { .. } => OpKind::Scale,
            AddBias { .. } => OpKind::AddBias,
            Sum { .. } => OpKind::Sum,
            Mean { .. } => OpKind::Mean,
            Matmul { .. } => OpKind::Matmul { k: 0 },
            Conv2d { k, .. } => OpKind::Conv2d { c_in: 0, k: *k },
            ConvT2 { .. } => OpKind::ConvTranspose2d { c_in: 0, k: 2 },
            Concat { .. } => OpKind::Concat,
            LayerNorm { .. } => OpKind::LayerNorm,
            BatchNorm { train, .. } => OpKind::BatchNorm { train: *train },
            LeakyRelu { .. } => OpKind::LeakyRelu,
            Sigmoid { .. } => OpKind::Sigmoid,
            MaxPool2 { .. } => OpKind::MaxPool2d,
            Upsample { .. } => OpKind::Upsample,
            Bce { .. } => OpKind::Bce,
            Dice { squared, .. } => OpKind::Dice { squared: *squared },
            WeightedSum { .. } => OpKind::WeightedSum,
        }
    }

    /// Gradients for each input that requires one.
    pub fn backward<'a>(
        &self,
        g: &Tensor<T>,
        out: &Tensor<T>,
        value: &dyn Fn(NodeId) -> &'a Tensor<T>,
        needs: &dyn Fn(NodeId) -> bool,
    ) -> Vec<(NodeId, Tensor<T>)>
    where
        T: 'a,
    {
        use Op::*;
        let mut res = Vec::new();
        let like = |id: NodeId, data: Vec<T>| Tensor::from_parts(value(id).shape().to_vec(), data);
        match self {
            Leaf => {}
            Reshape { x } => res.push((*x, like(*x, g.data().to_vec()))),
            Transpose { x, a, b } => {
                let data = transpose_data(g.data(), g.shape(), *a, *b);
                res.push((*x, like(*x, data)));
            }
            Add { a, b } => {
                if needs(*a) {
                    res.push((*a, g.clone()));
                }
                if needs(*b) {
                    res.push((*b, g.clone()));
                }
            }
            Mul { a, b } => {
                let (av, bv) = (value(*a), value(*b));
                if needs(*a) {
                    let d = g.data().iter().zip(bv.data()).map(|(&gv, &y)| gv * y).collect();
                    res.push((*a, like(*a, d)));
                }
                if needs(*b) {
                    let d = g.data().iter().zip(av.data()).map(|(&gv, &y)| gv * y).collect();
                    res.push((*b, like(*b, d)));
                }
            }
            Scale { x, s } => res.push((*x, like(*x, g.data().iter().map(|&v| v * *s).collect()))),
            AddBias { x, bias, axis } => {
                if needs(*x) {
                    res.push((*x, g.clone()));
                }
                if needs(*bias) {
                    let (outer, c, inner) = axis_extents(g.shape(), *axis);
                    let l = AxisLayout { outer, c, inner };
                    res.push((*bias, like(*bias, kernels::channel_sum(g.data(), None, l))));
                }
            }
            Sum { x } => {
                let n = value(*x).numel();
                res.push((*x, like(*x, vec![g.data()[0]; n])));
            }
            Mean { x } => {
                let n = value(*x).numel();
                res.push((*x, like(*x, vec![g.data()[0] / T::from_usize(n); n])));
            }
            Matmul { a, b } => {
                let (av, bv) = (value(*a), value(*b));
                let kk = bv.shape()[0];
                let nn = bv.shape()[1];
                let rows = av.numel() / kk;
                if needs(*a) {
                    let mut ga = vec![T::zero(); av.numel()];
                    for r in 0..rows {
                        let grow = &g.data()[r * nn..(r + 1) * nn];
                        for k in 0..kk {
                            let brow = &bv.data()[k * nn..(k + 1) * nn];
                            let mut acc = T::zero();
                            for (&x, &y) in grow.iter().zip(brow) {
                                acc += x * y;
                            }
                            ga[r * kk + k] = acc;
                        }
                    }
                    res.push((*a, like(*a, ga)));
                }
                if needs(*b) {
                    let mut gb = vec![T::zero(); bv.numel()];
                    for r in 0..rows {
                        let grow = &g.data()[r * nn..(r + 1) * nn];
                        for k in 0..kk {
                            let s = av.data()[r * kk + k];
                            for (o, &gv) in gb[k * nn..(k + 1) * nn].iter_mut().zip(grow) {
                                *o += s * gv;
                            }
                        }
                    }
                    res.push((*b, like(*b, gb)));
                }
            }
            Conv2d { x, w, k } => {
                let (xv, wv) = (value(*x), value(*w));
                let xd = Dims4::from_shape(xv.shape()).expect("conv input rank");
                let co = wv.shape()[0];
                if needs(*x) {
                    let gx = kernels::conv2d_backward_input(g.data(), xd, wv.data(), co, *k);
                    res.push((*x, like(*x, gx)));
                }
                if needs(*w) {
                    let gw = kernels::conv2d_backward_weight(g.data(), xv.data(), xd, co, *k);
                    res.push((*w, like(*w, gw)));
                }
            }
            ConvT2 { x, w } => {
                let (xv, wv) = (value(*x), value(*w));
                let xd = Dims4::from_shape(xv.shape()).expect("conv input rank");
                let co = wv.shape()[1];
                let (gx, gw) = kernels::conv_t2_backward(g.data(), xv.data(), xd, wv.data(), co);
                if needs(*x) {
                    res.push((*x, like(*x, gx)));
                }
                if needs(*w) {
                    res.push((*w, like(*w, gw)));
                }
            }
            Concat { a, b, axis } => {
                let (outer, ca, inner) = axis_extents(value(*a).shape(), *axis);
                let cb = value(*b).shape()[*axis];
                let mut ga = Vec::with_capacity(outer * ca * inner);
                let mut gb = Vec::with_capacity(outer * cb * inner);
                for o in 0..outer {
                    let base = o * (ca + cb) * inner;
                    ga.extend_from_slice(&g.data()[base..base + ca * inner]);
                    gb.extend_from_slice(&g.data()[base + ca * inner..base + (ca + cb) * inner]);
                }
                if needs(*a) {
                    res.push((*a, like(*a, ga)));
                }
                if needs(*b) {
                    res.push((*b, like(*b, gb)));
                }
            }
            LayerNorm { x, gamma, beta, axis, xhat, rstd } | BatchNorm { x, gamma, beta, axis, xhat, rstd, .. } => {
                let (outer, c, inner) = axis_extents(g.shape(), *axis);
                let l = AxisLayout { outer, c, inner };
                let gam = value(*gamma).data();
                if needs(*x) {
                    let mut gy_hat = g.data().to_vec();
                    for o in 0..outer {
                        for ch in 0..c {
                            let base = l.at(o, ch, 0);
                            for v in &mut gy_hat[base..base + inner] {
                                *v *= gam[ch];
                            }
                        }
                    }
                    let gx = match self {
                        LayerNorm { .. } => kernels::layer_norm_backward(&gy_hat, xhat, rstd, l),
                        BatchNorm { train: true, .. } => kernels::batch_norm_backward(&gy_hat, xhat, rstd, l),
                        _ => {
                            // eval mode: affine map with fixed statistics
                            let mut gx = gy_hat;
                            for o in 0..outer {
                                for ch in 0..c {
                                    let base = l.at(o, ch, 0);
                                    for v in &mut gx[base..base + inner] {
                                        *v *= rstd[ch];
                                    }
                                }
                            }
                            gx
                        }
                    };
                    res.push((*x, like(*x, gx)));
                }
                if needs(*gamma) {
                    res.push((*gamma, like(*gamma, kernels::channel_sum(g.data(), Some(xhat), l))));
                }
                if needs(*beta) {
                    res.push((*beta, like(*beta, kernels::channel_sum(g.data(), None, l))));
                }
            }
            LeakyRelu { x, slope } => {
                let xv = value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| if v >= T::zero() { gv } else { gv * *slope })
                    .collect();
                res.push((*x, like(*x, d)));
            }
            Sigmoid { x } => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                res.push((*x, like(*x, d)));
            }
            MaxPool2 { x, arg } => {
                let mut gx = vec![T::zero(); value(*x).numel()];
                for (&a, &gv) in arg.iter().zip(g.data()) {
                    gx[a as usize] += gv;
                }
                res.push((*x, like(*x, gx)));
            }
            Upsample { x } => {
                let xd = Dims4::from_shape(value(*x).shape()).expect("upsample rank");
                let gx = kernels::upsample_backward(g.data(), xd, out.shape()[2], out.shape()[3]);
                res.push((*x, like(*x, gx)));
            }
            Bce { p, y, eps } => {
                let pv = value(*p);
                let n = T::from_usize(pv.numel());
                let hi = T::one() - *eps;
                let gs = g.data()[0] / n;
                let d = pv
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&pp, &yy)| {
                        if pp < *eps || pp > hi {
                            T::zero()
                        } else {
                            -gs * (yy / pp - (T::one() - yy) / (T::one() - pp))
                        }
                    })
                    .collect();
                res.push((*p, like(*p, d)));
            }
            Dice { p, y, smooth, squared } => {
                let pv = value(*p);
                let b = pv.shape()[0];
                let per = pv.numel() / b;
                let gs = g.data()[0] / T::from_usize(b);
                let mut d = vec![T::zero(); pv.numel()];
                for s in 0..b {
                    let ps = &pv.data()[s * per..(s + 1) * per];
                    let ys = &y.data()[s * per..(s + 1) * per];
                    let (i, sp, sy) = dice_sums(ps, ys);
                    let two = T::from_f64(2.0);
                    for (j, &yy) in ys.iter().enumerate() {
                        // d(1 - num/den) = -(num' den - num den') / den^2
                        let (num, den, dnum, dden) = if *squared {
                            (
                                two * i * i + *smooth,
                                sp * sp + sy * sy + *smooth,
                                two * two * i * yy,
                                two * sp,
                            )
                        } else {
                            (two * i + *smooth, sp + sy + *smooth, two * yy, T::one())
                        };
                        d[s * per + j] = -gs * (dnum * den - num * dden) / (den * den);
                    }
                }
                res.push((*p, like(*p, d)));
            }
            WeightedSum { terms } => {
                for &(id, w) in terms {
                    if needs(id) {
                        res.push((id, like(id, vec![g.data()[0] * w])));
                    }
                }
            }
        }
        res
    }
}

fn dice_sums<T: Scalar>(p: &[T], y: &[T]) -> (T, T, T) {
    let mut i = T::zero();
    let mut sp = T::zero();
    let mut sy = T::zero();
    for (&a, &b) in p.iter().zip(y) {
        i += a * b;
        sp += a;
        sy += b;
    }
    (i, sp, sy)
}

fn check_axis(shape: &[usize], axis: usize) -> Result<(), ShapeError> {
    if axis >= shape.len() {
        return Err(ShapeError::AxisOutOfRange {
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

fn check_same(a: &[usize], b: &[usize]) -> Result<(), ShapeError> {
    if a != b {
        return Err(ShapeError::Mismatch {
            left: a.to_vec(),
            right: b.to_vec(),
        });
    }
    Ok(())
}

fn check_channel_vec(v: &Tensor<impl Scalar>, c: usize) -> Result<(), ShapeError> {
    if v.shape() != [c] {
        return Err(ShapeError::Channels {
            expected: c,
            found: v.numel(),
        });
    }
    Ok(())
}

fn dims4(shape: &[usize]) -> Result<Dims4, ShapeError> {
    Dims4::from_shape(shape).ok_or(ShapeError::Rank {
        expected: 4,
        shape: shape.to_vec(),
    })
}

/// Swap axes `a` and `b` of row-major `data`.
pub(crate) fn transpose_data<T: Scalar>(data: &[T], shape: &[usize], a: usize, b: usize) -> Vec<T> {
    if a == b {
        return data.to_vec();
    }
    let (a, b) = (a.min(b), a.max(b));
    let outer: usize = shape[..a].iter().product();
    let da = shape[a];
    let mid: usize = shape[a + 1..b].iter().product();
    let db = shape[b];
    let inner: usize = shape[b + 1..].iter().product();
    let mut out = vec![T::zero(); data.len()];
    for o in 0..outer {
        for i in 0..da {
            for m in 0..mid {
                for j in 0..db {
                    let src = (((o * da + i) * mid + m) * db + j) * inner;
                    let dst = (((o * db + j) * mid + m) * da + i) * inner;
                    out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
                }
            }
        }
    }
    out
}

impl<'t, T: Scalar> Var<'t, T> {
    fn unary(&self, value: Tensor<T>, op: Op<T>) -> R<'t, T> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg, None)
    }

    fn nary(&self, others: &[&Var<'t, T>], value: Tensor<T>, op: Op<T>) -> R<'t, T> {
        let rg = self.requires_grad() || others.iter().any(|v| v.requires_grad());
        self.tape.push(value, op, rg, None)
    }

    pub fn reshape(&self, shape: &[usize]) -> R<'t, T> {
        let v = self.val()?.reshape(shape)?;
        self.unary(v, Op::Reshape { x: self.id })
    }

    pub fn transpose(&self, a: usize, b: usize) -> R<'t, T> {
        let x = self.val()?;
        check_axis(x.shape(), a)?;
        check_axis(x.shape(), b)?;
        let mut shape = x.shape().to_vec();
        shape.swap(a, b);
        let data = transpose_data(x.data(), x.shape(), a, b);
        self.unary(Tensor::from_parts(shape, data), Op::Transpose { x: self.id, a, b })
    }

    pub fn add(&self, other: &Var<'t, T>) -> R<'t, T> {
        let (a, b) = (self.val()?, other.val()?);
        check_same(a.shape(), b.shape())?;
        let d = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        self.nary(
            &[other],
            Tensor::from_parts(a.shape().to_vec(), d),
            Op::Add { a: self.id, b: other.id },
        )
    }

    pub fn mul(&self, other: &Var<'t, T>) -> R<'t, T> {
        let (a, b) = (self.val()?, other.val()?);
        check_same(a.shape(), b.shape())?;
        let d = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        self.nary(
            &[other],
            Tensor::from_parts(a.shape().to_vec(), d),
            Op::Mul { a: self.id, b: other.id },
        )
    }

    pub fn scale(&self, s: T) -> R<'t, T> {
        let v = self.val()?.map(|x| x * s);
        self.unary(v, Op::Scale { x: self.id, s })
    }

    /// Add a `[C]` bias along `axis` (the one permitted broadcast).
    pub fn add_bias(&self, bias: &Var<'t, T>, axis: usize) -> R<'t, T> {
        let x = self.val()?;
        check_axis(x.shape(), axis)?;
        let bv = bias.val()?;
        let (outer, c, inner) = axis_extents(x.shape(), axis);
        check_channel_vec(&bv, c)?;
        let mut d = x.data().to_vec();
        let l = AxisLayout { outer, c, inner };
        for o in 0..outer {
            for ch in 0..c {
                let base = l.at(o, ch, 0);
                for v in &mut d[base..base + inner] {
                    *v += bv.data()[ch];
                }
            }
        }
        self.nary(
            &[bias],
            Tensor::from_parts(x.shape().to_vec(), d),
            Op::AddBias { x: self.id, bias: bias.id, axis },
        )
    }

    pub fn sum(&self) -> R<'t, T> {
        let s = self.val()?.data().iter().copied().sum();
        self.unary(Tensor::scalar(s), Op::Sum { x: self.id })
    }

    pub fn mean(&self) -> R<'t, T> {
        let x = self.val()?;
        let s: T = x.data().iter().copied().sum();
        self.unary(Tensor::scalar(s / T::from_usize(x.numel())), Op::Mean { x: self.id })
    }

    /// `[.., M, K] x [K, N] -> [.., M, N]`; `other` carries no batch axes.
    pub fn matmul(&self, other: &Var<'t, T>) -> R<'t, T> {
        let (a, b) = (self.val()?, other.val()?);
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() < 2 || bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(ShapeError::InnerDim {
                left: ash.to_vec(),
                right: bsh.to_vec(),
            }
            .into());
        }
        let (kk, nn) = (bsh[0], bsh[1]);
        let rows = a.numel() / kk;
        let mut out = vec![T::zero(); rows * nn];
        for r in 0..rows {
            let orow = &mut out[r * nn..(r + 1) * nn];
            for k in 0..kk {
                let s = a.data()[r * kk + k];
                for (o, &bv) in orow.iter_mut().zip(&b.data()[k * nn..(k + 1) * nn]) {
                    *o += s * bv;
                }
            }
        }
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = nn;
        self.nary(
            &[other],
            Tensor::from_parts(shape, out),
            Op::Matmul { a: self.id, b: other.id },
        )
    }

    /// Stride-1 same-padded cross-correlation with `w: [C_out, C_in, k, k]`, odd `k`.
    pub fn conv2d(&self, w: &Var<'t, T>) -> R<'t, T> {
        let (x, wv) = (self.val()?, w.val()?);
        let xd = dims4(x.shape())?;
        let ws = wv.shape();
        if ws.len() != 4 || ws[2] != ws[3] || ws[2] % 2 == 0 {
            return Err(ShapeError::Rank {
                expected: 4,
                shape: ws.to_vec(),
            }
            .into());
        }
        if ws[1] != xd.c {
            return Err(ShapeError::Channels {
                expected: ws[1],
                found: xd.c,
            }
            .into());
        }
        let (co, k) = (ws[0], ws[2]);
        let out = kernels::conv2d_forward(x.data(), xd, wv.data(), co, k);
        self.nary(
            &[w],
            Tensor::from_parts(vec![xd.b, co, xd.h, xd.w], out),
            Op::Conv2d { x: self.id, w: w.id, k },
        )
    }

    /// Kernel-2 stride-2 transposed convolution with `w: [C_in, C_out, 2, 2]`.
    pub fn conv_transpose2x2(&self, w: &Var<'t, T>) -> R<'t, T> {
        let (x, wv) = (self.val()?, w.val()?);
        let xd = dims4(x.shape())?;
        let ws = wv.shape();
        if ws.len() != 4 || ws[2] != 2 || ws[3] != 2 {
            return Err(ShapeError::Rank {
                expected: 4,
                shape: ws.to_vec(),
            }
            .into());
        }
        if ws[0] != xd.c {
            return Err(ShapeError::Channels {
                expected: ws[0],
                found: xd.c,
            }
            .into());
        }
        let co = ws[1];
        let out = kernels::conv_t2_forward(x.data(), xd, wv.data(), co);
        self.nary(
            &[w],
            Tensor::from_parts(vec![xd.b, co, 2 * xd.h, 2 * xd.w], out),
            Op::ConvT2 { x: self.id, w: w.id },
        )
    }

    /// Concatenate along `axis`; all other dims must agree.
    pub fn concat(&self, other: &Var<'t, T>, axis: usize) -> R<'t, T> {
        let (a, b) = (self.val()?, other.val()?);
        check_axis(a.shape(), axis)?;
        let mut sa = a.shape().to_vec();
        let mut sb = b.shape().to_vec();
        if sa.len() != sb.len() {
            return Err(ShapeError::Mismatch { left: sa, right: sb }.into());
        }
        let (ca, cb) = (sa[axis], sb[axis]);
        sa[axis] = 0;
        sb[axis] = 0;
        check_same(&sa, &sb)?;
        let (outer, _, inner) = axis_extents(a.shape(), axis);
        let mut d = Vec::with_capacity(a.numel() + b.numel());
        for o in 0..outer {
            d.extend_from_slice(&a.data()[o * ca * inner..(o + 1) * ca * inner]);
            d.extend_from_slice(&b.data()[o * cb * inner..(o + 1) * cb * inner]);
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = ca + cb;
        self.nary(
            &[other],
            Tensor::from_parts(shape, d),
            Op::Concat { a: self.id, b: other.id, axis },
        )
    }

    fn affine_out(x: &[usize], xhat: &[T], gamma: &[T], beta: &[T], l: AxisLayout) -> Tensor<T> {
        let mut d = vec![T::zero(); xhat.len()];
        for o in 0..l.outer {
            for ch in 0..l.c {
                let base = l.at(o, ch, 0);
                for i in base..base + l.inner {
                    d[i] = gamma[ch] * xhat[i] + beta[ch];
                }
            }
        }
        Tensor::from_parts(x.to_vec(), d)
    }

    fn norm_inputs(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        axis: usize,
    ) -> Result<(Rc<Tensor<T>>, Rc<Tensor<T>>, Rc<Tensor<T>>, AxisLayout), AutogradError> {
        let x = self.val()?;
        check_axis(x.shape(), axis)?;
        let (outer, c, inner) = axis_extents(x.shape(), axis);
        let (g, b) = (gamma.val()?, beta.val()?);
        check_channel_vec(&g, c)?;
        check_channel_vec(&b, c)?;
        Ok((x, g, b, AxisLayout { outer, c, inner }))
    }

    /// Standardize over `axis` at every other position, then `gamma * xhat + beta`.
    pub fn layer_norm(&self, gamma: &Var<'t, T>, beta: &Var<'t, T>, axis: usize, eps: T) -> R<'t, T> {
        let (x, g, b, l) = self.norm_inputs(gamma, beta, axis)?;
        let (xhat, rstd) = kernels::layer_norm_forward(x.data(), l, eps);
        let out = Self::affine_out(x.shape(), &xhat, g.data(), b.data(), l);
        self.nary(
            &[gamma, beta],
            out,
            Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, axis, xhat, rstd },
        )
    }

    /// Train-mode batch norm: per-channel statistics over all other axes.
    /// Also returns the batch mean and biased variance per channel.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm_train(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        axis: usize,
        eps: T,
    ) -> Result<(Var<'t, T>, Vec<T>, Vec<T>), AutogradError> {
        let (x, g, b, l) = self.norm_inputs(gamma, beta, axis)?;
        let (mean, var) = kernels::channel_stats(x.data(), l);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = normalize_with(x.data(), &mean, &rstd, l);
        let out = Self::affine_out(x.shape(), &xhat, g.data(), b.data(), l);
        let v = self.nary(
            &[gamma, beta],
            out,
            Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, axis, xhat, rstd, train: true },
        )?;
        Ok((v, mean, var))
    }

    /// Eval-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        &self,
        gamma: &Var<'t, T>,
        beta: &Var<'t, T>,
        axis: usize,
        eps: T,
        running_mean: &[T],
        running_var: &[T],
    ) -> R<'t, T> {
        let (x, g, b, l) = self.norm_inputs(gamma, beta, axis)?;
        if running_mean.len() != l.c || running_var.len() != l.c {
            return Err(ShapeError::Channels {
                expected: l.c,
                found: running_mean.len(),
            }
            .into());
        }
        let rstd: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xhat = normalize_with(x.data(), running_mean, &rstd, l);
        let out = Self::affine_out(x.shape(), &xhat, g.data(), b.data(), l);
        self.nary(
            &[gamma, beta],
            out,
            Op::BatchNorm { x: self.id, gamma: gamma.id, beta: beta.id, axis, xhat, rstd, train: false },
        )
    }

    /// `x` where `x >= 0`, else `slope * x`. `slope = 0` gives ReLU.
    pub fn leaky_relu(&self, slope: T) -> R<'t, T> {
        let v = self.val()?.map(|x| if x >= T::zero() { x } else { x * slope });
        self.unary(v, Op::LeakyRelu { x: self.id, slope })
    }

    pub fn relu(&self) -> R<'t, T> {
        self.leaky_relu(T::zero())
    }

    pub fn sigmoid(&self) -> R<'t, T> {
        let v = self.val()?.map(sigmoid);
        self.unary(v, Op::Sigmoid { x: self.id })
    }

    pub fn max_pool2d(&self) -> R<'t, T> {
        let x = self.val()?;
        let xd = dims4(x.shape())?;
        if xd.h % 2 != 0 || xd.w % 2 != 0 {
            return Err(ShapeError::OddSpatial { h: xd.h, w: xd.w }.into());
        }
        let (out, arg) = kernels::maxpool2_forward(x.data(), xd);
        self.unary(
            Tensor::from_parts(vec![xd.b, xd.c, xd.h / 2, xd.w / 2], out),
            Op::MaxPool2 { x: self.id, arg },
        )
    }

    /// Bilinear resize (align_corners=false) of a `[B,C,H,W]` tensor.
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> R<'t, T> {
        let x = self.val()?;
        let xd = dims4(x.shape())?;
        if oh == 0 || ow == 0 {
            return Err(ShapeError::InvalidShape(vec![xd.b, xd.c, oh, ow]).into());
        }
        let out = kernels::upsample_forward(x.data(), xd, oh, ow);
        self.unary(
            Tensor::from_parts(vec![xd.b, xd.c, oh, ow], out),
            Op::Upsample { x: self.id },
        )
    }

    pub fn upsample2x(&self) -> R<'t, T> {
        let s = self.shape();
        let xd = dims4(&s)?;
        self.upsample_bilinear(2 * xd.h, 2 * xd.w)
    }

    /// Mean binary cross-entropy of probabilities against `target`, with `p`
    /// clamped to `[eps, 1 - eps]` (zero gradient where the clamp is active).
    pub fn bce(&self, target: &Tensor<T>, eps: T) -> R<'t, T> {
        let p = self.val()?;
        check_same(p.shape(), target.shape())?;
        let hi = T::one() - eps;
        let mut acc = T::zero();
        for (&pp, &yy) in p.data().iter().zip(target.data()) {
            let pc = pp.max(eps).min(hi);
            acc += yy * pc.ln() + (T::one() - yy) * (T::one() - pc).ln();
        }
        let loss = -acc / T::from_usize(p.numel());
        self.unary(
            Tensor::scalar(loss),
            Op::Bce { p: self.id, y: Rc::new(target.clone()), eps },
        )
    }

    /// Dice loss averaged over the leading (sample) axis.
    /// Plain: `1 - (2I + s) / (P + Y + s)`; squared: `1 - (2I² + s) / (P² + Y² + s)`.
    pub fn dice(&self, target: &Tensor<T>, smooth: T, squared: bool) -> R<'t, T> {
        let p = self.val()?;
        check_same(p.shape(), target.shape())?;
        let b = p.shape()[0];
        let per = p.numel() / b;
        let two = T::from_f64(2.0);
        let mut total = T::zero();
        for s in 0..b {
            let (i, sp, sy) = dice_sums(&p.data()[s * per..(s + 1) * per], &target.data()[s * per..(s + 1) * per]);
            let ratio = if squared {
                (two * i * i + smooth) / (sp * sp + sy * sy + smooth)
            } else {
                (two * i + smooth) / (sp + sy + smooth)
            };
            total += T::one() - ratio;
        }
        self.unary(
            Tensor::scalar(total / T::from_usize(b)),
            Op::Dice { p: self.id, y: Rc::new(target.clone()), smooth, squared },
        )
    }

    /// `Σ wᵢ·xᵢ` over one-element vars.
    pub fn weighted_sum(terms: &[(Var<'t, T>, T)]) -> R<'t, T> {
        let first = terms.first().ok_or(ShapeError::Empty)?;
        let mut acc = T::zero();
        for (v, w) in terms {
            let x = v.val()?;
            if x.numel() != 1 {
                return Err(ShapeError::Mismatch {
                    left: x.shape().to_vec(),
                    right: vec![1],
                }
                .into());
            }
            acc += *w * x.item();
        }
        let rg = terms.iter().any(|(v, _)| v.requires_grad());
        first.0.tape.push(
            Tensor::scalar(acc),
            Op::WeightedSum {
                terms: terms.iter().map(|(v, w)| (v.id, *w)).collect(),
            },
            rg,
            None,
        )
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn normalize_with<T: Scalar>(x: &[T], mean: &[T], rstd: &[T], l: AxisLayout) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for o in 0..l.outer {
        for ch in 0..l.c {
            let base = l.at(o, ch, 0);
            for i in base..base + l.inner {
                out[i] = (x[i] - mean[ch]) * rstd[ch];
            }
        }
    }
    out
}

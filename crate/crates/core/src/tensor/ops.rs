//! Elementwise, reduction, linear-algebra and layout ops with backward rules.

use super::{numel, Element, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

/// How the operands of a binary op line up.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// rhs has a singleton trailing axis repeated `k` times.
    Rhs(usize),
    /// lhs has a singleton trailing axis repeated `k` times.
    Lhs(usize),
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Broadcast, Vec<usize>)> {
    if a == b {
        return Ok((Broadcast::Same, a.to_vec()));
    }
    let lead_match = |x: &[usize], y: &[usize]| {
        x.len() == y.len() && !x.is_empty() && x[..x.len() - 1] == y[..y.len() - 1]
    };
    if lead_match(a, b) {
        if b[b.len() - 1] == 1 {
            return Ok((Broadcast::Rhs(a[a.len() - 1]), a.to_vec()));
        }
        if a[a.len() - 1] == 1 {
            return Ok((Broadcast::Lhs(b[b.len() - 1]), b.to_vec()));
        }
    }
    Err(Error::shape(op, a, b))
}

/// Sums groups of `k` consecutive elements (undoes a trailing broadcast).
fn sum_groups<F: Element>(v: Vec<F>, k: usize, shape: Vec<usize>) -> Tensor<F> {
    let out = v.chunks(k).map(|c| c.iter().copied().sum()).collect();
    Tensor::from_parts(shape, out)
}

/// Splits `shape` around `axis` into (outer, extent, inner) element counts.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<'t, F: Element> Var<'t, F> {
    fn check_same_tape(&self, other: &Var<'t, F>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary(
        &self,
        rhs: &Var<'t, F>,
        op: &'static str,
        f: impl Fn(F, F) -> F,
        // (a, b, g) -> (da, db)
        df: impl Fn(F, F, F) -> (F, F) + 'static,
    ) -> Result<Var<'t, F>> {
        self.check_same_tape(rhs);
        let a = self.value();
        let b = rhs.value();
        let (mode, shape) = broadcast(op, a.shape(), b.shape())?;
        let idx = move |i: usize| match mode {
            Broadcast::Same => (i, i),
            Broadcast::Rhs(k) => (i, i / k),
            Broadcast::Lhs(k) => (i / k, i),
        };
        let n = numel(&shape);
        let (ad, bd) = (a.data(), b.data());
        let out: Vec<F> = (0..n)
            .map(|i| {
                let (ia, ib) = idx(i);
                f(ad[ia], bd[ib])
            })
            .collect();
        let value = Tensor::from_parts(shape.clone(), out);
        Ok(self.tape.record(
            value,
            &[*self, *rhs],
            Box::new(move |g, _needs| {
                let (ad, bd, gd) = (a.data(), b.data(), g.data());
                let mut ga = Vec::with_capacity(n);
                let mut gb = Vec::with_capacity(n);
                for (i, &gi) in gd.iter().enumerate() {
                    let (ia, ib) = idx(i);
                    let (x, y) = df(ad[ia], bd[ib], gi);
                    ga.push(x);
                    gb.push(y);
                }
                let (ga, gb) = match mode {
                    Broadcast::Same => (
                        Tensor::from_parts(a.shape().to_vec(), ga),
                        Tensor::from_parts(b.shape().to_vec(), gb),
                    ),
                    Broadcast::Rhs(k) => (
                        Tensor::from_parts(a.shape().to_vec(), ga),
                        sum_groups(gb, k, b.shape().to_vec()),
                    ),
                    Broadcast::Lhs(k) => (
                        sum_groups(ga, k, a.shape().to_vec()),
                        Tensor::from_parts(b.shape().to_vec(), gb),
                    ),
                };
                vec![Some(ga), Some(gb)]
            }),
        ))
    }

    pub fn add(&self, rhs: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(rhs, "add", |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, rhs: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(rhs, "sub", |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, rhs: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.binary(rhs, "mul", |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    /// Pointwise map with derivative expressed through input `x` and output `y`.
    fn unary(
        &self,
        f: impl Fn(F) -> F,
        df: impl Fn(F, F) -> F + 'static,
    ) -> Var<'t, F> {
        let x = self.value();
        let y = x.map(f);
        let saved_y = y.clone();
        self.tape.record(
            y,
            &[*self],
            Box::new(move |g, _| {
                let data = x
                    .data()
                    .iter()
                    .zip(saved_y.data())
                    .zip(g.data())
                    .map(|((&xi, &yi), &gi)| gi * df(xi, yi))
                    .collect();
                vec![Some(Tensor::from_parts(x.shape().to_vec(), data))]
            }),
        )
    }

    pub fn relu(&self) -> Var<'t, F> {
        self.unary(
            |x| if x > F::zero() { x } else { F::zero() },
            |x, _| if x > F::zero() { F::one() } else { F::zero() },
        )
    }

    pub fn sigmoid(&self) -> Var<'t, F> {
        self.unary(sigmoid, |_, y| y * (F::one() - y))
    }

    pub fn tanh(&self) -> Var<'t, F> {
        self.unary(|x| x.tanh(), |_, y| F::one() - y * y)
    }

    pub fn exp(&self) -> Var<'t, F> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&self) -> Result<Var<'t, F>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| !(v > F::zero())) {
            return Err(Error::Domain {
                op: "log",
                reason: format!("nonpositive input {bad:?}"),
            });
        }
        Ok(self.unary(|x| x.ln(), |x, _| F::one() / x))
    }

    pub fn scale(&self, c: f64) -> Var<'t, F> {
        let c = F::lit(c);
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t, F> {
        let c = F::lit(c);
        self.unary(move |x| x + c, |_, _| F::one())
    }

    pub fn square(&self) -> Var<'t, F> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    /// Reduction over `axis` (removed from the shape) or over all elements.
    pub fn reduce(&self, op: ReduceOp, axis: Option<usize>) -> Result<Var<'t, F>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let (outer, extent, inner, out_shape) = match axis {
            Some(axis) => {
                if axis >= in_shape.len() {
                    return Err(Error::InvalidAxis {
                        axis,
                        rank: in_shape.len(),
                    });
                }
                let (o, e, i) = split_axis(&in_shape, axis);
                let mut s = in_shape.clone();
                s.remove(axis);
                (o, e, i, s)
            }
            None => (1, x.len(), 1, vec![]),
        };
        if extent == 0 && op != ReduceOp::Sum {
            return Err(Error::InvalidShape {
                shape: in_shape,
                reason: "cannot take mean or max over an empty axis".into(),
            });
        }
        let xd = x.data();
        let mut out = vec![F::zero(); outer * inner];
        let mut argmax = vec![0usize; if op == ReduceOp::Max { outer * inner } else { 0 }];
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| xd[(o * extent + e) * inner + i];
                let slot = o * inner + i;
                out[slot] = match op {
                    ReduceOp::Sum => (0..extent).map(at).fold(F::zero(), |s, v| s + v),
                    ReduceOp::Mean => {
                        (0..extent).map(at).fold(F::zero(), |s, v| s + v) / F::lit(extent as f64)
                    }
                    ReduceOp::Max => {
                        let mut best = 0;
                        for e in 1..extent {
                            if at(e) > at(best) {
                                best = e;
                            }
                        }
                        argmax[slot] = best;
                        at(best)
                    }
                };
            }
        }
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.tape.record(
            value,
            &[*self],
            Box::new(move |g, _| {
                let gd = g.data();
                let mut gx = vec![F::zero(); outer * extent * inner];
                let inv = F::one() / F::lit(extent.max(1) as f64);
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        match op {
                            ReduceOp::Sum | ReduceOp::Mean => {
                                let v = if op == ReduceOp::Mean { gd[slot] * inv } else { gd[slot] };
                                for e in 0..extent {
                                    gx[(o * extent + e) * inner + i] = v;
                                }
                            }
                            ReduceOp::Max => {
                                gx[(o * extent + argmax[slot]) * inner + i] = gd[slot];
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
            }),
        ))
    }

    pub fn sum(&self) -> Var<'t, F> {
        self.reduce(ReduceOp::Sum, None).expect("full reduction")
    }

    pub fn mean(&self) -> Result<Var<'t, F>> {
        self.reduce(ReduceOp::Mean, None)
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&self, rhs: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_same_tape(rhs);
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.tape.record(
            value,
            &[*self, *rhs],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    let mut d = vec![F::zero(); m * k];
                    F::gemm(m, n, k, g.data(), false, b.data(), true, &mut d, false);
                    Tensor::from_parts(vec![m, k], d)
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![F::zero(); k * n];
                    F::gemm(k, m, n, a.data(), true, g.data(), false, &mut d, false);
                    Tensor::from_parts(vec![k, n], d)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Adds a bias vector along the trailing axis: `[..., m] + [m]`.
    pub fn add_bias(&self, bias: &Var<'t, F>) -> Result<Var<'t, F>> {
        self.check_same_tape(bias);
        let x = self.value();
        let b = bias.value();
        let m = *x.shape().last().unwrap_or(&0);
        if b.shape() != [m] {
            return Err(Error::shape("add_bias", x.shape(), b.shape()));
        }
        let mut out = x.to_vec();
        if m > 0 {
            for row in out.chunks_mut(m) {
                for (o, &bv) in row.iter_mut().zip(b.data()) {
                    *o += bv;
                }
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.tape.record(
            value,
            &[*self, *bias],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![F::zero(); m];
                    if m > 0 {
                        for row in g.data().chunks(m) {
                            for (a, &v) in acc.iter_mut().zip(row) {
                                *a += v;
                            }
                        }
                    }
                    Tensor::from_parts(vec![m], acc)
                });
                vec![Some(g.clone()), gb]
            }),
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, F>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let value = x.reshape(shape)?;
        Ok(self.tape.record(
            value,
            &[*self],
            Box::new(move |g, _| vec![Some(g.reshape(in_shape.clone()).expect("same size"))]),
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, F>], axis: usize) -> Result<Var<'t, F>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
        let values: Vec<Tensor<F>> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: base.len(),
            });
        }
        for (p, v) in parts.iter().zip(&values) {
            first.check_same_tape(p);
            let s = v.shape();
            if s.len() != base.len()
                || s[..axis] != base[..axis]
                || s[axis + 1..] != base[axis + 1..]
            {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let extents: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = extents.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &e) in values.iter().zip(&extents) {
                out.extend_from_slice(&v.data()[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let value = Tensor::from_parts(shape, out);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(first.tape.record(
            value,
            parts,
            Box::new(move |g, needs| {
                let gd = g.data();
                let mut grads: Vec<Vec<F>> = extents
                    .iter()
                    .map(|&e| Vec::with_capacity(outer * e * inner))
                    .collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (buf, &e) in grads.iter_mut().zip(&extents) {
                        buf.extend_from_slice(&gd[pos..pos + e * inner]);
                        pos += e * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&shapes)
                    .zip(needs)
                    .map(|((d, s), &need)| need.then(|| Tensor::from_parts(s.clone(), d)))
                    .collect()
            }),
        ))
    }

    /// Picks `index` along `axis`, removing that axis.
    pub fn select(&self, axis: usize, index: usize) -> Result<Var<'t, F>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        if axis >= in_shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: in_shape.len(),
            });
        }
        let (outer, extent, inner) = split_axis(&in_shape, axis);
        if index >= extent {
            return Err(Error::InvalidArgument(format!(
                "index {index} out of range for extent {extent}"
            )));
        }
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let start = (o * extent + index) * inner;
            out.extend_from_slice(&x.data()[start..start + inner]);
        }
        let mut shape = in_shape.clone();
        shape.remove(axis);
        let value = Tensor::from_parts(shape, out);
        Ok(self.tape.record(
            value,
            &[*self],
            Box::new(move |g, _| {
                let mut gx = vec![F::zero(); outer * extent * inner];
                for o in 0..outer {
                    let start = (o * extent + index) * inner;
                    gx[start..start + inner]
                        .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
            }),
        ))
    }

    /// Axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t, F>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::InvalidArgument(format!(
                "{axes:?} is not a permutation of {rank} axes"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let in_strides = strides_of(&in_shape);
        // stride in the input for each output axis
        let gather: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let src = permute_index(&out_shape, &gather);
        let data: Vec<F> = src.iter().map(|&i| x.data()[i]).collect();
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.tape.record(
            value,
            &[*self],
            Box::new(move |g, _| {
                let mut gx = vec![F::zero(); g.len()];
                for (&s, &v) in src.iter().zip(g.data()) {
                    gx[s] = v;
                }
                vec![Some(Tensor::from_parts(in_shape.clone(), gx))]
            }),
        ))
    }

    /// Numerically stable log-softmax over the trailing axis.
    pub fn log_softmax(&self) -> Var<'t, F> {
        let x = self.value();
        let c = *x.shape().last().unwrap_or(&1);
        let mut out = x.to_vec();
        if c > 0 {
            for row in out.chunks_mut(c) {
                let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<F>().ln();
                for v in row.iter_mut() {
                    *v -= lse;
                }
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let saved = value.clone();
        self.tape.record(
            value,
            &[*self],
            Box::new(move |g, _| {
                let mut gx = g.to_vec();
                if c > 0 {
                    for (row, lp) in gx.chunks_mut(c).zip(saved.data().chunks(c)) {
                        let total: F = row.iter().copied().sum();
                        for (gv, &l) in row.iter_mut().zip(lp) {
                            *gv -= l.exp() * total;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(saved.shape().to_vec(), gx))]
            }),
        )
    }
}

pub(crate) fn sigmoid<F: Element>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Source offsets for every output element in row-major order.
fn permute_index(out_shape: &[usize], gather: &[usize]) -> Vec<usize> {
    let n = numel(out_shape);
    let mut src = Vec::with_capacity(n);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..n {
        src.push(idx.iter().zip(gather).map(|(i, s)| i * s).sum());
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    src
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::tensor::Tape;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::<f64>::new();
        let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        assert_eq!(eye.matmul(&b).unwrap().value().data(), &[3., 4., 5., 6.]);
        let row = tape.constant(t(&[1, 2], &[1., 2.]));
        let col = tape.constant(t(&[2, 1], &[3., 4.]));
        assert_eq!(row.matmul(&col).unwrap().value().data(), &[11.]);
        match row.matmul(&row) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![1, 2]);
                assert_eq!(rhs, vec![1, 2]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1., 0., 2.]));
        assert_eq!(x.relu().value().data(), &[0., 0., 2.]);
        let z = tape.constant(t(&[1], &[0.]));
        assert_eq!(z.sigmoid().value().data(), &[0.5]);
        let a = tape.constant(t(&[3], &[1., 2., 3.]));
        let b = tape.constant(t(&[3], &[4., 5., 6.]));
        assert_eq!(a.mul(&b).unwrap().value().data(), &[4., 10., 18.]);
        assert!(matches!(x.log(), Err(Error::Domain { .. })));
        let c = tape.constant(t(&[2], &[1., 2.]));
        assert!(a.add(&c).is_err());
    }

    #[test]
    fn trailing_singleton_broadcast() {
        let tape = Tape::<f64>::new();
        let a = tape.param(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.param(t(&[2, 1], &[10., 20.]));
        let c = a.add(&b).unwrap();
        assert_eq!(c.value().data(), &[11., 12., 13., 24., 25., 26.]);
        let grads = c.sum().backward().unwrap();
        assert_eq!(grads.get(b).data(), &[3., 3.]);
        assert_eq!(grads.get(a).data(), &[1.; 6]);
        let d = b.sub(&a).unwrap();
        assert_eq!(d.value().data(), &[9., 8., 7., 16., 15., 14.]);
    }

    #[test]
    fn reduce_examples() {
        let tape = Tape::<f64>::new();
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(m.sum().value().data(), &[10.]);
        assert_eq!(
            m.reduce(ReduceOp::Mean, Some(0)).unwrap().value().data(),
            &[2., 3.]
        );
        let v = tape.constant(t(&[3], &[-5., -2., -9.]));
        assert_eq!(v.reduce(ReduceOp::Max, None).unwrap().value().data(), &[-2.]);
        assert!(matches!(
            m.reduce(ReduceOp::Sum, Some(2)),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1., 2., 3.]));
        let loss = x.mul(&x).unwrap().sum();
        assert_eq!(loss.backward().unwrap().get(x).data(), &[2., 4., 6.]);

        let tape = Tape::<f64>::new();
        let w = tape.param(t(&[1], &[0.]));
        let loss = w.sigmoid().sum();
        assert_eq!(loss.backward().unwrap().get(w).data(), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_loss() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        assert!(matches!(x.backward(), Err(Error::NonScalarLoss(_))));
        let other = Tape::<f64>::new();
        let loss = x.sum();
        assert!(matches!(other.backward(loss), Err(Error::DetachedFromTape)));
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let tape = Tape::<f64>::new();
        let used = tape.param(t(&[2], &[1., 2.]));
        let unused = tape.param(t(&[2, 2], &[1., 2., 3., 4.]));
        let grads = used.sum().backward().unwrap();
        assert!(!grads.contains(unused));
        assert_eq!(grads.get(unused), Tensor::zeros([2, 2]));
    }

    #[test]
    fn constants_never_receive_gradients() {
        let tape = Tape::<f64>::new();
        let c = tape.constant(t(&[2], &[1., 2.]));
        let p = tape.param(t(&[2], &[3., 4.]));
        let loss = c.mul(&p).unwrap().sum();
        assert!(!c.requires_grad());
        let grads = loss.backward().unwrap();
        assert!(!grads.contains(c));
        assert_eq!(grads.get(p).data(), &[1., 2.]);
    }

    #[test]
    fn backward_twice_is_identical() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[0.3, -0.7, 1.1]));
        let y = x.tanh().mul(&x.exp()).unwrap().sum();
        let g1 = y.backward().unwrap().get(x);
        let g2 = y.backward().unwrap().get(x);
        assert_eq!(g1, g2);
    }

    #[test]
    fn inputs_are_not_mutated() {
        let tape = Tape::<f64>::new();
        let src = t(&[2, 2], &[1., -2., 3., -4.]);
        let x = tape.param(src.clone());
        let y = x.relu().add(&x).unwrap().log_softmax().sum();
        let _ = y.backward().unwrap();
        assert_eq!(x.value(), src);
    }

    #[test]
    fn permute_and_select_and_concat() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let p = x.permute(&[1, 0]).unwrap();
        assert_eq!(p.shape(), vec![3, 2]);
        assert_eq!(p.value().data(), &[1., 4., 2., 5., 3., 6.]);
        assert_eq!(x.select(1, 2).unwrap().value().data(), &[3., 6.]);
        let c = Var::concat(&[x, x], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 6]);
        assert_eq!(c.value().data(), &[1., 2., 3., 1., 2., 3., 4., 5., 6., 4., 5., 6.]);
    }

    #[test]
    fn log_softmax_rows_normalize() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1., 2., 3., -100., 0., 100.]));
        let y = x.log_softmax().value();
        for row in y.data().chunks(3) {
            let s: f64 = row.iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    fn rand(rng: &mut crate::tensor::Rng, shape: &[usize]) -> Tensor<f64> {
        rng.randn(shape.to_vec())
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = crate::tensor::Rng::new(100);
        let inputs = vec![rand(&mut rng, &[5, 4]), rand(&mut rng, &[4, 3])];
        let err = gradcheck::check(&inputs, |_, v| v[0].matmul(&v[1]).unwrap().sum());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut rng = crate::tensor::Rng::new(101);
        // Positive, away-from-kink inputs so relu and log are smooth at every probe.
        let pos = rand(&mut rng, &[3, 4]).map(|v| v.abs() + 0.5);
        let inputs = vec![rand(&mut rng, &[3, 4]), pos, rand(&mut rng, &[3, 1]), rand(&mut rng, &[3, 4])];
        let err = gradcheck::check(&inputs, |_, v| {
            let a = v[0].add(&v[1]).unwrap().sub(&v[2]).unwrap();
            let b = a.sigmoid().mul(&v[3]).unwrap();
            let c = v[1].log().unwrap().add(&v[1].relu()).unwrap();
            let d = v[0].tanh().add(&v[0].scale(0.3).exp()).unwrap().square().add_scalar(1.5);
            b.add(&c).unwrap().mul(&d).unwrap().sum()
        });
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn broadcast_left_gradients_match_finite_differences() {
        let mut rng = crate::tensor::Rng::new(102);
        let inputs = vec![rand(&mut rng, &[2, 1]), rand(&mut rng, &[2, 5])];
        let err = gradcheck::check(&inputs, |_, v| v[0].mul(&v[1]).unwrap().square().sum());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn reduce_gradients_match_finite_differences() {
        let mut rng = crate::tensor::Rng::new(103);
        let inputs = vec![rand(&mut rng, &[3, 4, 2]), rand(&mut rng, &[3, 2])];
        for op in [ReduceOp::Sum, ReduceOp::Mean, ReduceOp::Max] {
            let err = gradcheck::check(&inputs, |_, v| {
                let r = v[0].reduce(op, Some(1)).unwrap();
                let all = v[0].reduce(op, None).unwrap();
                r.mul(&v[1]).unwrap().sum().add(&all).unwrap()
            });
            assert!(err < 1e-4, "{op:?}: {err}");
        }
    }

    #[test]
    fn shape_ops_gradients_match_finite_differences() {
        let mut rng = crate::tensor::Rng::new(104);
        let inputs = vec![
            rand(&mut rng, &[2, 3, 4]),
            rand(&mut rng, &[2, 3, 2]),
            rand(&mut rng, &[4]),
            rand(&mut rng, &[3, 6, 2]),
        ];
        let err = gradcheck::check(&inputs, |_, v| {
            let c = Var::concat(&[v[0], v[1]], 2).unwrap();
            let p = c.permute(&[1, 2, 0]).unwrap();
            let s = v[0].select(2, 1).unwrap().reshape([6]).unwrap().sum();
            let ls = v[0].add_bias(&v[2]).unwrap().log_softmax();
            p.mul(&v[3]).unwrap().sum().add(&s).unwrap().add(&ls.sum()).unwrap()
        });
        assert!(err < 1e-4, "{err}");
    }
}

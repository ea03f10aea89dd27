//! Elementwise, reduction and indexing operations on [`Var`].

use super::graph::Backward;
use super::{axis_extents, for_each_strided, Tensor, Var};
use crate::error::{Error, Result};

fn check_same(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    assert!(a.same_graph(b), "{op}: operands live on different graphs");
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
    }
    Ok(())
}

fn check_trailing(op: &'static str, x: &Var<'_>, b: &Var<'_>) -> Result<usize> {
    let (sx, sb) = (x.shape(), b.shape());
    match (sx.last(), sb.as_slice()) {
        (Some(&c), &[n]) if c == n => Ok(c),
        _ => Err(Error::shape(
            op,
            format!("cannot broadcast {sb:?} over trailing axis of {sx:?}"),
        )),
    }
}

impl<'g> Var<'g> {
    pub(crate) fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Var<'g> {
        let value = self.value().map(f);
        self.graph().record(
            op,
            value,
            &[*self],
            Box::new(move |b: &Backward<'_>| {
                let x = b.inputs[0].data();
                let y = b.output.data();
                let data = b
                    .grad
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &g)| g * df(x[i], y[i]))
                    .collect();
                vec![Some(Tensor::new(b.grad.shape(), data).unwrap())]
            }),
        )
    }

    pub fn add(&self, other: &Var<'g>) -> Result<Var<'g>> {
        check_same("add", self, other)?;
        let value = self.value().zip_map(&other.value(), |a, b| a + b);
        Ok(self.graph().record(
            "add",
            value,
            &[*self, *other],
            Box::new(|b| vec![Some(b.grad.clone()), Some(b.grad.clone())]),
        ))
    }

    pub fn sub(&self, other: &Var<'g>) -> Result<Var<'g>> {
        check_same("sub", self, other)?;
        let value = self.value().zip_map(&other.value(), |a, b| a - b);
        Ok(self.graph().record(
            "sub",
            value,
            &[*self, *other],
            Box::new(|b| vec![Some(b.grad.clone()), Some(b.grad.map(|g| -g))]),
        ))
    }

    pub fn mul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        check_same("mul", self, other)?;
        let value = self.value().zip_map(&other.value(), |a, b| a * b);
        Ok(self.graph().record(
            "mul",
            value,
            &[*self, *other],
            Box::new(|b| {
                let ga = b.needs[0].then(|| b.grad.zip_map(&b.inputs[1], |g, y| g * y));
                let gb = b.needs[1].then(|| b.grad.zip_map(&b.inputs[0], |g, x| g * x));
                vec![ga, gb]
            }),
        ))
    }

    /// `self[..., c] + bias[c]`.
    pub fn add_broadcast(&self, bias: &Var<'g>) -> Result<Var<'g>> {
        let c = check_trailing("add_broadcast", self, bias)?;
        let b = bias.value();
        let mut value = (*self.value()).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % c];
        }
        Ok(self.graph().record(
            "add_broadcast",
            value,
            &[*self, *bias],
            Box::new(move |b| {
                let mut gb = Tensor::zeros(&[c]);
                if b.needs[1] {
                    for (i, &g) in b.grad.data().iter().enumerate() {
                        gb.data_mut()[i % c] += g;
                    }
                }
                vec![Some(b.grad.clone()), Some(gb)]
            }),
        ))
    }

    /// `self[..., c] * scale[c]`.
    pub fn mul_broadcast(&self, scale: &Var<'g>) -> Result<Var<'g>> {
        let c = check_trailing("mul_broadcast", self, scale)?;
        let s = scale.value();
        let mut value = (*self.value()).clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= s.data()[i % c];
        }
        Ok(self.graph().record(
            "mul_broadcast",
            value,
            &[*self, *scale],
            Box::new(move |b| {
                let (x, s) = (b.inputs[0].data(), b.inputs[1].data());
                let gx = b.needs[0].then(|| {
                    let data = b
                        .grad
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| g * s[i % c])
                        .collect();
                    Tensor::new(b.grad.shape(), data).unwrap()
                });
                let gs = b.needs[1].then(|| {
                    let mut gs = Tensor::zeros(&[c]);
                    for (i, &g) in b.grad.data().iter().enumerate() {
                        gs.data_mut()[i % c] += g * x[i];
                    }
                    gs
                });
                vec![gx, gs]
            }),
        ))
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        self.unary("scale", |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g> {
        self.unary("add_scalar", |x| x + s, |_, _| 1.0)
    }

    pub fn square(&self) -> Var<'g> {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn recip(&self) -> Var<'g> {
        self.unary("recip", |x| 1.0 / x, |_, y| -y * y)
    }

    pub fn exp(&self) -> Var<'g> {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Var<'g> {
        self.unary("log", f64::ln, |x, _| 1.0 / x)
    }

    /// `max(x, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&self, lo: f64) -> Var<'g> {
        self.unary("clamp_min", |x| x.max(lo), move |x, _| if x > lo { 1.0 } else { 0.0 })
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Var<'g> {
        let value = Tensor::scalar(self.value().sum());
        let shape = self.shape();
        self.graph().record(
            "sum",
            value,
            &[*self],
            Box::new(move |b| vec![Some(Tensor::full(&shape, b.grad.item()))]),
        )
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let x = self.value();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += x.data()[(o * len + k) * inner + i];
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        Ok(self.graph().record(
            "sum_axis",
            Tensor::new(&out_shape, out)?,
            &[*self],
            Box::new(move |b| {
                let mut gx = Tensor::zeros(&shape);
                for o in 0..outer {
                    for k in 0..len {
                        for i in 0..inner {
                            gx.data_mut()[(o * len + k) * inner + i] =
                                b.grad.data()[o * inner + i];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let value = self.value().reshape(shape)?;
        let old = self.shape();
        Ok(self.graph().record(
            "reshape",
            value,
            &[*self],
            Box::new(move |b| vec![Some(b.grad.reshape(&old).unwrap())]),
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Var<'g>> {
        let shape = self.shape();
        let r = shape.len();
        if r < 2 {
            return Err(Error::shape("transpose_last2", format!("rank {r}")));
        }
        let value = transpose_last2(&self.value());
        Ok(self.graph().record(
            "transpose",
            value,
            &[*self],
            Box::new(|b| vec![Some(transpose_last2(b.grad))]),
        ))
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_extents(&shape, axis);
        let x = self.value();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.graph().record(
            "narrow",
            Tensor::new(&out_shape, out)?,
            &[*self],
            Box::new(move |b| {
                let mut gx = Tensor::zeros(&shape);
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    gx.data_mut()[base..base + len * inner]
                        .copy_from_slice(&b.grad.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
        let base = &shapes[0];
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {base:?}")));
        }
        for s in &shapes {
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(base)
                    .enumerate()
                    .all(|(k, (a, b))| k == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
        }
        let (outer, _, inner) = axis_extents(base, axis);
        let lens: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
        let total: usize = lens.iter().sum();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        Ok(first.graph().record(
            "concat",
            Tensor::new(&out_shape, out)?,
            parts,
            Box::new(move |b| {
                let mut grads: Vec<Tensor> =
                    shapes.iter().map(|s| Tensor::zeros(s)).collect();
                let mut offset = 0;
                for o in 0..outer {
                    for (g, &len) in grads.iter_mut().zip(&lens) {
                        let n = len * inner;
                        g.data_mut()[o * n..(o + 1) * n]
                            .copy_from_slice(&b.grad.data()[offset..offset + n]);
                        offset += n;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Elements at `start + i * step` along every axis; the gradient scatters
    /// back into the sliced positions and is zero elsewhere.
    pub fn strided_slice(&self, start: &[usize], step: &[usize]) -> Result<Var<'g>> {
        let value = self.value().strided_slice(start, step)?;
        let shape = self.shape();
        let (start, step) = (start.to_vec(), step.to_vec());
        Ok(self.graph().record(
            "strided_slice",
            value,
            &[*self],
            Box::new(move |b| {
                let mut gx = Tensor::zeros(&shape);
                for_each_strided(&shape, &start, &step, |dst, src| {
                    gx.data_mut()[src] = b.grad.data()[dst];
                });
                vec![Some(gx)]
            }),
        ))
    }

    /// Rows `index[k]` of a `[rows, cols]` matrix, stacked in order.
    pub fn gather_rows(&self, index: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        let [rows, cols] = shape[..] else {
            return Err(Error::shape("gather_rows", format!("expected a matrix, got {shape:?}")));
        };
        if let Some(&bad) = index.iter().find(|&&r| r >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {rows}")));
        }
        let x = self.value();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &r in index {
            out.extend_from_slice(&x.data()[r * cols..(r + 1) * cols]);
        }
        let index = index.to_vec();
        Ok(self.graph().record(
            "gather_rows",
            Tensor::new(&[index.len(), cols], out)?,
            &[*self],
            Box::new(move |b| {
                let mut gx = Tensor::zeros(&[rows, cols]);
                for (k, &r) in index.iter().enumerate() {
                    for c in 0..cols {
                        gx.data_mut()[r * cols + c] += b.grad.data()[k * cols + c];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Places row `k` of `self` at row `index[k]` of a zero `[rows, cols]`
    /// matrix. Targets must be distinct.
    pub fn scatter_rows(&self, index: &[usize], rows: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        let [n, cols] = shape[..] else {
            return Err(Error::shape("scatter_rows", format!("expected a matrix, got {shape:?}")));
        };
        if n != index.len() {
            return Err(Error::shape(
                "scatter_rows",
                format!("{n} rows for {} targets", index.len()),
            ));
        }
        let mut seen = vec![false; rows];
        for &r in index {
            if r >= rows || std::mem::replace(&mut seen[r], true) {
                return Err(Error::invalid("scatter_rows", format!("bad or repeated target {r}")));
            }
        }
        let x = self.value();
        let mut out = Tensor::zeros(&[rows, cols]);
        for (k, &r) in index.iter().enumerate() {
            out.data_mut()[r * cols..(r + 1) * cols]
                .copy_from_slice(&x.data()[k * cols..(k + 1) * cols]);
        }
        let index = index.to_vec();
        Ok(self.graph().record(
            "scatter_rows",
            out,
            &[*self],
            Box::new(move |b| {
                let mut gx = Vec::with_capacity(index.len() * cols);
                for &r in &index {
                    gx.extend_from_slice(&b.grad.data()[r * cols..(r + 1) * cols]);
                }
                vec![Some(Tensor::new(&[index.len(), cols], gx).unwrap())]
            }),
        ))
    }

    /// Flat elements `index[k]` as a rank-1 tensor.
    pub fn gather_flat(&self, index: &[usize]) -> Result<Var<'g>> {
        let shape = self.shape();
        let x = self.value();
        if let Some(&bad) = index.iter().find(|&&i| i >= x.numel()) {
            return Err(Error::shape("gather_flat", format!("index {bad} of {}", x.numel())));
        }
        let out = index.iter().map(|&i| x.data()[i]).collect();
        let index = index.to_vec();
        Ok(self.graph().record(
            "gather_flat",
            Tensor::new(&[index.len()], out)?,
            &[*self],
            Box::new(move |b| {
                let mut gx = Tensor::zeros(&shape);
                for (k, &i) in index.iter().enumerate() {
                    gx.data_mut()[i] += b.grad.data()[k];
                }
                vec![Some(gx)]
            }),
        ))
    }
}

pub(crate) fn transpose_last2(t: &Tensor) -> Tensor {
    let shape = t.shape();
    let r = shape.len();
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batch = t.numel() / (m * n).max(1);
    let mut out = vec![0.0; t.numel()];
    for bi in 0..batch {
        let base = bi * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = t.data()[base + i * n + j];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(r - 2, r - 1);
    Tensor::new(&out_shape, out).unwrap()
}

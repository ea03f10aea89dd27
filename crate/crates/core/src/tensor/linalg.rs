use super::ops::transpose_last2;
use super::{Tensor, Var};
use crate::error::{Error, Result};

/// `[batch, m, k] x [batch, k, n]`, accumulating over `k` in ascending order.
fn bmm(a: &Tensor, b: &Tensor, batch: usize, m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    for bi in 0..batch {
        let a0 = bi * m * k;
        let b0 = bi * k * n;
        let o0 = bi * m * n;
        for i in 0..m {
            let row = &mut out[o0 + i * n..o0 + (i + 1) * n];
            for p in 0..k {
                let av = ad[a0 + i * k + p];
                let brow = &bd[b0 + p * n..b0 + (p + 1) * n];
                for (o, &bv) in row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let err = || Error::shape("matmul", format!("{a:?} x {b:?}"));
    match (a, b) {
        (&[m, k], &[k2, n]) if k == k2 => Ok((1, m, k, n)),
        (&[ba, m, k], &[bb, k2, n]) if ba == bb && k == k2 => Ok((ba, m, k, n)),
        _ => Err(err()),
    }
}

impl<'g> Var<'g> {
    /// Matrix product of two matrices or two equally batched stacks of matrices.
    pub fn matmul(&self, other: &Var<'g>) -> Result<Var<'g>> {
        let (sa, sb) = (self.shape(), other.shape());
        let (batch, m, k, n) = matmul_dims(&sa, &sb)?;
        let out = bmm(&self.value(), &other.value(), batch, m, k, n);
        let mut out_shape = sa.clone();
        *out_shape.last_mut().unwrap() = n;
        Ok(self.graph().record(
            "matmul",
            Tensor::new(&out_shape, out)?,
            &[*self, *other],
            Box::new(move |b| {
                let (a, bt) = (&b.inputs[0], &b.inputs[1]);
                let ga = b.needs[0].then(|| {
                    let data = bmm(b.grad, &transpose_last2(bt), batch, m, n, k);
                    Tensor::new(&sa, data).unwrap()
                });
                let gb = b.needs[1].then(|| {
                    let data = bmm(&transpose_last2(a), b.grad, batch, k, m, n);
                    Tensor::new(&sb, data).unwrap()
                });
                vec![ga, gb]
            }),
        ))
    }

    /// `x[..., in] @ weight[in, out] (+ bias[out])` over the trailing axis.
    pub fn linear(&self, weight: &Var<'g>, bias: Option<&Var<'g>>) -> Result<Var<'g>> {
        let shape = self.shape();
        let ws = weight.shape();
        let (Some(&cin), &[win, cout]) = (shape.last(), ws.as_slice()) else {
            return Err(Error::shape("linear", format!("{shape:?} x {ws:?}")));
        };
        if cin != win {
            return Err(Error::shape("linear", format!("{shape:?} x {ws:?}")));
        }
        let rows = shape.iter().product::<usize>() / cin.max(1);
        let mut y = self.reshape(&[rows, cin])?.matmul(weight)?;
        if let Some(bias) = bias {
            y = y.add_broadcast(bias)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = cout;
        y.reshape(&out_shape)
    }
}

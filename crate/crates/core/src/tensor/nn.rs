//! Activations, softmax and layer normalization.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::{axis_extents, Tensor, Var};
use crate::error::{Error, Result};

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Max-subtracted softmax of `x` along `axis`.
pub(crate) fn softmax_tensor(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = axis_extents(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (d[at(k)] - max).exp();
                d[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                d[at(k)] /= total;
            }
        }
    }
    out
}

impl<'g> Var<'g> {
    pub fn silu(&self) -> Var<'g> {
        self.unary("silu", silu, |x, _| {
            let s = sigmoid(x);
            s * (1.0 + x * (1.0 - s))
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<'g> {
        self.unary("gelu", gelu, |x, _| gelu_grad(x))
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn sigmoid(&self) -> Var<'g> {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(1 + e^x)`, evaluated without overflow for large `x`.
    pub fn softplus(&self) -> Var<'g> {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'g>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} of {shape:?}")));
        }
        let value = softmax_tensor(&self.value(), axis);
        Ok(self.graph().record(
            "softmax",
            value,
            &[*self],
            Box::new(move |b| {
                let (outer, len, inner) = axis_extents(&shape, axis);
                let (y, gy) = (b.output.data(), b.grad.data());
                let mut gx = Tensor::zeros(&shape);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| gy[at(k)] * y[at(k)]).sum();
                        for k in 0..len {
                            gx.data_mut()[at(k)] = y[at(k)] * (gy[at(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalizes over the trailing axis, then applies `scale` and `shift`.
    pub fn layer_norm(&self, scale: &Var<'g>, shift: &Var<'g>, eps: f64) -> Result<Var<'g>> {
        let shape = self.shape();
        let c = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "rank-0 input"))?;
        if scale.shape() != [c] || shift.shape() != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!("{shape:?} with scale {:?} shift {:?}", scale.shape(), shift.shape()),
            ));
        }
        let rows = self.value().numel() / c.max(1);
        let x = self.value();
        let mut xhat = vec![0.0; x.numel()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for k in 0..c {
                xhat[r * c + k] = (row[k] - mean) * is;
            }
        }
        let (g, s) = (scale.value(), shift.value());
        let out: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| v * g.data()[i % c] + s.data()[i % c])
            .collect();
        Ok(self.graph().record(
            "layer_norm",
            Tensor::new(&shape, out)?,
            &[*self, *scale, *shift],
            Box::new(move |b| {
                let gamma = b.inputs[1].data();
                let gy = b.grad.data();
                let mut gx = Tensor::zeros(&shape);
                let mut gg = Tensor::zeros(&[c]);
                let mut gs = Tensor::zeros(&[c]);
                for r in 0..rows {
                    let mut mean_gh = 0.0;
                    let mut mean_ghx = 0.0;
                    for k in 0..c {
                        let i = r * c + k;
                        let gh = gy[i] * gamma[k];
                        mean_gh += gh;
                        mean_ghx += gh * xhat[i];
                        gg.data_mut()[k] += gy[i] * xhat[i];
                        gs.data_mut()[k] += gy[i];
                    }
                    mean_gh /= c as f64;
                    mean_ghx /= c as f64;
                    for k in 0..c {
                        let i = r * c + k;
                        let gh = gy[i] * gamma[k];
                        gx.data_mut()[i] = inv_std[r] * (gh - mean_gh - xhat[i] * mean_ghx);
                    }
                }
                vec![Some(gx), Some(gg), Some(gs)]
            }),
        ))
    }
}

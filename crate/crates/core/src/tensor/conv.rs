//! 2D convolution over `[H, W, C]` maps and depthwise 1D convolution over
//! `[N, C]` sequences.

use super::{Tensor, Var};
use crate::error::{Error, Result};

/// Padding mode of [`Var::conv1d_depthwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conv1dMode {
    /// Output `n` sees inputs `n - w + 1 ..= n`.
    Causal,
    /// Output `n` sees inputs centered on `n` (odd windows).
    Same,
}

impl Conv1dMode {
    fn left_pad(self, w: usize) -> usize {
        match self {
            Conv1dMode::Causal => w - 1,
            Conv1dMode::Same => (w - 1) / 2,
        }
    }
}

struct Conv2dGeom {
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    ho: usize,
    wo: usize,
}

impl Conv2dGeom {
    /// Input coordinate for output `o`, tap `k`, or `None` in the zero padding.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, n: usize) -> Option<usize> {
        let p = (o * stride + k).checked_sub(pad)?;
        (p < n).then_some(p)
    }
}

/// Cross-correlation; for each output the taps are accumulated in
/// `(ky, kx, ci)` order starting from zero, then the bias is added.
fn conv2d_forward(x: &Tensor, k: &Tensor, bias: Option<&Tensor>, g: &Conv2dGeom) -> Tensor {
    let (xd, kd) = (x.data(), k.data());
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let mut out = vec![0.0; g.ho * g.wo * g.cout];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let acc = &mut out[(oy * g.wo + ox) * g.cout..(oy * g.wo + ox + 1) * g.cout];
            for ky in 0..g.kh {
                let Some(iy) = Conv2dGeom::src(oy, ky, g.stride, ph, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = Conv2dGeom::src(ox, kx, g.stride, pw, g.w) else { continue };
                    for ci in 0..g.cin {
                        let xv = xd[(iy * g.w + ix) * g.cin + ci];
                        let krow = &kd[((ky * g.kw + kx) * g.cin + ci) * g.cout..][..g.cout];
                        for (a, &kv) in acc.iter_mut().zip(krow) {
                            *a += xv * kv;
                        }
                    }
                }
            }
            if let Some(b) = bias {
                for (a, &bv) in acc.iter_mut().zip(b.data()) {
                    *a += bv;
                }
            }
        }
    }
    Tensor::new(&[g.ho, g.wo, g.cout], out).unwrap()
}

impl<'g> Var<'g> {
    /// Zero-padded "same" 2D convolution of an `[H, W, C_in]` map with a
    /// `[kh, kw, C_in, C_out]` kernel. With `stride > 1` the output is
    /// `[ceil(H / stride), ceil(W / stride), C_out]`.
    pub fn conv2d(&self, kernel: &Var<'g>, bias: Option<&Var<'g>>, stride: usize) -> Result<Var<'g>> {
        let (xs, ks) = (self.shape(), kernel.shape());
        let (&[h, w, cin], &[kh, kw, kcin, cout]) = (xs.as_slice(), ks.as_slice()) else {
            return Err(Error::shape("conv2d", format!("input {xs:?} kernel {ks:?}")));
        };
        if kcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} must be odd, stride {stride} positive"),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::shape("conv2d", format!("bias {:?} for {cout} outputs", b.shape())));
            }
        }
        let geom = Conv2dGeom {
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            ho: h.div_ceil(stride),
            wo: w.div_ceil(stride),
        };
        let bias_value = bias.map(|b| b.value());
        let value = conv2d_forward(&self.value(), &kernel.value(), bias_value.as_deref(), &geom);
        let mut parents = vec![*self, *kernel];
        parents.extend(bias.copied());
        Ok(self.graph().record(
            "conv2d",
            value,
            &parents,
            Box::new(move |b| {
                let g = &geom;
                let (x, k, gy) = (b.inputs[0].data(), b.inputs[1].data(), b.grad.data());
                let (ph, pw) = (g.kh / 2, g.kw / 2);
                let mut gx = vec![0.0; g.h * g.w * g.cin];
                let mut gk = vec![0.0; g.kh * g.kw * g.cin * g.cout];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let grow = &gy[(oy * g.wo + ox) * g.cout..][..g.cout];
                        for ky in 0..g.kh {
                            let Some(iy) = Conv2dGeom::src(oy, ky, g.stride, ph, g.h) else { continue };
                            for kx in 0..g.kw {
                                let Some(ix) = Conv2dGeom::src(ox, kx, g.stride, pw, g.w) else {
                                    continue;
                                };
                                for ci in 0..g.cin {
                                    let xi = (iy * g.w + ix) * g.cin + ci;
                                    let ko = ((ky * g.kw + kx) * g.cin + ci) * g.cout;
                                    let mut acc = 0.0;
                                    for co in 0..g.cout {
                                        acc += grow[co] * k[ko + co];
                                        gk[ko + co] += grow[co] * x[xi];
                                    }
                                    gx[xi] += acc;
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![
                    Some(Tensor::new(&[g.h, g.w, g.cin], gx).unwrap()),
                    Some(Tensor::new(&[g.kh, g.kw, g.cin, g.cout], gk).unwrap()),
                ];
                if b.inputs.len() == 3 {
                    let mut gb = vec![0.0; g.cout];
                    for (i, &v) in gy.iter().enumerate() {
                        gb[i % g.cout] += v;
                    }
                    grads.push(Some(Tensor::new(&[g.cout], gb).unwrap()));
                }
                grads
            }),
        ))
    }

    /// Per-channel convolution of an `[N, C]` sequence with a `[w, C]` kernel
    /// along the sequence axis, zero padded.
    pub fn conv1d_depthwise(&self, kernel: &Var<'g>, mode: Conv1dMode) -> Result<Var<'g>> {
        let (xs, ks) = (self.shape(), kernel.shape());
        let (&[n, c], &[w, kc]) = (xs.as_slice(), ks.as_slice()) else {
            return Err(Error::shape("conv1d_depthwise", format!("input {xs:?} kernel {ks:?}")));
        };
        if kc != c || w == 0 {
            return Err(Error::shape("conv1d_depthwise", format!("input {xs:?} kernel {ks:?}")));
        }
        let pad = mode.left_pad(w);
        let src = move |i: usize, t: usize| (i + t).checked_sub(pad).filter(|&p| p < n);
        let (x, k) = (self.value(), kernel.value());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for t in 0..w {
                let Some(p) = src(i, t) else { continue };
                for ch in 0..c {
                    out[i * c + ch] += k.data()[t * c + ch] * x.data()[p * c + ch];
                }
            }
        }
        Ok(self.graph().record(
            "conv1d_depthwise",
            Tensor::new(&[n, c], out)?,
            &[*self, *kernel],
            Box::new(move |b| {
                let (x, k, gy) = (b.inputs[0].data(), b.inputs[1].data(), b.grad.data());
                let mut gx = vec![0.0; n * c];
                let mut gk = vec![0.0; w * c];
                for i in 0..n {
                    for t in 0..w {
                        let Some(p) = src(i, t) else { continue };
                        for ch in 0..c {
                            gx[p * c + ch] += gy[i * c + ch] * k[t * c + ch];
                            gk[t * c + ch] += gy[i * c + ch] * x[p * c + ch];
                        }
                    }
                }
                vec![
                    Some(Tensor::new(&[n, c], gx).unwrap()),
                    Some(Tensor::new(&[w, c], gk).unwrap()),
                ]
            }),
        ))
    }
}

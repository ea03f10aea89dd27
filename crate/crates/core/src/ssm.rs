//! Selective state-space primitives and the Mamba block.
//!
//! Shapes follow one sequence at a time: `N` positions, model width `C1`,
//! expanded width `C_e` and state width `C_s`. A batch is an outer loop.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{join, ParamStore, Scope};
use crate::tensor::{Conv1dMode, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmDims {
    pub model: usize,
    pub expanded: usize,
    pub state: usize,
    pub window: usize,
}

impl SsmDims {
    /// Widths of the published model.
    pub const PAPER: SsmDims = SsmDims {
        model: 256,
        expanded: 512,
        state: 16,
        window: 4,
    };

    pub const DESK: SsmDims = SsmDims {
        model: 32,
        expanded: 64,
        state: 8,
        window: 4,
    };

    pub fn validate(&self) -> Result<()> {
        if self.model == 0 || self.state == 0 || self.window == 0 || self.expanded < self.model {
            return Err(Error::invalid("ssm dims", format!("{self:?}")));
        }
        Ok(())
    }
}

impl Default for SsmDims {
    fn default() -> Self {
        Self::DESK
    }
}

/// Adds the parameters of one block under `prefix`.
///
/// Projections use the bounded uniform init, biases and the layer-norm shift
/// start at zero, the layer-norm scale at one, and `a_log[e, s] = ln(s + 1)`
/// so that `A' = -exp(a_log) = -(s + 1)`.
pub fn init_block<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, dims: SsmDims, rng: &mut R) -> Result<()> {
    dims.validate()?;
    let SsmDims {
        model: c1,
        expanded: ce,
        state: cs,
        window: w,
    } = dims;
    let p = |n: &str| join(prefix, n);
    store.insert(p("ln_scale"), Tensor::ones(&[c1]));
    store.insert(p("ln_shift"), Tensor::zeros(&[c1]));
    store.init_uniform(p("w_x"), &[c1, ce], c1, rng);
    store.init_uniform(p("w_z"), &[c1, ce], c1, rng);
    store.init_uniform(p("conv"), &[w, ce], w, rng);
    store.init_uniform(p("w_delta"), &[ce, ce], ce, rng);
    store.insert(p("delta_bias"), Tensor::zeros(&[ce]));
    let a_log = (0..ce * cs).map(|i| ((i % cs) as f64 + 1.0).ln()).collect();
    store.insert(p("a_log"), Tensor::new(&[ce, cs], a_log)?);
    store.init_uniform(p("w_b"), &[ce, cs], ce, rng);
    store.init_uniform(p("w_c"), &[ce, cs], ce, rng);
    store.init_uniform(p("w_out"), &[ce, c1], ce, rng);
    Ok(())
}

/// The parameters of one block bound to a graph.
#[derive(Clone, Copy, Debug)]
pub struct SsmBlockParams<'g> {
    pub ln_scale: Var<'g>,
    pub ln_shift: Var<'g>,
    pub w_x: Var<'g>,
    pub w_z: Var<'g>,
    pub conv: Var<'g>,
    pub w_delta: Var<'g>,
    pub delta_bias: Var<'g>,
    /// `A' = -exp(a_log)`, negative by construction.
    pub a_log: Var<'g>,
    pub w_b: Var<'g>,
    pub w_c: Var<'g>,
    pub w_out: Var<'g>,
}

impl<'g> SsmBlockParams<'g> {
    pub fn bind(scope: &Scope<'_, 'g>) -> Result<Self> {
        Ok(Self {
            ln_scale: scope.get("ln_scale")?,
            ln_shift: scope.get("ln_shift")?,
            w_x: scope.get("w_x")?,
            w_z: scope.get("w_z")?,
            conv: scope.get("conv")?,
            w_delta: scope.get("w_delta")?,
            delta_bias: scope.get("delta_bias")?,
            a_log: scope.get("a_log")?,
            w_b: scope.get("w_b")?,
            w_c: scope.get("w_c")?,
            w_out: scope.get("w_out")?,
        })
    }

    pub fn a_prime(&self) -> Var<'g> {
        self.a_log.exp().scale(-1.0)
    }
}

/// Zero-order hold for the diagonal `A'` and an Euler step for `B'`:
/// `A[n,e,s] = exp(delta[n,e] * A'[e,s])`, `B[n,e,s] = delta[n,e] * B'[n,s]`.
pub fn discretize<'g>(a_prime: &Var<'g>, b_prime: &Var<'g>, delta: &Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let (sa, sb, sd) = (a_prime.shape(), b_prime.shape(), delta.shape());
    let (&[ce, cs], &[n, cs2], &[n2, ce2]) = (sa.as_slice(), sb.as_slice(), sd.as_slice()) else {
        return Err(Error::shape("discretize", format!("A' {sa:?} B' {sb:?} delta {sd:?}")));
    };
    if cs != cs2 || ce != ce2 || n != n2 {
        return Err(Error::shape("discretize", format!("A' {sa:?} B' {sb:?} delta {sd:?}")));
    }
    let dv = delta.value();
    if let Some(bad) = dv.data().iter().find(|&&d| !(d > 0.0)) {
        return Err(Error::invalid("discretize", format!("step must be positive, got {bad}")));
    }
    let (av, bv) = (a_prime.value(), b_prime.value());
    let (ad, bd, dd) = (av.data(), bv.data(), dv.data());
    let mut a = vec![0.0; n * ce * cs];
    let mut b = vec![0.0; n * ce * cs];
    for i in 0..n {
        for e in 0..ce {
            let d = dd[i * ce + e];
            for s in 0..cs {
                let o = (i * ce + e) * cs + s;
                a[o] = (d * ad[e * cs + s]).exp();
                b[o] = d * bd[i * cs + s];
            }
        }
    }
    let graph = delta.graph();
    let a_out = graph.record(
        "discretize_a",
        Tensor::new(&[n, ce, cs], a)?,
        &[*a_prime, *delta],
        Box::new(move |bw| {
            let (ap, d) = (bw.inputs[0].data(), bw.inputs[1].data());
            let (g, y) = (bw.grad.data(), bw.output.data());
            let mut ga = vec![0.0; ce * cs];
            let mut gd = vec![0.0; n * ce];
            for i in 0..n {
                for e in 0..ce {
                    for s in 0..cs {
                        let o = (i * ce + e) * cs + s;
                        let gy = g[o] * y[o];
                        ga[e * cs + s] += gy * d[i * ce + e];
                        gd[i * ce + e] += gy * ap[e * cs + s];
                    }
                }
            }
            vec![
                Some(Tensor::new(&[ce, cs], ga).unwrap()),
                Some(Tensor::new(&[n, ce], gd).unwrap()),
            ]
        }),
    );
    let b_out = graph.record(
        "discretize_b",
        Tensor::new(&[n, ce, cs], b)?,
        &[*b_prime, *delta],
        Box::new(move |bw| {
            let (bp, d) = (bw.inputs[0].data(), bw.inputs[1].data());
            let g = bw.grad.data();
            let mut gb = vec![0.0; n * cs];
            let mut gd = vec![0.0; n * ce];
            for i in 0..n {
                for e in 0..ce {
                    for s in 0..cs {
                        let o = (i * ce + e) * cs + s;
                        gb[i * cs + s] += g[o] * d[i * ce + e];
                        gd[i * ce + e] += g[o] * bp[i * cs + s];
                    }
                }
            }
            vec![
                Some(Tensor::new(&[n, cs], gb).unwrap()),
                Some(Tensor::new(&[n, ce], gd).unwrap()),
            ]
        }),
    );
    Ok((a_out, b_out))
}

struct ScanDims {
    n: usize,
    ce: usize,
    cs: usize,
}

fn scan_dims(a: &[usize], b: &[usize], c: &[usize], x: &[usize]) -> Result<ScanDims> {
    let err = || Error::shape("selective_scan", format!("A {a:?} B {b:?} C {c:?} X {x:?}"));
    let (&[n, ce, cs], &[n_c, cs_c], &[n_x, ce_x]) = (a, c, x) else {
        return Err(err());
    };
    if b != a || n_c != n || cs_c != cs || n_x != n || ce_x != ce {
        return Err(err());
    }
    Ok(ScanDims { n, ce, cs })
}

/// Runs the recurrence and returns every state, `[N, C_e, C_s]`.
fn scan_states(a: &[f64], b: &[f64], x: &[f64], d: &ScanDims) -> Vec<f64> {
    let (ce, cs) = (d.ce, d.cs);
    let mut hs = vec![0.0; d.n * ce * cs];
    for i in 0..d.n {
        for e in 0..ce {
            let xe = x[i * ce + e];
            for s in 0..cs {
                let o = (i * ce + e) * cs + s;
                let prev = if i == 0 { 0.0 } else { hs[o - ce * cs] };
                hs[o] = a[o] * prev + b[o] * xe;
            }
        }
    }
    hs
}

fn read_out(hs: &[f64], c: &[f64], d: &ScanDims) -> Vec<f64> {
    let (ce, cs) = (d.ce, d.cs);
    let mut y = vec![0.0; d.n * ce];
    for i in 0..d.n {
        for e in 0..ce {
            let h = &hs[(i * ce + e) * cs..(i * ce + e + 1) * cs];
            y[i * ce + e] = h.iter().zip(&c[i * cs..(i + 1) * cs]).map(|(h, c)| h * c).sum();
        }
    }
    y
}

/// `h_i = A_i * h_{i-1} + B_i * x_i` from `h_{-1} = 0`, read out as
/// `y[i, e] = sum_s h_i[e, s] * C[i, s]`.
///
/// `a`, `b`: `[N, C_e, C_s]`; `c`: `[N, C_s]`; `x`: `[N, C_e]`.
pub fn selective_scan<'g>(a: &Var<'g>, b: &Var<'g>, c: &Var<'g>, x: &Var<'g>) -> Result<Var<'g>> {
    let d = scan_dims(&a.shape(), &b.shape(), &c.shape(), &x.shape())?;
    let (av, bv, cv, xv) = (a.value(), b.value(), c.value(), x.value());
    let hs = scan_states(av.data(), bv.data(), xv.data(), &d);
    let y = read_out(&hs, cv.data(), &d);
    let shape = [d.n, d.ce];
    Ok(a.graph().record(
        "selective_scan",
        Tensor::new(&shape, y)?,
        &[*a, *b, *c, *x],
        Box::new(move |bw| {
            let ScanDims { n, ce, cs } = d;
            let (a, b, c, x) = (
                bw.inputs[0].data(),
                bw.inputs[1].data(),
                bw.inputs[2].data(),
                bw.inputs[3].data(),
            );
            let gy = bw.grad.data();
            let mut ga = vec![0.0; n * ce * cs];
            let mut gb = vec![0.0; n * ce * cs];
            let mut gc = vec![0.0; n * cs];
            let mut gx = vec![0.0; n * ce];
            // gradient with respect to h_i, carried backwards through A
            let mut gh = vec![0.0; ce * cs];
            for i in (0..n).rev() {
                for e in 0..ce {
                    let g = gy[i * ce + e];
                    let mut gxe = 0.0;
                    for s in 0..cs {
                        let o = (i * ce + e) * cs + s;
                        let k = e * cs + s;
                        gh[k] += g * c[i * cs + s];
                        gc[i * cs + s] += g * hs[o];
                        let prev = if i == 0 { 0.0 } else { hs[o - ce * cs] };
                        ga[o] = gh[k] * prev;
                        gb[o] = gh[k] * x[i * ce + e];
                        gxe += gh[k] * b[o];
                        gh[k] *= a[o];
                    }
                    gx[i * ce + e] = gxe;
                }
            }
            vec![
                Some(Tensor::new(&[n, ce, cs], ga).unwrap()),
                Some(Tensor::new(&[n, ce, cs], gb).unwrap()),
                Some(Tensor::new(&[n, cs], gc).unwrap()),
                Some(Tensor::new(&[n, ce], gx).unwrap()),
            ]
        }),
    ))
}

/// The scan with position-independent parameters evaluated as a causal
/// convolution with the kernel `K[k, e] = sum_s C[s] A[e,s]^k B[e,s]`.
///
/// `a`, `b`: `[C_e, C_s]`; `c`: `[C_s]`; `x`: `[N, C_e]`.
pub fn global_conv_scan(a: &Tensor, b: &Tensor, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (&[ce, cs], &[n, ce_x]) = (a.shape(), x.shape()) else {
        return Err(Error::shape("global_conv_scan", format!("A {:?} X {:?}", a.shape(), x.shape())));
    };
    if b.shape() != a.shape() || c.shape() != [cs] || ce_x != ce {
        return Err(Error::shape(
            "global_conv_scan",
            format!("A {:?} B {:?} C {:?} X {:?}", a.shape(), b.shape(), c.shape(), x.shape()),
        ));
    }
    let (ad, bd, cd) = (a.data(), b.data(), c.data());
    let mut kernel = vec![0.0; n * ce];
    for e in 0..ce {
        for s in 0..cs {
            let mut pow = bd[e * cs + s] * cd[s];
            for k in 0..n {
                kernel[k * ce + e] += pow;
                pow *= ad[e * cs + s];
            }
        }
    }
    let xd = x.data();
    let mut y = vec![0.0; n * ce];
    for i in 0..n {
        for k in 0..=i {
            for e in 0..ce {
                y[i * ce + e] += kernel[k * ce + e] * xd[(i - k) * ce + e];
            }
        }
    }
    Tensor::new(&[n, ce], y)
}

/// [`global_conv_scan`] on per-position parameters as taken by
/// [`selective_scan`]; fails with [`Error::PositionVarying`] unless every
/// position carries the same `A`, `B` and `C`.
pub fn global_conv_scan_checked(a: &Tensor, b: &Tensor, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    let d = scan_dims(a.shape(), b.shape(), c.shape(), x.shape())?;
    let m = d.ce * d.cs;
    let constant = |t: &Tensor, row: usize| t.data().chunks(row).all(|r| r == &t.data()[..row]);
    if d.n > 0 && !(constant(a, m) && constant(b, m) && constant(c, d.cs)) {
        return Err(Error::PositionVarying);
    }
    if d.n == 0 {
        return Ok(Tensor::zeros(&[0, d.ce]));
    }
    global_conv_scan(
        &Tensor::new(&[d.ce, d.cs], a.data()[..m].to_vec())?,
        &Tensor::new(&[d.ce, d.cs], b.data()[..m].to_vec())?,
        &Tensor::new(&[d.cs], c.data()[..d.cs].to_vec())?,
        x,
    )
}

/// One Mamba block over an `[N, C1]` sequence, returning `[N, C1]`:
/// layer norm, the `X'` and `Z` branches, causal depthwise conv with SiLU,
/// input-dependent `delta`, `B'`, `C`, the selective scan, the SiLU(Z) gate,
/// the output projection and the residual.
pub fn mamba_block<'g>(s: &Var<'g>, p: &SsmBlockParams<'g>) -> Result<Var<'g>> {
    let shape = s.shape();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::shape("mamba_block", format!("expected [N>0, C1], got {shape:?}")));
    }
    let s_norm = s.layer_norm(&p.ln_scale, &p.ln_shift, LN_EPS)?;
    let x_pre = s_norm.linear(&p.w_x, None)?;
    let z = s_norm.linear(&p.w_z, None)?;
    let x = x_pre.conv1d_depthwise(&p.conv, Conv1dMode::Causal)?.silu();
    let delta = x.linear(&p.w_delta, Some(&p.delta_bias))?.softplus();
    let b_prime = x.linear(&p.w_b, None)?;
    let c = x.linear(&p.w_c, None)?;
    let (a, b) = discretize(&p.a_prime(), &b_prime, &delta)?;
    let y = selective_scan(&a, &b, &c, &x)?.mul(&z.silu())?;
    y.linear(&p.w_out, None)?.add(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{probe, GradCheck};
    use crate::tensor::Graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn rand_t(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn discretize_closed_forms() {
        let g = Graph::new();
        let ap = g.constant(t(&[1, 1], &[-1.0]));
        let bp = g.constant(t(&[1, 1], &[3.0]));
        let d = g.constant(t(&[1, 1], &[2f64.ln()]));
        let (a, b) = discretize(&ap, &bp, &d).unwrap();
        assert!((a.value().item() - 0.5).abs() < 1e-15);
        assert!((b.value().item() - 3.0 * 2f64.ln()).abs() < 1e-15);

        let tiny = g.constant(t(&[1, 1], &[1e-12]));
        let (a, b) = discretize(&ap, &bp, &tiny).unwrap();
        assert!((a.value().item() - 1.0).abs() < 1e-9);
        assert!(b.value().item().abs() < 1e-9);
    }

    #[test]
    fn discretize_rejects_nonpositive_step() {
        let g = Graph::new();
        let ap = g.constant(t(&[1, 1], &[-1.0]));
        let bp = g.constant(t(&[1, 1], &[1.0]));
        let d = g.constant(t(&[1, 1], &[0.0]));
        assert!(matches!(discretize(&ap, &bp, &d), Err(Error::InvalidArgument { .. })));
    }

    #[test]
    fn discretize_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, ce, cs) = (3, 2, 4);
        let ap = rand_t(&[ce, cs], -3.0, -0.1, &mut rng);
        let bp = rand_t(&[n, cs], -1.0, 1.0, &mut rng);
        let dt = rand_t(&[n, ce], 0.01, 2.0, &mut rng);
        let g = Graph::new();
        let (a, b) = discretize(&g.constant(ap.clone()), &g.constant(bp.clone()), &g.constant(dt.clone())).unwrap();
        for i in 0..n {
            for e in 0..ce {
                for s in 0..cs {
                    let d = dt.at(&[i, e]);
                    assert_eq!(a.value().at(&[i, e, s]), (d * ap.at(&[e, s])).exp());
                    assert_eq!(b.value().at(&[i, e, s]), d * bp.at(&[i, s]));
                }
            }
        }
    }

    #[test]
    fn scan_hand_recurrence() {
        // h0 = 1, y0 = 2; h1 = 0.5 + 1 = 1.5, y1 = 3
        let g = Graph::new();
        let a = g.constant(t(&[2, 1, 1], &[0.5, 0.5]));
        let b = g.constant(t(&[2, 1, 1], &[1.0, 1.0]));
        let c = g.constant(t(&[2, 1], &[2.0, 2.0]));
        let x = g.constant(t(&[2, 1], &[1.0, 1.0]));
        let y = selective_scan(&a, &b, &c, &x).unwrap();
        assert_eq!(y.value().data(), &[2.0, 3.0]);
    }

    #[test]
    fn scan_zero_readout_and_memoryless() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (n, ce, cs) = (5, 3, 2);
        let a = rand_t(&[n, ce, cs], 0.1, 0.9, &mut rng);
        let b = rand_t(&[n, ce, cs], -1.0, 1.0, &mut rng);
        let c = rand_t(&[n, cs], -1.0, 1.0, &mut rng);
        let x = rand_t(&[n, ce], -1.0, 1.0, &mut rng);
        let g = Graph::new();
        let zero_c = g.constant(Tensor::zeros(&[n, cs]));
        let y = selective_scan(&g.constant(a), &g.constant(b.clone()), &zero_c, &g.constant(x.clone())).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        let zero_a = g.constant(Tensor::zeros(&[n, ce, cs]));
        let y = selective_scan(&zero_a, &g.constant(b.clone()), &g.constant(c.clone()), &g.constant(x.clone())).unwrap();
        for i in 0..n {
            for e in 0..ce {
                let expect: f64 = (0..cs).map(|s| b.at(&[i, e, s]) * x.at(&[i, e]) * c.at(&[i, s])).sum();
                assert!((y.value().at(&[i, e]) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn conv_mode_small_cases() {
        let a = t(&[1, 1], &[0.0]);
        let b = t(&[1, 1], &[2.0]);
        let c = t(&[1], &[3.0]);
        let x = t(&[3, 1], &[1.0, -1.0, 4.0]);
        assert_eq!(global_conv_scan(&a, &b, &c, &x).unwrap().data(), &[6.0, -6.0, 24.0]);
        let one = t(&[1, 1], &[5.0]);
        assert_eq!(global_conv_scan(&a, &b, &c, &one).unwrap().data(), &[30.0]);
    }

    #[test]
    fn modes_agree_on_time_invariant_parameters() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, ce, cs) = (64, 3, 4);
            let a = rand_t(&[ce, cs], 0.0, 0.99, &mut rng);
            let b = rand_t(&[ce, cs], -1.0, 1.0, &mut rng);
            let c = rand_t(&[cs], -1.0, 1.0, &mut rng);
            let x = rand_t(&[n, ce], -1.0, 1.0, &mut rng);
            let conv = global_conv_scan(&a, &b, &c, &x).unwrap();
            let tile = |t: &Tensor, shape: &[usize]| {
                Tensor::new(shape, t.data().iter().copied().cycle().take(shape.iter().product()).collect()).unwrap()
            };
            let g = Graph::new();
            let rec = selective_scan(
                &g.constant(tile(&a, &[n, ce, cs])),
                &g.constant(tile(&b, &[n, ce, cs])),
                &g.constant(tile(&c, &[n, cs])),
                &g.constant(x.clone()),
            )
            .unwrap();
            assert!(rec.value().max_abs_diff(&conv) < 1e-5);
            let checked =
                global_conv_scan_checked(&tile(&a, &[n, ce, cs]), &tile(&b, &[n, ce, cs]), &tile(&c, &[n, cs]), &x)
                    .unwrap();
            assert_eq!(checked, conv);
        }
    }

    #[test]
    fn conv_mode_refuses_varying_parameters() {
        let a = t(&[2, 1, 1], &[0.5, 0.4]);
        let b = t(&[2, 1, 1], &[1.0, 1.0]);
        let c = t(&[2, 1], &[1.0, 1.0]);
        let x = t(&[2, 1], &[1.0, 1.0]);
        assert!(matches!(global_conv_scan_checked(&a, &b, &c, &x), Err(Error::PositionVarying)));
    }

    fn tiny_block(seed: u64) -> (ParamStore, SsmDims) {
        let dims = SsmDims {
            model: 3,
            expanded: 4,
            state: 2,
            window: 4,
        };
        let mut store = ParamStore::new();
        init_block(&mut store, "blk", dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (store, dims)
    }

    fn run_block(store: &ParamStore, s: &Tensor) -> Tensor {
        let g = Graph::new();
        let bound = store.bind(&g, false);
        let p = SsmBlockParams::bind(&bound.scope("blk")).unwrap();
        (*mamba_block(&g.constant(s.clone()), &p).unwrap().value()).clone()
    }

    #[test]
    fn init_a_prime_is_negative_ramp() {
        let (store, _) = tiny_block(0);
        let g = Graph::new();
        let bound = store.bind(&g, false);
        let p = SsmBlockParams::bind(&bound.scope("blk")).unwrap();
        let a = p.a_prime().value();
        for e in 0..4 {
            for s in 0..2 {
                assert!((a.at(&[e, s]) + (s as f64 + 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_input_passes_through() {
        let (store, _) = tiny_block(1);
        let s = Tensor::zeros(&[5, 3]);
        assert_eq!(run_block(&store, &s), s);
    }

    #[test]
    fn block_preserves_shape() {
        let (store, _) = tiny_block(2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [1, 2, 7] {
            let s = rand_t(&[n, 3], -1.0, 1.0, &mut rng);
            assert_eq!(run_block(&store, &s).shape(), &[n, 3]);
        }
    }

    #[test]
    fn block_is_causal_under_perturbation() {
        let (store, _) = tiny_block(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=8 {
            let s = rand_t(&[n, 3], -1.0, 1.0, &mut rng);
            let base = run_block(&store, &s);
            for i in 0..n {
                let mut pert = s.clone();
                for k in 0..3 {
                    pert.set(&[i, k], pert.at(&[i, k]) + 0.5);
                }
                let out = run_block(&store, &pert);
                assert_eq!(&out.data()[..i * 3], &base.data()[..i * 3], "n={n} i={i}");
                assert_ne!(&out.data()[i * 3..(i + 1) * 3], &base.data()[i * 3..(i + 1) * 3]);
            }
        }
    }

    #[test]
    fn block_gradient_is_causal() {
        let (store, _) = tiny_block(4);
        let s = rand_t(&[6, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        for j in 0..6 {
            let g = Graph::new();
            let bound = store.bind(&g, false);
            let p = SsmBlockParams::bind(&bound.scope("blk")).unwrap();
            let x = g.param(s.clone());
            let out = mamba_block(&x, &p).unwrap().narrow(0, j, 1).unwrap().sum();
            let gx = g.backward(out).unwrap().get(x);
            assert!(gx.data()[(j + 1) * 3..].iter().all(|&v| v == 0.0), "row {j}");
        }
    }

    #[test]
    fn stable_decay_with_negative_a() {
        let (store, _) = tiny_block(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Graph::new();
        let bound = store.bind(&g, false);
        let p = SsmBlockParams::bind(&bound.scope("blk")).unwrap();
        let delta = g.constant(rand_t(&[4, 4], 0.01, 3.0, &mut rng));
        let bp = g.constant(rand_t(&[4, 2], -1.0, 1.0, &mut rng));
        let (a, _) = discretize(&p.a_prime(), &bp, &delta).unwrap();
        assert!(a.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn scan_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, ce, cs) = (4, 3, 2);
        let inputs = vec![
            rand_t(&[n, ce, cs], 0.1, 0.9, &mut rng),
            rand_t(&[n, ce, cs], -1.0, 1.0, &mut rng),
            rand_t(&[n, cs], -1.0, 1.0, &mut rng),
            rand_t(&[n, ce], -1.0, 1.0, &mut rng),
        ];
        let report = GradCheck::default()
            .run(&inputs, |_, v| probe(&selective_scan(&v[0], &v[1], &v[2], &v[3])?, 1))
            .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn discretize_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = vec![
            rand_t(&[3, 2], -2.0, -0.1, &mut rng),
            rand_t(&[4, 2], -1.0, 1.0, &mut rng),
            rand_t(&[4, 3], 0.1, 1.0, &mut rng),
        ];
        let report = GradCheck::default()
            .run(&inputs, |_, v| {
                let (a, b) = discretize(&v[0], &v[1], &v[2])?;
                Ok(probe(&a, 2)?.add(&probe(&b, 3)?)?)
            })
            .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let (store, _) = tiny_block(8);
        let s = rand_t(&[5, 3], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let report = GradCheck::default()
            .run_with_store(&store, &[s], |bound, x| {
                let p = SsmBlockParams::bind(&bound.scope("blk"))?;
                probe(&mamba_block(&x[0], &p)?, 9)
            })
            .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}

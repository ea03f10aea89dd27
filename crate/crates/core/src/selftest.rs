//! Invariant suites that run outside the test harness: scan/merge round trip,
//! partition, recurrent vs. convolutional scan, causality and gradient
//! checks of every differentiable op and loss.

use std::time::{Duration, Instant};

use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::{probe, GradCheck, GradReport};
use crate::joint::{aggregate, init_aggregator, jego_merge, jego_scan, joint_concat, AggregatorParams, ScanLayout};
use crate::matcher::{l2_normalize_rows, match_probabilities};
use crate::params::ParamStore;
use crate::ssm::{discretize, global_conv_scan, init_block, mamba_block, selective_scan, SsmBlockParams, SsmDims};
use crate::supervision::{coarse_loss, cross_matrix, epipolar_loss, fine_loss, Focal};
use crate::tensor::{Conv1dMode, Graph, Tensor, Var};

/// Largest grid side exercised by the layout suites.
pub const MAX_GRID: usize = 16;
/// Tolerance of the recurrent vs. convolutional comparison.
pub const MODE_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub checks: usize,
    pub detail: String,
    pub elapsed: Duration,
}

impl SuiteResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<16} {:>6} checks  {:>8.3}s  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.checks,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SelfTest {
    /// Replace every layout by [`ScanLayout::with_merge_fault`].
    pub merge_fault: bool,
    pub seeds: u64,
}

impl Default for SelfTest {
    fn default() -> Self {
        Self {
            merge_fault: false,
            seeds: 10,
        }
    }
}

fn timed(name: &'static str, f: impl FnOnce() -> (bool, usize, String)) -> SuiteResult {
    let start = Instant::now();
    let (passed, checks, detail) = f();
    SuiteResult {
        name,
        passed,
        checks,
        detail,
        elapsed: start.elapsed(),
    }
}

fn rand_t(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn even_grids() -> impl Iterator<Item = (usize, usize)> {
    (2..=MAX_GRID)
        .step_by(2)
        .flat_map(|h| (2..=MAX_GRID).step_by(2).map(move |w| (h, w)))
}

impl SelfTest {
    fn layout(&self, h: usize, w: usize) -> Result<ScanLayout> {
        let l = ScanLayout::build(h, w)?;
        Ok(if self.merge_fault { l.with_merge_fault() } else { l })
    }

    pub fn run(&self) -> Vec<SuiteResult> {
        vec![
            self.partition(),
            self.round_trip(),
            self.mode_equivalence(),
            self.causality(),
            self.gradients(),
        ]
    }

    /// Every even grid up to [`MAX_GRID`] is split exactly once over the
    /// four directions, each `N/4` long.
    pub fn partition(&self) -> SuiteResult {
        timed("partition", || {
            let mut bad = Vec::new();
            let mut checks = 0;
            for (h, w) in even_grids() {
                checks += 1;
                match self.layout(h, w) {
                    Ok(l) if l.is_partition() && (0..4).all(|k| l.cells(k).len() == l.tokens() / 4) => {}
                    _ => bad.push(format!("{h}x{w}")),
                }
            }
            summary(checks, bad)
        })
    }

    /// Merging the scanned sequences returns both maps bit for bit.
    pub fn round_trip(&self) -> SuiteResult {
        timed("round-trip", || {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut bad = Vec::new();
            let mut checks = 0;
            for (h, w) in even_grids() {
                checks += 1;
                let (a, b) = (rand_t(&[h, w, 2], -1.0, 1.0, &mut rng), rand_t(&[h, w, 2], -1.0, 1.0, &mut rng));
                let ok = (|| -> Result<bool> {
                    let l = self.layout(h, w)?;
                    let g = Graph::new();
                    let (xh, xv) = joint_concat(&g.constant(a.clone()), &g.constant(b.clone()))?;
                    let (ma, mb) = jego_merge(&jego_scan(&xh, &xv, &l)?, &l)?;
                    Ok(*ma.value() == a && *mb.value() == b)
                })();
                if !matches!(ok, Ok(true)) {
                    bad.push(format!("{h}x{w}"));
                }
            }
            summary(checks, bad)
        })
    }

    /// Recurrent and global-convolution evaluation agree on
    /// position-independent parameters, over `2 * seeds` draws.
    pub fn mode_equivalence(&self) -> SuiteResult {
        timed("mode-equivalence", || {
            let mut worst = 0.0f64;
            let draws = 2 * self.seeds;
            for seed in 0..draws {
                worst = worst.max(mode_gap(seed));
            }
            (
                worst < MODE_TOLERANCE,
                draws as usize,
                format!("max abs diff {worst:.3e}"),
            )
        })
    }

    /// Perturbing one position of a sequence leaves every earlier output
    /// unchanged, for all positions of sequences up to 8 long.
    pub fn causality(&self) -> SuiteResult {
        timed("causality", || {
            let mut bad = Vec::new();
            let mut checks = 0;
            for seed in 0..self.seeds {
                for n in 1..=8 {
                    for i in 0..n {
                        checks += 1;
                        if !matches!(perturbation_is_causal(seed, n, i), Ok(true)) {
                            bad.push(format!("seed {seed} n {n} i {i}"));
                        }
                    }
                }
            }
            summary(checks, bad)
        })
    }

    pub fn gradients(&self) -> SuiteResult {
        timed("gradients", || {
            let mut bad = Vec::new();
            let mut checks = 0;
            let mut worst = 0.0f64;
            for case in gradient_cases() {
                for seed in 0..self.seeds {
                    checks += 1;
                    match (case.run)(seed) {
                        Ok(r) if r.passed() => worst = worst.max(r.max_rel_err),
                        Ok(r) => bad.push(format!("{} seed {seed}: {:.2e}", case.name, r.max_rel_err)),
                        Err(e) => bad.push(format!("{} seed {seed}: {e}", case.name)),
                    }
                }
            }
            let (passed, checks, detail) = summary(checks, bad);
            let detail = if passed { format!("max rel err {worst:.2e}") } else { detail };
            (passed, checks, detail)
        })
    }
}

fn summary(checks: usize, bad: Vec<String>) -> (bool, usize, String) {
    match bad.len() {
        0 => (true, checks, String::new()),
        n => {
            let shown: Vec<&str> = bad.iter().take(4).map(String::as_str).collect();
            let more = if n > shown.len() { "; ..." } else { "" };
            (false, checks, format!("{n} failed: {}{more}", shown.join("; ")))
        }
    }
}

/// Max-abs difference between the two scan evaluations for one random draw
/// with `N <= 64`.
pub fn mode_gap(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=64);
    let (ce, cs) = (rng.random_range(1..=4), rng.random_range(1..=4));
    let a = rand_t(&[ce, cs], 0.0, 0.99, &mut rng);
    let b = rand_t(&[ce, cs], -1.0, 1.0, &mut rng);
    let c = rand_t(&[cs], -1.0, 1.0, &mut rng);
    let x = rand_t(&[n, ce], -1.0, 1.0, &mut rng);
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
    let conv = global_conv_scan(&a, &b, &c, &x).unwrap();
    rec.value().max_abs_diff(&conv)
}

fn tiny_dims() -> SsmDims {
    SsmDims {
        model: 3,
        expanded: 4,
        state: 2,
        window: 4,
    }
}

fn block_store(seed: u64) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    init_block(&mut store, "blk", tiny_dims(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    Ok(store)
}

fn run_block(store: &ParamStore, s: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let bound = store.bind(&g, false);
    let p = SsmBlockParams::bind(&bound.scope("blk"))?;
    Ok((*mamba_block(&g.constant(s.clone()), &p)?.value()).clone())
}

/// Whether a Mamba block of length `n` keeps outputs before `i` bit-identical
/// when position `i` changes.
pub fn perturbation_is_causal(seed: u64, n: usize, i: usize) -> Result<bool> {
    let store = block_store(seed)?;
    let c = tiny_dims().model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(31).wrapping_add(n as u64));
    let s = rand_t(&[n, c], -1.0, 1.0, &mut rng);
    let mut pert = s.clone();
    for k in 0..c {
        pert.set(&[i, k], pert.at(&[i, k]) + rng.random_range(0.1..1.0));
    }
    let (base, out) = (run_block(&store, &s)?, run_block(&store, &pert)?);
    Ok(base.data()[..i * c] == out.data()[..i * c])
}

/// A finite-difference check of one op or loss on a random instance.
pub struct GradCase {
    pub name: &'static str,
    pub run: fn(u64) -> Result<GradReport>,
}

/// The suite's check: a smaller step than the default keeps the truncation
/// error of the central difference well under the tolerance in f64.
pub fn suite_check() -> GradCheck {
    GradCheck {
        step: 1e-5,
        ..GradCheck::default()
    }
}

fn check<F>(inputs: &[Tensor], f: F) -> Result<GradReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    suite_check().run(inputs, f)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed)
}

/// Values in `[0.2, 1]` with random sign, away from kinks at zero.
fn signed_away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    rand_t(shape, 0.2, 1.0, rng).zip_map(&rand_t(shape, -1.0, 1.0, rng), |v, s| v.copysign(s))
}

macro_rules! unary {
    ($name:literal, $lo:expr, $hi:expr, |$x:ident| $body:expr) => {
        GradCase {
            name: $name,
            run: |seed| {
                let x0 = rand_t(&[3, 4], $lo, $hi, &mut rng(seed));
                check(&[x0], |_, v| {
                    let $x = v[0];
                    probe(&$body, seed)
                })
            },
        }
    };
}

/// One case per differentiable op of the engine, the model building blocks
/// and the three losses.
pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "add",
            run: |seed| {
                let mut r = rng(seed);
                check(&[rand_t(&[3, 4], -1.0, 1.0, &mut r), rand_t(&[3, 4], -1.0, 1.0, &mut r)], |_, v| {
                    probe(&v[0].add(&v[1])?, seed)
                })
            },
        },
        GradCase {
            name: "sub",
            run: |seed| {
                let mut r = rng(seed);
                check(&[rand_t(&[3, 4], -1.0, 1.0, &mut r), rand_t(&[3, 4], -1.0, 1.0, &mut r)], |_, v| {
                    probe(&v[0].sub(&v[1])?, seed)
                })
            },
        },
        GradCase {
            name: "mul",
            run: |seed| {
                let mut r = rng(seed);
                check(&[rand_t(&[3, 4], -1.0, 1.0, &mut r), rand_t(&[3, 4], -1.0, 1.0, &mut r)], |_, v| {
                    probe(&v[0].mul(&v[1])?, seed)
                })
            },
        },
        GradCase {
            name: "add_broadcast",
            run: |seed| {
                let mut r = rng(seed);
                check(&[rand_t(&[2, 3, 4], -1.0, 1.0, &mut r), rand_t(&[4], -1.0, 1.0, &mut r)], |_, v| {
                    probe(&v[0].add_broadcast(&v[1])?, seed)
                })
            },
        },
        GradCase {
            name: "mul_broadcast",
            run: |seed| {
                let mut r = rng(seed);
                check(&[rand_t(&[2, 3, 4], -1.0, 1.0, &mut r), rand_t(&[4], -1.0, 1.0, &mut r)], |_, v| {
                    probe(&v[0].mul_broadcast(&v[1])?, seed)
                })
            },
        },
        unary!("scale", -1.0, 1.0, |x| x.scale(-2.5)),
        unary!("add_scalar", -1.0, 1.0, |x| x.add_scalar(0.7)),
        unary!("square", -1.0, 1.0, |x| x.square()),
        unary!("recip", 0.5, 2.0, |x| x.recip()),
        unary!("exp", -1.0, 1.0, |x| x.exp()),
        unary!("log", 0.5, 2.0, |x| x.log()),
        GradCase {
            name: "clamp_min",
            run: |seed| {
                check(&[signed_away_from_zero(&[3, 4], &mut rng(seed))], |_, v| probe(&v[0].clamp_min(0.0), seed))
            },
        },
        unary!("sum", -1.0, 1.0, |x| x.sum().scale(0.3)),
        unary!("mean", -1.0, 1.0, |x| x.mean().square()),
        unary!("sum_axis", -1.0, 1.0, |x| x.sum_axis(0)?),
        unary!("reshape", -1.0, 1.0, |x| x.reshape(&[2, 6])?),
        unary!("transpose_last2", -1.0, 1.0, |x| x.transpose_last2()?),
        unary!("narrow", -1.0, 1.0, |x| x.narrow(1, 1, 2)?),
        unary!("strided_slice", -1.0, 1.0, |x| x.strided_slice(&[1, 0], &[2, 2])?),
        unary!("gather_rows", -1.0, 1.0, |x| x.gather_rows(&[2, 0, 2])?),
        unary!("scatter_rows", -1.0, 1.0, |x| x.scatter_rows(&[4, 0, 2], 5)?),
        unary!("gather_flat", -1.0, 1.0, |x| x.gather_flat(&[11, 3, 3, 0])?),
        GradCase {
            name: "concat",
            run: |seed| {
                let mut r = rng(seed);
                check(&[rand_t(&[3, 4], -1.0, 1.0, &mut r), rand_t(&[3, 2], -1.0, 1.0, &mut r)], |_, v| {
                    probe(&Var::concat(&[v[0], v[1]], 1)?, seed)
                })
            },
        },
        GradCase {
            name: "matmul",
            run: |seed| {
                let mut r = rng(seed);
                check(&[rand_t(&[3, 4], -1.0, 1.0, &mut r), rand_t(&[4, 2], -1.0, 1.0, &mut r)], |_, v| {
                    probe(&v[0].matmul(&v[1])?, seed)
                })
            },
        },
        GradCase {
            name: "linear",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [
                    rand_t(&[2, 3, 4], -1.0, 1.0, &mut r),
                    rand_t(&[4, 5], -1.0, 1.0, &mut r),
                    rand_t(&[5], -1.0, 1.0, &mut r),
                ];
                check(&inputs, |_, v| probe(&v[0].linear(&v[1], Some(&v[2]))?, seed))
            },
        },
        unary!("silu", -2.0, 2.0, |x| x.silu()),
        unary!("gelu", -2.0, 2.0, |x| x.gelu()),
        unary!("tanh", -2.0, 2.0, |x| x.tanh()),
        unary!("sigmoid", -2.0, 2.0, |x| x.sigmoid()),
        unary!("softplus", -2.0, 2.0, |x| x.softplus()),
        unary!("softmax", -2.0, 2.0, |x| x.softmax(1)?),
        GradCase {
            name: "layer_norm",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [
                    rand_t(&[3, 4], -1.0, 1.0, &mut r),
                    rand_t(&[4], 0.5, 1.5, &mut r),
                    rand_t(&[4], -1.0, 1.0, &mut r),
                ];
                check(&inputs, |_, v| probe(&v[0].layer_norm(&v[1], &v[2], 1e-5)?, seed))
            },
        },
        GradCase {
            name: "conv2d",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [
                    rand_t(&[5, 4, 2], -1.0, 1.0, &mut r),
                    rand_t(&[3, 3, 2, 3], -1.0, 1.0, &mut r),
                    rand_t(&[3], -1.0, 1.0, &mut r),
                ];
                check(&inputs, |_, v| {
                    probe(&v[0].conv2d(&v[1], Some(&v[2]), 1)?, seed)?.add(&probe(&v[0].conv2d(&v[1], None, 2)?, seed + 1)?)
                })
            },
        },
        GradCase {
            name: "conv1d_depthwise",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [rand_t(&[6, 3], -1.0, 1.0, &mut r), rand_t(&[4, 3], -1.0, 1.0, &mut r)];
                check(&inputs, |_, v| probe(&v[0].conv1d_depthwise(&v[1], Conv1dMode::Causal)?, seed))
            },
        },
        GradCase {
            name: "discretize",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [
                    rand_t(&[3, 2], -2.0, -0.1, &mut r),
                    rand_t(&[4, 2], -1.0, 1.0, &mut r),
                    rand_t(&[4, 3], 0.1, 1.0, &mut r),
                ];
                check(&inputs, |_, v| {
                    let (a, b) = discretize(&v[0], &v[1], &v[2])?;
                    probe(&a, seed)?.add(&probe(&b, seed + 1)?)
                })
            },
        },
        GradCase {
            name: "selective_scan",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [
                    rand_t(&[4, 3, 2], 0.1, 0.9, &mut r),
                    rand_t(&[4, 3, 2], -1.0, 1.0, &mut r),
                    rand_t(&[4, 2], -1.0, 1.0, &mut r),
                    rand_t(&[4, 3], -1.0, 1.0, &mut r),
                ];
                check(&inputs, |_, v| probe(&selective_scan(&v[0], &v[1], &v[2], &v[3])?, seed))
            },
        },
        GradCase {
            name: "mamba_block",
            run: |seed| {
                let store = block_store(seed)?;
                let s = rand_t(&[5, 3], -1.0, 1.0, &mut rng(seed));
                suite_check().run_with_store(&store, &[s], |bound, x| {
                    let p = SsmBlockParams::bind(&bound.scope("blk"))?;
                    probe(&mamba_block(&x[0], &p)?, seed)
                })
            },
        },
        GradCase {
            name: "scan_merge",
            run: |seed| {
                let mut r = rng(seed);
                let layout = ScanLayout::build(2, 4)?;
                let inputs = [rand_t(&[2, 4, 2], -1.0, 1.0, &mut r), rand_t(&[2, 4, 2], -1.0, 1.0, &mut r)];
                check(&inputs, |_, v| {
                    let (xh, xv) = joint_concat(&v[0], &v[1])?;
                    let seqs = jego_scan(&xh, &xv, &layout)?.map(|s| s.square());
                    let (ma, mb) = jego_merge(&seqs, &layout)?;
                    probe(&ma, seed)?.add(&probe(&mb, seed + 1)?)
                })
            },
        },
        GradCase {
            name: "aggregate",
            run: |seed| {
                let mut store = ParamStore::new();
                init_aggregator(&mut store, "agg", 2, &mut rng(seed));
                let f = rand_t(&[3, 4, 2], -1.0, 1.0, &mut rng(seed + 1));
                suite_check().run_with_store(&store, &[f], |bound, x| {
                    let p = AggregatorParams::bind(&bound.scope("agg"))?;
                    probe(&aggregate(&x[0], &p)?, seed)
                })
            },
        },
        GradCase {
            name: "l2_normalize",
            run: |seed| {
                check(&[signed_away_from_zero(&[3, 4], &mut rng(seed))], |_, v| probe(&l2_normalize_rows(&v[0])?, seed))
            },
        },
        GradCase {
            name: "dual_softmax",
            run: |seed| {
                check(&[rand_t(&[3, 4], -2.0, 2.0, &mut rng(seed))], |_, v| {
                    let (ab, ba) = match_probabilities(&v[0])?;
                    probe(&ab, seed)?.add(&probe(&ba, seed + 1)?)
                })
            },
        },
        GradCase {
            name: "coarse_loss",
            run: |seed| {
                let mut r = rng(seed);
                let inputs = [rand_t(&[4, 4], 0.1, 0.9, &mut r), rand_t(&[4, 4], 0.1, 0.9, &mut r)];
                check(&inputs, |_, v| coarse_loss(&v[0], &v[1], &[1, 6, 11], Focal::default()))
            },
        },
        GradCase {
            name: "fine_loss",
            run: |seed| {
                let p = rand_t(&[2, 3, 3], 0.1, 0.9, &mut rng(seed));
                check(&[p], |_, v| fine_loss(&v[0], &[Some(4), Some(7)], Focal::default()))
            },
        },
        GradCase {
            name: "epipolar_loss",
            run: |seed| {
                let mut r = rng(seed);
                let t = Vector3::new(r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0));
                let rot = Rotation3::from_euler_angles(
                    r.random_range(-0.2..0.2),
                    r.random_range(-0.2..0.2),
                    r.random_range(-0.2..0.2),
                );
                let e = cross_matrix(&t.normalize()) * rot.matrix();
                let homogeneous = |mut t: Tensor| {
                    for row in 0..3 {
                        t.set(&[row, 2], 1.0);
                    }
                    t
                };
                let x = homogeneous(rand_t(&[3, 3], -0.5, 0.5, &mut r));
                let y = homogeneous(rand_t(&[3, 3], -0.5, 0.5, &mut r));
                check(&[x, y], move |_, v| Ok(epipolar_loss(&v[0], &v[1], &e)?.0))
            },
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_every_suite() {
        for r in SelfTest::default().run() {
            assert!(r.passed, "{}", r.line());
        }
    }

    #[test]
    fn merge_fault_fails_the_partition_suite() {
        let t = SelfTest {
            merge_fault: true,
            ..SelfTest::default()
        };
        assert!(!t.partition().passed);
        assert!(!t.round_trip().passed);
        assert!(t.mode_equivalence().passed);
    }

    #[test]
    fn case_names_are_unique() {
        let names: std::collections::BTreeSet<_> = gradient_cases().iter().map(|c| c.name).collect();
        assert_eq!(names.len(), gradient_cases().len());
    }
}

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Lower clamp on probabilities before the logarithm.
pub const PROB_FLOOR: f64 = 1e-8;
/// Added to the squared epipolar-line norms.
pub const EPIPOLAR_GUARD: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Focal {
    pub alpha: f64,
    pub gamma: u32,
}

impl Default for Focal {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2 }
    }
}

fn zero<'g>(g: &'g Graph) -> Var<'g> {
    g.constant(Tensor::scalar(0.0))
}

/// `-mean over positives of alpha (1 - p)^gamma log p`, with `p` clamped to
/// [`PROB_FLOOR`]. `positives` are flat indices into `p`; no positives gives 0.
pub fn focal_loss<'g>(p: &Var<'g>, positives: &[usize], focal: Focal) -> Result<Var<'g>> {
    if positives.is_empty() {
        return Ok(zero(p.graph()));
    }
    let pos = p.gather_flat(positives)?.clamp_min(PROB_FLOOR);
    let miss = pos.scale(-1.0).add_scalar(1.0);
    let mut weight = p.graph().constant(Tensor::full(&[positives.len()], focal.alpha));
    for _ in 0..focal.gamma {
        weight = weight.mul(&miss)?;
    }
    Ok(weight.mul(&pos.log())?.mean().scale(-1.0))
}

/// Focal loss of both directional probability matrices against the same
/// positives.
pub fn coarse_loss<'g>(p_ab: &Var<'g>, p_ba: &Var<'g>, positives: &[usize], focal: Focal) -> Result<Var<'g>> {
    if p_ab.shape() != p_ba.shape() {
        return Err(Error::shape("coarse_loss", format!("{:?} vs {:?}", p_ab.shape(), p_ba.shape())));
    }
    focal_loss(p_ab, positives, focal)?.add(&focal_loss(p_ba, positives, focal)?)
}

/// Focal loss over `[M, K, K]` fine probabilities; `targets[m]` is the flat
/// `(a, b)` index of window pair `m`, `None` when it has no valid truth.
pub fn fine_loss<'g>(p_f: &Var<'g>, targets: &[Option<usize>], focal: Focal) -> Result<Var<'g>> {
    let s = p_f.shape();
    if s.len() != 3 || s[0] != targets.len() {
        return Err(Error::shape("fine_loss", format!("{s:?} for {} targets", targets.len())));
    }
    let per = s[1] * s[2];
    let flat: Vec<usize> = targets
        .iter()
        .enumerate()
        .filter_map(|(m, t)| t.map(|k| m * per + k))
        .collect();
    focal_loss(p_f, &flat, focal)
}

/// Mean symmetric epipolar distance `(x^T E y)^2 (1/|E^T x|^2 + 1/|E y|^2)`
/// over rows of `x`, `y` (`[M, 3]` homogeneous normalized points), where the
/// norms take the first two components. Returns `(0, false)` for no rows.
pub fn epipolar_loss<'g>(x: &Var<'g>, y: &Var<'g>, e: &Matrix3<f64>) -> Result<(Var<'g>, bool)> {
    let s = x.shape();
    if s.len() != 2 || s[1] != 3 || y.shape() != s {
        return Err(Error::shape("epipolar_loss", format!("{s:?} vs {:?}", y.shape())));
    }
    if s[0] == 0 {
        return Ok((zero(x.graph()), false));
    }
    let g = x.graph();
    // nalgebra iterates column-major, so this lays out m^T row-major
    let transposed = |m: &Matrix3<f64>| g.constant(Tensor::new(&[3, 3], m.iter().copied().collect()).unwrap());
    let ey = y.matmul(&transposed(e))?; // rows (E y)^T
    let etx = x.matmul(&transposed(&e.transpose()))?; // rows (E^T x)^T
    let residual = x.mul(&ey)?.sum_axis(1)?;
    let line = |v: &Var<'g>| -> Result<Var<'g>> {
        Ok(v.narrow(1, 0, 2)?.square().sum_axis(1)?.add_scalar(EPIPOLAR_GUARD).recip())
    };
    let weight = line(&etx)?.add(&line(&ey)?)?;
    Ok((residual.square().mul(&weight)?.mean(), true))
}

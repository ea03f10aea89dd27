//! Synthetic supervision: plane-induced warps of texture images, ground-truth
//! coarse and fine correspondences, the matching losses and the training loop.
//!
//! Geometry conventions: camera A sits at the origin; a point `X_A` in its
//! frame appears in camera B at `X_B = R X_A + t`, with `|t| = 1`. The scene is
//! a plane `n . X_A = d`. Pixel homographies map A pixels to B pixels and the
//! essential matrix satisfies `x_B^T E x_A = 0` in normalized coordinates.

mod loss;
mod texture;
mod train;

pub use loss::{coarse_loss, epipolar_loss, fine_loss, focal_loss, Focal, EPIPOLAR_GUARD, PROB_FLOOR};
pub use texture::{texture, texture_corpus};
pub use train::{
    evaluate_precision, learning_rate, load_corpus, pair_loss, train, train_dir, EpochLog, Momentum, PairLoss,
    StepLog, TrainConfig, TrainReport, METRICS_FILE, MIN_CORPUS, TRAIN_CONFIG_FILE, WEIGHTS_DIR,
};

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::Rng;

use crate::error::{Error, Result};
use crate::matcher::{window_cells, COARSE_STRIDE, FINE_PER_COARSE, FINE_STRIDE};
use crate::pgm::Gray;

/// Pinhole intrinsics with square pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    /// Focal length equal to the image width, principal point at the center.
    pub fn for_image(width: usize, height: usize) -> Self {
        Self {
            focal: width as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.focal, 0.0, self.cx, 0.0, self.focal, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse(&self) -> Matrix3<f64> {
        let f = self.focal;
        Matrix3::new(1.0 / f, 0.0, -self.cx / f, 0.0, 1.0 / f, -self.cy / f, 0.0, 0.0, 1.0)
    }

    /// Homogeneous normalized coordinates of pixel `(x, y)`.
    pub fn normalize(&self, x: f64, y: f64) -> Vector3<f64> {
        Vector3::new((x - self.cx) / self.focal, (y - self.cy) / self.focal, 1.0)
    }
}

/// `[t]_x`, so that `[t]_x v = t x v`.
pub fn cross_matrix(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    /// `[t]_x R`; fails for a zero translation.
    pub fn essential(&self) -> Result<Matrix3<f64>> {
        if self.translation.norm() < 1e-9 {
            return Err(Error::DegeneratePose);
        }
        Ok(cross_matrix(&self.translation) * self.rotation)
    }
}

/// The scene plane `normal . X = distance` in camera A.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plane {
    pub normal: Vector3<f64>,
    pub distance: f64,
}

/// `K (R + t n^T / d) K^-1`.
pub fn plane_homography(k: &Intrinsics, pose: &Pose, plane: &Plane) -> Result<Matrix3<f64>> {
    if !(plane.distance > 0.0) {
        return Err(Error::invalid("plane_homography", "plane must lie in front of camera A"));
    }
    let h = k.matrix() * (pose.rotation + pose.translation * plane.normal.transpose() / plane.distance) * k.inverse();
    if h.determinant().abs() < 1e-12 {
        return Err(Error::invalid("plane_homography", "singular homography"));
    }
    Ok(h)
}

/// Maps pixel `(x, y)` through `h`; `None` when it lands at or behind infinity.
pub fn apply_homography(h: &Matrix3<f64>, x: f64, y: f64) -> Option<(f64, f64)> {
    let p = h * Vector3::new(x, y, 1.0);
    (p.z > 1e-12).then(|| (p.x / p.z, p.y / p.z))
}

/// Ranges of the random relative pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WarpRange {
    /// Maximum rotation angle, radians.
    pub max_rotation: f64,
    /// Maximum `|t| / d`, the translation relative to the plane distance.
    pub max_translation: f64,
    /// Maximum angle between the plane normal and the optical axis, radians.
    pub max_tilt: f64,
}

impl Default for WarpRange {
    fn default() -> Self {
        Self {
            max_rotation: 0.1,
            max_translation: 0.1,
            max_tilt: 0.2,
        }
    }
}

/// A training pair: `image_b(p) = base(origin + H^-1 p)` where `image_a` is the
/// crop of `base` at `origin`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub image_a: Gray,
    pub image_b: Gray,
    pub homography: Matrix3<f64>,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
    pub essential: Matrix3<f64>,
}

impl PairSample {
    pub fn from_pose(
        base: &Gray,
        origin: (usize, usize),
        size: (usize, usize),
        pose: Pose,
        plane: Plane,
    ) -> Result<Self> {
        let (w, h) = size;
        if origin.0 + w > base.width || origin.1 + h > base.height {
            return Err(Error::invalid(
                "synth_pair",
                format!("{w}x{h} crop at {origin:?} exceeds {}x{} base", base.width, base.height),
            ));
        }
        let essential = pose.essential()?;
        let intrinsics = Intrinsics::for_image(w, h);
        let homography = plane_homography(&intrinsics, &pose, &plane)?;
        let inv = homography.try_inverse().ok_or_else(|| Error::invalid("synth_pair", "singular homography"))?;
        let (ox, oy) = (origin.0 as f64, origin.1 as f64);
        let mut a = Vec::with_capacity(w * h);
        let mut b = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                a.push(base.get(origin.0 + x, origin.1 + y));
                let v = apply_homography(&inv, x as f64, y as f64)
                    .and_then(|(sx, sy)| base.sample(sx + ox, sy + oy))
                    .unwrap_or(0.0);
                b.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        Ok(Self {
            image_a: Gray::new(w, h, a)?,
            image_b: Gray::new(w, h, b)?,
            homography,
            pose,
            intrinsics,
            essential,
        })
    }
}

fn random_unit<R: Rng + ?Sized>(rng: &mut R) -> Unit<Vector3<f64>> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 1e-3 && n <= 1.0 {
            return Unit::new_normalize(v);
        }
    }
}

/// Random pose and plane; degenerate draws are redrawn.
pub fn sample_geometry<R: Rng + ?Sized>(rng: &mut R, range: &WarpRange) -> (Pose, Plane) {
    loop {
        let angle = rng.random_range(-1.0..=1.0) * range.max_rotation;
        let rotation = *Rotation3::from_axis_angle(&random_unit(rng), angle).matrix();
        let translation = random_unit(rng).into_inner();
        let ratio = rng.random_range(0.0..=1.0) * range.max_translation;
        let tilt = rng.random_range(0.0..=1.0) * range.max_tilt;
        let axis = Unit::new_normalize(Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0));
        let normal = Rotation3::from_axis_angle(&axis, tilt) * Vector3::z();
        let pose = Pose { rotation, translation };
        if ratio > 1e-6 && pose.essential().is_ok() {
            return (pose, Plane { normal, distance: 1.0 / ratio });
        }
    }
}

/// A random `size` crop of `base` and its warp under a random plane-induced
/// homography.
pub fn synth_pair<R: Rng + ?Sized>(base: &Gray, size: (usize, usize), rng: &mut R, range: &WarpRange) -> Result<PairSample> {
    if base.width < size.0 || base.height < size.1 {
        return Err(Error::invalid(
            "synth_pair",
            format!("base {}x{} smaller than {}x{}", base.width, base.height, size.0, size.1),
        ));
    }
    let origin = (
        rng.random_range(0..=base.width - size.0),
        rng.random_range(0..=base.height - size.1),
    );
    loop {
        let (pose, plane) = sample_geometry(rng, range);
        match PairSample::from_pose(base, origin, size, pose, plane) {
            Err(Error::DegeneratePose) | Err(Error::InvalidArgument { .. }) => continue,
            other => return other,
        }
    }
}

/// Ground-truth coarse correspondences: for each A cell, the B cell it lands
/// on, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub grid: (usize, usize),
    pub coarse: Vec<Option<usize>>,
}

impl GroundTruth {
    pub fn positives(&self) -> Vec<(usize, usize)> {
        self.coarse
            .iter()
            .enumerate()
            .filter_map(|(i, j)| j.map(|j| (i, j)))
            .collect()
    }

    /// Flat indices of the positives in an `n x n` matrix.
    pub fn flat_positives(&self) -> Vec<usize> {
        let n = self.coarse.len();
        self.positives().iter().map(|&(i, j)| i * n + j).collect()
    }

    /// Dense binary `n x n` matrix.
    pub fn matrix(&self) -> Vec<Vec<u8>> {
        let n = self.coarse.len();
        let mut m = vec![vec![0; n]; n];
        for (i, j) in self.positives() {
            m[i][j] = 1;
        }
        m
    }
}

fn coarse_pixel(i: usize, grid: (usize, usize)) -> (f64, f64) {
    (((i % grid.1) * COARSE_STRIDE) as f64, ((i / grid.1) * COARSE_STRIDE) as f64)
}

/// Projects each A cell through `h`; positive at the nearest B cell when the
/// projection lies inside the `image` (`(height, width)`) and within half a
/// coarse cell of that cell.
pub fn gt_from_warp(h: &Matrix3<f64>, grid: (usize, usize), image: (usize, usize)) -> GroundTruth {
    let n = grid.0 * grid.1;
    let half = COARSE_STRIDE as f64 / 2.0;
    let coarse = (0..n)
        .map(|i| {
            let (x, y) = coarse_pixel(i, grid);
            let (px, py) = apply_homography(h, x, y)?;
            let inside = px >= 0.0 && py >= 0.0 && px <= (image.1 - 1) as f64 && py <= (image.0 - 1) as f64;
            if !inside {
                return None;
            }
            let s = COARSE_STRIDE as f64;
            let (r, c) = ((py / s).round() as usize, (px / s).round() as usize);
            if r >= grid.0 || c >= grid.1 {
                return None;
            }
            let j = r * grid.1 + c;
            let (bx, by) = coarse_pixel(j, grid);
            ((px - bx).hypot(py - by) < half).then_some(j)
        })
        .collect();
    GroundTruth { grid, coarse }
}

/// Fine target for coarse pair `(i, j)`: the window cell of B closest to the
/// projection of A's window center, if closer than one fine cell. Windows are
/// `window x window` cells of the `fine` (`(rows, cols)`) map.
pub fn fine_target(
    h: &Matrix3<f64>,
    pair: (usize, usize),
    grid: (usize, usize),
    fine: (usize, usize),
    window: usize,
) -> Option<usize> {
    let (x, y) = coarse_pixel(pair.0, grid);
    let (px, py) = apply_homography(h, x, y)?;
    let center = ((pair.1 / grid.1) * FINE_PER_COARSE, (pair.1 % grid.1) * FINE_PER_COARSE);
    let s = FINE_STRIDE as f64;
    let mut best: Option<(usize, f64)> = None;
    for (k, (r, c)) in window_cells(center, window).into_iter().enumerate() {
        if r < 0 || c < 0 || r as usize >= fine.0 || c as usize >= fine.1 {
            continue;
        }
        let err = (px - c as f64 * s).hypot(py - r as f64 * s);
        if best.is_none_or(|(_, e)| err < e) {
            best = Some((k, err));
        }
    }
    best.filter(|&(_, e)| e < s).map(|(k, _)| k)
}

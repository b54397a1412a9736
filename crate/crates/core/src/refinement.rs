//! Normal refinement by rotations on the unit sphere, the shrinking angle
//! schedule, frame steering from the last accepted step and per-pixel
//! proposal generation.

use crate::geometry::{PlaneHypothesis, Vec3};
use rand::Rng;
use thiserror::Error;

const FRAME_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RefinementError {
    #[error("tangent frame is not orthonormal to the normal")]
    InvalidFrame,
    #[error("normal did not move; no descent direction")]
    DegenerateDirection,
}

/// Two unit vectors orthogonal to each other and to a normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentFrame {
    pub e1: Vec3,
    pub e2: Vec3,
}

impl TangentFrame {
    /// Validated frame for `n`.
    pub fn new(n: &Vec3, e1: Vec3, e2: Vec3) -> Result<Self, RefinementError> {
        let f = Self { e1, e2 };
        if f.is_valid_for(n) {
            Ok(f)
        } else {
            Err(RefinementError::InvalidFrame)
        }
    }

    pub fn is_valid_for(&self, n: &Vec3) -> bool {
        self.e1.dot(n).abs() <= FRAME_TOL
            && self.e2.dot(n).abs() <= FRAME_TOL
            && self.e1.dot(&self.e2).abs() <= FRAME_TOL
            && (self.e1.norm() - 1.0).abs() <= FRAME_TOL
            && (self.e2.norm() - 1.0).abs() <= FRAME_TOL
    }

    /// Gram-Schmidt against the coordinate axis least aligned with `n`, then
    /// a random turn within the tangent plane.
    pub fn random<R: Rng + ?Sized>(n: &Vec3, rng: &mut R) -> Self {
        let axis = if n.x.abs() <= n.y.abs() && n.x.abs() <= n.z.abs() {
            Vec3::x()
        } else if n.y.abs() <= n.z.abs() {
            Vec3::y()
        } else {
            Vec3::z()
        };
        let a = (axis - n * axis.dot(n)).normalize();
        let b = n.cross(&a);
        let phi = rng.random_range(0.0..std::f64::consts::TAU);
        let e1 = (a * phi.cos() + b * phi.sin()).normalize();
        let e2 = n.cross(&e1).normalize();
        Self { e1, e2 }
    }
}

/// Two successive rotations of `n`, about `e1` by `theta1` and then about
/// `e2` by `theta2` (radians), in the two-term form that drops the axial
/// component. `full` uses the complete formula for the second turn, which
/// matters because `e2` need not be orthogonal to the once-rotated normal.
/// No frame checks.
pub fn rotate_unchecked(n: &Vec3, e1: &Vec3, e2: &Vec3, theta1: f64, theta2: f64, full: bool) -> Vec3 {
    let n1 = n * theta1.cos() + e1.cross(n) * theta1.sin();
    let mut n2 = n1 * theta2.cos() + e2.cross(&n1) * theta2.sin();
    if full {
        n2 += e2 * (e2.dot(&n1) * (1.0 - theta2.cos()));
    }
    n2.normalize()
}

/// [`rotate_unchecked`] after validating the frame against `n`.
pub fn rotate_normal(
    n: &Vec3,
    frame: &TangentFrame,
    theta1: f64,
    theta2: f64,
    full: bool,
) -> Result<Vec3, RefinementError> {
    if !frame.is_valid_for(n) {
        return Err(RefinementError::InvalidFrame);
    }
    Ok(rotate_unchecked(n, &frame.e1, &frame.e2, theta1, theta2, full))
}

/// Upper end of the rotation range in round `i` of `n_max`, degrees.
pub fn angle_range(i: usize, n_max: usize) -> f64 {
    5.0 * 2f64.powi(n_max as i32 - i as i32)
}

/// Two rotation angles in degrees, each uniform on `[0, angle_range]`.
pub fn angle_schedule<R: Rng + ?Sized>(i: usize, n_max: usize, rng: &mut R) -> (f64, f64) {
    let hi = angle_range(i, n_max);
    (rng.random_range(0.0..=hi), rng.random_range(0.0..=hi))
}

/// Next frame from the accepted move `n -> n2`: `e1` follows the move,
/// projected onto the tangent plane at `n2`, and `e2 = e1 x n2`.
pub fn descend_frame(n: &Vec3, n2: &Vec3) -> Result<TangentFrame, RefinementError> {
    let step = n2 - n;
    if step.norm() < 1e-9 {
        return Err(RefinementError::DegenerateDirection);
    }
    let t = step - n2 * step.dot(n2);
    if t.norm() < 1e-12 {
        return Err(RefinementError::DegenerateDirection);
    }
    let e1 = t.normalize();
    let e2 = e1.cross(n2).normalize();
    Ok(TangentFrame { e1, e2 })
}

/// The unprojected variant: `e1 = normalize(n2 - n)`, not tangent at `n2`.
pub fn descend_frame_raw(n: &Vec3, n2: &Vec3) -> Result<TangentFrame, RefinementError> {
    let step = n2 - n;
    if step.norm() < 1e-9 {
        return Err(RefinementError::DegenerateDirection);
    }
    let e1 = step.normalize();
    let e2 = e1.cross(n2).normalize();
    Ok(TangentFrame { e1, e2 })
}

/// How refinement perturbs hypotheses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RefineMode {
    #[default]
    Spherical,
    /// Axis-additive normal noise, fixed depth window and random restarts.
    Additive,
    Off,
}

/// Settings for [`refine_proposals`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineSettings {
    pub mode: RefineMode,
    pub full_rodrigues: bool,
    pub raw_descent: bool,
    pub depth_range: (f64, f64),
}

/// Candidate hypotheses for one refinement round.
///
/// Spherical mode rotates the normal with the round's angles and draws a
/// depth from `interval`, returning `(n', d)`, `(n, d')` and `(n', d')`.
/// Additive mode perturbs each normal coordinate by up to 0.1, the depth by
/// up to 1% of the scene range, and adds a uniformly random hypothesis.
/// `ray` is the viewing ray of the pixel; proposals whose normal does not
/// face it are dropped.
#[allow(clippy::too_many_arguments)]
pub fn refine_proposals<R: Rng + ?Sized>(
    h: &PlaneHypothesis,
    frame: &TangentFrame,
    interval: (f64, f64),
    round: usize,
    n_max: usize,
    ray: &Vec3,
    settings: &RefineSettings,
    rng: &mut R,
) -> Vec<PlaneHypothesis> {
    let mut out = Vec::with_capacity(4);
    let faces = |n: &Vec3| n.dot(ray) < 0.0;
    match settings.mode {
        RefineMode::Off => {}
        RefineMode::Spherical => {
            let (t1, t2) = angle_schedule(round, n_max, rng);
            let n_rot = rotate_unchecked(&h.normal, &frame.e1, &frame.e2, t1.to_radians(), t2.to_radians(), settings.full_rodrigues);
            let d = if interval.0 < interval.1 { rng.random_range(interval.0..=interval.1) } else { interval.0 };
            if faces(&n_rot) {
                out.push(PlaneHypothesis::new(h.depth, n_rot));
            }
            out.push(PlaneHypothesis::new(d, h.normal));
            if faces(&n_rot) {
                out.push(PlaneHypothesis::new(d, n_rot));
            }
        }
        RefineMode::Additive => {
            let (lo, hi) = settings.depth_range;
            let delta = 0.01 * (hi - lo);
            let jitter = Vec3::new(rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1), rng.random_range(-0.1..=0.1));
            let n_pert = (h.normal + jitter).normalize();
            let d_pert = (h.depth + rng.random_range(-delta..=delta)).clamp(lo, hi);
            if faces(&n_pert) {
                out.push(PlaneHypothesis::new(h.depth, n_pert));
            }
            out.push(PlaneHypothesis::new(d_pert, h.normal));
            if faces(&n_pert) {
                out.push(PlaneHypothesis::new(d_pert, n_pert));
            }
            out.push(PlaneHypothesis::new(rng.random_range(lo..=hi), random_facing_normal(ray, rng)));
        }
    }
    out
}

/// Uniform unit vector on the hemisphere facing against `ray`.
pub fn random_facing_normal<R: Rng + ?Sized>(ray: &Vec3, rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n2 = v.norm_squared();
        if !(1e-6..=1.0).contains(&n2) {
            continue;
        }
        let v = v / n2.sqrt();
        let d = v.dot(ray);
        if d.abs() < 1e-9 {
            continue;
        }
        return if d < 0.0 { v } else { -v };
    }
}

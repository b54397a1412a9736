//! Pinhole cameras, per-pixel plane hypotheses and the projective maps
//! built on top of them.
//!
//! Conventions: a world point `X` maps to camera coordinates through
//! `x_cam = R (X - C)`, pixels have integer coordinates at pixel centers and
//! depth is the camera-frame `z` of a point. Plane normals live in the
//! camera frame of the view that owns the hypothesis.

use nalgebra::{Matrix3, Vector2, Vector3};
use thiserror::Error;

/// 3x3 double precision matrix.
pub type Mat3 = Matrix3<f64>;
/// 3-vector in scene units.
pub type Vec3 = Vector3<f64>;
/// Sub-pixel image coordinate `(x, y)`.
pub type Pixel = Vector2<f64>;

const ORTHO_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("point lies behind the camera (depth {0})")]
    BehindCamera(f64),
    #[error("depth must be positive, got {0}")]
    NonPositiveDepth(f64),
    #[error("warped pixel ({x:.2}, {y:.2}) leaves the source image")]
    OutOfBounds { x: f64, y: f64 },
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
}

/// Pinhole camera with intrinsics `K`, world-to-camera rotation `R` and
/// center `C`.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    k: Mat3,
    k_inv: Mat3,
    r: Mat3,
    c: Vec3,
    width: usize,
    height: usize,
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Pixel,
    pub depth: f64,
}

impl CameraModel {
    pub fn new(k: Mat3, r: Mat3, c: Vec3, width: usize, height: usize) -> Result<Self, GeometryError> {
        if width < 8 || height < 8 {
            return Err(GeometryError::InvalidCamera(format!(
                "image dimensions {width}x{height} below the 8 pixel minimum"
            )));
        }
        if k.iter().chain(r.iter()).chain(c.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidCamera("non-finite entry".into()));
        }
        if k[(1, 0)] != 0.0 || k[(2, 0)] != 0.0 || k[(2, 1)] != 0.0 {
            return Err(GeometryError::InvalidCamera("K must be upper triangular".into()));
        }
        if k[(0, 0)] <= 0.0 || k[(1, 1)] <= 0.0 {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive".into()));
        }
        if (k[(2, 2)] - 1.0).abs() > ORTHO_TOL {
            return Err(GeometryError::InvalidCamera("K[2][2] must be 1".into()));
        }
        let rrt = r * r.transpose();
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (rrt[(i, j)] - expect).abs() > ORTHO_TOL {
                    return Err(GeometryError::InvalidCamera("R is not orthonormal".into()));
                }
            }
        }
        let det = r.determinant();
        if (det - 1.0).abs() > ORTHO_TOL {
            return Err(GeometryError::InvalidCamera(format!("det(R) = {det:.6}, expected +1")));
        }
        let k_inv = k
            .try_inverse()
            .ok_or_else(|| GeometryError::InvalidCamera("K is singular".into()))?;
        Ok(Self { k, k_inv, r, c, width, height })
    }

    pub fn k(&self) -> &Mat3 {
        &self.k
    }

    pub fn k_inv(&self) -> &Mat3 {
        &self.k_inv
    }

    pub fn rotation(&self) -> &Mat3 {
        &self.r
    }

    pub fn center(&self) -> &Vec3 {
        &self.c
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Camera for a pyramid level where each level halves both axes with a
    /// 2x2 box filter. Pixel `x` at level `l` covers level-0 pixels
    /// `2^l x .. 2^l x + 2^l - 1`, so the principal point shifts by half a
    /// pixel per halving.
    pub fn at_level(&self, level: usize, width: usize, height: usize) -> Result<Self, GeometryError> {
        let s = (1u64 << level) as f64;
        let mut k = self.k;
        k[(0, 0)] /= s;
        k[(0, 1)] /= s;
        k[(1, 1)] /= s;
        k[(0, 2)] = (k[(0, 2)] + 0.5) / s - 0.5;
        k[(1, 2)] = (k[(1, 2)] + 0.5) / s - 0.5;
        Self::new(k, self.r, self.c, width, height)
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        self.r * (x - self.c)
    }

    pub fn to_world(&self, x_cam: &Vec3) -> Vec3 {
        self.r.transpose() * x_cam + self.c
    }

    /// Viewing ray through `p` in camera coordinates, scaled to `z = 1`.
    pub fn ray(&self, p: &Pixel) -> Vec3 {
        self.k_inv * Vec3::new(p.x, p.y, 1.0)
    }

    pub fn project(&self, x: &Vec3) -> Result<Projection, GeometryError> {
        self.project_camera(&self.to_camera(x))
    }

    /// Projects a point already expressed in this camera's frame.
    pub fn project_camera(&self, x_cam: &Vec3) -> Result<Projection, GeometryError> {
        let depth = x_cam.z;
        if depth <= 0.0 {
            return Err(GeometryError::BehindCamera(depth));
        }
        let h = self.k * x_cam;
        Ok(Projection { pixel: Pixel::new(h.x / h.z, h.y / h.z), depth })
    }

    /// Camera-frame point at `depth` along the ray through `p`.
    pub fn unproject_camera(&self, p: &Pixel, depth: f64) -> Result<Vec3, GeometryError> {
        if !(depth > 0.0) {
            return Err(GeometryError::NonPositiveDepth(depth));
        }
        Ok(self.ray(p) * depth)
    }

    pub fn unproject(&self, p: &Pixel, depth: f64) -> Result<Vec3, GeometryError> {
        Ok(self.to_world(&self.unproject_camera(p, depth)?))
    }

    pub fn contains(&self, p: &Pixel) -> bool {
        p.x >= 0.0 && p.y >= 0.0 && p.x <= (self.width - 1) as f64 && p.y <= (self.height - 1) as f64
    }
}

/// Per-pixel PatchMatch state: a depth along the pixel ray and a unit normal
/// in the owning camera's frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneHypothesis {
    pub depth: f64,
    pub normal: Vec3,
}

impl PlaneHypothesis {
    pub fn new(depth: f64, normal: Vec3) -> Self {
        Self { depth, normal }
    }

    /// Checks the unit-norm, camera-facing and depth-range invariants for
    /// the hypothesis attached to pixel `p` of `cam`.
    pub fn is_valid(&self, cam: &CameraModel, p: &Pixel, range: (f64, f64)) -> bool {
        self.depth.is_finite()
            && self.depth >= range.0
            && self.depth <= range.1
            && (self.normal.norm() - 1.0).abs() <= 1e-6
            && self.normal.dot(&cam.ray(p)) < 0.0
    }

    /// Offset `q` of the plane `n . X = q` through the hypothesis point.
    pub fn plane_offset(&self, cam: &CameraModel, p: &Pixel) -> f64 {
        self.normal.dot(&(cam.ray(p) * self.depth))
    }

    /// Depth at which the ray through `p` meets the plane `n . X = offset`.
    /// `None` for grazing or backward intersections.
    pub fn depth_on_plane(normal: &Vec3, offset: f64, cam: &CameraModel, p: &Pixel) -> Option<f64> {
        let denom = normal.dot(&cam.ray(p));
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = offset / denom;
        (t > 0.0 && t.is_finite()).then_some(t)
    }
}

/// Row-major grid of plane hypotheses, one per pixel of a view or level.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<PlaneHypothesis>,
}

impl HypothesisMap {
    pub fn filled(width: usize, height: usize, h: PlaneHypothesis) -> Self {
        Self { width, height, data: vec![h; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &PlaneHypothesis {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, h: PlaneHypothesis) {
        self.data[y * self.width + x] = h;
    }

    /// Depth at a sub-pixel position, read off the plane of the nearest
    /// pixel. `None` outside the grid or when that plane misses the ray.
    pub fn depth_at(&self, cam: &CameraModel, q: &Pixel) -> Option<f64> {
        let (x, y) = (q.x.round(), q.y.round());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        let c = Pixel::new(x, y);
        let h = self.get(x as usize, y as usize);
        if !(h.depth > 0.0) {
            return None;
        }
        PlaneHypothesis::depth_on_plane(&h.normal, h.plane_offset(cam, &c), cam, q)
    }
}

/// Rotation and translation taking `reference` camera coordinates into
/// `source` camera coordinates.
pub fn relative_pose(reference: &CameraModel, source: &CameraModel) -> (Mat3, Vec3) {
    let r_rel = source.rotation() * reference.rotation().transpose();
    let t_rel = source.rotation() * (reference.center() - source.center());
    (r_rel, t_rel)
}

/// Homography induced by the plane `n . X = offset` (reference camera frame)
/// between the pixels of `reference` and `source`.
pub fn plane_homography(reference: &CameraModel, source: &CameraModel, normal: &Vec3, offset: f64) -> Mat3 {
    let (r_rel, t_rel) = relative_pose(reference, source);
    source.k() * (r_rel + t_rel * normal.transpose() / offset) * reference.k_inv()
}

/// Applies a homography; `None` when the point maps to or behind infinity.
#[inline]
pub fn apply_homography(h: &Mat3, x: f64, y: f64) -> Option<Pixel> {
    let w = h[(2, 0)] * x + h[(2, 1)] * y + h[(2, 2)];
    if w <= 1e-12 {
        return None;
    }
    Some(Pixel::new(
        (h[(0, 0)] * x + h[(0, 1)] * y + h[(0, 2)]) / w,
        (h[(1, 0)] * x + h[(1, 1)] * y + h[(1, 2)]) / w,
    ))
}

/// Maps `p` of the reference view into `source` through the plane carried by
/// `h`.
pub fn plane_induced_correspondence(
    reference: &CameraModel,
    source: &CameraModel,
    p: &Pixel,
    h: &PlaneHypothesis,
) -> Result<Pixel, GeometryError> {
    let offset = h.plane_offset(reference, p);
    if !(h.depth > 0.0) || offset >= 0.0 {
        // plane does not face the reference camera or lies behind it
        return Err(GeometryError::OutOfBounds { x: f64::NAN, y: f64::NAN });
    }
    let hom = plane_homography(reference, source, &h.normal, offset);
    let q = apply_homography(&hom, p.x, p.y).ok_or(GeometryError::OutOfBounds { x: f64::NAN, y: f64::NAN })?;
    if !source.contains(&q) {
        return Err(GeometryError::OutOfBounds { x: q.x, y: q.y });
    }
    Ok(q)
}

/// Angle between two vectors in radians.
pub fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
    let c = a.dot(b) / (a.norm() * b.norm());
    c.clamp(-1.0, 1.0).acos()
}

/// Relative depth and normal-angle agreement of two hypotheses expressed in
/// the same frame.
pub fn depth_edge_consistency(a: &PlaneHypothesis, b: &PlaneHypothesis, rel_tol: f64, angle_tol: f64) -> bool {
    (a.depth - b.depth).abs() / a.depth <= rel_tol && angle_between(&a.normal, &b.normal) <= angle_tol
}

/// Orthonormal rotation whose rows are the camera axes of a camera at
/// `center` looking at `target`, with image `y` pointing along world `+y`
/// as far as possible.
pub fn look_at(center: &Vec3, target: &Vec3) -> Mat3 {
    let z = (target - center).normalize();
    let mut x = Vec3::y().cross(&z);
    if x.norm() < 1e-9 {
        x = Vec3::x();
    }
    let x = x.normalize();
    let y = z.cross(&x);
    Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()])
}

//! Planar projective transforms: application, warping, derivation from camera
//! poses over a ground plane, and DLT estimation from correspondences.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::SamplingGrid;
use crate::tensor::{LabelMap, Real, Tensor};

const INFINITY_EPS: f64 = 1e-12;

/// 3×3 projective transform in row-major order, normalised so that the
/// bottom-right entry is exactly 1. Maps past-frame pixel coordinates to
/// current-frame coordinates when used for registration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Homography(pub [f64; 9]);

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

impl Homography {
    pub fn identity() -> Self {
        Self([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self([1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0])
    }

    /// Normalises an arbitrary 3×3 matrix. Fails if it is singular or its
    /// bottom-right entry vanishes.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        let h33 = m[(2, 2)];
        if h33.abs() < 1e-9 || !h33.is_finite() {
            return Err(Error::Degenerate(format!("bottom-right entry {:e} cannot be normalised", h33)));
        }
        let n = m / h33;
        let det = n.determinant();
        if det.abs() < 1e-12 || !det.is_finite() {
            return Err(Error::Degenerate(format!("singular homography (det {:e})", det)));
        }
        let mut h = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                h[3 * r + c] = n[(r, c)];
            }
        }
        h[8] = 1.0;
        Ok(Self(h))
    }

    pub fn from_rows(h: [f64; 9]) -> Result<Self> {
        Self::from_matrix(&Matrix3::from_row_slice(&h))
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_row_slice(&self.0)
    }

    pub fn determinant(&self) -> f64 {
        self.matrix().determinant()
    }

    pub fn inverse(&self) -> Result<Self> {
        let inv = self
            .matrix()
            .try_inverse()
            .ok_or_else(|| Error::Degenerate("homography is not invertible".into()))?;
        Self::from_matrix(&inv)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Self> {
        Self::from_matrix(&(self.matrix() * other.matrix()))
    }

    pub fn apply(&self, x: f64, y: f64) -> Result<(f64, f64)> {
        let h = &self.0;
        let w = h[6] * x + h[7] * y + h[8];
        if w.abs() < INFINITY_EPS {
            return Err(Error::PointAtInfinity);
        }
        Ok(((h[0] * x + h[1] * y + h[2]) / w, (h[3] * x + h[4] * y + h[5]) / w))
    }

    /// Expresses this full-resolution transform on a grid downsampled by
    /// `stride`, where grid coordinate `u = (x + 0.5) / stride - 0.5`.
    pub fn rescaled(&self, stride: f64) -> Result<Self> {
        let o = 0.5 / stride - 0.5;
        let s = Matrix3::new(1.0 / stride, 0.0, o, 0.0, 1.0 / stride, o, 0.0, 0.0, 1.0);
        let s_inv = s.try_inverse().ok_or_else(|| Error::InvalidArgument("stride must be positive".into()))?;
        Self::from_matrix(&(s * self.matrix() * s_inv))
    }

    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Builds the inverse-mapping grid for warping a `src_h`×`src_w` tensor onto a
/// `h`×`w` grid with `h_map` (source → destination).
pub fn homography_grid<T: Real>(h_map: &Homography, h: usize, w: usize, src_h: usize, src_w: usize) -> Result<SamplingGrid<T>> {
    let inv = h_map.inverse()?;
    Ok(SamplingGrid::from_fn(h, w, src_h, src_w, |i, j| {
        inv.apply(j as f64, i as f64).ok().map(|(x, y)| (T::lit(x), T::lit(y)))
    }))
}

/// Warps `input` by `h_map` onto the same grid size. Returns the warped tensor
/// and a mask that is 1 where the source sample existed and 0 where `fill`
/// was used.
pub fn warp_homography<T: Real>(input: &Tensor<T>, h_map: &Homography, fill: T) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, h, w) = input.chw();
    let grid = homography_grid::<T>(h_map, h, w, h, w)?;
    Ok((grid.apply(input, fill)?, grid.mask()))
}

/// Nearest-neighbour warp of a label map; pixels without a source get `fill`.
pub fn warp_labels_homography(labels: &LabelMap, h_map: &Homography, fill: u8) -> Result<LabelMap> {
    let (h, w) = labels.dims();
    homography_grid::<f64>(h_map, h, w, h, w)?.apply_labels(labels, fill)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }
}

/// World plane `{X : normal · X = offset}` with a unit normal pointing to the
/// side the cameras look from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPlane {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Default for GroundPlane {
    fn default() -> Self {
        Self { normal: [0.0, 0.0, 1.0], offset: 0.0 }
    }
}

/// Camera extrinsics (`X_cam = R X_world + t`), intrinsics, and the ground plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
    pub intrinsics: Intrinsics,
    pub plane: GroundPlane,
}

impl CameraPose {
    /// Camera at world position `center` with the given world→camera rotation.
    pub fn from_center(rotation: Matrix3<f64>, center: Vector3<f64>, intrinsics: Intrinsics, plane: GroundPlane) -> Self {
        let t = -(rotation * center);
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = rotation[(i, j)];
            }
        }
        Self { rotation: r, translation: [t.x, t.y, t.z], intrinsics, plane }
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|i, j| self.rotation[i][j])
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from_column_slice(&self.translation)
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation_vector())
    }

    fn plane_normal(&self) -> Result<Vector3<f64>> {
        let n = Vector3::from_column_slice(&self.plane.normal);
        let norm = n.norm();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("plane normal has length {}", norm)));
        }
        Ok(n)
    }

    /// Signed distance from the camera centre to the ground plane.
    pub fn altitude(&self) -> Result<f64> {
        Ok(self.plane_normal()?.dot(&self.center()) - self.plane.offset)
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation_matrix();
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument("rotation is not orthonormal".into()));
        }
        let d = self.altitude()?;
        if d <= 0.0 {
            return Err(Error::Degenerate(format!("camera is not above the ground plane (distance {})", d)));
        }
        Ok(())
    }

    /// Pixel projection of a world point, `None` behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        let c = self.rotation_matrix() * p + self.translation_vector();
        if c.z <= 1e-12 {
            return None;
        }
        let k = &self.intrinsics;
        Some((k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy))
    }

    /// Intersects the viewing ray through pixel (x, y) with the ground plane.
    pub fn backproject(&self, x: f64, y: f64) -> Option<Vector3<f64>> {
        let k = &self.intrinsics;
        let ray_cam = Vector3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
        let ray = self.rotation_matrix().transpose() * ray_cam;
        let c = self.center();
        let n = Vector3::from_column_slice(&self.plane.normal);
        let denom = n.dot(&ray);
        if denom.abs() < 1e-12 {
            return None;
        }
        let s = (self.plane.offset - n.dot(&c)) / denom;
        (s > 0.0).then(|| c + ray * s)
    }
}

/// Homography induced by the ground plane between two views:
/// `H = K (R_rel − t_rel nᵀ / d) K⁻¹`, with `n` and `d` the plane normal and
/// distance expressed in the past camera's frame.
pub fn pose_to_homography(past: &CameraPose, current: &CameraPose) -> Result<Homography> {
    past.validate()?;
    current.validate()?;
    if past.intrinsics != current.intrinsics || past.plane != current.plane {
        return Err(Error::InvalidArgument("poses must share intrinsics and ground plane".into()));
    }
    let (r_p, t_p) = (past.rotation_matrix(), past.translation_vector());
    let (r_c, t_c) = (current.rotation_matrix(), current.translation_vector());
    let r_rel = r_c * r_p.transpose();
    let t_rel = t_c - r_rel * t_p;
    let d = past.altitude()?;
    let n = r_p * past.plane_normal()?;
    let k = past.intrinsics.matrix();
    let k_inv = k.try_inverse().ok_or_else(|| Error::Degenerate("singular intrinsics".into()))?;
    let m = k * (r_rel - t_rel * n.transpose() / d) * k_inv;
    Homography::from_matrix(&m)
}

/// Hartley similarity: centroid to the origin, mean distance √2.
fn normalizing_transform(points: &[(f64, f64)]) -> Result<Matrix3<f64>> {
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.0 / n, b + p.1 / n));
    let mean_dist = points.iter().map(|p| ((p.0 - mx).powi(2) + (p.1 - my).powi(2)).sqrt()).sum::<f64>() / n;
    if mean_dist < 1e-12 {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0))
}

fn transform_point(t: &Matrix3<f64>, p: (f64, f64)) -> (f64, f64) {
    let v = t * Vector3::new(p.0, p.1, 1.0);
    (v.x / v.z, v.y / v.z)
}

/// Normalised direct linear transform from point correspondences
/// `(source, destination)`. Exact for noise-free correspondences.
pub fn estimate_homography_dlt(correspondences: &[((f64, f64), (f64, f64))]) -> Result<Homography> {
    let n = correspondences.len();
    if n < 4 {
        return Err(Error::InvalidArgument(format!("need at least 4 correspondences, got {}", n)));
    }
    let src: Vec<_> = correspondences.iter().map(|c| c.0).collect();
    let dst: Vec<_> = correspondences.iter().map(|c| c.1).collect();
    let t_src = normalizing_transform(&src)?;
    let t_dst = normalizing_transform(&dst)?;

    // pad to at least 9 rows so the SVD exposes the full right null space
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (s, d)) in src.iter().zip(&dst).enumerate() {
        let (x, y) = transform_point(&t_src, *s);
        let (u, v) = transform_point(&t_dst, *d);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for c in 0..9 {
            a[(2 * i, c)] = r0[c];
            a[(2 * i + 1, c)] = r1[c];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or_else(|| Error::Degenerate("SVD failed".into()))?;
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).unwrap_or(std::cmp::Ordering::Equal));
    let largest = sv[order[0]];
    let second_smallest = sv[order[7]];
    if largest <= 0.0 || second_smallest / largest < 1e-10 {
        return Err(Error::Degenerate("correspondences do not determine a unique homography".into()));
    }
    let h_row = v_t.row(order[8]);
    let h_norm = Matrix3::from_row_slice(h_row.transpose().as_slice());
    let t_dst_inv = t_dst.try_inverse().ok_or_else(|| Error::Degenerate("normalisation".into()))?;
    Homography::from_matrix(&(t_dst_inv * h_norm * t_src))
}

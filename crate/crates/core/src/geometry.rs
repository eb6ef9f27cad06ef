//! Rigid-body math, camera models, pixel/point transforms and trajectory
//! metrics used by every other module.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};

use crate::{Error, Result};

/// Rigid camera-to-world transform.
///
/// `rotation` is orthonormal with determinant +1; `translation` is in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Pose::new(Matrix3::identity(), t)
    }

    pub fn from_quaternion(q: UnitQuaternion<f64>, t: Vector3<f64>) -> Self {
        Pose::new(q.to_rotation_matrix().into_inner(), t)
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_matrix(&self.rotation)
    }

    /// Applies `other`, then `self` (matrix product semantics).
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn rotate_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Projects the rotation back onto SO(3). Useful after long chains of
    /// composed increments.
    pub fn renormalize(&mut self) {
        let q = UnitQuaternion::from_matrix(&self.rotation);
        self.rotation = q.to_rotation_matrix().into_inner();
    }

    /// SE(3) exponential of a tangent vector `[rho, omega]` (translation
    /// part first).
    pub fn exp(xi: &[f64; 6]) -> Pose {
        let rho = Vector3::new(xi[0], xi[1], xi[2]);
        let omega = Vector3::new(xi[3], xi[4], xi[5]);
        let theta = omega.norm();
        let omega_hat = skew(&omega);
        let (rotation, v) = if theta < 1e-12 {
            (
                Matrix3::identity() + omega_hat,
                Matrix3::identity() + omega_hat * 0.5,
            )
        } else {
            let a = theta.sin() / theta;
            let b = (1.0 - theta.cos()) / (theta * theta);
            let c = (theta - theta.sin()) / (theta * theta * theta);
            let rotation = Matrix3::identity() + omega_hat * a + omega_hat * omega_hat * b;
            let v = Matrix3::identity() + omega_hat * b + omega_hat * omega_hat * c;
            (rotation, v)
        };
        Pose {
            rotation,
            translation: v * rho,
        }
    }

    /// SE(3) logarithm, the inverse of [`Pose::exp`].
    pub fn log(&self) -> [f64; 6] {
        let cos_theta = ((self.rotation.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let theta = cos_theta.acos();
        let omega = if theta < 1e-9 {
            Vector3::new(
                (self.rotation[(2, 1)] - self.rotation[(1, 2)]) * 0.5,
                (self.rotation[(0, 2)] - self.rotation[(2, 0)]) * 0.5,
                (self.rotation[(1, 0)] - self.rotation[(0, 1)]) * 0.5,
            )
        } else {
            let scale = theta / (2.0 * theta.sin());
            Vector3::new(
                (self.rotation[(2, 1)] - self.rotation[(1, 2)]) * scale,
                (self.rotation[(0, 2)] - self.rotation[(2, 0)]) * scale,
                (self.rotation[(1, 0)] - self.rotation[(0, 1)]) * scale,
            )
        };
        let omega_hat = skew(&omega);
        let v_inv = if theta < 1e-9 {
            Matrix3::identity() - omega_hat * 0.5 + omega_hat * omega_hat * (1.0 / 12.0)
        } else {
            let half = theta * 0.5;
            let cot = half.cos() / half.sin();
            Matrix3::identity() - omega_hat * 0.5
                + omega_hat * omega_hat * ((1.0 - half * cot) / (theta * theta))
        };
        let rho = v_inv * self.translation;
        [rho[0], rho[1], rho[2], omega[0], omega[1], omega[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.rotation.iter().all(|v| v.is_finite()) && self.translation.iter().all(|v| v.is_finite())
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

pub fn rot_x(angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::x_axis(), angle).into_inner()
}

pub fn rot_y(angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::y_axis(), angle).into_inner()
}

pub fn rot_z(angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(&Vector3::z_axis(), angle).into_inner()
}

/// Applies `b`, then `a`.
pub fn compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

/// Constant-velocity pose prediction: `T_prev * T_prev2^-1 * T_prev`.
pub fn constant_velocity_init(t_prev: &Pose, t_prev2: &Pose) -> Pose {
    t_prev.compose(&t_prev2.inverse()).compose(t_prev)
}

/// Pinhole camera intrinsics. Focal lengths and principal point in pixels.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive (fx = {fx}, fy = {fy})"
            )));
        }
        if cx <= 0.0 || cx >= width as f64 || cy <= 0.0 || cy >= height as f64 {
            return Err(Error::InvalidInput(format!(
                "principal point ({cx}, {cy}) outside image {width}x{height}"
            )));
        }
        Ok(CameraIntrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        })
    }

    /// Unit-direction ray through pixel center `(u, v)`, in world coordinates.
    pub fn pixel_ray(&self, u: f64, v: f64, pose: &Pose) -> Ray {
        let dir_cam = Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        let dir_world = pose.rotate_vector(&dir_cam);
        Ray::new(pose.translation, dir_world)
    }
}

/// Ray with unit direction.
#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Ray {
    pub fn new(origin: Vector3<f64>, direction: Vector3<f64>) -> Self {
        Ray {
            origin,
            direction: direction.normalize(),
        }
    }
}

/// Row-major H x W x 3 image with values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ColorImage {
    pub fn new(width: usize, height: usize) -> Self {
        ColorImage {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, color: [f64; 3]) -> Self {
        ColorImage {
            width,
            height,
            data: vec![color; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> [f64; 3] {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, c: [f64; 3]) {
        self.data[v * self.width + u] = c;
    }
}

/// Row-major H x W depth map in meters; 0 marks invalid pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthImage {
    pub fn new(width: usize, height: usize) -> Self {
        DepthImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, d: f64) {
        self.data[v * self.width + u] = d;
    }

    pub fn valid_count(&self) -> usize {
        self.data.iter().filter(|d| **d > 0.0).count()
    }
}

/// One RGB-D observation.
#[derive(Debug, Clone)]
pub struct RGBDFrame {
    pub color: ColorImage,
    pub depth: DepthImage,
    pub index: usize,
}

impl RGBDFrame {
    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

/// Backprojects pixel `(u, v)` at `depth` meters through the camera into a
/// world point. `depth` is camera-frame z, not ray length.
pub fn backproject(
    pixel: (f64, f64),
    depth: f64,
    intr: &CameraIntrinsics,
    pose: &Pose,
) -> Result<Vector3<f64>> {
    if depth <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "backproject requires positive depth, got {depth}"
        )));
    }
    let (u, v) = pixel;
    let p_cam = Vector3::new(
        (u - intr.cx) / intr.fx * depth,
        (v - intr.cy) / intr.fy * depth,
        depth,
    );
    Ok(pose.transform_point(&p_cam))
}

/// Pinhole projection of a world point; returns `(u, v, depth)` with depth
/// the camera-frame z.
pub fn project(point: &Vector3<f64>, intr: &CameraIntrinsics, pose: &Pose) -> Result<(f64, f64, f64)> {
    let p_cam = pose.inverse().transform_point(point);
    if p_cam[2] <= 0.0 {
        return Err(Error::BehindCamera { z: p_cam[2] });
    }
    let u = intr.fx * p_cam[0] / p_cam[2] + intr.cx;
    let v = intr.fy * p_cam[1] / p_cam[2] + intr.cy;
    Ok((u, v, p_cam[2]))
}

/// Ordered list of `(frame index, pose)` with strictly increasing indices.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    entries: Vec<(usize, Pose)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Trajectory::default()
    }

    pub fn push(&mut self, index: usize, pose: Pose) -> Result<()> {
        if let Some((last, _)) = self.entries.last() {
            if index <= *last {
                return Err(Error::InvalidInput(format!(
                    "trajectory indices must be strictly increasing ({last} then {index})"
                )));
            }
        }
        self.entries.push((index, pose));
        Ok(())
    }

    pub fn entries(&self) -> &[(usize, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Pose> {
        self.entries
            .binary_search_by_key(&index, |(i, _)| *i)
            .ok()
            .map(|at| &self.entries[at].1)
    }

    /// Serializes in TUM format: `timestamp tx ty tz qx qy qz qw` per line.
    pub fn to_tum(&self) -> String {
        let mut out = String::new();
        for (index, pose) in &self.entries {
            let q = pose.quaternion();
            let t = pose.translation;
            out.push_str(&format!(
                "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}\n",
                *index as f64, t[0], t[1], t[2], q.i, q.j, q.k, q.w
            ));
        }
        out
    }

    pub fn from_tum(text: &str) -> Result<Self> {
        let mut trajectory = Trajectory::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<f64> = line
                .split_whitespace()
                .map(|s| {
                    s.parse::<f64>().map_err(|e| Error::Parse {
                        what: format!("trajectory line {}", lineno + 1),
                        reason: e.to_string(),
                    })
                })
                .collect::<Result<_>>()?;
            if fields.len() != 8 {
                return Err(Error::Parse {
                    what: format!("trajectory line {}", lineno + 1),
                    reason: format!("expected 8 fields, got {}", fields.len()),
                });
            }
            let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(
                fields[7], fields[4], fields[5], fields[6],
            ));
            let pose = Pose::from_quaternion(q, Vector3::new(fields[1], fields[2], fields[3]));
            trajectory.push(fields[0].round() as usize, pose)?;
        }
        Ok(trajectory)
    }
}

/// Umeyama rigid alignment (no scale): returns the pose `A` minimizing
/// `sum ||to_i - A(from_i)||^2`.
pub fn umeyama_alignment(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> Pose {
    assert_eq!(from.len(), to.len());
    let n = from.len() as f64;
    let centroid_from = from.iter().sum::<Vector3<f64>>() / n;
    let centroid_to = to.iter().sum::<Vector3<f64>>() / n;
    let mut w = Matrix3::zeros();
    for (f, t) in from.iter().zip(to.iter()) {
        w += (t - centroid_to) * (f - centroid_from).transpose();
    }
    let svd = w.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut s = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let translation = centroid_to - rotation * centroid_from;
    Pose::new(rotation, translation)
}

/// Absolute trajectory error in centimeters: RMSE of translational
/// residuals after rigid (Umeyama, no scale) alignment on common indices.
pub fn ate_rmse(estimated: &Trajectory, ground_truth: &Trajectory) -> Result<f64> {
    let mut est_pts = Vec::new();
    let mut gt_pts = Vec::new();
    for (index, pose) in estimated.entries() {
        if let Some(gt) = ground_truth.get(*index) {
            est_pts.push(pose.translation);
            gt_pts.push(gt.translation);
        }
    }
    if est_pts.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "ate_rmse needs at least 3 common indices, found {}",
            est_pts.len()
        )));
    }
    let align = umeyama_alignment(&est_pts, &gt_pts);
    let mut sq_sum = 0.0;
    for (e, g) in est_pts.iter().zip(gt_pts.iter()) {
        sq_sum += (align.transform_point(e) - g).norm_squared();
    }
    Ok((sq_sum / est_pts.len() as f64).sqrt() * 100.0)
}

//! Rigid and similarity transforms, closed-form Sim(3) estimation between
//! point sets, centroid-anchored orientation correction, goal-pose transport,
//! and the pose-precision metrics.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{deg_to_rad, rad_to_deg, real, wrap_deg_0_360, wrap_deg_pm180, Real};

/// Relative threshold on the second singular value of the centered covariance
/// below which a source point set is treated as collinear.
pub const DEGENERACY_SV_RATIO: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GeometryError {
    #[error("need at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("source points are collinear or coincident")]
    DegenerateConfiguration,
    #[error("empty input")]
    EmptyInput,
    #[error("input lengths differ: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
}

/// Fold convention for the heading-error metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FoldMode {
    /// Minimum angular difference modulo 180 degrees; range `[0, 90]`.
    #[default]
    Mod180,
    /// Conventional yaw difference wrapped modulo 360 degrees; range `[0, 180]`.
    Mod360,
}

/// Rigid camera/agent pose: orthonormal rotation plus position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose<T: Real> {
    pub rotation: Rotation3<T>,
    pub position: Vector3<T>,
}

impl<T: Real> Pose<T> {
    pub fn new(rotation: Rotation3<T>, position: Vector3<T>) -> Self {
        Self { rotation, position }
    }

    pub fn identity() -> Self {
        Self::new(Rotation3::identity(), Vector3::zeros())
    }

    /// Lifts a ground-plane pose to 3D with z = 0 and a pure yaw rotation.
    pub fn from_pose2d(p: &Pose2D<T>) -> Self {
        let yaw = deg_to_rad(p.yaw_deg);
        Self::new(
            Rotation3::from_axis_angle(&Vector3::z_axis(), yaw),
            Vector3::new(p.x, p.y, T::zero()),
        )
    }

    /// Projects onto the ground plane; yaw is taken from the rotated +x axis.
    pub fn to_pose2d(&self) -> Pose2D<T> {
        Pose2D::new(self.position.x, self.position.y, self.yaw_deg())
    }

    /// Heading of the rotated +x (forward) axis, in degrees within `[0, 360)`.
    pub fn yaw_deg(&self) -> T {
        let fwd = self.rotation * Vector3::x();
        wrap_deg_0_360(rad_to_deg(fwd.y.atan2(fwd.x)))
    }
}

/// Ground-plane pose: position in meters, yaw in degrees within `[0, 360)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2D<T> {
    pub x: T,
    pub y: T,
    pub yaw_deg: T,
}

impl<T: Real> Pose2D<T> {
    pub fn new(x: T, y: T, yaw_deg: T) -> Self {
        Self {
            x,
            y,
            yaw_deg: wrap_deg_0_360(yaw_deg),
        }
    }

    pub fn position(&self) -> nalgebra::Vector2<T> {
        nalgebra::Vector2::new(self.x, self.y)
    }

    pub fn distance_to(&self, other: &Self) -> T {
        (self.position() - other.position()).norm()
    }

    /// Bearing from this pose to a world point, in degrees within `[0, 360)`.
    pub fn bearing_to_deg(&self, x: T, y: T) -> T {
        wrap_deg_0_360(rad_to_deg((y - self.y).atan2(x - self.x)))
    }
}

/// Similarity transform `x ↦ scale · R · x + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sim3Transform<T: Real> {
    pub scale: T,
    pub rotation: Rotation3<T>,
    pub translation: Vector3<T>,
}

impl<T: Real> Sim3Transform<T> {
    pub fn new(scale: T, rotation: Rotation3<T>, translation: Vector3<T>) -> Self {
        assert!(scale > T::zero(), "similarity scale must be positive");
        Self {
            scale,
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(T::one(), Rotation3::identity(), Vector3::zeros())
    }

    pub fn apply_point(&self, p: &Vector3<T>) -> Vector3<T> {
        self.rotation * p * self.scale + self.translation
    }

    /// Transforms a pose: position via the full similarity, orientation by
    /// composing with the rotation part.
    pub fn apply_pose(&self, pose: &Pose<T>) -> Pose<T> {
        Pose::new(self.rotation * pose.rotation, self.apply_point(&pose.position))
    }

    /// `self ∘ inner`: applies `inner` first, then `self`.
    pub fn compose(&self, inner: &Self) -> Self {
        Self::new(
            self.scale * inner.scale,
            self.rotation * inner.rotation,
            self.rotation * inner.translation * self.scale + self.translation,
        )
    }

    pub fn inverse(&self) -> Self {
        let inv_scale = T::one() / self.scale;
        let inv_rot = self.rotation.inverse();
        Self::new(inv_scale, inv_rot, -(inv_rot * self.translation * inv_scale))
    }
}

/// Output of trajectory alignment: the fitted similarity, the residual
/// orientation fix applied about the reference centroid, and fit residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult<T: Real> {
    pub sim3: Sim3Transform<T>,
    pub orientation_fix: Rotation3<T>,
    /// Arithmetic mean of the reference camera centers.
    pub centroid: Vector3<T>,
    pub mean_position_residual: T,
    pub mean_rotation_residual_deg: T,
}

impl<T: Real> AlignmentResult<T> {
    pub fn identity() -> Self {
        Self {
            sim3: Sim3Transform::identity(),
            orientation_fix: Rotation3::identity(),
            centroid: Vector3::zeros(),
            mean_position_residual: T::zero(),
            mean_rotation_residual_deg: T::zero(),
        }
    }
}

/// Closed-form least-squares similarity between point sets: returns the
/// global minimizer of `Σ ‖target_k − (s R source_k + t)‖²` with `det R = +1`
/// enforced through the sign-correction step.
pub fn umeyama_sim3<T: Real>(
    source: &[Vector3<T>],
    target: &[Vector3<T>],
) -> Result<Sim3Transform<T>, GeometryError> {
    if source.len() != target.len() {
        return Err(GeometryError::LengthMismatch {
            left: source.len(),
            right: target.len(),
        });
    }
    if source.len() < 3 {
        return Err(GeometryError::TooFewPoints {
            min: 3,
            got: source.len(),
        });
    }
    let n = real::<T>(source.len() as f64);

    let mean_src = source.iter().fold(Vector3::zeros(), |a, p| a + p) / n;
    let mean_tgt = target.iter().fold(Vector3::zeros(), |a, p| a + p) / n;

    let mut src_var = T::zero();
    let mut cov = Matrix3::<T>::zeros();
    for (s, t) in source.iter().zip(target.iter()) {
        let ds = s - mean_src;
        let dt = t - mean_tgt;
        src_var += ds.norm_squared();
        cov += dt * ds.transpose();
    }
    src_var /= n;
    cov /= n;

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd with u requested");
    let v_t = svd.v_t.expect("svd with v_t requested");
    let mut sv = svd.singular_values;

    // nalgebra sorts singular values, but make ordering explicit since the
    // sign correction must land on the smallest one.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap());
    let mut u_s = Matrix3::zeros();
    let mut v_t_s = Matrix3::zeros();
    let mut sv_s = Vector3::zeros();
    for (dst, &src_i) in order.iter().enumerate() {
        u_s.set_column(dst, &u.column(src_i));
        v_t_s.set_row(dst, &v_t.row(src_i));
        sv_s[dst] = sv[src_i];
    }
    sv = sv_s;

    if sv[0] <= T::zero() || sv[1] < real::<T>(DEGENERACY_SV_RATIO) * sv[0] {
        return Err(GeometryError::DegenerateConfiguration);
    }

    // S = diag(1, 1, ±1): flip the weakest direction when U·Vᵀ reflects.
    let mut sign = T::one();
    if (u_s.determinant() * v_t_s.determinant()) < T::zero() {
        sign = -T::one();
    }
    let mut u_corr = u_s;
    if sign < T::zero() {
        let c = -u_corr.column(2).clone_owned();
        u_corr.set_column(2, &c);
    }
    let rot_mat = u_corr * v_t_s;
    let rotation = Rotation3::from_matrix_unchecked(rot_mat);

    let trace_ds = sv[0] + sv[1] + sign * sv[2];
    if src_var <= T::zero() {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let scale = trace_ds / src_var;
    let translation = mean_tgt - rotation * mean_src * scale;

    Ok(Sim3Transform::new(scale, rotation, translation))
}

/// Rotation that minimizes the mean angular difference between corrected and
/// reference orientations, computed as the chordal mean (sign-aligned
/// quaternion average) of the per-frame residuals `R_ref · R_alignedᵀ`.
pub fn orientation_correction<T: Real>(
    aligned: &[Rotation3<T>],
    reference: &[Rotation3<T>],
) -> Result<Rotation3<T>, GeometryError> {
    if aligned.is_empty() || reference.is_empty() {
        return Err(GeometryError::EmptyInput);
    }
    if aligned.len() != reference.len() {
        return Err(GeometryError::LengthMismatch {
            left: aligned.len(),
            right: reference.len(),
        });
    }

    let mut acc = Vector4::<T>::zeros();
    let mut first: Option<Vector4<T>> = None;
    for (a, r) in aligned.iter().zip(reference.iter()) {
        let residual = r * a.inverse();
        let q = UnitQuaternion::from_rotation_matrix(&residual);
        let mut v = q.quaternion().coords; // [i, j, k, w]
        match first {
            None => first = Some(v),
            Some(f) => {
                if f.dot(&v) < T::zero() {
                    v = -v;
                }
            }
        }
        acc += v;
    }

    let norm = acc.norm();
    if norm < real(1e-12) {
        // Antipodal spread: the chordal mean is undefined; fall back to the
        // first residual so the output stays deterministic.
        let f = first.unwrap();
        let q = Quaternion::from_parts(f[3], Vector3::new(f[0], f[1], f[2]));
        return Ok(UnitQuaternion::from_quaternion(q).to_rotation_matrix());
    }
    let mean = acc / norm;
    let q = Quaternion::from_parts(mean[3], Vector3::new(mean[0], mean[1], mean[2]));
    Ok(UnitQuaternion::from_quaternion(q).to_rotation_matrix())
}

/// Rotates each position about the given centroid: `R (x − c) + c`.
pub fn apply_about_centroid<T: Real>(
    positions: &[Vector3<T>],
    rotation: &Rotation3<T>,
    centroid: &Vector3<T>,
) -> Vec<Vector3<T>> {
    positions
        .iter()
        .map(|p| rotation * (p - centroid) + centroid)
        .collect()
}

/// Fits the full alignment (similarity + centroid-anchored orientation fix)
/// of `canonical` camera poses onto `reference` poses.
pub fn align_trajectories<T: Real>(
    canonical: &[Pose<T>],
    reference: &[Pose<T>],
) -> Result<AlignmentResult<T>, GeometryError> {
    if canonical.len() != reference.len() {
        return Err(GeometryError::LengthMismatch {
            left: canonical.len(),
            right: reference.len(),
        });
    }
    let src: Vec<Vector3<T>> = canonical.iter().map(|p| p.position).collect();
    let tgt: Vec<Vector3<T>> = reference.iter().map(|p| p.position).collect();
    let sim3 = umeyama_sim3(&src, &tgt)?;

    let aligned_rots: Vec<Rotation3<T>> = canonical
        .iter()
        .map(|p| sim3.rotation * p.rotation)
        .collect();
    let ref_rots: Vec<Rotation3<T>> = reference.iter().map(|p| p.rotation).collect();
    let orientation_fix = orientation_correction(&aligned_rots, &ref_rots)?;

    let n = real::<T>(reference.len() as f64);
    let centroid = tgt.iter().fold(Vector3::zeros(), |a, p| a + p) / n;

    let mut pos_res = T::zero();
    let mut rot_res = T::zero();
    for ((c, r), ar) in canonical.iter().zip(reference.iter()).zip(aligned_rots.iter()) {
        let p = sim3.apply_point(&c.position);
        let p = orientation_fix * (p - centroid) + centroid;
        pos_res += (r.position - p).norm();
        rot_res += rotation_angle_deg(&(orientation_fix * ar), &r.rotation);
    }

    Ok(AlignmentResult {
        sim3,
        orientation_fix,
        centroid,
        mean_position_residual: pos_res / n,
        mean_rotation_residual_deg: rot_res / n,
    })
}

/// Transports a canonical-frame goal pose into the world frame: similarity
/// first, then the orientation fix about the reference centroid, applied to
/// both the camera center and the orientation.
pub fn transport_goal_pose<T: Real>(
    alignment: &AlignmentResult<T>,
    goal_canonical: &Pose<T>,
) -> Pose<T> {
    let p = alignment.sim3.apply_point(&goal_canonical.position);
    let p = alignment.orientation_fix * (p - alignment.centroid) + alignment.centroid;
    let r = alignment.orientation_fix * (alignment.sim3.rotation * goal_canonical.rotation);
    Pose::new(r, p)
}

/// Euclidean distance between two ground-plane positions.
pub fn position_error<T: Real>(estimate: &Pose2D<T>, goal: &Pose2D<T>) -> T {
    estimate.distance_to(goal)
}

/// Angular difference between two headings under the chosen fold.
pub fn heading_error<T: Real>(estimate_deg: T, goal_deg: T, fold: FoldMode) -> T {
    let diff = estimate_deg - goal_deg;
    match fold {
        FoldMode::Mod180 => {
            let half = real(180.0);
            let mut a = diff - half * (diff / half).floor();
            if a < T::zero() {
                a += half;
            }
            a.min(half - a)
        }
        FoldMode::Mod360 => wrap_deg_pm180(diff).abs(),
    }
}

/// Geodesic angle between two rotations, in degrees.
pub fn rotation_angle_deg<T: Real>(a: &Rotation3<T>, b: &Rotation3<T>) -> T {
    let m = a.inverse() * b;
    // trace can exceed 3 by rounding; clamp before acos
    let c = ((m.matrix().trace() - T::one()) / real(2.0)).clamp(-T::one(), T::one());
    rad_to_deg(c.acos())
}

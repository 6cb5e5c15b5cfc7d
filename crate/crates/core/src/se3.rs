//! Rigid transforms: SE(3) exponential/logarithm, dual quaternions and
//! dual-quaternion blending.
//!
//! Quaternions are `(w, x, y, z)` Hamilton quaternions acting on column
//! vectors. A pose maps a point `p` to `R p + t`.

use crate::error::{Error, Result};
use crate::linalg::{Mat3, Quat, Vec3};
use crate::real::Real;

/// Rotations closer than this to π are rejected by [`se3_log`].
pub const LOG_SINGULARITY_MARGIN: f64 = 1e-3;
/// Below this angle the Rodrigues terms switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose<T> {
    pub rotation: Quat<T>,
    pub translation: Vec3<T>,
}

impl<T: Real> Default for SE3Pose<T> {
    fn default() -> Self {
        Self::identity()
    }
}

impl<T: Real> SE3Pose<T> {
    pub fn new(rotation: Quat<T>, translation: Vec3<T>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Quat::identity(), Vec3::zeros())
    }

    pub fn from_translation(t: Vec3<T>) -> Self {
        Self::new(Quat::identity(), t)
    }

    pub fn from_rotation(q: Quat<T>) -> Self {
        Self::new(q, Vec3::zeros())
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let rotation = (self.rotation * other.rotation).normalized();
        let translation = self.rotation.rotate(other.translation) + self.translation;
        Self::new(rotation, translation)
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.conj();
        Self::new(r, -r.rotate(self.translation))
    }

    #[inline]
    pub fn transform_point(&self, p: Vec3<T>) -> Vec3<T> {
        self.rotation.rotate(p) + self.translation
    }

    pub fn rotation_matrix(&self) -> Mat3<T> {
        self.rotation.to_matrix()
    }

    pub fn rotation_angle(&self) -> T {
        self.rotation.angle()
    }

    /// Quaternion with non-negative scalar part.
    pub fn canonical(&self) -> Self {
        if self.rotation.w < T::zero() {
            Self::new(-self.rotation, self.translation)
        } else {
            *self
        }
    }

    pub fn to_dual_quat(&self) -> DualQuat<T> {
        DualQuat::from_pose(self)
    }

    /// Largest absolute difference between matching rotation-matrix and translation entries.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        let a = self.rotation_matrix();
        let b = other.rotation_matrix();
        let mut d = (self.translation - other.translation).max_abs();
        for i in 0..3 {
            for j in 0..3 {
                d = d.max((a.m[i][j] - b.m[i][j]).abs());
            }
        }
        d
    }

    pub fn cast<U: Real>(&self) -> SE3Pose<U> {
        SE3Pose::new(self.rotation.cast(), self.translation.cast())
    }
}

/// Element of se(3). Rotational part first in every 6-vector layout.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist<T> {
    pub rotational: Vec3<T>,
    pub translational: Vec3<T>,
}

impl<T: Real> Twist<T> {
    pub fn new(rotational: Vec3<T>, translational: Vec3<T>) -> Self {
        Self {
            rotational,
            translational,
        }
    }

    pub fn zeros() -> Self {
        Self::new(Vec3::zeros(), Vec3::zeros())
    }

    pub fn from_array(a: [T; 6]) -> Self {
        Self::new(Vec3::new(a[0], a[1], a[2]), Vec3::new(a[3], a[4], a[5]))
    }

    pub fn to_array(self) -> [T; 6] {
        [
            self.rotational.x,
            self.rotational.y,
            self.rotational.z,
            self.translational.x,
            self.translational.y,
            self.translational.z,
        ]
    }

    pub fn scale(self, s: T) -> Self {
        Self::new(self.rotational.scale(s), self.translational.scale(s))
    }
}

fn so3_exp<T: Real>(omega: Vec3<T>) -> Quat<T> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (w, k) = if theta < T::c(SMALL_ANGLE) {
        (
            T::one() - theta2 / T::c(8.0),
            T::half() - theta2 / T::c(48.0),
        )
    } else {
        let h = theta * T::half();
        (h.cos(), h.sin() / theta)
    };
    Quat::new(w, omega.x * k, omega.y * k, omega.z * k)
}

/// `V(ω)` such that the translation of `exp(ω, ρ)` is `V ρ`.
fn so3_left_jacobian<T: Real>(omega: Vec3<T>) -> Mat3<T> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let wx = Mat3::skew(omega);
    let wx2 = wx.mul_mat(&wx);
    let (a, b) = if theta < T::c(SMALL_ANGLE) {
        (T::half(), T::one() / T::c(6.0))
    } else {
        (
            (T::one() - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Mat3::identity().add_mat(&wx.scale(a)).add_mat(&wx2.scale(b))
}

fn so3_left_jacobian_inverse<T: Real>(omega: Vec3<T>) -> Mat3<T> {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let wx = Mat3::skew(omega);
    let wx2 = wx.mul_mat(&wx);
    let c = if theta < T::c(SMALL_ANGLE) {
        T::one() / T::c(12.0)
    } else {
        (T::one() - theta * theta.sin() / (T::two() * (T::one() - theta.cos()))) / theta2
    };
    Mat3::identity()
        .add_mat(&wx.scale(-T::half()))
        .add_mat(&wx2.scale(c))
}

/// Closed-form SE(3) exponential.
pub fn se3_exp<T: Real>(xi: &Twist<T>) -> SE3Pose<T> {
    let rotation = so3_exp(xi.rotational);
    let translation = so3_left_jacobian(xi.rotational).mul_vec(xi.translational);
    SE3Pose::new(rotation, translation)
}

/// SE(3) logarithm. Fails within [`LOG_SINGULARITY_MARGIN`] of a half turn.
pub fn se3_log<T: Real>(pose: &SE3Pose<T>) -> Result<Twist<T>> {
    let q = pose.canonical().rotation.normalized();
    let v = q.vec();
    let vn = v.norm();
    let theta = T::two() * vn.atan2(q.w);
    if theta >= T::PI() - T::c(LOG_SINGULARITY_MARGIN) {
        return Err(Error::NearAngularSingularity {
            angle: theta.to_f64_lossy(),
        });
    }
    let omega = if theta < T::c(SMALL_ANGLE) {
        // atan(x) ≈ x − x³/3 with x = |v|/w
        let x2 = vn * vn / (q.w * q.w);
        v.scale(T::two() / q.w * (T::one() - x2 / T::c(3.0)))
    } else {
        v.scale(theta / vn)
    };
    let rho = so3_left_jacobian_inverse(omega).mul_vec(pose.translation);
    Ok(Twist::new(omega, rho))
}

/// Geodesic relative motion `exp(fraction · log(T_s⁻¹ T_e))`.
pub fn interpolate_pose<T: Real>(
    start: &SE3Pose<T>,
    end: &SE3Pose<T>,
    fraction: T,
) -> Result<SE3Pose<T>> {
    let rel = start.inverse().compose(end);
    let xi = se3_log(&rel)?;
    Ok(se3_exp(&xi.scale(fraction)))
}

/// `Ad(T)ᵀ g`: pulls a gradient taken at `exp(Ad(T) δ)` back to `δ`, where
/// `exp(Ad(T) δ) = T exp(δ) T⁻¹`.
pub fn adjoint_transpose_apply<T: Real>(pose: &SE3Pose<T>, g: &Twist<T>) -> Twist<T> {
    let rt = pose.rotation_matrix().transpose();
    let rot = rt.mul_vec(g.rotational + g.translational.cross(pose.translation));
    Twist::new(rot, rt.mul_vec(g.translational))
}

/// `ad(ξ)` in the rotation-first layout: `[[ω×, 0], [ρ×, ω×]]`.
pub fn se3_adjoint_algebra<T: Real>(xi: &Twist<T>) -> [[T; 6]; 6] {
    let mut m = [[T::zero(); 6]; 6];
    let w = Mat3::skew(xi.rotational);
    let r = Mat3::skew(xi.translational);
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = w.m[i][j];
            m[i + 3][j + 3] = w.m[i][j];
            m[i + 3][j] = r.m[i][j];
        }
    }
    m
}

/// Left Jacobian `J` with `exp(ξ + δ) ≈ exp(J δ) exp(ξ)`, via its power series
/// `Σ ad(ξ)ⁿ / (n+1)!`.
pub fn se3_left_jacobian<T: Real>(xi: &Twist<T>) -> [[T; 6]; 6] {
    let ad = se3_adjoint_algebra(xi);
    let mut out = [[T::zero(); 6]; 6];
    let mut term = [[T::zero(); 6]; 6];
    for i in 0..6 {
        term[i][i] = T::one();
        out[i][i] = T::one();
    }
    let eps = T::epsilon();
    for n in 1..64 {
        let mut next = [[T::zero(); 6]; 6];
        let denom = T::from_usize_lossy(n + 1);
        let mut max = T::zero();
        for i in 0..6 {
            for j in 0..6 {
                let mut acc = T::zero();
                for k in 0..6 {
                    acc += ad[i][k] * term[k][j];
                }
                next[i][j] = acc / denom;
                max = max.max(next[i][j].abs());
            }
        }
        for i in 0..6 {
            for j in 0..6 {
                out[i][j] += next[i][j];
            }
        }
        term = next;
        if max < eps {
            break;
        }
    }
    out
}

/// Unit dual quaternion `real + ε dual` encoding a rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualQuat<T> {
    pub real: Quat<T>,
    pub dual: Quat<T>,
}

impl<T: Real> DualQuat<T> {
    pub fn new(real: Quat<T>, dual: Quat<T>) -> Self {
        Self { real, dual }
    }

    pub fn identity() -> Self {
        Self::new(Quat::identity(), Quat::zeros())
    }

    pub fn from_pose(pose: &SE3Pose<T>) -> Self {
        let real = pose.rotation;
        let dual = (Quat::pure(pose.translation) * real).scale(T::half());
        Self::new(real, dual)
    }

    /// Rigid transform of a (possibly unnormalized) dual quaternion.
    pub fn to_pose(&self) -> SE3Pose<T> {
        let n2 = self.real.norm_squared();
        let rotation = self.real.scale(T::one() / n2.sqrt());
        let t = (self.dual * self.real.conj()).vec().scale(T::two() / n2);
        SE3Pose::new(rotation, t)
    }

    /// Dual-quaternion product; composes like `SE3Pose::compose`.
    pub fn mul(&self, o: &Self) -> Self {
        Self::new(self.real * o.real, self.real * o.dual + self.dual * o.real)
    }

    /// Inverse of a unit dual quaternion.
    pub fn conj(&self) -> Self {
        Self::new(self.real.conj(), self.dual.conj())
    }

    pub fn scale(&self, s: T) -> Self {
        Self::new(self.real.scale(s), self.dual.scale(s))
    }

    pub fn normalized(&self) -> Self {
        let n = self.real.norm();
        let real = self.real.scale(T::one() / n);
        let dual = self.dual.scale(T::one() / n);
        let dual = dual - real.scale(real.dot(dual));
        Self::new(real, dual)
    }

    /// Deviation from the unit dual-quaternion constraints: `(|‖real‖ − 1|, |real·dual|)`.
    pub fn constraint_residual(&self) -> (T, T) {
        (
            (self.real.norm() - T::one()).abs(),
            self.real.dot(self.dual).abs(),
        )
    }
}

/// Normalized weights and hemisphere-aligned weighted sum of dual quaternions.
pub fn dqb_sum<T: Real>(weights: &[T], transforms: &[DualQuat<T>]) -> Result<(Vec<T>, DualQuat<T>)> {
    if weights.len() != transforms.len() {
        return Err(Error::Invalid(format!(
            "dqb: {} weights for {} transforms",
            weights.len(),
            transforms.len()
        )));
    }
    let total: T = weights.iter().copied().sum();
    if weights.is_empty() || weights.iter().any(|w| *w < T::zero()) || total <= T::zero() {
        return Err(Error::EmptyBlend);
    }
    let pivot = transforms[0].real;
    let mut acc = DualQuat::new(Quat::zeros(), Quat::zeros());
    let mut normalized = Vec::with_capacity(weights.len());
    for (w, dq) in weights.iter().zip(transforms) {
        let wn = *w / total;
        normalized.push(wn);
        let s = if dq.real.dot(pivot) < T::zero() { -wn } else { wn };
        acc.real += dq.real.scale(s);
        acc.dual += dq.dual.scale(s);
    }
    Ok((normalized, acc))
}

/// Dual-quaternion blending of rigid transforms.
///
/// Weights are normalized internally; operands whose real part points into the
/// opposite hemisphere of the first operand are negated before summation.
pub fn dqb<T: Real>(weights: &[T], transforms: &[DualQuat<T>]) -> Result<SE3Pose<T>> {
    let (_, acc) = dqb_sum(weights, transforms)?;
    Ok(acc.to_pose())
}

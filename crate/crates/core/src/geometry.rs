//! Rigid-body algebra for the simulated eye-in-hand camera.
//!
//! Conventions used throughout the crate:
//!
//! - A [`PoseTransform`] `aTb` maps points expressed in frame `b` into frame `a`
//!   (`p_a = R p_b + t`). Camera poses are always expressed with respect to the
//!   reference camera frame `c0`, i.e. the frame the reference image was taken from.
//! - A [`Pose6`] is the `(t, θu)` vector of a transform: the translation and the
//!   angle-axis vector of its rotation, in meters and radians. Degrees only show up
//!   at file boundaries (see [`Pose6::to_file_units`]).
//! - A [`Twist`] is expressed in the current camera frame.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

/// Angles below this are handled with first-order expansions.
const SMALL_ANGLE: f64 = 1e-7;
/// Rotation angles this close to π recover the axis from the symmetric part.
const NEAR_PI: f64 = 1e-3;
/// Components smaller than this are flushed to zero when canonicalizing.
const FLUSH: f64 = 1e-14;

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Rodrigues' formula: rotation matrix of an angle-axis vector.
pub fn rotation_from_angle_axis(theta_u: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = theta_u.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(theta_u);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    Matrix3::identity() + k * a + k * k * b
}

/// Canonical angle-axis vector of a rotation matrix, `‖θu‖ ∈ [0, π]`.
///
/// At exactly `θ = π` the axis sign is ambiguous; the first nonzero axis
/// component is made positive.
pub fn angle_axis_from_rotation(r: &Matrix3<f64>) -> Vector3<f64> {
    let skew_part = vee(&(r - r.transpose())) * 0.5; // sin(θ)·u
    let sin_theta = skew_part.norm();
    let cos_theta = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let theta = sin_theta.atan2(cos_theta);

    if theta < SMALL_ANGLE {
        return skew_part;
    }
    if std::f64::consts::PI - theta > NEAR_PI {
        return skew_part * (theta / sin_theta);
    }

    // Near π: uuᵀ = (sym(R) − cosθ·I) / (1 − cosθ)
    let sym = (r + r.transpose()) * 0.5;
    let uut = (sym - Matrix3::identity() * cos_theta) / (1.0 - cos_theta);
    let mut best = 0;
    for i in 1..3 {
        if uut[(i, i)] > uut[(best, best)] {
            best = i;
        }
    }
    let mut axis = uut.column(best).into_owned() / uut[(best, best)].max(0.0).sqrt();
    axis.normalize_mut();
    if sin_theta > 1e-12 {
        if axis.dot(&skew_part) < 0.0 {
            axis = -axis;
        }
    } else {
        axis = canonical_axis_sign(axis);
    }
    axis * theta
}

fn canonical_axis_sign(axis: Vector3<f64>) -> Vector3<f64> {
    match axis.iter().find(|c| c.abs() > 1e-12) {
        Some(&c) if c < 0.0 => -axis,
        _ => axis,
    }
}

/// Rigid transform in SE(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    /// Build from a row-major 3×4 `[R | t]` array.
    pub fn from_row_major_3x4(m: &[f64; 12]) -> Self {
        Self::new(
            Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]),
            Vector3::new(m[3], m[7], m[11]),
        )
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn to_homogeneous(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// `self · other` as homogeneous matrices: `aTb · bTc = aTc`.
    pub fn compose(&self, other: &PoseTransform) -> PoseTransform {
        PoseTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// `(Rᵀ, −Rᵀt)`.
    pub fn inverse(&self) -> PoseTransform {
        let rt = self.rotation.transpose();
        PoseTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `‖RᵀR − I‖_∞ < 1e-9` and `det R > 0`.
    pub fn is_valid(&self) -> bool {
        let err = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        err < 1e-9 && self.rotation.determinant() > 0.0 && self.translation.iter().all(|v| v.is_finite())
    }

    pub fn to_pose6(&self) -> Pose6 {
        Pose6 {
            t: self.translation,
            theta_u: angle_axis_from_rotation(&self.rotation),
        }
        .flushed()
    }

    pub fn from_pose6(p: &Pose6) -> PoseTransform {
        PoseTransform {
            rotation: rotation_from_angle_axis(&p.theta_u),
            translation: p.t,
        }
    }

    /// Apply the camera-frame twist `v` for `dt` seconds using the exact SE(3)
    /// exponential: `pose · exp(v·dt)`.
    pub fn integrate_twist(&self, v: &Twist, dt: f64) -> PoseTransform {
        self.compose(&se3_exp(&(v.linear * dt), &(v.angular * dt)))
    }
}

/// `relative_pose(aTd, aTc)` is the vector form of `dTc = aTd⁻¹ · aTc`.
pub fn relative_pose(t_ref_desired: &PoseTransform, t_ref_current: &PoseTransform) -> Pose6 {
    t_ref_desired.inverse().compose(t_ref_current).to_pose6()
}

/// Exponential map of the SE(3) tangent vector `(rho, phi)`.
pub fn se3_exp(rho: &Vector3<f64>, phi: &Vector3<f64>) -> PoseTransform {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (b, c) = if theta < 1e-5 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        ((1.0 - theta.cos()) / theta2, (theta - theta.sin()) / (theta2 * theta))
    };
    let v = Matrix3::identity() + k * b + k * k * c;
    PoseTransform {
        rotation: rotation_from_angle_axis(phi),
        translation: v * rho,
    }
}

/// `(t, θu)` pose vector. Meters and radians.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 6]", into = "[f64; 6]")]
pub struct Pose6 {
    pub t: Vector3<f64>,
    pub theta_u: Vector3<f64>,
}

impl Default for Pose6 {
    fn default() -> Self {
        Self::zero()
    }
}

impl Pose6 {
    pub fn zero() -> Self {
        Self {
            t: Vector3::zeros(),
            theta_u: Vector3::zeros(),
        }
    }

    pub fn new(t: Vector3<f64>, theta_u: Vector3<f64>) -> Self {
        Self { t, theta_u }
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self::new(Vector3::new(a[0], a[1], a[2]), Vector3::new(a[3], a[4], a[5]))
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.t.x,
            self.t.y,
            self.t.z,
            self.theta_u.x,
            self.theta_u.y,
            self.theta_u.z,
        ]
    }

    /// `(tx, ty, tz, rx, ry, rz)` in meters and degrees.
    pub fn from_file_units(a: [f64; 6]) -> Self {
        Self::new(
            Vector3::new(a[0], a[1], a[2]),
            Vector3::new(a[3], a[4], a[5]).map(f64::to_radians),
        )
    }

    pub fn to_file_units(&self) -> [f64; 6] {
        let r = self.theta_u.map(f64::to_degrees);
        [self.t.x, self.t.y, self.t.z, r.x, r.y, r.z]
    }

    pub fn translation_norm(&self) -> f64 {
        self.t.norm()
    }

    pub fn rotation_angle(&self) -> f64 {
        self.theta_u.norm()
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }

    /// Same rotation with `‖θu‖ ∈ [0, π]` and the tie-break at π applied.
    pub fn canonicalized(&self) -> Pose6 {
        PoseTransform::from_pose6(self).to_pose6()
    }

    fn flushed(mut self) -> Self {
        for v in self.t.iter_mut().chain(self.theta_u.iter_mut()) {
            if v.abs() < FLUSH {
                *v = 0.0;
            }
        }
        self
    }
}

impl From<[f64; 6]> for Pose6 {
    fn from(a: [f64; 6]) -> Self {
        Pose6::from_file_units(a)
    }
}

impl From<Pose6> for [f64; 6] {
    fn from(p: Pose6) -> Self {
        p.to_file_units()
    }
}

/// Camera velocity in the camera frame: m/s and rad/s.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Twist {
    pub linear: Vector3<f64>,
    pub angular: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn new(linear: Vector3<f64>, angular: Vector3<f64>) -> Self {
        Self { linear, angular }
    }

    pub fn is_finite(&self) -> bool {
        self.linear.iter().chain(self.angular.iter()).all(|v| v.is_finite())
    }
}

/// Pinhole intrinsics. Pixel centers sit at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        Self::centered(256, 256, 256.0)
    }
}

impl CameraIntrinsics {
    /// Square pixels, principal point at the image center.
    pub fn centered(width: u32, height: u32, focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: (width as f64 - 1.0) * 0.5,
            cy: (height as f64 - 1.0) * 0.5,
            width,
            height,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.fx > 0.0
            && self.fy > 0.0
            && self.width > 0
            && self.height > 0
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Pixel to normalized image coordinates.
    pub fn normalize(&self, u: f64, v: f64) -> (f64, f64) {
        ((u - self.cx) / self.fx, (v - self.cy) / self.fy)
    }

    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn rz(angle: f64) -> Matrix3<f64> {
        let (s, c) = angle.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    fn max_abs(a: &Matrix4<f64>, b: &Matrix4<f64>) -> f64 {
        (a - b).amax()
    }

    #[test]
    fn compose_identity_and_inverse() {
        let t = PoseTransform::new(rz(0.3), Vector3::new(1.0, -2.0, 0.5));
        let id = PoseTransform::identity();
        assert_eq!(id.compose(&t), t);
        let e = t.compose(&t.inverse());
        assert!(max_abs(&e.to_homogeneous(), &Matrix4::identity()) < 1e-9);
    }

    #[test]
    fn compose_two_quarter_turns() {
        // Hand product: [Rz90 | (1,0,0)]² = [Rz180 | Rz90·(1,0,0) + (1,0,0)] = [Rz180 | (1,1,0)]
        let t = PoseTransform::new(rz(FRAC_PI_2), Vector3::new(1.0, 0.0, 0.0));
        let c = t.compose(&t);
        let expected = PoseTransform::new(rz(PI), Vector3::new(1.0, 1.0, 0.0));
        assert!(max_abs(&c.to_homogeneous(), &expected.to_homogeneous()) < 1e-12);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(PoseTransform::identity().inverse(), PoseTransform::identity());
        let inv = PoseTransform::from_translation(Vector3::new(1.0, 2.0, 3.0)).inverse();
        assert_eq!(inv.translation, Vector3::new(-1.0, -2.0, -3.0));
        assert_eq!(inv.rotation, Matrix3::identity());

        let t = PoseTransform::new(rz(FRAC_PI_2), Vector3::new(1.0, 0.0, 0.0));
        let inv = t.inverse();
        assert!((inv.rotation - rz(-FRAC_PI_2)).amax() < 1e-12);
        assert!((inv.translation - Vector3::new(0.0, 1.0, 0.0)).amax() < 1e-12);
    }

    #[test]
    fn pose6_principal_axis() {
        assert_eq!(PoseTransform::identity().to_pose6(), Pose6::zero());
        for theta in [1e-9, 1e-4, 0.5, 2.0, 3.1] {
            let p = PoseTransform::new(rz(theta), Vector3::zeros()).to_pose6();
            assert!((p.theta_u - Vector3::new(0.0, 0.0, theta)).amax() < 1e-12, "{theta}");
        }
    }

    #[test]
    fn pose6_at_pi_uses_canonical_sign() {
        // Rotation by π about (−1, 2, 0)/√5 must come back with a positive first component.
        let axis = Vector3::new(-1.0, 2.0, 0.0).normalize();
        let r = rotation_from_angle_axis(&(axis * PI));
        let tu = angle_axis_from_rotation(&r);
        assert!((tu.norm() - PI).abs() < 1e-9);
        assert!(tu.x > 0.0);
        assert!((tu.normalize() + axis).amax() < 1e-9);

        let tu = angle_axis_from_rotation(&rz(PI));
        assert!((tu - Vector3::new(0.0, 0.0, PI)).amax() < 1e-12);
        let tu = angle_axis_from_rotation(&rz(-PI));
        assert!((tu - Vector3::new(0.0, 0.0, PI)).amax() < 1e-12);
    }

    #[test]
    fn near_pi_keeps_orientation() {
        let axis = Vector3::new(0.3, -0.4, 0.5).normalize();
        let tu = axis * (PI - 1e-5);
        let back = angle_axis_from_rotation(&rotation_from_angle_axis(&tu));
        assert!((back - tu).amax() < 1e-9);
    }

    #[test]
    fn canonicalize_wraps_large_angles() {
        let p = Pose6::new(Vector3::zeros(), Vector3::new(0.0, 0.0, 1.5 * PI));
        let c = p.canonicalized();
        assert!((c.theta_u - Vector3::new(0.0, 0.0, -0.5 * PI)).amax() < 1e-12);
    }

    #[test]
    fn relative_pose_examples() {
        let a = PoseTransform::new(rz(0.7), Vector3::new(0.1, 0.2, -0.3));
        assert_eq!(relative_pose(&a, &a), Pose6::zero());
        let t = Vector3::new(0.3, -0.1, 0.2);
        let r = relative_pose(&PoseTransform::identity(), &PoseTransform::from_translation(t));
        assert_eq!(r, Pose6::new(t, Vector3::zeros()));
    }

    #[test]
    fn integrate_twist_examples() {
        let t = PoseTransform::new(rz(0.2), Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(t.integrate_twist(&Twist::zero(), 0.05), t);

        let p =
            PoseTransform::identity().integrate_twist(&Twist::new(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros()), 0.1);
        assert!((p.translation - Vector3::new(0.1, 0.0, 0.0)).amax() < 1e-15);

        let omega = 0.8;
        let dt = 0.37;
        let p =
            PoseTransform::identity().integrate_twist(&Twist::new(Vector3::zeros(), Vector3::new(0.0, 0.0, omega)), dt);
        assert!((p.rotation - rz(omega * dt)).amax() < 1e-12);
        assert!((p.to_pose6().rotation_angle() - omega * dt).abs() < 1e-9);
    }

    #[test]
    fn integrate_twist_is_first_order_in_dt() {
        let v = Twist::new(Vector3::new(0.3, -0.2, 0.1), Vector3::new(0.5, 0.4, -0.9));
        let mut prev = None;
        for dt in [1e-2, 1e-3, 1e-4] {
            let p = PoseTransform::identity().integrate_twist(&v, dt);
            let d = max_abs(&p.to_homogeneous(), &Matrix4::identity());
            // ‖exp(ξ dt) − I‖ ≈ dt·‖ξ‖
            let ratio = d / dt;
            assert!(ratio > 0.5 && ratio < 1.5, "dt={dt} ratio={ratio}");
            if let Some(prev) = prev {
                let shrink: f64 = prev / d;
                assert!((shrink - 10.0).abs() < 0.2, "shrink {shrink}");
            }
            prev = Some(d);
        }
    }

    #[test]
    fn se3_exp_matches_twist_closed_form_for_screw_motion() {
        // Constant twist around z with forward speed: helix. After one full turn the
        // translation equals pitch · 2π / ω along z plus no lateral drift.
        let omega = 2.0;
        let v = Twist::new(Vector3::new(0.0, 0.0, 0.5), Vector3::new(0.0, 0.0, omega));
        let p = PoseTransform::identity().integrate_twist(&v, PI);
        assert!((p.translation - Vector3::new(0.0, 0.0, 0.5 * PI)).amax() < 1e-12);
    }

    #[test]
    fn file_units_serialize_in_degrees() {
        let p = Pose6::new(Vector3::new(0.01, 0.0, 0.0), Vector3::new(PI, 0.0, 0.0));
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, "[0.01,0.0,0.0,180.0,0.0,0.0]");
        let back: Pose6 = serde_json::from_str(&json).unwrap();
        assert!((back.theta_u.x - PI).abs() < 1e-15);
    }

    fn arb_pose6(max_angle: f64) -> impl Strategy<Value = Pose6> {
        (
            prop::array::uniform3(-2.0..2.0f64),
            prop::array::uniform3(-1.0..1.0f64),
            1e-6..max_angle,
        )
            .prop_filter_map("nonzero axis", |(t, axis, angle)| {
                let a = Vector3::from(axis);
                (a.norm() > 1e-3).then(|| Pose6::new(Vector3::from(t), a.normalize() * angle))
            })
    }

    fn arb_transform() -> impl Strategy<Value = PoseTransform> {
        arb_pose6(PI - 1e-6).prop_map(|p| PoseTransform::from_pose6(&p))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn pose6_round_trip(p in arb_pose6(PI - 1e-6)) {
            let back = PoseTransform::from_pose6(&p).to_pose6();
            prop_assert!((back.t - p.t).amax() < 1e-9);
            prop_assert!((back.theta_u - p.theta_u).amax() < 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2_000))]

        #[test]
        fn transforms_are_valid(t in arb_transform()) {
            prop_assert!(t.is_valid());
            prop_assert!(t.inverse().is_valid());
        }

        #[test]
        fn composition_is_associative(a in arb_transform(), b in arb_transform(), c in arb_transform()) {
            let left = a.compose(&b).compose(&c).to_homogeneous();
            let right = a.compose(&b.compose(&c)).to_homogeneous();
            prop_assert!(max_abs(&left, &right) < 1e-9);
        }

        #[test]
        fn relative_pose_matches_matrix_oracle(a in arb_transform(), b in arb_transform()) {
            // Independent route: invert and multiply 4×4 homogeneous matrices.
            let m = a.to_homogeneous().try_inverse().unwrap() * b.to_homogeneous();
            let r = m.fixed_view::<3, 3>(0, 0).into_owned();
            let t = m.fixed_view::<3, 1>(0, 3).into_owned();
            let expected = Pose6::new(t, angle_axis_from_rotation(&r));
            let got = relative_pose(&a, &b);
            prop_assert!((got.t - expected.t).amax() < 1e-9);
            // Near θ = π the sign may legitimately flip; compare rotations instead.
            let dr = rotation_from_angle_axis(&got.theta_u) - rotation_from_angle_axis(&expected.theta_u);
            prop_assert!(dr.amax() < 1e-9);
        }

        #[test]
        fn relative_pose_of_self_is_exactly_zero(a in arb_transform()) {
            prop_assert_eq!(relative_pose(&a, &a), Pose6::zero());
        }
    }
}

//! Rotation and rigid-transform algebra plus the pinhole projection model.
//!
//! Camera frames are x-right, y-down, z-forward. Per-axis angles are named
//! after the camera axis they rotate about: tilt (x), pan (y), roll (z), and
//! compose as `R = Rz(roll) * Ry(pan) * Rx(tilt)`.

use std::fmt;
use std::ops::{Mul, Neg};

use nalgebra::{Matrix3, Matrix3x4, Matrix4, Vector3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, CoreError, Result};

pub type Vec3 = Vector3<f64>;

/// Unit quaternion in Hamilton convention, stored `(w, x, y, z)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl TryFrom<[f64; 4]> for UnitQuaternion {
    type Error = CoreError;
    /// Values already of unit length (within 1e-12) are kept bit-exact.
    fn try_from(v: [f64; 4]) -> Result<Self> {
        let n2: f64 = v.iter().map(|c| c * c).sum();
        if (n2 - 1.0).abs() < 1e-12 {
            let [w, x, y, z] = v;
            return Ok(Self { w, x, y, z });
        }
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<UnitQuaternion> for [f64; 4] {
    fn from(q: UnitQuaternion) -> Self {
        q.to_array()
    }
}

impl UnitQuaternion {
    pub const IDENTITY: Self = Self {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Normalizes `(w, x, y, z)`; fails on a (near) zero or non-finite input.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() {
            return Err(CoreError::NonFinite(format!("quaternion ({w}, {x}, {y}, {z})")));
        }
        if n <= 1e-8 {
            return Err(CoreError::DegenerateNorm(n));
        }
        Ok(Self {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    pub fn from_array(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    /// Rotation by `angle` radians about a unit `axis`.
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let a = axis.normalize();
        let (s, c) = (angle / 2.0).sin_cos();
        Self {
            w: c,
            x: a.x * s,
            y: a.y * s,
            z: a.z * s,
        }
    }

    pub fn dot(&self, o: &Self) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    /// Conjugate, which is the inverse for unit quaternions.
    pub fn inverse(&self) -> Self {
        Self {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Resolve the double cover: `w >= 0`, and for `w == 0` the first
    /// nonzero of `x, y, z` is positive.
    pub fn canonical(&self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else {
            [self.x, self.y, self.z]
                .into_iter()
                .find(|v| *v != 0.0)
                .is_some_and(|v| v < 0.0)
        };
        if flip {
            -*self
        } else {
            *self
        }
    }

    fn renormalized(self) -> Self {
        let n = self.norm();
        Self {
            w: self.w / n,
            x: self.x / n,
            y: self.y / n,
            z: self.z / n,
        }
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let Self { w, x, y, z } = *self;
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Quaternion of a rotation matrix (Shepperd's method), canonicalized.
    pub fn from_rotation_matrix(r: &Matrix3<f64>) -> Self {
        let tr = r.trace();
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Self {
                w: 0.25 * s,
                x: (r[(2, 1)] - r[(1, 2)]) / s,
                y: (r[(0, 2)] - r[(2, 0)]) / s,
                z: (r[(1, 0)] - r[(0, 1)]) / s,
            }
        } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
            let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
            Self {
                w: (r[(2, 1)] - r[(1, 2)]) / s,
                x: 0.25 * s,
                y: (r[(0, 1)] + r[(1, 0)]) / s,
                z: (r[(0, 2)] + r[(2, 0)]) / s,
            }
        } else if r[(1, 1)] > r[(2, 2)] {
            let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
            Self {
                w: (r[(0, 2)] - r[(2, 0)]) / s,
                x: (r[(0, 1)] + r[(1, 0)]) / s,
                y: 0.25 * s,
                z: (r[(1, 2)] + r[(2, 1)]) / s,
            }
        } else {
            let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
            Self {
                w: (r[(1, 0)] - r[(0, 1)]) / s,
                x: (r[(0, 2)] + r[(2, 0)]) / s,
                y: (r[(1, 2)] + r[(2, 1)]) / s,
                z: 0.25 * s,
            }
        };
        q.renormalized().canonical()
    }

    pub fn rotate(&self, v: &Vec3) -> Vec3 {
        self.to_rotation_matrix() * v
    }

    /// `Rz(roll) * Ry(pan) * Rx(tilt)`.
    pub fn from_euler(e: EulerTPR) -> Self {
        let qx = Self::from_axis_angle(&Vec3::x(), e.tilt.to_radians());
        let qy = Self::from_axis_angle(&Vec3::y(), e.pan.to_radians());
        let qz = Self::from_axis_angle(&Vec3::z(), e.roll.to_radians());
        qz * qy * qx
    }

    /// Inverse of [`UnitQuaternion::from_euler`]. The middle (pan) angle is
    /// recovered in (-90, 90); fails when `|R31| > 1 - 1e-9`.
    pub fn to_euler(&self) -> Result<EulerTPR> {
        let r = self.to_rotation_matrix();
        let r31 = r[(2, 0)];
        if r31.abs() > 1.0 - 1e-9 {
            return Err(CoreError::GimbalLock(r31.abs()));
        }
        Ok(EulerTPR {
            tilt: r[(2, 1)].atan2(r[(2, 2)]).to_degrees(),
            pan: (-r31).atan2(r[(2, 1)].hypot(r[(2, 2)])).to_degrees(),
            roll: r[(1, 0)].atan2(r[(0, 0)]).to_degrees(),
        })
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    /// Hamilton product; `a * b` applies `b` first.
    fn mul(self, b: Self) -> Self {
        let a = self;
        Self {
            w: a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
            x: a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
            y: a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
            z: a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
        }
        .renormalized()
    }
}

impl Neg for UnitQuaternion {
    type Output = UnitQuaternion;
    fn neg(self) -> Self {
        Self {
            w: -self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }
}

/// Tilt, pan and roll in degrees.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EulerTPR {
    pub tilt: f64,
    pub pan: f64,
    pub roll: f64,
}

impl EulerTPR {
    pub fn new(tilt: f64, pan: f64, roll: f64) -> Self {
        Self { tilt, pan, roll }
    }
}

/// Rigid transform `H = [R t; 0 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Extrinsic {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl TryFrom<Vec<f64>> for Extrinsic {
    type Error = CoreError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        if v.len() != 16 {
            return Err(CoreError::Format(format!("extrinsic needs 16 values, got {}", v.len())));
        }
        Self::from_matrix4(&Matrix4::from_row_slice(&v))
    }
}

impl From<Extrinsic> for Vec<f64> {
    fn from(h: Extrinsic) -> Self {
        h.row_major().to_vec()
    }
}

impl Default for Extrinsic {
    fn default() -> Self {
        Self::identity()
    }
}

const ROTATION_TOL: f64 = 1e-9;

impl Extrinsic {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Fails unless `R^T R = I` and `det R = 1` within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        let det = rotation.determinant();
        if ortho > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL {
            return Err(CoreError::NotARotation(format!("|R^T R - I| = {ortho:e}, det = {det}")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("translation".into()));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_quaternion(q: &UnitQuaternion, translation: Vec3) -> Self {
        Self {
            rotation: q.to_rotation_matrix(),
            translation,
        }
    }

    pub fn from_matrix4(m: &Matrix4<f64>) -> Result<Self> {
        let last = m.row(3);
        if (last[0].abs() + last[1].abs() + last[2].abs() + (last[3] - 1.0).abs()) > ROTATION_TOL {
            return Err(CoreError::NotARotation(format!("last row {last}")));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn rotation_quaternion(&self) -> UnitQuaternion {
        UnitQuaternion::from_rotation_matrix(&self.rotation)
    }

    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn row_major(&self) -> [f64; 16] {
        let m = self.to_matrix4();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    /// Largest elementwise difference of the 4x4 matrices.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        (self.to_matrix4() - other.to_matrix4()).abs().max()
    }

    /// Key-value text form: `H: <16 row-major values>`.
    pub fn to_text(&self) -> String {
        let vals: Vec<String> = self.row_major().iter().map(|v| v.to_string()).collect();
        format!("H: {}", vals.join(" "))
    }

    pub fn from_text(line: &str) -> Result<Self> {
        let rest = line
            .trim()
            .strip_prefix("H:")
            .ok_or_else(|| CoreError::Format(format!("expected 'H:' line, got {line:?}")))?;
        let vals = rest
            .split_whitespace()
            .map(|s| s.parse::<f64>().map_err(|e| CoreError::Format(format!("{s:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Self::try_from(vals)
    }
}

impl Mul for Extrinsic {
    type Output = Extrinsic;
    /// Composition `self * rhs` (apply `rhs` first).
    fn mul(self, rhs: Self) -> Self {
        Self {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

impl fmt::Display for Extrinsic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_text())
    }
}

/// Error transform `Phi_dec` with `H_init = Phi_dec * H_gt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decalibration {
    pub rotation: UnitQuaternion,
    pub translation: [f64; 3],
}

impl Decalibration {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::IDENTITY,
            translation: [0.0; 3],
        }
    }

    pub fn rotation_only(q: UnitQuaternion) -> Self {
        Self {
            rotation: q,
            translation: [0.0; 3],
        }
    }

    pub fn to_extrinsic(&self) -> Extrinsic {
        Extrinsic::from_quaternion(&self.rotation, Vec3::from(self.translation))
    }

    pub fn from_extrinsic(h: &Extrinsic) -> Self {
        let t = h.translation();
        Self {
            rotation: h.rotation_quaternion(),
            translation: [t.x, t.y, t.z],
        }
    }

    pub fn invert(&self) -> Self {
        Self::from_extrinsic(&self.to_extrinsic().inverse())
    }
}

/// `H_init = Phi_dec * H_gt`.
pub fn apply_decalibration(h_gt: &Extrinsic, d: &Decalibration) -> Extrinsic {
    d.to_extrinsic() * *h_gt
}

/// Left-multiply rotation-only corrections onto `h_init`, first element
/// first: `[A, B]` yields `B * A * H_init`.
pub fn recover_calibration(h_init: &Extrinsic, corrections: &[UnitQuaternion]) -> Extrinsic {
    corrections
        .iter()
        .fold(*h_init, |h, q| Extrinsic::from_quaternion(q, Vec3::zeros()) * h)
}

/// Correction still needed after a first-stage estimate:
/// `Phi'^-1 = Phi^-1 * Phi_hat`, canonicalized.
pub fn residual_label(phi_dec_inv: &UnitQuaternion, phi_hat_dec_inv: &UnitQuaternion) -> UnitQuaternion {
    (*phi_dec_inv * phi_hat_dec_inv.inverse()).canonical()
}

/// Pinhole intrinsics with zero skew. Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(invalid("intrinsics.fx/fy", "focal lengths must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(invalid("intrinsics.cx", "principal point must lie inside the image"));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(invalid("intrinsics.cy", "principal point must lie inside the image"));
        }
        Ok(())
    }

    /// Square-pixel camera with the principal point at the image center.
    pub fn centered(focal: f64, width: u32, height: u32) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    /// `K = [f 0 c 0; 0 f c 0; 0 0 1 0]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        Matrix3x4::new(
            self.fx, 0.0, self.cx, 0.0, 0.0, self.fy, self.cy, 0.0, 0.0, 0.0, 1.0, 0.0,
        )
    }

    /// Same camera at a different resolution.
    pub fn rescaled(&self, width: u32, height: u32) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "K: {} {} {} {} {} {}",
            self.fx, self.fy, self.cx, self.cy, self.width, self.height
        )
    }

    pub fn from_text(line: &str) -> Result<Self> {
        let rest = line
            .trim()
            .strip_prefix("K:")
            .ok_or_else(|| CoreError::Format(format!("expected 'K:' line, got {line:?}")))?;
        let v: Vec<&str> = rest.split_whitespace().collect();
        if v.len() != 6 {
            return Err(CoreError::Format(format!("K needs 6 values, got {}", v.len())));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|e| CoreError::Format(format!("{s:?}: {e}")));
        let u = |s: &str| s.parse::<u32>().map_err(|e| CoreError::Format(format!("{s:?}: {e}")));
        Self::new(f(v[0])?, f(v[1])?, f(v[2])?, f(v[3])?, u(v[4])?, u(v[5])?)
    }

    #[inline]
    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64
    }
}

/// Image position and depth of a projected point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedDetection {
    pub u: f64,
    pub v: f64,
    pub z_c: f64,
    pub in_image: bool,
}

/// `z_c [u v 1]^T = K H [x; 1]`. Points with `z_c <= 0` are flagged as not
/// in the image; their `(u, v)` are meaningless.
pub fn project(k: &CameraIntrinsics, h: &Extrinsic, x: &Vec3) -> ProjectedDetection {
    let p = h.transform_point(x);
    let z_c = p.z;
    let u = k.fx * p.x / z_c + k.cx;
    let v = k.fy * p.y / z_c + k.cy;
    ProjectedDetection {
        u,
        v,
        z_c,
        in_image: z_c > 0.0 && k.contains(u, v),
    }
}

/// Sampling ranges for random decalibrations: per-axis uniform intervals in
/// degrees, i.i.d. Gaussian translation noise in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecalRanges {
    pub tilt: [f64; 2],
    pub pan: [f64; 2],
    pub roll: [f64; 2],
    pub translation_sigma: f64,
}

impl Default for DecalRanges {
    fn default() -> Self {
        Self {
            tilt: [-10.0, 10.0],
            pan: [-10.0, 10.0],
            roll: [-5.0, 5.0],
            translation_sigma: 0.10,
        }
    }
}

impl DecalRanges {
    pub fn none() -> Self {
        Self {
            tilt: [0.0; 2],
            pan: [0.0; 2],
            roll: [0.0; 2],
            translation_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("tilt", self.tilt), ("pan", self.pan), ("roll", self.roll)] {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(invalid(format!("decalibration.{name}"), "expected finite [min, max]"));
            }
        }
        if !(self.translation_sigma >= 0.0) {
            return Err(invalid("decalibration.translation_sigma", "must be >= 0"));
        }
        Ok(())
    }

    /// Draw the per-axis angles and the translation offset.
    pub fn sample_components<R: Rng + ?Sized>(&self, rng: &mut R) -> (EulerTPR, [f64; 3]) {
        let mut uni = |r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.random::<f64>();
        let angles = EulerTPR {
            tilt: uni(self.tilt),
            pan: uni(self.pan),
            roll: uni(self.roll),
        };
        let normal = Normal::new(0.0, self.translation_sigma).expect("sigma validated");
        let t = [normal.sample(rng), normal.sample(rng), normal.sample(rng)];
        (angles, t)
    }
}

/// Random decalibration: per-axis rotations multiplied in the
/// [`UnitQuaternion::from_euler`] order, plus Gaussian translation error.
pub fn sample_decalibration<R: Rng + ?Sized>(ranges: &DecalRanges, rng: &mut R) -> Decalibration {
    let (angles, translation) = ranges.sample_components(rng);
    Decalibration {
        rotation: UnitQuaternion::from_euler(angles),
        translation,
    }
}

/// Rotation angle between two orientations in degrees, in `[0, 180]`.
pub fn geodesic_angle(a: &UnitQuaternion, b: &UnitQuaternion) -> f64 {
    let r = a.inverse() * *b;
    let v = (r.x * r.x + r.y * r.y + r.z * r.z).sqrt();
    (2.0 * v.atan2(r.w.abs())).to_degrees()
}

/// Sign-aligned arithmetic mean, renormalized and canonicalized. Accurate
/// when all inputs are within 90 degrees of the first.
pub fn quat_mean(qs: &[UnitQuaternion]) -> Result<UnitQuaternion> {
    let first = qs.first().ok_or(CoreError::EmptyInput)?;
    let mut acc = [0.0; 4];
    for q in qs {
        let s = if q.dot(first) < 0.0 { -1.0 } else { 1.0 };
        for (a, v) in acc.iter_mut().zip(q.to_array()) {
            *a += s * v;
        }
    }
    let n = qs.len() as f64;
    Ok(UnitQuaternion::new(acc[0] / n, acc[1] / n, acc[2] / n, acc[3] / n)?.canonical())
}

//! Two-view epipolar geometry in double precision.
//!
//! Pixel coordinates use a continuous frame in which an image of size
//! `W x H` spans `[0, W] x [0, H]`; the center of pixel `(col, row)` sits at
//! `(col + 0.5, row + 0.5)`.

use nalgebra::{Matrix3, Point2, Vector3};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};

pub type Pt2 = Point2<f64>;

/// Pinhole intrinsics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || !cx.is_finite() || !cy.is_finite() {
            return Err(Error::invalid(format!(
                "intrinsics need positive focal lengths, got fx={fx} fy={fy}"
            )));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Builds intrinsics from a row-major calibration matrix; skew must be zero.
    pub fn from_matrix(k: &Matrix3<f64>) -> Result<Self> {
        let tol = 1e-9 * k.norm().max(1.0);
        if k[(0, 1)].abs() > tol
            || k[(1, 0)].abs() > tol
            || k[(2, 0)].abs() > tol
            || k[(2, 1)].abs() > tol
            || (k[(2, 2)] - 1.0).abs() > tol
        {
            return Err(Error::invalid(
                "calibration matrix must be [[fx,0,cx],[0,fy,cy],[0,0,1]]",
            ));
        }
        Self::new(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)])
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

    /// Projects a camera-frame point; `None` when it lies on or behind the image plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<Pt2> {
        if p.z <= 1e-12 {
            return None;
        }
        Some(Pt2::new(
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        ))
    }

    /// Back-projects pixel `x` to the camera-frame point at depth `z`.
    pub fn unproject(&self, x: &Pt2, z: f64) -> Vector3<f64> {
        Vector3::new((x.x - self.cx) / self.fx * z, (x.y - self.cy) / self.fy * z, z)
    }
}

/// Relative pose mapping camera-1 coordinates to camera-2 coordinates:
/// `X2 = R * X1 + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativePose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RelativePose {
    /// Validates that `rotation` is a proper rotation. A zero translation is
    /// representable (e.g. synthetic identity scenes) but has no fundamental matrix.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(ortho <= 1e-9) {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (max |R^T R - I| = {ortho:e})"
            )));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= 1e-9) {
            return Err(Error::invalid(format!("rotation determinant is {det}")));
        }
        if translation.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Fundamental matrix mapping homogeneous image-1 pixels to image-2 lines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FundamentalMatrix(pub Matrix3<f64>);

impl FundamentalMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    /// Algebraic residual `x2^T F x1`.
    pub fn residual(&self, x1: &Pt2, x2: &Pt2) -> f64 {
        let a = Vector3::new(x1.x, x1.y, 1.0);
        let b = Vector3::new(x2.x, x2.y, 1.0);
        b.dot(&(self.0 * a))
    }

    /// Fundamental matrix of the reversed pair (image 2 -> image 1).
    pub fn transposed(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Ratio of smallest to largest singular value; zero for an exact rank-2 matrix.
    pub fn rank_deficiency(&self) -> f64 {
        let sv = self.0.singular_values();
        let max = sv.max();
        if max == 0.0 {
            return 0.0;
        }
        sv.min() / max
    }
}

/// Normalized line `a*u + b*v + c = 0` with `a^2 + b^2 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpipolarLine {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl EpipolarLine {
    /// Normalizes raw coefficients and applies the sign convention
    /// (`c <= 0` when `|c| > 1e-12`, otherwise `b >= 0`, then `a >= 0`).
    pub fn from_coefficients(a: f64, b: f64, c: f64) -> Result<Self> {
        let n = a.hypot(b);
        if !(n > 0.0) || !c.is_finite() {
            return Err(Error::DegenerateLine);
        }
        let (mut a, mut b, mut c) = (a / n, b / n, c / n);
        let flip = if c.abs() > 1e-12 {
            c > 0.0
        } else if b != 0.0 {
            b < 0.0
        } else {
            a < 0.0
        };
        if flip {
            a = -a;
            b = -b;
            c = -c;
        }
        Ok(Self { a, b, c })
    }

    pub fn signed_distance(&self, y: &Pt2) -> f64 {
        self.a * y.x + self.b * y.y + self.c
    }

    /// Closest point on the line to `y`.
    pub fn project(&self, y: &Pt2) -> Pt2 {
        let d = self.signed_distance(y);
        Pt2::new(y.x - d * self.a, y.y - d * self.b)
    }
}

/// Visible part of a line inside an image rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineSegment {
    pub p0: Pt2,
    pub p1: Pt2,
}

impl LineSegment {
    pub fn length(&self) -> f64 {
        (self.p1 - self.p0).norm()
    }

    pub fn point_at(&self, s: f64) -> Pt2 {
        self.p0 + (self.p1 - self.p0) * s
    }
}

fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// `F = K2^-T [t]x R K1^-1`, scaled to unit Frobenius norm.
pub fn fundamental_from_pose(
    k1: &Intrinsics,
    k2: &Intrinsics,
    pose: &RelativePose,
) -> Result<FundamentalMatrix> {
    let tn = pose.translation.norm();
    if !(tn > 0.0) {
        return Err(Error::DegeneratePose);
    }
    let essential = skew(&(pose.translation / tn)) * pose.rotation;
    let f = k2.inverse_matrix().transpose() * essential * k1.inverse_matrix();
    let norm = f.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::DegeneratePose);
    }
    Ok(FundamentalMatrix(f / norm))
}

/// Epipolar line in image 2 of image-1 pixel `x`.
pub fn epipolar_line(f: &FundamentalMatrix, x: &Pt2) -> Result<EpipolarLine> {
    let xh = Vector3::new(x.x, x.y, 1.0);
    let l = f.0 * xh;
    let scale = f.0.norm() * xh.norm();
    if !(l.x.hypot(l.y) > 1e-12 * scale) {
        return Err(Error::DegenerateLine);
    }
    EpipolarLine::from_coefficients(l.x, l.y, l.z)
}

pub fn point_line_distance(line: &EpipolarLine, y: &Pt2) -> f64 {
    line.signed_distance(y).abs()
}

/// Intersects `line` with `[0, width] x [0, height]`. Returns `None` when the
/// visible part is empty or shorter than one pixel. Endpoints are ordered
/// lexicographically by `(u, v)`.
pub fn clip_line_to_image(line: &EpipolarLine, width: f64, height: f64) -> Option<LineSegment> {
    if !(width > 0.0 && height > 0.0) {
        return None;
    }
    // Parametrize as origin + s * dir, origin the foot of the perpendicular from (0, 0).
    let origin = Pt2::new(-line.c * line.a, -line.c * line.b);
    let dir = (-line.b, line.a);
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for (o, d, max) in [(origin.x, dir.0, width), (origin.y, dir.1, height)] {
        if d.abs() < 1e-15 {
            if o < 0.0 || o > max {
                return None;
            }
            continue;
        }
        let (s0, s1) = ((0.0 - o) / d, (max - o) / d);
        lo = lo.max(s0.min(s1));
        hi = hi.min(s0.max(s1));
    }
    if !(hi - lo >= 1.0) {
        return None;
    }
    let clamp = |s: f64| {
        Pt2::new(
            (origin.x + s * dir.0).clamp(0.0, width),
            (origin.y + s * dir.1).clamp(0.0, height),
        )
    };
    let (a, b) = (clamp(lo), clamp(hi));
    let seg = if (a.x, a.y) <= (b.x, b.y) {
        LineSegment { p0: a, p1: b }
    } else {
        LineSegment { p0: b, p1: a }
    };
    (seg.length() >= 1.0).then_some(seg)
}

/// Step reward: `lambda_p` within `epsilon` pixels of the line (inclusive), else `lambda_n`.
pub fn epipolar_reward(distance: f64, cfg: &TrainConfig) -> f64 {
    if distance <= cfg.epsilon {
        cfg.lambda_p
    } else {
        cfg.lambda_n
    }
}

/// On-disk pose supervision: intrinsics of both views and the relative pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    #[serde(rename = "K1", with = "mat3_serde")]
    pub k1: Matrix3<f64>,
    #[serde(rename = "K2", with = "mat3_serde")]
    pub k2: Matrix3<f64>,
    #[serde(rename = "R", with = "mat3_serde")]
    pub r: Matrix3<f64>,
    pub t: [f64; 3],
}

impl PoseFile {
    pub fn new(k1: &Intrinsics, k2: &Intrinsics, pose: &RelativePose) -> Self {
        Self {
            k1: k1.matrix(),
            k2: k2.matrix(),
            r: pose.rotation,
            t: [pose.translation.x, pose.translation.y, pose.translation.z],
        }
    }

    pub fn intrinsics(&self) -> Result<(Intrinsics, Intrinsics)> {
        Ok((
            Intrinsics::from_matrix(&self.k1)?,
            Intrinsics::from_matrix(&self.k2)?,
        ))
    }

    pub fn pose(&self) -> Result<RelativePose> {
        RelativePose::new(self.r, Vector3::from(self.t))
    }

    pub fn fundamental(&self) -> Result<FundamentalMatrix> {
        let (k1, k2) = self.intrinsics()?;
        fundamental_from_pose(&k1, &k2, &self.pose()?)
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Row-major 3x3 matrices: written as a flat 9-array, read from either a
/// flat 9-array or nested rows.
mod mat3_serde {
    use nalgebra::Matrix3;
    use serde::{Deserialize, Deserializer, Serializer};

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Flat([f64; 9]),
        Rows([[f64; 3]; 3]),
    }

    pub fn serialize<S: Serializer>(m: &Matrix3<f64>, s: S) -> Result<S::Ok, S::Error> {
        let flat: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect();
        s.collect_seq(flat)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Matrix3<f64>, D::Error> {
        Ok(match Repr::deserialize(d)? {
            Repr::Flat(v) => Matrix3::from_row_slice(&v),
            Repr::Rows(r) => Matrix3::from_fn(|i, j| r[i][j]),
        })
    }
}

//! Quaternion and pose math: log/exp maps, relative-pose targets, absolute
//! pose recovery, error metrics, and robust averaging of pose estimates.
//!
//! Rotations are parameterized for regression as the quaternion logarithm,
//! a 3-vector `w` with `exp(w)` back on the unit sphere. All logs are taken
//! after canonicalizing to `w >= 0`, which resolves the q/-q double cover and
//! keeps log differences well defined.

/// Norm threshold below which log/exp fall back to their zero branch.
const LOG_BRANCH_EPS: f64 = 1e-12;

/// Unit quaternion `w + xi + yj + zk` with scalar part first.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        UnitQuaternion { w, x, y, z }
    }

    pub fn dot(&self, other: &UnitQuaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Quaternion logarithm: a length-3 rotation vector. The rotation angle it
/// encodes is `2 * norm()`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotVec(pub [f64; 3]);

impl RotVec {
    pub const ZERO: RotVec = RotVec([0.0; 3]);

    pub fn norm(&self) -> f64 {
        norm3(&self.0)
    }

    pub fn add(&self, other: &RotVec) -> RotVec {
        RotVec(add3(&self.0, &other.0))
    }

    pub fn sub(&self, other: &RotVec) -> RotVec {
        RotVec(sub3(&self.0, &other.0))
    }
}

/// Absolute camera pose: translation in meters (world frame) plus rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub t: [f64; 3],
    pub q: UnitQuaternion,
}

impl Pose {
    pub const IDENTITY: Pose = Pose {
        t: [0.0; 3],
        q: UnitQuaternion::IDENTITY,
    };
}

/// Relative pose on an ordered image pair (i, j): translation difference
/// `t_j - t_i` and quaternion-log difference `log(q_j) - log(q_i)`.
/// Doubles as the network's 6-vector prediction, split (dt, dw).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelPoseTarget {
    pub dt: [f64; 3],
    pub dw: [f64; 3],
}

impl RelPoseTarget {
    pub const ZERO: RelPoseTarget = RelPoseTarget {
        dt: [0.0; 3],
        dw: [0.0; 3],
    };
}

/// Normalizes to unit length and flips sign so the scalar part is
/// non-negative, picking one representative of the q/-q pair.
///
/// Panics if the input norm is zero or non-finite (contract violation).
pub fn canonicalize(q: UnitQuaternion) -> UnitQuaternion {
    let n = q.norm();
    assert!(n.is_finite() && n > 0.0, "canonicalize: degenerate quaternion norm {n}");
    let s = if q.w < 0.0 { -1.0 / n } else { 1.0 / n };
    UnitQuaternion::new(q.w * s, q.x * s, q.y * s, q.z * s)
}

/// Quaternion logarithm `(v/|v|) * acos(w)`, zero when the vector part
/// vanishes. Expects a unit quaternion; canonicalize first so the result
/// stays on the principal branch (norm <= pi/2).
pub fn quat_log(q: UnitQuaternion) -> RotVec {
    debug_assert!((q.norm() - 1.0).abs() < 1e-5, "quat_log expects unit norm");
    let vnorm = norm3(&[q.x, q.y, q.z]);
    if vnorm <= LOG_BRANCH_EPS {
        return RotVec::ZERO;
    }
    let scale = q.w.clamp(-1.0, 1.0).acos() / vnorm;
    RotVec([q.x * scale, q.y * scale, q.z * scale])
}

/// Quaternion exponential `[cos|w|, (w/|w|) sin|w|]`; identity near zero.
pub fn quat_exp(w: RotVec) -> UnitQuaternion {
    let n = w.norm();
    if n <= LOG_BRANCH_EPS {
        return UnitQuaternion::IDENTITY;
    }
    let s = n.sin() / n;
    UnitQuaternion::new(n.cos(), w.0[0] * s, w.0[1] * s, w.0[2] * s)
}

/// Relative-pose regression target for the ordered pair (i, j).
pub fn relative_target(p_i: &Pose, p_j: &Pose) -> RelPoseTarget {
    let w_i = quat_log(canonicalize(p_i.q));
    let w_j = quat_log(canonicalize(p_j.q));
    RelPoseTarget {
        dt: sub3(&p_j.t, &p_i.t),
        dw: w_j.sub(&w_i).0,
    }
}

/// Composes a known absolute pose with a relative pose estimate; the exact
/// inverse of [`relative_target`] while the log stays on the principal
/// branch.
pub fn recover_absolute(p_i: &Pose, rel: &RelPoseTarget) -> Pose {
    let w_i = quat_log(canonicalize(p_i.q));
    let w = w_i.add(&RotVec(rel.dw));
    Pose {
        t: add3(&p_i.t, &rel.dt),
        q: canonicalize(quat_exp(w)),
    }
}

/// Angle in degrees between two rotations; symmetric and invariant to the
/// sign of either argument.
///
/// Equivalent to `2 acos(min(1, |dot|))` but evaluated through the relative
/// quaternion and atan2, which stays accurate near zero where acos loses
/// every digit (and returns exactly 0 for q against q or -q).
pub fn rotation_error_deg(q_a: &UnitQuaternion, q_b: &UnitQuaternion) -> f64 {
    // conjugate(q_a) * q_b
    let w = q_a.w * q_b.w + q_a.x * q_b.x + q_a.y * q_b.y + q_a.z * q_b.z;
    let x = q_a.w * q_b.x - q_a.x * q_b.w - q_a.y * q_b.z + q_a.z * q_b.y;
    let y = q_a.w * q_b.y + q_a.x * q_b.z - q_a.y * q_b.w - q_a.z * q_b.x;
    let z = q_a.w * q_b.z - q_a.x * q_b.y + q_a.y * q_b.x - q_a.z * q_b.w;
    let vnorm = norm3(&[x, y, z]);
    2.0 * vnorm.atan2(w.abs()).to_degrees()
}

/// Geometric median of a point set by Weiszfeld iteration, starting from
/// the coordinatewise mean. Stops when the update step drops below 1e-9 or
/// after 100 iterations; distances are floored at 1e-12 so coinciding with
/// a data point is harmless.
///
/// Panics on an empty input (contract violation).
pub fn weiszfeld_median(points: &[[f64; 3]]) -> [f64; 3] {
    assert!(!points.is_empty(), "weiszfeld_median: empty input");
    let mut x = [0.0; 3];
    for p in points {
        x = add3(&x, p);
    }
    let inv = 1.0 / points.len() as f64;
    x = [x[0] * inv, x[1] * inv, x[2] * inv];

    for _ in 0..100 {
        let mut num = [0.0; 3];
        let mut den = 0.0;
        for p in points {
            let d = norm3(&sub3(&x, p)).max(1e-12);
            let w = 1.0 / d;
            num = add3(&num, &[p[0] * w, p[1] * w, p[2] * w]);
            den += w;
        }
        let next = [num[0] / den, num[1] / den, num[2] / den];
        let step = norm3(&sub3(&next, &x));
        x = next;
        if step < 1e-9 {
            break;
        }
    }
    x
}

/// Chordal mean of a set of rotations: sign-align every quaternion to the
/// first, sum componentwise, normalize, canonicalize. Falls back to the
/// first element if the aligned sum degenerates to zero.
///
/// Panics on an empty input (contract violation).
pub fn quaternion_mean(quats: &[UnitQuaternion]) -> UnitQuaternion {
    assert!(!quats.is_empty(), "quaternion_mean: empty input");
    let first = quats[0];
    let mut sum = [0.0; 4];
    for q in quats {
        let s = if q.dot(&first) < 0.0 { -1.0 } else { 1.0 };
        sum[0] += s * q.w;
        sum[1] += s * q.x;
        sum[2] += s * q.y;
        sum[3] += s * q.z;
    }
    let n = (sum[0] * sum[0] + sum[1] * sum[1] + sum[2] * sum[2] + sum[3] * sum[3]).sqrt();
    if n <= LOG_BRANCH_EPS {
        return canonicalize(first);
    }
    canonicalize(UnitQuaternion::new(sum[0], sum[1], sum[2], sum[3]))
}

fn add3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn sub3(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn norm3(a: &[f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

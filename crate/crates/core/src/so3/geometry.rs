use core::f64::consts::PI;
use rand::Rng;

use crate::error::{contract, Error, Result};
use crate::rng::normal;

/// Below this angle `exp` and `log` switch to Taylor expansions.
const SMALL_ANGLE: f64 = 1e-4;
/// `log` refuses rotations this close to a half turn.
pub const BRANCH_MARGIN: f64 = 1e-6;

/// Axis-angle coordinates of an element of so(3).
pub type Tangent = [f64; 3];

/// A 3x3 rotation matrix, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rot3 {
    m: [[f64; 3]; 3],
}

impl Default for Rot3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl Rot3 {
    pub const fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Checks orthonormality and orientation to `1e-9`.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let r = Self { m };
        if !r.is_valid(1e-9) {
            return Err(contract("matrix is not a rotation to 1e-9"));
        }
        Ok(r)
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 9 {
            return Err(Error::Dimension {
                context: "rotation",
                expected: 9,
                got: v.len(),
            });
        }
        Self::from_matrix([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn row_major(&self) -> [f64; 9] {
        let m = &self.m;
        [
            m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2],
        ]
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn rot_z(angle: f64) -> Self {
        exp_map([0.0, 0.0, angle])
    }

    pub fn transpose(&self) -> Self {
        let m = &self.m;
        Self {
            m: [
                [m[0][0], m[1][0], m[2][0]],
                [m[0][1], m[1][1], m[2][1]],
                [m[0][2], m[1][2], m[2][2]],
            ],
        }
    }

    pub fn mul(&self, other: &Self) -> Self {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Self { m: out }
    }

    pub fn apply(&self, v: [f64; 3]) -> [f64; 3] {
        core::array::from_fn(|i| (0..3).map(|k| self.m[i][k] * v[k]).sum())
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Largest entry of `|R^T R - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let p = self.transpose().mul(self);
        let mut e: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                e = e.max((p.m[i][j] - want).abs());
            }
        }
        e
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.m.iter().flatten().all(|v| v.is_finite())
            && self.orthonormality_error() <= tol
            && (self.det() - 1.0).abs() <= tol
    }

    /// Gram-Schmidt on the columns; keeps the orientation of a near-rotation.
    pub fn orthonormalize(&self) -> Self {
        let col = |j: usize| [self.m[0][j], self.m[1][j], self.m[2][j]];
        let unit = |v: [f64; 3]| {
            let n = libm::sqrt(dot(v, v));
            [v[0] / n, v[1] / n, v[2] / n]
        };
        let a = unit(col(0));
        let b0 = col(1);
        let p = dot(a, b0);
        let b = unit([b0[0] - p * a[0], b0[1] - p * a[1], b0[2] - p * a[2]]);
        let c = cross(a, b);
        Self {
            m: core::array::from_fn(|i| [a[i], b[i], c[i]]),
        }
    }

    /// Rotation angle in `[0, pi]`, computed without branch issues.
    pub fn angle(&self) -> f64 {
        let w = self.skew_part();
        let s = libm::sqrt(dot(w, w));
        let c = (self.m[0][0] + self.m[1][1] + self.m[2][2] - 1.0) / 2.0;
        libm::atan2(s, c)
    }

    /// `vee(R - R^T) / 2 = sin(theta) * axis`.
    fn skew_part(&self) -> [f64; 3] {
        let m = &self.m;
        [
            (m[2][1] - m[1][2]) / 2.0,
            (m[0][2] - m[2][0]) / 2.0,
            (m[1][0] - m[0][1]) / 2.0,
        ]
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(v: Tangent) -> f64 {
    libm::sqrt(dot(v, v))
}

pub fn hat(w: Tangent) -> [[f64; 3]; 3] {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

/// Rodrigues' formula, `exp(hat(w))`.
pub fn exp_map(w: Tangent) -> Rot3 {
    let th2 = dot(w, w);
    let th = libm::sqrt(th2);
    let (a, b) = if th < SMALL_ANGLE {
        (1.0 - th2 / 6.0, 0.5 - th2 / 24.0)
    } else {
        (libm::sin(th) / th, (1.0 - libm::cos(th)) / th2)
    };
    let k = hat(w);
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let k2: f64 = (0..3).map(|l| k[i][l] * k[l][j]).sum();
            m[i][j] = if i == j { 1.0 } else { 0.0 } + a * k[i][j] + b * k2;
        }
    }
    Rot3 { m }
}

/// Principal logarithm. Fails within [`BRANCH_MARGIN`] of a half turn, where
/// the axis sign is ambiguous.
pub fn log_map(r: &Rot3) -> Result<Tangent> {
    let th = r.angle();
    if th > PI - BRANCH_MARGIN {
        return Err(Error::Branch { angle: th });
    }
    let w = r.skew_part();
    let k = if th < SMALL_ANGLE {
        1.0 + th * th / 6.0
    } else {
        th / libm::sin(th)
    };
    Ok([w[0] * k, w[1] * k, w[2] * k])
}

/// `exp_{R0}(w) = R0 exp(w)`.
pub fn exp_at(base: &Rot3, w: Tangent) -> Rot3 {
    base.mul(&exp_map(w))
}

/// `log_{R0}(R1) = log(R0^T R1)`.
pub fn log_at(base: &Rot3, r: &Rot3) -> Result<Tangent> {
    log_map(&base.transpose().mul(r))
}

/// `R_t = exp_{R0}(t log_{R0}(R1))`; the endpoints are returned exactly.
pub fn geodesic(r0: &Rot3, r1: &Rot3, t: f64) -> Result<Rot3> {
    if !(0.0..=1.0).contains(&t) {
        return Err(contract("geodesic time must lie in [0, 1]"));
    }
    let w = log_at(r0, r1)?;
    Ok(if t == 0.0 {
        *r0
    } else if t == 1.0 {
        *r1
    } else {
        exp_at(r0, [t * w[0], t * w[1], t * w[2]])
    })
}

/// Angle of `R0^T R1`.
pub fn geodesic_distance(r0: &Rot3, r1: &Rot3) -> f64 {
    r0.transpose().mul(r1).angle()
}

/// Scaling of `log_{R_t}(R1)` in the conditional target field.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FieldConvention {
    /// `log_{R_t}(R1) / t`, as written for the flow-matching target.
    Paper,
    /// `log_{R_t}(R1) / (1 - t)`, the time derivative of the geodesic.
    Derivative,
}

/// Conditional target field `u_t(R_t | R0, R1)` in body coordinates.
pub fn target_vector_field(
    r_t: &Rot3,
    r1: &Rot3,
    t: f64,
    convention: FieldConvention,
) -> Result<Tangent> {
    let denom = match convention {
        FieldConvention::Paper => t,
        FieldConvention::Derivative => 1.0 - t,
    };
    if !(0.0..=1.0).contains(&t) {
        return Err(contract("field time must lie in [0, 1]"));
    }
    if denom == 0.0 {
        return Err(Error::Singularity { t });
    }
    let w = log_at(r_t, r1)?;
    Ok([w[0] / denom, w[1] / denom, w[2] / denom])
}

/// Haar-uniform rotation from a uniformly distributed unit quaternion.
pub fn sample_uniform_so3(rng: &mut impl Rng) -> Rot3 {
    loop {
        let q = [normal(rng), normal(rng), normal(rng), normal(rng)];
        let n = libm::sqrt(q.iter().map(|v| v * v).sum::<f64>());
        if n > 1e-12 {
            return quaternion_to_rot([q[0] / n, q[1] / n, q[2] / n, q[3] / n]);
        }
    }
}

/// `(w, x, y, z)` unit quaternion to matrix.
pub fn quaternion_to_rot(q: [f64; 4]) -> Rot3 {
    let [w, x, y, z] = q;
    Rot3 {
        m: [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn close(a: &Rot3, b: &Rot3, tol: f64) -> bool {
        a.row_major()
            .iter()
            .zip(b.row_major())
            .all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn exp_examples() {
        assert_eq!(exp_map([0.0; 3]), Rot3::identity());
        let r = exp_map([0.0, 0.0, PI / 2.0]);
        let col0 = [r.m[0][0], r.m[1][0], r.m[2][0]];
        assert!(col0[0].abs() < 1e-15 && (col0[1] - 1.0).abs() < 1e-15 && col0[2].abs() < 1e-15);
        let w = [0.4, -1.1, 0.7];
        let p = exp_map(w).mul(&exp_map([-w[0], -w[1], -w[2]]));
        assert!(close(&p, &Rot3::identity(), 1e-12));
    }

    #[test]
    fn log_examples() {
        assert_eq!(log_map(&Rot3::identity()).unwrap(), [0.0; 3]);
        let w = log_map(&Rot3::rot_z(0.3)).unwrap();
        assert!(w[0].abs() < 1e-15 && w[1].abs() < 1e-15 && (w[2] - 0.3).abs() < 1e-15);
        assert!(matches!(
            log_map(&Rot3::rot_z(PI)),
            Err(Error::Branch { .. })
        ));
        assert!(matches!(
            log_map(&Rot3::rot_z(PI - 5e-7)),
            Err(Error::Branch { .. })
        ));
        assert!(log_map(&Rot3::rot_z(PI - 1e-5)).is_ok());
    }

    #[test]
    fn small_angles_are_smooth() {
        for th in [1e-9, 5e-5, 1e-4, 2e-4] {
            let w = [th * 0.6, 0.0, th * 0.8];
            let back = log_map(&exp_map(w)).unwrap();
            for i in 0..3 {
                assert!((back[i] - w[i]).abs() < 1e-15, "{th}: {back:?}");
            }
        }
    }

    #[test]
    fn haar_samples_are_rotations() {
        let mut rng = seeded(1);
        for _ in 0..1000 {
            let r = sample_uniform_so3(&mut rng);
            assert!(r.is_valid(1e-12));
        }
    }
}

//! Random input perturbations: jitter, y-axis flip and rotation about z,
//! composed into a single 3x3 matrix applied to points, boxes and labels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Aabb, PointCloud};
use crate::linalg::{self, Mat3, Vec3, MAT3_IDENTITY};

/// The sampled parameters of one perturbation: a 3x3 additive jitter,
/// a flip sign in `{+1, -1}` and a rotation angle in `[0, 2*pi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationSpec {
    pub jitter: Mat3,
    pub flip_sign: f64,
    pub theta: f64,
}

impl PerturbationSpec {
    /// The do-nothing perturbation.
    pub fn identity() -> Self {
        Self {
            jitter: [[0.0; 3]; 3],
            flip_sign: 1.0,
            theta: 0.0,
        }
    }

    /// Sample a spec: jitter entries uniform in `[-amplitude, amplitude]`,
    /// a fair flip, and theta = 2*pi*delta with delta uniform in `[0,1)`.
    pub fn sample(rng: &mut impl Rng, jitter_amplitude: f64) -> Self {
        let mut jitter = [[0.0; 3]; 3];
        for row in &mut jitter {
            for v in row.iter_mut() {
                *v = if jitter_amplitude > 0.0 {
                    rng.random_range(-jitter_amplitude..=jitter_amplitude)
                } else {
                    0.0
                };
            }
        }
        let flip_sign = if rng.random_range(0..2) == 0 { 1.0 } else { -1.0 };
        let theta = 2.0 * std::f64::consts::PI * rng.random_range(0.0..1.0);
        Self {
            jitter,
            flip_sign,
            theta,
        }
    }

    /// One-line text record: `theta flip j00 j01 ... j22`.
    pub fn to_record(&self) -> String {
        let mut out = format!("{} {}", self.theta, self.flip_sign);
        for row in &self.jitter {
            for v in row {
                out.push(' ');
                out.push_str(&v.to_string());
            }
        }
        out
    }

    /// Parse the record produced by [`PerturbationSpec::to_record`].
    pub fn from_record(record: &str) -> Result<Self> {
        let fields: Vec<&str> = record.split_whitespace().collect();
        if fields.len() != 11 {
            return Err(Error::Config(format!(
                "perturbation record needs 11 fields, got {}",
                fields.len()
            )));
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number '{s}' in perturbation record")))
        };
        let theta = parse(fields[0])?;
        let flip_sign = parse(fields[1])?;
        if flip_sign != 1.0 && flip_sign != -1.0 {
            return Err(Error::Config(format!(
                "flip sign must be +1 or -1, got {flip_sign}"
            )));
        }
        let mut jitter = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                jitter[i][j] = parse(fields[2 + 3 * i + j])?;
            }
        }
        Ok(Self {
            jitter,
            flip_sign,
            theta,
        })
    }
}

/// Composed perturbation. `matrix` carries the full jitter+flip+rotation
/// transform; `rigid` is the jitter-free flip+rotation part used for
/// normals, which must stay unit length.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbationMatrix {
    pub matrix: Mat3,
    pub rigid: Mat3,
}

impl PerturbationMatrix {
    pub fn identity() -> Self {
        Self {
            matrix: MAT3_IDENTITY,
            rigid: MAT3_IDENTITY,
        }
    }
}

/// Rotation about the z-axis:
/// rows `[cos t, sin t, 0], [-sin t, cos t, 0], [0, 0, 1]`.
pub fn rotation_matrix(theta: f64) -> Mat3 {
    let (s, c) = theta.sin_cos();
    [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Compose the perturbation in the fixed order jitter -> flip -> rotate:
/// start from `I + J`, multiply the (0,0) element by the flip sign, then
/// right-multiply by the rotation.
pub fn compose_perturbation(spec: &PerturbationSpec) -> PerturbationMatrix {
    let rot = rotation_matrix(spec.theta);

    let mut m = MAT3_IDENTITY;
    for (row, jitter_row) in m.iter_mut().zip(&spec.jitter) {
        for (v, j) in row.iter_mut().zip(jitter_row) {
            *v += j;
        }
    }
    m[0][0] *= spec.flip_sign;
    let matrix = linalg::mat_mul(&m, &rot);

    let mut rigid = MAT3_IDENTITY;
    rigid[0][0] *= spec.flip_sign;
    let rigid = linalg::mat_mul(&rigid, &rot);

    PerturbationMatrix { matrix, rigid }
}

/// Transform a cloud: positions through the full matrix (row-vector
/// convention `p' = p * M`), colors untouched, normals through the rigid
/// part and renormalized.
pub fn apply_to_points(m: &PerturbationMatrix, cloud: &PointCloud) -> PointCloud {
    let positions: Vec<Vec3> = cloud
        .positions
        .iter()
        .map(|&p| linalg::row_mul(p, &m.matrix))
        .collect();
    let normals: Vec<Vec3> = cloud
        .normals
        .iter()
        .map(|&n| linalg::normalize(linalg::row_mul(n, &m.rigid)).unwrap_or([0.0, 0.0, 1.0]))
        .collect();
    PointCloud {
        positions,
        colors: cloud.colors.clone(),
        normals,
    }
}

/// Transform all 8 vertices and return their tight axis-aligned box.
pub fn apply_to_box(m: &PerturbationMatrix, aabb: &Aabb) -> Aabb {
    let verts = aabb.vertices();
    let transformed = verts.iter().map(|&v| linalg::row_mul(v, &m.matrix));
    Aabb::tight(transformed).expect("eight vertices are never empty")
}

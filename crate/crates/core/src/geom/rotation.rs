use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result, NUM_JOINTS, ROT_DIM};

/// The first two columns of a rotation matrix, column-major: `(r00, r10, r20, r01, r11, r21)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D(pub [f64; ROT_DIM]);

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// Rodrigues' formula for an axis-angle vector (radians).
pub fn axis_angle_to_matrix(v: [f64; 3]) -> Result<Matrix3<f64>> {
    if v.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "axis-angle vector must be finite, got {v:?}"
        )));
    }
    let v = Vector3::from(v);
    let theta = v.norm();
    if theta == 0.0 {
        return Ok(Matrix3::identity());
    }
    let k = v / theta;
    let skew = Matrix3::new(0.0, -k.z, k.y, k.z, 0.0, -k.x, -k.y, k.x, 0.0);
    Ok(Matrix3::identity() + skew * theta.sin() + skew * skew * (1.0 - theta.cos()))
}

pub fn matrix_to_6d(r: &Matrix3<f64>) -> Rotation6D {
    Rotation6D([
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ])
}

/// Gram-Schmidt recovery of a proper rotation from its 6D encoding.
pub fn six_d_to_matrix(d: &Rotation6D) -> Result<Matrix3<f64>> {
    const EPS: f64 = 1e-8;
    if !d.is_finite() {
        return Err(Error::DegenerateRotation(format!(
            "non-finite 6D input {:?}",
            d.0
        )));
    }
    let a1 = Vector3::new(d.0[0], d.0[1], d.0[2]);
    let a2 = Vector3::new(d.0[3], d.0[4], d.0[5]);
    let n1 = a1.norm();
    if n1 <= EPS {
        return Err(Error::DegenerateRotation("first column is zero".into()));
    }
    let c1 = a1 / n1;
    let ortho = a2 - c1 * c1.dot(&a2);
    let n2 = ortho.norm();
    if n2 <= EPS {
        return Err(Error::DegenerateRotation(
            "second column is parallel to the first".into(),
        ));
    }
    let c2 = ortho / n2;
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// One pose: a parent-relative rotation per joint.
#[derive(Debug, Clone, PartialEq)]
pub struct Pose(pub [Rotation6D; NUM_JOINTS]);

impl Pose {
    pub fn identity() -> Self {
        Pose([Rotation6D::IDENTITY; NUM_JOINTS])
    }

    /// Reads a joint-major frame vector of `NUM_JOINTS * 6` scalars.
    pub fn from_frame(frame: &[f32]) -> Result<Self> {
        if frame.len() != NUM_JOINTS * ROT_DIM {
            return Err(Error::shape(
                "pose_from_frame",
                &[frame.len()],
                &[NUM_JOINTS * ROT_DIM],
            ));
        }
        let mut joints = [Rotation6D::IDENTITY; NUM_JOINTS];
        for (j, chunk) in frame.chunks_exact(ROT_DIM).enumerate() {
            for (dst, &src) in joints[j].0.iter_mut().zip(chunk) {
                *dst = src as f64;
            }
        }
        Ok(Pose(joints))
    }

    pub fn to_frame(&self) -> Vec<f32> {
        self.0
            .iter()
            .flat_map(|r| r.0.iter().map(|&v| v as f32))
            .collect()
    }
}

/// Componentwise linear blend in 6D space; no re-orthonormalisation.
pub fn interpolate_pose(a: &Pose, b: &Pose, t: f64) -> Result<Pose> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "interpolation parameter must lie in [0, 1], got {t}"
        )));
    }
    if t == 1.0 {
        return Ok(b.clone());
    }
    let mut out = a.clone();
    for (ra, rb) in out.0.iter_mut().zip(b.0.iter()) {
        for (x, &y) in ra.0.iter_mut().zip(rb.0.iter()) {
            *x += t * (y - *x);
        }
    }
    Ok(out)
}

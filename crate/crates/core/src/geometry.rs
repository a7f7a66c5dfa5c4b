//! Rotations, rigid poses and pinhole projection.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::Vec3;

pub type Mat3 = Matrix3<f64>;

const DEGENERACY_EPS: f64 = 1e-12;

/// 6D encoding of the identity rotation.
pub const IDENTITY_R6: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

/// Decodes a 6D rotation (first two columns, unnormalized) by Gram-Schmidt.
///
/// `r6 = (a1, a2)`: the first column is `a1 / |a1|`, the second is the
/// normalized part of `a2` orthogonal to it, the third their cross product.
pub fn rot6d_to_rotation(r6: &[f64; 6]) -> Result<Mat3> {
    let a1 = Vec3::new(r6[0], r6[1], r6[2]);
    let a2 = Vec3::new(r6[3], r6[4], r6[5]);
    if !r6.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateRotation("non-finite component"));
    }
    let n1 = a1.norm();
    if n1 < DEGENERACY_EPS {
        return Err(Error::DegenerateRotation("first column is zero"));
    }
    let b1 = a1 / n1;
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();
    if n2 < DEGENERACY_EPS * a2.norm().max(1.0) {
        return Err(Error::DegenerateRotation(
            "second column is zero or parallel to the first",
        ));
    }
    let b2 = u2 / n2;
    let b3 = b1.cross(&b2);
    Ok(Mat3::from_columns(&[b1, b2, b3]))
}

/// Pulls a gradient with respect to the decoded matrix back onto the six
/// raw parameters.
pub fn rot6d_backward(r6: &[f64; 6], d_rot: &Mat3) -> Result<[f64; 6]> {
    let a1 = Vec3::new(r6[0], r6[1], r6[2]);
    let a2 = Vec3::new(r6[3], r6[4], r6[5]);
    let r = rot6d_to_rotation(r6)?;
    let (b1, b2) = (r.column(0).into_owned(), r.column(1).into_owned());
    let n1 = a1.norm();
    let u2 = a2 - b1 * b1.dot(&a2);
    let n2 = u2.norm();

    let g3 = d_rot.column(2).into_owned();
    let mut g1 = d_rot.column(0).into_owned() + b2.cross(&g3);
    let g2 = d_rot.column(1).into_owned() + g3.cross(&b1);

    let gu = (g2 - b2 * b2.dot(&g2)) / n2;
    let ga2 = gu - b1 * b1.dot(&gu);
    g1 -= gu * b1.dot(&a2) + a2 * b1.dot(&gu);
    let ga1 = (g1 - b1 * b1.dot(&g1)) / n1;
    Ok([ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z])
}

pub fn rotation_to_rot6d(r: &Mat3) -> [f64; 6] {
    [
        r[(0, 0)],
        r[(1, 0)],
        r[(2, 0)],
        r[(0, 1)],
        r[(1, 1)],
        r[(2, 1)],
    ]
}

/// Rotation from intrinsic x-y-z Euler angles (radians): `Rz * Ry * Rx`.
pub fn euler_xyz(rx: f64, ry: f64, rz: f64) -> Mat3 {
    let (sx, cx) = rx.sin_cos();
    let (sy, cy) = ry.sin_cos();
    let (sz, cz) = rz.sin_cos();
    let mx = Mat3::new(1.0, 0.0, 0.0, 0.0, cx, -sx, 0.0, sx, cx);
    let my = Mat3::new(cy, 0.0, sy, 0.0, 1.0, 0.0, -sy, 0.0, cy);
    let mz = Mat3::new(cz, -sz, 0.0, sz, cz, 0.0, 0.0, 0.0, 1.0);
    mz * my * mx
}

/// Angle of the relative rotation `a^T b`, in radians.
pub fn geodesic_distance(a: &Mat3, b: &Mat3) -> f64 {
    let c = ((a.transpose() * b).trace() - 1.0) / 2.0;
    c.clamp(-1.0, 1.0).acos()
}

/// Global rigid transform `p -> R p + t`, rotation stored in 6D form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub r6: [f64; 6],
    pub t: [f64; 3],
}

impl Default for RigidPose {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidPose {
    pub fn identity() -> Self {
        Self {
            r6: IDENTITY_R6,
            t: [0.0; 3],
        }
    }

    pub fn from_rotation(r: &Mat3, t: Vec3) -> Self {
        Self {
            r6: rotation_to_rot6d(r),
            t: [t.x, t.y, t.z],
        }
    }

    pub fn rotation(&self) -> Result<Mat3> {
        rot6d_to_rotation(&self.r6)
    }

    pub fn translation(&self) -> Vec3 {
        Vec3::new(self.t[0], self.t[1], self.t[2])
    }

    pub fn inverse(&self) -> Result<Self> {
        let rt = self.rotation()?.transpose();
        Ok(Self::from_rotation(&rt, -(rt * self.translation())))
    }

    /// `self` applied after `first`.
    pub fn compose(&self, first: &RigidPose) -> Result<Self> {
        let (r2, r1) = (self.rotation()?, first.rotation()?);
        Ok(Self::from_rotation(
            &(r2 * r1),
            r2 * first.translation() + self.translation(),
        ))
    }
}

pub fn apply_rigid(points: &[Vec3], pose: &RigidPose) -> Result<Vec<Vec3>> {
    let r = pose.rotation()?;
    let t = pose.translation();
    Ok(points.iter().map(|p| r * p + t).collect())
}

/// Pinhole camera. The extrinsic maps world points into the camera frame,
/// where +z looks forward and image y grows downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// World-to-camera rotation, row-major.
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Default for Camera {
    /// 256x256 image, camera 5 units in front of the model origin looking
    /// back along -z.
    fn default() -> Self {
        Self {
            fx: 400.0,
            fy: 400.0,
            cx: 128.0,
            cy: 128.0,
            rotation: [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
            translation: [0.0, 0.0, 5.0],
        }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        let r = self.rotation_matrix();
        let err = (r.transpose() * r - Mat3::identity()).abs().max();
        if err > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidCamera(
                "extrinsic rotation is not orthonormal".into(),
            ));
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        let r = &self.rotation;
        Mat3::new(
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        )
    }

    pub fn translation_vec(&self) -> Vec3 {
        Vec3::new(
            self.translation[0],
            self.translation[1],
            self.translation[2],
        )
    }

    pub fn world_to_camera(&self, points: &[Vec3]) -> Vec<Vec3> {
        let r = self.rotation_matrix();
        let t = self.translation_vec();
        points.iter().map(|p| r * p + t).collect()
    }

    pub fn project_world(&self, points: &[Vec3]) -> Result<Vec<[f64; 2]>> {
        project(&self.world_to_camera(points), self)
    }
}

/// Perspective projection of camera-frame points to pixels.
pub fn project(points: &[Vec3], cam: &Camera) -> Result<Vec<[f64; 2]>> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            if !(p.z > 0.0) {
                return Err(Error::BehindCamera { index, z: p.z });
            }
            Ok([cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy])
        })
        .collect()
}

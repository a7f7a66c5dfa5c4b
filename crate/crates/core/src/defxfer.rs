//! Deformation transfer between meshes that share a topology.
//!
//! Each source blendshape is described by its per-triangle deformation
//! gradients relative to the source neutral. The target shape is the mesh
//! whose gradients, relative to the target neutral, match those in least
//! squares. Source and target are first brought into a common frame by a
//! similarity (Umeyama) alignment, so gradients are compared in the target's
//! orientation.
//!
//! Each triangle gets a fourth vertex `v1 + n / sqrt(|n|)` (`n = e1 x e2`) so
//! its edge frame is invertible. The fourth vertices of the unknown mesh are
//! eliminated in closed form, leaving one sparse symmetric system over the
//! vertex positions, shared by x, y and z. Vertex 0 is pinned to remove the
//! translation null space, and the system is solved by Jacobi-preconditioned
//! conjugate gradients.

use nalgebra::{Matrix3, SVD};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Mat3;
use crate::mesh::{Mesh, Vec3};
use crate::rig::BlendshapeRig;

/// Minimum triangle area accepted as a rest frame.
pub const MIN_AREA: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TransferOptions {
    /// Relative residual of the normal equations at which CG stops.
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for TransferOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iters: 5000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Edge frame `[e1, e2, v4 - v1]` of a triangle.
pub fn triangle_frame(tri: &[Vec3; 3]) -> Result<Mat3> {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let n = e1.cross(&e2);
    let area = 0.5 * n.norm();
    if !(area > MIN_AREA) {
        return Err(Error::DegenerateTriangle { face: 0, area });
    }
    let e3 = n / n.norm().sqrt();
    Ok(Mat3::from_columns(&[e1, e2, e3]))
}

fn frame_inverse(tri: &[Vec3; 3], face: usize) -> Result<Mat3> {
    let w = triangle_frame(tri).map_err(|e| match e {
        Error::DegenerateTriangle { area, .. } => Error::DegenerateTriangle { face, area },
        other => other,
    })?;
    w.try_inverse()
        .ok_or(Error::DegenerateTriangle { face, area: 0.0 })
}

/// Affine map carrying the rest triangle's edge frame onto the deformed one.
pub fn triangle_gradient(rest: &[Vec3; 3], deformed: &[Vec3; 3]) -> Result<Mat3> {
    let winv = frame_inverse(rest, 0)?;
    let d = triangle_frame_unchecked(deformed);
    Ok(d * winv)
}

fn triangle_frame_unchecked(tri: &[Vec3; 3]) -> Mat3 {
    let e1 = tri[1] - tri[0];
    let e2 = tri[2] - tri[0];
    let n = e1.cross(&e2);
    let len = n.norm();
    let e3 = if len > 0.0 {
        n / len.sqrt()
    } else {
        Vec3::zeros()
    };
    Mat3::from_columns(&[e1, e2, e3])
}

fn tri(mesh: &Mesh, f: usize) -> [Vec3; 3] {
    let [a, b, c] = mesh.faces[f];
    [mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]]
}

/// Per-face gradients of `deformed` relative to `rest`.
pub fn gradient_field(rest: &Mesh, deformed: &Mesh) -> Result<Vec<Mat3>> {
    if !rest.same_topology(deformed) {
        return Err(Error::TopologyMismatch(
            "rest and deformed meshes differ".into(),
        ));
    }
    (0..rest.faces.len())
        .map(|f| Ok(triangle_frame_unchecked(&tri(deformed, f)) * frame_inverse(&tri(rest, f), f)?))
        .collect()
}

/// Least-squares similarity `dst ~ scale * R * src + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Similarity {
    pub rotation: Mat3,
    pub scale: f64,
    pub translation: Vec3,
}

pub fn similarity_alignment(src: &[Vec3], dst: &[Vec3]) -> Similarity {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vec3>() / n;
    let mu_d = dst.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_s = 0.0;
    for (s, d) in src.iter().zip(dst) {
        let (cs, cd) = (s - mu_s, d - mu_d);
        cov += cd * cs.transpose();
        var_s += cs.norm_squared();
    }
    cov /= n;
    var_s /= n;
    let svd = SVD::new(cov, true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = Mat3::identity();
    if (u * vt).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let rotation = u * fix * vt;
    let scale = if var_s > 0.0 {
        (Mat3::from_diagonal(&svd.singular_values) * fix).trace() / var_s
    } else {
        1.0
    };
    Similarity {
        rotation,
        scale,
        translation: mu_d - rotation * mu_s * scale,
    }
}

/// Compressed sparse rows of a symmetric matrix.
#[derive(Debug, Clone)]
struct Csr {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    fn from_triplets(n: usize, mut t: Vec<(usize, usize, f64)>) -> Self {
        t.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut last = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            row_ptr,
            cols,
            vals,
        }
    }

    fn mul(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.cols[k]];
            }
            *yr = acc;
        }
    }

    fn diagonal(&self) -> Vec<f64> {
        (0..self.row_ptr.len() - 1)
            .map(|r| {
                (self.row_ptr[r]..self.row_ptr[r + 1])
                    .find(|&k| self.cols[k] == r)
                    .map_or(0.0, |k| self.vals[k])
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Jacobi-preconditioned CG on an SPD system, starting from `x`.
fn conjugate_gradient(
    a: &Csr,
    b: &[f64],
    x: &mut [f64],
    opts: &TransferOptions,
) -> Result<CgStats> {
    let n = b.len();
    let inv_diag: Vec<f64> = a
        .diagonal()
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let b_norm = dot(b, b).sqrt();
    let mut r = vec![0.0; n];
    a.mul(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut rel = dot(&r, &r).sqrt() / b_norm;
    if rel <= opts.tolerance {
        return Ok(CgStats {
            iterations: 0,
            relative_residual: rel,
        });
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=opts.max_iters {
        a.mul(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rel = dot(&r, &r).sqrt() / b_norm;
        if rel <= opts.tolerance {
            return Ok(CgStats {
                iterations: it,
                relative_residual: rel,
            });
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::CgNotConverged {
        iterations: opts.max_iters,
        residual: rel,
    })
}

/// Least-squares gradient-matching system for one target neutral. Built
/// once and reused for every shape transferred onto that neutral.
#[derive(Debug, Clone)]
pub struct TransferSystem {
    target: Mesh,
    /// Per face: rows `h0 = P g0`, `h1 = P g1` and the projector `P` that
    /// removes the fourth-vertex direction.
    face_ops: Vec<(Vec3, Vec3, Mat3)>,
    normal: Csr,
    anchor: usize,
}

impl TransferSystem {
    pub fn new(target: &Mesh) -> Result<Self> {
        target.validate()?;
        let n = target.vertices.len();
        if n < 2 {
            return Err(Error::InvalidMesh(
                "transfer needs at least two vertices".into(),
            ));
        }
        let anchor = 0;
        let mut face_ops = Vec::with_capacity(target.faces.len());
        let mut trip = Vec::with_capacity(target.faces.len() * 9);
        for (f, face) in target.faces.iter().enumerate() {
            let winv = frame_inverse(&tri(target, f), f)?;
            let g: [Vec3; 3] = std::array::from_fn(|m| winv.row(m).transpose());
            let p = Mat3::identity() - g[2] * g[2].transpose() / g[2].norm_squared();
            let (h0, h1) = (p * g[0], p * g[1]);
            // Coefficients of x_i, x_j, x_l in the three residual rows.
            let coef: [Vec3; 3] = [-(h0 + h1), h0, h1];
            for a in 0..3 {
                for b in 0..3 {
                    let (va, vb) = (face[a], face[b]);
                    if va == anchor || vb == anchor {
                        continue;
                    }
                    trip.push((
                        free_index(va, anchor),
                        free_index(vb, anchor),
                        coef[a].dot(&coef[b]),
                    ));
                }
            }
            face_ops.push((h0, h1, p));
        }
        let normal = Csr::from_triplets(n - 1, trip);
        if let Some(r) = normal.diagonal().iter().position(|&d| d <= 0.0) {
            let v = if r >= anchor { r + 1 } else { r };
            return Err(Error::InvalidMesh(format!(
                "vertex {v} is not referenced by any face"
            )));
        }
        Ok(Self {
            target: target.clone(),
            face_ops,
            normal,
            anchor,
        })
    }

    pub fn anchor(&self) -> usize {
        self.anchor
    }

    /// Solves for the vertex positions whose gradients best match
    /// `gradients`, with the anchor vertex held at `anchor_pos`. `guess`
    /// seeds the iteration.
    pub fn solve(
        &self,
        gradients: &[Mat3],
        anchor_pos: Vec3,
        guess: &[Vec3],
        opts: &TransferOptions,
    ) -> Result<(Vec<Vec3>, CgStats)> {
        let n = self.target.vertices.len();
        if gradients.len() != self.face_ops.len() || guess.len() != n {
            return Err(Error::TopologyMismatch(
                "gradient field / guess size".into(),
            ));
        }
        let mut out = vec![Vec3::zeros(); n];
        out[self.anchor] = anchor_pos;
        let mut worst = CgStats {
            iterations: 0,
            relative_residual: 0.0,
        };
        for k in 0..3 {
            // rhs = A^T b - A^T_{:,anchor} x_anchor over the free vertices.
            let mut rhs = vec![0.0; n - 1];
            for (f, face) in self.target.faces.iter().enumerate() {
                let (h0, h1, p) = &self.face_ops[f];
                let target_row = p * gradients[f].row(k).transpose();
                let coef: [Vec3; 3] = [-(h0 + h1), *h0, *h1];
                let anchored: Vec3 = face
                    .iter()
                    .zip(&coef)
                    .filter(|(&v, _)| v == self.anchor)
                    .map(|(_, c)| c * anchor_pos[k])
                    .sum();
                let b = target_row - anchored;
                for (a, &v) in face.iter().enumerate() {
                    if v != self.anchor {
                        rhs[free_index(v, self.anchor)] += coef[a].dot(&b);
                    }
                }
            }
            let mut x: Vec<f64> = (0..n)
                .filter(|&v| v != self.anchor)
                .map(|v| guess[v][k])
                .collect();
            let stats = conjugate_gradient(&self.normal, &rhs, &mut x, opts)?;
            worst.iterations = worst.iterations.max(stats.iterations);
            worst.relative_residual = worst.relative_residual.max(stats.relative_residual);
            for v in 0..n {
                if v != self.anchor {
                    out[v][k] = x[free_index(v, self.anchor)];
                }
            }
        }
        Ok((out, worst))
    }
}

fn free_index(v: usize, anchor: usize) -> usize {
    if v > anchor {
        v - 1
    } else {
        v
    }
}

/// A source-to-target retargeting context: the aligned frame plus the
/// prepared target system.
#[derive(Debug, Clone)]
pub struct Transfer<'a> {
    src_neutral: &'a Mesh,
    system: TransferSystem,
    align: Similarity,
    opts: TransferOptions,
}

impl<'a> Transfer<'a> {
    pub fn new(src_neutral: &'a Mesh, tgt_neutral: &Mesh, opts: TransferOptions) -> Result<Self> {
        if !src_neutral.same_topology(tgt_neutral) {
            return Err(Error::TopologyMismatch(
                "source and target neutrals must share vertex count and faces".into(),
            ));
        }
        src_neutral.validate()?;
        let system = TransferSystem::new(tgt_neutral)?;
        let align = similarity_alignment(&src_neutral.vertices, &tgt_neutral.vertices);
        Ok(Self {
            src_neutral,
            system,
            align,
            opts,
        })
    }

    pub fn alignment(&self) -> &Similarity {
        &self.align
    }

    pub fn transfer(&self, src_shape: &Mesh) -> Result<(Mesh, CgStats)> {
        if !src_shape.same_topology(self.src_neutral) {
            return Err(Error::TopologyMismatch(
                "source shape differs from source neutral".into(),
            ));
        }
        let r = self.align.rotation;
        let rt = r.transpose();
        let grads: Vec<Mat3> = gradient_field(self.src_neutral, src_shape)?
            .into_iter()
            .map(|g| r * g * rt)
            .collect();
        let target = &self.system.target;
        let sr = r * self.align.scale;
        let guess: Vec<Vec3> = target
            .vertices
            .iter()
            .zip(&self.src_neutral.vertices)
            .zip(&src_shape.vertices)
            .map(|((t, n), s)| t + sr * (s - n))
            .collect();
        let a = self.system.anchor();
        let (verts, stats) = self.system.solve(&grads, guess[a], &guess, &self.opts)?;
        Ok((target.with_vertices(verts)?, stats))
    }
}

/// Retargets one blendshape onto a new neutral with default options.
pub fn transfer_blendshape(
    src_neutral: &Mesh,
    src_shape: &Mesh,
    tgt_neutral: &Mesh,
) -> Result<Mesh> {
    Ok(
        Transfer::new(src_neutral, tgt_neutral, TransferOptions::default())?
            .transfer(src_shape)?
            .0,
    )
}

/// Retargets every shape of `template` onto `tgt_neutral`. Shapes are
/// solved in parallel; the result does not depend on the thread count.
pub fn transfer_rig(template: &BlendshapeRig, tgt_neutral: &Mesh) -> Result<BlendshapeRig> {
    transfer_rig_with(template, tgt_neutral, TransferOptions::default())
}

pub fn transfer_rig_with(
    template: &BlendshapeRig,
    tgt_neutral: &Mesh,
    opts: TransferOptions,
) -> Result<BlendshapeRig> {
    let ctx = Transfer::new(&template.neutral, tgt_neutral, opts)?;
    let shapes = template
        .shapes
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            ctx.transfer(s)
                .map(|(m, _)| m)
                .map_err(|e| Error::ShapeTransfer {
                    name: template.names.name(i).to_string(),
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    BlendshapeRig::new(
        tgt_neutral.clone(),
        shapes,
        template.names.clone(),
        template.landmarks.clone(),
    )
}

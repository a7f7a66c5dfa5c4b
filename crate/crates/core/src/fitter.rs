//! Recovery of blendshape coefficients and rigid pose from landmarks.
//!
//! The 61 parameters are 52 slack coefficients, a 6D rotation and a
//! translation. Slack values are unconstrained during optimization, pulled
//! into `[0, 1]` by a one-sided quadratic penalty and clamped at the end.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rot6d_backward, rot6d_to_rotation, Camera, Mat3, RigidPose, IDENTITY_R6};
use crate::mesh::{centroid, Vec3};
use crate::names::NUM_BLENDSHAPES;
use crate::rig::{BlendshapeRig, CoefficientVector, Dim, LandmarkBasis, LandmarkSet};

pub const NUM_PARAMS: usize = NUM_BLENDSHAPES + 9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum TargetSpace {
    /// Targets are 3D landmarks in model space.
    #[default]
    Model3d,
    /// Targets are pixel coordinates seen through this camera.
    Projected2d(Camera),
}

impl TargetSpace {
    pub fn dim(&self) -> Dim {
        match self {
            TargetSpace::Model3d => Dim::Three,
            TargetSpace::Projected2d(_) => Dim::Two,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub lbfgs_memory: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub penalty_weight: f64,
    pub target_space: TargetSpace,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            lbfgs_memory: 10,
            max_iters: 200,
            grad_tol: 1e-6,
            penalty_weight: 10.0,
            target_space: TargetSpace::Model3d,
        }
    }
}

impl FitOptions {
    pub fn validate(&self) -> Result<()> {
        if self.lbfgs_memory < 1 {
            return Err(Error::Config("lbfgs_memory must be at least 1".into()));
        }
        if !(self.grad_tol > 0.0) {
            return Err(Error::Config("grad_tol must be positive".into()));
        }
        if !(self.penalty_weight >= 0.0) || !self.penalty_weight.is_finite() {
            return Err(Error::Config(
                "penalty_weight must be finite and non-negative".into(),
            ));
        }
        if let TargetSpace::Projected2d(cam) = &self.target_space {
            cam.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub coefficients: CoefficientVector,
    pub pose: RigidPose,
    pub final_objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub pre_clip_coefficients: Vec<f64>,
}

/// The fitting objective for one target, with the rig reduced to its
/// landmark basis.
#[derive(Debug, Clone)]
pub struct FitProblem {
    neutral: Vec<Vec3>,
    deltas: Vec<Vec<Vec3>>,
    /// 3D targets, or normalized image coordinates for 2D targets.
    target: Vec<[f64; 3]>,
    opts: FitOptions,
}

impl FitProblem {
    pub fn new(basis: &LandmarkBasis, target: &LandmarkSet, opts: FitOptions) -> Result<Self> {
        opts.validate()?;
        if target.dim() != opts.target_space.dim() {
            return Err(Error::DimensionMismatch(format!(
                "target is {}D but the fit expects {}D",
                target.dim().stride(),
                opts.target_space.dim().stride()
            )));
        }
        if target.len() != basis.len() {
            return Err(Error::DimensionMismatch(format!(
                "target has {} landmarks, rig has {}",
                target.len(),
                basis.len()
            )));
        }
        if basis.shapes.len() != NUM_BLENDSHAPES {
            return Err(Error::CoefficientCount {
                expected: NUM_BLENDSHAPES,
                got: basis.shapes.len(),
            });
        }
        let target = (0..target.len())
            .map(|i| {
                let p = target.point(i);
                match &opts.target_space {
                    TargetSpace::Model3d => [p[0], p[1], p[2]],
                    TargetSpace::Projected2d(c) => {
                        [(p[0] - c.cx) / c.fx, (p[1] - c.cy) / c.fy, 0.0]
                    }
                }
            })
            .collect();
        Ok(Self {
            neutral: basis.neutral.clone(),
            deltas: basis.deltas(),
            target,
            opts,
        })
    }

    pub fn options(&self) -> &FitOptions {
        &self.opts
    }

    fn penalty(&self, s: &[f64], grad: &mut [f64]) -> f64 {
        let lam = self.opts.penalty_weight;
        let mut value = 0.0;
        for (g, &si) in grad.iter_mut().zip(s) {
            let over = if si < 0.0 {
                si
            } else if si > 1.0 {
                si - 1.0
            } else {
                0.0
            };
            value += lam * over * over;
            *g += 2.0 * lam * over;
        }
        value
    }

    /// Objective value and analytic gradient at `params`.
    pub fn evaluate(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        if params.len() != NUM_PARAMS {
            return Err(Error::DimensionMismatch(format!(
                "expected {NUM_PARAMS} parameters, got {}",
                params.len()
            )));
        }
        let s = &params[..NUM_BLENDSHAPES];
        let r6: [f64; 6] = params[NUM_BLENDSHAPES..NUM_BLENDSHAPES + 6]
            .try_into()
            .unwrap();
        let t = Vec3::new(params[58], params[59], params[60]);
        let rot = rot6d_to_rotation(&r6)?;

        let mut grad = vec![0.0; NUM_PARAMS];
        let mut value = 0.0;
        let mut d_rot = Mat3::zeros();
        let mut d_t = Vec3::zeros();
        for (k, tgt) in self.target.iter().enumerate() {
            let mut p = self.neutral[k];
            for (d, &w) in self.deltas.iter().zip(s) {
                p += d[k] * w;
            }
            let x = rot * p + t;
            // dE/dx for this landmark.
            let gx = match &self.opts.target_space {
                TargetSpace::Model3d => {
                    let r = x - Vec3::from(*tgt);
                    value += r.norm_squared();
                    r * 2.0
                }
                TargetSpace::Projected2d(cam) => {
                    let y = cam.rotation_matrix() * x + cam.translation_vec();
                    if !(y.z > 0.0) {
                        return Err(Error::BehindCamera { index: k, z: y.z });
                    }
                    let iz = 1.0 / y.z;
                    let (u, v) = (y.x * iz, y.y * iz);
                    let (eu, ev) = (u - tgt[0], v - tgt[1]);
                    value += eu * eu + ev * ev;
                    let gy = Vec3::new(2.0 * eu * iz, 2.0 * ev * iz, -2.0 * (eu * u + ev * v) * iz);
                    cam.rotation_matrix().transpose() * gy
                }
            };
            d_rot += gx * p.transpose();
            d_t += gx;
            let gp = rot.transpose() * gx;
            for (g, d) in grad.iter_mut().zip(&self.deltas) {
                *g += gp.dot(&d[k]);
            }
        }
        value += self.penalty(s, &mut grad[..NUM_BLENDSHAPES]);
        grad[NUM_BLENDSHAPES..NUM_BLENDSHAPES + 6].copy_from_slice(&rot6d_backward(&r6, &d_rot)?);
        grad[58..61].copy_from_slice(d_t.as_slice());
        Ok((value, grad))
    }
}

impl FitProblem {
    /// Which slack entries lie outside `[0, 1]`, as -1, 0 or 1.
    pub fn active_bounds(&self, params: &[f64]) -> Vec<i8> {
        params[..NUM_BLENDSHAPES]
            .iter()
            .map(|&s| if s < 0.0 { -1 } else { i8::from(s > 1.0) })
            .collect()
    }

    /// Gauss-Newton approximation of the Hessian at `params`, including the
    /// curvature of whichever bound penalties are active there.
    pub fn gauss_newton(&self, params: &[f64]) -> Result<DMatrix<f64>> {
        let s = &params[..NUM_BLENDSHAPES];
        let r6: [f64; 6] = params[NUM_BLENDSHAPES..NUM_BLENDSHAPES + 6]
            .try_into()
            .unwrap();
        let rot = rot6d_to_rotation(&r6)?;
        // d R[a][b] / d r6, one row per matrix entry.
        let mut d_rot = [[0.0; 6]; 9];
        for (ab, row) in d_rot.iter_mut().enumerate() {
            let mut e = Mat3::zeros();
            e[(ab / 3, ab % 3)] = 1.0;
            *row = rot6d_backward(&r6, &e)?;
        }
        let t = Vec3::new(params[58], params[59], params[60]);
        let stride = self.opts.target_space.dim().stride();
        let mut jac = DMatrix::<f64>::zeros(self.target.len() * stride, NUM_PARAMS);
        for k in 0..self.target.len() {
            let mut p = self.neutral[k];
            for (d, &w) in self.deltas.iter().zip(s) {
                p += d[k] * w;
            }
            // Jacobian of the posed point x = R p + t.
            let mut jx = nalgebra::SMatrix::<f64, 3, NUM_PARAMS>::zeros();
            for (i, d) in self.deltas.iter().enumerate() {
                jx.set_column(i, &(rot * d[k]));
            }
            for j in 0..6 {
                for a in 0..3 {
                    jx[(a, NUM_BLENDSHAPES + j)] = (0..3).map(|b| d_rot[3 * a + b][j] * p[b]).sum();
                }
            }
            for a in 0..3 {
                jx[(a, 58 + a)] = 1.0;
            }
            match &self.opts.target_space {
                TargetSpace::Model3d => jac.view_mut((3 * k, 0), (3, NUM_PARAMS)).copy_from(&jx),
                TargetSpace::Projected2d(cam) => {
                    let rc = cam.rotation_matrix();
                    let y = rc * (rot * p + t) + cam.translation_vec();
                    if !(y.z > 0.0) {
                        return Err(Error::BehindCamera { index: k, z: y.z });
                    }
                    let iz = 1.0 / y.z;
                    let proj =
                        nalgebra::Matrix2x3::new(iz, 0.0, -y.x * iz * iz, 0.0, iz, -y.y * iz * iz)
                            * rc;
                    jac.view_mut((2 * k, 0), (2, NUM_PARAMS))
                        .copy_from(&(proj * jx));
                }
            }
        }
        let mut h = jac.tr_mul(&jac) * 2.0;
        let lam2 = 2.0 * self.opts.penalty_weight;
        for (i, &si) in s.iter().enumerate() {
            if !(0.0..=1.0).contains(&si) {
                h[(i, i)] += lam2;
            }
        }
        // The 6D encoding has three flat directions; damp them.
        let top = h.diagonal().max();
        for i in 0..NUM_PARAMS {
            h[(i, i)] += 1e-9 * top;
        }
        Ok(h)
    }
}

/// Objective value and gradient for `params` against `target`.
pub fn fit_objective(
    params: &[f64],
    rig: &BlendshapeRig,
    target: &LandmarkSet,
    opts: &FitOptions,
) -> Result<(f64, Vec<f64>)> {
    FitProblem::new(&rig.landmark_basis(), target, *opts)?.evaluate(params)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsReport {
    pub x: Vec<f64>,
    pub value: f64,
    pub initial_value: f64,
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const BACKTRACK_SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 40;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

type Memory = VecDeque<(Vec<f64>, Vec<f64>, f64)>;
type Preconditioner<'a> = &'a dyn Fn(&mut [f64]);

/// Two-loop recursion: applies the inverse Hessian estimate to `g`. The
/// middle step applies `seed` when given, else the usual scaled identity.
fn two_loop(g: &[f64], mem: &Memory, seed: Option<Preconditioner>) -> Vec<f64> {
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(mem.len());
    for (s, y, rho) in mem.iter().rev() {
        let a = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= a * yi;
        }
        alphas.push(a);
    }
    if let Some(apply) = seed {
        apply(&mut q);
    } else if let Some((s, y, _)) = mem.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for ((s, y, rho), a) in mem.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (a - b) * si;
        }
    }
    q
}

/// Minimizes `f` from `x0` with L-BFGS and Armijo backtracking.
///
/// `f` may return a non-finite value for points outside its domain; the
/// line search treats those as failed trials.
pub fn lbfgs_minimize<F>(f: F, x0: &[f64], opts: &FitOptions) -> Result<LbfgsReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    lbfgs_minimize_seeded(f, x0, opts, |_: &[f64]| None)
}

/// Hessian approximation at an iterate, used as the initial matrix of the
/// two-loop recursion in place of the scaled identity.
#[derive(Debug, Clone)]
pub struct HessianSeed {
    pub hessian: DMatrix<f64>,
    /// Drop stored curvature pairs, e.g. because the objective switched to a
    /// different piece of a piecewise-quadratic term.
    pub reset_memory: bool,
}

/// L-BFGS whose initial inverse Hessian at each iterate is the inverse of
/// `seed(x)` when that is available and positive definite.
pub fn lbfgs_minimize_seeded<F, S>(
    mut f: F,
    x0: &[f64],
    opts: &FitOptions,
    mut seed: S,
) -> Result<LbfgsReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    S: FnMut(&[f64]) -> Option<HessianSeed>,
{
    opts.validate()?;
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f(&x);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteObjective);
    }
    let initial_value = fx;
    let mut mem = Memory::with_capacity(opts.lbfgs_memory);
    let mut iterations = 0;
    let mut line_search_failed = false;
    let mut converged = inf_norm(&g) < opts.grad_tol;
    while !converged && iterations < opts.max_iters {
        let chol = seed(&x).and_then(|sd| {
            if sd.reset_memory {
                mem.clear();
            }
            sd.hessian.cholesky()
        });
        let apply = chol.as_ref().map(|c| {
            move |q: &mut [f64]| {
                let sol = c.solve(&DVector::from_column_slice(q));
                q.copy_from_slice(sol.as_slice());
            }
        });
        let apply_dyn = apply.as_ref().map(|a| a as &dyn Fn(&mut [f64]));
        let mut d: Vec<f64> = two_loop(&g, &mem, apply_dyn)
            .into_iter()
            .map(|v| -v)
            .collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            mem.clear();
            d = two_loop(&g, &mem, apply_dyn)
                .into_iter()
                .map(|v| -v)
                .collect();
            slope = dot(&g, &d);
            if !(slope < 0.0) {
                d = g.iter().map(|v| -v).collect();
                slope = dot(&g, &d);
            }
        }
        let mut step = if mem.is_empty() && chol.is_none() {
            (1.0 / inf_norm(&g)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..=MAX_BACKTRACKS {
            let xn: Vec<f64> = x.iter().zip(&d).map(|(xi, di)| xi + step * di).collect();
            let (fn_, gn) = f(&xn);
            if fn_.is_finite()
                && gn.iter().all(|v| v.is_finite())
                && fn_ <= fx + ARMIJO_C1 * step * slope
            {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= BACKTRACK_SHRINK;
        }
        let Some((xn, fn_, gn)) = accepted else {
            if mem.is_empty() {
                line_search_failed = true;
                break;
            }
            // Retry once without curvature pairs before giving up.
            mem.clear();
            continue;
        };
        iterations += 1;
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if mem.len() == opts.lbfgs_memory {
                mem.pop_front();
            }
            mem.push_back((s, y, 1.0 / sy));
        }
        x = xn;
        fx = fn_;
        g = gn;
        converged = inf_norm(&g) < opts.grad_tol;
    }
    Ok(LbfgsReport {
        x,
        value: fx,
        initial_value,
        iterations,
        converged,
        line_search_failed,
    })
}

/// Starting parameters: uniform slack, identity rotation, and a
/// centroid-aligning translation for 3D targets.
pub fn initial_params(problem: &FitProblem, init: Option<&FitResult>) -> Vec<f64> {
    let mut p = Vec::with_capacity(NUM_PARAMS);
    match init {
        Some(prev) => {
            p.extend_from_slice(&prev.pre_clip_coefficients);
            p.extend_from_slice(&prev.pose.r6);
            p.extend_from_slice(&prev.pose.t);
        }
        None => {
            p.extend(std::iter::repeat_n(0.1, NUM_BLENDSHAPES));
            p.extend_from_slice(&IDENTITY_R6);
            let t = match problem.opts.target_space {
                TargetSpace::Model3d => {
                    let tgt: Vec<Vec3> = problem.target.iter().map(|&a| Vec3::from(a)).collect();
                    centroid(&tgt) - centroid(&problem.neutral)
                }
                TargetSpace::Projected2d(_) => Vec3::zeros(),
            };
            p.extend_from_slice(t.as_slice());
        }
    }
    p
}

/// Fits a landmark basis to one target.
pub fn fit_basis(
    basis: &LandmarkBasis,
    interocular: [usize; 2],
    target: &LandmarkSet,
    opts: &FitOptions,
    init: Option<&FitResult>,
) -> Result<FitResult> {
    let problem = FitProblem::new(basis, target, *opts)?;
    if !(target.distance(interocular[0], interocular[1]) > 0.0) {
        return Err(Error::ZeroInterocular);
    }
    let x0 = initial_params(&problem, init);
    let mut last_active = None;
    let report = lbfgs_minimize_seeded(
        |x| match problem.evaluate(x) {
            Ok(v) => v,
            Err(_) => (f64::INFINITY, vec![0.0; NUM_PARAMS]),
        },
        &x0,
        opts,
        |x| {
            let active = problem.active_bounds(x);
            let reset = last_active.as_ref() != Some(&active);
            last_active = Some(active);
            problem.gauss_newton(x).ok().map(|hessian| HessianSeed {
                hessian,
                reset_memory: reset,
            })
        },
    )?;
    let pre_clip = report.x[..NUM_BLENDSHAPES].to_vec();
    let coefficients =
        CoefficientVector::new(pre_clip.iter().map(|v| v.clamp(0.0, 1.0)).collect())?;
    Ok(FitResult {
        coefficients,
        pose: RigidPose {
            r6: report.x[52..58].try_into().unwrap(),
            t: report.x[58..61].try_into().unwrap(),
        },
        final_objective: report.value,
        initial_objective: report.initial_value,
        iterations: report.iterations,
        converged: report.converged,
        pre_clip_coefficients: pre_clip,
    })
}

pub fn fit_frame(
    rig: &BlendshapeRig,
    target: &LandmarkSet,
    opts: &FitOptions,
    init: Option<&FitResult>,
) -> Result<FitResult> {
    fit_basis(
        &rig.landmark_basis(),
        rig.landmarks.interocular(),
        target,
        opts,
        init,
    )
}

/// Landmarks reconstructed from a fit: posed 3D points, or their projection
/// for 2D fits.
pub fn reconstruct(
    basis: &LandmarkBasis,
    fit: &FitResult,
    space: &TargetSpace,
) -> Result<LandmarkSet> {
    let pts = crate::geometry::apply_rigid(&basis.evaluate(&fit.coefficients)?, &fit.pose)?;
    Ok(match space {
        TargetSpace::Model3d => LandmarkSet::from_3d(&pts),
        TargetSpace::Projected2d(cam) => LandmarkSet::from_2d(&cam.project_world(&pts)?),
    })
}

/// One line of a landmark-target file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkRecord {
    pub frame: u64,
    pub dim: Dim,
    pub points: Vec<Vec<f64>>,
}

impl LandmarkRecord {
    pub fn from_set(frame: u64, set: &LandmarkSet) -> Self {
        Self {
            frame,
            dim: set.dim(),
            points: (0..set.len()).map(|i| set.point(i).to_vec()).collect(),
        }
    }

    pub fn to_set(&self) -> Result<LandmarkSet> {
        let stride = self.dim.stride();
        if let Some(p) = self.points.iter().find(|p| p.len() != stride) {
            return Err(Error::DimensionMismatch(format!(
                "frame {}: point with {} coordinates in a {stride}D record",
                self.frame,
                p.len()
            )));
        }
        LandmarkSet::from_flat(self.dim, self.points.concat())
    }
}

/// One line of a fit-result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub frame: u64,
    #[serde(flatten)]
    pub result: FitResult,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quadratic_converges_quickly() {
        let a = [1.0, -2.0, 3.5, 0.25];
        let rep = lbfgs_minimize(
            |x| {
                let v = x.iter().zip(&a).map(|(xi, ai)| (xi - ai).powi(2)).sum();
                (
                    v,
                    x.iter().zip(&a).map(|(xi, ai)| 2.0 * (xi - ai)).collect(),
                )
            },
            &[10.0, 10.0, -7.0, 0.0],
            &FitOptions::default(),
        )
        .unwrap();
        assert!(rep.iterations <= 5, "{} iterations", rep.iterations);
        for (x, a) in rep.x.iter().zip(&a) {
            assert!((x - a).abs() < 1e-8);
        }
    }

    #[test]
    fn rosenbrock() {
        let opts = FitOptions {
            max_iters: 1000,
            grad_tol: 1e-10,
            ..FitOptions::default()
        };
        let rep = lbfgs_minimize(
            |x| {
                let (a, b) = (x[0], x[1]);
                let v = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
                (
                    v,
                    vec![
                        -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                        200.0 * (b - a * a),
                    ],
                )
            },
            &[-1.2, 1.0],
            &opts,
        )
        .unwrap();
        assert!(
            (rep.x[0] - 1.0).abs() < 1e-5 && (rep.x[1] - 1.0).abs() < 1e-5,
            "{:?}",
            rep
        );
    }

    #[test]
    fn penalized_scalar_minimum() {
        let lam = 10.0;
        let rep = lbfgs_minimize(
            |x| {
                let s = x[0];
                let over = (s - 1.0).max(0.0);
                (
                    (s - 2.0).powi(2) + lam * over * over,
                    vec![2.0 * (s - 2.0) + 2.0 * lam * over],
                )
            },
            &[0.0],
            &FitOptions::default(),
        )
        .unwrap();
        // Stationarity 2(s - 2) + 20(s - 1) = 0.
        let oracle = (4.0 + 20.0) / 22.0;
        assert_relative_eq!(rep.x[0], oracle, epsilon = 1e-7);
    }

    #[test]
    fn non_finite_start_is_rejected() {
        let err =
            lbfgs_minimize(|_| (f64::NAN, vec![0.0]), &[0.0], &FitOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteObjective));
    }

    #[test]
    fn line_search_failure_keeps_best_iterate() {
        // Gradient points uphill everywhere, so no step decreases f.
        let rep = lbfgs_minimize(|x| (x[0], vec![-1.0]), &[0.0], &FitOptions::default()).unwrap();
        assert!(!rep.converged && rep.line_search_failed);
        assert_eq!(rep.x, vec![0.0]);
    }

    #[test]
    fn options_are_validated() {
        let bad = FitOptions {
            lbfgs_memory: 0,
            ..FitOptions::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = FitOptions {
            grad_tol: 0.0,
            ..FitOptions::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn landmark_record_round_trip() {
        let set = LandmarkSet::from_2d(&[[1.0, 2.0], [3.5, -4.0]]);
        let rec = LandmarkRecord::from_set(7, &set);
        let back: LandmarkRecord =
            serde_json::from_str(&serde_json::to_string(&rec).unwrap()).unwrap();
        assert_eq!(back.to_set().unwrap(), set);
        let bad = LandmarkRecord {
            frame: 1,
            dim: Dim::Three,
            points: vec![vec![0.0, 1.0]],
        };
        assert!(bad.to_set().is_err());
    }
}

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::{backward, forward, normalize_input};
use super::{Gradient, MixerConfig, MixerParams};
use crate::error::{Error, Result};
use crate::geometry::{rot6d_backward, rot6d_to_rotation, Camera, RigidPose};
use crate::mesh::Vec3;
use crate::names::NUM_BLENDSHAPES;
use crate::rig::LandmarkBasis;
use crate::seed;
use crate::synth::DataSample;

/// Samples per unit of parallel work. Fixed so that gradient sums are
/// reduced in the same order for any thread count.
const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub coeff: f64,
    pub landmark: f64,
    pub rotation: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            coeff: 1.0,
            landmark: 1.0,
            rotation: 1.0,
        }
    }
}

/// Unweighted loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub coeff: f64,
    pub landmark: f64,
    pub rotation: f64,
    pub total: f64,
}

impl LossTerms {
    fn weighted(coeff: f64, landmark: f64, rotation: f64, w: &LossWeights) -> Self {
        Self {
            coeff,
            landmark,
            rotation,
            total: w.coeff * coeff + w.landmark * landmark + w.rotation * rotation,
        }
    }
}

/// Space in which the landmark term compares reconstructions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandmarkLossSpace {
    /// 3D model-space landmarks.
    #[default]
    Model3d,
    /// Normalized image coordinates under the sample's ground-truth pose and
    /// camera.
    Projected2d,
}

#[derive(Debug, Clone)]
struct Linear {
    neutral: Array1<f64>,
    /// `3 * landmarks` rows, one column per blendshape.
    deltas: Array2<f64>,
}

impl Linear {
    fn new(basis: &LandmarkBasis) -> Self {
        let d = basis.deltas();
        Self {
            neutral: basis.neutral.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
            deltas: Array2::from_shape_fn((3 * basis.len(), d.len()), |(r, c)| d[c][r / 3][r % 3]),
        }
    }
}

/// Linear landmark models for the landmark term. Samples use their
/// identity's model when one is registered and the template's otherwise.
#[derive(Debug, Clone)]
pub struct LossBasis {
    template: Linear,
    per_identity: BTreeMap<u64, Linear>,
    space: LandmarkLossSpace,
    cameras: Vec<Camera>,
}

impl LossBasis {
    pub fn new(template: &LandmarkBasis) -> Self {
        Self {
            template: Linear::new(template),
            per_identity: BTreeMap::new(),
            space: LandmarkLossSpace::Model3d,
            cameras: Vec::new(),
        }
    }

    pub fn with_identity(mut self, identity_id: u64, basis: &LandmarkBasis) -> Self {
        self.per_identity.insert(identity_id, Linear::new(basis));
        self
    }

    /// Compares projections instead of 3D landmarks. `cameras` is indexed by
    /// each sample's `camera_id`.
    pub fn projected(mut self, cameras: Vec<Camera>) -> Self {
        self.space = LandmarkLossSpace::Projected2d;
        self.cameras = cameras;
        self
    }

    fn get(&self, identity_id: u64) -> &Linear {
        self.per_identity
            .get(&identity_id)
            .unwrap_or(&self.template)
    }

    pub fn landmarks(&self) -> usize {
        self.template.deltas.nrows() / 3
    }

    pub fn space(&self) -> LandmarkLossSpace {
        self.space
    }
}

/// Squared landmark error summed over points and its derivative with respect
/// to the coefficient difference.
fn projected_landmark_term(
    lin: &Linear,
    w_pred: &[f64],
    w_gt: &[f64],
    pose: &RigidPose,
    cam: &Camera,
) -> Result<(f64, Array1<f64>)> {
    let m = cam.rotation_matrix() * pose.rotation()?;
    let b = cam.rotation_matrix() * pose.translation() + cam.translation_vec();
    let xp = &lin.neutral + &lin.deltas.dot(&ArrayView1::from(w_pred));
    let xg = &lin.neutral + &lin.deltas.dot(&ArrayView1::from(w_gt));
    let mut sum = 0.0;
    let mut d_x = Array1::zeros(xp.len());
    for k in 0..xp.len() / 3 {
        let cp = m * Vec3::new(xp[3 * k], xp[3 * k + 1], xp[3 * k + 2]) + b;
        let cg = m * Vec3::new(xg[3 * k], xg[3 * k + 1], xg[3 * k + 2]) + b;
        for c in [cp, cg] {
            if !(c.z > 0.0) {
                return Err(Error::BehindCamera { index: k, z: c.z });
            }
        }
        let du = cp.x / cp.z - cg.x / cg.z;
        let dv = cp.y / cp.z - cg.y / cg.z;
        sum += du * du + dv * dv;
        let dc = Vec3::new(
            du / cp.z,
            dv / cp.z,
            -(du * cp.x + dv * cp.y) / (cp.z * cp.z),
        );
        let dp = m.transpose() * dc;
        d_x[3 * k] = dp.x;
        d_x[3 * k + 1] = dp.y;
        d_x[3 * k + 2] = dp.z;
    }
    Ok((sum, lin.deltas.t().dot(&d_x)))
}

/// `||R(r6) - R_gt||_F^2`.
pub fn rotation_loss_term(r6: &[f64; 6], pose_gt: &RigidPose) -> Result<f64> {
    Ok((rot6d_to_rotation(r6)? - pose_gt.rotation()?).norm_squared())
}

struct SampleTerms {
    coeff: f64,
    landmark: f64,
    rotation: f64,
}

/// Terms of one sample, and optionally the output-side derivatives of its
/// weighted contribution to the batch mean.
fn sample_terms(
    params: &MixerParams,
    s: &DataSample,
    basis: &LossBasis,
    weights: &LossWeights,
    batch: usize,
    grad: Option<&mut [f64]>,
) -> Result<SampleTerms> {
    let x = normalize_input(params, &s.landmarks2d)?;
    let act = forward(params, &x)?;
    let out = act.output();
    let n = out.coefficients.len();
    if s.coefficients.len() != n {
        return Err(Error::CoefficientCount {
            expected: n,
            got: s.coefficients.len(),
        });
    }
    let dw: Array1<f64> = out
        .coefficients
        .iter()
        .zip(s.coefficients.iter())
        .map(|(p, g)| p - g)
        .collect();
    let coeff = dw.dot(&dw) / n as f64;

    let lin = basis.get(s.identity_id);
    let lm = lin.deltas.nrows() / 3;
    // Sum of squared errors and half its gradient in coefficient space.
    let (sq, half_grad) = match basis.space {
        LandmarkLossSpace::Model3d => {
            let diff = lin.deltas.dot(&dw);
            (diff.dot(&diff), lin.deltas.t().dot(&diff))
        }
        LandmarkLossSpace::Projected2d => {
            let cam = basis.cameras.get(s.camera_id as usize).ok_or_else(|| {
                Error::Config(format!(
                    "sample {} uses unknown camera {}",
                    s.index, s.camera_id
                ))
            })?;
            projected_landmark_term(lin, &out.coefficients, &s.coefficients, &s.pose, cam)?
        }
    };
    let landmark = sq / lm as f64;

    let r_gt = s.pose.rotation()?;
    let (rotation, d_rot) = match rot6d_to_rotation(&out.r6) {
        Ok(r) => (
            (r - r_gt).norm_squared(),
            if weights.rotation != 0.0 {
                Some(r - r_gt)
            } else {
                None
            },
        ),
        Err(e) if weights.rotation != 0.0 => return Err(e),
        Err(_) => (0.0, None),
    };

    if let Some(grad) = grad {
        let b = batch as f64;
        let mut d_coef = dw.mapv(|v| weights.coeff * 2.0 * v / (n as f64 * b));
        d_coef.scaled_add(weights.landmark * 2.0 / (lm as f64 * b), &half_grad);
        let d_r6 = match d_rot {
            Some(diff_r) => rot6d_backward(&out.r6, &(diff_r * (2.0 * weights.rotation / b)))?,
            None => [0.0; 6],
        };
        backward(
            params,
            &act,
            d_coef.as_slice().expect("contiguous"),
            &d_r6,
            grad,
        );
    }
    Ok(SampleTerms {
        coeff,
        landmark,
        rotation,
    })
}

fn check_batch(params: &MixerParams, batch: &[&DataSample], basis: &LossBasis) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if basis.landmarks() != params.config().tokens_in {
        return Err(Error::ShapeMismatch(format!(
            "loss basis has {} landmarks, mixer takes {}",
            basis.landmarks(),
            params.config().tokens_in
        )));
    }
    Ok(())
}

fn reduce(parts: Vec<(f64, f64, f64)>, n: usize, weights: &LossWeights) -> LossTerms {
    let (c, l, r) = parts
        .into_iter()
        .fold((0.0, 0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
    let b = n as f64;
    LossTerms::weighted(c / b, l / b, r / b, weights)
}

/// Batch-mean loss terms.
pub fn loss(
    params: &MixerParams,
    batch: &[&DataSample],
    basis: &LossBasis,
    weights: &LossWeights,
) -> Result<LossTerms> {
    check_batch(params, batch, basis)?;
    let parts = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk.iter().try_fold((0.0, 0.0, 0.0), |a, s| {
                let t = sample_terms(params, s, basis, weights, batch.len(), None)?;
                Ok((a.0 + t.coeff, a.1 + t.landmark, a.2 + t.rotation))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(reduce(parts, batch.len(), weights))
}

/// Batch-mean loss terms and the gradient of the weighted total.
pub fn loss_and_gradient(
    params: &MixerParams,
    batch: &[&DataSample],
    basis: &LossBasis,
    weights: &LossWeights,
) -> Result<(LossTerms, Gradient)> {
    check_batch(params, batch, basis)?;
    let parts = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = vec![0.0; params.len()];
            let sums = chunk.iter().try_fold((0.0, 0.0, 0.0), |a, s| {
                let t = sample_terms(params, s, basis, weights, batch.len(), Some(&mut g))?;
                Ok::<_, Error>((a.0 + t.coeff, a.1 + t.landmark, a.2 + t.rotation))
            })?;
            Ok((sums, g))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; params.len()];
    let mut sums = Vec::with_capacity(parts.len());
    for (s, g) in parts {
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        sums.push(s);
    }
    Ok((reduce(sums, batch.len(), weights), grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: u64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub log_every: u64,
    /// Holdout loss is evaluated at multiples of this step count and at the
    /// final step.
    pub holdout_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// Use each sample's own identity rig in the landmark term.
    pub per_identity_landmarks: bool,
    pub landmark_space: LandmarkLossSpace,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            steps: 50_000,
            lr_start: 1e-3,
            lr_end: 1e-5,
            weights: LossWeights::default(),
            seed: 0,
            log_every: 100,
            holdout_every: 100,
            checkpoint_every: 5_000,
            per_identity_landmarks: false,
            landmark_space: LandmarkLossSpace::Model3d,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            batch_size: 32,
            steps: 5_000,
            holdout_every: 500,
            checkpoint_every: 1_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must satisfy lr_start > lr_end > 0 (got {} and {})",
                self.lr_start, self.lr_end
            )));
        }
        if self.batch_size == 0 || self.steps == 0 || self.log_every == 0 || self.holdout_every == 0
        {
            return Err(Error::Config(
                "batch_size, steps, log_every and holdout_every must be positive".into(),
            ));
        }
        let w = &self.weights;
        if [w.coeff, w.landmark, w.rotation]
            .iter()
            .any(|v| !(*v >= 0.0) || !v.is_finite())
        {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Cosine decay from `lr_start` at update 0 to `lr_end` at the last update.
pub fn cosine_lr(cfg: &TrainConfig, update: u64) -> f64 {
    if cfg.steps <= 1 {
        return cfg.lr_start;
    }
    let c = 0.5 * (1.0 + (std::f64::consts::PI * update as f64 / (cfg.steps - 1) as f64).cos());
    cfg.lr_start * c + cfg.lr_end * (1.0 - c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    /// Number of updates applied so far.
    pub step: u64,
    /// Learning rate of the most recent update.
    pub lr: f64,
    pub train: LossTerms,
    pub holdout: Option<LossTerms>,
}

pub trait TrainObserver {
    fn on_log(&mut self, _entry: &TrainLogEntry) {}
    fn on_checkpoint(&mut self, _step: u64, _params: &MixerParams) -> Result<()> {
        Ok(())
    }
    /// Called with the last finite parameters before training aborts.
    fn on_abort(&mut self, _step: u64, _last_good: &MixerParams) {}
}

pub struct NoopObserver;

impl TrainObserver for NoopObserver {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: MixerParams,
    pub log: Vec<TrainLogEntry>,
}

fn batch_indices(cfg: &TrainConfig, n: usize, update: u64) -> Vec<usize> {
    if cfg.batch_size >= n {
        return (0..n).collect();
    }
    let mut rng = seed::rng(cfg.seed, seed::stream::BATCHES, update);
    rand::seq::index::sample(&mut rng, n, cfg.batch_size).into_vec()
}

/// Trains from a fresh initialization with Adam and cosine learning-rate
/// decay. The result depends only on the inputs and `cfg.seed`.
pub fn train(
    data: &[DataSample],
    holdout: &[DataSample],
    basis: &LossBasis,
    cfg: &TrainConfig,
    mixer_cfg: &MixerConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(s) = data
        .iter()
        .chain(holdout)
        .find(|s| s.coefficients.len() != NUM_BLENDSHAPES)
    {
        return Err(Error::CoefficientCount {
            expected: NUM_BLENDSHAPES,
            got: s.coefficients.len(),
        });
    }
    let mut params = MixerParams::init(mixer_cfg.clone(), cfg.seed)?;
    let holdout_refs: Vec<&DataSample> = holdout.iter().collect();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut log = Vec::new();
    for update in 0..cfg.steps {
        let step = update + 1;
        let batch: Vec<&DataSample> = batch_indices(cfg, data.len(), update)
            .into_iter()
            .map(|i| &data[i])
            .collect();
        let (terms, grad) = match loss_and_gradient(&params, &batch, basis, &cfg.weights) {
            Ok(r) if r.0.total.is_finite() && r.1.iter().all(|g| g.is_finite()) => r,
            Ok(_) => {
                observer.on_abort(update, &params);
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            Err(e) => {
                observer.on_abort(update, &params);
                return Err(e);
            }
        };
        let lr = cosine_lr(cfg, update);
        let bc1 = 1.0 - cfg.beta1.powi(step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(step as i32);
        for (((p, g), mi), vi) in params.data.iter_mut().zip(&grad).zip(&mut m).zip(&mut v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            *p -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.adam_eps);
        }
        let last = step == cfg.steps;
        if step % cfg.log_every == 0 || last {
            let holdout_terms =
                if !holdout_refs.is_empty() && (step % cfg.holdout_every == 0 || last) {
                    Some(loss(&params, &holdout_refs, basis, &cfg.weights)?)
                } else {
                    None
                };
            let entry = TrainLogEntry {
                step,
                lr,
                train: terms,
                holdout: holdout_terms,
            };
            observer.on_log(&entry);
            log.push(entry);
        }
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 && !last {
            observer.on_checkpoint(step, &params)?;
        }
    }
    Ok(TrainOutcome { params, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::euler_xyz;

    #[test]
    fn lr_endpoints() {
        let cfg = TrainConfig {
            steps: 5000,
            ..TrainConfig::default()
        };
        assert_eq!(cosine_lr(&cfg, 0), 1e-3);
        assert_eq!(cosine_lr(&cfg, 4999), 1e-5);
        assert!(cosine_lr(&cfg, 2500) < 1e-3 && cosine_lr(&cfg, 2500) > 1e-5);
        let one = TrainConfig {
            steps: 1,
            ..TrainConfig::default()
        };
        assert_eq!(cosine_lr(&one, 0), 1e-3);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        TrainConfig::desk().validate().unwrap();
        let bad = TrainConfig {
            lr_end: 1e-2,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TrainConfig {
            lr_end: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rotation_term_examples() {
        let gt =
            RigidPose::from_rotation(&euler_xyz(0.0, 0.0, std::f64::consts::PI), Vec3::zeros());
        let v = rotation_loss_term(&crate::geometry::IDENTITY_R6, &gt).unwrap();
        assert!((v - 8.0).abs() < 1e-12);
        let pose = RigidPose::from_rotation(&euler_xyz(0.3, -0.2, 0.1), Vec3::zeros());
        assert!(rotation_loss_term(&pose.r6, &pose).unwrap() < 1e-28);
        let scaled: [f64; 6] = std::array::from_fn(|i| pose.r6[i] * if i < 3 { 2.5 } else { 0.4 });
        assert!(rotation_loss_term(&scaled, &pose).unwrap() < 1e-28);
        assert!(rotation_loss_term(&[0.0; 6], &pose).is_err());
    }
}

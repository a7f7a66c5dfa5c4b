//! Landmark error metrics and the holdout evaluation harness.
//!
//! All errors are mean normalized errors (MNE): the mean landmark distance
//! divided by the ground-truth inter-ocular distance, in percent.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fitter::{fit_basis, reconstruct, FitOptions, TargetSpace};
use crate::geometry::{geodesic_distance, RigidPose};
use crate::mixer::{infer, MixerParams};
use crate::rig::{BlendshapeRig, LandmarkMap, LandmarkSet, Region};
use crate::synth::{forward_landmarks, Dataset, DatasetHeader, IdentityBank};

fn check_pair(pred: &LandmarkSet, gt: &LandmarkSet, map: &LandmarkMap) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::DimensionMismatch(format!(
            "prediction is {}D, ground truth {}D",
            pred.dim().stride(),
            gt.dim().stride()
        )));
    }
    if pred.len() != gt.len() || gt.len() != map.len() {
        return Err(Error::DimensionMismatch(format!(
            "landmark counts differ: prediction {}, ground truth {}, map {}",
            pred.len(),
            gt.len(),
            map.len()
        )));
    }
    let [a, b] = map.interocular();
    let d = gt.distance(a, b);
    if !(d > 0.0) {
        return Err(Error::ZeroInterocular);
    }
    Ok(d)
}

fn point_errors(pred: &LandmarkSet, gt: &LandmarkSet) -> Vec<f64> {
    (0..gt.len())
        .map(|i| {
            pred.point(i)
                .iter()
                .zip(gt.point(i))
                .map(|(p, g)| (p - g) * (p - g))
                .sum::<f64>()
                .sqrt()
        })
        .collect()
}

pub fn mne(pred: &LandmarkSet, gt: &LandmarkSet, map: &LandmarkMap) -> Result<f64> {
    let norm = check_pair(pred, gt, map)?;
    let e = point_errors(pred, gt);
    Ok(100.0 * e.iter().sum::<f64>() / e.len() as f64 / norm)
}

pub fn region_mne(
    pred: &LandmarkSet,
    gt: &LandmarkSet,
    map: &LandmarkMap,
    region: Region,
) -> Result<f64> {
    let norm = check_pair(pred, gt, map)?;
    let members = map.region_members(region);
    if members.is_empty() {
        return Err(Error::EmptyRegion(region.to_string()));
    }
    let e = point_errors(pred, gt);
    Ok(100.0 * members.iter().map(|&k| e[k]).sum::<f64>() / members.len() as f64 / norm)
}

/// Overall and per-region MNE of one prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMne {
    pub overall: f64,
    pub regions: BTreeMap<Region, f64>,
}

pub fn sample_mne(pred: &LandmarkSet, gt: &LandmarkSet, map: &LandmarkMap) -> Result<SampleMne> {
    let norm = check_pair(pred, gt, map)?;
    let e = point_errors(pred, gt);
    let overall = 100.0 * e.iter().sum::<f64>() / e.len() as f64 / norm;
    let mut regions = BTreeMap::new();
    for r in Region::ALL {
        let members = map.region_members(r);
        if !members.is_empty() {
            let s: f64 = members.iter().map(|&k| e[k]).sum();
            regions.insert(r, 100.0 * s / members.len() as f64 / norm);
        }
    }
    Ok(SampleMne { overall, regions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MneReport {
    pub count: usize,
    /// Mean over samples of the all-landmark MNE.
    pub overall: f64,
    pub lips: f64,
    pub eyes: f64,
    /// Lips and eyes landmarks pooled, each landmark weighted equally.
    pub average_landmark_weighted: f64,
    /// Mean of the lips and eyes values.
    pub average_region_mean: f64,
    pub regions: BTreeMap<Region, f64>,
    /// Distribution of the per-sample all-landmark MNE.
    pub median: f64,
    pub p95: f64,
}

/// Nearest-rank percentile of sorted values.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

impl MneReport {
    pub fn from_samples(samples: &[SampleMne], map: &LandmarkMap) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Config("no samples to summarize".into()));
        }
        let n = samples.len() as f64;
        let mut regions = BTreeMap::new();
        for r in Region::ALL {
            if samples.iter().all(|s| s.regions.contains_key(&r)) {
                regions.insert(r, samples.iter().map(|s| s.regions[&r]).sum::<f64>() / n);
            }
        }
        let region = |r: Region| {
            regions
                .get(&r)
                .copied()
                .ok_or_else(|| Error::EmptyRegion(r.to_string()))
        };
        let (lips, eyes) = (region(Region::Lips)?, region(Region::Eyes)?);
        let nl = map.region_members(Region::Lips).len() as f64;
        let ne = map.region_members(Region::Eyes).len() as f64;
        let mut overall: Vec<f64> = samples.iter().map(|s| s.overall).collect();
        let mean = overall.iter().sum::<f64>() / n;
        overall.sort_by(f64::total_cmp);
        Ok(Self {
            count: samples.len(),
            overall: mean,
            lips,
            eyes,
            average_landmark_weighted: (nl * lips + ne * eyes) / (nl + ne),
            average_region_mean: 0.5 * (lips + eyes),
            regions,
            median: percentile(&overall, 50.0),
            p95: percentile(&overall, 95.0),
        })
    }
}

/// MNE between every pair of fully activated blendshapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseDiff {
    pub names: Vec<String>,
    /// Symmetric, zero diagonal.
    pub matrix: Vec<Vec<f64>>,
    /// Mean over unordered pairs `i < j`.
    pub mean: f64,
    pub regions: BTreeMap<Region, f64>,
}

/// Normalizes by the neutral's inter-ocular distance so that the matrix is
/// symmetric.
pub fn pairwise_blendshape_diff(rig: &BlendshapeRig) -> Result<PairwiseDiff> {
    rig.validate()?;
    let basis = rig.landmark_basis();
    let map = &rig.landmarks;
    let neutral = LandmarkSet::from_3d(&basis.neutral);
    let [a, b] = map.interocular();
    let norm = neutral.distance(a, b);
    if !(norm > 0.0) {
        return Err(Error::ZeroInterocular);
    }
    let sets: Vec<LandmarkSet> = basis
        .shapes
        .iter()
        .map(|s| LandmarkSet::from_3d(s))
        .collect();
    let n = sets.len();
    let members: Vec<(Region, Vec<usize>)> = Region::ALL
        .into_iter()
        .map(|r| (r, map.region_members(r)))
        .filter(|(_, m)| !m.is_empty())
        .collect();
    // Upper triangle rows: all-landmark value and per-region values.
    let rows: Vec<Vec<(f64, Vec<f64>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i + 1..n)
                .map(|j| {
                    let e = point_errors(&sets[i], &sets[j]);
                    let all = 100.0 * e.iter().sum::<f64>() / e.len() as f64 / norm;
                    let per: Vec<f64> = members
                        .iter()
                        .map(|(_, m)| {
                            100.0 * m.iter().map(|&k| e[k]).sum::<f64>() / m.len() as f64 / norm
                        })
                        .collect();
                    (all, per)
                })
                .collect()
        })
        .collect();
    let mut matrix = vec![vec![0.0; n]; n];
    let mut sum = 0.0;
    let mut region_sums = vec![0.0; members.len()];
    for (i, row) in rows.iter().enumerate() {
        for (k, (v, per)) in row.iter().enumerate() {
            let j = i + 1 + k;
            matrix[i][j] = *v;
            matrix[j][i] = *v;
            sum += v;
            region_sums.iter_mut().zip(per).for_each(|(s, p)| *s += p);
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(PairwiseDiff {
        names: rig.names.names().to_vec(),
        matrix,
        mean: sum / pairs,
        regions: members
            .iter()
            .zip(region_sums)
            .map(|((r, _), s)| (*r, s / pairs))
            .collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Also fit each holdout sample with the offline fitter.
    pub fitter: bool,
    /// Constant prediction scored with the model's pose; zeros when unset.
    pub baseline_coefficients: Option<Vec<f64>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            fitter: true,
            baseline_coefficients: None,
        }
    }
}

/// Per-blendshape mean over a set of samples.
pub fn mean_coefficients(samples: &[crate::synth::DataSample]) -> Result<Vec<f64>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("no samples to average".into()))?;
    let mut mean = vec![0.0; first.coefficients.len()];
    for s in samples {
        mean.iter_mut()
            .zip(s.coefficients.iter())
            .for_each(|(m, w)| *m += w);
    }
    let n = samples.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub holdout_count: usize,
    pub checkpoint_hash: String,
    /// Mixer coefficients and rotation, ground-truth translation.
    pub model: MneReport,
    /// Mean geodesic error of the predicted rotation, degrees.
    pub model_rotation_error_deg: f64,
    /// Constant coefficients under the same pose as the model row.
    pub baseline: MneReport,
    pub baseline_coefficients: Vec<f64>,
    pub fitter: Option<MneReport>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<18} {:>8} {:>8} {:>10} {:>10} {:>8} {:>8}",
            "method", "lips", "eyes", "avg(lmk)", "avg(reg)", "median", "p95"
        );
        let mut row = |name: &str, r: &MneReport| {
            let _ = writeln!(
                s,
                "{:<18} {:>8.3} {:>8.3} {:>10.3} {:>10.3} {:>8.3} {:>8.3}",
                name,
                r.lips,
                r.eyes,
                r.average_landmark_weighted,
                r.average_region_mean,
                r.median,
                r.p95
            );
        };
        row("real-time model", &self.model);
        if let Some(f) = &self.fitter {
            row("offline fitter", f);
        }
        row("constant baseline", &self.baseline);
        let _ = writeln!(
            s,
            "MNE in percent over {} holdout samples; model rotation error {:.3} deg",
            self.holdout_count, self.model_rotation_error_deg
        );
        s
    }
}

/// Fails when the holdout could share samples or identities with the
/// training set.
pub fn check_disjoint(train: &DatasetHeader, holdout: &DatasetHeader) -> Result<()> {
    if train.seed != holdout.seed {
        return Ok(());
    }
    let overlaps =
        |a: std::ops::Range<u64>, b: std::ops::Range<u64>| a.start < b.end && b.start < a.end;
    if overlaps(train.sample_range(), holdout.sample_range()) {
        return Err(Error::Config(format!(
            "holdout samples {:?} overlap training samples {:?}",
            holdout.sample_range(),
            train.sample_range()
        )));
    }
    if overlaps(train.identity_range(), holdout.identity_range()) {
        return Err(Error::Config(format!(
            "holdout identities {:?} overlap training identities {:?}",
            holdout.identity_range(),
            train.identity_range()
        )));
    }
    Ok(())
}

/// Scores the mixer, the offline fitter and a constant-coefficient baseline
/// on 2D holdout landmarks. `bank` must hold every holdout identity.
pub fn evaluate_model(
    params: &MixerParams,
    holdout: &Dataset,
    train_header: Option<&DatasetHeader>,
    template: &BlendshapeRig,
    bank: &IdentityBank,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if holdout.samples.is_empty() {
        return Err(Error::Config("holdout set is empty".into()));
    }
    if let Some(t) = train_header {
        check_disjoint(t, &holdout.header)?;
    }
    let cfg = params.config();
    if cfg.tokens_in != template.landmarks.len()
        || cfg.interocular_pair != template.landmarks.interocular()
    {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint expects {} landmarks with inter-ocular pair {:?}; rig has {} with {:?}",
            cfg.tokens_in,
            cfg.interocular_pair,
            template.landmarks.len(),
            template.landmarks.interocular()
        )));
    }
    let map = &template.landmarks;
    let baseline_w = match &opts.baseline_coefficients {
        Some(w) if w.len() == template.shapes.len() => w.clone(),
        Some(w) => {
            return Err(Error::CoefficientCount {
                expected: template.shapes.len(),
                got: w.len(),
            })
        }
        None => vec![0.0; template.shapes.len()],
    };
    let rows = holdout
        .samples
        .par_iter()
        .map(|s| {
            let basis = bank.get(s.identity_id).ok_or_else(|| {
                Error::Config(format!(
                    "identity {} is not in the identity bank",
                    s.identity_id
                ))
            })?;
            let cam = holdout
                .header
                .cameras
                .get(s.camera_id as usize)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "sample {} uses unknown camera {}",
                        s.index, s.camera_id
                    ))
                })?;
            let gt = LandmarkSet::from_2d(&s.landmarks2d);
            let out = infer(params, &s.landmarks2d)?;
            let pose = RigidPose {
                r6: out.r6,
                t: s.pose.t,
            };
            let pred =
                LandmarkSet::from_2d(&forward_landmarks(basis, &out.coefficients, &pose, cam)?);
            let model = sample_mne(&pred, &gt, map)?;
            let rot_err = geodesic_distance(&pose.rotation()?, &s.pose.rotation()?).to_degrees();
            let constant =
                LandmarkSet::from_2d(&forward_landmarks(basis, &baseline_w, &pose, cam)?);
            let baseline = sample_mne(&constant, &gt, map)?;
            let fitter = if opts.fitter {
                let fo = FitOptions {
                    target_space: TargetSpace::Projected2d(*cam),
                    ..FitOptions::default()
                };
                let fit = fit_basis(basis, map.interocular(), &gt, &fo, None)?;
                Some(sample_mne(
                    &reconstruct(basis, &fit, &fo.target_space)?,
                    &gt,
                    map,
                )?)
            } else {
                None
            };
            Ok((model, baseline, fitter, rot_err))
        })
        .collect::<Result<Vec<_>>>()?;
    let model: Vec<SampleMne> = rows.iter().map(|r| r.0.clone()).collect();
    let baseline: Vec<SampleMne> = rows.iter().map(|r| r.1.clone()).collect();
    let fitter = if opts.fitter {
        let f: Vec<SampleMne> = rows.iter().filter_map(|r| r.2.clone()).collect();
        Some(MneReport::from_samples(&f, map)?)
    } else {
        None
    };
    Ok(EvalReport {
        holdout_count: rows.len(),
        checkpoint_hash: params.content_hash(),
        model: MneReport::from_samples(&model, map)?,
        model_rotation_error_deg: rows.iter().map(|r| r.3).sum::<f64>() / rows.len() as f64,
        baseline: MneReport::from_samples(&baseline, map)?,
        baseline_coefficients: baseline_w,
        fitter,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 10.0);
        assert_eq!(percentile(&v, 95.0), 19.0);
        assert_eq!(percentile(&v, 100.0), 20.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }
}

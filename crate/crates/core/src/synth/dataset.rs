//! Synthetic (landmarks, coefficients) pairs.
//!
//! A dataset file is JSON lines: one header record followed by one record
//! per sample, in sample-index order.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::defxfer::{transfer_rig_with, TransferOptions};
use crate::error::{Error, Result};
use crate::geometry::{euler_xyz, Camera, RigidPose};
use crate::mesh::Vec3;
use crate::prior::PriorSpec;
use crate::rig::{BlendshapeRig, CoefficientVector, LandmarkBasis};
use crate::seed;

use super::{make_identity_with, TemplateConfig, IDENTITY_AMPLITUDE};

pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSample {
    pub index: u64,
    pub identity_id: u64,
    pub camera_id: u32,
    pub coefficients: CoefficientVector,
    pub pose: RigidPose,
    pub landmarks2d: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub kind: String,
    pub schema_version: u32,
    pub seed: u64,
    pub sample_offset: u64,
    pub count: u64,
    pub identity_offset: u64,
    pub identity_count: u64,
    pub identity_amplitude: f64,
    pub rotation_range_deg: f64,
    pub translation_box: [[f64; 3]; 2],
    pub names: Vec<String>,
    pub interocular_pair: [usize; 2],
    pub cameras: Vec<Camera>,
    pub template: TemplateConfig,
    pub template_hash: String,
    pub prior_hash: String,
    pub pose_resamples: u64,
}

impl DatasetHeader {
    /// Half-open sample index range covered by the file.
    pub fn sample_range(&self) -> std::ops::Range<u64> {
        self.sample_offset..self.sample_offset + self.count
    }

    pub fn identity_range(&self) -> std::ops::Range<u64> {
        self.identity_offset..self.identity_offset + self.identity_count
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<DataSample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetOptions {
    pub identities: u64,
    pub identity_offset: u64,
    pub sample_offset: u64,
    pub identity_amplitude: f64,
    pub rotation_range_deg: f64,
    /// Lower and upper corners of the translation box, model units.
    pub translation_box: [[f64; 3]; 2],
    pub transfer: TransferOptions,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            identities: 200,
            identity_offset: 0,
            sample_offset: 0,
            identity_amplitude: IDENTITY_AMPLITUDE,
            rotation_range_deg: 30.0,
            translation_box: [[-0.3, -0.3, -0.5], [0.3, 0.3, 0.5]],
            transfer: TransferOptions::default(),
        }
    }
}

/// Landmark bases of procedurally generated identities, each with the
/// template's blendshapes transferred onto it.
#[derive(Debug, Clone)]
pub struct IdentityBank {
    offset: u64,
    bases: Vec<LandmarkBasis>,
}

impl IdentityBank {
    pub fn build(
        template: &BlendshapeRig,
        root_seed: u64,
        offset: u64,
        count: u64,
        amplitude: f64,
        transfer: TransferOptions,
    ) -> Result<Self> {
        let bases = (offset..offset + count)
            .into_par_iter()
            .map(|id| {
                Ok(identity_rig(template, root_seed, id, amplitude, transfer)?.landmark_basis())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { offset, bases })
    }

    pub fn get(&self, identity_id: u64) -> Option<&LandmarkBasis> {
        identity_id
            .checked_sub(self.offset)
            .and_then(|i| self.bases.get(i as usize))
    }

    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }

    pub fn ids(&self) -> std::ops::Range<u64> {
        self.offset..self.offset + self.bases.len() as u64
    }
}

/// Full rig of one identity: its neutral plus transferred blendshapes.
pub fn identity_rig(
    template: &BlendshapeRig,
    root_seed: u64,
    identity_id: u64,
    amplitude: f64,
    transfer: TransferOptions,
) -> Result<BlendshapeRig> {
    let neutral = make_identity_with(
        template,
        seed::derive(root_seed, seed::stream::IDENTITY, identity_id),
        amplitude,
    );
    transfer_rig_with(template, &neutral, transfer)
}

/// Poses the landmark blend and projects it to pixels.
pub fn forward_landmarks(
    basis: &LandmarkBasis,
    w: &[f64],
    pose: &RigidPose,
    cam: &Camera,
) -> Result<Vec<[f64; 2]>> {
    let pts = basis.evaluate(w)?;
    let posed = crate::geometry::apply_rigid(&pts, pose)?;
    cam.project_world(&posed)
}

fn random_pose(rng: &mut impl Rng, range_deg: f64, tbox: &[[f64; 3]; 2]) -> RigidPose {
    let r = range_deg.to_radians();
    let mut angle = || {
        if r > 0.0 {
            rng.random_range(-r..=r)
        } else {
            0.0
        }
    };
    let rot = euler_xyz(angle(), angle(), angle());
    let t = Vec3::from_fn(|i, _| {
        let (lo, hi) = (tbox[0][i], tbox[1][i]);
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    });
    RigidPose::from_rotation(&rot, t)
}

const MAX_POSE_RESAMPLES: u32 = 1000;

/// Generates `n` samples with indices `sample_offset..sample_offset + n`.
///
/// Sample `i` draws everything from its own counter-derived RNG stream, so
/// the output is identical for any thread count.
pub fn generate_dataset(
    n: u64,
    template: &BlendshapeRig,
    template_cfg: &TemplateConfig,
    prior: &PriorSpec,
    cam: &Camera,
    root_seed: u64,
    opts: &DatasetOptions,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    if opts.identities == 0 {
        return Err(Error::Config("at least one identity is required".into()));
    }
    cam.validate()?;
    let bank = IdentityBank::build(
        template,
        root_seed,
        opts.identity_offset,
        opts.identities,
        opts.identity_amplitude,
        opts.transfer,
    )?;
    let generated = (opts.sample_offset..opts.sample_offset + n)
        .into_par_iter()
        .map(|index| {
            let mut rng = seed::rng(root_seed, seed::stream::SAMPLE, index);
            let identity_id = opts.identity_offset + rng.random_range(0..opts.identities);
            let coefficients = prior.sample(&mut rng);
            let basis = bank.get(identity_id).expect("identity within bank");
            let mut resamples = 0u64;
            loop {
                let pose = random_pose(&mut rng, opts.rotation_range_deg, &opts.translation_box);
                match forward_landmarks(basis, &coefficients, &pose, cam) {
                    Ok(landmarks2d) => {
                        return Ok((
                            DataSample {
                                index,
                                identity_id,
                                camera_id: 0,
                                coefficients,
                                pose,
                                landmarks2d,
                            },
                            resamples,
                        ))
                    }
                    Err(Error::BehindCamera { .. }) if resamples < MAX_POSE_RESAMPLES as u64 => {
                        resamples += 1
                    }
                    Err(e) => return Err(e),
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let pose_resamples = generated.iter().map(|g| g.1).sum();
    let samples = generated.into_iter().map(|g| g.0).collect();
    Ok(Dataset {
        header: DatasetHeader {
            kind: "blendrig-dataset".into(),
            schema_version: DATASET_VERSION,
            seed: root_seed,
            sample_offset: opts.sample_offset,
            count: n,
            identity_offset: opts.identity_offset,
            identity_count: opts.identities,
            identity_amplitude: opts.identity_amplitude,
            rotation_range_deg: opts.rotation_range_deg,
            translation_box: opts.translation_box,
            names: template.names.names().to_vec(),
            interocular_pair: template.landmarks.interocular(),
            cameras: vec![*cam],
            template: template_cfg.clone(),
            template_hash: template.content_hash(),
            prior_hash: prior.content_hash(),
            pose_resamples,
        },
        samples,
    })
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &ds.header)?;
    w.write_all(b"\n").map_err(io)?;
    for s in &ds.samples {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::parse(path.display(), "empty dataset file"))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&first)
        .map_err(|e| Error::parse(path.display(), format!("header: {e}")))?;
    if header.schema_version != DATASET_VERSION {
        return Err(Error::parse(
            path.display(),
            format!("unsupported schema_version {}", header.schema_version),
        ));
    }
    let mut samples = Vec::with_capacity(header.count as usize);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: DataSample = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path.display(), format!("record {}: {e}", i + 1)))?;
        samples.push(s);
    }
    if samples.len() as u64 != header.count {
        return Err(Error::parse(
            path.display(),
            format!(
                "header announces {} samples, found {}",
                header.count,
                samples.len()
            ),
        ));
    }
    Ok(Dataset { header, samples })
}

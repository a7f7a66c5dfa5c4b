//! Blendshape rigs, coefficient vectors and landmark sets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};
use crate::names::{NameRegistry, NUM_BLENDSHAPES};

/// Number of contour landmarks tracked on every face.
pub const NUM_LANDMARKS: usize = 146;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Lips,
    Eyes,
    Brows,
    Irises,
    Oval,
}

impl Region {
    pub const ALL: [Region; 5] = [
        Region::Lips,
        Region::Eyes,
        Region::Brows,
        Region::Irises,
        Region::Oval,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Region::Lips => "lips",
            Region::Eyes => "eyes",
            Region::Brows => "brows",
            Region::Irises => "irises",
            Region::Oval => "oval",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Region::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::InvalidLandmarkMap(format!("unknown region '{s}'")))
    }
}

/// Vertex indices of the tracked landmarks, their region tags, and the two
/// outer eye corners (positions in the landmark list) that define the
/// inter-ocular distance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LandmarkMap {
    indices: Vec<usize>,
    regions: Vec<Region>,
    interocular: [usize; 2],
}

impl LandmarkMap {
    pub fn new(indices: Vec<usize>, regions: Vec<Region>, interocular: [usize; 2]) -> Result<Self> {
        if indices.len() != NUM_LANDMARKS || regions.len() != NUM_LANDMARKS {
            return Err(Error::InvalidLandmarkMap(format!(
                "expected {NUM_LANDMARKS} landmarks, got {} indices / {} regions",
                indices.len(),
                regions.len()
            )));
        }
        for &p in &interocular {
            if p >= NUM_LANDMARKS || regions[p] != Region::Eyes {
                return Err(Error::InvalidLandmarkMap(format!(
                    "inter-ocular landmark {p} must be an eyes-region landmark"
                )));
            }
        }
        if interocular[0] == interocular[1] {
            return Err(Error::InvalidLandmarkMap(
                "inter-ocular pair must be two distinct landmarks".into(),
            ));
        }
        Ok(Self {
            indices,
            regions,
            interocular,
        })
    }

    /// Checks every index against a mesh vertex count.
    pub fn validate_for(&self, vertex_count: usize) -> Result<()> {
        if let Some((k, &i)) = self
            .indices
            .iter()
            .enumerate()
            .find(|(_, &i)| i >= vertex_count)
        {
            return Err(Error::InvalidLandmarkMap(format!(
                "landmark {k} references vertex {i} but the mesh has {vertex_count}"
            )));
        }
        Ok(())
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn interocular(&self) -> [usize; 2] {
        self.interocular
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn region_members(&self, region: Region) -> Vec<usize> {
        (0..self.len())
            .filter(|&k| self.regions[k] == region)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Dim {
    Two,
    Three,
}

impl Dim {
    pub fn stride(self) -> usize {
        match self {
            Dim::Two => 2,
            Dim::Three => 3,
        }
    }
}

impl TryFrom<u8> for Dim {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            2 => Ok(Dim::Two),
            3 => Ok(Dim::Three),
            _ => Err(format!("dimensionality must be 2 or 3, got {v}")),
        }
    }
}

impl From<Dim> for u8 {
    fn from(d: Dim) -> u8 {
        d.stride() as u8
    }
}

/// Ordered landmark coordinates, aligned with a [`LandmarkMap`].
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    dim: Dim,
    coords: Vec<f64>,
}

impl LandmarkSet {
    pub fn from_3d(points: &[Vec3]) -> Self {
        Self {
            dim: Dim::Three,
            coords: points.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
        }
    }

    pub fn from_2d(points: &[[f64; 2]]) -> Self {
        Self {
            dim: Dim::Two,
            coords: points.iter().flatten().copied().collect(),
        }
    }

    pub fn from_flat(dim: Dim, coords: Vec<f64>) -> Result<Self> {
        if !coords.len().is_multiple_of(dim.stride()) {
            return Err(Error::DimensionMismatch(format!(
                "{} values is not a multiple of {}",
                coords.len(),
                dim.stride()
            )));
        }
        Ok(Self { dim, coords })
    }

    pub fn dim(&self) -> Dim {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim.stride()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        let s = self.dim.stride();
        &self.coords[i * s..(i + 1) * s]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn points_3d(&self) -> Result<Vec<Vec3>> {
        if self.dim != Dim::Three {
            return Err(Error::DimensionMismatch("expected 3D landmarks".into()));
        }
        Ok(self
            .coords
            .chunks_exact(3)
            .map(|c| Vec3::new(c[0], c[1], c[2]))
            .collect())
    }

    pub fn points_2d(&self) -> Result<Vec<[f64; 2]>> {
        if self.dim != Dim::Two {
            return Err(Error::DimensionMismatch("expected 2D landmarks".into()));
        }
        Ok(self.coords.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.point(a)
            .iter()
            .zip(self.point(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

/// One weight per blendshape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct CoefficientVector(Vec<f64>);

impl CoefficientVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.len() != NUM_BLENDSHAPES {
            return Err(Error::CoefficientCount {
                expected: NUM_BLENDSHAPES,
                got: w.len(),
            });
        }
        Ok(Self(w))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; NUM_BLENDSHAPES])
    }

    pub fn one_hot(i: usize, value: f64) -> Self {
        let mut w = vec![0.0; NUM_BLENDSHAPES];
        w[i] = value;
        Self(w)
    }

    pub fn clipped(&self) -> Self {
        Self(self.0.iter().map(|v| v.clamp(0.0, 1.0)).collect())
    }

    pub fn in_unit_box(&self) -> bool {
        self.0.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for CoefficientVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::DerefMut for CoefficientVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl TryFrom<Vec<f64>> for CoefficientVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<CoefficientVector> for Vec<f64> {
    fn from(c: CoefficientVector) -> Self {
        c.0
    }
}

/// Evaluates `b0 + sum_i w_i (b_i - b0)` written as the affine combination
/// `(1 - sum w) b0 + sum w_i b_i`, which reproduces `b0` and every `b_i`
/// exactly for zero and one-hot weights.
fn blend(neutral: &[Vec3], shapes: &[&[Vec3]], w: &[f64]) -> Vec<Vec3> {
    let rest: f64 = 1.0 - w.iter().sum::<f64>();
    let mut out: Vec<Vec3> = neutral.iter().map(|v| v * rest).collect();
    for (shape, &wi) in shapes.iter().zip(w) {
        if wi == 0.0 {
            continue;
        }
        for (o, s) in out.iter_mut().zip(shape.iter()) {
            *o += s * wi;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlendshapeRig {
    pub neutral: Mesh,
    pub shapes: Vec<Mesh>,
    pub names: NameRegistry,
    pub landmarks: LandmarkMap,
}

impl BlendshapeRig {
    pub fn new(
        neutral: Mesh,
        shapes: Vec<Mesh>,
        names: NameRegistry,
        landmarks: LandmarkMap,
    ) -> Result<Self> {
        let rig = Self {
            neutral,
            shapes,
            names,
            landmarks,
        };
        rig.validate()?;
        Ok(rig)
    }

    pub fn validate(&self) -> Result<()> {
        self.neutral.validate()?;
        if self.shapes.len() != NUM_BLENDSHAPES {
            return Err(Error::InvalidRig(format!(
                "expected {NUM_BLENDSHAPES} shapes, got {}",
                self.shapes.len()
            )));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if !s.same_topology(&self.neutral) {
                return Err(Error::InvalidRig(format!(
                    "shape '{}' does not share the neutral topology",
                    self.names.name(i)
                )));
            }
        }
        self.landmarks.validate_for(self.neutral.vertices.len())
    }

    /// Reconstructs an expression mesh from 52 weights.
    pub fn apply_expression(&self, w: &[f64]) -> Result<Mesh> {
        check_count(w)?;
        let shapes: Vec<&[Vec3]> = self.shapes.iter().map(|s| s.vertices.as_slice()).collect();
        Ok(Mesh {
            vertices: blend(&self.neutral.vertices, &shapes, w),
            faces: self.neutral.faces.clone(),
        })
    }

    pub fn shape_by_name(&self, name: &str) -> Result<&Mesh> {
        Ok(&self.shapes[self.names.index_of(name)?])
    }

    /// Landmark positions of the neutral and of every shape, for evaluating
    /// the blend on the landmark subset only.
    pub fn landmark_basis(&self) -> LandmarkBasis {
        let pick = |m: &Mesh| {
            self.landmarks
                .indices()
                .iter()
                .map(|&i| m.vertices[i])
                .collect::<Vec<_>>()
        };
        LandmarkBasis {
            neutral: pick(&self.neutral),
            shapes: self.shapes.iter().map(pick).collect(),
        }
    }

    pub fn neutral_landmarks(&self) -> LandmarkSet {
        extract_landmarks(&self.neutral, &self.landmarks).expect("rig invariants hold")
    }

    /// SHA-256 over names, landmark map, faces and vertex bit patterns.
    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for n in self.names.names() {
            h.update(n.as_bytes());
            h.update([0]);
        }
        for (&i, r) in self
            .landmarks
            .indices()
            .iter()
            .zip(self.landmarks.regions())
        {
            h.update((i as u64).to_le_bytes());
            h.update(r.as_str().as_bytes());
        }
        for f in &self.neutral.faces {
            for &i in f {
                h.update((i as u64).to_le_bytes());
            }
        }
        for m in std::iter::once(&self.neutral).chain(&self.shapes) {
            for v in &m.vertices {
                for c in v.iter() {
                    h.update(c.to_bits().to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }
}

fn check_count(w: &[f64]) -> Result<()> {
    if w.len() != NUM_BLENDSHAPES {
        return Err(Error::CoefficientCount {
            expected: NUM_BLENDSHAPES,
            got: w.len(),
        });
    }
    Ok(())
}

/// The blend restricted to landmark vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkBasis {
    pub neutral: Vec<Vec3>,
    pub shapes: Vec<Vec<Vec3>>,
}

impl LandmarkBasis {
    pub fn evaluate(&self, w: &[f64]) -> Result<Vec<Vec3>> {
        if w.len() != self.shapes.len() {
            return Err(Error::CoefficientCount {
                expected: self.shapes.len(),
                got: w.len(),
            });
        }
        let shapes: Vec<&[Vec3]> = self.shapes.iter().map(|s| s.as_slice()).collect();
        Ok(blend(&self.neutral, &shapes, w))
    }

    /// `shape_i - neutral` per landmark: the derivative of the blend with
    /// respect to `w_i`.
    pub fn deltas(&self) -> Vec<Vec<Vec3>> {
        self.shapes
            .iter()
            .map(|s| s.iter().zip(&self.neutral).map(|(a, b)| a - b).collect())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.neutral.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neutral.is_empty()
    }
}

pub fn extract_landmarks(mesh: &Mesh, map: &LandmarkMap) -> Result<LandmarkSet> {
    map.validate_for(mesh.vertices.len())?;
    let pts: Vec<Vec3> = map.indices().iter().map(|&i| mesh.vertices[i]).collect();
    Ok(LandmarkSet::from_3d(&pts))
}

// ---- manifest ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LandmarkEntry {
    pub index: usize,
    pub region: Region,
}

/// On-disk rig description. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigManifest {
    pub schema_version: u32,
    pub neutral: PathBuf,
    pub shapes: Vec<ShapeEntry>,
    pub landmarks: Vec<LandmarkEntry>,
    /// Positions in `landmarks` of the left and right outer eye corners.
    pub interocular_pair: [usize; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

pub const MANIFEST_VERSION: u32 = 1;

impl BlendshapeRig {
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let m: RigManifest = serde_json::from_str(&text)
            .map_err(|e| Error::parse(manifest_path.display(), e.to_string()))?;
        if m.schema_version != MANIFEST_VERSION {
            return Err(Error::parse(
                manifest_path.display(),
                format!("unsupported schema_version {}", m.schema_version),
            ));
        }
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let neutral = Mesh::read_obj(&base.join(&m.neutral))?;
        let mut shapes = Vec::with_capacity(m.shapes.len());
        let mut names = Vec::with_capacity(m.shapes.len());
        for e in &m.shapes {
            shapes.push(Mesh::read_obj(&base.join(&e.path))?);
            names.push(e.name.clone());
        }
        let map = LandmarkMap::new(
            m.landmarks.iter().map(|l| l.index).collect(),
            m.landmarks.iter().map(|l| l.region).collect(),
            m.interocular_pair,
        )?;
        BlendshapeRig::new(neutral, shapes, NameRegistry::new(names)?, map)
    }

    /// Writes `neutral.obj`, `shapes/<name>.obj` and the manifest into `dir`.
    pub fn save(
        &self,
        dir: &Path,
        manifest_name: &str,
        provenance: Option<serde_json::Value>,
    ) -> Result<PathBuf> {
        let shape_dir = dir.join("shapes");
        std::fs::create_dir_all(&shape_dir).map_err(|e| Error::io(&shape_dir, e))?;
        self.neutral
            .write_obj(&dir.join("neutral.obj"), Some("neutral"))?;
        let mut shapes = Vec::with_capacity(self.shapes.len());
        for (i, s) in self.shapes.iter().enumerate() {
            let name = self.names.name(i);
            let rel = PathBuf::from("shapes").join(format!("{name}.obj"));
            s.write_obj(&dir.join(&rel), Some(name))?;
            shapes.push(ShapeEntry {
                name: name.to_string(),
                path: rel,
            });
        }
        let manifest = RigManifest {
            schema_version: MANIFEST_VERSION,
            neutral: PathBuf::from("neutral.obj"),
            shapes,
            landmarks: self
                .landmarks
                .indices()
                .iter()
                .zip(self.landmarks.regions())
                .map(|(&index, &region)| LandmarkEntry { index, region })
                .collect(),
            interocular_pair: self.landmarks.interocular(),
            provenance,
        };
        let path = dir.join(manifest_name);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

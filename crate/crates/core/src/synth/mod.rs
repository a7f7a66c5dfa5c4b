//! Procedural face rigs and synthetic training data.
//!
//! The template is the front cap of an ellipsoidal head. Landmark vertices
//! are placed explicitly on feature contours (lips, eyes, brows, irises,
//! face oval), a jittered hexagonal fill covers the rest of the cap, and the
//! cap is triangulated by a planar Delaunay triangulation of the frontal
//! projection. Each blendshape is a sum of smooth, compactly supported
//! Gaussian bumps placed on its facial region.

mod dataset;
mod shapes;

pub use dataset::{
    forward_landmarks, generate_dataset, identity_rig, read_dataset, write_dataset, DataSample,
    Dataset, DatasetHeader, DatasetOptions, IdentityBank, DATASET_VERSION,
};

use delaunator::{triangulate, Point};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::{Mesh, Vec3};
use crate::names::NameRegistry;
use crate::rig::{BlendshapeRig, LandmarkMap, Region, NUM_LANDMARKS};
use crate::seed;

/// Placement of facial features, in model units on the frontal projection
/// (+x is the subject's left, +y up, the face looks down +z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureLayout {
    pub head_radii: [f64; 3],
    /// Fraction of the ellipsoid kept as the face cap (normalized radius).
    pub cap: f64,
    pub eye_center: [f64; 2],
    pub eye_half_size: [f64; 2],
    pub iris_radius: f64,
    pub brow_inner_x: f64,
    pub brow_outer_x: f64,
    pub brow_y: f64,
    pub mouth_center: [f64; 2],
    pub mouth_half_size: [f64; 2],
    pub inner_mouth_half_size: [f64; 2],
    pub oval_center: [f64; 2],
    pub oval_radii: [f64; 2],
}

impl Default for FeatureLayout {
    fn default() -> Self {
        Self {
            head_radii: [0.75, 1.0, 0.85],
            cap: 0.97,
            eye_center: [0.28, 0.2],
            eye_half_size: [0.12, 0.05],
            iris_radius: 0.03,
            brow_inner_x: 0.14,
            brow_outer_x: 0.44,
            brow_y: 0.36,
            mouth_center: [0.0, -0.45],
            mouth_half_size: [0.22, 0.09],
            inner_mouth_half_size: [0.16, 0.03],
            oval_center: [0.0, -0.05],
            oval_radii: [0.62, 0.88],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemplateConfig {
    pub seed: u64,
    /// Approximate total vertex count.
    pub resolution: usize,
    pub layout: FeatureLayout,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            resolution: 600,
            layout: FeatureLayout::default(),
        }
    }
}

pub const MIN_RESOLUTION: usize = 200;

/// Landmark list layout: block offsets into the 146 landmarks.
pub mod landmark_layout {
    pub const LIPS_OUTER: usize = 0;
    pub const LIPS_INNER: usize = 20;
    pub const EYE_LEFT: usize = 40;
    pub const EYE_RIGHT: usize = 56;
    pub const BROW_LEFT: usize = 72;
    pub const BROW_RIGHT: usize = 84;
    pub const IRIS_LEFT: usize = 96;
    pub const IRIS_RIGHT: usize = 101;
    pub const OVAL: usize = 106;
    pub const END: usize = 146;
    /// Outer corner of the left eye (+x side) and of the right eye.
    pub const INTEROCULAR: [usize; 2] = [EYE_LEFT, EYE_RIGHT + 8];
}

fn ellipse(center: [f64; 2], half: [f64; 2], n: usize, start: f64) -> Vec<[f64; 2]> {
    (0..n)
        .map(|k| {
            let t = start + std::f64::consts::TAU * k as f64 / n as f64;
            [center[0] + half[0] * t.cos(), center[1] + half[1] * t.sin()]
        })
        .collect()
}

/// Landmark positions on the frontal projection, in landmark-list order.
fn landmark_positions(l: &FeatureLayout) -> (Vec<[f64; 2]>, Vec<Region>) {
    use std::f64::consts::PI;
    let mut pts = Vec::with_capacity(NUM_LANDMARKS);
    let mut regions = Vec::with_capacity(NUM_LANDMARKS);
    let mut push = |p: Vec<[f64; 2]>, r: Region| {
        regions.extend(std::iter::repeat_n(r, p.len()));
        pts.extend(p);
    };
    push(
        ellipse(l.mouth_center, l.mouth_half_size, 20, 0.0),
        Region::Lips,
    );
    push(
        ellipse(l.mouth_center, l.inner_mouth_half_size, 20, PI / 20.0),
        Region::Lips,
    );
    let [ex, ey] = l.eye_center;
    // Both eye contours start at their outer corner.
    push(ellipse([ex, ey], l.eye_half_size, 16, 0.0), Region::Eyes);
    push(ellipse([-ex, ey], l.eye_half_size, 16, PI), Region::Eyes);
    for side in [1.0, -1.0] {
        let brow: Vec<[f64; 2]> = (0..12)
            .map(|k| {
                let (row, j) = (k / 6, k % 6);
                let u = j as f64 / 5.0;
                let x = l.brow_inner_x + u * (l.brow_outer_x - l.brow_inner_x);
                let arch = 0.03 * (PI * u).sin();
                [side * x, l.brow_y + arch + 0.035 * row as f64]
            })
            .collect();
        push(brow, Region::Brows);
    }
    for side in [1.0, -1.0] {
        let c = [side * ex, ey];
        let mut iris = vec![c];
        iris.extend(ellipse(c, [l.iris_radius; 2], 4, 0.0));
        push(iris, Region::Irises);
    }
    push(
        ellipse(l.oval_center, l.oval_radii, 40, PI / 2.0),
        Region::Oval,
    );
    debug_assert_eq!(pts.len(), NUM_LANDMARKS);
    (pts, regions)
}

fn lift(l: &FeatureLayout, p: [f64; 2]) -> Vec3 {
    let [ax, ay, az] = l.head_radii;
    let q = (p[0] / ax).powi(2) + (p[1] / ay).powi(2);
    Vec3::new(p[0], p[1], az * (1.0 - q).max(0.0).sqrt())
}

fn inside_cap(l: &FeatureLayout, p: [f64; 2], margin: f64) -> bool {
    let [ax, ay, _] = l.head_radii;
    ((p[0] / ax).powi(2) + (p[1] / ay).powi(2)).sqrt() <= l.cap - margin
}

fn boundary_ring(l: &FeatureLayout, n: usize) -> Vec<[f64; 2]> {
    let [ax, ay, _] = l.head_radii;
    ellipse(
        [0.0, 0.0],
        [ax * l.cap, ay * l.cap],
        n,
        std::f64::consts::FRAC_PI_2,
    )
}

fn fill_points(
    l: &FeatureLayout,
    landmarks: &[[f64; 2]],
    h: f64,
    rng: &mut impl Rng,
) -> Vec<[f64; 2]> {
    let [ax, ay, _] = l.head_radii;
    let dy = h * 3f64.sqrt() / 2.0;
    let rows = (ay / dy).ceil() as i64 + 1;
    let cols = (ax / h).ceil() as i64 + 1;
    let min_r = (ax.min(ay)).max(1e-9);
    let mut out = Vec::new();
    for r in -rows..=rows {
        for c in -cols..=cols {
            let shift = if r.rem_euclid(2) == 1 { 0.5 * h } else { 0.0 };
            let base = [c as f64 * h + shift, r as f64 * dy];
            let jitter = [
                rng.random_range(-0.15..0.15) * h,
                rng.random_range(-0.15..0.15) * h,
            ];
            let p = [base[0] + jitter[0], base[1] + jitter[1]];
            if !inside_cap(l, p, 0.6 * h / min_r) {
                continue;
            }
            let near = landmarks
                .iter()
                .any(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() < 0.6 * h);
            if !near {
                out.push(p);
            }
        }
    }
    out
}

/// Builds the procedural template rig. Identical configs give bit-identical
/// rigs.
pub fn make_template(cfg: &TemplateConfig) -> Result<BlendshapeRig> {
    if cfg.resolution < MIN_RESOLUTION {
        return Err(Error::Config(format!(
            "resolution {} is too low to host {NUM_LANDMARKS} distinct landmarks (minimum {MIN_RESOLUTION})",
            cfg.resolution
        )));
    }
    let l = &cfg.layout;
    let (lm, regions) = landmark_positions(l);
    if let Some(k) = lm.iter().position(|&p| !inside_cap(l, p, 0.01)) {
        return Err(Error::Config(format!(
            "landmark {k} falls outside the face cap"
        )));
    }
    let [ax, ay, _] = l.head_radii;
    let area = std::f64::consts::PI * ax * ay * l.cap * l.cap;
    let perimeter = std::f64::consts::PI * (ax + ay) * l.cap;

    // Shrink the fill spacing until the vertex budget is reached.
    let mut h = (area / (cfg.resolution - NUM_LANDMARKS) as f64).sqrt();
    let (ring, fill) = loop {
        let mut rng = seed::rng(cfg.seed, seed::stream::TEMPLATE, 0);
        let ring = boundary_ring(l, ((perimeter / h).round() as usize).max(8));
        let fill = fill_points(l, &lm, h, &mut rng);
        if ring.len() + NUM_LANDMARKS + fill.len() >= cfg.resolution || h < 1e-3 {
            break (ring, fill);
        }
        h *= 0.97;
    };

    let planar: Vec<[f64; 2]> = ring.iter().chain(&lm).chain(&fill).copied().collect();
    let dpts: Vec<Point> = planar.iter().map(|p| Point { x: p[0], y: p[1] }).collect();
    let tri = triangulate(&dpts);
    let mut faces = Vec::with_capacity(tri.triangles.len() / 3);
    for t in tri.triangles.chunks_exact(3) {
        let (a, b, c) = (t[0], t[1], t[2]);
        let (pa, pb, pc) = (planar[a], planar[b], planar[c]);
        let cross = (pb[0] - pa[0]) * (pc[1] - pa[1]) - (pb[1] - pa[1]) * (pc[0] - pa[0]);
        if cross.abs() < 1e-12 {
            continue;
        }
        // Counter-clockwise in the frontal view, so normals face +z.
        faces.push(if cross > 0.0 { [a, b, c] } else { [a, c, b] });
    }
    let vertices: Vec<Vec3> = planar.iter().map(|&p| lift(l, p)).collect();
    let neutral = Mesh::new(vertices, faces)?;

    let lm_offset = ring.len();
    let indices: Vec<usize> = (0..NUM_LANDMARKS).map(|k| lm_offset + k).collect();
    let map = LandmarkMap::new(indices, regions, landmark_layout::INTEROCULAR)?;

    let names = NameRegistry::arkit();
    let shape_meshes = shapes::build_shapes(&neutral, l, &names)?;
    BlendshapeRig::new(neutral, shape_meshes, names, map)
}

/// Default relative amplitude of identity variation.
pub const IDENTITY_AMPLITUDE: f64 = 0.05;

/// A new identity's neutral: the template neutral with a smooth radial
/// deformation whose magnitude is at most `amplitude` times the head radius.
pub fn make_identity(template: &BlendshapeRig, seed: u64) -> Mesh {
    make_identity_with(template, seed, IDENTITY_AMPLITUDE)
}

pub fn make_identity_with(template: &BlendshapeRig, seed: u64, amplitude: f64) -> Mesh {
    let verts = &template.neutral.vertices;
    if amplitude == 0.0 {
        return template.neutral.clone();
    }
    let radius = verts.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let mut rng = seed::rng(seed, seed::stream::IDENTITY, 0);
    // A few low-frequency plane waves over the direction sphere; weights sum
    // to one so the field is bounded by 1.
    let waves: Vec<(Vec3, f64, f64)> = (0..6)
        .map(|_| {
            let dir = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let freq = rng.random_range(0.5..2.5);
            let dir = if dir.norm() > 1e-6 {
                dir.normalize() * freq
            } else {
                Vec3::x() * freq
            };
            (
                dir,
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.2..1.0),
            )
        })
        .collect();
    let total: f64 = waves.iter().map(|w| w.2).sum();
    template.neutral.map_vertices(|v| {
        let n = v.norm();
        if n == 0.0 {
            return *v;
        }
        let u = v / n;
        let field: f64 = waves
            .iter()
            .map(|(k, phase, c)| c * (k.dot(&u) + phase).sin())
            .sum::<f64>()
            / total;
        v + u * (amplitude * radius * field)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_is_deterministic_and_valid() {
        let cfg = TemplateConfig::default();
        let a = make_template(&cfg).unwrap();
        let b = make_template(&cfg).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        assert!(
            (500..800).contains(&a.neutral.vertices.len()),
            "{}",
            a.neutral.vertices.len()
        );
        for f in 0..a.neutral.faces.len() {
            assert!(a.neutral.face_area(f) > 1e-8);
        }
        let mut idx = a.landmarks.indices().to_vec();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), NUM_LANDMARKS);
    }

    #[test]
    fn every_vertex_is_referenced() {
        let a = make_template(&TemplateConfig::default()).unwrap();
        let mut used = vec![false; a.neutral.vertices.len()];
        a.neutral
            .faces
            .iter()
            .flatten()
            .for_each(|&v| used[v] = true);
        assert!(used.iter().all(|&u| u));
    }

    #[test]
    fn low_resolution_is_rejected() {
        let cfg = TemplateConfig {
            resolution: 150,
            ..TemplateConfig::default()
        };
        assert!(matches!(make_template(&cfg), Err(Error::Config(_))));
        let cfg = TemplateConfig {
            resolution: 200,
            ..TemplateConfig::default()
        };
        make_template(&cfg).unwrap();
    }

    #[test]
    fn jaw_open_is_localized_on_the_chin() {
        let rig = make_template(&TemplateConfig::default()).unwrap();
        let jaw = rig.shape_by_name("jawOpen").unwrap();
        let disp: Vec<f64> = jaw
            .vertices
            .iter()
            .zip(&rig.neutral.vertices)
            .map(|(a, b)| (a - b).norm())
            .collect();
        let (argmax, max) =
            disp.iter().enumerate().fold(
                (0, 0.0),
                |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
            );
        assert!(
            rig.neutral.vertices[argmax].y < -0.5,
            "peak at {:?}",
            rig.neutral.vertices[argmax]
        );
        for k in rig.landmarks.region_members(Region::Eyes) {
            assert!(disp[rig.landmarks.indices()[k]] < 0.01 * max);
        }
    }

    #[test]
    fn every_shape_moves_some_landmark() {
        let rig = make_template(&TemplateConfig::default()).unwrap();
        let basis = rig.landmark_basis();
        for (i, d) in basis.deltas().iter().enumerate() {
            let m = d.iter().map(|v| v.norm()).fold(0.0, f64::max);
            assert!(
                m > 5e-3,
                "{} barely moves landmarks ({m})",
                rig.names.name(i)
            );
        }
    }

    #[test]
    fn identities() {
        let rig = make_template(&TemplateConfig::default()).unwrap();
        assert_eq!(make_identity(&rig, 4), make_identity(&rig, 4));
        assert_eq!(make_identity_with(&rig, 4, 0.0), rig.neutral);
        let radius = rig
            .neutral
            .vertices
            .iter()
            .map(|v| v.norm())
            .fold(0.0, f64::max);
        let ids: Vec<Mesh> = (0..100).map(|s| make_identity(&rig, s)).collect();
        for m in &ids {
            assert!(m.same_topology(&rig.neutral));
            assert!(m.max_vertex_distance(&rig.neutral) <= 0.05 * radius + 1e-12);
        }
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                assert!(ids[i].max_vertex_distance(&ids[j]) > 0.0);
            }
        }
    }
}

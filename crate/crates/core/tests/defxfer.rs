use std::sync::OnceLock;

use blendrig_core::defxfer::{
    gradient_field, transfer_blendshape, transfer_rig, triangle_gradient, TransferOptions,
    TransferSystem,
};
use blendrig_core::geometry::euler_xyz;
use blendrig_core::mesh::Face;
use blendrig_core::synth::{make_identity, make_template, TemplateConfig};
use blendrig_core::{BlendshapeRig, Error, Mat3, Mesh, Region, Vec3};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn template() -> &'static BlendshapeRig {
    static RIG: OnceLock<BlendshapeRig> = OnceLock::new();
    RIG.get_or_init(|| make_template(&TemplateConfig::default()).unwrap())
}

fn max_delta_error(got: &Mesh, got_neutral: &Mesh, want: impl Fn(usize) -> Vec3) -> f64 {
    (0..got.vertices.len())
        .map(|v| (got.vertices[v] - got_neutral.vertices[v] - want(v)).norm())
        .fold(0.0, f64::max)
}

/// Gently curved `n x n` sheet.
fn grid(n: usize) -> Mesh {
    let mut verts = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (i as f64 / (n - 1) as f64, j as f64 / (n - 1) as f64);
            verts.push(Vec3::new(x, y, 0.2 * (3.0 * x).sin() * (2.0 * y).cos()));
        }
    }
    let mut faces: Vec<Face> = Vec::new();
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            let a = i * n + j;
            faces.push([a, a + n, a + 1]);
            faces.push([a + 1, a + n, a + n + 1]);
        }
    }
    Mesh::new(verts, faces).unwrap()
}

#[test]
fn triangle_gradient_examples() {
    let rest = [
        Vec3::new(0.1, 0.2, 0.3),
        Vec3::new(1.0, 0.1, -0.2),
        Vec3::new(0.3, 0.9, 0.4),
    ];
    let g = triangle_gradient(&rest, &rest).unwrap();
    assert!((g - Mat3::identity()).abs().max() < 1e-12);
    let scaled = rest.map(|p| 2.0 * p);
    let g = triangle_gradient(&rest, &scaled).unwrap();
    assert!((g - 2.0 * Mat3::identity()).abs().max() < 1e-12);
    let line = [
        Vec3::zeros(),
        Vec3::new(1.0, 0.0, 0.0),
        Vec3::new(2.0, 0.0, 0.0),
    ];
    assert!(matches!(
        triangle_gradient(&line, &rest),
        Err(Error::DegenerateTriangle { .. })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rotated_triangle_gradient_is_the_rotation(
        angles in prop::array::uniform3(-3.0f64..3.0),
        seed in 0u64..10_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = || Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let rest = [p(), p(), p()];
        prop_assume!((rest[1] - rest[0]).cross(&(rest[2] - rest[0])).norm() > 1e-2);
        let r = euler_xyz(angles[0], angles[1], angles[2]);
        let g = triangle_gradient(&rest, &rest.map(|v| r * v)).unwrap();
        prop_assert!((g - r).abs().max() < 1e-9);
    }
}

#[test]
fn identity_transfer_reproduces_every_shape() {
    let rig = template();
    let out = transfer_rig(rig, &rig.neutral).unwrap();
    out.validate().unwrap();
    assert_eq!(out.names, rig.names);
    assert_eq!(out.landmarks, rig.landmarks);
    for (i, (got, want)) in out.shapes.iter().zip(&rig.shapes).enumerate() {
        let err = got.max_vertex_distance(want);
        assert!(err <= 1e-6, "{}: {err}", rig.names.name(i));
    }
}

fn check_equivariance(r: Mat3, k: f64, shift: Vec3) {
    let rig = template();
    let tgt = rig.neutral.map_vertices(|p| k * (r * p) + shift);
    for name in ["jawOpen", "eyeBlinkLeft", "mouthSmileRight", "browInnerUp"] {
        let i = rig.names.index_of(name).unwrap();
        let got = transfer_blendshape(&rig.neutral, &rig.shapes[i], &tgt).unwrap();
        let src = &rig.shapes[i];
        let err = max_delta_error(&got, &tgt, |v| {
            k * (r * (src.vertices[v] - rig.neutral.vertices[v]))
        });
        assert!(err <= 1e-6, "{name}: {err}");
    }
}

#[test]
fn transfer_is_equivariant_under_rotation_and_scale() {
    check_equivariance(euler_xyz(0.4, -0.9, 1.3), 1.0, Vec3::zeros());
    check_equivariance(Mat3::identity(), 2.0, Vec3::zeros());
    check_equivariance(euler_xyz(-1.1, 0.3, 0.2), 0.6, Vec3::zeros());
}

#[test]
fn transfer_is_translation_invariant() {
    check_equivariance(Mat3::identity(), 1.0, Vec3::new(3.0, -2.0, 0.5));
}

/// Dense least squares over free vertices and one free fourth vertex per
/// face, matching every face's full 3x3 gradient.
fn dense_solve(target: &Mesh, grads: &[Mat3], anchor_pos: Vec3) -> Vec<Vec3> {
    let n = target.vertices.len();
    let nf = target.faces.len();
    let cols = (n - 1) + nf;
    let col_of = |v: usize| v - 1;
    let mut out = vec![Vec3::zeros(); n];
    out[0] = anchor_pos;
    for k in 0..3 {
        let mut a = DMatrix::<f64>::zeros(3 * nf, cols);
        let mut b = DVector::<f64>::zeros(3 * nf);
        for (f, face) in target.faces.iter().enumerate() {
            let [p0, p1, p2] = face.map(|v| target.vertices[v]);
            let (e1, e2) = (p1 - p0, p2 - p0);
            let nrm = e1.cross(&e2);
            let e3 = nrm / nrm.norm().sqrt();
            let winv = Mat3::from_columns(&[e1, e2, e3]).try_inverse().unwrap();
            // Row k of D' W^-1, D' = [x1 - x0, x2 - x0, v4 - x0].
            for c in 0..3 {
                let row = 3 * f + c;
                let coeffs = [
                    (Some(face[0]), -(winv[(0, c)] + winv[(1, c)] + winv[(2, c)])),
                    (Some(face[1]), winv[(0, c)]),
                    (Some(face[2]), winv[(1, c)]),
                    (None, winv[(2, c)]),
                ];
                let mut rhs = grads[f][(k, c)];
                for (v, w) in coeffs {
                    match v {
                        Some(0) => rhs -= w * anchor_pos[k],
                        Some(v) => a[(row, col_of(v))] += w,
                        None => a[(row, (n - 1) + f)] += w,
                    }
                }
                b[row] = rhs;
            }
        }
        let x = a.svd(true, true).solve(&b, 1e-14).unwrap();
        for v in 1..n {
            out[v][k] = x[col_of(v)];
        }
    }
    out
}

#[test]
fn conjugate_gradient_matches_dense_solve() {
    let mesh = grid(14);
    assert!(mesh.vertices.len() <= 300);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // A smooth deformation plus per-face noise, so the system is not
    // exactly consistent.
    let deformed =
        mesh.map_vertices(|p| Vec3::new(p.x + 0.1 * p.y * p.y, p.y, p.z + 0.3 * p.x * p.y));
    let grads: Vec<Mat3> = gradient_field(&mesh, &deformed)
        .unwrap()
        .into_iter()
        .map(|g| g + Mat3::from_fn(|_, _| rng.random_range(-0.05..0.05)))
        .collect();
    let anchor = deformed.vertices[0];
    let system = TransferSystem::new(&mesh).unwrap();
    assert_eq!(system.anchor(), 0);
    let opts = TransferOptions::default();
    let (cg, stats) = system.solve(&grads, anchor, &mesh.vertices, &opts).unwrap();
    assert!(stats.relative_residual <= 1e-8);
    let dense = dense_solve(&mesh, &grads, anchor);
    let num: f64 = cg
        .iter()
        .zip(&dense)
        .map(|(a, b)| (a - b).norm_squared())
        .sum::<f64>()
        .sqrt();
    let den: f64 = dense.iter().map(|p| p.norm_squared()).sum::<f64>().sqrt();
    assert!(num / den <= 1e-8, "relative difference {}", num / den);
}

#[test]
fn transferred_blink_moves_eyelids_more_than_lips() {
    let rig = template();
    let identity = make_identity(rig, 17);
    let out = transfer_rig(rig, &identity).unwrap();
    out.validate().unwrap();
    let i = rig.names.index_of("eyeBlinkLeft").unwrap();
    let disp = |region: Region| {
        rig.landmarks
            .region_members(region)
            .iter()
            .map(|&k| {
                let v = rig.landmarks.indices()[k];
                (out.shapes[i].vertices[v] - out.neutral.vertices[v]).norm()
            })
            .fold(0.0, f64::max)
    };
    assert!(
        disp(Region::Eyes) > 10.0 * disp(Region::Lips),
        "{} vs {}",
        disp(Region::Eyes),
        disp(Region::Lips)
    );
}

#[test]
fn invalid_inputs_are_reported() {
    let rig = template();
    let small = grid(5);
    assert!(matches!(
        transfer_blendshape(&rig.neutral, &rig.shapes[0], &small),
        Err(Error::TopologyMismatch(_))
    ));
    let mut flat = rig.neutral.clone();
    let [a, b, c] = flat.faces[10];
    flat.vertices[b] = flat.vertices[a];
    flat.vertices[c] = flat.vertices[a];
    let err = transfer_blendshape(&rig.neutral, &rig.shapes[0], &flat).unwrap_err();
    assert!(matches!(err, Error::DegenerateTriangle { .. }), "{err}");
    let tight = TransferOptions {
        max_iters: 1,
        ..TransferOptions::default()
    };
    let err = TransferSystem::new(&rig.neutral)
        .unwrap()
        .solve(
            &gradient_field(&rig.neutral, &rig.shapes[24]).unwrap(),
            rig.neutral.vertices[0],
            &rig.neutral.vertices,
            &tight,
        )
        .unwrap_err();
    assert!(matches!(err, Error::CgNotConverged { .. }), "{err}");
}

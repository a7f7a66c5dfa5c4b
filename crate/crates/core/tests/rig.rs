use std::sync::OnceLock;

use blendrig_core::geometry::{euler_xyz, geodesic_distance, rotation_to_rot6d};
use blendrig_core::synth::{make_template, TemplateConfig};
use blendrig_core::{
    apply_rigid, extract_landmarks, project, rot6d_to_rotation, BlendshapeRig, Camera, Error, Mat3,
    Mesh, RigidPose, Vec3,
};
use proptest::prelude::*;

fn template() -> &'static BlendshapeRig {
    static RIG: OnceLock<BlendshapeRig> = OnceLock::new();
    RIG.get_or_init(|| make_template(&TemplateConfig::default()).unwrap())
}

#[test]
fn zero_and_one_hot_weights_are_exact() {
    let rig = template();
    assert_eq!(rig.apply_expression(&[0.0; 52]).unwrap(), rig.neutral);
    for i in 0..52 {
        let mut w = [0.0; 52];
        w[i] = 1.0;
        assert_eq!(
            rig.apply_expression(&w).unwrap().vertices,
            rig.shapes[i].vertices,
            "shape {i}"
        );
    }
}

#[test]
fn half_weight_is_the_midpoint() {
    let rig = template();
    let i = rig.names.index_of("jawOpen").unwrap();
    let mut w = [0.0; 52];
    w[i] = 0.5;
    let m = rig.apply_expression(&w).unwrap();
    for (v, (n, s)) in m
        .vertices
        .iter()
        .zip(rig.neutral.vertices.iter().zip(&rig.shapes[i].vertices))
    {
        assert!((v - (n + s) * 0.5).norm() < 1e-15);
    }
    assert_eq!(m.faces, rig.neutral.faces);
}

#[test]
fn wrong_coefficient_count_is_rejected() {
    assert!(matches!(
        template().apply_expression(&[0.0; 51]),
        Err(Error::CoefficientCount {
            expected: 52,
            got: 51
        })
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn blend_is_linear(
        w1 in prop::collection::vec(0.0f64..1.0, 52),
        w2 in prop::collection::vec(0.0f64..1.0, 52),
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
    ) {
        let rig = template();
        let n = &rig.neutral.vertices;
        let d = |w: &[f64]| -> Vec<Vec3> {
            rig.apply_expression(w).unwrap().vertices.iter().zip(n).map(|(v, n)| v - n).collect()
        };
        let mix: Vec<f64> = w1.iter().zip(&w2).map(|(x, y)| a * x + b * y).collect();
        let got = rig.apply_expression(&mix).unwrap();
        let (d1, d2) = (d(&w1), d(&w2));
        for v in 0..n.len() {
            let want = n[v] + d1[v] * a + d2[v] * b;
            prop_assert!((got.vertices[v] - want).norm() < 1e-12);
        }
    }

    #[test]
    fn decoded_rotations_are_orthonormal(r6 in prop::array::uniform6(-10.0f64..10.0)) {
        let a1 = Vec3::new(r6[0], r6[1], r6[2]);
        let a2 = Vec3::new(r6[3], r6[4], r6[5]);
        prop_assume!(a1.norm() > 1e-3 && a1.cross(&a2).norm() > 1e-3 * a1.norm() * a2.norm());
        let r = rot6d_to_rotation(&r6).unwrap();
        prop_assert!((r.transpose() * r - Mat3::identity()).abs().max() < 1e-9);
        prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn decoding_ignores_positive_column_scale(
        r6 in prop::array::uniform6(-10.0f64..10.0),
        s1 in 0.01f64..100.0,
        s2 in 0.01f64..100.0,
    ) {
        let a1 = Vec3::new(r6[0], r6[1], r6[2]);
        let a2 = Vec3::new(r6[3], r6[4], r6[5]);
        prop_assume!(a1.norm() > 1e-3 && a1.cross(&a2).norm() > 1e-3 * a1.norm() * a2.norm());
        let scaled: [f64; 6] = std::array::from_fn(|i| r6[i] * if i < 3 { s1 } else { s2 });
        let r = rot6d_to_rotation(&r6).unwrap();
        prop_assert!((rot6d_to_rotation(&scaled).unwrap() - r).abs().max() < 1e-9);
    }

    #[test]
    fn pose_then_inverse_is_identity(
        angles in prop::array::uniform3(-3.0f64..3.0),
        t in prop::array::uniform3(-2.0f64..2.0),
    ) {
        let pose = RigidPose::from_rotation(&euler_xyz(angles[0], angles[1], angles[2]), Vec3::new(t[0], t[1], t[2]));
        let pts = template().neutral_landmarks().points_3d().unwrap();
        let back = apply_rigid(&apply_rigid(&pts, &pose).unwrap(), &pose.inverse().unwrap()).unwrap();
        for (a, b) in back.iter().zip(&pts) {
            prop_assert!((a - b).norm() < 1e-9);
        }
    }

    #[test]
    fn extraction_commutes_with_rigid_motion(angles in prop::array::uniform3(-3.0f64..3.0)) {
        let rig = template();
        let pose = RigidPose::from_rotation(&euler_xyz(angles[0], angles[1], angles[2]), Vec3::new(0.1, 0.2, -0.3));
        let moved = Mesh::new(apply_rigid(&rig.neutral.vertices, &pose).unwrap(), rig.neutral.faces.clone()).unwrap();
        let a = extract_landmarks(&moved, &rig.landmarks).unwrap().points_3d().unwrap();
        let b = apply_rigid(&rig.neutral_landmarks().points_3d().unwrap(), &pose).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn rotation_examples() {
    assert_eq!(
        rot6d_to_rotation(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap(),
        Mat3::identity()
    );
    assert_eq!(
        rot6d_to_rotation(&[2.0, 0.0, 0.0, 0.0, 3.0, 0.0]).unwrap(),
        Mat3::identity()
    );
    assert!(matches!(
        rot6d_to_rotation(&[0.0; 6]),
        Err(Error::DegenerateRotation(_))
    ));
    assert!(matches!(
        rot6d_to_rotation(&[1.0, 0.0, 0.0, 2.0, 0.0, 0.0]),
        Err(Error::DegenerateRotation(_))
    ));
    let r = euler_xyz(0.3, -1.0, 2.0);
    let back = rot6d_to_rotation(&rotation_to_rot6d(&r)).unwrap();
    assert!(geodesic_distance(&r, &back) < 1e-9);
}

#[test]
fn rigid_examples() {
    let p = [Vec3::new(1.0, 0.0, 0.0), Vec3::new(-0.5, 2.0, 3.0)];
    assert_eq!(apply_rigid(&p, &RigidPose::identity()).unwrap(), p.to_vec());
    let quarter = RigidPose::from_rotation(
        &euler_xyz(0.0, 0.0, std::f64::consts::FRAC_PI_2),
        Vec3::zeros(),
    );
    let out = apply_rigid(&p[..1], &quarter).unwrap();
    assert!((out[0] - Vec3::new(0.0, 1.0, 0.0)).norm() < 1e-15);
}

#[test]
fn projection_examples() {
    let cam = Camera {
        fx: 100.0,
        fy: 100.0,
        cx: 50.0,
        cy: 50.0,
        ..Camera::default()
    };
    let out = project(&[Vec3::new(0.0, 0.0, 2.0), Vec3::new(1.0, 0.0, 2.0)], &cam).unwrap();
    assert_eq!(out, vec![[50.0, 50.0], [100.0, 50.0]]);
    assert!(matches!(
        project(&[Vec3::new(0.0, 0.0, 2.0), Vec3::new(0.0, 0.0, -1.0)], &cam),
        Err(Error::BehindCamera { index: 1, .. })
    ));
}

#[test]
fn identity_pose_does_not_change_projection() {
    let cam = Camera::default();
    let pts = template().neutral_landmarks().points_3d().unwrap();
    let a = cam.project_world(&pts).unwrap();
    let b = cam
        .project_world(&apply_rigid(&pts, &RigidPose::identity()).unwrap())
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn extraction_is_index_selection() {
    let rig = template();
    let set = rig.neutral_landmarks();
    assert_eq!(set.len(), 146);
    for (k, &v) in rig.landmarks.indices().iter().enumerate() {
        assert_eq!(set.point(k), rig.neutral.vertices[v].as_slice());
    }
    assert_eq!(
        extract_landmarks(&rig.apply_expression(&[0.0; 52]).unwrap(), &rig.landmarks).unwrap(),
        set
    );
    // Moving every non-landmark vertex leaves the set unchanged.
    let mut moved = rig.neutral.clone();
    for (v, p) in moved.vertices.iter_mut().enumerate() {
        if !rig.landmarks.indices().contains(&v) {
            *p += Vec3::new(0.3, -0.1, 0.7);
        }
    }
    assert_eq!(extract_landmarks(&moved, &rig.landmarks).unwrap(), set);
    let tiny = Mesh::new(rig.neutral.vertices[..10].to_vec(), vec![[0, 1, 2]]).unwrap();
    assert!(matches!(
        extract_landmarks(&tiny, &rig.landmarks),
        Err(Error::InvalidLandmarkMap(_))
    ));
}

#[test]
fn manifest_round_trip() {
    let rig = template();
    let dir = tempfile::tempdir().unwrap();
    let path = rig.save(dir.path(), "rig.json", None).unwrap();
    let back = BlendshapeRig::load(&path).unwrap();
    assert_eq!(back.names, rig.names);
    assert_eq!(back.landmarks, rig.landmarks);
    assert_eq!(back.neutral.faces, rig.neutral.faces);
    for (a, b) in std::iter::once(&back.neutral)
        .chain(&back.shapes)
        .zip(std::iter::once(&rig.neutral).chain(&rig.shapes))
    {
        assert!(a.max_vertex_distance(b) < 1e-5);
    }
    // Saving the reloaded rig reproduces the files byte for byte.
    let dir2 = tempfile::tempdir().unwrap();
    back.save(dir2.path(), "rig.json", None).unwrap();
    for rel in ["rig.json", "neutral.obj", "shapes/jawOpen.obj"] {
        assert_eq!(
            std::fs::read(dir.path().join(rel)).unwrap(),
            std::fs::read(dir2.path().join(rel)).unwrap(),
            "{rel}"
        );
    }
}

#[test]
fn corrupt_manifest_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rig.json");
    std::fs::write(&path, "{ not json").unwrap();
    assert!(matches!(
        BlendshapeRig::load(&path),
        Err(Error::Parse { .. })
    ));
    assert!(matches!(
        BlendshapeRig::load(&dir.path().join("missing.json")),
        Err(Error::Io { .. })
    ));
}

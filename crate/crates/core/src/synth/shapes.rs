//! Displacement fields of the 52 procedural blendshapes.

use crate::error::Result;
use crate::mesh::{Mesh, Vec3};
use crate::names::NameRegistry;

use super::FeatureLayout;

/// Anisotropic Gaussian bump on the frontal projection, cut off smoothly at
/// three standard deviations.
#[derive(Debug, Clone, Copy)]
struct Bump {
    center: [f64; 2],
    sigma: [f64; 2],
    disp: [f64; 3],
}

impl Bump {
    fn weight(&self, x: f64, y: f64) -> f64 {
        let qx = (x - self.center[0]) / self.sigma[0];
        let qy = (y - self.center[1]) / self.sigma[1];
        let q2 = qx * qx + qy * qy;
        if q2 >= 9.0 {
            return 0.0;
        }
        let cut = 1.0 - q2 / 9.0;
        (-0.5 * q2).exp() * cut * cut
    }

    fn mirrored(self) -> Self {
        Self {
            center: [-self.center[0], self.center[1]],
            sigma: self.sigma,
            disp: [-self.disp[0], self.disp[1], self.disp[2]],
        }
    }
}

fn b(center: [f64; 2], sigma: [f64; 2], disp: [f64; 3]) -> Bump {
    Bump {
        center,
        sigma,
        disp,
    }
}

/// Bumps for the left-side (+x) variant of lateral shapes, and for the
/// symmetric shapes. Right-side variants are mirrored.
fn left_or_center(name: &str, l: &FeatureLayout) -> Vec<Bump> {
    let [ex, ey] = l.eye_center;
    let [_, eh] = l.eye_half_size;
    let [mx, my] = l.mouth_center;
    let [mw, mh] = l.mouth_half_size;
    let ir = l.iris_radius;
    let brow_mid = 0.5 * (l.brow_inner_x + l.brow_outer_x);
    let by = l.brow_y + 0.02;
    let corner = [mx + mw, my];
    let chin = [mx, my - 0.35];
    let upper_lip = [mx, my + mh * 0.9];
    let lower_lip = [mx, my - mh * 0.9];
    match name {
        "eyeBlink" => vec![
            b([ex, ey + eh], [0.1, 0.03], [0.0, -0.08, 0.0]),
            b([ex, ey - eh], [0.1, 0.02], [0.0, 0.015, 0.0]),
        ],
        "eyeSquint" => vec![
            b([ex, ey - eh], [0.1, 0.03], [0.0, 0.03, 0.005]),
            b([ex + 0.05, ey - 0.15], [0.1, 0.06], [0.0, 0.015, 0.01]),
        ],
        "eyeWide" => vec![
            b([ex, ey + eh], [0.1, 0.03], [0.0, 0.035, 0.005]),
            b([brow_mid, by], [0.14, 0.05], [0.0, 0.01, 0.0]),
        ],
        // Gaze shapes move the iris; "in" is toward the nose.
        "eyeLookIn" => vec![
            b([ex, ey], [ir, ir], [-0.04, 0.0, 0.0]),
            b([ex - 0.1, ey], [0.04, 0.04], [0.0, 0.008, 0.0]),
        ],
        "eyeLookOut" => vec![
            b([ex, ey], [ir, ir], [0.04, 0.0, 0.0]),
            b([ex + 0.1, ey], [0.04, 0.04], [0.0, 0.008, 0.0]),
        ],
        "eyeLookUp" => vec![
            b([ex, ey], [ir, ir], [0.0, 0.025, 0.0]),
            b([ex, ey + eh], [0.1, 0.02], [0.0, 0.01, 0.0]),
            b([brow_mid, by], [0.12, 0.05], [0.0, 0.012, 0.0]),
        ],
        "eyeLookDown" => vec![
            b([ex, ey], [ir, ir], [0.0, -0.025, 0.0]),
            b([ex, ey + eh], [0.1, 0.02], [0.0, -0.015, 0.0]),
            b([ex, ey - eh], [0.1, 0.02], [0.0, -0.01, 0.0]),
        ],
        "browDown" => vec![b([brow_mid, by], [0.12, 0.05], [-0.01, -0.04, 0.0])],
        "browOuterUp" => vec![b(
            [l.brow_outer_x - 0.03, by],
            [0.07, 0.05],
            [0.0, 0.05, 0.0],
        )],
        "browInnerUp" => vec![
            b([l.brow_inner_x + 0.02, by], [0.07, 0.05], [0.0, 0.05, 0.0]),
            b(
                [-(l.brow_inner_x + 0.02), by],
                [0.07, 0.05],
                [0.0, 0.05, 0.0],
            ),
        ],
        "cheekSquint" => vec![
            b([ex + 0.07, ey - 0.25], [0.15, 0.12], [0.0, 0.03, 0.02]),
            b([ex + 0.04, ey - eh], [0.1, 0.03], [0.0, 0.02, 0.0]),
        ],
        "cheekPuff" => vec![
            b([0.4, my + 0.15], [0.12, 0.12], [0.06, 0.0, 0.03]),
            b([-0.4, my + 0.15], [0.12, 0.12], [-0.06, 0.0, 0.03]),
        ],
        "noseSneer" => vec![
            b([0.08, ey - 0.25], [0.06, 0.08], [0.0, 0.03, 0.01]),
            b([0.05, upper_lip[1]], [0.06, 0.03], [0.0, 0.02, 0.0]),
            b([ex - 0.1, ey - eh], [0.06, 0.03], [0.0, 0.012, 0.0]),
        ],
        "jawOpen" => vec![b(chin, [0.35, 0.3], [0.0, -0.2, -0.03])],
        "jawForward" => vec![b(chin, [0.35, 0.3], [0.0, 0.0, 0.06])],
        "jawLeft" => vec![
            b([chin[0] + 0.08, chin[1]], [0.35, 0.3], [0.06, 0.0, 0.0]),
            b([mx + mw + 0.1, my - 0.15], [0.1, 0.1], [0.0, -0.02, 0.01]),
        ],
        "mouthClose" => vec![
            b([mx, lower_lip[1] + 0.02], [0.2, 0.05], [0.0, 0.08, 0.0]),
            b([mx, upper_lip[1] - 0.02], [0.2, 0.04], [0.0, -0.03, 0.0]),
        ],
        "mouthFunnel" => vec![
            b([mx, my], [0.15, 0.08], [0.0, 0.0, 0.05]),
            b(corner, [0.05, 0.05], [-0.04, 0.0, 0.0]),
            b([mx - mw, my], [0.05, 0.05], [0.04, 0.0, 0.0]),
        ],
        "mouthPucker" => vec![
            b(corner, [0.06, 0.06], [-0.07, 0.0, 0.02]),
            b([mx - mw, my], [0.06, 0.06], [0.07, 0.0, 0.02]),
        ],
        "mouthLeft" => vec![
            b([mx + 0.06, my], [0.2, 0.12], [0.06, 0.0, 0.0]),
            b(corner, [0.05, 0.05], [0.0, 0.015, -0.01]),
        ],
        "mouthSmile" => vec![b(corner, [0.07, 0.07], [0.03, 0.05, -0.01])],
        "mouthFrown" => vec![
            b([corner[0], my - 0.03], [0.07, 0.07], [-0.01, -0.05, 0.0]),
            b([mx + 0.1, chin[1] + 0.1], [0.1, 0.08], [0.0, 0.015, 0.01]),
        ],
        "mouthDimple" => vec![b([corner[0] + 0.02, my], [0.06, 0.06], [0.03, 0.0, -0.03])],
        "mouthStretch" => vec![b([corner[0], my - 0.02], [0.07, 0.07], [0.05, -0.02, 0.0])],
        "mouthRollLower" => vec![b(lower_lip, [0.16, 0.03], [0.0, 0.02, -0.03])],
        "mouthRollUpper" => vec![b(upper_lip, [0.16, 0.03], [0.0, -0.02, -0.03])],
        "mouthShrugLower" => vec![b(
            [mx, lower_lip[1] - 0.02],
            [0.18, 0.05],
            [0.0, 0.04, 0.01],
        )],
        "mouthShrugUpper" => vec![b([mx, upper_lip[1]], [0.18, 0.04], [0.0, 0.03, 0.0])],
        "mouthPress" => vec![
            b(
                [mx + 0.1, upper_lip[1] - 0.03],
                [0.08, 0.03],
                [0.0, -0.015, 0.0],
            ),
            b(
                [mx + 0.1, lower_lip[1] + 0.03],
                [0.08, 0.03],
                [0.0, 0.015, 0.0],
            ),
        ],
        "mouthLowerDown" => vec![b([mx + 0.1, lower_lip[1]], [0.08, 0.04], [0.0, -0.05, 0.0])],
        "mouthUpperUp" => vec![b([mx + 0.1, upper_lip[1]], [0.08, 0.04], [0.0, 0.05, 0.0])],
        "tongueOut" => vec![b(
            [mx, lower_lip[1] + 0.02],
            [0.08, 0.04],
            [0.0, -0.04, 0.04],
        )],
        other => unreachable!("no bump table for {other}"),
    }
}

/// Bumps for any ARKit name, mirroring `*Right` shapes from their left twin.
fn bumps_for(name: &str, l: &FeatureLayout) -> Vec<Bump> {
    let mirror = |base: &str| {
        left_or_center(base, l)
            .into_iter()
            .map(Bump::mirrored)
            .collect()
    };
    match name {
        "jawRight" => mirror("jawLeft"),
        "mouthRight" => mirror("mouthLeft"),
        _ => {
            if let Some(base) = name.strip_suffix("Right") {
                mirror(base)
            } else if let Some(base) = name.strip_suffix("Left") {
                if matches!(name, "jawLeft" | "mouthLeft") {
                    left_or_center(name, l)
                } else {
                    left_or_center(base, l)
                }
            } else {
                left_or_center(name, l)
            }
        }
    }
}

/// Bump tables exist for the ARKit names only; other registries get the
/// shape at the same position in the ARKit list.
pub(super) fn build_shapes(
    neutral: &Mesh,
    l: &FeatureLayout,
    names: &NameRegistry,
) -> Result<Vec<Mesh>> {
    (0..names.len())
        .map(|i| {
            let bumps = bumps_for(crate::names::ARKIT_NAMES[i], l);
            let verts = neutral
                .vertices
                .iter()
                .map(|v| {
                    bumps.iter().fold(*v, |acc, bp| {
                        let w = bp.weight(v.x, v.y);
                        acc + Vec3::from(bp.disp) * w
                    })
                })
                .collect();
            neutral.with_vertices(verts)
        })
        .collect()
}

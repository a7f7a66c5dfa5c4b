//! Shared inputs for the benchmarks.

use blendrig_core::mixer::{MixerConfig, MixerParams};
use blendrig_core::synth::{identity_rig, make_template, TemplateConfig};
use blendrig_core::{BlendshapeRig, Camera, LandmarkSet, Mesh, PriorSpec};

pub struct Fixture {
    pub template: BlendshapeRig,
    /// Neutral of a synthetic identity sharing the template topology.
    pub identity_neutral: Mesh,
    /// Landmarks of a prior sample, in model space.
    pub target_3d: LandmarkSet,
    /// The same landmarks projected through the default camera.
    pub landmarks_2d: Vec<[f64; 2]>,
    pub mixer: MixerParams,
}

impl Fixture {
    pub fn new() -> Self {
        let template = make_template(&TemplateConfig::default()).expect("template");
        let identity_neutral = identity_rig(&template, 0, 1, 0.05, Default::default())
            .expect("identity")
            .neutral;
        let w = PriorSpec::default_arkit().sample_seeded(7);
        let pts = template.landmark_basis().evaluate(&w).expect("landmarks");
        let landmarks_2d = Camera::default().project_world(&pts).expect("projection");
        Self {
            target_3d: LandmarkSet::from_3d(&pts),
            landmarks_2d,
            mixer: MixerParams::init(MixerConfig::desk(), 0).expect("mixer"),
            template,
            identity_neutral,
        }
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}

//! Blendshape rig fitting, retargeting, synthetic data generation and
//! landmark-to-coefficient regression.
//!
//! The crate is organised bottom-up:
//!
//! - [`mesh`], [`geometry`], [`rig`]: meshes, 6D rotations, cameras, rigs and
//!   the linear blendshape model.
//! - [`defxfer`]: deformation transfer of a template rig onto a new neutral.
//! - [`fitter`]: L-BFGS recovery of coefficients and rigid pose from landmarks.
//! - [`prior`]: the expression prior used to sample plausible coefficients.
//! - [`synth`]: procedural template rigs, identities and training data.
//! - [`mixer`]: the MLP-Mixer regressor with hand-written gradients.
//! - [`eval`]: mean normalized error and the evaluation harness.

pub mod defxfer;
pub mod error;
pub mod eval;
pub mod fitter;
pub mod geometry;
pub mod mesh;
pub mod mixer;
pub mod names;
pub mod prior;
pub mod rig;
pub mod seed;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
pub use geometry::{apply_rigid, project, rot6d_to_rotation, Camera, Mat3, RigidPose};
pub use mesh::{Mesh, Vec3};
pub use names::{NameRegistry, NUM_BLENDSHAPES};
pub use prior::PriorSpec;
pub use rig::{
    extract_landmarks, BlendshapeRig, CoefficientVector, Dim, LandmarkBasis, LandmarkMap,
    LandmarkSet, Region, NUM_LANDMARKS,
};

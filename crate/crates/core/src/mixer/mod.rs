//! MLP-Mixer regressor from 2D landmarks to blendshape coefficients and a
//! 6D head rotation, with hand-written reverse-mode gradients.
//!
//! Parameters live in one flat `Vec<f64>` split into named segments;
//! gradients use the same layout.

mod net;
mod train;

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::IDENTITY_R6;
use crate::names::NUM_BLENDSHAPES;
use crate::rig::NUM_LANDMARKS;
use crate::seed;

pub use net::{forward, head_scale, infer, normalize_input, Activations, Gradient, MixerOutput};
pub use train::{
    cosine_lr, loss, loss_and_gradient, rotation_loss_term, train, LandmarkLossSpace, LossBasis,
    LossTerms, LossWeights, NoopObserver, TrainConfig, TrainLogEntry, TrainObserver, TrainOutcome,
};

pub const LATENT_TOKENS: usize = 96;
pub const LATENT_CHANNELS: usize = 64;
pub const ROT_OUTPUTS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MixerConfig {
    pub tokens_in: usize,
    pub channels_in: usize,
    pub latent_tokens: usize,
    pub latent_channels: usize,
    pub num_blocks: usize,
    pub token_mlp_hidden: usize,
    pub channel_mlp_hidden: usize,
    /// Input landmarks whose distance normalizes the input scale.
    pub interocular_pair: [usize; 2],
}

impl Default for MixerConfig {
    fn default() -> Self {
        Self {
            tokens_in: NUM_LANDMARKS,
            channels_in: 2,
            latent_tokens: LATENT_TOKENS,
            latent_channels: LATENT_CHANNELS,
            num_blocks: 4,
            token_mlp_hidden: 192,
            channel_mlp_hidden: 256,
            interocular_pair: crate::synth::landmark_layout::INTEROCULAR,
        }
    }
}

impl MixerConfig {
    /// Reduced depth and hidden widths for single-machine training runs.
    /// Input and latent shapes are unchanged.
    pub fn desk() -> Self {
        Self {
            num_blocks: 2,
            token_mlp_hidden: 96,
            channel_mlp_hidden: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.tokens_in,
            self.channels_in,
            self.latent_tokens,
            self.latent_channels,
            self.token_mlp_hidden,
            self.channel_mlp_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("mixer dimensions must be positive".into()));
        }
        let [a, b] = self.interocular_pair;
        if a == b || a >= self.tokens_in || b >= self.tokens_in {
            return Err(Error::Config(format!(
                "interocular pair {:?} invalid for {} tokens",
                self.interocular_pair, self.tokens_in
            )));
        }
        Ok(())
    }

    /// Checks the landmark input and latent shapes used by the real model.
    pub fn validate_standard(&self) -> Result<()> {
        self.validate()?;
        let want = (NUM_LANDMARKS, 2, LATENT_TOKENS, LATENT_CHANNELS);
        let got = (
            self.tokens_in,
            self.channels_in,
            self.latent_tokens,
            self.latent_channels,
        );
        if got != want {
            return Err(Error::ShapeMismatch(format!(
                "mixer shapes {got:?} differ from the fixed {want:?} (tokens_in, channels_in, latent_tokens, latent_channels)"
            )));
        }
        Ok(())
    }
}

/// Location of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1_gain: Segment,
    pub ln1_bias: Segment,
    pub token_w1: Segment,
    pub token_b1: Segment,
    pub token_w2: Segment,
    pub token_b2: Segment,
    pub ln2_gain: Segment,
    pub ln2_bias: Segment,
    pub channel_w1: Segment,
    pub channel_b1: Segment,
    pub channel_w2: Segment,
    pub channel_b2: Segment,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub embed_w: Segment,
    pub embed_b: Segment,
    pub proj_w: Segment,
    pub proj_b: Segment,
    pub blocks: Vec<BlockLayout>,
    pub coef_w: Segment,
    pub coef_b: Segment,
    pub rot_w: Segment,
    pub rot_b: Segment,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &MixerConfig) -> Self {
        let mut off = 0;
        let mut seg = |rows: usize, cols: usize| {
            let s = Segment {
                offset: off,
                rows,
                cols,
            };
            off += rows * cols;
            s
        };
        let (t, ch) = (c.latent_tokens, c.latent_channels);
        let embed_w = seg(c.channels_in, ch);
        let embed_b = seg(1, ch);
        let proj_w = seg(t, c.tokens_in);
        let proj_b = seg(t, 1);
        let blocks = (0..c.num_blocks)
            .map(|_| BlockLayout {
                ln1_gain: seg(1, ch),
                ln1_bias: seg(1, ch),
                token_w1: seg(c.token_mlp_hidden, t),
                token_b1: seg(c.token_mlp_hidden, 1),
                token_w2: seg(t, c.token_mlp_hidden),
                token_b2: seg(t, 1),
                ln2_gain: seg(1, ch),
                ln2_bias: seg(1, ch),
                channel_w1: seg(ch, c.channel_mlp_hidden),
                channel_b1: seg(1, c.channel_mlp_hidden),
                channel_w2: seg(c.channel_mlp_hidden, ch),
                channel_b2: seg(1, ch),
            })
            .collect();
        let coef_w = seg(NUM_BLENDSHAPES, t * ch);
        let coef_b = seg(NUM_BLENDSHAPES, 1);
        let rot_w = seg(ROT_OUTPUTS, t * ch);
        let rot_b = seg(ROT_OUTPUTS, 1);
        Self {
            embed_w,
            embed_b,
            proj_w,
            proj_b,
            blocks,
            coef_w,
            coef_b,
            rot_w,
            rot_b,
            total: off,
        }
    }

    /// Every tensor with its dotted name, in storage order.
    pub fn named(&self) -> Vec<(String, Segment)> {
        let mut v = vec![
            ("embed.weight".to_string(), self.embed_w),
            ("embed.bias".to_string(), self.embed_b),
            ("token_proj.weight".to_string(), self.proj_w),
            ("token_proj.bias".to_string(), self.proj_b),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            v.extend([
                (format!("{p}.norm1.gain"), b.ln1_gain),
                (format!("{p}.norm1.bias"), b.ln1_bias),
                (format!("{p}.token_mlp.w1"), b.token_w1),
                (format!("{p}.token_mlp.b1"), b.token_b1),
                (format!("{p}.token_mlp.w2"), b.token_w2),
                (format!("{p}.token_mlp.b2"), b.token_b2),
                (format!("{p}.norm2.gain"), b.ln2_gain),
                (format!("{p}.norm2.bias"), b.ln2_bias),
                (format!("{p}.channel_mlp.w1"), b.channel_w1),
                (format!("{p}.channel_mlp.b1"), b.channel_b1),
                (format!("{p}.channel_mlp.w2"), b.channel_w2),
                (format!("{p}.channel_mlp.b2"), b.channel_b2),
            ]);
        }
        v.extend([
            ("coef_head.weight".to_string(), self.coef_w),
            ("coef_head.bias".to_string(), self.coef_b),
            ("rot_head.weight".to_string(), self.rot_w),
            ("rot_head.bias".to_string(), self.rot_b),
        ]);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixerParams {
    config: MixerConfig,
    layout: Layout,
    pub data: Vec<f64>,
}

impl MixerParams {
    pub fn zeros(config: MixerConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        Ok(Self {
            data: vec![0.0; layout.total],
            config,
            layout,
        })
    }

    /// Weights drawn from N(0, 1/fan_in), head weights from N(0, 0.01),
    /// biases zero, norm gains one. The rotation bias starts at the identity
    /// encoding.
    pub fn init(config: MixerConfig, root_seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = seed::rng(root_seed, seed::stream::PARAMS, 0);
        let l = p.layout.clone();
        let fill =
            |data: &mut [f64], s: Segment, fan_in: usize, rng: &mut rand_chacha::ChaCha8Rng| {
                let n = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
                for v in &mut data[s.range()] {
                    *v = n.sample(rng);
                }
            };
        fill(&mut p.data, l.embed_w, l.embed_w.rows, &mut rng);
        fill(&mut p.data, l.proj_w, l.proj_w.cols, &mut rng);
        for b in &l.blocks {
            p.data[b.ln1_gain.range()].fill(1.0);
            p.data[b.ln2_gain.range()].fill(1.0);
            fill(&mut p.data, b.token_w1, b.token_w1.cols, &mut rng);
            fill(&mut p.data, b.token_w2, b.token_w2.cols, &mut rng);
            fill(&mut p.data, b.channel_w1, b.channel_w1.rows, &mut rng);
            fill(&mut p.data, b.channel_w2, b.channel_w2.rows, &mut rng);
        }
        // Head inputs are already scaled by `head_scale`.
        fill(&mut p.data, l.coef_w, 1, &mut rng);
        fill(&mut p.data, l.rot_w, 1, &mut rng);
        // Heads start small so early predictions stay near w = 0.5 and the
        // identity rotation.
        for s in [l.coef_w, l.rot_w] {
            p.data[s.range()].iter_mut().for_each(|v| *v *= 0.1);
        }
        p.data[l.rot_b.range()].copy_from_slice(&IDENTITY_R6);
        Ok(p)
    }

    pub fn config(&self) -> &MixerConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, s) in self.layout.named() {
            if self.data[s.range()].iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter tensor {name}")));
            }
        }
        Ok(())
    }

    /// SHA-256 over the configuration, tensor names, shapes and value bits.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, s) in self.layout.named() {
            h.update(name.as_bytes());
            h.update((s.rows as u64).to_le_bytes());
            h.update((s.cols as u64).to_le_bytes());
            for v in &self.data[s.range()] {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_checkpoint(&self, step: u64, provenance: Option<serde_json::Value>) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step,
            tensors: self
                .layout
                .named()
                .into_iter()
                .map(|(name, s)| TensorRecord {
                    name,
                    shape: [s.rows, s.cols],
                    values: self.data[s.range()].to_vec(),
                })
                .collect(),
            content_hash: self.content_hash(),
            provenance,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut p = Self::zeros(ck.config.clone())?;
        let named = p.layout.named();
        if named.len() != ck.tensors.len() {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {} tensors, config implies {}",
                ck.tensors.len(),
                named.len()
            )));
        }
        for ((name, s), t) in named.iter().zip(&ck.tensors) {
            if *name != t.name || t.shape != [s.rows, s.cols] || t.values.len() != s.len() {
                return Err(Error::ShapeMismatch(format!(
                    "tensor {} {:?} does not match expected {name} [{}, {}]",
                    t.name, t.shape, s.rows, s.cols
                )));
            }
            p.data[s.range()].copy_from_slice(&t.values);
        }
        if p.content_hash() != ck.content_hash {
            return Err(Error::Config("checkpoint content hash mismatch".into()));
        }
        p.check_finite()?;
        Ok(p)
    }

    pub fn save(
        &self,
        path: &Path,
        step: u64,
        provenance: Option<serde_json::Value>,
    ) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint(step, provenance))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Checkpoint)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::parse(path.display(), e.to_string()))?;
        Ok((Self::from_checkpoint(&ck)?, ck))
    }
}

pub const CHECKPOINT_FORMAT: &str = "blendrig-mixer";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    /// Row-major.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: MixerConfig,
    pub step: u64,
    pub tensors: Vec<TensorRecord>,
    pub content_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

//! Toy attention stack: configuration, weights, MHA/GQA and MLA forward
//! passes, and the latent KV cache.
//!
//! Layers are attention-only with a residual stream: `h_{l+1} = h_l + attn_l(h_l)`.

mod attention;
mod cache;
mod config;
mod mla;
mod partial;
mod sequence;
mod weights;

use serde::{Deserialize, Serialize};

pub use attention::{forward_mha_gqa, ForwardPass};
pub(crate) use attention::{forward_gqa_with_freqs, gqa_layer_full, project_heads, rotate_columns, LayerTape};
pub(crate) use partial::permute_layer;
pub use cache::{CacheLayer, KvCache};
pub use config::ModelConfig;
pub use mla::{forward_mla, MlaForward};
pub(crate) use mla::{forward_mla_with_tapes, mla_layer_once, MlaTape};
pub use partial::PartialRopeModel;
pub use sequence::TokenSequence;
pub use weights::{AttentionWeights, MlaLayerWeights};

/// Token modality. Visual covers both image and video tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Visual,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 2] = [Modality::Visual, Modality::Text];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Text => "text",
        }
    }

    /// Integer tag used in calibration files: 0 = text, 1 = visual.
    pub fn tag(self) -> u8 {
        match self {
            Modality::Text => 0,
            Modality::Visual => 1,
        }
    }

    pub fn from_tag(tag: u8) -> crate::Result<Self> {
        match tag {
            0 => Ok(Modality::Text),
            1 => Ok(Modality::Visual),
            other => Err(crate::Error::Format(format!("unknown modality tag {other}"))),
        }
    }
}

/// One value per modality.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModalityPair<T> {
    pub visual: T,
    pub text: T,
}

impl<T> ModalityPair<T> {
    pub fn new(visual: T, text: T) -> Self {
        Self { visual, text }
    }

    pub fn get(&self, m: Modality) -> &T {
        match m {
            Modality::Visual => &self.visual,
            Modality::Text => &self.text,
        }
    }

    pub fn get_mut(&mut self, m: Modality) -> &mut T {
        match m {
            Modality::Visual => &mut self.visual,
            Modality::Text => &mut self.text,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Modality, &T) -> U) -> ModalityPair<U> {
        ModalityPair {
            visual: f(Modality::Visual, &self.visual),
            text: f(Modality::Text, &self.text),
        }
    }
}

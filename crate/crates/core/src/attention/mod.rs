//! All-attention layer, the baseline transformer layer and the ablation
//! variants that mix context attention with persistent memory differently.

mod kernel;
mod layer;
pub mod ops;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use kernel::{
    attention_weights, fused_attention, HeadPlan, KernelInputs, KernelSpec, KernelTensors,
};
pub use layer::{
    add_norm, feedforward, ff_softmax, layer_param_specs, FeedforwardSublayer, Init, Layer,
    LayerCache, LayerOutput, Norm, ParamSpec, PersistentMemory, ProjectionSet,
    RelativePositionTable, RunMode,
};

/// How persistent vectors are combined with context attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// One softmax over context and persistent slots.
    AllAttn,
    /// Separate softmaxes over context and persistent slots, outputs summed.
    AttnSplit,
    /// First half of the heads see only context, second half only memory.
    HeadSplit,
    /// Like `AttnSplit`, with one d-dimensional persistent set queried by `x_t`.
    SingleHead,
    /// Self-attention sublayer followed by a softmax feedforward sublayer.
    FfAttn,
    /// Self-attention sublayer followed by a ReLU feedforward sublayer.
    BaselineTransformer,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::AllAttn,
        Variant::AttnSplit,
        Variant::HeadSplit,
        Variant::SingleHead,
        Variant::FfAttn,
        Variant::BaselineTransformer,
    ];

    /// The five ways of integrating persistent vectors compared in ablations.
    pub const ABLATION: [Variant; 5] = [
        Variant::AllAttn,
        Variant::AttnSplit,
        Variant::HeadSplit,
        Variant::SingleHead,
        Variant::FfAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::AllAttn => "all_attn",
            Variant::AttnSplit => "attn_split",
            Variant::HeadSplit => "head_split",
            Variant::SingleHead => "single_head",
            Variant::FfAttn => "ff_attn",
            Variant::BaselineTransformer => "baseline_transformer",
        }
    }

    /// Variants whose persistent vectors live inside the attention sublayer.
    pub fn has_memory(self) -> bool {
        matches!(
            self,
            Variant::AllAttn | Variant::AttnSplit | Variant::HeadSplit | Variant::SingleHead
        )
    }

    pub fn has_feedforward(self) -> bool {
        matches!(self, Variant::FfAttn | Variant::BaselineTransformer)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| {
                v.name() == norm || (norm == "baseline" && *v == Variant::BaselineTransformer)
            })
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Model dimension `d`.
    pub d: usize,
    pub heads: usize,
    /// Persistent vectors per head `N`.
    pub n_persistent: usize,
    pub variant: Variant,
    pub value_side_positions: bool,
    pub attn_dropout: f64,
    /// Longest attended distance `L_max`; also the cache length.
    pub max_span: usize,
    /// Hidden width `d_f` of the feedforward sublayer (feedforward variants only).
    pub ff_dim: usize,
}

impl AttentionConfig {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 {
            return Err(Error::Config(
                "model dimension and head count must be positive".into(),
            ));
        }
        if self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "head count {} does not divide model dimension {}",
                self.heads, self.d
            )));
        }
        if self.variant == Variant::HeadSplit && self.heads % 2 != 0 {
            return Err(Error::Config(format!(
                "head_split needs an even head count, got {}",
                self.heads
            )));
        }
        if self.variant.has_feedforward() && self.ff_dim == 0 {
            return Err(Error::Config(format!("{} needs ff_dim > 0", self.variant)));
        }
        if self.max_span == 0 {
            return Err(Error::Config("max_span must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.attn_dropout) {
            return Err(Error::Config(format!(
                "attention dropout {} outside [0, 1)",
                self.attn_dropout
            )));
        }
        Ok(())
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::OBS_DIM;

/// How the halting score is read out of the sufficiency tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// Loop positional encoding plus cross-attention onto the action tokens.
    #[default]
    CrossAttention,
    /// Mean-pooled sufficiency tokens straight into the scoring MLP.
    DirectMlp,
}

/// Visibility among the action tokens themselves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActionVisibility {
    #[default]
    Causal,
    Bidirectional,
}

/// Architecture description of an `(L x N)` looped policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub loop_layers: usize,
    pub max_iterations: usize,
    pub anchor_layers: usize,
    pub model_dim: usize,
    pub attn_heads: usize,
    pub cross_attn_layers: usize,
    pub n_action_tokens: usize,
    pub n_sufficiency_tokens: usize,
    pub chunk_size: usize,
    pub dof: usize,
    pub n_vis_tokens: usize,
    pub n_txt_tokens: usize,
    pub vocab_size: usize,
    pub obs_dim: usize,
    pub ffn_mult: usize,
    pub head_variant: HeadVariant,
    pub action_visibility: ActionVisibility,
    /// Initial bias of the halting logit; `ln(0.2 / 0.8)` starts scores at 0.2.
    pub halting_bias_init: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            loop_layers: 3,
            max_iterations: 8,
            anchor_layers: 2,
            model_dim: 64,
            attn_heads: 4,
            cross_attn_layers: 2,
            n_action_tokens: 8,
            n_sufficiency_tokens: 3,
            chunk_size: 8,
            dof: 3,
            n_vis_tokens: 4,
            n_txt_tokens: 4,
            vocab_size: 3,
            obs_dim: OBS_DIM,
            ffn_mult: 4,
            head_variant: HeadVariant::CrossAttention,
            action_visibility: ActionVisibility::Causal,
            halting_bias_init: (0.2f64 / 0.8).ln(),
        }
    }
}

impl LoopConfig {
    /// `(L x N)` variant of the defaults.
    pub fn with_loops(loop_layers: usize, max_iterations: usize) -> Self {
        LoopConfig {
            loop_layers,
            max_iterations,
            ..LoopConfig::default()
        }
    }

    /// Small configuration for gradient checks and smoke runs.
    pub fn tiny() -> Self {
        LoopConfig {
            loop_layers: 1,
            max_iterations: 2,
            anchor_layers: 1,
            model_dim: 8,
            attn_heads: 2,
            cross_attn_layers: 1,
            n_action_tokens: 2,
            n_sufficiency_tokens: 2,
            chunk_size: 2,
            n_vis_tokens: 2,
            n_txt_tokens: 1,
            ffn_mult: 2,
            ..LoopConfig::default()
        }
    }

    pub fn total_tokens(&self) -> usize {
        self.n_txt_tokens + self.n_vis_tokens + self.n_action_tokens + self.n_sufficiency_tokens
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.attn_heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("loop_layers", self.loop_layers),
            ("max_iterations", self.max_iterations),
            ("model_dim", self.model_dim),
            ("attn_heads", self.attn_heads),
            ("cross_attn_layers", self.cross_attn_layers),
            ("n_action_tokens", self.n_action_tokens),
            ("n_sufficiency_tokens", self.n_sufficiency_tokens),
            ("chunk_size", self.chunk_size),
            ("dof", self.dof),
            ("n_vis_tokens", self.n_vis_tokens),
            ("n_txt_tokens", self.n_txt_tokens),
            ("vocab_size", self.vocab_size),
            ("obs_dim", self.obs_dim),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.model_dim % self.attn_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by attn_heads {}",
                self.model_dim, self.attn_heads
            )));
        }
        if self.n_action_tokens != self.chunk_size {
            return Err(Error::Config(format!(
                "one action token per chunk row: n_action_tokens {} != chunk_size {}",
                self.n_action_tokens, self.chunk_size
            )));
        }
        if !self.halting_bias_init.is_finite() {
            return Err(Error::Config("halting_bias_init must be finite".into()));
        }
        Ok(())
    }
}

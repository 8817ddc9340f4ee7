use serde::{Deserialize, Serialize};

use crate::features::MICRO_DIM;
use crate::grid::STEPS_PER_DAY;
use crate::{Error, Result};

/// Architecture and ablation switches. Defaults follow the published setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_segments: usize,
    pub history: usize,
    pub horizon: usize,
    pub d_f: usize,
    pub d_dow: usize,
    pub d_tod: usize,
    pub d_a: usize,
    /// Number of stacked spatial layers, and separately of temporal layers.
    pub layers: usize,
    /// Alias of `layers`; must agree when given.
    pub attention_blocks: Option<usize>,
    pub heads: usize,
    pub dropout: f64,
    pub steps_per_day: usize,
    /// Feed-forward hidden width; `None` means `4 * d_h`.
    pub ff_hidden: Option<usize>,
    pub use_spatial: bool,
    pub use_temporal: bool,
    pub use_cross_attention: bool,
    pub use_micro: bool,
    pub use_feed_forward: bool,
    /// `true` removes that micro channel, in `cv_sv, hard/med/light acc,
    /// hard/med/light brake` order.
    pub micro_feature_mask: [bool; MICRO_DIM],
    pub layer_norm_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_segments: 20,
            history: 12,
            horizon: 12,
            d_f: 24,
            d_dow: 2,
            d_tod: 2,
            d_a: 80,
            layers: 3,
            attention_blocks: None,
            heads: 4,
            dropout: 0.1,
            steps_per_day: STEPS_PER_DAY,
            ff_hidden: None,
            use_spatial: true,
            use_temporal: true,
            use_cross_attention: true,
            use_micro: true,
            use_feed_forward: true,
            micro_feature_mask: [false; MICRO_DIM],
            layer_norm_eps: 1e-5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn d_h(&self) -> usize {
        self.d_f.saturating_add(self.d_dow).saturating_add(self.d_tod).saturating_add(self.d_a)
    }

    pub fn head_dim(&self) -> usize {
        self.d_h() / self.heads
    }

    pub fn ff_width(&self) -> usize {
        self.ff_hidden.unwrap_or(self.d_h().saturating_mul(4))
    }

    /// Cross-attention sublayers are present.
    pub fn has_cross(&self) -> bool {
        self.use_micro && self.use_cross_attention
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("n_segments", self.n_segments),
            ("history", self.history),
            ("horizon", self.horizon),
            ("d_f", self.d_f),
            ("d_dow", self.d_dow),
            ("d_tod", self.d_tod),
            ("d_a", self.d_a),
            ("layers", self.layers),
            ("heads", self.heads),
            ("steps_per_day", self.steps_per_day),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.d_h().is_multiple_of(self.heads) {
            return bad(format!("d_h = {} is not divisible by {} heads", self.d_h(), self.heads));
        }
        if let Some(b) = self.attention_blocks {
            if b != self.layers {
                return bad(format!("attention_blocks ({b}) must equal layers ({})", self.layers));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.ff_width() == 0 && self.use_feed_forward {
            return bad("ff_hidden must be positive".into());
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            return bad("layer_norm_eps must be positive".into());
        }
        if self.steps_per_day > STEPS_PER_DAY {
            return bad(format!("steps_per_day {} exceeds the {STEPS_PER_DAY}-step grid", self.steps_per_day));
        }
        if self.layers > 64 {
            return bad(format!("{} layers is more than the supported 64", self.layers));
        }
        if self.history > self.steps_per_day {
            return bad(format!("history {} exceeds steps_per_day {}", self.history, self.steps_per_day));
        }
        // keep every tensor addressable
        let biggest = [
            self.history.checked_mul(self.n_segments).and_then(|v| v.checked_mul(self.d_a)),
            self.history.checked_mul(self.d_h()).and_then(|v| v.checked_mul(self.horizon)),
            self.d_h().checked_mul(self.ff_width()),
        ];
        if biggest.iter().any(|v| v.is_none_or(|v| v > (1 << 31))) {
            return bad("model dimensions are too large".into());
        }
        Ok(())
    }
}

//! Model hyperparameters.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Inner operator of the encoder's sequence blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Selective state-space block: matrices depend on the input token.
    Tamba,
    /// State-space block with learned constant matrices.
    Mamba,
    /// Single-head softmax attention.
    Attention,
}

impl BlockKind {
    pub const ALL: [BlockKind; 3] = [BlockKind::Attention, BlockKind::Mamba, BlockKind::Tamba];

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Tamba => "tamba",
            BlockKind::Mamba => "mamba",
            BlockKind::Attention => "attention",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Token width.
    pub d: usize,
    /// SSM state size.
    pub n_state: usize,
    /// SSM input (control) width, also the attention key width.
    pub m: usize,
    /// SSM output width.
    pub p: usize,
    pub d_ff: usize,
    pub conv_width: usize,
    /// Blocks per encoder stack.
    pub depth: usize,
    /// Number of predicted modes.
    pub modes: usize,
    /// Observed steps.
    pub observed: usize,
    /// Predicted steps.
    pub future: usize,
    /// Waypoints emitted per recursive decoding step.
    pub chunk: usize,
    pub block: BlockKind,
    /// Shared pedestrian/traffic-light embedder with fusion.
    pub joint: bool,
    pub scorer_hidden: usize,
    /// Floor added to every Laplace scale.
    pub b_min: f64,
    /// Positional-encoding table length.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 32,
            n_state: 8,
            m: 32,
            p: 32,
            d_ff: 64,
            conv_width: 4,
            depth: 2,
            modes: 6,
            observed: 20,
            future: 30,
            chunk: 1,
            block: BlockKind::Tamba,
            joint: true,
            scorer_hidden: 32,
            b_min: 1e-3,
            max_len: 512,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("d", self.d),
            ("n_state", self.n_state),
            ("m", self.m),
            ("p", self.p),
            ("d_ff", self.d_ff),
            ("conv_width", self.conv_width),
            ("depth", self.depth),
            ("modes", self.modes),
            ("observed", self.observed),
            ("future", self.future),
            ("chunk", self.chunk),
            ("scorer_hidden", self.scorer_hidden),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.future % self.chunk != 0 {
            return bad(format!(
                "future ({}) must be a multiple of chunk ({})",
                self.future, self.chunk
            ));
        }
        if self.max_len < self.observed.max(self.future) {
            return bad("max_len shorter than the horizons".into());
        }
        if !(self.b_min > 0.0) {
            return bad("b_min must be positive".into());
        }
        Ok(())
    }

    /// Recursive decoding steps.
    pub fn decode_steps(&self) -> usize {
        self.future / self.chunk
    }
}

//! Small parameterized layers shared by the model modules.

use crate::error::Result;
use crate::graph::Var;
use crate::params::{Ctx, ParamBuilder, ParamId};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.weight(&format!("{name}.weight"), d_in, d_out)?,
            bias: Some(pb.zeros(&format!("{name}.bias"), &[d_out])?),
            d_in,
            d_out,
        })
    }

    pub fn no_bias(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.weight(&format!("{name}.weight"), d_in, d_out)?,
            bias: None,
            d_in,
            d_out,
        })
    }

    /// A layer whose weight and bias start at zero.
    pub fn zeroed(pb: &mut ParamBuilder, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.zeros(&format!("{name}.weight"), &[d_in, d_out])?,
            bias: Some(pb.zeros(&format!("{name}.bias"), &[d_out])?),
            d_in,
            d_out,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.weight);
        match self.bias {
            Some(b) => {
                let b = cx.p(b);
                cx.g.affine(x, w, b)
            }
            None => cx.g.matmul(x, w),
        }
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + if self.bias.is_some() { self.d_out } else { 0 }
    }

    /// FLOPs for `tokens` rows.
    pub fn flops(&self, tokens: usize) -> u64 {
        2 * (tokens * self.d_in * self.d_out) as u64
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl Norm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: pb.full(&format!("{name}.gain"), &[dim], 1.0)?,
            bias: pb.zeros(&format!("{name}.bias"), &[dim])?,
            dim,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gain), cx.p(self.bias));
        cx.g.layer_norm(x, g, b, LN_EPS)
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }
}

/// `affine(d → d_ff) → GELU → affine(d_ff → d)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(pb: &mut ParamBuilder, name: &str, d: usize, d_ff: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(pb, &format!("{name}.up"), d, d_ff)?,
            down: Linear::new(pb, &format!("{name}.down"), d_ff, d)?,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.up.forward(cx, x)?;
        let h = cx.g.gelu(h)?;
        self.down.forward(cx, h)
    }

    pub fn num_params(&self) -> usize {
        self.up.num_params() + self.down.num_params()
    }

    pub fn flops(&self, tokens: usize) -> u64 {
        self.up.flops(tokens) + self.down.flops(tokens)
    }
}

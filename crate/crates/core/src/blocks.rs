//! Transformer block, ConvFFN, local capture block and the parallel stage.

use crate::attention::{AttentionConfig, MspAttention};
use crate::error::{Error, Result};
use crate::nnops::{Conv2d, LayerNorm, Linear, SqueezeExcite};
use crate::params::{Bound, Init};
use crate::tensor::{Scalar, Var};

/// Token MLP with a depthwise 3×3 convolution between its two layers.
#[derive(Clone, Debug)]
pub struct ConvFfn {
    pub fc1: Linear,
    pub dw: Conv2d,
    pub fc2: Linear,
    pub expansion: usize,
}

impl ConvFfn {
    pub fn new<S: Scalar>(init: &mut Init<'_, S>, channels: usize, expansion: usize) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::config("ConvFFN expansion must be ≥ 1"));
        }
        let hidden = channels * expansion;
        Ok(ConvFfn {
            fc1: Linear::new(&mut init.sub("fc1"), channels, hidden, true)?,
            dw: Conv2d::depthwise3x3(&mut init.sub("dw"), hidden)?,
            fc2: Linear::new(&mut init.sub("fc2"), hidden, channels, true)?,
            expansion,
        })
    }

    /// `[N, H·W, C]` tokens: fc1 → depthwise 3×3 → GELU → fc2.
    pub fn forward<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        tokens: Var<'t, S>,
        h: usize,
        w: usize,
    ) -> Result<Var<'t, S>> {
        let shape = tokens.shape();
        if shape.len() != 3 || shape[1] != h * w {
            return Err(Error::shape(format!("{shape:?} tokens for a {h}x{w} map")));
        }
        let hidden = self.fc1.forward(p, tokens)?.from_tokens(h, w)?;
        let hidden = self.dw.forward(p, hidden)?.gelu()?.to_tokens()?;
        self.fc2.forward(p, hidden)
    }

    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let t = h * w;
        Ok(self.fc1.macs(t) + self.dw.macs(h, w)?.0 + self.fc2.macs(t))
    }
}

/// Pre-norm transformer block: `X' = X + Attn(LN(X))`, `Y = X' + FFN(LN(X'))`.
#[derive(Clone, Debug)]
pub struct MspBlock {
    pub norm1: LayerNorm,
    pub attn: MspAttention,
    pub norm2: LayerNorm,
    pub ffn: ConvFfn,
}

impl MspBlock {
    pub fn new<S: Scalar>(init: &mut Init<'_, S>, cfg: AttentionConfig, expansion: usize) -> Result<Self> {
        let c = cfg.channels;
        Ok(MspBlock {
            norm1: LayerNorm::new(&mut init.sub("norm1"), c)?,
            attn: MspAttention::new(&mut init.sub("attn"), cfg)?,
            norm2: LayerNorm::new(&mut init.sub("norm2"), c)?,
            ffn: ConvFfn::new(&mut init.sub("ffn"), c, expansion)?,
        })
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let (_, _, h, w) = x.value().dims4()?;
        let tokens = x.to_tokens()?;
        let a = self
            .attn
            .forward_tokens(p, self.norm1.forward(p, tokens)?, h, w)?;
        let mid = tokens.add(a)?;
        let f = self.ffn.forward(p, self.norm2.forward(p, mid)?, h, w)?;
        mid.add(f)?.from_tokens(h, w)
    }

    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        Ok(self.attn.macs(h, w)? + self.ffn.macs(h, w)?)
    }
}

/// Local capture block: depthwise 3×3 → pointwise 1×1 → channel attention.
#[derive(Clone, Debug)]
pub struct Lcb {
    pub dw: Conv2d,
    pub pw: Conv2d,
    pub se: SqueezeExcite,
}

impl Lcb {
    pub fn new<S: Scalar>(init: &mut Init<'_, S>, channels: usize) -> Result<Self> {
        Ok(Lcb {
            dw: Conv2d::depthwise3x3(&mut init.sub("dw"), channels)?,
            pw: Conv2d::pointwise(&mut init.sub("pw"), channels, channels)?,
            se: SqueezeExcite::new(&mut init.sub("ca"), channels, SqueezeExcite::REDUCTION)?,
        })
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let y = self.dw.forward(p, x)?;
        let y = self.pw.forward(p, y)?;
        self.se.forward(p, y)
    }

    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        Ok(self.dw.macs(h, w)?.0 + self.pw.macs(h, w)?.0 + self.se.macs())
    }
}

/// Channel-split stage: one half through transformer blocks, the other
/// through local capture blocks, then concatenation and a 2-group shuffle.
#[derive(Clone, Debug)]
pub struct ParallelStage {
    pub channels: usize,
    pub msp: Vec<MspBlock>,
    /// Empty means the local half passes through unchanged.
    pub lcb: Vec<Lcb>,
    pub shuffle: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct StageOptions {
    pub depth: usize,
    pub expansion: usize,
    pub use_lcb: bool,
    pub shuffle: bool,
}

impl ParallelStage {
    /// `attn.channels` must be half of `channels`.
    pub fn new<S: Scalar>(
        init: &mut Init<'_, S>,
        channels: usize,
        attn: AttentionConfig,
        opts: StageOptions,
    ) -> Result<Self> {
        if !channels.is_multiple_of(2) || attn.channels * 2 != channels {
            return Err(Error::config(format!(
                "stage of {channels} channels with {}-channel attention",
                attn.channels
            )));
        }
        if opts.depth == 0 {
            return Err(Error::config("stage depth must be ≥ 1"));
        }
        let half = channels / 2;
        let mut msp = Vec::with_capacity(opts.depth);
        let mut lcb = Vec::new();
        for i in 0..opts.depth {
            msp.push(MspBlock::new(&mut init.sub(format!("msp.{i}")), attn.clone(), opts.expansion)?);
        }
        if opts.use_lcb {
            for i in 0..opts.depth {
                lcb.push(Lcb::new(&mut init.sub(format!("lcb.{i}")), half)?);
            }
        }
        Ok(ParallelStage {
            channels,
            msp,
            lcb,
            shuffle: opts.shuffle,
        })
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let (_, c, _, _) = x.value().dims4()?;
        if c != self.channels {
            return Err(Error::shape(format!(
                "stage built for {} channels, got {c}",
                self.channels
            )));
        }
        let (mut global, mut local) = x.channel_split()?;
        for blk in &self.msp {
            global = blk.forward(p, global)?;
        }
        for blk in &self.lcb {
            local = blk.forward(p, local)?;
        }
        let y = global.channel_concat(local)?;
        if self.shuffle {
            y.channel_shuffle(2)
        } else {
            Ok(y)
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let mut total = 0;
        for b in &self.msp {
            total += b.macs(h, w)?;
        }
        for b in &self.lcb {
            total += b.macs(h, w)?;
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::{Tape, Tensor};

    #[test]
    fn ffn_rejects_token_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ffn = ConvFfn::new(&mut Init::new(&mut store, &mut rng), 4, 2).unwrap();
        let tape = Tape::<f64>::no_grad();
        let p = store.bind(&tape);
        let t = tape.constant(Tensor::zeros(&[1, 6, 4]).unwrap());
        assert!(matches!(ffn.forward(&p, t, 2, 2), Err(Error::Shape(_))));
        assert!(ffn.forward(&p, t, 2, 3).is_ok());
    }

    #[test]
    fn stage_rejects_odd_or_mismatched_width() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let opts = StageOptions {
            depth: 1,
            expansion: 1,
            use_lcb: true,
            shuffle: true,
        };
        let mut init = Init::new(&mut store, &mut rng);
        assert!(ParallelStage::new(&mut init, 8, AttentionConfig::new(8, 2, 2, 1), opts).is_err());
        assert!(ParallelStage::new(&mut init, 8, AttentionConfig::new(4, 2, 2, 1), opts).is_ok());
    }
}

//! The encoder–decoder restoration network.
//!
//! ```text
//! image ─ stem(3×3, s2) ─ enc1 ─ down ─ enc2 ─ down ─ enc3 ─ down ─ enc4
//!                          │             │             │              │
//!                          │             │             └── fuse ─ dec3 ◄ up
//!                          │             └──────────────── fuse ─ dec2 ◄ up
//!                          └────────────────────────────── fuse ─ dec1 ◄ up
//!                                                                  │
//!                                         up + 3×3 ─ refine ─ head(3×3) (+ image)
//! ```
//!
//! Every `enc`/`dec`/`refine` node is a [`ParallelStage`].

pub mod checkpoint;
mod config;
mod pad;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, PoolBranch};
use crate::blocks::{ParallelStage, StageOptions};
use crate::error::{Error, Result};
use crate::nnops::{Conv2d, ConvSpec, Padding};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub use checkpoint::Checkpoint;
pub use config::ModelConfig;
pub use pad::{crop_to, pad_to_multiple};

#[derive(Clone, Debug)]
pub struct DecoderLevel {
    pub up: Conv2d,
    pub fuse: Conv2d,
    pub stage: ParallelStage,
}

#[derive(Clone, Debug)]
pub struct Architecture {
    pub stem: Conv2d,
    pub encoder: Vec<ParallelStage>,
    pub downs: Vec<Conv2d>,
    /// Indexed by skip level: `decoder[i]` joins the output of `encoder[i]`.
    pub decoder: Vec<DecoderLevel>,
    pub refine_up: Conv2d,
    pub refine: ParallelStage,
    pub head: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Model<S: Scalar = f32> {
    pub cfg: ModelConfig,
    pub params: ParamStore<S>,
    pub arch: Architecture,
}

fn stage_attention(cfg: &ModelConfig, i: usize) -> AttentionConfig {
    AttentionConfig {
        channels: cfg.stage_dims[i] / 2,
        heads: cfg.heads[i],
        branch1: PoolBranch {
            kernel: cfg.k1[i],
            stride: cfg.r1[i],
        },
        branch2: PoolBranch {
            kernel: cfg.k2[i],
            stride: cfg.r2[i],
        },
        variant: cfg.attention,
    }
}

impl<S: Scalar> Model<S> {
    /// Deterministic construction: the same `(cfg, seed)` gives the same registry.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut params, &mut rng);
        let dims = &cfg.stage_dims;
        let opts = |depth| StageOptions {
            depth,
            expansion: cfg.ffn_expansion,
            use_lcb: cfg.use_lcb,
            shuffle: cfg.channel_shuffle,
        };
        let down_spec = ConvSpec {
            stride: 2,
            padding: Padding {
                mode: cfg.downsample_padding,
                size: 1,
            },
            groups: 1,
        };
        let same3 = ConvSpec {
            stride: 1,
            padding: Padding::reflect(1),
            groups: 1,
        };

        let stem = Conv2d::new(&mut init.sub("stem"), 3, dims[0], 3, down_spec, true)?;
        let mut encoder = Vec::new();
        let mut downs = Vec::new();
        for i in 0..4 {
            encoder.push(ParallelStage::new(
                &mut init.sub(format!("enc.{i}")),
                dims[i],
                stage_attention(cfg, i),
                opts(cfg.encoder_depths[i]),
            )?);
            if i < 3 {
                downs.push(Conv2d::new(&mut init.sub(format!("down.{i}")), dims[i], dims[i + 1], 3, down_spec, true)?);
            }
        }
        let mut decoder = Vec::new();
        for (k, level) in (0..3).rev().enumerate() {
            let mut d = init.sub(format!("dec.{level}"));
            decoder.push(DecoderLevel {
                up: Conv2d::pointwise(&mut d.sub("up"), dims[level + 1], dims[level])?,
                fuse: Conv2d::pointwise(&mut d.sub("fuse"), 2 * dims[level], dims[level])?,
                stage: ParallelStage::new(
                    &mut d.sub("stage"),
                    dims[level],
                    stage_attention(cfg, level),
                    opts(cfg.decoder_depths[k]),
                )?,
            });
        }
        decoder.reverse();

        let refine_up = Conv2d::new(&mut init.sub("refine.up"), dims[0], dims[0], 3, same3, true)?;
        let refine_attn = AttentionConfig {
            channels: dims[0] / 2,
            heads: cfg.refine_heads,
            branch1: PoolBranch {
                kernel: cfg.refine_k1,
                stride: cfg.refine_r1,
            },
            branch2: PoolBranch {
                kernel: cfg.refine_k2,
                stride: cfg.refine_r2,
            },
            variant: cfg.attention,
        };
        let refine = ParallelStage::new(
            &mut init.sub("refine.stage"),
            dims[0],
            refine_attn,
            opts(cfg.refine_depth),
        )?;
        let head = Conv2d::new(&mut init.sub("head"), dims[0], 3, 3, same3, true)?;

        Ok(Model {
            cfg: cfg.clone(),
            params,
            arch: Architecture {
                stem,
                encoder,
                downs,
                decoder,
                refine_up,
                refine,
                head,
            },
        })
    }

    pub fn count_params(&self) -> usize {
        self.params.numel()
    }

    /// Exact multiply-accumulate count for one `h × w` image.
    pub fn count_macs(&self, h: usize, w: usize) -> Result<u64> {
        self.arch.macs(h, w)
    }

    /// Smallest side length that every stage and attention pool tiles.
    pub fn input_multiple(&self) -> usize {
        fn gcd(a: usize, b: usize) -> usize {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        let c = &self.cfg;
        let mut needs = vec![c.size_multiple(), c.refine_r1, c.refine_r2];
        for i in 0..4 {
            needs.push(c.r1[i] << (i + 1));
            needs.push(c.r2[i] << (i + 1));
        }
        needs.into_iter().fold(1, |acc, n| acc / gcd(acc, n) * n)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.input_multiple();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::shape(format!(
                "{h}x{w} input is not a multiple of {m}; use pad_to_multiple first"
            )));
        }
        Ok(())
    }

    /// `N×3×H×W` → `N×3×H×W`.
    pub fn forward<'t>(&self, p: &Bound<'t, S>, image: Var<'t, S>) -> Result<Var<'t, S>> {
        let (_, c, h, w) = image.value().dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3-channel input, got {c}")));
        }
        self.check_input(h, w)?;
        self.arch.forward(p, image, self.cfg.global_residual)
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let tape = Tape::no_grad();
        let p = self.params.bind(&tape);
        let x = tape.constant(image.clone());
        let y = self.forward(&p, x)?;
        let out = y.value();
        Ok((*out).clone())
    }

    /// Same architecture and weights at another precision.
    pub fn cast<T: Scalar>(&self) -> Model<T> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
        }
    }
}

impl Architecture {
    /// The network graph without input validation; `p` must hold the
    /// parameters in the registry order the architecture was built with.
    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, image: Var<'t, S>, global_residual: bool) -> Result<Var<'t, S>> {
        let h = image.shape()[2];
        let mut skips = Vec::with_capacity(4);
        let mut y = self.stem.forward(p, image)?;
        for i in 0..4 {
            if i > 0 {
                y = self.downs[i - 1].forward(p, y)?;
            }
            debug_assert_eq!(y.shape()[2], h >> (i + 1));
            y = self.encoder[i].forward(p, y)?;
            skips.push(y);
        }
        for level in (0..3).rev() {
            let d = &self.decoder[level];
            y = d.up.forward(p, y.upsample_nn(2)?)?;
            y = d.fuse.forward(p, y.channel_concat(skips[level])?)?;
            y = d.stage.forward(p, y)?;
        }
        y = self.refine_up.forward(p, y.upsample_nn(2)?)?;
        y = self.refine.forward(p, y)?;
        let out = self.head.forward(p, y)?;
        if global_residual {
            out.add(image)
        } else {
            Ok(out)
        }
    }

    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        let (mut total, mut ch, mut cw) = self.stem.macs(h, w)?;
        let mut skip_hw = Vec::new();
        for i in 0..4 {
            if i > 0 {
                let (m, nh, nw) = self.downs[i - 1].macs(ch, cw)?;
                total += m;
                (ch, cw) = (nh, nw);
            }
            total += self.encoder[i].macs(ch, cw)?;
            skip_hw.push((ch, cw));
        }
        for level in (0..3).rev() {
            let d = &self.decoder[level];
            let (sh, sw) = skip_hw[level];
            total += d.up.macs(sh, sw)?.0 + d.fuse.macs(sh, sw)?.0 + d.stage.macs(sh, sw)?;
        }
        total += self.refine_up.macs(h, w)?.0 + self.refine.macs(h, w)? + self.head.macs(h, w)?.0;
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_registry() {
        let a = Model::<f32>::build(&ModelConfig::tiny(), 11).unwrap();
        let b = Model::<f32>::build(&ModelConfig::tiny(), 11).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        let c = Model::<f32>::build(&ModelConfig::tiny(), 12).unwrap();
        assert!(a.params.iter().zip(c.params.iter()).any(|(x, y)| x.1.data() != y.1.data()));
    }

    #[test]
    fn rejects_indivisible_input() {
        let m = Model::<f32>::build(&ModelConfig::tiny(), 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 48, 48]).unwrap();
        assert!(matches!(m.infer(&x), Err(Error::Shape(_))));
    }
}

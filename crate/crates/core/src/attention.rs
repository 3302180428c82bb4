//! Multi-scale projection self-attention.
//!
//! Queries come from every full-resolution token. Keys and values come from
//! two pooled copies of the feature map (kernel = stride = `R₁`, `R₂`). Half
//! of the heads attend to the first pooled copy and half to the second; the
//! head outputs are concatenated and mixed by an output projection.
//!
//! The value path of each branch runs a reflect-padded 3×3 depthwise
//! convolution over the projected values in their pooled spatial layout
//! before the attention-weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnops::{Conv2d, ConvSpec, Linear, Padding};
use crate::params::{Bound, Init};
use crate::tensor::{Scalar, Var};

/// How keys and values are aggregated before projection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    /// Average pooling on two scales.
    #[default]
    Aa,
    /// Max pooling on two scales.
    Ma,
    /// Learned strided convolution (spatial reduction) on two scales.
    Sra,
    /// Average pooling on the first scale only, feeding all heads.
    Ssp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolBranch {
    pub kernel: usize,
    pub stride: usize,
}

impl PoolBranch {
    pub fn square(r: usize) -> Self {
        PoolBranch {
            kernel: r,
            stride: r,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub heads: usize,
    pub branch1: PoolBranch,
    pub branch2: PoolBranch,
    pub variant: AttentionVariant,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize, r1: usize, r2: usize) -> Self {
        AttentionConfig {
            channels,
            heads,
            branch1: PoolBranch::square(r1),
            branch2: PoolBranch::square(r2),
            variant: AttentionVariant::Aa,
        }
    }

    pub fn with_variant(mut self, variant: AttentionVariant) -> Self {
        self.variant = variant;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        let h = self.heads;
        if h == 0 || !c.is_multiple_of(h) {
            return Err(Error::config(format!("{c} channels not divisible by {h} heads")));
        }
        if !h.is_multiple_of(2) {
            return Err(Error::config(format!("head count {h} must be even")));
        }
        for b in [self.branch1, self.branch2] {
            if b.kernel == 0 || b.kernel != b.stride {
                return Err(Error::config(format!(
                    "pool kernel {} must equal stride {}",
                    b.kernel, b.stride
                )));
            }
        }
        Ok(())
    }

    /// Active branches with the number of heads each one serves.
    fn branches(&self) -> Vec<(PoolBranch, usize)> {
        match self.variant {
            AttentionVariant::Ssp => vec![(self.branch1, self.heads)],
            _ => vec![(self.branch1, self.heads / 2), (self.branch2, self.heads / 2)],
        }
    }
}

/// One key/value source: aggregation, projections and the value depthwise conv.
#[derive(Clone, Debug)]
pub struct KvBranch {
    pub pool: PoolBranch,
    pub heads: usize,
    pub reduce: Option<Conv2d>,
    pub key: Linear,
    pub value: Linear,
    pub value_dw: Conv2d,
}

#[derive(Clone, Debug)]
pub struct MspAttention {
    pub cfg: AttentionConfig,
    pub query: Linear,
    pub branches: Vec<KvBranch>,
    pub out: Linear,
}

/// `softmax(Q·Kᵀ / √D)·V` over the last two axes; leading axes are batch.
pub fn scaled_dot_product<'t, S: Scalar>(
    q: Var<'t, S>,
    k: Var<'t, S>,
    v: Var<'t, S>,
) -> Result<Var<'t, S>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    let r = qs.len();
    if r < 2 || ks.len() != r || vs.len() != r {
        return Err(Error::shape(format!("attention operands {qs:?}, {ks:?}, {vs:?}")));
    }
    let d = qs[r - 1];
    if ks[r - 1] != d || vs[r - 2] != ks[r - 2] || qs[..r - 2] != ks[..r - 2] || ks[..r - 2] != vs[..r - 2] {
        return Err(Error::shape(format!("attention operands {qs:?}, {ks:?}, {vs:?}")));
    }
    let mut axes: Vec<usize> = (0..r).collect();
    axes.swap(r - 1, r - 2);
    let scores = q.matmul(k.permute(&axes)?)?.scale(1.0 / (d as f64).sqrt())?;
    scores.softmax(r - 1)?.matmul(v)
}

impl MspAttention {
    pub fn new<S: Scalar>(init: &mut Init<'_, S>, cfg: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        let d = cfg.head_dim();
        let query = Linear::new(&mut init.sub("q"), c, c, true)?;
        let mut branches = Vec::new();
        for (i, (pool, heads)) in cfg.branches().into_iter().enumerate() {
            let mut b = init.sub(format!("kv{}", i + 1));
            let width = heads * d;
            let reduce = match cfg.variant {
                AttentionVariant::Sra => {
                    let spec = ConvSpec {
                        stride: pool.stride,
                        padding: Padding::NONE,
                        groups: 1,
                    };
                    Some(Conv2d::new(&mut b.sub("sr"), c, c, pool.kernel, spec, false)?)
                }
                _ => None,
            };
            branches.push(KvBranch {
                pool,
                heads,
                reduce,
                key: Linear::new(&mut b.sub("k"), c, width, true)?,
                value: Linear::new(&mut b.sub("v"), c, width, true)?,
                value_dw: Conv2d::depthwise3x3(&mut b.sub("v_dw"), width)?,
            });
        }
        let out = Linear::new(&mut init.sub("proj"), c, c, true)?;
        Ok(MspAttention {
            cfg,
            query,
            branches,
            out,
        })
    }

    fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        for b in &self.branches {
            if !h.is_multiple_of(b.pool.stride) || !w.is_multiple_of(b.pool.stride) {
                return Err(Error::shape(format!(
                    "{h}x{w} map is not divisible by pool stride {}",
                    b.pool.stride
                )));
            }
        }
        Ok(())
    }

    /// Aggregated map for one branch, still in NCHW layout.
    pub fn aggregate<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        branch: &KvBranch,
        x: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        match (self.cfg.variant, &branch.reduce) {
            (AttentionVariant::Sra, Some(conv)) => conv.forward(p, x),
            (AttentionVariant::Ma, _) => x.maxpool2d(branch.pool.kernel, branch.pool.stride),
            _ => x.avgpool2d(branch.pool.kernel, branch.pool.stride),
        }
    }

    /// Keys and values `[N, T', width]` of one branch from the NCHW input.
    pub fn pooled_projection<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        branch: &KvBranch,
        x: Var<'t, S>,
    ) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let (_, _, h, w) = x.value().dims4()?;
        if h % branch.pool.stride != 0 || w % branch.pool.stride != 0 {
            return Err(Error::shape(format!(
                "{h}x{w} map is not divisible by pool stride {}",
                branch.pool.stride
            )));
        }
        let pooled = self.aggregate(p, branch, x)?;
        let (_, _, ph, pw) = pooled.value().dims4()?;
        let tokens = pooled.to_tokens()?;
        let k = branch.key.forward(p, tokens)?;
        let v = branch.value.forward(p, tokens)?.from_tokens(ph, pw)?;
        let v = branch.value_dw.forward(p, v)?.to_tokens()?;
        Ok((k, v))
    }

    /// NCHW in, NCHW out.
    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let (_, _, h, w) = x.value().dims4()?;
        self.forward_tokens(p, x.to_tokens()?, h, w)?.from_tokens(h, w)
    }

    /// Token-major variant: `[N, H·W, C]` in and out.
    pub fn forward_tokens<'t, S: Scalar>(
        &self,
        p: &Bound<'t, S>,
        tokens: Var<'t, S>,
        h: usize,
        w: usize,
    ) -> Result<Var<'t, S>> {
        let x = tokens.from_tokens(h, w)?;
        let (n, c, _, _) = x.value().dims4()?;
        if c != self.cfg.channels {
            return Err(Error::shape(format!(
                "attention built for {} channels, got {c}",
                self.cfg.channels
            )));
        }
        self.check_extent(h, w)?;
        let heads = self.cfg.heads;
        let d = self.cfg.head_dim();
        let t = h * w;

        let q = self
            .query
            .forward(p, tokens)?
            .reshape(&[n, t, heads, d])?
            .permute(&[0, 2, 1, 3])?;

        let mut outputs = Vec::with_capacity(self.branches.len());
        let mut head0 = 0;
        for branch in &self.branches {
            let (k, v) = self.pooled_projection(p, branch, x)?;
            let tp = k.shape()[1];
            let split = |m: Var<'t, S>| -> Result<Var<'t, S>> {
                m.reshape(&[n, tp, branch.heads, d])?.permute(&[0, 2, 1, 3])
            };
            let qb = q.narrow(1, head0, branch.heads)?;
            outputs.push(scaled_dot_product(qb, split(k)?, split(v)?)?);
            head0 += branch.heads;
        }
        let merged = Var::concat(&outputs, 1)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n, t, c])?;
        self.out.forward(p, merged)
    }

    /// Multiply-accumulates for one `h × w` map.
    pub fn macs(&self, h: usize, w: usize) -> Result<u64> {
        self.check_extent(h, w)?;
        let t = h * w;
        let d = self.cfg.head_dim();
        let mut total = self.query.macs(t) + self.out.macs(t);
        for b in &self.branches {
            let (ph, pw) = (h / b.pool.stride, w / b.pool.stride);
            let tp = ph * pw;
            if let Some(conv) = &b.reduce {
                total += conv.macs(h, w)?.0;
            }
            total += b.key.macs(tp) + b.value.macs(tp);
            total += b.value_dw.macs(ph, pw)?.0;
            // Q·Kᵀ and attention·V
            total += 2 * (b.heads * t * tp * d) as u64;
        }
        Ok(total)
    }
}

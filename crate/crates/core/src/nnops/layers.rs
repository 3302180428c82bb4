//! Parameterized layers: weights live in a [`ParamStore`], layers hold ids.

use super::conv::{output_extent, ConvSpec, Padding};
use crate::error::Result;
use crate::params::{Bound, Init, ParamId};
use crate::tensor::{Scalar, Var};

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub spec: ConvSpec,
}

impl Conv2d {
    /// Weights uniform in ±1/√fan_in, bias zero.
    pub fn new<S: Scalar>(
        init: &mut Init<'_, S>,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        spec: ConvSpec,
        bias: bool,
    ) -> Result<Self> {
        let cig = in_channels / spec.groups;
        let bound = 1.0 / ((cig * kernel * kernel) as f64).sqrt();
        let weight = init.uniform("weight", &[out_channels, cig, kernel, kernel], bound)?;
        let bias = if bias {
            Some(init.constant("bias", &[out_channels], 0.0)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            spec,
        })
    }

    pub fn depthwise3x3<S: Scalar>(init: &mut Init<'_, S>, channels: usize) -> Result<Self> {
        let spec = ConvSpec {
            stride: 1,
            padding: Padding::reflect(1),
            groups: channels,
        };
        Conv2d::new(init, channels, channels, 3, spec, true)
    }

    pub fn pointwise<S: Scalar>(init: &mut Init<'_, S>, cin: usize, cout: usize) -> Result<Self> {
        Conv2d::new(init, cin, cout, 1, ConvSpec::default(), true)
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.conv2d(p.get(self.weight), self.bias.map(|b| p.get(b)), self.spec)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let pad = self.spec.padding.size;
        Ok((
            output_extent(h, pad, self.kernel, self.spec.stride)?,
            output_extent(w, pad, self.kernel, self.spec.stride)?,
        ))
    }

    /// Multiply-accumulates for one image of `h × w`, plus the output extent.
    pub fn macs(&self, h: usize, w: usize) -> Result<(u64, usize, usize)> {
        let (ho, wo) = self.output_hw(h, w)?;
        let per_out = self.in_channels / self.spec.groups * self.kernel * self.kernel;
        Ok(((self.out_channels * per_out * ho * wo) as u64, ho, wo))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Truncated-normal weights (std 0.02), zero bias.
    pub fn new<S: Scalar>(init: &mut Init<'_, S>, cin: usize, cout: usize, bias: bool) -> Result<Self> {
        let weight = init.trunc_normal("weight", &[cin, cout], 0.02)?;
        let bias = if bias {
            Some(init.constant("bias", &[cout], 0.0)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            in_features: cin,
            out_features: cout,
        })
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.linear(p.get(self.weight), self.bias.map(|b| p.get(b)))
    }

    pub fn macs(&self, tokens: usize) -> u64 {
        (tokens * self.in_features * self.out_features) as u64
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<S: Scalar>(init: &mut Init<'_, S>, channels: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: init.constant("gamma", &[channels], 1.0)?,
            beta: init.constant("beta", &[channels], 0.0)?,
            eps: Self::EPS,
        })
    }

    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        x.layernorm(p.get(self.gamma), p.get(self.beta), self.eps)
    }
}

/// Squeeze-and-excitation channel attention.
#[derive(Clone, Debug)]
pub struct SqueezeExcite {
    pub reduce: Conv2d,
    pub expand: Conv2d,
    pub hidden: usize,
}

impl SqueezeExcite {
    pub const REDUCTION: usize = 4;

    pub fn hidden_width(channels: usize, reduction: usize) -> usize {
        (channels / reduction).max(4)
    }

    pub fn new<S: Scalar>(init: &mut Init<'_, S>, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = Self::hidden_width(channels, reduction);
        Ok(SqueezeExcite {
            reduce: Conv2d::pointwise(&mut init.sub("reduce"), channels, hidden)?,
            expand: Conv2d::pointwise(&mut init.sub("expand"), hidden, channels)?,
            hidden,
        })
    }

    /// `x ⊙ sigmoid(expand(relu(reduce(avgpool(x)))))`, one gate per channel.
    pub fn forward<'t, S: Scalar>(&self, p: &Bound<'t, S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let pooled = x.global_avg_pool()?;
        let hidden = self.reduce.forward(p, pooled)?.relu()?;
        let gate = self.expand.forward(p, hidden)?.sigmoid()?;
        x.mul_channels(gate)
    }

    pub fn macs(&self) -> u64 {
        (2 * self.hidden * self.reduce.in_channels) as u64
    }
}

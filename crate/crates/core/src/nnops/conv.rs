use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zeros,
    /// Mirror without repeating the edge; a spatial extent of 1 falls back to
    /// edge replication.
    Reflect,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Padding {
    pub mode: PadMode,
    pub size: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        mode: PadMode::Zeros,
        size: 0,
    };

    pub fn zeros(size: usize) -> Self {
        Padding {
            mode: PadMode::Zeros,
            size,
        }
    }

    pub fn reflect(size: usize) -> Self {
        Padding {
            mode: PadMode::Reflect,
            size,
        }
    }
}

/// Geometry of a 2-D convolution; weights travel separately.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: Padding,
    pub groups: usize,
}

impl Default for ConvSpec {
    fn default() -> Self {
        ConvSpec {
            stride: 1,
            padding: Padding::NONE,
            groups: 1,
        }
    }
}

/// Source index for padded coordinate `i` (may be negative) on an axis of length `n`.
fn source_index(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    let n = n as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zeros => None,
        PadMode::Reflect => {
            if n == 1 {
                return Some(0);
            }
            let period = 2 * (n - 1);
            let mut j = i.rem_euclid(period);
            if j >= n {
                j = period - j;
            }
            Some(j as usize)
        }
    }
}

pub(crate) fn output_extent(len: usize, pad: usize, kernel: usize, stride: usize) -> Result<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || padded < kernel {
        return Err(Error::shape(format!(
            "kernel {kernel} does not fit extent {len} with padding {pad}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Gathers a padded copy; `index[k]` is the source element of padded element `k`.
fn pad_index(n: usize, c: usize, h: usize, w: usize, p: Padding) -> Vec<Option<usize>> {
    let (hp, wp) = (h + 2 * p.size, w + 2 * p.size);
    let mut index = Vec::with_capacity(n * c * hp * wp);
    let rows: Vec<Option<usize>> = (0..hp)
        .map(|y| source_index(y as isize - p.size as isize, h, p.mode))
        .collect();
    let cols: Vec<Option<usize>> = (0..wp)
        .map(|x| source_index(x as isize - p.size as isize, w, p.mode))
        .collect();
    for plane in 0..n * c {
        for r in &rows {
            for cc in &cols {
                index.push(match (r, cc) {
                    (Some(y), Some(x)) => Some(plane * h * w + y * w + x),
                    _ => None,
                });
            }
        }
    }
    index
}

impl<'t, S: Scalar> Var<'t, S> {
    /// Spatial padding of an NCHW tensor on all four sides.
    pub fn pad2d(self, padding: Padding) -> Result<Var<'t, S>> {
        if padding.size == 0 {
            return Ok(self);
        }
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if padding.mode == PadMode::Reflect && ((h > 1 && padding.size >= h) || (w > 1 && padding.size >= w)) {
            return Err(Error::shape(format!(
                "reflect padding {} needs extents above it, got {h}x{w}",
                padding.size
            )));
        }
        let index = pad_index(n, c, h, w, padding);
        let data = index
            .iter()
            .map(|i| i.map_or(S::zero(), |i| x.data()[i]))
            .collect();
        let out = Tensor::new(&[n, c, h + 2 * padding.size, w + 2 * padding.size], data)?;
        let total = x.len();
        self.tape().record(&[self], out, move |ctx| {
            let mut g = vec![S::zero(); total];
            for (gi, src) in ctx.gout.iter().zip(&index) {
                if let Some(s) = src {
                    g[*s] = g[*s] + *gi;
                }
            }
            Ok(vec![Some(g)])
        })
    }

    /// Cross-correlation of NCHW input with `weight [C_out, C_in/groups, kH, kW]`.
    pub fn conv2d(
        self,
        weight: Var<'t, S>,
        bias: Option<Var<'t, S>>,
        spec: ConvSpec,
    ) -> Result<Var<'t, S>> {
        let (_, c, h, w) = self.value().dims4()?;
        let wt = weight.value();
        let (co, cig, kh, kw) = wt.dims4()?;
        let g = spec.groups;
        if g == 0 || c % g != 0 || co % g != 0 || c / g != cig {
            return Err(Error::shape(format!(
                "conv2d: input channels {c}, weight {:?}, groups {g}",
                wt.shape()
            )));
        }
        if let Some(b) = bias {
            if b.shape() != [co] {
                return Err(Error::shape(format!("conv2d bias {:?} for {co} outputs", b.shape())));
            }
        }
        output_extent(h, spec.padding.size, kh, spec.stride)?;
        output_extent(w, spec.padding.size, kw, spec.stride)?;
        let padded = self.pad2d(spec.padding)?;
        conv_valid(padded, weight, bias, spec.stride, g)
    }
}

fn widen<S: Scalar>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn narrow<S: Scalar>(v: Vec<f64>) -> Vec<S> {
    v.into_iter().map(S::of).collect()
}

fn conv_valid<'t, S: Scalar>(
    x: Var<'t, S>,
    weight: Var<'t, S>,
    bias: Option<Var<'t, S>>,
    stride: usize,
    groups: usize,
) -> Result<Var<'t, S>> {
    let xv = x.value();
    let wv = weight.value();
    let (n, c, h, w) = xv.dims4()?;
    let (co, cig, kh, kw) = wv.dims4()?;
    let ho = output_extent(h, 0, kh, stride)?;
    let wo = output_extent(w, 0, kw, stride)?;
    let cog = co / groups;
    let geo = Geometry {
        n, c, h, w, co, cig, cog, kh, kw, ho, wo, stride,
    };

    // Accumulation runs in f64 for either precision; f32 sums over many taps
    // otherwise lose digits whenever the terms cancel.
    let mut out = vec![0.0f64; n * co * ho * wo];
    if let Some(b) = bias {
        let b = b.value();
        for (plane, chunk) in out.chunks_mut(ho * wo).enumerate() {
            chunk.fill(b.data()[plane % co].as_f64());
        }
    }
    let (wd, xd) = (widen(wv.data()), widen(xv.data()));
    geo.for_each_tap(|xi, wi, oi| out[oi] += wd[wi] * xd[xi]);
    x.tape().add_macs((n * co * cig * kh * kw * ho * wo) as u64);

    let out = Tensor::new(&[n, co, ho, wo], narrow(out))?;
    let mut inputs = vec![x, weight];
    inputs.extend(bias);
    x.tape().record(&inputs, out, move |ctx| {
        let (xd, wd, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), widen(ctx.gout));
        let dx = ctx.needs[0].then(|| {
            let wd = widen(wd);
            let mut dx = vec![0.0f64; xd.len()];
            geo.for_each_tap(|xi, wi, oi| dx[xi] += wd[wi] * g[oi]);
            narrow(dx)
        });
        let dw = ctx.needs[1].then(|| {
            let xd = widen(xd);
            let mut dw = vec![0.0f64; wd.len()];
            geo.for_each_tap(|xi, wi, oi| dw[wi] += xd[xi] * g[oi]);
            narrow(dw)
        });
        let mut grads = vec![dx, dw];
        if ctx.inputs.len() == 3 {
            let db = ctx.needs[2].then(|| {
                let mut db = vec![0.0f64; co];
                for (plane, chunk) in g.chunks(ho * wo).enumerate() {
                    db[plane % co] += chunk.iter().sum::<f64>();
                }
                narrow(db)
            });
            grads.push(db);
        }
        Ok(grads)
    })
}

#[derive(Clone, Copy)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    cig: usize,
    cog: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
}

impl Geometry {
    /// Visits every (input, weight, output) index triple of the valid convolution.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let Geometry {
            n, c, h, w, co, cig, cog, kh, kw, ho, wo, stride,
        } = *self;
        for b in 0..n {
            for oc in 0..co {
                let group = oc / cog;
                let out_plane = (b * co + oc) * ho * wo;
                for icl in 0..cig {
                    let in_plane = (b * c + group * cig + icl) * h * w;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wi = ((oc * cig + icl) * kh + ky) * kw + kx;
                            for oy in 0..ho {
                                let in_row = in_plane + (oy * stride + ky) * w + kx;
                                let out_row = out_plane + oy * wo;
                                for ox in 0..wo {
                                    f(in_row + ox * stride, wi, out_row + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    #[test]
    fn reflect_index_mapping() {
        let idx: Vec<_> = (-2..6).map(|i| source_index(i, 4, PadMode::Reflect).unwrap()).collect();
        assert_eq!(idx, vec![2, 1, 0, 1, 2, 3, 2, 1]);
        assert_eq!(source_index(-1, 1, PadMode::Reflect), Some(0));
        assert_eq!(source_index(-1, 4, PadMode::Zeros), None);
    }

    #[test]
    fn identity_one_by_one() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap());
        let w = tape.constant(Tensor::ones(&[1, 1, 1, 1]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1]).unwrap());
        let y = x.conv2d(w, Some(b), ConvSpec::default()).unwrap();
        assert_eq!(y.value().data(), x.value().data());
    }

    #[test]
    fn depthwise_reflect_keeps_constants() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::full(&[1, 3, 4, 5], 0.7).unwrap());
        let w = tape.constant(Tensor::ones(&[3, 1, 3, 3]).unwrap());
        let spec = ConvSpec {
            stride: 1,
            padding: Padding::reflect(1),
            groups: 3,
        };
        let y = x.conv2d(w, None, spec).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 4, 5]);
        assert!(y.value().data().iter().all(|&v| (v - 6.3).abs() < 1e-12));
    }

    #[test]
    fn channel_mismatch_and_tiny_output() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]).unwrap());
        let w = tape.constant(Tensor::zeros(&[4, 3, 3, 3]).unwrap());
        assert!(matches!(x.conv2d(w, None, ConvSpec::default()), Err(Error::Shape(_))));
        let w5 = tape.constant(Tensor::zeros(&[1, 2, 5, 5]).unwrap());
        assert!(matches!(x.conv2d(w5, None, ConvSpec::default()), Err(Error::Shape(_))));
    }
}

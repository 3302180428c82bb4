use super::conv::output_extent;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

fn pool_dims(shape: (usize, usize, usize, usize), kernel: usize, stride: usize) -> Result<(usize, usize)> {
    let (_, _, h, w) = shape;
    if kernel == 0 || stride == 0 {
        return Err(Error::shape("pool kernel and stride must be positive"));
    }
    if kernel > h || kernel > w {
        return Err(Error::shape(format!("pool kernel {kernel} exceeds extent {h}x{w}")));
    }
    Ok((output_extent(h, 0, kernel, stride)?, output_extent(w, 0, kernel, stride)?))
}

/// Calls `f(out_index, window_input_indices)` for every pooling window.
fn for_each_window(
    (n, c, h, w): (usize, usize, usize, usize),
    (ho, wo): (usize, usize),
    kernel: usize,
    stride: usize,
    mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>),
) {
    for plane in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = plane * h * w + oy * stride * w + ox * stride;
                let mut it = (0..kernel).flat_map(move |ky| (0..kernel).map(move |kx| base + ky * w + kx));
                f((plane * ho + oy) * wo + ox, &mut it);
            }
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn avgpool2d(self, kernel: usize, stride: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        let dims = x.dims4()?;
        let (ho, wo) = pool_dims(dims, kernel, stride)?;
        let (n, c, _, _) = dims;
        let inv = S::of(1.0 / (kernel * kernel) as f64);
        let mut out = vec![S::zero(); n * c * ho * wo];
        for_each_window(dims, (ho, wo), kernel, stride, |o, win| {
            out[o] = win.map(|i| x.data()[i]).sum::<S>() * inv;
        });
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        let total = x.len();
        self.tape().record(&[self], out, move |ctx| {
            let mut g = vec![S::zero(); total];
            for_each_window(dims, (ho, wo), kernel, stride, |o, win| {
                let v = ctx.gout[o] * inv;
                for i in win {
                    g[i] = g[i] + v;
                }
            });
            Ok(vec![Some(g)])
        })
    }

    /// Max pooling; ties route the gradient to the first maximal element.
    pub fn maxpool2d(self, kernel: usize, stride: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        let dims = x.dims4()?;
        let (ho, wo) = pool_dims(dims, kernel, stride)?;
        let (n, c, _, _) = dims;
        let mut out = vec![S::zero(); n * c * ho * wo];
        let mut argmax = vec![0usize; out.len()];
        for_each_window(dims, (ho, wo), kernel, stride, |o, win| {
            let mut best = None::<(usize, S)>;
            for i in win {
                let v = x.data()[i];
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            let (i, v) = best.expect("non-empty window");
            out[o] = v;
            argmax[o] = i;
        });
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        let total = x.len();
        self.tape().record(&[self], out, move |ctx| {
            let mut g = vec![S::zero(); total];
            for (&i, &go) in argmax.iter().zip(ctx.gout) {
                g[i] = g[i] + go;
            }
            Ok(vec![Some(g)])
        })
    }

    /// Mean over H and W, keeping them as unit axes: `[N, C, 1, 1]`.
    pub fn global_avg_pool(self) -> Result<Var<'t, S>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let inv = S::of(1.0 / hw as f64);
        let out: Vec<S> = x.data().chunks(hw).map(|p| p.iter().copied().sum::<S>() * inv).collect();
        let out = Tensor::new(&[n, c, 1, 1], out)?;
        self.tape().record(&[self], out, move |ctx| {
            let g = ctx.gout.iter().flat_map(|&g| std::iter::repeat_n(g * inv, hw)).collect();
            Ok(vec![Some(g)])
        })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nn(self, factor: usize) -> Result<Var<'t, S>> {
        if factor == 0 {
            return Err(Error::shape("upsample factor must be ≥ 1"));
        }
        if factor == 1 {
            return Ok(self);
        }
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let (ho, wo) = (h * factor, w * factor);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in x.data().chunks(h * w) {
            for oy in 0..ho {
                let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..wo {
                    out.push(row[ox / factor]);
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        let total = x.len();
        self.tape().record(&[self], out, move |ctx| {
            let mut g = vec![S::zero(); total];
            for (p, gp) in ctx.gout.chunks(ho * wo).enumerate() {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let i = p * h * w + (oy / factor) * w + ox / factor;
                        g[i] = g[i] + gp[oy * wo + ox];
                    }
                }
            }
            Ok(vec![Some(g)])
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::tensor::{Tape, Tensor};

    fn grid() -> Tensor<f64> {
        Tensor::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap()
    }

    #[test]
    fn avgpool_cases() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(grid());
        assert_eq!(x.avgpool2d(2, 2).unwrap().value().data(), &[2.5]);
        assert_eq!(x.avgpool2d(1, 1).unwrap().value().data(), x.value().data());
        let c = tape.constant(Tensor::full(&[1, 2, 4, 4], 2.0).unwrap());
        let p = c.avgpool2d(2, 2).unwrap();
        assert_eq!(p.shape(), vec![1, 2, 2, 2]);
        assert!(p.value().data().iter().all(|&v| v == 2.0));
        assert!(x.avgpool2d(3, 3).is_err());
    }

    #[test]
    fn maxpool_cases() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(grid());
        assert_eq!(x.maxpool2d(2, 2).unwrap().value().data(), &[4.0]);
        assert_eq!(x.maxpool2d(1, 1).unwrap().value().data(), x.value().data());
        let c = tape.constant(Tensor::full(&[1, 1, 4, 4], -1.5).unwrap());
        assert!(c.maxpool2d(2, 2).unwrap().value().data().iter().all(|&v| v == -1.5));
    }

    #[test]
    fn upsample_blocks() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(grid());
        assert_eq!(x.upsample_nn(1).unwrap().value().data(), x.value().data());
        let up = x.upsample_nn(2).unwrap();
        assert_eq!(up.shape(), vec![1, 1, 4, 4]);
        assert_eq!(
            up.value().data(),
            &[1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }
}

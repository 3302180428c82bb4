use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Source channel for each output channel of a shuffle with `groups` groups.
///
/// Channels are viewed as `[groups, C/groups]`, transposed, and flattened.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::shape(format!(
            "channel shuffle: {channels} channels not divisible into {groups} groups"
        )));
    }
    let per = channels / groups;
    Ok((0..channels).map(|j| (j % groups) * per + j / groups).collect())
}

fn gather_channels<S: Scalar>(data: &[S], n: usize, c: usize, hw: usize, src: &[usize]) -> Vec<S> {
    let mut out = Vec::with_capacity(data.len());
    for b in 0..n {
        for &s in src {
            let start = (b * c + s) * hw;
            out.extend_from_slice(&data[start..start + hw]);
        }
    }
    out
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn channel_shuffle(self, groups: usize) -> Result<Var<'t, S>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let perm = shuffle_permutation(c, groups)?;
        if groups == 1 {
            return Ok(self);
        }
        let out = Tensor::new(x.shape(), gather_channels(x.data(), n, c, h * w, &perm))?;
        let mut inverse = vec![0; c];
        for (j, &s) in perm.iter().enumerate() {
            inverse[s] = j;
        }
        self.tape().record(&[self], out, move |ctx| {
            Ok(vec![Some(gather_channels(ctx.gout, n, c, h * w, &inverse))])
        })
    }

    /// Splits NCHW channels into two equal halves.
    pub fn channel_split(self) -> Result<(Var<'t, S>, Var<'t, S>)> {
        let (_, c, _, _) = self.value().dims4()?;
        if c % 2 != 0 {
            return Err(Error::shape(format!("cannot split {c} channels in half")));
        }
        Ok((self.narrow(1, 0, c / 2)?, self.narrow(1, c / 2, c / 2)?))
    }

    pub fn channel_concat(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), other.value());
        let (n, _, h, w) = a.dims4()?;
        let (n2, _, h2, w2) = b.dims4()?;
        if (n, h, w) != (n2, h2, w2) {
            return Err(Error::shape(format!(
                "channel concat of {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        Var::concat(&[self, other], 1)
    }

    /// Scales each channel plane of `self [N,C,H,W]` by `gate [N,C,1,1]`.
    pub fn mul_channels(self, gate: Var<'t, S>) -> Result<Var<'t, S>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        if gate.shape() != [n, c, 1, 1] {
            return Err(Error::shape(format!(
                "channel gate {:?} for input {:?}",
                gate.shape(),
                x.shape()
            )));
        }
        let gv = gate.value();
        let hw = h * w;
        let out: Vec<S> = x
            .data()
            .chunks(hw)
            .zip(gv.data())
            .flat_map(|(p, &s)| p.iter().map(move |&v| v * s))
            .collect();
        let out = Tensor::new(x.shape(), out)?;
        self.tape().record(&[self, gate], out, move |ctx| {
            let (xd, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
            let dx = ctx.needs[0].then(|| {
                ctx.gout
                    .chunks(hw)
                    .zip(gd)
                    .flat_map(|(p, &s)| p.iter().map(move |&v| v * s))
                    .collect()
            });
            let dgate = ctx.needs[1].then(|| {
                ctx.gout
                    .chunks(hw)
                    .zip(xd.chunks(hw))
                    .map(|(g, x)| g.iter().zip(x).map(|(&a, &b)| a * b).sum())
                    .collect()
            });
            Ok(vec![dx, dgate])
        })
    }

    /// `[N, C, H, W]` → `[N, H·W, C]`.
    pub fn to_tokens(self) -> Result<Var<'t, S>> {
        let (n, c, h, w) = self.value().dims4()?;
        self.reshape(&[n, c, h * w])?.permute(&[0, 2, 1])
    }

    /// `[N, H·W, C]` → `[N, C, H, W]`.
    pub fn from_tokens(self, h: usize, w: usize) -> Result<Var<'t, S>> {
        let shape = self.shape();
        let [n, t, c] = shape[..] else {
            return Err(Error::shape(format!("expected [N, T, C], got {shape:?}")));
        };
        if t != h * w {
            return Err(Error::shape(format!("{t} tokens do not form a {h}x{w} map")));
        }
        self.permute(&[0, 2, 1])?.reshape(&[n, c, h, w])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn channels4() -> Tensor<f64> {
        // channel k holds the value k at each of its 2 pixels
        Tensor::from_f64(&[1, 4, 1, 2], &[0., 0., 1., 1., 2., 2., 3., 3.]).unwrap()
    }

    #[test]
    fn shuffle_c4_g2() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(channels4());
        let y = x.channel_shuffle(2).unwrap();
        assert_eq!(y.value().data(), &[0., 0., 2., 2., 1., 1., 3., 3.]);
        let z = y.channel_shuffle(2).unwrap();
        assert_eq!(z.value().data(), x.value().data());
        assert_eq!(x.channel_shuffle(1).unwrap().value().data(), x.value().data());
        assert!(matches!(x.channel_shuffle(3), Err(Error::Shape(_))));
    }

    #[test]
    fn split_and_concat() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.constant(channels4());
        let (a, b) = x.channel_split().unwrap();
        assert_eq!(a.value().data(), &[0., 0., 1., 1.]);
        assert_eq!(b.value().data(), &[2., 2., 3., 3.]);
        assert_eq!(a.channel_concat(b).unwrap().value().data(), x.value().data());

        let odd = tape.constant(Tensor::zeros(&[1, 3, 2, 2]).unwrap());
        assert!(odd.channel_split().is_err());
        let tall = tape.constant(Tensor::zeros(&[1, 2, 3, 2]).unwrap());
        assert!(a.channel_concat(tall).is_err());
    }

    #[test]
    fn tokens_round_trip() {
        let tape = Tape::<f64>::no_grad();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(Tensor::from_f64(&[1, 2, 3, 4], &data).unwrap());
        let t = x.to_tokens().unwrap();
        assert_eq!(t.shape(), vec![1, 12, 2]);
        assert_eq!(&t.value().data()[..4], &[0., 12., 1., 13.]);
        assert_eq!(t.from_tokens(3, 4).unwrap().value().data(), x.value().data());
    }
}

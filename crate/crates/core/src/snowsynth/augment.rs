use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One geometric transform: square crop, optional horizontal flip, then
/// `quarter_turns` counter-clockwise rotations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub y0: usize,
    pub x0: usize,
    pub crop: usize,
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Augment {
    pub fn sample(rng: &mut ChaCha8Rng, h: usize, w: usize, crop: usize) -> Result<Self> {
        if crop == 0 || crop > h.min(w) {
            return Err(Error::input(format!("crop {crop} does not fit a {h}x{w} image")));
        }
        Ok(Augment {
            y0: rng.random_range(0..=h - crop),
            x0: rng.random_range(0..=w - crop),
            crop,
            flip: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
        })
    }

    /// Source `(y, x)` of output pixel `(y, x)`.
    fn source(&self, mut y: usize, mut x: usize) -> (usize, usize) {
        let last = self.crop - 1;
        for _ in 0..self.quarter_turns {
            (y, x) = (x, last - y);
        }
        if self.flip {
            x = last - x;
        }
        (self.y0 + y, self.x0 + x)
    }

    pub fn apply<S: Scalar>(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, c, h, w) = image.dims4()?;
        if self.y0 + self.crop > h || self.x0 + self.crop > w {
            return Err(Error::input(format!("crop window exceeds {h}x{w} image")));
        }
        let s = self.crop;
        let mut out = Vec::with_capacity(n * c * s * s);
        for plane in image.data().chunks(h * w) {
            for y in 0..s {
                for x in 0..s {
                    let (sy, sx) = self.source(y, x);
                    out.push(plane[sy * w + sx]);
                }
            }
        }
        Tensor::new(&[n, c, s, s], out)
    }
}

/// Applies one sampled transform to both images of a pair.
pub fn augment<S: Scalar>(
    (snowy, clean): (&Tensor<S>, &Tensor<S>),
    rng: &mut ChaCha8Rng,
    crop: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if snowy.shape() != clean.shape() {
        return Err(Error::shape(format!(
            "pair shapes differ: {:?} vs {:?}",
            snowy.shape(),
            clean.shape()
        )));
    }
    let (_, _, h, w) = snowy.dims4()?;
    let t = Augment::sample(rng, h, w, crop)?;
    Ok((t.apply(snowy)?, t.apply(clean)?))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;

    use super::*;

    fn ramp(n: usize, c: usize, h: usize, w: usize) -> Tensor<f64> {
        let d: Vec<f64> = (0..n * c * h * w).map(|i| i as f64).collect();
        Tensor::from_f64(&[n, c, h, w], &d).unwrap()
    }

    #[test]
    fn full_crop_without_flip_or_turn_is_identity() {
        let x = ramp(1, 3, 5, 5);
        let t = Augment {
            y0: 0,
            x0: 0,
            crop: 5,
            flip: false,
            quarter_turns: 0,
        };
        assert_eq!(t.apply(&x).unwrap(), x);
    }

    #[test]
    fn four_turns_are_identity() {
        let x = ramp(1, 2, 4, 4);
        let t = Augment {
            y0: 0,
            x0: 0,
            crop: 4,
            flip: false,
            quarter_turns: 1,
        };
        let mut y = x.clone();
        for _ in 0..4 {
            y = t.apply(&y).unwrap();
        }
        assert_eq!(y, x);
        assert_ne!(t.apply(&x).unwrap(), x);
    }

    #[test]
    fn quarter_turn_layout() {
        // [[0,1],[2,3]] turned counter-clockwise is [[1,3],[0,2]].
        let x = ramp(1, 1, 2, 2);
        let t = Augment {
            y0: 0,
            x0: 0,
            crop: 2,
            flip: false,
            quarter_turns: 1,
        };
        assert_eq!(t.apply(&x).unwrap().data(), &[1.0, 3.0, 0.0, 2.0]);
    }

    #[test]
    fn oversized_crop_rejected() {
        let x = ramp(1, 3, 4, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(augment((&x, &x), &mut rng, 5), Err(Error::Input(_))));
    }

    proptest! {
        #[test]
        fn pairing_is_preserved(seed in 0u64..1000, crop in 1usize..6) {
            let a = ramp(1, 3, 6, 7);
            let b = a.map(|v| 2.0 * v + 1.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (ta, tb) = augment((&a, &b), &mut rng, crop).unwrap();
            for (x, y) in ta.data().iter().zip(tb.data()) {
                prop_assert_eq!(*y, 2.0 * x + 1.0);
            }
        }
    }
}

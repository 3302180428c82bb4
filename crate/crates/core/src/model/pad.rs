use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn mirror(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let j = i % period;
    if j < n {
        j
    } else {
        period - j
    }
}

/// Reflect-pads the right and bottom edges up to the next multiple of `m`.
///
/// Returns the padded image and the original `(height, width)`.
pub fn pad_to_multiple<S: Scalar>(image: &Tensor<S>, m: usize) -> Result<(Tensor<S>, (usize, usize))> {
    if m == 0 {
        return Err(Error::input("pad multiple must be ≥ 1"));
    }
    let (n, c, h, w) = image.dims4()?;
    let (hp, wp) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (hp, wp) == (h, w) {
        return Ok((image.clone(), (h, w)));
    }
    let mut out = Vec::with_capacity(n * c * hp * wp);
    for plane in image.data().chunks(h * w) {
        for y in 0..hp {
            let row = &plane[mirror(y, h) * w..(mirror(y, h) + 1) * w];
            out.extend((0..wp).map(|x| row[mirror(x, w)]));
        }
    }
    Ok((Tensor::new(&[n, c, hp, wp], out)?, (h, w)))
}

/// Keeps the top-left `h × w` window.
pub fn crop_to<S: Scalar>(image: &Tensor<S>, (h, w): (usize, usize)) -> Result<Tensor<S>> {
    let (n, c, hp, wp) = image.dims4()?;
    if h > hp || w > wp {
        return Err(Error::shape(format!("cannot crop {hp}x{wp} to {h}x{w}")));
    }
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in image.data().chunks(hp * wp) {
        for y in 0..h {
            out.extend_from_slice(&plane[y * wp..y * wp + w]);
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pads_65_to_96() {
        let data: Vec<f64> = (0..3 * 65 * 65).map(|i| (i % 251) as f64 / 250.0).collect();
        let x = Tensor::<f64>::from_f64(&[1, 3, 65, 65], &data).unwrap();
        let (p, orig) = pad_to_multiple(&x, 32).unwrap();
        assert_eq!(p.shape(), &[1, 3, 96, 96]);
        assert_eq!(orig, (65, 65));
        assert_eq!(crop_to(&p, orig).unwrap(), x);
    }

    #[test]
    fn divisible_is_unchanged() {
        let x = Tensor::<f32>::full(&[1, 3, 64, 32], 0.25).unwrap();
        let (p, orig) = pad_to_multiple(&x, 32).unwrap();
        assert_eq!(p, x);
        assert_eq!(orig, (64, 32));
    }

    #[test]
    fn reflect_content() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 1, 3], &[1., 2., 3.]).unwrap();
        let (p, _) = pad_to_multiple(&x, 5).unwrap();
        assert_eq!(p.data(), &[1., 2., 3., 2., 1., 1., 2., 3., 2., 1., 1., 2., 3., 2., 1., 1., 2., 3., 2., 1., 1., 2., 3., 2., 1.]);
    }
}

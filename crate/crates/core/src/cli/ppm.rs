//! Binary PPM (P6, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn fail<T>(offset: usize, message: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset,
        message: message.into(),
    })
}

struct Header<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.buf.len() {
            match self.buf[self.pos] {
                b'#' => {
                    while self.pos < self.buf.len() && self.buf[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.buf.len() && self.buf[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return fail(start, format!("expected {what}"));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .expect("ascii digits")
            .parse()
            .or_else(|_| fail(start, format!("{what} is out of range")))
    }
}

/// Decodes a P6 image into `[1, 3, H, W]` with values `byte / 255`.
pub fn decode_ppm<S: Scalar>(buf: &[u8]) -> Result<Tensor<S>> {
    if !buf.starts_with(b"P6") {
        return fail(0, "missing P6 magic");
    }
    let mut h = Header { buf, pos: 2 };
    if h.pos < buf.len() && !buf[h.pos].is_ascii_whitespace() && buf[h.pos] != b'#' {
        return fail(h.pos, "expected whitespace after magic");
    }
    let width = h.number("width")?;
    let height = h.number("height")?;
    h.skip_space();
    let at = h.pos;
    let maxval = h.number("maxval")?;
    if maxval != 255 {
        return fail(at, format!("unsupported maxval {maxval}; only 255 is supported"));
    }
    if width == 0 || height == 0 {
        return fail(at, "image extents must be positive");
    }
    if h.pos >= buf.len() || !buf[h.pos].is_ascii_whitespace() {
        return fail(h.pos, "expected a single whitespace byte before pixel data");
    }
    let start = h.pos + 1;
    let n = width.checked_mul(height).and_then(|p| p.checked_mul(3));
    let Some(n) = n else {
        return fail(at, "image extents overflow");
    };
    if buf.len() - start < n {
        return fail(buf.len(), format!("pixel data truncated: {} of {n} bytes", buf.len() - start));
    }
    if buf.len() - start > n {
        return fail(start + n, "trailing bytes after pixel data");
    }
    let px = &buf[start..];
    let plane = width * height;
    let mut data = vec![S::zero(); n];
    for (i, rgb) in px.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * plane + i] = S::of(rgb[c] as f64 / 255.0);
        }
    }
    Tensor::new(&[1, 3, height, width], data)
}

/// Encodes `[1, 3, H, W]` (values clamped to `[0, 1]`, rounded to the nearest byte).
pub fn encode_ppm<S: Scalar>(image: &Tensor<S>) -> Result<Vec<u8>> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || c != 3 {
        return Err(Error::shape(format!("PPM needs [1, 3, H, W], got {:?}", image.shape())));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    for i in 0..plane {
        for ch in 0..3 {
            let v = d[ch * plane + i].as_f64();
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            out.push((v * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn image_read(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
    decode_ppm(&bytes)
}

pub fn image_write<S: Scalar>(image: &Tensor<S>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn two_by_two() {
        let mut buf = b"P6\n2 2\n255\n".to_vec();
        buf.extend([255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153]);
        let t = decode_ppm::<f32>(&buf).unwrap();
        assert_eq!(t.shape(), &[1, 3, 2, 2]);
        assert_eq!(t.data()[0], 1.0);
        assert_eq!(t.data()[3], 0.2);
        assert_eq!(encode_ppm(&t).unwrap(), buf);
    }

    #[test]
    fn comments_in_header() {
        let mut buf = b"P6 # made by hand\n1 1 255\n".to_vec();
        buf.extend([1, 2, 3]);
        assert_eq!(decode_ppm::<f64>(&buf).unwrap().shape(), &[1, 3, 1, 1]);
    }

    #[test]
    fn errors_carry_offsets() {
        let bad = |b: &[u8]| match decode_ppm::<f32>(b) {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("{other:?}"),
        };
        assert_eq!(bad(b"P3\n1 1\n255\n"), 0);
        assert_eq!(bad(b"P6\n2 2\n65535\n"), 7);
        assert_eq!(bad(b"P6\nx 2\n255\n"), 3);
        assert_eq!(bad(b"P6\n1 1\n255\n\x01"), 12);
    }

    proptest! {
        #[test]
        fn bytes_round_trip(w in 1usize..9, h in 1usize..9, seed in any::<u64>()) {
            let mut s = seed;
            let px: Vec<u8> = (0..w * h * 3).map(|_| { s = s.wrapping_mul(6364136223846793005).wrapping_add(1); (s >> 56) as u8 }).collect();
            let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
            buf.extend(&px);
            let t = decode_ppm::<f32>(&buf).unwrap();
            prop_assert_eq!(encode_ppm(&t).unwrap(), buf);
        }
    }
}

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("metric of {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::shape("metric of empty tensors"));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for signals in `[0, 1]`, capped at 100.
pub fn psnr<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Normalized 1-D Gaussian of `size` taps centred at `(size - 1) / 2`.
pub(crate) fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h × w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..k).map(|i| g[i] * rows[(y + i) * wo + x]).sum();
        }
    }
    out
}

/// Mean structural similarity of `[N, C, H, W]` images in `[0, 1]`:
/// 11×11 Gaussian window (σ = 1.5) over valid positions, per channel, then
/// averaged. The window shrinks to the image when it is smaller than 11.
pub fn ssim<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<f64> {
    same_shape(a, b)?;
    let (_, _, h, w) = a.dims4()?;
    let k = SSIM_WINDOW.min(h).min(w);
    let g = gaussian_window(k, SSIM_SIGMA);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let planes = a.data().chunks(h * w).zip(b.data().chunks(h * w));
    let mut total = 0.0;
    let mut planes_seen = 0usize;
    for (pa, pb) in planes {
        let x: Vec<f64> = pa.iter().map(|v| v.as_f64()).collect();
        let y: Vec<f64> = pb.iter().map(|v| v.as_f64()).collect();
        let prod = |u: &[f64], v: &[f64]| -> Vec<f64> { u.iter().zip(v).map(|(p, q)| p * q).collect() };
        let mx = filter_valid(&x, h, w, &g);
        let my = filter_valid(&y, h, w, &g);
        let mxx = filter_valid(&prod(&x, &x), h, w, &g);
        let myy = filter_valid(&prod(&y, &y), h, w, &g);
        let mxy = filter_valid(&prod(&x, &y), h, w, &g);
        let mut s = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cov = mxy[i] - ux * uy;
            s += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += s / mx.len() as f64;
        planes_seen += 1;
    }
    Ok(total / planes_seen as f64)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let d: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        Tensor::from_f64(shape, &d).unwrap()
    }

    /// Direct per-window sums with a 2-D weight table.
    fn ssim_direct(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        let (n, c, h, w) = a.dims4().unwrap();
        let k = 11.min(h).min(w);
        let centre = (k as f64 - 1.0) / 2.0;
        let mut wt = vec![vec![0.0; k]; k];
        let mut norm = 0.0;
        for (i, row) in wt.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-((i as f64 - centre).powi(2) + (j as f64 - centre).powi(2)) / 4.5).exp();
                norm += *v;
            }
        }
        let mut acc = 0.0;
        for p in 0..n * c {
            let x = &a.data()[p * h * w..(p + 1) * h * w];
            let y = &b.data()[p * h * w..(p + 1) * h * w];
            let mut s = 0.0;
            for oy in 0..=h - k {
                for ox in 0..=w - k {
                    let (mut ux, mut uy, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..k {
                        for j in 0..k {
                            let q = wt[i][j] / norm;
                            let (u, v) = (x[(oy + i) * w + ox + j], y[(oy + i) * w + ox + j]);
                            ux += q * u;
                            uy += q * v;
                            xx += q * u * u;
                            yy += q * v * v;
                            xy += q * u * v;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    s += (2.0 * ux * uy + c1) * (2.0 * (xy - ux * uy) + c2)
                        / ((ux * ux + uy * uy + c1) * (xx - ux * ux + yy - uy * uy + c2));
                }
            }
            acc += s / ((h - k + 1) * (w - k + 1)) as f64;
        }
        acc / (n * c) as f64
    }

    #[test]
    fn identical_images() {
        let a = random(1, &[1, 3, 16, 20]);
        assert_eq!(psnr(&a, &a).unwrap(), 100.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn uniform_offset_psnr() {
        let a = Tensor::<f64>::full(&[1, 3, 8, 8], 0.2).unwrap();
        let b = Tensor::<f64>::full(&[1, 3, 8, 8], 0.3).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_falls_with_noise() {
        let a = random(2, &[1, 3, 12, 12]);
        let noise = random(3, &[1, 3, 12, 12]);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let b = a.zip_map(&noise, |x, n| x + amp * (n - 0.5)).unwrap();
            let p = psnr(&a, &b).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_matches_direct_formula() {
        for (seed, shape) in [(4, [1, 3, 16, 16]), (5, [2, 1, 13, 19]), (6, [1, 3, 7, 9])] {
            let a = random(seed, &shape);
            let b = a.zip_map(&random(seed + 10, &shape), |x, n| (0.7 * x + 0.3 * n).clamp(0.0, 1.0)).unwrap();
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_direct(&a, &b);
            assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
            assert!((-1.0..=1.0).contains(&fast));
        }
    }

    #[test]
    fn shape_mismatch() {
        let a = random(1, &[1, 3, 8, 8]);
        let b = random(1, &[1, 3, 8, 9]);
        assert!(matches!(psnr(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(ssim(&a, &b), Err(Error::Shape(_))));
    }
}

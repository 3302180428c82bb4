//! Synthetic snowy images from clean ones.
//!
//! The imaging model composites a snow layer onto the clean scene `J` and
//! then veils the result:
//!
//! ```text
//! K = J ⊙ (1 − Z) + C ⊙ Z
//! I = K ⊙ T + A ⊙ (1 − T)
//! ```
//!
//! `Z` is a soft particle mask, `C` a near-white snow colour per channel,
//! `T` a smooth transmission field and `A` a gray atmospheric light.

mod augment;
pub mod dataset;
mod scene;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use augment::{augment, Augment};
pub use dataset::{Dataset, Manifest, Pair};
pub use scene::procedural_scene;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SnowParams {
    /// Particles per megapixel.
    pub mask_density: f64,
    /// Flake radius in pixels.
    pub flake_radius_range: [f64; 2],
    /// Probability that a particle is drawn as a streak instead of a flake.
    pub streak_fraction: f64,
    pub streak_length_range: [f64; 2],
    /// Streak direction in degrees from the x axis.
    pub streak_angle_range: [f64; 2],
    /// Per-channel snow colour range; a subrange of `[0, 1]`.
    pub chroma_shift: [f64; 2],
    pub transmission_range: [f64; 2],
    pub atmospheric_range: [f64; 2],
    pub seed: u64,
}

impl Default for SnowParams {
    fn default() -> Self {
        SnowParams {
            mask_density: 20_000.0,
            flake_radius_range: [0.8, 2.5],
            streak_fraction: 0.3,
            streak_length_range: [4.0, 12.0],
            streak_angle_range: [60.0, 120.0],
            chroma_shift: [0.8, 1.0],
            transmission_range: [0.7, 0.95],
            atmospheric_range: [0.7, 0.95],
            seed: 0,
        }
    }
}

fn check_range(name: &str, [lo, hi]: [f64; 2], min: f64, max: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && min <= lo && lo <= hi && hi <= max) {
        return Err(Error::config(format!(
            "{name} = [{lo}, {hi}] must be ordered within [{min}, {max}]"
        )));
    }
    Ok(())
}

impl SnowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_density.is_finite() && self.mask_density >= 0.0) {
            return Err(Error::config("mask_density must be ≥ 0"));
        }
        if !(0.0..=1.0).contains(&self.streak_fraction) {
            return Err(Error::config("streak_fraction must lie in [0, 1]"));
        }
        check_range("flake_radius_range", self.flake_radius_range, 0.0, f64::MAX)?;
        check_range("streak_length_range", self.streak_length_range, 0.0, f64::MAX)?;
        check_range("streak_angle_range", self.streak_angle_range, -360.0, 360.0)?;
        check_range("chroma_shift", self.chroma_shift, 0.0, 1.0)?;
        check_range("transmission_range", self.transmission_range, 0.0, 1.0)?;
        if self.transmission_range[0] <= 0.0 {
            return Err(Error::config("transmission_range must exclude 0"));
        }
        check_range("atmospheric_range", self.atmospheric_range, 0.0, 1.0)
    }
}

/// Independent stream for image `index` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    splitmix(seed ^ splitmix(index))
}

fn sample(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Separable Gaussian blur of a single `h × w` plane, clamped at the edges.
fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r)
                .map(|d| kernel[(d + r) as usize] * plane[y * w + at(x as isize + d, w)])
                .sum();
            tmp[y * w + x] = s / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = (-r..=r)
                .map(|d| kernel[(d + r) as usize] * tmp[at(y as isize + d, h) * w + x])
                .sum();
            out[y * w + x] = s / norm;
        }
    }
    out
}

/// Soft particle mask `Z`, shape `[1, 1, h, w]`, values in `[0, 1]`.
///
/// Flakes are Gaussian discs with `σ = radius / 2`; streaks are
/// anti-aliased segments blurred with `σ = 1`. Layers combine by maximum.
pub fn gen_snow_mask<S: Scalar>(rng: &mut ChaCha8Rng, h: usize, w: usize, p: &SnowParams) -> Result<Tensor<S>> {
    if h == 0 || w == 0 {
        return Err(Error::input(format!("mask extents {h}x{w} must be positive")));
    }
    p.validate()?;
    let count = (p.mask_density * (h * w) as f64 / 1e6).round() as usize;
    let mut flakes = vec![0.0f64; h * w];
    let mut streaks = vec![0.0f64; h * w];
    let mut any_streak = false;
    for _ in 0..count {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        if rng.random_bool(p.streak_fraction) {
            any_streak = true;
            let len = sample(rng, p.streak_length_range);
            let theta = sample(rng, p.streak_angle_range).to_radians();
            let (dx, dy) = (theta.cos() * len / 2.0, theta.sin() * len / 2.0);
            let (ax, ay, bx, by) = (cx - dx, cy - dy, cx + dx, cy + dy);
            let (x0, x1) = (ax.min(bx).floor() - 1.0, ax.max(bx).ceil() + 1.0);
            let (y0, y1) = (ay.min(by).floor() - 1.0, ay.max(by).ceil() + 1.0);
            let seg2 = (bx - ax).powi(2) + (by - ay).powi(2);
            for y in (y0.max(0.0) as usize)..=(y1.min(h as f64 - 1.0).max(0.0) as usize) {
                for x in (x0.max(0.0) as usize)..=(x1.min(w as f64 - 1.0).max(0.0) as usize) {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let t = if seg2 > 0.0 {
                        (((px - ax) * (bx - ax) + (py - ay) * (by - ay)) / seg2).clamp(0.0, 1.0)
                    } else {
                        0.0
                    };
                    let d = ((px - ax - t * (bx - ax)).powi(2) + (py - ay - t * (by - ay)).powi(2)).sqrt();
                    let v = (1.0 - d).max(0.0);
                    let cell = &mut streaks[y * w + x];
                    *cell = cell.max(v);
                }
            }
        } else {
            let radius = sample(rng, p.flake_radius_range);
            let sigma = (radius / 2.0).max(1e-3);
            let reach = 3.0 * sigma;
            let y0 = (cy - reach).floor().max(0.0) as usize;
            let y1 = ((cy + reach).ceil() as usize).min(h - 1);
            let x0 = (cx - reach).floor().max(0.0) as usize;
            let x1 = ((cx + reach).ceil() as usize).min(w - 1);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                    let v = (-d2 / (2.0 * sigma * sigma)).exp();
                    let cell = &mut flakes[y * w + x];
                    *cell = cell.max(v);
                }
            }
        }
    }
    if any_streak {
        streaks = gaussian_blur(&streaks, h, w, 1.0);
    }
    let z: Vec<f64> = flakes
        .iter()
        .zip(&streaks)
        .map(|(a, b)| a.max(*b).clamp(0.0, 1.0))
        .collect();
    Tensor::from_f64(&[1, 1, h, w], &z)
}

/// Transmission `T`, shape `[1, 1, h, w]`: a bilinearly interpolated 4×4
/// grid of uniform draws mapped into `transmission_range`.
pub fn gen_transmission<S: Scalar>(rng: &mut ChaCha8Rng, h: usize, w: usize, p: &SnowParams) -> Result<Tensor<S>> {
    if h == 0 || w == 0 {
        return Err(Error::input(format!("transmission extents {h}x{w} must be positive")));
    }
    p.validate()?;
    const G: usize = 4;
    let grid: Vec<f64> = (0..G * G).map(|_| rng.random::<f64>()).collect();
    let [lo, hi] = p.transmission_range;
    let coord = |i: usize, n: usize| {
        if n == 1 {
            (0, 0.0)
        } else {
            let u = i as f64 * (G - 1) as f64 / (n - 1) as f64;
            let k = (u.floor() as usize).min(G - 2);
            (k, u - k as f64)
        }
    };
    let mut t = Vec::with_capacity(h * w);
    for y in 0..h {
        let (gy, fy) = coord(y, h);
        for x in 0..w {
            let (gx, fx) = coord(x, w);
            let g = |j: usize, i: usize| grid[j * G + i];
            let top = g(gy, gx) * (1.0 - fx) + g(gy, gx + 1) * fx;
            let bottom = g(gy + 1, gx) * (1.0 - fx) + g(gy + 1, gx + 1) * fx;
            let s = top * (1.0 - fy) + bottom * fy;
            t.push((lo + (hi - lo) * s).clamp(lo, hi));
        }
    }
    Tensor::from_f64(&[1, 1, h, w], &t)
}

/// Gray atmospheric light drawn from `atmospheric_range`.
pub fn gen_atmospheric(rng: &mut ChaCha8Rng, p: &SnowParams) -> Result<f64> {
    p.validate()?;
    Ok(sample(rng, p.atmospheric_range))
}

/// Everything drawn for one batch; `z`/`t` are `[N, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct SnowSample<S: Scalar> {
    /// Snowy image clamped to `[0, 1]`.
    pub snowy: Tensor<S>,
    /// Snowy image before clamping.
    pub raw: Tensor<S>,
    /// Veiling-free snowy image.
    pub k: Tensor<S>,
    pub z: Tensor<S>,
    pub t: Tensor<S>,
    pub a: Vec<S>,
    /// Snow colour per image and channel.
    pub c: Vec<[S; 3]>,
}

/// Applies the imaging model to explicit fields; returns `(K, I)` with `I`
/// unclamped. `z`, `t` are `[N, 1, H, W]`; `a` and `c` have one entry per image.
pub fn compose<S: Scalar>(
    j: &Tensor<S>,
    z: &Tensor<S>,
    c: &[[S; 3]],
    t: &Tensor<S>,
    a: &[S],
) -> Result<(Tensor<S>, Tensor<S>)> {
    let (n, ch, h, w) = j.dims4()?;
    if ch != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {ch}")));
    }
    z.expect_shape(&[n, 1, h, w])?;
    t.expect_shape(&[n, 1, h, w])?;
    if c.len() != n || a.len() != n {
        return Err(Error::shape(format!("{} colours and {} lights for {n} images", c.len(), a.len())));
    }
    let hw = h * w;
    let mut k = Vec::with_capacity(j.len());
    let mut i = Vec::with_capacity(j.len());
    for b in 0..n {
        let zb = &z.data()[b * hw..(b + 1) * hw];
        let tb = &t.data()[b * hw..(b + 1) * hw];
        for (ci, &col) in c[b].iter().enumerate() {
            let jb = &j.data()[(b * 3 + ci) * hw..(b * 3 + ci + 1) * hw];
            for p in 0..hw {
                let kv = jb[p] * (S::one() - zb[p]) + col * zb[p];
                k.push(kv);
                i.push(kv * tb[p] + a[b] * (S::one() - tb[p]));
            }
        }
    }
    Ok((Tensor::new(j.shape(), k)?, Tensor::new(j.shape(), i)?))
}

/// Draws `Z`, `C`, `T`, `A` for every image of `j` and composites them.
pub fn synthesize_snow<S: Scalar>(j: &Tensor<S>, p: &SnowParams, rng: &mut ChaCha8Rng) -> Result<SnowSample<S>> {
    p.validate()?;
    let (n, ch, h, w) = j.dims4()?;
    if ch != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {ch}")));
    }
    if let Some(v) = j.data().iter().find(|v| !(**v >= S::zero() && **v <= S::one())) {
        return Err(Error::input(format!("clean image value {v} outside [0, 1]")));
    }
    let mut z = Vec::with_capacity(n * h * w);
    let mut t = Vec::with_capacity(n * h * w);
    let mut a = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    for _ in 0..n {
        z.extend_from_slice(gen_snow_mask::<S>(rng, h, w, p)?.data());
        let col = [0; 3].map(|_| S::of(sample(rng, p.chroma_shift)));
        c.push(col);
        t.extend_from_slice(gen_transmission::<S>(rng, h, w, p)?.data());
        a.push(S::of(gen_atmospheric(rng, p)?));
    }
    let z = Tensor::new(&[n, 1, h, w], z)?;
    let t = Tensor::new(&[n, 1, h, w], t)?;
    let (k, raw) = compose(j, &z, &c, &t, &a)?;
    let snowy = raw.map(|v| v.max(S::zero()).min(S::one()));
    Ok(SnowSample { snowy, raw, k, z, t, a, c })
}

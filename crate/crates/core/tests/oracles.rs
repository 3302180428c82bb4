//! Independent reference implementations checked against the engine.

use mspformer::attention::{AttentionConfig, AttentionVariant, MspAttention};
use mspformer::nnops::{ConvSpec, PadMode, Padding};
use mspformer::params::{Init, ParamStore};
use mspformer::{Model, ModelConfig, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(shape, data).unwrap()
}

fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, scale: f64) {
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v += scale * rng.sample::<f64, _>(StandardNormal);
        }
    }
}

fn close(a: &[f64], b: &[f64], tol: f64) -> Result<(), String> {
    if a.len() != b.len() {
        return Err(format!("length {} vs {}", a.len(), b.len()));
    }
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        if (x - y).abs() > tol * (1.0 + y.abs()) {
            return Err(format!("index {i}: {x} vs {y}"));
        }
    }
    Ok(())
}

fn mirror(i: isize, n: usize, mode: PadMode) -> Option<usize> {
    let n = n as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zeros => None,
        PadMode::Reflect if n == 1 => Some(0),
        PadMode::Reflect => Some(if i < 0 { -i } else { 2 * (n - 1) - i } as usize),
    }
}

/// Direct nested-loop cross-correlation.
fn conv_ref(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, spec: ConvSpec) -> Vec<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (co, cig, kh, kw) = w.dims4().unwrap();
    let pad = spec.padding.size as isize;
    let ho = (h + 2 * spec.padding.size - kh) / spec.stride + 1;
    let wo = (wd + 2 * spec.padding.size - kw) / spec.stride + 1;
    let cog = co / spec.groups;
    let xd = x.data();
    let wdt = w.data();
    let mut out = Vec::with_capacity(n * co * ho * wo);
    for ni in 0..n {
        for o in 0..co {
            let g = o / cog;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for ci in 0..cig {
                        let cin = g * cig + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * spec.stride + ky) as isize - pad;
                                let ix = (ox * spec.stride + kx) as isize - pad;
                                let (Some(sy), Some(sx)) =
                                    (mirror(iy, h, spec.padding.mode), mirror(ix, wd, spec.padding.mode))
                                else {
                                    continue;
                                };
                                acc += wdt[((o * cig + ci) * kh + ky) * kw + kx]
                                    * xd[((ni * c + cin) * h + sy) * wd + sx];
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matmul_matches_triple_loop(m in 1usize..6, k in 1usize..6, n in 1usize..6, batch in 1usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = randn(&mut rng, &[batch, m, k]);
        let b = randn(&mut rng, &[batch, k, n]);
        let tape = Tape::<f64>::new();
        let y = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
        let mut want = vec![0.0; batch * m * n];
        for s in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    for l in 0..k {
                        want[(s * m + i) * n + j] += a.data()[(s * m + i) * k + l] * b.data()[(s * k + l) * n + j];
                    }
                }
            }
        }
        prop_assert_eq!(y.shape(), vec![batch, m, n]);
        prop_assert!(close(y.value().data(), &want, 1e-12).is_ok());
        prop_assert_eq!(tape.macs(), (batch * m * k * n) as u64);
    }

    #[test]
    fn conv_matches_nested_loops(
        n in 1usize..3,
        groups in 1usize..3,
        cig in 1usize..3,
        cog in 1usize..3,
        h in 3usize..8,
        w in 3usize..8,
        kernel in prop::sample::select(vec![1usize, 2, 3]),
        stride in 1usize..3,
        pad in 0usize..2,
        reflect in any::<bool>(),
        bias in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, co) = (groups * cig, groups * cog);
        let x = randn(&mut rng, &[n, c, h, w]);
        let wt = randn(&mut rng, &[co, cig, kernel, kernel]);
        let b = randn(&mut rng, &[co]);
        let padding = if reflect { Padding::reflect(pad) } else { Padding::zeros(pad) };
        let spec = ConvSpec { stride, padding, groups };
        let tape = Tape::<f64>::new();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(wt.clone()), bias.then(|| tape.constant(b.clone())), spec)
            .unwrap();
        let want = conv_ref(&x, &wt, bias.then_some(&b), spec);
        prop_assert!(close(y.value().data(), &want, 1e-12).is_ok());
    }
}

/// Attention recomputed token by token from the stored weights.
fn attention_ref(attn: &MspAttention, store: &ParamStore<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let (_, c, h, w) = x.dims4().unwrap();
    let d = attn.cfg.head_dim();
    let t = h * w;
    let token = |data: &[f64], ch: usize, hh: usize, ww: usize, i: usize| -> Vec<f64> {
        (0..ch).map(|k| data[k * hh * ww + i]).collect()
    };
    let linear = |wid, bid, v: &[f64]| -> Vec<f64> {
        let wt: &Tensor<f64> = store.get(wid);
        let bt: &Tensor<f64> = store.get(bid);
        let (cin, cout) = (wt.shape()[0], wt.shape()[1]);
        (0..cout)
            .map(|o| bt.data()[o] + (0..cin).map(|i| v[i] * wt.data()[i * cout + o]).sum::<f64>())
            .collect()
    };
    let q: Vec<Vec<f64>> = (0..t)
        .map(|i| linear(attn.query.weight, attn.query.bias.unwrap(), &token(x.data(), c, h, w, i)))
        .collect();
    let mut merged = vec![vec![0.0; c]; t];
    let mut head0 = 0;
    for br in &attn.branches {
        let r = br.pool.stride;
        let (ph, pw) = (h / r, w / r);
        let pooled: Tensor<f64> = match attn.cfg.variant {
            AttentionVariant::Sra => {
                let conv = br.reduce.as_ref().unwrap();
                let data = conv_ref(x, store.get(conv.weight), None, conv.spec);
                Tensor::new(&[1, c, ph, pw], data).unwrap()
            }
            variant => {
                let mut data = Vec::new();
                for ch in 0..c {
                    for py in 0..ph {
                        for px in 0..pw {
                            let cells = (0..r * r).map(|k| x.data()[(ch * h + py * r + k / r) * w + px * r + k % r]);
                            data.push(match variant {
                                AttentionVariant::Ma => cells.fold(f64::NEG_INFINITY, f64::max),
                                _ => cells.sum::<f64>() / (r * r) as f64,
                            });
                        }
                    }
                }
                Tensor::new(&[1, c, ph, pw], data).unwrap()
            }
        };
        let tp = ph * pw;
        let width = br.heads * d;
        let keys: Vec<Vec<f64>> = (0..tp)
            .map(|i| linear(br.key.weight, br.key.bias.unwrap(), &token(pooled.data(), c, ph, pw, i)))
            .collect();
        let mut vmap = vec![0.0; width * tp];
        for i in 0..tp {
            let v = linear(br.value.weight, br.value.bias.unwrap(), &token(pooled.data(), c, ph, pw, i));
            for k in 0..width {
                vmap[k * tp + i] = v[k];
            }
        }
        let vmap = Tensor::new(&[1, width, ph, pw], vmap).unwrap();
        let dw = &br.value_dw;
        let vconv = conv_ref(&vmap, store.get(dw.weight), Some(store.get(dw.bias.unwrap())), dw.spec);
        for j in 0..br.heads {
            let g = head0 + j;
            for (i, qi) in q.iter().enumerate() {
                let scores: Vec<f64> = keys
                    .iter()
                    .map(|kk| (0..d).map(|e| qi[g * d + e] * kk[j * d + e]).sum::<f64>() / (d as f64).sqrt())
                    .collect();
                let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
                let z: f64 = exps.iter().sum();
                for e in 0..d {
                    merged[i][g * d + e] =
                        (0..tp).map(|s| exps[s] / z * vconv[(j * d + e) * tp + s]).sum();
                }
            }
        }
        head0 += br.heads;
    }
    let out: Vec<Vec<f64>> = merged
        .iter()
        .map(|m| linear(attn.out.weight, attn.out.bias.unwrap(), m))
        .collect();
    // back to NCHW
    let mut nchw = vec![0.0; c * t];
    for (i, o) in out.iter().enumerate() {
        for k in 0..c {
            nchw[k * t + i] = o[k];
        }
    }
    nchw
}

fn check_attention(cfg: AttentionConfig, h: usize, w: usize, seed: u64) {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let attn = MspAttention::new(&mut Init::new(&mut store, &mut rng), cfg.clone()).unwrap();
    jitter(&mut store, &mut rng, 0.3);
    let x = randn(&mut rng, &[1, cfg.channels, h, w]);
    let tape = Tape::<f64>::no_grad();
    let p = store.bind(&tape);
    let y = attn.forward(&p, tape.constant(x.clone())).unwrap();
    let want = attention_ref(&attn, &store, &x);
    if let Err(e) = close(y.value().data(), &want, 1e-10) {
        panic!("{cfg:?}: {e}");
    }
}

#[test]
fn attention_matches_token_loop_oracle() {
    for variant in [AttentionVariant::Aa, AttentionVariant::Ma, AttentionVariant::Sra, AttentionVariant::Ssp] {
        check_attention(AttentionConfig::new(8, 2, 2, 1).with_variant(variant), 4, 4, 1);
        check_attention(AttentionConfig::new(8, 4, 4, 2).with_variant(variant), 8, 4, 2);
    }
}

#[test]
fn unit_pool_branch_is_plain_attention() {
    // With R₂ = 1 the second branch sees every token: its heads must equal
    // textbook multi-head attention over the unpooled map.
    check_attention(AttentionConfig::new(4, 2, 1, 1), 3, 5, 7);
}

fn conv_count(cin: usize, cout: usize, k: usize, groups: usize, bias: bool) -> usize {
    cout * cin / groups * k * k + if bias { cout } else { 0 }
}

fn linear_count(cin: usize, cout: usize) -> usize {
    cin * cout + cout
}

/// Parameter count assembled layer by layer from the architecture description.
fn analytic_params(cfg: &ModelConfig) -> usize {
    let dw = |c| conv_count(c, c, 3, c, true);
    let attn = |c: usize, heads: usize, r1: usize, r2: usize| {
        let d = c / heads;
        let branches = match cfg.attention {
            AttentionVariant::Ssp => vec![(heads, r1)],
            _ => vec![(heads / 2, r1), (heads / 2, r2)],
        };
        let mut n = 2 * linear_count(c, c);
        for (hb, r) in branches {
            let width = hb * d;
            n += 2 * linear_count(c, width) + dw(width);
            if cfg.attention == AttentionVariant::Sra {
                n += conv_count(c, c, r, 1, false);
            }
        }
        n
    };
    let stage = |dim: usize, depth: usize, heads: usize, r1: usize, r2: usize| {
        let c = dim / 2;
        let e = cfg.ffn_expansion;
        let block = 4 * c + attn(c, heads, r1, r2)
            + linear_count(c, c * e)
            + dw(c * e)
            + linear_count(c * e, c);
        let hidden = (c / 4).max(4);
        let lcb = dw(c) + conv_count(c, c, 1, 1, true) + conv_count(c, hidden, 1, 1, true) + conv_count(hidden, c, 1, 1, true);
        depth * (block + if cfg.use_lcb { lcb } else { 0 })
    };
    let d = &cfg.stage_dims;
    let mut n = conv_count(3, d[0], 3, 1, true);
    for i in 0..4 {
        n += stage(d[i], cfg.encoder_depths[i], cfg.heads[i], cfg.r1[i], cfg.r2[i]);
        if i < 3 {
            n += conv_count(d[i], d[i + 1], 3, 1, true);
        }
    }
    for (k, level) in (0..3).rev().enumerate() {
        n += conv_count(d[level + 1], d[level], 1, 1, true) + conv_count(2 * d[level], d[level], 1, 1, true);
        n += stage(d[level], cfg.decoder_depths[k], cfg.heads[level], cfg.r1[level], cfg.r2[level]);
    }
    n += conv_count(d[0], d[0], 3, 1, true);
    n += stage(d[0], cfg.refine_depth, cfg.refine_heads, cfg.refine_r1, cfg.refine_r2);
    n + conv_count(d[0], 3, 3, 1, true)
}

#[test]
fn parameter_counts_match_layer_sum() {
    let tiny = ModelConfig::tiny();
    let model = Model::<f32>::build(&tiny, 0).unwrap();
    assert_eq!(model.count_params(), analytic_params(&tiny));
    for variant in [AttentionVariant::Sra, AttentionVariant::Ssp] {
        let cfg = ModelConfig { attention: variant, use_lcb: false, ..ModelConfig::default() };
        let model = Model::<f32>::build(&cfg, 0).unwrap();
        assert_eq!(model.count_params(), analytic_params(&cfg), "{variant:?}");
    }
    let full = ModelConfig::default();
    assert_eq!(Model::<f32>::build(&full, 0).unwrap().count_params(), analytic_params(&full));
}

#[test]
fn tape_macs_equal_analytic_count() {
    let model = Model::<f64>::build(&ModelConfig::tiny(), 3).unwrap();
    for (n, side) in [(1, 64), (2, 32)] {
        let tape = Tape::<f64>::no_grad();
        let p = model.params.bind(&tape);
        let x = tape.constant(Tensor::zeros(&[n, 3, side, side]).unwrap());
        model.forward(&p, x).unwrap();
        assert_eq!(tape.macs(), n as u64 * model.count_macs(side, side).unwrap());
    }
}

#[test]
fn cost_grows_with_resolution() {
    let model = Model::<f32>::build(&ModelConfig::default(), 0).unwrap();
    let small = model.count_macs(128, 128).unwrap();
    let large = model.count_macs(256, 256).unwrap();
    assert!(small < large);
    // linear layers scale with pixels, attention with pixels² / pool area
    assert!(large >= 4 * small);
}

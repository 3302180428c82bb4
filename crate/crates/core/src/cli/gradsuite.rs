//! Finite-difference suite over every differentiable op, each block, and a
//! small end-to-end network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::attention::{scaled_dot_product, AttentionConfig, AttentionVariant, MspAttention};
use crate::blocks::{ConvFfn, Lcb, MspBlock, ParallelStage, StageOptions};
use crate::error::Result;
use crate::model::{Architecture, Model, ModelConfig};
use crate::nnops::{ConvSpec, PadMode, Padding};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{finite_diff_check, GradCheckOptions, GradFn, Scalar, Stencil, Tape, Tensor, Var};
use crate::train::{charbonnier, CHARBONNIER_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Scope {
    Ops,
    Blocks,
    Model,
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: String,
    pub instances: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl CaseResult {
    pub fn line(&self) -> String {
        format!(
            "{:<7} {:<22} instances={:<3} max_rel_err={:.3e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.max_rel_error
        )
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let d: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_f64(shape, &d).expect("shape matches")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let d: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &d).expect("shape matches")
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Add,
    Sub,
    Mul,
    AddScalar,
    Scale,
    Square,
    Sqrt,
    Sum,
    Mean,
    Matmul,
    MatmulBroadcast,
    Reshape,
    Permute,
    Narrow,
    Concat,
    PadZeros,
    PadReflect,
    Conv,
    ConvStrided,
    ConvDepthwise,
    AvgPool,
    MaxPool,
    GlobalAvgPool,
    Upsample,
    Gelu,
    Relu,
    Sigmoid,
    Softmax,
    LayerNorm,
    Linear,
    Shuffle,
    Split,
    MulChannels,
    Tokens,
    Charbonnier,
    Attention,
}

const OPS: [Op; 36] = [
    Op::Add,
    Op::Sub,
    Op::Mul,
    Op::AddScalar,
    Op::Scale,
    Op::Square,
    Op::Sqrt,
    Op::Sum,
    Op::Mean,
    Op::Matmul,
    Op::MatmulBroadcast,
    Op::Reshape,
    Op::Permute,
    Op::Narrow,
    Op::Concat,
    Op::PadZeros,
    Op::PadReflect,
    Op::Conv,
    Op::ConvStrided,
    Op::ConvDepthwise,
    Op::AvgPool,
    Op::MaxPool,
    Op::GlobalAvgPool,
    Op::Upsample,
    Op::Gelu,
    Op::Relu,
    Op::Sigmoid,
    Op::Softmax,
    Op::LayerNorm,
    Op::Linear,
    Op::Shuffle,
    Op::Split,
    Op::MulChannels,
    Op::Tokens,
    Op::Charbonnier,
    Op::Attention,
];

impl Op {
    fn inputs(self, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
        use Op::*;
        let mut r = |s: &[usize]| randn(rng, s);
        match self {
            Add | Sub | Mul | Concat => vec![r(&[2, 3, 4]), r(&[2, 3, 4])],
            AddScalar | Scale | Square | Sum | Mean | Reshape | Permute | Narrow => vec![r(&[2, 3, 4])],
            Sqrt => vec![uniform(rng, &[2, 3, 4], 0.5, 2.0)],
            Matmul => vec![r(&[2, 3, 4]), r(&[2, 4, 5])],
            MatmulBroadcast => vec![r(&[2, 3, 4]), r(&[4, 5])],
            PadZeros | PadReflect | AvgPool | MaxPool | GlobalAvgPool | Upsample | Shuffle | Split => {
                vec![r(&[2, 4, 4, 6])]
            }
            Conv => vec![r(&[2, 3, 5, 6]), r(&[4, 3, 3, 3]), r(&[4])],
            ConvStrided => vec![r(&[1, 3, 7, 8]), r(&[4, 3, 3, 3]), r(&[4])],
            ConvDepthwise => vec![r(&[2, 4, 5, 5]), r(&[4, 1, 3, 3]), r(&[4])],
            Gelu | Relu | Sigmoid | Softmax => vec![r(&[3, 7])],
            LayerNorm => vec![r(&[2, 5, 6]), r(&[6]), r(&[6])],
            Linear => vec![r(&[2, 5, 6]), r(&[6, 3]), r(&[3])],
            MulChannels => vec![r(&[2, 4, 3, 3]), r(&[2, 4, 1, 1])],
            Tokens => vec![r(&[2, 4, 3, 5])],
            Charbonnier => {
                // residuals of magnitude in [0.1, 1]: near eps the third
                // derivative grows like 1/eps² and swamps the difference quotient
                let x = r(&[2, 3, 4]);
                let d = uniform(rng, &[2, 3, 4], 0.1, 1.0);
                let y = x
                    .zip_map(&d, |a, m| a + if m > 0.55 { m } else { -m - 0.45 })
                    .expect("same shape");
                vec![x, y]
            }
            Attention => vec![r(&[2, 5, 4]), r(&[2, 3, 4]), r(&[2, 3, 4])],
        }
    }
}

/// Fixed, non-uniform weights make every output element matter to the loss.
fn weights<'t, T: Scalar>(tape: &'t Tape<T>, shape: &[usize]) -> Var<'t, T> {
    let n: usize = shape.iter().product();
    let d: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect();
    tape.constant(Tensor::from_f64(shape, &d).expect("shape matches"))
}

impl GradFn for Op {
    fn eval<'t, T: Scalar>(&self, tape: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        use Op::*;
        let conv = |stride, padding, groups| ConvSpec { stride, padding, groups };
        match self {
            Add => x[0].add(x[1]),
            Sub => x[0].sub(x[1]),
            Mul => x[0].mul(x[1]),
            AddScalar => x[0].add_scalar(0.3),
            Scale => x[0].scale(-1.7),
            Square => x[0].square(),
            Sqrt => x[0].sqrt(),
            Sum => x[0].sum(),
            Mean => x[0].mean(),
            Matmul | MatmulBroadcast => x[0].matmul(x[1]),
            Reshape => x[0].reshape(&[6, 4]),
            Permute => x[0].permute(&[2, 0, 1]),
            Narrow => x[0].narrow(1, 1, 2),
            Concat => Var::concat(&[x[0], x[1]], 1),
            PadZeros => x[0].pad2d(Padding::zeros(1)),
            PadReflect => x[0].pad2d(Padding::reflect(2)),
            Conv => x[0].conv2d(x[1], Some(x[2]), conv(1, Padding::zeros(1), 1)),
            ConvStrided => x[0].conv2d(x[1], Some(x[2]), conv(2, Padding { mode: PadMode::Reflect, size: 1 }, 1)),
            ConvDepthwise => x[0].conv2d(x[1], Some(x[2]), conv(1, Padding::reflect(1), 4)),
            AvgPool => x[0].avgpool2d(2, 2),
            MaxPool => x[0].maxpool2d(2, 2),
            GlobalAvgPool => x[0].global_avg_pool(),
            Upsample => x[0].upsample_nn(2),
            Gelu => x[0].gelu(),
            Relu => x[0].relu(),
            Sigmoid => x[0].sigmoid(),
            Softmax => {
                let y = x[0].softmax(1)?;
                y.mul(weights(tape, &y.shape()))
            }
            LayerNorm => x[0].layernorm(x[1], x[2], 1e-5),
            Linear => x[0].linear(x[1], Some(x[2])),
            Shuffle => x[0].channel_shuffle(2),
            Split => {
                let (a, b) = x[0].channel_split()?;
                a.mul(b)
            }
            MulChannels => x[0].mul_channels(x[1]),
            Tokens => {
                let t = x[0].to_tokens()?;
                t.mul(weights(tape, &t.shape()))?.from_tokens(3, 5)
            }
            Charbonnier => charbonnier(x[0], x[1], CHARBONNIER_EPS),
            Attention => scaled_dot_product(x[0], x[1], x[2]),
        }
    }
}

/// A parameterized module: input 0 is the feature map, the rest are its
/// parameters in registry order.
enum Block {
    Msp(MspBlock),
    Lcb(Lcb),
    Ffn(ConvFfn),
    Stage(ParallelStage),
    Attention(MspAttention),
    Network(Architecture, bool),
}

impl GradFn for Block {
    fn eval<'t, T: Scalar>(&self, tape: &'t Tape<T>, x: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        let p = Bound::from_vars(x[1..].to_vec());
        let y = match self {
            Block::Msp(b) => b.forward(&p, x[0])?,
            Block::Lcb(b) => b.forward(&p, x[0])?,
            Block::Ffn(b) => {
                let (_, _, h, w) = x[0].value().dims4()?;
                b.forward(&p, x[0].to_tokens()?, h, w)?
            }
            Block::Stage(b) => b.forward(&p, x[0])?,
            Block::Attention(b) => b.forward(&p, x[0])?,
            Block::Network(a, residual) => a.forward(&p, x[0], *residual)?,
        };
        // Global residual paths make d/dx trivially one; the weights keep
        // every coordinate distinct.
        y.mul(weights(tape, &y.shape()))
    }
}

fn block_instance(kind: usize, rng: &mut ChaCha8Rng) -> Result<(String, Block, Vec<Tensor<f64>>)> {
    let mut store = ParamStore::<f64>::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let mut init = Init::new(&mut store, &mut init_rng);
    let attn = AttentionConfig::new(4, 2, 2, 1);
    let (name, block, x) = match kind {
        0 => ("msp_block", Block::Msp(MspBlock::new(&mut init, attn, 2)?), randn(rng, &[1, 4, 4, 4])),
        1 => ("lcb", Block::Lcb(Lcb::new(&mut init, 4)?), randn(rng, &[2, 4, 4, 4])),
        2 => ("conv_ffn", Block::Ffn(ConvFfn::new(&mut init, 4, 2)?), randn(rng, &[1, 4, 3, 5])),
        3 => {
            let opts = StageOptions {
                depth: 1,
                expansion: 2,
                use_lcb: true,
                shuffle: true,
            };
            ("parallel_stage", Block::Stage(ParallelStage::new(&mut init, 8, attn, opts)?), randn(rng, &[1, 8, 4, 4]))
        }
        4 => {
            let cfg = AttentionConfig::new(4, 2, 2, 1).with_variant(AttentionVariant::Sra);
            ("attention_sra", Block::Attention(MspAttention::new(&mut init, cfg)?), randn(rng, &[1, 4, 4, 4]))
        }
        _ => {
            let cfg = AttentionConfig::new(4, 2, 2, 1).with_variant(AttentionVariant::Ma);
            ("attention_ma", Block::Attention(MspAttention::new(&mut init, cfg)?), randn(rng, &[1, 4, 4, 4]))
        }
    };
    let mut inputs = vec![x];
    inputs.extend(store.iter().map(|(_, t)| perturb(t, rng)));
    Ok((name.to_string(), block, inputs))
}

/// Parameters drawn away from their initial values so that gamma/beta and
/// zero biases are exercised at generic points. Weight tensors get noise on
/// the scale of their initialization; larger noise compounds through the
/// network and inflates activations by orders of magnitude.
fn perturb(t: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let scale = if t.ndim() > 1 { 0.02 } else { 0.3 };
    let noise = randn(rng, t.shape());
    t.zip_map(&noise, |a, n| a + scale * n).expect("same shape")
}

/// Deep graphs: the five-point stencil keeps truncation negligible at a step
/// large enough to hold round-off below the tolerance.
fn deep_options(tol: f64, seed: u64, max_coords: usize) -> GradCheckOptions {
    GradCheckOptions {
        tol,
        seed,
        step: 3e-4,
        stencil: Stencil::FivePoint,
        max_coords: Some(max_coords),
        ..GradCheckOptions::default()
    }
}

const BLOCKS: usize = 6;

/// Runs `instances` random draws of each case at precision `S` and reports
/// the worst relative error per case against `tol`.
pub fn run_gradcheck<S: Scalar>(scope: Scope, instances: usize, tol: f64, seed: u64) -> Result<Vec<CaseResult>> {
    let mut results = Vec::new();
    let mut record = |name: String, errs: Vec<f64>| {
        let worst = errs.iter().cloned().fold(0.0, f64::max);
        results.push(CaseResult {
            name,
            instances: errs.len(),
            max_rel_error: worst,
            passed: worst < tol && !errs.is_empty(),
        });
    };
    match scope {
        Scope::Ops => {
            for (k, op) in OPS.iter().enumerate() {
                let mut errs = Vec::new();
                for i in 0..instances {
                    let mut rng = ChaCha8Rng::seed_from_u64(crate::snowsynth::derive_seed(seed, (k * 1000 + i) as u64));
                    let inputs = op.inputs(&mut rng);
                    let opts = GradCheckOptions {
                        tol,
                        seed: rng.random(),
                        ..GradCheckOptions::default()
                    };
                    errs.push(finite_diff_check::<S, _>(op, &inputs, &opts)?.max_rel_error);
                }
                record(format!("{op:?}").to_lowercase(), errs);
            }
        }
        Scope::Blocks => {
            for kind in 0..BLOCKS {
                let mut errs = Vec::new();
                let mut name = String::new();
                for i in 0..instances {
                    let mut rng = ChaCha8Rng::seed_from_u64(crate::snowsynth::derive_seed(seed, (kind * 1000 + i) as u64));
                    let (n, block, inputs) = block_instance(kind, &mut rng)?;
                    name = n;
                    let opts = deep_options(tol, rng.random(), 12);
                    errs.push(finite_diff_check::<S, _>(&block, &inputs, &opts)?.max_rel_error);
                }
                record(name, errs);
            }
        }
        Scope::Model => {
            let mut errs = Vec::new();
            for i in 0..instances {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::snowsynth::derive_seed(seed, i as u64));
                let model = Model::<f64>::build(&ModelConfig::tiny(), rng.random())?;
                let mut inputs = vec![uniform(&mut rng, &[1, 3, 32, 32], 0.0, 1.0)];
                inputs.extend(model.params.iter().map(|(_, t)| perturb(t, &mut rng)));
                let block = Block::Network(model.arch.clone(), model.cfg.global_residual);
                let opts = deep_options(tol, rng.random(), 1);
                errs.push(finite_diff_check::<S, _>(&block, &inputs, &opts)?.max_rel_error);
            }
            record("tiny_model".into(), errs);
        }
    }
    Ok(results)
}

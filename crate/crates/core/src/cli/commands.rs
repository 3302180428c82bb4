use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::gradsuite::{run_gradcheck, Scope};
use super::ppm::{image_read, image_write};
use crate::attention::AttentionVariant;
use crate::error::{Error, Result};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::snowsynth::{derive_seed, procedural_scene, synthesize_snow, Dataset, Pair, SnowParams};
use crate::tensor::Scalar;
use crate::train::{evaluate, restore, EvalReport, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mspf", version, about = "Single-image snow removal with a multi-scale projection transformer")]
pub struct Cli {
    /// Single-threaded 64-bit execution with reproducible logs.
    #[arg(long, global = true)]
    pub deterministic: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write paired snowy/clean images and a manifest.
    Synth {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run configuration; only its [snow] table is used.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
    },
    /// Write procedural clean scenes, usable as `synth --clean` input.
    Scenes {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value = "64x64", value_parser = parse_res)]
        size: (usize, usize),
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train, appending to `<out>/metrics.log` and saving `<out>/last.mspf`.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Restore one image of any size.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// PSNR/SSIM of a checkpoint on a dataset, with input baselines.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train and evaluate architecture variants under one seed and schedule.
    Ablate {
        /// Any of msp, ssp, sra, ma, no-lcb, no-cs; repeat or comma-separate.
        #[arg(long, value_delimiter = ',', required = true)]
        variant: Vec<String>,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient verification.
    Gradcheck {
        #[arg(long, value_enum)]
        scope: Scope,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Check the 32-bit analytic gradient (tolerance 1e-4) instead of 64-bit (1e-6).
        #[arg(long)]
        f32: bool,
    },
    /// Parameter and multiply-accumulate counts.
    Cost {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "256x256", value_parser = parse_res)]
        res: (usize, usize),
    },
}

pub fn parse_res(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    if h == 0 || w == 0 {
        return Err("extents must be positive".into());
    }
    Ok((h, w))
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) | Error::Domain(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// The variants accepted by `ablate`, as config edits of a base model.
pub fn ablation_variant(base: &ModelConfig, name: &str) -> Result<ModelConfig> {
    let mut c = base.clone();
    match name {
        "msp" => c.attention = AttentionVariant::Aa,
        "ssp" => c.attention = AttentionVariant::Ssp,
        "sra" => c.attention = AttentionVariant::Sra,
        "ma" => c.attention = AttentionVariant::Ma,
        "no-lcb" => c.use_lcb = false,
        "no-cs" => c.channel_shuffle = false,
        other => {
            return Err(Error::input(format!(
                "unknown variant {other:?}; expected msp, ssp, sra, ma, no-lcb or no-cs"
            )))
        }
    }
    Ok(c)
}

fn configure_threads(deterministic: bool, configured: usize) {
    let n = if deterministic {
        1
    } else if configured > 0 {
        configured
    } else {
        std::env::var("MSPF_THREADS").ok().and_then(|v| v.parse().ok()).unwrap_or(0)
    };
    if n > 0 {
        // Fails only if a pool already exists, which keeps its size.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn sorted_ppms(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::input(format!("{} is not a directory", dir.display())));
    }
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ppm"))
        .collect();
    v.sort();
    Ok(v)
}

fn synth(clean: &Path, out: &Path, snow: &SnowParams, seed: u64, count: usize) -> Result<Dataset> {
    let sources = sorted_ppms(clean)?;
    if count > 0 && sources.is_empty() {
        return Err(Error::input(format!("no .ppm images in {}", clean.display())));
    }
    let mut ds = Dataset::default();
    for k in 0..count {
        let j = image_read(&sources[k % sources.len()])?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
        let s = synthesize_snow(&j, snow, &mut rng)?;
        ds.pairs.push(Pair {
            name: format!("{k:04}"),
            snowy: s.snowy,
            clean: j,
        });
    }
    let params = SnowParams {
        seed,
        ..snow.clone()
    };
    ds.save(out, Some(&params))?;
    Ok(ds)
}

fn train<S: Scalar>(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<()> {
    let ds = Dataset::load(data)?;
    if ds.is_empty() {
        return Err(Error::input(format!("no readable pairs in {}", data.display())));
    }
    let mut trainer = match resume {
        Some(p) => Trainer::<S>::resume(&Checkpoint::load(p)?, cfg.train.clone())?,
        None => Trainer::new(Model::<S>::build(&cfg.model, cfg.train.seed)?, cfg.train.clone())?,
    };
    eprintln!(
        "training {} parameters on {} pairs at {} from epoch {}",
        trainer.model.count_params(),
        ds.len(),
        S::NAME,
        trainer.epoch
    );
    for s in trainer.fit(&ds, Some(out))? {
        println!("{}", s.log_line());
    }
    Ok(())
}

fn load_model<S: Scalar>(ckpt: &Path) -> Result<Model<S>> {
    if !ckpt.is_file() {
        return Err(Error::input(format!("checkpoint {} not found", ckpt.display())));
    }
    Checkpoint::load(ckpt)?.to_model(None)
}

fn infer<S: Scalar>(ckpt: &Path, input: &Path, output: &Path) -> Result<()> {
    let model = load_model::<S>(ckpt)?;
    let img = image_read(input)?.cast::<S>();
    image_write(&restore(&model, &img)?, output)
}

fn eval<S: Scalar>(ckpt: &Path, data: &Path) -> Result<EvalReport> {
    let model = load_model::<S>(ckpt)?;
    evaluate(&model, &Dataset::load(data)?)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub params: usize,
    pub macs: u64,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn ablation_tsv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant\tparams\tmacs\tpsnr\tssim\n");
    for r in rows {
        s += &format!("{}\t{}\t{}\t{:.6}\t{:.6}\n", r.variant, r.params, r.macs, r.psnr, r.ssim);
    }
    s
}

fn ablate<S: Scalar>(cfg: &RunConfig, variants: &[String], data: &Path, out: &Path) -> Result<Vec<AblationRow>> {
    let configs = variants
        .iter()
        .map(|v| Ok((v.clone(), ablation_variant(&cfg.model, v)?)))
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset::load(data)?;
    if ds.is_empty() {
        return Err(Error::input(format!("no readable pairs in {}", data.display())));
    }
    let mut rows = Vec::new();
    for (name, mcfg) in configs {
        let model = Model::<S>::build(&mcfg, cfg.train.seed)?;
        let macs = model.count_macs(256, 256)?;
        let mut t = Trainer::new(model, cfg.train.clone())?;
        t.fit(&ds, Some(&out.join(&name)))?;
        let r = evaluate(&t.model, &ds)?;
        let row = AblationRow {
            variant: name,
            params: t.model.count_params(),
            macs,
            psnr: r.mean_psnr,
            ssim: r.mean_ssim,
        };
        eprintln!("{}", ablation_tsv(std::slice::from_ref(&row)).lines().nth(1).unwrap_or_default());
        rows.push(row);
    }
    fs::write(out.join("ablation.tsv"), ablation_tsv(&rows))?;
    Ok(rows)
}

/// Executes one parsed command; returns the process exit code.
pub fn execute(cli: Cli) -> Result<i32> {
    let det = cli.deterministic;
    match cli.command {
        Command::Synth {
            clean,
            out,
            config,
            seed,
            count,
        } => {
            configure_threads(det, 0);
            let snow = match config {
                Some(p) => RunConfig::load(p)?.snow,
                None => SnowParams::default(),
            };
            let ds = synth(&clean, &out, &snow, seed, count)?;
            println!("wrote {} pairs to {}", ds.len(), out.display());
        }
        Command::Scenes { out, count, size, seed } => {
            fs::create_dir_all(&out)?;
            for k in 0..count {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, k as u64));
                let img = procedural_scene::<f32>(&mut rng, size.0, size.1)?;
                image_write(&img, out.join(format!("scene_{k:04}.ppm")))?;
            }
            println!("wrote {count} scenes to {}", out.display());
        }
        Command::Train {
            config,
            data,
            out,
            resume,
        } => {
            let mut cfg = RunConfig::load(config)?;
            cfg.train.deterministic |= det;
            configure_threads(det, cfg.io.threads);
            if det {
                train::<f64>(&cfg, &data, &out, resume.as_deref())?;
            } else {
                train::<f32>(&cfg, &data, &out, resume.as_deref())?;
            }
        }
        Command::Infer { ckpt, input, output } => {
            configure_threads(det, 0);
            if det {
                infer::<f64>(&ckpt, &input, &output)?;
            } else {
                infer::<f32>(&ckpt, &input, &output)?;
            }
        }
        Command::Eval { ckpt, data, report } => {
            configure_threads(det, 0);
            let r = if det { eval::<f64>(&ckpt, &data)? } else { eval::<f32>(&ckpt, &data)? };
            let tsv = r.to_tsv();
            print!("{tsv}");
            if r.skipped > 0 {
                eprintln!("{} pairs skipped", r.skipped);
            }
            if let Some(p) = report {
                fs::write(p, tsv)?;
            }
        }
        Command::Ablate {
            variant,
            config,
            data,
            out,
        } => {
            let mut cfg = RunConfig::load(config)?;
            cfg.train.deterministic |= det;
            configure_threads(det, cfg.io.threads);
            fs::create_dir_all(&out)?;
            let rows = if det {
                ablate::<f64>(&cfg, &variant, &data, &out)?
            } else {
                ablate::<f32>(&cfg, &variant, &data, &out)?
            };
            print!("{}", ablation_tsv(&rows));
        }
        Command::Gradcheck { scope, instances, f32 } => {
            configure_threads(det, 0);
            let results = if f32 {
                run_gradcheck::<f32>(scope, instances, 1e-4, 0)?
            } else {
                run_gradcheck::<f64>(scope, instances, 1e-6, 0)?
            };
            for r in &results {
                println!("{}", r.line());
            }
            if results.iter().any(|r| !r.passed) {
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::Cost { config, res } => {
            let cfg = match config {
                Some(p) => RunConfig::load(p)?.model,
                None => ModelConfig::default(),
            };
            let m = Model::<f32>::build(&cfg, 0)?;
            let macs = m.count_macs(res.0, res.1)?;
            println!("params\t{}\t{:.3}M", m.count_params(), m.count_params() as f64 / 1e6);
            println!("macs\t{}\t{:.3}G\t{}x{}", macs, macs as f64 / 1e9, res.0, res.1);
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (including the program name), runs the command and maps
/// errors to exit codes: 0 success, 2 usage or input error, 3 numeric failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

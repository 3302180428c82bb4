//! Trains each attention and block variant briefly under one seed and prints
//! an ablation table with parameter, MAC and PSNR/SSIM columns.

use mspformer::cli::{ablation_tsv, ablation_variant, AblationRow};
use mspformer::snowsynth::{derive_seed, procedural_scene, synthesize_snow, Dataset, Pair, SnowParams};
use mspformer::train::{evaluate, TrainConfig, Trainer};
use mspformer::{Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mspformer::Result<()> {
    let epochs: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let mut data = Dataset::default();
    for i in 0..4 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(3, i));
        let clean = procedural_scene::<f32>(&mut rng, 64, 64)?;
        let s = synthesize_snow(&clean, &SnowParams::default(), &mut rng)?;
        data.pairs.push(Pair { name: format!("{i}"), snowy: s.snowy, clean });
    }
    let cfg = TrainConfig { epochs, batch: 4, crop: 64, lr0: 2e-3, ..TrainConfig::default() };
    let mut rows = Vec::new();
    for name in ["msp", "ssp", "sra", "ma", "no-lcb", "no-cs"] {
        let model = Model::<f32>::build(&ablation_variant(&ModelConfig::tiny(), name)?, cfg.seed)?;
        let macs = model.count_macs(256, 256)?;
        let mut t = Trainer::new(model, cfg.clone())?;
        t.fit(&data, None)?;
        let r = evaluate(&t.model, &data)?;
        rows.push(AblationRow {
            variant: name.into(),
            params: t.model.count_params(),
            macs,
            psnr: r.mean_psnr,
            ssim: r.mean_ssim,
        });
    }
    print!("{}", ablation_tsv(&rows));
    Ok(())
}

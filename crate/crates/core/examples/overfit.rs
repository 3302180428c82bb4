//! Trains the tiny network on a handful of synthetic pairs and reports the
//! loss curve and PSNR gain.
//!
//! ```text
//! cargo run --release --example overfit -- 300
//! ```

use mspformer::snowsynth::{derive_seed, procedural_scene, synthesize_snow, Dataset, Pair, SnowParams};
use mspformer::train::{evaluate, TrainConfig, Trainer};
use mspformer::{Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mspformer::Result<()> {
    let steps: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let snow = SnowParams::default();
    let mut data = Dataset::default();
    for i in 0..8 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(42, i));
        let clean = procedural_scene::<f32>(&mut rng, 64, 64)?;
        let s = synthesize_snow(&clean, &snow, &mut rng)?;
        data.pairs.push(Pair { name: format!("{i}"), snowy: s.snowy, clean });
    }

    let model = Model::<f32>::build(&ModelConfig { ffn_expansion: 4, ..ModelConfig::tiny() }, 0)?;
    let cfg = TrainConfig {
        epochs: steps,
        total_epochs: steps,
        hold_epochs: steps * 3 / 4,
        lr0: 5e-3,
        batch: 8,
        crop: 64,
        augment: false,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(model, cfg)?;
    let before = evaluate(&trainer.model, &data)?;
    let l0 = trainer.loss_on(&data)?;
    while trainer.epoch < steps {
        let s = trainer.run_epoch(&data)?;
        if s.epoch % 25 == 0 {
            println!("{}", s.log_line());
        }
    }
    let after = evaluate(&trainer.model, &data)?;
    println!("loss {l0:.5} -> {:.5}", trainer.loss_on(&data)?);
    println!(
        "psnr input {:.2} dB, restored {:.2} dB (was {:.2} before training)",
        after.mean_baseline_psnr, after.mean_psnr, before.mean_psnr
    );
    Ok(())
}

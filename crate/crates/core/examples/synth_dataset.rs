//! Generates procedural clean scenes, composites snow onto them and writes a
//! paired dataset directory.
//!
//! ```text
//! cargo run --release --example synth_dataset -- /tmp/snow-pairs 8
//! ```

use mspformer::snowsynth::{derive_seed, procedural_scene, synthesize_snow, Dataset, Pair, SnowParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mspformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "snow-pairs".into());
    let count: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);

    let snow = SnowParams { seed: 1, ..SnowParams::default() };
    let mut ds = Dataset::default();
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(snow.seed, i));
        let clean = procedural_scene::<f32>(&mut rng, 96, 128)?;
        let sample = synthesize_snow(&clean, &snow, &mut rng)?;
        let coverage = sample.z.mean();
        println!("pair {i}: mask coverage {:.3}, airlight {:.3}", coverage, sample.a[0]);
        ds.pairs.push(Pair { name: format!("{i:04}"), snowy: sample.snowy, clean });
    }
    ds.save(&out, Some(&snow))?;
    let back = Dataset::load(&out)?;
    println!("wrote and re-read {} pairs in {out}", back.len());
    Ok(())
}

//! Parameter and multiply-accumulate counts of the default network and its
//! ablation variants.

use mspformer::cli::ablation_variant;
use mspformer::{Model, ModelConfig};

fn main() -> mspformer::Result<()> {
    let base = ModelConfig::default();
    println!("{:<8} {:>10} {:>12} {:>12}", "variant", "params", "GMACs@256", "GMACs@128");
    for name in ["msp", "ssp", "sra", "ma", "no-lcb", "no-cs"] {
        let m = Model::<f32>::build(&ablation_variant(&base, name)?, 0)?;
        println!(
            "{name:<8} {:>10} {:>12.3} {:>12.3}",
            m.count_params(),
            m.count_macs(256, 256)? as f64 / 1e9,
            m.count_macs(128, 128)? as f64 / 1e9
        );
    }
    let tiny = Model::<f32>::build(&ModelConfig::tiny(), 0)?;
    println!("tiny     {:>10} {:>12.3}", tiny.count_params(), tiny.count_macs(256, 256)? as f64 / 1e9);
    Ok(())
}

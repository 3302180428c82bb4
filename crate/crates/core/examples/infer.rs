//! Restores one PPM image of any size with a checkpoint, or with a freshly
//! initialized tiny network when no checkpoint is given.
//!
//! ```text
//! cargo run --release --example infer -- input.ppm output.ppm [model.mspf]
//! ```

use mspformer::cli::{image_read, image_write};
use mspformer::model::Checkpoint;
use mspformer::train::{psnr, restore};
use mspformer::{Error, Model, ModelConfig};

fn main() -> mspformer::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [input, output, rest @ ..] = args.as_slice() else {
        return Err(Error::Input("usage: infer INPUT.ppm OUTPUT.ppm [CHECKPOINT]".into()));
    };
    let model: Model<f32> = match rest.first() {
        Some(path) => Checkpoint::load(path)?.to_model(None)?,
        None => Model::build(&ModelConfig::tiny(), 0)?,
    };
    let image = image_read(input)?;
    let restored = restore(&model, &image)?;
    image_write(&restored, output)?;
    let (_, _, h, w) = image.dims4()?;
    println!("{h}x{w} restored; psnr against input {:.2} dB", psnr(&restored, &image)?);
    Ok(())
}

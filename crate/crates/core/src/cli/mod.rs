//! Configuration files, image I/O, the gradient-check suite and the `mspf`
//! command line.

mod commands;
mod config;
mod gradsuite;
mod ppm;

pub use commands::{
    ablation_tsv, ablation_variant, execute, exit_code, parse_res, run, AblationRow, Cli, Command, EXIT_NUMERIC,
    EXIT_OK, EXIT_USAGE,
};
pub use config::{IoConfig, RunConfig};
pub use gradsuite::{run_gradcheck, CaseResult, Scope};
pub use ppm::{decode_ppm, encode_ppm, image_read, image_write};

//! Finite-difference verification of every differentiable op, the blocks and
//! a tiny end-to-end network.
//!
//! ```text
//! cargo run --release --example gradcheck -- 5
//! ```

use mspformer::cli::{run_gradcheck, Scope};

fn main() -> mspformer::Result<()> {
    let instances = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let mut failures = 0;
    for scope in [Scope::Ops, Scope::Blocks, Scope::Model] {
        println!("== {scope:?} (64-bit, tol 1e-6)");
        for r in run_gradcheck::<f64>(scope, instances, 1e-6, 0)? {
            failures += usize::from(!r.passed);
            println!("{}", r.line());
        }
    }
    println!("{failures} failing cases");
    Ok(())
}

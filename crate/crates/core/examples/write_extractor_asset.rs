//! Regenerates `assets/agnostic_v1.hmgsw` from the fixed seed.

use hemgs::nn::agnostic::{AgnosticConfig, AgnosticExtractor, DEFAULT_SEED};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let ext = AgnosticExtractor::seeded(AgnosticConfig::default(), DEFAULT_SEED)?;
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/assets/agnostic_v1.hmgsw");
    std::fs::write(path, ext.to_asset()?)?;
    println!("wrote {path}");
    Ok(())
}

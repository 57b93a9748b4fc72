//! A reduced weighting ablation: few phantoms and steps, all three schemas.
//!
//! cargo run --release --example ablation -- [steps]

use vesselseg::pipeline::{ablate, ExperimentConfig};
use vesselseg::train::Schema;

fn main() -> anyhow::Result<()> {
    let steps: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(200);
    let mut cfg = ExperimentConfig {
        train_phantoms: 4,
        test_phantoms: 2,
        schemas: vec![Schema::DwRs, Schema::Dw, Schema::Unweighted],
        ..ExperimentConfig::default()
    };
    cfg.train.max_steps = steps;
    cfg.train.checkpoint_every = steps;
    let report = ablate(&cfg, 1, None)?;
    print!("{}", report.table());
    Ok(())
}

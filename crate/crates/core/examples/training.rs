//! Trains a small network on patches from two phantoms and prints the log.
//!
//! cargo run --release --example training -- [steps] [dw|dw+rs|unweighted]

use vesselseg::nn::NetworkConfig;
use vesselseg::phantom::{slice_patches, PhantomSpec};
use vesselseg::pipeline::make_subject;
use vesselseg::train::{train, Schema, TrainConfig};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);
    let schema: Schema = match args.next() {
        Some(s) => serde_json::from_value(serde_json::Value::String(s))?,
        None => Schema::DwRs,
    };
    let net = NetworkConfig {
        levels: 2,
        base_channels: 4,
        patch_size: 32,
        ..NetworkConfig::default()
    };
    let spec = PhantomSpec::default();
    let mut patches = Vec::new();
    for i in 0..2 {
        let s = make_subject(&spec, 1, i)?;
        patches.extend(slice_patches(&s.volume, &s.labels, &s.meta, 32, &[4, 4, 4, 4], i as u64, &s.name)?);
    }
    let cfg = TrainConfig {
        schema,
        max_steps: steps,
        batch_size: 2,
        checkpoint_every: (steps / 10).max(1),
        scale_loss_weight: 1.0,
        ..TrainConfig::default()
    };
    let out = train(&patches, &net, &cfg, None, None, None)?;
    for e in &out.log {
        let cw: Vec<String> = e.class_weights.iter().map(|w| format!("{w:.2}")).collect();
        println!("step {:5} loss {:.4} CW [{}]", e.step, e.loss, cw.join(", "));
    }
    println!("{} patches skipped", out.skipped);
    Ok(())
}

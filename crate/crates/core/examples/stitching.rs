//! Plans tiles for a volume and segments it with an untrained network,
//! checking that the result does not depend on the tile size.

use vesselseg::nn::{receptive_halo, NetworkConfig, NetworkParams};
use vesselseg::phantom::{generate_phantom, PhantomSpec};
use vesselseg::stitch::{plan_for, segment_volume, StitchOptions};

fn main() -> anyhow::Result<()> {
    let net = NetworkConfig {
        levels: 2,
        base_channels: 4,
        patch_size: 32,
        ..NetworkConfig::default()
    };
    let params = NetworkParams::<f32>::init(&net, 3)?;
    let (volume, _, _) = generate_phantom(&PhantomSpec::default(), 0)?;
    println!("receptive halo {}", receptive_halo(&net));
    let mut first = None;
    for tile in [48, 64, 80] {
        let options = StitchOptions {
            tile: Some(tile),
            ..StitchOptions::default()
        };
        let plan = plan_for(&net, volume.shape(), &options)?;
        let (probs, _) = segment_volume(&params, &net, &volume, &options)?;
        let diff = match &first {
            None => 0.0,
            Some(p) => vesselseg::volume::ProbMap::data(p)
                .iter()
                .zip(probs.data())
                .map(|(a, b): (&f32, &f32)| (a - b).abs())
                .fold(0.0f32, f32::max),
        };
        println!(
            "tile {tile}: {} tiles, core {}, lower margin {}, max diff to first {diff:e}",
            plan.len(),
            plan.core_size,
            plan.lo_halo
        );
        first.get_or_insert(probs);
    }
    Ok(())
}

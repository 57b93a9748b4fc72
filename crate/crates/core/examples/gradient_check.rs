//! Compares analytic gradients with central differences on a tiny network.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vesselseg::nn::{NetworkConfig, NetworkParams};
use vesselseg::volume::{Grid, Volume};

fn main() -> anyhow::Result<()> {
    let cfg = NetworkConfig {
        levels: 1,
        base_channels: 2,
        patch_size: 8,
        ..NetworkConfig::default()
    };
    let params = NetworkParams::<f64>::init(&cfg, 1)?;
    println!("{} parameters in {} layers", params.param_count(), params.layers.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let image = Volume::from_vec([8; 3], [1.0; 3], (0..512).map(|_| rng.random()).collect())?;
    let labels = Grid::from_fn([8; 3], |_, _, _| rng.random_range(0..4u8));
    let weights = Grid::filled([8; 3], 1.0f32);
    let loss = |p: &NetworkParams<f64>| -> anyhow::Result<f64> {
        let t = p.forward(&image)?;
        Ok(p.backward(&t, &labels, &weights)?.1)
    };
    let (grads, _) = params.backward(&params.forward(&image)?, &labels, &weights)?;
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (l, layer) in params.layers.iter().enumerate() {
        for k in (0..layer.weight.len()).step_by(7) {
            let mut up = params.clone();
            up.layers[l].weight[k] += h;
            let mut down = params.clone();
            down.layers[l].weight[k] -= h;
            let numeric = (loss(&up)? - loss(&down)?) / (2.0 * h);
            let analytic = grads.layers[l].weight[k];
            worst = worst.max((analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8));
        }
        println!("{:>12}: worst relative error so far {worst:.2e}", layer.id);
    }
    Ok(())
}

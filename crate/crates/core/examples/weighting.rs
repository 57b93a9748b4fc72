//! Runs the class-volume moving average over a patch stream and shows how the
//! weight map of one patch changes with background sampling.

use vesselseg::phantom::{generate_phantom, slice_patches, PhantomSpec};
use vesselseg::seeding;
use vesselseg::weighting::{
    band_counts, build_bands, patch_weight, sample_background, voxel_weight_map, Sampling, WeightingState,
};

fn main() -> anyhow::Result<()> {
    let spec = PhantomSpec::default();
    let (volume, labels, meta) = generate_phantom(&spec, 5)?;
    let patches = slice_patches(&volume, &labels, &meta, 32, &[6, 6, 6, 6], 2, "p")?;

    let mut state = WeightingState::new(spec.classes(), 0.001)?;
    for round in 0..300 {
        for p in &patches {
            state = state.update(&p.labels);
        }
        if round % 100 == 0 || round == 299 {
            let v: Vec<String> = state.volumes().iter().map(|v| format!("{v:.5}")).collect();
            println!("after {:5} patches: V = [{}]", (round + 1) * patches.len(), v.join(", "));
        }
    }
    println!("class weights {:?}", state.class_weights()?);

    let p = patches.iter().find(|p| p.kind == 1).expect("an artery patch");
    let bands = build_bands(&p.labels);
    let samples = sample_background(&bands, &mut seeding::stream(9, 0));
    let plain = voxel_weight_map(&p.labels, &state, None)?;
    let rs = voxel_weight_map(&p.labels, &state, Some(Sampling { bands: &bands, samples: &samples }))?;
    let [fg, inner, red, outer] = band_counts(&bands);
    println!("patch weight {:.3}; bands fg {fg} inner {inner} red {red} outer {outer}", patch_weight(&p.labels));
    println!("sampled background voxels: {}", samples.len());
    let sum = |w: &[f32]| w.iter().map(|&x| x as f64).sum::<f64>();
    println!("total weight DW {:.1}, DW+RS {:.1}", sum(plain.data()), sum(rs.data()));
    Ok(())
}

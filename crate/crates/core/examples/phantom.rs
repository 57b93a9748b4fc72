//! Generates one fragmented phantom and prints its per-class statistics.
//!
//! cargo run --example phantom -- [seed] [out_dir]

use vesselseg::eval::class_name;
use vesselseg::phantom::{generate_phantom, island_counts, write_phantom, PhantomSpec};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let mut spec = PhantomSpec::default();
    spec.fragmentation.enabled = true;
    let (volume, labels, meta) = generate_phantom(&spec, seed)?;
    let islands = island_counts(&labels, spec.classes());
    println!("shape {:?}, roi z {:?}, kidney box {:?}", volume.shape(), meta.roi_z, meta.kidney_box);
    for c in 1..spec.classes() as u8 {
        println!(
            "{:>7}: {:5} voxels, {:2} islands, {:3} centerline points",
            class_name(c),
            labels.count(c),
            islands[c as usize - 1],
            meta.centerlines[&c].len()
        );
    }
    if let Some(dir) = args.next() {
        let files = write_phantom(dir.as_ref(), "example", &volume, &labels, &meta)?;
        println!("wrote {}", files.image.display());
    }
    Ok(())
}

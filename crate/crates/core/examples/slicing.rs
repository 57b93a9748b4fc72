//! Cuts training patches from a phantom and summarises them by kind.

use vesselseg::phantom::{generate_phantom, slice_patches, PhantomSpec};

fn main() -> anyhow::Result<()> {
    let spec = PhantomSpec::default();
    let (volume, labels, meta) = generate_phantom(&spec, 3)?;
    let patches = slice_patches(&volume, &labels, &meta, 32, &[6, 6, 6, 6], 1, "phantom")?;
    println!("{:>4} {:>14} {:>12} {:>10}", "kind", "origin", "foreground", "fraction");
    for p in &patches {
        let fg = p.labels.len() - p.labels.count(0);
        println!(
            "{:>4} {:>14} {:>12} {:>10.4}",
            p.kind,
            format!("{:?}", p.origin),
            fg,
            fg as f64 / p.labels.len() as f64
        );
    }
    Ok(())
}

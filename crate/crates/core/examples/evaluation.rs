//! Scores a deliberately damaged ground truth against the original.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vesselseg::eval::{background_false_positives, class_name, evaluate, foreground_recall, KIDNEY_BOX, WHOLE_ROI};
use vesselseg::phantom::{generate_phantom, PhantomSpec};

fn main() -> anyhow::Result<()> {
    let mut spec = PhantomSpec::default();
    spec.fragmentation.enabled = true;
    let (_, gt, meta) = generate_phantom(&spec, 12)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut pred = gt.clone();
    for l in pred.data_mut() {
        if *l != 0 && rng.random_bool(0.2) {
            *l = 0;
        } else if *l == 0 && rng.random_bool(0.002) {
            *l = rng.random_range(1..4);
        }
    }
    let report = evaluate(&pred, &gt, &meta, spec.classes())?;
    for c in 1..spec.classes() as u8 {
        let d = |r| report.score(c, r).map(|s| format!("{:.3}", s.dice)).unwrap_or("-".into());
        println!("{:>7}: whole ROI {}  kidney box {}", class_name(c), d(WHOLE_ROI), d(KIDNEY_BOX));
    }
    println!(
        "foreground recall {:.3}, background false positives {}",
        foreground_recall(&pred, &gt)?,
        background_false_positives(&pred, &gt)?
    );
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

//! Overlap scoring: dice per class over the z-clipped subject extent and
//! the kidney box, after discarding predicted components that touch no
//! annotated island.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::PhantomMeta;
use crate::volume::{coords, BoundingBox, LabelVolume, Mask, Shape};

pub const WHOLE_ROI: &str = "whole_roi";
pub const KIDNEY_BOX: &str = "kidney_box";

/// Display name of a class id.
pub fn class_name(class: u8) -> String {
    match class {
        0 => "background".into(),
        1 => "artery".into(),
        2 => "vein".into(),
        3 => "ureter".into(),
        c => format!("class{c}"),
    }
}

fn check_shapes(a: Shape, b: Shape) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

/// `2·tp / (2·tp + fp + fn)`, and 1.0 when all three are zero.
pub fn dice_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    Ok(dice_from_counts(c.0, c.1, c.2))
}

/// `(tp, fp, fn)` of a binary prediction.
pub fn confusion(pred: &Mask, gt: &Mask) -> Result<(usize, usize, usize)> {
    check_shapes(pred.shape(), gt.shape())?;
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok((tp, fp, fn_))
}

/// Connected components of one mask, each a sorted list of linear indices,
/// ordered by their smallest index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IslandSet {
    pub shape: Shape,
    pub islands: Vec<Vec<usize>>,
}

impl IslandSet {
    pub fn len(&self) -> usize {
        self.islands.len()
    }

    pub fn is_empty(&self) -> bool {
        self.islands.is_empty()
    }

    pub fn mask(&self) -> Mask {
        let mut m = Mask::filled(self.shape, false);
        for &i in self.islands.iter().flatten() {
            m.data_mut()[i] = true;
        }
        m
    }
}

/// Component id per voxel (`u32::MAX` for unset voxels) under
/// 26-connectivity, numbered in order of each component's first voxel.
pub fn label_components(mask: &Mask) -> (Vec<u32>, usize) {
    let shape = mask.shape();
    let data = mask.data();
    let mut ids = vec![u32::MAX; data.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..data.len() {
        if !data[start] || ids[start] != u32::MAX {
            continue;
        }
        ids[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let p = coords(shape, i);
            for dz in -1isize..=1 {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let q = [p[0] as isize + dx, p[1] as isize + dy, p[2] as isize + dz];
                        if (0..3).any(|a| q[a] < 0 || q[a] >= shape[a] as isize) {
                            continue;
                        }
                        let j = q[0] as usize + shape[0] * (q[1] as usize + shape[1] * q[2] as usize);
                        if data[j] && ids[j] == u32::MAX {
                            ids[j] = next;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        next += 1;
    }
    (ids, next as usize)
}

pub fn connected_components(mask: &Mask) -> IslandSet {
    let (ids, count) = label_components(mask);
    let mut islands = vec![Vec::new(); count];
    for (i, &id) in ids.iter().enumerate() {
        if id != u32::MAX {
            islands[id as usize].push(i);
        }
    }
    IslandSet {
        shape: mask.shape(),
        islands,
    }
}

/// Keeps every predicted component that shares at least one voxel with an
/// island and drops the rest.
pub fn filter_predictions_by_islands(pred: &Mask, islands: &IslandSet) -> Result<Mask> {
    check_shapes(pred.shape(), islands.shape)?;
    let (ids, count) = label_components(pred);
    let mut keep = vec![false; count];
    for &i in islands.islands.iter().flatten() {
        if ids[i] != u32::MAX {
            keep[ids[i] as usize] = true;
        }
    }
    let data = ids.iter().map(|&id| id != u32::MAX && keep[id as usize]).collect();
    Ok(Mask::from_vec(pred.shape(), data).expect("same shape"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub dice: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Scores of one class in one region after island filtering.
pub fn score_region(pred: &Mask, gt: &Mask) -> Result<RegionScore> {
    let islands = connected_components(gt);
    let kept = filter_predictions_by_islands(pred, &islands)?;
    let (tp, fp, fn_) = confusion(&kept, gt)?;
    Ok(RegionScore {
        dice: dice_from_counts(tp, fp, fn_),
        tp,
        fp,
        fn_,
    })
}

/// `{class: {region: score}}`; a region that is empty after clipping maps to
/// `null`. The boxes used are listed under `regions`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    #[serde(flatten)]
    pub classes: BTreeMap<String, BTreeMap<String, Option<RegionScore>>>,
    pub regions: BTreeMap<String, Option<BoundingBox>>,
}

impl DiceReport {
    pub fn score(&self, class: u8, region: &str) -> Option<RegionScore> {
        self.classes.get(&class_name(class))?.get(region).copied().flatten()
    }
}

/// Region A: full x/y extent, z clipped to `roi_z` (inclusive bounds).
pub fn roi_region(shape: Shape, roi_z: (usize, usize)) -> Option<BoundingBox> {
    let hi = (roi_z.1 + 1).min(shape[2]);
    BoundingBox::new([0, 0, roi_z.0], [shape[0], shape[1], hi]).ok()
}

pub fn evaluate(pred: &LabelVolume, gt: &LabelVolume, meta: &PhantomMeta, classes: usize) -> Result<DiceReport> {
    check_shapes(pred.shape(), gt.shape())?;
    let shape = gt.shape();
    let kidney = BoundingBox::new(meta.kidney_box.lo, meta.kidney_box.hi)
        .ok()
        .filter(|b| b.check_within(shape).is_ok());
    let regions: BTreeMap<String, Option<BoundingBox>> = [
        (WHOLE_ROI.to_string(), roi_region(shape, meta.roi_z)),
        (KIDNEY_BOX.to_string(), kidney),
    ]
    .into_iter()
    .collect();
    let mut out = BTreeMap::new();
    for c in 1..classes as u8 {
        let mut per_region = BTreeMap::new();
        for (name, bbox) in &regions {
            let score = match bbox {
                None => None,
                Some(b) => {
                    let p = pred.crop(b)?.class_mask(c);
                    let g = gt.crop(b)?.class_mask(c);
                    Some(score_region(&p, &g)?)
                }
            };
            per_region.insert(name.clone(), score);
        }
        out.insert(class_name(c), per_region);
    }
    Ok(DiceReport { classes: out, regions })
}

/// Fraction of ground-truth foreground voxels predicted as any foreground
/// class; 1.0 when there is no foreground.
pub fn foreground_recall(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    check_shapes(pred.shape(), gt.shape())?;
    let (mut hit, mut total) = (0usize, 0usize);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        if g != 0 {
            total += 1;
            hit += (p != 0) as usize;
        }
    }
    Ok(if total == 0 { 1.0 } else { hit as f64 / total as f64 })
}

/// Background voxels predicted as foreground, before any island filtering.
pub fn background_false_positives(pred: &LabelVolume, gt: &LabelVolume) -> Result<usize> {
    check_shapes(pred.shape(), gt.shape())?;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .filter(|&(&p, &g)| g == 0 && p != 0)
        .count())
}

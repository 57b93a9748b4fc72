//! Dynamic per-voxel loss weights and band-based background sampling.
//!
//! Each class keeps an exponentially smoothed volume fraction `V_c`, updated
//! once per training patch. Class weights are `CW_c = 1 / (n V_c)`, so that
//! `CW_c V_c = 1/n` for every class. A patch weight `PW = 1 - ln(f)` grows as
//! the patch's foreground fraction `f` shrinks, and a voxel of class `c` is
//! weighted `PW * CW_c`.
//!
//! Background sampling picks as many background voxels as there are
//! foreground voxels: 20% from the shell at distance (2, 4] around the
//! foreground and the rest from beyond it. Sampled voxels get a foreground
//! sized weight, and background within distance 2 of a vessel is dropped
//! from the loss entirely.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::dilate;
use crate::volume::{Grid, LabelVolume, BACKGROUND};

pub const DEFAULT_ALPHA: f64 = 0.001;
pub const INNER_RADIUS: usize = 2;
pub const RED_RADIUS: usize = 4;
pub const RED_SHARE: f64 = 0.2;
pub const EMPTY_PATCH_SHARE: f64 = 0.01;

/// Moving-average class volumes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightingState {
    alpha: f64,
    volumes: Vec<f64>,
}

impl WeightingState {
    /// Every class starts at `V_c = 1/n`.
    pub fn new(classes: usize, alpha: f64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1), got {alpha}")));
        }
        Ok(Self {
            alpha,
            volumes: vec![1.0 / classes as f64; classes],
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn classes(&self) -> usize {
        self.volumes.len()
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    /// Folds one patch's labels into the moving averages.
    pub fn update(&self, labels: &LabelVolume) -> Self {
        self.update_with_fractions(&class_fractions(labels, self.classes()))
    }

    /// `V_c <- V_c (1 - alpha) + f_c alpha` for every class, background included.
    pub fn update_with_fractions(&self, fractions: &[f64]) -> Self {
        debug_assert_eq!(fractions.len(), self.volumes.len());
        let volumes = self
            .volumes
            .iter()
            .zip(fractions)
            .map(|(&v, &f)| v * (1.0 - self.alpha) + f * self.alpha)
            .collect();
        Self {
            alpha: self.alpha,
            volumes,
        }
    }

    /// `CW_c = 1 / (n V_c)`.
    pub fn class_weights(&self) -> Result<Vec<f64>> {
        let n = self.classes() as f64;
        self.volumes
            .iter()
            .enumerate()
            .map(|(c, &v)| {
                if v > 0.0 {
                    Ok(1.0 / (n * v))
                } else {
                    Err(Error::Domain(format!("class {c} has zero moving-average volume")))
                }
            })
            .collect()
    }
}

/// Fraction of the patch labelled `class`.
pub fn class_volume(labels: &LabelVolume, class: u8) -> f64 {
    labels.count(class) as f64 / labels.len() as f64
}

/// Per-class volume fractions of a patch (one pass).
pub fn class_fractions(labels: &LabelVolume, classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &l in labels.data() {
        counts[l as usize] += 1;
    }
    let total = labels.len() as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

/// `PW = 1` for background-only patches, else `1 - ln(foreground fraction)`.
pub fn patch_weight(labels: &LabelVolume) -> f64 {
    let fg = labels.data().iter().filter(|&&l| l != BACKGROUND).count();
    patch_weight_from_fraction(fg as f64 / labels.len() as f64)
}

pub fn patch_weight_from_fraction(foreground_fraction: f64) -> f64 {
    if foreground_fraction <= 0.0 {
        1.0
    } else {
        1.0 - foreground_fraction.ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Band {
    Foreground,
    /// Background within distance 2 of foreground.
    Inner,
    /// Background at distance in (2, 4].
    Red,
    /// Everything farther out.
    Outer,
}

pub type BandMap = Grid<Band>;

pub fn build_bands(labels: &LabelVolume) -> BandMap {
    let fg = labels.foreground_mask();
    let near = dilate(&fg, INNER_RADIUS);
    let far = dilate(&fg, RED_RADIUS);
    let data = fg
        .data()
        .iter()
        .zip(near.data())
        .zip(far.data())
        .map(|((&f, &n), &r)| match (f, n, r) {
            (true, _, _) => Band::Foreground,
            (false, true, _) => Band::Inner,
            (false, false, true) => Band::Red,
            _ => Band::Outer,
        })
        .collect();
    Grid::from_vec(labels.shape(), data).expect("same shape")
}

/// Counts of voxels per band, in `[Foreground, Inner, Red, Outer]` order.
pub fn band_counts(bands: &BandMap) -> [usize; 4] {
    let mut c = [0usize; 4];
    for b in bands.data() {
        c[*b as usize] += 1;
    }
    c
}

fn pick<R: Rng + ?Sized>(rng: &mut R, pool: &[usize], amount: usize, out: &mut Vec<usize>) {
    if amount >= pool.len() {
        out.extend_from_slice(pool);
    } else {
        out.extend(rand::seq::index::sample(rng, pool.len(), amount).into_iter().map(|i| pool[i]));
    }
}

/// Draws the background voxels that receive a high weight.
///
/// With `F` foreground voxels, `round(0.2 F)` come from the red band and the
/// remainder from the outer region; a band that runs out is taken whole and
/// its shortfall drawn from the other one. Foreground-free patches get
/// `max(1, floor(0.01 * size))` uniform draws. Returned indices are sorted.
pub fn sample_background<R: Rng + ?Sized>(bands: &BandMap, rng: &mut R) -> Vec<usize> {
    let mut red = Vec::new();
    let mut outer = Vec::new();
    let mut foreground = 0usize;
    for (i, b) in bands.data().iter().enumerate() {
        match b {
            Band::Foreground => foreground += 1,
            Band::Red => red.push(i),
            Band::Outer => outer.push(i),
            Band::Inner => {}
        }
    }
    let mut out = Vec::new();
    if foreground == 0 {
        let quota = ((EMPTY_PATCH_SHARE * bands.len() as f64).floor() as usize).max(1);
        let all: Vec<usize> = (0..bands.len()).collect();
        pick(rng, &all, quota, &mut out);
    } else {
        let red_quota = (RED_SHARE * foreground as f64).round() as usize;
        let outer_quota = foreground - red_quota;
        let take_red = red_quota.min(red.len());
        let take_outer = (outer_quota + red_quota - take_red).min(outer.len());
        let extra_red = (outer_quota.saturating_sub(take_outer)).min(red.len() - take_red);
        pick(rng, &red, take_red + extra_red, &mut out);
        pick(rng, &outer, take_outer, &mut out);
    }
    out.sort_unstable();
    out
}

/// Background sampling result handed to [`voxel_weight_map`].
pub struct Sampling<'a> {
    pub bands: &'a BandMap,
    pub samples: &'a [usize],
}

/// Per-voxel loss weights.
pub type WeightMap = Grid<f32>;

/// Builds the voxel weight map for one patch.
///
/// Foreground voxels of class `c` get `PW * CW_c`. Without `sampling` every
/// background voxel gets `PW * CW_0`. With it, sampled background voxels get
/// `PW` times the mean foreground class weight, inner-band background gets
/// zero and the remaining background keeps `PW * CW_0`.
pub fn voxel_weight_map(
    labels: &LabelVolume,
    state: &WeightingState,
    sampling: Option<Sampling<'_>>,
) -> Result<WeightMap> {
    let cw = state.class_weights()?;
    let pw = patch_weight(labels);
    let n = state.classes();
    let mut weights: Vec<f32> = labels
        .data()
        .iter()
        .map(|&l| {
            let c = l as usize;
            if c >= n {
                f32::NAN
            } else {
                (pw * cw[c]) as f32
            }
        })
        .collect();
    if let Some(i) = weights.iter().position(|w| w.is_nan()) {
        return Err(Error::Integrity(format!("label at voxel {i} exceeds class count {n}")));
    }
    if let Some(Sampling { bands, samples }) = sampling {
        if bands.shape() != labels.shape() {
            return Err(Error::Shape(format!(
                "bands {:?} vs labels {:?}",
                bands.shape(),
                labels.shape()
            )));
        }
        for (w, b) in weights.iter_mut().zip(bands.data()) {
            if *b == Band::Inner {
                *w = 0.0;
            }
        }
        let sampled = pw * cw[1..].iter().sum::<f64>() / (n - 1) as f64;
        for &s in samples {
            match bands.data().get(s) {
                None => {
                    return Err(Error::Integrity(format!(
                        "sample index {s} outside patch of {} voxels",
                        labels.len()
                    )))
                }
                Some(Band::Red | Band::Outer) => weights[s] = sampled as f32,
                Some(b) => {
                    return Err(Error::Integrity(format!("sample index {s} lies in band {b:?}")))
                }
            }
        }
    }
    Ok(Grid::from_vec(labels.shape(), weights).expect("same shape"))
}

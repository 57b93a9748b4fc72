//! Dense 3D containers shared by every stage of the pipeline.
//!
//! All grids are stored x-fastest: the linear index of voxel `(x, y, z)` is
//! `x + nx * (y + ny * z)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts along `(x, y, z)`.
pub type Shape = [usize; 3];

/// Default number of classes: background, artery, vein, ureter.
pub const DEFAULT_CLASSES: usize = 4;

pub const BACKGROUND: u8 = 0;
pub const ARTERY: u8 = 1;
pub const VEIN: u8 = 2;
pub const URETER: u8 = 3;

const AXES: [char; 3] = ['x', 'y', 'z'];

pub fn voxel_count(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2]
}

#[inline]
pub fn linear_index(shape: Shape, x: usize, y: usize, z: usize) -> usize {
    x + shape[0] * (y + shape[1] * z)
}

#[inline]
pub fn coords(shape: Shape, idx: usize) -> [usize; 3] {
    let x = idx % shape[0];
    let yz = idx / shape[0];
    [x, yz % shape[1], yz / shape[1]]
}

/// Axis-aligned voxel box, `lo` inclusive and `hi` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn new(lo: [usize; 3], hi: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if lo[a] >= hi[a] {
                return Err(Error::Range {
                    axis: AXES[a],
                    detail: format!("lo {} must be below hi {}", lo[a], hi[a]),
                });
            }
        }
        Ok(Self { lo, hi })
    }

    pub fn full(shape: Shape) -> Self {
        Self {
            lo: [0; 3],
            hi: shape,
        }
    }

    pub fn shape(&self) -> Shape {
        [
            self.hi[0] - self.lo[0],
            self.hi[1] - self.lo[1],
            self.hi[2] - self.lo[2],
        ]
    }

    pub fn volume(&self) -> usize {
        voxel_count(self.shape())
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.lo[a] && p[a] < self.hi[a])
    }

    pub fn intersects(&self, other: &BoundingBox) -> bool {
        (0..3).all(|a| self.lo[a] < other.hi[a] && other.lo[a] < self.hi[a])
    }

    /// Checks that the box fits inside a grid of `shape`.
    pub fn check_within(&self, shape: Shape) -> Result<()> {
        for a in 0..3 {
            if self.lo[a] >= self.hi[a] {
                return Err(Error::Range {
                    axis: AXES[a],
                    detail: format!("empty extent lo={} hi={}", self.lo[a], self.hi[a]),
                });
            }
            if self.hi[a] > shape[a] {
                return Err(Error::Range {
                    axis: AXES[a],
                    detail: format!("hi={} exceeds extent {}", self.hi[a], shape[a]),
                });
            }
        }
        Ok(())
    }
}

/// A dense 3D grid of `T`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    shape: Shape,
    data: Vec<T>,
}

/// Per-voxel class ids (`0 = background`).
pub type LabelVolume = Grid<u8>;

/// Binary voxel mask.
pub type Mask = Grid<bool>;

impl<T: Copy> Grid<T> {
    pub fn filled(shape: Shape, value: T) -> Self {
        Self {
            shape,
            data: vec![value; voxel_count(shape)],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in {shape:?}")));
        }
        if data.len() != voxel_count(shape) {
            return Err(Error::Shape(format!(
                "{} values for shape {:?} ({} voxels)",
                data.len(),
                shape,
                voxel_count(shape)
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(voxel_count(shape));
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.shape, x, y, z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> T {
        self.data[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: T) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copies out the sub-grid covered by `bbox`.
    pub fn crop(&self, bbox: &BoundingBox) -> Result<Self> {
        bbox.check_within(self.shape)?;
        let out_shape = bbox.shape();
        let mut data = Vec::with_capacity(voxel_count(out_shape));
        for z in bbox.lo[2]..bbox.hi[2] {
            for y in bbox.lo[1]..bbox.hi[1] {
                let row = self.index(bbox.lo[0], y, z);
                data.extend_from_slice(&self.data[row..row + out_shape[0]]);
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    /// Writes `src` into this grid with its origin at `at`.
    pub fn paste(&mut self, src: &Grid<T>, at: [usize; 3]) -> Result<()> {
        let s = src.shape;
        BoundingBox::new(at, [at[0] + s[0], at[1] + s[1], at[2] + s[2]])?.check_within(self.shape)?;
        for z in 0..s[2] {
            for y in 0..s[1] {
                let dst = self.index(at[0], at[1] + y, at[2] + z);
                let from = src.index(0, y, z);
                self.data[dst..dst + s[0]].copy_from_slice(&src.data[from..from + s[0]]);
            }
        }
        Ok(())
    }
}

impl Grid<u8> {
    /// Verifies every label is a valid class id for `classes` classes.
    pub fn validate_labels(&self, classes: usize) -> Result<()> {
        match self.data.iter().position(|&v| v as usize >= classes) {
            Some(i) => Err(Error::Integrity(format!(
                "label {} at voxel {} is not below class count {}",
                self.data[i], i, classes
            ))),
            None => Ok(()),
        }
    }

    pub fn class_mask(&self, class: u8) -> Mask {
        self.map(|v| v == class)
    }

    pub fn foreground_mask(&self) -> Mask {
        self.map(|v| v != BACKGROUND)
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}

impl Grid<bool> {
    pub fn count_set(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }
}

/// Millimetres per voxel along `(x, y, z)`.
pub type Spacing = [f64; 3];

/// Scalar intensity volume with physical spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    grid: Grid<f32>,
    spacing: Spacing,
}

impl Volume {
    pub fn new(grid: Grid<f32>, spacing: Spacing) -> Result<Self> {
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("spacing must be positive, got {spacing:?}")));
        }
        if let Some(i) = grid.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Integrity(format!("non-finite intensity at voxel {i}")));
        }
        Ok(Self { grid, spacing })
    }

    pub fn from_vec(shape: Shape, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        Self::new(Grid::from_vec(shape, data)?, spacing)
    }

    pub fn grid(&self) -> &Grid<f32> {
        &self.grid
    }

    pub fn shape(&self) -> Shape {
        self.grid.shape()
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        self.grid.data()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.grid.get(x, y, z)
    }

    pub fn crop(&self, bbox: &BoundingBox) -> Result<Self> {
        Ok(Self {
            grid: self.grid.crop(bbox)?,
            spacing: self.spacing,
        })
    }

    pub fn into_grid(self) -> Grid<f32> {
        self.grid
    }
}

/// Per-voxel probability distribution over `classes` classes.
///
/// Stored channel-major: `classes` consecutive x-fastest volumes.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    shape: Shape,
    classes: usize,
    data: Vec<f32>,
}

impl ProbMap {
    pub const SUM_TOLERANCE: f32 = 1e-5;

    /// Builds a map from channel-major data, checking the per-voxel
    /// normalization invariant.
    pub fn new(shape: Shape, classes: usize, data: Vec<f32>) -> Result<Self> {
        let map = Self::from_raw(shape, classes, data)?;
        map.check_normalized()?;
        Ok(map)
    }

    pub(crate) fn from_raw(shape: Shape, classes: usize, data: Vec<f32>) -> Result<Self> {
        if classes == 0 || data.len() != classes * voxel_count(shape) {
            return Err(Error::Shape(format!(
                "{} values for {} classes of shape {:?}",
                data.len(),
                classes,
                shape
            )));
        }
        Ok(Self {
            shape,
            classes,
            data,
        })
    }

    pub fn uniform(shape: Shape, classes: usize) -> Self {
        Self {
            shape,
            classes,
            data: vec![1.0 / classes as f32; classes * voxel_count(shape)],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.shape)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn prob(&self, voxel: usize, class: usize) -> f32 {
        self.data[class * self.voxels() + voxel]
    }

    pub fn voxel_probs(&self, voxel: usize) -> Vec<f32> {
        (0..self.classes).map(|c| self.prob(voxel, c)).collect()
    }

    pub fn check_normalized(&self) -> Result<()> {
        for v in 0..self.voxels() {
            let mut sum = 0.0f32;
            for c in 0..self.classes {
                let p = self.prob(v, c);
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Integrity(format!("probability {p} at voxel {v} class {c}")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
                return Err(Error::Integrity(format!("probabilities at voxel {v} sum to {sum}")));
            }
        }
        Ok(())
    }
}

/// Per-voxel arg-max, ties resolved toward the lowest class index.
pub fn argmax_labels(probs: &ProbMap) -> LabelVolume {
    let n = probs.voxels();
    let mut labels = vec![0u8; n];
    let mut best = probs.channel(0).to_vec();
    for c in 1..probs.classes() {
        for ((b, l), &p) in best.iter_mut().zip(labels.iter_mut()).zip(probs.channel(c)) {
            if p > *b {
                *b = p;
                *l = c as u8;
            }
        }
    }
    Grid::from_vec(probs.shape(), labels).expect("shape preserved")
}

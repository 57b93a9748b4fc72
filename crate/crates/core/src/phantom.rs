//! Synthetic CT-like phantoms: one branching tube tree per foreground class
//! in white Gaussian noise, plus patch slicing for training.
//!
//! Trees are recursive random branchings of straight capsules whose radius
//! shrinks geometrically from the trunk to the terminal level. Every voxel
//! whose centre lies within a capsule's radius of its axis is labelled with
//! the tree's class.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::label_components;
use crate::kvol;
use crate::seeding::{self, STREAM_FRAGMENTS, STREAM_GEOMETRY, STREAM_NOISE, STREAM_SLICING};
use crate::volume::{voxel_count, BoundingBox, LabelVolume, Shape, Spacing, Volume};

const LAYOUT_ATTEMPTS: usize = 8;
const ROOT_ATTEMPTS: usize = 20;
const BRANCH_ATTEMPTS: usize = 16;
const BACKGROUND_ATTEMPTS: usize = 50;
const KIDNEY_MARGIN: usize = 2;
const ROI_MARGIN: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    /// Trunk start in voxel coordinates.
    pub root: [f64; 3],
    pub direction: [f64; 3],
    /// Uniform jitter (± voxels per axis) applied to the root.
    #[serde(default)]
    pub root_jitter: f64,
    pub trunk_length: f64,
    /// Segment length ratio between consecutive depths.
    pub length_decay: f64,
    pub trunk_radius: f64,
    pub terminal_radius: f64,
    /// Number of branching generations below the trunk.
    pub depth: usize,
    /// Children per branching point.
    pub branch_count: usize,
    /// Mean angle between a child and its parent, in degrees.
    pub spread_deg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tissue {
    pub mean: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntensityModel {
    pub background: Tissue,
    /// Entry `i` describes class `i + 1`.
    pub classes: Vec<Tissue>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Fragmentation {
    pub enabled: bool,
    /// Probability that a piece of a segment is left out of the emitted
    /// labels.
    pub drop_rate: f64,
    /// Segments are cut into pieces of about this length (voxels) along
    /// their axis before dropping.
    pub piece_length: f64,
}

impl Default for Fragmentation {
    fn default() -> Self {
        Self {
            enabled: false,
            drop_rate: 0.45,
            piece_length: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub shape: Shape,
    pub spacing_mm: Spacing,
    /// Entry `i` is the tree of class `i + 1`, generated in that order.
    pub trees: Vec<TreeSpec>,
    pub intensity: IntensityModel,
    pub fragmentation: Fragmentation,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let tree = |root: [f64; 3], direction: [f64; 3], trunk_length, trunk_radius, depth| TreeSpec {
            root,
            direction,
            root_jitter: 3.0,
            trunk_length,
            length_decay: 0.72,
            trunk_radius,
            terminal_radius: 1.0,
            depth,
            branch_count: 2,
            spread_deg: 38.0,
        };
        Self {
            shape: [64, 64, 64],
            spacing_mm: [0.757, 0.757, 0.906],
            trees: vec![
                tree([3.0, 24.0, 38.0], [1.0, 0.0, 0.1], 10.0, 2.5, 3),
                tree([3.0, 40.0, 28.0], [1.0, 0.1, -0.1], 10.0, 3.0, 3),
                tree([14.0, 22.0, 5.0], [0.1, 0.15, 1.0], 14.0, 2.0, 2),
            ],
            intensity: IntensityModel {
                background: Tissue { mean: 0.0, sigma: 0.1 },
                classes: vec![
                    Tissue { mean: 0.8, sigma: 0.1 },
                    Tissue { mean: 0.55, sigma: 0.1 },
                    Tissue { mean: 0.3, sigma: 0.1 },
                ],
            },
            fragmentation: Fragmentation::default(),
        }
    }
}

impl PhantomSpec {
    pub fn classes(&self) -> usize {
        self.trees.len() + 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.shape.contains(&0) {
            return bad(format!("shape {:?} has an empty axis", self.shape));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad(format!("spacing {:?} must be positive", self.spacing_mm));
        }
        if self.trees.is_empty() || self.trees.len() > 254 {
            return bad(format!("need 1..=254 trees, got {}", self.trees.len()));
        }
        if self.intensity.classes.len() != self.trees.len() {
            return bad(format!(
                "{} trees but {} class intensities",
                self.trees.len(),
                self.intensity.classes.len()
            ));
        }
        for (i, t) in self.trees.iter().enumerate() {
            let c = i + 1;
            if t.terminal_radius < 1.0 {
                return bad(format!("class {c}: terminal radius {} is below one voxel", t.terminal_radius));
            }
            if t.trunk_radius < t.terminal_radius {
                return bad(format!("class {c}: trunk radius is smaller than terminal radius"));
            }
            if t.branch_count == 0 || !(t.trunk_length > 0.0) || !(t.length_decay > 0.0) || t.root_jitter < 0.0 {
                return bad(format!("class {c}: branch count, lengths and jitter must be positive"));
            }
            if norm(t.direction) == 0.0 {
                return bad(format!("class {c}: zero trunk direction"));
            }
        }
        let mut tissues = vec![self.intensity.background];
        tissues.extend(&self.intensity.classes);
        for t in &tissues {
            if !(t.sigma > 0.0 && t.mean.is_finite()) {
                return bad("intensity sigmas must be positive".into());
            }
        }
        for a in 0..tissues.len() {
            for b in a + 1..tissues.len() {
                let gap = (tissues[a].mean - tissues[b].mean).abs();
                let sigma = tissues[a].sigma.max(tissues[b].sigma);
                if gap < 2.0 * sigma {
                    return bad(format!(
                        "classes {a} and {b} have means {gap} apart, below twice their sigma {sigma}"
                    ));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.fragmentation.drop_rate) {
            return bad("fragmentation drop rate must lie in [0, 1]".into());
        }
        if !(self.fragmentation.piece_length > 0.0) {
            return bad("fragmentation piece length must be positive".into());
        }
        Ok(())
    }
}

/// Per-class centerlines, the kidney box and the z-range of the subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomMeta {
    pub shape: Shape,
    /// Class id to the voxels visited by that tree's segment axes.
    pub centerlines: BTreeMap<u8, Vec<[usize; 3]>>,
    pub kidney_box: BoundingBox,
    /// Inclusive z-range of all (unfragmented) foreground plus a margin.
    pub roi_z: (usize, usize),
}

impl PhantomMeta {
    pub fn validate(&self) -> Result<()> {
        for (c, pts) in &self.centerlines {
            if let Some(p) = pts.iter().find(|p| (0..3).any(|a| p[a] >= self.shape[a])) {
                return Err(Error::Integrity(format!("class {c} centerline point {p:?} lies outside {:?}", self.shape)));
            }
        }
        self.kidney_box.check_within(self.shape)?;
        if self.roi_z.0 > self.roi_z.1 || self.roi_z.1 >= self.shape[2] {
            return Err(Error::Integrity(format!("roi_z {:?} outside [0, {})", self.roi_z, self.shape[2])));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Segment {
    depth: usize,
    a: [f64; 3],
    b: [f64; 3],
    voxels: Vec<usize>,
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn scale(v: [f64; 3], s: f64) -> [f64; 3] {
    [v[0] * s, v[1] * s, v[2] * s]
}

fn add(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn unit(v: [f64; 3]) -> [f64; 3] {
    scale(v, 1.0 / norm(v))
}

/// Two unit vectors completing `d` to an orthonormal basis.
fn perpendicular_basis(d: [f64; 3]) -> ([f64; 3], [f64; 3]) {
    let helper = if d[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let u = unit(cross(d, helper));
    (u, cross(d, u))
}

fn point_segment_distance(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let ap = [p[0] - a[0], p[1] - a[1], p[2] - a[2]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1] + ab[2] * ab[2];
    let t = if len2 == 0.0 {
        0.0
    } else {
        ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / len2).clamp(0.0, 1.0)
    };
    norm([ap[0] - t * ab[0], ap[1] - t * ab[1], ap[2] - t * ab[2]])
}

/// Voxels within `radius` of segment `ab`, or `None` if any would fall
/// outside the grid.
fn rasterize(shape: Shape, a: [f64; 3], b: [f64; 3], radius: f64) -> Option<Vec<usize>> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    for ax in 0..3 {
        let l = (a[ax].min(b[ax]) - radius).ceil();
        let h = (a[ax].max(b[ax]) + radius).floor();
        if l < 0.0 || h > (shape[ax] - 1) as f64 {
            return None;
        }
        lo[ax] = l as usize;
        hi[ax] = h as usize;
    }
    let mut out = Vec::new();
    for z in lo[2]..=hi[2] {
        for y in lo[1]..=hi[1] {
            for x in lo[0]..=hi[0] {
                if point_segment_distance([x as f64, y as f64, z as f64], a, b) <= radius {
                    out.push(x + shape[0] * (y + shape[1] * z));
                }
            }
        }
    }
    Some(out)
}

/// Voxels nearest to points spaced a quarter voxel apart along `ab`.
fn centerline(a: [f64; 3], b: [f64; 3]) -> Vec<[usize; 3]> {
    let steps = (norm([b[0] - a[0], b[1] - a[1], b[2] - a[2]]) * 4.0).ceil().max(1.0) as usize;
    let mut pts: Vec<[usize; 3]> = Vec::with_capacity(steps + 1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let p = [0, 1, 2].map(|ax| (a[ax] + t * (b[ax] - a[ax])).round() as usize);
        if pts.last() != Some(&p) {
            pts.push(p);
        }
    }
    pts
}

struct Grower<'a, R: Rng> {
    shape: Shape,
    class: u8,
    tree: &'a TreeSpec,
    owner: &'a mut [u8],
    segments: Vec<Segment>,
    rng: &'a mut R,
}

impl<R: Rng> Grower<'_, R> {
    fn radius(&self, depth: usize) -> f64 {
        let t = self.tree;
        if t.depth == 0 {
            t.trunk_radius
        } else {
            t.trunk_radius * (t.terminal_radius / t.trunk_radius).powf(depth as f64 / t.depth as f64)
        }
    }

    /// True when no voxel of another class lies in the 26-neighbourhood of
    /// any of `voxels`.
    fn clear_of_others(&self, voxels: &[usize]) -> bool {
        let s = self.shape;
        voxels.iter().all(|&i| {
            let p = crate::volume::coords(s, i);
            (-1isize..=1).all(|dz| {
                (-1isize..=1).all(|dy| {
                    (-1isize..=1).all(|dx| {
                        let q = [p[0] as isize + dx, p[1] as isize + dy, p[2] as isize + dz];
                        if (0..3).any(|a| q[a] < 0 || q[a] >= s[a] as isize) {
                            return true;
                        }
                        let o = self.owner[q[0] as usize + s[0] * (q[1] as usize + s[1] * q[2] as usize)];
                        o == 0 || o == self.class
                    })
                })
            })
        })
    }

    fn try_place(&mut self, depth: usize, a: [f64; 3], dir: [f64; 3]) -> Option<[f64; 3]> {
        let length = self.tree.trunk_length * self.tree.length_decay.powi(depth as i32);
        let b = add(a, scale(dir, length));
        let radius = self.radius(depth);
        let voxels = rasterize(self.shape, a, b, radius)?;
        if !self.clear_of_others(&voxels) {
            return None;
        }
        for &v in &voxels {
            self.owner[v] = self.class;
        }
        self.segments.push(Segment {
            depth,
            a,
            b,
            voxels,
        });
        Some(b)
    }

    fn grow(&mut self, start: [f64; 3], dir: [f64; 3], depth: usize) {
        if depth > self.tree.depth {
            return;
        }
        let k = self.tree.branch_count;
        let spread = self.tree.spread_deg.to_radians();
        let phase0 = self.rng.random_range(0.0..2.0 * PI);
        let (u, v) = perpendicular_basis(dir);
        for i in 0..k {
            for _ in 0..BRANCH_ATTEMPTS {
                let phase = phase0 + 2.0 * PI * i as f64 / k as f64 + self.rng.random_range(-0.4..0.4);
                let angle = spread * self.rng.random_range(0.7..1.3);
                let axis = add(scale(u, phase.cos()), scale(v, phase.sin()));
                let child = unit(add(scale(dir, angle.cos()), scale(axis, angle.sin())));
                if let Some(end) = self.try_place(depth, start, child) {
                    self.grow(end, child, depth + 1);
                    break;
                }
            }
        }
    }
}

/// Generates a phantom image, its (possibly fragmented) labels and metadata.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<(Volume, LabelVolume, PhantomMeta)> {
    spec.validate()?;
    let shape = spec.shape;
    let mut geometry = seeding::stream(seed, STREAM_GEOMETRY);
    let mut last_err = None;
    let mut grown = None;
    for _ in 0..LAYOUT_ATTEMPTS {
        match grow_trees(spec, &mut geometry) {
            Ok(g) => {
                grown = Some(g);
                break;
            }
            Err(e) => last_err = Some(e),
        }
    }
    let Some((owner, trees)) = grown else {
        return Err(last_err.expect("at least one attempt"));
    };
    let full = LabelVolume::from_vec(shape, owner)?;
    let labels = if spec.fragmentation.enabled {
        fragment(&trees, shape, &spec.fragmentation, seed)?
    } else {
        full.clone()
    };

    let mut noise = seeding::stream(seed, STREAM_NOISE);
    let tissue = |c: u8| {
        let t = if c == 0 {
            spec.intensity.background
        } else {
            spec.intensity.classes[c as usize - 1]
        };
        Normal::new(t.mean, t.sigma).expect("validated sigma")
    };
    let dists: Vec<Normal<f64>> = (0..spec.classes() as u8).map(tissue).collect();
    let image: Vec<f32> = full.data().iter().map(|&c| dists[c as usize].sample(&mut noise) as f32).collect();
    let volume = Volume::from_vec(shape, spec.spacing_mm, image)?;

    let meta = build_meta(shape, &trees, &full);
    Ok((volume, labels, meta))
}

/// Grows every tree in class order; later trees avoid earlier ones.
fn grow_trees<R: Rng>(spec: &PhantomSpec, rng: &mut R) -> Result<(Vec<u8>, Vec<Vec<Segment>>)> {
    let shape = spec.shape;
    let mut owner = vec![0u8; voxel_count(shape)];
    let mut trees: Vec<Vec<Segment>> = Vec::with_capacity(spec.trees.len());
    for (i, tree) in spec.trees.iter().enumerate() {
        let class = (i + 1) as u8;
        let mut grower = Grower {
            shape,
            class,
            tree,
            owner: &mut owner,
            segments: Vec::new(),
            rng: &mut *rng,
        };
        let trunk_dir = unit(tree.direction);
        let mut placed = None;
        for _ in 0..ROOT_ATTEMPTS {
            let j = tree.root_jitter;
            let root = [0, 1, 2].map(|a| tree.root[a] + if j > 0.0 { grower.rng.random_range(-j..=j) } else { 0.0 });
            if let Some(end) = grower.try_place(0, root, trunk_dir) {
                placed = Some(end);
                break;
            }
        }
        let Some(end) = placed else {
            return Err(Error::Generation(format!(
                "trunk of class {class} does not fit in shape {shape:?}; use a larger shape or move its root"
            )));
        };
        grower.grow(end, trunk_dir, 1);
        trees.push(grower.segments);
    }
    Ok((owner, trees))
}

/// Labels with random pieces of every segment removed. A piece is the slab
/// of a segment's voxels whose projection onto the axis falls in one
/// `1/k` interval; voxels shared with a kept piece stay labelled.
fn fragment(trees: &[Vec<Segment>], shape: Shape, frag: &Fragmentation, seed: u64) -> Result<LabelVolume> {
    let mut rng = seeding::stream(seed, STREAM_FRAGMENTS);
    let mut out = vec![0u8; voxel_count(shape)];
    for (i, segs) in trees.iter().enumerate() {
        for s in segs {
            let ab = [s.b[0] - s.a[0], s.b[1] - s.a[1], s.b[2] - s.a[2]];
            let len = norm(ab);
            let k = (len / frag.piece_length).round().max(1.0) as usize;
            let keep: Vec<bool> = (0..k).map(|_| !rng.random_bool(frag.drop_rate)).collect();
            for &v in &s.voxels {
                let p = crate::volume::coords(shape, v);
                let ap = [0, 1, 2].map(|a| p[a] as f64 - s.a[a]);
                let t = ((ap[0] * ab[0] + ap[1] * ab[1] + ap[2] * ab[2]) / (len * len)).clamp(0.0, 1.0);
                if keep[((t * k as f64) as usize).min(k - 1)] {
                    out[v] = (i + 1) as u8;
                }
            }
        }
        // A class never vanishes entirely: fall back to its trunk.
        let class = (i + 1) as u8;
        if !out.contains(&class) {
            for &v in &segs[0].voxels {
                out[v] = class;
            }
        }
    }
    LabelVolume::from_vec(shape, out)
}

fn build_meta(shape: Shape, trees: &[Vec<Segment>], full: &LabelVolume) -> PhantomMeta {
    let mut centerlines = BTreeMap::new();
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for (i, segs) in trees.iter().enumerate() {
        let mut pts = Vec::new();
        for s in segs {
            for p in centerline(s.a, s.b) {
                if pts.last() != Some(&p) {
                    pts.push(p);
                }
            }
        }
        centerlines.insert((i + 1) as u8, pts);
        let deepest = segs.iter().map(|s| s.depth).max().unwrap_or(0);
        for s in segs.iter().filter(|s| s.depth == deepest) {
            for &v in &s.voxels {
                let p = crate::volume::coords(shape, v);
                for a in 0..3 {
                    lo[a] = lo[a].min(p[a]);
                    hi[a] = hi[a].max(p[a]);
                }
            }
        }
    }
    let kidney_box = BoundingBox {
        lo: [0, 1, 2].map(|a| lo[a].saturating_sub(KIDNEY_MARGIN)),
        hi: [0, 1, 2].map(|a| (hi[a] + KIDNEY_MARGIN + 1).min(shape[a])),
    };
    let plane = shape[0] * shape[1];
    let mut zs = full
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c != 0)
        .map(|(i, _)| i / plane);
    let first = zs.next().unwrap_or(0);
    let last = zs.next_back().unwrap_or(first);
    PhantomMeta {
        shape,
        centerlines,
        kidney_box,
        roi_z: (first.saturating_sub(ROI_MARGIN), (last + ROI_MARGIN).min(shape[2] - 1)),
    }
}

/// Number of 26-connected components of each foreground class.
pub fn island_counts(labels: &LabelVolume, classes: usize) -> Vec<usize> {
    (1..classes as u8).map(|c| label_components(&labels.class_mask(c)).1).collect()
}

/// A training patch cut from a phantom.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchRecord {
    pub image: Volume,
    pub labels: LabelVolume,
    pub source: String,
    pub origin: [usize; 3],
    /// Requested centre before clamping into the volume.
    pub center: [usize; 3],
    /// Class whose centerline the patch was centred on; 0 for background.
    pub kind: u8,
}

fn clamp_origin(center: [usize; 3], patch: usize, shape: Shape) -> [usize; 3] {
    [0, 1, 2].map(|a| center[a].saturating_sub(patch / 2).min(shape[a] - patch))
}

/// Cuts `counts[k]` patches of kind `k` (0 = background, c = centred on the
/// class-c centerline) from one phantom.
pub fn slice_patches(
    volume: &Volume,
    labels: &LabelVolume,
    meta: &PhantomMeta,
    patch_size: usize,
    counts: &[usize],
    seed: u64,
    source: &str,
) -> Result<Vec<PatchRecord>> {
    let shape = volume.shape();
    if labels.shape() != shape {
        return Err(Error::Shape(format!("labels {:?} vs image {shape:?}", labels.shape())));
    }
    if let Some(a) = (0..3).find(|&a| patch_size > shape[a]) {
        return Err(Error::Range {
            axis: ['x', 'y', 'z'][a],
            detail: format!("patch size {patch_size} exceeds volume extent {}", shape[a]),
        });
    }
    if patch_size == 0 {
        return Err(Error::Config("patch size must be positive".into()));
    }
    let mut rng = seeding::stream(seed, STREAM_SLICING);
    let mut out = Vec::new();
    let cut = |center: [usize; 3], kind: u8| -> Result<PatchRecord> {
        let origin = clamp_origin(center, patch_size, shape);
        let bbox = BoundingBox {
            lo: origin,
            hi: [0, 1, 2].map(|a| origin[a] + patch_size),
        };
        Ok(PatchRecord {
            image: volume.crop(&bbox)?,
            labels: labels.crop(&bbox)?,
            source: source.to_string(),
            origin,
            center,
            kind,
        })
    };
    for (kind, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            if kind == 0 {
                let mut record = None;
                for _ in 0..BACKGROUND_ATTEMPTS {
                    let center = [0, 1, 2].map(|a| rng.random_range(0..shape[a]));
                    let r = cut(center, 0)?;
                    let empty = r.labels.data().iter().all(|&c| c == 0);
                    record = Some(r);
                    if empty {
                        break;
                    }
                }
                out.push(record.expect("at least one attempt"));
            } else {
                let pts = meta
                    .centerlines
                    .get(&(kind as u8))
                    .filter(|p| !p.is_empty())
                    .ok_or_else(|| Error::Config(format!("no centerline points for class {kind}")))?;
                let center = pts[rng.random_range(0..pts.len())];
                out.push(cut(center, kind as u8)?);
            }
        }
    }
    Ok(out)
}

/// File paths of a written phantom.
#[derive(Clone, Debug)]
pub struct PhantomFiles {
    pub image: PathBuf,
    pub labels: PathBuf,
    pub meta: PathBuf,
}

impl PhantomFiles {
    pub fn new(dir: &Path, name: &str) -> Self {
        Self {
            image: dir.join(format!("{name}_image.kvol")),
            labels: dir.join(format!("{name}_labels.kvol")),
            meta: dir.join(format!("{name}.meta.json")),
        }
    }
}

pub fn write_meta(path: &Path, meta: &PhantomMeta) -> Result<()> {
    let json = serde_json::to_vec_pretty(meta)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_meta(path: &Path) -> Result<PhantomMeta> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let meta: PhantomMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    meta.validate()?;
    Ok(meta)
}

pub fn write_phantom(dir: &Path, name: &str, volume: &Volume, labels: &LabelVolume, meta: &PhantomMeta) -> Result<PhantomFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = PhantomFiles::new(dir, name);
    kvol::write_volume(&files.image, volume)?;
    kvol::write_labels(&files.labels, labels, volume.spacing())?;
    write_meta(&files.meta, meta)?;
    Ok(files)
}

pub fn read_phantom(dir: &Path, name: &str) -> Result<(Volume, LabelVolume, PhantomMeta)> {
    let files = PhantomFiles::new(dir, name);
    let volume = kvol::read_volume(&files.image)?;
    let (labels, _) = kvol::read_labels(&files.labels)?;
    let meta = read_meta(&files.meta)?;
    if labels.shape() != volume.shape() || meta.shape != volume.shape() {
        return Err(Error::Shape(format!("phantom {name}: image, labels and meta disagree on shape")));
    }
    Ok((volume, labels, meta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchEntry {
    pub image: String,
    pub labels: String,
    pub source: String,
    pub origin: [usize; 3],
    pub center: [usize; 3],
    pub kind: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchIndex {
    pub patch_size: usize,
    pub records: Vec<PatchEntry>,
}

pub const PATCH_INDEX: &str = "patches.json";

/// Writes one image/label kvol pair per record plus `patches.json`.
pub fn write_patch_set(dir: &Path, patch_size: usize, records: &[PatchRecord]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let image = format!("patch{i:05}_image.kvol");
        let labels = format!("patch{i:05}_labels.kvol");
        kvol::write_volume(&dir.join(&image), &r.image)?;
        kvol::write_labels(&dir.join(&labels), &r.labels, r.image.spacing())?;
        entries.push(PatchEntry {
            image,
            labels,
            source: r.source.clone(),
            origin: r.origin,
            center: r.center,
            kind: r.kind,
        });
    }
    let index = PatchIndex {
        patch_size,
        records: entries,
    };
    let path = dir.join(PATCH_INDEX);
    fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_patch_set(index_path: &Path) -> Result<(usize, Vec<PatchRecord>)> {
    let text = fs::read_to_string(index_path).map_err(|e| Error::io(index_path, e))?;
    let index: PatchIndex = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: index_path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let dir = index_path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::with_capacity(index.records.len());
    for e in index.records {
        let image = kvol::read_volume(&dir.join(&e.image))?;
        let (labels, _) = kvol::read_labels(&dir.join(&e.labels))?;
        let want = [index.patch_size; 3];
        if image.shape() != want || labels.shape() != want {
            return Err(Error::Shape(format!("patch {} is not {want:?}", e.image)));
        }
        records.push(PatchRecord {
            image,
            labels,
            source: e.source,
            origin: e.origin,
            center: e.center,
            kind: e.kind,
        });
    }
    Ok((index.patch_size, records))
}

//! Tiled whole-volume inference.
//!
//! The volume is split into disjoint core blocks. Each block is read with a
//! halo on every side (mirror-padded past the volume border), passed through
//! the network, and only its core is kept.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{receptive_halo, NetworkConfig, NetworkParams, Tensor};
use crate::volume::{argmax_labels, voxel_count, BoundingBox, LabelVolume, ProbMap, Shape, Volume};

/// Core edge that [`default_tile`] aims for.
pub const DEFAULT_CORE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tile {
    /// Corner of the network input, possibly outside the volume.
    pub input_origin: [isize; 3],
    pub core: BoundingBox,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TilePlan {
    pub volume_shape: Shape,
    /// Input edge of every tile.
    pub patch_size: usize,
    /// Requested halo. The actual margins are `lo_halo` below the core and
    /// `patch_size - lo_halo - core_size` above it, both at least `halo`.
    pub halo: usize,
    pub lo_halo: usize,
    pub core_size: usize,
    pub tiles: Vec<Tile>,
}

impl TilePlan {
    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }

    /// Input box of a tile as (origin, extent).
    pub fn input_box(&self, tile: &Tile) -> ([isize; 3], Shape) {
        (tile.input_origin, [self.patch_size; 3])
    }
}

/// Tile plan with cores of `patch_size - 2 * halo`.
pub fn plan_tiles(volume_shape: Shape, patch_size: usize, halo: usize) -> Result<TilePlan> {
    plan_tiles_aligned(volume_shape, patch_size, halo, 1, [0; 3])
}

/// Tile plan whose core corners and lower margin are multiples of `align`.
///
/// Strided layers make the network equivariant only to shifts by multiples
/// of its alignment, so aligned tiles are what makes stitching seamless.
/// `offset` shifts the tile grid: the first core on each axis covers
/// `[0, offset)` when the offset is non-zero.
pub fn plan_tiles_aligned(
    volume_shape: Shape,
    patch_size: usize,
    halo: usize,
    align: usize,
    offset: [usize; 3],
) -> Result<TilePlan> {
    if align == 0 {
        return Err(Error::Config("alignment must be positive".into()));
    }
    if patch_size <= 2 * halo {
        return Err(Error::Config(format!(
            "tile size {patch_size} must exceed twice the halo {halo}"
        )));
    }
    if !patch_size.is_multiple_of(align) {
        return Err(Error::Config(format!(
            "tile size {patch_size} is not a multiple of the alignment {align}"
        )));
    }
    if volume_shape.contains(&0) {
        return Err(Error::Shape(format!("empty volume {volume_shape:?}")));
    }
    let lo_halo = halo.div_ceil(align) * align;
    let room = patch_size.saturating_sub(lo_halo + halo);
    let core_size = room / align * align;
    if core_size == 0 {
        return Err(Error::Config(format!(
            "tile size {patch_size} leaves no aligned core for halo {halo} (alignment {align})"
        )));
    }
    if let Some(axis) = (0..3).find(|&a| !offset[a].is_multiple_of(align) || offset[a] > core_size) {
        return Err(Error::Config(format!(
            "grid offset {} on axis {axis} must be a multiple of {align} no larger than the core {core_size}",
            offset[axis]
        )));
    }
    let spans: Vec<Vec<(usize, usize)>> = (0..3)
        .map(|a| {
            let n = volume_shape[a];
            let mut cuts = vec![0];
            let mut at = if offset[a] > 0 { offset[a] } else { core_size };
            while at < n {
                cuts.push(at);
                at += core_size;
            }
            cuts.push(n);
            cuts.windows(2).map(|w| (w[0], w[1])).collect()
        })
        .collect();
    let mut tiles = Vec::new();
    for &(z0, z1) in &spans[2] {
        for &(y0, y1) in &spans[1] {
            for &(x0, x1) in &spans[0] {
                let lo = [x0, y0, z0];
                tiles.push(Tile {
                    input_origin: lo.map(|v| v as isize - lo_halo as isize),
                    core: BoundingBox::new(lo, [x1, y1, z1])?,
                });
            }
        }
    }
    Ok(TilePlan {
        volume_shape,
        patch_size,
        halo,
        lo_halo,
        core_size,
        tiles,
    })
}

/// Reflects an out-of-range index back into `0..n` without repeating the edge.
pub fn mirror_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Reads a box of `extent` at `origin`, mirror-padding outside the volume.
pub fn mirror_read(volume: &Volume, origin: [isize; 3], extent: Shape) -> Vec<f32> {
    let shape = volume.shape();
    let ix: Vec<usize> = (0..extent[0]).map(|i| mirror_index(origin[0] + i as isize, shape[0])).collect();
    let mut out = Vec::with_capacity(voxel_count(extent));
    for k in 0..extent[2] {
        let z = mirror_index(origin[2] + k as isize, shape[2]);
        for j in 0..extent[1] {
            let y = mirror_index(origin[1] + j as isize, shape[1]);
            out.extend(ix.iter().map(|&x| volume.get(x, y, z)));
        }
    }
    out
}

/// Smallest aligned tile giving a core of about [`DEFAULT_CORE`] voxels.
pub fn default_tile(config: &NetworkConfig, halo: usize) -> usize {
    let a = config.alignment();
    let lo = halo.div_ceil(a) * a;
    (lo + halo + DEFAULT_CORE.max(a)).div_ceil(a) * a
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[derive(Default)]
pub struct StitchOptions {
    /// Tile input edge; `None` picks [`default_tile`].
    pub tile: Option<usize>,
    /// Halo; `None` uses the receptive-field half-width.
    pub halo: Option<usize>,
    pub offset: [usize; 3],
}


/// Plan used by [`segment_volume`] for these options.
pub fn plan_for(config: &NetworkConfig, shape: Shape, options: &StitchOptions) -> Result<TilePlan> {
    let halo = options.halo.unwrap_or_else(|| receptive_halo(config));
    let tile = options.tile.unwrap_or_else(|| default_tile(config, halo));
    config.check_extent(tile)?;
    plan_tiles_aligned(shape, tile, halo, config.alignment(), options.offset)
}

/// Segments a whole volume tile by tile.
///
/// Tiles run on the current rayon pool; since cores are disjoint the result
/// does not depend on the number of threads.
pub fn segment_volume(
    params: &NetworkParams<f32>,
    config: &NetworkConfig,
    volume: &Volume,
    options: &StitchOptions,
) -> Result<(ProbMap, LabelVolume)> {
    if params.config() != config {
        return Err(Error::Config(format!(
            "checkpoint was trained for {:?}, inference asked for {:?}",
            params.config(),
            config
        )));
    }
    let plan = plan_for(config, volume.shape(), options)?;
    let classes = config.classes;
    let extent = [plan.patch_size; 3];
    let cores: Vec<Vec<f32>> = plan
        .tiles
        .par_iter()
        .map(|tile| -> Result<Vec<f32>> {
            let input = Tensor::from_vec(1, extent, mirror_read(volume, tile.input_origin, extent));
            let probs = params.forward_tensor(input)?.into_final();
            let lo: Vec<usize> = (0..3)
                .map(|a| (tile.core.lo[a] as isize - tile.input_origin[a]) as usize)
                .collect();
            let cs = tile.core.shape();
            let mut out = Vec::with_capacity(classes * voxel_count(cs));
            for c in 0..classes {
                let ch = probs.channel(c);
                for z in 0..cs[2] {
                    for y in 0..cs[1] {
                        let row = ((z + lo[2]) * extent[1] + y + lo[1]) * extent[0] + lo[0];
                        out.extend_from_slice(&ch[row..row + cs[0]]);
                    }
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;

    let shape = volume.shape();
    let n = voxel_count(shape);
    let mut data = vec![0.0f32; classes * n];
    for (tile, core) in plan.tiles.iter().zip(&cores) {
        let cs = tile.core.shape();
        let per = voxel_count(cs);
        for c in 0..classes {
            let src = &core[c * per..(c + 1) * per];
            for z in 0..cs[2] {
                for y in 0..cs[1] {
                    let lo = tile.core.lo;
                    let dst = c * n + ((z + lo[2]) * shape[1] + y + lo[1]) * shape[0] + lo[0];
                    let s = (z * cs[1] + y) * cs[0];
                    data[dst..dst + cs[0]].copy_from_slice(&src[s..s + cs[0]]);
                }
            }
        }
    }
    let probs = ProbMap::new(shape, classes, data)?;
    let labels = argmax_labels(&probs);
    Ok((probs, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn covered(plan: &TilePlan) -> Vec<u32> {
        let s = plan.volume_shape;
        let mut hits = vec![0u32; voxel_count(s)];
        for t in &plan.tiles {
            for z in t.core.lo[2]..t.core.hi[2] {
                for y in t.core.lo[1]..t.core.hi[1] {
                    for x in t.core.lo[0]..t.core.hi[0] {
                        hits[(z * s[1] + y) * s[0] + x] += 1;
                    }
                }
            }
        }
        hits
    }

    #[test]
    fn sixty_four_cube_gives_sixty_four_tiles() {
        let plan = plan_tiles([64; 3], 32, 8).unwrap();
        assert_eq!(plan.core_size, 16);
        assert_eq!(plan.len(), 64);
        assert!(covered(&plan).iter().all(|&h| h == 1));
    }

    #[test]
    fn small_volume_is_one_tile() {
        let plan = plan_tiles([16; 3], 32, 8).unwrap();
        assert_eq!(plan.len(), 1);
        assert_eq!(plan.tiles[0].input_origin, [-8; 3]);
    }

    #[test]
    fn halo_too_large_is_rejected() {
        assert!(matches!(plan_tiles([16; 3], 16, 8), Err(Error::Config(_))));
    }

    #[test]
    fn aligned_plan_partitions_ragged_volume() {
        let plan = plan_tiles_aligned([37, 20, 9], 32, 5, 4, [4, 0, 8]).unwrap();
        assert_eq!(plan.lo_halo, 8);
        assert_eq!(plan.core_size, 16);
        assert!(covered(&plan).iter().all(|&h| h == 1));
        for t in &plan.tiles {
            assert!(t.core.lo.iter().all(|v| v % 4 == 0));
            assert!(t.input_origin.iter().all(|v| v.rem_euclid(4) == 0));
        }
    }

    #[test]
    fn mirror_index_reflects() {
        let got: Vec<usize> = (-4..8).map(|i| mirror_index(i, 4)).collect();
        assert_eq!(got, vec![2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(mirror_index(-5, 1), 0);
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let cfg = NetworkConfig {
            levels: 1,
            base_channels: 2,
            kernel_size: 3,
            classes: 2,
            patch_size: 8,
        };
        let params = NetworkParams::<f32>::init(&cfg, 1).unwrap();
        let other = NetworkConfig { classes: 3, ..cfg.clone() };
        let vol = Volume::from_vec([4; 3], [1.0; 3], vec![0.0; 64]).unwrap();
        let err = segment_volume(&params, &other, &vol, &StitchOptions::default()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}

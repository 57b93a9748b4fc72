//! Binary dilation with a Euclidean ball measured in voxel units.

use crate::volume::{Grid, Mask};

/// Integer offsets `(dx, dy, dz)` with `dx² + dy² + dz² ≤ radius²`.
pub fn ball_offsets(radius: usize) -> Vec<[isize; 3]> {
    let r = radius as isize;
    let r2 = r * r;
    let mut out = Vec::new();
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy + dz * dz <= r2 {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

/// Sets every voxel within Euclidean distance `radius` of a set voxel.
///
/// Only voxels on the mask boundary are stamped: a ball centred on an interior
/// voxel is covered by the balls of its six face neighbours.
pub fn dilate(mask: &Mask, radius: usize) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let shape = mask.shape();
    let offsets = ball_offsets(radius);
    let mut out = mask.clone();
    let dims = [shape[0] as isize, shape[1] as isize, shape[2] as isize];
    let is_set = |x: isize, y: isize, z: isize| {
        x >= 0
            && y >= 0
            && z >= 0
            && x < dims[0]
            && y < dims[1]
            && z < dims[2]
            && mask.get(x as usize, y as usize, z as usize)
    };
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if !mask.get(x as usize, y as usize, z as usize) {
                    continue;
                }
                let interior = is_set(x - 1, y, z)
                    && is_set(x + 1, y, z)
                    && is_set(x, y - 1, z)
                    && is_set(x, y + 1, z)
                    && is_set(x, y, z - 1)
                    && is_set(x, y, z + 1);
                if interior {
                    continue;
                }
                for o in &offsets {
                    let (px, py, pz) = (x + o[0], y + o[1], z + o[2]);
                    if px >= 0 && py >= 0 && pz >= 0 && px < dims[0] && py < dims[1] && pz < dims[2] {
                        out.set(px as usize, py as usize, pz as usize, true);
                    }
                }
            }
        }
    }
    out
}

/// Voxels set in `a` but not in `b`.
pub fn difference(a: &Mask, b: &Mask) -> Mask {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x && !y).collect();
    Grid::from_vec(a.shape(), data).expect("equal shapes")
}

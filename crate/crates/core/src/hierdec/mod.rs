//! Coarse-to-fine sparse volume decoding.
//!
//! A dense grid is decoded at a small base resolution. At every finer level
//! only voxels near the surface are queried: those whose 26-neighborhood
//! changes occupancy, plus those whose truncated distance is below `eta`,
//! dilated and then subdivided. Unqueried voxels inherit the value of their
//! finest stored ancestor.

mod decode;
mod volume;
mod voxelset;

pub use decode::{
    decode_with_engine, dense_decode, dense_decode_in, hierarchical_decode, DecodeConfig, DecodeReport,
    FinalExpand, FullEngine, HierarchicalDecode, LevelPlan, LevelQuery, QueryEngine, StageTiming,
};
pub use volume::{assemble, lookup, voxel_of, DenseVolume, LevelStorage, LevelVolume};
pub use voxelset::{dilate, expand, find_intersect, find_near, linear, parent_index, unlinear, SparseVoxelSet};

use crate::geom::{Bbox, Vec3};
use crate::{Error, Result};

/// Levels visited by the decoder, coarse to fine, last = target.
pub type ResolutionSchedule = Vec<usize>;

/// Doubles from `base` while the next doubling stays below `target`, then
/// ends at `target`.
pub fn get_resolutions(target: usize, base: usize) -> Result<ResolutionSchedule> {
    if base < 8 || base > target {
        return Err(Error::Config(format!(
            "need 8 <= base <= target, got base {base}, target {target}"
        )));
    }
    let mut levels = vec![base];
    let mut cur = base;
    while 2 * cur < target {
        cur *= 2;
        levels.push(cur);
    }
    if cur != target {
        levels.push(target);
    }
    Ok(levels)
}

/// Voxel centers of a `res^3` grid, x-fastest.
pub fn gen_grid_points(res: usize, bbox: &Bbox) -> Vec<Vec3> {
    (0..res * res * res)
        .map(|i| bbox.voxel_center(res, unlinear(res, i)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules() {
        assert_eq!(get_resolutions(384, 96).unwrap(), vec![96, 192, 384]);
        assert_eq!(get_resolutions(256, 64).unwrap(), vec![64, 128, 256]);
        assert_eq!(get_resolutions(100, 100).unwrap(), vec![100]);
        assert_eq!(get_resolutions(200, 64).unwrap(), vec![64, 128, 200]);
        assert_eq!(get_resolutions(128, 64).unwrap(), vec![64, 128]);
        assert!(get_resolutions(64, 128).is_err());
        assert!(get_resolutions(64, 4).is_err());
    }

    #[test]
    fn grid_points() {
        let b = Bbox::unit();
        assert_eq!(gen_grid_points(1, &b), vec![[0.0; 3]]);
        let two = gen_grid_points(2, &b);
        assert_eq!(two.len(), 8);
        assert!(two.iter().all(|p| p.iter().all(|c| c.abs() == 0.5)));
        let four = gen_grid_points(4, &b);
        assert_eq!(four[0], [-0.75, -0.75, -0.75]);
        assert_eq!(four[1], [-0.25, -0.75, -0.75]);
    }
}

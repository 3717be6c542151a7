//! Voxel selections on a cubic grid and the set operations of the decoder.

use super::volume::DenseVolume;
use crate::{Error, Result};

/// A set of voxels of a `res^3` grid, stored as a byte mask in x-fastest
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseVoxelSet {
    res: usize,
    mask: Vec<u8>,
}

impl SparseVoxelSet {
    pub fn empty(res: usize) -> Self {
        Self {
            res,
            mask: vec![0; res * res * res],
        }
    }

    pub fn full(res: usize) -> Self {
        Self {
            res,
            mask: vec![1; res * res * res],
        }
    }

    pub fn from_indices(res: usize, ijks: impl IntoIterator<Item = [usize; 3]>) -> Result<Self> {
        let mut s = Self::empty(res);
        for ijk in ijks {
            if ijk.iter().any(|&v| v >= res) {
                return Err(Error::Config(format!("voxel {ijk:?} out of range for resolution {res}")));
            }
            s.insert(ijk);
        }
        Ok(s)
    }

    pub(crate) fn from_mask(res: usize, mask: Vec<u8>) -> Self {
        debug_assert_eq!(mask.len(), res * res * res);
        Self { res, mask }
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn insert(&mut self, ijk: [usize; 3]) {
        let i = linear(self.res, ijk);
        self.mask[i] = 1;
    }

    pub fn contains(&self, ijk: [usize; 3]) -> bool {
        ijk.iter().all(|&v| v < self.res) && self.mask[linear(self.res, ijk)] != 0
    }

    pub fn contains_linear(&self, idx: usize) -> bool {
        self.mask[idx] != 0
    }

    pub fn len(&self) -> usize {
        self.mask.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.iter().all(|&b| b == 0)
    }

    /// Linear indices of member voxels, ascending.
    pub fn linear_indices(&self) -> Vec<u32> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(|(i, _)| i as u32)
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        let res = self.res;
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &b)| b != 0)
            .map(move |(i, _)| unlinear(res, i))
    }

    pub fn union_with(&mut self, other: &SparseVoxelSet) {
        assert_eq!(self.res, other.res);
        for (a, b) in self.mask.iter_mut().zip(&other.mask) {
            *a |= *b;
        }
    }

    pub fn is_subset_of(&self, other: &SparseVoxelSet) -> bool {
        self.res == other.res && self.mask.iter().zip(&other.mask).all(|(&a, &b)| a <= b)
    }

    pub fn difference(&self, other: &SparseVoxelSet) -> SparseVoxelSet {
        assert_eq!(self.res, other.res);
        let mask = self
            .mask
            .iter()
            .zip(&other.mask)
            .map(|(&a, &b)| a & (1 - b))
            .collect();
        Self::from_mask(self.res, mask)
    }
}

#[inline]
pub fn linear(res: usize, ijk: [usize; 3]) -> usize {
    ijk[0] + res * (ijk[1] + res * ijk[2])
}

#[inline]
pub fn unlinear(res: usize, i: usize) -> [usize; 3] {
    [i % res, (i / res) % res, i / (res * res)]
}

/// Running max (or min) over a clipped window of half-width `r` along each
/// axis in turn.
fn box_filter(mask: &[u8], res: usize, r: usize, take_max: bool) -> Vec<u8> {
    let mut cur = mask.to_vec();
    let mut line = vec![0u8; res];
    let strides = [1, res, res * res];
    for &stride in &strides {
        let mut next = cur.clone();
        for start in 0..res * res * res {
            // visit each line once, from its first element
            if (start / stride) % res != 0 {
                continue;
            }
            for (t, v) in line.iter_mut().enumerate() {
                *v = cur[start + t * stride];
            }
            for t in 0..res {
                let lo = t.saturating_sub(r);
                let hi = (t + r).min(res - 1);
                let w = &line[lo..=hi];
                let v = if take_max {
                    *w.iter().max().unwrap()
                } else {
                    *w.iter().min().unwrap()
                };
                next[start + t * stride] = v;
            }
        }
        cur = next;
    }
    cur
}

/// Voxels with an in-range 26-neighbor of opposite occupancy, where a voxel
/// is occupied when its value is `<= gamma`.
pub fn find_intersect(vol: &DenseVolume, gamma: f32) -> SparseVoxelSet {
    let res = vol.cubic_res();
    let occ: Vec<u8> = vol.values().iter().map(|&v| (v <= gamma) as u8).collect();
    let hi = box_filter(&occ, res, 1, true);
    let lo = box_filter(&occ, res, 1, false);
    let mask = hi.iter().zip(&lo).map(|(&a, &b)| (a != b) as u8).collect();
    SparseVoxelSet::from_mask(res, mask)
}

/// Voxels whose normalized tSDF magnitude is below `eta`.
pub fn find_near(vol: &DenseVolume, eta: f32) -> SparseVoxelSet {
    let res = vol.cubic_res();
    let mask = vol.values().iter().map(|&v| (v.abs() < eta) as u8).collect();
    SparseVoxelSet::from_mask(res, mask)
}

/// Union of the `(2r+1)^3` neighborhoods of every member, clipped to the grid.
pub fn dilate(vs: &SparseVoxelSet, radius: usize) -> SparseVoxelSet {
    if radius == 0 {
        return vs.clone();
    }
    SparseVoxelSet::from_mask(vs.res, box_filter(&vs.mask, vs.res, radius, true))
}

/// Index of the coarse voxel containing the center of fine voxel `f`.
#[inline]
pub fn parent_index(f: usize, coarse: usize, fine: usize) -> usize {
    ((2 * f + 1) * coarse) / (2 * fine)
}

/// Per-axis parent lookup table from `fine` to `coarse`.
pub(crate) fn parent_table(coarse: usize, fine: usize) -> Vec<usize> {
    (0..fine).map(|f| parent_index(f, coarse, fine)).collect()
}

/// Refines a selection: every fine voxel whose center lies in a selected
/// coarse voxel. For `to_res = 2 * from_res` these are the 8 children
/// `(2i+a, 2j+b, 2k+c)`.
pub fn expand(vs: &SparseVoxelSet, from_res: usize, to_res: usize) -> Result<SparseVoxelSet> {
    if vs.res != from_res || from_res == 0 || to_res <= from_res {
        return Err(Error::ResolutionPair {
            from: from_res,
            to: to_res,
        });
    }
    let p = parent_table(from_res, to_res);
    let mut mask = vec![0u8; to_res * to_res * to_res];
    let mut i = 0;
    for z in 0..to_res {
        for y in 0..to_res {
            let row = from_res * (p[y] + from_res * p[z]);
            for &px in &p {
                mask[i] = vs.mask[row + px];
                i += 1;
            }
        }
    }
    Ok(SparseVoxelSet::from_mask(to_res, mask))
}

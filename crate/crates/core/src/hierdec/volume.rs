//! Dense volumes, per-level storage and the assembly of a hierarchy into a
//! target-resolution grid.

use std::io::{Read, Write};

use super::voxelset::{linear, parent_table, unlinear};
use crate::geom::Bbox;
use crate::{Error, Result};

const MAGIC: &[u8; 5] = b"FVDM1";

/// Normalized tSDF samples at voxel centers, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVolume {
    dims: [usize; 3],
    bbox: Bbox,
    values: Vec<f32>,
}

impl DenseVolume {
    pub fn new(dims: [usize; 3], bbox: Bbox, values: Vec<f32>) -> Result<Self> {
        if values.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::ShapeMismatch(format!(
                "{} values for dims {dims:?}",
                values.len()
            )));
        }
        Ok(Self { dims, bbox, values })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Edge resolution of a cubic volume.
    ///
    /// # Panics
    /// If the volume is not cubic.
    pub fn cubic_res(&self) -> usize {
        assert!(
            self.dims[0] == self.dims[1] && self.dims[1] == self.dims[2],
            "expected a cubic volume, got {:?}",
            self.dims
        );
        self.dims[0]
    }

    pub fn bbox(&self) -> &Bbox {
        &self.bbox
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    pub fn get(&self, ijk: [usize; 3]) -> f32 {
        self.values[ijk[0] + self.dims[0] * (ijk[1] + self.dims[1] * ijk[2])]
    }

    /// Bitwise equality of samples, dims and bbox.
    pub fn bitwise_eq(&self, other: &DenseVolume) -> bool {
        self.dims == other.dims
            && self.bbox == other.bbox
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn write_fvdm1<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for d in self.dims {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in self.bbox.min.iter().chain(self.bbox.max.iter()) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_fvdm1<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("missing FVDM1 magic".into()));
        }
        let mut word = [0u8; 4];
        let mut dims = [0usize; 3];
        for d in &mut dims {
            r.read_exact(&mut word)?;
            *d = u32::from_le_bytes(word) as usize;
        }
        let mut corners = [0f64; 6];
        for c in &mut corners {
            r.read_exact(&mut word)?;
            *c = f32::from_le_bytes(word) as f64;
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() != n * 4 {
            return Err(Error::Format(format!(
                "expected {} value bytes, found {}",
                n * 4,
                raw.len()
            )));
        }
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let bbox = Bbox {
            min: [corners[0], corners[1], corners[2]],
            max: [corners[3], corners[4], corners[5]],
        };
        Self::new(dims, bbox, values)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LevelStorage {
    Dense(Vec<f32>),
    /// `(linear index, value)` pairs sorted by index; unstored voxels defer
    /// to the previous level.
    Sparse(Vec<(u32, f32)>),
}

/// One level of a decoding hierarchy. Level `i > 0` refers to level `i - 1`
/// as its parent.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelVolume {
    pub res: usize,
    pub storage: LevelStorage,
}

impl LevelVolume {
    pub fn dense(res: usize, values: Vec<f32>) -> Self {
        debug_assert_eq!(values.len(), res * res * res);
        Self {
            res,
            storage: LevelStorage::Dense(values),
        }
    }

    pub fn sparse(res: usize, mut entries: Vec<(u32, f32)>) -> Self {
        entries.sort_unstable_by_key(|e| e.0);
        Self {
            res,
            storage: LevelStorage::Sparse(entries),
        }
    }

    pub fn stored(&self, idx: usize) -> Option<f32> {
        match &self.storage {
            LevelStorage::Dense(v) => v.get(idx).copied(),
            LevelStorage::Sparse(e) => e
                .binary_search_by_key(&(idx as u32), |p| p.0)
                .ok()
                .map(|i| e[i].1),
        }
    }

    pub fn stored_count(&self) -> usize {
        match &self.storage {
            LevelStorage::Dense(v) => v.len(),
            LevelStorage::Sparse(e) => e.len(),
        }
    }
}

/// Value of voxel `ijk` at `level`, resolved through the ancestor chain.
/// Returns the value and the number of levels visited.
pub fn lookup(levels: &[LevelVolume], level: usize, ijk: [usize; 3]) -> Option<(f32, usize)> {
    let mut ijk = ijk;
    let mut steps = 0;
    for l in (0..=level).rev() {
        steps += 1;
        let res = levels[l].res;
        if let Some(v) = levels[l].stored(linear(res, ijk)) {
            return Some((v, steps));
        }
        if l > 0 {
            let coarse = levels[l - 1].res;
            for c in &mut ijk {
                *c = super::voxelset::parent_index(*c, coarse, res);
            }
        }
    }
    None
}

/// Nearest-neighbor upsampling of a cubic grid by the parent rule.
pub(crate) fn upsample(values: &[f32], from: usize, to: usize) -> Vec<f32> {
    let p = parent_table(from, to);
    let mut out = Vec::with_capacity(to * to * to);
    for z in 0..to {
        for y in 0..to {
            let row = from * (p[y] + from * p[z]);
            out.extend(p.iter().map(|&px| values[row + px]));
        }
    }
    out
}

/// Overlays a level on the (already upsampled) grid of its resolution.
pub(crate) fn overlay(grid: &mut [f32], level: &LevelVolume) {
    match &level.storage {
        LevelStorage::Dense(v) => grid.copy_from_slice(v),
        LevelStorage::Sparse(e) => {
            for &(i, v) in e {
                grid[i as usize] = v;
            }
        }
    }
}

/// Builds the target-resolution grid: stored fine values win, every other
/// voxel takes the value of its finest stored ancestor.
pub fn assemble(levels: &[LevelVolume], bbox: Bbox) -> Result<DenseVolume> {
    let base = levels.first().ok_or(Error::MissingBaseLevel)?;
    let LevelStorage::Dense(values) = &base.storage else {
        return Err(Error::MissingBaseLevel);
    };
    let mut grid = values.clone();
    let mut res = base.res;
    for level in &levels[1..] {
        if level.res <= res {
            return Err(Error::ResolutionPair {
                from: res,
                to: level.res,
            });
        }
        grid = upsample(&grid, res, level.res);
        overlay(&mut grid, level);
        res = level.res;
    }
    DenseVolume::new([res; 3], bbox, grid)
}

/// Linear indices of a cubic grid as voxel triples; convenience for tests
/// and diagnostics.
pub fn voxel_of(res: usize, idx: usize) -> [usize; 3] {
    unlinear(res, idx)
}

use serde::{Deserialize, Serialize};

use super::key::ROOT_LEN;
use crate::error::{Error, Result};

/// Coarse mesh made of unit trees on a regular grid, some of which may be
/// switched off to cut holes (an L-shape, for instance).
///
/// Trees are numbered lexicographically with x fastest. Inactive trees keep
/// their number but never carry leaves.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Brick {
    dim: usize,
    dims: [u32; 3],
    active: Vec<bool>,
}

impl Brick {
    pub fn new(dim: usize, dims: &[u32]) -> Result<Self> {
        let n = Self::check_dims(dim, dims)?;
        Self::with_active(dim, dims, vec![true; n])
    }

    pub fn with_active(dim: usize, dims: &[u32], active: Vec<bool>) -> Result<Self> {
        let n = Self::check_dims(dim, dims)?;
        if active.len() != n {
            return Err(Error::InvalidBrick(format!("{} activity flags for {} trees", active.len(), n)));
        }
        if !active.iter().any(|&a| a) {
            return Err(Error::InvalidBrick("no active tree".into()));
        }
        let mut d = [1u32; 3];
        d[..dim].copy_from_slice(&dims[..dim]);
        Ok(Brick { dim, dims: d, active })
    }

    /// Three trees of a 2×2(×1) block with the upper right tree removed.
    pub fn l_shape(dim: usize) -> Result<Self> {
        let dims = [2, 2, 1];
        let mut active = vec![true; 4];
        active[3] = false;
        Self::with_active(dim, &dims[..dim], active)
    }

    fn check_dims(dim: usize, dims: &[u32]) -> Result<usize> {
        if !(2..=3).contains(&dim) {
            return Err(Error::UnsupportedDimension(dim));
        }
        if dims.len() != dim || dims.iter().any(|&n| n == 0 || n > 1 << 16) {
            return Err(Error::InvalidBrick(format!("tree counts {dims:?} for d={dim}")));
        }
        Ok(dims.iter().map(|&n| n as usize).product())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dims(&self) -> [u32; 3] {
        self.dims
    }

    pub fn num_trees(&self) -> usize {
        self.active.len()
    }

    pub fn is_active(&self, tree: u32) -> bool {
        self.active.get(tree as usize).copied().unwrap_or(false)
    }

    pub fn active_trees(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.active.len() as u32).filter(|&t| self.active[t as usize])
    }

    pub fn tree_coords(&self, tree: u32) -> [u32; 3] {
        let [nx, ny, _] = self.dims;
        [tree % nx, tree / nx % ny, tree / (nx * ny)]
    }

    /// Tree at grid position `c`, whether active or not.
    pub fn tree_at(&self, c: [u32; 3]) -> Option<u32> {
        if (0..3).any(|a| c[a] >= self.dims[a]) {
            return None;
        }
        Some(c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2]))
    }

    /// Active tree across the given axis, or `None` at the domain boundary.
    pub fn neighbor(&self, tree: u32, axis: usize, upward: bool) -> Option<u32> {
        let mut c = self.tree_coords(tree);
        if upward {
            c[axis] += 1;
        } else {
            c[axis] = c[axis].checked_sub(1)?;
        }
        self.tree_at(c).filter(|&t| self.is_active(t))
    }

    /// Lower corner of a tree in the global integer frame.
    pub fn origin(&self, tree: u32) -> [u64; 3] {
        self.tree_coords(tree).map(|c| u64::from(c) * u64::from(ROOT_LEN))
    }

    /// Active tree holding the half-open unit cell starting at `point`, with the
    /// point converted to tree-local anchor coordinates.
    pub fn locate(&self, point: [u64; 3]) -> Option<(u32, [u32; 3])> {
        let root = u64::from(ROOT_LEN);
        let mut c = [0u32; 3];
        let mut anchor = [0u32; 3];
        for a in 0..3 {
            let t = point[a] / root;
            if t >= u64::from(self.dims[a]) {
                return None;
            }
            c[a] = t as u32;
            anchor[a] = (point[a] % root) as u32;
        }
        let tree = self.tree_at(c)?;
        self.is_active(tree).then_some((tree, anchor))
    }

    /// Extent of the whole grid in the global frame.
    pub fn extent(&self) -> [u64; 3] {
        self.dims.map(|n| u64::from(n) * u64::from(ROOT_LEN))
    }

    /// Whether a point of the closed domain lies on its boundary: some
    /// finest cell touching it falls outside the active trees.
    pub fn on_boundary(&self, point: [u64; 3]) -> bool {
        (0..1usize << self.dim).any(|offs| {
            let mut p = point;
            for (a, c) in p.iter_mut().enumerate().take(self.dim) {
                if offs >> a & 1 == 1 {
                    match c.checked_sub(1) {
                        Some(x) => *c = x,
                        None => return true,
                    }
                }
            }
            self.locate(p).is_none()
        })
    }

    pub(crate) fn active_flags(&self) -> &[bool] {
        &self.active
    }
}

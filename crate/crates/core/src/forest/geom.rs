//! Closed boxes in the global integer frame. Faces, contacts and VEF keys are
//! all boxes, so gluing reduces to equality.

use serde::{Deserialize, Serialize};

use super::brick::Brick;
use super::key::MortonKey;
use crate::polytope::{NFace, Side};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClosedBox {
    pub lo: [u64; 3],
    pub hi: [u64; 3],
}

impl ClosedBox {
    pub fn of_cell(brick: &Brick, key: &MortonKey) -> ClosedBox {
        let origin = brick.origin(key.tree);
        let len = u64::from(key.len());
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..brick.dim() {
            lo[a] = origin[a] + u64::from(key.anchor[a]);
            hi[a] = lo[a] + len;
        }
        ClosedBox { lo, hi }
    }

    pub fn point(p: [u64; 3]) -> ClosedBox {
        ClosedBox { lo: p, hi: p }
    }

    /// The closed n-face `f` of this (cell) box.
    pub fn face(&self, dim: usize, f: NFace) -> ClosedBox {
        let mut b = *self;
        for a in 0..dim {
            match f.side(a) {
                Side::Low => b.hi[a] = b.lo[a],
                Side::High => b.lo[a] = b.hi[a],
                Side::Free => {}
            }
        }
        b
    }

    pub fn intersect(&self, other: &ClosedBox) -> Option<ClosedBox> {
        let mut b = ClosedBox { lo: [0; 3], hi: [0; 3] };
        for a in 0..3 {
            b.lo[a] = self.lo[a].max(other.lo[a]);
            b.hi[a] = self.hi[a].min(other.hi[a]);
            if b.lo[a] > b.hi[a] {
                return None;
            }
        }
        Some(b)
    }

    pub fn intersects(&self, other: &ClosedBox) -> bool {
        (0..3).all(|a| self.lo[a] <= other.hi[a] && other.lo[a] <= self.hi[a])
    }

    pub fn contains(&self, other: &ClosedBox) -> bool {
        (0..3).all(|a| self.lo[a] <= other.lo[a] && other.hi[a] <= self.hi[a])
    }

    pub fn contains_point(&self, p: [u64; 3]) -> bool {
        (0..3).all(|a| self.lo[a] <= p[a] && p[a] <= self.hi[a])
    }

    /// Number of non-degenerate axes.
    pub fn dim(&self) -> usize {
        (0..3).filter(|&a| self.lo[a] < self.hi[a]).count()
    }

    /// Midpoint, doubled so it stays integral.
    pub fn center2(&self) -> [u64; 3] {
        [0, 1, 2].map(|a| self.lo[a] + self.hi[a])
    }
}

/// Smallest face (or the cell itself) of `cell` whose closure contains `sub`.
/// `None` when `sub` leaves the cell.
pub fn minimal_face(dim: usize, cell: &ClosedBox, sub: &ClosedBox) -> Option<NFace> {
    if !cell.contains(sub) {
        return None;
    }
    let mut free = 0u8;
    let mut high = 0u8;
    for a in 0..dim {
        let pinned = sub.lo[a] == sub.hi[a];
        if pinned && sub.lo[a] == cell.hi[a] {
            high |= 1 << a;
        } else if !(pinned && sub.lo[a] == cell.lo[a]) {
            free |= 1 << a;
        }
    }
    Some(NFace::new(free, high))
}

/// The face of `cell` whose closed box equals `target`, if any.
pub fn matching_face(dim: usize, cell: &ClosedBox, target: &ClosedBox) -> Option<NFace> {
    let f = minimal_face(dim, cell, target)?;
    (cell.face(dim, f) == *target && f.dim() < dim).then_some(f)
}

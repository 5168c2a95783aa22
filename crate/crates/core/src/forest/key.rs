use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Deepest refinement level. Anchors are stored at this resolution.
pub const MAX_LEVEL: u8 = 29;
/// Edge length of a tree root in anchor units.
pub const ROOT_LEN: u32 = 1 << MAX_LEVEL;

/// A cell of one tree: level plus the anchor (lowest corner) in the tree frame.
///
/// Keys order by tree, then Morton index of the anchor, then level, which is a
/// pre-order traversal of every tree.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MortonKey {
    pub tree: u32,
    pub level: u8,
    /// Unused axes are zero.
    pub anchor: [u32; 3],
}

impl fmt::Debug for MortonKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = MAX_LEVEL - self.level;
        write!(
            f,
            "K(t{} l{} [{},{},{}])",
            self.tree,
            self.level,
            self.anchor[0] >> s,
            self.anchor[1] >> s,
            self.anchor[2] >> s
        )
    }
}

impl MortonKey {
    pub fn root(tree: u32) -> Self {
        MortonKey { tree, level: 0, anchor: [0; 3] }
    }

    /// Edge length in anchor units.
    #[inline]
    pub fn len(&self) -> u32 {
        1 << (MAX_LEVEL - self.level)
    }

    #[inline]
    pub fn child(&self, i: usize) -> MortonKey {
        debug_assert!(self.level < MAX_LEVEL);
        let h = self.len() >> 1;
        let mut anchor = self.anchor;
        for (a, c) in anchor.iter_mut().enumerate() {
            if i >> a & 1 == 1 {
                *c += h;
            }
        }
        MortonKey { tree: self.tree, level: self.level + 1, anchor }
    }

    pub fn children(&self, dim: usize) -> impl Iterator<Item = MortonKey> + '_ {
        (0..1usize << dim).map(move |i| self.child(i))
    }

    pub fn parent(&self) -> Option<MortonKey> {
        if self.level == 0 {
            return None;
        }
        let mask = !((1u32 << (MAX_LEVEL - self.level + 1)) - 1);
        Some(MortonKey {
            tree: self.tree,
            level: self.level - 1,
            anchor: self.anchor.map(|c| c & mask),
        })
    }

    /// Position among the siblings, in z-order.
    #[inline]
    pub fn child_id(&self) -> usize {
        if self.level == 0 {
            return 0;
        }
        let bit = MAX_LEVEL - self.level;
        (0..3).map(|a| ((self.anchor[a] >> bit & 1) as usize) << a).sum()
    }

    /// Ancestor at a coarser (or equal) level.
    pub fn ancestor(&self, level: u8) -> MortonKey {
        debug_assert!(level <= self.level);
        let mask = if level == 0 { 0 } else { !((1u32 << (MAX_LEVEL - level)) - 1) };
        MortonKey { tree: self.tree, level, anchor: self.anchor.map(|c| c & mask) }
    }

    /// True if `other` is a strict descendant.
    #[inline]
    pub fn is_ancestor_of(&self, other: &MortonKey) -> bool {
        self.tree == other.tree && self.level < other.level && other.ancestor(self.level).anchor == self.anchor
    }

    /// True if `other` equals this cell or descends from it.
    #[inline]
    pub fn contains(&self, other: &MortonKey) -> bool {
        self == other || self.is_ancestor_of(other)
    }

    /// Deepest-level descendant sharing the maximal corner; last in SFC order.
    pub fn last_descendant(&self) -> MortonKey {
        let ext = self.len() - 1;
        MortonKey { tree: self.tree, level: MAX_LEVEL, anchor: self.anchor.map(|c| c + ext) }
    }

    /// Morton (z-order) index of the anchor at full resolution.
    pub fn sfc_index(&self, dim: usize) -> u128 {
        let mut idx = 0u128;
        for b in 0..MAX_LEVEL as usize {
            for a in 0..dim {
                idx |= u128::from(self.anchor[a] >> b & 1) << (dim * b + a);
            }
        }
        idx
    }
}

#[inline]
fn msb_less(a: u32, b: u32) -> bool {
    a < b && a < (a ^ b)
}

/// Compare anchors in z-order without materialising the interleaved index.
#[inline]
pub fn morton_cmp(a: &[u32; 3], b: &[u32; 3]) -> Ordering {
    let mut axis = 0;
    let mut best = 0u32;
    for ax in 0..3 {
        let x = a[ax] ^ b[ax];
        if !msb_less(x, best) {
            axis = ax;
            best = x;
        }
    }
    a[axis].cmp(&b[axis])
}

impl Ord for MortonKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.tree
            .cmp(&other.tree)
            .then_with(|| morton_cmp(&self.anchor, &other.anchor))
            .then_with(|| self.level.cmp(&other.level))
    }
}

impl PartialOrd for MortonKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

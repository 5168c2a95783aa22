//! Inner mesh layer: a forest of quadtrees/octrees over a brick of trees.
//!
//! The forest keeps every leaf of every tree in one SFC-sorted sequence,
//! together with the rank partition. Operations return new forests.

mod brick;
mod geom;
pub mod io;
mod key;
mod view;

use std::collections::HashMap;

pub use brick::Brick;
pub use geom::{matching_face, minimal_face, ClosedBox};
pub use key::{morton_cmp, MortonKey, MAX_LEVEL, ROOT_LEN};
pub use view::{ghost, ghost_layer, RankView};

use crate::error::{Error, Result};
use crate::polytope::{reference, NFace, Side};

/// Adaptation request for one leaf.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Flag {
    Keep,
    Refine,
    Coarsen,
}

/// User hooks that move attached data through refinement and coarsening.
pub trait PayloadTransfer {
    fn refine(&mut self, parent: &MortonKey, data: &[u8], children: &[MortonKey]) -> Vec<Vec<u8>>;
    fn coarsen(&mut self, children: &[MortonKey], data: &[&[u8]], parent: &MortonKey) -> Vec<u8>;
}

/// Children inherit the parent's bytes; a collapsed family keeps the first child's.
pub struct CopyPayload;

impl PayloadTransfer for CopyPayload {
    fn refine(&mut self, _: &MortonKey, data: &[u8], children: &[MortonKey]) -> Vec<Vec<u8>> {
        vec![data.to_vec(); children.len()]
    }

    fn coarsen(&mut self, _: &[MortonKey], data: &[&[u8]], _: &MortonKey) -> Vec<u8> {
        data[0].to_vec()
    }
}

/// Where a key sits relative to a sorted, non-overlapping key sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Lookup {
    /// The key itself is at this index.
    Exact(usize),
    /// The key lies inside the cell at this index.
    Inside(usize),
    /// The key is split into the cells in this index range.
    Split(usize, usize),
    /// No stored cell overlaps the key.
    Missing,
}

pub fn lookup(keys: &[MortonKey], n: &MortonKey) -> Lookup {
    let i = keys.partition_point(|k| k < n);
    if i < keys.len() && keys[i] == *n {
        return Lookup::Exact(i);
    }
    if i < keys.len() && n.is_ancestor_of(&keys[i]) {
        let last = n.last_descendant();
        let j = i + keys[i..].partition_point(|k| *k <= last);
        return Lookup::Split(i, j);
    }
    if i > 0 && keys[i - 1].is_ancestor_of(n) {
        return Lookup::Inside(i - 1);
    }
    Lookup::Missing
}

/// A cell found across a face, together with its own face that holds the contact.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbor {
    /// Index into the key sequence that was searched.
    pub index: usize,
    pub key: MortonKey,
    pub face: NFace,
}

/// Neighbors of a cell across one of its faces, split by relative level.
///
/// A cell K' counts as a neighbor of K across f when f is the smallest face of
/// K holding the closed contact of the two cells. Vertex contacts are always
/// conformal; otherwise coarser cells are `lower` and finer ones `higher`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NeighborSets {
    pub conformal: Vec<Neighbor>,
    pub higher: Vec<Neighbor>,
    pub lower: Vec<Neighbor>,
}

impl NeighborSets {
    pub fn is_empty(&self) -> bool {
        self.conformal.is_empty() && self.higher.is_empty() && self.lower.is_empty()
    }

    pub fn all(&self) -> impl Iterator<Item = &Neighbor> {
        self.conformal.iter().chain(&self.higher).chain(&self.lower)
    }
}

/// Same-level cell across face `f`: shifted by one cell length on every pinned axis.
pub fn across(brick: &Brick, key: &MortonKey, f: NFace) -> Option<MortonKey> {
    let dim = brick.dim();
    let b = ClosedBox::of_cell(brick, key);
    let len = u64::from(key.len());
    let ext = brick.extent();
    let mut p = b.lo;
    for a in 0..dim {
        match f.side(a) {
            Side::Low => p[a] = p[a].checked_sub(len)?,
            Side::High => {
                p[a] += len;
                if p[a] >= ext[a] {
                    return None;
                }
            }
            Side::Free => {}
        }
    }
    let (tree, anchor) = brick.locate(p)?;
    Some(MortonKey { tree, level: key.level, anchor })
}

/// Neighbor search against any sorted, non-overlapping key sequence. Against
/// the full leaf set this yields the global sets; against a rank's local and
/// ghost cells it yields their restriction.
pub fn search_neighbors(brick: &Brick, keys: &[MortonKey], key: &MortonKey, f: NFace) -> NeighborSets {
    let dim = brick.dim();
    let mut out = NeighborSets::default();
    let Some(n) = across(brick, key, f) else {
        return out;
    };
    let cell = ClosedBox::of_cell(brick, key);
    let target = cell.face(dim, f);
    let mut found = Vec::new();
    collect_touching(brick, keys, &n, &target, &mut found);
    for j in found {
        let other = keys[j];
        let ob = ClosedBox::of_cell(brick, &other);
        let Some(contact) = cell.intersect(&ob) else { continue };
        if minimal_face(dim, &cell, &contact) != Some(f) {
            continue;
        }
        let face = minimal_face(dim, &ob, &contact).expect("contact inside both cells");
        let nb = Neighbor { index: j, key: other, face };
        if other.level == key.level || contact.dim() == 0 {
            out.conformal.push(nb);
        } else if other.level < key.level {
            out.lower.push(nb);
        } else {
            out.higher.push(nb);
        }
    }
    out
}

fn collect_touching(brick: &Brick, keys: &[MortonKey], n: &MortonKey, target: &ClosedBox, out: &mut Vec<usize>) {
    match lookup(keys, n) {
        Lookup::Exact(i) | Lookup::Inside(i) => out.push(i),
        Lookup::Missing => {}
        Lookup::Split(..) => {
            for c in n.children(brick.dim()) {
                if ClosedBox::of_cell(brick, &c).intersects(target) {
                    collect_touching(brick, keys, &c, target, out);
                }
            }
        }
    }
}

/// Leaves of all trees in SFC order plus the rank partition.
#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    brick: Brick,
    leaves: Vec<MortonKey>,
    offsets: Vec<usize>,
    payload: Vec<Vec<u8>>,
}

fn uniform_cuts(n: usize, ranks: usize) -> Vec<usize> {
    (0..=ranks).map(|p| (p * n).div_ceil(ranks)).collect()
}

impl Forest {
    /// Every active tree refined uniformly to `level`, cut into equal SFC pieces.
    pub fn new(brick: Brick, level: u8, ranks: usize) -> Result<Forest> {
        if level > MAX_LEVEL {
            return Err(Error::LevelTooDeep(level as usize));
        }
        if ranks == 0 {
            return Err(Error::InvalidParameter("at least one rank is required".into()));
        }
        let dim = brick.dim();
        let per_tree = 1usize
            .checked_shl((dim * level as usize) as u32)
            .filter(|&n| n <= 1 << 26)
            .ok_or_else(|| Error::InvalidParameter(format!("uniform level {level} is too large to enumerate")))?;
        let shift = MAX_LEVEL - level;
        let mut leaves = Vec::new();
        for tree in brick.active_trees() {
            for i in 0..per_tree {
                let mut anchor = [0u32; 3];
                for b in 0..level as usize {
                    for (a, c) in anchor.iter_mut().enumerate().take(dim) {
                        *c |= ((i >> (dim * b + a) & 1) as u32) << b;
                    }
                }
                leaves.push(MortonKey { tree, level, anchor: anchor.map(|c| c << shift) });
            }
        }
        let offsets = uniform_cuts(leaves.len(), ranks);
        let payload = vec![Vec::new(); leaves.len()];
        Ok(Forest { brick, leaves, offsets, payload })
    }

    /// Assemble a forest from raw parts, checking the linear-octree invariants.
    pub fn from_parts(brick: Brick, leaves: Vec<MortonKey>, offsets: Vec<usize>, payload: Vec<Vec<u8>>) -> Result<Forest> {
        let f = Forest { brick, leaves, offsets, payload };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        let dim = self.dim();
        if self.payload.len() != self.leaves.len() {
            return bad("payload count differs from leaf count".into());
        }
        if self.offsets.len() < 2 || self.offsets[0] != 0 || *self.offsets.last().unwrap() != self.leaves.len() {
            return bad("partition offsets do not span the leaves".into());
        }
        if self.offsets.windows(2).any(|w| w[0] > w[1]) {
            return bad("partition offsets decrease".into());
        }
        let mut volume: HashMap<u32, u128> = HashMap::new();
        for (i, k) in self.leaves.iter().enumerate() {
            if !self.brick.is_active(k.tree) || k.level > MAX_LEVEL {
                return bad(format!("leaf {k:?} outside the active trees"));
            }
            let aligned = k.anchor.iter().take(dim).all(|&c| c % k.len() == 0)
                && k.anchor.iter().skip(dim).all(|&c| c == 0);
            if !aligned {
                return bad(format!("leaf {k:?} is misaligned"));
            }
            if i > 0 {
                let prev = self.leaves[i - 1];
                if prev >= *k || prev.is_ancestor_of(k) {
                    return bad(format!("leaves {prev:?}, {k:?} unsorted or overlapping"));
                }
            }
            *volume.entry(k.tree).or_default() += 1u128 << (dim * (MAX_LEVEL - k.level) as usize);
        }
        let full = 1u128 << (dim * MAX_LEVEL as usize);
        for t in self.brick.active_trees() {
            if volume.get(&t).copied().unwrap_or(0) != full {
                return bad(format!("tree {t} is not covered exactly"));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.brick.dim()
    }

    pub fn brick(&self) -> &Brick {
        &self.brick
    }

    pub fn leaves(&self) -> &[MortonKey] {
        &self.leaves
    }

    pub fn num_leaves(&self) -> usize {
        self.leaves.len()
    }

    /// Leaves of one tree.
    pub fn tree_leaves(&self, tree: u32) -> &[MortonKey] {
        let lo = self.leaves.partition_point(|k| k.tree < tree);
        let hi = self.leaves.partition_point(|k| k.tree <= tree);
        &self.leaves[lo..hi]
    }

    pub fn ranks(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn local_range(&self, rank: usize) -> std::ops::Range<usize> {
        self.offsets[rank]..self.offsets[rank + 1]
    }

    /// Rank owning the leaf at `index`.
    pub fn owner(&self, index: usize) -> usize {
        self.offsets.partition_point(|&o| o <= index) - 1
    }

    pub fn payload(&self, index: usize) -> &[u8] {
        &self.payload[index]
    }

    pub fn payload_of(&self, key: &MortonKey) -> Option<&[u8]> {
        self.index_of(key).map(|i| self.payload[i].as_slice())
    }

    pub fn payloads(&self) -> &[Vec<u8>] {
        &self.payload
    }

    pub fn with_payload(mut self, payload: Vec<Vec<u8>>) -> Result<Forest> {
        if payload.len() != self.leaves.len() {
            return Err(Error::LengthMismatch { expected: self.leaves.len(), got: payload.len() });
        }
        self.payload = payload;
        Ok(self)
    }

    pub fn index_of(&self, key: &MortonKey) -> Option<usize> {
        self.leaves.binary_search(key).ok()
    }

    pub fn find(&self, key: &MortonKey) -> Lookup {
        lookup(&self.leaves, key)
    }

    pub fn cell_box(&self, index: usize) -> ClosedBox {
        ClosedBox::of_cell(&self.brick, &self.leaves[index])
    }

    /// Global neighbor sets of the leaf at `index` across face `f`.
    pub fn neighbors(&self, index: usize, f: NFace) -> NeighborSets {
        search_neighbors(&self.brick, &self.leaves, &self.leaves[index], f)
    }

    /// Refine, keep or coarsen leaves according to `flags` (missing keys keep).
    pub fn adapt(&self, flags: &HashMap<MortonKey, Flag>, transfer: &mut dyn PayloadTransfer) -> Result<Forest> {
        let mut per_leaf = vec![Flag::Keep; self.leaves.len()];
        for (k, &fl) in flags {
            let i = self.index_of(k).ok_or(Error::FlagOnNonLeaf(*k))?;
            per_leaf[i] = fl;
        }
        Ok(self.adapt_indexed(&per_leaf, transfer))
    }

    /// As [`Forest::adapt`] with one flag per leaf, in leaf order.
    ///
    /// A family collapses only when all its members are present as leaves and
    /// flagged for coarsening. The parent goes to the rank that owned the
    /// first sibling; children stay with the parent's rank.
    pub fn adapt_indexed(&self, flags: &[Flag], transfer: &mut dyn PayloadTransfer) -> Forest {
        assert_eq!(flags.len(), self.leaves.len());
        let dim = self.dim();
        let nc = 1usize << dim;
        let mut leaves = Vec::with_capacity(self.leaves.len());
        let mut payload = Vec::with_capacity(self.leaves.len());
        let mut owners = Vec::with_capacity(self.leaves.len());
        let mut i = 0;
        while i < self.leaves.len() {
            let k = self.leaves[i];
            let owner = self.owner(i);
            if flags[i] == Flag::Coarsen && self.family_at(i) && flags[i..i + nc].iter().all(|&f| f == Flag::Coarsen) {
                let parent = k.parent().expect("family member has a parent");
                let data: Vec<&[u8]> = self.payload[i..i + nc].iter().map(|p| p.as_slice()).collect();
                payload.push(transfer.coarsen(&self.leaves[i..i + nc], &data, &parent));
                leaves.push(parent);
                owners.push(owner);
                i += nc;
                continue;
            }
            if flags[i] == Flag::Refine && k.level < MAX_LEVEL {
                let children: Vec<MortonKey> = k.children(dim).collect();
                let data = transfer.refine(&k, &self.payload[i], &children);
                assert_eq!(data.len(), nc, "refine hook must return one blob per child");
                leaves.extend(children);
                payload.extend(data);
                owners.extend(std::iter::repeat(owner).take(nc));
            } else {
                leaves.push(k);
                payload.push(self.payload[i].clone());
                owners.push(owner);
            }
            i += 1;
        }
        let offsets = offsets_from_owners(&owners, self.ranks());
        Forest { brick: self.brick.clone(), leaves, offsets, payload }
    }

    /// True when a complete sibling family starts at leaf `i`.
    fn family_at(&self, i: usize) -> bool {
        let nc = 1usize << self.dim();
        let k = self.leaves[i];
        if k.level == 0 || k.child_id() != 0 || i + nc > self.leaves.len() {
            return false;
        }
        let parent = k.parent();
        self.leaves[i..i + nc].iter().all(|s| s.level == k.level && s.parent() == parent)
    }

    /// Refine every leaf for which `pred` holds.
    pub fn refine_where(&self, mut pred: impl FnMut(&MortonKey) -> bool) -> Forest {
        let flags: Vec<Flag> = self.leaves.iter().map(|k| if pred(k) { Flag::Refine } else { Flag::Keep }).collect();
        self.adapt_indexed(&flags, &mut CopyPayload)
    }

    /// Smallest refinement of this forest that is 2:1 balanced across all
    /// faces of dimension at least `k`.
    ///
    /// Each sweep looks, for every leaf and every face of dimension at least
    /// `k`, at the leaf holding the same-level cell across that face; if it is
    /// two or more levels coarser it is split. Sweeps repeat until none fires.
    pub fn balance(&self, k: usize) -> Result<Forest> {
        let dim = self.dim();
        if k >= dim {
            return Err(Error::InvalidParameter(format!("balance parameter k={k} must be below d={dim}")));
        }
        let topo = reference(dim);
        let faces: Vec<NFace> = topo.faces.iter().copied().filter(|f| f.dim() >= k).collect();
        let mut forest = self.clone();
        loop {
            let mut flags = vec![Flag::Keep; forest.leaves.len()];
            let mut any = false;
            for key in &forest.leaves {
                if key.level < 2 {
                    continue;
                }
                for &f in &faces {
                    let Some(n) = across(&forest.brick, key, f) else { continue };
                    if let Lookup::Inside(j) = forest.find(&n) {
                        if forest.leaves[j].level + 1 < key.level && flags[j] != Flag::Refine {
                            flags[j] = Flag::Refine;
                            any = true;
                        }
                    }
                }
            }
            if !any {
                return Ok(forest);
            }
            forest = forest.adapt_indexed(&flags, &mut CopyPayload);
        }
    }

    /// Contiguous SFC cuts so that every rank's weight stays below the ideal
    /// share plus the largest single weight.
    pub fn partition(&self, weights: &[f64]) -> Result<Forest> {
        if weights.len() != self.leaves.len() {
            return Err(Error::LengthMismatch { expected: self.leaves.len(), got: weights.len() });
        }
        if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidParameter("weights must be positive and finite".into()));
        }
        let ranks = self.ranks();
        let mut prefix = Vec::with_capacity(weights.len() + 1);
        prefix.push(0.0f64);
        for w in weights {
            prefix.push(prefix.last().unwrap() + w);
        }
        let total = *prefix.last().unwrap();
        let mut offsets = vec![0; ranks + 1];
        for (p, o) in offsets.iter_mut().enumerate().skip(1) {
            let goal = total * p as f64;
            *o = prefix.partition_point(|&s| s * (ranks as f64) < goal);
        }
        offsets[ranks] = self.leaves.len();
        let mut f = self.clone();
        f.offsets = offsets;
        Ok(f)
    }

    /// Equal leaf counts per rank (up to one).
    pub fn partition_uniform(&self) -> Forest {
        let mut f = self.clone();
        f.offsets = uniform_cuts(self.leaves.len(), self.ranks());
        f
    }

    /// Same leaves with an explicit partition.
    pub fn with_offsets(&self, offsets: Vec<usize>) -> Result<Forest> {
        let f = Forest { offsets, ..self.clone() };
        f.validate()?;
        Ok(f)
    }
}

fn offsets_from_owners(owners: &[usize], ranks: usize) -> Vec<usize> {
    (0..=ranks).map(|p| owners.partition_point(|&o| o < p)).collect()
}

/// Shorthand for [`Forest::new`].
pub fn new_forest(brick: Brick, level: u8, ranks: usize) -> Result<Forest> {
    Forest::new(brick, level, ranks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn square(level: u8, ranks: usize) -> Forest {
        Forest::new(Brick::new(2, &[1, 1]).unwrap(), level, ranks).unwrap()
    }

    // Neighbors by brute force: all other leaves whose contact has f as minimal face.
    fn brute_neighbors(f: &Forest, i: usize, face: NFace) -> Vec<(usize, NFace)> {
        let dim = f.dim();
        let cell = f.cell_box(i);
        let mut out = Vec::new();
        for j in 0..f.num_leaves() {
            if j == i {
                continue;
            }
            let ob = f.cell_box(j);
            if let Some(c) = cell.intersect(&ob) {
                if minimal_face(dim, &cell, &c) == Some(face) {
                    out.push((j, minimal_face(dim, &ob, &c).unwrap()));
                }
            }
        }
        out
    }

    fn sorted(ns: &NeighborSets) -> Vec<(usize, NFace)> {
        let mut v: Vec<_> = ns.all().map(|n| (n.index, n.face)).collect();
        v.sort();
        v
    }

    #[test]
    fn uniform_counts() {
        assert_eq!(square(0, 1).num_leaves(), 1);
        assert_eq!(square(2, 1).num_leaves(), 16);
        let f = Forest::new(Brick::new(2, &[2, 1]).unwrap(), 4, 2).unwrap();
        assert_eq!(f.num_leaves(), 512);
        assert_eq!(f.offsets(), &[0, 256, 512]);
        f.validate().unwrap();
    }

    #[test]
    fn level_too_deep() {
        assert!(matches!(Forest::new(Brick::new(2, &[1, 1]).unwrap(), 30, 1), Err(Error::LevelTooDeep(30))));
    }

    #[test]
    fn right_neighbor_in_uniform_square() {
        let f = square(1, 1);
        let right = NFace::new(0b10, 0b01);
        let ns = f.neighbors(0, right);
        assert_eq!(ns.conformal.len(), 1);
        assert_eq!(ns.conformal[0].index, 1);
        assert_eq!(ns.conformal[0].face, NFace::new(0b10, 0));
        assert!(ns.higher.is_empty() && ns.lower.is_empty());
    }

    #[test]
    fn root_has_no_neighbors() {
        let f = square(0, 1);
        for &face in &reference(2).faces {
            assert!(f.neighbors(0, face).is_empty());
        }
    }

    #[test]
    fn refined_family_member_neighbors() {
        // children 0..4 of the root; refine child 0 (lower left)
        let f = square(1, 1).refine_where(|k| k.child_id() == 0);
        let right_edge = NFace::new(0b10, 0b01);
        let coarse = f.index_of(&MortonKey::root(0).child(1)).unwrap();
        let left_edge = NFace::new(0b10, 0);
        let ns = f.neighbors(coarse, left_edge);
        assert_eq!(ns.higher.len(), 2);
        assert!(ns.conformal.is_empty() && ns.lower.is_empty());
        for n in &ns.higher {
            let fine = f.neighbors(n.index, right_edge);
            assert_eq!(fine.lower.len(), 1);
            assert_eq!(fine.lower[0].index, coarse);
        }
    }

    #[test]
    fn adapt_rules() {
        let f = square(0, 1);
        let kept = f.adapt(&HashMap::new(), &mut CopyPayload).unwrap();
        assert_eq!(kept, f);
        let r = f.adapt(&HashMap::from([(MortonKey::root(0), Flag::Refine)]), &mut CopyPayload).unwrap();
        assert_eq!(r.num_leaves(), 4);
        assert!(r.leaves().windows(2).all(|w| w[0] < w[1]));
        let mut flags: HashMap<_, _> = r.leaves()[..3].iter().map(|k| (*k, Flag::Coarsen)).collect();
        flags.insert(r.leaves()[3], Flag::Keep);
        assert_eq!(r.adapt(&flags, &mut CopyPayload).unwrap().num_leaves(), 4);
        flags.insert(r.leaves()[3], Flag::Coarsen);
        assert_eq!(r.adapt(&flags, &mut CopyPayload).unwrap().num_leaves(), 1);
        let bad = HashMap::from([(MortonKey::root(0).child(0).child(0), Flag::Refine)]);
        assert!(matches!(r.adapt(&bad, &mut CopyPayload), Err(Error::FlagOnNonLeaf(_))));
    }

    #[test]
    fn coarsening_across_ranks_goes_to_first_sibling_owner() {
        let f = square(1, 2); // two leaves per rank
        let flags = vec![Flag::Coarsen; 4];
        let c = f.adapt_indexed(&flags, &mut CopyPayload);
        assert_eq!(c.num_leaves(), 1);
        assert_eq!(c.offsets(), &[0, 1, 1]);
    }

    #[test]
    fn balance_corner_example() {
        // refine root, then child 0 twice more
        let mut f = square(1, 1);
        for _ in 0..2 {
            let target = f.leaves()[0];
            f = f.refine_where(|k| *k == target);
        }
        let b = f.balance(0).unwrap();
        let deep: Vec<ClosedBox> = (0..b.num_leaves()).filter(|&i| b.leaves()[i].level == 3).map(|i| b.cell_box(i)).collect();
        for i in 0..b.num_leaves() {
            let bx = b.cell_box(i);
            if deep.iter().any(|d| d.intersects(&bx)) {
                assert!(b.leaves()[i].level >= 2, "{:?}", b.leaves()[i]);
            }
        }
        assert_eq!(b.balance(0).unwrap(), b);
    }

    #[test]
    fn partition_uniform_and_identity() {
        let f = square(2, 4);
        let p = f.partition(&[1.0; 16]).unwrap();
        assert_eq!(p.offsets(), &[0, 4, 8, 12, 16]);
        let one = square(2, 1);
        assert_eq!(one.partition(&[2.5; 16]).unwrap(), one);
    }

    proptest! {
        #[test]
        fn neighbors_match_brute_force(seed in 0u64..1000, dim in 2usize..=3) {
            let brick = Brick::new(dim, &[2, 1, 1][..dim]).unwrap();
            let mut f = Forest::new(brick, 1, 1).unwrap();
            let mut s = seed;
            for _ in 0..2 {
                f = f.refine_where(|k| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    let h = s ^ (u64::from(k.anchor[0]) * 31 + u64::from(k.anchor[1]) * 17 + u64::from(k.tree));
                    h >> 61 < 2
                });
            }
            for i in 0..f.num_leaves() {
                for &face in &reference(dim).faces {
                    let ns = f.neighbors(i, face);
                    prop_assert_eq!(sorted(&ns), { let mut b = brute_neighbors(&f, i, face); b.sort(); b });
                    if face.dim() > 0 {
                        let lvl = f.leaves()[i].level;
                        prop_assert!(ns.conformal.iter().all(|n| n.key.level == lvl));
                        prop_assert!(ns.lower.iter().all(|n| n.key.level < lvl));
                        prop_assert!(ns.higher.iter().all(|n| n.key.level > lvl));
                    }
                }
            }
        }

        #[test]
        fn weighted_partition_bound(ws in prop::collection::vec(0.01f64..10.0, 64), ranks in 1usize..7) {
            let f = Forest::new(Brick::new(2, &[1, 1]).unwrap(), 3, ranks).unwrap();
            let p = f.partition(&ws).unwrap();
            let total: f64 = ws.iter().sum();
            let wmax = ws.iter().cloned().fold(0.0, f64::max);
            for r in 0..ranks {
                let w: f64 = ws[p.local_range(r)].iter().sum();
                prop_assert!(w <= total / ranks as f64 + wmax + 1e-9);
            }
        }
    }
}

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::{lookup, search_neighbors, Brick, ClosedBox, Forest, Lookup, MortonKey, NeighborSets};
use crate::error::{Error, Result};
use crate::polytope::{reference, NFace};
use crate::simfabric::{Decoder, Encoder, Fabric, Outbox};
use super::geom::matching_face;

/// What one rank may see: its own leaves plus one layer of ghost leaves.
///
/// All queries run against the stored cells only. The full forest is kept
/// solely so that guarded queries can detect when an answer would need a cell
/// the rank does not have.
#[derive(Clone, Debug)]
pub struct RankView {
    rank: usize,
    ranks: usize,
    ghost_dim: usize,
    brick: Brick,
    cells: Vec<MortonKey>,
    owners: Vec<usize>,
    global_index: Vec<usize>,
    local: std::ops::Range<usize>,
    mirrors: Vec<(usize, Vec<usize>)>,
    global: Arc<Forest>,
}

impl RankView {
    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ranks(&self) -> usize {
        self.ranks
    }

    /// Smallest face dimension across which ghosts were collected.
    pub fn ghost_dim(&self) -> usize {
        self.ghost_dim
    }

    pub fn dim(&self) -> usize {
        self.brick.dim()
    }

    pub fn brick(&self) -> &Brick {
        &self.brick
    }

    /// Local and ghost cells in SFC order.
    pub fn cells(&self) -> &[MortonKey] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn key(&self, i: usize) -> MortonKey {
        self.cells[i]
    }

    pub fn owner(&self, i: usize) -> usize {
        self.owners[i]
    }

    pub fn is_local(&self, i: usize) -> bool {
        self.local.contains(&i)
    }

    /// Local cells form one contiguous block of the view.
    pub fn local_range(&self) -> std::ops::Range<usize> {
        self.local.clone()
    }

    pub fn ghosts(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.local.start).chain(self.local.end..self.cells.len())
    }

    /// Position of the cell in the global leaf sequence.
    pub fn global_index(&self, i: usize) -> usize {
        self.global_index[i]
    }

    pub fn index_of(&self, key: &MortonKey) -> Option<usize> {
        self.cells.binary_search(key).ok()
    }

    pub fn cell_box(&self, i: usize) -> ClosedBox {
        ClosedBox::of_cell(&self.brick, &self.cells[i])
    }

    /// Local cells that are ghosts elsewhere, with the ranks that hold them.
    pub fn mirrors(&self) -> &[(usize, Vec<usize>)] {
        &self.mirrors
    }

    /// Neighbor sets of a view cell across `f`, restricted to the view.
    pub fn neighbors(&self, key: &MortonKey, f: NFace) -> Result<NeighborSets> {
        if self.index_of(key).is_none() {
            return Err(Error::Guard { rank: self.rank, cell: *key });
        }
        Ok(search_neighbors(&self.brick, &self.cells, key, f))
    }

    /// View cells holding `region` in their closure without having it as a face
    /// (the coarser cells around a VEF). Fails if such a cell exists in the
    /// forest but is not part of the view.
    pub fn coarser_around(&self, region: &ClosedBox) -> Result<Vec<usize>> {
        let dim = self.dim();
        let mut out = Vec::new();
        for g in cells_holding(&self.global, region) {
            let b = self.global.cell_box(g);
            if matching_face(dim, &b, region).is_some() {
                continue;
            }
            let key = self.global.leaves()[g];
            match self.index_of(&key) {
                Some(i) => out.push(i),
                None => return Err(Error::Guard { rank: self.rank, cell: key }),
            }
        }
        Ok(out)
    }

    /// View cells whose closure contains the point, looked up in the view only.
    pub fn cells_at_point(&self, p: [u64; 3]) -> Vec<usize> {
        let region = ClosedBox::point(p);
        probe_cells(&self.brick, &self.cells, &region)
    }
}

/// Global leaves whose closure contains `region`.
fn cells_holding(forest: &Forest, region: &ClosedBox) -> Vec<usize> {
    probe_cells(forest.brick(), forest.leaves(), region)
        .into_iter()
        .filter(|&i| forest.cell_box(i).contains(region))
        .collect()
}

/// Cells of a sorted key set touching the closed box, found by probing the
/// finest-level cells at its corners.
fn probe_cells(brick: &Brick, keys: &[MortonKey], region: &ClosedBox) -> Vec<usize> {
    let dim = brick.dim();
    let mut out = BTreeSet::new();
    for corner in 0..1usize << dim {
        for offs in 0..1usize << dim {
            let mut p = [0u64; 3];
            let mut ok = true;
            for a in 0..dim {
                let v = if corner >> a & 1 == 1 { region.hi[a] } else { region.lo[a] };
                p[a] = if offs >> a & 1 == 1 {
                    v
                } else {
                    match v.checked_sub(1) {
                        Some(x) => x,
                        None => {
                            ok = false;
                            0
                        }
                    }
                };
            }
            if !ok {
                continue;
            }
            let Some((tree, anchor)) = brick.locate(p) else { continue };
            let finest = MortonKey { tree, level: super::MAX_LEVEL, anchor };
            if let Lookup::Exact(i) | Lookup::Inside(i) = lookup(keys, &finest) {
                if ClosedBox::of_cell(brick, &keys[i]).intersects(region) {
                    out.insert(i);
                }
            }
        }
    }
    out.into_iter().collect()
}

fn encode_key(e: &mut Encoder, k: &MortonKey, index: usize) {
    e.u32(k.tree).u32(u32::from(k.level)).u32(k.anchor[0]).u32(k.anchor[1]).u32(k.anchor[2]).u64(index as u64);
}

fn decode_key(d: &mut Decoder) -> Result<(MortonKey, usize)> {
    let tree = d.u32()?;
    let level = d.u32()? as u8;
    let anchor = [d.u32()?, d.u32()?, d.u32()?];
    let index = d.u64()? as usize;
    Ok((MortonKey { tree, level, anchor }, index))
}

/// Build every rank's view with ghosts across faces of dimension at least `s`.
///
/// Each rank finds which of its leaves neighbor leaves of other ranks (the
/// relation is symmetric) and ships them in a single exchange round.
pub fn ghost_layer(forest: Arc<Forest>, s: usize, fabric: &mut Fabric) -> Result<Vec<RankView>> {
    let dim = forest.dim();
    if s >= dim {
        return Err(Error::InvalidParameter(format!("ghost parameter s={s} must be below d={dim}")));
    }
    let ranks = forest.ranks();
    if fabric.ranks() != ranks {
        return Err(Error::RankCount { expected: ranks, got: fabric.ranks() });
    }
    let faces: Vec<NFace> = reference(dim).faces.iter().copied().filter(|f| f.dim() >= s).collect();
    let mut mirrors_of: Vec<BTreeMap<usize, BTreeSet<usize>>> = vec![BTreeMap::new(); ranks];
    let mut outbox = Outbox::new();
    for q in 0..ranks {
        let mut to: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for i in forest.local_range(q) {
            for &f in &faces {
                for n in forest.neighbors(i, f).all() {
                    let p = forest.owner(n.index);
                    if p != q {
                        to.entry(p).or_default().insert(i);
                        mirrors_of[q].entry(i).or_default().insert(p);
                    }
                }
            }
        }
        for (p, cells) in to {
            let mut e = Encoder::new();
            for &i in &cells {
                encode_key(&mut e, &forest.leaves()[i], i);
            }
            outbox.insert((q, p), vec![e.finish()]);
        }
    }
    let inbox = fabric.neighbor_exchange(outbox)?;
    let mut views = Vec::with_capacity(ranks);
    for p in 0..ranks {
        let mut entries: Vec<(MortonKey, usize, usize)> = forest
            .local_range(p)
            .map(|i| (forest.leaves()[i], p, i))
            .collect();
        for (src, msgs) in inbox.for_rank(p) {
            for m in msgs {
                let mut d = Decoder::new(m);
                while !d.is_empty() {
                    let (k, gi) = decode_key(&mut d)?;
                    entries.push((k, src, gi));
                }
            }
        }
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let start = entries.partition_point(|e| e.2 < forest.offsets()[p]);
        let end = start + forest.local_range(p).len();
        let cells: Vec<MortonKey> = entries.iter().map(|e| e.0).collect();
        let mirrors = mirrors_of[p]
            .iter()
            .map(|(&gi, rs)| {
                let vi = cells.binary_search(&forest.leaves()[gi]).expect("local cell in view");
                (vi, rs.iter().copied().collect())
            })
            .collect();
        views.push(RankView {
            rank: p,
            ranks,
            ghost_dim: s,
            brick: forest.brick().clone(),
            owners: entries.iter().map(|e| e.1).collect(),
            global_index: entries.iter().map(|e| e.2).collect(),
            cells,
            local: start..end,
            mirrors,
            global: Arc::clone(&forest),
        });
    }
    Ok(views)
}

/// [`ghost_layer`] on a private fabric.
pub fn ghost(forest: &Forest, s: usize) -> Result<Vec<RankView>> {
    let mut fabric = Fabric::new(forest.ranks());
    ghost_layer(Arc::new(forest.clone()), s, &mut fabric)
}

//! Distributed DOF bookkeeping: owner rank and sharer sets of interface DOFs,
//! the send/receive patterns built from them, interface assembly of vectors
//! and a global numbering for fully assembled systems.
//!
//! All functions here drive every rank at once, since each contains fabric
//! rounds. Communication patterns pair DOFs by sorting on node keys, which
//! are the same on every rank.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::femesh::FEMesh;
use crate::fespace::{DofMap, NO_DOF};
use crate::forest::RankView;
use crate::simfabric::{Decoder, Encoder, Fabric, Outbox};

const NONE: u32 = u32::MAX;

#[derive(Clone, Debug, Serialize)]
pub struct Ownership {
    pub rank: usize,
    /// Owner rank per proc-local DOF; `None` for hanging and ghost DOFs.
    pub owner: Vec<Option<usize>>,
    /// Sharer sets; complete where this rank is the owner.
    pub sharers: Vec<BTreeSet<usize>>,
    /// Sharer sets as known before the exchange round.
    pub local_sharers: Vec<BTreeSet<usize>>,
}

impl Ownership {
    /// Proc-regular local DOFs owned here.
    pub fn owned(&self) -> impl Iterator<Item = u32> + '_ {
        (0..self.owner.len() as u32).filter(|&g| self.owner[g as usize] == Some(self.rank))
    }
}

fn is_shared(dofs: &DofMap, g: usize) -> bool {
    let d = &dofs.dofs()[g];
    d.local && d.interface && !d.hanging
}

/// Owner and sharers of every proc-regular interface DOF, in one exchange round.
///
/// Locally, the owner is the largest rank among the cells around the DOF's VEF
/// when one of them is local; sharers collect the owners of those cells, and
/// a proc-hanging interface VEF adds its cells' owners to the DOFs on the
/// closure of its owner VEF. Each rank then ships, per mirror cell and per
/// cell DOF, its owner guess and sharer set; receivers augment their sharer
/// sets or, where no local cell touches the VEF, adopt the remote owner.
pub fn compute_ownership(views: &[RankView], meshes: &[FEMesh], dofs: &[DofMap], fabric: &mut Fabric) -> Result<Vec<Ownership>> {
    let ranks = fabric.ranks();
    let mut out: Vec<Ownership> = Vec::with_capacity(ranks);
    // per rank: VEF -> its DOFs
    let mut vef_dofs: Vec<HashMap<u32, Vec<u32>>> = Vec::with_capacity(ranks);
    for p in 0..ranks {
        let (mesh, dm) = (&meshes[p], &dofs[p]);
        let mut by_vef: HashMap<u32, Vec<u32>> = HashMap::new();
        for (g, d) in dm.dofs().iter().enumerate() {
            if let Some(v) = d.vef {
                by_vef.entry(v).or_default().push(g as u32);
            }
        }
        let n = dm.len();
        let mut owner = vec![None; n];
        let mut sharers = vec![BTreeSet::new(); n];
        for (g, d) in dm.dofs().iter().enumerate() {
            if d.local && !d.hanging && !d.interface {
                owner[g] = Some(p);
                sharers[g].insert(p);
            }
        }
        for id in mesh.interface_set() {
            let v = mesh.vef(id);
            let w: BTreeSet<usize> = v.cells_around.iter().map(|&c| mesh.cells()[c].owner).collect();
            let own_dofs = by_vef.get(&id).map(Vec::as_slice).unwrap_or(&[]);
            if !v.hanging {
                let touches_local = v.cells_around.iter().any(|&c| mesh.is_local_cell(c));
                for &g in own_dofs {
                    sharers[g as usize].extend(&w);
                    if touches_local {
                        owner[g as usize] = w.last().copied();
                    }
                }
            } else if !own_dofs.is_empty() {
                let o = v.owner_vef.expect("hanging VEF has an owner");
                for j in mesh.closure_vefs(o) {
                    for &g in by_vef.get(&j).map(Vec::as_slice).unwrap_or(&[]) {
                        sharers[g as usize].extend(&w);
                    }
                }
            }
        }
        vef_dofs.push(by_vef);
        out.push(Ownership { rank: p, owner, local_sharers: sharers.clone(), sharers });
    }

    // pack: per mirror cell, per cell DOF, owner and sharers
    let mut outbox = Outbox::new();
    for p in 0..ranks {
        let (view, dm, own) = (&views[p], &dofs[p], &out[p]);
        for (cell, targets) in view.mirrors() {
            let mut e = Encoder::new();
            e.u64(view.global_index(*cell) as u64);
            for &g in dm.cell_dofs(*cell) {
                if g == NO_DOF || !is_shared(dm, g as usize) {
                    e.u32(NONE).u32(0);
                    continue;
                }
                let o = own.owner[g as usize].map_or(NONE, |o| o as u32);
                let s = &own.sharers[g as usize];
                e.u32(o).u32(s.len() as u32);
                for &q in s {
                    e.u32(q as u32);
                }
            }
            let msg = e.finish();
            for &q in targets {
                outbox.entry((p, q)).or_default().push(msg.clone());
            }
        }
    }
    let inbox = fabric.neighbor_exchange(outbox)?;

    // unpack
    for p in 0..ranks {
        let (view, mesh, dm) = (&views[p], &meshes[p], &dofs[p]);
        let by_global: HashMap<usize, usize> = view.ghosts().map(|i| (view.global_index(i), i)).collect();
        let own = &mut out[p];
        for (_, msgs) in inbox.for_rank(p) {
            for m in msgs {
                let mut d = Decoder::new(m);
                let gi = d.u64()? as usize;
                let cell = *by_global.get(&gi).ok_or_else(|| Error::Decode(format!("rank {p}: cell {gi} is not a ghost")))?;
                for &g in dm.cell_dofs(cell) {
                    let o = d.u32()?;
                    let n = d.u32()?;
                    let mut s = BTreeSet::new();
                    for _ in 0..n {
                        s.insert(d.u32()? as usize);
                    }
                    if g == NO_DOF || o == NONE || !is_shared(dm, g as usize) {
                        continue;
                    }
                    let v = mesh.vef(dm.dof(g).vef.expect("interface DOFs sit on VEFs"));
                    if v.cells_around.iter().any(|&c| mesh.is_local_cell(c)) {
                        own.sharers[g as usize].extend(s);
                    } else {
                        own.owner[g as usize] = Some(o as usize);
                    }
                }
            }
        }
        for g in 0..dm.len() {
            if is_shared(dm, g) && own.owner[g].is_none() {
                return Err(Error::MissingRemote { rank: p, node: dm.dof(g as u32).node });
            }
        }
    }
    Ok(out)
}

/// S1 pattern of one rank: what it receives as owner and sends as non-owner.
/// The S2 pattern is the same with both sides swapped.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CommPattern {
    pub rank: usize,
    pub rcv: BTreeMap<usize, Vec<u32>>,
    pub snd: BTreeMap<usize, Vec<u32>>,
}

impl CommPattern {
    pub fn rcv_ranks(&self) -> impl Iterator<Item = usize> + '_ {
        self.rcv.keys().copied()
    }

    pub fn snd_ranks(&self) -> impl Iterator<Item = usize> + '_ {
        self.snd.keys().copied()
    }

    pub fn debug_json(&self) -> serde_json::Value {
        let count = |m: &BTreeMap<usize, Vec<u32>>| m.iter().map(|(q, v)| (q.to_string(), v.len())).collect::<BTreeMap<_, _>>();
        serde_json::json!({ "rank": self.rank, "rcv": count(&self.rcv), "snd": count(&self.snd) })
    }
}

/// Send/receive sets from owners and sharers, each ordered by node key.
pub fn build_comm_pattern(own: &Ownership, dofs: &DofMap) -> CommPattern {
    let p = own.rank;
    let mut pat = CommPattern { rank: p, ..Default::default() };
    for g in 0..dofs.len() {
        if !is_shared(dofs, g) {
            continue;
        }
        let o = own.owner[g].expect("ownership complete");
        if o == p {
            for &q in own.sharers[g].iter().filter(|&&q| q != p) {
                pat.rcv.entry(q).or_default().push(g as u32);
            }
        } else {
            pat.snd.entry(o).or_default().push(g as u32);
        }
    }
    for list in pat.rcv.values_mut().chain(pat.snd.values_mut()) {
        list.sort_by_key(|&g| dofs.dof(g).node);
    }
    pat
}

fn check_lengths(dofs: &[DofMap], x: &[Vec<f64>]) -> Result<()> {
    if x.len() != dofs.len() {
        return Err(Error::RankCount { expected: dofs.len(), got: x.len() });
    }
    for (d, v) in dofs.iter().zip(x) {
        if d.len() != v.len() {
            return Err(Error::LengthMismatch { expected: d.len(), got: v.len() });
        }
    }
    Ok(())
}

fn send_values(list: &[u32], x: &[f64]) -> Vec<u8> {
    let mut e = Encoder::new();
    for &g in list {
        e.f64(x[g as usize]);
    }
    e.finish()
}

/// Turn subassembled interface values into fully assembled ones (S1 then S2).
pub fn assemble_interface(patterns: &[CommPattern], dofs: &[DofMap], x: &mut [Vec<f64>], fabric: &mut Fabric) -> Result<()> {
    check_lengths(dofs, x)?;
    let mut outbox = Outbox::new();
    for pat in patterns {
        for (&q, list) in &pat.snd {
            outbox.insert((pat.rank, q), vec![send_values(list, &x[pat.rank])]);
        }
    }
    let inbox = fabric.neighbor_exchange(outbox)?;
    for pat in patterns {
        for (src, msgs) in inbox.for_rank(pat.rank) {
            let list = &pat.rcv[&src];
            let mut d = Decoder::new(&msgs[0]);
            for &g in list {
                x[pat.rank][g as usize] += d.f64()?;
            }
        }
    }
    fetch_from_owners(patterns, x, fabric)
}

/// S2 alone: owners overwrite the non-owner copies.
pub fn fetch_from_owners(patterns: &[CommPattern], x: &mut [Vec<f64>], fabric: &mut Fabric) -> Result<()> {
    let mut outbox = Outbox::new();
    for pat in patterns {
        for (&q, list) in &pat.rcv {
            outbox.insert((pat.rank, q), vec![send_values(list, &x[pat.rank])]);
        }
    }
    let inbox = fabric.neighbor_exchange(outbox)?;
    for pat in patterns {
        for (src, msgs) in inbox.for_rank(pat.rank) {
            let list = &pat.snd[&src];
            let mut d = Decoder::new(&msgs[0]);
            for &g in list {
                x[pat.rank][g as usize] = d.f64()?;
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct GlobalNumbering {
    pub rank: usize,
    /// Global id per proc-local DOF, for local regular DOFs.
    pub ids: Vec<Option<u64>>,
    /// First id owned by this rank.
    pub offset: u64,
    pub owned: u64,
    pub total: u64,
}

impl GlobalNumbering {
    pub fn owned_range(&self) -> std::ops::Range<u64> {
        self.offset..self.offset + self.owned
    }
}

/// Consecutive ids per owner via an exclusive scan, then one owner-to-sharer
/// round over the S2 pattern.
pub fn global_numbering(owns: &[Ownership], dofs: &[DofMap], patterns: &[CommPattern], fabric: &mut Fabric) -> Result<Vec<GlobalNumbering>> {
    let ranks = fabric.ranks();
    let counts: Vec<u64> = owns.iter().map(|o| o.owned().count() as u64).collect();
    let offsets = fabric.exscan_sum(&counts)?;
    let total = fabric.allreduce_sum_u64(&counts)?;
    let mut out: Vec<GlobalNumbering> = (0..ranks)
        .map(|p| {
            let mut ids = vec![None; dofs[p].len()];
            for (i, g) in owns[p].owned().enumerate() {
                ids[g as usize] = Some(offsets[p] + i as u64);
            }
            GlobalNumbering { rank: p, ids, offset: offsets[p], owned: counts[p], total }
        })
        .collect();
    let mut outbox = Outbox::new();
    for pat in patterns {
        for (&q, list) in &pat.rcv {
            let mut e = Encoder::new();
            for &g in list {
                e.u64(out[pat.rank].ids[g as usize].expect("owned DOF numbered"));
            }
            outbox.insert((pat.rank, q), vec![e.finish()]);
        }
    }
    let inbox = fabric.neighbor_exchange(outbox)?;
    for pat in patterns {
        for (src, msgs) in inbox.for_rank(pat.rank) {
            let mut d = Decoder::new(&msgs[0]);
            for &g in &pat.snd[&src] {
                out[pat.rank].ids[g as usize] = Some(d.u64()?);
            }
        }
    }
    Ok(out)
}

//! Outer mesh layer: global VEFs (vertices, edges, faces) seen from one rank.
//!
//! [`build_femesh`] glues the faces of the rank's local and ghost cells into
//! equivalence classes using only neighbor queries on its [`RankView`], finds
//! hanging VEFs together with their owner VEFs, and classifies everything into
//! regular/hanging, local/ghost and interface/interior. It takes no fabric, so
//! it cannot communicate.

mod oracle;

use std::collections::{BTreeSet, HashMap};

use serde::Serialize;

pub use oracle::{oracle_global_vefs, OracleMesh, OracleVef};

use crate::error::{Error, Result};
use crate::forest::{matching_face, minimal_face, Brick, ClosedBox, MortonKey, NeighborSets, RankView};
use crate::polytope::{owner_face, reference, NFace, RefTopology};

/// How strictly the construction follows the balance precondition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BuildOptions {
    /// Balance parameter the forest was built with.
    pub k: usize,
    /// Faces of dimension below this are skipped (vertices are kept when it is 1).
    pub vef_k: usize,
    /// Fail when an owner VEF is itself hanging instead of following the chain.
    pub strict: bool,
}

impl BuildOptions {
    pub fn strict(k: usize) -> Self {
        BuildOptions { k, vef_k: k, strict: true }
    }

    /// Every VEF materialized and owner chains followed, whatever the balance.
    /// Only meant for reproducing what goes wrong when `k` is too large.
    pub fn relaxed(k: usize) -> Self {
        BuildOptions { k, vef_k: 0, strict: false }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MeshCell {
    pub key: MortonKey,
    pub owner: usize,
    pub local: bool,
    /// Global VEF id per reference face id; `None` for skipped faces.
    pub vefs: Vec<Option<u32>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GlobalVef {
    pub dim: usize,
    pub key: ClosedBox,
    /// Cells (view indices) having this VEF as one of their faces.
    pub cells_around: Vec<usize>,
    /// Coarser cells holding the VEF in their closure without having it as a face.
    pub coarser_around: Vec<usize>,
    /// Owner VEF, set for hanging VEFs.
    pub owner_vef: Option<u32>,
    pub hanging: bool,
    pub local: bool,
    pub interface: bool,
    /// A cell and one of its faces representing the VEF.
    pub home: (usize, usize),
}

impl GlobalVef {
    pub fn regular(&self) -> bool {
        !self.hanging
    }
}

#[derive(Clone, Debug)]
pub struct FEMesh {
    rank: usize,
    ranks: usize,
    dim: usize,
    options: BuildOptions,
    ghost_dim: usize,
    brick: Brick,
    cells: Vec<MeshCell>,
    boxes: Vec<ClosedBox>,
    vefs: Vec<GlobalVef>,
    by_key: HashMap<ClosedBox, u32>,
    local_cells: std::ops::Range<usize>,
}

/// Mesh construction with the balance precondition enforced (`vef_k = k`, strict).
pub fn build_femesh(view: &RankView, k: usize) -> Result<FEMesh> {
    build_femesh_with(view, BuildOptions::strict(k))
}

pub fn build_femesh_with(view: &RankView, options: BuildOptions) -> Result<FEMesh> {
    let dim = view.dim();
    if options.vef_k >= dim || options.k >= dim {
        return Err(Error::InvalidParameter(format!("k={} must be below d={dim}", options.k.max(options.vef_k))));
    }
    let topo = reference(dim);
    let cells: Vec<MeshCell> = (0..view.len())
        .map(|i| MeshCell {
            key: view.key(i),
            owner: view.owner(i),
            local: view.is_local(i),
            vefs: vec![None; topo.num_faces()],
        })
        .collect();
    let boxes = (0..view.len()).map(|i| view.cell_box(i)).collect();
    let mut b = Builder {
        view,
        topo,
        options,
        mesh: FEMesh {
            rank: view.rank(),
            ranks: view.ranks(),
            dim,
            options,
            ghost_dim: view.ghost_dim(),
            brick: view.brick().clone(),
            cells,
            boxes,
            vefs: Vec::new(),
            by_key: HashMap::new(),
            local_cells: view.local_range(),
        },
        neighbor_cache: vec![None; view.len()],
    };
    for c in 0..view.len() {
        for f in 0..topo.num_faces() {
            if !b.passes_filter(topo.face(f)) || b.mesh.cells[c].vefs[f].is_some() {
                continue;
            }
            b.visit(c, f, 0)?;
        }
    }
    let mut mesh = b.mesh;
    mesh.classify();
    Ok(mesh)
}

struct Builder<'a> {
    view: &'a RankView,
    topo: &'static RefTopology,
    options: BuildOptions,
    mesh: FEMesh,
    neighbor_cache: Vec<Option<Vec<NeighborSets>>>,
}

impl Builder<'_> {
    fn passes_filter(&self, f: NFace) -> bool {
        let k = self.options.vef_k;
        (f.dim() == 0 && k <= 1) || f.dim() >= k
    }

    fn neighbors(&mut self, cell: usize, face: usize) -> Result<&NeighborSets> {
        if self.neighbor_cache[cell].is_none() {
            let key = self.view.key(cell);
            let sets = self
                .topo
                .faces
                .iter()
                .map(|&f| self.view.neighbors(&key, f))
                .collect::<Result<Vec<_>>>()?;
            self.neighbor_cache[cell] = Some(sets);
        }
        Ok(&self.neighbor_cache[cell].as_ref().unwrap()[face])
    }

    fn unmatched(&self, what: String) -> Error {
        Error::Unmatched { rank: self.mesh.rank, what }
    }

    fn assign(&mut self, cell: usize, face: NFace, id: u32) -> Result<()> {
        let fid = self.topo.id_of(face).expect("proper face");
        match self.mesh.cells[cell].vefs[fid] {
            None => {
                self.mesh.cells[cell].vefs[fid] = Some(id);
                Ok(())
            }
            Some(old) if old == id => Ok(()),
            Some(old) => Err(self.unmatched(format!(
                "face {face:?} of {:?} glued to VEF {old} and {id}",
                self.mesh.cells[cell].key
            ))),
        }
    }

    /// Create `[f]` for face `f` of `cell` and everything derived from it.
    fn visit(&mut self, cell: usize, f: usize, depth: usize) -> Result<u32> {
        if let Some(id) = self.mesh.cells[cell].vefs[f] {
            return Ok(id);
        }
        let dim = self.mesh.dim;
        let face = self.topo.face(f);
        let fbox = self.mesh.boxes[cell].face(dim, face);
        if self.mesh.by_key.contains_key(&fbox) {
            return Err(self.unmatched(format!("second class created for {fbox:?}")));
        }
        let id = self.mesh.vefs.len() as u32;
        self.mesh.vefs.push(GlobalVef {
            dim: face.dim(),
            key: fbox,
            cells_around: vec![cell],
            coarser_around: Vec::new(),
            owner_vef: None,
            hanging: false,
            local: false,
            interface: false,
            home: (cell, f),
        });
        self.mesh.by_key.insert(fbox, id);
        self.mesh.cells[cell].vefs[f] = Some(id);

        let mut around = BTreeSet::from([cell]);
        let mut coarser = BTreeSet::new();
        for &g in &self.topo.containing[f] {
            let sets = self.neighbors(cell, g)?.clone();
            for n in &sets.conformal {
                let nb = self.mesh.boxes[n.index];
                let hat = matching_face(dim, &nb, &fbox)
                    .ok_or_else(|| self.unmatched(format!("conformal neighbor {:?} lacks {fbox:?}", n.key)))?;
                self.assign(n.index, hat, id)?;
                around.insert(n.index);
            }
            if face.dim() == 0 {
                for n in sets.lower.iter().chain(&sets.higher) {
                    if let Some(hat) = matching_face(dim, &self.mesh.boxes[n.index], &fbox) {
                        self.assign(n.index, hat, id)?;
                        around.insert(n.index);
                    }
                }
            }
            for n in &sets.lower {
                if matching_face(dim, &self.mesh.boxes[n.index], &fbox).is_none() {
                    coarser.insert(n.index);
                }
            }
        }
        self.mesh.vefs[id as usize].cells_around = around.into_iter().collect();

        if let Some(&hat_cell) = coarser.first() {
            if self.options.strict && depth >= 1 {
                return Err(Error::OwnerRecursion { rank: self.mesh.rank, vef: format!("{fbox:?}") });
            }
            let key = self.mesh.cells[cell].key;
            let parent = key.parent().expect("a hanging face belongs to a refined cell");
            let owner = owner_face(dim, key.child_id(), face)
                .ok_or_else(|| self.unmatched(format!("{fbox:?} has no owner face")))?;
            let parent_box = crate::forest::ClosedBox::of_cell(self.view.brick(), &parent);
            let obox = parent_box.face(dim, owner);
            let hb = self.mesh.boxes[hat_cell];
            let hat = match matching_face(dim, &hb, &obox) {
                Some(h) => h,
                None if !self.options.strict => minimal_face(dim, &hb, &fbox).expect("coarser cell holds the face"),
                None => return Err(self.unmatched(format!("owner {obox:?} is not a face of {:?}", self.view.key(hat_cell)))),
            };
            let hat_id = self.topo.id_of(hat).expect("proper face");
            let oid = self.visit(hat_cell, hat_id, depth + 1)?;
            if self.options.strict && self.mesh.vefs[oid as usize].hanging {
                return Err(Error::OwnerRecursion { rank: self.mesh.rank, vef: format!("{fbox:?}") });
            }
            let tf = self.mesh.vefs[oid as usize].cells_around.clone();
            let v = &mut self.mesh.vefs[id as usize];
            v.coarser_around = tf;
            v.owner_vef = Some(oid);
            v.hanging = true;
        }
        Ok(id)
    }
}

impl FEMesh {
    fn classify(&mut self) {
        let local = |c: usize, m: &FEMesh| m.local_cells.contains(&c);
        // (a) and (b)
        for i in 0..self.vefs.len() {
            let v = &self.vefs[i];
            let a = v.cells_around.iter().any(|&c| local(c, self));
            let b = v.coarser_around.iter().any(|&c| local(c, self));
            self.vefs[i].local = a || b;
        }
        // (c) and (d), to a fixpoint
        loop {
            let mut changed = false;
            for i in 0..self.vefs.len() {
                if !self.vefs[i].local {
                    continue;
                }
                let Some(o) = self.vefs[i].owner_vef else { continue };
                for j in self.closure_vefs(o) {
                    if !self.vefs[j as usize].local {
                        self.vefs[j as usize].local = true;
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        // Ranks other than this one that also hold a VEF in their local set.
        let mut foreign = vec![false; self.vefs.len()];
        for i in 0..self.vefs.len() {
            let v = &self.vefs[i];
            let other = v.cells_around.iter().chain(&v.coarser_around).any(|&c| self.cells[c].owner != self.rank);
            if other {
                foreign[i] = true;
                if let Some(o) = v.owner_vef {
                    for j in self.closure_vefs(o) {
                        foreign[j as usize] = true;
                    }
                }
            }
        }
        for (v, f) in self.vefs.iter_mut().zip(foreign) {
            v.interface = v.local && f;
        }
    }

    /// A VEF and the materialized VEFs on its boundary.
    pub fn closure_vefs(&self, id: u32) -> Vec<u32> {
        let (c, f) = self.vefs[id as usize].home;
        let topo = reference(self.dim);
        let mut out = vec![id];
        for &g in &topo.face_of[f] {
            if let Some(j) = self.cells[c].vefs[g] {
                out.push(j);
            }
        }
        out
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ranks(&self) -> usize {
        self.ranks
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn options(&self) -> BuildOptions {
        self.options
    }

    /// Balance parameter of the underlying forest.
    pub fn k(&self) -> usize {
        self.options.k
    }

    pub fn ghost_dim(&self) -> usize {
        self.ghost_dim
    }

    pub fn brick(&self) -> &Brick {
        &self.brick
    }

    pub fn cells(&self) -> &[MeshCell] {
        &self.cells
    }

    pub fn cell_box(&self, c: usize) -> ClosedBox {
        self.boxes[c]
    }

    pub fn local_cells(&self) -> std::ops::Range<usize> {
        self.local_cells.clone()
    }

    pub fn is_local_cell(&self, c: usize) -> bool {
        self.local_cells.contains(&c)
    }

    pub fn vefs(&self) -> &[GlobalVef] {
        &self.vefs
    }

    pub fn vef(&self, id: u32) -> &GlobalVef {
        &self.vefs[id as usize]
    }

    pub fn vef_by_key(&self, key: &ClosedBox) -> Option<u32> {
        self.by_key.get(key).copied()
    }

    pub fn ids_where(&self, pred: impl Fn(&GlobalVef) -> bool) -> Vec<u32> {
        (0..self.vefs.len() as u32).filter(|&i| pred(&self.vefs[i as usize])).collect()
    }

    pub fn regular_set(&self) -> Vec<u32> {
        self.ids_where(|v| !v.hanging)
    }

    pub fn hanging_set(&self) -> Vec<u32> {
        self.ids_where(|v| v.hanging)
    }

    pub fn local_set(&self) -> Vec<u32> {
        self.ids_where(|v| v.local)
    }

    pub fn ghost_set(&self) -> Vec<u32> {
        self.ids_where(|v| !v.local)
    }

    pub fn interface_set(&self) -> Vec<u32> {
        self.ids_where(|v| v.interface)
    }

    pub fn interior_set(&self) -> Vec<u32> {
        self.ids_where(|v| v.local && !v.interface)
    }

    /// Per-VEF summary for golden tests and debugging.
    pub fn debug_json(&self) -> serde_json::Value {
        let vefs: Vec<_> = self
            .vefs
            .iter()
            .enumerate()
            .map(|(i, v)| {
                serde_json::json!({
                    "id": i,
                    "dim": v.dim,
                    "hanging": v.hanging,
                    "local": v.local,
                    "interface": v.interface,
                    "cells_around": v.cells_around.len(),
                    "coarser_around": v.coarser_around.len(),
                    "owner": v.owner_vef,
                })
            })
            .collect();
        serde_json::json!({ "rank": self.rank, "cells": self.cells.len(), "vefs": vefs })
    }
}

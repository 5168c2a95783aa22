//! Conforming Lagrangian spaces Q1/Q2 on an [`FEMesh`]: proc-local DOF
//! numbering and hanging-node constraints.
//!
//! Nodes are equispaced and identified by their doubled global integer
//! coordinates, so a node shared by several cells is the same key everywhere.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::femesh::FEMesh;
use crate::forest::{ClosedBox, RankView};
use crate::polytope::{reference, NFace};

/// Marker for a cell-local DOF whose VEF was not materialized.
pub const NO_DOF: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct FEDescriptor {
    pub dim: usize,
    pub degree: usize,
}

impl FEDescriptor {
    pub fn new(dim: usize, degree: usize) -> Result<Self> {
        if !(2..=3).contains(&dim) {
            return Err(Error::UnsupportedDimension(dim));
        }
        if !(1..=2).contains(&degree) {
            return Err(Error::InvalidParameter(format!("degree {degree} (expected 1 or 2)")));
        }
        Ok(FEDescriptor { dim, degree })
    }

    /// DOFs owned by the interior of one n-face (n = d for the cell interior).
    pub fn dofs_per_nface(&self, n: usize) -> usize {
        match self.degree {
            1 => usize::from(n == 0),
            _ => 1,
        }
    }

    /// Lowest face dimension carrying DOFs.
    pub fn lowest_dof_dim(&self) -> usize {
        (0..=self.dim).find(|&n| self.dofs_per_nface(n) > 0).unwrap()
    }

    /// Largest balance parameter for which constraints stay direct and local.
    pub fn max_k(&self) -> usize {
        self.lowest_dof_dim().max(1)
    }

    pub fn nodes_per_axis(&self) -> usize {
        self.degree + 1
    }

    pub fn num_cell_dofs(&self) -> usize {
        self.nodes_per_axis().pow(self.dim as u32)
    }

    /// Per-axis node index of cell-local DOF `alpha` (x fastest).
    pub fn node_index(&self, alpha: usize) -> [usize; 3] {
        let n = self.nodes_per_axis();
        let mut out = [0; 3];
        let mut rest = alpha;
        for o in out.iter_mut().take(self.dim) {
            *o = rest % n;
            rest /= n;
        }
        out
    }

    /// The reference face whose interior holds the node, or `None` for the cell interior.
    pub fn node_face(&self, alpha: usize) -> Option<NFace> {
        let idx = self.node_index(alpha);
        let mut free = 0u8;
        let mut high = 0u8;
        for (a, &i) in idx.iter().enumerate().take(self.dim) {
            if i == self.degree {
                high |= 1 << a;
            } else if i != 0 {
                free |= 1 << a;
            }
        }
        let f = NFace::new(free, high);
        (f.dim() < self.dim).then_some(f)
    }

    /// Node position in `[0,1]^d`.
    pub fn node_ref(&self, alpha: usize) -> [f64; 3] {
        self.node_index(alpha).map(|i| i as f64 / self.degree as f64)
    }

    /// Doubled global coordinates of a node of the cell with box `b`.
    pub fn node_key(&self, b: &ClosedBox, alpha: usize) -> [u64; 3] {
        let idx = self.node_index(alpha);
        let mut out = [0; 3];
        for a in 0..self.dim {
            let len = b.hi[a] - b.lo[a];
            out[a] = 2 * b.lo[a] + idx[a] as u64 * 2 * len / self.degree as u64;
        }
        out
    }

    pub fn shape(&self, alpha: usize, xi: [f64; 3]) -> f64 {
        let idx = self.node_index(alpha);
        (0..self.dim).map(|a| lagrange(self.degree, idx[a], xi[a])).product()
    }

    /// Gradient in reference coordinates.
    pub fn grad(&self, alpha: usize, xi: [f64; 3]) -> [f64; 3] {
        let idx = self.node_index(alpha);
        let mut g = [0.0; 3];
        for (a, ga) in g.iter_mut().enumerate().take(self.dim) {
            *ga = (0..self.dim)
                .map(|b| if a == b { lagrange_deriv(self.degree, idx[b], xi[b]) } else { lagrange(self.degree, idx[b], xi[b]) })
                .product();
        }
        g
    }
}

/// 1D equispaced Lagrange polynomial `i` of degree `r` on [0,1].
pub fn lagrange(r: usize, i: usize, x: f64) -> f64 {
    match (r, i) {
        (1, 0) => 1.0 - x,
        (1, _) => x,
        (2, 0) => 2.0 * (x - 0.5) * (x - 1.0),
        (2, 1) => -4.0 * x * (x - 1.0),
        (2, _) => 2.0 * x * (x - 0.5),
        _ => unreachable!("degree {r}"),
    }
}

pub fn lagrange_deriv(r: usize, i: usize, x: f64) -> f64 {
    match (r, i) {
        (1, 0) => -1.0,
        (1, _) => 1.0,
        (2, 0) => 4.0 * x - 3.0,
        (2, 1) => 4.0 - 8.0 * x,
        (2, _) => 4.0 * x - 1.0,
        _ => unreachable!("degree {r}"),
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DofInfo {
    /// VEF owning the DOF, `None` for cell-interior DOFs.
    pub vef: Option<u32>,
    /// First cell (view index) visiting the DOF.
    pub cell: usize,
    /// Doubled global node coordinates.
    pub node: [u64; 3],
    pub hanging: bool,
    pub local: bool,
    pub interface: bool,
    /// On the Dirichlet boundary of the domain.
    pub boundary: bool,
}

#[derive(Clone, Debug)]
pub struct DofMap {
    fe: FEDescriptor,
    cell_dofs: Vec<Vec<u32>>,
    dofs: Vec<DofInfo>,
    by_node: HashMap<[u64; 3], u32>,
}

pub fn enumerate_dofs(mesh: &FEMesh, fe: FEDescriptor) -> Result<DofMap> {
    if mesh.k() > fe.max_k() {
        return Err(Error::BalanceTooWeak { k: mesh.k(), limit: fe.max_k() });
    }
    enumerate_dofs_unchecked(mesh, fe)
}

/// Skips the balance check; constraints built on top may be non-local.
pub fn enumerate_dofs_unchecked(mesh: &FEMesh, fe: FEDescriptor) -> Result<DofMap> {
    if fe.dim != mesh.dim() {
        return Err(Error::InvalidParameter(format!("element for d={} on a d={} mesh", fe.dim, mesh.dim())));
    }
    let topo = reference(fe.dim);
    let brick = mesh.brick();
    let mut cell_dofs = Vec::with_capacity(mesh.cells().len());
    let mut dofs: Vec<DofInfo> = Vec::new();
    let mut of_vef: HashMap<u32, u32> = HashMap::new();
    let mut by_node = HashMap::new();
    for (c, cell) in mesh.cells().iter().enumerate() {
        let b = mesh.cell_box(c);
        let mut row = Vec::with_capacity(fe.num_cell_dofs());
        for alpha in 0..fe.num_cell_dofs() {
            let node = fe.node_key(&b, alpha);
            let id = match fe.node_face(alpha) {
                Some(f) => {
                    let Some(v) = cell.vefs[topo.id_of(f).expect("proper face")] else {
                        row.push(NO_DOF);
                        continue;
                    };
                    if let Some(&id) = of_vef.get(&v) {
                        if dofs[id as usize].node != node {
                            return Err(Error::Unmatched { rank: mesh.rank(), what: format!("node {node:?} glued to {:?}", dofs[id as usize].node) });
                        }
                        id
                    } else {
                        let vef = mesh.vef(v);
                        let id = dofs.len() as u32;
                        dofs.push(DofInfo {
                            vef: Some(v),
                            cell: c,
                            node,
                            hanging: vef.hanging,
                            local: vef.local,
                            interface: vef.interface,
                            boundary: brick.on_boundary(node.map(|x| x / 2)),
                        });
                        of_vef.insert(v, id);
                        id
                    }
                }
                None => {
                    let id = dofs.len() as u32;
                    dofs.push(DofInfo {
                        vef: None,
                        cell: c,
                        node,
                        hanging: false,
                        local: mesh.is_local_cell(c),
                        interface: false,
                        boundary: false,
                    });
                    id
                }
            };
            by_node.entry(node).or_insert(id);
            row.push(id);
        }
        cell_dofs.push(row);
    }
    Ok(DofMap { fe, cell_dofs, dofs, by_node })
}

impl DofMap {
    pub fn fe(&self) -> FEDescriptor {
        self.fe
    }

    pub fn len(&self) -> usize {
        self.dofs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dofs.is_empty()
    }

    pub fn dofs(&self) -> &[DofInfo] {
        &self.dofs
    }

    pub fn dof(&self, id: u32) -> &DofInfo {
        &self.dofs[id as usize]
    }

    /// Proc-local ids of a cell's DOFs in cell-local order ([`NO_DOF`] if absent).
    pub fn cell_dofs(&self, cell: usize) -> &[u32] {
        &self.cell_dofs[cell]
    }

    pub fn by_node(&self, node: &[u64; 3]) -> Option<u32> {
        self.by_node.get(node).copied()
    }

    fn ids_where(&self, pred: impl Fn(&DofInfo) -> bool) -> Vec<u32> {
        (0..self.dofs.len() as u32).filter(|&i| pred(&self.dofs[i as usize])).collect()
    }

    pub fn regular(&self) -> Vec<u32> {
        self.ids_where(|d| !d.hanging)
    }

    pub fn hanging(&self) -> Vec<u32> {
        self.ids_where(|d| d.hanging)
    }

    pub fn local(&self) -> Vec<u32> {
        self.ids_where(|d| d.local)
    }

    pub fn ghost(&self) -> Vec<u32> {
        self.ids_where(|d| !d.local)
    }

    pub fn interface(&self) -> Vec<u32> {
        self.ids_where(|d| d.local && d.interface)
    }

    pub fn interior(&self) -> Vec<u32> {
        self.ids_where(|d| d.local && !d.interface)
    }

    pub fn debug_json(&self, constraints: Option<&ConstraintSet>) -> serde_json::Value {
        let rows: Vec<_> = self
            .dofs
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let c = constraints.and_then(|c| c.get(i as u32));
                serde_json::json!({
                    "id": i,
                    "vef": d.vef,
                    "node": d.node,
                    "hanging": d.hanging,
                    "local": d.local,
                    "interface": d.interface,
                    "boundary": d.boundary,
                    "masters": c,
                })
            })
            .collect();
        serde_json::Value::Array(rows)
    }
}

/// Hanging DOF → (master DOF, coefficient), masters sorted by id.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ConstraintSet {
    rows: BTreeMap<u32, Vec<(u32, f64)>>,
}

impl ConstraintSet {
    pub fn get(&self, dof: u32) -> Option<&[(u32, f64)]> {
        self.rows.get(&dof).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[(u32, f64)])> {
        self.rows.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    /// Fill hanging entries of a nodal vector from its masters.
    pub fn distribute(&self, x: &mut [f64]) {
        for (&g, m) in &self.rows {
            x[g as usize] = m.iter().map(|&(j, c)| c * x[j as usize]).sum();
        }
    }
}

/// Constraints for every hanging DOF of the rank's local set.
///
/// The coefficient of a master is the value of its shape function on the
/// coarse cell at the hanging node. Every master is certified against the
/// view: a master that hangs on a cell missing from the view raises
/// [`Error::NonLocalConstraint`], one that hangs on a visible cell raises
/// [`Error::NonDirectConstraint`].
pub fn build_constraints(view: &RankView, mesh: &FEMesh, dofs: &DofMap) -> Result<ConstraintSet> {
    let fe = dofs.fe;
    let rank = mesh.rank();
    let mut rows = BTreeMap::new();
    for (g, d) in dofs.dofs.iter().enumerate() {
        if !(d.hanging && d.local) {
            continue;
        }
        let vef = mesh.vef(d.vef.expect("hanging DOFs sit on VEFs"));
        let owner = mesh.vef(vef.owner_vef.expect("hanging VEF has an owner"));
        let coarse = *vef.coarser_around.first().ok_or(Error::MissingVef { rank, node: d.node })?;
        let cb = mesh.cell_box(coarse);
        let xi: [f64; 3] = std::array::from_fn(|a| {
            if a < fe.dim {
                (d.node[a] as f64 - 2.0 * cb.lo[a] as f64) / (2.0 * (cb.hi[a] - cb.lo[a]) as f64)
            } else {
                0.0
            }
        });
        let mut masters = Vec::new();
        for alpha in 0..fe.num_cell_dofs() {
            let node = fe.node_key(&cb, alpha);
            if !(0..3).all(|a| 2 * owner.key.lo[a] <= node[a] && node[a] <= 2 * owner.key.hi[a]) {
                continue;
            }
            let c = fe.shape(alpha, xi);
            if c.abs() < 1e-14 {
                continue;
            }
            let m = dofs.cell_dofs[coarse][alpha];
            if m == NO_DOF {
                return Err(Error::MissingVef { rank, node });
            }
            certify(view, mesh, dofs, g as u32, m)?;
            masters.push((m, c));
        }
        masters.sort_by_key(|&(m, _)| m);
        rows.insert(g as u32, masters);
    }
    Ok(ConstraintSet { rows })
}

fn certify(view: &RankView, mesh: &FEMesh, dofs: &DofMap, g: u32, m: u32) -> Result<()> {
    let rank = mesh.rank();
    let (node, master) = (dofs.dof(g).node, dofs.dof(m));
    if master.hanging {
        return Err(Error::NonDirectConstraint { rank, node, master: master.node });
    }
    let Some(v) = master.vef else { return Ok(()) };
    match view.coarser_around(&mesh.vef(v).key) {
        Err(Error::Guard { cell, .. }) => Err(Error::NonLocalConstraint { rank, node, cell }),
        Err(e) => Err(e),
        Ok(c) if !c.is_empty() => Err(Error::NonDirectConstraint { rank, node, master: master.node }),
        Ok(_) => Ok(()),
    }
}

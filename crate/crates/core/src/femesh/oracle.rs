//! Global VEFs computed geometrically from the full leaf set, with box
//! containment tests only. Used as a reference for [`super::build_femesh`].

use std::collections::HashMap;

use crate::forest::{matching_face, minimal_face, ClosedBox, Forest};
use crate::polytope::reference;

#[derive(Clone, Debug)]
pub struct OracleVef {
    pub key: ClosedBox,
    pub dim: usize,
    /// Global leaf indices having the VEF as a face, ascending.
    pub cells_around: Vec<usize>,
    /// Global leaf indices holding the VEF in their closure but not as a face.
    pub coarser_around: Vec<usize>,
    /// Smallest face of the first coarser cell holding the VEF.
    pub owner: Option<ClosedBox>,
    /// All coarser cells agree on the owner box.
    pub owner_unique: bool,
}

impl OracleVef {
    pub fn hanging(&self) -> bool {
        !self.coarser_around.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct OracleMesh {
    pub vefs: Vec<OracleVef>,
    pub by_key: HashMap<ClosedBox, usize>,
    /// Per leaf, the VEF index of every proper reference face.
    pub cell_vefs: Vec<Vec<usize>>,
}

pub fn oracle_global_vefs(forest: &Forest) -> OracleMesh {
    let dim = forest.dim();
    let topo = reference(dim);
    let boxes: Vec<ClosedBox> = (0..forest.num_leaves()).map(|i| forest.cell_box(i)).collect();
    let mut vefs: Vec<OracleVef> = Vec::new();
    let mut by_key = HashMap::new();
    let mut cell_vefs = Vec::with_capacity(boxes.len());
    for (i, b) in boxes.iter().enumerate() {
        let mut row = Vec::with_capacity(topo.num_faces());
        for &f in &topo.faces {
            let fb = b.face(dim, f);
            let id = *by_key.entry(fb).or_insert_with(|| {
                vefs.push(OracleVef {
                    key: fb,
                    dim: f.dim(),
                    cells_around: Vec::new(),
                    coarser_around: Vec::new(),
                    owner: None,
                    owner_unique: true,
                });
                vefs.len() - 1
            });
            vefs[id].cells_around.push(i);
            row.push(id);
        }
        cell_vefs.push(row);
    }

    // Sweep over x: a cell can only hold a box if its low x is within the
    // largest cell length below the box's low x.
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by_key(|&i| boxes[i].lo[0]);
    let max_len = boxes.iter().map(|b| b.hi[0] - b.lo[0]).max().unwrap_or(0);
    for v in vefs.iter_mut() {
        let from = order.partition_point(|&i| boxes[i].lo[0] + max_len < v.key.lo[0]);
        let to = order.partition_point(|&i| boxes[i].lo[0] <= v.key.lo[0]);
        let mut coarser: Vec<usize> = order[from..to]
            .iter()
            .copied()
            .filter(|&i| boxes[i].contains(&v.key) && matching_face(dim, &boxes[i], &v.key).is_none())
            .collect();
        coarser.sort_unstable();
        let owners: Vec<ClosedBox> = coarser
            .iter()
            .map(|&i| {
                let f = minimal_face(dim, &boxes[i], &v.key).expect("contained");
                boxes[i].face(dim, f)
            })
            .collect();
        v.owner = owners.first().copied();
        v.owner_unique = owners.windows(2).all(|w| w[0] == w[1]);
        v.coarser_around = coarser;
    }
    OracleMesh { vefs, by_key, cell_vefs }
}

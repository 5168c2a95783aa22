//! Reference hypercube topology and the isotropic 1:2^d refinement rule.
//!
//! An n-face of the reference cell is described per axis: either pinned to the
//! low or high end, or free. Ids are dimension-major (vertices, then edges,
//! then faces); within one dimension, ids follow ascending free-axis mask and
//! then z-order over the pinned axes. Vertex ids therefore coincide with the
//! z-order child numbering.

use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Largest supported spatial dimension.
pub const MAX_DIM: usize = 3;
/// Upper bound on the number of n-faces (n < d) of a supported hypercube.
pub const MAX_FACES: usize = 26;

/// Position of an n-face along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Low,
    High,
    Free,
}

/// A face of the reference hypercube (or the cell itself when every axis is free).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NFace {
    /// Bit `a` set when axis `a` is free.
    pub free: u8,
    /// Bit `a` set when axis `a` is pinned to the high end. Ignored on free axes.
    pub high: u8,
}

impl NFace {
    pub fn new(free: u8, high: u8) -> Self {
        NFace { free, high: high & !free }
    }

    pub fn dim(self) -> usize {
        self.free.count_ones() as usize
    }

    pub fn side(self, axis: usize) -> Side {
        if self.free >> axis & 1 == 1 {
            Side::Free
        } else if self.high >> axis & 1 == 1 {
            Side::High
        } else {
            Side::Low
        }
    }

    /// True when `inner` lies in the closure of `self` (both on the same cell).
    pub fn closure_contains(self, inner: NFace) -> bool {
        let pinned = !self.free;
        // every axis pinned here must be pinned identically in `inner`
        inner.free & pinned == 0 && (inner.high ^ self.high) & pinned == 0
    }

    fn ternary_code(self, dim: usize) -> usize {
        let mut code = 0;
        for a in (0..dim).rev() {
            let digit = match self.side(a) {
                Side::Low => 0,
                Side::High => 1,
                Side::Free => 2,
            };
            code = code * 3 + digit;
        }
        code
    }
}

/// Outcome of [`RefinementRule::owner_nface`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Owner {
    Face(usize),
    ParentInterior,
}

/// Face enumeration and incidence for the reference d-cube.
#[derive(Clone, Debug)]
pub struct RefTopology {
    pub dim: usize,
    pub faces: Vec<NFace>,
    /// For each face, the ids of the lower-dimensional faces on its boundary.
    pub face_of: Vec<Vec<usize>>,
    /// For each face, the ids of the faces whose closure contains it (itself included).
    pub containing: Vec<Vec<usize>>,
    lookup: Vec<usize>,
}

impl RefTopology {
    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    pub fn num_vertices(&self) -> usize {
        1 << self.dim
    }

    /// Id of `face`, or `None` for the cell interior.
    pub fn id_of(&self, face: NFace) -> Option<usize> {
        let id = self.lookup[face.ternary_code(self.dim)];
        (id != usize::MAX).then_some(id)
    }

    pub fn face(&self, id: usize) -> NFace {
        self.faces[id]
    }

    /// Ids of all faces of a given topological dimension.
    pub fn faces_of_dim(&self, n: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.faces.len()).filter(move |&i| self.faces[i].dim() == n)
    }

    /// Vertex ids of a face, in z-order.
    pub fn vertices(&self, id: usize) -> Vec<usize> {
        let f = self.faces[id];
        (0..self.num_vertices())
            .filter(|&v| f.closure_contains(NFace::new(0, v as u8)))
            .collect()
    }
}

/// Build the topology of the reference square (d=2) or cube (d=3).
pub fn enumerate_nfaces(dim: usize) -> Result<RefTopology> {
    if !(2..=MAX_DIM).contains(&dim) {
        return Err(Error::UnsupportedDimension(dim));
    }
    let all = (1u8 << dim) - 1;
    let mut faces = Vec::new();
    for n in 0..dim {
        for free in 0..=all {
            if free.count_ones() as usize != n {
                continue;
            }
            for high in 0..=all {
                if high & free == 0 {
                    faces.push(NFace::new(free, high));
                }
            }
        }
    }
    let mut lookup = vec![usize::MAX; 3usize.pow(dim as u32)];
    for (i, f) in faces.iter().enumerate() {
        lookup[f.ternary_code(dim)] = i;
    }
    let face_of = faces
        .iter()
        .map(|f| {
            (0..faces.len())
                .filter(|&j| faces[j].dim() < f.dim() && f.closure_contains(faces[j]))
                .collect()
        })
        .collect();
    let containing = faces
        .iter()
        .map(|f| {
            (0..faces.len())
                .filter(|&j| faces[j].closure_contains(*f))
                .collect()
        })
        .collect();
    Ok(RefTopology { dim, faces, face_of, containing, lookup })
}

/// Shared topology tables for d = 2 and d = 3.
pub fn reference(dim: usize) -> &'static RefTopology {
    static TABLES: OnceLock<[RefTopology; 2]> = OnceLock::new();
    let t = TABLES.get_or_init(|| {
        [enumerate_nfaces(2).expect("d=2"), enumerate_nfaces(3).expect("d=3")]
    });
    assert!((2..=MAX_DIM).contains(&dim), "unsupported dimension {dim}");
    &t[dim - 2]
}

/// The isotropic refinement of a d-cube into 2^d z-ordered children.
#[derive(Clone, Debug)]
pub struct RefinementRule {
    pub dim: usize,
    pub topo: RefTopology,
    owner_table: Vec<Vec<Owner>>,
}

impl RefinementRule {
    pub fn new(dim: usize) -> Result<Self> {
        let topo = enumerate_nfaces(dim)?;
        let owner_table = (0..1usize << dim)
            .map(|child| {
                topo.faces
                    .iter()
                    .map(|&f| match owner_face(dim, child, f) {
                        Some(p) => Owner::Face(topo.id_of(p).expect("owner is a proper face")),
                        None => Owner::ParentInterior,
                    })
                    .collect()
            })
            .collect();
        Ok(RefinementRule { dim, topo, owner_table })
    }

    pub fn num_children(&self) -> usize {
        1 << self.dim
    }

    /// Offset of a child's anchor, in half-parent units.
    pub fn child_anchor(&self, child: usize) -> [u32; MAX_DIM] {
        let mut off = [0; MAX_DIM];
        for (a, o) in off.iter_mut().enumerate().take(self.dim) {
            *o = (child >> a & 1) as u32;
        }
        off
    }

    /// The parent n-face containing face `f` of `child`.
    pub fn owner_nface(&self, child: usize, f: usize) -> Owner {
        self.owner_table[child][f]
    }
}

/// Per-axis owner computation: a pinned child side maps to the parent position
/// 0, 1/2 or 1, and the midpoint becomes a free axis of the owner.
pub fn owner_face(dim: usize, child: usize, f: NFace) -> Option<NFace> {
    let mut free = 0u8;
    let mut high = 0u8;
    for a in 0..dim {
        let offset = (child >> a & 1) as u8;
        match f.side(a) {
            Side::Free => free |= 1 << a,
            side => {
                let twice = offset + u8::from(side == Side::High);
                match twice {
                    0 => {}
                    2 => high |= 1 << a,
                    _ => free |= 1 << a,
                }
            }
        }
    }
    if free.count_ones() as usize == dim {
        None
    } else {
        Some(NFace::new(free, high))
    }
}

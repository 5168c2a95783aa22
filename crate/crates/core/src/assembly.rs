//! Poisson systems: cell integration, constrained subassembly per rank, the
//! fully assembled row-distributed matrix, and CG in both modes.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dofdist::{assemble_interface, CommPattern, GlobalNumbering, Ownership};
use crate::error::{Error, Result};
use crate::femesh::FEMesh;
use crate::fespace::{ConstraintSet, DofMap, FEDescriptor, NO_DOF};
use crate::forest::{ClosedBox, ROOT_LEN};
use crate::simfabric::{Decoder, Encoder, Fabric, Outbox};

/// Right-hand sides on the brick, one tree being the unit cube.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Problem {
    /// 1 above the surface y = 1/2 + 1/4 sin(4 pi x) (2D) or
    /// z = 1/2 + 1/4 sin(4 pi x) sin(4 pi y) (3D), -1 on and below it.
    Sinusoid,
    /// u = prod sin(pi x_a), f = d pi^2 u.
    Manufactured,
}

impl Problem {
    pub fn rhs(&self, dim: usize, x: [f64; 3]) -> f64 {
        use std::f64::consts::PI;
        match self {
            Problem::Sinusoid => {
                let s = if dim == 2 {
                    x[1] - 0.5 - 0.25 * (4.0 * PI * x[0]).sin()
                } else {
                    x[2] - 0.5 - 0.25 * (4.0 * PI * x[0]).sin() * (4.0 * PI * x[1]).sin()
                };
                if s > 0.0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Problem::Manufactured => dim as f64 * PI * PI * self.exact(dim, x).unwrap(),
        }
    }

    pub fn exact(&self, dim: usize, x: [f64; 3]) -> Option<f64> {
        match self {
            Problem::Sinusoid => None,
            Problem::Manufactured => Some((0..dim).map(|a| (std::f64::consts::PI * x[a]).sin()).product()),
        }
    }
}

/// Gauss-Legendre rule on [0,1].
pub fn gauss(n: usize) -> (Vec<f64>, Vec<f64>) {
    let (x, w): (&[f64], &[f64]) = match n {
        1 => (&[0.0], &[2.0]),
        2 => (&[-0.577_350_269_189_625_8, 0.577_350_269_189_625_8], &[1.0, 1.0]),
        3 => (&[-0.774_596_669_241_483_4, 0.0, 0.774_596_669_241_483_4], &[0.555_555_555_555_555_6, 0.888_888_888_888_888_9, 0.555_555_555_555_555_6]),
        4 => (
            &[-0.861_136_311_594_052_6, -0.339_981_043_584_856_3, 0.339_981_043_584_856_3, 0.861_136_311_594_052_6],
            &[0.347_854_845_137_453_9, 0.652_145_154_862_546_1, 0.652_145_154_862_546_1, 0.347_854_845_137_453_9],
        ),
        _ => (
            &[-0.906_179_845_938_664, -0.538_469_310_105_683, 0.0, 0.538_469_310_105_683, 0.906_179_845_938_664],
            &[0.236_926_885_056_189_1, 0.478_628_670_499_366_5, 0.568_888_888_888_888_9, 0.478_628_670_499_366_5, 0.236_926_885_056_189_1],
        ),
    };
    (x.iter().map(|t| 0.5 * (t + 1.0)).collect(), w.iter().map(|v| 0.5 * v).collect())
}

/// Tensor-product points and weights on [0,1]^dim.
pub fn tensor_rule(dim: usize, n: usize) -> Vec<([f64; 3], f64)> {
    let (x, w) = gauss(n);
    let total = n.pow(dim as u32);
    (0..total)
        .map(|i| {
            let mut p = [0.0; 3];
            let mut wt = 1.0;
            let mut rest = i;
            for pa in p.iter_mut().take(dim) {
                *pa = x[rest % n];
                wt *= w[rest % n];
                rest /= n;
            }
            (p, wt)
        })
        .collect()
}

/// Axis-aligned cube in physical coordinates (one tree = unit length).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellGeom {
    pub dim: usize,
    pub lo: [f64; 3],
    pub h: f64,
}

impl CellGeom {
    pub fn of(dim: usize, b: &ClosedBox) -> Self {
        let s = f64::from(ROOT_LEN);
        CellGeom { dim, lo: b.lo.map(|v| v as f64 / s), h: (b.hi[0] - b.lo[0]) as f64 / s }
    }

    pub fn map(&self, xi: [f64; 3]) -> [f64; 3] {
        std::array::from_fn(|a| if a < self.dim { self.lo[a] + self.h * xi[a] } else { 0.0 })
    }
}

/// Dense stiffness matrix (row major) and load vector of one cell.
pub fn integrate_cell(geom: &CellGeom, fe: &FEDescriptor, f: &dyn Fn([f64; 3]) -> f64) -> (Vec<f64>, Vec<f64>) {
    let n = fe.num_cell_dofs();
    let dim = fe.dim;
    let mut k = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    let jac = geom.h.powi(dim as i32);
    for (xi, w) in tensor_rule(dim, fe.degree + 1) {
        let grads: Vec<[f64; 3]> = (0..n).map(|i| fe.grad(i, xi)).collect();
        let fx = f(geom.map(xi));
        for i in 0..n {
            for j in 0..n {
                let g: f64 = (0..dim).map(|a| grads[i][a] * grads[j][a]).sum();
                k[i * n + j] += w * jac * g / (geom.h * geom.h);
            }
            b[i] += w * jac * fx * fe.shape(i, xi);
        }
    }
    (k, b)
}

/// Compressed rows with sorted column ids.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct Csr {
    pub row_ptr: Vec<usize>,
    pub cols: Vec<u64>,
    pub vals: Vec<f64>,
}

impl Csr {
    /// Duplicate entries are summed in input order.
    pub fn from_triplets(rows: usize, mut t: Vec<(usize, u64, f64)>) -> Csr {
        t.sort_by_key(|e| (e.0, e.1));
        let mut row_ptr = vec![0; rows + 1];
        let mut cols = Vec::with_capacity(t.len());
        let mut vals: Vec<f64> = Vec::with_capacity(t.len());
        let mut last = None;
        for (r, c, v) in t {
            if last == Some((r, c)) {
                *vals.last_mut().unwrap() += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..rows {
            row_ptr[i + 1] += row_ptr[i];
        }
        Csr { row_ptr, cols, vals }
    }

    pub fn rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> (&[u64], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    pub fn entry_mut(&mut self, i: usize, col: u64) -> Option<&mut f64> {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        let k = self.cols[r.clone()].binary_search(&col).ok()?;
        Some(&mut self.vals[r.start + k])
    }

    pub fn mul(&self, x: impl Fn(u64) -> f64) -> Vec<f64> {
        (0..self.rows())
            .map(|i| {
                let (c, v) = self.row(i);
                c.iter().zip(v).map(|(&j, &a)| a * x(j)).sum()
            })
            .collect()
    }
}

/// One rank's constrained system over its proc-local DOF ids.
#[derive(Clone, Debug)]
pub struct SubSystem {
    pub rank: usize,
    pub matrix: Csr,
    pub rhs: Vec<f64>,
}

/// Unknowns a cell DOF expands to: itself, or the masters of its constraint.
/// Dirichlet unknowns are dropped (homogeneous values).
fn expand(rank: usize, dofs: &DofMap, constraints: &ConstraintSet, g: u32) -> Result<Vec<(u32, f64)>> {
    let d = dofs.dof(g);
    let terms = if d.hanging {
        let m = constraints.get(g).ok_or(Error::MissingVef { rank, node: d.node })?;
        for &(master, _) in m {
            if dofs.dof(master).hanging {
                return Err(Error::NonDirectConstraint { rank, node: d.node, master: dofs.dof(master).node });
            }
        }
        m.to_vec()
    } else {
        vec![(g, 1.0)]
    };
    Ok(terms.into_iter().filter(|&(i, _)| !dofs.dof(i).boundary).collect())
}

/// `C^T A_K C` over local cells, with homogeneous Dirichlet DOFs eliminated
/// and a unit diagonal placed at their owner.
pub fn assemble_subassembled(mesh: &FEMesh, dofs: &DofMap, constraints: &ConstraintSet, own: &Ownership, f: &dyn Fn([f64; 3]) -> f64) -> Result<SubSystem> {
    let fe = dofs.fe();
    let n = fe.num_cell_dofs();
    let rank = mesh.rank();
    let mut trip = Vec::new();
    let mut rhs = vec![0.0; dofs.len()];
    for c in mesh.local_cells() {
        let cb = mesh.cell_box(c);
        let (k, b) = integrate_cell(&CellGeom::of(fe.dim, &cb), &fe, f);
        let cd = dofs.cell_dofs(c);
        let mut exp = Vec::with_capacity(n);
        for (a, &g) in cd.iter().enumerate() {
            if g == NO_DOF {
                return Err(Error::MissingVef { rank, node: fe.node_key(&cb, a) });
            }
            exp.push(expand(rank, dofs, constraints, g)?);
        }
        for a in 0..n {
            for &(i, ci) in &exp[a] {
                rhs[i as usize] += ci * b[a];
                for (bi, eb) in exp.iter().enumerate() {
                    for &(j, cj) in eb {
                        trip.push((i as usize, u64::from(j), ci * cj * k[a * n + bi]));
                    }
                }
            }
        }
    }
    for (g, d) in dofs.dofs().iter().enumerate() {
        if d.boundary && d.local && !d.hanging && own.owner[g] == Some(rank) {
            trip.push((g, g as u64, 1.0));
        }
    }
    Ok(SubSystem { rank, matrix: Csr::from_triplets(dofs.len(), trip), rhs })
}

/// Owned rows of the global matrix, columns in global ids.
#[derive(Clone, Debug)]
pub struct FullSystem {
    pub rank: usize,
    pub offset: u64,
    pub matrix: Csr,
    pub rhs: Vec<f64>,
    /// Global ids of off-rank columns, grouped by owner.
    pub halo: BTreeMap<usize, Vec<u64>>,
    /// Owned rows other ranks need, grouped by requester.
    pub export: BTreeMap<usize, Vec<usize>>,
}

fn owner_of(offsets: &[u64], gid: u64) -> usize {
    offsets.partition_point(|&o| o <= gid) - 1
}

/// Row-distributed global system: a sparsity round, owner-side allocation, a
/// value round, then a halo request round for matrix-vector products.
pub fn assemble_fully(subs: &[SubSystem], dofs: &[DofMap], nums: &[GlobalNumbering], fabric: &mut Fabric) -> Result<Vec<FullSystem>> {
    let ranks = fabric.ranks();
    let mut offsets: Vec<u64> = fabric.allgather(&nums.iter().map(|n| n.offset).collect::<Vec<_>>())?;
    offsets.push(nums[0].total);
    let gid = |p: usize, g: u64| nums[p].ids[g as usize].expect("unknowns are numbered");

    // entries in global ids, split by row owner
    let mut remote: Vec<BTreeMap<usize, Vec<(u64, u64, f64)>>> = vec![BTreeMap::new(); ranks];
    let mut mine: Vec<Vec<(u64, u64, f64)>> = vec![Vec::new(); ranks];
    let mut rhs_remote: Vec<BTreeMap<usize, Vec<(u64, f64)>>> = vec![BTreeMap::new(); ranks];
    for (p, s) in subs.iter().enumerate() {
        for i in 0..s.matrix.rows() {
            let (c, v) = s.matrix.row(i);
            if c.is_empty() && s.rhs[i] == 0.0 {
                continue;
            }
            let gi = gid(p, i as u64);
            let o = owner_of(&offsets, gi);
            let list: Vec<(u64, u64, f64)> = c.iter().zip(v).map(|(&j, &a)| (gi, gid(p, j), a)).collect();
            if o == p {
                mine[p].extend(list);
            } else {
                remote[p].entry(o).or_default().extend(list);
                rhs_remote[p].entry(o).or_default().push((gi, s.rhs[i]));
            }
        }
        let _ = &dofs[p];
    }

    // (A) sparsity
    let mut outbox = Outbox::new();
    for p in 0..ranks {
        for (&o, list) in &remote[p] {
            let mut e = Encoder::new();
            for &(r, c, _) in list {
                e.u64(r).u64(c);
            }
            outbox.insert((p, o), vec![e.finish()]);
        }
    }
    let inbox = fabric.neighbor_exchange(outbox)?;
    // (B) allocate
    let mut out = Vec::with_capacity(ranks);
    for p in 0..ranks {
        let owned = (offsets[p + 1] - offsets[p]) as usize;
        let mut pattern: Vec<(usize, u64, f64)> = mine[p].iter().map(|&(r, c, _)| ((r - offsets[p]) as usize, c, 0.0)).collect();
        for (_, msgs) in inbox.for_rank(p) {
            let mut d = Decoder::new(&msgs[0]);
            while !d.is_empty() {
                let (r, c) = (d.u64()?, d.u64()?);
                pattern.push(((r - offsets[p]) as usize, c, 0.0));
            }
        }
        let matrix = Csr::from_triplets(owned, pattern);
        let mut rhs = vec![0.0; owned];
        for (g, &id) in nums[p].ids.iter().enumerate() {
            if let Some(id) = id {
                if owner_of(&offsets, id) == p {
                    rhs[(id - offsets[p]) as usize] += subs[p].rhs[g];
                }
            }
        }
        out.push(FullSystem { rank: p, offset: offsets[p], matrix, rhs, halo: BTreeMap::new(), export: BTreeMap::new() });
    }
    // (C) values: own entries first, then remote partial sums in sender order
    for p in 0..ranks {
        for &(r, c, v) in &mine[p] {
            let e = out[p].matrix.entry_mut((r - offsets[p]) as usize, c).ok_or(Error::NoPatternEntry { rank: p, row: r, col: c })?;
            *e += v;
        }
    }
    let mut outbox = Outbox::new();
    for p in 0..ranks {
        for (&o, list) in &remote[p] {
            let mut e = Encoder::new();
            e.u64(list.len() as u64);
            for &(r, c, v) in list {
                e.u64(r).u64(c).f64(v);
            }
            let rl = &rhs_remote[p][&o];
            for &(r, v) in rl {
                e.u64(r).f64(v);
            }
            outbox.insert((p, o), vec![e.finish()]);
        }
    }
    let inbox = fabric.neighbor_exchange(outbox)?;
    for (p, sys) in out.iter_mut().enumerate() {
        for (_, msgs) in inbox.for_rank(p) {
            let mut d = Decoder::new(&msgs[0]);
            let n = d.u64()?;
            for _ in 0..n {
                let (r, c, v) = (d.u64()?, d.u64()?, d.f64()?);
                let e = sys.matrix.entry_mut((r - offsets[p]) as usize, c).ok_or(Error::NoPatternEntry { rank: p, row: r, col: c })?;
                *e += v;
            }
            while !d.is_empty() {
                let (r, v) = (d.u64()?, d.f64()?);
                sys.rhs[(r - offsets[p]) as usize] += v;
            }
        }
    }
    // halo requests
    let mut outbox = Outbox::new();
    for (p, sys) in out.iter_mut().enumerate() {
        let mut need: BTreeMap<usize, std::collections::BTreeSet<u64>> = BTreeMap::new();
        for &c in &sys.matrix.cols {
            let o = owner_of(&offsets, c);
            if o != p {
                need.entry(o).or_default().insert(c);
            }
        }
        for (o, set) in need {
            let list: Vec<u64> = set.into_iter().collect();
            let mut e = Encoder::new();
            for &g in &list {
                e.u64(g);
            }
            outbox.insert((p, o), vec![e.finish()]);
            sys.halo.insert(o, list);
        }
    }
    let inbox = fabric.neighbor_exchange(outbox)?;
    for (p, sys) in out.iter_mut().enumerate() {
        for (src, msgs) in inbox.for_rank(p) {
            let mut d = Decoder::new(&msgs[0]);
            let mut rows = Vec::new();
            while !d.is_empty() {
                rows.push((d.u64()? - offsets[p]) as usize);
            }
            sys.export.insert(src, rows);
        }
    }
    Ok(out)
}

/// Matrix-vector product on the fully assembled system (one halo round).
pub fn full_matvec(systems: &[FullSystem], x: &[Vec<f64>], fabric: &mut Fabric) -> Result<Vec<Vec<f64>>> {
    let mut outbox = Outbox::new();
    for s in systems {
        for (&q, rows) in &s.export {
            let mut e = Encoder::new();
            for &r in rows {
                e.f64(x[s.rank][r]);
            }
            outbox.insert((s.rank, q), vec![e.finish()]);
        }
    }
    let inbox = fabric.neighbor_exchange(outbox)?;
    let mut y = Vec::with_capacity(systems.len());
    for s in systems {
        let mut halo: HashMap<u64, f64> = HashMap::new();
        for (src, msgs) in inbox.for_rank(s.rank) {
            let mut d = Decoder::new(&msgs[0]);
            for &g in &s.halo[&src] {
                halo.insert(g, d.f64()?);
            }
        }
        let owned = x[s.rank].len() as u64;
        y.push(s.matrix.mul(|g| if g >= s.offset && g < s.offset + owned { x[s.rank][(g - s.offset) as usize] } else { halo[&g] }));
    }
    Ok(y)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgOptions {
    pub tol: f64,
    pub maxit: usize,
}

impl Default for CgOptions {
    fn default() -> Self {
        CgOptions { tol: 1e-13, maxit: 10_000 }
    }
}

fn cg<V: Clone>(
    b: Vec<V>,
    opts: CgOptions,
    fabric: &mut Fabric,
    mut apply: impl FnMut(&[V], &mut Fabric) -> Result<Vec<V>>,
    dot: impl Fn(&[V], &[V], &mut Fabric) -> Result<f64>,
    axpy: impl Fn(f64, &[V], &mut [V]),
    scale_add: impl Fn(&[V], f64, &mut [V]),
    zero: impl Fn(&[V]) -> Vec<V>,
) -> Result<(Vec<V>, usize)> {
    let mut x = zero(&b);
    let bnorm = dot(&b, &b, fabric)?.sqrt();
    if bnorm == 0.0 {
        return Ok((x, 0));
    }
    let mut r = b.clone();
    let mut p = b;
    let mut rr = dot(&r, &r, fabric)?;
    for it in 1..=opts.maxit {
        let q = apply(&p, fabric)?;
        let pq = dot(&p, &q, fabric)?;
        if pq <= 0.0 {
            return Err(Error::NotPositiveDefinite(pq));
        }
        let alpha = rr / pq;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &q, &mut r);
        let rr_new = dot(&r, &r, fabric)?;
        if rr_new.sqrt() <= opts.tol * bnorm {
            return Ok((x, it));
        }
        scale_add(&r, rr_new / rr, &mut p);
        rr = rr_new;
    }
    Err(Error::NotConverged(opts.maxit))
}

fn vaxpy(a: f64, x: &[Vec<f64>], y: &mut [Vec<f64>]) {
    for (xp, yp) in x.iter().zip(y) {
        for (xi, yi) in xp.iter().zip(yp) {
            *yi += a * xi;
        }
    }
}

/// p = r + beta p
fn vscale_add(r: &[Vec<f64>], beta: f64, p: &mut [Vec<f64>]) {
    for (rp, pp) in r.iter().zip(p) {
        for (ri, pi) in rp.iter().zip(pp) {
            *pi = ri + beta * *pi;
        }
    }
}

fn vzero(b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    b.iter().map(|v| vec![0.0; v.len()]).collect()
}

/// CG on the subassembled operator; every product is followed by interface
/// assembly, and dot products count each DOF at its owner only.
pub fn cg_subassembled(subs: &[SubSystem], patterns: &[CommPattern], dofs: &[DofMap], owns: &[Ownership], fabric: &mut Fabric, opts: CgOptions) -> Result<(Vec<Vec<f64>>, usize)> {
    let mut b: Vec<Vec<f64>> = subs.iter().map(|s| s.rhs.clone()).collect();
    assemble_interface(patterns, dofs, &mut b, fabric)?;
    let owned: Vec<Vec<bool>> = owns.iter().map(|o| o.owner.iter().map(|&w| w == Some(o.rank)).collect()).collect();
    let dot = |x: &[Vec<f64>], y: &[Vec<f64>], fabric: &mut Fabric| {
        let parts: Vec<f64> = (0..x.len()).map(|p| (0..x[p].len()).filter(|&i| owned[p][i]).map(|i| x[p][i] * y[p][i]).sum()).collect();
        fabric.allreduce_sum(&parts)
    };
    let apply = |x: &[Vec<f64>], fabric: &mut Fabric| {
        let mut y: Vec<Vec<f64>> = subs.iter().map(|s| s.matrix.mul(|j| x[s.rank][j as usize])).collect();
        assemble_interface(patterns, dofs, &mut y, fabric)?;
        Ok(y)
    };
    cg(b, opts, fabric, apply, dot, vaxpy, vscale_add, vzero)
}

/// CG on the fully assembled operator; vectors are owned slices.
pub fn cg_full(systems: &[FullSystem], fabric: &mut Fabric, opts: CgOptions) -> Result<(Vec<Vec<f64>>, usize)> {
    let b: Vec<Vec<f64>> = systems.iter().map(|s| s.rhs.clone()).collect();
    let dot = |x: &[Vec<f64>], y: &[Vec<f64>], fabric: &mut Fabric| {
        let parts: Vec<f64> = x.iter().zip(y).map(|(a, b)| a.iter().zip(b).map(|(u, v)| u * v).sum()).collect();
        fabric.allreduce_sum(&parts)
    };
    let apply = |x: &[Vec<f64>], fabric: &mut Fabric| full_matvec(systems, x, fabric);
    cg(b, opts, fabric, apply, dot, vaxpy, vscale_add, vzero)
}

/// Entries of all ranks' owned rows in MatrixMarket coordinate format (1-based).
pub fn write_matrix_market(systems: &[FullSystem], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    let n: usize = systems.iter().map(|s| s.matrix.rows()).sum();
    let nnz: usize = systems.iter().map(|s| s.matrix.nnz()).sum();
    writeln!(w, "%%MatrixMarket matrix coordinate real general")?;
    writeln!(w, "{n} {n} {nnz}")?;
    for s in systems {
        for i in 0..s.matrix.rows() {
            let (c, v) = s.matrix.row(i);
            for (&j, &a) in c.iter().zip(v) {
                writeln!(w, "{} {} {:.17e}", s.offset + i as u64 + 1, j + 1, a)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, h: f64) -> CellGeom {
        CellGeom { dim, lo: [0.0; 3], h }
    }

    #[test]
    fn q1_unit_square_stiffness() {
        let fe = FEDescriptor::new(2, 1).unwrap();
        let (k, _) = integrate_cell(&unit(2, 1.0), &fe, &|_| 0.0);
        // dofs 0:(0,0) 1:(1,0) 2:(0,1) 3:(1,1)
        let close = |a: f64, b: f64| (a - b).abs() < 1e-14;
        assert!(close(k[0], 2.0 / 3.0));
        assert!(close(k[3], -1.0 / 3.0));
        assert!(close(k[1], -1.0 / 6.0));
        assert!(close(k[2], -1.0 / 6.0));
    }

    #[test]
    fn constants_in_kernel_and_scaling() {
        for dim in 2..=3 {
            for degree in 1..=2 {
                let fe = FEDescriptor::new(dim, degree).unwrap();
                let n = fe.num_cell_dofs();
                let (k1, _) = integrate_cell(&unit(dim, 1.0), &fe, &|_| 1.0);
                let (kh, _) = integrate_cell(&unit(dim, 0.25), &fe, &|_| 1.0);
                for i in 0..n {
                    let s: f64 = (0..n).map(|j| k1[i * n + j]).sum();
                    assert!(s.abs() < 1e-13);
                    for j in 0..n {
                        assert!((k1[i * n + j] - k1[j * n + i]).abs() < 1e-15);
                        let want = k1[i * n + j] * 0.25f64.powi(dim as i32 - 2);
                        assert!((kh[i * n + j] - want).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn load_vector_integrates_constants() {
        let fe = FEDescriptor::new(3, 2).unwrap();
        let (_, b) = integrate_cell(&unit(3, 0.5), &fe, &|_| 1.0);
        assert!((b.iter().sum::<f64>() - 0.125).abs() < 1e-14);
    }

    #[test]
    fn csr_merges_duplicates() {
        let m = Csr::from_triplets(2, vec![(1, 3, 1.0), (0, 2, 2.0), (1, 3, 0.5), (1, 0, 4.0)]);
        assert_eq!(m.row(1), (&[0u64, 3][..], &[4.0, 1.5][..]));
        assert_eq!(m.mul(|j| j as f64), vec![4.0, 4.5]);
    }

    #[test]
    fn identity_converges_in_one_step() {
        let mut fabric = Fabric::new(1);
        let sys = FullSystem {
            rank: 0,
            offset: 0,
            matrix: Csr::from_triplets(3, (0..3).map(|i| (i, i as u64, 1.0)).collect()),
            rhs: vec![1.0, 2.0, 3.0],
            halo: BTreeMap::new(),
            export: BTreeMap::new(),
        };
        let (x, it) = cg_full(&[sys], &mut fabric, CgOptions::default()).unwrap();
        assert_eq!(it, 1);
        assert_eq!(x[0], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn gauss_rules_integrate_polynomials() {
        for n in 1..=5 {
            let (x, w) = gauss(n);
            let deg = 2 * n - 1;
            let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(deg as i32)).sum();
            assert!((s - 1.0 / (deg as f64 + 1.0)).abs() < 1e-14);
        }
    }
}

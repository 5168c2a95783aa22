#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use forest_fe::femesh::{build_femesh, oracle_global_vefs};
use forest_fe::forest::{ghost_layer, Brick, ClosedBox, CopyPayload, Flag, Forest};
use forest_fe::simfabric::Fabric;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A random brick: one tree, a row of two, a 2x2 block or an L-shape.
pub fn random_brick(rng: &mut ChaCha8Rng, dim: usize) -> Brick {
    match rng.gen_range(0..4) {
        0 => Brick::new(dim, &[1, 1, 1][..dim]).unwrap(),
        1 => Brick::new(dim, &[2, 1, 1][..dim]).unwrap(),
        2 => Brick::new(dim, &[2, 2, 1][..dim]).unwrap(),
        _ => Brick::l_shape(dim).unwrap(),
    }
}

/// Random refine/coarsen rounds, each followed by `balance(k)`, then a random
/// partition over `ranks`.
pub fn random_forest(rng: &mut ChaCha8Rng, dim: usize, k: usize, rounds: usize, ranks: usize, max_leaves: usize) -> Forest {
    let brick = random_brick(rng, dim);
    let mut f = Forest::new(brick, 1, ranks).unwrap();
    for _ in 0..rounds {
        let budget = f.num_leaves() < max_leaves / (1 << dim);
        let flags: Vec<Flag> = f
            .leaves()
            .iter()
            .map(|_| {
                let x: f64 = rng.gen();
                if budget && x < 0.2 {
                    Flag::Refine
                } else if x > 0.7 {
                    Flag::Coarsen
                } else {
                    Flag::Keep
                }
            })
            .collect();
        f = f.adapt_indexed(&flags, &mut CopyPayload).balance(k).unwrap();
    }
    let weights: Vec<f64> = (0..f.num_leaves()).map(|_| rng.gen_range(0.5..2.0)).collect();
    f.partition(&weights).unwrap()
}

/// Brute-force 2:1 check across contacts of dimension at least `k`.
pub fn balance_violations(f: &Forest, k: usize) -> usize {
    let boxes: Vec<ClosedBox> = (0..f.num_leaves()).map(|i| f.cell_box(i)).collect();
    let mut bad = 0;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            if let Some(c) = boxes[i].intersect(&boxes[j]) {
                let (a, b) = (f.leaves()[i].level, f.leaves()[j].level);
                if c.dim() >= k && a.abs_diff(b) > 1 {
                    bad += 1;
                }
            }
        }
    }
    bad
}

#[derive(Default, Debug)]
pub struct MeshReport {
    pub violations: Vec<String>,
    pub ghost_rounds: u64,
    pub build_rounds: u64,
    pub checked_vefs: usize,
}

/// Build every rank's mesh with `s = k` ghosts and compare against the
/// geometric oracle and the proposition-level claims.
pub fn check_femesh(f: &Forest, k: usize) -> MeshReport {
    let mut rep = MeshReport::default();
    let dim = f.dim();
    let oracle = oracle_global_vefs(f);
    let level = |i: usize| f.leaves()[i].level;

    // every (cell, face) pair is counted once
    let faces_total: usize = oracle.vefs.iter().map(|v| v.cells_around.len()).sum();
    if faces_total != f.num_leaves() * forest_fe::polytope::reference(dim).num_faces() {
        rep.violations.push("oracle does not cover every cell face exactly once".into());
    }
    for v in &oracle.vefs {
        let lo = v.cells_around.iter().map(|&i| level(i)).min().unwrap();
        if v.coarser_around.iter().any(|&i| level(i) >= lo) {
            rep.violations.push(format!("A.1 fails at {:?}", v.key));
        }
    }

    let mut fabric = Fabric::new(f.ranks());
    let forest = std::sync::Arc::new(f.clone());
    let views = ghost_layer(forest, k, &mut fabric).unwrap();
    rep.ghost_rounds = fabric.rounds();
    let mut meshes = Vec::new();
    for v in &views {
        match build_femesh(v, k) {
            Ok(m) => meshes.push(m),
            Err(e) => {
                rep.violations.push(format!("rank {}: {e}", v.rank()));
                return rep;
            }
        }
    }
    rep.build_rounds = fabric.rounds() - rep.ghost_rounds;

    let local_keys: Vec<BTreeSet<ClosedBox>> =
        meshes.iter().map(|m| m.vefs().iter().filter(|v| v.local).map(|v| v.key).collect()).collect();

    for (p, (view, m)) in views.iter().zip(&meshes).enumerate() {
        let in_view: HashMap<usize, usize> = (0..view.len()).map(|i| (view.global_index(i), i)).collect();
        let restrict = |set: &[usize]| -> Vec<usize> {
            let mut out: Vec<usize> = set.iter().filter_map(|g| in_view.get(g).copied()).collect();
            out.sort_unstable();
            out
        };
        for (id, v) in m.vefs().iter().enumerate() {
            if !v.cells_around.iter().any(|&c| m.is_local_cell(c)) {
                continue;
            }
            rep.checked_vefs += 1;
            let Some(&oi) = oracle.by_key.get(&v.key) else {
                rep.violations.push(format!("rank {p}: VEF {:?} unknown to the oracle", v.key));
                continue;
            };
            let ov = &oracle.vefs[oi];
            if v.cells_around != restrict(&ov.cells_around) {
                rep.violations.push(format!("rank {p}: T_F differs at {:?}", v.key));
            }
            if v.coarser_around != restrict(&ov.coarser_around) {
                rep.violations.push(format!("rank {p}: coarser set differs at {:?}", v.key));
            }
            if v.hanging != ov.hanging() {
                rep.violations.push(format!("rank {p}: classification differs at {:?}", v.key));
            }
            if let Some(o) = v.owner_vef {
                let owner = m.vef(o);
                if Some(owner.key) != ov.owner {
                    rep.violations.push(format!("rank {p}: owner of {:?} differs", v.key));
                }
                if owner.dim >= k && v.coarser_around != owner.cells_around {
                    rep.violations.push(format!("rank {p}: coarser set is not the owner's cells at {:?}", v.key));
                }
                for j in m.closure_vefs(o) {
                    let g = m.vef(j);
                    let must = k == 1 && v.dim == 0 || g.dim >= k;
                    if must && g.hanging {
                        rep.violations.push(format!("rank {p}: owner closure of {:?} has hanging {:?}", v.key, g.key));
                    }
                }
            }
            let _ = id;
        }
        // regular/hanging agreement on the whole local set
        for v in m.vefs().iter().filter(|v| v.local) {
            if let Some(&oi) = oracle.by_key.get(&v.key) {
                if v.hanging != oracle.vefs[oi].hanging() {
                    rep.violations.push(format!("rank {p}: local VEF {:?} misclassified", v.key));
                }
            }
            let shared = (0..meshes.len()).any(|q| q != p && local_keys[q].contains(&v.key));
            if shared != v.interface {
                rep.violations.push(format!("rank {p}: interface flag wrong at {:?}", v.key));
            }
        }
    }
    rep
}

/// Four octrees on a 2x2x1 brick: the lower-left tree refined once with its
/// upper-right child refined again, two trees refined once, and the upper-right
/// tree left as a single root cell. One rank per cell.
pub fn fig3_forest() -> Forest {
    let brick = Brick::new(3, &[2, 2, 1]).unwrap();
    let f = Forest::new(brick, 1, 1).unwrap();
    let flags: Vec<Flag> = f
        .leaves()
        .iter()
        .map(|k| match k.tree {
            3 => Flag::Coarsen,
            0 if k.child_id() == 3 => Flag::Refine,
            _ => Flag::Keep,
        })
        .collect();
    let f = f.adapt_indexed(&flags, &mut CopyPayload);
    f.with_offsets((0..=f.num_leaves()).collect()).unwrap()
}

/// Doubled global coordinates of a point given in quarters of a tree length.
pub fn node4(x: u64, y: u64, z: u64) -> [u64; 3] {
    let r = u64::from(forest_fe::forest::ROOT_LEN);
    [x * r / 2, y * r / 2, z * r / 2]
}

pub struct Distributed {
    pub views: Vec<forest_fe::forest::RankView>,
    pub meshes: Vec<forest_fe::femesh::FEMesh>,
    pub dofs: Vec<forest_fe::fespace::DofMap>,
    pub fabric: Fabric,
}

pub fn distribute(f: &Forest, k: usize, s: usize, degree: usize) -> Distributed {
    let mut fabric = Fabric::new(f.ranks());
    let views = ghost_layer(std::sync::Arc::new(f.clone()), s, &mut fabric).unwrap();
    let meshes: Vec<_> = views.iter().map(|v| build_femesh(v, k).unwrap()).collect();
    let fe = forest_fe::fespace::FEDescriptor::new(f.dim(), degree).unwrap();
    let dofs = meshes.iter().map(|m| forest_fe::fespace::enumerate_dofs(m, fe).unwrap()).collect();
    Distributed { views, meshes, dofs, fabric }
}

/// Ranks holding a VEF in their local set, by definition over the whole
/// forest: owners of the cells around it and of the coarser cells around it,
/// plus, for VEFs on the closure of an owner VEF, the ranks of the VEFs
/// hanging on it.
pub fn oracle_local_ranks(f: &Forest) -> (forest_fe::femesh::OracleMesh, Vec<BTreeSet<usize>>) {
    let oracle = oracle_global_vefs(f);
    let mut ranks: Vec<BTreeSet<usize>> = oracle
        .vefs
        .iter()
        .map(|v| v.cells_around.iter().chain(&v.coarser_around).map(|&c| f.owner(c)).collect())
        .collect();
    loop {
        let mut changed = false;
        for (i, v) in oracle.vefs.iter().enumerate() {
            let Some(o) = v.owner else { continue };
            let coarse = v.coarser_around[0];
            let add = ranks[i].clone();
            for &j in &oracle.cell_vefs[coarse] {
                if o.contains(&oracle.vefs[j].key) {
                    let before = ranks[j].len();
                    ranks[j].extend(&add);
                    changed |= ranks[j].len() != before;
                }
            }
        }
        if !changed {
            break;
        }
    }
    (oracle, ranks)
}

#[derive(Default, Debug)]
pub struct DofReport {
    pub violations: Vec<String>,
    pub ownership_rounds: u64,
    pub shared_dofs: usize,
}

/// Ownership, patterns and numbering on `f` (s = 0) against the serial oracle.
pub fn check_dofdist(f: &Forest, k: usize, degree: usize) -> DofReport {
    use forest_fe::dofdist::{assemble_interface, build_comm_pattern, compute_ownership, global_numbering};
    let mut rep = DofReport::default();
    let (oracle, lranks) = oracle_local_ranks(f);
    let mut d = distribute(f, k, 0, degree);
    let before = d.fabric.rounds();
    let own = match compute_ownership(&d.views, &d.meshes, &d.dofs, &mut d.fabric) {
        Ok(o) => o,
        Err(e) => {
            rep.violations.push(e.to_string());
            return rep;
        }
    };
    rep.ownership_rounds = d.fabric.rounds() - before;
    for p in 0..f.ranks() {
        let (m, dm) = (&d.meshes[p], &d.dofs[p]);
        for (g, info) in dm.dofs().iter().enumerate() {
            if !info.local || info.hanging {
                continue;
            }
            let Some(v) = info.vef else { continue };
            let key = m.vef(v).key;
            let oi = oracle.by_key[&key];
            let ranks = &lranks[oi];
            if !ranks.contains(&p) {
                rep.violations.push(format!("rank {p}: DOF {:?} is local but the oracle disagrees", info.node));
            }
            let interface = ranks.len() > 1;
            if interface != info.interface {
                rep.violations.push(format!("rank {p}: DOF {:?} interface flag", info.node));
                continue;
            }
            if !interface {
                continue;
            }
            rep.shared_dofs += 1;
            let want_owner = oracle.vefs[oi].cells_around.iter().map(|&c| f.owner(c)).max().unwrap();
            if own[p].owner[g] != Some(want_owner) {
                rep.violations.push(format!("rank {p}: owner of {:?} is {:?}, want {want_owner}", info.node, own[p].owner[g]));
            }
            if want_owner == p && own[p].sharers[g] != *ranks {
                rep.violations.push(format!("rank {p}: sharers of {:?} are {:?}, want {ranks:?}", info.node, own[p].sharers[g]));
            }
        }
    }
    if !rep.violations.is_empty() {
        return rep;
    }
    let pats: Vec<_> = own.iter().zip(&d.dofs).map(|(o, dm)| build_comm_pattern(o, dm)).collect();
    for p in 0..pats.len() {
        for (&q, list) in &pats[p].snd {
            let mine: Vec<_> = list.iter().map(|&g| d.dofs[p].dof(g).node).collect();
            let theirs: Vec<_> = pats[q].rcv.get(&p).map(|l| l.iter().map(|&g| d.dofs[q].dof(g).node).collect()).unwrap_or_default();
            if mine != theirs {
                rep.violations.push(format!("pairing broken between {p} and {q}"));
            }
        }
        for (&q, list) in &pats[p].rcv {
            if pats[q].snd.get(&p).map(Vec::len) != Some(list.len()) {
                rep.violations.push(format!("rank {q} sends nothing matching rank {p}'s receive list"));
            }
        }
    }
    let num = global_numbering(&own, &d.dofs, &pats, &mut d.fabric).unwrap();
    let total = num[0].total;
    let mut seen: HashMap<u64, [u64; 3]> = HashMap::new();
    for p in 0..pats.len() {
        for (g, info) in d.dofs[p].dofs().iter().enumerate() {
            if !info.local || info.hanging {
                continue;
            }
            let Some(id) = num[p].ids[g] else {
                rep.violations.push(format!("rank {p}: DOF {:?} has no global id", info.node));
                continue;
            };
            let o = own[p].owner[g].unwrap();
            if !num[o].owned_range().contains(&id) {
                rep.violations.push(format!("rank {p}: id {id} outside the owner's range"));
            }
            if let Some(prev) = seen.insert(id, info.node) {
                if prev != info.node {
                    rep.violations.push(format!("id {id} names two nodes"));
                }
            }
        }
    }
    if seen.len() as u64 != total || seen.keys().any(|&i| i >= total) {
        rep.violations.push("numbering is not a bijection onto 0..total".into());
    }
    // interface assembly against a serial sum over nodes
    let mut r = rng(f.num_leaves() as u64);
    let mut x: Vec<Vec<f64>> = d.dofs.iter().map(|dm| (0..dm.len()).map(|_| r.gen_range(-1.0..1.0)).collect()).collect();
    let mut sums: HashMap<[u64; 3], f64> = HashMap::new();
    for p in 0..x.len() {
        for (g, info) in d.dofs[p].dofs().iter().enumerate() {
            if info.local && !info.hanging {
                *sums.entry(info.node).or_default() += x[p][g];
            }
        }
    }
    assemble_interface(&pats, &d.dofs, &mut x, &mut d.fabric).unwrap();
    for p in 0..x.len() {
        for (g, info) in d.dofs[p].dofs().iter().enumerate() {
            if info.local && !info.hanging && info.interface && (x[p][g] - sums[&info.node]).abs() > 1e-12 {
                rep.violations.push(format!("rank {p}: assembled value at {:?}", info.node));
            }
        }
    }
    rep
}

/// Two quadtrees, the first lower-left cell of the second tree refined once;
/// five ranks in SFC order.
pub fn fig4_forest() -> Forest {
    let f = Forest::new(Brick::new(2, &[2, 1]).unwrap(), 1, 1).unwrap();
    let f = f.refine_where(|k| k.tree == 1 && k.child_id() == 0);
    f.with_offsets(vec![0, 5, 7, 9, 10, 11]).unwrap()
}

/// Same leaves split into `ranks` contiguous pieces of equal size (within one).
pub fn repartition(f: &Forest, ranks: usize) -> Forest {
    let n = f.num_leaves();
    let offsets: Vec<usize> = (0..=ranks).map(|p| p * n / ranks).collect();
    Forest::from_parts(f.brick().clone(), f.leaves().to_vec(), offsets, vec![Vec::new(); n]).unwrap()
}

pub type NodeMatrix = std::collections::BTreeMap<([u64; 3], [u64; 3]), f64>;

/// Constrained Poisson system over the whole forest, keyed by node position
/// (doubled global coordinates), computed without any VEF machinery.
///
/// A node is free when it is a Lagrange node of every leaf whose closure
/// holds it; otherwise it takes the value interpolated from such a leaf,
/// resolved recursively. The unconstrained matrix is assembled over all
/// nodes, then transformed as C^T A C; Dirichlet nodes keep a unit diagonal.
pub struct SerialSystem {
    pub matrix: NodeMatrix,
    pub rhs: std::collections::BTreeMap<[u64; 3], f64>,
    pub constrained: usize,
}

pub fn serial_constrained_system(f: &Forest, degree: usize, rhs: &dyn Fn([f64; 3]) -> f64) -> SerialSystem {
    use forest_fe::assembly::{integrate_cell, CellGeom};
    use forest_fe::fespace::FEDescriptor;
    use std::collections::BTreeMap;

    let dim = f.dim();
    let fe = FEDescriptor::new(dim, degree).unwrap();
    let n = fe.num_cell_dofs();
    let r = degree as u64;
    let boxes: Vec<ClosedBox> = (0..f.num_leaves()).map(|i| f.cell_box(i)).collect();
    let mut nodes: Vec<[u64; 3]> = Vec::new();
    let mut index: HashMap<[u64; 3], usize> = HashMap::new();
    let mut cell_nodes = Vec::new();
    for b in &boxes {
        let row: Vec<usize> = (0..n)
            .map(|a| {
                let p = fe.node_key(b, a);
                *index.entry(p).or_insert_with(|| {
                    nodes.push(p);
                    nodes.len() - 1
                })
            })
            .collect();
        cell_nodes.push(row);
    }
    let holds = |b: &ClosedBox, p: &[u64; 3]| (0..dim).all(|a| 2 * b.lo[a] <= p[a] && p[a] <= 2 * b.hi[a]);
    let is_node = |b: &ClosedBox, p: &[u64; 3]| (0..dim).all(|a| ((p[a] - 2 * b.lo[a]) * r) % (2 * (b.hi[a] - b.lo[a])) == 0);
    // per node: a leaf holding it without having it as a node
    let coarse: Vec<Option<usize>> = nodes
        .iter()
        .map(|p| (0..boxes.len()).find(|&c| holds(&boxes[c], p) && !is_node(&boxes[c], p)))
        .collect();
    fn resolve(
        i: usize,
        nodes: &[[u64; 3]],
        coarse: &[Option<usize>],
        cell_nodes: &[Vec<usize>],
        boxes: &[ClosedBox],
        fe: &forest_fe::fespace::FEDescriptor,
        depth: usize,
    ) -> Vec<(usize, f64)> {
        assert!(depth < 8, "constraint chain too deep");
        let Some(c) = coarse[i] else { return vec![(i, 1.0)] };
        let b = &boxes[c];
        let xi: [f64; 3] = std::array::from_fn(|a| if a < fe.dim { (nodes[i][a] as f64 / 2.0 - b.lo[a] as f64) / (b.hi[a] - b.lo[a]) as f64 } else { 0.0 });
        let mut out: BTreeMap<usize, f64> = BTreeMap::new();
        for (a, &m) in cell_nodes[c].iter().enumerate() {
            let w = fe.shape(a, xi);
            if w.abs() < 1e-14 {
                continue;
            }
            for (j, cj) in resolve(m, nodes, coarse, cell_nodes, boxes, fe, depth + 1) {
                *out.entry(j).or_default() += w * cj;
            }
        }
        out.into_iter().filter(|(_, v)| v.abs() >= 1e-14).collect()
    }
    let expansion: Vec<Vec<(usize, f64)>> = (0..nodes.len()).map(|i| resolve(i, &nodes, &coarse, &cell_nodes, &boxes, &fe, 0)).collect();
    let boundary: Vec<bool> = nodes.iter().map(|p| f.brick().on_boundary(p.map(|v| v / 2))).collect();

    let mut a_full: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut b_full: BTreeMap<usize, f64> = BTreeMap::new();
    for (c, b) in boxes.iter().enumerate() {
        let (k, load) = integrate_cell(&CellGeom::of(dim, b), &fe, rhs);
        for i in 0..n {
            *b_full.entry(cell_nodes[c][i]).or_default() += load[i];
            for j in 0..n {
                *a_full.entry((cell_nodes[c][i], cell_nodes[c][j])).or_default() += k[i * n + j];
            }
        }
    }
    let mut matrix = NodeMatrix::new();
    let mut rhs_out = BTreeMap::new();
    for (&(p, q), &v) in &a_full {
        for &(i, ci) in &expansion[p] {
            for &(j, cj) in &expansion[q] {
                if boundary[i] || boundary[j] {
                    continue;
                }
                *matrix.entry((nodes[i], nodes[j])).or_default() += ci * cj * v;
            }
        }
    }
    for (&p, &v) in &b_full {
        for &(i, ci) in &expansion[p] {
            if !boundary[i] {
                *rhs_out.entry(nodes[i]).or_default() += ci * v;
            }
        }
    }
    for i in 0..nodes.len() {
        if coarse[i].is_none() && boundary[i] {
            matrix.insert((nodes[i], nodes[i]), 1.0);
            rhs_out.insert(nodes[i], 0.0);
        }
    }
    SerialSystem { matrix, rhs: rhs_out, constrained: coarse.iter().filter(|c| c.is_some()).count() }
}

/// Largest entrywise difference relative to the largest entry; missing
/// entries count as zero.
pub fn relative_difference(a: &NodeMatrix, b: &NodeMatrix) -> f64 {
    let scale = a.values().chain(b.values()).fold(0.0f64, |m, v| m.max(v.abs()));
    let keys: BTreeSet<_> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max)
        / scale
}

/// max |A - A^T| / max |A|
pub fn asymmetry(a: &NodeMatrix) -> f64 {
    let scale = a.values().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().map(|(&(i, j), v)| (v - a.get(&(j, i)).copied().unwrap_or(0.0)).abs()).fold(0.0, f64::max) / scale
}

/// Entries of magnitude above `tol * max` only.
pub fn pattern(a: &NodeMatrix, tol: f64) -> BTreeSet<([u64; 3], [u64; 3])> {
    let scale = a.values().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter().filter(|(_, v)| v.abs() > tol * scale).map(|(k, _)| *k).collect()
}

pub struct AssemblyReport {
    pub sub_vs_serial: f64,
    pub full_vs_serial: f64,
    pub rhs_diff: f64,
    pub sub_asym: f64,
    pub full_asym: f64,
    pub same_pattern: bool,
    pub constrained: usize,
}

/// Rank-summed subassembled and fully assembled matrices against the serial
/// oracle, all keyed by node position.
pub fn check_assembly(f: &Forest, k: usize, degree: usize) -> AssemblyReport {
    use forest_fe::assembly::Problem;
    use forest_fe::driver::{discretize, DiscOptions, StageClock};
    let dim = f.dim();
    // sinusoid loads can cancel exactly on symmetric coarse meshes
    let problem = Problem::Manufactured;
    let mut fabric = Fabric::new(f.ranks());
    let disc = discretize(std::sync::Arc::new(f.clone()), DiscOptions { k, s: 0, degree, unchecked: false }, &mut fabric, &mut StageClock::default()).unwrap();
    let subs = disc.assemble_sub(problem).unwrap();
    let full = disc.assemble_full(&subs, &mut fabric).unwrap();

    let mut sub = NodeMatrix::new();
    let mut sub_rhs: std::collections::BTreeMap<[u64; 3], f64> = Default::default();
    for (p, s) in subs.iter().enumerate() {
        let node = |g: u64| disc.dofs[p].dof(g as u32).node;
        for i in 0..s.matrix.rows() {
            let (c, v) = s.matrix.row(i);
            for (&j, &a) in c.iter().zip(v) {
                *sub.entry((node(i as u64), node(j))).or_default() += a;
            }
            let d = disc.dofs[p].dof(i as u32);
            if d.local && !d.hanging {
                *sub_rhs.entry(d.node).or_default() += s.rhs[i];
            }
        }
    }
    let mut id_node = HashMap::new();
    for (p, num) in disc.nums.iter().enumerate() {
        for (g, id) in num.ids.iter().enumerate() {
            if let Some(id) = id {
                id_node.insert(*id, disc.dofs[p].dof(g as u32).node);
            }
        }
    }
    let mut fm = NodeMatrix::new();
    for s in &full {
        for i in 0..s.matrix.rows() {
            let (c, v) = s.matrix.row(i);
            for (&j, &a) in c.iter().zip(v) {
                fm.insert((id_node[&(s.offset + i as u64)], id_node[&j]), a);
            }
        }
    }
    let serial = serial_constrained_system(f, degree, &|x| problem.rhs(dim, x));
    let rscale = serial.rhs.values().fold(1e-300f64, |m, v| m.max(v.abs()));
    let rkeys: BTreeSet<_> = serial.rhs.keys().chain(sub_rhs.keys()).collect();
    let rhs_diff = rkeys
        .into_iter()
        .map(|k| (serial.rhs.get(k).copied().unwrap_or(0.0) - sub_rhs.get(k).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max)
        / rscale;
    AssemblyReport {
        sub_vs_serial: relative_difference(&sub, &serial.matrix),
        full_vs_serial: relative_difference(&fm, &serial.matrix),
        rhs_diff,
        sub_asym: asymmetry(&sub),
        full_asym: asymmetry(&fm),
        same_pattern: pattern(&sub, 1e-12) == pattern(&serial.matrix, 1e-12) && pattern(&fm, 1e-12) == pattern(&serial.matrix, 1e-12),
        constrained: serial.constrained,
    }
}

/// Refine-only random forest (level 1 start, each round refines a random
/// fraction of leaves), balanced with `k`, one rank.
pub fn graded_forest(rng: &mut ChaCha8Rng, dim: usize, k: usize, rounds: usize, max_leaves: usize) -> Forest {
    let mut f = Forest::new(random_brick(rng, dim), 1, 1).unwrap();
    for _ in 0..rounds {
        if f.num_leaves() * (1 << dim) > max_leaves {
            break;
        }
        let flags: Vec<Flag> = f.leaves().iter().map(|_| if rng.gen::<f64>() < 0.25 { Flag::Refine } else { Flag::Keep }).collect();
        f = f.adapt_indexed(&flags, &mut CopyPayload).balance(k).unwrap();
    }
    f
}

pub struct Solved {
    pub disc: forest_fe::driver::Discretization,
    pub sub: Vec<Vec<f64>>,
    pub full: Vec<Vec<f64>>,
}

pub fn solve_both(f: &Forest, k: usize, degree: usize, problem: forest_fe::assembly::Problem) -> Solved {
    use forest_fe::assembly::CgOptions;
    use forest_fe::driver::{discretize, DiscOptions, StageClock};
    let mut fabric = Fabric::new(f.ranks());
    let disc = discretize(std::sync::Arc::new(f.clone()), DiscOptions { k, s: 0, degree, unchecked: false }, &mut fabric, &mut StageClock::default()).unwrap();
    let subs = disc.assemble_sub(problem).unwrap();
    let full = disc.assemble_full(&subs, &mut fabric).unwrap();
    let opts = CgOptions { tol: 1e-13, maxit: 5000 };
    let (sub, _) = disc.solve(&subs, &mut fabric, opts).unwrap();
    let (fx, _) = disc.solve_full(&full, &mut fabric, opts).unwrap();
    Solved { disc, sub, full: fx }
}

/// Values of regular local DOFs keyed by node; copies on different ranks
/// must agree exactly.
pub fn by_node(disc: &forest_fe::driver::Discretization, x: &[Vec<f64>]) -> std::collections::BTreeMap<[u64; 3], f64> {
    let mut out = std::collections::BTreeMap::new();
    for (p, d) in disc.dofs.iter().enumerate() {
        for (g, info) in d.dofs().iter().enumerate() {
            if info.local && !info.hanging {
                if let Some(old) = out.insert(info.node, x[p][g]) {
                    assert_eq!(old, x[p][g], "copies of {:?} disagree", info.node);
                }
            }
        }
    }
    out
}

/// ||a - b|| / ||b|| over the union of keys.
pub fn relative_l2(a: &std::collections::BTreeMap<[u64; 3], f64>, b: &std::collections::BTreeMap<[u64; 3], f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    let num: f64 = b.iter().map(|(k, v)| (a[k] - v).powi(2)).sum();
    let den: f64 = b.values().map(|v| v * v).sum();
    (num / den).sqrt()
}

/// Largest jump of the discrete function between view cells sharing random
/// points on facets of local cells, relative to the largest nodal value.
pub fn max_facet_jump(disc: &forest_fe::driver::Discretization, x: &[Vec<f64>], rng: &mut ChaCha8Rng, samples: usize) -> f64 {
    use forest_fe::driver::eval_cell;
    use forest_fe::forest::ROOT_LEN;
    let scale = x.iter().flatten().fold(1e-300f64, |m, v| m.max(v.abs()));
    let dim = disc.forest.dim();
    let mut worst = 0.0f64;
    for (p, (v, m)) in disc.views.iter().zip(&disc.meshes).enumerate() {
        for c in m.local_cells() {
            let b = m.cell_box(c);
            let len = b.hi[0] - b.lo[0];
            for _ in 0..samples {
                let axis = rng.gen_range(0..dim);
                let mut pt = [0u64; 3];
                for a in 0..dim {
                    pt[a] = if a == axis { if rng.gen() { b.hi[a] } else { b.lo[a] } } else { b.lo[a] + rng.gen_range(1..len) };
                }
                let phys = pt.map(|u| u as f64 / f64::from(ROOT_LEN));
                let here = eval_cell(m, &disc.dofs[p], &x[p], c, phys).0;
                for other in v.cells_at_point(pt) {
                    let there = eval_cell(m, &disc.dofs[p], &x[p], other, phys).0;
                    worst = worst.max((here - there).abs() / scale);
                }
            }
        }
    }
    worst
}

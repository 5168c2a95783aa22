//! The AMR loop: rebuild the discretization, assemble, solve, estimate, mark,
//! adapt and repartition, with per-stage statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::assembly::{assemble_fully, assemble_subassembled, cg_full, cg_subassembled, tensor_rule, CellGeom, CgOptions, FullSystem, Problem, SubSystem};
use crate::dofdist::{build_comm_pattern, compute_ownership, global_numbering, CommPattern, GlobalNumbering, Ownership};
use crate::error::{Error, Result};
use crate::femesh::{build_femesh, FEMesh};
use crate::fespace::{build_constraints, enumerate_dofs, enumerate_dofs_unchecked, ConstraintSet, DofMap, FEDescriptor};
use crate::forest::{ghost_layer, Brick, CopyPayload, Flag, Forest, RankView, ROOT_LEN};
use crate::simfabric::{Decoder, Encoder, Fabric, Outbox, Usage};

pub const STAGES: [&str; 7] = ["MESH", "FE_SPACE_SUB", "FE_SPACE_FULL", "ASSEMBLY_SUB", "ASSEMBLY_FULL", "ERROR_ESTIMATOR", "SOLVE"];

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct StageCost {
    pub time: f64,
    pub rounds: u64,
    pub bytes: u64,
}

/// Accumulates wall time and fabric usage per stage label.
#[derive(Clone, Debug, Default)]
pub struct StageClock {
    pub stages: BTreeMap<&'static str, StageCost>,
}

impl StageClock {
    pub fn run<T>(&mut self, stage: &'static str, fabric: &mut Fabric, f: impl FnOnce(&mut Fabric) -> Result<T>) -> Result<T> {
        let before = fabric.usage();
        let t = Instant::now();
        let out = f(fabric).map_err(|e| e.in_stage(stage))?;
        let used: Usage = fabric.usage() - before;
        let c = self.stages.entry(stage).or_default();
        c.time += t.elapsed().as_secs_f64();
        c.rounds += used.exchange_rounds + used.collectives;
        c.bytes += used.bytes;
        Ok(out)
    }
}

/// Everything built on top of one partitioned forest.
pub struct Discretization {
    pub forest: Arc<Forest>,
    pub views: Vec<RankView>,
    pub meshes: Vec<FEMesh>,
    pub dofs: Vec<DofMap>,
    pub constraints: Vec<ConstraintSet>,
    pub owns: Vec<Ownership>,
    pub patterns: Vec<CommPattern>,
    pub nums: Vec<GlobalNumbering>,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscOptions {
    pub k: usize,
    pub s: usize,
    pub degree: usize,
    /// Skip the k <= max(1, D) check when enumerating DOFs.
    pub unchecked: bool,
}

/// Ghosts, meshes, DOFs, constraints, ownership, patterns and numbering.
pub fn discretize(forest: Arc<Forest>, opts: DiscOptions, fabric: &mut Fabric, clock: &mut StageClock) -> Result<Discretization> {
    let (views, meshes) = clock.run("MESH", fabric, |fabric| {
        let views = ghost_layer(Arc::clone(&forest), opts.s, fabric)?;
        let meshes = views.iter().map(|v| build_femesh(v, opts.k)).collect::<Result<Vec<_>>>()?;
        Ok((views, meshes))
    })?;
    let fe = FEDescriptor::new(forest.dim(), opts.degree)?;
    let (dofs, constraints, owns, patterns) = clock.run("FE_SPACE_SUB", fabric, |fabric| {
        let dofs = meshes
            .iter()
            .map(|m| if opts.unchecked { enumerate_dofs_unchecked(m, fe) } else { enumerate_dofs(m, fe) })
            .collect::<Result<Vec<_>>>()?;
        let constraints = views.iter().zip(&meshes).zip(&dofs).map(|((v, m), d)| build_constraints(v, m, d)).collect::<Result<Vec<_>>>()?;
        let owns = compute_ownership(&views, &meshes, &dofs, fabric)?;
        let patterns: Vec<CommPattern> = owns.iter().zip(&dofs).map(|(o, d)| build_comm_pattern(o, d)).collect();
        Ok((dofs, constraints, owns, patterns))
    })?;
    let nums = clock.run("FE_SPACE_FULL", fabric, |fabric| global_numbering(&owns, &dofs, &patterns, fabric))?;
    Ok(Discretization { forest, views, meshes, dofs, constraints, owns, patterns, nums })
}

impl Discretization {
    pub fn assemble_sub(&self, problem: Problem) -> Result<Vec<SubSystem>> {
        let dim = self.forest.dim();
        let f = move |x: [f64; 3]| problem.rhs(dim, x);
        (0..self.meshes.len()).map(|p| assemble_subassembled(&self.meshes[p], &self.dofs[p], &self.constraints[p], &self.owns[p], &f)).collect()
    }

    pub fn assemble_full(&self, subs: &[SubSystem], fabric: &mut Fabric) -> Result<Vec<FullSystem>> {
        assemble_fully(subs, &self.dofs, &self.nums, fabric)
    }

    /// Subassembled CG, then hanging values from constraints and ghost-cell
    /// values from their owners. Returns per-rank values on all proc-local DOFs.
    pub fn solve(&self, subs: &[SubSystem], fabric: &mut Fabric, opts: CgOptions) -> Result<(Vec<Vec<f64>>, usize)> {
        let (mut x, it) = cg_subassembled(subs, &self.patterns, &self.dofs, &self.owns, fabric, opts)?;
        self.complete(&mut x, fabric)?;
        Ok((x, it))
    }

    /// Fully assembled CG; the owned slices are scattered back onto
    /// proc-local ids through the numbering and completed like [`Self::solve`].
    pub fn solve_full(&self, full: &[FullSystem], fabric: &mut Fabric, opts: CgOptions) -> Result<(Vec<Vec<f64>>, usize)> {
        let (owned, it) = cg_full(full, fabric, opts)?;
        let mut x: Vec<Vec<f64>> = self.dofs.iter().map(|d| vec![0.0; d.len()]).collect();
        for (p, xp) in x.iter_mut().enumerate() {
            let range = self.nums[p].owned_range();
            for (g, id) in self.nums[p].ids.iter().enumerate() {
                if let Some(id) = id {
                    if range.contains(id) {
                        xp[g] = owned[p][(id - range.start) as usize];
                    }
                }
            }
        }
        crate::dofdist::fetch_from_owners(&self.patterns, &mut x, fabric)?;
        self.complete(&mut x, fabric)?;
        Ok((x, it))
    }

    fn complete(&self, x: &mut [Vec<f64>], fabric: &mut Fabric) -> Result<()> {
        for (c, xp) in self.constraints.iter().zip(x.iter_mut()) {
            c.distribute(xp);
        }
        push_ghost_values(&self.views, &self.dofs, x, fabric)
    }

    pub fn num_cells(&self) -> usize {
        self.forest.num_leaves()
    }
}

/// Owners send the DOF values of every mirror cell to the ranks holding it as
/// a ghost (one exchange round). Only non-local DOFs are overwritten.
pub fn push_ghost_values(views: &[RankView], dofs: &[DofMap], x: &mut [Vec<f64>], fabric: &mut Fabric) -> Result<()> {
    let mut per: BTreeMap<(usize, usize), Encoder> = BTreeMap::new();
    for (q, v) in views.iter().enumerate() {
        for (cell, ranks) in v.mirrors() {
            for &p in ranks {
                let e = per.entry((q, p)).or_default();
                e.u64(v.global_index(*cell) as u64);
                for &g in dofs[q].cell_dofs(*cell) {
                    e.f64(x[q][g as usize]);
                }
            }
        }
    }
    let outbox: Outbox = per.into_iter().map(|(k, e)| (k, vec![e.finish()])).collect();
    let inbox = fabric.neighbor_exchange(outbox)?;
    for (p, v) in views.iter().enumerate() {
        let by_global: HashMap<usize, usize> = v.ghosts().map(|c| (v.global_index(c), c)).collect();
        let n = dofs[p].fe().num_cell_dofs();
        for (_, msgs) in inbox.for_rank(p) {
            let mut d = Decoder::new(&msgs[0]);
            while !d.is_empty() {
                let gi = d.u64()? as usize;
                let c = *by_global.get(&gi).ok_or_else(|| Error::Decode(format!("rank {p}: cell {gi} is not a ghost")))?;
                for a in 0..n {
                    let val = d.f64()?;
                    let g = dofs[p].cell_dofs(c)[a];
                    if !dofs[p].dof(g).local {
                        x[p][g as usize] = val;
                    }
                }
            }
        }
    }
    Ok(())
}

/// Value and physical gradient of the discrete function on view cell `c`.
pub fn eval_cell(mesh: &FEMesh, dofs: &DofMap, x: &[f64], c: usize, point: [f64; 3]) -> (f64, [f64; 3]) {
    let fe = dofs.fe();
    let geom = CellGeom::of(fe.dim, &mesh.cell_box(c));
    let xi: [f64; 3] = std::array::from_fn(|a| if a < fe.dim { (point[a] - geom.lo[a]) / geom.h } else { 0.0 });
    let mut u = 0.0;
    let mut grad = [0.0; 3];
    for (a, &g) in dofs.cell_dofs(c).iter().enumerate() {
        let v = x[g as usize];
        u += v * fe.shape(a, xi);
        let gr = fe.grad(a, xi);
        for k in 0..fe.dim {
            grad[k] += v * gr[k] / geom.h;
        }
    }
    (u, grad)
}

/// Kelly indicator of every local cell: eta^2 = sum over facets of
/// h_F / 24 times the integral of the squared normal-derivative jump.
/// Facets are integrated per half-size sub-facet, so hanging facets are
/// covered from both sides; h_F is the smaller adjacent cell size.
pub fn kelly_indicator(view: &RankView, mesh: &FEMesh, dofs: &DofMap, x: &[f64]) -> Vec<f64> {
    let dim = mesh.dim();
    let fe = dofs.fe();
    let scale = f64::from(ROOT_LEN);
    let sub_rule = tensor_rule(dim - 1, fe.degree + 1);
    mesh.local_cells()
        .map(|c| {
            let b = mesh.cell_box(c);
            let len = b.hi[0] - b.lo[0];
            let mut eta2 = 0.0;
            for axis in 0..dim {
                let tang: Vec<usize> = (0..dim).filter(|&a| a != axis).collect();
                for high in [false, true] {
                    let plane = if high { b.hi[axis] } else { b.lo[axis] };
                    for sub in 0..1usize << (dim - 1) {
                        // center of the sub-facet, and a finest cell beyond it
                        let mut center = [0u64; 3];
                        center[axis] = plane;
                        for (t, &a) in tang.iter().enumerate() {
                            center[a] = b.lo[a] + len / 4 + (sub >> t & 1) as u64 * len / 2;
                        }
                        let mut probe = center;
                        if high {
                            probe[axis] += 0;
                        } else if let Some(v) = probe[axis].checked_sub(1) {
                            probe[axis] = v;
                        } else {
                            continue;
                        }
                        if view.brick().locate(probe).is_none() {
                            continue;
                        }
                        let Some(n) = view.cells_at_point(center).into_iter().find(|&i| {
                            let nb = view.cell_box(i);
                            if high {
                                nb.lo[axis] == plane
                            } else {
                                nb.hi[axis] == plane
                            }
                        }) else {
                            continue;
                        };
                        let nlen = {
                            let nb = view.cell_box(n);
                            nb.hi[0] - nb.lo[0]
                        };
                        let h_face = len.min(nlen) as f64 / scale;
                        let sub_len = len as f64 / 2.0 / scale;
                        let mut integral = 0.0;
                        for (q, w) in &sub_rule {
                            let mut pt = [0.0; 3];
                            pt[axis] = plane as f64 / scale;
                            for (t, &a) in tang.iter().enumerate() {
                                let start = (b.lo[a] + (sub >> t & 1) as u64 * len / 2) as f64 / scale;
                                pt[a] = start + q[t] * sub_len;
                            }
                            let (_, gk) = eval_cell(mesh, dofs, x, c, pt);
                            let (_, gn) = eval_cell(mesh, dofs, x, n, pt);
                            let jump = gk[axis] - gn[axis];
                            integral += w * jump * jump;
                        }
                        eta2 += h_face / 24.0 * integral * sub_len.powi(dim as i32 - 1);
                    }
                }
            }
            eta2.sqrt()
        })
        .collect()
}

/// Threshold bisection: REFINE above theta_r, COARSEN below theta_c. Each of
/// the 25 iterations per threshold is one sum reduction.
pub fn mark_cells(etas: &[Vec<f64>], refine_frac: f64, coarsen_frac: f64, fabric: &mut Fabric) -> Result<Vec<Vec<Flag>>> {
    if !(0.0..=1.0).contains(&refine_frac) || !(0.0..=1.0).contains(&coarsen_frac) || refine_frac + coarsen_frac > 1.0 {
        return Err(Error::InvalidParameter(format!("fractions {refine_frac}, {coarsen_frac}")));
    }
    let total = fabric.allreduce_sum_u64(&etas.iter().map(|e| e.len() as u64).collect::<Vec<_>>())?;
    let lo0 = fabric.allreduce_min(&etas.iter().map(|e| e.iter().copied().fold(f64::INFINITY, f64::min)).collect::<Vec<_>>())?;
    let hi0 = fabric.allreduce_max(&etas.iter().map(|e| e.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect::<Vec<_>>())?;
    let count = |fabric: &mut Fabric, pred: &dyn Fn(f64) -> bool| -> Result<u64> {
        fabric.allreduce_sum_u64(&etas.iter().map(|e| e.iter().filter(|&&v| pred(v)).count() as u64).collect::<Vec<_>>())
    };
    let target_r = (refine_frac * total as f64).round() as u64;
    let target_c = (coarsen_frac * total as f64).round() as u64;
    let theta_r = if total == 0 || target_r == 0 {
        f64::INFINITY
    } else if target_r >= total {
        f64::NEG_INFINITY
    } else {
        let (mut lo, mut hi) = (lo0, hi0);
        for _ in 0..25 {
            let mid = 0.5 * (lo + hi);
            if count(fabric, &|v| v > mid)? > target_r {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    };
    let theta_c = if total == 0 || target_c == 0 {
        f64::NEG_INFINITY
    } else if target_c >= total {
        f64::INFINITY
    } else {
        let (mut lo, mut hi) = (lo0, hi0);
        for _ in 0..25 {
            let mid = 0.5 * (lo + hi);
            if count(fabric, &|v| v < mid)? > target_c {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    };
    Ok(etas
        .iter()
        .map(|e| {
            e.iter()
                .map(|&v| {
                    if v > theta_r {
                        Flag::Refine
                    } else if v < theta_c {
                        Flag::Coarsen
                    } else {
                        Flag::Keep
                    }
                })
                .collect()
        })
        .collect())
}

/// Adapt, balance and rebuild ghosts. Flags are given per rank in local order.
pub fn refine_and_coarsen(forest: &Forest, flags: &[Vec<Flag>], k: usize, s: usize, fabric: &mut Fabric) -> Result<(Forest, Vec<RankView>)> {
    let all: Vec<Flag> = flags.concat();
    if all.len() != forest.num_leaves() {
        return Err(Error::LengthMismatch { expected: forest.num_leaves(), got: all.len() });
    }
    let adapted = forest.adapt_indexed(&all, &mut CopyPayload).balance(k)?;
    let views = ghost_layer(Arc::new(adapted.clone()), s, fabric)?;
    Ok((adapted, views))
}

/// Equal cell counts per rank (within one), then new ghosts.
pub fn redistribute(forest: &Forest, s: usize, fabric: &mut Fabric) -> Result<(Forest, Vec<RankView>)> {
    let f = forest.partition_uniform();
    let views = ghost_layer(Arc::new(f.clone()), s, fabric)?;
    Ok((f, views))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AmrConfig {
    pub dim: usize,
    pub degree: usize,
    pub ranks: usize,
    pub k_balance: usize,
    pub s_ghost: usize,
    pub steps: usize,
    pub refine_frac: f64,
    pub coarsen_frac: f64,
    pub problem: Problem,
    /// Recorded only; nothing in the loop is random.
    pub seed: u64,
    /// Uniform level of the starting mesh.
    pub initial_level: u8,
    pub allow_unsafe_k: bool,
    pub tol: f64,
    pub stats: Option<PathBuf>,
    pub vtk: Option<String>,
    pub comm_log: Option<PathBuf>,
}

impl Default for AmrConfig {
    fn default() -> Self {
        AmrConfig {
            dim: 2,
            degree: 1,
            ranks: 4,
            k_balance: 1,
            s_ghost: 0,
            steps: 6,
            refine_frac: 0.15,
            coarsen_frac: 0.03,
            problem: Problem::Sinusoid,
            seed: 0,
            initial_level: 4,
            allow_unsafe_k: false,
            tol: 1e-10,
            stats: None,
            vtk: None,
            comm_log: None,
        }
    }
}

impl AmrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dim) {
            return Err(Error::UnsupportedDimension(self.dim));
        }
        let fe = FEDescriptor::new(self.dim, self.degree)?;
        if self.ranks == 0 {
            return Err(Error::InvalidParameter("at least one rank".into()));
        }
        if !(0.0..=1.0).contains(&self.refine_frac) || !(0.0..=1.0).contains(&self.coarsen_frac) || self.refine_frac + self.coarsen_frac > 1.0 {
            return Err(Error::InvalidParameter(format!("refine/coarsen fractions {} + {} must lie in [0, 1]", self.refine_frac, self.coarsen_frac)));
        }
        if self.k_balance >= self.dim || self.s_ghost >= self.dim {
            return Err(Error::InvalidParameter(format!("k and s must be below d={}", self.dim)));
        }
        if !self.allow_unsafe_k {
            if self.k_balance > fe.max_k() {
                return Err(Error::BalanceTooWeak { k: self.k_balance, limit: fe.max_k() });
            }
            if self.s_ghost > fe.lowest_dof_dim() {
                return Err(Error::InvalidParameter(format!("s={} exceeds the lowest DOF dimension {}", self.s_ghost, fe.lowest_dof_dim())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct CellCounts {
    pub total: usize,
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct DofCounts {
    /// Regular plus hanging.
    pub total: u64,
    pub regular: u64,
    pub hanging: u64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub cells: CellCounts,
    pub dofs: DofCounts,
    pub cg_iterations: usize,
    pub refined: usize,
    pub coarsened: usize,
    /// Sum of squared solution values over owned DOFs.
    pub solution_norm2: f64,
    pub l2_error: Option<f64>,
    pub stages: BTreeMap<String, StageCost>,
    #[serde(rename = "TOTAL_SUB")]
    pub total_sub: StageCost,
}

/// Keys and types of one step object, and stage additivity.
pub fn validate_stats(v: &Value) -> std::result::Result<(), String> {
    let o = v.as_object().ok_or("step is not an object")?;
    for k in ["step", "cells", "dofs", "cg_iterations", "refined", "coarsened", "solution_norm2", "stages", "TOTAL_SUB"] {
        if !o.contains_key(k) {
            return Err(format!("missing key {k}"));
        }
    }
    for k in ["total", "min", "max"] {
        o["cells"].get(k).and_then(Value::as_u64).ok_or(format!("cells.{k}"))?;
    }
    let d: Vec<u64> = ["total", "regular", "hanging"].iter().map(|k| o["dofs"].get(*k).and_then(Value::as_u64).ok_or(format!("dofs.{k}"))).collect::<std::result::Result<_, _>>()?;
    if d[0] != d[1] + d[2] {
        return Err("dofs.total != regular + hanging".into());
    }
    let stage = |c: &Value, name: &str| -> std::result::Result<(f64, u64, u64), String> {
        let t = c.get("time").and_then(Value::as_f64).ok_or(format!("{name}.time"))?;
        let r = c.get("rounds").and_then(Value::as_u64).ok_or(format!("{name}.rounds"))?;
        let b = c.get("bytes").and_then(Value::as_u64).ok_or(format!("{name}.bytes"))?;
        if t < 0.0 {
            return Err(format!("{name}.time negative"));
        }
        Ok((t, r, b))
    };
    let mut parts = BTreeMap::new();
    for s in STAGES {
        let c = o["stages"].get(s).ok_or(format!("missing stage {s}"))?;
        parts.insert(s, stage(c, s)?);
    }
    let total = stage(&o["TOTAL_SUB"], "TOTAL_SUB")?;
    let sum: f64 = ["MESH", "FE_SPACE_SUB", "ASSEMBLY_SUB", "ERROR_ESTIMATOR"].iter().map(|s| parts[s].0).sum();
    if (total.0 - sum).abs() > 1e-9 * sum.max(1.0) {
        return Err(format!("TOTAL_SUB time {} != {}", total.0, sum));
    }
    Ok(())
}

pub struct AmrOutput {
    pub stats: Vec<StepStats>,
    pub forest: Forest,
    /// Leaf keys flagged REFINE in each step, with their level.
    pub refined: Vec<Vec<crate::forest::MortonKey>>,
    /// Final solution per rank on proc-local DOFs.
    pub solution: Vec<Vec<f64>>,
    pub fabric_usage: Usage,
}

fn l2_error(disc: &Discretization, x: &[Vec<f64>], problem: Problem, fabric: &mut Fabric) -> Result<Option<f64>> {
    let dim = disc.forest.dim();
    if problem.exact(dim, [0.0; 3]).is_none() {
        return Ok(None);
    }
    let rule = tensor_rule(dim, 5);
    let parts: Vec<f64> = (0..disc.meshes.len())
        .map(|p| {
            let m = &disc.meshes[p];
            m.local_cells()
                .map(|c| {
                    let geom = CellGeom::of(dim, &m.cell_box(c));
                    rule.iter()
                        .map(|(xi, w)| {
                            let pt = geom.map(*xi);
                            let (u, _) = eval_cell(m, &disc.dofs[p], &x[p], c, pt);
                            let e = u - problem.exact(dim, pt).unwrap();
                            w * geom.h.powi(dim as i32) * e * e
                        })
                        .sum::<f64>()
                })
                .sum()
        })
        .collect();
    Ok(Some(fabric.allreduce_sum(&parts)?.sqrt()))
}

/// Run the configured number of AMR steps on the unit square or cube.
pub fn run_amr(cfg: &AmrConfig) -> Result<AmrOutput> {
    cfg.validate()?;
    let brick = Brick::new(cfg.dim, &vec![1; cfg.dim])?;
    let mut forest = Forest::new(brick, cfg.initial_level, cfg.ranks)?.balance(cfg.k_balance)?.partition_uniform();
    let mut fabric = Fabric::new(cfg.ranks);
    let opts = DiscOptions { k: cfg.k_balance, s: cfg.s_ghost, degree: cfg.degree, unchecked: cfg.allow_unsafe_k };
    let cg = CgOptions { tol: cfg.tol, ..CgOptions::default() };
    let mut all_stats = Vec::new();
    let mut refined_keys = Vec::new();
    let mut solution = Vec::new();
    for step in 0..cfg.steps {
        let mut clock = StageClock::default();
        let disc = discretize(Arc::new(forest.clone()), opts, &mut fabric, &mut clock)?;
        let subs = clock.run("ASSEMBLY_SUB", &mut fabric, |_| disc.assemble_sub(cfg.problem))?;
        let full = clock.run("ASSEMBLY_FULL", &mut fabric, |fabric| disc.assemble_full(&subs, fabric))?;
        let (x, iters) = clock.run("SOLVE", &mut fabric, |fabric| disc.solve(&subs, fabric, cg))?;
        drop(full);
        let (etas, flags) = clock.run("ERROR_ESTIMATOR", &mut fabric, |fabric| {
            let etas: Vec<Vec<f64>> = (0..cfg.ranks).map(|p| kelly_indicator(&disc.views[p], &disc.meshes[p], &disc.dofs[p], &x[p])).collect();
            let flags = mark_cells(&etas, cfg.refine_frac, cfg.coarsen_frac, fabric)?;
            Ok((etas, flags))
        })?;

        let mut stats = collect_stats(step, &disc, &x, &flags, iters, &mut fabric)?;
        stats.l2_error = l2_error(&disc, &x, cfg.problem, &mut fabric)?;
        if let Some(prefix) = &cfg.vtk {
            write_vtk(&PathBuf::from(format!("{prefix}_{step:03}.vtk")), &disc, &x, &etas)?;
        }
        refined_keys.push(
            flags
                .iter()
                .flatten()
                .zip(forest.leaves())
                .filter(|(f, _)| **f == Flag::Refine)
                .map(|(_, k)| *k)
                .collect(),
        );
        if step + 1 < cfg.steps {
            forest = clock.run("MESH", &mut fabric, |fabric| {
                let (f, _) = refine_and_coarsen(&forest, &flags, cfg.k_balance, cfg.s_ghost, fabric)?;
                let (f, _) = redistribute(&f, cfg.s_ghost, fabric)?;
                Ok(f)
            })?;
        }
        for s in STAGES {
            stats.stages.insert(s.to_string(), clock.stages.get(s).copied().unwrap_or_default());
        }
        let mut total = StageCost::default();
        for s in ["MESH", "FE_SPACE_SUB", "ASSEMBLY_SUB", "ERROR_ESTIMATOR"] {
            let c = stats.stages[s];
            total.time += c.time;
            total.rounds += c.rounds;
            total.bytes += c.bytes;
        }
        stats.total_sub = total;
        all_stats.push(stats);
        solution = x;
    }
    if let Some(path) = &cfg.stats {
        std::fs::write(path, serde_json::to_string_pretty(&all_stats)?)?;
    }
    if let Some(path) = &cfg.comm_log {
        fabric.write_log(path)?;
    }
    Ok(AmrOutput { stats: all_stats, forest, refined: refined_keys, solution, fabric_usage: fabric.usage() })
}

fn collect_stats(step: usize, disc: &Discretization, x: &[Vec<f64>], flags: &[Vec<Flag>], iters: usize, fabric: &mut Fabric) -> Result<StepStats> {
    let per_rank: Vec<usize> = disc.meshes.iter().map(|m| m.local_cells().len()).collect();
    let hanging: Vec<Vec<[u64; 3]>> = disc.dofs.iter().map(|d| d.dofs().iter().filter(|i| i.hanging && i.local).map(|i| i.node).collect()).collect();
    let hanging: BTreeSet<[u64; 3]> = fabric.allgather(&hanging)?.into_iter().flatten().collect();
    let norm2 = fabric.allreduce_sum(&disc.owns.iter().zip(x).map(|(o, xp)| o.owned().map(|g| xp[g as usize] * xp[g as usize]).sum()).collect::<Vec<f64>>())?;
    let regular = disc.nums[0].total;
    Ok(StepStats {
        step,
        cells: CellCounts { total: per_rank.iter().sum(), min: *per_rank.iter().min().unwrap(), max: *per_rank.iter().max().unwrap() },
        dofs: DofCounts { total: regular + hanging.len() as u64, regular, hanging: hanging.len() as u64 },
        cg_iterations: iters,
        refined: flags.iter().flatten().filter(|&&f| f == Flag::Refine).count(),
        coarsened: flags.iter().flatten().filter(|&&f| f == Flag::Coarsen).count(),
        solution_norm2: norm2,
        l2_error: None,
        stages: BTreeMap::new(),
        total_sub: StageCost::default(),
    })
}

/// Legacy ASCII unstructured grid of all local cells. Corners are not
/// shared between cells; point data is the discrete solution at each corner.
pub fn write_vtk(path: &std::path::Path, disc: &Discretization, x: &[Vec<f64>], etas: &[Vec<f64>]) -> Result<()> {
    let dim = disc.forest.dim();
    let corners: &[[u64; 3]] = if dim == 2 {
        &[[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0]]
    } else {
        &[[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]
    };
    let mut pts = Vec::new();
    let mut vals = Vec::new();
    let mut cell_rank = Vec::new();
    let mut cell_level = Vec::new();
    let mut cell_eta = Vec::new();
    for (p, m) in disc.meshes.iter().enumerate() {
        for (i, c) in m.local_cells().enumerate() {
            let geom = CellGeom::of(dim, &m.cell_box(c));
            for cn in corners {
                let pt = geom.map(cn.map(|v| v as f64));
                vals.push(eval_cell(m, &disc.dofs[p], &x[p], c, pt).0);
                pts.push(pt);
            }
            cell_rank.push(p);
            cell_level.push(m.cells()[c].key.level);
            cell_eta.push(etas[p][i]);
        }
    }
    let nc = cell_rank.len();
    let nv = corners.len();
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "# vtk DataFile Version 3.0\namrrun\nASCII\nDATASET UNSTRUCTURED_GRID")?;
    writeln!(w, "POINTS {} double", pts.len())?;
    for p in &pts {
        writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
    }
    writeln!(w, "CELLS {} {}", nc, nc * (nv + 1))?;
    for c in 0..nc {
        let ids: Vec<String> = (0..nv).map(|v| (c * nv + v).to_string()).collect();
        writeln!(w, "{} {}", nv, ids.join(" "))?;
    }
    writeln!(w, "CELL_TYPES {nc}")?;
    for _ in 0..nc {
        writeln!(w, "{}", if dim == 2 { 9 } else { 12 })?;
    }
    writeln!(w, "CELL_DATA {nc}\nSCALARS rank int 1\nLOOKUP_TABLE default")?;
    for r in &cell_rank {
        writeln!(w, "{r}")?;
    }
    writeln!(w, "SCALARS level int 1\nLOOKUP_TABLE default")?;
    for l in &cell_level {
        writeln!(w, "{l}")?;
    }
    writeln!(w, "SCALARS eta double 1\nLOOKUP_TABLE default")?;
    for e in &cell_eta {
        writeln!(w, "{e}")?;
    }
    writeln!(w, "POINT_DATA {}\nSCALARS u double 1\nLOOKUP_TABLE default", pts.len())?;
    for v in &vals {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

//! Binary forest format "FFE1".
//!
//! Layout (little endian): magic, dim u8, max level u8, rank count u32, tree
//! counts d×u32, active bitmap (one bit per tree, padded to bytes), then per
//! tree a u64 leaf count followed by the leaves (tree u32, level u8, anchor
//! d×u32), then P+1 u64 offsets and finally one u32-length-prefixed payload
//! blob per leaf.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Brick, Forest, MortonKey, MAX_LEVEL};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FFE1";

pub fn write_forest<W: Write>(forest: &Forest, mut w: W) -> Result<()> {
    let dim = forest.dim();
    let brick = forest.brick();
    w.write_all(MAGIC)?;
    w.write_u8(dim as u8)?;
    w.write_u8(MAX_LEVEL)?;
    w.write_u32::<LittleEndian>(forest.ranks() as u32)?;
    for &n in &brick.dims()[..dim] {
        w.write_u32::<LittleEndian>(n)?;
    }
    let flags = brick.active_flags();
    let mut bits = vec![0u8; flags.len().div_ceil(8)];
    for (t, &a) in flags.iter().enumerate() {
        if a {
            bits[t / 8] |= 1 << (t % 8);
        }
    }
    w.write_all(&bits)?;
    for tree in 0..brick.num_trees() as u32 {
        let leaves = forest.tree_leaves(tree);
        w.write_u64::<LittleEndian>(leaves.len() as u64)?;
        for k in leaves {
            w.write_u32::<LittleEndian>(k.tree)?;
            w.write_u8(k.level)?;
            for &c in &k.anchor[..dim] {
                w.write_u32::<LittleEndian>(c)?;
            }
        }
    }
    for &o in forest.offsets() {
        w.write_u64::<LittleEndian>(o as u64)?;
    }
    for p in forest.payloads() {
        w.write_u32::<LittleEndian>(p.len() as u32)?;
        w.write_all(p)?;
    }
    Ok(())
}

pub fn read_forest<R: Read>(mut r: R) -> Result<Forest> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let dim = r.read_u8()? as usize;
    let max_level = r.read_u8()?;
    if max_level != MAX_LEVEL {
        return Err(Error::Format(format!("max level {max_level}, expected {MAX_LEVEL}")));
    }
    if !(2..=3).contains(&dim) {
        return Err(Error::Format(format!("dimension {dim}")));
    }
    let ranks = r.read_u32::<LittleEndian>()? as usize;
    let mut dims = vec![0u32; dim];
    for d in dims.iter_mut() {
        *d = r.read_u32::<LittleEndian>()?;
    }
    let ntrees: usize = dims.iter().map(|&n| n as usize).product();
    if ntrees > 1 << 24 {
        return Err(Error::Format(format!("{ntrees} trees")));
    }
    let mut bits = vec![0u8; ntrees.div_ceil(8)];
    r.read_exact(&mut bits)?;
    let active = (0..ntrees).map(|t| bits[t / 8] >> (t % 8) & 1 == 1).collect();
    let brick = Brick::with_active(dim, &dims, active).map_err(|e| Error::Format(e.to_string()))?;
    let mut leaves = Vec::new();
    for _ in 0..ntrees {
        let n = r.read_u64::<LittleEndian>()?;
        for _ in 0..n {
            let tree = r.read_u32::<LittleEndian>()?;
            let level = r.read_u8()?;
            let mut anchor = [0u32; 3];
            for c in anchor.iter_mut().take(dim) {
                *c = r.read_u32::<LittleEndian>()?;
            }
            leaves.push(MortonKey { tree, level, anchor });
        }
    }
    let mut offsets = Vec::with_capacity(ranks + 1);
    for _ in 0..=ranks {
        offsets.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let mut payload = Vec::with_capacity(leaves.len());
    for _ in 0..leaves.len() {
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut b = vec![0u8; n];
        r.read_exact(&mut b)?;
        payload.push(b);
    }
    Forest::from_parts(brick, leaves, offsets, payload).map_err(|e| Error::Format(e.to_string()))
}

//! Lossless octree coder for coordinate sets.
//!
//! Coordinates are normalized by their stride, so a set at stride 8 inside a
//! 10-bit volume codes as a depth-7 tree. Occupancy masks stream breadth
//! first, parents in canonical order per level; within a parent, child bit b
//! packs (dz, dy, dx) msb-to-lsb, so ascending bit order is canonical child
//! order. One adaptive binary model per child position captures axis
//! anisotropy.

use std::collections::HashSet;

use crate::entropy::range::{BitModel, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::sparse::{canon_key, Coord, CoordSet};

/// Per-level occupancy masks, breadth first. Separated from the entropy
/// stage so tests can pin the exact pre-coding byte sequence.
fn level_masks(norm: &[Coord], depth: u32) -> Vec<u8> {
    let mut masks = Vec::new();
    let mut occupied: HashSet<Coord> = norm.iter().copied().collect();
    let mut levels: Vec<(Vec<Coord>, HashSet<Coord>)> = Vec::new();
    for _ in 0..depth {
        let mut parents: Vec<Coord> = occupied
            .iter()
            .map(|c| [c[0] >> 1, c[1] >> 1, c[2] >> 1])
            .collect();
        parents.sort_unstable_by_key(canon_key);
        parents.dedup();
        let parent_set: HashSet<Coord> = parents.iter().copied().collect();
        levels.push((parents, std::mem::take(&mut occupied)));
        occupied = parent_set;
    }
    for (parents, children) in levels.iter().rev() {
        for p in parents {
            let mut mask = 0u8;
            for b in 0..8u8 {
                let d = [(b & 1) as i32, ((b >> 1) & 1) as i32, ((b >> 2) & 1) as i32];
                let child = [2 * p[0] + d[0], 2 * p[1] + d[1], 2 * p[2] + d[2]];
                if children.contains(&child) {
                    mask |= 1 << b;
                }
            }
            masks.push(mask);
        }
    }
    masks
}

pub fn octree_encode(coords: &CoordSet, depth: u32) -> Result<Vec<u8>> {
    if coords.is_empty() {
        return Err(Error::Coords("cannot octree-code an empty set".into()));
    }
    let s = coords.stride() as i32;
    let limit = 1i64 << depth;
    let mut norm = Vec::with_capacity(coords.len());
    for c in coords.coords() {
        let n = [c[0] / s, c[1] / s, c[2] / s];
        if n.iter().any(|&v| v < 0 || (v as i64) >= limit) {
            return Err(Error::Coords(format!(
                "coordinate {:?} outside depth-{} volume at stride {}",
                c, depth, s
            )));
        }
        norm.push(n);
    }
    let masks = level_masks(&norm, depth);
    let mut enc = RangeEncoder::new();
    let mut models: [BitModel; 8] = Default::default();
    for mask in masks {
        for b in 0..8 {
            models[b].encode(&mut enc, mask & (1 << b) != 0);
        }
    }
    Ok(enc.finish())
}

pub fn octree_decode(bytes: &[u8], depth: u32, stride: u32) -> Result<CoordSet> {
    let mut dec = RangeDecoder::new(bytes);
    let mut models: [BitModel; 8] = Default::default();
    let mut nodes: Vec<Coord> = vec![[0, 0, 0]];
    for level in 0..depth {
        let mut next = Vec::with_capacity(nodes.len() * 2);
        for p in &nodes {
            let mut any = false;
            for b in 0..8u8 {
                if models[b as usize].decode(&mut dec) {
                    any = true;
                    let d = [(b & 1) as i32, ((b >> 1) & 1) as i32, ((b >> 2) & 1) as i32];
                    next.push([2 * p[0] + d[0], 2 * p[1] + d[1], 2 * p[2] + d[2]]);
                }
            }
            if !any {
                return Err(Error::Coords(format!(
                    "octree stream decodes an empty node at level {}",
                    level
                )));
            }
        }
        // Children arrive parent-major, which is not canonical across
        // parents (a later parent can own an earlier child). The encoder
        // walks each level canonically, so re-sort before descending.
        next.sort_unstable_by_key(canon_key);
        nodes = next;
    }
    let s = stride as i32;
    for c in nodes.iter_mut() {
        *c = [c[0] * s, c[1] * s, c[2] * s];
    }
    Ok(CoordSet::new(nodes, stride).expect("decoded coords are aligned and unique"))
}

//! Nearest-neighbor queries over point sets.
//!
//! Both query flavors are exact and run against a uniform voxel-grid hash.
//! Results are fully deterministic: candidates at equal distance are ordered
//! by reference row index, which for sets taken from a [`crate::sparse::CoordSet`]
//! is exactly the canonical `(z, y, x)` coordinate order.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// One neighbor of one query point.
#[derive(Debug, Clone, Copy)]
pub struct Neighbor {
    /// Row of the reference point.
    pub row: u32,
    /// `query − reference`, in original voxel units.
    pub offset: [f64; 3],
    /// Euclidean distance.
    pub dist: f64,
}

/// Per-query neighbor lists in CSR layout. Query `i` owns
/// `entries[offsets[i] .. offsets[i+1]]`, sorted by `(dist, row)`.
#[derive(Debug, Clone)]
pub struct NeighborList {
    pub offsets: Vec<u32>,
    pub entries: Vec<Neighbor>,
}

impl NeighborList {
    pub fn queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn count(&self, q: usize) -> usize {
        (self.offsets[q + 1] - self.offsets[q]) as usize
    }

    pub fn segment(&self, q: usize) -> &[Neighbor] {
        &self.entries[self.offsets[q] as usize..self.offsets[q + 1] as usize]
    }
}

/// Uniform grid hash over reference points.
struct GridIndex {
    cells: HashMap<[i64; 3], Vec<u32>>,
    min_cell: [i64; 3],
    max_cell: [i64; 3],
}

impl GridIndex {
    fn build(refs: &[[f64; 3]], cell: f64) -> Self {
        assert!(cell > 0.0);
        let mut cells: HashMap<[i64; 3], Vec<u32>> = HashMap::new();
        let mut min_cell = [i64::MAX; 3];
        let mut max_cell = [i64::MIN; 3];
        for (i, p) in refs.iter().enumerate() {
            let key = Self::key_of(p, cell);
            for d in 0..3 {
                min_cell[d] = min_cell[d].min(key[d]);
                max_cell[d] = max_cell[d].max(key[d]);
            }
            cells.entry(key).or_default().push(i as u32);
        }
        GridIndex {
            cells,
            min_cell,
            max_cell,
        }
    }

    #[inline]
    fn key_of(p: &[f64; 3], cell: f64) -> [i64; 3] {
        [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ]
    }

    /// Visits reference rows in one grid cell.
    #[inline]
    fn scan_cell<F: FnMut(u32)>(&self, key: [i64; 3], f: &mut F) {
        if let Some(rows) = self.cells.get(&key) {
            for &r in rows {
                f(r);
            }
        }
    }
}

/// For every query, the (at most) `k` nearest references within Euclidean
/// radius `r`, sorted by `(distance, row)`. A query with nothing in its ball
/// gets an empty segment.
pub fn ball_knn(
    queries: &[[f64; 3]],
    refs: &[[f64; 3]],
    r: f64,
    k: usize,
) -> NeighborList {
    assert!(r > 0.0 && k > 0);
    let idx = GridIndex::build(refs, r);
    let mut offsets = Vec::with_capacity(queries.len() + 1);
    let mut entries = Vec::new();
    offsets.push(0u32);
    let mut cand: Vec<Neighbor> = Vec::new();
    for q in queries {
        cand.clear();
        if !refs.is_empty() {
            let key = GridIndex::key_of(q, r);
            // Cell size equals the radius, so the 3×3×3 block around the
            // query's cell covers the whole ball.
            for dx in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dz in -1..=1i64 {
                        idx.scan_cell([key[0] + dx, key[1] + dy, key[2] + dz], &mut |row| {
                            let p = &refs[row as usize];
                            let off = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
                            let d2 = off[0] * off[0] + off[1] * off[1] + off[2] * off[2];
                            let d = d2.sqrt();
                            if d <= r {
                                cand.push(Neighbor {
                                    row,
                                    offset: off,
                                    dist: d,
                                });
                            }
                        });
                    }
                }
            }
        }
        cand.sort_by(|a, b| {
            a.dist
                .partial_cmp(&b.dist)
                .expect("finite distances")
                .then(a.row.cmp(&b.row))
        });
        cand.truncate(k);
        entries.extend_from_slice(&cand);
        offsets.push(entries.len() as u32);
    }
    NeighborList { offsets, entries }
}

/// For every query, exactly `min(k, refs.len())` nearest references, sorted
/// by `(distance, row)`. Errors on an empty reference set.
pub fn knn(queries: &[[f64; 3]], refs: &[[f64; 3]], k: usize) -> Result<NeighborList> {
    assert!(k > 0);
    if refs.is_empty() {
        return Err(Error::Coords("knn: empty reference set".into()));
    }
    // A cell size near the mean point spacing keeps ring scans short. The
    // exactness of the search does not depend on this choice.
    let cell = knn_cell_size(refs);
    let idx = GridIndex::build(refs, cell);
    let keff = k.min(refs.len());

    let mut offsets = Vec::with_capacity(queries.len() + 1);
    let mut entries = Vec::new();
    offsets.push(0u32);
    let mut best: Vec<Neighbor> = Vec::new();
    for q in queries {
        best.clear();
        let key = GridIndex::key_of(q, cell);
        let mut ring = 0i64;
        loop {
            visit_ring(&idx, key, ring, &mut |row| {
                let p = &refs[row as usize];
                let off = [q[0] - p[0], q[1] - p[1], q[2] - p[2]];
                let d2 = off[0] * off[0] + off[1] * off[1] + off[2] * off[2];
                let n = Neighbor {
                    row,
                    offset: off,
                    dist: d2.sqrt(),
                };
                insert_bounded(&mut best, n, keff);
            });
            // Points in rings > ρ are at least (ρ·cell − query offset within
            // its own cell) away; the conservative bound (ρ−1+1)·cell applies
            // after finishing ring ρ because the next candidates live in
            // rings ≥ ρ+1.
            let done_by_bound =
                best.len() == keff && best.last().unwrap().dist <= (ring as f64) * cell;
            let exhausted = ring_exhausts_grid(&idx, key, ring);
            if done_by_bound || exhausted {
                break;
            }
            ring += 1;
        }
        entries.extend_from_slice(&best);
        offsets.push(entries.len() as u32);
    }
    Ok(NeighborList { offsets, entries })
}

fn knn_cell_size(refs: &[[f64; 3]]) -> f64 {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in refs {
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let vol: f64 = (0..3).map(|d| (hi[d] - lo[d]).max(1.0)).product();
    (vol / refs.len() as f64).cbrt().clamp(1.0, 64.0)
}

/// Scans every cell whose Chebyshev distance from `center` equals `ring`.
fn visit_ring<F: FnMut(u32)>(idx: &GridIndex, center: [i64; 3], ring: i64, f: &mut F) {
    if ring == 0 {
        idx.scan_cell(center, f);
        return;
    }
    for dx in -ring..=ring {
        for dy in -ring..=ring {
            for dz in -ring..=ring {
                if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                    continue;
                }
                idx.scan_cell([center[0] + dx, center[1] + dy, center[2] + dz], f);
            }
        }
    }
}

/// True when the ring already covers the whole occupied cell range, so no
/// unscanned cell remains.
fn ring_exhausts_grid(idx: &GridIndex, center: [i64; 3], ring: i64) -> bool {
    (0..3).all(|d| {
        center[d] - ring <= idx.min_cell[d] && center[d] + ring >= idx.max_cell[d]
    })
}

/// Keeps `best` as the `k` smallest neighbors sorted by `(dist, row)`.
fn insert_bounded(best: &mut Vec<Neighbor>, n: Neighbor, k: usize) {
    let pos = best.partition_point(|b| {
        (b.dist, b.row) < (n.dist, n.row)
    });
    if pos == best.len() && best.len() == k {
        return;
    }
    best.insert(pos, n);
    best.truncate(k);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(q: &[f64; 3], refs: &[[f64; 3]], k: usize) -> Vec<(f64, u32)> {
        let mut d: Vec<(f64, u32)> = refs
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let dd = (0..3).map(|j| (q[j] - p[j]).powi(2)).sum::<f64>().sqrt();
                (dd, i as u32)
            })
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        d.truncate(k);
        d
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen::<f64>() * extent,
                    rng.gen::<f64>() * extent,
                    rng.gen::<f64>() * extent,
                ]
            })
            .collect()
    }

    #[test]
    fn knn_matches_brute_force_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let refs = random_points(&mut rng, 40 + trial * 13, 30.0);
            let queries = random_points(&mut rng, 25, 35.0);
            let k = 1 + (trial % 5);
            let nl = knn(&queries, &refs, k).unwrap();
            for (qi, q) in queries.iter().enumerate() {
                let want = brute_knn(q, &refs, k);
                let got = nl.segment(qi);
                assert_eq!(got.len(), want.len());
                for (g, w) in got.iter().zip(&want) {
                    assert!((g.dist - w.0).abs() < 1e-12);
                    assert_eq!(g.row, w.1);
                }
            }
        }
    }

    #[test]
    fn knn_returns_all_refs_when_k_exceeds_count() {
        let refs = vec![[0.0, 0.0, 0.0], [5.0, 0.0, 0.0]];
        let nl = knn(&[[1.0, 0.0, 0.0]], &refs, 9).unwrap();
        assert_eq!(nl.count(0), 2);
        assert_eq!(nl.segment(0)[0].row, 0);
    }

    #[test]
    fn knn_empty_refs_errors() {
        assert!(knn(&[[0.0; 3]], &[], 1).is_err());
    }

    #[test]
    fn knn_ties_break_by_row() {
        // Four refs at equal distance from origin.
        let refs = vec![
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [0.0, -1.0, 0.0],
        ];
        let nl = knn(&[[0.0; 3]], &refs, 2).unwrap();
        assert_eq!(nl.segment(0)[0].row, 0);
        assert_eq!(nl.segment(0)[1].row, 1);
    }

    #[test]
    fn ball_truncates_at_k_and_respects_radius() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let refs = random_points(&mut rng, 120, 10.0);
        let queries = random_points(&mut rng, 30, 10.0);
        let (r, k) = (2.5, 4);
        let nl = ball_knn(&queries, &refs, r, k);
        for (qi, q) in queries.iter().enumerate() {
            let mut want: Vec<(f64, u32)> = brute_knn(q, &refs, refs.len())
                .into_iter()
                .filter(|(d, _)| *d <= r)
                .collect();
            want.truncate(k);
            let got = nl.segment(qi);
            assert_eq!(got.len(), want.len(), "query {}", qi);
            for (g, w) in got.iter().zip(&want) {
                assert!((g.dist - w.0).abs() < 1e-12);
                assert_eq!(g.row, w.1);
            }
        }
    }

    #[test]
    fn ball_empty_when_nothing_in_radius() {
        let refs = vec![[100.0, 100.0, 100.0]];
        let nl = ball_knn(&[[0.0; 3]], &refs, 3.0, 16);
        assert_eq!(nl.count(0), 0);
    }

    #[test]
    fn ball_point_on_radius_boundary_is_included() {
        let refs = vec![[3.0, 0.0, 0.0]];
        let nl = ball_knn(&[[0.0; 3]], &refs, 3.0, 16);
        assert_eq!(nl.count(0), 1);
        assert_eq!(nl.segment(0)[0].offset, [-3.0, 0.0, 0.0]);
    }

    #[test]
    fn offsets_are_query_minus_reference() {
        let refs = vec![[1.0, 2.0, 3.0]];
        let nl = knn(&[[2.0, 0.0, 7.0]], &refs, 1).unwrap();
        assert_eq!(nl.segment(0)[0].offset, [1.0, -2.0, 4.0]);
    }
}

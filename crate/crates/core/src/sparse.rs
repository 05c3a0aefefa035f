//! Sparse voxel tensors.
//!
//! A tensor is a set of occupied integer voxel coordinates plus one feature
//! row per coordinate. Coordinates always live on the original voxel lattice:
//! a tensor at stride `s` stores coordinates that are multiples of `s`, not
//! coordinates divided by `s`. Rows are kept in canonical order, lexicographic
//! by `(z, y, x)`, so that any two tensors over the same support agree row by
//! row. Every operation in the crate that produces a coordinate set preserves
//! this order; equality of supports implies equality of row layouts.

use std::collections::HashMap;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Integer voxel coordinate, stored as `[x, y, z]`.
pub type Coord = [i32; 3];

/// Canonical sort key: lexicographic by `(z, y, x)`.
#[inline]
pub fn canon_key(c: &Coord) -> (i32, i32, i32) {
    (c[2], c[1], c[0])
}

/// Floor-align a coordinate to multiples of `s` (euclidean, safe for
/// negative coordinates).
#[inline]
pub fn floor_align(c: Coord, s: i32) -> Coord {
    [
        c[0].div_euclid(s) * s,
        c[1].div_euclid(s) * s,
        c[2].div_euclid(s) * s,
    ]
}

/// An ordered set of distinct voxel coordinates at a fixed stride.
#[derive(Debug, Clone)]
pub struct CoordSet {
    coords: Vec<Coord>,
    stride: u32,
    index: HashMap<Coord, u32>,
}

impl CoordSet {
    /// Builds a set from raw coordinates: sorts canonically, removes
    /// duplicates, and checks stride alignment.
    pub fn new(mut coords: Vec<Coord>, stride: u32) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Stride("stride must be positive".into()));
        }
        let s = stride as i32;
        for c in &coords {
            if c.iter().any(|&v| v.rem_euclid(s) != 0) {
                return Err(Error::Coords(format!(
                    "coordinate {:?} is not aligned to stride {}",
                    c, stride
                )));
            }
        }
        coords.sort_unstable_by_key(canon_key);
        coords.dedup();
        let index = coords
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, i as u32))
            .collect();
        Ok(CoordSet {
            coords,
            stride,
            index,
        })
    }

    /// Builds a set that is already sorted, distinct and aligned.
    /// Debug builds re-check the invariants.
    pub(crate) fn from_sorted_unchecked(coords: Vec<Coord>, stride: u32) -> Self {
        debug_assert!(coords.windows(2).all(|w| canon_key(&w[0]) < canon_key(&w[1])));
        debug_assert!({
            let s = stride as i32;
            coords
                .iter()
                .all(|c| c.iter().all(|&v| v.rem_euclid(s) == 0))
        });
        let index = coords
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, i as u32))
            .collect();
        CoordSet {
            coords,
            stride,
            index,
        }
    }

    pub fn empty(stride: u32) -> Self {
        CoordSet {
            coords: Vec::new(),
            stride,
            index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn coords(&self) -> &[Coord] {
        &self.coords
    }

    pub fn contains(&self, c: &Coord) -> bool {
        self.index.contains_key(c)
    }

    /// Row index of `c` in canonical order.
    pub fn row_of(&self, c: &Coord) -> Option<usize> {
        self.index.get(c).map(|&i| i as usize)
    }

    /// Support downsampled to `factor ×` the current stride: the set of
    /// floor-aligned parents. This is the coordinate map of every stride-2
    /// convolution (with factor 2) and of ancestor lookups across levels.
    pub fn floor_set(&self, factor: u32) -> CoordSet {
        let ns = self.stride * factor;
        let mut parents: Vec<Coord> = self
            .coords
            .iter()
            .map(|&c| floor_align(c, ns as i32))
            .collect();
        parents.sort_unstable_by_key(canon_key);
        parents.dedup();
        CoordSet::from_sorted_unchecked(parents, ns)
    }

    /// Row indices of `self`'s coordinates inside `superset`.
    /// Errors if some coordinate is missing.
    pub fn rows_in(&self, superset: &CoordSet) -> Result<Vec<usize>> {
        self.coords
            .iter()
            .map(|c| {
                superset.row_of(c).ok_or_else(|| {
                    Error::Coords(format!("coordinate {:?} not found in superset", c))
                })
            })
            .collect()
    }

    /// Reinterprets the same points at a different stride (coordinates are
    /// unchanged; only the alignment contract moves).
    pub fn with_stride(&self, stride: u32) -> Result<CoordSet> {
        CoordSet::new(self.coords.clone(), stride)
    }
}

impl PartialEq for CoordSet {
    fn eq(&self, other: &Self) -> bool {
        self.stride == other.stride && self.coords == other.coords
    }
}
impl Eq for CoordSet {}

/// Sparse tensor: a coordinate set plus an `N×C` feature matrix, row `i`
/// belonging to coordinate `i`.
#[derive(Debug, Clone)]
pub struct SparseTensor {
    coords: CoordSet,
    feats: Array2<f64>,
}

impl SparseTensor {
    pub fn new(coords: CoordSet, feats: Array2<f64>) -> Result<Self> {
        if feats.nrows() != coords.len() {
            return Err(Error::Shape(format!(
                "feature rows ({}) != coordinate count ({})",
                feats.nrows(),
                coords.len()
            )));
        }
        Ok(SparseTensor { coords, feats })
    }

    /// Builds from unsorted (coordinate, feature row) pairs.
    /// Duplicate coordinates are an error here because their rows would be
    /// ambiguous.
    pub fn from_rows(rows: Vec<(Coord, Vec<f64>)>, stride: u32, channels: usize) -> Result<Self> {
        let mut rows = rows;
        rows.sort_unstable_by_key(|(c, _)| canon_key(c));
        for w in rows.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::Coords(format!(
                    "duplicate coordinate {:?} with distinct feature rows",
                    w[0].0
                )));
            }
        }
        let coords: Vec<Coord> = rows.iter().map(|(c, _)| *c).collect();
        let mut feats = Array2::zeros((rows.len(), channels));
        for (i, (_, f)) in rows.iter().enumerate() {
            if f.len() != channels {
                return Err(Error::Shape(format!(
                    "feature row {} has {} channels, expected {}",
                    i,
                    f.len(),
                    channels
                )));
            }
            for (j, v) in f.iter().enumerate() {
                feats[[i, j]] = *v;
            }
        }
        let coords = CoordSet::new(coords, stride)?;
        SparseTensor::new(coords, feats)
    }

    /// Occupancy tensor: one channel, all values 1.
    pub fn ones(coords: CoordSet) -> Self {
        let feats = Array2::ones((coords.len(), 1));
        SparseTensor { coords, feats }
    }

    pub fn coords(&self) -> &CoordSet {
        &self.coords
    }

    pub fn feats(&self) -> &Array2<f64> {
        &self.feats
    }

    pub fn into_parts(self) -> (CoordSet, Array2<f64>) {
        (self.coords, self.feats)
    }

    pub fn channels(&self) -> usize {
        self.feats.ncols()
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn stride(&self) -> u32 {
        self.coords.stride()
    }
}

/// Union of two supports at equal stride, with channel concatenation.
///
/// The result has `Ca + Cb` channels over `C(a) ∪ C(b)`: rows carry `a`'s
/// features in the first `Ca` columns and `b`'s in the rest, zero where a
/// side is absent. Symmetric in support; swapping the arguments swaps the
/// channel blocks.
pub fn concat_union(a: &SparseTensor, b: &SparseTensor) -> Result<SparseTensor> {
    if a.stride() != b.stride() {
        return Err(Error::Stride(format!(
            "concat_union strides differ: {} vs {}",
            a.stride(),
            b.stride()
        )));
    }
    let (ca, cb) = (a.channels(), b.channels());
    let mut union: Vec<Coord> = Vec::with_capacity(a.len() + b.len());
    union.extend_from_slice(a.coords.coords());
    union.extend_from_slice(b.coords.coords());
    union.sort_unstable_by_key(canon_key);
    union.dedup();
    let coords = CoordSet::from_sorted_unchecked(union, a.stride());

    let mut feats = Array2::zeros((coords.len(), ca + cb));
    for (i, c) in a.coords.coords().iter().enumerate() {
        let r = coords.row_of(c).expect("union contains a's coords");
        for j in 0..ca {
            feats[[r, j]] = a.feats[[i, j]];
        }
    }
    for (i, c) in b.coords.coords().iter().enumerate() {
        let r = coords.row_of(c).expect("union contains b's coords");
        for j in 0..cb {
            feats[[r, ca + j]] = b.feats[[i, j]];
        }
    }
    SparseTensor::new(coords, feats)
}

/// Restricts `t` to the rows whose coordinates appear in `keep`.
/// Canonical row order of the survivors is preserved.
pub fn prune(t: &SparseTensor, keep: &CoordSet) -> Result<SparseTensor> {
    if t.stride() != keep.stride() {
        return Err(Error::Stride(format!(
            "prune strides differ: {} vs {}",
            t.stride(),
            keep.stride()
        )));
    }
    let mut coords = Vec::new();
    let mut rows = Vec::new();
    for (i, c) in t.coords.coords().iter().enumerate() {
        if keep.contains(c) {
            coords.push(*c);
            rows.push(i);
        }
    }
    let coords = CoordSet::from_sorted_unchecked(coords, t.stride());
    let mut feats = Array2::zeros((rows.len(), t.channels()));
    for (o, &i) in rows.iter().enumerate() {
        feats.row_mut(o).assign(&t.feats.row(i));
    }
    SparseTensor::new(coords, feats)
}

/// Dense block view of a sparse tensor.
///
/// `origin` is the coordinate of dense cell `(0,0,0)`; the dense array is
/// indexed `[x][y][z][channel]` in units of the tensor's stride.
pub fn to_dense(
    t: &SparseTensor,
    origin: Coord,
    dims: [usize; 3],
) -> Result<ndarray::Array4<f64>> {
    let s = t.stride() as i32;
    let mut dense = ndarray::Array4::zeros((dims[0], dims[1], dims[2], t.channels()));
    for (i, c) in t.coords.coords().iter().enumerate() {
        let mut idx = [0usize; 3];
        for d in 0..3 {
            let off = c[d] - origin[d];
            if off < 0 || off.rem_euclid(s) != 0 {
                return Err(Error::Coords(format!(
                    "coordinate {:?} outside dense block at origin {:?}",
                    c, origin
                )));
            }
            let cell = (off / s) as usize;
            if cell >= dims[d] {
                return Err(Error::Coords(format!(
                    "coordinate {:?} outside dense block of dims {:?}",
                    c, dims
                )));
            }
            idx[d] = cell;
        }
        for ch in 0..t.channels() {
            dense[[idx[0], idx[1], idx[2], ch]] = t.feats[[i, ch]];
        }
    }
    Ok(dense)
}

/// Inverse of [`to_dense`]: keeps every cell with at least one nonzero
/// channel. Cells that are entirely zero are treated as unoccupied, so a
/// round trip reproduces the tensor only up to such rows.
pub fn from_dense(
    dense: &ndarray::Array4<f64>,
    origin: Coord,
    stride: u32,
) -> Result<SparseTensor> {
    let s = stride as i32;
    let (dx, dy, dz, ch) = dense.dim();
    let mut rows = Vec::new();
    for x in 0..dx {
        for y in 0..dy {
            for z in 0..dz {
                let any = (0..ch).any(|c| dense[[x, y, z, c]] != 0.0);
                if any {
                    let coord = [
                        origin[0] + x as i32 * s,
                        origin[1] + y as i32 * s,
                        origin[2] + z as i32 * s,
                    ];
                    let f: Vec<f64> = (0..ch).map(|c| dense[[x, y, z, c]]).collect();
                    rows.push((coord, f));
                }
            }
        }
    }
    SparseTensor::from_rows(rows, stride, ch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cs(coords: &[Coord], stride: u32) -> CoordSet {
        CoordSet::new(coords.to_vec(), stride).unwrap()
    }

    #[test]
    fn canonical_order_is_zyx() {
        let set = cs(&[[1, 0, 0], [0, 0, 1], [0, 1, 0], [0, 0, 0]], 1);
        assert_eq!(
            set.coords(),
            &[[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]
        );
    }

    #[test]
    fn duplicates_collapse_and_index_matches() {
        let set = cs(&[[2, 2, 2], [0, 0, 0], [2, 2, 2]], 2);
        assert_eq!(set.len(), 2);
        assert_eq!(set.row_of(&[2, 2, 2]), Some(1));
    }

    #[test]
    fn misaligned_coordinate_is_rejected() {
        assert!(CoordSet::new(vec![[1, 0, 0]], 2).is_err());
    }

    #[test]
    fn negative_coords_floor_correctly() {
        assert_eq!(floor_align([-3, -4, 5], 4), [-4, -4, 4]);
        let set = cs(&[[-2, 0, 0], [2, 0, 0]], 2);
        let parents = set.floor_set(2);
        assert_eq!(parents.coords(), &[[-4, 0, 0], [0, 0, 0]]);
        assert_eq!(parents.stride(), 4);
    }

    #[test]
    fn concat_union_zero_fills_disjoint_support() {
        let a = SparseTensor::from_rows(vec![([0, 0, 0], vec![1.0])], 1, 1).unwrap();
        let b = SparseTensor::from_rows(vec![([0, 0, 2], vec![5.0])], 1, 1).unwrap();
        let u = concat_union(&a, &b).unwrap();
        assert_eq!(u.len(), 2);
        assert_eq!(u.channels(), 2);
        assert_eq!(u.feats().row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(u.feats().row(1).to_vec(), vec![0.0, 5.0]);
    }

    #[test]
    fn concat_union_overlap_carries_both_sides() {
        let a = SparseTensor::from_rows(vec![([0, 0, 0], vec![1.0, 2.0])], 1, 2).unwrap();
        let b = SparseTensor::from_rows(vec![([0, 0, 0], vec![7.0])], 1, 1).unwrap();
        let u = concat_union(&a, &b).unwrap();
        assert_eq!(u.feats().row(0).to_vec(), vec![1.0, 2.0, 7.0]);
    }

    #[test]
    fn concat_union_support_is_symmetric() {
        let a = SparseTensor::from_rows(
            vec![([0, 0, 0], vec![1.0]), ([4, 0, 0], vec![2.0])],
            1,
            1,
        )
        .unwrap();
        let b = SparseTensor::from_rows(
            vec![([4, 0, 0], vec![3.0]), ([0, 4, 0], vec![4.0])],
            1,
            1,
        )
        .unwrap();
        let ab = concat_union(&a, &b).unwrap();
        let ba = concat_union(&b, &a).unwrap();
        assert_eq!(ab.coords(), ba.coords());
        for i in 0..ab.len() {
            assert_eq!(ab.feats()[[i, 0]], ba.feats()[[i, 1]]);
            assert_eq!(ab.feats()[[i, 1]], ba.feats()[[i, 0]]);
        }
    }

    #[test]
    fn concat_union_empty_sides() {
        let a = SparseTensor::from_rows(vec![([0, 0, 0], vec![1.0])], 1, 1).unwrap();
        let e = SparseTensor::new(CoordSet::empty(1), Array2::zeros((0, 1))).unwrap();
        let u = concat_union(&a, &e).unwrap();
        assert_eq!(u.len(), 1);
        assert_eq!(u.channels(), 2);
        let ee = concat_union(&e, &e).unwrap();
        assert!(ee.is_empty());
    }

    #[test]
    fn concat_union_stride_mismatch_errors() {
        let a = SparseTensor::from_rows(vec![([0, 0, 0], vec![1.0])], 1, 1).unwrap();
        let b = SparseTensor::from_rows(vec![([0, 0, 0], vec![1.0])], 2, 1).unwrap();
        assert!(concat_union(&a, &b).is_err());
    }

    #[test]
    fn prune_keeps_canonical_order() {
        let t = SparseTensor::from_rows(
            vec![
                ([0, 0, 0], vec![1.0]),
                ([1, 0, 0], vec![2.0]),
                ([0, 0, 1], vec![3.0]),
            ],
            1,
            1,
        )
        .unwrap();
        let keep = cs(&[[0, 0, 1], [0, 0, 0]], 1);
        let p = prune(&t, &keep).unwrap();
        assert_eq!(p.coords().coords(), &[[0, 0, 0], [0, 0, 1]]);
        assert_eq!(p.feats().column(0).to_vec(), vec![1.0, 3.0]);
    }

    #[test]
    fn prune_disjoint_keep_is_empty() {
        let t = SparseTensor::from_rows(vec![([0, 0, 0], vec![1.0])], 1, 1).unwrap();
        let keep = cs(&[[2, 0, 0]], 1);
        let p = prune(&t, &keep).unwrap();
        assert!(p.is_empty());
    }

    #[test]
    fn dense_round_trip() {
        let t = SparseTensor::from_rows(
            vec![
                ([0, 0, 0], vec![1.0, -2.0]),
                ([2, 4, 6], vec![0.5, 0.0]),
            ],
            2,
            2,
        )
        .unwrap();
        let dense = to_dense(&t, [0, 0, 0], [4, 4, 4]).unwrap();
        assert_eq!(dense[[0, 0, 0, 0]], 1.0);
        assert_eq!(dense[[1, 2, 3, 0]], 0.5);
        let back = from_dense(&dense, [0, 0, 0], 2).unwrap();
        assert_eq!(back.coords(), t.coords());
        assert_eq!(back.feats(), t.feats());
    }

    #[test]
    fn to_dense_out_of_block_errors() {
        let t = SparseTensor::from_rows(vec![([8, 0, 0], vec![1.0])], 1, 1).unwrap();
        assert!(to_dense(&t, [0, 0, 0], [4, 4, 4]).is_err());
    }

    #[test]
    fn from_rows_duplicate_coordinate_errors() {
        let r = SparseTensor::from_rows(
            vec![([0, 0, 0], vec![1.0]), ([0, 0, 0], vec![2.0])],
            1,
            1,
        );
        assert!(r.is_err());
    }
}

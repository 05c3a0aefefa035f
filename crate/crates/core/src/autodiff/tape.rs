//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records one forward computation as a flat list of nodes. Every
//! node owns its value (an `Array2<f64>`); parents always precede children,
//! so reverse iteration over the node list is a valid topological order for
//! backpropagation. The tape is rebuilt for every forward pass; nothing is
//! retained across steps.
//!
//! Shape rules are enforced with assertions: a mismatch is a bug in the
//! calling code, not a data error.

use ndarray::{s, Array2, Axis};

use crate::error::{Error, Result};

/// Index of a node on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Backward rule: given the output gradient, parent values and the node's own
/// value, produce one gradient per parent (same order as `parents`).
type BackFn = Box<dyn Fn(&Array2<f64>, &[&Array2<f64>], &Array2<f64>) -> Vec<Array2<f64>>>;

struct Node {
    value: Array2<f64>,
    parents: Vec<NodeId>,
    back: Option<BackFn>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.dim()
    }

    fn push(&mut self, value: Array2<f64>, parents: Vec<NodeId>, back: Option<BackFn>) -> NodeId {
        debug_assert!(parents.iter().all(|p| p.0 < self.nodes.len()));
        self.nodes.push(Node {
            value,
            parents,
            back,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts a leaf. Leaves have no backward rule; their gradients are read
    /// out of the [`Gradients`] result.
    pub fn input(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, vec![], None)
    }

    pub fn scalar(&mut self, v: f64) -> NodeId {
        self.input(Array2::from_elem((1, 1), v))
    }

    // Elementwise binary ops.

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "add: shape mismatch");
            va + vb
        };
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "sub: shape mismatch");
            va - vb
        };
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| vec![g.clone(), -g])),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "mul: shape mismatch");
            va * vb
        };
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, p, _| vec![g * p[1], g * p[0]])),
        )
    }

    /// Elementwise division, same shapes. Caller guarantees the denominator
    /// is bounded away from zero.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(va.dim(), vb.dim(), "div: shape mismatch");
            va / vb
        };
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, p, own| {
                let gb = -(g * own) / p[1];
                vec![g / p[1], gb]
            })),
        )
    }

    // Elementwise unary ops.

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.value(a);
        self.push(v, vec![a], Some(Box::new(|g, _, _| vec![-g])))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) * k;
        self.push(v, vec![a], Some(Box::new(move |g, _, _| vec![g * k])))
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a) + k;
        self.push(v, vec![a], Some(Box::new(|g, _, _| vec![g.clone()])))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                vec![g * &p[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })]
            })),
        )
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(stable_sigmoid);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, own| vec![g * &own.mapv(|y| y * (1.0 - y))])),
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, own| vec![g * &own.mapv(|y| 1.0 - y * y)])),
        )
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(stable_softplus);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| vec![g * &p[0].mapv(stable_sigmoid)])),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, vec![a], Some(Box::new(|g, _, own| vec![g * own])))
    }

    /// Natural log; inputs must be strictly positive.
    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, vec![a], Some(Box::new(|g, p, _| vec![g / p[0]])))
    }

    /// Square root; inputs must be strictly positive (clamp first).
    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, _, own| vec![g * &own.mapv(|y| 0.5 / y)])),
        )
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * x);
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| vec![g * &p[0].mapv(|x| 2.0 * x)])),
        )
    }

    /// `max(x, k)` elementwise. Subgradient: passes through where `x >= k`.
    pub fn max_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(k));
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, p, _| {
                vec![g * &p[0].mapv(|x| if x >= k { 1.0 } else { 0.0 })]
            })),
        )
    }

    /// `min(x, k)` elementwise. Subgradient: passes through where `x <= k`.
    pub fn min_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.min(k));
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, p, _| {
                vec![g * &p[0].mapv(|x| if x <= k { 1.0 } else { 0.0 })]
            })),
        )
    }

    // Matrix ops.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(
                va.ncols(),
                vb.nrows(),
                "matmul: inner dims {} vs {}",
                va.ncols(),
                vb.nrows()
            );
            va.dot(vb)
        };
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, p, _| {
                vec![g.dot(&p[1].t()), p[0].t().dot(g)]
            })),
        )
    }

    /// Broadcast add of a `1×n` bias row to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = {
            let (va, vb) = (self.value(a), self.value(b));
            assert_eq!(vb.nrows(), 1, "add_bias: bias must be 1×n");
            assert_eq!(va.ncols(), vb.ncols(), "add_bias: width mismatch");
            va + &vb.row(0)
        };
        self.push(
            v,
            vec![a, b],
            Some(Box::new(|g, _, _| {
                let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![g.clone(), gb]
            })),
        )
    }

    /// Scales column `j` of `a` (`m×n`) by the scalar `r[j]` (`1×n`).
    pub fn mul_row(&mut self, a: NodeId, r: NodeId) -> NodeId {
        let v = {
            let (va, vr) = (self.value(a), self.value(r));
            assert_eq!(vr.nrows(), 1, "mul_row: scale must be 1×n");
            assert_eq!(va.ncols(), vr.ncols(), "mul_row: width mismatch");
            va * &vr.row(0)
        };
        self.push(
            v,
            vec![a, r],
            Some(Box::new(|g, p, _| {
                let ga = g * &p[1].row(0);
                let gr = (g * p[0]).sum_axis(Axis(0)).insert_axis(Axis(0));
                vec![ga, gr]
            })),
        )
    }

    /// Scales row `i` of `a` (`m×n`) by the scalar `s[i]` (`m×1`).
    pub fn mul_col(&mut self, a: NodeId, sc: NodeId) -> NodeId {
        let v = {
            let (va, vs) = (self.value(a), self.value(sc));
            assert_eq!(vs.ncols(), 1, "mul_col: scale must be m×1");
            assert_eq!(va.nrows(), vs.nrows(), "mul_col: row mismatch");
            va * vs
        };
        self.push(
            v,
            vec![a, sc],
            Some(Box::new(|g, p, _| {
                let ga = g * p[1];
                let gs = (g * p[0]).sum_axis(Axis(1)).insert_axis(Axis(1));
                vec![ga, gs]
            })),
        )
    }

    // Reductions.

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                vec![Array2::from_elem(p[0].dim(), g[[0, 0]])]
            })),
        )
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        assert!(n > 0.0, "mean_all: empty matrix");
        let v = Array2::from_elem((1, 1), self.value(a).sum() / n);
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, p, _| {
                vec![Array2::from_elem(p[0].dim(), g[[0, 0]] / n)]
            })),
        )
    }

    /// Row sums: `m×n` → `m×1`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(
            v,
            vec![a],
            Some(Box::new(|g, p, _| {
                let mut ga = Array2::zeros(p[0].dim());
                for (mut row, gv) in ga.rows_mut().into_iter().zip(g.column(0)) {
                    row.fill(*gv);
                }
                vec![ga]
            })),
        )
    }

    // Structural ops.

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.nrows(), vb.nrows(), "concat_cols: row mismatch");
        let (m, ca) = va.dim();
        let cb = vb.ncols();
        let mut v = Array2::zeros((m, ca + cb));
        v.slice_mut(s![.., ..ca]).assign(va);
        v.slice_mut(s![.., ca..]).assign(vb);
        self.push(
            v,
            vec![a, b],
            Some(Box::new(move |g, _, _| {
                vec![
                    g.slice(s![.., ..ca]).to_owned(),
                    g.slice(s![.., ca..]).to_owned(),
                ]
            })),
        )
    }

    /// Concatenates any number of column blocks in one node. Equivalent to a
    /// fold over `concat_cols` but without the O(n^2) intermediate copies.
    pub fn concat_cols_n(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols_n: no parts");
        let m = self.value(parts[0]).nrows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let vp = self.value(p);
                assert_eq!(vp.nrows(), m, "concat_cols_n: row mismatch");
                vp.ncols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut v = Array2::zeros((m, total));
        let mut at = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            v.slice_mut(s![.., at..at + w]).assign(self.value(p));
            at += w;
        }
        self.push(
            v,
            parts.to_vec(),
            Some(Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(widths.len());
                let mut at = 0;
                for &w in &widths {
                    out.push(g.slice(s![.., at..at + w]).to_owned());
                    at += w;
                }
                out
            })),
        )
    }

    pub fn slice_cols(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let va = self.value(a);
        assert!(lo < hi && hi <= va.ncols(), "slice_cols: bad range");
        let v = va.slice(s![.., lo..hi]).to_owned();
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, p, _| {
                let mut ga = Array2::zeros(p[0].dim());
                ga.slice_mut(s![.., lo..hi]).assign(g);
                vec![ga]
            })),
        )
    }

    pub fn slice_rows(&mut self, a: NodeId, lo: usize, hi: usize) -> NodeId {
        let va = self.value(a);
        assert!(lo < hi && hi <= va.nrows(), "slice_rows: bad range");
        let v = va.slice(s![lo..hi, ..]).to_owned();
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, p, _| {
                let mut ga = Array2::zeros(p[0].dim());
                ga.slice_mut(s![lo..hi, ..]).assign(g);
                vec![ga]
            })),
        )
    }

    /// Row gather: `out[i] = a[rows[i]]`. Indices may repeat.
    pub fn gather_rows(&mut self, a: NodeId, rows: Vec<u32>) -> NodeId {
        let va = self.value(a);
        let n = va.ncols();
        let mut v = Array2::zeros((rows.len(), n));
        for (o, &r) in rows.iter().enumerate() {
            v.row_mut(o).assign(&va.row(r as usize));
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, p, _| {
                let mut ga = Array2::zeros(p[0].dim());
                for (o, &r) in rows.iter().enumerate() {
                    let mut dst = ga.row_mut(r as usize);
                    dst += &g.row(o);
                }
                vec![ga]
            })),
        )
    }

    /// Row scatter-add: `out[rows[i]] += a[i]`, output has `out_rows` rows.
    /// Also serves as segment sum when `rows` maps entries to segments.
    pub fn scatter_add_rows(&mut self, a: NodeId, rows: Vec<u32>, out_rows: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.nrows(), rows.len(), "scatter_add_rows: index count");
        debug_assert!(rows.iter().all(|&r| (r as usize) < out_rows));
        let mut v = Array2::zeros((out_rows, va.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            let mut dst = v.row_mut(r as usize);
            dst += &va.row(i);
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, p, _| {
                let mut ga = Array2::zeros(p[0].dim());
                for (i, &r) in rows.iter().enumerate() {
                    ga.row_mut(i).assign(&g.row(r as usize));
                }
                vec![ga]
            })),
        )
    }

    /// Fused scatter-add of several sources into one `(out_rows, out_ch)`
    /// matrix: `out[rows_k[i]] += src_k[i]` for every source `k`. Equivalent
    /// to chaining [`Tape::scatter_add_rows`] and [`Tape::add`] per source,
    /// but records a single full-size node, which is what bounds memory when
    /// a convolution accumulates its kernel offsets over a large support.
    pub fn scatter_add_many(
        &mut self,
        parts: Vec<(NodeId, Vec<u32>)>,
        out_rows: usize,
        out_ch: usize,
    ) -> NodeId {
        let mut v = Array2::zeros((out_rows, out_ch));
        for (src, rows) in &parts {
            let vs = self.value(*src);
            assert_eq!(vs.nrows(), rows.len(), "scatter_add_many: index count");
            assert_eq!(vs.ncols(), out_ch, "scatter_add_many: channels");
            debug_assert!(rows.iter().all(|&r| (r as usize) < out_rows));
            for (i, &r) in rows.iter().enumerate() {
                let mut dst = v.row_mut(r as usize);
                dst += &vs.row(i);
            }
        }
        let parents: Vec<NodeId> = parts.iter().map(|(src, _)| *src).collect();
        let rows_per: Vec<Vec<u32>> = parts.into_iter().map(|(_, rows)| rows).collect();
        self.push(
            v,
            parents,
            Some(Box::new(move |g, _, _| {
                rows_per
                    .iter()
                    .map(|rows| {
                        let mut gs = Array2::zeros((rows.len(), g.ncols()));
                        for (i, &r) in rows.iter().enumerate() {
                            gs.row_mut(i).assign(&g.row(r as usize));
                        }
                        gs
                    })
                    .collect()
            })),
        )
    }

    /// Softmax over contiguous row segments of an `m×1` score column.
    /// `offsets` has one entry per segment boundary (CSR style,
    /// `offsets[0] == 0`, `offsets.last() == m`). Empty segments are allowed.
    pub fn segment_softmax(&mut self, a: NodeId, offsets: Vec<u32>) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.ncols(), 1, "segment_softmax: scores must be m×1");
        assert_eq!(
            *offsets.last().expect("offsets nonempty") as usize,
            va.nrows(),
            "segment_softmax: offsets must cover all rows"
        );
        let mut v = va.clone();
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0] as usize, w[1] as usize);
            if lo == hi {
                continue;
            }
            let mut seg = v.slice_mut(s![lo..hi, ..]);
            let mx = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            seg.mapv_inplace(|x| (x - mx).exp());
            let sum: f64 = seg.iter().sum();
            seg.mapv_inplace(|x| x / sum);
        }
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, _, own| {
                let mut ga = Array2::zeros(own.dim());
                for w in offsets.windows(2) {
                    let (lo, hi) = (w[0] as usize, w[1] as usize);
                    if lo == hi {
                        continue;
                    }
                    let dot: f64 = (lo..hi).map(|i| own[[i, 0]] * g[[i, 0]]).sum();
                    for i in lo..hi {
                        ga[[i, 0]] = own[[i, 0]] * (g[[i, 0]] - dot);
                    }
                }
                vec![ga]
            })),
        )
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.len(), rows * cols, "reshape: element count mismatch");
        let flat: Vec<f64> = va.iter().cloned().collect();
        let v = Array2::from_shape_vec((rows, cols), flat).expect("reshape");
        self.push(
            v,
            vec![a],
            Some(Box::new(move |g, p, _| {
                let flat: Vec<f64> = g.iter().cloned().collect();
                vec![Array2::from_shape_vec(p[0].dim(), flat).expect("reshape back")]
            })),
        )
    }

    /// Reverse pass from a scalar loss node. Gradients flow to every node
    /// that the loss depends on; unreachable nodes stay `None`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.dim() != (1, 1) {
            return Err(Error::Autodiff(format!(
                "backward needs a 1×1 loss node, got {:?}",
                lv.dim()
            )));
        }
        if !lv[[0, 0]].is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is {} before backward",
                lv[[0, 0]]
            )));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Some(back) = &node.back {
                let pvals: Vec<&Array2<f64>> =
                    node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
                let contribs = back(&g, &pvals, &node.value);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (p, c) in node.parents.iter().zip(contribs) {
                    debug_assert_eq!(c.dim(), self.nodes[p.0].value.dim());
                    match &mut grads[p.0] {
                        Some(acc) => *acc += &c,
                        slot => *slot = Some(c),
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

#[inline]
pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus: returns `x` with `softplus(x) == y`, `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    assert!(y > 0.0);
    // ln(e^y - 1), computed without overflow for large y.
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

//! Sparse convolutional building blocks.
//!
//! Convolutions are "generalized sparse": kernels are cubes of integer
//! offsets in units of the input stride, features exist only on occupied
//! coordinates, and the output support follows the stride rule. Stride-1
//! kernels are centered (offsets −1..1 for size 3); stride-2 kernels are
//! forward (offsets {0,1}), so every output cell aggregates exactly the
//! occupied corners of its 2×2×2 block and every transpose-conv child has a
//! unique parent.
//!
//! Weight layout: `[K³, C_in, C_out]`, offset-major, with offsets enumerated
//! lexicographically by `(dz, dy, dx)` to match the canonical coordinate
//! order.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Param, ParamStore};
use crate::error::{Error, Result};
use crate::session::Session;
use crate::sparse::{canon_key, floor_align, Coord, CoordSet, SparseTensor};

/// A sparse tensor whose features live on a session tape.
#[derive(Debug, Clone)]
pub struct TapedSparse {
    pub coords: CoordSet,
    pub feat: NodeId,
}

impl TapedSparse {
    pub fn new(coords: CoordSet, feat: NodeId) -> Self {
        TapedSparse { coords, feat }
    }

    /// Lifts plain values onto the session tape as an input leaf.
    pub fn from_values(sess: &mut Session, t: &SparseTensor) -> Self {
        let feat = sess.tape.input(t.feats().clone());
        TapedSparse { coords: t.coords().clone(), feat }
    }

    /// Copies the tape values back out into a plain tensor.
    pub fn to_values(&self, sess: &Session) -> Result<SparseTensor> {
        SparseTensor::new(self.coords.clone(), sess.tape.value(self.feat).clone())
    }

    pub fn channels(&self, sess: &Session) -> usize {
        sess.tape.shape(self.feat).1
    }
}

/// Stride behavior of a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stride {
    /// Output support equals input support.
    One,
    /// Output support is the stride-doubled floor set.
    Down2,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: Stride,
}

impl ConvSpec {
    pub fn k1(in_ch: usize, out_ch: usize) -> Self {
        ConvSpec { in_ch, out_ch, kernel: 1, stride: Stride::One }
    }
    pub fn k3(in_ch: usize, out_ch: usize) -> Self {
        ConvSpec { in_ch, out_ch, kernel: 3, stride: Stride::One }
    }
    pub fn down2(in_ch: usize, out_ch: usize) -> Self {
        ConvSpec { in_ch, out_ch, kernel: 2, stride: Stride::Down2 }
    }
}

/// Kernel offsets in lattice units (unscaled), `(dz,dy,dx)`-lexicographic.
pub fn kernel_offsets(kernel: usize) -> Vec<Coord> {
    let range: Vec<i32> = match kernel {
        1 => vec![0],
        2 => vec![0, 1],
        3 => vec![-1, 0, 1],
        k => panic!("unsupported kernel size {}", k),
    };
    let mut offs = Vec::with_capacity(kernel * kernel * kernel);
    for &dz in &range {
        for &dy in &range {
            for &dx in &range {
                offs.push([dx, dy, dz]);
            }
        }
    }
    offs
}

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> f64 {
    let b = (6.0 / (fan_in + fan_out) as f64).sqrt();
    rng.gen_range(-b..b)
}

/// Named convolution layer.
#[derive(Debug, Clone)]
pub struct Conv {
    pub name: String,
    pub spec: ConvSpec,
}

impl Conv {
    pub fn new(name: impl Into<String>, spec: ConvSpec) -> Self {
        Conv { name: name.into(), spec }
    }

    fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }
    fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let k3 = self.spec.kernel.pow(3);
        let fan_in = k3 * self.spec.in_ch;
        let w = Array2::from_shape_fn((k3 * self.spec.in_ch, self.spec.out_ch), |_| {
            glorot(rng, fan_in, self.spec.out_ch)
        });
        store.insert(
            &self.weight_name(),
            Param::new(vec![k3, self.spec.in_ch, self.spec.out_ch], w),
        );
        store.insert(
            &self.bias_name(),
            Param::new(vec![self.spec.out_ch], Array2::zeros((1, self.spec.out_ch))),
        );
    }

    /// Forward convolution. Output coordinates are fully determined by the
    /// input support and the stride rule.
    pub fn apply(&self, sess: &mut Session, x: &TapedSparse) -> TapedSparse {
        let spec = self.spec;
        debug_assert_eq!(
            sess.tape.shape(x.feat).1,
            spec.in_ch,
            "conv {}: input channels",
            self.name
        );
        let s_in = x.coords.stride() as i32;
        let out_coords = match spec.stride {
            Stride::One => x.coords.clone(),
            Stride::Down2 => x.coords.floor_set(2),
        };
        let n_out = out_coords.len();
        if n_out == 0 {
            let feat = sess.tape.input(Array2::zeros((0, spec.out_ch)));
            return TapedSparse::new(out_coords, feat);
        }

        let w = sess.param(&self.weight_name());
        let b = sess.param(&self.bias_name());
        let offsets = kernel_offsets(spec.kernel);
        let mut parts: Vec<(NodeId, Vec<u32>)> = Vec::new();
        for (ko, off) in offsets.iter().enumerate() {
            let mut in_rows: Vec<u32> = Vec::new();
            let mut out_rows: Vec<u32> = Vec::new();
            for (orow, oc) in out_coords.coords().iter().enumerate() {
                let c = [
                    oc[0] + off[0] * s_in,
                    oc[1] + off[1] * s_in,
                    oc[2] + off[2] * s_in,
                ];
                if let Some(irow) = x.coords.row_of(&c) {
                    in_rows.push(irow as u32);
                    out_rows.push(orow as u32);
                }
            }
            if in_rows.is_empty() {
                continue;
            }
            let wk = sess
                .tape
                .slice_rows(w, ko * spec.in_ch, (ko + 1) * spec.in_ch);
            let gathered = sess.tape.gather_rows(x.feat, in_rows);
            let prod = sess.tape.matmul(gathered, wk);
            parts.push((prod, out_rows));
        }
        let acc = if parts.is_empty() {
            sess.tape.input(Array2::zeros((n_out, spec.out_ch)))
        } else {
            sess.tape.scatter_add_many(parts, n_out, spec.out_ch)
        };
        let feat = sess.tape.add_bias(acc, b);
        TapedSparse::new(out_coords, feat)
    }
}

/// Where a transpose convolution puts its output.
pub enum DeconvTarget<'a> {
    /// Emit every child of every input coordinate.
    Generative,
    /// Emit exactly this set; every coordinate must be reachable.
    Targeted(&'a CoordSet),
}

/// Stride-2 transpose convolution with a 2³ kernel. Halves the stride.
#[derive(Debug, Clone)]
pub struct Deconv {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Deconv {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize) -> Self {
        Deconv { name: name.into(), in_ch, out_ch }
    }

    fn weight_name(&self) -> String {
        format!("{}.w", self.name)
    }
    fn bias_name(&self) -> String {
        format!("{}.b", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let fan_in = self.in_ch; // each child sees exactly one parent
        let w = Array2::from_shape_fn((8 * self.in_ch, self.out_ch), |_| {
            glorot(rng, fan_in, self.out_ch)
        });
        store.insert(
            &self.weight_name(),
            Param::new(vec![8, self.in_ch, self.out_ch], w),
        );
        store.insert(
            &self.bias_name(),
            Param::new(vec![self.out_ch], Array2::zeros((1, self.out_ch))),
        );
    }

    pub fn apply(
        &self,
        sess: &mut Session,
        x: &TapedSparse,
        target: DeconvTarget,
    ) -> Result<TapedSparse> {
        let s_in = x.coords.stride();
        if s_in % 2 != 0 {
            return Err(Error::Stride(format!(
                "deconv {}: input stride {} is not even",
                self.name, s_in
            )));
        }
        let s_out = s_in / 2;
        let so = s_out as i32;
        let offsets = kernel_offsets(2);

        let out_coords = match &target {
            DeconvTarget::Generative => {
                let mut children: Vec<Coord> = Vec::with_capacity(x.coords.len() * 8);
                for c in x.coords.coords() {
                    for off in &offsets {
                        children.push([c[0] + off[0] * so, c[1] + off[1] * so, c[2] + off[2] * so]);
                    }
                }
                children.sort_unstable_by_key(canon_key);
                // A 2³ kernel gives every child a unique parent, so no
                // duplicates can appear.
                debug_assert!(children.windows(2).all(|w| w[0] != w[1]));
                CoordSet::from_sorted_unchecked(children, s_out)
            }
            DeconvTarget::Targeted(t) => {
                if t.stride() != s_out {
                    return Err(Error::Stride(format!(
                        "deconv {}: target stride {} != {}",
                        self.name,
                        t.stride(),
                        s_out
                    )));
                }
                for u in t.coords() {
                    let parent = floor_align(*u, s_in as i32);
                    if !x.coords.contains(&parent) {
                        return Err(Error::Coords(format!(
                            "deconv {}: target {:?} unreachable (no parent {:?})",
                            self.name, u, parent
                        )));
                    }
                }
                (*t).clone()
            }
        };
        let n_out = out_coords.len();
        if n_out == 0 {
            let feat = sess.tape.input(Array2::zeros((0, self.out_ch)));
            return Ok(TapedSparse::new(out_coords, feat));
        }

        let w = sess.param(&self.weight_name());
        let b = sess.param(&self.bias_name());
        let mut parts: Vec<(NodeId, Vec<u32>)> = Vec::new();
        for (ko, off) in offsets.iter().enumerate() {
            let mut in_rows: Vec<u32> = Vec::new();
            let mut out_rows: Vec<u32> = Vec::new();
            for (orow, u) in out_coords.coords().iter().enumerate() {
                let parent = [u[0] - off[0] * so, u[1] - off[1] * so, u[2] - off[2] * so];
                if floor_align(*u, s_in as i32) != parent {
                    continue;
                }
                if let Some(irow) = x.coords.row_of(&parent) {
                    in_rows.push(irow as u32);
                    out_rows.push(orow as u32);
                }
            }
            if in_rows.is_empty() {
                continue;
            }
            let wk = sess.tape.slice_rows(w, ko * self.in_ch, (ko + 1) * self.in_ch);
            let gathered = sess.tape.gather_rows(x.feat, in_rows);
            let prod = sess.tape.matmul(gathered, wk);
            parts.push((prod, out_rows));
        }
        let acc = if parts.is_empty() {
            sess.tape.input(Array2::zeros((n_out, self.out_ch)))
        } else {
            sess.tape.scatter_add_many(parts, n_out, self.out_ch)
        };
        let feat = sess.tape.add_bias(acc, b);
        Ok(TapedSparse::new(out_coords, feat))
    }
}

/// Two-branch residual block. Branch A: 1³ → 3³ at C/2 channels; branch B:
/// 1³ → 3³ → 1³ at C/2. Outputs concatenate back to C and add the input.
#[derive(Debug, Clone)]
pub struct Irn {
    a0: Conv,
    a1: Conv,
    b0: Conv,
    b1: Conv,
    b2: Conv,
}

impl Irn {
    pub fn new(name: &str, channels: usize) -> Self {
        assert!(channels % 2 == 0, "IRN needs even channel count");
        let h = channels / 2;
        Irn {
            a0: Conv::new(format!("{}.a0", name), ConvSpec::k1(channels, h)),
            a1: Conv::new(format!("{}.a1", name), ConvSpec::k3(h, h)),
            b0: Conv::new(format!("{}.b0", name), ConvSpec::k1(channels, h)),
            b1: Conv::new(format!("{}.b1", name), ConvSpec::k3(h, h)),
            b2: Conv::new(format!("{}.b2", name), ConvSpec::k1(h, h)),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for c in [&self.a0, &self.a1, &self.b0, &self.b1, &self.b2] {
            c.init(store, rng);
        }
    }

    pub fn apply(&self, sess: &mut Session, x: &TapedSparse) -> TapedSparse {
        let a = self.a0.apply(sess, x);
        let a = TapedSparse::new(a.coords, sess.tape.relu(a.feat));
        let a = self.a1.apply(sess, &a);
        let b = self.b0.apply(sess, x);
        let b = TapedSparse::new(b.coords, sess.tape.relu(b.feat));
        let b = self.b1.apply(sess, &b);
        let b = TapedSparse::new(b.coords, sess.tape.relu(b.feat));
        let b = self.b2.apply(sess, &b);
        debug_assert_eq!(a.coords, b.coords);
        let cat = sess.tape.concat_cols(a.feat, b.feat);
        let out = sess.tape.add(x.feat, cat);
        TapedSparse::new(x.coords.clone(), out)
    }
}

/// Plain residual block: 3³ conv, ReLU, 3³ conv, plus skip.
#[derive(Debug, Clone)]
pub struct ResBlock {
    c0: Conv,
    c1: Conv,
}

impl ResBlock {
    pub fn new(name: &str, channels: usize) -> Self {
        ResBlock {
            c0: Conv::new(format!("{}.c0", name), ConvSpec::k3(channels, channels)),
            c1: Conv::new(format!("{}.c1", name), ConvSpec::k3(channels, channels)),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.c0.init(store, rng);
        self.c1.init(store, rng);
    }

    pub fn apply(&self, sess: &mut Session, x: &TapedSparse) -> TapedSparse {
        let h = self.c0.apply(sess, x);
        let h = TapedSparse::new(h.coords, sess.tape.relu(h.feat));
        let h = self.c1.apply(sess, &h);
        let out = sess.tape.add(x.feat, h.feat);
        TapedSparse::new(x.coords.clone(), out)
    }
}

/// Stride-2 downsampling block: 2³ down-conv, ReLU, then three IRNs.
#[derive(Debug, Clone)]
pub struct DownBlock {
    conv: Conv,
    irns: Vec<Irn>,
}

impl DownBlock {
    pub fn new(name: &str, in_ch: usize, out_ch: usize) -> Self {
        DownBlock {
            conv: Conv::new(format!("{}.conv", name), ConvSpec::down2(in_ch, out_ch)),
            irns: (0..3)
                .map(|i| Irn::new(&format!("{}.irn{}", name, i), out_ch))
                .collect(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.conv.init(store, rng);
        for irn in &self.irns {
            irn.init(store, rng);
        }
    }

    pub fn apply(&self, sess: &mut Session, x: &TapedSparse) -> TapedSparse {
        let mut h = self.conv.apply(sess, x);
        h = TapedSparse::new(h.coords, sess.tape.relu(h.feat));
        for irn in &self.irns {
            h = irn.apply(sess, &h);
        }
        h
    }
}

/// Stride-halving block: 2³ transpose conv, ReLU, three IRNs. The occupancy
/// head and pruning are separate so callers can run generative or targeted.
#[derive(Debug, Clone)]
pub struct UpCore {
    deconv: Deconv,
    irns: Vec<Irn>,
}

impl UpCore {
    pub fn new(name: &str, in_ch: usize, out_ch: usize) -> Self {
        UpCore {
            deconv: Deconv::new(format!("{}.deconv", name), in_ch, out_ch),
            irns: (0..3)
                .map(|i| Irn::new(&format!("{}.irn{}", name, i), out_ch))
                .collect(),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.deconv.init(store, rng);
        for irn in &self.irns {
            irn.init(store, rng);
        }
    }

    pub fn apply(
        &self,
        sess: &mut Session,
        x: &TapedSparse,
        target: DeconvTarget,
    ) -> Result<TapedSparse> {
        let mut h = self.deconv.apply(sess, x, target)?;
        h = TapedSparse::new(h.coords, sess.tape.relu(h.feat));
        for irn in &self.irns {
            h = irn.apply(sess, &h);
        }
        Ok(h)
    }
}

/// Two-layer perceptron applied per row: FC(hidden) → ReLU → FC(out).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub name: String,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
}

impl Mlp {
    pub fn new(name: impl Into<String>, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Mlp { name: name.into(), in_dim, hidden, out_dim }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let w0 = Array2::from_shape_fn((self.in_dim, self.hidden), |_| {
            glorot(rng, self.in_dim, self.hidden)
        });
        let w1 = Array2::from_shape_fn((self.hidden, self.out_dim), |_| {
            glorot(rng, self.hidden, self.out_dim)
        });
        store.insert(
            &format!("{}.w0", self.name),
            Param::new(vec![self.in_dim, self.hidden], w0),
        );
        store.insert(
            &format!("{}.b0", self.name),
            Param::new(vec![self.hidden], Array2::zeros((1, self.hidden))),
        );
        store.insert(
            &format!("{}.w1", self.name),
            Param::new(vec![self.hidden, self.out_dim], w1),
        );
        store.insert(
            &format!("{}.b1", self.name),
            Param::new(vec![self.out_dim], Array2::zeros((1, self.out_dim))),
        );
    }

    pub fn apply(&self, sess: &mut Session, x: NodeId) -> NodeId {
        let w0 = sess.param(&format!("{}.w0", self.name));
        let b0 = sess.param(&format!("{}.b0", self.name));
        let w1 = sess.param(&format!("{}.w1", self.name));
        let b1 = sess.param(&format!("{}.b1", self.name));
        let h = sess.tape.matmul(x, w0);
        let h = sess.tape.add_bias(h, b0);
        let h = sess.tape.relu(h);
        let h = sess.tape.matmul(h, w1);
        sess.tape.add_bias(h, b1)
    }
}

/// Rows of the `k` largest logits, ties broken toward canonical order.
/// The returned indices are ascending, so gathering with them preserves
/// canonical row order.
pub fn top_k_rows(logits: &Array2<f64>, k: usize) -> Vec<u32> {
    assert_eq!(logits.ncols(), 1, "top_k_rows expects a logit column");
    let mut order: Vec<u32> = (0..logits.nrows() as u32).collect();
    order.sort_by(|&a, &b| {
        let (la, lb) = (logits[[a as usize, 0]], logits[[b as usize, 0]]);
        lb.partial_cmp(&la)
            .expect("finite logits")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::SparseTensor;
    use ndarray::array;
    use rand::SeedableRng;

    fn ones_input(coords: &[Coord], stride: u32, ch: usize) -> (CoordSet, Array2<f64>) {
        let cs = CoordSet::new(coords.to_vec(), stride).unwrap();
        let f = Array2::ones((cs.len(), ch));
        (cs, f)
    }

    #[test]
    fn kernel_offsets_are_zyx_lexicographic() {
        let offs = kernel_offsets(2);
        assert_eq!(offs[0], [0, 0, 0]);
        assert_eq!(offs[1], [1, 0, 0]);
        assert_eq!(offs[2], [0, 1, 0]);
        assert_eq!(offs[4], [0, 0, 1]);
        assert_eq!(kernel_offsets(3).len(), 27);
        assert_eq!(kernel_offsets(3)[13], [0, 0, 0]);
    }

    #[test]
    fn stride1_conv_preserves_support() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv::new("c", ConvSpec::k3(2, 3));
        conv.init(&mut store, &mut rng);
        let mut sess = Session::infer(&store);
        let (cs, f) = ones_input(&[[0, 0, 0], [1, 0, 0], [5, 5, 5]], 1, 2);
        let x = TapedSparse::new(cs.clone(), sess.tape.input(f));
        let y = conv.apply(&mut sess, &x);
        assert_eq!(y.coords, cs);
        assert_eq!(sess.tape.shape(y.feat), (3, 3));
    }

    #[test]
    fn down2_support_is_floor_set() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv::new("c", ConvSpec::down2(1, 2));
        conv.init(&mut store, &mut rng);
        let mut sess = Session::infer(&store);
        let (cs, f) = ones_input(&[[0, 0, 0], [1, 1, 1], [2, 0, 0], [3, 1, 0]], 1, 1);
        let x = TapedSparse::new(cs, sess.tape.input(f));
        let y = conv.apply(&mut sess, &x);
        assert_eq!(y.coords.coords(), &[[0, 0, 0], [2, 0, 0]]);
        assert_eq!(y.coords.stride(), 2);
    }

    #[test]
    fn isolated_point_sees_only_center_weight() {
        // One point far from everything: a 3³ conv reduces to W_center·f + b.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = Conv::new("c", ConvSpec::k3(2, 2));
        conv.init(&mut store, &mut rng);
        let w = store.get("c.w").unwrap().value.clone();
        let mut sess = Session::infer(&store);
        let cs = CoordSet::new(vec![[10, 10, 10]], 1).unwrap();
        let f = array![[2.0, -1.0]];
        let x = TapedSparse::new(cs, sess.tape.input(f.clone()));
        let y = conv.apply(&mut sess, &x);
        let center = 13; // offset [0,0,0] in (dz,dy,dx)-lex order of 3³
        let wc = w.slice(ndarray::s![center * 2..(center + 1) * 2, ..]);
        let want = f.dot(&wc);
        let got = sess.tape.value(y.feat);
        for j in 0..2 {
            assert!((got[[0, j]] - want[[0, j]]).abs() < 1e-12);
        }
    }

    #[test]
    fn deconv_generative_children_and_targeted_match() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let dc = Deconv::new("d", 2, 3);
        dc.init(&mut store, &mut rng);
        let mut sess = Session::infer(&store);
        let (cs, f) = ones_input(&[[0, 0, 0], [4, 0, 0]], 4, 2);
        let x = TapedSparse::new(cs, sess.tape.input(f));
        let gen = dc.apply(&mut sess, &x, DeconvTarget::Generative).unwrap();
        assert_eq!(gen.coords.len(), 16);
        assert_eq!(gen.coords.stride(), 2);

        // Targeted at a subset reproduces the same rows.
        let sub = CoordSet::new(vec![[0, 0, 0], [6, 2, 2]], 2).unwrap();
        let tg = dc.apply(&mut sess, &x, DeconvTarget::Targeted(&sub)).unwrap();
        let gv = sess.tape.value(gen.feat).clone();
        let tv = sess.tape.value(tg.feat).clone();
        for (i, c) in sub.coords().iter().enumerate() {
            let gr = gen.coords.row_of(c).unwrap();
            for j in 0..3 {
                assert!((tv[[i, j]] - gv[[gr, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deconv_unreachable_target_errors() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dc = Deconv::new("d", 1, 1);
        dc.init(&mut store, &mut rng);
        let mut sess = Session::infer(&store);
        let (cs, f) = ones_input(&[[0, 0, 0]], 4, 1);
        let x = TapedSparse::new(cs, sess.tape.input(f));
        let bad = CoordSet::new(vec![[8, 0, 0]], 2).unwrap();
        assert!(dc.apply(&mut sess, &x, DeconvTarget::Targeted(&bad)).is_err());
    }

    #[test]
    fn irn_with_zero_weights_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let irn = Irn::new("r", 4);
        irn.init(&mut store, &mut rng);
        for (_, p) in store.iter_mut() {
            p.value.fill(0.0);
        }
        let mut sess = Session::infer(&store);
        let t = SparseTensor::from_rows(
            vec![([0, 0, 0], vec![1.0, -2.0, 3.0, 0.5]), ([1, 0, 0], vec![0.0, 1.0, 2.0, 3.0])],
            1,
            4,
        )
        .unwrap();
        let x = TapedSparse::new(t.coords().clone(), sess.tape.input(t.feats().clone()));
        let y = irn.apply(&mut sess, &x);
        assert_eq!(sess.tape.value(y.feat), t.feats());
    }

    #[test]
    fn top_k_breaks_ties_canonically() {
        let logits = array![[1.0], [3.0], [3.0], [0.5]];
        assert_eq!(top_k_rows(&logits, 2), vec![1, 2]);
        let logits = array![[2.0], [2.0], [2.0]];
        assert_eq!(top_k_rows(&logits, 2), vec![0, 1]);
        assert_eq!(top_k_rows(&logits, 5), vec![0, 1, 2]);
    }

    #[test]
    fn conv_gradients_flow_to_weights_and_input() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let conv = Conv::new("c", ConvSpec::k3(2, 2));
        conv.init(&mut store, &mut rng);
        let mut sess = Session::infer(&store);
        let (cs, _) = ones_input(&[[0, 0, 0], [1, 0, 0], [0, 1, 0]], 1, 2);
        let f = Array2::from_shape_fn((3, 2), |(i, j)| (i + j) as f64 * 0.3 + 0.1);
        let x = TapedSparse::new(cs, sess.tape.input(f));
        let y = conv.apply(&mut sess, &x);
        let sq = sess.tape.square(y.feat);
        let loss = sess.tape.sum_all(sq);
        let grads = sess.tape.backward(loss).unwrap();
        let pg = sess.param_grads(&grads);
        let gw = &pg["c.w"];
        assert!(gw.iter().any(|&v| v != 0.0));
        assert!(grads.get(x.feat).is_some());
    }
}

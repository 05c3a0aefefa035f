//! Inter-frame prediction: estimate per-channel motion between two latent
//! frames, compress it, and synthesize a prediction of the current frame by
//! warped interpolation over the reference.
//!
//! The pieces chain as: [`Kabm`] matches blocks across frames with ball-KNN
//! attention and emits a flow embedding; [`Mmf`] fuses it into a compact
//! two-path embedding at doubled stride; [`LatentCodec`] quantizes and
//! entropy-codes it; [`Mmr`] reconstructs a dense [`MotionField`] on the
//! target support; [`awi3d`] interpolates reference features at the warped
//! positions. [`InterStage`] wires one such stage; the codec runs two of them
//! at different resolutions.
//!
//! Everything before the entropy coder is differentiable. Neighbor selection
//! (ball and 3-NN) is treated as constant under backpropagation: gradients
//! flow through distances and features, never through the discrete choice.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::entropy::{quantize_noise, quantize_round, FactorizedModel};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, Deconv, DeconvTarget, Mlp, ResBlock, TapedSparse};
use crate::search::{ball_knn, knn};
use crate::session::Session;
use crate::sparse::{floor_align, Coord, CoordSet, SparseTensor};

/// Interpolation distances are clamped below this to keep exact coordinate
/// matches finite while letting the nearest reference dominate.
pub const DIST_FLOOR: f64 = 1e-6;

fn coords_points(cs: &CoordSet) -> Vec<[f64; 3]> {
    cs.coords()
        .iter()
        .map(|c| [c[0] as f64, c[1] as f64, c[2] as f64])
        .collect()
}

fn coords_matrix(cs: &CoordSet) -> Array2<f64> {
    let mut m = Array2::zeros((cs.len(), 3));
    for (i, c) in cs.coords().iter().enumerate() {
        for d in 0..3 {
            m[[i, d]] = c[d] as f64;
        }
    }
    m
}

/// Per-point, per-channel displacements in voxel units. `flows` is N×3C:
/// row `i`, columns `3c..3c+3` hold channel `c`'s displacement, i.e. the
/// row-major flattening of an N×C×3 field.
#[derive(Debug, Clone)]
pub struct MotionField {
    pub coords: CoordSet,
    pub flows: Array2<f64>,
}

impl MotionField {
    pub fn new(coords: CoordSet, flows: Array2<f64>) -> Result<Self> {
        if flows.nrows() != coords.len() {
            return Err(Error::Shape(format!(
                "motion field has {} rows for {} coordinates",
                flows.nrows(),
                coords.len()
            )));
        }
        if flows.ncols() == 0 || flows.ncols() % 3 != 0 {
            return Err(Error::Shape(format!(
                "flow width {} is not a positive multiple of 3",
                flows.ncols()
            )));
        }
        Ok(MotionField { coords, flows })
    }

    pub fn from_taped(sess: &Session, t: &TapedSparse) -> Result<Self> {
        MotionField::new(t.coords.clone(), sess.tape.value(t.feat).clone())
    }

    pub fn channels(&self) -> usize {
        self.flows.ncols() / 3
    }

    pub fn flow(&self, row: usize, ch: usize) -> [f64; 3] {
        [
            self.flows[[row, 3 * ch]],
            self.flows[[row, 3 * ch + 1]],
            self.flows[[row, 3 * ch + 2]],
        ]
    }
}

/// Warped coordinates, one N×3 matrix per channel: `out[c][i] = coords[i] +
/// flow(i, c)`. The coordinate sets must be the same object semantically.
pub fn warp(coords: &CoordSet, m: &MotionField) -> Result<Vec<Array2<f64>>> {
    if *coords != m.coords {
        return Err(Error::Coords(
            "warp: motion field is defined on a different support".into(),
        ));
    }
    let base = coords_matrix(coords);
    let mut out = Vec::with_capacity(m.channels());
    for c in 0..m.channels() {
        let mut w = base.clone();
        for i in 0..coords.len() {
            let f = m.flow(i, c);
            for d in 0..3 {
                w[[i, d]] += f[d];
            }
        }
        out.push(w);
    }
    Ok(out)
}

/// Ball-KNN attention across two frames ("block matching"): concatenate the
/// frames over the union support, run one neighborhood search, then two
/// attention passes over the shared neighbor lists, and read the result off
/// on the current frame's support.
#[derive(Debug, Clone)]
pub struct Kabm {
    score1: Mlp,
    value1: Mlp,
    score2: Mlp,
    value2: Mlp,
    agg: Mlp,
    /// Ball radius in lattice steps of the input stride. The search itself
    /// runs in voxel units, so the radius is scaled by the stride at the
    /// call; a fixed voxel radius would leave every ball a singleton once
    /// the lattice spacing exceeds it.
    pub radius: f64,
    /// Neighbor cap per ball.
    pub k: usize,
}

impl Kabm {
    pub fn new(
        name: &str,
        in_ref: usize,
        in_cur: usize,
        embed: usize,
        out: usize,
        radius: f64,
        k: usize,
    ) -> Self {
        // Attribute vector: relative offset (3) + distance (1) + neighbor
        // features. Stage 2 sees stage-1 embeddings as the features.
        let a1 = 4 + in_ref + in_cur;
        let a2 = 4 + embed;
        let score_hidden = (embed / 2).max(4);
        Kabm {
            score1: Mlp::new(format!("{name}.score1"), a1, score_hidden, 1),
            value1: Mlp::new(format!("{name}.value1"), a1, embed, embed),
            score2: Mlp::new(format!("{name}.score2"), a2, score_hidden, 1),
            value2: Mlp::new(format!("{name}.value2"), a2, embed, embed),
            agg: Mlp::new(format!("{name}.agg"), embed, embed, out),
            radius,
            k,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.score1.init(store, rng);
        self.value1.init(store, rng);
        self.score2.init(store, rng);
        self.value2.init(store, rng);
        self.agg.init(store, rng);
    }

    fn attention(
        &self,
        sess: &mut Session,
        score: &Mlp,
        value: &Mlp,
        attrs: NodeId,
        nb_feats: NodeId,
        offsets: &[u32],
        seg_of_entry: &[u32],
        n_union: usize,
    ) -> NodeId {
        let attr = sess.tape.concat_cols(attrs, nb_feats);
        let s = score.apply(sess, attr);
        let w = sess.tape.segment_softmax(s, offsets.to_vec());
        let v = value.apply(sess, attr);
        let wv = sess.tape.mul_col(v, w);
        sess.tape.scatter_add_rows(wv, seg_of_entry.to_vec(), n_union)
    }

    pub fn apply(
        &self,
        sess: &mut Session,
        y_ref: &TapedSparse,
        y_cur: &TapedSparse,
    ) -> Result<TapedSparse> {
        if y_ref.coords.stride() != y_cur.coords.stride() {
            return Err(Error::Stride(format!(
                "block matching across strides {} and {}",
                y_ref.coords.stride(),
                y_cur.coords.stride()
            )));
        }
        let stride = y_cur.coords.stride();
        let mut all: Vec<Coord> = y_ref.coords.coords().to_vec();
        all.extend_from_slice(y_cur.coords.coords());
        let union = CoordSet::new(all, stride)?;
        let n_union = union.len();

        // Zero-padded channel concat of both frames on the union support.
        let ref_rows: Vec<u32> = y_ref.coords.rows_in(&union)?.iter().map(|&r| r as u32).collect();
        let cur_rows: Vec<u32> = y_cur.coords.rows_in(&union)?.iter().map(|&r| r as u32).collect();
        let ref_part = sess.tape.scatter_add_rows(y_ref.feat, ref_rows, n_union);
        let cur_part = sess.tape.scatter_add_rows(y_cur.feat, cur_rows.clone(), n_union);
        let u_feat = sess.tape.concat_cols(ref_part, cur_part);

        // One search feeds both attention passes.
        let pts = coords_points(&union);
        let nn = ball_knn(&pts, &pts, self.radius * stride as f64, self.k);
        let n_entries = nn.entries.len();
        let mut attrs = Array2::zeros((n_entries, 4));
        let mut entry_rows = Vec::with_capacity(n_entries);
        let mut seg_of_entry = Vec::with_capacity(n_entries);
        for q in 0..n_union {
            for e in nn.segment(q) {
                let i = entry_rows.len();
                // offset is query − reference; the attribute wants the
                // neighbor's position as seen from the query.
                attrs[[i, 0]] = -e.offset[0];
                attrs[[i, 1]] = -e.offset[1];
                attrs[[i, 2]] = -e.offset[2];
                attrs[[i, 3]] = e.dist;
                entry_rows.push(e.row);
                seg_of_entry.push(q as u32);
            }
        }
        let attrs = sess.tape.input(attrs);

        let nb1 = sess.tape.gather_rows(u_feat, entry_rows.clone());
        let h1 = self.attention(
            sess, &self.score1, &self.value1, attrs, nb1, &nn.offsets, &seg_of_entry, n_union,
        );
        let nb2 = sess.tape.gather_rows(h1, entry_rows);
        let h2 = self.attention(
            sess, &self.score2, &self.value2, attrs, nb2, &nn.offsets, &seg_of_entry, n_union,
        );
        let mut e_all = self.agg.apply(sess, h2);

        // A query always finds at least itself here (distance zero is inside
        // any positive radius), but keep the contract for restricted call
        // sites: points with an empty ball emit a zero row.
        if nn.offsets.windows(2).any(|w| w[0] == w[1]) {
            let mut mask = Array2::ones((n_union, 1));
            for q in 0..n_union {
                if nn.count(q) == 0 {
                    mask[[q, 0]] = 0.0;
                }
            }
            let mask = sess.tape.input(mask);
            e_all = sess.tape.mul_col(e_all, mask);
        }

        let feat = sess.tape.gather_rows(e_all, cur_rows);
        Ok(TapedSparse::new(y_cur.coords.clone(), feat))
    }
}

/// Two-path fusion of a flow embedding into half resolution: a strided
/// backbone captures the coarse component, and the downsampled residual of
/// its re-upsampling keeps the fine detail the backbone dropped.
#[derive(Debug, Clone)]
pub struct Mmf {
    down: Conv,
    res: Vec<ResBlock>,
    up: Deconv,
    down_fine: Conv,
}

impl Mmf {
    pub fn new(name: &str, ch: usize) -> Self {
        Mmf {
            down: Conv::new(format!("{name}.down"), ConvSpec::down2(ch, ch)),
            res: (0..3)
                .map(|i| ResBlock::new(&format!("{name}.res{i}"), ch))
                .collect(),
            up: Deconv::new(format!("{name}.up"), ch, ch),
            down_fine: Conv::new(format!("{name}.down_fine"), ConvSpec::down2(ch, ch)),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.down.init(store, rng);
        for r in &self.res {
            r.init(store, rng);
        }
        self.up.init(store, rng);
        self.down_fine.init(store, rng);
    }

    pub fn apply(&self, sess: &mut Session, e_o: &TapedSparse) -> Result<TapedSparse> {
        let mut coarse = self.down.apply(sess, e_o);
        for r in &self.res {
            coarse = r.apply(sess, &coarse);
        }
        let up = self.up.apply(sess, &coarse, DeconvTarget::Targeted(&e_o.coords))?;
        let delta = sess.tape.sub(e_o.feat, up.feat);
        let fine = self
            .down_fine
            .apply(sess, &TapedSparse::new(e_o.coords.clone(), delta));
        // Both halves downsample the same support and land on the same set.
        debug_assert_eq!(coarse.coords, fine.coords);
        let feat = sess.tape.add(coarse.feat, fine.feat);
        Ok(TapedSparse::new(coarse.coords, feat))
    }
}

/// Strided linear autoencoder around a factorized entropy model. Compresses
/// any sparse feature tensor whose support the decoder can derive; used for
/// flow embeddings and feature residuals.
#[derive(Debug, Clone)]
pub struct LatentCodec {
    enc: Conv,
    dec: Deconv,
    pub em: FactorizedModel,
}

impl LatentCodec {
    pub fn new(name: &str, ch: usize, latent_ch: usize) -> Self {
        LatentCodec {
            enc: Conv::new(format!("{name}.enc"), ConvSpec::down2(ch, latent_ch)),
            dec: Deconv::new(format!("{name}.dec"), latent_ch, ch),
            em: FactorizedModel::new(&format!("{name}.em"), latent_ch),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.enc.init(store, rng);
        self.dec.init(store, rng);
        self.em.register(store);
    }

    /// Where the latent lives for a given input support.
    pub fn latent_support(&self, input: &CoordSet) -> CoordSet {
        input.floor_set(2)
    }

    /// Differentiable surrogate: additive-noise quantization, rate from the
    /// density model, reconstruction on the input support. Returns the
    /// reconstruction, the rate estimate in bits, and the probability-floor
    /// clamp count.
    pub fn train(
        &self,
        sess: &mut Session,
        x: &TapedSparse,
    ) -> Result<(TapedSparse, NodeId, usize)> {
        let lat = self.enc.apply(sess, x);
        let noisy = quantize_noise(sess, lat.feat);
        let (bits, clamped) = self.em.bits_node(sess, noisy);
        let recon = self.dec.apply(
            sess,
            &TapedSparse::new(lat.coords.clone(), noisy),
            DeconvTarget::Targeted(&x.coords),
        )?;
        Ok((recon, bits, clamped))
    }

    /// Encodes `x` and returns the payload along with the reconstruction the
    /// decoder will produce — the round trip runs through the same quantized
    /// values on both sides.
    pub fn encode(&self, store: &ParamStore, x: &SparseTensor) -> Result<(Vec<u8>, SparseTensor)> {
        let mut sess = Session::infer(store);
        let xin = TapedSparse::from_values(&mut sess, x);
        let lat = self.enc.apply(&mut sess, &xin);
        let q = quantize_round(sess.tape.value(lat.feat));
        let payload = self.em.encode(store, &q)?;
        let recon = self.reconstruct(store, &q, &lat.coords, x.coords())?;
        Ok((payload, recon))
    }

    pub fn decode(
        &self,
        store: &ParamStore,
        payload: &[u8],
        latent: &CoordSet,
        target: &CoordSet,
    ) -> Result<SparseTensor> {
        let q = self.em.decode(store, payload)?;
        if q.nrows() != latent.len() {
            return Err(Error::Bitstream(format!(
                "latent payload has {} rows, support has {}",
                q.nrows(),
                latent.len()
            )));
        }
        self.reconstruct(store, &q, latent, target)
    }

    fn reconstruct(
        &self,
        store: &ParamStore,
        q: &Array2<f64>,
        latent: &CoordSet,
        target: &CoordSet,
    ) -> Result<SparseTensor> {
        let mut sess = Session::infer(store);
        let lin = sess.tape.input(q.clone());
        let out = self.dec.apply(
            &mut sess,
            &TapedSparse::new(latent.clone(), lin),
            DeconvTarget::Targeted(target),
        )?;
        out.to_values(&sess)
    }
}

/// Reconstructs a dense per-channel motion field on a finer target support
/// from a decoded flow embedding: an ancestor-copy path carries the coarse
/// component straight to every target point, while chained targeted
/// transpose convolutions refine it level by level.
#[derive(Debug, Clone)]
pub struct Mmr {
    coarse_lin: Conv,
    fine: Vec<Deconv>,
}

impl Mmr {
    pub fn new(name: &str, in_ch: usize, warp_ch: usize, levels: usize) -> Self {
        assert!(levels >= 1, "motion reconstruction needs at least one level");
        let fine = (0..levels)
            .map(|l| {
                let out = if l + 1 == levels { 3 * warp_ch } else { in_ch };
                Deconv::new(format!("{name}.fine{l}"), in_ch, out)
            })
            .collect();
        Mmr {
            coarse_lin: Conv::new(format!("{name}.coarse"), ConvSpec::k1(in_ch, 3 * warp_ch)),
            fine,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.coarse_lin.init(store, rng);
        for d in &self.fine {
            d.init(store, rng);
        }
    }

    /// Output is a taped N×3C flow matrix on `target` (the [`MotionField`]
    /// layout). `e` must sit exactly `levels` stride doublings above it.
    pub fn apply(
        &self,
        sess: &mut Session,
        e: &TapedSparse,
        target: &CoordSet,
    ) -> Result<TapedSparse> {
        let levels = self.fine.len();
        if e.coords.stride() != target.stride() << levels {
            return Err(Error::Stride(format!(
                "flow embedding at stride {} cannot reach target stride {} in {} levels",
                e.coords.stride(),
                target.stride(),
                levels
            )));
        }

        // Coarse path: every target point copies its ancestor's embedding,
        // then a per-point linear map emits the flow triples.
        let s_in = e.coords.stride() as i32;
        let mut rows = Vec::with_capacity(target.len());
        for u in target.coords() {
            let a = floor_align(*u, s_in);
            let row = e.coords.row_of(&a).ok_or_else(|| {
                Error::Coords(format!("target {:?} has no ancestor {:?} in the embedding", u, a))
            })?;
            rows.push(row as u32);
        }
        let unpooled = sess.tape.gather_rows(e.feat, rows);
        let m_coarse = self
            .coarse_lin
            .apply(sess, &TapedSparse::new(target.clone(), unpooled));

        // Fine path: walk down through the floored intermediate sets.
        let mut cur = TapedSparse::new(e.coords.clone(), e.feat);
        for (l, d) in self.fine.iter().enumerate() {
            let lev_target = if l + 1 == levels {
                target.clone()
            } else {
                target.floor_set(1 << (levels - 1 - l))
            };
            cur = d.apply(sess, &cur, DeconvTarget::Targeted(&lev_target))?;
            if l + 1 < levels {
                cur = TapedSparse::new(cur.coords, sess.tape.relu(cur.feat));
            }
        }
        debug_assert_eq!(cur.coords, *target);
        let feat = sess.tape.add(m_coarse.feat, cur.feat);
        Ok(TapedSparse::new(target.clone(), feat))
    }
}

/// Interpolates reference features at per-channel warped positions: each
/// warped point takes its 3 nearest reference points with inverse-distance
/// weights, normalized by `max(Σd⁻¹, α)` so that isolated points fade toward
/// zero instead of copying far-away content.
///
/// `m` is an N×3C taped flow matrix on `target`; the result is an N×C taped
/// tensor on `target`. Gradients flow through the flows (via the distances)
/// and through the reference features; the 3-NN choice itself is fixed.
pub fn awi3d(
    tape: &mut Tape,
    target: &CoordSet,
    m: NodeId,
    y_ref: &TapedSparse,
    alpha: f64,
) -> Result<TapedSparse> {
    if y_ref.coords.is_empty() {
        return Err(Error::Coords("interpolation from an empty reference".into()));
    }
    let n = target.len();
    let channels = tape.shape(y_ref.feat).1;
    let (m_rows, m_cols) = tape.shape(m);
    if m_rows != n || m_cols != 3 * channels {
        return Err(Error::Shape(format!(
            "flow matrix {}×{} does not match {} points × {} channels",
            m_rows, m_cols, n, channels
        )));
    }

    let ref_pts = coords_points(&y_ref.coords);
    let base = tape.input(coords_matrix(target));
    let ref_pos = tape.input(coords_matrix(&y_ref.coords));
    let ones = tape.input(Array2::ones((n, 1)));
    let keff = 3.min(ref_pts.len());

    let mut out_cols = Vec::with_capacity(channels);
    for c in 0..channels {
        let flow = tape.slice_cols(m, 3 * c, 3 * c + 3);
        let w = tape.add(base, flow);
        let queries: Vec<[f64; 3]> = tape
            .value(w)
            .rows()
            .into_iter()
            .map(|r| [r[0], r[1], r[2]])
            .collect();
        let nn = knn(&queries, &ref_pts, 3)?;
        let rows_by_rank: Vec<Vec<u32>> = (0..keff)
            .map(|j| (0..n).map(|q| nn.segment(q)[j].row).collect())
            .collect();

        let mut dinv = Vec::with_capacity(keff);
        for rows in &rows_by_rank {
            let pj = tape.gather_rows(ref_pos, rows.clone());
            let delta = tape.sub(w, pj);
            let sq = tape.square(delta);
            let d2 = tape.sum_cols(sq);
            // Clamping the squared distance below the squared floor equals
            // clamping the distance itself and keeps the square root
            // differentiable at exact matches.
            let d2 = tape.max_scalar(d2, DIST_FLOOR * DIST_FLOOR);
            let d = tape.sqrt(d2);
            dinv.push(tape.div(ones, d));
        }
        let mut sum_dinv = dinv[0];
        for &dj in &dinv[1..] {
            sum_dinv = tape.add(sum_dinv, dj);
        }
        let denom = tape.max_scalar(sum_dinv, alpha);

        let fcol = tape.slice_cols(y_ref.feat, c, c + 1);
        let mut acc: Option<NodeId> = None;
        for (j, rows) in rows_by_rank.iter().enumerate() {
            let weight = tape.div(dinv[j], denom);
            let fj = tape.gather_rows(fcol, rows.clone());
            let term = tape.mul(weight, fj);
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        out_cols.push(acc.expect("at least one neighbor rank"));
    }
    let feat = tape.concat_cols_n(&out_cols);
    Ok(TapedSparse::new(target.clone(), feat))
}

/// One motion estimation/compensation stage: match, fuse, code, reconstruct,
/// warp, interpolate.
#[derive(Debug, Clone)]
pub struct InterStage {
    pub kabm: Kabm,
    pub mmf: Mmf,
    pub flow_codec: LatentCodec,
    pub mmr: Mmr,
    pub alpha: f64,
}

impl InterStage {
    pub fn new(
        name: &str,
        ch: usize,
        flow_latent: usize,
        levels: usize,
        radius: f64,
        k: usize,
        alpha: f64,
    ) -> Self {
        InterStage {
            kabm: Kabm::new(&format!("{name}.kabm"), ch, ch, ch, ch, radius, k),
            mmf: Mmf::new(&format!("{name}.mmf"), ch),
            flow_codec: LatentCodec::new(&format!("{name}.flow"), ch, flow_latent),
            mmr: Mmr::new(&format!("{name}.mmr"), ch, ch, levels),
            alpha,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.kabm.init(store, rng);
        self.mmf.init(store, rng);
        self.flow_codec.init(store, rng);
        self.mmr.init(store, rng);
    }

    /// Differentiable forward pass. `kabm_ref`/`kabm_cur` drive the matcher;
    /// `warp_ref` is the tensor the prediction interpolates from; `target`
    /// is the support the prediction lands on. Returns the prediction, the
    /// flow rate estimate in bits, and the probability clamp count.
    pub fn train(
        &self,
        sess: &mut Session,
        kabm_ref: &TapedSparse,
        kabm_cur: &TapedSparse,
        warp_ref: &TapedSparse,
        target: &CoordSet,
    ) -> Result<(TapedSparse, NodeId, usize)> {
        let e_o = self.kabm.apply(sess, kabm_ref, kabm_cur)?;
        let e_t = self.mmf.apply(sess, &e_o)?;
        let (e_hat, bits, clamped) = self.flow_codec.train(sess, &e_t)?;
        let m = self.mmr.apply(sess, &e_hat, target)?;
        let pred = awi3d(&mut sess.tape, target, m.feat, warp_ref, self.alpha)?;
        Ok((pred, bits, clamped))
    }

    /// Encoder side. The returned prediction is the decoder's replay: it is
    /// rebuilt from the payload, not from the clean embedding.
    pub fn encode(
        &self,
        store: &ParamStore,
        kabm_ref: &SparseTensor,
        kabm_cur: &SparseTensor,
        warp_ref: &SparseTensor,
        target: &CoordSet,
    ) -> Result<(Vec<u8>, SparseTensor)> {
        let e_t = {
            let mut sess = Session::infer(store);
            let rin = TapedSparse::from_values(&mut sess, kabm_ref);
            let cin = TapedSparse::from_values(&mut sess, kabm_cur);
            let e_o = self.kabm.apply(&mut sess, &rin, &cin)?;
            let e_t = self.mmf.apply(&mut sess, &e_o)?;
            e_t.to_values(&sess)?
        };
        let (payload, _) = self.flow_codec.encode(store, &e_t)?;
        let pred = self.decode(store, &payload, e_t.coords(), target, warp_ref)?;
        Ok((payload, pred))
    }

    /// Decoder side. `e_t_support` is derivable from the transmitted
    /// coordinate streams; everything past the entropy decode is a
    /// deterministic replay of the encoder.
    pub fn decode(
        &self,
        store: &ParamStore,
        payload: &[u8],
        e_t_support: &CoordSet,
        target: &CoordSet,
        warp_ref: &SparseTensor,
    ) -> Result<SparseTensor> {
        Ok(self
            .decode_with_field(store, payload, e_t_support, target, warp_ref)?
            .0)
    }

    /// [`InterStage::decode`] that also hands back the reconstructed
    /// per-channel motion field, for inspection and export.
    pub fn decode_with_field(
        &self,
        store: &ParamStore,
        payload: &[u8],
        e_t_support: &CoordSet,
        target: &CoordSet,
        warp_ref: &SparseTensor,
    ) -> Result<(SparseTensor, MotionField)> {
        let latent = self.flow_codec.latent_support(e_t_support);
        let e_hat = self.flow_codec.decode(store, payload, &latent, e_t_support)?;
        let mut sess = Session::infer(store);
        let ein = TapedSparse::from_values(&mut sess, &e_hat);
        let m = self.mmr.apply(&mut sess, &ein, target)?;
        let win = TapedSparse::from_values(&mut sess, warp_ref);
        let pred = awi3d(&mut sess.tape, target, m.feat, &win, self.alpha)?;
        let field = MotionField::from_taped(&sess, &m)?;
        Ok((pred.to_values(&sess)?, field))
    }
}

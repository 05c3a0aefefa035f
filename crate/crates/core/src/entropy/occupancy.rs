//! Lossless coder for one downsampling level of occupancy.
//!
//! Given a coarse set `c3` known to both sides, the fine set `c2` (whose
//! stride-2 floor must equal `c3`) is sent as two payloads: a small learned
//! latent summarizing the fine occupancy, and the per-candidate occupancy
//! mask itself, arithmetic-coded under probabilities predicted from that
//! latent. The mask makes the scheme exact regardless of prediction quality;
//! the predictor only controls how many bits the mask costs.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamStore};
use crate::entropy::factorized::{quantize_noise, quantize_round, FactorizedModel};
use crate::entropy::range::{decode_bit_with_p, encode_bit_with_p, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::nn::{Conv, ConvSpec, DeconvTarget, DownBlock, TapedSparse, UpCore};
use crate::session::Session;
use crate::sparse::{CoordSet, SparseTensor};

pub const P_CLAMP: f64 = 1e-6;

#[derive(Debug)]
pub struct OccupancyCoder {
    down: DownBlock,
    enc_head: Conv,
    up: UpCore,
    dec_head: Conv,
    pub em: FactorizedModel,
}

impl OccupancyCoder {
    pub fn new(prefix: &str, hidden: usize, latent: usize) -> Self {
        OccupancyCoder {
            down: DownBlock::new(&format!("{}.down", prefix), 1, hidden),
            enc_head: Conv::new(format!("{}.enc_head", prefix), ConvSpec::k1(hidden, latent)),
            up: UpCore::new(&format!("{}.up", prefix), latent, hidden),
            dec_head: Conv::new(format!("{}.dec_head", prefix), ConvSpec::k3(hidden, 1)),
            em: FactorizedModel::new(&format!("{}.em", prefix), latent),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.down.init(store, rng);
        self.enc_head.init(store, rng);
        self.up.init(store, rng);
        self.dec_head.init(store, rng);
        self.em.register(store);
    }

    /// Fine occupancy in, latent over the coarse set out. The input carries
    /// no features, so the transform sees pure geometry: an all-one tensor.
    fn analyze(&self, sess: &mut Session, fine: &CoordSet) -> TapedSparse {
        let ones = SparseTensor::ones(fine.clone());
        let feat = sess.tape.input(ones.feats().clone());
        let x = TapedSparse::new(ones.coords().clone(), feat);
        let h = self.down.apply(sess, &x);
        self.enc_head.apply(sess, &h)
    }

    /// Candidate children of `coarse` with clamped occupancy probabilities,
    /// predicted from a latent aligned to `coarse` row for row.
    fn predict(
        &self,
        sess: &mut Session,
        coarse: &CoordSet,
        latent_feat: NodeId,
    ) -> Result<(CoordSet, NodeId)> {
        let latent = TapedSparse::new(coarse.clone(), latent_feat);
        let h = self.up.apply(sess, &latent, DeconvTarget::Generative)?;
        let logits = self.dec_head.apply(sess, &h);
        let p = sess.tape.sigmoid(logits.feat);
        let p = sess.tape.max_scalar(p, P_CLAMP);
        let p = sess.tape.min_scalar(p, 1.0 - P_CLAMP);
        Ok((logits.coords, p))
    }

    fn check_pair(&self, coarse: &CoordSet, fine: &CoordSet) -> Result<()> {
        if fine.is_empty() {
            return Err(Error::Coords("cannot refine an empty set".into()));
        }
        if coarse.stride() != fine.stride() * 2 {
            return Err(Error::Stride(format!(
                "coarse stride {} is not twice fine stride {}",
                coarse.stride(),
                fine.stride()
            )));
        }
        if &fine.floor_set(2) != coarse {
            return Err(Error::Coords(
                "fine set does not floor onto the given coarse set".into(),
            ));
        }
        Ok(())
    }

    /// Returns (latent payload, mask payload).
    pub fn encode(
        &self,
        store: &ParamStore,
        coarse: &CoordSet,
        fine: &CoordSet,
    ) -> Result<(Vec<u8>, Vec<u8>)> {
        self.check_pair(coarse, fine)?;
        let mut sess = Session::infer(store);
        let latent = self.analyze(&mut sess, fine);
        debug_assert_eq!(&latent.coords, coarse);
        let q = quantize_round(sess.tape.value(latent.feat));
        let latent_bytes = self.em.encode(store, &q)?;

        // Prediction must run from the decoded latent, which equals q.
        let qf = sess.tape.input(q);
        let (candidates, p) = self.predict(&mut sess, coarse, qf)?;
        let p = sess.tape.value(p);
        let mut enc = RangeEncoder::new();
        for (i, c) in candidates.coords().iter().enumerate() {
            encode_bit_with_p(&mut enc, p[[i, 0]], fine.contains(c));
        }
        Ok((latent_bytes, enc.finish()))
    }

    pub fn decode(
        &self,
        store: &ParamStore,
        coarse: &CoordSet,
        latent_bytes: &[u8],
        mask_bytes: &[u8],
    ) -> Result<CoordSet> {
        let q = self.em.decode(store, latent_bytes)?;
        if q.nrows() != coarse.len() {
            return Err(Error::Bitstream(format!(
                "occupancy latent has {} rows for {} coarse nodes",
                q.nrows(),
                coarse.len()
            )));
        }
        let mut sess = Session::infer(store);
        let qf = sess.tape.input(q);
        let (candidates, p) = self.predict(&mut sess, coarse, qf)?;
        let p = sess.tape.value(p);
        let mut dec = RangeDecoder::new(mask_bytes);
        let mut kept = Vec::new();
        for (i, c) in candidates.coords().iter().enumerate() {
            if decode_bit_with_p(&mut dec, p[[i, 0]]) {
                kept.push(*c);
            }
        }
        Ok(CoordSet::from_sorted_unchecked(kept, coarse.stride() / 2))
    }

    /// Ideal mask cost in bits under the current model, before the coder's
    /// 16-bit probability quantization.
    pub fn mask_bits_f64(
        &self,
        store: &ParamStore,
        coarse: &CoordSet,
        fine: &CoordSet,
    ) -> Result<f64> {
        self.check_pair(coarse, fine)?;
        let mut sess = Session::infer(store);
        let latent = self.analyze(&mut sess, fine);
        let q = quantize_round(sess.tape.value(latent.feat));
        let qf = sess.tape.input(q);
        let (candidates, p) = self.predict(&mut sess, coarse, qf)?;
        let p = sess.tape.value(p);
        let mut bits = 0.0;
        for (i, c) in candidates.coords().iter().enumerate() {
            let pv = p[[i, 0]];
            let q = if fine.contains(c) { pv } else { 1.0 - pv };
            bits -= q.log2();
        }
        Ok(bits)
    }

    /// Differentiable total rate in bits: latent cost under the factorized
    /// model plus the mask's binary cross-entropy (summed, in bits). Noise
    /// replaces rounding, so this needs a training session.
    pub fn rate_node(
        &self,
        sess: &mut Session,
        coarse: &CoordSet,
        fine: &CoordSet,
    ) -> Result<(NodeId, usize)> {
        self.check_pair(coarse, fine)?;
        let latent = self.analyze(sess, fine);
        let noisy = quantize_noise(sess, latent.feat);
        let (latent_bits, clamped) = self.em.bits_node(sess, noisy);
        let (candidates, p) = self.predict(sess, coarse, noisy)?;
        let m = candidates.len();
        let t = Array2::from_shape_fn((m, 1), |(i, _)| {
            if fine.contains(&candidates.coords()[i]) {
                1.0
            } else {
                0.0
            }
        });
        let tn = sess.tape.input(t);
        let ln_p = sess.tape.ln(p);
        let neg_p = sess.tape.scale(p, -1.0);
        let one_m_p = sess.tape.add_scalar(neg_p, 1.0);
        let ln_q = sess.tape.ln(one_m_p);
        let neg_t = sess.tape.scale(tn, -1.0);
        let one_m_t = sess.tape.add_scalar(neg_t, 1.0);
        let hit = sess.tape.mul(tn, ln_p);
        let miss = sess.tape.mul(one_m_t, ln_q);
        let ll = sess.tape.add(hit, miss);
        let nats = sess.tape.sum_all(ll);
        let mask_bits = sess.tape.scale(nats, -std::f64::consts::LOG2_E);
        Ok((sess.tape.add(latent_bits, mask_bits), clamped))
    }
}

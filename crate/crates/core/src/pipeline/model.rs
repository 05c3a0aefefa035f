//! The codec model: every learned block, the parameter store that owns
//! their weights, and the three transforms that are not frame logic —
//! feature extraction, residual coding, and pruned reconstruction.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, ParamStore};
use crate::entropy::{quantize_noise, quantize_round, FactorizedModel, OccupancyCoder};
use crate::error::{Error, Result};
use crate::inter::InterStage;
use crate::nn::{top_k_rows, Conv, ConvSpec, DeconvTarget, DownBlock, TapedSparse, UpCore};
use crate::session::Session;
use crate::sparse::{CoordSet, SparseTensor};
use crate::util::fnv1a64;
use rand::SeedableRng;
use std::path::Path;

use super::config::CodecConfig;

/// Autoencoder over a feature tensor: a downsample block plus a pointwise
/// head shrink it onto the half-resolution support, the factorized model
/// codes the quantized latent, and an upsample core rebuilds the tensor on
/// its original support.
#[derive(Debug, Clone)]
pub struct ResidualCodec {
    down: DownBlock,
    head: Conv,
    up: UpCore,
    pub em: FactorizedModel,
}

impl ResidualCodec {
    pub fn new(name: &str, ch: usize, latent_ch: usize) -> Self {
        ResidualCodec {
            down: DownBlock::new(&format!("{name}.down"), ch, ch),
            head: Conv::new(format!("{name}.head"), ConvSpec::k1(ch, latent_ch)),
            up: UpCore::new(&format!("{name}.up"), latent_ch, ch),
            em: FactorizedModel::new(&format!("{name}.em"), latent_ch),
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.down.init(store, rng);
        self.head.init(store, rng);
        self.up.init(store, rng);
        self.em.register(store);
    }

    pub fn latent_support(&self, input: &CoordSet) -> CoordSet {
        input.floor_set(2)
    }

    fn analyze(&self, sess: &mut Session, x: &TapedSparse) -> TapedSparse {
        let h = self.down.apply(sess, x);
        self.head.apply(sess, &h)
    }

    /// Differentiable surrogate: additive-noise quantization, rate under the
    /// density model, reconstruction on the input support. Returns the
    /// reconstruction, the rate estimate in bits, and the probability-floor
    /// clamp count.
    pub fn train(
        &self,
        sess: &mut Session,
        x: &TapedSparse,
    ) -> Result<(TapedSparse, NodeId, usize)> {
        let lat = self.analyze(sess, x);
        let noisy = quantize_noise(sess, lat.feat);
        let (bits, clamped) = self.em.bits_node(sess, noisy);
        let recon = self.up.apply(
            sess,
            &TapedSparse::new(lat.coords.clone(), noisy),
            DeconvTarget::Targeted(&x.coords),
        )?;
        Ok((recon, bits, clamped))
    }

    /// The returned reconstruction is the decoder's replay, rebuilt from the
    /// payload rather than from the clean latent.
    pub fn encode(&self, store: &ParamStore, x: &SparseTensor) -> Result<(Vec<u8>, SparseTensor)> {
        let q = {
            let mut sess = Session::infer(store);
            let xin = TapedSparse::from_values(&mut sess, x);
            let lat = self.analyze(&mut sess, &xin);
            quantize_round(sess.tape.value(lat.feat))
        };
        let payload = self.em.encode(store, &q)?;
        let recon = self.decode(store, &payload, &self.latent_support(x.coords()), x.coords())?;
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
                "residual latent has {} rows, support has {}",
                q.nrows(),
                latent.len()
            )));
        }
        let mut sess = Session::infer(store);
        let qin = sess.tape.input(q);
        let out = self.up.apply(
            &mut sess,
            &TapedSparse::new(latent.clone(), qin),
            DeconvTarget::Targeted(target),
        )?;
        out.to_values(&sess)
    }
}

/// All learned state of the codec. One [`ParamStore`] holds every weight
/// plus the serialized [`CodecConfig`]; the block descriptors around it are
/// cheap name/shape records rebuilt from the config on load.
#[derive(Debug)]
pub struct CodecModel {
    pub cfg: CodecConfig,
    pub store: ParamStore,
    stem: Conv,
    downs: Vec<DownBlock>,
    pub low: InterStage,
    pub high: InterStage,
    pub res: ResidualCodec,
    pub occ: OccupancyCoder,
    up_half: UpCore,
    head_half: Conv,
    up_full: UpCore,
    head_full: Conv,
}

impl CodecModel {
    fn structure(cfg: &CodecConfig) -> CodecModel {
        let c = cfg.clone();
        CodecModel {
            stem: Conv::new("fe.stem", ConvSpec::k3(1, c.stem_ch)),
            downs: vec![
                DownBlock::new("fe.down1", c.stem_ch, c.mid_ch),
                DownBlock::new("fe.down2", c.mid_ch, c.feat_ch),
                DownBlock::new("fe.down3", c.feat_ch, c.feat_ch),
            ],
            low: InterStage::new("low", c.feat_ch, c.flow_latent_ch, 2, c.radius, c.k, c.alpha),
            high: InterStage::new("high", c.feat_ch, c.flow_latent_ch, 1, c.radius, c.k, c.alpha),
            res: ResidualCodec::new("res", c.feat_ch, c.res_latent_ch),
            occ: OccupancyCoder::new("occ", c.occ_hidden_ch, c.occ_latent_ch),
            up_half: UpCore::new("rec.up_half", c.feat_ch, c.mid_ch),
            head_half: Conv::new("rec.head_half", ConvSpec::k3(c.mid_ch, 1)),
            up_full: UpCore::new("rec.up_full", c.mid_ch, c.stem_ch),
            head_full: Conv::new("rec.head_full", ConvSpec::k3(c.stem_ch, 1)),
            cfg: c,
            store: ParamStore::new(),
        }
    }

    /// Fresh model with seeded random weights.
    pub fn init(cfg: CodecConfig, seed: u64) -> Result<CodecModel> {
        cfg.validate()?;
        let mut m = CodecModel::structure(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        cfg.register(&mut m.store);
        m.stem.init(&mut m.store, &mut rng);
        for d in &m.downs {
            d.init(&mut m.store, &mut rng);
        }
        m.low.init(&mut m.store, &mut rng);
        m.high.init(&mut m.store, &mut rng);
        m.res.init(&mut m.store, &mut rng);
        m.occ.init(&mut m.store, &mut rng);
        m.up_half.init(&mut m.store, &mut rng);
        m.head_half.init(&mut m.store, &mut rng);
        m.up_full.init(&mut m.store, &mut rng);
        m.head_full.init(&mut m.store, &mut rng);
        Ok(m)
    }

    /// Rebuilds a model around an existing store. The store must declare
    /// exactly the parameters the embedded config implies, at their exact
    /// shapes, so a partially edited weight file cannot half-load.
    pub fn from_store(store: ParamStore) -> Result<CodecModel> {
        let cfg = CodecConfig::from_store(&store)?;
        let reference = CodecModel::init(cfg.clone(), 0)?;
        for (name, p) in reference.store.iter() {
            let Some(q) = store.get(name) else {
                return Err(Error::Format(format!("weight file lacks parameter {name:?}")));
            };
            if q.dims != p.dims {
                return Err(Error::Format(format!(
                    "parameter {:?} has shape {:?}, expected {:?}",
                    name, q.dims, p.dims
                )));
            }
        }
        if store.len() != reference.store.len() {
            let known: Vec<&String> = store
                .names()
                .filter(|n| reference.store.get(n).is_none())
                .collect();
            return Err(Error::Format(format!(
                "weight file has {} unexpected parameters, first {:?}",
                known.len(),
                known.first()
            )));
        }
        let mut m = CodecModel::structure(&cfg);
        m.store = store;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.store.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CodecModel> {
        CodecModel::from_store(ParamStore::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load(path: &Path) -> Result<CodecModel> {
        CodecModel::from_store(ParamStore::load(path)?)
    }

    /// Hash of the exact serialized model, weights and config alike. Streams
    /// carry it so a decoder never replays with drifted weights.
    pub fn hash(&self) -> u64 {
        fnv1a64(&self.to_bytes())
    }

    /// Octree depth for eighth-resolution coordinate sets.
    pub(crate) fn coords3_depth(&self) -> u32 {
        self.cfg.bit_depth as u32 - 3
    }

    // ---- feature extraction ----

    /// Two latents off one trunk: quarter resolution at `feat_ch` channels,
    /// then one more halving at the same width.
    pub fn feature_extract_taped(
        &self,
        sess: &mut Session,
        x: &TapedSparse,
    ) -> Result<(TapedSparse, TapedSparse)> {
        if x.coords.is_empty() {
            return Err(Error::Coords("feature extraction on an empty cloud".into()));
        }
        let h = self.stem.apply(sess, x);
        let mut h = TapedSparse::new(h.coords, sess.tape.relu(h.feat));
        h = self.downs[0].apply(sess, &h);
        let y2 = self.downs[1].apply(sess, &h);
        let y3 = self.downs[2].apply(sess, &y2);
        Ok((y2, y3))
    }

    /// Occupancy-only wrapper: the input cloud enters as an all-one tensor.
    pub fn feature_extract(&self, x: &CoordSet) -> Result<(SparseTensor, SparseTensor)> {
        let mut sess = Session::infer(&self.store);
        let xin = TapedSparse::from_values(&mut sess, &SparseTensor::ones(x.clone()));
        let (y2, y3) = self.feature_extract_taped(&mut sess, &xin)?;
        Ok((y2.to_values(&sess)?, y3.to_values(&sess)?))
    }

    // ---- reconstruction ----

    /// Upsamples the decoded latent two scales, keeping the `n_half` then
    /// `n_full` highest-scoring candidates. Keep-counts at or above the
    /// candidate count disable pruning at that scale.
    pub fn reconstruct(
        &self,
        yq: &SparseTensor,
        n_half: usize,
        n_full: usize,
    ) -> Result<CoordSet> {
        let mut sess = Session::infer(&self.store);
        let yin = TapedSparse::from_values(&mut sess, yq);
        let h = self.up_half.apply(&mut sess, &yin, DeconvTarget::Generative)?;
        let l = self.head_half.apply(&mut sess, &h);
        let kept = prune_to_top(&sess, &h, &l, n_half)?;
        let kin = TapedSparse::from_values(&mut sess, &kept);
        let h = self.up_full.apply(&mut sess, &kin, DeconvTarget::Generative)?;
        let l = self.head_full.apply(&mut sess, &h);
        let full = prune_to_top(&sess, &h, &l, n_full)?;
        Ok(full.into_parts().0)
    }

    /// Training-mode reconstruction: candidate occupancy logits at both
    /// scales, with the half-resolution stage pruned to the ground-truth
    /// support before the second upsample (candidate sets stay aligned with
    /// the targets the distortion compares against).
    pub fn reconstruct_train(
        &self,
        sess: &mut Session,
        yq: &TapedSparse,
        gt_half: &CoordSet,
    ) -> Result<(TapedSparse, TapedSparse)> {
        let h = self.up_half.apply(sess, yq, DeconvTarget::Generative)?;
        let logits_half = self.head_half.apply(sess, &h);
        let rows: Vec<u32> = gt_half
            .rows_in(&h.coords)
            .map_err(|_| {
                Error::Coords(
                    "half-resolution ground truth escapes the candidate children".into(),
                )
            })?
            .into_iter()
            .map(|r| r as u32)
            .collect();
        let kept = sess.tape.gather_rows(h.feat, rows);
        let h = TapedSparse::new(gt_half.clone(), kept);
        let h = self.up_full.apply(sess, &h, DeconvTarget::Generative)?;
        let logits_full = self.head_full.apply(sess, &h);
        Ok((logits_half, logits_full))
    }
}

/// Keeps the `n` highest-logit rows of `t` (all rows when `n` is not
/// smaller than the candidate count). Ascending row selection preserves
/// canonical coordinate order.
fn prune_to_top(
    sess: &Session,
    t: &TapedSparse,
    logits: &TapedSparse,
    n: usize,
) -> Result<SparseTensor> {
    let lv = sess.tape.value(logits.feat);
    let rows = top_k_rows(lv, n);
    let feats = sess.tape.value(t.feat);
    let coords: Vec<_> = rows
        .iter()
        .map(|&r| t.coords.coords()[r as usize])
        .collect();
    let idx: Vec<usize> = rows.iter().map(|&r| r as usize).collect();
    let picked = feats.select(ndarray::Axis(0), &idx);
    SparseTensor::new(
        CoordSet::from_sorted_unchecked(coords, t.coords.stride()),
        picked,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::Coord;
    use ndarray::Array2;
    use rand::Rng;

    fn cube(n: i32) -> CoordSet {
        let mut v = Vec::new();
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    v.push([x, y, z]);
                }
            }
        }
        CoordSet::new(v, 1).unwrap()
    }

    #[test]
    fn save_load_round_trip_is_identical() {
        let m = CodecModel::init(CodecConfig::tiny(6), 5).unwrap();
        let bytes = m.to_bytes();
        let back = CodecModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.hash(), m.hash());
        assert_eq!(back.cfg, m.cfg);
    }

    #[test]
    fn tampered_weight_files_are_refused() {
        let m = CodecModel::init(CodecConfig::tiny(6), 5).unwrap();

        let mut store = ParamStore::from_bytes(&m.to_bytes()).unwrap();
        store.insert("stray.w", crate::autodiff::Param::new(vec![1], Array2::zeros((1, 1))));
        assert!(matches!(
            CodecModel::from_store(store),
            Err(Error::Format(_))
        ));

        // Drop one real parameter by rebuilding without it.
        let victim = "fe.stem.w".to_string();
        let mut pruned = ParamStore::new();
        for (name, p) in ParamStore::from_bytes(&m.to_bytes()).unwrap().iter() {
            if *name != victim {
                pruned.insert(name, p.clone());
            }
        }
        assert!(matches!(
            CodecModel::from_store(pruned),
            Err(Error::Format(_))
        ));

        // Resize one parameter.
        let mut store = ParamStore::from_bytes(&m.to_bytes()).unwrap();
        let p = store.get_mut(&victim).unwrap();
        p.dims = vec![1];
        p.value = Array2::zeros((1, 1));
        assert!(matches!(
            CodecModel::from_store(store),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn hash_tracks_weight_changes() {
        let m = CodecModel::init(CodecConfig::tiny(6), 5).unwrap();
        let h0 = m.hash();
        let mut m2 = CodecModel::from_bytes(&m.to_bytes()).unwrap();
        m2.store.get_mut("fe.stem.w").unwrap().value[[0, 0]] += 1.0;
        assert_ne!(m2.hash(), h0);
    }

    #[test]
    fn feature_extract_support_geometry() {
        let m = CodecModel::init(CodecConfig::tiny(6), 7).unwrap();
        let (y2, y3) = m.feature_extract(&cube(8)).unwrap();
        // An 8-cube covers exactly 2 quarter-resolution cells per axis.
        assert_eq!(y2.len(), 8);
        assert_eq!(y2.stride(), 4);
        assert_eq!(y2.channels(), m.cfg.feat_ch);
        assert_eq!(y3.len(), 1);
        assert_eq!(y3.stride(), 8);

        let (y2b, _) = m.feature_extract(&cube(8)).unwrap();
        assert_eq!(y2b.feats(), y2.feats(), "extraction is deterministic");

        assert!(m.feature_extract(&CoordSet::empty(1)).is_err());
    }

    #[test]
    fn residual_codec_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let m = CodecModel::init(CodecConfig::tiny(6), 9).unwrap();
        let coords: Vec<Coord> = vec![
            [0, 0, 0],
            [4, 0, 0],
            [0, 4, 4],
            [8, 4, 0],
            [12, 12, 8],
            [4, 8, 12],
        ];
        let cs = CoordSet::new(coords, 4).unwrap();
        let f = Array2::from_shape_fn((cs.len(), m.cfg.feat_ch), |_| rng.gen_range(-2.0..2.0));
        let x = SparseTensor::new(cs.clone(), f).unwrap();

        let (payload, recon_enc) = m.res.encode(&m.store, &x).unwrap();
        let recon_dec = m
            .res
            .decode(&m.store, &payload, &m.res.latent_support(&cs), &cs)
            .unwrap();
        assert_eq!(recon_enc.coords(), recon_dec.coords());
        assert_eq!(recon_enc.feats(), recon_dec.feats());

        // Payload length is within the usual slack of the model's estimate.
        let q = {
            let mut sess = Session::infer(&m.store);
            let xin = TapedSparse::from_values(&mut sess, &x);
            let lat = m.res.analyze(&mut sess, &xin);
            quantize_round(sess.tape.value(lat.feat))
        };
        let est = m.res.em.bits_f64(&m.store, &q);
        let actual = payload.len() as f64 * 8.0;
        assert!(
            actual <= est * 1.01 + 512.0,
            "payload {actual} bits vs estimate {est}"
        );
    }

    #[test]
    fn reconstruct_without_pruning_keeps_every_candidate() {
        let m = CodecModel::init(CodecConfig::tiny(6), 3).unwrap();
        let cs = CoordSet::new(vec![[0, 0, 0]], 4).unwrap();
        let y = SparseTensor::new(
            cs,
            Array2::from_elem((1, m.cfg.feat_ch), 0.3),
        )
        .unwrap();
        // One parent explodes into 8 children, then 64 grandchildren.
        let out = m.reconstruct(&y, 8, 64).unwrap();
        assert_eq!(out.len(), 64);
        assert_eq!(out.stride(), 1);

        // Tight keep-counts bound the output exactly.
        let out = m.reconstruct(&y, 5, 17).unwrap();
        assert_eq!(out.len(), 17);
    }

    #[test]
    fn reconstruct_train_logits_cover_the_truth() {
        let m = CodecModel::init(CodecConfig::tiny(6), 3).unwrap();
        let full = cube(4);
        let half = full.floor_set(2);
        let quarter = half.floor_set(2);
        let mut sess = Session::infer(&m.store);
        let y = TapedSparse::from_values(
            &mut sess,
            &SparseTensor::new(
                quarter.clone(),
                Array2::from_elem((quarter.len(), m.cfg.feat_ch), 0.1),
            )
            .unwrap(),
        );
        let (l_half, l_full) = m.reconstruct_train(&mut sess, &y, &half).unwrap();
        assert_eq!(sess.tape.shape(l_half.feat).1, 1);
        assert_eq!(sess.tape.shape(l_full.feat).1, 1);
        // Every true point appears among the candidates it is scored on.
        assert!(half.rows_in(&l_half.coords).is_ok());
        assert!(full.rows_in(&l_full.coords).is_ok());
    }
}

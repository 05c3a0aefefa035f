//! Per-frame encode/decode procedures and the training-time loss graphs.
//!
//! Everything the decoder consumes is either a decoded payload or derived
//! from one: the encoder replays its own entropy decoders to produce the
//! values it predicts from, so both sides walk identical arithmetic.

use crate::autodiff::NodeId;
use crate::entropy::{octree_decode, octree_encode};
use crate::error::{Error, Result};
use crate::inter::MotionField;
use crate::nn::TapedSparse;
use crate::session::Session;
use crate::sparse::{CoordSet, SparseTensor};

use super::container::{FrameBitstream, FrameType, SequenceBitstream, StreamId};
use super::model::CodecModel;

/// Inter-frame decode with the reconstructed motion fields, for inspection
/// and flow export. `recon` is exactly what [`CodecModel::decode_p_frame`]
/// returns.
pub struct InterDecode {
    pub recon: CoordSet,
    pub flow_low: MotionField,
    pub flow_high: MotionField,
}

/// Differentiable pieces of one frame's objective: rate estimates in bits
/// for every learned stream, and candidate occupancy logits paired with the
/// support they should reproduce. Flow rates are absent on intra frames.
pub struct FrameLoss {
    pub bits_flow_low: Option<NodeId>,
    pub bits_flow_high: Option<NodeId>,
    pub bits_residual: NodeId,
    pub bits_occupancy: NodeId,
    pub logits_half: TapedSparse,
    pub truth_half: CoordSet,
    pub logits_full: TapedSparse,
    pub truth_full: CoordSet,
    pub n_full: usize,
    pub clamps: usize,
}

impl CodecModel {
    /// Full-resolution input clouds must sit on the unit lattice inside the
    /// configured grid.
    fn check_input(&self, x: &CoordSet) -> Result<()> {
        if x.stride() != 1 {
            return Err(Error::Stride(format!(
                "frame input must be at unit stride, got {}",
                x.stride()
            )));
        }
        let limit = 1i32 << self.cfg.bit_depth;
        for c in x.coords() {
            if c.iter().any(|&v| v < 0 || v >= limit) {
                return Err(Error::Coords(format!(
                    "point {c:?} outside the {}-bit grid",
                    self.cfg.bit_depth
                )));
            }
        }
        Ok(())
    }

    /// Geometry streams shared by both frame types: octree-coded eighth
    /// resolution coordinates plus the learned refinement down to quarter
    /// resolution.
    fn put_coord_streams(
        &self,
        frame: &mut FrameBitstream,
        c3: &CoordSet,
        c2: &CoordSet,
    ) -> Result<()> {
        frame.insert(
            StreamId::Coords3,
            octree_encode(c3, self.coords3_depth())?,
        );
        let (latent, mask) = self.occ.encode(&self.store, c3, c2)?;
        frame.insert(StreamId::OccLatent, latent);
        frame.insert(StreamId::OccMask, mask);
        Ok(())
    }

    /// Inverse of [`put_coord_streams`]: recovers the quarter-resolution
    /// support and checks it against the declared cardinality.
    fn take_coord_streams(&self, frame: &FrameBitstream) -> Result<(CoordSet, CoordSet)> {
        let c3 = octree_decode(
            frame.stream(StreamId::Coords3)?,
            self.coords3_depth(),
            8,
        )?;
        let c2 = self.occ.decode(
            &self.store,
            &c3,
            frame.stream(StreamId::OccLatent)?,
            frame.stream(StreamId::OccMask)?,
        )?;
        if c2.len() != frame.n_y2 as usize {
            return Err(Error::Bitstream(format!(
                "refined support has {} points, header declares {}",
                c2.len(),
                frame.n_y2
            )));
        }
        Ok((c3, c2))
    }

    /// Intra frame: the quarter-resolution features are coded directly by
    /// the residual path (the prediction is zero), geometry by the octree
    /// plus occupancy refinement. Returns the frame and the reconstruction
    /// the decoder will reproduce.
    pub fn encode_i_frame(&self, x: &CoordSet) -> Result<(FrameBitstream, CoordSet)> {
        self.check_input(x)?;
        let (y2, y3) = self.feature_extract(x)?;
        let n_half = x.floor_set(2).len();
        let mut frame = FrameBitstream::new(
            FrameType::Intra,
            x.len() as u32,
            n_half as u32,
            y2.len() as u32,
        );
        self.put_coord_streams(&mut frame, y3.coords(), y2.coords())?;
        let (payload, y_hat) = self.res.encode(&self.store, &y2)?;
        frame.insert(StreamId::Residual, payload);
        let recon = self.reconstruct(&y_hat, n_half, x.len())?;
        Ok((frame, recon))
    }

    pub fn decode_i_frame(&self, frame: &FrameBitstream) -> Result<CoordSet> {
        if frame.frame_type != FrameType::Intra {
            return Err(Error::Bitstream("expected an intra frame".into()));
        }
        let (_, c2) = self.take_coord_streams(frame)?;
        let y_hat = self.res.decode(
            &self.store,
            frame.stream(StreamId::Residual)?,
            &self.res.latent_support(&c2),
            &c2,
        )?;
        self.reconstruct(&y_hat, frame.n_half as usize, frame.n_full as usize)
    }

    /// Inter frame against the previous reconstruction. Coarse matching on
    /// the eighth-resolution latents seeds the prediction, a second pass at
    /// quarter resolution refines it against its own output, and only the
    /// feature residual is transmitted.
    pub fn encode_p_frame(
        &self,
        x: &CoordSet,
        prev: &CoordSet,
    ) -> Result<(FrameBitstream, CoordSet)> {
        self.check_input(x)?;
        let (y2_cur, y3_cur) = self.feature_extract(x)?;
        let (y2_prev, y3_prev) = self.feature_extract(prev)?;
        let n_half = x.floor_set(2).len();
        let mut frame = FrameBitstream::new(
            FrameType::Inter,
            x.len() as u32,
            n_half as u32,
            y2_cur.len() as u32,
        );
        self.put_coord_streams(&mut frame, y3_cur.coords(), y2_cur.coords())?;

        let (flow_low, y_ini) = self.low.encode(
            &self.store,
            &y3_prev,
            &y3_cur,
            &y2_prev,
            y2_cur.coords(),
        )?;
        frame.insert(StreamId::FlowLow, flow_low);

        let (flow_high, y_final) =
            self.high
                .encode(&self.store, &y_ini, &y2_cur, &y_ini, y2_cur.coords())?;
        frame.insert(StreamId::FlowHigh, flow_high);

        let r = SparseTensor::new(
            y2_cur.coords().clone(),
            y2_cur.feats() - y_final.feats(),
        )?;
        let (payload, r_hat) = self.res.encode(&self.store, &r)?;
        frame.insert(StreamId::Residual, payload);

        let y_hat = SparseTensor::new(
            y2_cur.coords().clone(),
            y_final.feats() + r_hat.feats(),
        )?;
        let recon = self.reconstruct(&y_hat, n_half, x.len())?;
        Ok((frame, recon))
    }

    pub fn decode_p_frame(&self, frame: &FrameBitstream, prev: &CoordSet) -> Result<CoordSet> {
        Ok(self.decode_p_frame_full(frame, prev)?.recon)
    }

    /// As [`decode_p_frame`], additionally surfacing both motion fields.
    pub fn decode_p_frame_full(
        &self,
        frame: &FrameBitstream,
        prev: &CoordSet,
    ) -> Result<InterDecode> {
        if frame.frame_type != FrameType::Inter {
            return Err(Error::Bitstream("expected an inter frame".into()));
        }
        let (c3, c2) = self.take_coord_streams(frame)?;
        let (y2_prev, _) = self.feature_extract(prev)?;

        let (y_ini, flow_low) = self.low.decode_with_field(
            &self.store,
            frame.stream(StreamId::FlowLow)?,
            &c3.floor_set(2),
            &c2,
            &y2_prev,
        )?;
        let (y_final, flow_high) = self.high.decode_with_field(
            &self.store,
            frame.stream(StreamId::FlowHigh)?,
            &c2.floor_set(2),
            &c2,
            &y_ini,
        )?;

        let r_hat = self.res.decode(
            &self.store,
            frame.stream(StreamId::Residual)?,
            &self.res.latent_support(&c2),
            &c2,
        )?;
        let y_hat = SparseTensor::new(c2, y_final.feats() + r_hat.feats())?;
        let recon = self.reconstruct(&y_hat, frame.n_half as usize, frame.n_full as usize)?;
        Ok(InterDecode { recon, flow_low, flow_high })
    }

    /// Codes a whole sequence. Frame 0 is always intra; `gop > 0` restarts
    /// with an intra frame every `gop` frames (so `gop == 1` is all-intra),
    /// `gop == 0` never does. Inter frames predict from the previous
    /// *reconstruction*, exactly as the decoder will.
    pub fn code_sequence(
        &self,
        frames: &[CoordSet],
        gop: usize,
    ) -> Result<(SequenceBitstream, Vec<CoordSet>)> {
        if frames.is_empty() {
            return Err(Error::Config("cannot code an empty sequence".into()));
        }
        let mut seq = SequenceBitstream {
            bit_depth: self.cfg.bit_depth,
            config_hash: self.hash(),
            frames: Vec::with_capacity(frames.len()),
        };
        let mut recons: Vec<CoordSet> = Vec::with_capacity(frames.len());
        for (k, x) in frames.iter().enumerate() {
            let intra = k == 0 || (gop > 0 && k % gop == 0);
            let (fb, recon) = if intra {
                self.encode_i_frame(x)?
            } else {
                self.encode_p_frame(x, &recons[k - 1])?
            };
            seq.frames.push(fb);
            recons.push(recon);
        }
        Ok((seq, recons))
    }

    pub fn decode_sequence(&self, seq: &SequenceBitstream) -> Result<Vec<CoordSet>> {
        if seq.config_hash != self.hash() {
            return Err(Error::ModelMismatch(format!(
                "stream was coded by model {:016x}, loaded model is {:016x}",
                seq.config_hash,
                self.hash()
            )));
        }
        if seq.bit_depth != self.cfg.bit_depth {
            return Err(Error::ModelMismatch(format!(
                "stream is {}-bit, model expects {}-bit",
                seq.bit_depth, self.cfg.bit_depth
            )));
        }
        let mut out: Vec<CoordSet> = Vec::with_capacity(seq.frames.len());
        for fb in &seq.frames {
            let recon = match fb.frame_type {
                FrameType::Intra => self.decode_i_frame(fb)?,
                FrameType::Inter => {
                    let prev = out.last().ok_or_else(|| {
                        Error::Bitstream("sequence opens with an inter frame".into())
                    })?;
                    self.decode_p_frame(fb, prev)?
                }
            };
            out.push(recon);
        }
        Ok(out)
    }

    // ---- training graphs ----

    /// Shared tail of both loss graphs: residual coding of `target` minus
    /// `pred` (zero for intra), occupancy-refinement rate, reconstruction
    /// logits at both scales.
    fn loss_tail(
        &self,
        sess: &mut Session,
        x: &CoordSet,
        y2: &TapedSparse,
        y3_coords: &CoordSet,
        pred: Option<&TapedSparse>,
    ) -> Result<(NodeId, NodeId, usize, TapedSparse, TapedSparse)> {
        let r = match pred {
            Some(p) => {
                let d = sess.tape.sub(y2.feat, p.feat);
                TapedSparse::new(y2.coords.clone(), d)
            }
            None => y2.clone(),
        };
        let (r_hat, bits_residual, clamps_r) = self.res.train(sess, &r)?;
        let y_hat_feat = match pred {
            Some(p) => sess.tape.add(p.feat, r_hat.feat),
            None => r_hat.feat,
        };
        let y_hat = TapedSparse::new(y2.coords.clone(), y_hat_feat);

        let (bits_occupancy, clamps_o) = self.occ.rate_node(sess, y3_coords, &y2.coords)?;

        let truth_half = x.floor_set(2);
        let (logits_half, logits_full) = self.reconstruct_train(sess, &y_hat, &truth_half)?;
        Ok((
            bits_residual,
            bits_occupancy,
            clamps_r + clamps_o,
            logits_half,
            logits_full,
        ))
    }

    pub fn intra_loss_graph(&self, sess: &mut Session, x: &CoordSet) -> Result<FrameLoss> {
        self.check_input(x)?;
        let xin = TapedSparse::from_values(sess, &SparseTensor::ones(x.clone()));
        let (y2, y3) = self.feature_extract_taped(sess, &xin)?;
        let (bits_residual, bits_occupancy, clamps, logits_half, logits_full) =
            self.loss_tail(sess, x, &y2, &y3.coords, None)?;
        Ok(FrameLoss {
            bits_flow_low: None,
            bits_flow_high: None,
            bits_residual,
            bits_occupancy,
            logits_half,
            truth_half: x.floor_set(2),
            logits_full,
            truth_full: x.clone(),
            n_full: x.len(),
            clamps,
        })
    }

    /// Inter-frame graph. `prev` is the reference cloud the prediction
    /// draws from; training feeds the previous ground-truth frame here.
    pub fn inter_loss_graph(
        &self,
        sess: &mut Session,
        x: &CoordSet,
        prev: &CoordSet,
    ) -> Result<FrameLoss> {
        self.check_input(x)?;
        let xin = TapedSparse::from_values(sess, &SparseTensor::ones(x.clone()));
        let (y2_cur, y3_cur) = self.feature_extract_taped(sess, &xin)?;
        let pin = TapedSparse::from_values(sess, &SparseTensor::ones(prev.clone()));
        let (y2_prev, y3_prev) = self.feature_extract_taped(sess, &pin)?;

        let (y_ini, bits_flow_low, clamps_l) =
            self.low
                .train(sess, &y3_prev, &y3_cur, &y2_prev, &y2_cur.coords)?;
        let (y_final, bits_flow_high, clamps_h) =
            self.high
                .train(sess, &y_ini, &y2_cur, &y_ini, &y2_cur.coords)?;

        let (bits_residual, bits_occupancy, clamps_tail, logits_half, logits_full) =
            self.loss_tail(sess, x, &y2_cur, &y3_cur.coords, Some(&y_final))?;
        Ok(FrameLoss {
            bits_flow_low: Some(bits_flow_low),
            bits_flow_high: Some(bits_flow_high),
            bits_residual,
            bits_occupancy,
            logits_half,
            truth_half: x.floor_set(2),
            logits_full,
            truth_full: x.clone(),
            n_full: x.len(),
            clamps: clamps_l + clamps_h + clamps_tail,
        })
    }
}

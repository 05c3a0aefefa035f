//! Byte-exact stream containers.
//!
//! A frame record is self-delimiting: a fixed header, a sub-stream table,
//! the payloads, and a trailing CRC32 over everything before it. A sequence
//! file is a magic/version header plus frame records back to back. All
//! integers little-endian.

use crate::error::{Error, Result};
use crate::util::crc32;

pub const SEQ_MAGIC: [u8; 4] = *b"HBMX";
pub const SEQ_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameType {
    Intra,
    Inter,
}

/// Sub-stream identifiers, in mandatory table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StreamId {
    /// Octree-coded eighth-resolution coordinates.
    Coords3 = 0,
    /// Latent payload of the quarter-resolution occupancy refinement.
    OccLatent = 1,
    /// Mask payload of the occupancy refinement.
    OccMask = 2,
    /// Low-resolution flow embedding payload.
    FlowLow = 3,
    /// High-resolution flow embedding payload.
    FlowHigh = 4,
    /// Residual latent payload.
    Residual = 5,
}

impl StreamId {
    pub fn from_u8(v: u8) -> Option<StreamId> {
        Some(match v {
            0 => StreamId::Coords3,
            1 => StreamId::OccLatent,
            2 => StreamId::OccMask,
            3 => StreamId::FlowLow,
            4 => StreamId::FlowHigh,
            5 => StreamId::Residual,
            _ => return None,
        })
    }
}

/// Per-frame rate breakdown in payload bits. Coordinate bits bundle the
/// three streams that exist only to transmit geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameStats {
    pub frame_type: FrameType,
    pub n_full: u32,
    pub bits_coords: usize,
    pub bits_flow_low: usize,
    pub bits_flow_high: usize,
    pub bits_residual: usize,
}

impl FrameStats {
    pub fn total_bits(&self) -> usize {
        self.bits_coords + self.bits_flow_low + self.bits_flow_high + self.bits_residual
    }

    pub fn bpp(&self) -> f64 {
        self.total_bits() as f64 / self.n_full as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameBitstream {
    pub frame_type: FrameType,
    /// Reconstruction cardinality at full resolution.
    pub n_full: u32,
    /// Reconstruction cardinality at half resolution (pruning keep-count).
    pub n_half: u32,
    /// Quarter-resolution support cardinality (decoder sanity check).
    pub n_y2: u32,
    /// Present sub-streams, sorted by id.
    streams: Vec<(StreamId, Vec<u8>)>,
}

impl FrameBitstream {
    pub fn new(frame_type: FrameType, n_full: u32, n_half: u32, n_y2: u32) -> Self {
        FrameBitstream {
            frame_type,
            n_full,
            n_half,
            n_y2,
            streams: Vec::new(),
        }
    }

    /// Adds a sub-stream. Each id may appear once; insertion keeps the table
    /// sorted so serialization is canonical regardless of call order.
    pub fn insert(&mut self, id: StreamId, payload: Vec<u8>) {
        match self.streams.binary_search_by_key(&id, |(i, _)| *i) {
            Ok(_) => panic!("duplicate sub-stream {:?}", id),
            Err(pos) => self.streams.insert(pos, (id, payload)),
        }
    }

    pub fn stream(&self, id: StreamId) -> Result<&[u8]> {
        self.streams
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, p)| p.as_slice())
            .ok_or_else(|| Error::Bitstream(format!("frame lacks sub-stream {:?}", id)))
    }

    pub fn has(&self, id: StreamId) -> bool {
        self.streams.iter().any(|(i, _)| *i == id)
    }

    pub fn payload_bits(&self, id: StreamId) -> usize {
        self.stream(id).map(|p| p.len() * 8).unwrap_or(0)
    }

    pub fn stats(&self) -> FrameStats {
        FrameStats {
            frame_type: self.frame_type,
            n_full: self.n_full,
            bits_coords: self.payload_bits(StreamId::Coords3)
                + self.payload_bits(StreamId::OccLatent)
                + self.payload_bits(StreamId::OccMask),
            bits_flow_low: self.payload_bits(StreamId::FlowLow),
            bits_flow_high: self.payload_bits(StreamId::FlowHigh),
            bits_residual: self.payload_bits(StreamId::Residual),
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.push(match self.frame_type {
            FrameType::Intra => 0u8,
            FrameType::Inter => 1u8,
        });
        out.extend_from_slice(&self.n_full.to_le_bytes());
        out.extend_from_slice(&self.n_half.to_le_bytes());
        out.extend_from_slice(&self.n_y2.to_le_bytes());
        out.push(self.streams.len() as u8);
        for (id, payload) in &self.streams {
            out.push(*id as u8);
            out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        }
        for (_, payload) in &self.streams {
            out.extend_from_slice(payload);
        }
        let crc = crc32(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses one frame record starting at `*pos`, advancing `*pos` past it.
    /// Consumes exactly the bytes the record declares.
    pub fn parse(buf: &[u8], pos: &mut usize) -> Result<FrameBitstream> {
        let start = *pos;
        let mut r = Reader { buf, pos: *pos };
        let ft = match r.u8()? {
            0 => FrameType::Intra,
            1 => FrameType::Inter,
            v => return Err(Error::Bitstream(format!("unknown frame type {v}"))),
        };
        let n_full = r.u32()?;
        let n_half = r.u32()?;
        let n_y2 = r.u32()?;
        let count = r.u8()? as usize;
        let mut table = Vec::with_capacity(count);
        let mut prev: Option<StreamId> = None;
        for _ in 0..count {
            let raw = r.u8()?;
            let id = StreamId::from_u8(raw)
                .ok_or_else(|| Error::Bitstream(format!("unknown sub-stream id {raw}")))?;
            if prev.is_some_and(|p| p >= id) {
                return Err(Error::Bitstream(format!(
                    "sub-stream table not strictly increasing at {:?}",
                    id
                )));
            }
            prev = Some(id);
            let len = r.u32()? as usize;
            table.push((id, len));
        }
        let mut streams = Vec::with_capacity(count);
        for (id, len) in table {
            streams.push((id, r.take(len)?.to_vec()));
        }
        let body_end = r.pos;
        let stored = r.u32()?;
        let actual = crc32(&buf[start..body_end]);
        if stored != actual {
            return Err(Error::Checksum(format!(
                "frame CRC {stored:08x} does not match computed {actual:08x}"
            )));
        }
        *pos = r.pos;
        Ok(FrameBitstream {
            frame_type: ft,
            n_full,
            n_half,
            n_y2,
            streams,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceBitstream {
    pub bit_depth: u8,
    /// Hash of the exact weight file the encoder used.
    pub config_hash: u64,
    pub frames: Vec<FrameBitstream>,
}

impl SequenceBitstream {
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&SEQ_MAGIC);
        out.push(SEQ_VERSION);
        out.push(self.bit_depth);
        out.extend_from_slice(&(self.frames.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        for f in &self.frames {
            out.extend_from_slice(&f.serialize());
        }
        out
    }

    pub fn parse(buf: &[u8]) -> Result<SequenceBitstream> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(4)?;
        if magic != SEQ_MAGIC {
            return Err(Error::Format(format!("bad sequence magic {:02x?}", magic)));
        }
        let version = r.u8()?;
        if version != SEQ_VERSION {
            return Err(Error::Format(format!(
                "unsupported sequence version {version}"
            )));
        }
        let bit_depth = r.u8()?;
        let count = r.u32()? as usize;
        let config_hash = r.u64()?;
        let mut pos = r.pos;
        let mut frames = Vec::with_capacity(count);
        for _ in 0..count {
            frames.push(FrameBitstream::parse(buf, &mut pos)?);
        }
        if pos != buf.len() {
            return Err(Error::Bitstream(format!(
                "{} trailing bytes after last frame",
                buf.len() - pos
            )));
        }
        Ok(SequenceBitstream {
            bit_depth,
            config_hash,
            frames,
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Bitstream(format!(
                "truncated: wanted {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng) -> FrameBitstream {
        let inter = rng.gen_bool(0.5);
        let mut f = FrameBitstream::new(
            if inter { FrameType::Inter } else { FrameType::Intra },
            rng.gen_range(1..100_000),
            rng.gen_range(1..50_000),
            rng.gen_range(1..20_000),
        );
        let mut ids = vec![StreamId::Coords3, StreamId::OccLatent, StreamId::OccMask];
        if inter {
            ids.push(StreamId::FlowLow);
            ids.push(StreamId::FlowHigh);
        }
        ids.push(StreamId::Residual);
        for id in ids {
            let len = rng.gen_range(0..200);
            let payload: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            f.insert(id, payload);
        }
        f
    }

    #[test]
    fn frame_parse_inverts_serialize() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let f = random_frame(&mut rng);
            let bytes = f.serialize();
            let mut pos = 0;
            let g = FrameBitstream::parse(&bytes, &mut pos).unwrap();
            assert_eq!(pos, bytes.len(), "record must consume exactly its bytes");
            assert_eq!(g, f);
            assert_eq!(g.serialize(), bytes);
        }
    }

    #[test]
    fn sequence_parse_inverts_serialize() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let seq = SequenceBitstream {
            bit_depth: 10,
            config_hash: 0xDEAD_BEEF_0BAD_CAFE,
            frames: (0..5).map(|_| random_frame(&mut rng)).collect(),
        };
        let bytes = seq.serialize();
        let back = SequenceBitstream::parse(&bytes).unwrap();
        assert_eq!(back, seq);
        assert_eq!(back.serialize(), bytes);
    }

    #[test]
    fn every_corrupted_byte_is_caught() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = random_frame(&mut rng);
        let bytes = f.serialize();
        // Flip each byte in turn; every flip must surface as some parse
        // error (CRC for payload damage, structural errors for header
        // damage), never as a silently different frame.
        for i in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[i] ^= 0x40;
            let mut pos = 0;
            match FrameBitstream::parse(&bad, &mut pos) {
                Err(_) => {}
                Ok(g) => panic!("byte {} flip decoded as {:?}", i, g.frame_type),
            }
        }
    }

    #[test]
    fn truncation_is_a_bitstream_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let f = random_frame(&mut rng);
        let bytes = f.serialize();
        for cut in [0, 1, 13, bytes.len() - 1] {
            let mut pos = 0;
            let err = FrameBitstream::parse(&bytes[..cut], &mut pos).unwrap_err();
            assert!(
                matches!(err, Error::Bitstream(_)),
                "cut at {cut} gave {err:?}"
            );
        }
    }

    #[test]
    fn wrong_magic_and_version_are_refused() {
        let seq = SequenceBitstream {
            bit_depth: 10,
            config_hash: 1,
            frames: vec![],
        };
        let mut bytes = seq.serialize();
        bytes[0] = b'X';
        assert!(matches!(
            SequenceBitstream::parse(&bytes),
            Err(Error::Format(_))
        ));

        let mut bytes = seq.serialize();
        bytes[4] = 99;
        assert!(matches!(
            SequenceBitstream::parse(&bytes),
            Err(Error::Format(_))
        ));

        let mut bytes = seq.serialize();
        bytes.push(0);
        assert!(matches!(
            SequenceBitstream::parse(&bytes),
            Err(Error::Bitstream(_))
        ));
    }

    #[test]
    fn duplicate_stream_ids_cannot_exist() {
        let mut f = FrameBitstream::new(FrameType::Intra, 1, 1, 1);
        f.insert(StreamId::Residual, vec![1]);
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            f.insert(StreamId::Residual, vec![2]);
        }));
        assert!(r.is_err());
    }

    #[test]
    fn stats_bundle_geometry_streams() {
        let mut f = FrameBitstream::new(FrameType::Inter, 1000, 500, 250);
        f.insert(StreamId::Coords3, vec![0; 10]);
        f.insert(StreamId::OccLatent, vec![0; 4]);
        f.insert(StreamId::OccMask, vec![0; 6]);
        f.insert(StreamId::FlowLow, vec![0; 3]);
        f.insert(StreamId::FlowHigh, vec![0; 2]);
        f.insert(StreamId::Residual, vec![0; 25]);
        let s = f.stats();
        assert_eq!(s.bits_coords, 160);
        assert_eq!(s.bits_flow_low, 24);
        assert_eq!(s.bits_flow_high, 16);
        assert_eq!(s.bits_residual, 200);
        assert_eq!(s.total_bits(), 400);
        assert!((s.bpp() - 0.4).abs() < 1e-12);
    }
}

//! Learned per-channel density model for quantized latents.
//!
//! Each channel owns a small stack of monotone scalar transforms ending in a
//! sigmoid, so the composite is a CDF: matrices are softplus-reparameterized
//! positive, residual gates are tanh-bounded to (-1, 1), which keeps every
//! layer strictly increasing regardless of parameter values. The same
//! parameters drive three consumers: the differentiable rate term during
//! training, the f64 evaluator used to build integer code tables, and the
//! encoder/decoder pair (which must agree bit for bit, hence one shared
//! evaluation path for both sides).

use ndarray::Array2;

use crate::autodiff::tape::{stable_sigmoid, stable_softplus};
use crate::autodiff::{softplus_inv, NodeId, Param, ParamStore, Tape};
use crate::entropy::range::{CdfTable, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::session::Session;
use crate::util::round_half_away;

/// Probability floor for the rate term; clamped entries are counted so a
/// collapsing model is visible in training logs.
pub const PMF_FLOOR: f64 = 5.421010862427522e-20; // 2^-64

const DEFAULT_WIDTHS: [usize; 5] = [1, 3, 3, 3, 1];

/// One channel's transform stack as raw tape nodes (pre-softplus matrices,
/// pre-tanh gates). Kept public so gradient checks can bind these directly
/// to inputs instead of stored parameters.
pub struct ChannelCdf {
    pub mats: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    pub gates: Vec<NodeId>,
}

/// CDF of the channel's density at each element of `x` (any shape, applied
/// element-wise via a column layout). `x` must be a single column.
pub fn cdf_eval(tape: &mut Tape, p: &ChannelCdf, x: NodeId) -> NodeId {
    assert_eq!(tape.shape(x).1, 1, "cdf input must be one column");
    let layers = p.mats.len();
    assert_eq!(p.biases.len(), layers);
    assert_eq!(p.gates.len(), layers - 1);
    let mut h = x;
    for l in 0..layers {
        let w = tape.softplus(p.mats[l]);
        let lin = tape.matmul(h, w);
        let u = tape.add_bias(lin, p.biases[l]);
        if l + 1 < layers {
            let a = tape.tanh(p.gates[l]);
            let t = tape.tanh(u);
            let gated = tape.mul_row(t, a);
            h = tape.add(u, gated);
        } else {
            h = tape.sigmoid(u);
        }
    }
    h
}

/// Interval mass CDF(x+1/2) - CDF(x-1/2), clamped below at [`PMF_FLOOR`].
/// Returns the clamped node and how many entries hit the floor.
pub fn pmf_eval(tape: &mut Tape, p: &ChannelCdf, x: NodeId) -> (NodeId, usize) {
    let hi_in = tape.add_scalar(x, 0.5);
    let lo_in = tape.add_scalar(x, -0.5);
    let hi = cdf_eval(tape, p, hi_in);
    let lo = cdf_eval(tape, p, lo_in);
    let raw = tape.sub(hi, lo);
    let clamped = tape.value(raw).iter().filter(|&&v| v < PMF_FLOOR).count();
    (tape.max_scalar(raw, PMF_FLOOR), clamped)
}

/// Total code length in bits for one channel column: sum of -log2 pmf.
pub fn bits_eval(tape: &mut Tape, p: &ChannelCdf, x: NodeId) -> (NodeId, usize) {
    let (pmf, clamped) = pmf_eval(tape, p, x);
    let nats = tape.ln(pmf);
    let s = tape.sum_all(nats);
    (tape.scale(s, -std::f64::consts::LOG2_E), clamped)
}

#[derive(Debug, Clone)]
pub struct FactorizedModel {
    name: String,
    channels: usize,
    widths: Vec<usize>,
}

impl FactorizedModel {
    pub fn new(name: &str, channels: usize) -> Self {
        FactorizedModel {
            name: name.to_string(),
            channels,
            widths: DEFAULT_WIDTHS.to_vec(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn mat_name(&self, ch: usize, l: usize) -> String {
        format!("{}.ch{}.h{}", self.name, ch, l)
    }
    fn bias_name(&self, ch: usize, l: usize) -> String {
        format!("{}.ch{}.b{}", self.name, ch, l)
    }
    fn gate_name(&self, ch: usize, l: usize) -> String {
        format!("{}.ch{}.a{}", self.name, ch, l)
    }

    /// Registers all per-channel parameters. Matrices start as
    /// softplus_inv(g / fan_in) with g chosen so the composed init is a wide
    /// logistic CDF centered at zero; biases and gates start at zero, which
    /// pins CDF(0) = 1/2 exactly at init.
    pub fn register(&self, store: &mut ParamStore) {
        let layers = self.widths.len() - 1;
        let g = 0.1f64.powf(1.0 / layers as f64);
        for ch in 0..self.channels {
            for l in 0..layers {
                let (win, wout) = (self.widths[l], self.widths[l + 1]);
                let w0 = softplus_inv(g / win as f64);
                store.insert(
                    &self.mat_name(ch, l),
                    Param::new(vec![win, wout], Array2::from_elem((win, wout), w0)),
                );
                store.insert(
                    &self.bias_name(ch, l),
                    Param::new(vec![wout], Array2::zeros((1, wout))),
                );
                if l + 1 < layers {
                    store.insert(
                        &self.gate_name(ch, l),
                        Param::new(vec![wout], Array2::zeros((1, wout))),
                    );
                }
            }
        }
    }

    fn bind(&self, sess: &mut Session, ch: usize) -> ChannelCdf {
        let layers = self.widths.len() - 1;
        let mut p = ChannelCdf {
            mats: Vec::with_capacity(layers),
            biases: Vec::with_capacity(layers),
            gates: Vec::with_capacity(layers - 1),
        };
        for l in 0..layers {
            p.mats.push(sess.param(&self.mat_name(ch, l)));
            p.biases.push(sess.param(&self.bias_name(ch, l)));
            if l + 1 < layers {
                p.gates.push(sess.param(&self.gate_name(ch, l)));
            }
        }
        p
    }

    /// Differentiable total bit cost of a quantized (or noise-perturbed)
    /// latent, summed over all elements. Second value counts pmf floor hits.
    pub fn bits_node(&self, sess: &mut Session, latent: NodeId) -> (NodeId, usize) {
        let (n, c) = sess.tape.shape(latent);
        assert_eq!(c, self.channels, "latent channel mismatch");
        let mut total = sess.tape.scalar(0.0);
        let mut clamped = 0;
        if n == 0 {
            return (total, 0);
        }
        for ch in 0..self.channels {
            let p = self.bind(sess, ch);
            let col = sess.tape.slice_cols(latent, ch, ch + 1);
            let (b, k) = bits_eval(&mut sess.tape, &p, col);
            clamped += k;
            total = sess.tape.add(total, b);
        }
        (total, clamped)
    }

    /// f64 twin of the taped CDF; the coder-side table builder uses this, so
    /// it must follow the exact same arithmetic as the tape ops.
    pub fn cdf_f64(&self, store: &ParamStore, ch: usize, x: f64) -> f64 {
        let layers = self.widths.len() - 1;
        let mut h = vec![x];
        for l in 0..layers {
            let w = &store.get(&self.mat_name(ch, l)).expect("missing cdf mat").value;
            let b = &store.get(&self.bias_name(ch, l)).expect("missing cdf bias").value;
            let wout = self.widths[l + 1];
            let mut u = vec![0.0; wout];
            for (j, uj) in u.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (i, &hi) in h.iter().enumerate() {
                    acc += hi * stable_softplus(w[[i, j]]);
                }
                *uj = acc + b[[0, j]];
            }
            if l + 1 < layers {
                let a = &store.get(&self.gate_name(ch, l)).expect("missing cdf gate").value;
                h = u
                    .iter()
                    .enumerate()
                    .map(|(j, &uj)| uj + a[[0, j]].tanh() * uj.tanh())
                    .collect();
            } else {
                h = u.iter().map(|&uj| stable_sigmoid(uj)).collect();
            }
        }
        h[0]
    }

    pub fn pmf_f64(&self, store: &ParamStore, ch: usize, n: f64) -> f64 {
        let m = self.cdf_f64(store, ch, n + 0.5) - self.cdf_f64(store, ch, n - 0.5);
        m.max(PMF_FLOOR)
    }

    /// Non-taped total bit cost; oracle twin of [`Self::bits_node`].
    pub fn bits_f64(&self, store: &ParamStore, latent: &Array2<f64>) -> f64 {
        assert_eq!(latent.ncols(), self.channels);
        let mut bits = 0.0;
        for ch in 0..self.channels {
            for &v in latent.column(ch) {
                bits -= self.pmf_f64(store, ch, v).log2();
            }
        }
        bits
    }

    /// Integer code table for one channel over an inclusive value range.
    /// Escape mass = tail probability outside the range, floored so the
    /// table always admits out-of-range values.
    pub fn table(
        &self,
        store: &ParamStore,
        ch: usize,
        min_v: i32,
        max_v: i32,
    ) -> Result<CdfTable> {
        let n = (max_v as i64 - min_v as i64 + 1) as usize;
        let mut masses = Vec::with_capacity(n + 1);
        for v in min_v as i64..=max_v as i64 {
            masses.push(self.pmf_f64(store, ch, v as f64));
        }
        let tail = self.cdf_f64(store, ch, min_v as f64 - 0.5)
            + (1.0 - self.cdf_f64(store, ch, max_v as f64 + 0.5));
        masses.push(tail.max(PMF_FLOOR));
        CdfTable::from_masses(min_v, max_v, &masses)
    }

    /// Encodes an integer-valued latent (rows x channels). The stream is
    /// self-describing up to the model: header carries the value range and
    /// row count, the decoder rebuilds identical tables from the same store.
    pub fn encode(&self, store: &ParamStore, latent: &Array2<f64>) -> Result<Vec<u8>> {
        if latent.ncols() != self.channels {
            return Err(Error::Entropy(format!(
                "latent has {} channels, model has {}",
                latent.ncols(),
                self.channels
            )));
        }
        let rows = latent.nrows();
        let mut out = Vec::new();
        if rows == 0 {
            out.extend_from_slice(&0i32.to_le_bytes());
            out.extend_from_slice(&0i32.to_le_bytes());
            out.extend_from_slice(&0u32.to_le_bytes());
            return Ok(out);
        }
        let mut min_v = i64::MAX;
        let mut max_v = i64::MIN;
        for &v in latent.iter() {
            if v.fract() != 0.0 || !v.is_finite() {
                return Err(Error::Entropy(format!("latent value {} not an integer", v)));
            }
            let vi = v as i64;
            if vi < i32::MIN as i64 || vi > i32::MAX as i64 {
                return Err(Error::Entropy(format!("latent value {} out of i32 range", vi)));
            }
            min_v = min_v.min(vi);
            max_v = max_v.max(vi);
        }
        out.extend_from_slice(&(min_v as i32).to_le_bytes());
        out.extend_from_slice(&(max_v as i32).to_le_bytes());
        out.extend_from_slice(&(rows as u32).to_le_bytes());
        let tables: Vec<CdfTable> = (0..self.channels)
            .map(|ch| self.table(store, ch, min_v as i32, max_v as i32))
            .collect::<Result<_>>()?;
        let mut enc = RangeEncoder::new();
        for r in 0..rows {
            for (ch, table) in tables.iter().enumerate() {
                table.encode_value(&mut enc, latent[[r, ch]] as i64);
            }
        }
        out.extend_from_slice(&enc.finish());
        Ok(out)
    }

    pub fn decode(&self, store: &ParamStore, bytes: &[u8]) -> Result<Array2<f64>> {
        if bytes.len() < 12 {
            return Err(Error::Entropy("latent stream header truncated".into()));
        }
        let min_v = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let max_v = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
        let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if rows == 0 {
            return Ok(Array2::zeros((0, self.channels)));
        }
        if max_v < min_v {
            return Err(Error::Entropy("latent stream header range inverted".into()));
        }
        let tables: Vec<CdfTable> = (0..self.channels)
            .map(|ch| self.table(store, ch, min_v, max_v))
            .collect::<Result<_>>()?;
        let mut dec = RangeDecoder::new(&bytes[12..]);
        let mut out = Array2::zeros((rows, self.channels));
        for r in 0..rows {
            for (ch, table) in tables.iter().enumerate() {
                out[[r, ch]] = table.decode_value(&mut dec) as f64;
            }
        }
        Ok(out)
    }
}

/// Training-time quantization surrogate: additive noise uniform on
/// [-1/2, 1/2), drawn from the session RNG so runs are reproducible.
pub fn quantize_noise(sess: &mut Session, x: NodeId) -> NodeId {
    let (r, c) = sess.tape.shape(x);
    let noise = sess.uniform_noise(r, c);
    let n = sess.tape.input(noise);
    sess.tape.add(x, n)
}

/// Inference quantization; ties round away from zero.
pub fn quantize_round(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(round_half_away)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use ndarray::array;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn fresh_model(channels: usize) -> (FactorizedModel, ParamStore) {
        let m = FactorizedModel::new("em", channels);
        let mut store = ParamStore::new();
        m.register(&mut store);
        (m, store)
    }

    fn randomize(store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in store.iter_mut() {
            for v in p.value.iter_mut() {
                *v = rng.gen_range(-1.5..1.5);
            }
        }
    }

    /// Offsets parameters from their init, staying in the regime where the
    /// sigmoid does not saturate past double precision over small inputs.
    fn perturb(store: &mut ParamStore, seed: u64, amp: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (_, p) in store.iter_mut() {
            for v in p.value.iter_mut() {
                *v += rng.gen_range(-amp..amp);
            }
        }
    }

    #[test]
    fn init_is_exactly_half_at_zero_and_tracks_wide_logistic() {
        let (m, store) = fresh_model(2);
        for ch in 0..2 {
            assert_eq!(m.cdf_f64(&store, ch, 0.0), 0.5);
            for x in [-20.0, -3.0, -0.7, 0.4, 2.2, 15.0] {
                let want = 1.0 / (1.0 + (-0.1 * x as f64).exp());
                assert!(
                    (m.cdf_f64(&store, ch, x) - want).abs() < 1e-9,
                    "cdf({}) diverged from logistic init",
                    x
                );
            }
        }
    }

    #[test]
    fn cdf_strictly_increasing_for_random_parameters() {
        // Strictness is checkable in f64 only while the sigmoid has not
        // saturated, so parameters stay near init and inputs near the
        // coding range; saturated tails are covered by the limits test.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (m, mut store) = fresh_model(1);
        let base = store.to_bytes();
        let mut checked = 0;
        for trial in 0..100 {
            store = ParamStore::from_bytes(&base).unwrap();
            perturb(&mut store, 1000 + trial, 0.4);
            for _ in 0..100 {
                let x: f64 = rng.gen_range(-6.0..6.0);
                let dx: f64 = rng.gen_range(1e-3..3.0);
                let lo = m.cdf_f64(&store, 0, x);
                let hi = m.cdf_f64(&store, 0, x + dx);
                assert!(lo < hi, "cdf not increasing at x={} dx={}", x, dx);
                assert!((0.0..=1.0).contains(&lo));
                checked += 1;
            }
        }
        assert_eq!(checked, 10_000);
    }

    #[test]
    fn cdf_limits_reach_zero_and_one() {
        let (m, mut store) = fresh_model(1);
        randomize(&mut store, 7);
        assert!(m.cdf_f64(&store, 0, -1e6) < 1e-6);
        assert!(m.cdf_f64(&store, 0, 1e6) > 1.0 - 1e-6);
    }

    #[test]
    fn taped_cdf_matches_f64_twin() {
        let (m, mut store) = fresh_model(3);
        randomize(&mut store, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<f64> = (0..40).map(|_| rng.gen_range(-8.0..8.0)).collect();
        let mut sess = Session::infer(&store);
        for ch in 0..3 {
            let p = m.bind(&mut sess, ch);
            let col = Array2::from_shape_vec((xs.len(), 1), xs.clone()).unwrap();
            let x = sess.tape.input(col);
            let y = cdf_eval(&mut sess.tape, &p, x);
            for (i, &xi) in xs.iter().enumerate() {
                let want = m.cdf_f64(&store, ch, xi);
                let got = sess.tape.value(y)[[i, 0]];
                assert!((got - want).abs() <= 1e-14 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn taped_bits_match_f64_and_direct_summation() {
        let (m, mut store) = fresh_model(2);
        perturb(&mut store, 12, 0.4);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let latent =
            Array2::from_shape_fn((25, 2), |_| rng.gen_range(-6i32..=6) as f64);
        // Direct per-element summation oracle.
        let mut direct = 0.0;
        for ch in 0..2 {
            for &v in latent.column(ch) {
                direct -= m.pmf_f64(&store, ch, v).log2();
            }
        }
        let batch = m.bits_f64(&store, &latent);
        assert!((batch - direct).abs() < 1e-12);
        let mut sess = Session::infer(&store);
        let x = sess.tape.input(latent);
        let (bits, clamped) = m.bits_node(&mut sess, x);
        assert_eq!(clamped, 0);
        let got = sess.tape.value(bits)[[0, 0]];
        assert!((got - direct).abs() < 1e-9 * direct.abs().max(1.0));
    }

    #[test]
    fn saturated_pmf_hits_the_floor_and_is_counted() {
        let (m, mut store) = fresh_model(1);
        randomize(&mut store, 9);
        let latent = array![[200.0], [-200.0], [0.0]];
        let mut sess = Session::infer(&store);
        let x = sess.tape.input(latent);
        let (bits, clamped) = m.bits_node(&mut sess, x);
        let v = sess.tape.value(bits)[[0, 0]];
        assert!(clamped >= 2, "saturated symbols should clamp, got {}", clamped);
        assert!(v.is_finite());
        // Each floored symbol costs exactly -log2(2^-64).
        assert!(v >= 64.0 * clamped as f64 - 1e-9);
    }

    #[test]
    fn empty_latent_has_zero_bits() {
        let (m, store) = fresh_model(4);
        let mut sess = Session::infer(&store);
        let x = sess.tape.input(Array2::zeros((0, 4)));
        let (bits, clamped) = m.bits_node(&mut sess, x);
        assert_eq!(sess.tape.value(bits)[[0, 0]], 0.0);
        assert_eq!(clamped, 0);
    }

    #[test]
    fn bits_gradient_passes_central_differences() {
        // Inputs: latent column, then (mat, bias, gate?) per layer.
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let widths = DEFAULT_WIDTHS;
        let mut inputs: Vec<Array2<f64>> =
            vec![Array2::from_shape_fn((6, 1), |_| rng.gen_range(-3.0..3.0))];
        for l in 0..4 {
            let (win, wout) = (widths[l], widths[l + 1]);
            inputs.push(Array2::from_shape_fn((win, wout), |_| rng.gen_range(-1.0..1.0)));
            inputs.push(Array2::from_shape_fn((1, wout), |_| rng.gen_range(-0.5..0.5)));
            if l + 1 < 4 {
                inputs.push(Array2::from_shape_fn((1, wout), |_| rng.gen_range(-0.8..0.8)));
            }
        }
        let report = grad_check(&inputs, 1e-5, |tape, ids| {
            let mut p = ChannelCdf {
                mats: vec![],
                biases: vec![],
                gates: vec![],
            };
            let mut i = 1;
            for l in 0..4 {
                p.mats.push(ids[i]);
                p.biases.push(ids[i + 1]);
                i += 2;
                if l + 1 < 4 {
                    p.gates.push(ids[i]);
                    i += 1;
                }
            }
            bits_eval(tape, &p, ids[0]).0
        })
        .unwrap();
        assert!(
            report.max_rel_err <= 1e-4,
            "max rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }

    #[test]
    fn noise_quantizer_stays_within_half_step() {
        let (_, store) = fresh_model(1);
        let mut sess = Session::train(&store, ChaCha8Rng::seed_from_u64(2));
        let n = 1_000_000;
        let x = sess.tape.input(Array2::zeros((n, 1)));
        let y = quantize_noise(&mut sess, x);
        let v = sess.tape.value(y);
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for &e in v.iter() {
            lo = lo.min(e);
            hi = hi.max(e);
        }
        assert!(lo >= -0.5 && hi < 0.5, "noise range [{}, {}]", lo, hi);
        // Both halves get mass; a one-sided generator would be a bug.
        assert!(lo < -0.45 && hi > 0.45);
    }

    #[test]
    fn round_quantizer_tie_rules() {
        let x = array![[1.4, -2.5], [2.5, -1.4], [0.5, -0.5]];
        let q = quantize_round(&x);
        assert_eq!(q, array![[1.0, -3.0], [3.0, -1.0], [1.0, -1.0]]);
    }

    #[test]
    fn init_table_splits_mass_near_evenly_at_zero() {
        let (m, store) = fresh_model(1);
        let table = m.table(&store, 0, -30, 30).unwrap();
        // In-range mass below symbol 0 should approximate the model's mass
        // on [-30.5, -0.5]; bits_of inverts to the quantized probability.
        let want = m.cdf_f64(&store, 0, -0.5) - m.cdf_f64(&store, 0, -30.5);
        let mut below = 0.0;
        for v in -30..0 {
            below += 2f64.powf(-table.bits_of(v as i64));
        }
        let mut above = 0.0;
        for v in 1..=30 {
            above += 2f64.powf(-table.bits_of(v as i64));
        }
        assert!(
            (below - want).abs() < 2e-3,
            "mass below zero {} vs model {}",
            below,
            want
        );
        // The init density is symmetric, so the boundary splits it evenly.
        let frac = below / (below + above);
        assert!(frac > 0.48 && frac < 0.52, "split {}", frac);
    }

    #[test]
    fn stream_round_trips_and_matches_estimate() {
        let (m, mut store) = fresh_model(3);
        randomize(&mut store, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let latent = Array2::from_shape_fn((500, 3), |_| rng.gen_range(-9i32..=9) as f64);
        let bytes = m.encode(&store, &latent).unwrap();
        let back = m.decode(&store, &bytes).unwrap();
        assert_eq!(latent, back);
        let est = m.bits_f64(&store, &latent);
        let actual = (bytes.len() as f64 - 12.0) * 8.0;
        assert!(
            actual <= est * 1.01 + 64.0 * 8.0,
            "stream {} bits vs estimate {}",
            actual,
            est
        );
    }

    #[test]
    fn empty_and_single_row_streams() {
        let (m, store) = fresh_model(2);
        let empty = Array2::zeros((0, 2));
        let bytes = m.encode(&store, &empty).unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(m.decode(&store, &bytes).unwrap(), empty);

        let one = array![[-4.0, 7.0]];
        let bytes = m.encode(&store, &one).unwrap();
        assert_eq!(m.decode(&store, &bytes).unwrap(), one);
    }

    #[test]
    fn non_integer_latent_is_rejected() {
        let (m, store) = fresh_model(1);
        let bad = array![[0.25]];
        assert!(m.encode(&store, &bad).is_err());
    }
}

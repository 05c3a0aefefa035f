//! Rate-distortion optimization: the per-frame objective, a warm-up
//! schedule, and a deterministic minibatch loop with per-epoch
//! checkpoints.

use std::collections::HashMap;
use std::path::PathBuf;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{lr_schedule, Adam, AdamConfig, NodeId};
use crate::error::{Error, Result};
use crate::nn::TapedSparse;
use crate::pipeline::{CodecModel, FrameLoss};
use crate::session::Session;
use crate::sparse::CoordSet;

/// Rate weight used during warm-up, and how long warm-up lasts. Starting
/// with a large distortion weight keeps early reconstructions dense enough
/// for the motion stages to find structure.
pub const WARMUP_LAMBDA: f64 = 20.0;
pub const WARMUP_EPOCHS: usize = 10;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Distortion weight in the rate-distortion objective.
    pub lambda: f64,
    pub epochs: usize,
    /// Samples per optimizer step.
    pub batch: usize,
    pub seed: u64,
    /// Hold the distortion weight at [`WARMUP_LAMBDA`] for the first
    /// [`WARMUP_EPOCHS`] epochs.
    pub two_stage: bool,
    pub base_lr: f64,
    /// Where to save one weight file per epoch; `None` disables.
    pub checkpoint_dir: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(lambda: f64) -> Self {
        TrainConfig {
            lambda,
            epochs: 100,
            batch: 4,
            seed: 0,
            two_stage: true,
            base_lr: 1e-3,
            checkpoint_dir: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.base_lr
            )));
        }
        Ok(())
    }
}

/// One training sample: a frame and, for inter-frame samples, its
/// reference. Training references are ground-truth frames.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub prev: Option<CoordSet>,
    pub cur: CoordSet,
}

/// A sequence becomes one intra sample (frame 0) plus one inter sample per
/// consecutive pair.
pub fn training_pairs(frames: &[CoordSet]) -> Vec<TrainSample> {
    let mut out = Vec::with_capacity(frames.len());
    for (k, f) in frames.iter().enumerate() {
        out.push(TrainSample {
            prev: if k == 0 { None } else { Some(frames[k - 1].clone()) },
            cur: f.clone(),
        });
    }
    out
}

/// Mean binary cross-entropy (natural log) of candidate occupancy logits
/// against the support that should survive: `softplus(z) - t*z`, which is
/// `-ln sigma(z)` for occupied and `-ln(1 - sigma(z))` for vacant entries.
pub fn bce_occupancy(sess: &mut Session, logits: &TapedSparse, truth: &CoordSet) -> NodeId {
    let m = logits.coords.len();
    let t = Array2::from_shape_fn((m, 1), |(i, _)| {
        if truth.contains(&logits.coords.coords()[i]) {
            1.0
        } else {
            0.0
        }
    });
    let tn = sess.tape.input(t);
    let sp = sess.tape.softplus(logits.feat);
    let tz = sess.tape.mul(tn, logits.feat);
    let diff = sess.tape.sub(sp, tz);
    sess.tape.mean_all(diff)
}

/// The assembled objective. `eq4` is rate of the prediction and residual
/// streams per input point plus `lambda` times the two-scale occupancy
/// distortion; `total` additionally carries the coordinate-refinement
/// stream's rate so its coder trains too.
pub struct ObjectiveNodes {
    pub eq4: NodeId,
    pub total: NodeId,
    pub distortion: NodeId,
}

pub fn objective_nodes(sess: &mut Session, fl: &FrameLoss, lambda: f64) -> ObjectiveNodes {
    let per_point = 1.0 / fl.n_full as f64;
    let mut bits = fl.bits_residual;
    if let Some(b) = fl.bits_flow_low {
        bits = sess.tape.add(bits, b);
    }
    if let Some(b) = fl.bits_flow_high {
        bits = sess.tape.add(bits, b);
    }
    let rate = sess.tape.scale(bits, per_point);

    let bce_half = bce_occupancy(sess, &fl.logits_half, &fl.truth_half);
    let bce_full = bce_occupancy(sess, &fl.logits_full, &fl.truth_full);
    let dsum = sess.tape.add(bce_half, bce_full);
    let distortion = sess.tape.scale(dsum, 0.5);

    let weighted = sess.tape.scale(distortion, lambda);
    let eq4 = sess.tape.add(rate, weighted);
    let occ_rate = sess.tape.scale(fl.bits_occupancy, per_point);
    let total = sess.tape.add(eq4, occ_rate);
    ObjectiveNodes { eq4, total, distortion }
}

/// One optimizer step's bookkeeping, averaged over its batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lambda: f64,
    pub lr: f64,
    pub eq4: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<StepRecord>,
}

impl TrainReport {
    pub fn final_total(&self) -> f64 {
        self.history.last().map(|r| r.total).unwrap_or(f64::NAN)
    }
}

/// Mean objective values over a dataset. Uses the same noise-based
/// surrogate as training with per-sample rngs derived from `seed`, so two
/// calls with equal inputs agree exactly.
pub fn evaluate_loss(
    model: &CodecModel,
    data: &[TrainSample],
    lambda: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Config("no samples to evaluate".into()));
    }
    let mut fork = ChaCha8Rng::seed_from_u64(seed);
    let mut eq4 = 0.0;
    let mut total = 0.0;
    for sample in data {
        let (e, t, _) = sample_pass(model, sample, lambda, fork.gen(), false)?;
        eq4 += e / data.len() as f64;
        total += t / data.len() as f64;
    }
    Ok((eq4, total))
}

/// Forward (and optionally backward) pass for one sample.
fn sample_pass(
    model: &CodecModel,
    sample: &TrainSample,
    lambda: f64,
    noise_seed: u64,
    backward: bool,
) -> Result<(f64, f64, HashMap<String, Array2<f64>>)> {
    let mut sess = Session::train(&model.store, ChaCha8Rng::seed_from_u64(noise_seed));
    let fl = match &sample.prev {
        Some(prev) => model.inter_loss_graph(&mut sess, &sample.cur, prev)?,
        None => model.intra_loss_graph(&mut sess, &sample.cur)?,
    };
    let obj = objective_nodes(&mut sess, &fl, lambda);
    let eq4 = sess.tape.value(obj.eq4)[[0, 0]];
    let total = sess.tape.value(obj.total)[[0, 0]];
    if !eq4.is_finite() || !total.is_finite() {
        return Err(Error::Diverged(format!(
            "objective is not finite (eq4 {eq4}, total {total})"
        )));
    }
    if !backward {
        return Ok((eq4, total, HashMap::new()));
    }
    let grads = sess.tape.backward(obj.total)?;
    Ok((eq4, total, sess.param_grads(&grads)))
}

/// Minibatch training. Deterministic for a fixed config and dataset: the
/// seed drives sample order and quantizer noise, and parameter updates walk
/// the store in name order. A non-finite objective or gradient aborts with
/// the failing epoch and step in the message.
pub fn train(model: &mut CodecModel, data: &[TrainSample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::default());
    let mut history = Vec::new();
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg.base_lr, epoch);
        let lambda = if cfg.two_stage && epoch < WARMUP_EPOCHS {
            WARMUP_LAMBDA
        } else {
            cfg.lambda
        };
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut master);

        for chunk in order.chunks(cfg.batch) {
            let mut acc: HashMap<String, Array2<f64>> = HashMap::new();
            let mut eq4_mean = 0.0;
            let mut total_mean = 0.0;
            for &i in chunk {
                let noise_seed = master.gen::<u64>();
                let (eq4, total, grads) =
                    sample_pass(model, &data[i], lambda, noise_seed, true).map_err(|e| {
                        match e {
                            Error::Diverged(msg) => Error::Diverged(format!(
                                "epoch {epoch}, step {step}, sample {i}: {msg}"
                            )),
                            other => other,
                        }
                    })?;
                eq4_mean += eq4 / chunk.len() as f64;
                total_mean += total / chunk.len() as f64;
                for (name, g) in grads {
                    acc.entry(name)
                        .and_modify(|a| *a += &g)
                        .or_insert(g);
                }
            }
            for g in acc.values_mut() {
                *g /= chunk.len() as f64;
            }
            adam.step(&mut model.store, &acc, lr).map_err(|e| match e {
                Error::NonFinite(msg) => {
                    Error::Diverged(format!("epoch {epoch}, step {step}: {msg}"))
                }
                other => other,
            })?;
            history.push(StepRecord { epoch, step, lambda, lr, eq4: eq4_mean, total: total_mean });
            step += 1;
        }

        if let Some(dir) = &cfg.checkpoint_dir {
            model.save(&dir.join(format!("epoch-{epoch:03}.hwts")))?;
        }
    }
    Ok(TrainReport { history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::CodecConfig;
    use crate::sparse::Coord;
    use tempfile::tempdir;

    fn blob(seed: u64, n: usize, extent: i32) -> CoordSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts: Vec<Coord> = (0..n * 2)
            .map(|_| {
                [
                    rng.gen_range(0..extent),
                    rng.gen_range(0..extent),
                    rng.gen_range(0..extent),
                ]
            })
            .collect();
        pts.sort_by_key(crate::sparse::canon_key);
        pts.dedup();
        pts.truncate(n);
        CoordSet::new(pts, 1).unwrap()
    }

    fn toy_data() -> Vec<TrainSample> {
        let f0 = blob(1, 70, 32);
        let f1: CoordSet = CoordSet::new(
            f0.coords().iter().map(|c| [c[0] + 1, c[1], c[2]]).collect(),
            1,
        )
        .unwrap();
        training_pairs(&[f0, f1])
    }

    #[test]
    fn pairs_start_intra_then_chain() {
        let frames = vec![blob(1, 30, 16), blob(2, 30, 16), blob(3, 30, 16)];
        let pairs = training_pairs(&frames);
        assert_eq!(pairs.len(), 3);
        assert!(pairs[0].prev.is_none());
        assert_eq!(pairs[1].prev.as_ref().unwrap(), &frames[0]);
        assert_eq!(pairs[2].prev.as_ref().unwrap(), &frames[1]);
        assert_eq!(pairs[2].cur, frames[2]);
    }

    #[test]
    fn cross_entropy_hand_values() {
        let m = CodecModel::init(CodecConfig::tiny(6), 1).unwrap();
        let coords = CoordSet::new(vec![[0, 0, 0], [1, 0, 0], [2, 0, 0]], 1).unwrap();
        let truth = CoordSet::new(vec![[0, 0, 0], [2, 0, 0]], 1).unwrap();

        // sigma(0) = 0.5 occupied, sigma(ln(1/9)) = 0.1 vacant,
        // sigma(40) ~= 1 occupied.
        let z = Array2::from_shape_vec((3, 1), vec![0.0, (1.0f64 / 9.0).ln(), 40.0]).unwrap();
        let mut sess = Session::infer(&m.store);
        let zn = sess.tape.input(z);
        let logits = TapedSparse::new(coords, zn);
        let bce = bce_occupancy(&mut sess, &logits, &truth);
        let got = sess.tape.value(bce)[[0, 0]];
        let want = (2.0f64.ln() + (10.0f64 / 9.0).ln() + 0.0) / 3.0;
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn perfect_logits_cost_nothing() {
        let m = CodecModel::init(CodecConfig::tiny(6), 1).unwrap();
        let coords = CoordSet::new(vec![[0, 0, 0], [1, 0, 0]], 1).unwrap();
        let truth = CoordSet::new(vec![[0, 0, 0]], 1).unwrap();
        let z = Array2::from_shape_vec((2, 1), vec![50.0, -50.0]).unwrap();
        let mut sess = Session::infer(&m.store);
        let zn = sess.tape.input(z);
        let logits = TapedSparse::new(coords, zn);
        let bce = bce_occupancy(&mut sess, &logits, &truth);
        assert!(sess.tape.value(bce)[[0, 0]].abs() < 1e-9);
    }

    #[test]
    fn same_seed_same_history() {
        let data = toy_data();
        let mut cfg = TrainConfig::new(10.0);
        cfg.epochs = 2;
        cfg.batch = 2;
        cfg.seed = 5;
        cfg.two_stage = false;
        cfg.base_lr = 1e-4;

        let mut m1 = CodecModel::init(CodecConfig::tiny(6), 3).unwrap();
        let r1 = train(&mut m1, &data, &cfg).unwrap();
        let mut m2 = CodecModel::init(CodecConfig::tiny(6), 3).unwrap();
        let r2 = train(&mut m2, &data, &cfg).unwrap();
        assert_eq!(r1.history, r2.history);
        assert_eq!(m1.to_bytes(), m2.to_bytes());
        assert_eq!(r1.history.len(), 2, "two epochs x one batch");
    }

    #[test]
    fn warmup_holds_lambda_then_releases() {
        let data = toy_data();
        let mut cfg = TrainConfig::new(5.0);
        cfg.epochs = WARMUP_EPOCHS + 1;
        cfg.batch = 4;
        cfg.seed = 9;
        cfg.base_lr = 1e-5;
        let mut m = CodecModel::init(CodecConfig::tiny(6), 3).unwrap();
        let report = train(&mut m, &data, &cfg).unwrap();
        for rec in &report.history {
            let want = if rec.epoch < WARMUP_EPOCHS { WARMUP_LAMBDA } else { 5.0 };
            assert_eq!(rec.lambda, want, "epoch {}", rec.epoch);
        }
        assert!(report.history.iter().any(|r| r.lambda == 5.0));
    }

    #[test]
    fn checkpoints_appear_per_epoch() {
        let dir = tempdir().unwrap();
        let data = toy_data();
        let mut cfg = TrainConfig::new(10.0);
        cfg.epochs = 2;
        cfg.seed = 1;
        cfg.base_lr = 1e-5;
        cfg.checkpoint_dir = Some(dir.path().join("ckpt"));
        let mut m = CodecModel::init(CodecConfig::tiny(6), 3).unwrap();
        train(&mut m, &data, &cfg).unwrap();
        for e in 0..2 {
            let p = dir.path().join("ckpt").join(format!("epoch-{e:03}.hwts"));
            let loaded = CodecModel::load(&p).unwrap();
            assert_eq!(loaded.cfg, m.cfg);
        }
    }

    #[test]
    fn poisoned_weights_abort_with_diagnostics() {
        let data = toy_data();
        let mut cfg = TrainConfig::new(10.0);
        cfg.epochs = 1;
        let mut m = CodecModel::init(CodecConfig::tiny(6), 3).unwrap();
        // The occupancy head feeds the loss directly, with no intervening
        // rectifier that could swallow the poison.
        m.store.get_mut("rec.head_full.b").unwrap().value[[0, 0]] = f64::NAN;
        let err = train(&mut m, &data, &cfg).unwrap_err();
        match err {
            Error::Diverged(msg) => {
                assert!(msg.contains("epoch 0"), "{msg}");
            }
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn evaluation_is_repeatable_and_sensitive_to_lambda() {
        let data = toy_data();
        let m = CodecModel::init(CodecConfig::tiny(6), 3).unwrap();
        let (e1, t1) = evaluate_loss(&m, &data, 10.0, 7).unwrap();
        let (e2, t2) = evaluate_loss(&m, &data, 10.0, 7).unwrap();
        assert_eq!((e1, t1), (e2, t2));
        let (e3, _) = evaluate_loss(&m, &data, 20.0, 7).unwrap();
        assert!(e3 > e1, "more distortion weight must raise the objective");
        assert!(t1 > e1, "total carries the refinement stream's rate");
    }

    #[test]
    fn bad_configs_are_rejected_up_front() {
        let data = toy_data();
        let mut m = CodecModel::init(CodecConfig::tiny(6), 3).unwrap();
        for bad in [
            TrainConfig { lambda: 0.0, ..TrainConfig::new(1.0) },
            TrainConfig { epochs: 0, ..TrainConfig::new(1.0) },
            TrainConfig { batch: 0, ..TrainConfig::new(1.0) },
            TrainConfig { base_lr: 0.0, ..TrainConfig::new(1.0) },
        ] {
            assert!(train(&mut m, &data, &bad).is_err());
        }
        assert!(train(&mut m, &[], &TrainConfig::new(1.0)).is_err());
    }
}

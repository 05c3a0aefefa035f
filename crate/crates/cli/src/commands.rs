//! One function per subcommand. Each returns `hbmx_core::Result` and the
//! binary maps error variants to exit codes, so these stay free of process
//! concerns.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hbmx_core::entropy::{CdfTable, RangeDecoder, RangeEncoder};
use hbmx_core::metrics::{bd_rate, cap_psnr, d1_psnr, d2_psnr};
use hbmx_core::pipeline::{CodecModel, FrameType, SequenceBitstream};
use hbmx_core::ply::{read_ply, write_flow_ply, write_ply, PlyFormat};
use hbmx_core::sparse::CoordSet;
use hbmx_core::synth::SynthSpec;
use hbmx_core::train::{self, training_pairs};
use hbmx_core::{Error, Result};

use crate::config;

/// Column layout shared by `encode` (writer) and `eval` (reader).
pub const CSV_HEADER: &str =
    "lambda,frame,bpp,bpp_flow_low,bpp_flow_high,bpp_residual,bpp_coords,d1_psnr,d2_psnr";

fn frame_path(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("frame-{k:04}.ply"))
}

/// All `.ply` files in `dir`, read in file-name order. Name order is frame
/// order.
pub fn read_frame_dir(dir: &Path) -> Result<Vec<CoordSet>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "ply"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!(
            "no .ply files in {}",
            dir.display()
        )));
    }
    paths.iter().map(|p| read_ply(p)).collect()
}

pub fn synth(
    kind: &str,
    frames: usize,
    points: usize,
    bit_depth: u8,
    seed: u64,
    ascii: bool,
    out: &Path,
) -> Result<()> {
    let spec = SynthSpec {
        kind: kind.parse()?,
        frames,
        points,
        bit_depth,
        seed,
    };
    let clouds = spec.generate()?;
    fs::create_dir_all(out)?;
    let format = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLe };
    for (k, c) in clouds.iter().enumerate() {
        write_ply(&frame_path(out, k), c, format)?;
    }
    println!("wrote {} frames to {}", clouds.len(), out.display());
    Ok(())
}

pub fn train(config_path: &Path) -> Result<()> {
    let recipe = config::load_recipe(config_path)?;
    let frames = recipe.data.frames(recipe.model.bit_depth)?;
    let samples = training_pairs(&frames);
    let mut model = CodecModel::init(recipe.model.codec_config(), recipe.model.seed)?;
    let cfg = recipe.train.train_config();
    println!(
        "{} samples from {} frames, {} epochs, lambda {}, lr {}",
        samples.len(),
        frames.len(),
        cfg.epochs,
        cfg.lambda,
        cfg.base_lr
    );
    let report = train::train(&mut model, &samples, &cfg)?;
    if let Some(parent) = recipe.out.weights.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    model.save(&recipe.out.weights)?;
    for e in 0..cfg.epochs {
        let totals: Vec<f64> = report
            .history
            .iter()
            .filter(|r| r.epoch == e)
            .map(|r| r.total)
            .collect();
        if totals.is_empty() {
            continue;
        }
        let mean = totals.iter().sum::<f64>() / totals.len() as f64;
        println!("epoch {e:3}: objective {mean:.4}");
    }
    println!(
        "final objective {:.4}, weights -> {}",
        report.final_total(),
        recipe.out.weights.display()
    );
    Ok(())
}

pub fn encode(
    input: &Path,
    model_path: &Path,
    gop: usize,
    out: &Path,
    lambda: f64,
    csv: Option<&Path>,
) -> Result<()> {
    let model = CodecModel::load(model_path)?;
    let frames = read_frame_dir(input)?;
    let (seq, recons) = model.code_sequence(&frames, gop)?;
    fs::write(out, seq.serialize())?;

    let peak = ((1u32 << model.cfg.bit_depth) - 1) as f64;
    let mut table = String::from(CSV_HEADER);
    table.push('\n');
    for (k, fb) in seq.frames.iter().enumerate() {
        let s = fb.stats();
        let n = s.n_full as f64;
        let d1 = cap_psnr(d1_psnr(&recons[k], &frames[k], peak)?);
        let d2 = cap_psnr(d2_psnr(&recons[k], &frames[k], peak)?);
        table.push_str(&format!(
            "{lambda},{k},{:.6},{:.6},{:.6},{:.6},{:.6},{d1:.3},{d2:.3}\n",
            s.bpp(),
            s.bits_flow_low as f64 / n,
            s.bits_flow_high as f64 / n,
            s.bits_residual as f64 / n,
            s.bits_coords as f64 / n,
        ));
    }
    print!("{table}");
    if let Some(path) = csv {
        fs::write(path, &table)?;
    }
    let bits: usize = seq.frames.iter().map(|f| f.stats().total_bits()).sum();
    let pts: u64 = seq.frames.iter().map(|f| f.n_full as u64).sum();
    eprintln!(
        "{} frames, {} points, mean {:.4} bpp -> {}",
        seq.frames.len(),
        pts,
        bits as f64 / pts as f64,
        out.display()
    );
    Ok(())
}

pub fn decode(
    input: &Path,
    model_path: &Path,
    out: &Path,
    ascii: bool,
    verify: bool,
) -> Result<()> {
    let bytes = fs::read(input)?;
    let seq = SequenceBitstream::parse(&bytes)?;
    let model = CodecModel::load(model_path)?;
    let decoded = model.decode_sequence(&seq)?;
    fs::create_dir_all(out)?;
    let format = if ascii { PlyFormat::Ascii } else { PlyFormat::BinaryLe };
    for (k, c) in decoded.iter().enumerate() {
        write_ply(&frame_path(out, k), c, format)?;
    }
    println!("decoded {} frames to {}", decoded.len(), out.display());
    if verify {
        verify_loop(&model, &seq, &decoded)?;
        println!("OK");
    }
    Ok(())
}

/// Re-encodes the decoded frames under the stream's own intra/inter
/// pattern and checks that the second generation's encoder and decoder
/// reconstructions agree frame by frame. Catches a model or build whose
/// two halves have drifted apart.
fn verify_loop(model: &CodecModel, seq: &SequenceBitstream, decoded: &[CoordSet]) -> Result<()> {
    let mut recons: Vec<CoordSet> = Vec::with_capacity(decoded.len());
    for (k, fb) in seq.frames.iter().enumerate() {
        let (fb2, enc_recon) = match fb.frame_type {
            FrameType::Intra => model.encode_i_frame(&decoded[k])?,
            FrameType::Inter => model.encode_p_frame(&decoded[k], &recons[k - 1])?,
        };
        let dec_recon = match fb.frame_type {
            FrameType::Intra => model.decode_i_frame(&fb2)?,
            FrameType::Inter => model.decode_p_frame(&fb2, &recons[k - 1])?,
        };
        if dec_recon != enc_recon {
            return Err(Error::Bitstream(format!(
                "closed-loop check failed at frame {k}"
            )));
        }
        recons.push(dec_recon);
    }
    Ok(())
}

struct RdRow {
    lambda: f64,
    bpp: f64,
    d1: f64,
    d2: f64,
}

fn parse_rd_csv(path: &Path) -> Result<Vec<RdRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(Error::Format(format!(
                "{}: first line must be {:?}",
                path.display(),
                CSV_HEADER
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Format(format!(
                "{} line {}: expected 9 fields, got {}",
                path.display(),
                i + 2,
                f.len()
            )));
        }
        let num = |j: usize| -> Result<f64> {
            f[j].trim().parse::<f64>().map_err(|_| {
                Error::Format(format!(
                    "{} line {}: bad number {:?}",
                    path.display(),
                    i + 2,
                    f[j]
                ))
            })
        };
        rows.push(RdRow {
            lambda: num(0)?,
            bpp: num(2)?,
            d1: num(7)?,
            d2: num(8)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Format(format!("{}: no data rows", path.display())));
    }
    Ok(rows)
}

/// Collapses per-frame rows to one `(bpp, d1, d2)` point per lambda,
/// ordered by rate.
fn rd_points(rows: &[RdRow]) -> Vec<(f64, f64, f64)> {
    let mut lambdas: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let mut pts: Vec<(f64, f64, f64)> = lambdas
        .iter()
        .map(|&l| {
            let grp: Vec<&RdRow> = rows.iter().filter(|r| r.lambda == l).collect();
            let n = grp.len() as f64;
            (
                grp.iter().map(|r| r.bpp).sum::<f64>() / n,
                grp.iter().map(|r| r.d1).sum::<f64>() / n,
                grp.iter().map(|r| r.d2).sum::<f64>() / n,
            )
        })
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

pub fn eval(anchor: &Path, test: &Path) -> Result<()> {
    let a = rd_points(&parse_rd_csv(anchor)?);
    let t = rd_points(&parse_rd_csv(test)?);
    let take = |pts: &[(f64, f64, f64)], d2: bool| -> Vec<(f64, f64)> {
        pts.iter()
            .map(|p| (p.0, if d2 { p.2 } else { p.1 }))
            .collect()
    };
    println!(
        "BD-rate: {:.2}%",
        bd_rate(&take(&a, false), &take(&t, false))?
    );
    println!(
        "BD-rate (D2): {:.2}%",
        bd_rate(&take(&a, true), &take(&t, true))?
    );
    Ok(())
}

pub fn bench(tables: usize, symbols: usize, seed: u64) -> Result<()> {
    if tables == 0 || symbols == 0 {
        return Err(Error::Config("tables and symbols must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let mut coded = 0usize;
    for t in 0..tables {
        let min_v: i32 = rng.gen_range(-64..=0);
        let span: usize = rng.gen_range(2..=257);
        let max_v = min_v + span as i32 - 1;
        // One extra mass: the table's trailing escape slot for values
        // beyond max_v. The bench only draws in-range symbols.
        let masses: Vec<f64> = (0..=span).map(|_| rng.gen_range(0.01..1.0)).collect();
        let table = CdfTable::from_masses(min_v, max_v, &masses)?;
        let syms: Vec<i64> = (0..symbols)
            .map(|_| rng.gen_range(min_v..=max_v) as i64)
            .collect();
        let mut enc = RangeEncoder::new();
        for &s in &syms {
            table.encode_value(&mut enc, s);
        }
        let buf = enc.finish();
        coded += buf.len();
        let mut dec = RangeDecoder::new(&buf);
        for (i, &s) in syms.iter().enumerate() {
            let got = table.decode_value(&mut dec);
            if got != s {
                return Err(Error::Entropy(format!(
                    "table {t} symbol {i}: wrote {s}, read {got}"
                )));
            }
        }
    }
    let dt = start.elapsed().as_secs_f64();
    let n = (tables * symbols) as f64;
    println!(
        "{} tables x {} symbols: {:.2} s, {:.1} Msym/s round trip, {:.1} MB coded",
        tables,
        symbols,
        dt,
        n / dt / 1e6,
        coded as f64 / 1e6
    );
    Ok(())
}

pub fn flowviz(
    input: &Path,
    model_path: &Path,
    frame: usize,
    stage: &str,
    out: &Path,
) -> Result<()> {
    let bytes = fs::read(input)?;
    let seq = SequenceBitstream::parse(&bytes)?;
    let model = CodecModel::load(model_path)?;
    if frame >= seq.frames.len() {
        return Err(Error::Config(format!(
            "frame {frame} out of range, stream has {} frames",
            seq.frames.len()
        )));
    }
    if seq.frames[frame].frame_type != FrameType::Inter {
        return Err(Error::Config(format!(
            "frame {frame} is intra coded and carries no motion field"
        )));
    }
    // Decode the prefix to recover this frame's reference; the truncated
    // stream keeps the header so the model hash is still enforced.
    let prefix = SequenceBitstream {
        bit_depth: seq.bit_depth,
        config_hash: seq.config_hash,
        frames: seq.frames[..frame].to_vec(),
    };
    let decoded = model.decode_sequence(&prefix)?;
    let prev = decoded
        .last()
        .ok_or_else(|| Error::Bitstream("sequence opens with an inter frame".into()))?;
    let full = model.decode_p_frame_full(&seq.frames[frame], prev)?;
    let field = match stage {
        "low" => &full.flow_low,
        "high" => &full.flow_high,
        other => {
            return Err(Error::Config(format!(
                "stage {other:?}, expected low or high"
            )))
        }
    };
    write_flow_ply(out, field)?;
    println!(
        "wrote {} motion vectors to {}",
        field.coords.len(),
        out.display()
    );
    Ok(())
}

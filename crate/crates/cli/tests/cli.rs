//! Drives the built binary end to end: every subcommand, the exit-code
//! contract, and determinism of the artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_hbmx"))
        .args(args)
        .output()
        .expect("binary runs");
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn ok(args: &[&str]) -> String {
    let (code, stdout, stderr) = run(args);
    assert_eq!(code, 0, "hbmx {args:?} failed:\n{stdout}{stderr}");
    stdout
}

/// Reduced plan on a 6-bit grid; trains in about a second.
fn write_recipe(dir: &Path, seed: u64, weights: &Path) -> PathBuf {
    let path = dir.join(format!("recipe-{seed}.toml"));
    let text = format!(
        r#"
[model]
bit_depth = 6
stem_ch = 8
mid_ch = 12
feat_ch = 16
flow_latent_ch = 4
res_latent_ch = 4
occ_hidden_ch = 8
occ_latent_ch = 4
k = 8
seed = {seed}

[train]
lambda = 10.0
epochs = 1

[data]
kind = "rigid-translate"
frames = 3
points = 300
seed = 7

[out]
weights = {weights:?}
"#
    );
    fs::write(&path, text).unwrap();
    path
}

/// Synthesizes frames and trains a small model inside `dir`.
fn fixture(dir: &Path, seed: u64) -> (PathBuf, PathBuf) {
    let frames = dir.join("frames");
    ok(&[
        "synth",
        "--kind",
        "rigid-translate",
        "--frames",
        "3",
        "--points",
        "300",
        "--bit-depth",
        "6",
        "--seed",
        "7",
        "--out",
        frames.to_str().unwrap(),
    ]);
    let weights = dir.join(format!("model-{seed}.hwts"));
    let recipe = write_recipe(dir, seed, &weights);
    ok(&["train", "--config", recipe.to_str().unwrap()]);
    (frames, weights)
}

#[test]
fn help_lists_every_subcommand() {
    let stdout = ok(&["--help"]);
    for sub in ["synth", "train", "encode", "decode", "eval", "bench", "flowviz"] {
        assert!(stdout.contains(sub), "help is missing {sub}:\n{stdout}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let (code, _, stderr) = run(&["decode", "--bogus"]);
    assert_eq!(code, 1, "{stderr}");
    let (code, _, _) = run(&["synth", "--kind", "rigid-translate"]); // no --out
    assert_eq!(code, 1);
    let (code, _, stderr) = run(&[
        "synth",
        "--kind",
        "no-such-motion",
        "--out",
        "/tmp/unused-by-cli-test",
    ]);
    assert_eq!(code, 1);
    assert!(stderr.contains("no-such-motion"), "{stderr}");
}

#[test]
fn synth_writes_identical_sequences_for_identical_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let args = |out: &Path, seed: &str| {
        vec![
            "synth".into(),
            "--kind".into(),
            "breathing-sphere".into(),
            "--frames".into(),
            "2".into(),
            "--points".into(),
            "200".into(),
            "--bit-depth".into(),
            "6".into(),
            "--seed".into(),
            seed.to_string(),
            "--out".into(),
            out.to_str().unwrap().to_string(),
        ]
    };
    for (dir, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        let out = tmp.path().join(dir);
        let argv = args(&out, seed);
        let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
        ok(&argv);
    }
    let read = |d: &str, k: usize| fs::read(tmp.path().join(d).join(format!("frame-{k:04}.ply"))).unwrap();
    for k in 0..2 {
        assert_eq!(read("a", k), read("b", k), "same seed, frame {k}");
    }
    assert_ne!(read("a", 0), read("c", 0), "different seed");
}

#[test]
fn pipeline_round_trips_from_shell() {
    let tmp = tempfile::tempdir().unwrap();
    let (frames, model) = fixture(tmp.path(), 1);
    let stream = tmp.path().join("seq.bin");
    let csv = tmp.path().join("rd.csv");

    let stdout = ok(&[
        "encode",
        "--input",
        frames.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--gop",
        "0",
        "--out",
        stream.to_str().unwrap(),
        "--lambda",
        "10",
        "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(stdout.starts_with("lambda,frame,bpp"), "{stdout}");
    assert_eq!(stdout.lines().count(), 4, "header + one row per frame");
    assert_eq!(fs::read_to_string(&csv).unwrap(), stdout);
    assert!(stream.metadata().unwrap().len() > 0);

    let dec = tmp.path().join("dec");
    let stdout = ok(&[
        "decode",
        "--input",
        stream.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out",
        dec.to_str().unwrap(),
        "--verify",
    ]);
    assert!(stdout.contains("decoded 3 frames"), "{stdout}");
    assert!(stdout.lines().any(|l| l == "OK"), "{stdout}");
    for k in 0..3 {
        assert!(dec.join(format!("frame-{k:04}.ply")).exists());
    }

    let flow = tmp.path().join("flow.ply");
    let stdout = ok(&[
        "flowviz",
        "--input",
        stream.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--frame",
        "1",
        "--stage",
        "high",
        "--out",
        flow.to_str().unwrap(),
    ]);
    assert!(stdout.contains("motion vectors"), "{stdout}");
    let header = fs::read_to_string(&flow).unwrap();
    for prop in ["red", "green", "blue"] {
        assert!(header.contains(prop), "{header}");
    }

    // Frame 0 is intra: no motion field to visualize.
    let (code, _, stderr) = run(&[
        "flowviz",
        "--input",
        stream.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--frame",
        "0",
        "--out",
        flow.to_str().unwrap(),
    ]);
    assert_eq!(code, 1, "{stderr}");
    assert!(stderr.contains("intra"), "{stderr}");
}

#[test]
fn failure_classes_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let (frames, model) = fixture(tmp.path(), 1);
    let stream = tmp.path().join("seq.bin");
    ok(&[
        "encode",
        "--input",
        frames.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out",
        stream.to_str().unwrap(),
    ]);
    let dec = tmp.path().join("dec");

    // Missing input file: I/O.
    let (code, _, _) = run(&[
        "decode",
        "--input",
        tmp.path().join("absent.bin").to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out",
        dec.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);

    // Same plan, different weights: the stream names a model we don't have.
    let other = {
        let weights = tmp.path().join("model-2.hwts");
        let recipe = write_recipe(tmp.path(), 2, &weights);
        ok(&["train", "--config", recipe.to_str().unwrap()]);
        weights
    };
    let (code, _, stderr) = run(&[
        "decode",
        "--input",
        stream.to_str().unwrap(),
        "--model",
        other.to_str().unwrap(),
        "--out",
        dec.to_str().unwrap(),
    ]);
    assert_eq!(code, 3, "{stderr}");

    // Flipped payload byte: checksum or parse failure.
    let mut bytes = fs::read(&stream).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    let corrupt = tmp.path().join("corrupt.bin");
    fs::write(&corrupt, &bytes).unwrap();
    let (code, _, stderr) = run(&[
        "decode",
        "--input",
        corrupt.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out",
        dec.to_str().unwrap(),
    ]);
    assert_eq!(code, 4, "{stderr}");
}

#[test]
fn eval_reports_bd_rate_between_csv_files() {
    let tmp = tempfile::tempdir().unwrap();
    let header = "lambda,frame,bpp,bpp_flow_low,bpp_flow_high,bpp_residual,bpp_coords,d1_psnr,d2_psnr";
    let rows = [
        (5.0, 1.0, 60.0, 62.0),
        (10.0, 2.0, 63.0, 65.0),
        (15.0, 4.0, 66.0, 68.0),
        (20.0, 8.0, 69.0, 71.0),
    ];
    let csv = |scale: f64| {
        let mut s = format!("{header}\n");
        for (lambda, bpp, d1, d2) in rows {
            s.push_str(&format!(
                "{lambda},0,{},0,0,0,0,{d1},{d2}\n",
                bpp * scale
            ));
        }
        s
    };
    let a = tmp.path().join("a.csv");
    let b = tmp.path().join("b.csv");
    fs::write(&a, csv(1.0)).unwrap();
    fs::write(&b, csv(0.5)).unwrap();

    let stdout = ok(&["eval", "--anchor", a.to_str().unwrap(), "--test", a.to_str().unwrap()]);
    assert!(stdout.contains("BD-rate: 0.00%"), "{stdout}");
    assert!(stdout.contains("BD-rate (D2): 0.00%"), "{stdout}");

    let stdout = ok(&["eval", "--anchor", a.to_str().unwrap(), "--test", b.to_str().unwrap()]);
    assert!(stdout.contains("BD-rate: -50.00%"), "{stdout}");

    let bad = tmp.path().join("bad.csv");
    fs::write(&bad, "rate,psnr\n1,60\n").unwrap();
    let (code, _, stderr) = run(&["eval", "--anchor", bad.to_str().unwrap(), "--test", a.to_str().unwrap()]);
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("first line"), "{stderr}");
}

#[test]
fn bench_round_trips_random_tables() {
    let stdout = ok(&["bench", "--tables", "2", "--symbols", "5000"]);
    assert!(stdout.contains("Msym/s"), "{stdout}");
}

#[test]
fn train_rejects_unknown_recipe_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let weights = tmp.path().join("w.hwts");
    let recipe = write_recipe(tmp.path(), 1, &weights);
    let mut text = fs::read_to_string(&recipe).unwrap();
    text = text.replace("[train]", "[train]\nmomentum = 0.9");
    fs::write(&recipe, &text).unwrap();
    let (code, _, stderr) = run(&["train", "--config", recipe.to_str().unwrap()]);
    assert_eq!(code, 1, "{stderr}");
    assert!(stderr.contains("momentum"), "{stderr}");
    assert!(!weights.exists(), "rejected recipe must not train");
}

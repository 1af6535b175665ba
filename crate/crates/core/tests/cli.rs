use std::path::Path;
use std::process::{Command, Output};

use maskcodec::tokens::TokenGrid;
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maskcodec")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {key} in {line:?}"))
}

fn write_grid(dir: &Path, name: &str, h: usize, w: usize, v: usize) -> String {
    let t = (0..h * w).map(|i| ((i / 3) % v) as u32).collect();
    let p = dir.join(name);
    std::fs::write(&p, TokenGrid::new(h, w, v, t).unwrap().to_text()).unwrap();
    p.to_str().unwrap().to_owned()
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_owned()
}

#[test]
fn schedule_prints_cumulative_counts() {
    let o = run(&["schedule", "--schedule", "quincunx", "--h", "8", "--w", "8"]);
    assert!(o.status.success());
    assert_eq!(field(&stdout(&o), "cumulative"), "4,8,16,32,64");
    let o = run(&["schedule", "--schedule", "qlds:2.2:5", "--h", "8", "--w", "8", "--show"]);
    assert_eq!(field(stdout(&o).lines().last().unwrap(), "cumulative"), "2,9,21,40,64");
    assert_eq!(stdout(&o).lines().count(), 9);
}

#[test]
fn encode_decode_round_trip() {
    let dir = TempDir::new().unwrap();
    let grid = write_grid(dir.path(), "g.txt", 8, 8, 16);
    let (stream, back) = (path(&dir, "g.pcv2"), path(&dir, "back.txt"));
    let o = run(&["encode", &grid, "-o", &stream, "--schedule", "quincunx", "--model", "counting"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&stdout(&o), "groups"), "5/5");
    let o = run(&["decode", &stream, "-o", &back, "--model", "counting"]);
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(&back).unwrap(), std::fs::read_to_string(&grid).unwrap());

    // the uniform model did not code this stream
    let o = run(&["decode", &stream, "-o", &back, "--model", "uniform"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn uniform_stream_matches_the_rate_formula() {
    let dir = TempDir::new().unwrap();
    let grid = write_grid(dir.path(), "g.txt", 8, 8, 128);
    let o = run(&["encode", &grid, "-o", &path(&dir, "u.pcv2")]);
    let line = stdout(&o);
    let bits: u64 = field(&line, "payload_bits").parse().unwrap();
    assert!((448..=480).contains(&bits), "{bits}");
    // the header and flush bytes make the stream a little worse than uniform
    assert!(field(&line, "savings_pct").parse::<f64>().unwrap() <= 0.0);
}

#[test]
fn hybrid_prefixes_and_full_decode() {
    let dir = TempDir::new().unwrap();
    let grid = write_grid(dir.path(), "g.txt", 8, 8, 16);
    let out = path(&dir, "h.txt");
    let mut last = 0u64;
    for k in 1..=5 {
        let o = run(&["hybrid", &grid, "-o", &out, "--schedule", "quincunx", "--model", "counting", "--groups", &k.to_string()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        let bits: u64 = field(&stdout(&o), "payload_bits").parse().unwrap();
        assert!(bits > last || k == 1);
        last = bits;
    }
    assert_eq!(std::fs::read_to_string(&out).unwrap(), std::fs::read_to_string(&grid).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let grid = write_grid(dir.path(), "g.txt", 8, 8, 16);
    let stream = path(&dir, "g.pcv2");
    let o = run(&["encode", &grid, "-o", &stream, "--model", "no/such/model.ckpt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no/such/model.ckpt"));
    assert_eq!(run(&["encode", &grid, "-o", &stream, "--schedule", "spiral"]).status.code(), Some(2));
    assert_eq!(run(&["encode", &grid, "-o", &stream, "--groups", "9", "--schedule", "quincunx"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn corrupted_stream_exits_1() {
    let dir = TempDir::new().unwrap();
    let grid = write_grid(dir.path(), "g.txt", 8, 8, 16);
    let stream = path(&dir, "g.pcv2");
    assert!(run(&["encode", &grid, "-o", &stream]).status.success());
    let bytes = std::fs::read(&stream).unwrap();
    std::fs::write(&stream, &bytes[..bytes.len() - 2]).unwrap();
    let o = run(&["decode", &stream, "-o", &path(&dir, "x.txt")]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn trained_checkpoint_codes_tokens() {
    let dir = TempDir::new().unwrap();
    let ck = path(&dir, "mim.ckpt");
    let o = run(&["train-mim", "--corpus", "markov:v=16,p=0.9,h=8,w=8,n=32", "-o", &ck, "--steps", "20"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let grid = write_grid(dir.path(), "g.txt", 8, 8, 16);
    let (stream, back) = (path(&dir, "g.pcv2"), path(&dir, "b.txt"));
    assert!(run(&["encode", &grid, "-o", &stream, "--model", &ck, "--schedule", "qlds:2.2:5"]).status.success());
    assert!(run(&["decode", &stream, "-o", &back, "--model", &ck]).status.success());
    assert_eq!(std::fs::read_to_string(&back).unwrap(), std::fs::read_to_string(&grid).unwrap());

    // a model trained for another vocabulary is refused
    let other = write_grid(dir.path(), "o.txt", 8, 8, 32);
    assert_eq!(run(&["encode", &other, "-o", &stream, "--model", &ck]).status.code(), Some(2));
}

#[test]
fn small_bench_writes_a_report() {
    let dir = TempDir::new().unwrap();
    let csv = path(&dir, "t3.csv");
    let o = run(&[
        "bench",
        "--corpus",
        "markov:v=16,p=0.9,h=8,w=8,train=32,test=8",
        "--steps",
        "10",
        "--var-steps",
        "0",
        "--out",
        &csv,
        "--assert-ordering",
        "counting>uniform",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("model,schedule,tokens,bpp,savings_pct,header_bits\n"));
    assert_eq!(text.lines().count(), 1 + 6);
    let o = run(&["bench", "--corpus", "markov:v=16,p=0.9,h=8,w=8,train=32,test=8", "--steps", "1", "--var-steps", "0", "--assert-ordering", "uniform>counting"]);
    assert_eq!(o.status.code(), Some(1));
}

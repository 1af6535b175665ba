//! Checks shared by the acceptance runner and the topic test files. Each
//! returns a one-line detail on success and the reason on failure.
#![allow(dead_code, clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

use std::path::PathBuf;
use std::time::Instant;

use maskcodec::coder::bitstream::{Bitstream, Header, Layout};
use maskcodec::coder::{decode_grid, encode_grid, encode_prefix, hybrid_decode, rate_uniform, savings_percent};
use maskcodec::flowlab::*;
use maskcodec::harness::{run_bench, BenchConfig};
use maskcodec::multiscale::decode_stack;
use maskcodec::probmodel::checkpoint::Checkpoint;
use maskcodec::probmodel::nn::Layout as ParamLayout;
use maskcodec::probmodel::{
    drive, model_rate, CountingModel, EntropyModel, MimConfig, MimModel, TrainConfig, UniformModel, VarConfig, VarModel,
};
use maskcodec::schedules::{MaskSchedule, ScheduleKind};
use maskcodec::tokens::TokenGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

pub fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, v: usize) -> TokenGrid {
    TokenGrid::new(h, w, v, (0..h * w).map(|_| rng.random_range(0..v as u32)).collect()).unwrap()
}

/// Grid with runs copied from the left neighbour, so context models see
/// some structure.
pub fn runny_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, v: usize) -> TokenGrid {
    let mut t: Vec<u32> = Vec::with_capacity(h * w);
    for p in 0..h * w {
        let sym = if p > 0 && rng.random::<f64>() < 0.6 { t[p - 1] } else { rng.random_range(0..v as u32) };
        t.push(sym);
    }
    TokenGrid::new(h, w, v, t).unwrap()
}

fn jitter(params: &mut [f64], rng: &mut ChaCha8Rng, scale: f64) {
    for p in params {
        *p += scale * (rng.random::<f64>() - 0.5);
    }
}

// ---- schedules ----

pub fn schedule_goldens() -> Check {
    let cases: [(&str, ScheduleKind, &[usize]); 4] = [
        ("checkerboard", ScheduleKind::Checkerboard, &[32, 64]),
        ("quincunx", ScheduleKind::Quincunx, &[4, 8, 16, 32, 64]),
        ("qlds(2.2,5)", ScheduleKind::Qlds { alpha: 2.2, steps: 5 }, &[2, 9, 21, 40, 64]),
        ("ivar(2,4,6,8)", ScheduleKind::ImplicitVar { scales: vec![(2, 2), (4, 4), (6, 6), (8, 8)] }, &[4, 16, 36, 64]),
    ];
    for (name, kind, want) in cases {
        let got = MaskSchedule::build(&kind, 8, 8).map_err(e)?.cumulative_counts();
        ensure!(got == want, "{name}: cumulative {got:?}, expected {want:?}");
    }
    Ok("all four 8x8 schedules match".into())
}

// ---- lossless coding ----

pub const FUZZ_SIDES: [usize; 3] = [4, 8, 12];

pub fn random_scales(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ScheduleKind {
    loop {
        let n = rng.random_range(0..4);
        let mut scales: Vec<(u16, u16)> = (0..n).map(|_| (rng.random_range(1..=h) as u16, rng.random_range(1..=w) as u16)).collect();
        scales.sort_unstable();
        scales.push((h as u16, w as u16));
        scales.dedup();
        let kind = ScheduleKind::ImplicitVar { scales };
        if MaskSchedule::build(&kind, h, w).is_ok() {
            return kind;
        }
    }
}

pub fn random_schedule(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ScheduleKind {
    let choice = if h.is_multiple_of(4) && w.is_multiple_of(4) { rng.random_range(0..4) } else { [0, 2, 3][rng.random_range(0..3)] };
    match choice {
        0 => ScheduleKind::Checkerboard,
        1 => ScheduleKind::Quincunx,
        2 => ScheduleKind::Qlds { alpha: rng.random_range(0.5..4.0), steps: rng.random_range(1..=16) },
        _ => random_scales(rng, h, w),
    }
}

/// Encodes, serializes, parses and decodes; checks the payload against the
/// model cross-entropy.
fn round_trip(grid: &TokenGrid, kind: &ScheduleKind, model: &dyn EntropyModel, label: &str) -> Result<f64, String> {
    let sched = MaskSchedule::build(kind, grid.h(), grid.w()).map_err(e)?;
    let bs = encode_grid(grid, &sched, model).map_err(e)?;
    let parsed = Bitstream::from_bytes(&bs.to_bytes()).map_err(e)?;
    let back = decode_grid(&parsed, model).map_err(|err| format!("{label} {kind}: {err}"))?;
    ensure!(&back == grid, "{label} {kind}: decoded a different grid");
    let ce = model_rate(model, grid, &sched).map_err(e)?.total();
    let bits = bs.payload_bits() as f64;
    ensure!(bits >= ce && bits <= ce + 32.0, "{label} {kind} {}x{}: payload {bits} bits vs cross-entropy {ce:.2}", grid.h(), grid.w());
    Ok(bits - ce)
}

pub fn fuzz_round_trips(trials: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mims = Vec::new();
    for &h in &FUZZ_SIDES[..2] {
        for &w in &FUZZ_SIDES[..2] {
            let cfg = MimConfig { vocab: 16, h, w, d_model: 16, layers: 1, heads: 2, ffn: 32 };
            let mut m = MimModel::new(cfg, (h * 31 + w) as u64).map_err(e)?;
            jitter(m.params_mut(), &mut rng, 0.6);
            mims.push(m);
        }
    }
    let mut worst_overhead: f64 = 0.0;
    for trial in 0..trials {
        let overhead = match trial % 5 {
            which @ 0..=2 => {
                let (h, w) = (FUZZ_SIDES[rng.random_range(0..3)], FUZZ_SIDES[rng.random_range(0..3)]);
                let v = rng.random_range(2..=64);
                let grid = runny_grid(&mut rng, h, w, v);
                let kind = random_schedule(&mut rng, h, w);
                match which {
                    0 => round_trip(&grid, &kind, &UniformModel::new(v).map_err(e)?, "uniform")?,
                    1 => round_trip(&grid, &kind, &CountingModel::new(v).map_err(e)?, "counting")?,
                    _ => {
                        let corpus: Vec<TokenGrid> = (0..3).map(|_| runny_grid(&mut rng, h, w, v)).collect();
                        round_trip(&grid, &kind, &CountingModel::primed(v, &corpus).map_err(e)?, "primed counting")?
                    }
                }
            }
            3 => {
                let m = &mims[rng.random_range(0..mims.len())];
                let (h, w) = (m.config().h, m.config().w);
                let grid = runny_grid(&mut rng, h, w, 16);
                let kind = random_schedule(&mut rng, h, w);
                round_trip(&grid, &kind, m, "mim")?
            }
            _ => {
                let (h, w) = (FUZZ_SIDES[rng.random_range(0..2)], FUZZ_SIDES[rng.random_range(0..2)]);
                let kind = random_scales(&mut rng, h, w);
                let ScheduleKind::ImplicitVar { scales } = &kind else { unreachable!() };
                let cfg = VarConfig { vocab: 8, h, w, d_model: 16, layers: 1, heads: 2, ffn: 32, max_groups: scales.len() };
                let mut m = VarModel::new(cfg, trial as u64).map_err(e)?;
                jitter(m.params_mut(), &mut rng, 0.6);
                let grid = runny_grid(&mut rng, h, w, 8);
                round_trip(&grid, &kind, &m, "var")?
            }
        };
        worst_overhead = worst_overhead.max(overhead);
    }
    Ok(format!("{trials} triples exact, worst payload overhead {worst_overhead:.1} bits"))
}

// ---- rate anchors ----

pub fn uniform_anchor() -> Check {
    let r = rate_uniform(8, 8, 128, 512, 512).map_err(e)?;
    ensure!(r == 0.001708984375, "rate_uniform = {r}");
    ensure!(format!("{r:.5}") == "0.00171", "{r} does not display as 0.00171");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0;
    for kind in [ScheduleKind::Checkerboard, ScheduleKind::Quincunx, ScheduleKind::Qlds { alpha: 2.2, steps: 5 }] {
        for _ in 0..20 {
            let grid = random_grid(&mut rng, 8, 8, 128);
            let sched = MaskSchedule::build(&kind, 8, 8).map_err(e)?;
            let bits = encode_grid(&grid, &sched, &UniformModel::new(128).map_err(e)?).map_err(e)?.payload_bits();
            ensure!((448..=480).contains(&bits), "uniform payload {bits} bits under {kind}");
            worst = worst.max(bits);
        }
    }
    Ok(format!("rate {r}, payload 448..={worst} bits"))
}

/// Printed (bpp, baseline, savings %) triples of the comparison table.
pub const PRINTED_SAVINGS: [(f64, f64, f64); 8] = [
    (0.00348, 0.00363, 4.13),
    (0.00342, 0.00363, 5.79),
    (0.00340, 0.00363, 6.34),
    (0.00340, 0.00363, 6.34),
    (0.02854, 0.03293, 13.33),
    (0.02697, 0.03293, 18.10),
    (0.02667, 0.03293, 19.01),
    (0.02616, 0.03293, 20.56),
];

pub fn savings_anchors() -> Check {
    let mut worst: f64 = 0.0;
    for (bpp, base, printed) in PRINTED_SAVINGS {
        let s = savings_percent(bpp, base).map_err(e)?;
        ensure!((s - printed).abs() <= 0.01, "{bpp} vs {base}: {s:.4}% but printed {printed}%");
        worst = worst.max((s - printed).abs());
    }
    Ok(format!("{} printed values, worst deviation {worst:.4} points", PRINTED_SAVINGS.len()))
}

// ---- desk-scale benchmark ----

pub fn desk_bench() -> Check {
    let start = Instant::now();
    let jobs = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let cfg = BenchConfig { jobs, ..BenchConfig::default() };
    let out = run_bench(&cfg).map_err(e)?;
    let secs = start.elapsed().as_secs_f64();
    println!("{}", out.report.to_table());
    let r = &out.report;
    let mut notes = Vec::new();
    for key in ["checkerboard", "quincunx", "qlds5", "qlds12"] {
        let s = r.row(key).ok_or(format!("missing row {key}"))?.savings_pct;
        ensure!(s > 0.0, "mim under {key} does not beat uniform ({s:.2}%)");
        notes.push(format!("{key} {s:.2}"));
    }
    r.check_ordering("qlds12>=qlds5>=quincunx>=checkerboard>uniform", 0.5).map_err(e)?;
    let oracle = out.oracle_savings(cfg.v);
    let counting = r.row("counting").ok_or("missing counting row")?.savings_pct;
    ensure!((counting - oracle).abs() <= 5.0, "counting savings {counting:.2}% vs oracle {oracle:.2}%");
    ensure!(secs < 900.0, "benchmark took {secs:.0}s");
    Ok(format!("{}, counting {counting:.2} vs oracle {oracle:.2}, {secs:.0}s", notes.join(", ")))
}

// ---- causality ----

/// Probability rows produced while coding `grid`, tagged with their group.
fn coding_rows(model: &dyn EntropyModel, sched: &MaskSchedule, grid: &TokenGrid) -> Vec<(usize, Vec<f64>)> {
    let mut out = Vec::new();
    drive(model, sched, sched.num_groups(), |k, pos, row| {
        out.push((k, row.to_vec()));
        Ok(grid.indices()[pos])
    })
    .unwrap();
    out
}

/// Copy of `grid` with every position in groups `>= from` changed.
fn perturb_from(grid: &TokenGrid, sched: &MaskSchedule, from: usize, rng: &mut ChaCha8Rng) -> TokenGrid {
    let mut t = grid.indices().to_vec();
    for g in &sched.groups()[from..] {
        for &p in g {
            t[p] = (t[p] + rng.random_range(1..grid.vocab() as u32)) % grid.vocab() as u32;
        }
    }
    TokenGrid::new(grid.h(), grid.w(), grid.vocab(), t).unwrap()
}

pub fn mim_causality(trials: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut m = MimModel::new(MimConfig { vocab: 12, h: 8, w: 8, d_model: 16, layers: 2, heads: 2, ffn: 32 }, 1).map_err(e)?;
    jitter(m.params_mut(), &mut rng, 0.5);
    let kinds = [
        ScheduleKind::Checkerboard,
        ScheduleKind::Quincunx,
        ScheduleKind::Qlds { alpha: 2.2, steps: 5 },
        ScheduleKind::Qlds { alpha: 1.0, steps: 12 },
        ScheduleKind::ImplicitVar { scales: vec![(2, 2), (4, 4), (8, 8)] },
    ];
    let mut violations = 0;
    for trial in 0..trials {
        let sched = MaskSchedule::build(&kinds[trial % kinds.len()], 8, 8).map_err(e)?;
        let grid = random_grid(&mut rng, 8, 8, 12);
        let from = rng.random_range(1..sched.num_groups());
        let other = perturb_from(&grid, &sched, from, &mut rng);
        let (a, b) = (coding_rows(&m, &sched, &grid), coding_rows(&m, &sched, &other));
        // group `from` itself is predicted before any of its tokens is seen
        violations += a.iter().zip(&b).filter(|(x, y)| x.0 <= from && x.1 != y.1).count();
    }
    ensure!(violations == 0, "{violations} MIM rows changed");
    Ok(format!("mim {trials} trials"))
}

pub fn var_causality(trials: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let kind = ScheduleKind::ImplicitVar { scales: vec![(1, 1), (2, 2), (4, 4), (8, 8)] };
    let sched = MaskSchedule::build(&kind, 8, 8).map_err(e)?;
    let cfg = VarConfig { vocab: 10, h: 8, w: 8, d_model: 16, layers: 2, heads: 2, ffn: 32, max_groups: 4 };
    let mut m = VarModel::new(cfg, 3).map_err(e)?;
    jitter(m.params_mut(), &mut rng, 0.5);
    let mut violations = 0;
    for _ in 0..trials {
        let grid = random_grid(&mut rng, 8, 8, 10);
        let k = rng.random_range(1..sched.num_groups());
        let other = perturb_from(&grid, &sched, k, &mut rng);
        let a = m.forward_group(&sched, grid.indices(), k).map_err(e)?;
        let b = m.forward_group(&sched, other.indices(), k).map_err(e)?;
        violations += usize::from(a != b);
        // the single teacher-forced pass used in training agrees too
        let all = m.forward_all(&sched, &other).map_err(e)?;
        for j in 0..=k {
            let alone = m.forward_group(&sched, grid.indices(), j).map_err(e)?;
            let diff = alone.rows().zip(all[j].rows()).flat_map(|((_, x), (_, y))| x.iter().zip(y).map(|(a, b)| (a - b).abs())).fold(0.0f64, f64::max);
            violations += usize::from(diff > 1e-12);
        }
    }
    ensure!(violations == 0, "{violations} VAR predictions changed");
    Ok(format!("var {trials} trials"))
}

// ---- gradients ----

const FD_EPS: f64 = 1e-5;
const PER_FAMILY: usize = 20;

/// Relative error with a floor on the denominator for near-zero gradients.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn pick(layout: &ParamLayout, tensors: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let pool: Vec<usize> = tensors.iter().flat_map(|&t| layout.get(t).range()).collect();
    if pool.len() <= PER_FAMILY {
        return pool;
    }
    rand::seq::index::sample(rng, pool.len(), PER_FAMILY).into_iter().map(|i| pool[i]).collect()
}

/// Worst relative error of `grad` against central differences of `loss`.
fn fd_check<F: FnMut(&[f64]) -> f64>(params: &[f64], grad: &[f64], indices: &[usize], mut loss: F) -> f64 {
    let mut p = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in indices {
        let orig = p[i];
        p[i] = orig + FD_EPS;
        let up = loss(&p);
        p[i] = orig - FD_EPS;
        let down = loss(&p);
        p[i] = orig;
        worst = worst.max(rel_err(grad[i], (up - down) / (2.0 * FD_EPS)));
    }
    worst
}

struct GradTally {
    worst: f64,
    families: usize,
    params: usize,
}

impl GradTally {
    fn add(&mut self, name: &str, n: usize, err: f64) -> Result<(), String> {
        ensure!(err < 1e-3, "{name}: relative error {err:e}");
        ensure!(n >= PER_FAMILY, "{name}: only {n} parameters checked");
        self.worst = self.worst.max(err);
        self.families += 1;
        self.params += n;
        Ok(())
    }
}

pub fn mim_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = MimConfig { vocab: 6, h: 4, w: 4, d_model: 24, layers: 2, heads: 2, ffn: 24 };
    let mut m = MimModel::new(cfg, 5).map_err(e)?;
    // move norms and biases off their initial constants
    jitter(m.params_mut(), &mut rng, 0.1);
    let grids: Vec<TokenGrid> = (0..2).map(|_| random_grid(&mut rng, 4, 4, 6)).collect();
    let batch: Vec<(&TokenGrid, Vec<bool>)> =
        grids.iter().map(|g| (g, (0..16).map(|_| rng.random::<f64>() < 0.5).collect())).collect();
    let (_, grad) = m.loss_and_grad(&batch).map_err(e)?;
    let base = m.params().to_vec();
    let layout = m.transformer().layout.clone();
    let mut tally = GradTally { worst: 0.0, families: 0, params: 0 };
    for (name, tensors) in m.transformer().families() {
        let idx = pick(&layout, &tensors, &mut rng);
        let mut probe = m.clone();
        let err = fd_check(&base, &grad, &idx, |p| {
            probe.params_mut().copy_from_slice(p);
            probe.loss(&batch).unwrap()
        });
        tally.add(&format!("mim/{name}"), idx.len(), err)?;
    }
    Ok(format!("mim {} families, {} params, worst {:.1e}", tally.families, tally.params, tally.worst))
}

pub fn var_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = VarConfig { vocab: 5, h: 4, w: 4, d_model: 24, layers: 2, heads: 2, ffn: 24, max_groups: 3 };
    let mut m = VarModel::new(cfg, 7).map_err(e)?;
    jitter(m.params_mut(), &mut rng, 0.1);
    let sched = MaskSchedule::build(&ScheduleKind::ImplicitVar { scales: vec![(1, 1), (2, 2), (4, 4)] }, 4, 4).map_err(e)?;
    let grids: Vec<TokenGrid> = (0..2).map(|_| random_grid(&mut rng, 4, 4, 5)).collect();
    let refs: Vec<&TokenGrid> = grids.iter().collect();
    let (_, grad) = m.loss_and_grad(&refs, &sched).map_err(e)?;
    let base = m.params().to_vec();
    let layout = m.transformer().layout.clone();
    let mut tally = GradTally { worst: 0.0, families: 0, params: 0 };
    for (name, tensors) in m.transformer().families() {
        let idx = pick(&layout, &tensors, &mut rng);
        let mut probe = m.clone();
        let err = fd_check(&base, &grad, &idx, |p| {
            probe.params_mut().copy_from_slice(p);
            probe.loss_and_grad(&refs, &sched).unwrap().0
        });
        tally.add(&format!("var/{name}"), idx.len(), err)?;
    }
    Ok(format!("var {} families, {} params, worst {:.1e}", tally.families, tally.params, tally.worst))
}

pub fn flow_gradients() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = FlowConfig { hidden: 16, drop_prob: 0.5, ..FlowConfig::default() };
    let mut m = VectorFieldModel::new(cfg.clone(), 9).map_err(e)?;
    jitter(m.params_mut(), &mut rng, 0.2);
    let batch = two_mode_dataset(12, cfg.zl_dim, 0.3, 4).map_err(e)?;
    let (_, grad) = cfm_plus_loss_grad_at(&m, m.params(), &batch, 11).map_err(e)?;
    let layout = m.layout().clone();
    let id = |n: &str| layout.find(n).ok_or(format!("no tensor {n}"));
    let families = [
        ("input_layer", vec![id("w1")?]),
        ("hidden_layer", vec![id("w2")?]),
        ("output_layer", vec![id("w3")?]),
        ("biases", vec![id("b1")?, id("b2")?, id("b3")?]),
        ("null_embedding", vec![id("null_zg")?]),
    ];
    let mut tally = GradTally { worst: 0.0, families: 0, params: 0 };
    for (name, tensors) in families {
        let idx = pick(&layout, &tensors, &mut rng);
        ensure!(idx.iter().any(|&i| grad[i] != 0.0), "flow/{name} received no gradient");
        let err = fd_check(m.params(), &grad, &idx, |p| cfm_plus_loss_grad_at(&m, p, &batch, 11).unwrap().0);
        if idx.len() < PER_FAMILY {
            // the null embedding is smaller than the quota: all of it is checked
            ensure!(err < 1e-3, "flow/{name}: relative error {err:e}");
            tally.worst = tally.worst.max(err);
            tally.params += idx.len();
            continue;
        }
        tally.add(&format!("flow/{name}"), idx.len(), err)?;
    }
    Ok(format!("flow {} params, worst {:.1e}", tally.params, tally.worst))
}

// ---- flow identities ----

pub fn path_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    let (mut d_worst, mut c_worst): (f64, f64) = (0.0, 0.0);
    for _ in 0..2000 {
        let sigma = [0.0, 1e-5, 0.01, 0.3][rng.random_range(0..4)];
        let (x0, x1) = (normal_vec(&mut rng, 3), normal_vec(&mut rng, 3));
        let t = rng.random_range(h..0.99);
        let a = cond_flow(&x0, &x1, t + h, sigma).map_err(e)?;
        let b = cond_flow(&x0, &x1, t - h, sigma).map_err(e)?;
        let u = target_field(&cond_flow(&x0, &x1, t, sigma).map_err(e)?, &x1, t, sigma).map_err(e)?;
        let u0 = target_field(&x0, &x1, 0.0, sigma).map_err(e)?;
        for i in 0..3 {
            d_worst = d_worst.max(((a[i] - b[i]) / (2.0 * h) - u[i]).abs());
            c_worst = c_worst.max((u[i] - u0[i]).abs());
        }
    }
    ensure!(d_worst < 1e-6, "path derivative error {d_worst:e}");
    ensure!(c_worst < 1e-9, "field drifts along the path by {c_worst:e}");
    Ok(format!("d/dt err {d_worst:.1e}, drift {c_worst:.1e}"))
}

pub fn guidance_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let scale = 10f64.powi(rng.random_range(-6..7));
        let u: Vec<f64> = normal_vec(&mut rng, 5).iter().map(|v| v * scale).collect();
        let c: Vec<f64> = normal_vec(&mut rng, 5).iter().map(|v| v * scale).collect();
        let lambda = rng.random_range(0.0..8.0);
        ensure!(cfg_combine(&u, &c, 1.0).map_err(e)? == c, "lambda=1 is not the conditional field");
        ensure!(cfg_combine(&u, &c, 0.0).map_err(e)? == u, "lambda=0 is not the unconditional field");
        ensure!(cfg_combine(&u, &u, lambda).map_err(e)? == u, "combining equal fields changed them");
    }
    ensure!(cfg_combine(&[1.0, 0.0], &[0.0, 1.0], 3.0).map_err(e)? == vec![-2.0, 3.0], "lambda=3 example");
    Ok("exact".into())
}

fn euler_error(target: &GaussianTarget, starts: &[Vec<f64>], steps: usize) -> f64 {
    starts
        .iter()
        .map(|x0| {
            let x = ode_integrate(target, x0.clone(), &[], None, steps, 1.0).unwrap();
            let want = target.exact_endpoint(x0);
            x.iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
        })
        .sum::<f64>()
        / starts.len() as f64
}

pub fn euler_order() -> Check {
    let target = GaussianTarget { mu: vec![1.5, -0.5], s: 0.4, sigma_min: 1e-5 };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let starts: Vec<Vec<f64>> = (0..64).map(|_| normal_vec(&mut rng, 2)).collect();
    let mut ratios = Vec::new();
    for n in [10, 20, 40] {
        let ratio = euler_error(&target, &starts, n) / euler_error(&target, &starts, 2 * n);
        ensure!((1.7..=2.3).contains(&ratio), "error ratio {ratio:.3} from {n} to {} steps", 2 * n);
        ratios.push(format!("{ratio:.2}"));
    }
    Ok(format!("ratios {}", ratios.join("/")))
}

pub fn flow_train_config(steps: usize) -> TrainConfig {
    TrainConfig { lr: 2e-3, steps, batch_size: 64, seed: 0, ..TrainConfig::default() }
}

pub fn toy_decoder_modes() -> Check {
    let cfg = FlowConfig::default();
    let data = two_mode_dataset(2048, cfg.zl_dim, 0.3, 6).map_err(e)?;
    let (model, _) = train_toy_decoder(&data, &cfg, &flow_train_config(3000)).map_err(e)?;
    let n = 1000;
    let mut hits = 0;
    let mut uncond = [0usize; 2];
    for (i, s) in data.iter().take(n).enumerate() {
        let want = usize::from(s.z_g[1] == 1.0);
        let x = ode_sample(&model, &s.z_l, Some(&s.z_g), cfg.steps, 1.0, i as u64).map_err(e)?;
        hits += usize::from(mode_of(&x) == want);
        let y = ode_sample(&model, &s.z_l, None, cfg.steps, 1.0, (n + i) as u64).map_err(e)?;
        uncond[mode_of(&y)] += 1;
    }
    let acc = hits as f64 / n as f64;
    ensure!(acc >= 0.95, "mode accuracy {acc:.3}");
    ensure!(uncond.iter().all(|&c| c * 5 >= n), "without z_g the modes split {uncond:?}");
    Ok(format!("mode accuracy {acc:.3}, unconditional split {}/{}", uncond[0], uncond[1]))
}

pub fn toy_decoder_point() -> Check {
    let cfg = FlowConfig::default();
    let point = [0.7, -1.2];
    let data: Vec<FlowSample> = two_mode_dataset(256, cfg.zl_dim, 0.0, 5)
        .map_err(e)?
        .into_iter()
        .map(|s| FlowSample { x1: point.to_vec(), ..s })
        .collect();
    let (model, _) = train_toy_decoder(&data, &cfg, &flow_train_config(2000)).map_err(e)?;
    let n = 200;
    let mut total = 0.0;
    for i in 0..n {
        let s = &data[i % data.len()];
        let x = ode_sample(&model, &s.z_l, Some(&s.z_g), cfg.steps, 1.0, i as u64).map_err(e)?;
        total += ((x[0] - point[0]).powi(2) + (x[1] - point[1]).powi(2)).sqrt();
    }
    let err = total / n as f64;
    ensure!(err < 0.05, "mean distance to the target point {err:.4}");
    Ok(format!("point error {err:.4}"))
}

// ---- hybrid coding ----

pub fn hybrid_monotone() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let kinds = [
        ScheduleKind::Checkerboard,
        ScheduleKind::Quincunx,
        ScheduleKind::Qlds { alpha: 2.2, steps: 5 },
        ScheduleKind::Qlds { alpha: 2.2, steps: 12 },
        ScheduleKind::ImplicitVar { scales: vec![(4, 4), (8, 8), (12, 12), (16, 16)] },
    ];
    let models: [(&str, Box<dyn EntropyModel>); 2] =
        [("uniform", Box::new(UniformModel::new(64).map_err(e)?)), ("counting", Box::new(CountingModel::new(64).map_err(e)?))];
    let mut cases = 0;
    for (name, model) in &models {
        for kind in &kinds {
            let grid = runny_grid(&mut rng, 16, 16, 64);
            let sched = MaskSchedule::build(kind, 16, 16).map_err(e)?;
            let k_total = sched.num_groups();
            let mut last = -1.0;
            for k in 1..=k_total {
                let bs = encode_prefix(&grid, &sched, model.as_ref(), k, 77).map_err(e)?;
                let bpp = bs.bpp(512, 512);
                ensure!(bpp > last, "{name} {kind}: bpp {bpp} at k={k} not above {last}");
                last = bpp;
                let out = hybrid_decode(&bs, model.as_ref(), 77).map_err(e)?;
                let prefix: Vec<usize> = sched.groups()[..k].iter().flatten().copied().collect();
                ensure!(prefix.iter().all(|&p| out.indices()[p] == grid.indices()[p]), "{name} {kind}: transmitted prefix altered at k={k}");
                if k == k_total {
                    let lossless = decode_grid(&bs, model.as_ref()).map_err(e)?;
                    ensure!(out == lossless && out == grid, "{name} {kind}: k=K hybrid output differs from lossless decode");
                }
            }
            cases += 1;
        }
    }
    Ok(format!("{cases} grid/model/schedule cases strictly increasing"))
}

// ---- golden fixtures ----

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// How a fixture stream is decoded.
pub enum FixtureModel {
    Uniform,
    Counting,
    Primed,
    Stack,
}

impl FixtureModel {
    pub fn of(name: &str) -> Option<Self> {
        match name.split('_').next()? {
            "uniform" => Some(Self::Uniform),
            "counting" | "hybrid" => Some(Self::Counting),
            "primed" => Some(Self::Primed),
            "stack" => Some(Self::Stack),
            _ => None,
        }
    }

    pub fn model(&self, v: usize) -> Result<Box<dyn EntropyModel>, String> {
        Ok(match self {
            Self::Uniform | Self::Stack => Box::new(UniformModel::new(v).map_err(e)?),
            Self::Counting => Box::new(CountingModel::new(v).map_err(e)?),
            Self::Primed => {
                let ck = Checkpoint::load(&fixture_dir().join("primed.ckpt")).map_err(e)?;
                Box::new(CountingModel::from_checkpoint(&ck).map_err(e)?)
            }
        })
    }
}

/// Decodes one fixture stream to its token text.
pub fn decode_fixture(name: &str, bytes: &[u8]) -> Result<String, String> {
    let bs = Bitstream::from_bytes(bytes).map_err(e)?;
    let kind = FixtureModel::of(name).ok_or(format!("unknown fixture family {name}"))?;
    if let FixtureModel::Stack = kind {
        let stack = decode_stack(&bs).map_err(e)?;
        return Ok(stack.maps().iter().map(|m| m.to_text()).collect());
    }
    let model = kind.model(bs.header.v as usize)?;
    let grid = if name.starts_with("hybrid") {
        hybrid_decode(&bs, model.as_ref(), bs.header.sample_seed).map_err(e)?
    } else {
        decode_grid(&bs, model.as_ref()).map_err(e)?
    };
    Ok(grid.to_text())
}

pub fn golden_fixtures() -> Check {
    let dir = fixture_dir();
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|err| format!("{}: {err}", dir.display()))?
        .filter_map(|d| d.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".pcv2"))
        .collect();
    names.sort();
    ensure!(names.len() >= 5, "only {} fixtures in {}", names.len(), dir.display());
    for name in &names {
        let bytes = std::fs::read(dir.join(name)).map_err(e)?;
        let want = std::fs::read_to_string(dir.join(name.replace(".pcv2", ".txt"))).map_err(e)?;
        let got = decode_fixture(name, &bytes)?;
        ensure!(got == want, "{name}: decoded tokens differ from the committed ones");

        let bs = Bitstream::from_bytes(&bytes).map_err(e)?;
        ensure!(bs.to_bytes() == bytes, "{name}: stream does not re-serialize byte-exactly");
        let mut header = Vec::new();
        bs.header.write_to(&mut header).map_err(e)?;
        ensure!(header == bytes[..bs.header.byte_len()], "{name}: header bytes changed");
        let again = Header::read_from(header.as_slice()).map_err(e)?;
        ensure!(again == bs.header, "{name}: header did not round-trip");
        if let Layout::Schedule(kind) = &bs.header.layout {
            // the encoder reproduces the committed bytes from the decoded tokens
            let model = FixtureModel::of(name).unwrap().model(bs.header.v as usize)?;
            let grid = TokenGrid::from_text(&want).map_err(e)?;
            let sched = MaskSchedule::build(kind, grid.h(), grid.w()).map_err(e)?;
            let again = encode_prefix(&grid, &sched, model.as_ref(), bs.header.groups_transmitted as usize, bs.header.sample_seed).map_err(e)?;
            ensure!(again.to_bytes() == bytes, "{name}: re-encoding changed the stream");
        }
    }
    Ok(format!("{} fixtures decode and re-encode byte-exactly", names.len()))
}

//! Synthetic token sources, entropy oracles and the rate comparison report.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::coder::{decode_grid, encode_with_rate, rate_uniform, savings_percent};
use crate::error::{Error, Result};
use crate::probmodel::{CountingModel, EntropyModel, MimConfig, MimModel, TrainConfig, UniformModel, VarConfig, VarModel};
use crate::schedules::{MaskSchedule, ScheduleKind};
use crate::tokens::TokenGrid;

/// Raster-order source: each cell copies one of its already generated
/// neighbours (left, up) with probability `p`, else draws uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    pub v: usize,
    pub p: f64,
    /// Relative weights of the left and upper neighbour.
    pub weights: [f64; 2],
    pub seed: u64,
}

impl MarkovSource {
    pub fn new(v: usize, p: f64, seed: u64) -> Result<Self> {
        let s = Self { v, p, weights: [1.0, 1.0], seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.v < 2 {
            return Err(Error::InvalidArgument(format!("V must be >= 2, got {}", self.v)));
        }
        if !(0.0..1.0).contains(&self.p) {
            return Err(Error::InvalidArgument(format!("persistence {} outside [0, 1)", self.p)));
        }
        if self.weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::InvalidArgument(format!("neighbour weights {:?} must be positive", self.weights)));
        }
        Ok(())
    }

    /// `n` grids from one seeded stream.
    pub fn corpus(&self, n: usize, h: usize, w: usize) -> Result<Vec<TokenGrid>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..n).map(|_| self.draw(&mut rng, h, w)).collect()
    }

    fn draw(&self, rng: &mut ChaCha8Rng, h: usize, w: usize) -> Result<TokenGrid> {
        let mut t = vec![0u32; h * w];
        for i in 0..h {
            for j in 0..w {
                let left = (j > 0).then(|| t[i * w + j - 1]);
                let up = (i > 0).then(|| t[(i - 1) * w + j]);
                let copy = rng.random::<f64>() < self.p;
                let uniform = rng.random_range(0..self.v as u32);
                t[i * w + j] = match (copy, left, up) {
                    (false, _, _) | (true, None, None) => uniform,
                    (true, Some(l), None) => l,
                    (true, None, Some(u)) => u,
                    (true, Some(l), Some(u)) => {
                        let pick_left = rng.random::<f64>() * (self.weights[0] + self.weights[1]) < self.weights[0];
                        if pick_left {
                            l
                        } else {
                            u
                        }
                    }
                };
            }
        }
        TokenGrid::new(h, w, self.v, t)
    }
}

/// One grid drawn with the source's own seed.
pub fn gen_markov_grid(src: &MarkovSource, h: usize, w: usize) -> Result<TokenGrid> {
    src.validate()?;
    src.draw(&mut ChaCha8Rng::seed_from_u64(src.seed), h, w)
}

/// Causal context for [`empirical_entropy`], in raster order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Context {
    /// No context.
    Order0,
    /// The left neighbour, else the upper one.
    Order1,
    /// Both the left and the upper neighbour.
    LeftUp,
}

fn context_of(g: &TokenGrid, pos: usize, ctx: Context) -> (i64, i64) {
    let w = g.w();
    let t = g.indices();
    let left = if !pos.is_multiple_of(w) { t[pos - 1] as i64 } else { -1 };
    let up = if pos >= w { t[pos - w] as i64 } else { -1 };
    match ctx {
        Context::Order0 => (-1, -1),
        Context::Order1 => (if left >= 0 { left } else { up }, -1),
        Context::LeftUp => (left, up),
    }
}

/// Plug-in conditional entropy in bits per token.
pub fn empirical_entropy(corpus: &[TokenGrid], ctx: Context) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let mut counts: HashMap<(i64, i64), HashMap<u32, u64>> = HashMap::new();
    let mut n = 0u64;
    for g in corpus {
        for (pos, &sym) in g.indices().iter().enumerate() {
            *counts.entry(context_of(g, pos, ctx)).or_default().entry(sym).or_default() += 1;
            n += 1;
        }
    }
    let mut h = 0.0;
    for per in counts.values() {
        let nc: u64 = per.values().sum();
        for &c in per.values() {
            h -= c as f64 / n as f64 * (c as f64 / nc as f64).log2();
        }
    }
    Ok(h.max(0.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    /// Short key used by ordering checks, e.g. `qlds12`.
    pub key: String,
    pub model: String,
    pub schedule: String,
    pub tokens: usize,
    /// Mean model cross-entropy per pixel of the virtual canvas.
    pub bpp: f64,
    /// Mean emitted payload per pixel.
    pub payload_bpp: f64,
    pub savings_pct: f64,
    pub header_bits: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub canvas: (usize, usize),
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn row(&self, key: &str) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.key == key)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("model,schedule,tokens,bpp,savings_pct,header_bits\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{:.8},{:.2},{}", r.model, r.schedule, r.tokens, r.bpp, r.savings_pct, r.header_bits).unwrap();
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("spatial bits only, {}x{} canvas\n", self.canvas.0, self.canvas.1);
        writeln!(s, "{:<10} {:<16} {:>7} {:>10} {:>12} {:>11} {:>8}", "Method", "Schedule", "tokens", "bpp", "payload bpp", "Savings (%)", "header").unwrap();
        for r in &self.rows {
            writeln!(
                s,
                "{:<10} {:<16} {:>7} {:>10.6} {:>12.6} {:>11.2} {:>8}",
                r.model, r.schedule, r.tokens, r.bpp, r.payload_bpp, r.savings_pct, r.header_bits
            )
            .unwrap();
        }
        s
    }

    /// Checks a chain like `qlds12>=qlds5>=quincunx>checkerboard` over the
    /// savings column. `>=` tolerates `tol` points, `>` is strict.
    pub fn check_ordering(&self, chain: &str, tol: f64) -> Result<()> {
        let mut keys = Vec::new();
        let mut ops = Vec::new();
        let mut rest = chain.trim();
        loop {
            let (idx, op, len) = match (rest.find(">="), rest.find('>')) {
                (Some(a), Some(b)) if a <= b => (a, ">=", 2),
                (_, Some(b)) => (b, ">", 1),
                (_, None) => break,
            };
            keys.push(rest[..idx].trim());
            ops.push(op);
            rest = &rest[idx + len..];
        }
        keys.push(rest.trim());
        if keys.len() < 2 || keys.iter().any(|k| k.is_empty()) {
            return Err(Error::Parse(format!("bad ordering chain {chain:?}")));
        }
        let savings = |k: &str| {
            self.row(k)
                .map(|r| r.savings_pct)
                .ok_or_else(|| Error::InvalidArgument(format!("ordering names unknown row {k:?}")))
        };
        for (i, op) in ops.iter().enumerate() {
            let (a, b) = (savings(keys[i])?, savings(keys[i + 1])?);
            let ok = if *op == ">=" { a >= b - tol } else { a > b };
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "ordering violated: {} ({a:.2}%) {op} {} ({b:.2}%) fails",
                    keys[i],
                    keys[i + 1]
                )));
            }
        }
        Ok(())
    }
}

/// One report row to compute: a model under a schedule.
pub struct BenchEntry<'a> {
    pub key: String,
    pub model_name: String,
    pub model: &'a dyn EntropyModel,
    pub schedule: ScheduleKind,
}

struct GridCost {
    ideal: f64,
    payload: u64,
    header: u64,
}

fn cost_one(model: &dyn EntropyModel, sched: &MaskSchedule, grid: &TokenGrid) -> Result<GridCost> {
    let (bs, ideal) = encode_with_rate(grid, sched, model)?;
    let back = decode_grid(&bs, model)?;
    if &back != grid {
        return Err(Error::Bitstream("round trip mismatch while building the report".into()));
    }
    Ok(GridCost { ideal, payload: bs.payload_bits(), header: bs.header_bits() })
}

/// Encodes every grid under every entry, preceded by the uniform baseline
/// row. Grids are split over `jobs` threads; results do not depend on it.
pub fn run_table3(entries: &[BenchEntry], corpus: &[TokenGrid], canvas: (usize, usize), jobs: usize) -> Result<Report> {
    let first = corpus.first().ok_or_else(|| Error::InvalidArgument("empty test corpus".into()))?;
    let (h, w, v) = (first.h(), first.w(), first.vocab());
    let baseline = rate_uniform(h, w, v, canvas.0, canvas.1)?;
    let uniform = UniformModel::new(v)?;
    let mut all: Vec<BenchEntry> = vec![BenchEntry {
        key: "uniform".into(),
        model_name: "uniform".into(),
        model: &uniform,
        schedule: ScheduleKind::Checkerboard,
    }];
    all.extend(entries.iter().map(|e| BenchEntry {
        key: e.key.clone(),
        model_name: e.model_name.clone(),
        model: e.model,
        schedule: e.schedule.clone(),
    }));
    let pixels = (canvas.0 * canvas.1) as f64;
    let mut rows = Vec::new();
    for e in &all {
        let start = Instant::now();
        let sched = MaskSchedule::build(&e.schedule, h, w)?;
        let costs = par_map(corpus, jobs.max(1), |g| cost_one(e.model, &sched, g))?;
        let n = costs.len() as f64;
        let bpp = costs.iter().map(|c| c.ideal).sum::<f64>() / n / pixels;
        let payload_bpp = costs.iter().map(|c| c.payload as f64).sum::<f64>() / n / pixels;
        log::info!("{} {}: bpp {bpp:.6} in {:.1}s", e.model_name, e.schedule, start.elapsed().as_secs_f64());
        rows.push(ReportRow {
            key: e.key.clone(),
            model: e.model_name.clone(),
            schedule: e.schedule.to_string(),
            tokens: h * w,
            bpp,
            payload_bpp,
            savings_pct: savings_percent(bpp, baseline)?,
            header_bits: costs[0].header,
        });
    }
    Ok(Report { canvas, rows })
}

/// Order-preserving parallel map over `items`.
fn par_map<T: Sync, U: Send, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<U>>
where
    F: Fn(&T) -> Result<U> + Sync,
{
    if jobs <= 1 || items.len() < 2 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<U>>>())).collect();
        handles.into_iter().map(|h| h.join().expect("report worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Settings of the bundled desk-scale benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub seed: u64,
    pub v: usize,
    pub p: f64,
    pub h: usize,
    pub w: usize,
    pub train: usize,
    pub test: usize,
    pub canvas: (usize, usize),
    pub mim: TrainConfig,
    /// VAR training steps; 0 leaves the VAR row out.
    pub var_steps: usize,
    pub jobs: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            v: 64,
            p: 0.9,
            h: 16,
            w: 16,
            train: 512,
            test: 128,
            canvas: (512, 512),
            mim: TrainConfig { lr: 2e-3, steps: 1200, batch_size: 8, ..TrainConfig::default() },
            var_steps: 600,
            jobs: 1,
        }
    }
}

/// Schedules of the MIM rows with their report keys.
pub fn bench_schedules() -> Vec<(&'static str, ScheduleKind)> {
    vec![
        ("checkerboard", ScheduleKind::Checkerboard),
        ("quincunx", ScheduleKind::Quincunx),
        ("qlds5", ScheduleKind::Qlds { alpha: 2.2, steps: 5 }),
        ("qlds12", ScheduleKind::Qlds { alpha: 2.2, steps: 12 }),
    ]
}

/// Implicit-VAR scales used by the VAR row of an `h × w` benchmark.
pub fn bench_var_scales(h: usize, w: usize) -> Vec<(u16, u16)> {
    [4, 8, 12, 16].iter().map(|&s| ((s * h / 16).max(1) as u16, (s * w / 16).max(1) as u16)).collect()
}

/// Everything a benchmark run produced.
pub struct BenchOutcome {
    pub report: Report,
    /// Conditional entropy of the test corpus given the raster order-1
    /// context, bits per token.
    pub h1: f64,
    pub mim_losses: Vec<f64>,
}

impl BenchOutcome {
    /// `100 (1 - H1 / log2 V)`.
    pub fn oracle_savings(&self, v: usize) -> f64 {
        100.0 * (1.0 - self.h1 / (v as f64).log2())
    }
}

/// Generates the Markov corpora, trains the models and builds the report.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchOutcome> {
    let src = MarkovSource::new(cfg.v, cfg.p, cfg.seed)?;
    let mut all = src.corpus(cfg.train + cfg.test, cfg.h, cfg.w)?;
    let test = all.split_off(cfg.train);
    let train = all;

    let start = Instant::now();
    let mut mim = MimModel::new(MimConfig::reference(cfg.v, cfg.h, cfg.w), cfg.seed)?;
    let mim_cfg = TrainConfig { seed: cfg.seed, ..cfg.mim.clone() };
    let mim_losses = mim.train_with(&train, &mim_cfg, |step, loss| {
        if step % 100 == 0 {
            log::info!("mim step {step} loss {loss:.4}");
        }
    })?;
    log::info!("mim trained in {:.1}s", start.elapsed().as_secs_f64());
    let counting = CountingModel::primed(cfg.v, &train)?;

    let var_scales = bench_var_scales(cfg.h, cfg.w);
    let var = if cfg.var_steps > 0 {
        let kind = ScheduleKind::ImplicitVar { scales: var_scales.clone() };
        let sched = MaskSchedule::build(&kind, cfg.h, cfg.w)?;
        let mut m = VarModel::new(VarConfig::reference(cfg.v, cfg.h, cfg.w), cfg.seed)?;
        let var_cfg = TrainConfig { seed: cfg.seed, steps: cfg.var_steps, ..cfg.mim.clone() };
        m.train(&train, &sched, &var_cfg)?;
        Some(m)
    } else {
        None
    };

    let mut entries: Vec<BenchEntry> = bench_schedules()
        .into_iter()
        .map(|(key, kind)| BenchEntry { key: key.into(), model_name: "mim".into(), model: &mim, schedule: kind })
        .collect();
    if let Some(m) = &var {
        entries.push(BenchEntry {
            key: "var".into(),
            model_name: "var".into(),
            model: m,
            schedule: ScheduleKind::ImplicitVar { scales: var_scales },
        });
    }
    // a single seed cell, then raster order: every later cell sees its left
    // (or upper) neighbour, the context the counts were primed with
    entries.push(BenchEntry {
        key: "counting".into(),
        model_name: "counting".into(),
        model: &counting,
        schedule: ScheduleKind::ImplicitVar { scales: vec![(1, 1), (cfg.h as u16, cfg.w as u16)] },
    });
    let report = run_table3(&entries, &test, cfg.canvas, cfg.jobs)?;
    let h1 = empirical_entropy(&test, Context::Order1)?;
    Ok(BenchOutcome { report, h1, mim_losses })
}

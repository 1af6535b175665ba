//! The `maskcodec` command line.
//!
//! Every subcommand prints one `key=value` summary line on success. Exit
//! codes: 0 success, 1 internal or data error, 2 usage error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::coder::{encode_prefix, hybrid_decode, rate_uniform, savings_percent, Bitstream};
use crate::error::Error;
use crate::flowlab::{mode_of, ode_sample, train_toy_decoder, two_mode_dataset, FlowConfig};
use crate::harness::{run_bench, BenchConfig, MarkovSource};
use crate::probmodel::checkpoint::Checkpoint;
use crate::probmodel::{
    CountingModel, EntropyModel, MimConfig, MimModel, ModelKind, TrainConfig, UniformModel, VarConfig, VarModel,
};
use crate::schedules::{MaskSchedule, ScheduleKind};
use crate::tokens::TokenGrid;

#[derive(Debug, Parser)]
#[command(name = "maskcodec", version, about = "Masked entropy coding of token grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Encode a token grid file into a .pcv2 stream.
    Encode(EncodeArgs),
    /// Losslessly decode a .pcv2 stream.
    Decode(DecodeArgs),
    /// Decode the transmitted groups and sample the rest.
    Hybrid(HybridArgs),
    /// Train a masked image model.
    TrainMim(TrainArgs),
    /// Train a scale-causal model over an implicit-VAR schedule.
    TrainVar(TrainVarArgs),
    /// Train the toy conditional flow decoder.
    TrainFlow(TrainFlowArgs),
    /// Run the rate comparison benchmark.
    Bench(BenchArgs),
    /// Print the groups of a masking schedule.
    Schedule(ScheduleArgs),
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Token grid text file (`h w V` then h rows).
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value = "checkerboard")]
    pub schedule: String,
    /// `uniform`, `counting` or a checkpoint path.
    #[arg(long, default_value = "uniform")]
    pub model: String,
    /// Transmit only the first k groups.
    #[arg(long)]
    pub groups: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "512x512")]
    pub canvas: String,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value = "uniform")]
    pub model: String,
}

#[derive(Debug, Args)]
pub struct HybridArgs {
    /// A .pcv2 stream, or a token grid file together with --schedule.
    pub input: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value = "uniform")]
    pub model: String,
    /// Groups to transmit; defaults to what the stream carries.
    #[arg(long)]
    pub groups: Option<usize>,
    /// Sampling seed; defaults to the seed stored in the stream.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "checkerboard")]
    pub schedule: String,
    #[arg(long, default_value = "512x512")]
    pub canvas: String,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    /// `markov:v=64,p=0.9,h=16,w=16,n=512` or token grid files.
    #[arg(long, default_value = "markov:v=64,p=0.9,h=16,w=16,n=512")]
    pub corpus: String,
    #[arg(long = "tokens", num_args = 1..)]
    pub tokens: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(short, long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainVarArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Implicit-VAR schedule the model is trained for.
    #[arg(long, default_value = "ivar:4,8,12,16")]
    pub schedule: String,
}

#[derive(Debug, Args)]
pub struct TrainFlowArgs {
    #[arg(short, long)]
    pub output: PathBuf,
    /// Training curve CSV.
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long, default_value_t = 3000)]
    pub steps: usize,
    #[arg(long, default_value_t = 2e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    /// Guidance scale used for the evaluation samples.
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// `markov:v=64,p=0.9,h=16,w=16,train=512,test=128`.
    #[arg(long, default_value = "markov:v=64,p=0.9,h=16,w=16,train=512,test=128")]
    pub corpus: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// e.g. `qlds12>=qlds5>=quincunx>=checkerboard>uniform`.
    #[arg(long)]
    pub assert_ordering: Option<String>,
    /// Tolerance of `>=` in the ordering check, in savings points.
    #[arg(long, default_value_t = 0.5)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub var_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "512x512")]
    pub canvas: String,
}

#[derive(Debug, Args)]
pub struct ScheduleArgs {
    #[arg(long)]
    pub schedule: String,
    #[arg(long)]
    pub h: usize,
    #[arg(long)]
    pub w: usize,
    /// Also print the group index of every cell.
    #[arg(long)]
    pub show: bool,
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidArgument(_) | Error::Parse(_) => 2,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Entry point used by the binary; returns the process exit code.
pub fn main() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("PCV2_LOG", "warn")).try_init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Encode(a) => cmd_encode(a),
        Command::Decode(a) => cmd_decode(a),
        Command::Hybrid(a) => cmd_hybrid(a),
        Command::TrainMim(a) => cmd_train_mim(a),
        Command::TrainVar(a) => cmd_train_var(a),
        Command::TrainFlow(a) => cmd_train_flow(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Schedule(a) => cmd_schedule(a),
    }
}

fn parse_canvas(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::usage(format!("--canvas expects HxW, got {s:?}"));
    let (a, b) = s.split_once('x').ok_or_else(bad)?;
    let h: usize = a.parse().map_err(|_| bad())?;
    let w: usize = b.parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn parse_schedule(s: &str) -> CliResult<ScheduleKind> {
    s.parse().map_err(|e: Error| CliError::usage(format!("--schedule: {e}")))
}

fn read_grid(path: &Path) -> CliResult<TokenGrid> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    TokenGrid::from_text(&text).map_err(|e| CliError { code: 1, message: format!("{}: {e}", path.display()) })
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError { code: 1, message: format!("cannot write {}: {e}", path.display()) })
}

/// Resolves `--model`: `uniform`, `counting` or a checkpoint file.
pub fn load_model(spec: &str, v: usize) -> CliResult<Box<dyn EntropyModel>> {
    match spec {
        "uniform" => Ok(Box::new(UniformModel::new(v)?)),
        "counting" => Ok(Box::new(CountingModel::new(v)?)),
        path => {
            let p = Path::new(path);
            if !p.is_file() {
                return Err(CliError::usage(format!("model file {} not found", p.display())));
            }
            let ck = Checkpoint::load(p).map_err(|e| CliError { code: 1, message: format!("{}: {e}", p.display()) })?;
            let model: Box<dyn EntropyModel> = match ck.kind {
                ModelKind::Counting => Box::new(CountingModel::from_checkpoint(&ck)?),
                ModelKind::Mim => Box::new(MimModel::from_checkpoint(&ck)?),
                ModelKind::Var => Box::new(VarModel::from_checkpoint(&ck)?),
                other => {
                    return Err(CliError::usage(format!("{} holds a {} model, which cannot code tokens", p.display(), other.name())))
                }
            };
            if model.vocab() != v {
                return Err(CliError::usage(format!("{} has V={} but the data has V={v}", p.display(), model.vocab())));
            }
            Ok(model)
        }
    }
}

fn summary(pairs: &[(&str, String)]) {
    let line: Vec<String> = pairs.iter().map(|(k, v)| format!("{k}={v}")).collect();
    println!("{}", line.join(" "));
}

fn stream_summary(bs: &Bitstream, k_total: usize, canvas: (usize, usize), baseline: f64) -> CliResult<()> {
    let bpp = bs.bpp(canvas.0, canvas.1);
    summary(&[
        ("groups", format!("{}/{k_total}", bs.header.groups_transmitted)),
        ("payload_bits", bs.payload_bits().to_string()),
        ("bpp", format!("{bpp:.6}")),
        ("savings_pct", format!("{:.2}", savings_percent(bpp, baseline)?)),
        ("header_bits", bs.header_bits().to_string()),
        ("header_bpp", format!("{:.6}", bs.header_bits() as f64 / (canvas.0 * canvas.1) as f64)),
    ]);
    Ok(())
}

fn cmd_encode(a: EncodeArgs) -> CliResult<()> {
    let canvas = parse_canvas(&a.canvas)?;
    let kind = parse_schedule(&a.schedule)?;
    let grid = read_grid(&a.input)?;
    let model = load_model(&a.model, grid.vocab())?;
    let sched = MaskSchedule::build(&kind, grid.h(), grid.w())?;
    let k_total = sched.num_groups();
    let k = a.groups.unwrap_or(k_total);
    if k > k_total {
        return Err(CliError::usage(format!("--groups {k} exceeds the schedule's {k_total} groups")));
    }
    let bs = encode_prefix(&grid, &sched, model.as_ref(), k, a.seed)?;
    write_file(&a.output, &bs.to_bytes())?;
    let baseline = rate_uniform(grid.h(), grid.w(), grid.vocab(), canvas.0, canvas.1)?;
    stream_summary(&bs, k_total, canvas, baseline)
}

fn read_stream(path: &Path) -> CliResult<Bitstream> {
    let bytes = std::fs::read(path).map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    Ok(Bitstream::from_bytes(&bytes)?)
}

fn cmd_decode(a: DecodeArgs) -> CliResult<()> {
    let bs = read_stream(&a.input)?;
    let model = load_model(&a.model, bs.header.v as usize)?;
    let grid = crate::coder::decode_grid(&bs, model.as_ref())?;
    write_file(&a.output, grid.to_text().as_bytes())?;
    summary(&[("h", grid.h().to_string()), ("w", grid.w().to_string()), ("v", grid.vocab().to_string()), ("groups", bs.header.groups_transmitted.to_string())]);
    Ok(())
}

fn cmd_hybrid(a: HybridArgs) -> CliResult<()> {
    let canvas = parse_canvas(&a.canvas)?;
    let raw = std::fs::read(&a.input).map_err(|e| CliError::usage(format!("cannot read {}: {e}", a.input.display())))?;
    let (bs, model, k_total) = if raw.starts_with(crate::coder::bitstream::MAGIC) {
        let bs = Bitstream::from_bytes(&raw)?;
        let model = load_model(&a.model, bs.header.v as usize)?;
        let sched = crate::coder::stream_schedule(&bs, model.as_ref())?;
        let k_total = sched.num_groups();
        let bs = match a.groups {
            Some(k) if k > k_total => {
                return Err(CliError::usage(format!("--groups {k} exceeds the schedule's {k_total} groups")))
            }
            Some(k) if k != bs.header.groups_transmitted as usize => {
                if (bs.header.groups_transmitted as usize) < k_total {
                    return Err(CliError::usage("a partial stream cannot be re-cut; pass the full stream or the token file"));
                }
                let grid = crate::coder::decode_grid(&bs, model.as_ref())?;
                encode_prefix(&grid, &sched, model.as_ref(), k, bs.header.sample_seed)?
            }
            _ => bs,
        };
        (bs, model, k_total)
    } else {
        let grid = read_grid(&a.input)?;
        let model = load_model(&a.model, grid.vocab())?;
        let kind = parse_schedule(&a.schedule)?;
        let sched = MaskSchedule::build(&kind, grid.h(), grid.w())?;
        let k_total = sched.num_groups();
        let k = a.groups.unwrap_or(k_total);
        if k > k_total {
            return Err(CliError::usage(format!("--groups {k} exceeds the schedule's {k_total} groups")));
        }
        let bs = encode_prefix(&grid, &sched, model.as_ref(), k, a.seed.unwrap_or(0))?;
        (bs, model, k_total)
    };
    let seed = a.seed.unwrap_or(bs.header.sample_seed);
    let grid = hybrid_decode(&bs, model.as_ref(), seed)?;
    write_file(&a.output, grid.to_text().as_bytes())?;
    let baseline = rate_uniform(grid.h(), grid.w(), grid.vocab(), canvas.0, canvas.1)?;
    stream_summary(&bs, k_total, canvas, baseline)
}

/// Parses `key=value` pairs after a `markov:` prefix.
fn markov_spec(spec: &str) -> CliResult<Vec<(String, String)>> {
    let rest = spec
        .strip_prefix("markov:")
        .or_else(|| (spec == "markov").then_some(""))
        .ok_or_else(|| CliError::usage(format!("--corpus must start with `markov:`, got {spec:?}")))?;
    rest.split(',')
        .filter(|p| !p.is_empty())
        .map(|p| {
            p.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| CliError::usage(format!("--corpus entry {p:?} is not key=value")))
        })
        .collect()
}

fn spec_value<T: std::str::FromStr>(pairs: &[(String, String)], key: &str, default: T) -> CliResult<T> {
    match pairs.iter().find(|(k, _)| k == key) {
        None => Ok(default),
        Some((_, v)) => v.parse().map_err(|_| CliError::usage(format!("--corpus: bad value {v:?} for {key}"))),
    }
}

fn check_keys(pairs: &[(String, String)], allowed: &[&str]) -> CliResult<()> {
    match pairs.iter().find(|(k, _)| !allowed.contains(&k.as_str())) {
        Some((k, _)) => Err(CliError::usage(format!("--corpus: unknown key {k:?} (allowed: {})", allowed.join(", ")))),
        None => Ok(()),
    }
}

fn load_corpus(c: &CorpusArgs, seed: u64) -> CliResult<Vec<TokenGrid>> {
    if !c.tokens.is_empty() {
        return c.tokens.iter().map(|p| read_grid(p)).collect();
    }
    let pairs = markov_spec(&c.corpus)?;
    check_keys(&pairs, &["v", "p", "h", "w", "n", "seed"])?;
    let src = MarkovSource::new(spec_value(&pairs, "v", 64)?, spec_value(&pairs, "p", 0.9)?, spec_value(&pairs, "seed", seed)?)?;
    Ok(src.corpus(spec_value(&pairs, "n", 512)?, spec_value(&pairs, "h", 16)?, spec_value(&pairs, "w", 16)?)?)
}

fn train_config(a: &TrainArgs) -> TrainConfig {
    TrainConfig { seed: a.seed, lr: a.lr, steps: a.steps, batch_size: a.batch, ..TrainConfig::default() }
}

fn corpus_dims(corpus: &[TokenGrid]) -> CliResult<(usize, usize, usize)> {
    let g = corpus.first().ok_or_else(|| CliError::usage("empty training corpus"))?;
    if corpus.iter().any(|x| (x.h(), x.w(), x.vocab()) != (g.h(), g.w(), g.vocab())) {
        return Err(CliError::usage("training grids must share h, w and V"));
    }
    Ok((g.h(), g.w(), g.vocab()))
}

fn cmd_train_mim(a: TrainArgs) -> CliResult<()> {
    let corpus = load_corpus(&a.corpus, a.seed)?;
    let (h, w, v) = corpus_dims(&corpus)?;
    let mut m = MimModel::new(MimConfig::reference(v, h, w), a.seed)?;
    let losses = m.train(&corpus, &train_config(&a))?;
    let ck = m.to_checkpoint();
    ck.save(&a.output)?;
    summary(&[
        ("steps", a.steps.to_string()),
        ("final_loss", format!("{:.6}", losses.last().copied().unwrap_or(f64::NAN))),
        ("params", m.params().len().to_string()),
        ("hash", format!("{:016x}", ck.hash())),
    ]);
    Ok(())
}

fn cmd_train_var(a: TrainVarArgs) -> CliResult<()> {
    let corpus = load_corpus(&a.train.corpus, a.train.seed)?;
    let (h, w, v) = corpus_dims(&corpus)?;
    let kind = parse_schedule(&a.schedule)?;
    if !matches!(kind, ScheduleKind::ImplicitVar { .. }) {
        return Err(CliError::usage("--schedule for train-var must be an ivar schedule"));
    }
    let sched = MaskSchedule::build(&kind, h, w)?;
    let mut m = VarModel::new(VarConfig::reference(v, h, w), a.train.seed)?;
    let losses = m.train(&corpus, &sched, &train_config(&a.train))?;
    let ck = m.to_checkpoint();
    ck.save(&a.train.output)?;
    summary(&[
        ("steps", a.train.steps.to_string()),
        ("final_loss", format!("{:.6}", losses.last().copied().unwrap_or(f64::NAN))),
        ("params", m.params().len().to_string()),
        ("hash", format!("{:016x}", ck.hash())),
    ]);
    Ok(())
}

fn cmd_train_flow(a: TrainFlowArgs) -> CliResult<()> {
    let cfg = FlowConfig { lambda: a.lambda, ..FlowConfig::default() };
    let data = two_mode_dataset(4096, cfg.zl_dim, 0.3, a.seed)?;
    let train = TrainConfig { seed: a.seed, lr: a.lr, steps: a.steps, batch_size: a.batch, ..TrainConfig::default() };
    let (model, losses) = train_toy_decoder(&data, &cfg, &train)?;
    model.to_checkpoint().save(&a.output)?;
    if let Some(p) = &a.curve {
        write_file(p, crate::flowlab::curve_csv(&losses).as_bytes())?;
    }
    let n = 200;
    let mut hits = 0;
    for i in 0..n {
        let s = &data[i];
        let x = ode_sample(&model, &s.z_l, Some(&s.z_g), cfg.steps, cfg.lambda, a.seed.wrapping_add(i as u64))?;
        let label = s.z_g.iter().position(|&g| g == 1.0).unwrap_or(0);
        hits += usize::from(mode_of(&x) == label);
    }
    summary(&[
        ("steps", a.steps.to_string()),
        ("final_loss", format!("{:.6}", losses.last().copied().unwrap_or(f64::NAN))),
        ("mode_accuracy", format!("{:.3}", hits as f64 / n as f64)),
    ]);
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> CliResult<()> {
    let pairs = markov_spec(&a.corpus)?;
    check_keys(&pairs, &["v", "p", "h", "w", "train", "test"])?;
    let d = BenchConfig::default();
    let mut cfg = BenchConfig {
        seed: a.seed,
        v: spec_value(&pairs, "v", d.v)?,
        p: spec_value(&pairs, "p", d.p)?,
        h: spec_value(&pairs, "h", d.h)?,
        w: spec_value(&pairs, "w", d.w)?,
        train: spec_value(&pairs, "train", d.train)?,
        test: spec_value(&pairs, "test", d.test)?,
        canvas: parse_canvas(&a.canvas)?,
        jobs: a.jobs.max(1),
        ..d
    };
    if let Some(s) = a.steps {
        cfg.mim.steps = s;
    }
    if let Some(s) = a.var_steps {
        cfg.var_steps = s;
    }
    let out = run_bench(&cfg)?;
    print!("{}", out.report.to_table());
    if let Some(p) = &a.out {
        write_file(p, out.report.to_csv().as_bytes())?;
    }
    summary(&[
        ("rows", out.report.rows.len().to_string()),
        ("h1_bits", format!("{:.4}", out.h1)),
        ("oracle_savings_pct", format!("{:.2}", out.oracle_savings(cfg.v))),
    ]);
    if let Some(chain) = &a.assert_ordering {
        out.report.check_ordering(chain, a.tolerance).map_err(|e| CliError { code: 1, message: e.to_string() })?;
    }
    Ok(())
}

fn cmd_schedule(a: ScheduleArgs) -> CliResult<()> {
    let kind = parse_schedule(&a.schedule)?;
    let s = MaskSchedule::build(&kind, a.h, a.w)?;
    if a.show {
        let idx = s.group_index();
        for i in 0..a.h {
            let row: Vec<String> = (0..a.w).map(|j| (idx[i * a.w + j] + 1).to_string()).collect();
            println!("{}", row.join(" "));
        }
    }
    let cum: Vec<String> = s.cumulative_counts().iter().map(|c| c.to_string()).collect();
    summary(&[("kind", kind.to_string()), ("groups", s.num_groups().to_string()), ("cumulative", cum.join(","))]);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canvas_and_corpus_specs() {
        assert_eq!(parse_canvas("512x256").unwrap(), (512, 256));
        assert_eq!(parse_canvas("0x4").unwrap_err().code, 2);
        let p = markov_spec("markov:v=8,p=0.5").unwrap();
        assert_eq!(spec_value(&p, "v", 0usize).unwrap(), 8);
        assert_eq!(spec_value(&p, "h", 16usize).unwrap(), 16);
        assert!(check_keys(&p, &["v"]).is_err());
        assert!(markov_spec("gauss:v=3").is_err());
    }

    #[test]
    fn missing_model_is_usage_error() {
        let e = load_model("/nonexistent/model.pcvm", 8).err().unwrap();
        assert_eq!(e.code, 2);
        assert!(e.message.contains("/nonexistent/model.pcvm"));
    }
}

//! Conditional probability models for entropy coding.
//!
//! Every model implements [`EntropyModel`]. The coder drives a
//! [`CodingSession`] group by group: group 0 is always priced under the
//! uniform field, and for every later group the session is told which tokens
//! are revealed before it is asked for per-position probability rows.

pub mod checkpoint;
pub mod counting;
pub mod field;
pub mod mim;
pub mod nn;
pub mod train;
pub mod var;

use crate::error::{Error, Result};
use crate::schedules::MaskSchedule;
use crate::tokens::TokenGrid;

pub use counting::{counting_predict, CountingModel, KtTable};
pub use field::{apply_floor, p_floor, uniform_field, validate_row, CategoricalField};
pub use mim::{MimConfig, MimModel};
pub use train::{Adam, TrainConfig};
pub use var::{VarConfig, VarModel};

/// Model identifier shared by bitstream headers and checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ModelKind {
    Uniform = 0,
    Counting = 1,
    Mim = 2,
    Var = 3,
    Flow = 4,
}

impl ModelKind {
    pub fn from_u8(b: u8) -> Result<Self> {
        Ok(match b {
            0 => ModelKind::Uniform,
            1 => ModelKind::Counting,
            2 => ModelKind::Mim,
            3 => ModelKind::Var,
            4 => ModelKind::Flow,
            other => return Err(Error::Parse(format!("unknown model kind byte {other}"))),
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Uniform => "uniform",
            ModelKind::Counting => "counting",
            ModelKind::Mim => "mim",
            ModelKind::Var => "var",
            ModelKind::Flow => "flow",
        }
    }
}

/// Tokens known to both encoder and decoder at some point of the stream.
#[derive(Debug, Clone)]
pub struct RevealState {
    h: usize,
    w: usize,
    v: usize,
    tokens: Vec<u32>,
    revealed: Vec<bool>,
}

impl RevealState {
    pub fn new(h: usize, w: usize, v: usize) -> Self {
        Self { h, w, v, tokens: vec![0; h * w], revealed: vec![false; h * w] }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn vocab(&self) -> usize {
        self.v
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn revealed(&self) -> &[bool] {
        &self.revealed
    }

    pub fn is_revealed(&self, pos: usize) -> bool {
        self.revealed[pos]
    }

    pub fn token(&self, pos: usize) -> Option<u32> {
        self.revealed[pos].then(|| self.tokens[pos])
    }

    pub fn reveal(&mut self, pos: usize, sym: u32) {
        self.tokens[pos] = sym;
        self.revealed[pos] = true;
    }

    pub fn into_grid(self) -> Result<TokenGrid> {
        if let Some(p) = self.revealed.iter().position(|r| !r) {
            return Err(Error::InvalidArgument(format!("position {p} never revealed")));
        }
        TokenGrid::new(self.h, self.w, self.v, self.tokens)
    }
}

/// Per-stream prediction state.
pub trait CodingSession {
    /// Called once before the symbols of group `k >= 1` are coded.
    fn begin_group(&mut self, k: usize, state: &RevealState) -> Result<()>;

    /// Probability row for `pos`, a member of the current group.
    fn predict(&mut self, pos: usize, state: &RevealState) -> Result<Vec<f64>>;

    /// Notifies the session that `pos` now holds `sym` (all groups).
    fn observe(&mut self, _pos: usize, _sym: u32) {}
}

pub trait EntropyModel: Sync {
    fn vocab(&self) -> usize;

    fn kind(&self) -> ModelKind;

    /// Hash of the checkpoint the model was loaded from; 0 for stateless
    /// models that need no checkpoint.
    fn checkpoint_hash(&self) -> u64 {
        0
    }

    fn session<'a>(&'a self, schedule: &'a MaskSchedule) -> Result<Box<dyn CodingSession + 'a>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UniformModel {
    pub v: usize,
}

impl UniformModel {
    pub fn new(v: usize) -> Result<Self> {
        if v < 2 {
            return Err(Error::InvalidArgument(format!("V must be >= 2, got {v}")));
        }
        Ok(Self { v })
    }
}

struct UniformSession(usize);

impl CodingSession for UniformSession {
    fn begin_group(&mut self, _k: usize, _state: &RevealState) -> Result<()> {
        Ok(())
    }

    fn predict(&mut self, _pos: usize, _state: &RevealState) -> Result<Vec<f64>> {
        Ok(vec![1.0 / self.0 as f64; self.0])
    }
}

impl EntropyModel for UniformModel {
    fn vocab(&self) -> usize {
        self.v
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Uniform
    }

    fn session<'a>(&'a self, _schedule: &'a MaskSchedule) -> Result<Box<dyn CodingSession + 'a>> {
        Ok(Box::new(UniformSession(self.v)))
    }
}

/// Drives `model` over `schedule` in coding order, calling `visit` with each
/// symbol's probability row. The closure returns the symbol actually coded
/// at that position (the grid value when encoding, the decoded or sampled
/// value otherwise). Stops after `groups` groups.
pub fn drive<F>(model: &dyn EntropyModel, schedule: &MaskSchedule, groups: usize, mut visit: F) -> Result<RevealState>
where
    F: FnMut(usize, usize, &[f64]) -> Result<u32>,
{
    let v = model.vocab();
    let mut state = RevealState::new(schedule.h(), schedule.w(), v);
    let mut session = model.session(schedule)?;
    let uniform = vec![1.0 / v as f64; v];
    for (k, group) in schedule.groups().iter().enumerate().take(groups) {
        if k > 0 {
            session.begin_group(k, &state)?;
        }
        for &pos in group {
            let sym = if k == 0 {
                visit(k, pos, &uniform)?
            } else {
                let row = session.predict(pos, &state)?;
                validate_row(pos, &row)?;
                visit(k, pos, &row)?
            };
            if sym as usize >= v {
                return Err(Error::InvalidArgument(format!("symbol {sym} at {pos} exceeds V={v}")));
            }
            state.reveal(pos, sym);
            session.observe(pos, sym);
        }
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateBreakdown {
    /// Ideal code length per group in bits.
    pub per_group: Vec<f64>,
}

impl RateBreakdown {
    pub fn total(&self) -> f64 {
        self.per_group.iter().sum()
    }

    /// Bits of the first `k` groups.
    pub fn prefix(&self, k: usize) -> f64 {
        self.per_group.iter().take(k).sum()
    }
}

pub fn check_compatible(model: &dyn EntropyModel, grid: &TokenGrid, schedule: &MaskSchedule) -> Result<()> {
    if (schedule.h(), schedule.w()) != (grid.h(), grid.w()) {
        return Err(Error::Dimension(format!(
            "schedule is {}x{} but grid is {}x{}",
            schedule.h(),
            schedule.w(),
            grid.h(),
            grid.w()
        )));
    }
    if model.vocab() != grid.vocab() {
        return Err(Error::ModelMismatch(format!("model V={} but grid V={}", model.vocab(), grid.vocab())));
    }
    Ok(())
}

/// Cross-entropy of `grid` under `model` in coding order: group 0 at
/// `log2 V` per symbol, later groups at `-log2 p(token | revealed prefix)`.
pub fn model_rate(model: &dyn EntropyModel, grid: &TokenGrid, schedule: &MaskSchedule) -> Result<RateBreakdown> {
    check_compatible(model, grid, schedule)?;
    let mut per_group = vec![0.0; schedule.num_groups()];
    drive(model, schedule, schedule.num_groups(), |k, pos, row| {
        let sym = grid.indices()[pos];
        per_group[k] -= row[sym as usize].log2();
        Ok(sym)
    })?;
    Ok(RateBreakdown { per_group })
}

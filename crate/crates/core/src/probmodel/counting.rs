//! Adaptive Krichevsky–Trofimov counting model.
//!
//! The context of a position is the token of its first already-coded
//! 4-neighbour in the order left, up, right, down, or a dedicated "none"
//! context when no neighbour is known yet. Counts can optionally be primed
//! from a training corpus; the stream then keeps adapting on top.

use sha2::{Digest, Sha256};

use super::checkpoint::{Checkpoint, HyperReader, HyperWriter};
use super::field::{apply_floor, p_floor};
use super::{CodingSession, EntropyModel, ModelKind, RevealState};
use crate::error::{Error, Result};
use crate::schedules::MaskSchedule;
use crate::tokens::TokenGrid;

/// Per-context symbol counts.
#[derive(Debug, Clone, PartialEq)]
pub struct KtTable {
    v: usize,
    counts: Vec<u64>,
    totals: Vec<u64>,
}

impl KtTable {
    pub fn new(v: usize, contexts: usize) -> Self {
        Self { v, counts: vec![0; v * contexts], totals: vec![0; contexts] }
    }

    pub fn vocab(&self) -> usize {
        self.v
    }

    pub fn contexts(&self) -> usize {
        self.totals.len()
    }

    pub fn counts(&self, ctx: usize) -> &[u64] {
        &self.counts[ctx * self.v..(ctx + 1) * self.v]
    }

    /// `p(v) = (n_v + 1/2) / (n + V/2)`.
    pub fn predict(&self, ctx: usize) -> Vec<f64> {
        let denom = self.totals[ctx] as f64 + self.v as f64 / 2.0;
        let mut row: Vec<f64> = self.counts(ctx).iter().map(|&n| (n as f64 + 0.5) / denom).collect();
        if row.iter().any(|&p| p < p_floor(self.v)) {
            apply_floor(&mut row);
        }
        row
    }

    pub fn update(&mut self, ctx: usize, sym: u32) {
        self.counts[ctx * self.v + sym as usize] += 1;
        self.totals[ctx] += 1;
    }
}

const NEIGHBOURS: [(isize, isize); 4] = [(0, -1), (-1, 0), (0, 1), (1, 0)];

fn neighbour(pos: usize, h: usize, w: usize, (di, dj): (isize, isize)) -> Option<usize> {
    let i = (pos / w) as isize + di;
    let j = (pos % w) as isize + dj;
    (i >= 0 && j >= 0 && (i as usize) < h && (j as usize) < w).then(|| i as usize * w + j as usize)
}

/// Context window used by the coder: the first revealed neighbour, if any.
pub fn causal_window(pos: usize, state: &RevealState) -> Vec<usize> {
    NEIGHBOURS
        .iter()
        .filter_map(|&d| neighbour(pos, state.h(), state.w(), d))
        .find(|&q| state.is_revealed(q))
        .into_iter()
        .collect()
}

/// Predicts the row for a position whose context is read from `window`.
/// Every window position must already be coded.
pub fn counting_predict(table: &KtTable, window: &[usize], state: &RevealState) -> Result<Vec<f64>> {
    if let Some(&bad) = window.iter().find(|&&q| !state.is_revealed(q)) {
        return Err(Error::Causality { pos: bad });
    }
    let ctx = window.first().map_or(table.vocab(), |&q| state.tokens()[q] as usize);
    Ok(table.predict(ctx))
}

/// KT counting model, optionally primed with corpus counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CountingModel {
    prior: KtTable,
    primed: bool,
}

impl CountingModel {
    /// Fresh model: every stream starts from empty counts.
    pub fn new(v: usize) -> Result<Self> {
        if v < 2 {
            return Err(Error::InvalidArgument(format!("V must be >= 2, got {v}")));
        }
        Ok(Self { prior: KtTable::new(v, v + 1), primed: false })
    }

    /// Counts collected over `corpus` in raster order, where the context is
    /// the left neighbour, else the upper one.
    pub fn primed(v: usize, corpus: &[TokenGrid]) -> Result<Self> {
        let mut m = Self::new(v)?;
        for g in corpus {
            if g.vocab() != v {
                return Err(Error::ModelMismatch(format!("corpus grid V={} but model V={v}", g.vocab())));
            }
            let w = g.w();
            for (pos, &sym) in g.indices().iter().enumerate() {
                let ctx = if pos % w > 0 {
                    g.indices()[pos - 1] as usize
                } else if pos >= w {
                    g.indices()[pos - w] as usize
                } else {
                    v
                };
                m.prior.update(ctx, sym);
            }
        }
        m.primed = true;
        Ok(m)
    }

    pub fn is_primed(&self) -> bool {
        self.primed
    }

    pub fn table(&self) -> &KtTable {
        &self.prior
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut hyper = HyperWriter::default();
        hyper.u32(self.prior.v as u32);
        let params = self.prior.counts.iter().map(|&c| c as f64).collect();
        Checkpoint { kind: ModelKind::Counting, hyper: hyper.finish(), params }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Counting)?;
        let mut r = HyperReader::new(&ck.hyper);
        let v = r.u32()? as usize;
        let mut m = Self::new(v)?;
        if ck.params.len() != m.prior.counts.len() {
            return Err(Error::Parse(format!("counting checkpoint has {} counts, expected {}", ck.params.len(), m.prior.counts.len())));
        }
        for (ctx, chunk) in ck.params.chunks_exact(v).enumerate() {
            for (sym, &c) in chunk.iter().enumerate() {
                if c < 0.0 || c.fract() != 0.0 {
                    return Err(Error::Parse(format!("invalid count {c}")));
                }
                m.prior.counts[ctx * v + sym] = c as u64;
                m.prior.totals[ctx] += c as u64;
            }
        }
        m.primed = true;
        Ok(m)
    }
}

struct CountingSession {
    table: KtTable,
    h: usize,
    w: usize,
    revealed: Vec<Option<u32>>,
}

impl CodingSession for CountingSession {
    fn begin_group(&mut self, _k: usize, _state: &RevealState) -> Result<()> {
        Ok(())
    }

    fn predict(&mut self, pos: usize, state: &RevealState) -> Result<Vec<f64>> {
        counting_predict(&self.table, &causal_window(pos, state), state)
    }

    fn observe(&mut self, pos: usize, sym: u32) {
        let ctx = NEIGHBOURS
            .iter()
            .filter_map(|&d| neighbour(pos, self.h, self.w, d))
            .find_map(|q| self.revealed[q])
            .map_or(self.table.vocab(), |t| t as usize);
        self.table.update(ctx, sym);
        self.revealed[pos] = Some(sym);
    }
}

impl EntropyModel for CountingModel {
    fn vocab(&self) -> usize {
        self.prior.v
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Counting
    }

    fn checkpoint_hash(&self) -> u64 {
        if self.primed {
            self.to_checkpoint().hash()
        } else {
            0
        }
    }

    fn session<'a>(&'a self, schedule: &'a MaskSchedule) -> Result<Box<dyn CodingSession + 'a>> {
        let (h, w) = (schedule.h(), schedule.w());
        Ok(Box::new(CountingSession { table: self.prior.clone(), h, w, revealed: vec![None; h * w] }))
    }
}

/// Stable 64-bit digest used for model identities.
pub(crate) fn digest64(bytes: &[u8]) -> u64 {
    let d = Sha256::digest(bytes);
    let h = u64::from_le_bytes(d[..8].try_into().unwrap());
    h.max(1)
}

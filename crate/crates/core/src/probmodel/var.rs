//! Scale-causal (VAR-style) model over schedule groups.
//!
//! Group `k` is predicted from an "upsampled" input: each of its positions
//! carries the token of the nearest position revealed by groups `< k`.
//! Attention is block-causal over groups, so predictions for group `k` never
//! depend on tokens of group `k` or later.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{snap_to_f32, Checkpoint, HyperReader, HyperWriter};
use super::field::{apply_floor, CategoricalField};
use super::mim::lr_factor;
use super::nn::{cross_entropy, softmax_into, ForwardCache, InputRecipe, Transformer, TransformerDims};
use super::train::{check_loss, Adam, TrainConfig};
use super::{CodingSession, EntropyModel, ModelKind, RevealState};
use crate::error::{Error, Result};
use crate::schedules::MaskSchedule;
use crate::tokens::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarConfig {
    pub vocab: usize,
    pub h: usize,
    pub w: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_groups: usize,
}

impl VarConfig {
    pub fn reference(vocab: usize, h: usize, w: usize) -> Self {
        Self { vocab, h, w, d_model: 64, layers: 2, heads: 4, ffn: 128, max_groups: 16 }
    }

    fn dims(&self) -> TransformerDims {
        TransformerDims {
            vocab: self.vocab,
            positions: self.h * self.w,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            groups: self.max_groups,
        }
    }
}

/// For every position, the nearest position of an earlier group (squared
/// Euclidean distance, ties to the lower raster index). `None` for group 0.
pub fn upsample_sources(schedule: &MaskSchedule) -> Vec<Option<usize>> {
    let w = schedule.w();
    let gid = schedule.group_index();
    let mut out = vec![None; schedule.num_positions()];
    let mut earlier: Vec<usize> = Vec::new();
    for g in schedule.groups() {
        for &p in g {
            let (pi, pj) = ((p / w) as i64, (p % w) as i64);
            out[p] = earlier
                .iter()
                .map(|&q| {
                    let (qi, qj) = ((q / w) as i64, (q % w) as i64);
                    ((pi - qi).pow(2) + (pj - qj).pow(2), q)
                })
                .min()
                .map(|(_, q)| q);
        }
        earlier.extend_from_slice(g);
    }
    debug_assert!(out.iter().zip(&gid).all(|(s, &g)| s.is_some() == (g > 0)));
    out
}

#[derive(Debug, Clone)]
pub struct VarModel {
    cfg: VarConfig,
    net: Transformer,
    params: Vec<f64>,
}

/// Positions of groups `0..=last` in schedule order with their group ids.
fn prefix_sequence(schedule: &MaskSchedule, last: usize) -> (Vec<usize>, Vec<usize>) {
    let mut seq = Vec::new();
    let mut gid = Vec::new();
    for (k, g) in schedule.groups().iter().enumerate().take(last + 1) {
        seq.extend_from_slice(g);
        gid.extend(std::iter::repeat_n(k, g.len()));
    }
    (seq, gid)
}

impl VarModel {
    pub fn new(cfg: VarConfig, seed: u64) -> Result<Self> {
        if cfg.max_groups == 0 {
            return Err(Error::InvalidArgument("VAR needs max_groups >= 1".into()));
        }
        let net = Transformer::new(cfg.dims())?;
        let mut params = net.init(cfg.w, &mut ChaCha8Rng::seed_from_u64(seed));
        snap_to_f32(&mut params);
        Ok(Self { cfg, net, params })
    }

    pub fn config(&self) -> &VarConfig {
        &self.cfg
    }

    pub fn transformer(&self) -> &Transformer {
        &self.net
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn zero_output(&mut self) {
        for name in ["w_out", "b_out"] {
            let id = self.net.layout.find(name).expect("output tensors exist");
            self.params[self.net.layout.get(id).range()].fill(0.0);
        }
    }

    fn check_schedule(&self, schedule: &MaskSchedule) -> Result<()> {
        if (schedule.h(), schedule.w()) != (self.cfg.h, self.cfg.w) {
            return Err(Error::ModelMismatch(format!(
                "VAR built for {}x{}, schedule is {}x{}",
                self.cfg.h,
                self.cfg.w,
                schedule.h(),
                schedule.w()
            )));
        }
        if schedule.num_groups() > self.cfg.max_groups {
            return Err(Error::ModelMismatch(format!(
                "schedule has {} groups, VAR supports {}",
                schedule.num_groups(),
                self.cfg.max_groups
            )));
        }
        Ok(())
    }

    fn recipe(&self, seq: &[usize], gid: &[usize], sources: &[Option<usize>], tokens: &[u32]) -> InputRecipe {
        let group_emb = self.net.group_emb.expect("VAR has group embeddings");
        seq.iter()
            .zip(gid)
            .map(|(&p, &g)| {
                let content = match sources[p] {
                    Some(q) => (self.net.tok_emb, tokens[q] as usize),
                    None => (self.net.special_emb, 0),
                };
                vec![content, (self.net.pos_emb, p), (group_emb, g)]
            })
            .collect()
    }

    fn run(&self, schedule: &MaskSchedule, sources: &[Option<usize>], tokens: &[u32], last: usize) -> Result<(Vec<usize>, Vec<usize>, InputRecipe, ForwardCache)> {
        let (seq, gid) = prefix_sequence(schedule, last);
        let recipe = self.recipe(&seq, &gid, sources, tokens);
        let cache = self.net.forward(&self.params, &recipe, Some(&gid))?;
        Ok((seq, gid, recipe, cache))
    }

    fn field_from(&self, seq: &[usize], gid: &[usize], cache: &ForwardCache, k: usize) -> Result<CategoricalField> {
        let v = self.cfg.vocab;
        let mut positions = Vec::new();
        let mut probs = Vec::new();
        let mut row = vec![0.0; v];
        for (r, (&p, &g)) in seq.iter().zip(gid).enumerate() {
            if g == k {
                softmax_into(cache.logits.row(r).as_slice().expect("contiguous"), &mut row);
                apply_floor(&mut row);
                positions.push(p);
                probs.extend_from_slice(&row);
            }
        }
        CategoricalField::new(v, positions, probs)
    }

    /// Predictions for group `k` given the tokens of groups `< k` (entries of
    /// `tokens` at other positions are ignored).
    pub fn forward_group(&self, schedule: &MaskSchedule, tokens: &[u32], k: usize) -> Result<CategoricalField> {
        self.check_schedule(schedule)?;
        if k >= schedule.num_groups() {
            return Err(Error::InvalidArgument(format!("group {k} of {}", schedule.num_groups())));
        }
        let sources = upsample_sources(schedule);
        let (seq, gid, _, cache) = self.run(schedule, &sources, tokens, k)?;
        self.field_from(&seq, &gid, &cache, k)
    }

    /// Teacher-forced predictions for every group from one pass over the
    /// whole grid.
    pub fn forward_all(&self, schedule: &MaskSchedule, grid: &TokenGrid) -> Result<Vec<CategoricalField>> {
        self.check_schedule(schedule)?;
        let sources = upsample_sources(schedule);
        let (seq, gid, _, cache) = self.run(schedule, &sources, grid.indices(), schedule.num_groups() - 1)?;
        (0..schedule.num_groups()).map(|k| self.field_from(&seq, &gid, &cache, k)).collect()
    }

    /// Mean cross-entropy (nats) over the positions of groups `>= 1`.
    pub fn loss_and_grad(&self, batch: &[&TokenGrid], schedule: &MaskSchedule) -> Result<(f64, Vec<f64>)> {
        self.check_schedule(schedule)?;
        let border = schedule.num_positions() - schedule.groups()[0].len();
        if border == 0 || batch.is_empty() {
            return Err(Error::InvalidArgument("nothing to predict: single-group schedule or empty batch".into()));
        }
        let weight = 1.0 / (border * batch.len()) as f64;
        let sources = upsample_sources(schedule);
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for grid in batch {
            if grid.vocab() != self.cfg.vocab {
                return Err(Error::ModelMismatch(format!("grid V={} but VAR V={}", grid.vocab(), self.cfg.vocab)));
            }
            let (seq, gid, recipe, cache) = self.run(schedule, &sources, grid.indices(), schedule.num_groups() - 1)?;
            let targets: Vec<(usize, usize)> = seq
                .iter()
                .zip(&gid)
                .enumerate()
                .filter(|(_, (_, &g))| g > 0)
                .map(|(r, (&p, _))| (r, grid.indices()[p] as usize))
                .collect();
            let (l, dl) = cross_entropy(&cache.logits, &targets, weight);
            loss += l;
            self.net.backward(&self.params, &recipe, &cache, &dl, &mut grad);
        }
        Ok((loss, grad))
    }

    pub fn train(&mut self, corpus: &[TokenGrid], schedule: &MaskSchedule, cfg: &TrainConfig) -> Result<Vec<f64>> {
        cfg.validate()?;
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("empty training corpus".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = Adam::new(self.params.len(), cfg);
        let mut losses = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            opt.set_lr(cfg.lr * lr_factor(step, cfg.steps));
            let batch: Vec<&TokenGrid> =
                (0..cfg.batch_size).map(|_| &corpus[rng.random_range(0..corpus.len())]).collect();
            let (loss, grad) = self.loss_and_grad(&batch, schedule)?;
            check_loss(loss, step, "VAR")?;
            opt.step(&mut self.params, &grad);
            losses.push(loss);
        }
        snap_to_f32(&mut self.params);
        Ok(losses)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.cfg;
        let hyper = HyperWriter::default()
            .u32(c.vocab as u32)
            .u16(c.h as u16)
            .u16(c.w as u16)
            .u16(c.d_model as u16)
            .u8(c.layers as u8)
            .u8(c.heads as u8)
            .u16(c.ffn as u16)
            .u16(c.max_groups as u16)
            .finish();
        Checkpoint { kind: ModelKind::Var, hyper, params: self.params.clone() }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Var)?;
        let mut r = HyperReader::new(&ck.hyper);
        let cfg = VarConfig {
            vocab: r.u32()? as usize,
            h: r.u16()? as usize,
            w: r.u16()? as usize,
            d_model: r.u16()? as usize,
            layers: r.u8()? as usize,
            heads: r.u8()? as usize,
            ffn: r.u16()? as usize,
            max_groups: r.u16()? as usize,
        };
        let net = Transformer::new(cfg.dims())?;
        if ck.params.len() != net.layout.total() {
            return Err(Error::Parse(format!(
                "VAR checkpoint has {} parameters, layout needs {}",
                ck.params.len(),
                net.layout.total()
            )));
        }
        Ok(Self { cfg, net, params: ck.params.clone() })
    }
}

struct VarSession<'a> {
    model: &'a VarModel,
    schedule: &'a MaskSchedule,
    sources: Vec<Option<usize>>,
    rows: Vec<Vec<f64>>,
}

impl CodingSession for VarSession<'_> {
    fn begin_group(&mut self, k: usize, state: &RevealState) -> Result<()> {
        for &p in &self.schedule.groups()[..k].concat() {
            if !state.is_revealed(p) {
                return Err(Error::Causality { pos: p });
            }
        }
        let (seq, gid, _, cache) = self.model.run(self.schedule, &self.sources, state.tokens(), k)?;
        let field = self.model.field_from(&seq, &gid, &cache, k)?;
        for (pos, row) in field.rows() {
            self.rows[pos] = row.to_vec();
        }
        Ok(())
    }

    fn predict(&mut self, pos: usize, _state: &RevealState) -> Result<Vec<f64>> {
        Ok(std::mem::take(&mut self.rows[pos]))
    }
}

impl EntropyModel for VarModel {
    fn vocab(&self) -> usize {
        self.cfg.vocab
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Var
    }

    fn checkpoint_hash(&self) -> u64 {
        self.to_checkpoint().hash()
    }

    fn session<'a>(&'a self, schedule: &'a MaskSchedule) -> Result<Box<dyn CodingSession + 'a>> {
        self.check_schedule(schedule)?;
        Ok(Box::new(VarSession {
            model: self,
            schedule,
            sources: upsample_sources(schedule),
            rows: vec![Vec::new(); schedule.num_positions()],
        }))
    }
}

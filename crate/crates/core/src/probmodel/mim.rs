//! Masked image model: a bidirectional transformer that predicts masked
//! tokens from the revealed ones.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{snap_to_f32, Checkpoint, HyperReader, HyperWriter};
use super::field::{apply_floor, CategoricalField};
use super::nn::{cross_entropy, softmax_into, InputRecipe, Transformer, TransformerDims};
use super::train::{check_loss, Adam, TrainConfig};
use super::{CodingSession, EntropyModel, ModelKind, RevealState};
use crate::error::{Error, Result};
use crate::schedules::MaskSchedule;
use crate::tokens::TokenGrid;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MimConfig {
    pub vocab: usize,
    pub h: usize,
    pub w: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl MimConfig {
    /// Reference size: d_model 64, two layers, four heads.
    pub fn reference(vocab: usize, h: usize, w: usize) -> Self {
        Self { vocab, h, w, d_model: 64, layers: 2, heads: 4, ffn: 128 }
    }

    fn dims(&self) -> TransformerDims {
        TransformerDims {
            vocab: self.vocab,
            positions: self.h * self.w,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn,
            groups: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MimModel {
    cfg: MimConfig,
    net: Transformer,
    params: Vec<f64>,
}

impl MimModel {
    pub fn new(cfg: MimConfig, seed: u64) -> Result<Self> {
        let net = Transformer::new(cfg.dims())?;
        let mut params = net.init(cfg.w, &mut ChaCha8Rng::seed_from_u64(seed));
        snap_to_f32(&mut params);
        Ok(Self { cfg, net, params })
    }

    pub fn config(&self) -> &MimConfig {
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

    /// Zeroes the output projection so that every prediction is uniform.
    pub fn zero_output(&mut self) {
        for name in ["w_out", "b_out"] {
            let id = self.net.layout.find(name).expect("output tensors exist");
            self.params[self.net.layout.get(id).range()].fill(0.0);
        }
    }

    fn check_grid(&self, h: usize, w: usize, v: usize) -> Result<()> {
        if (h, w, v) != (self.cfg.h, self.cfg.w, self.cfg.vocab) {
            return Err(Error::ModelMismatch(format!(
                "MIM built for {}x{} V={}, got {h}x{w} V={v}",
                self.cfg.h, self.cfg.w, self.cfg.vocab
            )));
        }
        Ok(())
    }

    fn recipe(&self, tokens: &[u32], revealed: &[bool]) -> InputRecipe {
        (0..tokens.len())
            .map(|p| {
                let content = if revealed[p] { (self.net.tok_emb, tokens[p] as usize) } else { (self.net.special_emb, 0) };
                vec![content, (self.net.pos_emb, p)]
            })
            .collect()
    }

    /// Floored predictions at every masked position, in raster order.
    pub fn forward_tokens(&self, tokens: &[u32], revealed: &[bool]) -> Result<CategoricalField> {
        let v = self.cfg.vocab;
        if tokens.len() != self.cfg.h * self.cfg.w || revealed.len() != tokens.len() {
            return Err(Error::Dimension(format!(
                "MIM expects {} positions, got {} tokens / {} mask entries",
                self.cfg.h * self.cfg.w,
                tokens.len(),
                revealed.len()
            )));
        }
        let masked: Vec<usize> = (0..tokens.len()).filter(|&p| !revealed[p]).collect();
        if masked.is_empty() {
            return CategoricalField::new(v, vec![], vec![]);
        }
        let cache = self.net.forward(&self.params, &self.recipe(tokens, revealed), None)?;
        let mut probs = vec![0.0; masked.len() * v];
        for (k, &p) in masked.iter().enumerate() {
            let out = &mut probs[k * v..(k + 1) * v];
            softmax_into(cache.logits.row(p).as_slice().expect("contiguous"), out);
            apply_floor(out);
        }
        CategoricalField::new(v, masked, probs)
    }

    pub fn forward(&self, grid: &TokenGrid, revealed: &[bool]) -> Result<CategoricalField> {
        self.check_grid(grid.h(), grid.w(), grid.vocab())?;
        self.forward_tokens(grid.indices(), revealed)
    }

    /// Mean cross-entropy (nats) over the masked positions of a batch, and
    /// its gradient.
    pub fn loss_and_grad(&self, batch: &[(&TokenGrid, Vec<bool>)]) -> Result<(f64, Vec<f64>)> {
        let total: usize = batch.iter().map(|(_, r)| r.iter().filter(|x| !**x).count()).sum();
        if total == 0 {
            return Err(Error::InvalidArgument("batch has no masked positions".into()));
        }
        let weight = 1.0 / total as f64;
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        for (grid, revealed) in batch {
            self.check_grid(grid.h(), grid.w(), grid.vocab())?;
            let recipe = self.recipe(grid.indices(), revealed);
            let cache = self.net.forward(&self.params, &recipe, None)?;
            let targets: Vec<(usize, usize)> =
                (0..grid.len()).filter(|&p| !revealed[p]).map(|p| (p, grid.indices()[p] as usize)).collect();
            let (l, dl) = cross_entropy(&cache.logits, &targets, weight);
            loss += l;
            self.net.backward(&self.params, &recipe, &cache, &dl, &mut grad);
        }
        Ok((loss, grad))
    }

    pub fn loss(&self, batch: &[(&TokenGrid, Vec<bool>)]) -> Result<f64> {
        let total: usize = batch.iter().map(|(_, r)| r.iter().filter(|x| !**x).count()).sum();
        let weight = 1.0 / total.max(1) as f64;
        let mut loss = 0.0;
        for (grid, revealed) in batch {
            let cache = self.net.forward(&self.params, &self.recipe(grid.indices(), revealed), None)?;
            let targets: Vec<(usize, usize)> =
                (0..grid.len()).filter(|&p| !revealed[p]).map(|p| (p, grid.indices()[p] as usize)).collect();
            loss += cross_entropy(&cache.logits, &targets, weight).0;
        }
        Ok(loss)
    }

    /// Random reveal mask: `round(r N)` positions hidden, `r` uniform in the
    /// configured ratio range, at least one hidden.
    pub fn sample_mask<R: Rng>(n: usize, cfg: &TrainConfig, rng: &mut R) -> Vec<bool> {
        let (lo, hi) = cfg.mask_ratio;
        let r = lo + (hi - lo) * rng.random::<f64>();
        let m = ((r * n as f64).round() as usize).clamp(1, n);
        let mut revealed = vec![true; n];
        for p in sample(rng, n, m) {
            revealed[p] = false;
        }
        revealed
    }

    /// One Adam step on `batch` with freshly sampled masks.
    pub fn train_step<R: Rng>(&mut self, batch: &[&TokenGrid], cfg: &TrainConfig, rng: &mut R, opt: &mut Adam) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty training batch".into()));
        }
        let items: Vec<(&TokenGrid, Vec<bool>)> =
            batch.iter().map(|g| (*g, Self::sample_mask(g.len(), cfg, rng))).collect();
        let (loss, grad) = self.loss_and_grad(&items)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!(
                "MIM loss {loss}; max |grad| {:e}",
                grad.iter().fold(0.0f64, |a, g| a.max(g.abs()))
            )));
        }
        opt.step(&mut self.params, &grad);
        Ok(loss)
    }

    /// Trains on `corpus` for `cfg.steps` steps and snaps the parameters to
    /// f32. Returns the per-step losses.
    pub fn train(&mut self, corpus: &[TokenGrid], cfg: &TrainConfig) -> Result<Vec<f64>> {
        self.train_with(corpus, cfg, |_, _| {})
    }

    pub fn train_with<F: FnMut(usize, f64)>(&mut self, corpus: &[TokenGrid], cfg: &TrainConfig, mut on_step: F) -> Result<Vec<f64>> {
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
            let loss = self.train_step(&batch, cfg, &mut rng, &mut opt)?;
            check_loss(loss, step, "MIM")?;
            on_step(step, loss);
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
            .finish();
        Checkpoint { kind: ModelKind::Mim, hyper, params: self.params.clone() }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Mim)?;
        let mut r = HyperReader::new(&ck.hyper);
        let cfg = MimConfig {
            vocab: r.u32()? as usize,
            h: r.u16()? as usize,
            w: r.u16()? as usize,
            d_model: r.u16()? as usize,
            layers: r.u8()? as usize,
            heads: r.u8()? as usize,
            ffn: r.u16()? as usize,
        };
        let net = Transformer::new(cfg.dims())?;
        if ck.params.len() != net.layout.total() {
            return Err(Error::Parse(format!(
                "MIM checkpoint has {} parameters, layout needs {}",
                ck.params.len(),
                net.layout.total()
            )));
        }
        Ok(Self { cfg, net, params: ck.params.clone() })
    }
}

/// Linear warm-up over the first 5% of steps, cosine decay to 10% after.
pub(crate) fn lr_factor(step: usize, steps: usize) -> f64 {
    let warm = (steps / 20).max(1);
    if step < warm {
        return (step + 1) as f64 / warm as f64;
    }
    let t = (step - warm) as f64 / (steps - warm).max(1) as f64;
    0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

struct MimSession<'a> {
    model: &'a MimModel,
    rows: Array2<f64>,
}

impl CodingSession for MimSession<'_> {
    fn begin_group(&mut self, _k: usize, state: &RevealState) -> Result<()> {
        let field = self.model.forward_tokens(state.tokens(), state.revealed())?;
        for (pos, row) in field.rows() {
            self.rows.row_mut(pos).assign(&ndarray::ArrayView1::from(row));
        }
        Ok(())
    }

    fn predict(&mut self, pos: usize, _state: &RevealState) -> Result<Vec<f64>> {
        Ok(self.rows.row(pos).to_vec())
    }
}

impl EntropyModel for MimModel {
    fn vocab(&self) -> usize {
        self.cfg.vocab
    }

    fn kind(&self) -> ModelKind {
        ModelKind::Mim
    }

    fn checkpoint_hash(&self) -> u64 {
        self.to_checkpoint().hash()
    }

    fn session<'a>(&'a self, schedule: &'a MaskSchedule) -> Result<Box<dyn CodingSession + 'a>> {
        self.check_grid(schedule.h(), schedule.w(), self.cfg.vocab)?;
        Ok(Box::new(MimSession { model: self, rows: Array2::zeros((schedule.num_positions(), self.cfg.vocab)) }))
    }
}

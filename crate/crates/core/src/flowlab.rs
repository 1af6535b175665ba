//! Conditional flow matching on low-dimensional targets.
//!
//! Straight probability paths `x_t = (1 - (1 - σ) t) x0 + t x1` from a
//! standard normal source, an MLP vector field conditioned on a local vector
//! `z_l` and an optional global vector `z_g` (replaced by a learned null
//! embedding when absent), classifier-free guidance and an Euler sampler.

use std::f64::consts::PI;
use std::fmt::Write as _;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::probmodel::checkpoint::{snap_to_f32, Checkpoint, HyperReader, HyperWriter};
use crate::probmodel::nn::{view, Layout, TensorSpec};
use crate::probmodel::train::{check_loss, Adam, TrainConfig};
use crate::probmodel::ModelKind;
use crate::tokens::TokenGrid;

/// Number of time features fed to the field network.
const TIME_FEATURES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct FlowConfig {
    pub sigma_min: f64,
    /// Data dimension.
    pub d: usize,
    pub zl_dim: usize,
    pub zg_dim: usize,
    pub hidden: usize,
    /// Euler steps used by [`ode_sample`] callers.
    pub steps: usize,
    /// Guidance scale.
    pub lambda: f64,
    /// Probability of replacing `z_g` by the null embedding during training.
    pub drop_prob: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { sigma_min: 1e-5, d: 2, zl_dim: 4, zg_dim: 2, hidden: 64, steps: 20, lambda: 3.0, drop_prob: 0.10 }
    }
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::InvalidArgument(format!("sigma_min {} outside [0, 1)", self.sigma_min)));
        }
        if self.d == 0 || self.hidden == 0 || self.steps == 0 {
            return Err(Error::InvalidArgument("d, hidden and steps must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("guidance scale {} must be >= 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            return Err(Error::InvalidArgument(format!("drop probability {} outside [0, 1]", self.drop_prob)));
        }
        Ok(())
    }
}

/// A point on a probability path together with its conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub t: f64,
    pub x: Vec<f64>,
    pub z_l: Vec<f64>,
    pub z_g: Option<Vec<f64>>,
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub x1: Vec<f64>,
    pub z_l: Vec<f64>,
    pub z_g: Vec<f64>,
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    Ok(())
}

/// `(1 - (1 - σ) t) x0 + t x1`.
pub fn cond_flow(x0: &[f64], x1: &[f64], t: f64, sigma_min: f64) -> Result<Vec<f64>> {
    check_t(t)?;
    same_len(x0, x1)?;
    let a = 1.0 - (1.0 - sigma_min) * t;
    Ok(x0.iter().zip(x1).map(|(p, q)| a * p + t * q).collect())
}

/// `(x1 - (1 - σ) x) / (1 - (1 - σ) t)`.
pub fn target_field(x: &[f64], x1: &[f64], t: f64, sigma_min: f64) -> Result<Vec<f64>> {
    check_t(t)?;
    same_len(x, x1)?;
    let denom = 1.0 - (1.0 - sigma_min) * t;
    if denom <= 0.0 {
        return Err(Error::InvalidArgument(format!("target field is singular at t = {t} with sigma_min = {sigma_min}")));
    }
    Ok(x.iter().zip(x1).map(|(p, q)| (q - (1.0 - sigma_min) * p) / denom).collect())
}

/// `v_u + λ (v_c - v_u)`.
pub fn cfg_combine(v_uncond: &[f64], v_cond: &[f64], lambda: f64) -> Result<Vec<f64>> {
    same_len(v_uncond, v_cond)?;
    if lambda == 1.0 {
        return Ok(v_cond.to_vec());
    }
    Ok(v_uncond.iter().zip(v_cond).map(|(u, c)| u + lambda * (c - u)).collect())
}

/// Anything that can be integrated by [`ode_sample`].
pub trait VectorField {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64], t: f64, z_l: &[f64], z_g: Option<&[f64]>) -> Result<Vec<f64>>;
}

/// Conditional target field toward a fixed `x1`; ignores conditioning.
#[derive(Debug, Clone, PartialEq)]
pub struct PointTarget {
    pub x1: Vec<f64>,
    pub sigma_min: f64,
}

impl VectorField for PointTarget {
    fn dim(&self) -> usize {
        self.x1.len()
    }

    fn eval(&self, x: &[f64], t: f64, _z_l: &[f64], _z_g: Option<&[f64]>) -> Result<Vec<f64>> {
        target_field(x, &self.x1, t, self.sigma_min)
    }
}

/// Exact marginal field carrying `N(0, I)` to `N(mu, s² I)` along the
/// straight paths: `v = mu + (σ_t' / σ_t)(x - t mu)` with
/// `σ_t² = (1 - (1 - σ) t)² + t² s²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTarget {
    pub mu: Vec<f64>,
    pub s: f64,
    pub sigma_min: f64,
}

impl GaussianTarget {
    fn sigma_t(&self, t: f64) -> (f64, f64) {
        let a = 1.0 - (1.0 - self.sigma_min) * t;
        let var = a * a + t * t * self.s * self.s;
        let sd = var.sqrt();
        let dvar = -2.0 * (1.0 - self.sigma_min) * a + 2.0 * t * self.s * self.s;
        (sd, dvar / (2.0 * sd))
    }

    /// Endpoint of the exact flow started at `x0`: `mu + σ_1 x0`.
    pub fn exact_endpoint(&self, x0: &[f64]) -> Vec<f64> {
        let (sd, _) = self.sigma_t(1.0);
        self.mu.iter().zip(x0).map(|(m, x)| m + sd * x).collect()
    }
}

impl VectorField for GaussianTarget {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn eval(&self, x: &[f64], t: f64, _z_l: &[f64], _z_g: Option<&[f64]>) -> Result<Vec<f64>> {
        same_len(x, &self.mu)?;
        let (sd, dsd) = self.sigma_t(t);
        Ok(x.iter().zip(&self.mu).map(|(xi, m)| m + dsd / sd * (xi - t * m)).collect())
    }
}

/// Standard normal draw of dimension `d` from `rng`.
pub fn normal_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Euler integration of `field` from a seeded standard normal draw at t=0
/// to t=1. With `z_g` present and `lambda != 1` every step combines the
/// conditional and unconditional predictions.
pub fn ode_sample(field: &dyn VectorField, z_l: &[f64], z_g: Option<&[f64]>, steps: usize, lambda: f64, seed: u64) -> Result<Vec<f64>> {
    let x0 = normal_vec(&mut ChaCha8Rng::seed_from_u64(seed), field.dim());
    ode_integrate(field, x0, z_l, z_g, steps, lambda)
}

/// [`ode_sample`] from a given starting point.
pub fn ode_integrate(field: &dyn VectorField, mut x: Vec<f64>, z_l: &[f64], z_g: Option<&[f64]>, steps: usize, lambda: f64) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("ode_sample needs at least one step".into()));
    }
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = i as f64 * dt;
        let v = match z_g {
            Some(g) if lambda != 1.0 => {
                let vc = field.eval(&x, t, z_l, Some(g))?;
                let vu = field.eval(&x, t, z_l, None)?;
                cfg_combine(&vu, &vc, lambda)?
            }
            _ => field.eval(&x, t, z_l, z_g)?,
        };
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi += dt * vi;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampler state became non-finite at step {i} of {steps}")));
        }
    }
    Ok(x)
}

fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    [t, (PI * t).sin(), (PI * t).cos(), (2.0 * PI * t).sin(), (2.0 * PI * t).cos()]
}

/// Two-hidden-layer tanh MLP on `[x, time features, z_l, z_g or null]`.
#[derive(Debug, Clone)]
pub struct VectorFieldModel {
    cfg: FlowConfig,
    layout: Layout,
    ids: [usize; 7],
    params: Vec<f64>,
}

/// One batch row: the network input before the `z_g` slot is filled.
struct Row<'a> {
    x: &'a [f64],
    t: f64,
    z_l: &'a [f64],
    z_g: Option<&'a [f64]>,
}

struct Cache {
    input: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    out: Array2<f64>,
}

impl VectorFieldModel {
    pub fn new(cfg: FlowConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut layout = Layout::default();
        let n_in = cfg.d + TIME_FEATURES + cfg.zl_dim + cfg.zg_dim;
        let ids = [
            layout.push("w1", n_in, cfg.hidden),
            layout.push("b1", 1, cfg.hidden),
            layout.push("w2", cfg.hidden, cfg.hidden),
            layout.push("b2", 1, cfg.hidden),
            layout.push("w3", cfg.hidden, cfg.d),
            layout.push("b3", 1, cfg.d),
            layout.push("null_zg", 1, cfg.zg_dim),
        ];
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for &id in &[ids[0], ids[2], ids[4]] {
            let spec = layout.get(id).clone();
            let scale = 1.0 / (spec.rows as f64).sqrt();
            for p in &mut params[spec.range()] {
                let z: f64 = StandardNormal.sample(&mut rng);
                *p = scale * z;
            }
        }
        snap_to_f32(&mut params);
        Ok(Self { cfg, layout, ids, params })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Sets the output layer to zero so the field is identically zero.
    pub fn zero_output(&mut self) {
        for id in [self.ids[4], self.ids[5]] {
            let r = self.layout.get(id).range();
            self.params[r].iter_mut().for_each(|p| *p = 0.0);
        }
    }

    fn spec(&self, k: usize) -> &TensorSpec {
        self.layout.get(self.ids[k])
    }

    fn check_row(&self, r: &Row) -> Result<()> {
        let c = &self.cfg;
        if r.x.len() != c.d || r.z_l.len() != c.zl_dim || r.z_g.is_some_and(|g| g.len() != c.zg_dim) {
            return Err(Error::Dimension(format!(
                "flow input dims x={} z_l={} z_g={:?}, model expects {}/{}/{}",
                r.x.len(),
                r.z_l.len(),
                r.z_g.map(|g| g.len()),
                c.d,
                c.zl_dim,
                c.zg_dim
            )));
        }
        Ok(())
    }

    fn forward_rows(&self, params: &[f64], rows: &[Row]) -> Result<Cache> {
        let c = &self.cfg;
        let n_in = self.spec(0).rows;
        let null = &params[self.spec(6).range()];
        let mut input = Array2::zeros((rows.len(), n_in));
        for (b, r) in rows.iter().enumerate() {
            self.check_row(r)?;
            let mut dst = input.row_mut(b);
            let feats = time_features(r.t);
            let zg = r.z_g.unwrap_or(null);
            for (o, v) in dst.iter_mut().zip(r.x.iter().chain(&feats).chain(r.z_l).chain(zg)) {
                *o = *v;
            }
        }
        let w1 = view(params, self.spec(0));
        let b1 = view(params, self.spec(1));
        let w2 = view(params, self.spec(2));
        let b2 = view(params, self.spec(3));
        let w3 = view(params, self.spec(4));
        let b3 = view(params, self.spec(5));
        let h1 = (input.dot(&w1) + b1).mapv(f64::tanh);
        let h2 = (h1.dot(&w2) + b2).mapv(f64::tanh);
        let out = h2.dot(&w3) + b3;
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("flow network output is non-finite (d={})", c.d)));
        }
        Ok(Cache { input, h1, h2, out })
    }

    fn backward(&self, params: &[f64], rows: &[Row], cache: &Cache, dout: &Array2<f64>, grad: &mut [f64]) {
        let w2 = view(params, self.spec(2));
        let w3 = view(params, self.spec(4));
        let w1 = view(params, self.spec(0));
        let mut put = |k: usize, g: &Array2<f64>| {
            let r = self.spec(k).range();
            for (d, s) in grad[r].iter_mut().zip(g.iter()) {
                *d += s;
            }
        };
        put(4, &cache.h2.t().dot(dout));
        put(5, &dout.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let da2 = dout.dot(&w3.t()) * cache.h2.mapv(|h| 1.0 - h * h);
        put(2, &cache.h1.t().dot(&da2));
        put(3, &da2.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let da1 = da2.dot(&w2.t()) * cache.h1.mapv(|h| 1.0 - h * h);
        put(0, &cache.input.t().dot(&da1));
        put(1, &da1.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let dx = da1.dot(&w1.t());
        let start = self.cfg.d + TIME_FEATURES + self.cfg.zl_dim;
        let null = self.spec(6).range();
        for (b, r) in rows.iter().enumerate() {
            if r.z_g.is_none() {
                for (k, gi) in null.clone().enumerate() {
                    grad[gi] += dx[[b, start + k]];
                }
            }
        }
    }

    /// Field value at a single state.
    pub fn predict(&self, state: &FlowState) -> Result<Vec<f64>> {
        check_t(state.t)?;
        let row = Row { x: &state.x, t: state.t, z_l: &state.z_l, z_g: state.z_g.as_deref() };
        Ok(self.forward_rows(&self.params, std::slice::from_ref(&row))?.out.row(0).to_vec())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let c = &self.cfg;
        let hyper = HyperWriter::default()
            .u16(c.d as u16)
            .u16(c.zl_dim as u16)
            .u16(c.zg_dim as u16)
            .u16(c.hidden as u16)
            .u16(c.steps as u16)
            .f32(c.sigma_min as f32)
            .f32(c.lambda as f32)
            .f32(c.drop_prob as f32)
            .finish();
        Checkpoint { kind: ModelKind::Flow, hyper, params: self.params.clone() }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(ModelKind::Flow)?;
        let mut r = HyperReader::new(&ck.hyper);
        let cfg = FlowConfig {
            d: r.u16()? as usize,
            zl_dim: r.u16()? as usize,
            zg_dim: r.u16()? as usize,
            hidden: r.u16()? as usize,
            steps: r.u16()? as usize,
            sigma_min: r.f32()? as f64,
            lambda: r.f32()? as f64,
            drop_prob: r.f32()? as f64,
        };
        let mut m = Self::new(cfg, 0)?;
        if ck.params.len() != m.params.len() {
            return Err(Error::Parse(format!("flow checkpoint has {} parameters, layout needs {}", ck.params.len(), m.params.len())));
        }
        m.params.copy_from_slice(&ck.params);
        Ok(m)
    }
}

impl VectorField for VectorFieldModel {
    fn dim(&self) -> usize {
        self.cfg.d
    }

    fn eval(&self, x: &[f64], t: f64, z_l: &[f64], z_g: Option<&[f64]>) -> Result<Vec<f64>> {
        let row = Row { x, t, z_l, z_g };
        Ok(self.forward_rows(&self.params, std::slice::from_ref(&row))?.out.row(0).to_vec())
    }
}

/// Per-example draws of one loss evaluation.
struct Draws {
    t: Vec<f64>,
    x0: Vec<Vec<f64>>,
    keep_zg: Vec<bool>,
}

fn draw(batch: &[FlowSample], cfg: &FlowConfig, seed: u64) -> Draws {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = Draws { t: vec![], x0: vec![], keep_zg: vec![] };
    for s in batch {
        d.t.push(rng.random::<f64>());
        d.x0.push(normal_vec(&mut rng, s.x1.len()));
        d.keep_zg.push(rng.random::<f64>() >= cfg.drop_prob);
    }
    d
}

/// Loss and gradient for explicit parameters; shared by training and the
/// gradient check.
pub fn cfm_plus_loss_grad_at(model: &VectorFieldModel, params: &[f64], batch: &[FlowSample], seed: u64) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty flow batch".into()));
    }
    let cfg = &model.cfg;
    let dr = draw(batch, cfg, seed);
    let mut xt = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for (b, s) in batch.iter().enumerate() {
        xt.push(cond_flow(&dr.x0[b], &s.x1, dr.t[b], cfg.sigma_min)?);
        targets.push(s.x1.iter().zip(&dr.x0[b]).map(|(a, x)| a - (1.0 - cfg.sigma_min) * x).collect::<Vec<f64>>());
    }
    let rows: Vec<Row> = batch
        .iter()
        .enumerate()
        .map(|(b, s)| Row { x: &xt[b], t: dr.t[b], z_l: &s.z_l, z_g: dr.keep_zg[b].then_some(s.z_g.as_slice()) })
        .collect();
    let cache = model.forward_rows(params, &rows)?;
    let n = batch.len() as f64;
    let mut dout = Array2::zeros(cache.out.dim());
    let mut loss = 0.0;
    for (b, tgt) in targets.iter().enumerate() {
        for (k, y) in tgt.iter().enumerate() {
            let e = cache.out[[b, k]] - y;
            loss += e * e / n;
            dout[[b, k]] = 2.0 * e / n;
        }
    }
    if !loss.is_finite() {
        return Err(Error::Diverged(format!("flow loss is {loss}")));
    }
    let mut grad = vec![0.0; params.len()];
    model.backward(params, &rows, &cache, &dout, &mut grad);
    Ok((loss, grad))
}

/// Mean over the batch of `|v(x_t, t, z) - (x1 - (1 - σ) x0)|²` with
/// `t ~ U[0, 1]`, `x0 ~ N(0, I)` and `z_g` dropped with the configured
/// probability, all drawn from `seed`.
pub fn cfm_plus_loss(model: &VectorFieldModel, batch: &[FlowSample], seed: u64) -> Result<f64> {
    Ok(cfm_plus_loss_grad_at(model, &model.params, batch, seed)?.0)
}

/// Fits a field to `data` with Adam. Returns the model and per-step losses.
pub fn train_toy_decoder(data: &[FlowSample], cfg: &FlowConfig, train: &TrainConfig) -> Result<(VectorFieldModel, Vec<f64>)> {
    train.validate()?;
    let first = data.first().ok_or_else(|| Error::InvalidArgument("empty flow dataset".into()))?;
    if first.x1.len() != cfg.d || first.z_l.len() != cfg.zl_dim || first.z_g.len() != cfg.zg_dim {
        return Err(Error::Dimension("dataset dims disagree with the flow config".into()));
    }
    let mut model = VectorFieldModel::new(cfg.clone(), train.seed)?;
    let mut opt = Adam::new(model.params.len(), train);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0x5eed);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let batch: Vec<FlowSample> = (0..train.batch_size).map(|_| data[rng.random_range(0..data.len())].clone()).collect();
        let (loss, grad) = cfm_plus_loss_grad_at(&model, &model.params, &batch, rng.random())?;
        check_loss(loss, step, "flow")?;
        opt.set_lr(train.lr * crate::probmodel::mim::lr_factor(step, train.steps));
        opt.step(&mut model.params, &grad);
        losses.push(loss);
    }
    snap_to_f32(&mut model.params);
    Ok((model, losses))
}

/// Normalized histogram of `grid`'s tokens over `dim` equal-width bins: the
/// local conditioning vector derived from a token grid.
pub fn grid_features(grid: &TokenGrid, dim: usize) -> Vec<f64> {
    let mut h = vec![0.0; dim];
    if dim == 0 {
        return h;
    }
    for &t in grid.indices() {
        h[t as usize * dim / grid.vocab()] += 1.0 / grid.len() as f64;
    }
    h
}

/// Two-mode 2-D mixture keyed by a one-hot `z_g`: mode `m` is centred at
/// `(±2, 0)` with standard deviation `spread`.
pub fn two_mode_dataset(n: usize, zl_dim: usize, spread: f64, seed: u64) -> Result<Vec<FlowSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mode = rng.random_range(0..2usize);
        let v = 16;
        let grid = TokenGrid::new(4, 4, v, (0..16).map(|_| rng.random_range(0..v as u32)).collect())?;
        let noise = normal_vec(&mut rng, 2);
        let cx = if mode == 0 { -2.0 } else { 2.0 };
        let mut z_g = vec![0.0; 2];
        z_g[mode] = 1.0;
        out.push(FlowSample { x1: vec![cx + spread * noise[0], spread * noise[1]], z_l: grid_features(&grid, zl_dim), z_g });
    }
    Ok(out)
}

/// Index of the mode a 2-D sample falls into: 0 for `x < 0`, else 1.
pub fn mode_of(x: &[f64]) -> usize {
    usize::from(x[0] >= 0.0)
}

/// `step,loss` lines.
pub fn curve_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{i},{l:.8}").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_endpoints() {
        let x0 = [0.3, -1.0];
        let x1 = [2.0, 5.0];
        assert_eq!(cond_flow(&x0, &x1, 0.0, 0.1).unwrap(), x0.to_vec());
        assert_eq!(cond_flow(&x0, &x1, 1.0, 0.0).unwrap(), x1.to_vec());
        assert!(cond_flow(&x0, &x1, 1.5, 0.0).is_err());
    }

    #[test]
    fn field_at_zero_and_singularity() {
        let u = target_field(&[1.0], &[3.0], 0.0, 0.2).unwrap();
        assert!((u[0] - 2.2).abs() < 1e-15);
        assert!(target_field(&[1.0], &[3.0], 1.0, 0.0).is_err());
        assert!(target_field(&[1.0], &[3.0], 1.0, 1e-5).is_ok());
    }

    #[test]
    fn cfg_examples() {
        assert_eq!(cfg_combine(&[1.0, 0.0], &[0.0, 1.0], 3.0).unwrap(), vec![-2.0, 3.0]);
        assert_eq!(cfg_combine(&[1.0, 2.0], &[5.0, 7.0], 1.0).unwrap(), vec![5.0, 7.0]);
        assert_eq!(cfg_combine(&[1.0, 2.0], &[5.0, 7.0], 0.0).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn one_euler_step_lands_on_target() {
        let f = PointTarget { x1: vec![1.5, -2.0], sigma_min: 0.0 };
        let x = ode_sample(&f, &[], None, 1, 1.0, 7).unwrap();
        assert!((x[0] - 1.5).abs() < 1e-12 && (x[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_output_model_is_zero_field() {
        let mut m = VectorFieldModel::new(FlowConfig::default(), 1).unwrap();
        m.zero_output();
        let v = m.eval(&[0.4, 0.1], 0.3, &[0.0; 4], None).unwrap();
        assert_eq!(v, vec![0.0, 0.0]);
        assert!(m.eval(&[0.4], 0.3, &[0.0; 4], None).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = VectorFieldModel::new(FlowConfig::default(), 3).unwrap();
        let back = VectorFieldModel::from_checkpoint(&Checkpoint::from_bytes(&m.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(back.params(), m.params());
        assert_eq!(back.config().hidden, 64);
    }

    #[test]
    fn features_sum_to_one() {
        let g = TokenGrid::new(2, 2, 8, vec![0, 1, 7, 7]).unwrap();
        assert_eq!(grid_features(&g, 2), vec![0.5, 0.5]);
        assert_eq!(curve_csv(&[1.0]), "step,loss\n0,1.00000000\n");
    }
}

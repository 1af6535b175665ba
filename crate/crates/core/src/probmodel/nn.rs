//! A small pre-LayerNorm transformer with hand-written backward pass.
//!
//! All parameters live in one flat `Vec<f64>` described by a [`Layout`], so
//! the optimizer, checkpoints and gradient checks can treat them uniformly.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered list of named 2-D tensors packed into a flat buffer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Layout {
    tensors: Vec<TensorSpec>,
    total: usize,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> usize {
        self.tensors.push(TensorSpec { name: name.into(), rows, cols, offset: self.total });
        self.total += rows * cols;
        self.tensors.len() - 1
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn get(&self, id: usize) -> &TensorSpec {
        &self.tensors[id]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }
}

pub(crate) fn view<'a>(data: &'a [f64], t: &TensorSpec) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((t.rows, t.cols), &data[t.range()]).expect("layout shape")
}

fn add_into(grad: &mut [f64], t: &TensorSpec, g: &Array2<f64>) {
    let dst = &mut grad[t.range()];
    for (d, s) in dst.iter_mut().zip(g.iter()) {
        *d += s;
    }
}

fn add_row_sum(grad: &mut [f64], t: &TensorSpec, g: &Array2<f64>) {
    let sums = g.sum_axis(Axis(0));
    let dst = &mut grad[t.range()];
    for (d, s) in dst.iter_mut().zip(sums.iter()) {
        *d += s;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransformerDims {
    pub vocab: usize,
    pub positions: usize,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Size of the group-embedding table; zero disables it.
    pub groups: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Tensor ids of a transformer laid out by [`Transformer::new`].
#[derive(Debug, Clone)]
pub struct Transformer {
    pub dims: TransformerDims,
    pub layout: Layout,
    pub tok_emb: usize,
    /// Learned special embedding: the mask token for MIM, start-of-scale for VAR.
    pub special_emb: usize,
    pub pos_emb: usize,
    pub group_emb: Option<usize>,
    layers: Vec<LayerIds>,
    lnf_g: usize,
    lnf_b: usize,
    w_out: usize,
    b_out: usize,
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// One row-sum of named embedding rows feeds each sequence element.
pub type InputRecipe = Vec<Vec<(usize, usize)>>;

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LnCache,
    b: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

pub struct ForwardCache {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    xf: Array2<f64>,
    pub logits: Array2<f64>,
}

impl Transformer {
    pub fn new(dims: TransformerDims) -> Result<Self> {
        if dims.heads == 0 || !dims.d_model.is_multiple_of(dims.heads) {
            return Err(Error::InvalidArgument(format!(
                "d_model {} not divisible by {} heads",
                dims.d_model, dims.heads
            )));
        }
        if dims.vocab < 2 || dims.positions == 0 || dims.layers == 0 || dims.ffn == 0 {
            return Err(Error::InvalidArgument(format!("degenerate transformer dims {dims:?}")));
        }
        let d = dims.d_model;
        let mut l = Layout::default();
        let tok_emb = l.push("tok_emb", dims.vocab, d);
        let special_emb = l.push("special_emb", 1, d);
        let pos_emb = l.push("pos_emb", dims.positions, d);
        let group_emb = (dims.groups > 0).then(|| l.push("group_emb", dims.groups, d));
        let mut layers = Vec::with_capacity(dims.layers);
        for i in 0..dims.layers {
            let mut p = |n: &str, r, c| l.push(format!("layer{i}.{n}"), r, c);
            layers.push(LayerIds {
                ln1_g: p("ln1_g", 1, d),
                ln1_b: p("ln1_b", 1, d),
                wq: p("wq", d, d),
                bq: p("bq", 1, d),
                wk: p("wk", d, d),
                bk: p("bk", 1, d),
                wv: p("wv", d, d),
                bv: p("bv", 1, d),
                wo: p("wo", d, d),
                bo: p("bo", 1, d),
                ln2_g: p("ln2_g", 1, d),
                ln2_b: p("ln2_b", 1, d),
                w1: p("w1", d, dims.ffn),
                b1: p("b1", 1, dims.ffn),
                w2: p("w2", dims.ffn, d),
                b2: p("b2", 1, d),
            });
        }
        let lnf_g = l.push("lnf_g", 1, d);
        let lnf_b = l.push("lnf_b", 1, d);
        let w_out = l.push("w_out", d, dims.vocab);
        let b_out = l.push("b_out", 1, dims.vocab);
        Ok(Self { dims, layout: l, tok_emb, special_emb, pos_emb, group_emb, layers, lnf_g, lnf_b, w_out, b_out })
    }

    /// Random initialisation. Position embeddings start from a 2-D sinusoid
    /// over a `grid_w`-wide grid and are trained from there.
    pub fn init<R: Rng>(&self, grid_w: usize, rng: &mut R) -> Vec<f64> {
        let d = self.dims.d_model;
        let mut p = vec![0.0; self.layout.total()];
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut fill = |p: &mut Vec<f64>, id: usize, std: f64| {
            for x in &mut p[self.layout.get(id).range()] {
                *x = normal.sample(rng) * std;
            }
        };
        fill(&mut p, self.tok_emb, 0.5);
        fill(&mut p, self.special_emb, 0.5);
        if let Some(g) = self.group_emb {
            fill(&mut p, g, 0.1);
        }
        let proj = 1.0 / (d as f64).sqrt();
        for ids in self.layers.clone() {
            fill(&mut p, ids.wq, proj);
            fill(&mut p, ids.wk, proj);
            fill(&mut p, ids.wv, proj);
            fill(&mut p, ids.wo, proj / (2.0 * self.dims.layers as f64).sqrt());
            fill(&mut p, ids.w1, proj);
            fill(&mut p, ids.w2, 1.0 / (self.dims.ffn as f64).sqrt() / (2.0 * self.dims.layers as f64).sqrt());
            for g in [ids.ln1_g, ids.ln2_g] {
                p[self.layout.get(g).range()].fill(1.0);
            }
        }
        p[self.layout.get(self.lnf_g).range()].fill(1.0);
        fill(&mut p, self.w_out, proj);

        let pos = self.layout.get(self.pos_emb).clone();
        let w = grid_w.max(1);
        let quarter = (d / 4).max(1);
        for n in 0..pos.rows {
            let (i, j) = ((n / w) as f64, (n % w) as f64);
            let row = &mut p[pos.offset + n * d..pos.offset + (n + 1) * d];
            for (c, x) in row.iter_mut().enumerate() {
                let band = (c % quarter) as f64;
                let freq = PI / 2.0f64.powf(band * 4.0 / quarter as f64);
                *x = match c / quarter {
                    0 => (i * freq).sin(),
                    1 => (i * freq).cos(),
                    2 => (j * freq).sin(),
                    _ => (j * freq).cos(),
                } * 0.5;
            }
        }
        p
    }

    /// Tensor ids grouped by parameter family, for gradient checks.
    pub fn families(&self) -> Vec<(&'static str, Vec<usize>)> {
        let mut f = vec![
            ("token_embedding", vec![self.tok_emb]),
            ("special_embedding", vec![self.special_emb]),
            ("position_embedding", vec![self.pos_emb]),
        ];
        if let Some(g) = self.group_emb {
            f.push(("group_embedding", vec![g]));
        }
        let (mut norm, mut attn, mut mlp) = (vec![], vec![], vec![]);
        for l in &self.layers {
            norm.extend([l.ln1_g, l.ln1_b, l.ln2_g, l.ln2_b]);
            attn.extend([l.wq, l.bq, l.wk, l.bk, l.wv, l.bv, l.wo, l.bo]);
            mlp.extend([l.w1, l.b1, l.w2, l.b2]);
        }
        norm.extend([self.lnf_g, self.lnf_b]);
        f.push(("layer_norm", norm));
        f.push(("attention", attn));
        f.push(("mlp", mlp));
        f.push(("output", vec![self.w_out, self.b_out]));
        f
    }

    fn embed(&self, params: &[f64], recipe: &InputRecipe) -> Array2<f64> {
        let d = self.dims.d_model;
        let mut x = Array2::zeros((recipe.len(), d));
        for (r, parts) in recipe.iter().enumerate() {
            let mut row = x.row_mut(r);
            for &(t, k) in parts {
                let spec = self.layout.get(t);
                let src = &params[spec.offset + k * d..spec.offset + (k + 1) * d];
                for (dst, s) in row.iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        x
    }

    /// Runs the network. `allowed(query_group, key_group)` semantics: with
    /// `groups = Some(g)` a query may attend only to keys with
    /// `g[key] <= g[query]`.
    pub fn forward(&self, params: &[f64], recipe: &InputRecipe, groups: Option<&[usize]>) -> Result<ForwardCache> {
        let n = recipe.len();
        let d = self.dims.d_model;
        let heads = self.dims.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let lay = &self.layout;
        let mut x = self.embed(params, recipe);
        let mut caches = Vec::with_capacity(self.layers.len());
        for (li, ids) in self.layers.iter().enumerate() {
            let (a, ln1) = layer_norm(&x, view(params, lay.get(ids.ln1_g)), view(params, lay.get(ids.ln1_b)));
            let q = a.dot(&view(params, lay.get(ids.wq))) + view(params, lay.get(ids.bq));
            let k = a.dot(&view(params, lay.get(ids.wk))) + view(params, lay.get(ids.bk));
            let v = a.dot(&view(params, lay.get(ids.wv))) + view(params, lay.get(ids.bv));
            let mut attn = Array2::zeros((n, d));
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let mut sc = qh.dot(&kh.t());
                sc.mapv_inplace(|z| z * scale);
                for (r, mut row) in sc.axis_iter_mut(Axis(0)).enumerate() {
                    let mut mx = f64::NEG_INFINITY;
                    for (c, z) in row.iter().enumerate() {
                        if groups.is_none_or(|g| g[c] <= g[r]) && *z > mx {
                            mx = *z;
                        }
                    }
                    let mut sum = 0.0;
                    for (c, z) in row.iter_mut().enumerate() {
                        if groups.is_none_or(|g| g[c] <= g[r]) {
                            *z = (*z - mx).exp();
                            sum += *z;
                        } else {
                            *z = 0.0;
                        }
                    }
                    row.mapv_inplace(|z| z / sum);
                }
                attn.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
                probs.push(sc);
            }
            let proj = attn.dot(&view(params, lay.get(ids.wo))) + view(params, lay.get(ids.bo));
            let x_mid = &x + &proj;
            let (b, ln2) = layer_norm(&x_mid, view(params, lay.get(ids.ln2_g)), view(params, lay.get(ids.ln2_b)));
            let u = b.dot(&view(params, lay.get(ids.w1))) + view(params, lay.get(ids.b1));
            let g = u.mapv(gelu);
            let out = g.dot(&view(params, lay.get(ids.w2))) + view(params, lay.get(ids.b2));
            x = &x_mid + &out;
            if x.iter().any(|z| !z.is_finite()) {
                return Err(Error::NonFinite(format!("activation after transformer layer {li}")));
            }
            caches.push(LayerCache { ln1, a, q, k, v, probs, attn, ln2, b, u, g });
        }
        let (xf, lnf) = layer_norm(&x, view(params, lay.get(self.lnf_g)), view(params, lay.get(self.lnf_b)));
        let logits = xf.dot(&view(params, lay.get(self.w_out))) + view(params, lay.get(self.b_out));
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::NonFinite(format!("output logits (layer {})", self.layers.len())));
        }
        Ok(ForwardCache { layers: caches, lnf, xf, logits })
    }

    /// Accumulates `d loss / d params` into `grad` given `d loss / d logits`.
    pub fn backward(
        &self,
        params: &[f64],
        recipe: &InputRecipe,
        cache: &ForwardCache,
        dlogits: &Array2<f64>,
        grad: &mut [f64],
    ) {
        let lay = &self.layout;
        let d = self.dims.d_model;
        let heads = self.dims.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        add_into(grad, lay.get(self.w_out), &cache.xf.t().dot(dlogits));
        add_row_sum(grad, lay.get(self.b_out), dlogits);
        let dxf = dlogits.dot(&view(params, lay.get(self.w_out)).t());
        let mut dx = layer_norm_backward(
            &dxf,
            &cache.lnf,
            view(params, lay.get(self.lnf_g)),
            grad,
            lay.get(self.lnf_g),
            lay.get(self.lnf_b),
        );

        for (ids, c) in self.layers.iter().zip(&cache.layers).rev() {
            // MLP branch
            add_into(grad, lay.get(ids.w2), &c.g.t().dot(&dx));
            add_row_sum(grad, lay.get(ids.b2), &dx);
            let dg = dx.dot(&view(params, lay.get(ids.w2)).t());
            let mut du = dg;
            du.zip_mut_with(&c.u, |dz, &u| *dz *= gelu_grad(u));
            add_into(grad, lay.get(ids.w1), &c.b.t().dot(&du));
            add_row_sum(grad, lay.get(ids.b1), &du);
            let db = du.dot(&view(params, lay.get(ids.w1)).t());
            let dmid = layer_norm_backward(
                &db,
                &c.ln2,
                view(params, lay.get(ids.ln2_g)),
                grad,
                lay.get(ids.ln2_g),
                lay.get(ids.ln2_b),
            );
            let dx_mid = &dx + &dmid;

            // attention branch
            add_into(grad, lay.get(ids.wo), &c.attn.t().dot(&dx_mid));
            add_row_sum(grad, lay.get(ids.bo), &dx_mid);
            let dattn = dx_mid.dot(&view(params, lay.get(ids.wo)).t());
            let n = dattn.nrows();
            let mut dq = Array2::zeros((n, d));
            let mut dk = Array2::zeros((n, d));
            let mut dv = Array2::zeros((n, d));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let p = &c.probs[h];
                let doh = dattn.slice(cols);
                dv.slice_mut(cols).assign(&p.t().dot(&doh));
                let dp = doh.dot(&c.v.slice(cols).t());
                let rowdot = (p * &dp).sum_axis(Axis(1));
                let mut dsc = dp;
                for ((mut r, pr), dotr) in dsc.axis_iter_mut(Axis(0)).zip(p.axis_iter(Axis(0))).zip(rowdot.iter()) {
                    r.zip_mut_with(&pr, |z, &pp| *z = pp * (*z - dotr) * scale);
                }
                dq.slice_mut(cols).assign(&dsc.dot(&c.k.slice(cols)));
                dk.slice_mut(cols).assign(&dsc.t().dot(&c.q.slice(cols)));
            }
            add_into(grad, lay.get(ids.wq), &c.a.t().dot(&dq));
            add_row_sum(grad, lay.get(ids.bq), &dq);
            add_into(grad, lay.get(ids.wk), &c.a.t().dot(&dk));
            add_row_sum(grad, lay.get(ids.bk), &dk);
            add_into(grad, lay.get(ids.wv), &c.a.t().dot(&dv));
            add_row_sum(grad, lay.get(ids.bv), &dv);
            let da = dq.dot(&view(params, lay.get(ids.wq)).t())
                + dk.dot(&view(params, lay.get(ids.wk)).t())
                + dv.dot(&view(params, lay.get(ids.wv)).t());
            let dxin = layer_norm_backward(
                &da,
                &c.ln1,
                view(params, lay.get(ids.ln1_g)),
                grad,
                lay.get(ids.ln1_g),
                lay.get(ids.ln1_b),
            );
            dx = dx_mid + dxin;
        }

        for (r, parts) in recipe.iter().enumerate() {
            let src = dx.row(r);
            for &(t, k) in parts {
                let spec = lay.get(t);
                let dst = &mut grad[spec.offset + k * d..spec.offset + (k + 1) * d];
                for (g, s) in dst.iter_mut().zip(src.iter()) {
                    *g += s;
                }
            }
        }
    }
}

fn layer_norm(x: &Array2<f64>, gamma: ArrayView2<f64>, beta: ArrayView2<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|z| z - mean);
        let var = row.iter().map(|z| z * z).sum::<f64>() / d;
        *is = 1.0 / (var + LN_EPS).sqrt();
        let s = *is;
        row.mapv_inplace(|z| z * s);
    }
    let y = &xhat * &gamma + beta;
    (y, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gamma: ArrayView2<f64>,
    grad: &mut [f64],
    g_spec: &TensorSpec,
    b_spec: &TensorSpec,
) -> Array2<f64> {
    add_into(grad, g_spec, &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
    add_row_sum(grad, b_spec, dy);
    let d = dy.ncols() as f64;
    let dxhat = dy * &gamma;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, dxh), xh), &is) in dx
        .axis_iter_mut(Axis(0))
        .zip(dxhat.axis_iter(Axis(0)))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .zip(cache.inv_std.iter())
    {
        let m1 = dxh.sum() / d;
        let m2 = dxh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for ((o, &a), &b) in out.iter_mut().zip(dxh.iter()).zip(xh.iter()) {
            *o = is * (a - m1 - b * m2);
        }
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

/// Softmax of one logit row into `out`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - mx).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Weighted cross-entropy (nats) at `(row, class)` targets, with
/// `d loss / d logits` for the whole logit matrix.
pub fn cross_entropy(logits: &Array2<f64>, targets: &[(usize, usize)], weight: f64) -> (f64, Array2<f64>) {
    let v = logits.ncols();
    let mut dl = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    let mut p = vec![0.0; v];
    for &(r, cls) in targets {
        let row = logits.row(r);
        let row = row.as_slice().expect("contiguous logits");
        softmax_into(row, &mut p);
        loss -= weight * p[cls].max(f64::MIN_POSITIVE).ln();
        let mut drow = dl.row_mut(r);
        for (k, dz) in drow.iter_mut().enumerate() {
            *dz += weight * (p[k] - if k == cls { 1.0 } else { 0.0 });
        }
    }
    (loss, dl)
}

//! Latent grids, codebooks and vector quantization.
//!
//! A [`TokenGrid`] is what the entropy coder compresses: an `h × w` array of
//! codebook indices. [`vq_quantize`] produces it from a real-valued
//! [`LatentGrid`] by nearest-neighbour search against a [`Codebook`].

use std::fmt::Write as _;
use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CODEBOOK_MAGIC: &[u8; 4] = b"PCVB";
pub const CODEBOOK_VERSION: u8 = 1;

/// Real-valued `h × w × c` tensor, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    h: usize,
    w: usize,
    c: usize,
    data: Vec<f64>,
}

impl LatentGrid {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if h == 0 || w == 0 || c == 0 {
            return Err(Error::Dimension(format!("latent dims must be >= 1, got {h}x{w}x{c}")));
        }
        if data.len() != h * w * c {
            return Err(Error::Dimension(format!(
                "latent data has {} values, expected {h}*{w}*{c}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("latent entry {i} is {}", data[i])));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn zeros(h: usize, w: usize, c: usize) -> Self {
        Self { h, w, c, data: vec![0.0; h * w * c] }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The `c`-vector at `(i, j)`.
    pub fn at(&self, i: usize, j: usize) -> &[f64] {
        let o = (i * self.w + j) * self.c;
        &self.data[o..o + self.c]
    }

    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let o = (i * self.w + j) * self.c;
        &mut self.data[o..o + self.c]
    }

    pub fn mse(&self, other: &LatentGrid) -> Result<f64> {
        self.check_same_shape(other)?;
        Ok(mse(&self.data, &other.data))
    }

    pub fn psnr(&self, other: &LatentGrid, peak: f64) -> Result<f64> {
        self.check_same_shape(other)?;
        psnr(&self.data, &other.data, peak)
    }

    fn check_same_shape(&self, other: &LatentGrid) -> Result<()> {
        if (self.h, self.w, self.c) != (other.h, other.w, other.c) {
            return Err(Error::Dimension(format!(
                "shape {}x{}x{} vs {}x{}x{}",
                self.h, self.w, self.c, other.h, other.w, other.c
            )));
        }
        Ok(())
    }
}

/// A table of `V` code vectors of dimension `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    v: usize,
    c: usize,
    vectors: Vec<f64>,
    id: u32,
}

impl Codebook {
    /// Builds a codebook from `V × c` row-major vectors. Rows must be distinct
    /// and finite.
    pub fn new(v: usize, c: usize, vectors: Vec<f64>) -> Result<Self> {
        if v < 2 {
            return Err(Error::InvalidArgument(format!("codebook size must be >= 2, got {v}")));
        }
        if c == 0 || vectors.len() != v * c {
            return Err(Error::Dimension(format!(
                "codebook data has {} values, expected {v}*{c}",
                vectors.len()
            )));
        }
        if vectors.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("codebook entry".into()));
        }
        for a in 0..v {
            for b in 0..a {
                if vectors[a * c..(a + 1) * c] == vectors[b * c..(b + 1) * c] {
                    return Err(Error::InvalidArgument(format!("codebook rows {b} and {a} are identical")));
                }
            }
        }
        let id = content_id(v, c, &vectors);
        Ok(Self { v, c, vectors, id })
    }

    pub fn len(&self) -> usize {
        self.v
    }

    pub fn is_empty(&self) -> bool {
        self.v == 0
    }

    pub fn dim(&self) -> usize {
        self.c
    }

    pub fn id(&self) -> u32 {
        self.id
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.c..(k + 1) * self.c]
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    /// Index of the nearest row under squared Euclidean distance. Ties go to
    /// the smallest index.
    pub fn nearest(&self, x: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.v {
            let d = sq_dist(x, self.row(k));
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CODEBOOK_MAGIC)?;
        w.write_u8(CODEBOOK_VERSION)?;
        w.write_u32::<LittleEndian>(self.v as u32)?;
        w.write_u32::<LittleEndian>(self.c as u32)?;
        for &x in &self.vectors {
            w.write_f32::<LittleEndian>(x as f32)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CODEBOOK_MAGIC {
            return Err(Error::Parse("not a codebook file (bad magic)".into()));
        }
        let version = r.read_u8()?;
        if version != CODEBOOK_VERSION {
            return Err(Error::Parse(format!("unsupported codebook version {version}")));
        }
        let v = r.read_u32::<LittleEndian>()? as usize;
        let c = r.read_u32::<LittleEndian>()? as usize;
        let mut vectors = Vec::with_capacity(v * c);
        for _ in 0..v * c {
            vectors.push(r.read_f32::<LittleEndian>()? as f64);
        }
        Self::new(v, c, vectors)
    }
}

fn content_id(v: usize, c: usize, vectors: &[f64]) -> u32 {
    let mut hasher = Sha256::new();
    hasher.update((v as u32).to_le_bytes());
    hasher.update((c as u32).to_le_bytes());
    for x in vectors {
        hasher.update((*x as f32).to_le_bytes());
    }
    let digest = hasher.finalize();
    u32::from_le_bytes([digest[0], digest[1], digest[2], digest[3]])
}

/// `h × w` grid of codebook indices in `[0, V)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenGrid {
    h: usize,
    w: usize,
    v: usize,
    indices: Vec<u32>,
}

impl TokenGrid {
    pub fn new(h: usize, w: usize, v: usize, indices: Vec<u32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Dimension(format!("grid dims must be >= 1, got {h}x{w}")));
        }
        if v < 2 {
            return Err(Error::InvalidArgument(format!("vocabulary size must be >= 2, got {v}")));
        }
        if indices.len() != h * w {
            return Err(Error::Dimension(format!("grid has {} indices, expected {}", indices.len(), h * w)));
        }
        if let Some(p) = indices.iter().position(|&x| x as usize >= v) {
            return Err(Error::InvalidArgument(format!("index {} at position {p} is >= V={v}", indices[p])));
        }
        Ok(Self { h, w, v, indices })
    }

    pub fn filled(h: usize, w: usize, v: usize, value: u32) -> Result<Self> {
        Self::new(h, w, v, vec![value; h * w])
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

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[u32] {
        &self.indices
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.indices[i * self.w + j]
    }

    /// Sets a flat position. Panics if `value >= V`.
    pub fn set(&mut self, pos: usize, value: u32) {
        assert!((value as usize) < self.v, "token {value} out of range for V={}", self.v);
        self.indices[pos] = value;
    }

    /// Text form: a `h w V` line followed by `h` lines of `w` integers.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {} {}\n", self.h, self.w, self.v);
        for i in 0..self.h {
            let row = &self.indices[i * self.w..(i + 1) * self.w];
            for (j, x) in row.iter().enumerate() {
                if j > 0 {
                    s.push(' ');
                }
                let _ = write!(s, "{x}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty token file".into()))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| Error::Parse(format!("bad header token {t:?}"))))
            .collect::<Result<_>>()?;
        let [h, w, v] = dims[..] else {
            return Err(Error::Parse(format!("header must be `h w V`, got {header:?}")));
        };
        let mut indices = Vec::with_capacity(h * w);
        for (i, line) in lines.enumerate() {
            if i >= h {
                return Err(Error::Parse(format!("more than {h} rows")));
            }
            let before = indices.len();
            for t in line.split_whitespace() {
                indices.push(t.parse::<u32>().map_err(|_| Error::Parse(format!("bad token {t:?} on row {i}")))?);
            }
            if indices.len() - before != w {
                return Err(Error::Parse(format!("row {i} has {} entries, expected {w}", indices.len() - before)));
            }
        }
        Self::new(h, w, v, indices)
    }
}

/// Maps every latent position to its nearest codebook row.
pub fn vq_quantize(latent: &LatentGrid, cb: &Codebook) -> Result<TokenGrid> {
    if latent.c != cb.c {
        return Err(Error::Dimension(format!(
            "latent has {} channels, codebook vectors have {}",
            latent.c, cb.c
        )));
    }
    if let Some(i) = latent.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("latent entry {i}")));
    }
    let indices = latent.data.chunks_exact(latent.c).map(|x| cb.nearest(x) as u32).collect();
    TokenGrid::new(latent.h, latent.w, cb.v, indices)
}

pub fn vq_dequantize(tokens: &TokenGrid, cb: &Codebook) -> Result<LatentGrid> {
    if tokens.v != cb.v {
        return Err(Error::Dimension(format!("grid V={} but codebook V={}", tokens.v, cb.v)));
    }
    let mut data = Vec::with_capacity(tokens.len() * cb.c);
    for &k in &tokens.indices {
        data.extend_from_slice(cb.row(k as usize));
    }
    Ok(LatentGrid { h: tokens.h, w: tokens.w, c: cb.c, data })
}

/// k-means with k-means++ seeding. Empty clusters are reseeded to the sample
/// farthest from its assigned centre.
pub fn codebook_train(samples: &[Vec<f64>], v: usize, iters: usize, seed: u64) -> Result<Codebook> {
    if v < 2 {
        return Err(Error::InvalidArgument(format!("codebook size must be >= 2, got {v}")));
    }
    if samples.len() < v {
        return Err(Error::InvalidArgument(format!("need at least V={v} samples, got {}", samples.len())));
    }
    let c = samples[0].len();
    if c == 0 || samples.iter().any(|s| s.len() != c) {
        return Err(Error::Dimension("samples must share a nonzero dimension".into()));
    }
    if samples.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("training sample".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = samples.len();

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(v);
    centers.push(samples[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centers[0])).collect();
    while centers.len() < v {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && r < d {
                    pick = i;
                    break;
                }
                r -= d;
            }
            if d2[pick] == 0.0 {
                // floating point residue landed on a zero-weight tail
                pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        centers.push(samples[pick].clone());
        for (i, s) in samples.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(s, &centers[centers.len() - 1]));
        }
    }

    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (i, s) in samples.iter().enumerate() {
            assign[i] = nearest_center(&centers, s).0;
        }
        let mut sums = vec![vec![0.0; c]; v];
        let mut counts = vec![0usize; v];
        for (i, s) in samples.iter().enumerate() {
            counts[assign[i]] += 1;
            for (acc, x) in sums[assign[i]].iter_mut().zip(s) {
                *acc += x;
            }
        }
        for k in 0..v {
            if counts[k] > 0 {
                for (ctr, sum) in centers[k].iter_mut().zip(&sums[k]) {
                    *ctr = sum / counts[k] as f64;
                }
            }
        }
        for k in 0..v {
            if counts[k] == 0 {
                let far = samples
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (i, nearest_center(&centers, s).1))
                    .fold((0, -1.0), |acc, (i, d)| if d > acc.1 { (i, d) } else { acc });
                centers[k] = samples[far.0].clone();
            }
        }
    }

    // break exact duplicates so that the codebook stays a set
    for a in 0..v {
        for b in 0..a {
            if centers[a] == centers[b] {
                let bump = f64::EPSILON.max(centers[a][0].abs() * 1e-12);
                centers[a][0] += bump * (a as f64);
            }
        }
    }
    Codebook::new(v, c, centers.concat())
}

fn nearest_center(centers: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, ctr) in centers.iter().enumerate() {
        let d = sq_dist(x, ctr);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Squared Euclidean distance accumulated in index order.
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    sq_dist(a, b) / a.len() as f64
}

/// Peak signal-to-noise ratio in dB. Identical inputs give `+inf`.
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!("psnr on {} vs {} values", a.len(), b.len())));
    }
    if !(peak > 0.0) {
        return Err(Error::InvalidArgument(format!("peak must be > 0, got {peak}")));
    }
    let m = mse(a, b);
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

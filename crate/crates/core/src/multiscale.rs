//! Multi-scale token maps.
//!
//! The implicit path reads every scale straight off one full-resolution
//! grid ([`extract_scales`]). The explicit residual path
//! ([`residual_quantize`], feature `experimental`) quantizes a latent scale
//! by scale, each map coding what the coarser ones left over.

use crate::coder::bitstream::{Bitstream, Header, Layout};
use crate::coder::{quantize, Checksum, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::probmodel::ModelKind;
use crate::schedules::implicit_var_schedule;
use crate::tokens::TokenGrid;
#[cfg(feature = "experimental")]
use crate::tokens::{vq_dequantize, vq_quantize, Codebook, LatentGrid};

/// Newly revealed positions of one scale and their tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Border {
    pub positions: Vec<usize>,
    pub tokens: Vec<u32>,
}

/// Splits `grid` into the borders of the nested scale lattices.
pub fn extract_scales(grid: &TokenGrid, scales: &[(usize, usize)]) -> Result<Vec<Border>> {
    let sched = implicit_var_schedule(grid.h(), grid.w(), scales)?;
    Ok(sched
        .groups()
        .iter()
        .map(|g| Border { positions: g.clone(), tokens: g.iter().map(|&p| grid.indices()[p]).collect() })
        .collect())
}

/// Square token maps of increasing side, all over one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleStack {
    v: usize,
    maps: Vec<TokenGrid>,
}

impl ScaleStack {
    pub fn new(v: usize, maps: Vec<TokenGrid>) -> Result<Self> {
        if maps.is_empty() {
            return Err(Error::InvalidArgument("a scale stack needs at least one map".into()));
        }
        for (k, m) in maps.iter().enumerate() {
            if m.h() != m.w() {
                return Err(Error::Dimension(format!("map {k} is {}x{}, not square", m.h(), m.w())));
            }
            if m.vocab() != v {
                return Err(Error::Dimension(format!("map {k} has V={} but the stack V={v}", m.vocab())));
            }
            if k > 0 && m.h() <= maps[k - 1].h() {
                return Err(Error::Dimension(format!("scale {} follows {}; sides must increase", m.h(), maps[k - 1].h())));
            }
        }
        Ok(Self { v, maps })
    }

    pub fn vocab(&self) -> usize {
        self.v
    }

    pub fn scales(&self) -> Vec<usize> {
        self.maps.iter().map(|m| m.h()).collect()
    }

    pub fn maps(&self) -> &[TokenGrid] {
        &self.maps
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

/// Codes every map of `stack` under the uniform prior into the explicit
/// stack container.
pub fn encode_stack(stack: &ScaleStack) -> Result<Bitstream> {
    let side = *stack.scales().last().expect("stack is nonempty");
    let side16 = u16::try_from(side).map_err(|_| Error::Dimension("stack side exceeds u16".into()))?;
    let v = stack.v;
    let uniform = quantize(&vec![1.0 / v as f64; v])?;
    let mut enc = RangeEncoder::new();
    let mut sum = Checksum::default();
    let mut offset = 0;
    for m in &stack.maps {
        for (p, &t) in m.indices().iter().enumerate() {
            enc.encode(&uniform, t as usize);
            sum.push(offset + p, t);
        }
        offset += m.len();
    }
    let payload = enc.finish();
    let header = Header {
        h: side16,
        w: side16,
        v: v as u32,
        layout: Layout::Stack(stack.scales().iter().map(|&s| (s as u16, s as u16)).collect()),
        groups_transmitted: u8::try_from(stack.len()).map_err(|_| Error::InvalidArgument("more than 255 scales".into()))?,
        model_kind: ModelKind::Uniform,
        model_hash: 0,
        sample_seed: 0,
        checksum: sum.finish(),
        payload_len: payload.len() as u32,
    };
    Ok(Bitstream { header, payload })
}

pub fn decode_stack(bs: &Bitstream) -> Result<ScaleStack> {
    let Layout::Stack(scales) = &bs.header.layout else {
        return Err(Error::Bitstream("not an explicit scale-stack stream".into()));
    };
    if scales.len() != bs.header.groups_transmitted as usize {
        return Err(Error::Bitstream("scale count disagrees with the transmitted group count".into()));
    }
    if scales.iter().any(|&(a, b)| a != b || a == 0) {
        return Err(Error::Bitstream(format!("stack scales {scales:?} are not positive squares")));
    }
    let v = bs.header.v as usize;
    let uniform = quantize(&vec![1.0 / v as f64; v])?;
    let mut dec = RangeDecoder::new(&bs.payload);
    let mut sum = Checksum::default();
    let mut maps = Vec::with_capacity(scales.len());
    let mut offset = 0;
    for &(s, _) in scales {
        let n = s as usize * s as usize;
        let mut t = Vec::with_capacity(n);
        for p in 0..n {
            let sym = dec.decode(&uniform)? as u32;
            sum.push(offset + p, sym);
            t.push(sym);
        }
        offset += n;
        maps.push(TokenGrid::new(s as usize, s as usize, v, t)?);
    }
    if dec.overrun() > 4 {
        return Err(Error::Truncated("stack payload ended early".into()));
    }
    let actual = sum.finish();
    if actual != bs.header.checksum {
        return Err(Error::Checksum { expected: bs.header.checksum, actual });
    }
    ScaleStack::new(v, maps)
}

/// `bins[i]` is the coarse index covering fine index `i` when `n` cells are
/// split into `s` contiguous bins `[floor(a n / s), floor((a+1) n / s))`.
#[cfg(feature = "experimental")]
fn bins(n: usize, s: usize) -> Vec<usize> {
    let mut out = vec![0; n];
    for a in 0..s {
        for slot in out.iter_mut().take((a + 1) * n / s).skip(a * n / s) {
            *slot = a;
        }
    }
    out
}

/// Area average of `x` onto an `s × s` grid.
#[cfg(feature = "experimental")]
pub fn downsample(x: &LatentGrid, s: usize) -> Result<LatentGrid> {
    let (h, w, c) = (x.h(), x.w(), x.c());
    if s == 0 || s > h || s > w {
        return Err(Error::Dimension(format!("cannot downsample {h}x{w} to {s}x{s}")));
    }
    let (bi, bj) = (bins(h, s), bins(w, s));
    let mut out = LatentGrid::zeros(s, s, c);
    let mut n = vec![0usize; s * s];
    for i in 0..h {
        for j in 0..w {
            let (a, b) = (bi[i], bj[j]);
            n[a * s + b] += 1;
            for (o, v) in out.at_mut(a, b).iter_mut().zip(x.at(i, j)) {
                *o += v;
            }
        }
    }
    for a in 0..s {
        for b in 0..s {
            let k = n[a * s + b] as f64;
            out.at_mut(a, b).iter_mut().for_each(|v| *v /= k);
        }
    }
    Ok(out)
}

/// Nearest-neighbour upsampling of a coarse grid to `h × w`, each fine cell
/// taking the value of the bin that covers it.
#[cfg(feature = "experimental")]
pub fn upsample(x: &LatentGrid, h: usize, w: usize) -> Result<LatentGrid> {
    if x.h() > h || x.w() > w {
        return Err(Error::Dimension(format!("cannot upsample {}x{} to {h}x{w}", x.h(), x.w())));
    }
    let (bi, bj) = (bins(h, x.h()), bins(w, x.w()));
    let mut out = LatentGrid::zeros(h, w, x.c());
    for i in 0..h {
        for j in 0..w {
            out.at_mut(i, j).copy_from_slice(x.at(bi[i], bj[j]));
        }
    }
    Ok(out)
}

#[cfg(feature = "experimental")]
fn check_finite(x: &LatentGrid, scale: usize, what: &str) -> Result<()> {
    if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "{what} at scale {scale}: element {i} is {} (max |x| before it {:e})",
            x.data()[i],
            x.data()[..i].iter().fold(0.0f64, |a, v| a.max(v.abs()))
        )));
    }
    Ok(())
}

/// Residual multi-scale quantization of a square latent.
#[cfg(feature = "experimental")]
pub fn residual_quantize(latent: &LatentGrid, cb: &Codebook, scales: &[usize]) -> Result<ScaleStack> {
    let (h, w) = (latent.h(), latent.w());
    if h != w {
        return Err(Error::Dimension(format!("residual quantization needs a square latent, got {h}x{w}")));
    }
    if scales.last() != Some(&h) {
        return Err(Error::Dimension(format!("last scale must be the full side {h}, got {scales:?}")));
    }
    check_finite(latent, 0, "input latent")?;
    let mut f = latent.clone();
    let mut maps = Vec::with_capacity(scales.len());
    for (k, &s) in scales.iter().enumerate() {
        let r = vq_quantize(&downsample(&f, s)?, cb)?;
        let up = upsample(&vq_dequantize(&r, cb)?, h, w)?;
        for (a, b) in f.data_mut().iter_mut().zip(up.data()) {
            *a -= b;
        }
        check_finite(&f, k, "residual")?;
        maps.push(r);
    }
    ScaleStack::new(cb.len(), maps)
}

/// Sum of the upsampled dequantized maps.
#[cfg(feature = "experimental")]
pub fn residual_dequantize(stack: &ScaleStack, cb: &Codebook) -> Result<LatentGrid> {
    if stack.vocab() != cb.len() {
        return Err(Error::Dimension(format!("stack V={} but codebook has {} rows", stack.vocab(), cb.len())));
    }
    let side = *stack.scales().last().expect("stack is nonempty");
    let mut out = LatentGrid::zeros(side, side, cb.dim());
    for m in stack.maps() {
        let up = upsample(&vq_dequantize(m, cb)?, side, side)?;
        for (a, b) in out.data_mut().iter_mut().zip(up.data()) {
            *a += b;
        }
    }
    Ok(out)
}

//! Lossless coding of token grids, and the hybrid decode that samples the
//! groups a stream leaves out.

pub mod bitstream;
pub mod range;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use bitstream::{Bitstream, Header, Layout};
pub use range::{quantize, RangeDecoder, RangeEncoder};

use crate::error::{Error, Result};
use crate::probmodel::{check_compatible, drive, EntropyModel};
use crate::schedules::MaskSchedule;
use crate::tokens::TokenGrid;

/// Decoders tolerate reading this many zero bytes past the payload.
const MAX_OVERRUN: usize = 4;

/// Running checksum over transmitted `(pos, sym)` pairs in coding order.
#[derive(Default)]
pub(crate) struct Checksum(Sha256);

impl Checksum {
    pub fn push(&mut self, pos: usize, sym: u32) {
        self.0.update((pos as u32).to_le_bytes());
        self.0.update(sym.to_le_bytes());
    }

    pub fn finish(self) -> u32 {
        let d = self.0.finalize();
        u32::from_le_bytes([d[0], d[1], d[2], d[3]])
    }
}

fn table_hash(cum: &[u32]) -> u64 {
    let mut h = DefaultHasher::new();
    cum.hash(&mut h);
    h.finish()
}

/// Encodes all groups of `grid`.
pub fn encode_grid(grid: &TokenGrid, sched: &MaskSchedule, model: &dyn EntropyModel) -> Result<Bitstream> {
    encode_prefix(grid, sched, model, sched.num_groups(), 0)
}

/// Encodes the first `groups` groups; the rest are left for
/// [`hybrid_decode`] to sample with `sample_seed`.
pub fn encode_prefix(
    grid: &TokenGrid,
    sched: &MaskSchedule,
    model: &dyn EntropyModel,
    groups: usize,
    sample_seed: u64,
) -> Result<Bitstream> {
    encode_traced(grid, sched, model, groups, sample_seed, None)
}

/// As [`encode_prefix`], additionally recording a hash of every quantized
/// frequency table in coding order.
pub fn encode_traced(
    grid: &TokenGrid,
    sched: &MaskSchedule,
    model: &dyn EntropyModel,
    groups: usize,
    sample_seed: u64,
    trace: Option<&mut Vec<u64>>,
) -> Result<Bitstream> {
    encode_inner(grid, sched, model, groups, sample_seed, trace, None)
}

/// Encodes all groups and also returns the model cross-entropy in bits,
/// saving a second pass over the model.
pub fn encode_with_rate(grid: &TokenGrid, sched: &MaskSchedule, model: &dyn EntropyModel) -> Result<(Bitstream, f64)> {
    let mut bits = 0.0;
    let bs = encode_inner(grid, sched, model, sched.num_groups(), 0, None, Some(&mut bits))?;
    Ok((bs, bits))
}

fn encode_inner(
    grid: &TokenGrid,
    sched: &MaskSchedule,
    model: &dyn EntropyModel,
    groups: usize,
    sample_seed: u64,
    mut trace: Option<&mut Vec<u64>>,
    mut rate: Option<&mut f64>,
) -> Result<Bitstream> {
    check_compatible(model, grid, sched)?;
    let k_total = sched.num_groups();
    if groups > k_total {
        return Err(Error::InvalidArgument(format!("cannot transmit {groups} of {k_total} groups")));
    }
    let gt = u8::try_from(groups).map_err(|_| Error::InvalidArgument(format!("{groups} groups do not fit the header")))?;
    let h = u16::try_from(grid.h()).map_err(|_| Error::Dimension("grid height exceeds u16".into()))?;
    let w = u16::try_from(grid.w()).map_err(|_| Error::Dimension("grid width exceeds u16".into()))?;
    let mut enc = RangeEncoder::new();
    let mut sum = Checksum::default();
    drive(model, sched, groups, |_, pos, row| {
        let cum = quantize(row).map_err(|e| at_pos(e, pos))?;
        if let Some(t) = trace.as_deref_mut() {
            t.push(table_hash(&cum));
        }
        let sym = grid.indices()[pos];
        if let Some(r) = rate.as_deref_mut() {
            *r -= row[sym as usize].log2();
        }
        enc.encode(&cum, sym as usize);
        sum.push(pos, sym);
        Ok(sym)
    })?;
    let payload = enc.finish();
    let header = Header {
        h,
        w,
        v: model.vocab() as u32,
        layout: Layout::Schedule(sched.kind().clone()),
        groups_transmitted: gt,
        model_kind: model.kind(),
        model_hash: model.checkpoint_hash(),
        sample_seed,
        checksum: sum.finish(),
        payload_len: payload.len() as u32,
    };
    log::debug!("encoded {groups}/{k_total} groups into {} payload bytes", payload.len());
    Ok(Bitstream { header, payload })
}

fn at_pos(e: Error, pos: usize) -> Error {
    match e {
        Error::BadProbabilities { reason, .. } => Error::BadProbabilities { pos, reason },
        other => other,
    }
}

/// Checks that `model` is the one the stream was coded with and rebuilds the
/// schedule from the header.
pub fn stream_schedule(bs: &Bitstream, model: &dyn EntropyModel) -> Result<MaskSchedule> {
    let hd = &bs.header;
    let kind = match &hd.layout {
        Layout::Schedule(kind) => kind,
        Layout::Stack(_) => {
            return Err(Error::Bitstream("stream holds an explicit scale stack; decode it with the multiscale container".into()))
        }
    };
    if hd.model_kind != model.kind() {
        return Err(Error::ModelMismatch(format!(
            "stream was coded with a {} model but a {} model was supplied",
            hd.model_kind.name(),
            model.kind().name()
        )));
    }
    if hd.model_hash != model.checkpoint_hash() {
        return Err(Error::ModelMismatch(format!(
            "checkpoint hash {:016x} does not match the stream's {:016x}; sender and receiver models differ",
            model.checkpoint_hash(),
            hd.model_hash
        )));
    }
    if hd.v as usize != model.vocab() {
        return Err(Error::ModelMismatch(format!("stream V={} but model V={}", hd.v, model.vocab())));
    }
    let sched = MaskSchedule::build(kind, hd.h as usize, hd.w as usize)?;
    if hd.groups_transmitted as usize > sched.num_groups() {
        return Err(Error::Bitstream(format!(
            "header claims {} groups but the schedule has {}",
            hd.groups_transmitted,
            sched.num_groups()
        )));
    }
    Ok(sched)
}

/// Exact inverse of [`encode_grid`]. Streams missing groups are refused.
pub fn decode_grid(bs: &Bitstream, model: &dyn EntropyModel) -> Result<TokenGrid> {
    decode_traced(bs, model, None)
}

pub fn decode_traced(bs: &Bitstream, model: &dyn EntropyModel, trace: Option<&mut Vec<u64>>) -> Result<TokenGrid> {
    let sched = stream_schedule(bs, model)?;
    let gt = bs.header.groups_transmitted as usize;
    if gt < sched.num_groups() {
        return Err(Error::Bitstream(format!(
            "stream transmits {gt} of {} groups; use hybrid_decode",
            sched.num_groups()
        )));
    }
    reconstruct(bs, model, &sched, None, trace)
}

/// Decodes the transmitted groups and samples the rest from the model at
/// temperature 1 with a ChaCha8 stream seeded by `seed`.
pub fn hybrid_decode(bs: &Bitstream, model: &dyn EntropyModel, seed: u64) -> Result<TokenGrid> {
    let sched = stream_schedule(bs, model)?;
    reconstruct(bs, model, &sched, Some(seed), None)
}

fn reconstruct(
    bs: &Bitstream,
    model: &dyn EntropyModel,
    sched: &MaskSchedule,
    seed: Option<u64>,
    mut trace: Option<&mut Vec<u64>>,
) -> Result<TokenGrid> {
    let gt = bs.header.groups_transmitted as usize;
    let mut dec = RangeDecoder::new(&bs.payload);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
    let mut checked = false;
    let total = if seed.is_some() { sched.num_groups() } else { gt };
    let check = |dec: &RangeDecoder, sum: Checksum| -> Result<()> {
        if dec.overrun() > MAX_OVERRUN {
            return Err(Error::Truncated(format!("payload ended {} bytes early", dec.overrun() - MAX_OVERRUN)));
        }
        let actual = sum.finish();
        if actual != bs.header.checksum {
            return Err(Error::Checksum { expected: bs.header.checksum, actual });
        }
        Ok(())
    };
    let mut pending = Some(Checksum::default());
    let state = drive(model, sched, total, |k, pos, row| {
        if k < gt {
            let cum = quantize(row).map_err(|e| at_pos(e, pos))?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(table_hash(&cum));
            }
            let sym = dec.decode(&cum)? as u32;
            pending.as_mut().expect("checksum open while decoding").push(pos, sym);
            Ok(sym)
        } else {
            if !checked {
                check(&dec, pending.take().expect("checksum checked once"))?;
                checked = true;
            }
            Ok(sample(row, &mut rng))
        }
    })?;
    if !checked {
        check(&dec, pending.take().expect("checksum checked once"))?;
    }
    state.into_grid()
}

/// Inverse-CDF draw from `row`.
pub fn sample(row: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (row.len() - 1) as u32
}

/// `h·w·log2 V / (H·W)`.
pub fn rate_uniform(h: usize, w: usize, v: usize, img_h: usize, img_w: usize) -> Result<f64> {
    if h == 0 || w == 0 || img_h == 0 || img_w == 0 {
        return Err(Error::InvalidArgument("dimensions must be positive".into()));
    }
    if v < 2 {
        return Err(Error::InvalidArgument(format!("V must be >= 2, got {v}")));
    }
    Ok((h * w) as f64 * (v as f64).log2() / (img_h * img_w) as f64)
}

/// `100 (1 - bpp / baseline)`.
pub fn savings_percent(bpp: f64, baseline: f64) -> Result<f64> {
    if !(baseline > 0.0) {
        return Err(Error::InvalidArgument(format!("baseline bpp must be positive, got {baseline}")));
    }
    Ok(100.0 * (1.0 - bpp / baseline))
}

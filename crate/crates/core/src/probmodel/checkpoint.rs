//! `PCVM` model checkpoints.
//!
//! Layout (little-endian): magic `PCVM`, version u8, model-kind u8,
//! hyperparameter block length u16 + bytes, parameter count u32, then the
//! parameters as f32 in declared order.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::counting::digest64;
use super::ModelKind;
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"PCVM";
pub const MODEL_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub hyper: Vec<u8>,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_u8(MODEL_VERSION)?;
        w.write_u8(self.kind as u8)?;
        let hl = u16::try_from(self.hyper.len()).map_err(|_| Error::InvalidArgument("hyperparameter block too long".into()))?;
        w.write_u16::<LittleEndian>(hl)?;
        w.write_all(&self.hyper)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for &p in &self.params {
            w.write_f32::<LittleEndian>(p as f32)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(12 + self.hyper.len() + 4 * self.params.len());
        self.write_to(&mut b).expect("writing to a Vec cannot fail");
        b
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Truncated("checkpoint magic".into()))?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Parse("not a model checkpoint (bad magic)".into()));
        }
        let version = r.read_u8()?;
        if version != MODEL_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint version {version}")));
        }
        let kind = ModelKind::from_u8(r.read_u8()?)?;
        let hl = r.read_u16::<LittleEndian>()? as usize;
        let mut hyper = vec![0u8; hl];
        r.read_exact(&mut hyper).map_err(|_| Error::Truncated("checkpoint hyperparameters".into()))?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(n.min(1 << 24));
        for i in 0..n {
            let p = r.read_f32::<LittleEndian>().map_err(|_| Error::Truncated(format!("checkpoint parameter {i} of {n}")))?;
            params.push(p as f64);
        }
        Ok(Self { kind, hyper, params })
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self> {
        Self::read_from(b)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Identity recorded in bitstreams: first 8 bytes of SHA-256 over the
    /// serialized checkpoint, never zero.
    pub fn hash(&self) -> u64 {
        digest64(&self.to_bytes())
    }

    pub fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::ModelMismatch(format!(
                "checkpoint holds a {} model, expected {}",
                self.kind.name(),
                kind.name()
            )));
        }
        Ok(())
    }
}

/// Rounds every parameter to the nearest f32 so that an in-memory model and
/// its reloaded checkpoint are bit-identical.
pub fn snap_to_f32(params: &mut [f64]) {
    for p in params {
        *p = *p as f32 as f64;
    }
}

#[derive(Default)]
pub(crate) struct HyperWriter(Vec<u8>);

impl HyperWriter {
    pub fn u8(&mut self, x: u8) -> &mut Self {
        self.0.push(x);
        self
    }

    pub fn u16(&mut self, x: u16) -> &mut Self {
        self.0.extend_from_slice(&x.to_le_bytes());
        self
    }

    pub fn u32(&mut self, x: u32) -> &mut Self {
        self.0.extend_from_slice(&x.to_le_bytes());
        self
    }

    pub fn f32(&mut self, x: f32) -> &mut Self {
        self.0.extend_from_slice(&x.to_le_bytes());
        self
    }

    pub fn finish(&mut self) -> Vec<u8> {
        std::mem::take(&mut self.0)
    }
}

pub(crate) struct HyperReader<'a>(&'a [u8]);

impl<'a> HyperReader<'a> {
    pub fn new(b: &'a [u8]) -> Self {
        Self(b)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        if self.0.len() < N {
            return Err(Error::Truncated("checkpoint hyperparameter block".into()));
        }
        let (a, rest) = self.0.split_at(N);
        self.0 = rest;
        Ok(a.try_into().unwrap())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take()?))
    }
}

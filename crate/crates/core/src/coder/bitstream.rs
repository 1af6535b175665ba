//! The `.pcv2` container. See `docs/bitstream.md` for the byte layout.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::probmodel::ModelKind;
use crate::schedules::ScheduleKind;

pub const MAGIC: &[u8; 4] = b"PCV2";
pub const VERSION: u8 = 1;
/// Schedule kind byte of the explicit multi-scale container.
pub const STACK_KIND: u8 = 4;

/// What the payload is laid out over.
#[derive(Debug, Clone, PartialEq)]
pub enum Layout {
    /// A single `h × w` grid coded under a masking schedule.
    Schedule(ScheduleKind),
    /// Explicit scale stack: one square map per `(rows, cols)` entry, coded
    /// one after the other.
    Stack(Vec<(u16, u16)>),
}

impl Layout {
    fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        match self {
            Layout::Schedule(kind) => kind.write_to(w),
            Layout::Stack(scales) => {
                w.write_u8(STACK_KIND)?;
                let n = u8::try_from(scales.len()).map_err(|_| Error::Bitstream("more than 255 scales".into()))?;
                w.write_u8(n)?;
                for &(a, b) in scales {
                    w.write_u16::<LittleEndian>(a)?;
                    w.write_u16::<LittleEndian>(b)?;
                }
                Ok(())
            }
        }
    }

    fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let code = r.read_u8()?;
        if code == STACK_KIND {
            let n = r.read_u8()? as usize;
            let mut scales = Vec::with_capacity(n);
            for _ in 0..n {
                scales.push((r.read_u16::<LittleEndian>()?, r.read_u16::<LittleEndian>()?));
            }
            return Ok(Layout::Stack(scales));
        }
        Ok(Layout::Schedule(ScheduleKind::read_params(code, r)?))
    }

    fn serialized_len(&self) -> usize {
        match self {
            Layout::Schedule(kind) => kind.serialized_len(),
            Layout::Stack(scales) => 2 + 4 * scales.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub h: u16,
    pub w: u16,
    pub v: u32,
    pub layout: Layout,
    pub groups_transmitted: u8,
    pub model_kind: ModelKind,
    /// Checkpoint hash of the coding model, 0 for checkpoint-free models.
    pub model_hash: u64,
    /// Seed for sampling the groups that were not transmitted.
    pub sample_seed: u64,
    /// First four bytes of SHA-256 over the transmitted `(pos, sym)` pairs.
    pub checksum: u32,
    pub payload_len: u32,
}

impl Header {
    /// Bytes taken by the header, including magic and payload length.
    pub fn byte_len(&self) -> usize {
        4 + 1 + 2 + 2 + 4 + self.layout.serialized_len() + 1 + 1 + 8 + 8 + 4 + 4
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u8(VERSION)?;
        w.write_u16::<LittleEndian>(self.h)?;
        w.write_u16::<LittleEndian>(self.w)?;
        w.write_u32::<LittleEndian>(self.v)?;
        self.layout.write_to(&mut w)?;
        w.write_u8(self.groups_transmitted)?;
        w.write_u8(self.model_kind as u8)?;
        w.write_u64::<LittleEndian>(self.model_hash)?;
        w.write_u64::<LittleEndian>(self.sample_seed)?;
        w.write_u32::<LittleEndian>(self.checksum)?;
        w.write_u32::<LittleEndian>(self.payload_len)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Truncated("stream shorter than the magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Bitstream(format!("bad magic {magic:02x?}, not a PCV2 stream")));
        }
        let mut body = || -> std::io::Result<Result<Header>> {
            let version = r.read_u8()?;
            if version != VERSION {
                return Ok(Err(Error::Bitstream(format!("unsupported stream version {version}"))));
            }
            let h = r.read_u16::<LittleEndian>()?;
            let w = r.read_u16::<LittleEndian>()?;
            let v = r.read_u32::<LittleEndian>()?;
            let layout = match Layout::read_from(&mut r) {
                Ok(l) => l,
                Err(Error::Io(e)) => return Err(e),
                Err(e) => return Ok(Err(e)),
            };
            let groups_transmitted = r.read_u8()?;
            let model_kind = match ModelKind::from_u8(r.read_u8()?) {
                Ok(k) => k,
                Err(e) => return Ok(Err(e)),
            };
            let model_hash = r.read_u64::<LittleEndian>()?;
            let sample_seed = r.read_u64::<LittleEndian>()?;
            let checksum = r.read_u32::<LittleEndian>()?;
            let payload_len = r.read_u32::<LittleEndian>()?;
            Ok(Ok(Header { h, w, v, layout, groups_transmitted, model_kind, model_hash, sample_seed, checksum, payload_len }))
        };
        match body() {
            Ok(res) => res,
            Err(_) => Err(Error::Truncated("stream ends inside the header".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub header: Header,
    pub payload: Vec<u8>,
}

impl Bitstream {
    pub fn payload_bits(&self) -> u64 {
        8 * self.payload.len() as u64
    }

    pub fn header_bits(&self) -> u64 {
        8 * self.header.byte_len() as u64
    }

    /// Payload bits per pixel of an `img_h × img_w` image; header excluded.
    pub fn bpp(&self, img_h: usize, img_w: usize) -> f64 {
        self.payload_bits() as f64 / (img_h * img_w) as f64
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::with_capacity(self.header.byte_len() + self.payload.len());
        self.header.write_to(&mut b).expect("writing to a Vec cannot fail");
        b.extend_from_slice(&self.payload);
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let header = Header::read_from(&mut r)?;
        let n = header.payload_len as usize;
        if r.len() < n {
            return Err(Error::Truncated(format!("payload declares {n} bytes but only {} remain", r.len())));
        }
        if r.len() > n {
            return Err(Error::Bitstream(format!("{} trailing bytes after the payload", r.len() - n)));
        }
        Ok(Self { header, payload: r.to_vec() })
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn write_file(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(layout: Layout) -> Bitstream {
        let payload = vec![1, 2, 3, 250];
        Bitstream {
            header: Header {
                h: 8,
                w: 8,
                v: 128,
                layout,
                groups_transmitted: 2,
                model_kind: ModelKind::Mim,
                model_hash: 0xdead_beef_0123_4567,
                sample_seed: 9,
                checksum: 77,
                payload_len: payload.len() as u32,
            },
            payload,
        }
    }

    #[test]
    fn header_round_trips() {
        for layout in [
            Layout::Schedule(ScheduleKind::Checkerboard),
            Layout::Schedule(ScheduleKind::Qlds { alpha: 2.2, steps: 5 }),
            Layout::Schedule(ScheduleKind::ImplicitVar { scales: vec![(2, 2), (8, 8)] }),
            Layout::Stack(vec![(1, 1), (2, 2)]),
        ] {
            let bs = sample(layout);
            let bytes = bs.to_bytes();
            assert_eq!(bytes.len(), bs.header.byte_len() + 4);
            let back = Bitstream::from_bytes(&bytes).unwrap();
            assert_eq!(back, bs);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn checkerboard_header_is_forty_bytes() {
        assert_eq!(sample(Layout::Schedule(ScheduleKind::Checkerboard)).header.byte_len(), 40);
    }

    #[test]
    fn truncation_and_garbage_rejected() {
        let bytes = sample(Layout::Schedule(ScheduleKind::Quincunx)).to_bytes();
        for cut in 0..bytes.len() {
            assert!(Bitstream::from_bytes(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Bitstream::from_bytes(&extra).is_err());
        let mut bad = bytes;
        bad[0] = b'X';
        assert!(matches!(Bitstream::from_bytes(&bad), Err(Error::Bitstream(_))));
    }
}

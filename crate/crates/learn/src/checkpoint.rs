//! Versioned little-endian model checkpoints.
//!
//! Layout: `MGRECKPT`, version `u32`, arch tag `u8`, residual flag `u8`,
//! `r2_unit f64`, seed `u64`, in/out channels `u32 × 2`, layer count `u32`,
//! per layer a tag `u8` and three `u32` fields, parameter count `u64`, then
//! the parameters as `f64`.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{check_layers, Arch, CorrectorModel, Layer};

pub const MAGIC: &[u8; 8] = b"MGRECKPT";
pub const VERSION: u32 = 1;

fn layer_fields(l: &Layer) -> (u8, [u32; 3]) {
    match *l {
        Layer::Conv { cin, cout, k } => (0, [cin as u32, cout as u32, k as u32]),
        Layer::Relu => (1, [0; 3]),
        Layer::Down => (2, [0; 3]),
        Layer::Up => (3, [0; 3]),
        Layer::Save => (4, [0; 3]),
        Layer::Concat => (5, [0; 3]),
    }
}

pub fn write_checkpoint(model: &CorrectorModel, mut w: impl Write) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + 8 * model.params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(model.arch.tag());
    buf.push(model.residual as u8);
    buf.extend_from_slice(&model.r2_unit.to_le_bytes());
    buf.extend_from_slice(&model.seed.to_le_bytes());
    buf.extend_from_slice(&(model.in_channels as u32).to_le_bytes());
    buf.extend_from_slice(&(model.out_channels as u32).to_le_bytes());
    buf.extend_from_slice(&(model.layers.len() as u32).to_le_bytes());
    for l in &model.layers {
        let (tag, f) = layer_fields(l);
        buf.push(tag);
        for v in f {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn read_checkpoint(mut r: impl Read) -> Result<CorrectorModel> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let arch = Arch::from_tag(c.u8()?).ok_or_else(|| Error::Checkpoint("unknown arch tag".into()))?;
    let residual = match c.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Checkpoint(format!("bad residual flag {other}"))),
    };
    let r2_unit = c.f64()?;
    let seed = c.u64()?;
    let in_channels = c.u32()? as usize;
    let out_channels = c.u32()? as usize;
    let n_layers = c.u32()? as usize;
    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let tag = c.u8()?;
        let f = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
        layers.push(match tag {
            0 => Layer::Conv { cin: f[0], cout: f[1], k: f[2] },
            1 => Layer::Relu,
            2 => Layer::Down,
            3 => Layer::Up,
            4 => Layer::Save,
            5 => Layer::Concat,
            other => return Err(Error::Checkpoint(format!("unknown layer tag {other}"))),
        });
    }
    check_layers(&layers, in_channels, out_channels).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if arch.channels(match arch {
        Arch::Img => in_channels / 2,
        Arch::Bio => in_channels,
    }) != (in_channels, out_channels)
    {
        return Err(Error::Checkpoint("channel counts do not match the arch".into()));
    }
    let n_params = c.u64()? as usize;
    let expected: usize = layers
        .iter()
        .map(|l| match *l {
            Layer::Conv { cin, cout, k } => cout * cin * k * k + cout,
            _ => 0,
        })
        .sum();
    if n_params != expected {
        return Err(Error::Checkpoint(format!("{n_params} parameters stored, layers need {expected}")));
    }
    let params = (0..n_params).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
    if c.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(CorrectorModel { arch, layers, in_channels, out_channels, params, seed, residual, r2_unit })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        for arch in [Arch::Img, Arch::Bio] {
            let m = CorrectorModel::unet(arch, 3, 17).unwrap();
            let mut bytes = Vec::new();
            write_checkpoint(&m, &mut bytes).unwrap();
            assert_eq!(&bytes[..8], MAGIC);
            assert_eq!(read_checkpoint(bytes.as_slice()).unwrap(), m);
        }
    }

    #[test]
    fn damaged_checkpoints_are_rejected() {
        let m = CorrectorModel::unet(Arch::Bio, 3, 1).unwrap();
        let mut bytes = Vec::new();
        write_checkpoint(&m, &mut bytes).unwrap();
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_checkpoint(extra.as_slice()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(bad.as_slice()).is_err());
        let mut bad = bytes;
        bad[12] = 9;
        assert!(read_checkpoint(bad.as_slice()).is_err());
    }
}

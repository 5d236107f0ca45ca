//! `MGREVOL1` container: fixed 84-byte little-endian header plus a raw
//! single-precision (or byte) payload in `(slice, y, z, echo)` order.
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 8    | magic `MGREVOL1`                        |
//! | 8      | 4    | header length (84)                      |
//! | 12     | 1    | dtype: 0 c64, 1 f32, 2 u8               |
//! | 13     | 1    | role                                    |
//! | 14     | 2    | reserved, zero                          |
//! | 16     | 16   | slices, ny, nz, echoes (`u32`)          |
//! | 32     | 24   | voxel size dy, dz, dslice (`f64`, mm)   |
//! | 56     | 8    | first echo time (`f64`, s)              |
//! | 64     | 8    | echo spacing (`f64`, s)                 |
//! | 72     | 4    | echo count of the schedule (`u32`)      |
//! | 76     | 8    | payload length in bytes (`u64`)         |

use std::path::Path;

use mgre_core::signal::{EchoSchedule, FFunctionTable};
use mgre_core::tensor::{BinaryMask, MultiEchoVolume, RealMap, Shape, VoxelSize};
use num_complex::Complex64;

use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"MGREVOL1";
pub const HEADER_LEN: usize = 84;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    C64,
    F32,
    U8,
}

impl DType {
    fn tag(self) -> u8 {
        match self {
            DType::C64 => 0,
            DType::F32 => 1,
            DType::U8 => 2,
        }
    }

    fn from_tag(t: u8) -> Option<Self> {
        [DType::C64, DType::F32, DType::U8].into_iter().find(|d| d.tag() == t)
    }

    pub fn size(self) -> usize {
        match self {
            DType::C64 => 8,
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Mgre,
    KSpace,
    F,
    S0,
    R2star,
    Omega,
    Mask,
}

impl Role {
    const ALL: [Role; 7] = [Role::Mgre, Role::KSpace, Role::F, Role::S0, Role::R2star, Role::Omega, Role::Mask];

    fn tag(self) -> u8 {
        Self::ALL.iter().position(|&r| r == self).expect("listed") as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Header {
    pub dtype: DType,
    pub role: Role,
    /// `(slices, ny, nz, echoes)`; maps and masks have one echo.
    pub shape: [u32; 4],
    pub voxel_size: VoxelSize,
    pub echo: EchoSchedule,
}

impl Header {
    pub fn elements(&self) -> usize {
        self.shape.iter().map(|&d| d as usize).product()
    }

    fn core_shape(&self) -> Shape {
        let [l, y, z, n] = self.shape.map(|d| d as usize);
        Shape::new(l, y, z, n)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    C64(Vec<[f32; 2]>),
    F32(Vec<f32>),
    U8(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeFile {
    pub header: Header,
    pub payload: Payload,
}

fn shape4(s: Shape) -> [u32; 4] {
    [s.slices, s.ny, s.nz, s.echoes].map(|d| d as u32)
}

fn map_shape(dims: [usize; 3]) -> [u32; 4] {
    [dims[0] as u32, dims[1] as u32, dims[2] as u32, 1]
}

impl VolumeFile {
    pub fn from_complex(role: Role, shape: Shape, data: &[Complex64], vs: VoxelSize, echo: EchoSchedule) -> Self {
        Self {
            header: Header { dtype: DType::C64, role, shape: shape4(shape), voxel_size: vs, echo },
            payload: Payload::C64(data.iter().map(|c| [c.re as f32, c.im as f32]).collect()),
        }
    }

    /// Complex mGRE volume. The echo schedule is recovered from the first two
    /// echo times.
    pub fn from_mgre(v: &MultiEchoVolume) -> Self {
        let t = v.echo_times();
        let echo = EchoSchedule { t1_s: t[0], dt_s: t[1] - t[0], n_echoes: t.len() };
        Self::from_complex(Role::Mgre, v.shape(), v.data(), v.voxel_size(), echo)
    }

    pub fn from_f_table(f: &FFunctionTable, vs: VoxelSize, echo: EchoSchedule) -> Self {
        Self::from_complex(Role::F, f.shape(), f.values(), vs, echo)
    }

    pub fn from_map(role: Role, map: &RealMap, vs: VoxelSize, echo: EchoSchedule) -> Self {
        Self {
            header: Header { dtype: DType::F32, role, shape: map_shape(map.dims()), voxel_size: vs, echo },
            payload: Payload::F32(map.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn from_mask(mask: &BinaryMask, vs: VoxelSize, echo: EchoSchedule) -> Self {
        let s = mask.shape();
        Self {
            header: Header {
                dtype: DType::U8,
                role: Role::Mask,
                shape: map_shape([s[0], s[1], s[2]]),
                voxel_size: vs,
                echo,
            },
            payload: Payload::U8(mask.to_u8()),
        }
    }

    fn expect_role(&self, role: Role) -> Result<(), CliError> {
        if self.header.role != role {
            return Err(CliError::CorruptVolume(format!("expected role {role:?}, found {:?}", self.header.role)));
        }
        Ok(())
    }

    fn complex(&self) -> Result<Vec<Complex64>, CliError> {
        match &self.payload {
            Payload::C64(d) => Ok(d.iter().map(|[re, im]| Complex64::new(*re as f64, *im as f64)).collect()),
            _ => Err(CliError::CorruptVolume("expected complex payload".into())),
        }
    }

    pub fn to_mgre(&self) -> Result<MultiEchoVolume, CliError> {
        self.expect_role(Role::Mgre)?;
        let times = self.header.echo.times();
        let v = MultiEchoVolume::new(self.header.core_shape(), self.complex()?, self.header.voxel_size, times)
            .map_err(|e| CliError::CorruptVolume(e.to_string()))?;
        Ok(v)
    }

    pub fn to_f_table(&self) -> Result<FFunctionTable, CliError> {
        self.expect_role(Role::F)?;
        FFunctionTable::new(self.header.core_shape(), self.complex()?).map_err(|e| CliError::CorruptVolume(e.to_string()))
    }

    pub fn to_map(&self, role: Role) -> Result<RealMap, CliError> {
        self.expect_role(role)?;
        let [l, y, z, _] = self.header.shape.map(|d| d as usize);
        match &self.payload {
            Payload::F32(d) => RealMap::new([l, y, z], d.iter().map(|&v| v as f64).collect())
                .map_err(|e| CliError::CorruptVolume(e.to_string())),
            _ => Err(CliError::CorruptVolume("expected f32 payload".into())),
        }
    }

    pub fn to_mask(&self) -> Result<BinaryMask, CliError> {
        self.expect_role(Role::Mask)?;
        let [l, y, z, _] = self.header.shape.map(|d| d as usize);
        match &self.payload {
            Payload::U8(d) => BinaryMask::from_u8(vec![l, y, z], d).map_err(|e| CliError::CorruptVolume(e.to_string())),
            _ => Err(CliError::CorruptVolume("expected u8 payload".into())),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let payload_len = h.elements() * h.dtype.size();
        let mut out = Vec::with_capacity(HEADER_LEN + payload_len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(HEADER_LEN as u32).to_le_bytes());
        out.push(h.dtype.tag());
        out.push(h.role.tag());
        out.extend_from_slice(&[0, 0]);
        for d in h.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in [h.voxel_size.dy, h.voxel_size.dz, h.voxel_size.dslice, h.echo.t1_s, h.echo.dt_s] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(h.echo.n_echoes as u32).to_le_bytes());
        out.extend_from_slice(&(payload_len as u64).to_le_bytes());
        debug_assert_eq!(out.len(), HEADER_LEN);
        match &self.payload {
            Payload::C64(d) => d.iter().flatten().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Payload::F32(d) => d.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Payload::U8(d) => out.extend_from_slice(d),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let corrupt = |m: &str| CliError::CorruptVolume(m.to_string());
        if bytes.len() < HEADER_LEN {
            return Err(corrupt("shorter than the header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        if u32_at(8) as usize != HEADER_LEN {
            return Err(corrupt("unexpected header length"));
        }
        let dtype = DType::from_tag(bytes[12]).ok_or_else(|| corrupt("unknown dtype"))?;
        let role = Role::from_tag(bytes[13]).ok_or_else(|| corrupt("unknown role"))?;
        if bytes[14..16] != [0, 0] {
            return Err(corrupt("reserved bytes are not zero"));
        }
        let shape = [u32_at(16), u32_at(20), u32_at(24), u32_at(28)];
        let voxel_size = VoxelSize { dy: f64_at(32), dz: f64_at(40), dslice: f64_at(48) };
        let echo = EchoSchedule { t1_s: f64_at(56), dt_s: f64_at(64), n_echoes: u32_at(72) as usize };
        let payload_len = u64::from_le_bytes(bytes[76..84].try_into().expect("8 bytes")) as usize;
        let header = Header { dtype, role, shape, voxel_size, echo };
        let elements = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d as usize)).ok_or_else(|| corrupt("shape overflows"))?;
        if elements.checked_mul(dtype.size()) != Some(payload_len) {
            return Err(corrupt("payload length disagrees with shape and dtype"));
        }
        if bytes.len() != HEADER_LEN + payload_len {
            return Err(corrupt("file length disagrees with the header"));
        }
        let body = &bytes[HEADER_LEN..];
        let f32s = || body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
        let payload = match dtype {
            DType::C64 => {
                let v: Vec<f32> = f32s().collect();
                Payload::C64(v.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
            }
            DType::F32 => Payload::F32(f32s().collect()),
            DType::U8 => Payload::U8(body.to_vec()),
        };
        Ok(Self { header, payload })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::MissingDependency(path.display().to_string()),
            _ => CliError::Io(e),
        })?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            CliError::CorruptVolume(m) => CliError::CorruptVolume(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

//! Little-endian binary containers: teacher embeddings (`S3TE`), code grids
//! (`S3CG`) and named-tensor checkpoints (`S3CK`).

use std::fs;
use std::path::Path;

use tokvox_core::codec::distill::TeacherEmbeddings;
use tokvox_core::codec::CodeGrid;
use tokvox_core::numerics::{AdamW, ParamStore};
use tokvox_core::Tensor;

use crate::error::{Error, Result};

pub const TEACHER_MAGIC: &[u8; 4] = b"S3TE";
pub const GRID_MAGIC: &[u8; 4] = b"S3CG";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"S3CK";
pub const TEACHER_VERSION: u32 = 1;
pub const GRID_VERSION: u32 = 1;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Reserved name prefix for optimiser state inside a checkpoint.
pub const OPTIM_PREFIX: &str = "__optim/";

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(format!("truncated at byte {} (wanted {n} more)", self.pos));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, String> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("length overflow")?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn header(&mut self, magic: &[u8; 4], version: u32) -> Result<(), String> {
        if self.take(4)? != magic {
            return Err(format!("bad magic, expected {:?}", std::str::from_utf8(magic).unwrap()));
        }
        let v = self.u32()?;
        if v != version {
            return Err(format!("unsupported version {v} (expected {version})"));
        }
        Ok(())
    }

    fn finish(&self) -> Result<(), String> {
        if self.pos != self.buf.len() {
            return Err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn dim32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit in u32")))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(Error::io(path))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(Error::io(path))
}

// ---- S3TE ----

pub fn teacher_to_bytes(te: &TeacherEmbeddings<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(20 + 4 * te.frames.numel());
    out.extend_from_slice(TEACHER_MAGIC);
    put_u32(&mut out, TEACHER_VERSION);
    put_u32(&mut out, dim32(te.len(), "teacher length")?);
    put_u32(&mut out, dim32(te.dim(), "teacher dim")?);
    out.extend_from_slice(&(te.frame_rate as f32).to_le_bytes());
    for v in te.frames.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn teacher_from_bytes(buf: &[u8]) -> Result<TeacherEmbeddings<f32>, String> {
    let mut r = Reader::new(buf);
    r.header(TEACHER_MAGIC, TEACHER_VERSION)?;
    let (l, d) = (r.u32()? as usize, r.u32()? as usize);
    let rate = r.f32()?;
    if !(rate.is_finite() && rate > 0.0) {
        return Err(format!("invalid frame rate {rate}"));
    }
    let data = r.f32s(l.checked_mul(d).ok_or("length overflow")?)?;
    r.finish()?;
    let t = Tensor::new(vec![l, d], data).map_err(|e| e.to_string())?;
    TeacherEmbeddings::new(t, rate as f64).map_err(|e| e.to_string())
}

pub fn write_teacher(path: &Path, te: &TeacherEmbeddings<f32>) -> Result<()> {
    write(path, &teacher_to_bytes(te)?)
}

pub fn read_teacher(path: &Path) -> Result<TeacherEmbeddings<f32>> {
    teacher_from_bytes(&read(path)?).map_err(|m| Error::format(path, m))
}

// ---- S3CG ----

/// A code grid plus the number of zero samples appended before encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFile {
    pub grid: CodeGrid,
    pub pad: usize,
}

pub fn grid_to_bytes(g: &GridFile) -> Result<Vec<u8>> {
    if g.grid.codebook_size() > 1 << 16 {
        return Err(Error::Config(format!("codebook size {} exceeds 16-bit indices", g.grid.codebook_size())));
    }
    let mut out = Vec::with_capacity(24 + 2 * g.grid.raw().len());
    out.extend_from_slice(GRID_MAGIC);
    put_u32(&mut out, GRID_VERSION);
    put_u32(&mut out, dim32(g.grid.levels(), "levels")?);
    put_u32(&mut out, dim32(g.grid.len(), "frames")?);
    put_u32(&mut out, dim32(g.grid.codebook_size(), "codebook size")?);
    put_u32(&mut out, dim32(g.pad, "pad")?);
    for &c in g.grid.raw() {
        out.extend_from_slice(&(c as u16).to_le_bytes());
    }
    Ok(out)
}

pub fn grid_from_bytes(buf: &[u8]) -> Result<GridFile, String> {
    let mut r = Reader::new(buf);
    r.header(GRID_MAGIC, GRID_VERSION)?;
    let (k, l, cs, pad) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let n = k.checked_mul(l).ok_or("length overflow")?;
    let bytes = r.take(n.checked_mul(2).ok_or("length overflow")?)?;
    r.finish()?;
    let codes = bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]]) as u32).collect();
    let grid = CodeGrid::new(k, l, cs, codes).map_err(|e| e.to_string())?;
    Ok(GridFile { grid, pad })
}

pub fn write_grid(path: &Path, g: &GridFile) -> Result<()> {
    write(path, &grid_to_bytes(g)?)
}

pub fn read_grid(path: &Path) -> Result<GridFile> {
    grid_from_bytes(&read(path)?).map_err(|m| Error::format(path, m))
}

// ---- S3CK ----

/// Ordered named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        let name = name.into();
        match self.tensors.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = t,
            None => self.tensors.push((name, t)),
        }
    }

    pub fn put_store(&mut self, prefix: &str, store: &ParamStore<f32>) {
        for (name, t) in store.iter() {
            self.insert(format!("{prefix}{name}"), t.clone());
        }
    }

    /// Fills `store` from entries under `prefix`; every parameter must be present.
    pub fn load_store(&self, prefix: &str, store: &mut ParamStore<f32>) -> Result<()> {
        let entries: Vec<(&str, &Tensor<f32>)> =
            self.tensors.iter().filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s, t))).collect();
        store.load(entries)?;
        Ok(())
    }

    pub fn put_u64(&mut self, name: &str, v: u64) {
        // three 24-bit limbs, each exact in f32
        let limbs = [v & 0xff_ffff, (v >> 24) & 0xff_ffff, v >> 48].map(|x| x as f32);
        self.insert(name, Tensor::vector(limbs.to_vec()));
    }

    pub fn u64(&self, name: &str) -> Option<u64> {
        let d = self.get(name)?.data();
        (d.len() == 3).then(|| d[0] as u64 | (d[1] as u64) << 24 | (d[2] as u64) << 48)
    }

    /// Moments and step of `opt` under `__optim/<tag>/`.
    pub fn put_optimizer(&mut self, tag: &str, opt: &AdamW<f32>, store: &ParamStore<f32>) {
        let base = format!("{OPTIM_PREFIX}{tag}/");
        for ((name, _), (m, v)) in store.iter().zip(opt.m.iter().zip(&opt.v)) {
            self.insert(format!("{base}m/{name}"), m.clone());
            self.insert(format!("{base}v/{name}"), v.clone());
        }
        self.put_u64(&format!("{base}step"), opt.step);
    }

    pub fn load_optimizer(&self, tag: &str, opt: &mut AdamW<f32>, store: &ParamStore<f32>) -> Result<()> {
        let base = format!("{OPTIM_PREFIX}{tag}/");
        let missing = |n: &str| Error::Config(format!("checkpoint lacks optimiser entry {n}"));
        for (i, (name, t)) in store.iter().enumerate() {
            for (kind, slot) in [("m", &mut opt.m[i]), ("v", &mut opt.v[i])] {
                let key = format!("{base}{kind}/{name}");
                let src = self.get(&key).ok_or_else(|| missing(&key))?;
                if src.shape() != t.shape() {
                    return Err(Error::Config(format!("{key}: shape {:?} vs {:?}", src.shape(), t.shape())));
                }
                *slot = src.clone();
            }
        }
        let key = format!("{base}step");
        opt.step = self.u64(&key).ok_or_else(|| missing(&key))?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, dim32(self.tensors.len(), "tensor count")?);
        for (name, t) in &self.tensors {
            put_u32(&mut out, dim32(name.len(), "name length")?);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, dim32(t.rank(), "rank")?);
            for &d in t.shape() {
                put_u32(&mut out, dim32(d, "dim")?);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, String> {
        let mut r = Reader::new(buf);
        r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::default();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?).map_err(|_| "tensor name is not UTF-8")?.to_owned();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("length overflow")?;
            let data = r.f32s(n)?;
            if ck.get(&name).is_some() {
                return Err(format!("duplicate tensor {name}"));
            }
            ck.tensors.push((name, Tensor::new(shape, data).map_err(|e| e.to_string())?));
        }
        r.finish()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read(path)?).map_err(|m| Error::format(path, m))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn teacher_layout_is_fixed() {
        let te = TeacherEmbeddings::new(Tensor::new(vec![2, 1], vec![1.0f32, -2.0]).unwrap(), 50.0).unwrap();
        let b = teacher_to_bytes(&te).unwrap();
        assert_eq!(&b[..4], b"S3TE");
        assert_eq!(b[4..8], 1u32.to_le_bytes());
        assert_eq!(b[8..12], 2u32.to_le_bytes());
        assert_eq!(b[12..16], 1u32.to_le_bytes());
        assert_eq!(b[16..20], 50f32.to_le_bytes());
        assert_eq!(b[20..24], 1f32.to_le_bytes());
        assert_eq!(b.len(), 28);
        assert_eq!(teacher_from_bytes(&b).unwrap(), te);
    }

    #[test]
    fn grid_layout_is_fixed() {
        let grid = CodeGrid::from_rows(&[vec![1, 2, 3], vec![0, 63, 5]], 64).unwrap();
        let g = GridFile { grid, pad: 3 };
        let b = grid_to_bytes(&g).unwrap();
        assert_eq!(&b[..4], b"S3CG");
        assert_eq!(b.len(), 24 + 12);
        assert_eq!(b[24..26], 1u16.to_le_bytes());
        assert_eq!(b[30..32], 0u16.to_le_bytes());
        assert_eq!(grid_from_bytes(&b).unwrap(), g);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let grid = CodeGrid::from_rows(&[vec![1, 2]], 4).unwrap();
        let mut b = grid_to_bytes(&GridFile { grid, pad: 0 }).unwrap();
        assert!(grid_from_bytes(&b[..b.len() - 1]).unwrap_err().contains("truncated"));
        b[24] = 9;
        assert!(grid_from_bytes(&b).is_err(), "index 9 in a 4-entry codebook");
        b[0] = b'X';
        assert!(grid_from_bytes(&b).unwrap_err().contains("magic"));
        let mut c = Checkpoint::default().to_bytes().unwrap();
        c[4] = 2;
        assert!(Checkpoint::from_bytes(&c).unwrap_err().contains("version"));
    }

    #[test]
    fn step_counter_survives_f32_storage() {
        let mut ck = Checkpoint::default();
        for v in [0u64, 1, 16_777_217, u64::MAX >> 8] {
            ck.put_u64("s", v);
            let ck2 = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            assert_eq!(ck2.u64("s"), Some(v));
        }
    }
}

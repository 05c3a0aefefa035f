//! Named parameter tensors and their on-disk format.
//!
//! Weight files start with the magic `HWTS`, a format version byte and a
//! parameter count, followed by one record per parameter in name order:
//! name (u16 length + UTF-8), rank (u8), dims (u32 each), then the row-major
//! payload as little-endian f32. Values are computed in f64 and stored in
//! f32; loading widens back to f64.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const WEIGHT_MAGIC: [u8; 4] = *b"HWTS";
pub const WEIGHT_VERSION: u8 = 1;

/// A parameter: logical dims plus the value flattened to a canonical 2D
/// layout. Rank 1 `[n]` maps to `(1, n)`, rank 2 `[r, c]` to `(r, c)`,
/// rank 3 `[k, r, c]` to `(k·r, c)`. The flat row-major order of the logical
/// tensor and of the 2D layout coincide.
#[derive(Debug, Clone)]
pub struct Param {
    pub dims: Vec<usize>,
    pub value: Array2<f64>,
}

impl Param {
    pub fn new(dims: Vec<usize>, value: Array2<f64>) -> Self {
        let expect = canonical_shape(&dims);
        assert_eq!(
            value.dim(),
            expect,
            "param dims {:?} do not match value shape",
            dims
        );
        Param { dims, value }
    }
}

pub fn canonical_shape(dims: &[usize]) -> (usize, usize) {
    match dims.len() {
        1 => (1, dims[0]),
        2 => (dims[0], dims[1]),
        3 => (dims[0] * dims[1], dims[2]),
        r => panic!("unsupported parameter rank {}", r),
    }
}

/// Name-ordered collection of parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; duplicate names are a bug.
    pub fn insert(&mut self, name: &str, param: Param) {
        let prev = self.params.insert(name.to_string(), param);
        assert!(prev.is_none(), "duplicate parameter name {:?}", name);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    /// Serializes every parameter in name order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&WEIGHT_MAGIC);
        out.push(WEIGHT_VERSION);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in &self.params {
            let nb = name.as_bytes();
            assert!(nb.len() <= u16::MAX as usize);
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(p.dims.len() as u8);
            for &d in &p.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.iter() {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != WEIGHT_MAGIC {
            return Err(Error::Format(format!(
                "bad weight file magic {:02x?}",
                magic
            )));
        }
        let version = r.u8()?;
        if version != WEIGHT_VERSION {
            return Err(Error::Format(format!(
                "unsupported weight file version {}",
                version
            )));
        }
        let count = r.u32()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            if rank == 0 || rank > 3 {
                return Err(Error::Format(format!(
                    "parameter {:?} has unsupported rank {}",
                    name, rank
                )));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let n: usize = dims.iter().product();
            let mut flat = Vec::with_capacity(n);
            for _ in 0..n {
                flat.push(r.f32()? as f64);
            }
            let shape = canonical_shape(&dims);
            let value = Array2::from_shape_vec(shape, flat)
                .map_err(|e| Error::Format(format!("parameter {:?}: {}", name, e)))?;
            if store.params.contains_key(&name) {
                return Err(Error::Format(format!("duplicate parameter {:?}", name)));
            }
            store.params.insert(name, Param { dims, value });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after last parameter",
                bytes.len() - r.pos
            )));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("weight file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

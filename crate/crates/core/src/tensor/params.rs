//! Named parameter storage and the binary checkpoint container.
//!
//! Layout (all integers little-endian):
//! `magic[8] | version u32 | meta_len u32 | meta utf-8 | count u32 |`
//! per parameter `name_len u32 | name | trainable u8 | rank u32 | dims u64*rank |`
//! then every parameter's values as binary32 in table order.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::Scalar;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CVTDCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    /// `false` for running statistics and other state the optimizer skips.
    pub trainable: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: &str, shape: &[usize], value: Vec<T>, trainable: bool) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::Invariant(format!("duplicate parameter name {name:?}")));
        }
        if shape.iter().product::<usize>() != value.len() {
            return Err(Error::Shape(format!("parameter {name:?}: shape {shape:?} vs {} values", value.len())));
        }
        let id = ParamId(self.params.len());
        self.params.push(Param { name: name.to_string(), shape: shape.to_vec(), value, trainable });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Exponential moving average `r <- m r + (1 - m) s`.
    pub fn update_running(&mut self, id: ParamId, stat: &[T], momentum: f64) {
        let m = T::of(momentum);
        let one_m = T::one() - m;
        for (r, &s) in self.params[id.0].value.iter_mut().zip(stat) {
            *r = m * *r + one_m * s;
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W, meta: &str) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_len(&mut w, meta.len())?;
        w.write_all(meta.as_bytes())?;
        write_len(&mut w, self.params.len())?;
        for p in &self.params {
            write_len(&mut w, p.name.len())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&[p.trainable as u8])?;
            write_len(&mut w, p.shape.len())?;
            for &d in &p.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
        }
        for p in &self.params {
            for &v in &p.value {
                w.write_all(&(v.to_f64_lossy() as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Parse a checkpoint into a fresh store plus its metadata string.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(Self, String)> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta = read_string(&mut r)?;
        let count = read_u32(&mut r)? as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let name = read_string(&mut r)?;
            let mut flag = [0u8; 1];
            r.read_exact(&mut flag)?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(
                    usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Checkpoint("extent overflow".into()))?,
                );
            }
            table.push((name, flag[0] != 0, shape));
        }
        let mut store = Self::new();
        for (name, trainable, shape) in table {
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; 4 * n];
            r.read_exact(&mut buf)?;
            let value = buf.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect();
            store.add(&name, &shape, value, trainable).map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        Ok((store, meta))
    }

    /// Overwrite values from `other`, which must hold the same names and shapes.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, checkpoint has {}", self.len(), other.len())));
        }
        for p in &mut self.params {
            let id = other.id(&p.name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {:?}", p.name)))?;
            let q = other.get(id);
            if q.shape != p.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?}: shape {:?}, checkpoint {:?}",
                    p.name, p.shape, q.shape
                )));
            }
            p.value.clone_from(&q.value);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, meta: &str) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let f = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(f), meta)
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

fn write_len<W: Write>(w: &mut W, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint("length overflow".into()))?;
    w.write_all(&n.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)? as usize;
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Checkpoint("invalid utf-8".into()))
}

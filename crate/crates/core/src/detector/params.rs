//! Named parameter storage, seeded initialization and the binary
//! checkpoint format.
//!
//! Checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! "MFDN"  u32 version  u32 record_count
//! per record: u32 name_len, name (UTF-8), u32 ndim, u64 dims[ndim], f64 data[]
//! ```

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Shape, Tensor, Var};

pub const MAGIC: &[u8; 4] = b"MFDN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// He-normal with fan-in `C·kh·kw` for conv weights.
    HeConv,
    /// He-normal with fan-in taken from dimension 0 of a `[D, M, 1, 1]`
    /// linear weight.
    HeLinear,
}

/// Stable 64-bit FNV-1a, used to derive one RNG stream per parameter name.
fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn init_tensor(name: &str, shape: Shape, init: Init, seed: u64) -> Tensor {
    let std = match init {
        Init::Zeros => return Tensor::zeros(shape),
        Init::Ones => return Tensor::full(shape, 1.0),
        Init::Normal(s) => s,
        Init::HeConv => (2.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt(),
        Init::HeLinear => (2.0 / shape[0] as f64).sqrt(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name));
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..crate::tensor::numel(shape)).map(|_| normal.sample(&mut rng)).collect();
    Tensor::new(shape, data).expect("length matches shape")
}

/// Ordered name → tensor map. Order is insertion order and is what the
/// checkpoint writer emits.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = t,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(t);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Copies every tensor into `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Binds vars already on a graph, one per tensor in store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<Bound> {
        if vars.len() != self.tensors.len() {
            return Err(Error::invalid(
                "ParamStore::bind_vars",
                format!("{} vars for {} parameters", vars.len(), self.tensors.len()),
            ));
        }
        Ok(Bound {
            vars,
            index: self.index.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut bytes.as_slice())
            .map_err(|e| Error::Checkpoint(format!("{}: {}", path.display(), e)))
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for (name, t) in self.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&4u32.to_le_bytes())?;
            for d in t.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> std::result::Result<Self, String> {
        fn u32_of(r: &mut impl Read) -> std::result::Result<u32, String> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|e| e.to_string())?;
            Ok(u32::from_le_bytes(b))
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| "file too short for header".to_string())?;
        if &magic != MAGIC {
            return Err("bad magic, not a checkpoint".into());
        }
        let version = u32_of(r)?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {}", version));
        }
        let count = u32_of(r)?;
        let mut store = ParamStore::new();
        for i in 0..count {
            let len = u32_of(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| format!("record {}: {}", i, e))?;
            let name = String::from_utf8(name).map_err(|_| format!("record {}: name is not UTF-8", i))?;
            let ndim = u32_of(r)? as usize;
            if ndim == 0 || ndim > 4 {
                return Err(format!("{}: unsupported rank {}", name, ndim));
            }
            let mut shape = [1usize; 4];
            for d in &mut shape[4 - ndim..] {
                let mut b = [0u8; 8];
                r.read_exact(&mut b).map_err(|e| format!("{}: {}", name, e))?;
                *d = u64::from_le_bytes(b) as usize;
            }
            let n = crate::tensor::numel(shape);
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(|e| format!("{}: truncated data ({})", name, e))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if store.contains(&name) {
                return Err(format!("duplicate record {}", name));
            }
            store.insert(name, Tensor::new(shape, data).map_err(|e| e.to_string())?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|e| e.to_string())? != 0 {
            return Err("trailing bytes after last record".into());
        }
        Ok(store)
    }
}

/// Graph handles of a [`ParamStore`] bound into one graph.
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Panics on unknown names: the parameter layout is fixed by the config
    /// that built the store.
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter {} is not in the store", name),
        }
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.index.get(name).map(|&i| self.vars[i])
    }

    /// Vars in store order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.w", init_tensor("a.w", [2, 3, 3, 3], Init::HeConv, 7));
        s.insert("a.b", Tensor::vector(vec![0.5, -1.25]));
        s
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let s = sample();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MFDN");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        let back = ParamStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn known_byte_layout() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(1.0));
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let mut want = b"MFDN".to_vec();
        want.extend([1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, b'x', 4, 0, 0, 0]);
        for _ in 0..4 {
            want.extend(1u64.to_le_bytes());
        }
        want.extend(1.0f64.to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert!(ParamStore::read_from(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(ParamStore::read_from(&mut bad.as_slice()).is_err());
        let mut long = buf.clone();
        long.push(0);
        assert!(ParamStore::read_from(&mut long.as_slice()).is_err());
    }

    #[test]
    fn init_is_seeded_per_name() {
        let a = init_tensor("w1", [4, 4, 1, 1], Init::Normal(1.0), 3);
        assert_eq!(a, init_tensor("w1", [4, 4, 1, 1], Init::Normal(1.0), 3));
        assert_ne!(a, init_tensor("w2", [4, 4, 1, 1], Init::Normal(1.0), 3));
        assert_ne!(a, init_tensor("w1", [4, 4, 1, 1], Init::Normal(1.0), 4));
    }
}

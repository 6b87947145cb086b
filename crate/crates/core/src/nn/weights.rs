//! Named parameter tensors and the `DPCW` weight file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "DPCW" | u32 version | u32 tensor count |
//!   per tensor: u16 name length | name (utf-8) | u8 rank | u32 dims[rank] | f32 values
//! ```
//!
//! Tensors are written in name order so a store serializes to one byte
//! sequence regardless of insertion order.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const WEIGHT_MAGIC: &[u8; 4] = b"DPCW";
pub const WEIGHT_VERSION: u32 = 1;

/// Tensor holding the generator seed as four 16-bit limbs, low limb first.
pub const SEED_TENSOR: &str = "meta.seed";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        if dims.iter().product::<usize>() != values.len() {
            return Err(Error::Weights(format!(
                "dims {dims:?} do not match {} values",
                values.len()
            )));
        }
        Ok(Self { dims, values })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Looks up a tensor and checks its exact dims.
    pub fn expect(&self, name: &str, dims: &[usize]) -> Result<&Tensor> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Weights(format!("missing tensor {name}")))?;
        if t.dims != dims {
            return Err(Error::Weights(format!(
                "tensor {name} has dims {:?}, expected {dims:?}",
                t.dims
            )));
        }
        Ok(t)
    }

    pub fn seed(&self) -> Option<u64> {
        let t = self.tensors.get(SEED_TENSOR)?;
        if t.values.len() != 4 {
            return None;
        }
        Some(
            t.values
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, &v)| acc | ((v as u64) << (16 * i))),
        )
    }

    pub fn set_seed(&mut self, seed: u64) {
        let limbs = (0..4).map(|i| ((seed >> (16 * i)) & 0xffff) as f32).collect();
        self.insert(SEED_TENSOR, Tensor::new(vec![4], limbs).unwrap());
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_MAGIC);
        out.extend_from_slice(&WEIGHT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| Error::Weights(format!("name too long: {name}")))?;
            let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Weights(format!("rank too large: {name}")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            out.push(rank);
            for &d in &t.dims {
                let d = u32::try_from(d).map_err(|_| Error::Weights(format!("dim too large: {name}")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for v in &t.values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        if r.take(4)? != WEIGHT_MAGIC {
            return Err(Error::Weights("bad magic, expected DPCW".into()));
        }
        let version = r.u32()?;
        if version != WEIGHT_VERSION {
            return Err(Error::Weights(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Weights("tensor name is not utf-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Weights("tensor too large".into()))?)?;
            let values = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            if store.tensors.insert(name.clone(), Tensor { dims, values }).is_some() {
                return Err(Error::Weights(format!("duplicate tensor {name}")));
            }
        }
        if r.pos != data.len() {
            return Err(Error::Weights(format!("{} trailing bytes", data.len() - r.pos)));
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.data.len())
            .ok_or_else(|| Error::Truncated(format!("weight file ends at byte {}", self.data.len())))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// What a requested parameter is, so an initializer can scale it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ParamKind {
    Weight { fan_in: usize },
    Bias,
}

/// Supplies parameters while a network is being assembled.
pub trait ParamSource {
    fn param(&mut self, name: &str, dims: &[usize], kind: ParamKind) -> Result<Vec<f32>>;
}

impl ParamSource for &WeightStore {
    fn param(&mut self, name: &str, dims: &[usize], _kind: ParamKind) -> Result<Vec<f32>> {
        Ok(self.expect(name, dims)?.values.clone())
    }
}

/// Draws uniform weights with variance `gain^2 / fan_in` from a ChaCha
/// stream and records everything it hands out.
pub struct SeededInit {
    rng: ChaCha8Rng,
    gain: f32,
    store: WeightStore,
    overrides: Vec<(String, f32)>,
}

impl SeededInit {
    pub fn new(seed: u64, gain: f32) -> Self {
        let mut store = WeightStore::new();
        store.set_seed(seed);
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            gain,
            store,
            overrides: Vec::new(),
        }
    }

    /// Uses `gain` instead of the default for every parameter whose name
    /// starts with `prefix` (last matching override wins).
    pub fn with_gain_override(mut self, prefix: impl Into<String>, gain: f32) -> Self {
        self.overrides.push((prefix.into(), gain));
        self
    }

    pub fn into_store(self) -> WeightStore {
        self.store
    }

    pub fn store(&self) -> &WeightStore {
        &self.store
    }

    fn gain_for(&self, name: &str) -> f32 {
        self.overrides
            .iter()
            .rev()
            .find(|(p, _)| name.starts_with(p.as_str()))
            .map_or(self.gain, |(_, g)| *g)
    }
}

impl ParamSource for SeededInit {
    fn param(&mut self, name: &str, dims: &[usize], kind: ParamKind) -> Result<Vec<f32>> {
        let n: usize = dims.iter().product();
        // always draw so that overrides do not shift later tensors
        let draws: Vec<f32> = (0..n).map(|_| self.rng.gen_range(-1.0f32..1.0)).collect();
        let values = match kind {
            ParamKind::Bias => vec![0.0; n],
            ParamKind::Weight { fan_in } => {
                let bound = self.gain_for(name) * (3.0 / fan_in.max(1) as f32).sqrt();
                draws.into_iter().map(|u| u * bound).collect()
            }
        };
        self.store.insert(name, Tensor::new(dims.to_vec(), values.clone())?);
        Ok(values)
    }
}

/// Hands out all-zero parameters.
pub struct ZeroInit;

impl ParamSource for ZeroInit {
    fn param(&mut self, _name: &str, dims: &[usize], _kind: ParamKind) -> Result<Vec<f32>> {
        Ok(vec![0.0; dims.iter().product()])
    }
}

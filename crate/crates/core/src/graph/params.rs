use std::io::{Read, Write};
use std::path::Path;

use half::f16;
use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ir::{ModelGraph, SlotInit};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"HGOW";
const VERSION: u16 = 1;

/// Storage precision for serialized weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StorageDtype {
    F32,
    F16,
}

impl StorageDtype {
    pub fn bytes(self) -> usize {
        match self {
            StorageDtype::F32 => 4,
            StorageDtype::F16 => 2,
        }
    }

    fn tag(self) -> u8 {
        match self {
            StorageDtype::F32 => 0,
            StorageDtype::F16 => 1,
        }
    }
}

/// Named parameter tensors, keyed `{slot}.weight`, `{slot}.bn.running_var`, ...
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Tensor<f32>>,
}

impl ParamStore {
    /// Deterministic initialization for every slot of `graph`.
    pub fn init(graph: &ModelGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = graph
            .param_entries()
            .into_iter()
            .map(|(name, entry)| {
                let t = match entry.init {
                    SlotInit::FanIn(fan_in) => {
                        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
                        Tensor::from_fn(&entry.shape, |_| rng.gen_range(-bound..bound))
                    }
                    SlotInit::Constant(v) => Tensor::full(&entry.shape, v),
                };
                (name, t)
            })
            .collect();
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Weights(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Weights(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<f32>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<f32>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars, excluding running statistics.
    pub fn num_params(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(k, _)| !k.contains("running_"))
            .map(|(_, t)| t.len())
            .sum()
    }

    /// Exact serialized size in bytes for `dtype`.
    pub fn serialized_size(&self, dtype: StorageDtype) -> usize {
        4 + 2
            + 4
            + self
                .tensors
                .iter()
                .map(|(k, t)| 2 + k.len() + 1 + 1 + 4 * t.shape().len() + t.len() * dtype.bytes())
                .sum::<usize>()
    }

    /// Writes the little-endian weights container.
    pub fn write_to(&self, mut w: impl Write, dtype: StorageDtype) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[dtype.tag(), t.shape().len() as u8])?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * dtype.bytes());
            for &v in t.data() {
                match dtype {
                    StorageDtype::F32 => buf.extend_from_slice(&v.to_le_bytes()),
                    StorageDtype::F16 => buf.extend_from_slice(&f16::from_f32(v).to_le_bytes()),
                }
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, dtype: StorageDtype) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w, dtype)
            .map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a container and checks it against `graph`'s slots: every slot
    /// must be present with a matching shape and no unknown names may appear.
    pub fn read_from(mut r: impl Read, graph: &ModelGraph) -> Result<Self> {
        let io = |e: std::io::Error| Error::Weights(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Weights(format!("bad magic {magic:?}")));
        }
        let version = u16::from_le_bytes(read_n(&mut r).map_err(io)?);
        if version != VERSION {
            return Err(Error::Weights(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(read_n(&mut r).map_err(io)?) as usize;
        let expected = graph.param_entries();
        let mut tensors = IndexMap::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(read_n(&mut r).map_err(io)?) as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Weights("non-UTF-8 slot name".into()))?;
            let [tag, rank] = read_n(&mut r).map_err(io)?;
            let dtype = match tag {
                0 => StorageDtype::F32,
                1 => StorageDtype::F16,
                t => return Err(Error::Weights(format!("{name}: unknown dtype tag {t}"))),
            };
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(read_n(&mut r).map_err(io)?) as usize);
            }
            let entry = expected
                .get(&name)
                .ok_or_else(|| Error::Weights(format!("unknown slot {name}")))?;
            if entry.shape != shape {
                return Err(Error::Weights(format!(
                    "{name}: stored shape {shape:?} but model expects {:?}",
                    entry.shape
                )));
            }
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * dtype.bytes()];
            r.read_exact(&mut raw).map_err(io)?;
            let data: Vec<f32> = match dtype {
                StorageDtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
                StorageDtype::F16 => raw
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
                    .collect(),
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        if let Some(missing) = expected.keys().find(|k| !tensors.contains_key(*k)) {
            return Err(Error::Weights(format!("missing slot {missing}")));
        }
        // Canonical order regardless of file order.
        let tensors = expected
            .keys()
            .map(|k| (k.clone(), tensors.swap_remove(k).expect("checked above")))
            .collect();
        Ok(Self { tensors })
    }

    pub fn load(path: &Path, graph: &ModelGraph) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(file), graph)
    }
}

fn read_n<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

//! Named parameter storage and the flat binary checkpoint format.
//!
//! Checkpoint layout: an 8-byte little-endian `u64` header length, the JSON
//! header (`{"format":"f64le","params":{name:{"offset":o,"shape":[..]}}}`,
//! offsets counted in values), then every parameter as little-endian `f64`.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumError::Invalid(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Result<&Tensor> {
        Ok(self.get(self.id(name)?))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar values across all parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Number of scalar values in parameters whose name starts with `prefix`.
    pub fn num_values_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .map(|(_, _, t)| t.numel())
            .sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let mut params = BTreeMap::new();
        let mut offset = 0usize;
        for (_, name, t) in self.iter() {
            params.insert(
                name.to_string(),
                HeaderEntry {
                    offset,
                    shape: t.shape().to_vec(),
                },
            );
            offset += t.numel();
        }
        let header = serde_json::to_vec(&Header {
            format: "f64le".into(),
            params,
        })?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for t in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: Header = serde_json::from_slice(&header)?;
        if header.format != "f64le" {
            return Err(NumError::Checkpoint(format!(
                "unsupported format `{}`",
                header.format
            )));
        }
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        if raw.len() % 8 != 0 {
            return Err(NumError::Checkpoint("truncated value section".into()));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut entries: Vec<(String, HeaderEntry)> = header.params.into_iter().collect();
        entries.sort_by_key(|(_, e)| e.offset);
        let mut store = ParamStore::new();
        for (name, e) in entries {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n;
            if end > values.len() {
                return Err(NumError::Checkpoint(format!(
                    "parameter `{name}` extends past end of data"
                )));
            }
            store.insert(name, Tensor::new(e.shape, values[e.offset..end].to_vec())?)?;
        }
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    params: BTreeMap<String, HeaderEntry>,
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    offset: usize,
    shape: Vec<usize>,
}

/// Tensor with i.i.d. `N(0, std^2)` entries.
pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Tensor with i.i.d. `U(-a, a)` entries.
pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], a: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.insert("b.weight", normal_tensor(&mut rng, &[3, 2], 1.0)).unwrap();
        s.insert("a.bias", normal_tensor(&mut rng, &[2], 1.0)).unwrap();
        s.insert("tau", Tensor::scalar(-2.5)).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, s);
        let mut buf2 = Vec::new();
        back.write_to(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn header_is_json_with_offsets() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::vector(vec![1.0, 2.0])).unwrap();
        s.insert("y", Tensor::scalar(3.0)).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let len = u64::from_le_bytes(buf[..8].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&buf[8..8 + len]).unwrap();
        assert_eq!(header["params"]["y"]["offset"], 2);
        assert_eq!(header["params"]["x"]["shape"], serde_json::json!([2]));
        assert_eq!(buf.len(), 8 + len + 3 * 8);
        assert_eq!(f64::from_le_bytes(buf[8 + len + 16..].try_into().unwrap()), 3.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::scalar(0.0)).unwrap();
        assert!(s.insert("x", Tensor::scalar(1.0)).is_err());
        assert!(matches!(s.id("nope"), Err(NumError::UnknownParam(_))));
    }
}

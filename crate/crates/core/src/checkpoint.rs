//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "INTC" | version u32 | config_len u32 | config utf-8 | count u32
//! count x ( name_len u32 | name | rank u32 | extents u32 x rank | dtype u8 | data f32 x prod(extents) )
//! ```
//!
//! Tensors are stored in lexicographic name order.

use std::path::Path;

use intra_tensor::Tensor;

use crate::config::RunConfig;
use crate::error::{IntraError, Result};
use crate::image::Plane;
use crate::model::IntraModel;
use crate::scoring::ReferenceDiff;

pub const MAGIC: &[u8; 4] = b"INTC";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;
pub const REFERENCE_DIFF: &str = "reference.diff";
pub const REFERENCE_COUNT: &str = "reference.count";

/// Raw contents of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub config_text: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| IntraError::invalid(format!("{what} {v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Container {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut order: Vec<&(String, Tensor<f32>)> = self.tensors.iter().collect();
        order.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
        if order.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(IntraError::invalid("duplicate tensor name"));
        }
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u32(&mut out, self.config_text.len(), "config length")?;
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, order.len(), "tensor count")?;
        for (name, t) in order {
            put_u32(&mut out, name.len(), "name length")?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.rank(), "rank")?;
            for &e in t.shape() {
                put_u32(&mut out, e, "extent")?;
            }
            out.push(DTYPE_F32);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Size of [`Container::encode`]'s output in bytes.
    pub fn encoded_len(&self) -> usize {
        let header = 4 + 4 + 4 + self.config_text.len() + 4;
        header
            + self
                .tensors
                .iter()
                .map(|(n, t)| 4 + n.len() + 4 + 4 * t.rank() + 1 + 4 * t.len())
                .sum::<usize>()
    }

    pub fn decode(bytes: &[u8]) -> Result<Container> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(r.error(0, "bad magic, expected INTC"));
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error(at, &format!("unsupported version {version}")));
        }
        let len = r.u32("config length")? as usize;
        let at = r.pos;
        let config_text = String::from_utf8(r.take(len, "config text")?.to_vec()).map_err(|_| r.error(at, "config text is not utf-8"))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(len, "tensor name")?.to_vec()).map_err(|_| r.error(at, "tensor name is not utf-8"))?;
            let rank = r.u32("rank")? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(r.u32("extent")? as usize);
            }
            let at = r.pos;
            let dtype = r.take(1, "dtype")?[0];
            if dtype != DTYPE_F32 {
                return Err(r.error(at, &format!("unknown dtype tag {dtype} for `{name}`")));
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| r.error(at, &format!("`{name}` is too large")))?;
            let raw = r.take(n, &format!("data of `{name}`"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(shape, data).map_err(|e| r.error(at, &e.to_string()))?;
            if tensors.last().is_some_and(|(prev, _): &(String, _)| prev.as_bytes() >= name.as_bytes()) {
                return Err(r.error(at, &format!("tensor `{name}` out of order")));
            }
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(r.error(r.pos, "trailing bytes after last tensor"));
        }
        Ok(Container { config_text, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| IntraError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Container> {
        let bytes = std::fs::read(path).map_err(|e| IntraError::io(path, e))?;
        Container::decode(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn error(&self, offset: usize, reason: &str) -> IntraError {
        IntraError::Checkpoint {
            offset: offset as u64,
            reason: reason.to_string(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.error(self.pos, &format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Trained model, its reference difference map and the run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: IntraModel<f32>,
    pub reference: Option<ReferenceDiff>,
}

impl Checkpoint {
    /// The stored configuration takes its model section from `model`.
    pub fn new(mut config: RunConfig, model: IntraModel<f32>, reference: Option<ReferenceDiff>) -> Checkpoint {
        config.model = *model.config();
        Checkpoint { config, model, reference }
    }

    pub fn reference(&self) -> Result<&ReferenceDiff> {
        self.reference.as_ref().ok_or(IntraError::MissingSection(REFERENCE_DIFF))
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut tensors: Vec<(String, Tensor<f32>)> = self.model.names().iter().cloned().zip(self.model.params().iter().cloned()).collect();
        if let Some(r) = &self.reference {
            let count = u32::try_from(r.count).map_err(|_| IntraError::invalid("reference count too large"))?;
            tensors.push((REFERENCE_DIFF.into(), Tensor::new([r.map.height(), r.map.width()], r.map.data().to_vec())?));
            // u32 bits carried in an f32 slot, exact for any count
            tensors.push((REFERENCE_COUNT.into(), Tensor::new([1], vec![f32::from_bits(count)])?));
        }
        Ok(Container {
            config_text: self.config.to_text(),
            tensors,
        })
    }

    pub fn from_container(c: Container) -> Result<Checkpoint> {
        let config = RunConfig::parse(&c.config_text)?;
        let mut params = Vec::new();
        let (mut diff, mut count) = (None, None);
        for (name, t) in c.tensors {
            match name.as_str() {
                REFERENCE_DIFF => diff = Some(t),
                REFERENCE_COUNT => count = Some(t),
                _ => params.push((name, t)),
            }
        }
        let model = IntraModel::from_named(config.model, params)?;
        let reference = match (diff, count) {
            (None, None) => None,
            (Some(d), Some(n)) => {
                if d.rank() != 2 || n.len() != 1 {
                    return Err(IntraError::invalid("malformed reference section"));
                }
                let (h, w) = (d.shape()[0], d.shape()[1]);
                Some(ReferenceDiff {
                    map: Plane::new(h, w, d.into_data())?,
                    count: n.data()[0].to_bits() as usize,
                })
            }
            _ => return Err(IntraError::invalid("reference section is incomplete")),
        };
        Ok(Checkpoint { config, model, reference })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_container(Container::read(path)?)
    }
}

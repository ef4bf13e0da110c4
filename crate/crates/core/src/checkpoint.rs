//! Binary tensor container.
//!
//! Layout, all integers little-endian `u32`, reals little-endian `f64`:
//!
//! ```text
//! "QLNS" | version | section*
//! section := count | entry{count}
//! entry   := name_len | name (UTF-8) | rank | dim{rank} | f64{prod(dims)}
//! ```
//!
//! Model checkpoints hold the sections `params`, `init_snapshot` and,
//! for quantized models, a third section of step sizes. Each step entry is
//! keyed by layer name and holds `[bits, step, init_step]`.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::model::{ArchSpec, ModelState, QuantAttachment};
use crate::quant::QuantSpec;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"QLNS";
pub const VERSION: u32 = 1;

pub type Section = Vec<(String, Tensor)>;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub sections: Vec<Section>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        for section in &self.sections {
            put_u32(&mut buf, section.len())?;
            for (name, t) in section {
                put_u32(&mut buf, name.len())?;
                buf.extend_from_slice(name.as_bytes());
                put_u32(&mut buf, t.rank())?;
                for &d in t.shape() {
                    put_u32(&mut buf, d)?;
                }
                for v in t.data() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let mut sections = Vec::new();
        while r.pos < bytes.len() {
            let count = r.u32()? as usize;
            let mut section = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                let len = r.u32()? as usize;
                let name = std::str::from_utf8(r.take(len)?)
                    .map_err(|e| Error::Format(format!("entry name: {e}")))?
                    .to_string();
                let rank = r.u32()? as usize;
                let mut shape = Vec::with_capacity(rank.min(16));
                for _ in 0..rank {
                    shape.push(r.u32()? as usize);
                }
                let n = shape
                    .iter()
                    .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                    .ok_or_else(|| Error::Format("tensor too large".into()))?;
                let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
                let data = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                section.push((name, Tensor::new(shape, data)?));
            }
            sections.push(section);
        }
        Ok(Self { sections })
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Find a named tensor in any section.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.sections
            .iter()
            .flat_map(|s| s.iter())
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn model_to_container(model: &ModelState) -> Container {
    let params = model.params().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    let init = model
        .init_snapshot()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut sections = vec![params, init];
    if let Some(q) = model.quant() {
        let steps = q
            .iter()
            .map(|(k, a)| {
                let t = Tensor::vector(&[a.spec.bits as f64, a.spec.step, a.init_step]);
                (k.clone(), t)
            })
            .collect();
        sections.push(steps);
    }
    Container { sections }
}

pub fn model_from_container(arch: &ArchSpec, c: &Container) -> Result<ModelState> {
    if c.sections.len() < 2 || c.sections.len() > 3 {
        return Err(Error::Format(format!(
            "model checkpoint needs 2 or 3 sections, found {}",
            c.sections.len()
        )));
    }
    let to_map = |s: &Section| -> IndexMap<String, Tensor> { s.iter().cloned().collect() };
    let mut model = ModelState::from_parts(arch, to_map(&c.sections[0]), to_map(&c.sections[1]))?;
    if let Some(steps) = c.sections.get(2) {
        let mut q = IndexMap::new();
        for (name, t) in steps {
            if t.len() != 3 {
                return Err(Error::Format(format!("step entry `{name}` must hold 3 values")));
            }
            let d = t.data();
            if !model.layers().iter().any(|l| &l.name == name) {
                return Err(Error::Format(format!("step entry for unknown layer `{name}`")));
            }
            let spec = QuantSpec::new(d[0] as u32, d[1])?;
            q.insert(
                name.clone(),
                QuantAttachment {
                    spec,
                    init_step: d[2],
                },
            );
        }
        model.set_quant(Some(q));
    }
    Ok(model)
}

pub fn save_model(model: &ModelState, path: impl AsRef<Path>) -> Result<()> {
    model_to_container(model).save(path)
}

pub fn load_model(arch: &ArchSpec, path: impl AsRef<Path>) -> Result<ModelState> {
    model_from_container(arch, &Container::load(path)?)
}

//! Bit-exact checkpoints: magic `HCKP`, version, config hash and text, step,
//! optimizer state, and every parameter tensor by name. Restoring and
//! continuing reproduces an uninterrupted run bitwise.

use std::path::Path;

use hvqa_core::nn::ParamSet;
use hvqa_core::tensor::Tensor;

use crate::config::RunConfig;
use crate::optim::Adam;
use crate::{Result, TrainError};

pub const MAGIC: [u8; 4] = *b"HCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub adam_t: u64,
    pub q_vocab: u32,
    pub a_vocab: u32,
    pub entries: Vec<CheckpointEntry>,
    /// First/second moments per trainable entry, in entry order.
    pub moments: Vec<(Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub name: String,
    pub trainable: bool,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Checkpoint {
    pub fn capture(
        config: &RunConfig,
        params: &ParamSet<f32>,
        opt: &Adam<f32>,
        step: u64,
        q_vocab: u32,
        a_vocab: u32,
    ) -> Self {
        let entries: Vec<CheckpointEntry> = params
            .ids()
            .map(|id| CheckpointEntry {
                name: params.name(id).to_string(),
                trainable: params.is_trainable(id),
                shape: params.get(id).shape().to_vec(),
                data: params.get(id).data().to_vec(),
            })
            .collect();
        let (m, v) = opt.moments();
        let moments = m
            .iter()
            .zip(v)
            .map(|(a, b)| (a.data().to_vec(), b.data().to_vec()))
            .collect();
        Checkpoint {
            config: config.clone(),
            step,
            adam_t: opt.t,
            q_vocab,
            a_vocab,
            entries,
            moments,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config.hash().to_le_bytes());
        let config_text = self.config.to_text();
        out.extend_from_slice(&(config_text.len() as u32).to_le_bytes());
        out.extend_from_slice(config_text.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        out.extend_from_slice(&self.q_vocab.to_le_bytes());
        out.extend_from_slice(&self.a_vocab.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.trainable as u8);
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for (m, v) in &self.moments {
            for x in m {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, offset: 0 };
        if r.take(4)? != MAGIC {
            return Err(TrainError::Format {
                offset: 0,
                detail: "bad magic, expected \"HCKP\"".into(),
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TrainError::Format {
                offset: 4,
                detail: format!("unsupported version {version}"),
            });
        }
        let stored_hash = r.u64()?;
        let config_len = r.u32()? as usize;
        let config_off = r.offset;
        let config_text = std::str::from_utf8(r.take(config_len)?).map_err(|_| {
            TrainError::Format { offset: config_off, detail: "config text is not utf-8".into() }
        })?;
        let config = RunConfig::from_text(config_text)?;
        if config.hash() != stored_hash {
            return Err(TrainError::Format {
                offset: 8,
                detail: "stored config hash does not match the stored config".into(),
            });
        }
        let step = r.u64()?;
        let adam_t = r.u64()?;
        let q_vocab = r.u32()?;
        let a_vocab = r.u32()?;
        let n_entries = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n_entries);
        for _ in 0..n_entries {
            let name_len = r.u32()? as usize;
            let name_off = r.offset;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| TrainError::Format {
                    offset: name_off,
                    detail: "parameter name is not utf-8".into(),
                })?
                .to_string();
            let trainable = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f32s(numel)?;
            entries.push(CheckpointEntry { name, trainable, shape, data });
        }
        let mut moments = Vec::new();
        for e in entries.iter().filter(|e| e.trainable) {
            let m = r.f32s(e.data.len())?;
            let v = r.f32s(e.data.len())?;
            moments.push((m, v));
        }
        if r.offset != bytes.len() {
            return Err(TrainError::Format {
                offset: r.offset,
                detail: format!("{} trailing bytes", bytes.len() - r.offset),
            });
        }
        Ok(Checkpoint { config, step, adam_t, q_vocab, a_vocab, entries, moments })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Writes the stored parameters into a freshly built ParamSet, matching
    /// by name, and restores the optimizer moments.
    pub fn restore_into(&self, params: &mut ParamSet<f32>, opt: &mut Adam<f32>) -> Result<()> {
        if params.len() != self.entries.len() {
            return Err(TrainError::Config(format!(
                "checkpoint has {} parameters, model has {}",
                self.entries.len(),
                params.len()
            )));
        }
        for (id, entry) in params.ids().collect::<Vec<_>>().into_iter().zip(&self.entries) {
            if params.name(id) != entry.name {
                return Err(TrainError::Config(format!(
                    "parameter order mismatch: {} vs {}",
                    params.name(id),
                    entry.name
                )));
            }
            *params.get_mut(id) =
                Tensor::new(entry.shape.clone(), entry.data.clone()).map_err(TrainError::Tensor)?;
        }
        opt.t = self.adam_t;
        let (ms, vs) = opt.moments_mut();
        if ms.len() != self.moments.len() {
            return Err(TrainError::Config("optimizer state size mismatch".into()));
        }
        for (slot, (m, v)) in self.moments.iter().enumerate() {
            ms[slot] = Tensor::new(ms[slot].shape().to_vec(), m.clone()).map_err(TrainError::Tensor)?;
            vs[slot] = Tensor::new(vs[slot].shape().to_vec(), v.clone()).map_err(TrainError::Tensor)?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(TrainError::Format {
                offset: self.offset,
                detail: format!("truncated: needed {n} bytes"),
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "ADJSCCK\0"
//! header_len   u32
//! header       JSON      { format_version, config, kind, epoch, stage,
//!                          provenance, optimizer_step }
//! count        u32       number of arrays
//! per array:
//!   name_len   u32, name (UTF-8)
//!   ndim       u32, dims (u32 each)
//!   data       f32 × prod(dims)
//! ```
//!
//! Model weights are stored as `model.<param>`; Adam moments as
//! `adam.m.<param>` and `adam.v.<param>`.

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::model::{JsccModel, ModelKind};
use crate::nn::Module;
use crate::optim::Adam;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"ADJSCCK\0";
pub const FORMAT_VERSION: &str = "adjscc-checkpoint/1";

const MODEL_PREFIX: &str = "model.";
const FIRST_MOMENT_PREFIX: &str = "adam.m.";
const SECOND_MOMENT_PREFIX: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: String,
    pub config: ExperimentConfig,
    pub kind: ModelKind,
    /// Completed epochs.
    pub epoch: usize,
    /// Index of the last stage that ran (1-based; 0 = untrained).
    pub stage: usize,
    /// One line per stage or event that produced these weights.
    pub provenance: Vec<String>,
    pub optimizer_step: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn from_model(
        model: &JsccModel<f32>,
        optimizer: Option<&Adam<f32>>,
        epoch: usize,
        stage: usize,
        provenance: Vec<String>,
    ) -> Self {
        let mut arrays = BTreeMap::new();
        model.visit("", &mut |name, p| {
            arrays.insert(format!("{MODEL_PREFIX}{name}"), p.value.clone());
        });
        if let Some(opt) = optimizer {
            for (k, v) in &opt.first_moment {
                arrays.insert(format!("{FIRST_MOMENT_PREFIX}{k}"), v.clone());
            }
            for (k, v) in &opt.second_moment {
                arrays.insert(format!("{SECOND_MOMENT_PREFIX}{k}"), v.clone());
            }
        }
        Self {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION.to_string(),
                config: model.config.clone(),
                kind: model.kind(),
                epoch,
                stage,
                provenance,
                optimizer_step: optimizer.map_or(0, |o| o.step),
            },
            arrays,
        }
    }

    pub fn model(&self) -> Result<JsccModel<f32>> {
        let mut model = JsccModel::<f32>::new(&self.header.config, self.header.kind, 0)?;
        let mut missing = None;
        model.visit_mut("", &mut |name, p| {
            match self.arrays.get(&format!("{MODEL_PREFIX}{name}")) {
                Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
                _ => missing = missing.take().or(Some(name.to_string())),
            }
        });
        match missing {
            Some(name) => Err(Error::Checkpoint(format!("missing or misshapen parameter {name}"))),
            None => Ok(model),
        }
    }

    pub fn optimizer(&self) -> Adam<f32> {
        let mut opt = Adam::new();
        opt.step = self.header.optimizer_step;
        for (k, v) in &self.arrays {
            if let Some(name) = k.strip_prefix(FIRST_MOMENT_PREFIX) {
                opt.first_moment.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix(SECOND_MOMENT_PREFIX) {
                opt.second_moment.insert(name.to_string(), v.clone());
            }
        }
        opt
    }

    /// Parameter counts per top-level component.
    pub fn parameter_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for (k, v) in &self.arrays {
            if let Some(name) = k.strip_prefix(MODEL_PREFIX) {
                let component = name.split('.').next().unwrap_or(name).to_string();
                *counts.entry(component).or_insert(0) += v.len();
            }
        }
        counts
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        let header = serde_json::to_vec(&self.header)?;
        write_u32(&mut w, header.len())?;
        w.write_all(&header)?;
        write_u32(&mut w, self.arrays.len())?;
        for (name, t) in &self.arrays {
            write_u32(&mut w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(&mut w, t.shape().len())?;
            for &d in t.shape() {
                write_u32(&mut w, d)?;
            }
            let mut bytes = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let len = read_u32(&mut r)?;
        let mut header = vec![0u8; len];
        r.read_exact(&mut header)?;
        let header: CheckpointHeader = serde_json::from_slice(&header)?;
        if header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version '{}'",
                header.format_version
            )));
        }
        let count = read_u32(&mut r)?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)?;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)?;
            let shape = (0..ndim).map(|_| read_u32(&mut r)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            arrays.insert(name, Tensor::from_vec(&shape, data));
        }
        Ok(Self { header, arrays })
    }

    /// Writes to a temporary file beside `path`, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        std::fs::create_dir_all(dir)?;
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        self.write_to(std::io::BufWriter::new(tmp.as_file_mut()))?;
        tmp.as_file().sync_all()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

fn write_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

/// SHA-256 over parameter names and raw bytes, optionally restricted by name.
pub fn parameter_hash(model: &JsccModel<f32>, include: &dyn Fn(&str) -> bool) -> String {
    let mut h = Sha256::new();
    model.visit("", &mut |name, p| {
        if include(name) {
            h.update(name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
    });
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::SnrDb;
    use crate::config::DecisionMode;

    #[test]
    fn save_load_forward_is_bit_exact() {
        let config = ExperimentConfig::smoke();
        let model = JsccModel::<f32>::new(&config, ModelKind::Adaptive, 9).unwrap();
        let mut opt = Adam::new();
        opt.step = 3;
        opt.first_moment.insert("x".into(), Tensor::full(&[2], 0.5));
        let ck = Checkpoint::from_model(&model, Some(&opt), 2, 1, vec!["stage 1".into()]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.optimizer().step, 3);
        let restored = back.model().unwrap();
        let x = Tensor::full(&[2, 3, 16, 16], 0.3f32);
        let snr = SnrDb::new(7.0).unwrap();
        let a = model.transmit(&x, snr, DecisionMode::Argmax, 1).unwrap();
        let b = restored.transmit(&x, snr, DecisionMode::Argmax, 1).unwrap();
        assert_eq!(a.reconstruction, b.reconstruction);
        assert_eq!(parameter_hash(&model, &|_| true), parameter_hash(&restored, &|_| true));
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(
            Checkpoint::read_from(&b"NOTACKPT........"[..]),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn parameter_counts_by_component() {
        let model = JsccModel::<f32>::new(&ExperimentConfig::smoke(), ModelKind::Fixed { active_groups: 2 }, 0).unwrap();
        let counts = Checkpoint::from_model(&model, None, 0, 0, vec![]).parameter_counts();
        assert!(!counts.contains_key("policy"));
        assert_eq!(counts.values().sum::<usize>(), model.num_params());
    }
}

//! Checkpoint file: magic `SRWM`, u32 version, a u32-length-prefixed UTF-8
//! `key = value` block (training config plus `step` and `input_dim`), a
//! u32 tensor count, then per tensor a u32-length-prefixed name and an FWTN
//! blob. Tensors are the parameters in canonical order followed by the Adam
//! moments `adam.m.<name>` and `adam.v.<name>`. All integers little-endian.

use std::path::{Path, PathBuf};

use super::config::TrainConfig;
use super::optim::Adam;
use crate::error::{Error, Result};
use crate::fwtn::{self, RawTensor, Reader};
use crate::numerics::{DType, Scalar, Tensor};
use crate::rng;
use crate::srwm::{ModelConfig, Params};

pub const MAGIC: &[u8; 4] = b"SRWM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub config: TrainConfig,
    /// Completed optimizer steps.
    pub step: u64,
    pub input_dim: usize,
    pub patch_dim: usize,
    pub params: Params<T>,
    pub adam: Adam<T>,
}

/// Header and tensor listing, readable without knowing the precision.
#[derive(Debug, Clone)]
pub struct CheckpointSummary {
    pub path: PathBuf,
    pub version: u32,
    pub step: u64,
    pub config: TrainConfig,
    pub input_dim: usize,
    pub patch_dim: usize,
    pub tensors: Vec<(String, DType, Vec<usize>)>,
}

fn push_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn config_block(config: &TrainConfig, step: u64, input_dim: usize, patch_dim: usize) -> String {
    let mut text = format!("step = {step}\ninput_dim = {input_dim}\npatch_dim = {patch_dim}\n");
    text.push_str(&config.to_text());
    text
}

impl<T: Scalar> Checkpoint<T> {
    pub fn model_config(&self) -> ModelConfig {
        self.config.model_config(self.input_dim, self.patch_dim)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let text = config_block(&self.config, self.step, self.input_dim, self.patch_dim);
        push_u32(&mut out, text.len());
        out.extend_from_slice(text.as_bytes());

        let entries = self.params.entries();
        push_u32(&mut out, entries.len() * 3);
        let mut put = |name: &str, t: &Tensor<T>| {
            push_u32(&mut out, name.len());
            out.extend_from_slice(name.as_bytes());
            fwtn::encode(t, &mut out);
        };
        for (name, p) in &entries {
            put(name, p);
        }
        for ((name, _), m) in entries.iter().zip(&self.adam.m) {
            put(&format!("adam.m.{name}"), m);
        }
        for ((name, _), v) in entries.iter().zip(&self.adam.v) {
            put(&format!("adam.v.{name}"), v);
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(path, &bytes)
    }

    pub fn decode(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (summary, raw) = parse(path, bytes)?;
        let model = summary.config.model_config(summary.input_dim, summary.patch_dim);
        model.validate()?;
        let template = Params::<T>::init(&model, &mut rng::stream(0, &[]))?;
        let names: Vec<String> = template.entries().into_iter().map(|(n, _)| n).collect();
        let expect: Vec<String> = names
            .iter()
            .cloned()
            .chain(names.iter().map(|n| format!("adam.m.{n}")))
            .chain(names.iter().map(|n| format!("adam.v.{n}")))
            .collect();
        if raw.len() != expect.len() {
            return Err(Error::CheckpointMismatch(format!(
                "{} holds {} tensors, its config implies {}",
                path.display(),
                raw.len(),
                expect.len()
            )));
        }
        let mut tensors = Vec::with_capacity(raw.len());
        for ((name, t), want) in raw.into_iter().zip(&expect) {
            if &name != want {
                return Err(Error::CheckpointMismatch(format!("expected tensor `{want}`, found `{name}`")));
            }
            let dtype = t.dtype();
            let t = t.into_exact::<T>().ok_or_else(|| {
                Error::CheckpointMismatch(format!(
                    "tensor `{name}` is {dtype:?}, loading as {:?}",
                    T::DTYPE
                ))
            })?;
            tensors.push(t);
        }
        let n = names.len();
        let v = tensors.split_off(2 * n);
        let m = tensors.split_off(n);
        let params = Params::with_tensors(&template, tensors)?;
        for (moments, kind) in [(&m, "m"), (&v, "v")] {
            for ((name, p), t) in params.entries().iter().zip(moments) {
                if p.shape() != t.shape() {
                    return Err(Error::CheckpointMismatch(format!(
                        "adam.{kind}.{name} has shape {:?}, parameter has {:?}",
                        t.shape(),
                        p.shape()
                    )));
                }
            }
        }
        let mut adam = Adam::new(&params);
        adam.m = m;
        adam.v = v;
        adam.t = summary.step;
        Ok(Checkpoint {
            config: summary.config,
            step: summary.step,
            input_dim: summary.input_dim,
            patch_dim: summary.patch_dim,
            params,
            adam,
        })
    }
}

fn parse(path: &Path, bytes: &[u8]) -> Result<(CheckpointSummary, Vec<(String, RawTensor)>)> {
    let mut r = Reader::new(path, bytes);
    if r.take(4)? != MAGIC {
        return Err(r.fail(0, "bad magic, not an SRWM checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(4, format!("unsupported checkpoint version {version}, expected {VERSION}")));
    }
    let len = r.u32()? as usize;
    let at = r.pos;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.fail(at, "config block is not UTF-8"))?;
    let mut step = None;
    let mut input_dim = None;
    let mut patch_dim = None;
    let mut rest = String::new();
    for line in text.lines() {
        match line.split_once('=').map(|(k, v)| (k.trim(), v.trim())) {
            Some(("step", v)) => step = v.parse().ok(),
            Some(("input_dim", v)) => input_dim = v.parse().ok(),
            Some(("patch_dim", v)) => patch_dim = v.parse().ok(),
            _ => {
                rest.push_str(line);
                rest.push('\n');
            }
        }
    }
    let (Some(step), Some(input_dim), Some(patch_dim)) = (step, input_dim, patch_dim) else {
        return Err(r.fail(at, "config block lacks step, input_dim or patch_dim"));
    };
    let mut config = TrainConfig::default();
    config
        .apply_text(path, &rest)
        .map_err(|e| r.fail(at, format!("config block: {e}")))?;

    let count = r.u32()? as usize;
    let mut raw = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let n = r.u32()? as usize;
        let at = r.pos;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| r.fail(at, "tensor name is not UTF-8"))?
            .to_string();
        let t = fwtn::decode_from(&mut r)?;
        raw.push((name, t));
    }
    if !r.at_end() {
        return Err(r.fail(r.pos, "trailing bytes after last tensor"));
    }
    let summary = CheckpointSummary {
        path: path.to_path_buf(),
        version,
        step,
        config,
        input_dim,
        patch_dim,
        tensors: raw
            .iter()
            .map(|(n, t)| (n.clone(), t.dtype(), t.shape().to_vec()))
            .collect(),
    };
    Ok((summary, raw))
}

/// Reads a checkpoint's header and tensor list.
pub fn inspect(path: impl AsRef<Path>) -> Result<CheckpointSummary> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse(path, &bytes)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint<f64> {
        let config = TrainConfig::preset("micro").unwrap();
        let model = config.model_config(8, 0);
        let params = Params::init(&model, &mut rng::stream(5, &[])).unwrap();
        let mut adam = Adam::new(&params);
        adam.m[1].data_mut()[0] = 0.25;
        adam.t = 3;
        Checkpoint {
            config,
            step: 3,
            input_dim: 8,
            patch_dim: 0,
            params,
            adam,
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = sample();
        let bytes = ck.encode();
        let back = Checkpoint::<f64>::decode(Path::new("mem"), &bytes).unwrap();
        assert_eq!(back.encode(), bytes);
        assert!(back.params.bitwise_eq(&ck.params));
        assert_eq!(back.adam, ck.adam);
        assert_eq!(back.config, ck.config);
    }

    #[test]
    fn version_and_truncation_errors() {
        let mut bytes = sample().encode();
        let full = bytes.clone();
        bytes[4] = 9;
        let err = Checkpoint::<f64>::decode(Path::new("a.ck"), &bytes).unwrap_err().to_string();
        assert!(err.contains("version 9"), "{err}");
        let err = Checkpoint::<f64>::decode(Path::new("a.ck"), &full[..full.len() - 3])
            .unwrap_err()
            .to_string();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn precision_mismatch_is_reported() {
        let bytes = sample().encode();
        let err = Checkpoint::<f32>::decode(Path::new("a.ck"), &bytes).unwrap_err().to_string();
        assert!(err.contains("F64"), "{err}");
    }
}

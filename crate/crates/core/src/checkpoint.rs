//! Versioned checkpoint container, magic `CSNC`.
//!
//! Layout: magic bytes, u32 version, then one record per parameter:
//! u32 name length, name bytes, u32 rank, u32 extents, payload as
//! little-endian f64. The first record, `__meta__`, encodes the model
//! configuration as an f64 vector so a checkpoint alone rebuilds the
//! architecture. Round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{DecoderKind, ForecastModel, ModelConfig};
use crate::nn::Parameterized;
use crate::synthdata::{DatasetSpec, Task};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"CSNC";
const VERSION: u32 = 1;
const META_NAME: &str = "__meta__";
const META_VERSION: f64 = 1.0;

fn meta_record(cfg: &ModelConfig) -> Vec<f64> {
    vec![
        META_VERSION,
        cfg.task.code() as f64,
        cfg.decoder.code() as f64,
        cfg.latent_dim as f64,
        if cfg.stochastic { 1.0 } else { 0.0 },
        if cfg.with_recognition { 1.0 } else { 0.0 },
        cfg.nf as f64,
        cfg.horizon as f64,
        cfg.frame_h as f64,
        cfg.frame_w as f64,
        cfg.joints as f64,
        cfg.enc_base_channels as f64,
        cfg.feature_dim as f64,
        cfg.fc_hidden as f64,
        cfg.y_feature_dim as f64,
    ]
}

fn cfg_from_meta(meta: &[f64]) -> Result<ModelConfig> {
    if meta.len() != 15 {
        return Err(Error::format(format!(
            "checkpoint meta record has {} fields, expected 15",
            meta.len()
        )));
    }
    if meta[0] != META_VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint meta version {}",
            meta[0]
        )));
    }
    let as_usize = |v: f64| v as usize;
    let cfg = ModelConfig {
        task: Task::from_code(meta[1] as u8)?,
        decoder: DecoderKind::from_code(meta[2] as u8)?,
        latent_dim: as_usize(meta[3]),
        stochastic: meta[4] != 0.0,
        with_recognition: meta[5] != 0.0,
        nf: as_usize(meta[6]),
        horizon: as_usize(meta[7]),
        frame_h: as_usize(meta[8]),
        frame_w: as_usize(meta[9]),
        joints: as_usize(meta[10]),
        enc_base_channels: as_usize(meta[11]),
        feature_dim: as_usize(meta[12]),
        fc_hidden: as_usize(meta[13]),
        y_feature_dim: as_usize(meta[14]),
    };
    cfg.validate()
        .map_err(|e| Error::format(format!("checkpoint meta rebuilds no valid model: {e}")))?;
    Ok(cfg)
}

fn push_record(out: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn model_to_bytes(model: &ForecastModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta = meta_record(&model.cfg);
    push_record(&mut out, META_NAME, &[meta.len()], &meta);
    for (name, tensor) in model.param_list() {
        push_record(&mut out, &name, tensor.shape(), tensor.data());
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(format!(
                "truncated checkpoint: wanted {n} bytes for {what} at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn read_record(c: &mut Cursor) -> Result<(String, Tensor)> {
    let name_len = c.u32("name length")? as usize;
    if name_len > 4096 {
        return Err(Error::format(format!(
            "implausible parameter name length {name_len}"
        )));
    }
    let name = std::str::from_utf8(c.take(name_len, "name")?)
        .map_err(|_| Error::format("parameter name is not utf-8"))?
        .to_string();
    let rank = c.u32("rank")? as usize;
    if rank > 8 {
        return Err(Error::format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(c.u32("extent")? as usize);
    }
    let n: usize = shape.iter().product();
    let raw = c.take(8 * n, "payload")?;
    let data: Vec<f64> = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let tensor = Tensor::from_vec(&shape, data)
        .map_err(|e| Error::format(format!("record '{name}': {e}")))?;
    Ok((name, tensor))
}

pub fn model_from_bytes(buf: &[u8]) -> Result<ForecastModel> {
    let mut c = Cursor { buf, pos: 0 };
    let magic = c.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let (meta_name, meta) = read_record(&mut c)?;
    if meta_name != META_NAME {
        return Err(Error::format(format!(
            "first checkpoint record must be {META_NAME}, found '{meta_name}'"
        )));
    }
    let cfg = cfg_from_meta(meta.data())?;
    let mut model = ForecastModel::new(cfg, 0)?;

    let mut records = std::collections::HashMap::new();
    while !c.done() {
        let (name, tensor) = read_record(&mut c)?;
        if records.insert(name.clone(), tensor).is_some() {
            return Err(Error::format(format!("duplicate record '{name}'")));
        }
    }
    let mut missing = Vec::new();
    model.visit_params_mut("model", &mut |name, t| match records.remove(name) {
        Some(stored) if stored.shape() == t.shape() => *t = stored,
        Some(stored) => missing.push(format!(
            "'{name}' has shape {:?}, expected {:?}",
            stored.shape(),
            t.shape()
        )),
        None => missing.push(format!("'{name}' absent")),
    });
    if !missing.is_empty() {
        return Err(Error::format(format!(
            "checkpoint does not match its architecture: {}",
            missing.join("; ")
        )));
    }
    if !records.is_empty() {
        let mut extra: Vec<String> = records.into_keys().collect();
        extra.sort();
        return Err(Error::format(format!(
            "checkpoint carries unknown records: {}",
            extra.join(", ")
        )));
    }
    Ok(model)
}

pub fn save_model(model: &ForecastModel, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ForecastModel> {
    let mut buf = Vec::new();
    std::fs::File::open(path.as_ref())?.read_to_end(&mut buf)?;
    model_from_bytes(&buf)
}

/// Rejects checkpoint/dataset pairs that disagree on task or geometry.
pub fn check_compatible(cfg: &ModelConfig, spec: &DatasetSpec) -> Result<()> {
    let mut problems = Vec::new();
    if cfg.task != spec.task {
        problems.push(format!(
            "task {} vs dataset {}",
            cfg.task.name(),
            spec.task.name()
        ));
    }
    if cfg.nf != spec.history_frames {
        problems.push(format!(
            "history frames {} vs dataset {}",
            cfg.nf, spec.history_frames
        ));
    }
    if cfg.horizon != spec.horizon {
        problems.push(format!("horizon {} vs dataset {}", cfg.horizon, spec.horizon));
    }
    if (cfg.frame_h, cfg.frame_w) != (spec.frame_h, spec.frame_w) {
        problems.push(format!(
            "frame {}x{} vs dataset {}x{}",
            cfg.frame_h, cfg.frame_w, spec.frame_h, spec.frame_w
        ));
    }
    if cfg.task == Task::Joints && cfg.joints != spec.joints {
        problems.push(format!("joints {} vs dataset {}", cfg.joints, spec.joints));
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::input(format!(
            "checkpoint incompatible with dataset: {}",
            problems.join("; ")
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ForecastModel {
        let cfg = ModelConfig {
            task: Task::Trajectory,
            decoder: DecoderKind::Fc,
            latent_dim: 3,
            stochastic: true,
            with_recognition: true,
            nf: 1,
            horizon: 5,
            frame_h: 16,
            frame_w: 16,
            joints: 0,
            enc_base_channels: 4,
            feature_dim: 8,
            fc_hidden: 12,
            y_feature_dim: 6,
        };
        ForecastModel::new(cfg, 77).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = model_to_bytes(&m);
        let back = model_from_bytes(&bytes).unwrap();
        assert_eq!(bytes, model_to_bytes(&back));
        assert_eq!(m.cfg, back.cfg);
        for ((na, ta), (nb, tb)) in m.param_list().iter().zip(back.param_list()) {
            assert_eq!(*na, nb);
            let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "parameter {na}");
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut bytes = model_to_bytes(&model());
        bytes[0] = b'Z';
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_is_format_error() {
        let mut bytes = model_to_bytes(&model());
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(model_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_format_error() {
        let bytes = model_to_bytes(&model());
        assert!(matches!(
            model_from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn compatibility_check_names_the_mismatch() {
        let m = model();
        let spec = DatasetSpec {
            task: Task::Trajectory,
            n_samples: 4,
            modes: 2,
            history_frames: 2, // model wants 1
            horizon: 5,
            frame_h: 16,
            frame_w: 16,
            joints: 0,
            seed: 0,
        };
        let err = check_compatible(&m.cfg, &spec).unwrap_err();
        assert!(err.to_string().contains("history frames"));
    }
}

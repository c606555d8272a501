//! Binary checkpoints for trained probes and adapted backbones.
//!
//! Layout, little-endian:
//!
//! | offset | size | field                                      |
//! |--------|------|--------------------------------------------|
//! | 0      | 4    | magic `FCKP`                               |
//! | 4      | 4    | version (u32, currently 1)                 |
//! | 8      | 4    | kind (u32: 1 probe, 2 adapted backbone)    |
//! | 12     | 4    | header length `L` (u32)                    |
//! | 16     | L    | UTF-8 JSON: `{"model": .., "config": ..}`  |
//! | 16+L   | 8    | parameter count `N` (u64)                  |
//! | 24+L   | 8N   | parameters (f64)                           |
//!
//! `model` describes the architecture needed to rebuild the parameters;
//! `config` echoes the run configuration. An adapted checkpoint stores the base
//! ViT weights, then the adapters, then the probe.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::probe::{ProbeParams, PROBE_PARAM_COUNT};
use crate::vit::{lora_init, vit_init, LoRAViTParams, ViTConfig, ViTParams};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Probe,
    Adapted,
}

impl CheckpointKind {
    fn code(self) -> u32 {
        match self {
            Self::Probe => 1,
            Self::Adapted => 2,
        }
    }

    fn from_code(code: u32) -> Option<Self> {
        match code {
            1 => Some(Self::Probe),
            2 => Some(Self::Adapted),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::Probe => "probe",
            Self::Adapted => "adapted backbone",
        }
    }
}

/// Architecture of an adapted backbone checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptedModel {
    pub vit: ViTConfig,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub model: Value,
    pub config: Value,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn probe(params: &ProbeParams<f64>, config: Value) -> Self {
        Self {
            kind: CheckpointKind::Probe,
            model: Value::Null,
            config,
            params: params.to_flat(),
        }
    }

    pub fn adapted(vit: &LoRAViTParams<f64>, probe: &ProbeParams<f64>, config: Value) -> Self {
        let model = AdaptedModel {
            vit: vit.base.config,
            rank: vit.rank,
            alpha: vit.alpha,
        };
        let mut params = vit.base.to_flat();
        params.extend(vit.adapters_to_flat());
        params.extend(probe.to_flat());
        Self {
            kind: CheckpointKind::Adapted,
            model: serde_json::to_value(model).expect("model serializes"),
            config,
            params,
        }
    }

    fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::TypeMismatch {
                expected: kind.name().into(),
                found: self.kind.name().into(),
            });
        }
        Ok(())
    }

    pub fn into_probe(self) -> Result<ProbeParams<f64>> {
        self.expect_kind(CheckpointKind::Probe)?;
        ProbeParams::from_flat(&self.params)
    }

    pub fn into_adapted(self) -> Result<(LoRAViTParams<f64>, ProbeParams<f64>)> {
        self.expect_kind(CheckpointKind::Adapted)?;
        let model: AdaptedModel = serde_json::from_value(self.model)
            .map_err(|e| Error::Schema(format!("checkpoint model: {e}")))?;
        model.vit.validate()?;
        let n_base = vit_init::<f64>(&model.vit, 0)?.param_count();
        let n_adapt = model.vit.adapter_param_count(model.rank);
        if self.params.len() != n_base + n_adapt + PROBE_PARAM_COUNT {
            return Err(Error::Schema(format!(
                "adapted checkpoint holds {} parameters, architecture needs {}",
                self.params.len(),
                n_base + n_adapt + PROBE_PARAM_COUNT
            )));
        }
        let base = ViTParams::from_flat(&model.vit, &self.params[..n_base])?;
        let mut vit = lora_init(base, model.rank, model.alpha, 0)?;
        vit.set_adapters_flat(&self.params[n_base..n_base + n_adapt])?;
        let probe = ProbeParams::from_flat(&self.params[n_base + n_adapt..])?;
        Ok((vit, probe))
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let header = serde_json::to_vec(&serde_json::json!({
        "model": ckpt.model,
        "config": ckpt.config,
    }))
    .expect("header serializes");
    let mut out = Vec::with_capacity(24 + header.len() + 8 * ckpt.params.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&ckpt.kind.code().to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(ckpt.params.len() as u64).to_le_bytes());
    for p in &ckpt.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn corrupt(offset: usize, reason: impl Into<String>) -> Error {
    Error::CorruptFile {
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn take<'a>(bytes: &'a [u8], offset: usize, len: usize, what: &str) -> Result<&'a [u8]> {
    bytes
        .get(offset..offset + len)
        .ok_or_else(|| corrupt(bytes.len(), format!("truncated while reading {what}")))
}

fn u32_at(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    let b = take(bytes, offset, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if take(bytes, 0, 4, "magic")? != CHECKPOINT_MAGIC {
        return Err(corrupt(0, "bad magic (expected FCKP)"));
    }
    let version = u32_at(bytes, 4, "version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let code = u32_at(bytes, 8, "kind")?;
    let kind = CheckpointKind::from_code(code).ok_or_else(|| corrupt(8, format!("unknown kind {code}")))?;
    let header_len = u32_at(bytes, 12, "header length")? as usize;
    let header: Value = serde_json::from_slice(take(bytes, 16, header_len, "header")?)
        .map_err(|e| corrupt(16, format!("header is not JSON: {e}")))?;
    let off = 16 + header_len;
    let count = u64::from_le_bytes(take(bytes, off, 8, "parameter count")?.try_into().expect("8 bytes"));
    let payload_start = off + 8;
    let expected = (count as usize)
        .checked_mul(8)
        .and_then(|n| n.checked_add(payload_start))
        .ok_or_else(|| corrupt(off, "parameter count overflows"))?;
    if bytes.len() < expected {
        return Err(corrupt(bytes.len(), format!("truncated payload: {count} parameters declared")));
    }
    if bytes.len() > expected {
        return Err(corrupt(expected, "trailing bytes after parameters"));
    }
    let params: Vec<f64> = bytes[payload_start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if let Some(k) = params.iter().position(|v| !v.is_finite()) {
        return Err(corrupt(payload_start + 8 * k, "non-finite parameter"));
    }
    let mut header = header;
    let model = header.get_mut("model").map(Value::take).unwrap_or(Value::Null);
    let config = header.get_mut("config").map(Value::take).unwrap_or(Value::Null);
    Ok(Checkpoint {
        kind,
        model,
        config,
        params,
    })
}

pub fn write_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

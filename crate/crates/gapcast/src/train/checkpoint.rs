//! Checkpoint directory layout: weight files for the policy, value net and
//! discriminator, optimizer-moment files, and a manifest with the config
//! hash and epoch counter.

use crate::driver::MlpPolicy;
use crate::error::{Error, Result};
use crate::mlp::{load_weights_expecting, save_weights, Activation, Adam, TinyMlp};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub stage: String,
    pub epoch: usize,
    pub seed: u64,
    pub config_hash: u64,
    pub log_std: f64,
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub policy: MlpPolicy,
    pub value: TinyMlp,
    pub discriminator: Option<TinyMlp>,
    pub policy_moments: Option<(u64, Vec<f64>, Vec<f64>)>,
    pub value_moments: Option<(u64, Vec<f64>, Vec<f64>)>,
}

/// FNV-1a over a serialized config, for cheap manifest compatibility checks.
pub fn config_hash<T: Serialize>(cfg: &T) -> u64 {
    let text = serde_json::to_string(cfg).unwrap_or_default();
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn write_moments(path: &Path, snapshot: &(u64, Vec<f64>, Vec<f64>)) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(b"GCAM");
    buf.extend_from_slice(&snapshot.0.to_le_bytes());
    buf.extend_from_slice(&(snapshot.1.len() as u64).to_le_bytes());
    for &m in &snapshot.1 {
        buf.extend_from_slice(&m.to_le_bytes());
    }
    for &v in &snapshot.2 {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn read_moments(path: &Path) -> Result<(u64, Vec<f64>, Vec<f64>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 20 || &buf[..4] != b"GCAM" {
        return Err(Error::Training(format!("{} is not a moments file", path.display())));
    }
    let step = u64::from_le_bytes(buf[4..12].try_into().unwrap());
    let n = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
    if buf.len() != 20 + 16 * n {
        return Err(Error::Training("moments file has the wrong size".into()));
    }
    let mut m = Vec::with_capacity(n);
    let mut v = Vec::with_capacity(n);
    for k in 0..n {
        let off = 20 + 8 * k;
        m.push(f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()));
    }
    for k in 0..n {
        let off = 20 + 8 * n + 8 * k;
        v.push(f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()));
    }
    Ok((step, m, v))
}

/// Write a full training checkpoint into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    manifest: &CheckpointManifest,
    policy: &MlpPolicy,
    value: &TinyMlp,
    discriminator: Option<&TinyMlp>,
    policy_adam: Option<&Adam>,
    value_adam: Option<&Adam>,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_weights(&policy.net, &dir.join("policy.weights"))?;
    save_weights(value, &dir.join("value.weights"))?;
    if let Some(d) = discriminator {
        save_weights(d, &dir.join("discriminator.weights"))?;
    }
    if let Some(a) = policy_adam {
        write_moments(&dir.join("policy.moments"), &a.snapshot())?;
    }
    if let Some(a) = value_adam {
        write_moments(&dir.join("value.moments"), &a.snapshot())?;
    }
    let text = toml::to_string(manifest).map_err(|e| Error::Training(e.to_string()))?;
    std::fs::write(dir.join("manifest.toml"), text)?;
    Ok(())
}

/// Load a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest: CheckpointManifest = toml::from_str(
        &std::fs::read_to_string(dir.join("manifest.toml"))
            .map_err(|e| Error::Training(format!("read manifest: {e}")))?,
    )
    .map_err(|e| Error::Training(format!("parse manifest: {e}")))?;
    let net = load_weights_expecting(
        &dir.join("policy.weights"),
        &crate::driver::DRIVER_LAYERS,
        Activation::Tanh,
        Activation::Tanh,
    )?;
    let mut policy = MlpPolicy::from_net(net)?;
    policy.log_std = manifest.log_std;
    let value = load_weights_expecting(
        &dir.join("value.weights"),
        &super::VALUE_LAYERS,
        Activation::Tanh,
        Activation::Identity,
    )?;
    let disc_path = dir.join("discriminator.weights");
    let discriminator = if disc_path.exists() {
        Some(load_weights_expecting(
            &disc_path,
            &super::gail::DISC_LAYERS,
            Activation::Relu,
            Activation::Sigmoid,
        )?)
    } else {
        None
    };
    let read_opt = |name: &str| -> Result<Option<(u64, Vec<f64>, Vec<f64>)>> {
        let p = dir.join(name);
        if p.exists() {
            Ok(Some(read_moments(&p)?))
        } else {
            Ok(None)
        }
    };
    Ok(Checkpoint {
        manifest,
        policy,
        value,
        discriminator,
        policy_moments: read_opt("policy.moments")?,
        value_moments: read_opt("value.moments")?,
    })
}

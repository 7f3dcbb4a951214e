//! Weight file format: binary, little-endian.
//!
//! Layout: magic `GCMW`, version u32, layer count u32, layer sizes u32 each,
//! hidden/output activation ids u8 each, input-scale count u32 and values f64
//! each, then per layer the row-major weight block followed by the bias block
//! (f64 each), and finally an FNV-1a 64 checksum over everything before it.

use crate::error::{Error, Result};
use crate::mlp::{Activation, TinyMlp};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"GCMW";
const VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn save_weights(net: &TinyMlp, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(net.sizes().len() as u32).to_le_bytes());
    for &s in net.sizes() {
        buf.extend_from_slice(&(s as u32).to_le_bytes());
    }
    buf.push(net.hidden_activation().id());
    buf.push(net.output_activation().id());
    buf.extend_from_slice(&(net.input_scales().len() as u32).to_le_bytes());
    for &s in net.input_scales() {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    let (weights, biases) = net.params();
    for l in 0..weights.len() {
        for &w in &weights[l] {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        for &b in &biases[l] {
            buf.extend_from_slice(&b.to_le_bytes());
        }
    }
    let checksum = fnv1a(&buf);
    buf.extend_from_slice(&checksum.to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Mlp("weight file truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_weights(path: &Path) -> Result<TinyMlp> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 16 {
        return Err(Error::Mlp("weight file too short".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a(body) != stored {
        return Err(Error::Mlp("weight file checksum mismatch".into()));
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Mlp("not a weight file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Mlp(format!("unsupported weight file version {version}")));
    }
    let n_sizes = c.u32()? as usize;
    if !(2..=16).contains(&n_sizes) {
        return Err(Error::Mlp(format!("implausible layer count {n_sizes}")));
    }
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        sizes.push(c.u32()? as usize);
    }
    if sizes.iter().any(|&s| s == 0 || s > 1 << 16) {
        return Err(Error::Mlp("implausible layer size".into()));
    }
    let hidden = Activation::from_id(c.u8()?)?;
    let output = Activation::from_id(c.u8()?)?;
    let n_scales = c.u32()? as usize;
    if n_scales != sizes[0] {
        return Err(Error::Mlp(format!(
            "input scale count {n_scales} does not match input width {}",
            sizes[0]
        )));
    }
    let mut scales = Vec::with_capacity(n_scales);
    for _ in 0..n_scales {
        scales.push(c.f64()?);
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for l in 0..n_sizes - 1 {
        let nw = sizes[l] * sizes[l + 1];
        let mut w = Vec::with_capacity(nw);
        for _ in 0..nw {
            w.push(c.f64()?);
        }
        let mut b = Vec::with_capacity(sizes[l + 1]);
        for _ in 0..sizes[l + 1] {
            b.push(c.f64()?);
        }
        weights.push(w);
        biases.push(b);
    }
    if c.pos != body.len() {
        return Err(Error::Mlp("trailing bytes in weight file".into()));
    }
    let net = TinyMlp::from_parts(sizes, weights, biases, hidden, output, scales);
    if !net.all_finite() {
        return Err(Error::Mlp("non-finite parameter in weight file".into()));
    }
    Ok(net)
}

/// Load a weight file and check shape and activations against expectations.
pub fn load_weights_expecting(
    path: &Path,
    sizes: &[usize],
    hidden: Activation,
    output: Activation,
) -> Result<TinyMlp> {
    let net = load_weights(path)?;
    if net.sizes() != sizes {
        return Err(Error::Mlp(format!(
            "weight file {} has layer sizes {:?}, expected {:?}",
            path.display(),
            net.sizes(),
            sizes
        )));
    }
    if net.hidden_activation() != hidden || net.output_activation() != output {
        return Err(Error::Mlp(format!(
            "weight file {} has activations {:?}/{:?}, expected {:?}/{:?}",
            path.display(),
            net.hidden_activation(),
            net.output_activation(),
            hidden,
            output
        )));
    }
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut net =
            TinyMlp::new(&[12, 16, 16, 1], Activation::Tanh, Activation::Tanh, &mut rng).unwrap();
        net.set_input_scales(&[0.02; 12]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.weights");
        save_weights(&net, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        let x: Vec<f64> = (0..12).map(|i| i as f64 * 0.1 - 0.5).collect();
        let a = net.forward(&x).unwrap();
        let b = loaded.forward(&x).unwrap();
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        assert_eq!(loaded.input_scales(), net.input_scales());
    }

    #[test]
    fn shape_mismatch_is_an_explicit_error() {
        let net = TinyMlp::zeros(&[4, 16, 16, 1], Activation::LeakyRelu, Activation::Sigmoid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.weights");
        save_weights(&net, &path).unwrap();
        let err = load_weights_expecting(&path, &[12, 16, 16, 1], Activation::Tanh, Activation::Tanh)
            .unwrap_err();
        assert!(err.to_string().contains("layer sizes"));
    }

    #[test]
    fn corrupted_checksum_fails_to_load() {
        let net = TinyMlp::zeros(&[4, 8, 1], Activation::Tanh, Activation::Sigmoid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.weights");
        save_weights(&net, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_weights(&path).is_err());
    }
}

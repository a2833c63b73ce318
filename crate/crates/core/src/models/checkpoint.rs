//! Checkpoint directories: one IAGT file per tensor plus `manifest.txt`.
//!
//! ```text
//! fingerprint generator-v1 variant=iagan size=32 z_dim=120 base=32
//! meta encoder_input random
//! z.dense.w 120,2048 z.dense.w.iagt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Architecture, NetworkParams};
use crate::error::{Error, Result};
use crate::tensor::io;

pub const MANIFEST_FILE: &str = "manifest.txt";

fn shape_str(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

/// Writes `params` into `dir` (created if absent). `meta` pairs are recorded
/// verbatim in the manifest; keys and values must not contain whitespace.
pub fn save_checkpoint(params: &NetworkParams, dir: &Path, meta: &[(&str, &str)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = format!("fingerprint {}\n", params.fingerprint());
    for (k, v) in meta {
        if k.contains(char::is_whitespace) || v.contains(char::is_whitespace) || v.is_empty() {
            return Err(Error::Contract(format!("checkpoint meta {k:?}={v:?} must be non-empty words")));
        }
        manifest.push_str(&format!("meta {k} {v}\n"));
    }
    for (name, t) in params.params.iter().chain(&params.buffers) {
        let file = format!("{name}.iagt");
        io::save(t, &dir.join(&file))?;
        manifest.push_str(&format!("{name} {} {file}\n", shape_str(t.shape())));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Metadata lines of a checkpoint manifest.
pub fn checkpoint_meta(dir: &Path) -> Result<BTreeMap<String, String>> {
    let (_, meta, _) = read_manifest(dir)?;
    Ok(meta)
}

type Manifest = (String, BTreeMap<String, String>, Vec<(String, Vec<usize>, String)>);

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut lines = text.lines();
    let fingerprint = lines
        .next()
        .and_then(|l| l.strip_prefix("fingerprint "))
        .ok_or_else(|| Error::Integrity(format!("{} lacks a fingerprint line", path.display())))?
        .to_string();
    let mut meta = BTreeMap::new();
    let mut entries = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["meta", k, v] => {
                meta.insert(k.to_string(), v.to_string());
            }
            [name, shape, file] => {
                let shape = shape
                    .split(',')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| Error::Integrity(format!("bad shape in manifest line {line:?}")))?;
                entries.push((name.to_string(), shape, file.to_string()));
            }
            _ => return Err(Error::Integrity(format!("malformed manifest line {line:?}"))),
        }
    }
    Ok((fingerprint, meta, entries))
}

/// Loads a checkpoint. When `expected` is given its fingerprint must match
/// the manifest's.
pub fn load_checkpoint(dir: &Path, expected: Option<&Architecture>) -> Result<NetworkParams> {
    let (fingerprint, meta, entries) = read_manifest(dir)?;
    if let Some(arch) = expected {
        if arch.fingerprint() != fingerprint {
            return Err(Error::Integrity(format!(
                "checkpoint fingerprint {fingerprint:?} does not match {:?}",
                arch.fingerprint()
            )));
        }
    }
    let mut arch = Architecture::parse_fingerprint(&fingerprint)?;
    if let Some(seed) = meta.get("seed").and_then(|s| s.parse().ok()) {
        match &mut arch {
            Architecture::Generator(c) => c.seed = seed,
            Architecture::Discriminator(c) => c.seed = seed,
        }
    }
    let buffer_names: Vec<String> = arch
        .declarations()?
        .into_iter()
        .filter(|d| d.buffer)
        .map(|d| d.name)
        .collect();
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for (name, shape, file) in entries {
        if file.contains('/') || file.contains('\\') {
            return Err(Error::Integrity(format!("manifest file {file:?} escapes the checkpoint")));
        }
        let t = io::load(&dir.join(&file))?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Integrity(format!(
                "{name}: manifest shape {shape:?}, file holds {:?}",
                t.shape()
            )));
        }
        let target = if buffer_names.contains(&name) { &mut buffers } else { &mut params };
        target.insert(name, t);
    }
    let net = NetworkParams { arch, params, buffers };
    net.validate().map_err(|e| Error::Integrity(e.to_string()))?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_discriminator, init_generator, DiscriminatorConfig, GeneratorConfig, Variant};

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig { image_size: 16, z_dim: 4, base_channels: 8, variant: Variant::Iagan, seed: 3 };
        let g = init_generator(&cfg).unwrap();
        save_checkpoint(&g, dir.path(), &[("seed", "3")]).unwrap();
        let back = load_checkpoint(dir.path(), Some(&g.arch)).unwrap();
        assert_eq!(back, g);
        for (name, t) in &g.params {
            let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let got: Vec<u64> = back.params[name].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, got);
        }
    }

    #[test]
    fn fingerprint_mismatch_refused() {
        let dir = tempfile::tempdir().unwrap();
        let d = init_discriminator(&DiscriminatorConfig { image_size: 16, base_channels: 4, ..Default::default() }).unwrap();
        save_checkpoint(&d, dir.path(), &[]).unwrap();
        let other = Architecture::Discriminator(DiscriminatorConfig { image_size: 32, base_channels: 4, ..Default::default() });
        assert!(matches!(load_checkpoint(dir.path(), Some(&other)), Err(Error::Integrity(_))));
    }

    #[test]
    fn missing_tensor_detected() {
        let dir = tempfile::tempdir().unwrap();
        let d = init_discriminator(&DiscriminatorConfig { image_size: 16, base_channels: 4, ..Default::default() }).unwrap();
        save_checkpoint(&d, dir.path(), &[]).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let trimmed: Vec<&str> = text.lines().filter(|l| !l.starts_with("head.b ")).collect();
        fs::write(&path, trimmed.join("\n")).unwrap();
        assert!(load_checkpoint(dir.path(), None).is_err());
    }
}

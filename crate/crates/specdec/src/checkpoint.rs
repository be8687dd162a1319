//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic           8 bytes  "SPDCHKPT"
//! offset 8   format_version  u32
//! offset 12  header_len      u64
//! offset 20  header          JSON, header_len bytes
//! ...        payload         f32 arrays at manifest offsets
//! tail       checksum        u32, CRC-32 (IEEE) of the payload bytes
//! ```
//!
//! The header records the model kind, its full config, and a tensor
//! manifest (name, shape, dtype, byte offset into the payload). Offsets are
//! strictly increasing and non-overlapping; the loader refuses version
//! mismatches and checksum failures.

use crate::adversarial::{Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::heads::{DraftHead, EagleHead, HeadConfig, HeadKind, MedusaHead};
use crate::target::{TargetConfig, TargetModel};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"SPDCHKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    frozen: bool,
    manifest: Vec<ManifestEntry>,
}

fn write_checkpoint(
    path: &Path,
    kind: &str,
    config: serde_json::Value,
    frozen: bool,
    params: &[(String, &Tensor<f32>)],
) -> Result<()> {
    let mut manifest = Vec::with_capacity(params.len());
    let mut payload: Vec<u8> = Vec::new();
    for (name, t) in params {
        manifest.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset: payload.len() as u64,
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header { kind: kind.into(), config, frozen, manifest };
    let header_bytes = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&payload);
    let checksum = hasher.finalize();

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&FORMAT_VERSION.to_le_bytes())?;
    f.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    f.write_all(&header_bytes)?;
    f.write_all(&payload)?;
    f.write_all(&checksum.to_le_bytes())?;
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<(Header, Vec<u8>)> {
    let mut f = std::fs::File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(MAGIC)
        )));
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4).map_err(|_| Error::Checkpoint("file too short for version".into()))?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} unsupported; this build reads version {FORMAT_VERSION}"
        )));
    }
    let mut buf8 = [0u8; 8];
    f.read_exact(&mut buf8).map_err(|_| Error::Checkpoint("file too short for header length".into()))?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    // strictly increasing, non-overlapping manifest offsets
    let mut expected_offset = 0u64;
    for entry in &header.manifest {
        if entry.dtype != "f32" {
            return Err(Error::Checkpoint(format!("unsupported dtype {}", entry.dtype)));
        }
        if entry.offset != expected_offset {
            return Err(Error::Checkpoint(format!(
                "manifest offset for '{}' is {} but expected {expected_offset}",
                entry.name, entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        expected_offset += (numel * 4) as u64;
    }

    let mut rest = Vec::new();
    f.read_to_end(&mut rest)?;
    if rest.len() < 4 {
        return Err(Error::Checkpoint("truncated payload (missing checksum)".into()));
    }
    let payload = rest[..rest.len() - 4].to_vec();
    if payload.len() as u64 != expected_offset {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes but the manifest requires {expected_offset}",
            payload.len()
        )));
    }
    let stored = u32::from_le_bytes(rest[rest.len() - 4..].try_into().unwrap());
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&payload);
    let computed = hasher.finalize();
    if stored != computed {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}"
        )));
    }
    Ok((header, payload))
}

fn fill_params(
    header: &Header,
    payload: &[u8],
    params: &mut [(String, &mut Tensor<f32>)],
) -> Result<()> {
    if header.manifest.len() != params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest holds {} tensors but the model has {}",
            header.manifest.len(),
            params.len()
        )));
    }
    for entry in &header.manifest {
        let (_, tensor) = params
            .iter_mut()
            .find(|(n, _)| n == &entry.name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{}' in manifest", entry.name)))?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}' has shape {:?} in the checkpoint but {:?} in the model",
                entry.name,
                entry.shape,
                tensor.shape()
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let bytes = &payload[start..start + numel * 4];
        for (i, v) in tensor.data_mut().iter_mut().enumerate() {
            *v = f32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().unwrap());
        }
    }
    Ok(())
}

// ── Typed wrappers ───────────────────────────────────────────────────────

pub fn save_target(path: &Path, model: &TargetModel) -> Result<()> {
    let config = serde_json::to_value(model.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_checkpoint(path, "target", config, model.frozen(), &model.named_params())
}

pub fn load_target(path: &Path) -> Result<TargetModel> {
    let (header, payload) = read_checkpoint(path)?;
    if header.kind != "target" {
        return Err(Error::Checkpoint(format!("expected a target checkpoint, found '{}'", header.kind)));
    }
    let config: TargetConfig =
        serde_json::from_value(header.config.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut model = TargetModel::new(config, &mut crate::rng::seeded(0))?;
    let mut params = model.named_params_mut();
    fill_params(&header, &payload, &mut params)?;
    if header.frozen {
        model.freeze();
    }
    Ok(model)
}

pub fn save_head(path: &Path, head: &DraftHead) -> Result<()> {
    let config = serde_json::to_value(head.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let kind = match head.kind() {
        HeadKind::Medusa => "medusa",
        HeadKind::Eagle => "eagle",
    };
    write_checkpoint(path, kind, config, false, &head.named_params())
}

pub fn load_head(path: &Path) -> Result<DraftHead> {
    let (header, payload) = read_checkpoint(path)?;
    let config: HeadConfig =
        serde_json::from_value(header.config.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut head = match header.kind.as_str() {
        "medusa" => DraftHead::Medusa(MedusaHead::zero_init(config)?),
        "eagle" => DraftHead::Eagle(EagleHead::zeroed(config)?),
        other => return Err(Error::Checkpoint(format!("expected a head checkpoint, found '{other}'"))),
    };
    let mut params = head.named_params_mut();
    fill_params(&header, &payload, &mut params)?;
    Ok(head)
}

pub fn save_discriminator(path: &Path, disc: &Discriminator) -> Result<()> {
    let config = serde_json::to_value(disc.config()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    write_checkpoint(path, "discriminator", config, false, &disc.named_params())
}

pub fn load_discriminator(path: &Path) -> Result<Discriminator> {
    let (header, payload) = read_checkpoint(path)?;
    if header.kind != "discriminator" {
        return Err(Error::Checkpoint(format!(
            "expected a discriminator checkpoint, found '{}'",
            header.kind
        )));
    }
    let config: DiscriminatorConfig =
        serde_json::from_value(header.config.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut disc = Discriminator::new(config, &mut crate::rng::seeded(0))?;
    let mut params = disc.named_params_mut();
    fill_params(&header, &payload, &mut params)?;
    Ok(disc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::tensor::Tensor;

    fn tiny_target(seed: u64) -> TargetModel {
        let cfg = TargetConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            max_seq_len: 8,
            ff_mult: 2,
            ..TargetConfig::default()
        };
        TargetModel::new(cfg, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn target_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let mut model = tiny_target(1);
        model.freeze();
        save_target(&path, &model).unwrap();
        let loaded = load_target(&path).unwrap();
        assert_eq!(loaded.weight_hash(), model.weight_hash());
        assert_eq!(loaded.config(), model.config());
        assert!(loaded.frozen());
    }

    #[test]
    fn same_model_saves_byte_identical_files() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        let model = tiny_target(2);
        save_target(&p1, &model).unwrap();
        save_target(&p2, &model).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn head_roundtrip_both_kinds() {
        let dir = tempfile::tempdir().unwrap();
        let mut target = tiny_target(3);
        target.freeze();
        for (name, cfg) in [
            ("m.ckpt", HeadConfig::medusa(2, target.config())),
            ("e.ckpt", HeadConfig::eagle(2, target.config())),
        ] {
            let path = dir.path().join(name);
            let mut head = DraftHead::init_from_target(cfg, &target).unwrap();
            let mut rng = seeded(4);
            for (_, p) in head.named_params_mut() {
                let fresh = Tensor::randn(p.shape(), 0.1, &mut rng);
                p.data_mut().copy_from_slice(fresh.data());
            }
            save_head(&path, &head).unwrap();
            let loaded = load_head(&path).unwrap();
            assert_eq!(loaded.weight_hash(), head.weight_hash());
            assert_eq!(loaded.config(), head.config());
        }
    }

    #[test]
    fn discriminator_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ckpt");
        let cfg = DiscriminatorConfig { d_model: 8, vocab_size: 256, fc_depth: 2, fc_width: 16 };
        let disc = Discriminator::new(cfg, &mut seeded(5)).unwrap();
        save_discriminator(&path, &disc).unwrap();
        let loaded = load_discriminator(&path).unwrap();
        assert_eq!(loaded.weight_hash(), disc.weight_hash());
    }

    #[test]
    fn corrupted_payload_is_refused_via_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let model = tiny_target(6);
        save_target(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let flip = bytes.len() - 100;
        bytes[flip] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let err = load_target(&path).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn truncated_file_is_an_error_not_a_crash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ckpt");
        let model = tiny_target(7);
        save_target(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_target(&path).is_err());
    }

    #[test]
    fn version_bump_is_refused_naming_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        let model = tiny_target(8);
        save_target(&path, &model).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99; // version field
        std::fs::write(&path, &bytes).unwrap();
        let err = load_target(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("99") && msg.contains('1'), "{msg}");
    }

    #[test]
    fn wrong_kind_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("k.ckpt");
        let model = tiny_target(9);
        save_target(&path, &model).unwrap();
        assert!(load_head(&path).is_err());
    }
}

//! Checkpoint file: 8-byte magic, little-endian u64 JSON length, JSON
//! metadata {topology, config, epoch, val_dice, param_count}, then the
//! parameters as little-endian float32 in flat layout order (node order,
//! conv1 weights/bias then conv2 weights/bias per node, output head last).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::ModelParams;
use super::TrainConfig;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SEGCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Meta {
    topology: super::Topology,
    config: TrainConfig,
    epoch: usize,
    val_dice: f64,
    param_count: usize,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub config: TrainConfig,
    pub epoch: usize,
    pub val_dice: f64,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    config: &TrainConfig,
    epoch: usize,
    val_dice: f64,
) -> Result<()> {
    let meta = Meta {
        topology: params.topology,
        config: config.clone(),
        epoch,
        val_dice,
        param_count: params.len(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::with_capacity(16 + json.len() + params.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for &v in params.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let fail = |msg: &str| Error::data(format!("{}: {}", path.display(), msg));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(fail("not a checkpoint file"));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() < 16 + json_len {
        return Err(fail("truncated metadata"));
    }
    let meta: Meta = serde_json::from_slice(&bytes[16..16 + json_len])?;
    let payload = &bytes[16 + json_len..];
    if payload.len() != meta.param_count * 4 {
        return Err(fail("parameter payload size mismatch"));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    let params = ModelParams::from_flat(meta.topology, data)?;
    Ok(Checkpoint {
        params,
        config: meta.config,
        epoch: meta.epoch,
        val_dice: meta.val_dice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::{Network, Topology, TopologyKind};

    #[test]
    fn round_trip_preserves_f32_payload() {
        let topo = Topology {
            kind: TopologyKind::NestedDense,
            depth: 2,
            base_channels: 2,
            channel_multiplier: 2,
        };
        let net = Network::new(topo).unwrap();
        let params = net.init_params(123);
        let cfg = TrainConfig {
            topology: topo,
            ..TrainConfig::default()
        };
        let dir = std::env::temp_dir().join(format!("ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        save_checkpoint(&path, &params, &cfg, 17, 0.83).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.epoch, 17);
        assert!((back.val_dice - 0.83).abs() < 1e-12);
        assert_eq!(back.params.len(), params.len());
        for (a, b) in back.params.data().iter().zip(params.data()) {
            assert_eq!(*a, f64::from(*b as f32), "float32 round trip");
        }
    }

    #[test]
    fn rejects_garbage() {
        let dir = std::env::temp_dir().join(format!("ckpt-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}

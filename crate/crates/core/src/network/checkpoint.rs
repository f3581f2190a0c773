//! Model checkpoints: a JSON header (config, class registry, tensor table)
//! followed by raw little-endian f64 payloads. Values round-trip bit-exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::CenterBank;
use crate::network::{Network, NetworkConfig};

const MAGIC: &[u8; 8] = b"HRNCKPT1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct BankHeader {
    n_classes: usize,
    dim: usize,
    margin: f64,
    eta: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: NetworkConfig,
    classes: Vec<String>,
    bank: Option<BankHeader>,
    tensors: Vec<TensorEntry>,
}

/// Everything a checkpoint restores.
pub struct CheckpointContents {
    pub network: Network,
    pub bank: Option<CenterBank>,
    pub classes: Vec<String>,
}

fn collect_entries(net: &Network, bank: Option<&CenterBank>) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut entries = Vec::new();
    net.visit_params(&mut |name, t| {
        entries.push((name, t.shape().to_vec(), t.to_vec()));
    });
    net.visit_norms(&mut |name, bn| {
        let c = bn.channels();
        entries.push((format!("{name}.running_mean"), vec![c], bn.running_mean()));
        entries.push((format!("{name}.running_var"), vec![c], bn.running_var()));
    });
    if let Some(bank) = bank {
        entries.push((
            "centers.values".into(),
            vec![bank.n_classes, bank.dim],
            bank.centers().to_vec(),
        ));
    }
    entries
}

/// Write the network (and optionally the center bank) to `path`.
pub fn save_checkpoint(
    path: &Path,
    net: &Network,
    bank: Option<&CenterBank>,
    classes: &[String],
) -> Result<()> {
    let entries = collect_entries(net, bank);
    let header = Header {
        config: net.config.clone(),
        classes: classes.to_vec(),
        bank: bank.map(|b| BankHeader {
            n_classes: b.n_classes,
            dim: b.dim,
            margin: b.margin,
            eta: b.eta,
        }),
        tensors: entries
            .iter()
            .map(|(name, shape, _)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, _, values) in &entries {
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back. The network is rebuilt from the stored config and
/// every tensor is overwritten by name.
pub fn load_checkpoint(path: &Path) -> Result<CheckpointContents> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_json = vec![0u8; header_len];
    r.read_exact(&mut header_json)?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;

    let network = Network::new(header.config.clone(), 0)?;
    let mut params = std::collections::HashMap::new();
    network.visit_params(&mut |name, t| {
        params.insert(name, t.clone());
    });
    let mut norms = std::collections::HashMap::new();
    network.visit_norms(&mut |name, bn| {
        norms.insert(name, (bn.running_mean(), bn.running_var()));
    });

    let mut centers: Option<Vec<f64>> = None;
    let mut restored_means: std::collections::HashMap<String, Vec<f64>> = Default::default();
    let mut restored_vars: std::collections::HashMap<String, Vec<f64>> = Default::default();
    for entry in &header.tensors {
        let count: usize = entry.shape.iter().product();
        let mut values = vec![0.0f64; count];
        let mut buf = [0u8; 8];
        for v in values.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        if entry.name == "centers.values" {
            centers = Some(values);
        } else if let Some(base) = entry.name.strip_suffix(".running_mean") {
            restored_means.insert(base.to_string(), values);
        } else if let Some(base) = entry.name.strip_suffix(".running_var") {
            restored_vars.insert(base.to_string(), values);
        } else {
            let t = params.remove(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint names unknown tensor {}", entry.name))
            })?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, checkpoint says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
            t.set_values(&values)?;
        }
    }
    if !params.is_empty() {
        let mut missing: Vec<_> = params.keys().cloned().collect();
        missing.sort();
        return Err(Error::Checkpoint(format!(
            "checkpoint is missing tensors: {}",
            missing.join(", ")
        )));
    }
    for base in norms.keys() {
        if !restored_means.contains_key(base) || !restored_vars.contains_key(base) {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing running statistics for {base}"
            )));
        }
    }
    network.visit_norms(&mut |name, bn| {
        if let (Some(m), Some(v)) = (restored_means.get(&name), restored_vars.get(&name)) {
            bn.set_running_stats(m.clone(), v.clone());
        }
    });

    let bank = match (header.bank, centers) {
        (Some(bh), Some(values)) => Some(CenterBank::new(
            values, bh.n_classes, bh.dim, bh.margin, bh.eta,
        )?),
        (None, None) => None,
        _ => {
            return Err(Error::Checkpoint(
                "center bank header and payload disagree".into(),
            ))
        }
    };

    Ok(CheckpointContents {
        network,
        bank,
        classes: header.classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Mode;
    use crate::tensor::Tensor;

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let dir = std::env::temp_dir().join("hiernet-ckpt-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip.ckpt");

        let cfg = NetworkConfig {
            input_side: 32,
            stages: vec![
                super::super::StagePlan { channels: 4, blocks: 1 },
                super::super::StagePlan { channels: 8, blocks: 1 },
                super::super::StagePlan { channels: 8, blocks: 1 },
                super::super::StagePlan { channels: 16, blocks: 1 },
            ],
            classes: 3,
            ..NetworkConfig::desk(3)
        };
        let net = Network::new(cfg, 42).unwrap();
        // Mutate some running stats so they are non-default.
        let x = Tensor::full(&[1, 32, 32], 0.3);
        let mut rng = crate::rng::rng_from(7);
        net.forward_train(&x, &mut rng).unwrap();

        let bank = CenterBank::seeded(3, 16, 4.5, 0.5, 11).unwrap();
        let classes = vec!["a".to_string(), "b".to_string(), "c".to_string()];
        save_checkpoint(&path, &net, Some(&bank), &classes).unwrap();
        let restored = load_checkpoint(&path).unwrap();

        assert_eq!(restored.classes, classes);
        assert_eq!(restored.network.config, net.config);
        let before = net.named_parameters();
        let after = restored.network.named_parameters();
        assert_eq!(before.len(), after.len());
        for ((n1, t1), (n2, t2)) in before.iter().zip(after.iter()) {
            assert_eq!(n1, n2);
            for (a, b) in t1.values().iter().zip(t2.values().iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let rb = restored.bank.unwrap();
        for (a, b) in bank.centers().iter().zip(rb.centers()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Eval forwards agree bitwise.
        let y1 = net.forward(&x, Mode::Eval, None).unwrap();
        let y2 = restored.network.forward(&x, Mode::Eval, None).unwrap();
        for (a, b) in y1.logits.values().iter().zip(y2.logits.values().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::remove_file(&path).ok();
    }
}

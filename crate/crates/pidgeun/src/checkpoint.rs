//! Checkpoint format: a JSON manifest (model config, parameter names and
//! shapes, batch-norm running statistics, the normalizer, and optional
//! training progress) followed by a little-endian `f64` blob holding every
//! parameter value in manifest order, then the Adam moments when present.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PidgeunModel};
use crate::training::{AdamState, Normalizer};

const MAGIC: &[u8; 8] = b"PGCK0001";

#[derive(Debug, Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BnHeader {
    name: String,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    momentum: f64,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainProgress {
    next_epoch: usize,
    adam_step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    seed: u64,
    config: ModelConfig,
    params: Vec<ParamHeader>,
    bn_states: Vec<BnHeader>,
    normalizer: Option<Normalizer>,
    train_progress: Option<TrainProgress>,
    run_id: String,
}

/// Everything a checkpoint restores.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: PidgeunModel,
    pub seed: u64,
    pub normalizer: Option<Normalizer>,
    pub adam: Option<AdamState>,
    pub next_epoch: Option<usize>,
    pub run_id: String,
}

/// Writes a checkpoint. `seed` is the model-init seed (kept so a resumed run
/// can reconstruct identical metadata); `adam`/`next_epoch` make the file
/// resumable.
pub fn save_checkpoint(
    path: &Path,
    model: &PidgeunModel,
    seed: u64,
    normalizer: Option<&Normalizer>,
    adam: Option<&AdamState>,
    next_epoch: Option<usize>,
    run_id: &str,
) -> Result<()> {
    let params = model.parameters();
    let manifest = CheckpointManifest {
        format_version: 1,
        seed,
        config: model.config.clone(),
        params: params
            .iter()
            .map(|p| ParamHeader {
                name: p.name.clone(),
                shape: p.shape.clone(),
            })
            .collect(),
        bn_states: model
            .act_blocks()
            .iter()
            .map(|b| BnHeader {
                name: b.name.clone(),
                running_mean: b.bn.running_mean.clone(),
                running_var: b.bn.running_var.clone(),
                momentum: b.bn.momentum,
                eps: b.bn.eps,
            })
            .collect(),
        normalizer: normalizer.cloned(),
        train_progress: adam.map(|a| TrainProgress {
            next_epoch: next_epoch.unwrap_or(0),
            adam_step: a.step,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }),
        run_id: run_id.to_string(),
    };
    let manifest_bytes = serde_json::to_vec(&manifest)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for p in &params {
        for v in &p.value {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    if let Some(a) = adam {
        for m in &a.m {
            for v in m {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for mv in &a.v {
            for v in mv {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint, rebuilding the model from its config and overwriting
/// every parameter and batch-norm state from the file.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::format(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: CheckpointManifest = serde_json::from_slice(&manifest_bytes)?;
    if manifest.format_version != 1 {
        return Err(Error::format(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }

    let mut model = PidgeunModel::new(manifest.config.clone(), manifest.seed)?;

    // The registry order is part of the format; verify it.
    {
        let params = model.parameters();
        if params.len() != manifest.params.len() {
            return Err(Error::format("parameter registry does not match manifest"));
        }
        for (p, h) in params.iter().zip(&manifest.params) {
            if p.name != h.name || p.shape != h.shape {
                return Err(Error::format(format!(
                    "parameter mismatch: model has {} {:?}, manifest {} {:?}",
                    p.name, p.shape, h.name, h.shape
                )));
            }
        }
    }

    let mut read_block = |len: usize| -> Result<Vec<f64>> {
        let mut buf = vec![0u8; len * 8];
        r.read_exact(&mut buf)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    for p in model.parameters_mut() {
        let n = p.len();
        p.value = read_block(n)?;
        if p.value.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(format!("non-finite values in {}", p.name)));
        }
    }

    for header in &manifest.bn_states {
        let mut found = false;
        for block in model.act_blocks_mut() {
            if block.name == header.name {
                block.bn.running_mean = header.running_mean.clone();
                block.bn.running_var = header.running_var.clone();
                block.bn.momentum = header.momentum;
                block.bn.eps = header.eps;
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::format(format!(
                "manifest names unknown batch-norm block {}",
                header.name
            )));
        }
    }

    let adam = match &manifest.train_progress {
        Some(tp) => {
            let mut adam = AdamState::new(&model);
            adam.step = tp.adam_step;
            adam.beta1 = tp.beta1;
            adam.beta2 = tp.beta2;
            adam.eps = tp.eps;
            for m in adam.m.iter_mut() {
                *m = read_block(m.len())?;
            }
            for v in adam.v.iter_mut() {
                *v = read_block(v.len())?;
            }
            Some(adam)
        }
        None => None,
    };

    let mut tail = Vec::new();
    r.read_to_end(&mut tail)?;
    if !tail.is_empty() {
        return Err(Error::format("trailing bytes after checkpoint blob"));
    }

    Ok(Checkpoint {
        model,
        seed: manifest.seed,
        normalizer: manifest.normalizer,
        adam,
        next_epoch: manifest.train_progress.map(|tp| tp.next_epoch),
        run_id: manifest.run_id,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_adjacency, tune_scaling_k};
    use crate::model::{GraphContext, ModelConfig};
    use crate::sim::{desk_grid_9bus, make_dataset};
    use crate::training::{train, TrainConfig};

    fn toy_model(seed: u64) -> PidgeunModel {
        PidgeunModel::new(
            ModelConfig {
                n_mlp_layers: 2,
                n_gal: 1,
                n_gcl: 1,
                cheb_order: 2,
                hidden_size: 8,
                input_steps: 2,
                attention_heads: 2,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_preserves_everything() {
        let spec = desk_grid_9bus();
        let ds = make_dataset(&spec, 1, 0, 5, false).unwrap();
        let k = tune_scaling_k(&spec.graph);
        let adj = build_adjacency(&spec.graph, k).unwrap();
        let ctx = GraphContext::new(&spec.graph, adj).unwrap();

        let mut model = toy_model(3);
        let cfg = TrainConfig {
            epochs: 3,
            lr_start: 1e-3,
            lr_end: 1e-5,
            nu: 1.0,
            seed: 3,
            batch: 1,
            window_steps: 5,
            train_count: None,
            windows_per_trajectory: 1,
        };
        let out = train(&mut model, &ds, &ctx, &cfg, None).unwrap();

        let dir = std::env::temp_dir().join("pidgeun_ck_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.pgck");
        save_checkpoint(
            &path,
            &model,
            3,
            Some(&out.normalizer),
            Some(&out.adam),
            Some(out.next_epoch),
            "test-run",
        )
        .unwrap();

        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(ck.run_id, "test-run");
        assert_eq!(ck.next_epoch, Some(3));
        assert_eq!(ck.normalizer.as_ref(), Some(&out.normalizer));

        for (a, b) in model.parameters().iter().zip(ck.model.parameters().iter()) {
            assert_eq!(a.name, b.name);
            assert!(a.value.iter().zip(&b.value).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for (a, b) in model.act_blocks().iter().zip(ck.model.act_blocks().iter()) {
            assert_eq!(a.bn.running_mean, b.bn.running_mean);
            assert_eq!(a.bn.running_var, b.bn.running_var);
        }
        let adam = ck.adam.unwrap();
        assert_eq!(adam.step, out.adam.step);
        for (a, b) in adam.m.iter().zip(&out.adam.m) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        // Identical save → identical bytes.
        let path2 = dir.join("m2.pgck");
        save_checkpoint(
            &path2,
            &model,
            3,
            Some(&out.normalizer),
            Some(&out.adam),
            Some(out.next_epoch),
            "test-run",
        )
        .unwrap();
        assert_eq!(
            crate::dataset::file_sha256(&path).unwrap(),
            crate::dataset::file_sha256(&path2).unwrap()
        );
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_garbage() {
        let dir = std::env::temp_dir().join("pidgeun_ck_bad");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.pgck");
        std::fs::write(&path, b"JUNKJUNK").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}

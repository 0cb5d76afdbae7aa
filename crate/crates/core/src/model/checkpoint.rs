//! Checkpoint directory format: `manifest.json` plus `weights.bin`.
//!
//! The manifest carries the full provenance (model/feature configs, registry,
//! token table, normalization scales) and a named tensor index with shapes,
//! byte offsets, and per-tensor digests. Weights are little-endian f32 in
//! manifest order. Loading verifies every digest and the provenance digest,
//! so a truncated weight file or a hand-edited manifest is rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::featurize::{FeatureConfig, NormalizationStats, TokenTable};
use crate::linalg::Matrix;
use crate::primitive::PrimitiveTypeRegistry;

use super::{
    provenance_digest, CostModel, HeadParams, ModelConfig, SharedParams,
};
use crate::mtl::MultiTaskModel;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.bin";
const FORMAT: &str = "schedrank-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Single,
    MultiTask,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: u64,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    kind: CheckpointKind,
    model: ModelConfig,
    feature: FeatureConfig,
    registry: PrimitiveTypeRegistry,
    token_table: TokenTable,
    normalization: NormalizationStats,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tasks: Option<Vec<String>>,
    config_digest: String,
    tensors: Vec<TensorEntry>,
}

fn tensor_bytes(t: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(t.data.len() * 4);
    for &v in &t.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

fn write_checkpoint(
    dir: &Path,
    kind: CheckpointKind,
    model_cfg: &ModelConfig,
    feature: &FeatureConfig,
    registry: &PrimitiveTypeRegistry,
    token_table: &TokenTable,
    normalization: &NormalizationStats,
    tasks: Option<&[String]>,
    tensors: Vec<(String, &Matrix)>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let bytes = tensor_bytes(t);
        entries.push(TensorEntry {
            name,
            rows: t.rows,
            cols: t.cols,
            offset: blob.len() as u64,
            bytes: bytes.len() as u64,
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        blob.extend_from_slice(&bytes);
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        kind,
        model: model_cfg.clone(),
        feature: feature.clone(),
        registry: registry.clone(),
        token_table: token_table.clone(),
        normalization: normalization.clone(),
        tasks: tasks.map(<[String]>::to_vec),
        config_digest: provenance_digest(
            model_cfg,
            feature,
            registry,
            token_table,
            normalization,
            tasks,
        ),
        tensors: entries,
    };
    fs::write(dir.join(WEIGHTS_FILE), &blob)?;
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != FORMAT {
        return Err(Error::Corrupt(format!(
            "unexpected checkpoint format `{}`",
            manifest.format
        )));
    }
    if manifest.version != VERSION {
        return Err(Error::Corrupt(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let expected = provenance_digest(
        &manifest.model,
        &manifest.feature,
        &manifest.registry,
        &manifest.token_table,
        &manifest.normalization,
        manifest.tasks.as_deref(),
    );
    if expected != manifest.config_digest {
        return Err(Error::Corrupt(
            "config digest mismatch: manifest was modified after saving".into(),
        ));
    }
    Ok(manifest)
}

fn load_tensors(
    dir: &Path,
    manifest: &Manifest,
    expected: Vec<(String, &mut Matrix)>,
) -> Result<()> {
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    let total: u64 = manifest.tensors.iter().map(|t| t.bytes).sum();
    if blob.len() as u64 != total {
        return Err(Error::Corrupt(format!(
            "weight file has {} bytes, manifest expects {}",
            blob.len(),
            total
        )));
    }
    if manifest.tensors.len() != expected.len() {
        return Err(Error::Corrupt(format!(
            "manifest lists {} tensors, model needs {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for (entry, (name, tensor)) in manifest.tensors.iter().zip(expected) {
        if entry.name != name {
            return Err(Error::Corrupt(format!(
                "tensor order mismatch: manifest has `{}`, expected `{name}`",
                entry.name
            )));
        }
        if entry.rows != tensor.rows || entry.cols != tensor.cols {
            return Err(Error::Corrupt(format!(
                "tensor `{name}` has shape {}x{} in manifest, expected {}x{}",
                entry.rows, entry.cols, tensor.rows, tensor.cols
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.bytes as usize;
        if end > blob.len() || entry.bytes as usize != tensor.data.len() * 4 {
            return Err(Error::Corrupt(format!(
                "tensor `{name}` range is out of bounds"
            )));
        }
        let bytes = &blob[start..end];
        if hex::encode(Sha256::digest(bytes)) != entry.sha256 {
            return Err(Error::Corrupt(format!(
                "tensor `{name}` digest mismatch (corrupt weights)"
            )));
        }
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            tensor.data[i] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
        }
    }
    Ok(())
}

/// Kind of checkpoint stored at `dir`, without loading the weights.
pub fn load_kind(dir: &Path) -> Result<CheckpointKind> {
    Ok(read_manifest(dir)?.kind)
}

pub(super) fn save_single(model: &CostModel, dir: &Path) -> Result<()> {
    let mut tensors = model.shared.tensors();
    tensors.extend(model.head.tensors());
    write_checkpoint(
        dir,
        CheckpointKind::Single,
        &model.config,
        &model.feature,
        &model.registry,
        &model.token_table,
        &model.normalization,
        None,
        tensors,
    )
}

pub(super) fn load_single(dir: &Path) -> Result<CostModel> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != CheckpointKind::Single {
        return Err(Error::Corrupt(
            "checkpoint holds a multi-task model; load it as one".into(),
        ));
    }
    manifest.model.validate()?;
    manifest.feature.validate()?;
    let mut shared = SharedParams::zeros(&manifest.model, &manifest.feature);
    let mut head = HeadParams::zeros(&manifest.model);
    let mut expected = shared.tensors_mut();
    expected.extend(head.tensors_mut());
    load_tensors(dir, &manifest, expected)?;
    Ok(CostModel {
        config: manifest.model,
        feature: manifest.feature,
        registry: manifest.registry,
        token_table: manifest.token_table,
        normalization: manifest.normalization,
        shared,
        head,
    })
}

pub(crate) fn save_multi(model: &MultiTaskModel, dir: &Path) -> Result<()> {
    let mut tensors = model.shared.tensors();
    for (i, head) in model.heads.iter().enumerate() {
        for (name, t) in head.tensors() {
            tensors.push((format!("task{i}.{name}"), t));
        }
    }
    write_checkpoint(
        dir,
        CheckpointKind::MultiTask,
        &model.config,
        &model.feature,
        &model.registry,
        &model.token_table,
        &model.normalization,
        Some(&model.task_ids),
        tensors,
    )
}

pub(crate) fn load_multi(dir: &Path) -> Result<MultiTaskModel> {
    let manifest = read_manifest(dir)?;
    if manifest.kind != CheckpointKind::MultiTask {
        return Err(Error::Corrupt(
            "checkpoint holds a single-task model; load it as one".into(),
        ));
    }
    manifest.model.validate()?;
    manifest.feature.validate()?;
    let tasks = manifest
        .tasks
        .clone()
        .ok_or_else(|| Error::Corrupt("multi-task checkpoint lists no tasks".into()))?;
    if tasks.len() < 2 {
        return Err(Error::Corrupt("multi-task checkpoint needs >= 2 tasks".into()));
    }
    let mut shared = SharedParams::zeros(&manifest.model, &manifest.feature);
    let mut heads: Vec<HeadParams> = (0..tasks.len())
        .map(|_| HeadParams::zeros(&manifest.model))
        .collect();
    let mut expected = shared.tensors_mut();
    for (i, head) in heads.iter_mut().enumerate() {
        for (name, t) in head.tensors_mut() {
            expected.push((format!("task{i}.{name}"), t));
        }
    }
    load_tensors(dir, &manifest, expected)?;
    Ok(MultiTaskModel {
        config: manifest.model,
        feature: manifest.feature,
        registry: manifest.registry,
        token_table: manifest.token_table,
        normalization: manifest.normalization,
        shared,
        heads,
        task_ids: tasks,
    })
}

//! On-disk checkpoints: one subdirectory per component holding a little-endian
//! parameter blob and a JSON manifest, plus a stage manifest at the root.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bundle::{ModelBundle, ModelConfig, CODEBOOK, ENCODER, GENERATOR, PFORMER, PLANNER, Q_HEAD, V_HEAD};
use super::tokenizer::Tokenizer;
use crate::corpus::write_atomic;
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::rng::content_hash;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Init,
    GeneratorPretrain,
    Stage1,
    Stage2,
    Stage3,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Init => "init",
            Stage::GeneratorPretrain => "generator_pretrain",
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageManifest {
    pub stage: Stage,
    pub epochs_done: usize,
    pub config_hash: String,
    pub parent_hash: Option<String>,
    /// Stage 3 started directly from Stage 1.
    #[serde(default)]
    pub skipped_stage2: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: u8,
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ComponentManifest {
    component: String,
    dtype: String,
    tensors: Vec<TensorEntry>,
    blob_sha256: String,
    config_hash: String,
    stage: Stage,
}

const LAYOUT: [(&str, &[u8]); 5] = [
    ("encoder", &[ENCODER]),
    ("planner", &[PLANNER, Q_HEAD, V_HEAD]),
    ("codebook", &[CODEBOOK]),
    ("pformer", &[PFORMER]),
    ("generator", &[GENERATOR]),
];

pub const STAGE_MANIFEST: &str = "stage.json";

#[derive(Serialize, Deserialize)]
struct Snapshot {
    model: ModelConfig,
    generator_frozen: bool,
}

/// Writes `bundle` under `dir` and returns the checkpoint hash.
pub fn save_checkpoint<S: Scalar>(bundle: &ModelBundle<S>, dir: &Path, manifest: &StageManifest) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut digests = Vec::new();
    for (component, groups) in LAYOUT {
        let sub = dir.join(component);
        fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for &group in groups {
            let ps = bundle.params(group);
            for (name, t) in ps.names().iter().zip(ps.tensors()) {
                tensors.push(TensorEntry { group, name: name.clone(), shape: [t.rows(), t.cols()], offset: blob.len() });
                for &v in t.data() {
                    v.write_le(&mut blob);
                }
            }
        }
        let blob_sha256 = content_hash(&blob);
        write_atomic(&sub.join("params.bin"), &blob)?;
        let cm = ComponentManifest {
            component: component.into(),
            dtype: S::DTYPE.into(),
            tensors,
            blob_sha256: blob_sha256.clone(),
            config_hash: manifest.config_hash.clone(),
            stage: manifest.stage,
        };
        write_atomic(&sub.join("manifest.json"), serde_json::to_string_pretty(&cm)?.as_bytes())?;
        digests.push(blob_sha256);
    }
    write_atomic(&dir.join("codebook").join("codebook.csv"), codebook_csv(bundle).as_bytes())?;

    let tok_dir = dir.join("tokenizer");
    fs::create_dir_all(&tok_dir).map_err(|e| Error::io(&tok_dir, e))?;
    let vocab = serde_json::to_string_pretty(bundle.tokenizer.tokens())?;
    digests.push(content_hash(vocab.as_bytes()));
    write_atomic(&tok_dir.join("vocab.json"), vocab.as_bytes())?;
    let tm = serde_json::json!({
        "component": "tokenizer",
        "size": bundle.tokenizer.len(),
        "config_hash": manifest.config_hash,
        "stage": manifest.stage,
    });
    write_atomic(&tok_dir.join("manifest.json"), serde_json::to_string_pretty(&tm)?.as_bytes())?;

    let snap = Snapshot { model: bundle.config.clone(), generator_frozen: bundle.generator_frozen };
    let snap = serde_json::to_string_pretty(&snap)?;
    digests.push(content_hash(snap.as_bytes()));
    write_atomic(&dir.join("model.json"), snap.as_bytes())?;
    let stage = serde_json::to_string_pretty(manifest)?;
    digests.push(content_hash(stage.as_bytes()));
    write_atomic(&dir.join(STAGE_MANIFEST), stage.as_bytes())?;
    Ok(content_hash(digests.join("\n").as_bytes()))
}

pub fn codebook_csv<S: Scalar>(bundle: &ModelBundle<S>) -> String {
    let z = bundle.params(CODEBOOK).get(0);
    let mut out = String::new();
    for r in 0..z.rows() {
        let row: Vec<String> = z.row(r).iter().map(|v| format!("{}", v.as_f64())).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn read_stage_manifest(dir: &Path) -> Result<StageManifest> {
    let path = dir.join(STAGE_MANIFEST);
    let raw = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&raw)?)
}

/// Hash identifying a saved checkpoint, recomputed from its files.
pub fn checkpoint_hash(dir: &Path) -> Result<String> {
    let mut digests = Vec::new();
    for (component, _) in LAYOUT {
        let path = dir.join(component).join("params.bin");
        let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        digests.push(content_hash(&blob));
    }
    for file in ["tokenizer/vocab.json", "model.json", STAGE_MANIFEST] {
        let path = dir.join(file);
        let raw = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        digests.push(content_hash(&raw));
    }
    Ok(content_hash(digests.join("\n").as_bytes()))
}

pub fn load_checkpoint<S: Scalar>(dir: &Path) -> Result<(ModelBundle<S>, StageManifest)> {
    let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
    let snap: Snapshot = serde_json::from_str(&read(&dir.join("model.json"))?)?;
    let tokens: Vec<String> = serde_json::from_str(&read(&dir.join("tokenizer").join("vocab.json"))?)?;
    let manifest = read_stage_manifest(dir)?;
    // The seed only shapes the placeholder values that are overwritten below.
    let mut bundle = ModelBundle::<S>::new(snap.model, Tokenizer::from_tokens(tokens), 0)?;
    bundle.generator_frozen = snap.generator_frozen;
    for (component, groups) in LAYOUT {
        let sub = dir.join(component);
        let cm: ComponentManifest = serde_json::from_str(&read(&sub.join("manifest.json"))?)?;
        let path = sub.join("params.bin");
        let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if content_hash(&blob) != cm.blob_sha256 {
            return Err(Error::Validation(format!("{}: blob hash mismatch", path.display())));
        }
        let width = match cm.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(Error::Validation(format!("{component}: unknown dtype {other}"))),
        };
        for &group in groups {
            let mut ps = ParamSet::<S>::new(group);
            for e in cm.tensors.iter().filter(|e| e.group == group) {
                let n = e.shape[0] * e.shape[1];
                let end = e.offset + n * width;
                let bytes = blob
                    .get(e.offset..end)
                    .ok_or_else(|| Error::Validation(format!("{component}/{}: blob too short", e.name)))?;
                let data: Vec<S> = bytes
                    .chunks_exact(width)
                    .map(|c| if width == 4 { S::from_f64_lossy(f32::read_le(c) as f64) } else { S::from_f64_lossy(f64::read_le(c)) })
                    .collect();
                ps.add(e.name.clone(), Tensor::from_vec(e.shape[0], e.shape[1], data)?);
            }
            bundle.replace_params(group, ps)?;
        }
    }
    if !bundle.all_finite() {
        return Err(Error::Validation(format!("{}: non-finite parameters", dir.display())));
    }
    Ok((bundle, manifest))
}

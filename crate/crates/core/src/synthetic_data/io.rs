//! Dataset directory layout: `manifest.json` plus one safetensors file per
//! split (`train`, `query`, `gallery`). The manifest records the generating
//! config and a SHA-256 of each split file, verified on import.

use std::fs;
use std::path::Path;

use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataConfig, DatasetSplits, OcclusionKind, OcclusionSpec, ParsingLabel, Sample};
use crate::error::{data_err, Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const SPLIT_NAMES: [&str; 3] = ["train", "query", "gallery"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub name: String,
    pub file: String,
    pub samples: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config: DataConfig,
    pub splits: Vec<SplitFile>,
}

pub fn export_splits(splits: &DatasetSplits, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for (name, samples) in SPLIT_NAMES
        .iter()
        .zip([&splits.train, &splits.query, &splits.gallery])
    {
        let bytes = encode_split(samples, &splits.config)?;
        let file = format!("{name}.safetensors");
        fs::write(dir.join(&file), &bytes)?;
        files.push(SplitFile {
            name: name.to_string(),
            file,
            samples: samples.len(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        config: splits.config.clone(),
        splits: files,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn import_splits(dir: &Path) -> Result<DatasetSplits> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::FormatVersion {
            found: manifest.format_version,
            expected: DATASET_FORMAT_VERSION,
        });
    }
    let mut loaded = Vec::new();
    for name in SPLIT_NAMES {
        let Some(entry) = manifest.splits.iter().find(|s| s.name == name) else {
            return data_err(format!("manifest lacks split {name}"));
        };
        let path = dir.join(&entry.file);
        let bytes = fs::read(&path)?;
        let found = sha256_hex(&bytes);
        if found != entry.sha256 {
            return Err(Error::Checksum {
                path,
                expected: entry.sha256.clone(),
                found,
            });
        }
        let samples = decode_split(&bytes, &manifest.config)?;
        if samples.len() != entry.samples {
            return data_err(format!(
                "split {name} holds {} samples, manifest says {}",
                samples.len(),
                entry.samples
            ));
        }
        loaded.push(samples);
    }
    let gallery = loaded.pop().expect("three splits");
    let query = loaded.pop().expect("three splits");
    let train = loaded.pop().expect("three splits");
    let splits = DatasetSplits {
        config: manifest.config,
        train,
        query,
        gallery,
    };
    splits.check_invariants()?;
    Ok(splits)
}

/// SHA-256 of each split's encoded file, in `train`, `query`, `gallery`
/// order; identical to the checksums `export_splits` records.
pub fn split_checksums(splits: &DatasetSplits) -> Result<Vec<String>> {
    [&splits.train, &splits.query, &splits.gallery]
        .into_iter()
        .map(|s| Ok(sha256_hex(&encode_split(s, &splits.config)?)))
        .collect()
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn encode_split(samples: &[Sample], cfg: &DataConfig) -> Result<Vec<u8>> {
    let n = samples.len();
    let mut images = Vec::with_capacity(n * 3 * cfg.image_height * cfg.image_width * 4);
    let mut labels = Vec::with_capacity(n * cfg.label_height * cfg.label_width);
    let mut identity = Vec::with_capacity(n * 4);
    let mut camera = Vec::with_capacity(n * 4);
    let mut kind = Vec::with_capacity(n);
    let mut coverage = Vec::with_capacity(n * 8);
    let mut seed = Vec::with_capacity(n * 8);
    for s in samples {
        if s.image.len() != 3 * cfg.image_height * cfg.image_width
            || s.parsing_label.data.len() != cfg.label_height * cfg.label_width
        {
            return data_err("sample dimensions disagree with dataset config");
        }
        images.extend(s.image.iter().flat_map(|v| v.to_le_bytes()));
        labels.extend_from_slice(&s.parsing_label.data);
        identity.extend(s.identity.to_le_bytes());
        camera.extend(s.camera_id.to_le_bytes());
        kind.push(s.occlusion.kind.code());
        coverage.extend(s.occlusion.coverage.to_le_bytes());
        seed.extend(s.occlusion.placement_seed.to_le_bytes());
    }
    let views = vec![
        ("images", TensorView::new(Dtype::F32, vec![n, 3, cfg.image_height, cfg.image_width], &images)?),
        ("labels", TensorView::new(Dtype::U8, vec![n, cfg.label_height, cfg.label_width], &labels)?),
        ("identity", TensorView::new(Dtype::U32, vec![n], &identity)?),
        ("camera", TensorView::new(Dtype::U32, vec![n], &camera)?),
        ("occlusion_kind", TensorView::new(Dtype::U8, vec![n], &kind)?),
        ("occlusion_coverage", TensorView::new(Dtype::F64, vec![n], &coverage)?),
        ("occlusion_seed", TensorView::new(Dtype::U64, vec![n], &seed)?),
    ];
    Ok(safetensors::serialize(views, None)?)
}

fn decode_split(bytes: &[u8], cfg: &DataConfig) -> Result<Vec<Sample>> {
    let st = SafeTensors::deserialize(bytes)?;
    let n = st.tensor("identity")?.shape().first().copied().unwrap_or(0);
    let image_len = 3 * cfg.image_height * cfg.image_width;
    let label_len = cfg.label_height * cfg.label_width;

    let images = field(&st, "images", Dtype::F32, n * image_len)?;
    let labels = field(&st, "labels", Dtype::U8, n * label_len)?;
    let identity = field(&st, "identity", Dtype::U32, n)?;
    let camera = field(&st, "camera", Dtype::U32, n)?;
    let kind = field(&st, "occlusion_kind", Dtype::U8, n)?;
    let coverage = field(&st, "occlusion_coverage", Dtype::F64, n)?;
    let seed = field(&st, "occlusion_seed", Dtype::U64, n)?;

    (0..n)
        .map(|i| {
            let image = images[i * image_len * 4..(i + 1) * image_len * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let occlusion = OcclusionSpec {
                kind: OcclusionKind::from_code(kind[i])?,
                coverage: f64::from_le_bytes(coverage[i * 8..i * 8 + 8].try_into().expect("8 bytes")),
                placement_seed: u64::from_le_bytes(seed[i * 8..i * 8 + 8].try_into().expect("8 bytes")),
            };
            occlusion.validate()?;
            Ok(Sample {
                image,
                image_height: cfg.image_height,
                image_width: cfg.image_width,
                identity: u32::from_le_bytes(identity[i * 4..i * 4 + 4].try_into().expect("4 bytes")),
                parsing_label: ParsingLabel::new(
                    cfg.label_height,
                    cfg.label_width,
                    labels[i * label_len..(i + 1) * label_len].to_vec(),
                )?,
                camera_id: u32::from_le_bytes(camera[i * 4..i * 4 + 4].try_into().expect("4 bytes")),
                occlusion,
            })
        })
        .collect()
}

fn field<'a>(st: &SafeTensors<'a>, name: &str, dtype: Dtype, elements: usize) -> Result<&'a [u8]> {
    let view = st.tensor(name)?;
    let expected_bytes = elements * dtype.bitsize() / 8;
    if view.dtype() != dtype || view.data().len() != expected_bytes {
        return data_err(format!("tensor {name} has unexpected dtype or size"));
    }
    Ok(view.data())
}

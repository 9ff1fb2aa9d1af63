use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::render::Canvas;
use super::{generate_identity, mix_seed, OcclusionKind, OcclusionSpec, Sample};
use crate::error::{config_err, data_err, Result};

const SPLIT_STREAM: u64 = 0x5971_7500;
const BATCH_STREAM: u64 = 0xBA7C;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_train_ids: usize,
    pub n_eval_ids: usize,
    pub samples_per_id: usize,
    /// Evaluation samples per identity that go to the query split; the rest
    /// form the gallery.
    pub queries_per_id: usize,
    pub n_cameras: usize,
    /// Probability that a query sample is occluded.
    pub occlusion_rate: f64,
    pub train_occlusion_rate: f64,
    pub gallery_occlusion_rate: f64,
    pub min_coverage: f64,
    pub max_coverage: f64,
    pub image_height: usize,
    pub image_width: usize,
    pub label_height: usize,
    pub label_width: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_train_ids: 20,
            n_eval_ids: 10,
            samples_per_id: 8,
            queries_per_id: 2,
            n_cameras: 4,
            occlusion_rate: 1.0,
            train_occlusion_rate: 0.5,
            gallery_occlusion_rate: 0.1,
            min_coverage: 0.25,
            max_coverage: 0.55,
            image_height: 64,
            image_width: 32,
            label_height: 16,
            label_width: 8,
        }
    }
}

impl DataConfig {
    pub fn canvas(&self) -> Canvas {
        Canvas {
            image_height: self.image_height,
            image_width: self.image_width,
            label_height: self.label_height,
            label_width: self.label_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.canvas().validate()?;
        if self.n_eval_ids < 2 {
            return config_err("n_eval_ids must be at least 2");
        }
        if self.samples_per_id < 2 {
            return config_err("samples_per_id must be at least 2");
        }
        if self.queries_per_id == 0 || self.queries_per_id >= self.samples_per_id {
            return config_err("queries_per_id must be in 1..samples_per_id");
        }
        if self.n_cameras < 2 {
            return config_err("n_cameras must be at least 2");
        }
        for (name, rate) in [
            ("occlusion_rate", self.occlusion_rate),
            ("train_occlusion_rate", self.train_occlusion_rate),
            ("gallery_occlusion_rate", self.gallery_occlusion_rate),
        ] {
            if !(0.0..=1.0).contains(&rate) {
                return config_err(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.min_coverage > 0.0
            && self.min_coverage <= self.max_coverage
            && self.max_coverage <= super::MAX_COVERAGE)
        {
            return config_err("coverage range must satisfy 0 < min <= max <= 0.95");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub config: DataConfig,
    pub train: Vec<Sample>,
    pub query: Vec<Sample>,
    pub gallery: Vec<Sample>,
}

impl DatasetSplits {
    pub fn check_invariants(&self) -> Result<()> {
        let ids = |s: &[Sample]| s.iter().map(|x| x.identity).collect::<BTreeSet<_>>();
        let (train, query, gallery) = (ids(&self.train), ids(&self.query), ids(&self.gallery));
        if !train.is_disjoint(&query) || !train.is_disjoint(&gallery) {
            return data_err("train identities overlap evaluation identities");
        }
        for q in &self.query {
            let ok = self
                .gallery
                .iter()
                .any(|g| g.identity == q.identity && g.camera_id != q.camera_id);
            if !ok {
                return data_err(format!(
                    "query identity {} has no gallery sample from another camera",
                    q.identity
                ));
            }
        }
        Ok(())
    }

    /// Number of training identities; training labels are `0..n`.
    pub fn n_train_ids(&self) -> usize {
        self.config.n_train_ids
    }
}

/// Generates train/query/gallery. Train identities are `0..n_train_ids`,
/// evaluation identities follow them.
pub fn make_splits(config: &DataConfig) -> Result<DatasetSplits> {
    config.validate()?;
    let canvas = config.canvas();
    let mut train = Vec::with_capacity(config.n_train_ids * config.samples_per_id);
    let mut query = Vec::new();
    let mut gallery = Vec::new();

    for id in 0..config.n_train_ids as u64 {
        for j in 0..config.samples_per_id {
            train.push(make_sample(config, &canvas, id, j, config.train_occlusion_rate)?);
        }
    }
    let first_eval = config.n_train_ids as u64;
    for id in first_eval..first_eval + config.n_eval_ids as u64 {
        for j in 0..config.samples_per_id {
            if j < config.queries_per_id {
                query.push(make_sample(config, &canvas, id, j, config.occlusion_rate)?);
            } else {
                gallery.push(make_sample(config, &canvas, id, j, config.gallery_occlusion_rate)?);
            }
        }
    }

    let splits = DatasetSplits {
        config: config.clone(),
        train,
        query,
        gallery,
    };
    splits.check_invariants()?;
    Ok(splits)
}

fn make_sample(config: &DataConfig, canvas: &Canvas, id: u64, index: usize, rate: f64) -> Result<Sample> {
    let stream = mix_seed(&[config.seed, SPLIT_STREAM, id, index as u64]);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let occ = if rng.random::<f64>() < rate {
        let kind = OcclusionKind::OCCLUDING[rng.random_range(0..OcclusionKind::OCCLUDING.len())];
        let coverage = if config.min_coverage == config.max_coverage {
            config.min_coverage
        } else {
            rng.random_range(config.min_coverage..config.max_coverage)
        };
        OcclusionSpec::new(kind, coverage, rng.random())?
    } else {
        OcclusionSpec::none()
    };
    let app = generate_identity(config.seed, id);
    let camera = (index % config.n_cameras) as u32;
    canvas.render(&app, rng.random(), &occ, camera)
}

/// One epoch of P x K batches: `n_ids` distinct identities with `n_per_id`
/// samples each. Returns indices into `identities`.
///
/// Each identity's samples are shuffled and cut into chunks of `n_per_id`
/// (identities with fewer samples are topped up by resampling); batches then
/// draw `n_ids` distinct identities that still have chunks left.
pub fn identity_balanced_batches(
    identities: &[u32],
    n_ids: usize,
    n_per_id: usize,
    shuffle_seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if n_ids < 2 || n_per_id < 2 {
        return config_err("identity-balanced batches need n_ids >= 2 and n_per_id >= 2");
    }
    let mut by_id: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &id) in identities.iter().enumerate() {
        by_id.entry(id).or_default().push(i);
    }
    if by_id.len() < n_ids {
        return data_err(format!(
            "dataset has {} identities, batches need {n_ids}",
            by_id.len()
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[shuffle_seed, BATCH_STREAM]));
    let mut chunks: BTreeMap<u32, Vec<Vec<usize>>> = BTreeMap::new();
    for (&id, members) in &by_id {
        let mut pool = members.clone();
        pool.shuffle(&mut rng);
        while pool.len() < n_per_id {
            let pick = members[rng.random_range(0..members.len())];
            pool.push(pick);
        }
        let id_chunks: Vec<Vec<usize>> = pool
            .chunks_exact(n_per_id)
            .map(|c| c.to_vec())
            .collect();
        chunks.insert(id, id_chunks);
    }

    let mut batches = Vec::new();
    loop {
        let mut available: Vec<u32> = chunks
            .iter()
            .filter(|(_, c)| !c.is_empty())
            .map(|(&id, _)| id)
            .collect();
        if available.len() < n_ids {
            break;
        }
        available.shuffle(&mut rng);
        let mut batch = Vec::with_capacity(n_ids * n_per_id);
        for id in &available[..n_ids] {
            let chunk = chunks.get_mut(id).and_then(Vec::pop).expect("non-empty");
            batch.extend(chunk);
        }
        batches.push(batch);
    }
    Ok(batches)
}

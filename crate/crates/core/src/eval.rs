//! Visibility-aware retrieval evaluation: query x gallery distances, CMC and
//! mAP under the usual same-identity/same-camera exclusion, and attention
//! quality metrics.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::DType;
use safetensors::tensor::{Dtype, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::focuser::PartEmbeddings;
use crate::losses::part_distance;
use crate::part_attention::AttentionMaps;
use crate::synthetic_data::ParsingLabel;

pub const RANKS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    /// Row-major `n_query x n_gallery`.
    pub values: Vec<f64>,
    pub n_query: usize,
    pub n_gallery: usize,
    pub query_ids: Vec<u32>,
    pub gallery_ids: Vec<u32>,
    pub query_cams: Vec<u32>,
    pub gallery_cams: Vec<u32>,
}

impl DistanceMatrix {
    pub fn new(
        values: Vec<f64>,
        query_ids: Vec<u32>,
        query_cams: Vec<u32>,
        gallery_ids: Vec<u32>,
        gallery_cams: Vec<u32>,
    ) -> Result<Self> {
        let (nq, ng) = (query_ids.len(), gallery_ids.len());
        if query_cams.len() != nq || gallery_cams.len() != ng || values.len() != nq * ng {
            return config_err("distance matrix shape disagrees with id/camera lists");
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return config_err("distance matrix holds negative or non-finite entries");
        }
        Ok(Self {
            values,
            n_query: nq,
            n_gallery: ng,
            query_ids,
            gallery_ids,
            query_cams,
            gallery_cams,
        })
    }

    pub fn get(&self, q: usize, g: usize) -> f64 {
        self.values[q * self.n_gallery + g]
    }

    pub fn row(&self, q: usize) -> &[f64] {
        &self.values[q * self.n_gallery..(q + 1) * self.n_gallery]
    }

    /// Dumps distances, ids and cameras as a safetensors file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = |v: &[u32]| v.iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>();
        let dist: Vec<u8> = self.values.iter().flat_map(|x| x.to_le_bytes()).collect();
        let (qi, qc, gi, gc) = (
            bytes(&self.query_ids),
            bytes(&self.query_cams),
            bytes(&self.gallery_ids),
            bytes(&self.gallery_cams),
        );
        let views = vec![
            ("distances", TensorView::new(Dtype::F64, vec![self.n_query, self.n_gallery], &dist)?),
            ("query_ids", TensorView::new(Dtype::U32, vec![self.n_query], &qi)?),
            ("query_cams", TensorView::new(Dtype::U32, vec![self.n_query], &qc)?),
            ("gallery_ids", TensorView::new(Dtype::U32, vec![self.n_gallery], &gi)?),
            ("gallery_cams", TensorView::new(Dtype::U32, vec![self.n_gallery], &gc)?),
        ];
        std::fs::write(path, safetensors::serialize(views, None)?)?;
        Ok(())
    }
}

/// Entry `(i, j)` is the visibility-aware part distance between query `i`
/// and gallery item `j`.
pub fn distance_matrix(queries: &[PartEmbeddings], gallery: &[PartEmbeddings]) -> Result<Vec<f64>> {
    if queries.is_empty() || gallery.is_empty() {
        return config_err("distance matrix needs non-empty query and gallery sets");
    }
    Ok(queries
        .iter()
        .flat_map(|q| gallery.iter().map(move |g| part_distance(q, g, true)))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalMetrics {
    pub rank_k: BTreeMap<usize, f64>,
    pub map: f64,
    pub n_valid_queries: usize,
    pub n_excluded_queries: usize,
    pub average_precision: Vec<Option<f64>>,
}

/// Ranked relevance flags for query `q`: gallery sorted by distance (ties by
/// gallery index), same-identity same-camera entries removed.
pub fn ranked_relevance(dm: &DistanceMatrix, q: usize) -> Vec<bool> {
    let row = dm.row(q);
    let mut order: Vec<usize> = (0..dm.n_gallery).collect();
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
    let (qid, qcam) = (dm.query_ids[q], dm.query_cams[q]);
    order
        .into_iter()
        .filter(|&g| !(dm.gallery_ids[g] == qid && dm.gallery_cams[g] == qcam))
        .map(|g| dm.gallery_ids[g] == qid)
        .collect()
}

/// CMC at [`RANKS`] and mAP. Queries without any valid match are left out of
/// the averages and counted in `n_excluded_queries`.
pub fn cmc_map(dm: &DistanceMatrix) -> RetrievalMetrics {
    let mut hits = [0usize; RANKS.len()];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    let mut per_query = Vec::with_capacity(dm.n_query);
    for q in 0..dm.n_query {
        let rel = ranked_relevance(dm, q);
        let n_rel = rel.iter().filter(|r| **r).count();
        if n_rel == 0 {
            per_query.push(None);
            continue;
        }
        valid += 1;
        let first = rel.iter().position(|r| *r).expect("has a match");
        for (h, &k) in hits.iter_mut().zip(RANKS.iter()) {
            if first < k {
                *h += 1;
            }
        }
        let mut found = 0usize;
        let mut ap = 0.0;
        for (rank, &r) in rel.iter().enumerate() {
            if r {
                found += 1;
                ap += found as f64 / (rank + 1) as f64;
            }
        }
        let ap = ap / n_rel as f64;
        ap_sum += ap;
        per_query.push(Some(ap));
    }
    let denom = valid.max(1) as f64;
    RetrievalMetrics {
        rank_k: RANKS.iter().zip(hits).map(|(&k, h)| (k, h as f64 / denom)).collect(),
        map: ap_sum / denom,
        n_valid_queries: valid,
        n_excluded_queries: dm.n_query - valid,
        average_precision: per_query,
    }
}

/// Average precision straight from its definition: for every relevant
/// position, the fraction of relevant items at or above it; averaged over
/// relevant positions. Zero when nothing is relevant.
pub fn brute_force_ap(ranking: &[bool]) -> f64 {
    let positions: Vec<usize> = (0..ranking.len()).filter(|&i| ranking[i]).collect();
    if positions.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &i in &positions {
        let relevant_so_far = ranking[..=i].iter().filter(|r| **r).count();
        total += relevant_so_far as f64 / (i + 1) as f64;
    }
    total / positions.len() as f64
}

/// Fraction of pixels whose arg-max channel (ties to the lowest channel)
/// equals the parsing label, over all samples in the batch.
pub fn attention_pixel_accuracy(f: &AttentionMaps, labels: &[&ParsingLabel]) -> Result<f64> {
    let (n, k, h, w) = f.0.dims4()?;
    if labels.len() != n || labels.iter().any(|l| l.height != h || l.width != w) {
        return config_err("labels do not match attention maps");
    }
    let probs = f.0.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let plane = h * w;
    let mut correct = 0usize;
    for (i, label) in labels.iter().enumerate() {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..k {
                if probs[(i * k + c) * plane + p] > probs[(i * k + best) * plane + p] {
                    best = c;
                }
            }
            if best == label.data[p] as usize {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / (n * plane).max(1) as f64)
}

/// Metrics written by `eval`. Serialized as a flat JSON object with every
/// real value rounded to four decimals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank_k: BTreeMap<usize, f64>,
    pub map: f64,
    pub visibility_rate: Vec<f64>,
    pub attention_pixel_accuracy: f64,
    pub n_queries: usize,
    pub n_excluded_queries: usize,
}

fn round4(v: f64) -> f64 {
    (v * 1e4).round() / 1e4
}

impl EvalReport {
    pub fn rank1(&self) -> f64 {
        self.rank_k.get(&1).copied().unwrap_or(0.0)
    }

    pub fn to_flat_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for (k, v) in &self.rank_k {
            m.insert(format!("rank{k}"), round4(*v).into());
        }
        m.insert("mAP".into(), round4(self.map).into());
        for (i, v) in self.visibility_rate.iter().enumerate() {
            m.insert(format!("visibility_rate_part{}", i + 1), round4(*v).into());
        }
        m.insert("attention_pixel_accuracy".into(), round4(self.attention_pixel_accuracy).into());
        m.insert("n_queries".into(), self.n_queries.into());
        m.insert("n_excluded_queries".into(), self.n_excluded_queries.into());
        serde_json::Value::Object(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Tensor};

    fn dm(row: &[f64], gallery_ids: &[u32]) -> DistanceMatrix {
        let n = gallery_ids.len();
        DistanceMatrix::new(row.to_vec(), vec![1], vec![0], gallery_ids.to_vec(), vec![1; n]).unwrap()
    }

    #[test]
    fn perfect_ranking() {
        let m = cmc_map(&dm(&[0.1, 0.2, 0.3], &[1, 2, 3]));
        assert_eq!(m.rank_k[&1], 1.0);
        assert_eq!(m.map, 1.0);
    }

    #[test]
    fn wrong_first_two_correct_after() {
        let m = cmc_map(&dm(&[0.1, 0.2, 0.3], &[2, 1, 1]));
        assert_eq!(m.rank_k[&1], 0.0);
        assert_eq!(m.rank_k[&5], 1.0);
        assert!((m.map - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(brute_force_ap(&[false, true, true]), m.map);
    }

    #[test]
    fn single_relevant_item_last() {
        for n in 1..8 {
            let mut ids = vec![9u32; n];
            ids[n - 1] = 1;
            let row: Vec<f64> = (0..n).map(|i| i as f64).collect();
            let m = cmc_map(&dm(&row, &ids));
            assert!((m.map - 1.0 / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn same_camera_matches_are_excluded() {
        // the nearest item is the same identity from the same camera
        let d = DistanceMatrix::new(vec![0.0, 0.5, 0.7], vec![1], vec![0], vec![1, 2, 1], vec![0, 1, 2]).unwrap();
        assert_eq!(ranked_relevance(&d, 0), vec![false, true]);
        let m = cmc_map(&d);
        assert_eq!(m.rank_k[&1], 0.0);
        assert!((m.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn queries_without_matches_are_counted_not_averaged() {
        let d = DistanceMatrix::new(
            vec![0.1, 0.2, 0.1, 0.2],
            vec![1, 5],
            vec![0, 0],
            vec![1, 2],
            vec![1, 1],
        )
        .unwrap();
        let m = cmc_map(&d);
        assert_eq!(m.n_valid_queries, 1);
        assert_eq!(m.n_excluded_queries, 1);
        assert_eq!(m.map, 1.0);
        assert_eq!(m.average_precision[1], None);
    }

    #[test]
    fn ties_broken_by_gallery_index() {
        let m = cmc_map(&dm(&[0.5, 0.5], &[2, 1]));
        assert_eq!(m.rank_k[&1], 0.0);
        let m = cmc_map(&dm(&[0.5, 0.5], &[1, 2]));
        assert_eq!(m.rank_k[&1], 1.0);
    }

    #[test]
    fn distance_matrix_shape_and_identity() {
        let e = |v: f32| PartEmbeddings {
            foreground: vec![v],
            parts: vec![vec![v], vec![v + 1.0]],
            visibility: vec![true, true],
            identity_logits: None,
        };
        let q = vec![e(0.0), e(3.0)];
        let g = vec![e(1.0), e(3.0), e(7.0)];
        let v = distance_matrix(&q, &g).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v[4], 0.0);
        assert!(v[3..6].iter().all(|d| *d >= v[4]));
        assert!(distance_matrix(&[], &g).is_err());
    }

    #[test]
    fn pixel_accuracy_examples() {
        let label = ParsingLabel::new(1, 4, vec![0, 0, 2, 1]).unwrap();
        let mut onehot = vec![0.0f64; 3 * 4];
        for (p, &c) in label.data.iter().enumerate() {
            onehot[c as usize * 4 + p] = 1.0;
        }
        let f = AttentionMaps(Tensor::from_vec(onehot, (1, 3, 1, 4), &Device::Cpu).unwrap());
        assert_eq!(attention_pixel_accuracy(&f, &[&label]).unwrap(), 1.0);

        let mut bg = vec![0.0f64; 12];
        bg[..4].fill(1.0);
        let f = AttentionMaps(Tensor::from_vec(bg, (1, 3, 1, 4), &Device::Cpu).unwrap());
        assert_eq!(attention_pixel_accuracy(&f, &[&label]).unwrap(), 0.5);

        let u = AttentionMaps::uniform(1, 2, 1, 4, DType::F64).unwrap();
        assert_eq!(attention_pixel_accuracy(&u, &[&label]).unwrap(), 0.5);
    }

    #[test]
    fn report_json_rounds_to_four_places() {
        let r = EvalReport {
            rank_k: [(1, 0.123456), (5, 0.5), (10, 1.0)].into_iter().collect(),
            map: 2.0 / 3.0,
            visibility_rate: vec![0.99999, 0.25],
            attention_pixel_accuracy: 0.876543,
            n_queries: 20,
            n_excluded_queries: 0,
        };
        let j = r.to_flat_json();
        assert_eq!(j["rank1"], 0.1235);
        assert_eq!(j["mAP"], 0.6667);
        assert_eq!(j["visibility_rate_part1"], 1.0);
        assert_eq!(j["attention_pixel_accuracy"], 0.8765);
    }
}

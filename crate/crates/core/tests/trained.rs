//! Properties of a briefly trained model on synthetic data.

mod common;

use candle_core::{DType, Tensor};

use common::{tiny_config, tiny_data};
use partreid::engine::Trainer;
use partreid::losses::shared_visible_parts;
use partreid::part_attention::{visibility_scores, AttentionMaps};
use partreid::synthetic_data::Sample;

fn trained() -> (Trainer, partreid::synthetic_data::DatasetSplits) {
    let cfg = tiny_config(12);
    let data = tiny_data(&cfg);
    let mut trainer = Trainer::new(&cfg, &data).unwrap();
    trainer.run(&data, 12, None).unwrap();
    (trainer, data)
}

/// Foreground mass `sum_{x>=1} F_x` of every cell, split by the true label.
fn foreground_mass(maps: &[AttentionMaps], samples: &[&Sample]) -> (f64, f64) {
    let (mut fg, mut n_fg, mut bg, mut n_bg) = (0.0, 0usize, 0.0, 0usize);
    for (m, s) in maps.iter().zip(samples) {
        let p = m.0.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let hw = s.parsing_label.data.len();
        for (i, &l) in s.parsing_label.data.iter().enumerate() {
            let mass = 1.0 - p[i];
            if l == 0 {
                bg += mass;
                n_bg += 1;
            } else {
                fg += mass;
                n_fg += 1;
            }
        }
        assert_eq!(p.len(), 7 * hw);
    }
    (fg / n_fg as f64, bg / n_bg as f64)
}

#[test]
fn trained_model_suppresses_background_and_masking_never_adds_parts() {
    let (trainer, data) = trained();
    let mu = trainer.config().train.mu;
    let samples: Vec<&Sample> = data.query.iter().chain(&data.gallery).collect();
    let (embeddings, maps) = trainer.net().infer(&samples, mu, 16).unwrap();

    let (fg, bg) = foreground_mass(&maps, &samples);
    assert!(fg > bg, "foreground mass {fg} vs background {bg}");

    // hide parts of each query one at a time by moving their attention to
    // the background channel; the parts shared with any gallery sample may
    // only shrink
    let n_query = data.query.len();
    let gallery = &embeddings[n_query..];
    for (q, query_maps) in maps.iter().take(n_query).enumerate() {
        let mut probs = query_maps.0.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let dims = query_maps.0.dims4().unwrap();
        let hw = dims.2 * dims.3;
        let mut previous: Vec<usize> = gallery.iter().map(|g| shared_visible_parts(&embeddings[q], g)).collect();
        for part in 1..=6 {
            for i in 0..hw {
                probs[i] += probs[part * hw + i];
                probs[part * hw + i] = 0.0;
            }
            let masked = AttentionMaps(Tensor::from_vec(probs.clone(), dims, &candle_core::Device::Cpu).unwrap());
            let mut query = embeddings[q].clone();
            query.visibility = visibility_scores(&masked, mu).unwrap().remove(0);
            assert!(!query.visibility[part - 1]);
            let now: Vec<usize> = gallery.iter().map(|g| shared_visible_parts(&query, g)).collect();
            for (n, p) in now.iter().zip(&previous) {
                assert!(n <= p, "query {q}: masking part {part} raised shared parts {p} -> {n}");
            }
            previous = now;
        }
        assert!(previous.iter().all(|&n| n == 0));
    }
}

#![allow(dead_code)]

use candle_core::{Device, Tensor, Var};
use partreid::engine::RunConfig;
use partreid::model::ModelConfig;
use partreid::synthetic_data::{make_splits, DataConfig, DatasetSplits};

/// A run small enough to train several times inside one test.
pub fn tiny_config(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig {
        data: DataConfig {
            seed: 11,
            n_train_ids: 4,
            n_eval_ids: 3,
            samples_per_id: 4,
            queries_per_id: 1,
            ..DataConfig::default()
        },
        model: ModelConfig {
            encoder_channels: [4, 6, 6, 8],
            attention_mid_channels: 6,
            embed_dim: 6,
            ..ModelConfig::default()
        },
        ..RunConfig::default()
    };
    let t = &mut cfg.train;
    t.epochs = epochs;
    t.warmup_epochs = 1;
    t.decay_epochs = [epochs - 1, epochs];
    t.base_lr = 1e-3;
    t.warmup_start_lr = 1e-4;
    t.decay_target_lrs = [1e-4, 1e-5];
    t.n_ids = 2;
    t.n_per_id = 2;
    t.eval_every = 0;
    cfg.validate().unwrap();
    cfg
}

pub fn tiny_data(cfg: &RunConfig) -> DatasetSplits {
    make_splits(&cfg.data).unwrap()
}

pub fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-hard triplet loss by enumeration of every (anchor, positive,
/// negative) combination.
pub fn triplet_oracle(emb: &[Vec<Vec<f64>>], ids: &[u32], margin: f64) -> Option<(f64, Vec<(usize, usize, usize)>)> {
    let n = emb.len();
    let x = emb[0].len();
    let dist = |a: usize, b: usize| -> f64 {
        let mut s = 0.0;
        for p in 0..x {
            s += euclid(&emb[a][p], &emb[b][p]);
        }
        s * (1.0 / x as f64)
    };
    let mut total = 0.0;
    let mut chosen = Vec::new();
    for a in 0..n {
        let positives: Vec<usize> = (0..n).filter(|&j| j != a && ids[j] == ids[a]).collect();
        let negatives: Vec<usize> = (0..n).filter(|&j| ids[j] != ids[a]).collect();
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        // hardest = first index attaining the extreme
        let mut best_p = positives[0];
        for &p in &positives {
            if dist(a, p) > dist(a, best_p) {
                best_p = p;
            }
        }
        let mut best_q = negatives[0];
        for &q in &negatives {
            if dist(a, q) < dist(a, best_q) {
                best_q = q;
            }
        }
        total += (dist(a, best_p) - dist(a, best_q) + margin).max(0.0);
        chosen.push((a, best_p, best_q));
    }
    if chosen.is_empty() {
        None
    } else {
        Some((total * (1.0 / chosen.len() as f64), chosen))
    }
}

/// Ranked relevance from scratch: sort by (distance, index), drop same-id
/// same-camera entries.
pub fn oracle_ranking(values: &[f64], ng: usize, q: usize, qid: u32, qcam: u32, gids: &[u32], gcams: &[u32]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..ng).collect();
    order.sort_by(|&a, &b| values[q * ng + a].partial_cmp(&values[q * ng + b]).unwrap().then(a.cmp(&b)));
    order
        .into_iter()
        .filter(|&g| !(gids[g] == qid && gcams[g] == qcam))
        .map(|g| gids[g] == qid)
        .collect()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

pub fn set_entry(var: &Var, base: &[f64], i: usize, value: f64) {
    let mut v = base.to_vec();
    v[i] = value;
    let t = Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap();
    var.set(&t).unwrap();
}

/// Central differences of `f` at every listed coordinate of `var`.
pub fn numeric_grad(var: &Var, coords: &[usize], step: f64, mut f: impl FnMut() -> f64) -> Vec<f64> {
    let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let out = coords
        .iter()
        .map(|&i| {
            set_entry(var, &base, i, base[i] + step);
            let up = f();
            set_entry(var, &base, i, base[i] - step);
            let down = f();
            (up - down) / (2.0 * step)
        })
        .collect();
    var.set(&Tensor::from_vec(base, var.shape(), &Device::Cpu).unwrap()).unwrap();
    out
}

pub fn analytic_grad(loss: &Tensor, var: &Var) -> Vec<f64> {
    let grads = loss.backward().unwrap();
    grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::random_erasing;
use super::checkpoint::{restore_store, store_state, Checkpoint, RngState};
use super::config::RunConfig;
use super::optim::Adam;
use super::schedule::lr_schedule;
use crate::error::{data_err, Error, Result};
use crate::eval::{attention_pixel_accuracy, cmc_map, distance_matrix, DistanceMatrix, EvalReport};
use crate::losses::{id_loss, part_triplet_loss, total_loss, IdLogits, TripletConfig};
use crate::model::{ForwardOutput, PartAttentionNet, Variant};
use crate::part_attention::part_attention_loss;
use crate::synthetic_data::{identity_balanced_batches, mix_seed, DatasetSplits, ParsingLabel, Sample};

pub const METRICS_FILE: &str = "metrics.ndjson";
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
const EVAL_CHUNK: usize = 32;
const INIT_STREAM: u64 = 0x1417;
const EPOCH_STREAM: u64 = 0xe90c;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// Completed epochs after this one (1-based).
    pub epoch: usize,
    pub lr: f64,
    pub loss_triplet: f64,
    pub loss_id: f64,
    pub loss_part: f64,
    pub loss_total: f64,
    pub n_batches: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub rank1: f64,
    pub map: f64,
    pub attention_pixel_accuracy: f64,
}

/// Loss terms of one batch; scalars as tensors so the total can be
/// differentiated.
pub struct BatchLosses {
    pub triplet: Tensor,
    pub id: Tensor,
    pub part: Tensor,
    pub total: Tensor,
}

/// The training objective for `out`, produced from `samples` (in order).
pub fn batch_losses(net: &PartAttentionNet, out: &ForwardOutput, samples: &[&Sample], cfg: &RunConfig) -> Result<BatchLosses> {
    let t = &cfg.train;
    let variant = net.config().variant;
    let ids: Vec<u32> = samples.iter().map(|s| s.identity).collect();
    let labels: Vec<&ParsingLabel> = samples.iter().map(|s| &s.parsing_label).collect();

    let embeddings = match variant {
        Variant::PlainTriplet => out.focused.foreground()?.unsqueeze(1)?,
        _ => out.focused.parts()?,
    };
    let tri_cfg = TripletConfig {
        margin: t.margin,
        part_count: embeddings.dim(1)?,
    };
    let triplet = part_triplet_loss(&embeddings, &ids, &tri_cfg)?.loss;

    let logits = IdLogits {
        foreground: out.foreground_logits.clone(),
        parts: out.part_logits.clone(),
        part_visible: samples.iter().map(|s| s.visible_parts(net.config().n_parts)).collect(),
    };
    let id = id_loss(&logits, &ids, t.theta)?;
    let part = part_attention_loss(&out.attention, &labels, t.theta)?;
    let gamma = if variant == Variant::NoPartAttention { 0.0 } else { t.gamma_part };
    let total = total_loss(&triplet, &id, &part, gamma)?;
    Ok(BatchLosses { triplet, id, part, total })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub struct Trainer {
    cfg: RunConfig,
    net: PartAttentionNet,
    adam: Adam,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, data: &DatasetSplits) -> Result<Self> {
        cfg.validate()?;
        let n_classes = check_classes(data)?;
        let net = PartAttentionNet::new(
            &cfg.model,
            n_classes,
            cfg.train.precision.dtype(),
            mix_seed(&[cfg.train.global_seed, INIT_STREAM]),
        )?;
        let t = &cfg.train;
        Ok(Self {
            cfg: cfg.clone(),
            net,
            adam: Adam::new(t.adam_betas[0], t.adam_betas[1], t.adam_eps, t.weight_decay),
            epoch: 0,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = &ckpt.config;
        let net = PartAttentionNet::new(&cfg.model, ckpt.n_classes, cfg.train.precision.dtype(), 0)?;
        restore_store(net.var_store(), &ckpt.params, &ckpt.buffers)?;
        let t = &cfg.train;
        let mut adam = Adam::new(t.adam_betas[0], t.adam_betas[1], t.adam_eps, t.weight_decay);
        adam.restore(ckpt.adam_step, ckpt.adam_m.clone(), ckpt.adam_v.clone());
        Ok(Self {
            cfg: cfg.clone(),
            net,
            adam,
            epoch: ckpt.epoch,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn net(&self) -> &PartAttentionNet {
        &self.net
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.train.epochs
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let (params, buffers) = store_state(self.net.var_store())?;
        let (m, v) = self.adam.moments();
        Ok(Checkpoint {
            epoch: self.epoch,
            adam_step: self.adam.step_count(),
            n_classes: self.net.n_classes(),
            rng: RngState {
                global_seed: self.cfg.train.global_seed,
                next_epoch: self.epoch as u64,
            },
            config: self.cfg.clone(),
            params,
            buffers,
            adam_m: m.iter().map(|(k, t)| Ok((k.clone(), t.copy()?))).collect::<Result<_>>()?,
            adam_v: v.iter().map(|(k, t)| Ok((k.clone(), t.copy()?))).collect::<Result<_>>()?,
        })
    }

    /// The generator behind every random draw of an epoch.
    pub fn epoch_rng(global_seed: u64, epoch: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(mix_seed(&[global_seed, EPOCH_STREAM, epoch as u64]))
    }

    /// Sample indices of each batch of `epoch`, in order.
    pub fn epoch_batches(&self, data: &DatasetSplits, epoch: usize) -> Result<Vec<Vec<usize>>> {
        let mut rng = Self::epoch_rng(self.cfg.train.global_seed, epoch);
        let ids: Vec<u32> = data.train.iter().map(|s| s.identity).collect();
        identity_balanced_batches(&ids, self.cfg.train.n_ids, self.cfg.train.n_per_id, rng.next_u64())
    }

    pub fn run_epoch(&mut self, data: &DatasetSplits) -> Result<EpochLog> {
        let t = self.cfg.train.clone();
        let epoch = self.epoch;
        let lr = lr_schedule(epoch, &t)?;
        let mut rng = Self::epoch_rng(t.global_seed, epoch);
        let ids: Vec<u32> = data.train.iter().map(|s| s.identity).collect();
        let batches = identity_balanced_batches(&ids, t.n_ids, t.n_per_id, rng.next_u64())?;

        let mut sums = [0.0f64; 4];
        for (b, batch) in batches.iter().enumerate() {
            let samples: Vec<&Sample> = batch.iter().map(|&i| &data.train[i]).collect();
            let images = self.augmented_batch(&samples, &mut rng)?;
            let out = self.net.forward(&images, true)?;
            let losses = batch_losses(&self.net, &out, &samples, &self.cfg)?;
            let values = [
                scalar(&losses.triplet)?,
                scalar(&losses.id)?,
                scalar(&losses.part)?,
                scalar(&losses.total)?,
            ];
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let grads = losses.total.backward()?;
            self.adam.step(self.net.var_store(), &grads, lr)?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
        }
        self.epoch += 1;
        let n = batches.len().max(1) as f64;
        let mut log = EpochLog {
            epoch: self.epoch,
            lr,
            loss_triplet: sums[0] / n,
            loss_id: sums[1] / n,
            loss_part: sums[2] / n,
            loss_total: sums[3] / n,
            n_batches: batches.len(),
            eval: None,
        };
        if t.eval_every > 0 && (self.epoch % t.eval_every == 0 || self.epoch == t.epochs) {
            let (report, _) = evaluate(&self.net, data, t.mu)?;
            log.eval = Some(EvalSummary {
                rank1: report.rank1(),
                map: report.map,
                attention_pixel_accuracy: report.attention_pixel_accuracy,
            });
        }
        info!(
            "epoch {} lr {:.2e} total {:.4} (tri {:.4} id {:.4} part {:.4}){}",
            log.epoch,
            lr,
            log.loss_total,
            log.loss_triplet,
            log.loss_id,
            log.loss_part,
            log.eval
                .as_ref()
                .map(|e| format!(" rank1 {:.3} mAP {:.3} attn {:.3}", e.rank1, e.map, e.attention_pixel_accuracy))
                .unwrap_or_default()
        );
        Ok(log)
    }

    fn augmented_batch<R: Rng>(&self, samples: &[&Sample], rng: &mut R) -> Result<Tensor> {
        let (h, w) = (samples[0].image_height, samples[0].image_width);
        let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
        for s in samples {
            let mut img = s.image.clone();
            random_erasing(&mut img, 3, h, w, self.cfg.train.random_erasing_prob, rng)?;
            data.extend_from_slice(&img);
        }
        Ok(Tensor::from_vec(data, (samples.len(), 3, h, w), &Device::Cpu)?.to_dtype(self.net.dtype())?)
    }

    /// Train up to `until` completed epochs (capped at the configured total).
    /// With `out`, every epoch appends a line to the metrics log and rewrites
    /// the checkpoint.
    pub fn run(&mut self, data: &DatasetSplits, until: usize, out: Option<&Path>) -> Result<Vec<EpochLog>> {
        if let Some(dir) = out {
            fs::create_dir_all(dir)?;
        }
        let mut logs = Vec::new();
        while self.epoch < until.min(self.cfg.train.epochs) {
            let log = self.run_epoch(data)?;
            if let Some(dir) = out {
                let mut f = OpenOptions::new().create(true).append(true).open(dir.join(METRICS_FILE))?;
                writeln!(f, "{}", serde_json::to_string(&log)?)?;
                self.checkpoint()?.save(&dir.join(CHECKPOINT_FILE))?;
            }
            logs.push(log);
        }
        Ok(logs)
    }
}

/// Training identities must be `0..n` so they double as class indices.
fn check_classes(data: &DatasetSplits) -> Result<usize> {
    let ids: BTreeSet<u32> = data.train.iter().map(|s| s.identity).collect();
    let n = ids.len();
    if n == 0 {
        return data_err("training split is empty");
    }
    if ids.iter().enumerate().any(|(i, &id)| id as usize != i) {
        return data_err("training identities must be 0..n");
    }
    Ok(n)
}

/// Train from scratch for the configured number of epochs.
pub fn train(cfg: &RunConfig, data: &DatasetSplits, out: Option<&Path>) -> Result<(Trainer, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(cfg, data)?;
    let logs = trainer.run(data, cfg.train.epochs, out)?;
    Ok((trainer, logs))
}

/// Query/gallery retrieval metrics at visibility threshold `mu`, plus the
/// distance matrix they were computed from.
pub fn evaluate(net: &PartAttentionNet, data: &DatasetSplits, mu: f64) -> Result<(EvalReport, DistanceMatrix)> {
    let query: Vec<&Sample> = data.query.iter().collect();
    let gallery: Vec<&Sample> = data.gallery.iter().collect();
    if query.is_empty() || gallery.is_empty() {
        return data_err("evaluation needs non-empty query and gallery splits");
    }
    let (q_emb, q_maps) = net.infer(&query, mu, EVAL_CHUNK)?;
    let (g_emb, g_maps) = net.infer(&gallery, mu, EVAL_CHUNK)?;
    let dm = DistanceMatrix::new(
        distance_matrix(&q_emb, &g_emb)?,
        query.iter().map(|s| s.identity).collect(),
        query.iter().map(|s| s.camera_id).collect(),
        gallery.iter().map(|s| s.identity).collect(),
        gallery.iter().map(|s| s.camera_id).collect(),
    )?;
    let metrics = cmc_map(&dm);

    let n_parts = net.config().n_parts;
    let visibility_rate = (0..n_parts)
        .map(|x| q_emb.iter().filter(|e| e.visibility[x]).count() as f64 / q_emb.len() as f64)
        .collect();

    let mut acc = 0.0;
    for (maps, s) in q_maps.iter().zip(&query).chain(g_maps.iter().zip(&gallery)) {
        acc += attention_pixel_accuracy(maps, &[&s.parsing_label])?;
    }
    let report = EvalReport {
        rank_k: metrics.rank_k,
        map: metrics.map,
        visibility_rate,
        attention_pixel_accuracy: acc / (query.len() + gallery.len()) as f64,
        n_queries: dm.n_query,
        n_excluded_queries: metrics.n_excluded_queries,
    };
    Ok((report, dm))
}

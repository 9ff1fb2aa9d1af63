//! Ablation harness: trains architecture variants and hyperparameter sweeps on
//! the same data and reports Rank-1 / mAP per run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::train::{evaluate, Trainer};
use crate::error::{config_err, Result};
use crate::model::Variant;
use crate::synthetic_data::{split_checksums, DatasetSplits};

/// Values visited by both sweeps.
pub const SWEEP_VALUES: [f64; 5] = [0.15, 0.35, 0.55, 0.75, 0.95];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AblationSpec {
    Variant(Variant),
    /// Visibility threshold sweep on the full model (inference only).
    MuSweep,
    /// Part loss weight sweep on the full model.
    GammaSweep,
}

impl AblationSpec {
    pub fn parse(name: &str) -> Result<Self> {
        match name.trim() {
            "mu_sweep" => Ok(Self::MuSweep),
            "gamma_sweep" | "gamma_part_sweep" => Ok(Self::GammaSweep),
            other => match Variant::from_name(other) {
                Some(v) => Ok(Self::Variant(v)),
                None => config_err(format!("unknown ablation variant {other:?}")),
            },
        }
    }

    /// Comma-separated list, e.g. `full,plain_triplet,mu_sweep`.
    pub fn parse_list(list: &str) -> Result<Vec<Self>> {
        let specs: Vec<Self> = list.split(',').filter(|s| !s.trim().is_empty()).map(Self::parse).collect::<Result<_>>()?;
        if specs.is_empty() {
            return config_err("no ablation variants given");
        }
        Ok(specs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub mu: f64,
    pub gamma_part: f64,
    pub rank1: f64,
    pub map: f64,
    pub attention_pixel_accuracy: f64,
    pub data_checksum: String,
}

pub fn data_checksum(data: &DatasetSplits) -> Result<String> {
    let mut h = Sha256::new();
    for c in split_checksums(data)? {
        h.update(c.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

type RunKey = (Variant, u64, u64);

struct Runner<'a> {
    base: &'a RunConfig,
    data: &'a DatasetSplits,
    out: Option<&'a Path>,
    trained: BTreeMap<RunKey, Trainer>,
}

impl Runner<'_> {
    fn trained(&mut self, variant: Variant, gamma: f64, seed: u64) -> Result<&Trainer> {
        let key = (variant, gamma.to_bits(), seed);
        if !self.trained.contains_key(&key) {
            let mut cfg = self.base.clone();
            cfg.model.variant = variant;
            cfg.train.gamma_part = gamma;
            cfg.train.global_seed = seed;
            let dir = self
                .out
                .map(|o| o.join(format!("{}_gamma{gamma}_seed{seed}", variant.name())));
            let mut trainer = Trainer::new(&cfg, self.data)?;
            trainer.run(self.data, cfg.train.epochs, dir.as_deref())?;
            self.trained.insert(key, trainer);
        }
        Ok(&self.trained[&key])
    }
}

/// Runs every spec for every seed. Runs that share variant, `gamma_part` and
/// seed are trained once (the full model backs the mu sweep and the matching
/// gamma sweep point).
pub fn ablate(
    cfg: &RunConfig,
    data: &DatasetSplits,
    specs: &[AblationSpec],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    if seeds.is_empty() {
        return config_err("ablation needs at least one seed");
    }
    let checksum = data_checksum(data)?;
    let mut runner = Runner {
        base: cfg,
        data,
        out,
        trained: BTreeMap::new(),
    };
    let mut rows = Vec::new();
    for spec in specs {
        for &seed in seeds {
            let points: Vec<(&str, Variant, f64, f64)> = match *spec {
                AblationSpec::Variant(v) => vec![(v.name(), v, cfg.train.gamma_part, cfg.train.mu)],
                AblationSpec::MuSweep => SWEEP_VALUES
                    .iter()
                    .map(|&mu| ("mu_sweep", Variant::Full, cfg.train.gamma_part, mu))
                    .collect(),
                AblationSpec::GammaSweep => SWEEP_VALUES
                    .iter()
                    .map(|&g| ("gamma_sweep", Variant::Full, g, cfg.train.mu))
                    .collect(),
            };
            for (label, variant, gamma, mu) in points {
                let trainer = runner.trained(variant, gamma, seed)?;
                let (report, _) = evaluate(trainer.net(), data, mu)?;
                rows.push(AblationRow {
                    variant: label.to_string(),
                    seed,
                    mu,
                    gamma_part: gamma,
                    rank1: report.rank1(),
                    map: report.map,
                    attention_pixel_accuracy: report.attention_pixel_accuracy,
                    data_checksum: checksum.clone(),
                });
            }
        }
    }
    Ok(rows)
}

/// Plain-text table, one row per run.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| variant | seed | mu | gamma_part | Rank-1 | mAP |\n|---|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {:.2} | {:.2} | {:.4} | {:.4} |",
            r.variant, r.seed, r.mu, r.gamma_part, r.rank1, r.map
        );
    }
    s
}

use super::config::TrainConfig;
use crate::error::{config_err, Result};

/// Learning rate for a 0-based epoch: linear warmup that reaches `base_lr` on
/// the last warmup epoch, a plateau, then two step decays.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return config_err(format!("epoch {epoch} outside 0..{}", cfg.epochs));
    }
    let [d0, d1] = cfg.decay_epochs;
    let lr = if epoch < cfg.warmup_epochs {
        if cfg.warmup_epochs == 1 {
            cfg.base_lr
        } else {
            cfg.warmup_start_lr
                + (cfg.base_lr - cfg.warmup_start_lr) * epoch as f64 / (cfg.warmup_epochs - 1) as f64
        }
    } else if epoch < d0 {
        cfg.base_lr
    } else if epoch < d1 {
        cfg.decay_target_lrs[0]
    } else {
        cfg.decay_target_lrs[1]
    };
    Ok(lr)
}

//! Part attention block: pixel-level attention predictor, parsing-supervised
//! attention loss and per-part visibility scores.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, Result};
use crate::nn::{softmax_channels, BatchNorm2d, Conv2d, VarStore};
use crate::synthetic_data::ParsingLabel;

/// Probabilities below this are clamped before taking the log.
pub const LOG_CLAMP: f64 = 1e-12;

/// Encoder output, `(N, C, H, W)`.
#[derive(Debug, Clone)]
pub struct FeatureMap(pub Tensor);

/// Per-pixel part membership probabilities, `(N, X + 1, H, W)`; channel 0 is
/// background. Every pixel is a point on the probability simplex.
#[derive(Debug, Clone)]
pub struct AttentionMaps(pub Tensor);

impl AttentionMaps {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// Number of body parts `X` (channels minus background).
    pub fn n_parts(&self) -> Result<usize> {
        Ok(self.0.dim(1)? - 1)
    }

    /// Uniform maps: every channel `1 / (X + 1)` at every pixel.
    pub fn uniform(n: usize, n_parts: usize, h: usize, w: usize, dtype: DType) -> Result<Self> {
        let k = n_parts + 1;
        let t = Tensor::full(1.0 / k as f64, (n, k, h, w), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self(t))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    /// Two conv3x3 -> batch norm -> ReLU stages, then softmax.
    #[default]
    Pixel,
    /// One conv3x3 straight to `X + 1` logits, then softmax.
    SingleConv,
}

/// Initial affine scale of the batch norm feeding the softmax. With a unit
/// scale the normalised logits spread over roughly one unit, which caps the
/// softmax peak near 0.75 until the optimizer has slowly widened it.
pub const OUTPUT_BN_SCALE: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct AttentionPredictor {
    stage1: Option<(Conv2d, BatchNorm2d)>,
    stage2: Conv2d,
    stage2_norm: Option<BatchNorm2d>,
    n_parts: usize,
}

impl AttentionPredictor {
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        in_channels: usize,
        mid_channels: usize,
        n_parts: usize,
        kind: PredictorKind,
    ) -> Result<Self> {
        if n_parts == 0 {
            return config_err("attention predictor needs at least one part");
        }
        let k = n_parts + 1;
        match kind {
            PredictorKind::Pixel => Ok(Self {
                stage1: Some((
                    Conv2d::new(vs, &format!("{name}.conv1"), in_channels, mid_channels, 3, 1, true)?,
                    BatchNorm2d::new(vs, &format!("{name}.bn1"), mid_channels)?,
                )),
                stage2: Conv2d::new(vs, &format!("{name}.conv2"), mid_channels, k, 3, 1, true)?,
                stage2_norm: Some(BatchNorm2d::with_scale(vs, &format!("{name}.bn2"), k, OUTPUT_BN_SCALE)?),
                n_parts,
            }),
            PredictorKind::SingleConv => Ok(Self {
                stage1: None,
                stage2: Conv2d::new(vs, &format!("{name}.conv"), in_channels, k, 3, 1, true)?,
                stage2_norm: None,
                n_parts,
            }),
        }
    }

    pub fn n_parts(&self) -> usize {
        self.n_parts
    }

    /// The convolution producing the `X + 1` pre-softmax channels.
    pub fn output_conv(&self) -> &Conv2d {
        &self.stage2
    }

    /// Pre-softmax scores: `ReLU(BN(conv(ReLU(BN(conv(B))))))` for the pixel
    /// predictor.
    pub fn logits(&self, b: &FeatureMap, train: bool) -> Result<Tensor> {
        let mut x = b.0.clone();
        if let Some((conv, bn)) = &self.stage1 {
            x = bn.forward(&conv.forward(&x)?, train)?.relu()?;
        }
        x = self.stage2.forward(&x)?;
        if let Some(bn) = &self.stage2_norm {
            x = bn.forward(&x, train)?.relu()?;
        }
        Ok(x)
    }

    pub fn predict(&self, b: &FeatureMap, train: bool) -> Result<AttentionMaps> {
        Ok(AttentionMaps(softmax_channels(&self.logits(b, train)?)?))
    }
}

/// Stacks labels into a `(N, H, W)` class grid after range/shape checks.
fn check_labels(labels: &[&ParsingLabel], n: usize, h: usize, w: usize, n_parts: usize) -> Result<()> {
    if labels.len() != n {
        return config_err(format!("{} labels for {n} attention maps", labels.len()));
    }
    for l in labels {
        if l.height != h || l.width != w {
            return config_err(format!(
                "label grid {}x{} does not match attention grid {h}x{w}",
                l.height, l.width
            ));
        }
        l.validate(n_parts)?;
    }
    Ok(())
}

/// Label-smoothed pixel-wise cross-entropy between attention maps and parsing
/// labels, averaged over all pixels of all samples.
///
/// With `K = X + 1` classes the target weight is `1 - theta + theta / K` on
/// the labelled channel and `theta / K` elsewhere.
pub fn part_attention_loss(f: &AttentionMaps, labels: &[&ParsingLabel], theta: f64) -> Result<Tensor> {
    if !(0.0..1.0).contains(&theta) {
        return config_err(format!("smoothing rate {theta} outside [0, 1)"));
    }
    let (n, k, h, w) = f.0.dims4()?;
    check_labels(labels, n, h, w, k - 1)?;

    let off = theta / k as f64;
    let on = 1.0 - theta + off;
    let mut weights = vec![off; n * k * h * w];
    for (i, l) in labels.iter().enumerate() {
        for (p, &class) in l.data.iter().enumerate() {
            weights[(i * k + class as usize) * h * w + p] = on;
        }
    }
    let weights = Tensor::from_vec(weights, (n, k, h, w), f.0.device())?.to_dtype(f.0.dtype())?;
    let floor = Tensor::full(LOG_CLAMP, (n, k, h, w), f.0.device())?.to_dtype(f.0.dtype())?;
    let log_f = f.0.maximum(&floor)?.log()?;
    let total = (weights * log_f)?.sum_all()?;
    Ok((total * (-1.0 / (n * h * w) as f64))?)
}

/// Binary visibility per sample and part: part `x` is visible when its map's
/// peak exceeds `mu`. Background has no score.
pub fn visibility_scores(f: &AttentionMaps, mu: f64) -> Result<Vec<Vec<bool>>> {
    let peaks = part_peaks(f)?;
    Ok(peaks
        .into_iter()
        .map(|row| row.into_iter().map(|p| p > mu).collect())
        .collect())
}

/// Per-sample, per-part maximum attention, `N x X`.
pub fn part_peaks(f: &AttentionMaps) -> Result<Vec<Vec<f64>>> {
    let (n, k, _, _) = f.0.dims4()?;
    if k < 2 {
        return data_err("attention maps need a background and at least one part channel");
    }
    Ok(f.0
        .narrow(1, 1, k - 1)?
        .flatten_from(2)?
        .max(2)?
        .to_dtype(DType::F64)?
        .reshape((n, k - 1))?
        .to_vec2::<f64>()?)
}

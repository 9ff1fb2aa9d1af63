//! The full network: a small convolutional encoder, the part attention
//! predictor, the focuser and the identity heads.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::focuser::{FocusedFeatures, Focuser, PartEmbeddings};
use crate::losses::IdClassifier;
use crate::nn::{BatchNorm2d, Conv2d, VarStore};
use crate::part_attention::{visibility_scores, AttentionMaps, AttentionPredictor, FeatureMap, PredictorKind};
use crate::synthetic_data::Sample;

/// Encoder stage strides; two stride-2 stages give a 4x smaller grid.
const ENCODER_STRIDES: [usize; 4] = [2, 2, 1, 1];
pub const ENCODER_STRIDE: usize = 4;

/// Which parts of the architecture are active. Everything but `Full` is an
/// ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Uniform masks in the focuser and no attention supervision.
    NoPartAttention,
    /// Every embedding is the global average of `K1`.
    NoFocuser,
    /// Single-convolution attention predictor.
    NoPixelPredictor,
    /// Triplet loss on the foreground embedding only.
    PlainTriplet,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoPartAttention,
        Variant::NoFocuser,
        Variant::NoPixelPredictor,
        Variant::PlainTriplet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPartAttention => "no_part_attention",
            Variant::NoFocuser => "no_focuser",
            Variant::NoPixelPredictor => "no_pixel_predictor",
            Variant::PlainTriplet => "plain_triplet",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_parts: usize,
    pub encoder_channels: [usize; 4],
    pub attention_mid_channels: usize,
    pub embed_dim: usize,
    pub gate_kernel: usize,
    /// Append normalised row/column coordinate planes to the input image.
    pub coord_channels: bool,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_parts: 6,
            encoder_channels: [32, 64, 128, 256],
            attention_mid_channels: 128,
            embed_dim: 128,
            gate_kernel: 3,
            coord_channels: true,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_parts == 0 || self.embed_dim == 0 || self.attention_mid_channels == 0 {
            return config_err("model widths and part count must be positive");
        }
        if self.encoder_channels.contains(&0) {
            return config_err("encoder channels must be positive");
        }
        if self.gate_kernel % 2 == 0 {
            return config_err("gate kernel must be odd");
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.encoder_channels[3]
    }
}

#[derive(Debug, Clone)]
struct Encoder {
    stages: Vec<(Conv2d, BatchNorm2d)>,
    coord_channels: bool,
}

impl Encoder {
    fn new(vs: &mut VarStore, cfg: &ModelConfig) -> Result<Self> {
        let mut in_c = if cfg.coord_channels { 5 } else { 3 };
        let mut stages = Vec::new();
        for (i, (&out_c, &stride)) in cfg.encoder_channels.iter().zip(&ENCODER_STRIDES).enumerate() {
            stages.push((
                Conv2d::new(vs, &format!("encoder.{i}.conv"), in_c, out_c, 3, stride, false)?,
                BatchNorm2d::new(vs, &format!("encoder.{i}.bn"), out_c)?,
            ));
            in_c = out_c;
        }
        Ok(Self {
            stages,
            coord_channels: cfg.coord_channels,
        })
    }

    fn forward(&self, images: &Tensor, train: bool) -> Result<FeatureMap> {
        let mut x = if self.coord_channels {
            let (n, _, h, w) = images.dims4()?;
            Tensor::cat(&[images, &coordinate_planes(n, h, w, images.dtype())?], 1)?
        } else {
            images.clone()
        };
        for (conv, bn) in &self.stages {
            x = bn.forward(&conv.forward(&x)?, train)?.relu()?;
        }
        Ok(FeatureMap(x))
    }
}

fn coordinate_planes(n: usize, h: usize, w: usize, dtype: DType) -> Result<Tensor> {
    let mut v = Vec::with_capacity(2 * h * w);
    for r in 0..h {
        for _ in 0..w {
            v.push(2.0 * (r as f64 + 0.5) / h as f64 - 1.0);
        }
    }
    for _ in 0..h {
        for c in 0..w {
            v.push(2.0 * (c as f64 + 0.5) / w as f64 - 1.0);
        }
    }
    let t = Tensor::from_vec(v, (1, 2, h, w), &Device::Cpu)?.to_dtype(dtype)?;
    Ok(t.broadcast_as((n, 2, h, w))?.contiguous()?)
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub features: FeatureMap,
    /// Predicted attention maps (supervised by the part attention loss).
    pub attention: AttentionMaps,
    /// Maps the focuser actually used (uniform for `NoPartAttention`).
    pub focus_maps: AttentionMaps,
    pub focused: FocusedFeatures,
    pub foreground_logits: Tensor,
    pub part_logits: Tensor,
}

pub struct PartAttentionNet {
    vs: VarStore,
    cfg: ModelConfig,
    encoder: Encoder,
    predictor: AttentionPredictor,
    focuser: Focuser,
    classifier: IdClassifier,
}

impl PartAttentionNet {
    pub fn new(cfg: &ModelConfig, n_classes: usize, dtype: DType, init_seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut vs = VarStore::new(dtype, init_seed);
        let encoder = Encoder::new(&mut vs, cfg)?;
        let kind = if cfg.variant == Variant::NoPixelPredictor {
            PredictorKind::SingleConv
        } else {
            PredictorKind::Pixel
        };
        let c = cfg.feature_channels();
        let predictor = AttentionPredictor::new(&mut vs, "attention", c, cfg.attention_mid_channels, cfg.n_parts, kind)?;
        let focuser = Focuser::new(&mut vs, "focuser", c, cfg.embed_dim, cfg.gate_kernel)?;
        let classifier = IdClassifier::new(&mut vs, "classifier", cfg.embed_dim, n_classes)?;
        Ok(Self {
            vs,
            cfg: cfg.clone(),
            encoder,
            predictor,
            focuser,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn var_store(&self) -> &VarStore {
        &self.vs
    }

    pub fn dtype(&self) -> DType {
        self.vs.dtype()
    }

    pub fn focuser(&self) -> &Focuser {
        &self.focuser
    }

    pub fn predictor(&self) -> &AttentionPredictor {
        &self.predictor
    }

    pub fn n_classes(&self) -> usize {
        self.classifier.n_classes()
    }

    /// `(N, 3, H, W)` image batch in the model's dtype.
    pub fn image_batch(&self, samples: &[&Sample]) -> Result<Tensor> {
        images_tensor(samples, self.dtype())
    }

    pub fn forward(&self, images: &Tensor, train: bool) -> Result<ForwardOutput> {
        let features = self.encoder.forward(images, train)?;
        self.forward_features(features, train)
    }

    /// Everything after the encoder.
    pub fn forward_features(&self, features: FeatureMap, train: bool) -> Result<ForwardOutput> {
        let attention = self.predictor.predict(&features, train)?;
        let (n, _, h, w) = attention.0.dims4()?;
        let focus_maps = match self.cfg.variant {
            Variant::NoPartAttention => AttentionMaps::uniform(n, self.cfg.n_parts, h, w, self.dtype())?,
            _ => attention.clone(),
        };
        let focused = match self.cfg.variant {
            Variant::NoFocuser => {
                let k1 = self.focuser.embed(&features)?;
                let (n, d, _, _) = k1.dims4()?;
                let gap = k1.mean((2, 3))?.unsqueeze(1)?;
                FocusedFeatures {
                    pooled: gap.broadcast_as((n, self.cfg.n_parts + 1, d))?.contiguous()?,
                }
            }
            _ => self.focuser.forward(&features, &focus_maps)?,
        };
        let (foreground_logits, part_logits) = self.classifier.forward(&focused.foreground()?, &focused.parts()?)?;
        Ok(ForwardOutput {
            features,
            attention,
            focus_maps,
            focused,
            foreground_logits,
            part_logits,
        })
    }

    /// Plain per-sample embeddings with visibility at threshold `mu`.
    pub fn embeddings(&self, out: &ForwardOutput, mu: f64) -> Result<Vec<PartEmbeddings>> {
        let visibility = visibility_scores(&out.focus_maps, mu)?;
        let pooled = out.focused.pooled.to_dtype(DType::F32)?.to_vec3::<f32>()?;
        let logits = out.foreground_logits.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        Ok(pooled
            .into_iter()
            .zip(visibility)
            .zip(logits)
            .map(|((mut slots, visibility), logits)| {
                let foreground = slots.remove(0);
                PartEmbeddings {
                    foreground,
                    parts: slots,
                    visibility,
                    identity_logits: Some(logits),
                }
            })
            .collect())
    }

    /// Inference over `samples` in chunks; returns embeddings and the
    /// attention maps as `f64` per sample.
    pub fn infer(&self, samples: &[&Sample], mu: f64, chunk: usize) -> Result<(Vec<PartEmbeddings>, Vec<AttentionMaps>)> {
        let mut embeddings = Vec::with_capacity(samples.len());
        let mut maps = Vec::with_capacity(samples.len());
        for group in samples.chunks(chunk.max(1)) {
            let out = self.forward(&self.image_batch(group)?, false)?;
            embeddings.extend(self.embeddings(&out, mu)?);
            for i in 0..group.len() {
                maps.push(AttentionMaps(out.attention.0.narrow(0, i, 1)?.to_dtype(DType::F64)?));
            }
        }
        Ok((embeddings, maps))
    }
}

pub fn images_tensor(samples: &[&Sample], dtype: DType) -> Result<Tensor> {
    let Some(first) = samples.first() else {
        return config_err("empty image batch");
    };
    let (h, w) = (first.image_height, first.image_width);
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if s.image_height != h || s.image_width != w {
            return config_err("images in a batch must share a size");
        }
        data.extend_from_slice(&s.image);
    }
    Ok(Tensor::from_vec(data, (samples.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic_data::{generate_identity, render_sample, OcclusionSpec};

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder_channels: [4, 8, 8, 16],
            attention_mid_channels: 8,
            embed_dim: 8,
            ..ModelConfig::default()
        }
    }

    fn samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| render_sample(&generate_identity(1, i as u64), 0, &OcclusionSpec::none(), 0).unwrap())
            .collect()
    }

    #[test]
    fn forward_shapes() {
        let net = PartAttentionNet::new(&tiny(), 5, DType::F32, 0).unwrap();
        let s = samples(2);
        let refs: Vec<&Sample> = s.iter().collect();
        let out = net.forward(&net.image_batch(&refs).unwrap(), false).unwrap();
        assert_eq!(out.attention.0.dims(), &[2, 7, 16, 8]);
        assert_eq!(out.focused.pooled.dims(), &[2, 7, 8]);
        assert_eq!(out.part_logits.dims(), &[2, 6, 5]);
        let e = net.embeddings(&out, 0.5).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0].parts.len(), 6);
        assert_eq!(e[0].foreground.len(), 8);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let net = PartAttentionNet::new(&tiny(), 5, DType::F32, 0).unwrap();
        let s = samples(3);
        let refs: Vec<&Sample> = s.iter().collect();
        let (a, _) = net.infer(&refs, 0.5, 2).unwrap();
        let (b, _) = net.infer(&refs, 0.5, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variants_produce_expected_structure() {
        let s = samples(2);
        let refs: Vec<&Sample> = s.iter().collect();
        for v in Variant::ALL {
            let net = PartAttentionNet::new(&ModelConfig { variant: v, ..tiny() }, 3, DType::F32, 0).unwrap();
            let out = net.forward(&net.image_batch(&refs).unwrap(), false).unwrap();
            let e = net.embeddings(&out, 0.5).unwrap();
            match v {
                Variant::NoPartAttention => assert!(e.iter().all(|x| x.visibility.iter().all(|v| !v))),
                Variant::NoFocuser => assert!(e.iter().all(|x| x.parts.iter().all(|p| *p == x.foreground))),
                _ => {}
            }
        }
        assert_eq!(Variant::from_name("plain_triplet"), Some(Variant::PlainTriplet));
        assert_eq!(Variant::from_name("nope"), None);
    }
}

//! Fine-grained feature focuser: masks one shared whole-body feature map with
//! the foreground map and each part map, filters every masked map with a
//! gated convolution, and pools attention-weighted part embeddings.

use candle_core::Tensor;

use crate::error::{config_err, Result};
use crate::nn::{sigmoid, Conv2d, VarStore};
use crate::part_attention::{AttentionMaps, FeatureMap};

/// Guards the pooling denominator of parts with no attention mass.
pub const POOL_EPS: f64 = 1e-6;

/// Embeddings of one sample. Plain vectors, used for matching and reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct PartEmbeddings {
    pub foreground: Vec<f32>,
    pub parts: Vec<Vec<f32>>,
    pub visibility: Vec<bool>,
    pub identity_logits: Option<Vec<f32>>,
}

impl PartEmbeddings {
    pub fn n_parts(&self) -> usize {
        self.parts.len()
    }
}

/// Single-channel foreground map `sum_{x>=1} F_x`, `(N, 1, H, W)`.
pub fn foreground_map(f: &AttentionMaps) -> Result<Tensor> {
    let k = f.0.dim(1)?;
    Ok(f.0.narrow(1, 1, k - 1)?.sum_keepdim(1)?)
}

/// `P = K1 * F_i`, with the single-channel map broadcast over feature channels.
pub fn apply_attention(k1: &Tensor, f_i: &Tensor) -> Result<Tensor> {
    let (n, _, h, w) = k1.dims4()?;
    let (fn_, fc, fh, fw) = f_i.dims4()?;
    if (fn_, fc, fh, fw) != (n, 1, h, w) {
        return config_err(format!(
            "attention map {:?} does not match features {:?}",
            f_i.dims(),
            k1.dims()
        ));
    }
    Ok(k1.broadcast_mul(f_i)?)
}

/// Attention-weighted average pooling.
///
/// `q` is `(N, M, D, H, W)` and `masks` is `(N, M, H, W)`; the result is
/// `(N, M, D)` with `f_m = sum(F_m * Q_m) / max(sum F_m, eps)`.
pub fn pool_parts(q: &Tensor, masks: &Tensor) -> Result<Tensor> {
    let (n, m, _, h, w) = q.dims5()?;
    if masks.dims() != [n, m, h, w] {
        return config_err(format!("pool masks {:?} do not match {:?}", masks.dims(), q.dims()));
    }
    let weights = masks.unsqueeze(2)?;
    let num = q.broadcast_mul(&weights)?.sum((3, 4))?;
    let floor = Tensor::full(POOL_EPS, (n, m), q.device())?.to_dtype(q.dtype())?;
    let den = masks.sum((2, 3))?.maximum(&floor)?;
    Ok(num.broadcast_div(&den.unsqueeze(2)?)?)
}

/// Foreground and part embeddings from one forward pass.
#[derive(Debug, Clone)]
pub struct FocusedFeatures {
    /// `(N, X + 1, D)`: slot 0 is the foreground embedding, slots `1..` parts.
    pub pooled: Tensor,
}

impl FocusedFeatures {
    pub fn foreground(&self) -> Result<Tensor> {
        Ok(self.pooled.narrow(1, 0, 1)?.squeeze(1)?)
    }

    pub fn parts(&self) -> Result<Tensor> {
        let m = self.pooled.dim(1)?;
        Ok(self.pooled.narrow(1, 1, m - 1)?)
    }
}

#[derive(Debug, Clone)]
pub struct Focuser {
    embed: Conv2d,
    gate_feature: Conv2d,
    gate_mask: Conv2d,
}

impl Focuser {
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        in_channels: usize,
        embed_dim: usize,
        gate_kernel: usize,
    ) -> Result<Self> {
        if gate_kernel % 2 == 0 {
            return config_err("gated convolution kernel must be odd");
        }
        Ok(Self {
            embed: Conv2d::new(vs, &format!("{name}.embed"), in_channels, embed_dim, 1, 1, true)?,
            gate_feature: Conv2d::new(vs, &format!("{name}.gate_feature"), embed_dim, embed_dim, gate_kernel, 1, true)?,
            gate_mask: Conv2d::new(vs, &format!("{name}.gate_mask"), embed_dim, embed_dim, gate_kernel, 1, true)?,
        })
    }

    pub fn embed_conv(&self) -> &Conv2d {
        &self.embed
    }

    pub fn gate_feature_conv(&self) -> &Conv2d {
        &self.gate_feature
    }

    pub fn gate_mask_conv(&self) -> &Conv2d {
        &self.gate_mask
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.out_channels()
    }

    /// Whole-body representation `K1 = conv1x1(B)`.
    pub fn embed(&self, b: &FeatureMap) -> Result<Tensor> {
        self.embed.forward(&b.0)
    }

    /// `Q = conv_feat(P) * sigmoid(conv_gate(P))`.
    pub fn gated_filter(&self, p: &Tensor) -> Result<Tensor> {
        let feat = self.gate_feature.forward(p)?;
        let gate = sigmoid(&self.gate_mask.forward(p)?)?;
        Ok((feat * gate)?)
    }

    /// Masks `K1` with the foreground map and each part map, gates every
    /// masked map, then pools with the same maps.
    pub fn forward(&self, b: &FeatureMap, f: &AttentionMaps) -> Result<FocusedFeatures> {
        let k1 = self.embed(b)?;
        self.focus(&k1, f)
    }

    /// The focuser after the embedding convolution.
    pub fn focus(&self, k1: &Tensor, f: &AttentionMaps) -> Result<FocusedFeatures> {
        let (n, d, h, w) = k1.dims4()?;
        let k = f.0.dim(1)?;
        if f.0.dims() != [n, k, h, w] {
            return config_err(format!(
                "attention maps {:?} do not match embedding {:?}",
                f.0.dims(),
                k1.dims()
            ));
        }
        // slot 0 foreground, slots 1..=X the part maps
        let masks = Tensor::cat(&[&foreground_map(f)?, &f.0.narrow(1, 1, k - 1)?], 1)?;
        let p = k1.unsqueeze(1)?.broadcast_mul(&masks.unsqueeze(2)?)?;
        let q = self
            .gated_filter(&p.reshape((n * k, d, h, w))?)?
            .reshape((n, k, d, h, w))?;
        Ok(FocusedFeatures {
            pooled: pool_parts(&q, &masks)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t4(v: Vec<f64>, shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn set(var: &candle_core::Var, value: f64) {
        var.set(&(var.ones_like().unwrap() * value).unwrap()).unwrap();
    }

    #[test]
    fn foreground_is_complement_of_background() {
        // pixel 0: background 1.0; pixel 1: (0.1, 0.5, 0.4, 0, 0, 0, 0)
        let f = AttentionMaps(t4(
            vec![1.0, 0.1, 0.0, 0.5, 0.0, 0.4, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            (1, 7, 1, 2),
        ));
        let fg = foreground_map(&f).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(fg[0], 0.0);
        assert!((fg[1] - 0.9).abs() < 1e-12);

        let u = AttentionMaps::uniform(1, 6, 3, 2, DType::F64).unwrap();
        let fg = foreground_map(&u).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(fg.iter().all(|v| (v - 6.0 / 7.0).abs() < 1e-12));
    }

    #[test]
    fn embed_identity_and_zero() {
        let mut vs = VarStore::new(DType::F64, 0);
        let foc = Focuser::new(&mut vs, "f", 3, 3, 3).unwrap();
        let b = FeatureMap(Tensor::randn(0f64, 1.0, (1, 3, 4, 2), &Device::Cpu).unwrap());
        let eye = Tensor::eye(3, DType::F64, &Device::Cpu).unwrap().reshape((3, 3, 1, 1)).unwrap();
        foc.embed_conv().weight().set(&eye).unwrap();
        set(foc.embed_conv().bias().unwrap(), 0.0);
        let k1 = foc.embed(&b).unwrap();
        assert_eq!(
            k1.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            b.0.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        set(foc.embed_conv().weight(), 0.0);
        let k1 = foc.embed(&b).unwrap();
        assert!(k1.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn embed_output_shape() {
        let mut vs = VarStore::new(DType::F32, 0);
        let foc = Focuser::new(&mut vs, "f", 256, 128, 3).unwrap();
        let b = FeatureMap(Tensor::zeros((1, 256, 16, 8), DType::F32, &Device::Cpu).unwrap());
        assert_eq!(foc.embed(&b).unwrap().dims(), &[1, 128, 16, 8]);
        let wrong = FeatureMap(Tensor::zeros((1, 64, 16, 8), DType::F32, &Device::Cpu).unwrap());
        assert!(foc.embed(&wrong).is_err());
    }

    #[test]
    fn attention_application_examples() {
        let k1 = Tensor::full(2.0f64, (1, 4, 2, 2), &Device::Cpu).unwrap();
        let ones = Tensor::ones((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(
            apply_attention(&k1, &ones).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![2.0; 16]
        );
        let zeros = ones.zeros_like().unwrap();
        assert_eq!(
            apply_attention(&k1, &zeros).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            vec![0.0; 16]
        );
        let quarter = t4(vec![0.25, 1.0, 1.0, 1.0], (1, 1, 2, 2));
        let p = apply_attention(&k1, &quarter).unwrap();
        let at_p = p.narrow(2, 0, 1).unwrap().narrow(3, 0, 1).unwrap().flatten_all().unwrap();
        assert_eq!(at_p.to_vec1::<f64>().unwrap(), vec![0.5; 4]);
    }

    #[test]
    fn gate_saturation_and_zero_input() {
        let mut vs = VarStore::new(DType::F64, 0);
        let foc = Focuser::new(&mut vs, "f", 2, 2, 3).unwrap();
        let p = Tensor::randn(0f64, 1.0, (1, 2, 3, 3), &Device::Cpu).unwrap();
        set(foc.gate_mask_conv().weight(), 0.0);

        set(foc.gate_mask_conv().bias().unwrap(), 20.0);
        let open = foc.gated_filter(&p).unwrap();
        let feat = foc.gate_feature_conv().forward(&p).unwrap();
        let diff = (open - &feat).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        let scale = feat.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff <= scale * 1e-8);

        set(foc.gate_mask_conv().bias().unwrap(), -20.0);
        let closed = foc.gated_filter(&p).unwrap();
        assert!(closed.abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap() <= scale * 1e-8);

        // zero input: output is conv_feat bias * sigmoid(conv_gate bias) everywhere
        let bf = [0.3f64, -1.2];
        let bg = [0.5f64, -2.0];
        foc.gate_feature_conv().bias().unwrap().set(&Tensor::new(&bf, &Device::Cpu).unwrap()).unwrap();
        foc.gate_mask_conv().bias().unwrap().set(&Tensor::new(&bg, &Device::Cpu).unwrap()).unwrap();
        let q = foc.gated_filter(&p.zeros_like().unwrap()).unwrap();
        let q = q.reshape((2, 9)).unwrap().to_vec2::<f64>().unwrap();
        for c in 0..2 {
            let expected = bf[c] / (1.0 + (-bg[c]).exp());
            assert!(q[c].iter().all(|v| (v - expected).abs() < 1e-12));
        }
    }

    #[test]
    fn pooling_examples() {
        let q = Tensor::randn(0f64, 1.0, (1, 1, 3, 2, 2), &Device::Cpu).unwrap();
        // uniform weights: plain spatial mean
        let uniform = Tensor::full(0.3f64, (1, 1, 2, 2), &Device::Cpu).unwrap();
        let f = pool_parts(&q, &uniform).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let mean = q.mean((3, 4)).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in f.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        // point mass at pixel (1, 0)
        let point = t4(vec![0.0, 0.0, 0.7, 0.0], (1, 1, 2, 2));
        let f = pool_parts(&q, &point).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let at = q.narrow(3, 1, 1).unwrap().narrow(4, 0, 1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in f.iter().zip(&at) {
            assert!((a - b).abs() < 1e-12);
        }
        // empty part
        let zero = uniform.zeros_like().unwrap();
        let f = pool_parts(&q, &zero).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(f.iter().all(|v| *v == 0.0));
    }
}

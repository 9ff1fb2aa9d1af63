//! Minimal layer toolkit on top of `candle_core`: a named parameter store and
//! the handful of layers the network needs (conv, batch norm, linear).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{config_err, Result};

/// Batches smaller than this fall back to running statistics in batch norm.
pub const MIN_BATCH_FOR_BATCH_STATS: usize = 4;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Every element set to the given value.
    Constant(f64),
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// He/Kaiming normal for a ReLU layer with the given fan-in.
    Kaiming { fan_in: usize },
}

/// Owns every trainable tensor and every running-statistics buffer by name.
///
/// Names are kept in a `BTreeMap`, so iteration order (optimizer updates,
/// checkpoint layout) is stable across runs.
pub struct VarStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl VarStore {
    pub fn new(dtype: DType, init_seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(init_seed),
            params: BTreeMap::new(),
            buffers: BTreeMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.params.contains_key(name) {
            return config_err(format!("duplicate parameter name {name}"));
        }
        let t = self.init_tensor(shape, init)?;
        let var = Var::from_tensor(&t)?;
        self.params.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.buffers.contains_key(name) {
            return config_err(format!("duplicate buffer name {name}"));
        }
        let t = self.init_tensor(shape, init)?;
        let var = Var::from_tensor(&t)?;
        self.buffers.insert(name.to_string(), var.clone());
        Ok(var)
    }

    /// Convert an external tensor (e.g. `f32` images) to the store's dtype.
    pub fn cast(&self, t: &Tensor) -> Result<Tensor> {
        Ok(t.to_dtype(self.dtype)?)
    }

    fn init_tensor(&mut self, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Constant(v) => vec![v; n],
            Init::Normal(std) => self.normal(n, std),
            Init::Kaiming { fan_in } => self.normal(n, (2.0 / fan_in.max(1) as f64).sqrt()),
        };
        Ok(Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn normal(&mut self, n: usize, std: f64) -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
    in_channels: usize,
    out_channels: usize,
}

impl Conv2d {
    /// Square-kernel convolution with "same" padding for odd kernels.
    pub fn new(
        vs: &mut VarStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = vs.param(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            Init::Kaiming { fan_in },
        )?;
        let bias = if with_bias {
            Some(vs.param(&format!("{name}.bias"), &[out_channels], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
            in_channels,
            out_channels,
        })
    }

    pub fn weight(&self) -> &Var {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Var> {
        self.bias.as_ref()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    fn kernel(&self) -> usize {
        self.weight.dim(2).expect("4-d weight")
    }

    /// Convolution as im2col followed by one batched matmul. Unlike the
    /// built-in CPU convolution, its backward pass is matmuls and copies.
    fn conv(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let (k, s, p) = (self.kernel(), self.stride, self.padding);
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let weight = self.weight.as_tensor().reshape((self.out_channels, c * k * k))?;
        let cols = if k == 1 && s == 1 {
            x.reshape((n, c, h * w))?
        } else {
            // pad so every strided window slice has exactly s * ho rows and s * wo columns
            let hp = (k - 1 + s * ho).max(h + 2 * p);
            let wp = (k - 1 + s * wo).max(w + 2 * p);
            let xp = x
                .pad_with_zeros(2, p, hp - h - p)?
                .pad_with_zeros(3, p, wp - w - p)?;
            let mut slices = Vec::with_capacity(k * k);
            for ky in 0..k {
                for kx in 0..k {
                    let v = xp.narrow(2, ky, s * ho)?.narrow(3, kx, s * wo)?;
                    let v = if s == 1 {
                        v
                    } else {
                        v.reshape((n, c, ho, s, wo, s))?.narrow(3, 0, 1)?.narrow(5, 0, 1)?.reshape((n, c, ho, wo))?
                    };
                    slices.push(v);
                }
            }
            Tensor::stack(&slices, 2)?.reshape((n, c * k * k, ho * wo))?
        };
        Ok(weight.broadcast_matmul(&cols)?.reshape((n, self.out_channels, ho, wo))?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels {
            return config_err(format!(
                "convolution expects {} input channels, got {c}",
                self.in_channels
            ));
        }
        let y = self.conv(x)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, self.out_channels, 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(vs: &mut VarStore, name: &str, channels: usize) -> Result<Self> {
        Self::with_scale(vs, name, channels, 1.0)
    }

    /// Like [`BatchNorm2d::new`] with the affine scale initialised to `scale`.
    pub fn with_scale(vs: &mut VarStore, name: &str, channels: usize, scale: f64) -> Result<Self> {
        Ok(Self {
            gamma: vs.param(&format!("{name}.weight"), &[channels], Init::Constant(scale))?,
            beta: vs.param(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            running_mean: vs.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: vs.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?,
            channels,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    /// Batch statistics when `train` and the batch holds at least
    /// [`MIN_BATCH_FOR_BATCH_STATS`] samples; running averages otherwise.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let shape = (1, self.channels, 1, 1);
        let n = x.dim(0)?;
        let (mean, var) = if train && n >= MIN_BATCH_FOR_BATCH_STATS {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            self.update_running(&mean, &var, x.elem_count() / self.channels)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape(shape)?,
                self.running_var.as_tensor().reshape(shape)?,
            )
        };
        let inv_std = (var + self.eps)?.sqrt()?.recip()?;
        let normed = x.broadcast_sub(&mean)?.broadcast_mul(&inv_std)?;
        Ok(normed
            .broadcast_mul(&self.gamma.as_tensor().reshape(shape)?)?
            .broadcast_add(&self.beta.as_tensor().reshape(shape)?)?)
    }

    fn update_running(&self, mean: &Tensor, var: &Tensor, count: usize) -> Result<()> {
        let m = self.momentum;
        let unbiased = count as f64 / (count.max(2) - 1) as f64;
        let mean = mean.detach().flatten_all()?;
        let var = (var.detach().flatten_all()? * unbiased)?;
        let new_mean = ((self.running_mean.as_tensor().detach() * (1.0 - m))? + (mean * m)?)?;
        let new_var = ((self.running_var.as_tensor().detach() * (1.0 - m))? + (var * m)?)?;
        self.running_mean.set(&new_mean)?;
        self.running_var.set(&new_var)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Var,
    bias: Var,
    in_features: usize,
}

impl Linear {
    pub fn new(vs: &mut VarStore, name: &str, in_features: usize, out_features: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.param(
                &format!("{name}.weight"),
                &[out_features, in_features],
                Init::Normal(0.01),
            )?,
            bias: vs.param(&format!("{name}.bias"), &[out_features], Init::Zeros)?,
            in_features,
        })
    }

    /// Applies to the last dimension of `x`; leading dimensions are kept.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let Some((&last, lead)) = dims.split_last() else {
            return config_err("linear layer needs at least one dimension");
        };
        if last != self.in_features {
            return config_err(format!(
                "linear layer expects {} features, got {last}",
                self.in_features
            ));
        }
        let rows: usize = lead.iter().product();
        let flat = x.reshape((rows, last))?;
        let y = flat
            .matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?;
        let mut out_shape = lead.to_vec();
        out_shape.push(y.dim(1)?);
        Ok(y.reshape(out_shape)?)
    }
}

/// Softmax over dimension 1 (channels). The max shift is detached; softmax is
/// shift invariant so gradients are unaffected.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let shift = logits.max_keepdim(1)?.detach();
    let e = logits.broadcast_sub(&shift)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// Log-softmax over the last dimension.
pub fn log_softmax_last(logits: &Tensor) -> Result<Tensor> {
    let shift = logits.max_keepdim(D::Minus1)?.detach();
    let z = logits.broadcast_sub(&shift)?;
    let lse = z.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(z.broadcast_sub(&lse)?)
}

/// Logistic sigmoid via `tanh`, which stays finite (value and gradient) for
/// large-magnitude inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

/// Euclidean norm over the last dimension with a zero-safe gradient: the
/// value is exact, and at a zero vector the gradient is zero instead of NaN.
pub fn safe_norm_last(x: &Tensor) -> Result<Tensor> {
    let sq = x.sqr()?.sum(D::Minus1)?;
    let nonzero = sq.gt(0.0)?.to_dtype(sq.dtype())?;
    let floor = Tensor::full(1e-30f64, sq.shape(), sq.device())?.to_dtype(sq.dtype())?;
    Ok(sq.maximum(&floor)?.sqrt()?.mul(&nonzero)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[[[1.0f64]], [[-3.0]], [[200.0]]]], &Device::Cpu).unwrap();
        let s = softmax_channels(&x).unwrap();
        let total: f64 = s.sum_all().unwrap().to_scalar().unwrap();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let x = Var::new(&[-500.0f64, 0.0, 500.0], &Device::Cpu).unwrap();
        let y = sigmoid(x.as_tensor()).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![0.0, 0.5, 1.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert!((g[1] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn safe_norm_is_exact_and_zero_safe() {
        let x = Var::new(&[[3.0f64, 4.0], [0.0, 0.0]], &Device::Cpu).unwrap();
        let n = safe_norm_last(x.as_tensor()).unwrap();
        assert_eq!(n.to_vec1::<f64>().unwrap(), vec![5.0, 0.0]);
        let g = n.sum_all().unwrap().backward().unwrap();
        let g = g.get(x.as_tensor()).unwrap().to_vec2::<f64>().unwrap();
        // d|x|/dx = x / |x| away from zero, and exactly zero at the origin
        assert!((g[0][0] - 0.6).abs() < 1e-12 && (g[0][1] - 0.8).abs() < 1e-12, "{g:?}");
        assert_eq!(g[1], vec![0.0, 0.0]);
    }

    #[test]
    fn conv_matches_builtin_convolution() {
        // the library convolution is the oracle for values and gradients
        for (k, stride, h, w) in [(3, 1, 5, 4), (3, 2, 8, 6), (3, 2, 7, 5), (1, 1, 4, 3), (5, 1, 6, 6)] {
            let mut vs = VarStore::new(DType::F64, 3);
            let conv = Conv2d::new(&mut vs, "c", 3, 4, k, stride, false).unwrap();
            let mut x_vs = VarStore::new(DType::F64, 9);
            let x = x_vs.param("x", &[2, 3, h, w], Init::Normal(1.0)).unwrap();

            let ours = conv.forward(x.as_tensor()).unwrap();
            let lib = x.as_tensor().conv2d(conv.weight().as_tensor(), k / 2, stride, 1, 1).unwrap();
            assert_eq!(ours.dims(), lib.dims());
            let diff = (&ours - &lib).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
            assert!(diff < 1e-12, "forward k={k} s={stride}: {diff}");

            let probe = Tensor::randn(0f64, 1.0, ours.dims(), &Device::Cpu).unwrap();
            let g_ours = (&ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            let g_lib = (&lib * &probe).unwrap().sum_all().unwrap().backward().unwrap();
            for v in [x.as_tensor(), conv.weight().as_tensor()] {
                let a = g_ours.get(v).unwrap();
                let b = g_lib.get(v).unwrap();
                let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
                assert!(d < 1e-10, "gradient k={k} s={stride}: {d}");
            }
        }
    }

    #[test]
    fn batch_norm_small_batch_uses_running_stats() {
        let mut vs = VarStore::new(DType::F64, 0);
        let bn = BatchNorm2d::new(&mut vs, "bn", 2).unwrap();
        let x = Tensor::new(&[[[[5.0f64]], [[-2.0]]]], &Device::Cpu).unwrap();
        // running mean 0, var 1: output is x / sqrt(1 + eps)
        let y = bn.forward(&x, true).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let s = (1.0f64 + 1e-5).sqrt();
        assert!((y[0] - 5.0 / s).abs() < 1e-12 && (y[1] + 2.0 / s).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_training_normalizes_and_updates() {
        let mut vs = VarStore::new(DType::F64, 0);
        let bn = BatchNorm2d::new(&mut vs, "bn", 1).unwrap();
        let x = Tensor::new(&[1.0f64, 2.0, 3.0, 4.0], &Device::Cpu)
            .unwrap()
            .reshape((4, 1, 1, 1))
            .unwrap();
        let y = bn.forward(&x, true).unwrap();
        let mean: f64 = y.mean_all().unwrap().to_scalar().unwrap();
        assert!(mean.abs() < 1e-12);
        let rm = vs.buffers()["bn.running_mean"].as_tensor().to_vec1::<f64>().unwrap();
        assert!((rm[0] - 0.25).abs() < 1e-12);
    }
}

//! Parameter registry and the handful of layers the networks are built from.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Result};

/// Standard deviation of the Gaussian used for convolution weights.
pub const INIT_STD: f64 = 0.02;

/// Distribution of freshly drawn convolution weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WeightInit {
    /// Zero-mean Gaussian with the given standard deviation.
    Gaussian(f64),
    /// Zero-mean Gaussian with variance `2 / fan_in`.
    HeNormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub kind: ParamKind,
}

/// Named trainable tensors of one network, keyed by module path.
#[derive(Debug, Clone)]
pub struct ParamStore {
    params: Arc<Mutex<BTreeMap<String, Param>>>,
    prefix: String,
    device: Device,
}

impl ParamStore {
    pub fn new(device: &Device) -> Self {
        Self {
            params: Arc::default(),
            prefix: String::new(),
            device: device.clone(),
        }
    }

    /// A view that registers parameters under `prefix.name`.
    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Self {
            params: self.params.clone(),
            prefix,
            device: self.device.clone(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, BTreeMap<String, Param>> {
        self.params.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn register(&self, name: &str, shape: &[usize], kind: ParamKind) -> Result<Tensor> {
        let init = match kind {
            ParamKind::NormScale => Tensor::ones(shape, DType::F32, &self.device)?,
            _ => Tensor::zeros(shape, DType::F32, &self.device)?,
        };
        let var = Var::from_tensor(&init)?;
        let tensor = var.as_tensor().clone();
        let key = self.pp(name).prefix;
        self.lock().insert(key, Param { var, kind });
        Ok(tensor)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.lock().values().map(|p| p.var.clone()).collect()
    }

    pub fn named(&self) -> Vec<(String, Param)> {
        self.lock()
            .iter()
            .map(|(k, p)| (k.clone(), p.clone()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.lock().values().map(|p| p.var.elem_count()).sum()
    }

    /// Gaussian conv weights (σ = [`INIT_STD`]), zero biases and shifts, unit
    /// scales. Parameters are visited in key order so the draw sequence only
    /// depends on `rng`.
    pub fn reinitialize(&self, rng: &mut impl Rng) -> Result<()> {
        self.reinitialize_with(WeightInit::Gaussian(INIT_STD), rng)
    }

    pub fn reinitialize_with(&self, init: WeightInit, rng: &mut impl Rng) -> Result<()> {
        for param in self.lock().values() {
            let shape = param.var.shape().clone();
            let fresh = match param.kind {
                ParamKind::ConvWeight => {
                    let std = match init {
                        WeightInit::Gaussian(std) => std,
                        WeightInit::HeNormal => {
                            let fan_in: usize = shape.dims()[1..].iter().product();
                            (2.0 / fan_in as f64).sqrt()
                        }
                    };
                    let normal = Normal::new(0.0f32, std as f32)
                        .map_err(|e| crate::error::invalid(format!("init std {std}: {e}")))?;
                    let data: Vec<f32> = (0..shape.elem_count())
                        .map(|_| normal.sample(rng))
                        .collect();
                    Tensor::from_vec(data, shape, &self.device)?
                }
                ParamKind::NormScale => Tensor::ones(shape, DType::F32, &self.device)?,
                ParamKind::Bias | ParamKind::NormShift => {
                    Tensor::zeros(shape, DType::F32, &self.device)?
                }
            };
            param.var.set(&fresh)?;
        }
        Ok(())
    }

    /// Copies of all parameter values, for snapshots.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.lock()
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.var.as_tensor().copy()?)))
            .collect()
    }

    pub fn restore(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        let params = self.lock();
        for (name, param) in params.iter() {
            let value = values
                .get(name)
                .ok_or_else(|| crate::error::invalid(format!("snapshot lacks parameter {name}")))?;
            if value.dims() != param.var.dims() {
                return Err(dim_err(format!(
                    "parameter {name}: expected {:?}, got {:?}",
                    param.var.dims(),
                    value.dims()
                )));
            }
            param.var.set(&value.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &ParamStore,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = ps.register("weight", &[c_out, c_in, kernel, kernel], ParamKind::ConvWeight)?;
        let bias = if bias {
            Some(ps.register("bias", &[c_out], ParamKind::Bias)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

/// Stride-2 transposed convolution that exactly doubles height and width.
#[derive(Debug, Clone)]
pub struct UpConv2d {
    weight: Tensor,
}

impl UpConv2d {
    pub fn new(ps: &ParamStore, c_in: usize, c_out: usize) -> Result<Self> {
        let weight = ps.register("weight", &[c_in, c_out, 3, 3], ParamKind::ConvWeight)?;
        Ok(Self { weight })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.conv_transpose2d(&self.weight, 1, 1, 2, 1)?)
    }
}

/// Per-sample, per-channel normalization without learned affine terms.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let flat = x.reshape((b, c, h * w))?;
    let mean = flat.mean_keepdim(D::Minus1)?;
    let centered = flat.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let y = centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
    Ok(y.reshape((b, c, h, w))?)
}

/// Group normalization with a learned per-channel scale and shift.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    scale: Tensor,
    shift: Tensor,
}

impl GroupNorm {
    pub fn new(ps: &ParamStore, channels: usize) -> Result<Self> {
        let groups = (1..=4).rev().find(|g| channels % g == 0).unwrap_or(1);
        Ok(Self {
            groups,
            scale: ps.register("scale", &[channels], ParamKind::NormScale)?,
            shift: ps.register("shift", &[channels], ParamKind::NormShift)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let flat = x.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let mean = flat.mean_keepdim(D::Minus1)?;
        let centered = flat.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let y = centered
            .broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .reshape((b, c, h, w))?;
        let y = y.broadcast_mul(&self.scale.reshape((1, c, 1, 1))?)?;
        Ok(y.broadcast_add(&self.shift.reshape((1, c, 1, 1))?)?)
    }
}

/// Mirror padding of the two spatial dims, implemented with index selects so
/// it stays differentiable.
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (_, _, h, w) = x.dims4()?;
    if h <= pad || w <= pad {
        return Err(dim_err(format!(
            "cannot reflect-pad a {h}x{w} map by {pad}"
        )));
    }
    let index = |n: usize| -> Result<Tensor> {
        let ids: Vec<u32> = (0..n + 2 * pad)
            .map(|i| {
                let j = i as isize - pad as isize;
                let j = if j < 0 {
                    -j
                } else if j >= n as isize {
                    2 * (n as isize - 1) - j
                } else {
                    j
                };
                j as u32
            })
            .collect();
        Ok(Tensor::new(ids.as_slice(), x.device())?)
    };
    let x = x.index_select(&index(h)?, 2)?;
    Ok(x.index_select(&index(w)?, 3)?)
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(0.2, 0.0)?)?)
}

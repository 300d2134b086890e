//! Small convolutional building blocks on top of candle tensors.

pub mod conv;
pub mod models;
pub mod ops;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use conv::conv2d;
pub use ops::{bias_add, leaky_relu, relu};

/// Ordered, named parameters of one network.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    vars: Vec<Var>,
}

impl ParamSet {
    pub fn push(&mut self, name: String, var: Var) {
        self.names.push(name);
        self.vars.push(var);
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.names.iter().map(String::as_str).zip(&self.vars)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.vars.iter().map(|v| v.elem_count()).sum()
    }

    /// Every parameter flattened to `f64`, in registration order.
    pub fn flat_values(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.element_count());
        for v in &self.vars {
            out.extend(v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?);
        }
        Ok(out)
    }

    /// SHA-256 over names, shapes and raw little-endian values.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in self.iter() {
            h.update(name.as_bytes());
            h.update(format!("{:?}", v.dims()).as_bytes());
            for x in tensor_bits(v.as_tensor())? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Overwrites every parameter with the matching one from `other`.
    pub fn copy_from(&self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Checkpoint("parameter sets differ in layout".into()));
        }
        for (dst, src) in self.vars.iter().zip(&other.vars) {
            dst.set(src.as_tensor())?;
        }
        Ok(())
    }
}

/// Raw bit patterns of a tensor's values (f32 widened to u64 for hashing).
pub(crate) fn tensor_bits(t: &Tensor) -> Result<Vec<u64>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.into_iter().map(|v| v.to_bits() as u64).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.into_iter().map(f64::to_bits).collect(),
        other => return Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal scaled by `gain`.
    He { gain: f64 },
    Zero,
}

/// Deterministic parameter factory.
pub struct ParamBuilder {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    params: ParamSet,
    prefix: String,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: Device::Cpu,
            params: ParamSet::default(),
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn with_prefix(&mut self, prefix: &str) -> &mut Self {
        self.prefix = prefix.to_string();
        self
    }

    fn var(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> Result<Var> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zero => vec![0.0; n],
            Init::He { gain } => {
                let std = gain * (2.0 / fan_in as f64).sqrt();
                let dist = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..n).map(|_| dist.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.params.push(format!("{}{name}", self.prefix), var.clone());
        Ok(var)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize, init: Init) -> Result<Conv2d> {
        let weight = self.var(&format!("{name}.weight"), &[cout, cin, kernel, kernel], cin * kernel * kernel, init)?;
        let bias = self.var(&format!("{name}.bias"), &[cout], 1, Init::Zero)?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn finish(self) -> ParamSet {
        self.params
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.weight, self.stride, self.pad)?;
        Ok(bias_add(&y, &self.bias)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Nearest-neighbour 2x upsampling through reshape + broadcast (cheap backward).
pub fn upsample2(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

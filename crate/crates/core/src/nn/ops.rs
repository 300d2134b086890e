//! Fused elementwise ops with single-pass backward kernels.
//!
//! candle composes these from several generic kernels; on a single core the
//! intermediate tensors dominate the cost of small convolutional networks.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Result, Shape, Tensor, WithDType};

trait Float: WithDType + Copy + PartialOrd + std::ops::Mul<Output = Self> + std::ops::Add<Output = Self> {
    fn slice(s: &CpuStorage) -> Result<&[Self]>;
    fn storage(v: Vec<Self>) -> CpuStorage;
}

impl Float for f32 {
    fn slice(s: &CpuStorage) -> Result<&[f32]> {
        s.as_slice::<f32>()
    }

    fn storage(v: Vec<f32>) -> CpuStorage {
        CpuStorage::F32(v)
    }
}

impl Float for f64 {
    fn slice(s: &CpuStorage) -> Result<&[f64]> {
        s.as_slice::<f64>()
    }

    fn storage(v: Vec<f64>) -> CpuStorage {
        CpuStorage::F64(v)
    }
}

fn view<'a, T: Float>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&T::slice(s)?[a..b]),
        None => candle_core::bail!("fused op expects contiguous inputs"),
    }
}

macro_rules! dispatch {
    ($s:expr, $f:ident($($arg:expr),*)) => {
        match $s {
            CpuStorage::F32(_) => $f::<f32>($($arg),*),
            CpuStorage::F64(_) => $f::<f64>($($arg),*),
            _ => candle_core::bail!("fused ops support f32 and f64 only"),
        }
    };
}

/// `y = x` for `x > 0`, `slope * x` otherwise.
struct LeakyRelu(f64);

fn leaky_fwd<T: Float>(slope: f64, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
    let k = T::from_f64(slope);
    let zero = T::from_f64(0.0);
    let out = view::<T>(s, l)?.iter().map(|&v| if v > zero { v } else { v * k }).collect();
    Ok((T::storage(out), l.shape().clone()))
}

impl CustomOp1 for LeakyRelu {
    fn name(&self) -> &'static str {
        "leaky-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        dispatch!(s, leaky_fwd(self.0, s, l))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &LeakyReluGrad(self.0))?))
    }
}

/// `(x, dy) -> dy * (x > 0 ? 1 : slope)`.
struct LeakyReluGrad(f64);

fn leaky_bwd<T: Float>(slope: f64, xs: &CpuStorage, xl: &Layout, gs: &CpuStorage, gl: &Layout) -> Result<(CpuStorage, Shape)> {
    let k = T::from_f64(slope);
    let zero = T::from_f64(0.0);
    let x = view::<T>(xs, xl)?;
    let g = view::<T>(gs, gl)?;
    let out = x.iter().zip(g).map(|(&v, &d)| if v > zero { d } else { d * k }).collect();
    Ok((T::storage(out), xl.shape().clone()))
}

impl CustomOp2 for LeakyReluGrad {
    fn name(&self) -> &'static str {
        "leaky-relu-grad"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        dispatch!(s1, leaky_bwd(self.0, s1, l1, s2, l2))
    }
}

/// `N x C x H x W` plus a per-channel bias of length `C`.
struct BiasAdd;

fn bias_fwd<T: Float>(ys: &CpuStorage, yl: &Layout, bs: &CpuStorage, bl: &Layout) -> Result<(CpuStorage, Shape)> {
    let y = view::<T>(ys, yl)?;
    let b = view::<T>(bs, bl)?;
    let (n, c, h, w) = yl.shape().dims4()?;
    if b.len() != c {
        candle_core::bail!("bias of length {} for {c} channels", b.len());
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(y.len());
    for i in 0..n * c {
        let bias = b[i % c];
        out.extend(y[i * plane..(i + 1) * plane].iter().map(|&v| v + bias));
    }
    Ok((T::storage(out), yl.shape().clone()))
}

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        dispatch!(s1, bias_fwd(s1, l1, s2, l2))
    }

    fn bwd(&self, _y: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let db = if b.track_op() {
            Some(grad.contiguous()?.apply_op1_no_bwd(&ChannelSum)?)
        } else {
            None
        };
        Ok((Some(grad.clone()), db))
    }
}

/// `N x C x H x W -> C`, summing each channel in a fixed order.
struct ChannelSum;

fn channel_sum<T: Float>(s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
    let x = view::<T>(s, l)?;
    let (n, c, h, w) = l.shape().dims4()?;
    let plane = h * w;
    let mut out = vec![T::from_f64(0.0); c];
    for i in 0..n * c {
        let mut acc = T::from_f64(0.0);
        for &v in &x[i * plane..(i + 1) * plane] {
            acc = acc + v;
        }
        out[i % c] = out[i % c] + acc;
    }
    Ok((T::storage(out), Shape::from(c)))
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        dispatch!(s, channel_sum(s, l))
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op1(LeakyRelu(slope))
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    leaky_relu(x, 0.0)
}

pub fn bias_add(y: &Tensor, bias: &Tensor) -> Result<Tensor> {
    y.contiguous()?.apply_op2(&bias.contiguous()?, BiasAdd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn data(shape: (usize, usize, usize, usize)) -> Tensor {
        Tensor::arange(0f64, (shape.0 * shape.1 * shape.2 * shape.3) as f64, &Device::Cpu)
            .unwrap()
            .affine(0.37, -3.0)
            .unwrap()
            .sin()
            .unwrap()
            .reshape(shape)
            .unwrap()
    }

    #[test]
    fn leaky_relu_matches_composed_version() {
        let x = Var::from_tensor(&data((2, 3, 4, 5))).unwrap();
        let probe = data((2, 3, 4, 5)).affine(2.0, 0.1).unwrap();
        let ours = leaky_relu(&x, 0.2).unwrap();
        let reference = (x.relu().unwrap() - (x.neg().unwrap().relu().unwrap() * 0.2).unwrap()).unwrap();
        let a: Vec<f64> = ours.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f64> = reference.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
        let ga = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let ga: Vec<f64> = ga.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let gb: Vec<f64> = gb.get(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (p, q) in ga.iter().zip(&gb) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_add_matches_broadcast() {
        let y = Var::from_tensor(&data((2, 3, 4, 5))).unwrap();
        let b = Var::new(&[0.5f64, -1.0, 2.0], &Device::Cpu).unwrap();
        let probe = data((2, 3, 4, 5)).affine(-1.5, 0.3).unwrap();
        let ours = bias_add(&y, &b).unwrap();
        let reference = y.broadcast_add(&b.reshape((1, 3, 1, 1)).unwrap()).unwrap();
        assert_eq!(
            ours.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
            reference.flatten_all().unwrap().to_vec1::<f64>().unwrap()
        );
        let ga = (ours * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [y.as_tensor(), b.as_tensor()] {
            let p: Vec<f64> = ga.get(v).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            let q: Vec<f64> = gb.get(v).unwrap().flatten_all().unwrap().to_vec1().unwrap();
            for (s, t) in p.iter().zip(&q) {
                assert!((s - t).abs() < 1e-10);
            }
        }
    }
}

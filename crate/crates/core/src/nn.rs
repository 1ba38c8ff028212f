//! Parameter storage and the small set of differentiable layers the models use.
//!
//! Everything here is built from primitive tensor ops so that autodiff works in
//! both `f32` (training) and `f64` (gradient checks). Parameters are drawn from
//! a seeded ChaCha stream, never from a global RNG.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Additive bias applied to disallowed attention logits.
pub const MASK_BIAS: f64 = -1e9;

/// Named, ordered collection of trainable tensors.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    params: Vec<(String, Var)>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            params: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn add(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.params.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.params.push((name.to_string(), var));
        Ok(handle)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.add(name, vec![0.0; shape.iter().product()], shape)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.add(name, vec![1.0; shape.iter().product()], shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(&mut self.rng);
                std * v
            })
            .collect();
        self.add(name, values, shape)
    }

    /// Xavier-uniform weight of shape `(fan_out, fan_in)`.
    pub fn xavier(&mut self, name: &str, fan_out: usize, fan_in: usize) -> Result<Tensor> {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        self.add(name, values, &[fan_out, fan_in])
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Copies every tensor of `other` into the same-named parameter here.
    pub fn load_from(&self, other: &[(String, Tensor)]) -> Result<()> {
        if other.len() != self.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                other.len(),
                self.params.len()
            )));
        }
        for (name, var) in &self.params {
            let src = other
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if src.dims() != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    src.dims(),
                    var.dims()
                )));
            }
            var.set(&src.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }
}

/// `y = x Wᵀ + b` over the last dimension of `x`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.xavier(&format!("{name}.weight"), fan_out, fan_in)?;
        let bias = store.zeros(&format!("{name}.bias"), &[fan_out])?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    /// Weight and bias initialized to zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Result<Self> {
        let weight = store.zeros(&format!("{name}.weight"), &[fan_out, fan_in])?;
        let bias = store.zeros(&format!("{name}.bias"), &[fan_out])?;
        Ok(Self {
            weight,
            bias: Some(bias),
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let fan_in = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let flat = x.reshape((rows, fan_in))?;
        let mut y = flat.matmul(&self.weight.t()?)?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last dimension with learned scale and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: store.ones(&format!("{name}.weight"), &[dim])?,
            bias: store.zeros(&format!("{name}.bias"), &[dim])?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Two-layer perceptron with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Tensor of i.i.d. standard normals drawn from `rng`.
pub fn gaussian_tensor<R: Rng>(rng: &mut R, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n = shape.iter().product();
    let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Fails with [`Error::NonFinite`] if any element of `t` is NaN or infinite.
pub fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    let total = t.to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
    if total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn var_updates_are_visible_through_handles() {
        let mut store = ParamStore::new(DType::F64, 0);
        let w = store.zeros("w", &[2]).unwrap();
        let var = store.get("w").unwrap();
        var.set(&Tensor::new(&[1.0f64, 2.0], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(w.to_vec1::<f64>().unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn init_is_seeded() {
        let make = |seed| {
            let mut s = ParamStore::new(DType::F32, seed);
            s.xavier("w", 3, 4).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        };
        assert_eq!(make(7), make(7));
        assert_ne!(make(7), make(8));
        assert!(ParamStore::new(DType::F32, 0).zeros("a", &[1]).is_ok());
        let mut s = ParamStore::new(DType::F32, 0);
        s.zeros("a", &[1]).unwrap();
        assert!(s.zeros("a", &[1]).is_err());
    }

    #[test]
    fn layer_norm_normalizes() {
        let mut store = ParamStore::new(DType::F64, 0);
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = ln.forward(&x).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn linear_handles_batched_input() {
        let mut store = ParamStore::new(DType::F64, 1);
        let lin = Linear::new(&mut store, "l", 3, 5).unwrap();
        let x = gaussian_tensor(&mut ChaCha8Rng::seed_from_u64(0), &[2, 4, 3], DType::F64).unwrap();
        let y = lin.forward(&x).unwrap();
        assert_eq!(y.dims(), &[2, 4, 5]);
        let row = lin.forward(&x.get(1).unwrap().get(2).unwrap().unsqueeze(0).unwrap()).unwrap();
        let a = y.get(1).unwrap().get(2).unwrap().to_vec1::<f64>().unwrap();
        let b = row.squeeze(0).unwrap().to_vec1::<f64>().unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn finiteness_check() {
        let ok = Tensor::new(&[1.0f32, -2.0], &Device::Cpu).unwrap();
        assert!(ensure_finite(&ok, "x").is_ok());
        let bad = Tensor::new(&[1.0f32, f32::NAN], &Device::Cpu).unwrap();
        assert!(matches!(ensure_finite(&bad, "x"), Err(Error::NonFinite(_))));
    }
}

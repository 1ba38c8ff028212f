//! Per-token diffusion head: a small residual MLP that predicts the noise added
//! to a continuous token, conditioned on the backbone vector `z`.
//!
//! Training minimizes `‖ε − ε_θ(x_s, s, z)‖²` averaged over tokens; sampling runs
//! ancestral reverse diffusion over an evenly strided subset of the training
//! timesteps.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ensure_finite, gaussian_tensor, LayerNorm, Linear, ParamStore};

/// Variance schedule with `steps` timesteps indexed `1..=steps`; `ᾱ_0 = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas spaced linearly from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("a noise schedule needs at least one step".into()));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps)
                .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64)
                .collect()
        };
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidArgument("betas must lie strictly between 0 and 1".into()));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, &b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, s: usize) -> f64 {
        self.betas[s - 1]
    }

    pub fn alpha(&self, s: usize) -> f64 {
        1.0 - self.beta(s)
    }

    /// `ᾱ_s` for `s` in `0..=steps`.
    pub fn alpha_bar(&self, s: usize) -> f64 {
        if s == 0 {
            1.0
        } else {
            self.alpha_bars[s - 1]
        }
    }

    fn check_step(&self, s: usize) -> Result<()> {
        if s == 0 || s > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {s} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `count` timesteps evenly strided over `1..=steps`, ascending, ending at `steps`.
    pub fn strided_timesteps(&self, count: usize) -> Vec<usize> {
        let n = count.clamp(1, self.steps());
        let mut ts: Vec<usize> = (1..=n)
            .map(|i| ((i * self.steps()) as f64 / n as f64).round() as usize)
            .collect();
        ts.dedup();
        ts
    }

    /// Forward process for a batch: row `i` of `x0` is noised to step `steps[i]`.
    pub fn q_sample(&self, x0: &Tensor, steps: &[usize], noise: &Tensor) -> Result<Tensor> {
        let (m, _) = x0.dims2()?;
        if steps.len() != m || noise.dims() != x0.dims() {
            return Err(Error::Shape("q_sample inputs disagree in shape".into()));
        }
        for &s in steps {
            self.check_step(s)?;
        }
        let signal: Vec<f64> = steps.iter().map(|&s| self.alpha_bar(s).sqrt()).collect();
        let sigma: Vec<f64> = steps.iter().map(|&s| (1.0 - self.alpha_bar(s)).sqrt()).collect();
        let col = |v: Vec<f64>| -> Result<Tensor> {
            Ok(Tensor::from_vec(v, (m, 1), &Device::Cpu)?.to_dtype(x0.dtype())?)
        };
        Ok((x0.broadcast_mul(&col(signal)?)? + noise.broadcast_mul(&col(sigma)?)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub token_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub time_dim: usize,
}

impl DenoiserConfig {
    pub fn reference() -> Self {
        Self {
            token_dim: 48,
            cond_dim: 256,
            hidden: 512,
            blocks: 3,
            time_dim: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("token_dim", self.token_dim),
            ("cond_dim", self.cond_dim),
            ("hidden", self.hidden),
            ("blocks", self.blocks),
            ("time_dim", self.time_dim),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("denoiser.{name} must be at least 1")));
            }
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::Config("denoiser.time_dim must be even".into()));
        }
        Ok(())
    }
}

/// Schedule constants shared by training and sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    /// Independent noise draws per token in each loss evaluation.
    pub noise_repeats: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 100,
            noise_repeats: 4,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.train_steps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_steps == 0 || self.sample_steps == 0 || self.noise_repeats == 0 {
            return Err(Error::Config(
                "diffusion train_steps, sample_steps and noise_repeats must be at least 1".into(),
            ));
        }
        self.schedule().map(|_| ()).map_err(|e| Error::Config(e.to_string()))
    }
}

struct ResBlock {
    norm: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl ResBlock {
    fn forward(&self, h: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let inner = (self.norm.forward(h)? + cond)?;
        let inner = self.fc2.forward(&self.fc1.forward(&inner)?.silu()?)?;
        Ok((h + inner)?)
    }
}

/// Sinusoidal embedding of (possibly fractional) timesteps, `M × dim`.
pub fn timestep_embedding(steps: &[f64], dim: usize, dtype: DType) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let freqs = (0..half).map(|i| (-(10_000f64.ln()) * i as f64 / half as f64).exp());
        let (cos, sin): (Vec<f64>, Vec<f64>) = freqs.map(|f| ((t * f).cos(), (t * f).sin())).unzip();
        data.extend(cos);
        data.extend(sin);
    }
    Ok(Tensor::from_vec(data, (steps.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Noise-prediction network `ε_θ(x_s, s, z)`.
pub struct DiffusionHead {
    cfg: DenoiserConfig,
    diffusion: DiffusionConfig,
    schedule: NoiseSchedule,
    dtype: DType,
    in_proj: Linear,
    time_fc1: Linear,
    time_fc2: Linear,
    cond_proj: Linear,
    blocks: Vec<ResBlock>,
    final_norm: LayerNorm,
    out_proj: Linear,
}

impl DiffusionHead {
    pub fn new(cfg: &DenoiserConfig, diffusion: &DiffusionConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        diffusion.validate()?;
        let h = cfg.hidden;
        let blocks = (0..cfg.blocks)
            .map(|i| {
                let name = format!("head.block.{i}");
                Ok(ResBlock {
                    norm: LayerNorm::new(store, &format!("{name}.norm"), h)?,
                    fc1: Linear::new(store, &format!("{name}.fc1"), h, h)?,
                    fc2: Linear::new(store, &format!("{name}.fc2"), h, h)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            diffusion: diffusion.clone(),
            schedule: diffusion.schedule()?,
            dtype: store.dtype(),
            in_proj: Linear::new(store, "head.in_proj", cfg.token_dim, h)?,
            time_fc1: Linear::new(store, "head.time.fc1", cfg.time_dim, h)?,
            time_fc2: Linear::new(store, "head.time.fc2", h, h)?,
            cond_proj: Linear::new(store, "head.cond_proj", cfg.cond_dim, h)?,
            blocks,
            final_norm: LayerNorm::new(store, "head.final_norm", h)?,
            // zero output layer: the untrained head predicts ε = 0
            out_proj: Linear::zeroed(store, "head.out_proj", h, cfg.token_dim)?,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn diffusion(&self) -> &DiffusionConfig {
        &self.diffusion
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Predicted noise for noisy tokens `x_s` (`M × token_dim`) at `steps`, given `z` (`M × cond_dim`).
    pub fn predict_noise(&self, x_s: &Tensor, steps: &[usize], z: &Tensor) -> Result<Tensor> {
        let t: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
        let temb = timestep_embedding(&t, self.cfg.time_dim, self.dtype)?;
        let temb = self.time_fc2.forward(&self.time_fc1.forward(&temb)?.silu()?)?;
        let cond = (temb + self.cond_proj.forward(z)?)?;
        let mut h = self.in_proj.forward(x_s)?;
        for block in &self.blocks {
            h = block.forward(&h, &cond)?;
        }
        self.out_proj.forward(&self.final_norm.forward(&h)?.silu()?)
    }

    /// Loss with explicit timesteps and noise: mean over rows of `‖ε − ε_θ‖²`.
    pub fn loss_with(&self, x0: &Tensor, z: &Tensor, steps: &[usize], noise: &Tensor) -> Result<Tensor> {
        let (m, d) = x0.dims2()?;
        if m == 0 {
            return Err(Error::InvalidArgument("diffusion loss needs at least one token".into()));
        }
        if d != self.cfg.token_dim || z.dims2()? != (m, self.cfg.cond_dim) {
            return Err(Error::Shape(format!(
                "loss got x0 {:?} and z {:?}",
                x0.dims(),
                z.dims()
            )));
        }
        let x_s = self.schedule.q_sample(x0, steps, noise)?;
        let pred = self.predict_noise(&x_s, steps, z)?;
        Ok((noise - pred)?.sqr()?.sum(1)?.mean_all()?)
    }

    /// Diffusion loss with timesteps uniform in `1..=S` and standard-normal noise,
    /// each token repeated `noise_repeats` times.
    pub fn loss<R: Rng>(&self, x0: &Tensor, z: &Tensor, rng: &mut R) -> Result<Tensor> {
        let (m, d) = x0.dims2()?;
        if m == 0 {
            return Err(Error::InvalidArgument("diffusion loss needs at least one token".into()));
        }
        let r = self.diffusion.noise_repeats;
        let (x0, z) = if r > 1 {
            (x0.repeat((r, 1))?, z.repeat((r, 1))?)
        } else {
            (x0.clone(), z.clone())
        };
        let steps: Vec<usize> = (0..m * r).map(|_| rng.gen_range(1..=self.schedule.steps())).collect();
        let noise = gaussian_tensor(rng, &[m * r, d], self.dtype)?;
        self.loss_with(&x0.to_dtype(self.dtype)?, &z, &steps, &noise)
    }

    /// Ancestral sampling of one token per row of `z`. `temperature` scales the
    /// initial draw and every injected noise term; predicted clean tokens are
    /// clipped to [−1, 1].
    pub fn sample<R: Rng>(&self, z: &Tensor, temperature: f64, rng: &mut R) -> Result<Tensor> {
        if !(temperature.is_finite() && temperature >= 0.0) {
            return Err(Error::InvalidArgument(format!("invalid temperature {temperature}")));
        }
        let (m, _) = z.dims2()?;
        let d = self.cfg.token_dim;
        let dev = Device::Cpu;
        let scalar_col = |v: f64| -> Result<Tensor> { Ok(Tensor::new(v, &dev)?.to_dtype(self.dtype)?) };
        let timesteps = self.schedule.strided_timesteps(self.diffusion.sample_steps);
        let mut x = (gaussian_tensor(rng, &[m, d], self.dtype)? * temperature)?;
        for i in (0..timesteps.len()).rev() {
            let t = timesteps[i];
            let prev = if i == 0 { 0 } else { timesteps[i - 1] };
            let ab_t = self.schedule.alpha_bar(t);
            let ab_prev = self.schedule.alpha_bar(prev);
            let beta = 1.0 - ab_t / ab_prev;

            let eps = self.predict_noise(&x, &vec![t; m], z)?;
            let x0_hat = ((&x - (eps * (1.0 - ab_t).sqrt())?)? / ab_t.sqrt())?.clamp(-1.0, 1.0)?;
            let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
            let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
            let mean = ((x0_hat * c0)? + (&x * ct)?)?;
            x = if i == 0 {
                mean
            } else {
                let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
                let noise = gaussian_tensor(rng, &[m, d], self.dtype)?;
                mean.broadcast_add(&(noise.broadcast_mul(&scalar_col(var.sqrt() * temperature)?)?))?
            };
        }
        ensure_finite(&x, "sampled tokens")?;
        Ok(x)
    }
}

//! Masking plans, the training step and the K-step generation loop.
//!
//! Generation reveals an ordered partition `X¹ … Xᴷ` of the generated positions:
//! at step `k` the backbone sees every token revealed so far and the diffusion
//! head samples all of `Xᵏ` independently given their conditioning vectors.

use std::f64::consts::FRAC_PI_2;

use candle_core::{Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneOutput, SequenceBatch};
use crate::error::{Error, Result};
use crate::model::{Example, Model};
use crate::raster::Image;
use crate::tokenize::{encode_text, patchify, unpatchify, ImageTokenGrid};

/// Ordered partition of generated positions into prediction steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskingPlan {
    steps: Vec<Vec<usize>>,
}

impl MaskingPlan {
    /// Checks that `steps` partition `0..gen_len` into non-empty sets.
    pub fn new(steps: Vec<Vec<usize>>, gen_len: usize) -> Result<Self> {
        let mut seen = vec![false; gen_len];
        for step in &steps {
            if step.is_empty() {
                return Err(Error::InvalidArgument("masking plan has an empty step".into()));
            }
            for &p in step {
                if p >= gen_len || std::mem::replace(&mut seen[p], true) {
                    return Err(Error::InvalidArgument(format!(
                        "position {p} repeated or outside 0..{gen_len}"
                    )));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument("masking plan does not cover every position".into()));
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[Vec<usize>] {
        &self.steps
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.steps.iter().map(Vec::len).collect()
    }
}

/// Step sizes for `gen_len` tokens over `k` steps: step `i` (1-based) gets a
/// share proportional to `cos(π/2·(i−1)/k) − cos(π/2·i/k)`, rounded by largest
/// remainder, with every step holding at least one token.
pub fn cosine_step_sizes(gen_len: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > gen_len {
        return Err(Error::InvalidArgument(format!(
            "generation steps {k} must lie in 1..={gen_len}"
        )));
    }
    let shares: Vec<f64> = (1..=k)
        .map(|i| {
            let a = (FRAC_PI_2 * (i - 1) as f64 / k as f64).cos();
            let b = (FRAC_PI_2 * i as f64 / k as f64).cos();
            gen_len as f64 * (a - b)
        })
        .collect();
    let mut sizes: Vec<usize> = shares.iter().map(|s| s.floor() as usize).collect();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let fa = shares[a] - shares[a].floor();
        let fb = shares[b] - shares[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let assigned: usize = sizes.iter().sum();
    for &i in order.iter().take(gen_len - assigned) {
        sizes[i] += 1;
    }
    // lift empty steps by borrowing from the largest one
    while let Some(empty) = sizes.iter().position(|&s| s == 0) {
        let donor = (0..k).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))).unwrap();
        sizes[donor] -= 1;
        sizes[empty] += 1;
    }
    Ok(sizes)
}

/// Random order split by [`cosine_step_sizes`].
pub fn make_generation_plan<R: Rng>(gen_len: usize, k: usize, rng: &mut R) -> Result<MaskingPlan> {
    let sizes = cosine_step_sizes(gen_len, k)?;
    let mut order: Vec<usize> = (0..gen_len).collect();
    order.shuffle(rng);
    let mut steps = Vec::with_capacity(k);
    let mut start = 0;
    for size in sizes {
        steps.push(order[start..start + size].to_vec());
        start += size;
    }
    MaskingPlan::new(steps, gen_len)
}

/// Visibility flags for one training sample: a ratio `r ~ U[lo, hi]` is drawn
/// and `⌈r·G⌉` uniformly chosen positions (at least one) are hidden.
pub fn sample_training_mask<R: Rng>(gen_len: usize, bounds: (f64, f64), rng: &mut R) -> Result<Vec<bool>> {
    let (lo, hi) = bounds;
    if gen_len == 0 || !(0.0 < lo && lo <= hi && hi <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "bad training mask request: {gen_len} tokens, ratio bounds ({lo}, {hi})"
        )));
    }
    let ratio = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let hidden = ((ratio * gen_len as f64).ceil() as usize).clamp(1, gen_len);
    let mut order: Vec<usize> = (0..gen_len).collect();
    order.shuffle(rng);
    let mut visible = vec![true; gen_len];
    for &p in &order[..hidden] {
        visible[p] = false;
    }
    Ok(visible)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub steps: usize,
    pub mask_ratio_lo: f64,
    pub mask_ratio_hi: f64,
    pub condition_dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            steps: 20_000,
            mask_ratio_lo: 0.7,
            mask_ratio_hi: 1.0,
            condition_dropout: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(0.0 < self.mask_ratio_lo && self.mask_ratio_lo <= self.mask_ratio_hi && self.mask_ratio_hi <= 1.0) {
            return Err(Error::Config("train mask ratio bounds need 0 < lo <= hi <= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.condition_dropout) {
            return Err(Error::Config("train.condition_dropout must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn mask_bounds(&self) -> (f64, f64) {
        (self.mask_ratio_lo, self.mask_ratio_hi)
    }
}

/// Builds a backbone batch from examples with the given visibility.
pub fn assemble_batch(
    model: &Model,
    examples: &[&Example],
    visible: Vec<bool>,
    null_conditions: Vec<bool>,
) -> Result<SequenceBatch> {
    let cfg = model.config();
    let b = examples.len();
    let (t, c, g) = (cfg.text_len(), cfg.cond_len(), cfg.gen_len());
    let dev = Device::Cpu;
    let mut ids = Vec::with_capacity(b * t);
    let mut cond: Vec<f32> = Vec::with_capacity(b * c * cfg.cond_token_dim());
    let mut gen: Vec<f32> = Vec::with_capacity(b * g * cfg.token_dim());
    let mut null_cond = Vec::with_capacity(b);
    for (ex, &null) in examples.iter().zip(&null_conditions) {
        ids.extend(&ex.text_ids);
        match &ex.cond_tokens {
            Some(tokens) => {
                cond.extend(tokens);
                null_cond.push(null);
            }
            None => {
                cond.extend(std::iter::repeat(0.0).take(c * cfg.cond_token_dim()));
                null_cond.push(true);
            }
        }
        gen.extend(&ex.gen_tokens);
    }
    let dtype = model.dtype();
    let cond = Tensor::from_vec(cond, (b, c, cfg.cond_token_dim()), &dev)?.to_dtype(dtype)?;
    let gen = Tensor::from_vec(gen, (b, g, cfg.token_dim()), &dev)?.to_dtype(dtype)?;
    let null_text = examples
        .iter()
        .zip(&null_conditions)
        .map(|(ex, &null)| null || !ex.has_text)
        .collect();
    SequenceBatch::new(ids, cond, gen, visible, model.config().policy)?
        .with_null_conditions(null_text, null_cond)
}

/// Rows `b·G + j` of `z` (`B × G × W`) for every hidden `(b, j)`.
fn hidden_rows(visible: &[bool]) -> Vec<u32> {
    visible
        .iter()
        .enumerate()
        .filter(|(_, &v)| !v)
        .map(|(i, _)| i as u32)
        .collect()
}

/// Owns the optimizer state and the RNG stream of one training run.
pub struct Trainer {
    cfg: TrainConfig,
    optimizer: AdamW,
    rng: ChaCha8Rng,
    step: usize,
}

impl Trainer {
    pub fn new(model: &Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let optimizer = AdamW::new(
            model.store().vars(),
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            optimizer,
            rng,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Draws a batch uniformly (with replacement) from `data` and trains on it.
    pub fn train_step(&mut self, model: &Model, data: &[Example]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let batch: Vec<&Example> = (0..self.cfg.batch_size)
            .map(|_| &data[self.rng.gen_range(0..data.len())])
            .collect();
        self.train_on(model, &batch)
    }

    /// One optimizer update on exactly these examples.
    pub fn train_on(&mut self, model: &Model, examples: &[&Example]) -> Result<f64> {
        let g = model.config().gen_len();
        let mut visible = Vec::with_capacity(examples.len() * g);
        for _ in examples {
            visible.extend(sample_training_mask(g, self.cfg.mask_bounds(), &mut self.rng)?);
        }
        let dropped: Vec<bool> = examples
            .iter()
            .map(|_| self.rng.gen_bool(self.cfg.condition_dropout))
            .collect();
        let batch = assemble_batch(model, examples, visible, dropped)?;
        let loss = training_loss(model, &batch, &mut self.rng)?;
        let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
        }
        self.optimizer.backward_step(&loss)?;
        self.step += 1;
        Ok(value)
    }
}

/// Diffusion loss over the hidden generated positions of `batch`.
pub fn training_loss<R: Rng>(model: &Model, batch: &SequenceBatch, rng: &mut R) -> Result<Tensor> {
    let z = model.backbone().forward(batch)?;
    let (b, g, w) = z.dims3()?;
    let rows = hidden_rows(&batch.visible);
    if rows.is_empty() {
        return Err(Error::InvalidArgument("no hidden positions to train on".into()));
    }
    let idx = Tensor::from_slice(&rows, rows.len(), &Device::Cpu)?;
    let z_h = z.reshape((b * g, w))?.index_select(&idx, 0)?;
    let d = model.config().token_dim();
    let x0 = batch
        .gen_tokens
        .reshape((b * g, d))?
        .index_select(&idx, 0)?
        .to_dtype(model.dtype())?;
    model.head().loss(&x0, &z_h, rng)
}

/// Sampling knobs for [`generate`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateOptions {
    pub steps: usize,
    pub temperature: f64,
    pub guidance_scale: f64,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            steps: 8,
            temperature: 1.0,
            guidance_scale: 1.0,
        }
    }
}

/// Conditions of one generation request. `None` selects the null embedding.
#[derive(Debug, Clone, Default)]
pub struct Conditions {
    pub text: Option<String>,
    pub image: Option<Image>,
}

impl Conditions {
    pub fn new(text: Option<&str>, image: Option<Image>) -> Self {
        Self {
            text: text.map(str::to_string),
            image,
        }
    }

    /// Tokenized form with all generated tokens zeroed.
    pub fn to_example(&self, model: &Model) -> Result<Example> {
        let cfg = model.config();
        let text_ids = match &self.text {
            Some(text) => encode_text(text, model.vocab(), cfg.text_len())?.ids,
            None => vec![0; cfg.text_len()],
        };
        let cond_tokens = match &self.image {
            Some(img) => {
                let spec = &cfg.image;
                if (img.height, img.width, img.channels) != (spec.height, spec.width, spec.cond_channels) {
                    return Err(Error::Shape(format!(
                        "condition image is {}x{}x{}, model expects {}x{}x{}",
                        img.height, img.width, img.channels, spec.height, spec.width, spec.cond_channels
                    )));
                }
                Some(patchify(img, spec.patch_size)?.tokens)
            }
            None => None,
        };
        Ok(Example {
            text_ids,
            has_text: self.text.is_some(),
            cond_tokens,
            gen_tokens: vec![0.0; cfg.gen_len() * cfg.token_dim()],
        })
    }
}

/// Generates one image per request, sharing a single masking plan across the batch.
pub fn generate<R: Rng>(
    model: &Model,
    requests: &[Conditions],
    opts: &GenerateOptions,
    rng: &mut R,
) -> Result<Vec<Image>> {
    generate_observed(model, requests, opts, rng, |_, _| {})
}

/// [`generate`] with a callback receiving each step's conditional backbone output.
pub fn generate_observed<R: Rng>(
    model: &Model,
    requests: &[Conditions],
    opts: &GenerateOptions,
    rng: &mut R,
    mut observe: impl FnMut(usize, &BackboneOutput),
) -> Result<Vec<Image>> {
    if requests.is_empty() {
        return Ok(Vec::new());
    }
    let cfg = model.config();
    let (g, d, w) = (cfg.gen_len(), cfg.token_dim(), cfg.backbone.width);
    let b = requests.len();
    let mut examples: Vec<Example> = requests.iter().map(|r| r.to_example(model)).collect::<Result<_>>()?;
    let plan = make_generation_plan(g, opts.steps, rng)?;
    let mut visible = vec![false; b * g];
    let guided = opts.guidance_scale != 1.0;

    for (k, positions) in plan.steps().iter().enumerate() {
        let refs: Vec<&Example> = examples.iter().collect();
        let batch = assemble_batch(model, &refs, visible.clone(), vec![false; b])?;
        let out = model.backbone().forward_full(&batch)?;
        observe(k, &out);
        let mut z = out.z;
        if guided {
            let null = assemble_batch(model, &refs, visible.clone(), vec![true; b])?;
            let z_null = model.backbone().forward(&null)?;
            z = (&z_null + ((z - &z_null)? * opts.guidance_scale)?)?;
        }
        let rows: Vec<u32> = (0..b)
            .flat_map(|i| positions.iter().map(move |&p| (i * g + p) as u32))
            .collect();
        let idx = Tensor::from_slice(&rows, rows.len(), &Device::Cpu)?;
        let z_k = z.reshape((b * g, w))?.index_select(&idx, 0)?;
        let tokens = model
            .head()
            .sample(&z_k, opts.temperature, rng)?
            .to_dtype(candle_core::DType::F32)?
            .to_vec2::<f32>()?;
        for (&row, token) in rows.iter().zip(tokens) {
            let (i, p) = (row as usize / g, row as usize % g);
            examples[i].gen_tokens[p * d..(p + 1) * d].copy_from_slice(&token);
            visible[row as usize] = true;
        }
    }

    let spec = &cfg.image;
    examples
        .into_iter()
        .map(|ex| {
            let grid = ImageTokenGrid::from_tokens(
                ex.gen_tokens,
                spec.height / spec.patch_size,
                spec.width / spec.patch_size,
                spec.patch_size,
                spec.channels,
            )?;
            Ok(unpatchify(&grid))
        })
        .collect()
}

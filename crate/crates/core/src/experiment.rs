//! Training driver and the measurements reported by `train` and `ablate`.

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, SequenceBatch};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::marloop::{generate, Conditions, GenerateOptions, Trainer};
use crate::model::Model;
use crate::nn::gaussian_tensor;
use crate::seqmask::AttentionPolicy;
use crate::synthdata::{classes, load_dataset, make_dataset, make_sample, probe_classify, Sample};
use crate::tokenize::TextVocab;

/// Training samples described by the `[data]` section.
pub fn load_training_data(cfg: &RunConfig) -> Result<Vec<Sample>> {
    match &cfg.data.dir {
        Some(dir) => load_dataset(dir),
        None => make_dataset(cfg.data.size, cfg.data.seed, cfg.data.jitter()),
    }
}

/// Vocabulary covering every caption in `samples`.
pub fn vocab_for(samples: &[Sample]) -> TextVocab {
    TextVocab::from_captions(samples.iter().map(|s| s.caption.as_str()))
}

/// Trailing moving average with the given window.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(losses.len());
    let mut acc = 0.0;
    for (i, &l) in losses.iter().enumerate() {
        acc += l;
        if i >= window {
            acc -= losses[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Trains a fresh model per `cfg`; `on_step(step, loss)` sees every update
/// (1-based step) and may abort the run by returning an error. With
/// `train.time_budget_secs` set, training ends after the first step that
/// exhausts the budget, so fewer than `train.steps` losses may come back.
pub fn train_model(
    cfg: &RunConfig,
    samples: &[Sample],
    policy: Option<AttentionPolicy>,
    mut on_step: impl FnMut(usize, f64, &Model) -> Result<()>,
) -> Result<(Model, Vec<f64>)> {
    let vocab = vocab_for(samples);
    let model_cfg = cfg.model_config(&vocab, policy)?;
    let model = Model::new(model_cfg, DType::F32, cfg.model.init_seed)?;
    let examples = model.examples(samples)?;
    let train_cfg = cfg.train.train_config();
    let mut trainer = Trainer::new(&model, train_cfg.clone())?;
    let mut losses = Vec::with_capacity(train_cfg.steps);
    let start = Instant::now();
    for step in 1..=train_cfg.steps {
        let loss = trainer.train_step(&model, &examples)?;
        losses.push(loss);
        on_step(step, loss, &model)?;
        if cfg.train.time_budget_secs.is_some_and(|b| start.elapsed().as_secs_f64() >= b) {
            break;
        }
    }
    Ok((model, losses))
}

/// Outcome of scoring generated images with the probe.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeScore {
    pub total: usize,
    /// Images whose color and shape both match the requested class.
    pub hits: usize,
}

impl ProbeScore {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.hits as f64 / self.total as f64
        }
    }
}

/// Generates `n` images with classes cycling over all nine pairs and scores
/// them against the requested class. Condition images come from fresh
/// jittered renderings; with `null_conditions` both conditions are omitted
/// and the score measures how often the model lands on the class by chance.
pub fn probe_accuracy(
    model: &Model,
    n: usize,
    opts: &GenerateOptions,
    seed: u64,
    null_conditions: bool,
) -> Result<ProbeScore> {
    const CHUNK: usize = 50;
    let mut cond_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gen_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let classes = classes();
    let jitter = crate::synthdata::Jitter::default();
    let mut wanted = Vec::with_capacity(n);
    let mut requests = Vec::with_capacity(n);
    for i in 0..n {
        let (color, shape) = classes[i % classes.len()];
        let reference = make_sample(color, shape, jitter, &mut cond_rng)?;
        wanted.push((color, shape));
        requests.push(if null_conditions {
            Conditions::default()
        } else {
            Conditions::new(Some(&reference.caption), Some(reference.cond))
        });
    }
    let mut hits = 0;
    for (reqs, targets) in requests.chunks(CHUNK).zip(wanted.chunks(CHUNK)) {
        let images = generate(model, reqs, opts, &mut gen_rng)?;
        for (img, &(color, shape)) in images.iter().zip(targets) {
            if probe_classify(img)?.matches(color, shape) {
                hits += 1;
            }
        }
    }
    Ok(ProbeScore { total: n, hits })
}

/// Generated-token tensor tracked for gradients, plus the batch built on it
/// with every generated position visible.
pub fn gradient_probe_batch(model: &Model, sample: &Sample) -> Result<(Var, SequenceBatch)> {
    let ex = model.examples(std::slice::from_ref(sample))?.remove(0);
    let cfg = model.config();
    let (t, c, g, d) = (cfg.text_len(), cfg.cond_len(), cfg.gen_len(), cfg.token_dim());
    let gen = Var::from_tensor(&Tensor::from_vec(ex.gen_tokens, (1, g, d), &Device::Cpu)?.to_dtype(model.dtype())?)?;
    let cond_dim = cfg.cond_token_dim();
    let cond_values = ex.cond_tokens.clone().unwrap_or_else(|| vec![0.0; c * cond_dim]);
    let cond = Tensor::from_vec(cond_values, (1, c, cond_dim), &Device::Cpu)?.to_dtype(model.dtype())?;
    let batch = SequenceBatch::new(ex.text_ids, cond, gen.as_tensor().clone(), vec![true; g], cfg.policy)?;
    debug_assert_eq!(batch.layout.cond_len(), t + c);
    Ok((gen, batch))
}

/// All outputs that belong to condition positions: final decoder states and,
/// when present, encoder states, flattened to one vector per batch.
fn condition_outputs(backbone: &Backbone, batch: &SequenceBatch) -> Result<Tensor> {
    let cond_len = batch.layout.cond_len();
    let out = backbone.forward_full(batch)?;
    let b = batch.batch_size();
    let mut parts = vec![out.hidden.narrow(1, 0, cond_len)?.reshape((b, ()))?];
    if let Some(enc) = out.encoder_cond {
        parts.push(enc.reshape((b, ()))?);
    }
    Ok(Tensor::cat(&parts, 1)?)
}

/// Largest `|∂(rᵀ h_cond)/∂x_gen|` over `projections` random directions `r`.
/// Exactly zero whenever no attention path leads from generated to condition
/// positions.
pub fn condition_leakage(model: &Model, sample: &Sample, projections: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (gen, batch) = gradient_probe_batch(model, sample)?;
    let outputs = condition_outputs(model.backbone(), &batch)?;
    let mut worst = 0.0f64;
    for _ in 0..projections {
        let r = gaussian_tensor(&mut rng, outputs.dims(), model.dtype())?;
        let scalar = (&outputs * &r)?.sum_all()?;
        let grads = scalar.backward()?;
        let g = match grads.get(gen.as_tensor()) {
            Some(g) => g.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?,
            None => 0.0,
        };
        worst = worst.max(g);
    }
    if !worst.is_finite() {
        return Err(Error::NonFinite("leakage gradient".into()));
    }
    Ok(worst)
}

/// Exact `max |∂ output / ∂ input|` over every (condition output, generated
/// input) pair, one backward pass per output scalar. Intended for small f64
/// backbones.
pub fn exact_condition_leakage(backbone: &Backbone, batch: &SequenceBatch, gen: &Var) -> Result<f64> {
    let outputs = condition_outputs(backbone, batch)?.flatten_all()?;
    let mut worst = 0.0f64;
    for i in 0..outputs.dim(0)? {
        let grads = outputs.get(i)?.backward()?;
        if let Some(g) = grads.get(gen.as_tensor()) {
            let m = g.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            worst = worst.max(m);
        }
    }
    Ok(worst)
}

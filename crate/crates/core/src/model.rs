//! The complete generator: backbone, diffusion head and the fixed data geometry.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::diffhead::{DenoiserConfig, DiffusionConfig, DiffusionHead};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::seqmask::{AttentionPolicy, SegmentLayout};
use crate::tokenize::{encode_text, patchify, TextVocab};
use crate::synthdata::Sample;

/// Geometry of target and condition images and of the caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImageSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Channels of the condition image; 0 disables the image-condition segment.
    pub cond_channels: usize,
    pub patch_size: usize,
    pub max_text_len: usize,
}

impl Default for ImageSpec {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 3,
            cond_channels: 1,
            patch_size: 4,
            max_text_len: 4,
        }
    }
}

impl ImageSpec {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_size;
        if p == 0 || self.height == 0 || self.width == 0 || self.height % p != 0 || self.width % p != 0 {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {p}-pixel patches",
                self.height, self.width
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("image.channels must be at least 1".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }
}

/// Everything needed to rebuild a model; echoed into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image: ImageSpec,
    pub vocab: Vec<String>,
    pub policy: AttentionPolicy,
    pub backbone: BackboneConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionConfig,
}

/// Sizes of the network proper; the data-dependent dimensions are derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkShape {
    pub width: usize,
    pub depth_enc: usize,
    pub depth_dec: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub head_hidden: usize,
    pub head_blocks: usize,
    pub time_dim: usize,
}

impl NetworkShape {
    /// Width 256, 4 heads, 4+4 layers; head of 3 blocks with 512 hidden units.
    pub fn reference() -> Self {
        Self {
            width: 256,
            depth_enc: 4,
            depth_dec: 4,
            heads: 4,
            mlp_ratio: 4,
            head_hidden: 512,
            head_blocks: 3,
            time_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn new(
        image: ImageSpec,
        vocab: &TextVocab,
        policy: AttentionPolicy,
        shape: NetworkShape,
        diffusion: DiffusionConfig,
    ) -> Result<Self> {
        image.validate()?;
        let p2 = image.patch_size * image.patch_size;
        let n = image.num_patches();
        let cond_len = if image.cond_channels > 0 { n } else { 0 };
        let backbone = BackboneConfig {
            width: shape.width,
            depth_enc: shape.depth_enc,
            depth_dec: shape.depth_dec,
            heads: shape.heads,
            token_dim: p2 * image.channels,
            cond_token_dim: (p2 * image.cond_channels).max(1),
            text_vocab_size: vocab.size(),
            max_text_len: image.max_text_len,
            max_cond_len: cond_len,
            max_gen_len: n,
            mlp_ratio: shape.mlp_ratio,
        };
        let denoiser = DenoiserConfig {
            token_dim: backbone.token_dim,
            cond_dim: shape.width,
            hidden: shape.head_hidden,
            blocks: shape.head_blocks,
            time_dim: shape.time_dim,
        };
        let cfg = Self {
            image,
            vocab: vocab.words().to_vec(),
            policy,
            backbone,
            denoiser,
            diffusion,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reference network on the default 16×16 geometry.
    pub fn reference(vocab: &TextVocab) -> Result<Self> {
        Self::new(
            ImageSpec::default(),
            vocab,
            AttentionPolicy::PAPER_DEFAULT,
            NetworkShape::reference(),
            DiffusionConfig::default(),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        self.backbone.validate()?;
        self.denoiser.validate()?;
        self.diffusion.validate()?;
        let p2 = self.image.patch_size * self.image.patch_size;
        let checks = [
            ("backbone.token_dim", self.backbone.token_dim, p2 * self.image.channels),
            ("backbone.max_gen_len", self.backbone.max_gen_len, self.image.num_patches()),
            ("backbone.max_cond_len", self.backbone.max_cond_len, self.cond_len()),
            ("backbone.max_text_len", self.backbone.max_text_len, self.image.max_text_len),
            ("backbone.text_vocab_size", self.backbone.text_vocab_size, self.vocab.len() + 2),
            ("denoiser.token_dim", self.denoiser.token_dim, self.backbone.token_dim),
            ("denoiser.cond_dim", self.denoiser.cond_dim, self.backbone.width),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Config(format!("{name} is {got}, geometry requires {want}")));
            }
        }
        if self.cond_len() > 0 && self.backbone.cond_token_dim != p2 * self.image.cond_channels {
            return Err(Error::Config("backbone.cond_token_dim disagrees with the image geometry".into()));
        }
        Ok(())
    }

    pub fn text_len(&self) -> usize {
        self.image.max_text_len
    }

    pub fn cond_len(&self) -> usize {
        if self.image.cond_channels > 0 {
            self.image.num_patches()
        } else {
            0
        }
    }

    pub fn gen_len(&self) -> usize {
        self.image.num_patches()
    }

    pub fn token_dim(&self) -> usize {
        self.backbone.token_dim
    }

    pub fn cond_token_dim(&self) -> usize {
        self.backbone.cond_token_dim
    }

    pub fn layout(&self) -> SegmentLayout {
        SegmentLayout::new(self.text_len(), self.cond_len(), self.gen_len())
            .expect("image geometry always has generated tokens")
    }
}

/// Tokenized training or generation example.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub text_ids: Vec<u32>,
    /// False when the caption is absent and the null text embedding applies.
    pub has_text: bool,
    /// `None` selects the null image-condition embedding.
    pub cond_tokens: Option<Vec<f32>>,
    pub gen_tokens: Vec<f32>,
}

impl Example {
    pub fn from_sample(cfg: &ModelConfig, vocab: &TextVocab, sample: &Sample) -> Result<Self> {
        let text_ids = encode_text(&sample.caption, vocab, cfg.text_len())?.ids;
        let gen_tokens = patchify(&sample.target, cfg.image.patch_size)?.tokens;
        if gen_tokens.len() != cfg.gen_len() * cfg.token_dim() {
            return Err(Error::Shape("target image does not match the model geometry".into()));
        }
        let cond_tokens = if cfg.cond_len() > 0 {
            let tokens = patchify(&sample.cond, cfg.image.patch_size)?.tokens;
            if tokens.len() != cfg.cond_len() * cfg.cond_token_dim() {
                return Err(Error::Shape("condition image does not match the model geometry".into()));
            }
            Some(tokens)
        } else {
            None
        };
        Ok(Self {
            text_ids,
            has_text: true,
            cond_tokens,
            gen_tokens,
        })
    }
}

pub struct Model {
    cfg: ModelConfig,
    vocab: TextVocab,
    store: ParamStore,
    backbone: Backbone,
    head: DiffusionHead,
}

impl Model {
    pub fn new(cfg: ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = TextVocab::from_words(&cfg.vocab)?;
        let mut store = ParamStore::new(dtype, seed);
        let backbone = Backbone::new(&cfg.backbone, &mut store)?;
        let head = DiffusionHead::new(&cfg.denoiser, &cfg.diffusion, &mut store)?;
        Ok(Self {
            cfg,
            vocab,
            store,
            backbone,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &TextVocab {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &DiffusionHead {
        &self.head
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn examples(&self, samples: &[Sample]) -> Result<Vec<Example>> {
        samples
            .iter()
            .map(|s| Example::from_sample(&self.cfg, &self.vocab, s))
            .collect()
    }
}

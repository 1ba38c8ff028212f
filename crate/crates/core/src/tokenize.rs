//! Continuous image tokens (raw patches) and a toy word-level text vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Image;

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
const FIRST_WORD_ID: u32 = 2;

/// Word → id map. Ids 0 (padding) and 1 (unknown) are reserved.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TextVocab {
    words: Vec<String>,
    ids: HashMap<String, u32>,
}

impl TextVocab {
    /// Builds a vocabulary from captions; words get ids in order of first use.
    pub fn from_captions<'a>(captions: impl IntoIterator<Item = &'a str>) -> Self {
        let mut vocab = TextVocab::default();
        for caption in captions {
            for word in split_words(caption) {
                vocab.insert(&word);
            }
        }
        vocab
    }

    pub fn from_words<S: AsRef<str>>(words: &[S]) -> Result<Self> {
        let mut vocab = TextVocab::default();
        for w in words {
            let w = w.as_ref().trim().to_lowercase();
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::InvalidArgument(format!("invalid vocabulary word `{w}`")));
            }
            if vocab.ids.contains_key(&w) {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary word `{w}`")));
            }
            vocab.insert(&w);
        }
        Ok(vocab)
    }

    fn insert(&mut self, word: &str) {
        if !self.ids.contains_key(word) {
            let id = FIRST_WORD_ID + self.words.len() as u32;
            self.ids.insert(word.to_string(), id);
            self.words.push(word.to_string());
        }
    }

    /// Number of ids, reserved ids included.
    pub fn size(&self) -> usize {
        self.words.len() + FIRST_WORD_ID as usize
    }

    pub fn id(&self, word: &str) -> u32 {
        self.ids.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        id.checked_sub(FIRST_WORD_ID)
            .and_then(|i| self.words.get(i as usize))
            .map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One word per line; the first line has id 2.
    pub fn to_file_string(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let words: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        Self::from_words(&words)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_file_string()).map_err(|e| Error::path(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Self::parse(&text)
    }
}

fn split_words(caption: &str) -> impl Iterator<Item = String> + '_ {
    caption.split_whitespace().map(str::to_lowercase)
}

/// Fixed-length id sequence plus the number of real (non-padding) ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedText {
    pub ids: Vec<u32>,
    pub len: usize,
}

/// Lowercased whitespace tokenization, padded or truncated to `max_len`.
pub fn encode_text(caption: &str, vocab: &TextVocab, max_len: usize) -> Result<EncodedText> {
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be at least 1".into()));
    }
    let mut ids: Vec<u32> = split_words(caption).take(max_len).map(|w| vocab.id(&w)).collect();
    let len = ids.len();
    ids.resize(max_len, PAD_ID);
    Ok(EncodedText { ids, len })
}

/// Continuous patch tokens of one image, row-major over the patch grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTokenGrid {
    /// `num_patches × token_dim` values, row-major.
    pub tokens: Vec<f32>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch_size: usize,
    pub channels: usize,
}

impl ImageTokenGrid {
    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn token_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn token(&self, i: usize) -> &[f32] {
        let d = self.token_dim();
        &self.tokens[i * d..(i + 1) * d]
    }

    pub fn from_tokens(
        tokens: Vec<f32>,
        grid_h: usize,
        grid_w: usize,
        patch_size: usize,
        channels: usize,
    ) -> Result<Self> {
        let grid = Self {
            tokens,
            grid_h,
            grid_w,
            patch_size,
            channels,
        };
        if grid.tokens.len() != grid.num_patches() * grid.token_dim() {
            return Err(Error::Shape(format!(
                "{} token values do not fill a {grid_h}x{grid_w} grid of dim {}",
                grid.tokens.len(),
                grid.token_dim()
            )));
        }
        if grid.tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image tokens".into()));
        }
        Ok(grid)
    }
}

/// Splits an image into `patch_size²·C`-dim tokens rescaled from [0,1] to [−1,1].
/// Within a token, values are ordered (row, column, channel).
pub fn patchify(image: &Image, patch_size: usize) -> Result<ImageTokenGrid> {
    if patch_size == 0 || image.height % patch_size != 0 || image.width % patch_size != 0 {
        return Err(Error::Shape(format!(
            "{}x{} image is not divisible into {patch_size}-pixel patches",
            image.height, image.width
        )));
    }
    let (gh, gw) = (image.height / patch_size, image.width / patch_size);
    let mut tokens = Vec::with_capacity(image.data.len());
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch_size {
                let y = py * patch_size + dy;
                let start = image.index(y, px * patch_size, 0);
                let end = start + patch_size * image.channels;
                tokens.extend(image.data[start..end].iter().map(|&v| 2.0 * v - 1.0));
            }
        }
    }
    Ok(ImageTokenGrid {
        tokens,
        grid_h: gh,
        grid_w: gw,
        patch_size,
        channels: image.channels,
    })
}

/// Inverse of [`patchify`]; output is clipped to [0, 1].
pub fn unpatchify(grid: &ImageTokenGrid) -> Image {
    let p = grid.patch_size;
    let mut image = Image::zeros(grid.grid_h * p, grid.grid_w * p, grid.channels);
    let row_len = p * grid.channels;
    for py in 0..grid.grid_h {
        for px in 0..grid.grid_w {
            let token = grid.token(py * grid.grid_w + px);
            for dy in 0..p {
                let start = image.index(py * p + dy, px * p, 0);
                for (dst, &t) in image.data[start..start + row_len]
                    .iter_mut()
                    .zip(&token[dy * row_len..(dy + 1) * row_len])
                {
                    *dst = ((t + 1.0) * 0.5).clamp(0.0, 1.0);
                }
            }
        }
    }
    image
}

//! Image and text feature extractors.
//!
//! Downstream modules only see [`ImageBackbone`] and [`TextBackbone`]. The toy
//! implementations here are small trainable stand-ins for pretrained encoders:
//! a strided linear patch embedding per pyramid level, and a lowercase
//! whitespace tokenizer feeding a learned token table plus positional table.

use std::collections::{BTreeSet, HashMap};

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{uniform, Graph, Mat, ParamId, ParamStore, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::Linear;

/// `(height, width, channels)` pixel array with values in `[0, 1]`.
pub type ImageTensor = Array3<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ImageDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

/// Record an image on the tape as an `(height, width * channels)` input.
pub fn image_input(g: &mut Graph<'_>, image: &ImageTensor) -> (Var, ImageDims) {
    let (height, width, channels) = image.dim();
    let flat: Vec<f64> = image.iter().copied().collect();
    let m = Mat::from_shape_vec((height, width * channels), flat).expect("contiguous image");
    (
        g.input(m),
        ImageDims {
            height,
            width,
            channels,
        },
    )
}

#[derive(Debug, Clone, Copy)]
pub struct FeatureLevel {
    /// `(height * width, C)` row-major grid of feature vectors.
    pub tokens: Var,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct ImageFeaturePyramid {
    pub levels: Vec<FeatureLevel>,
}

impl ImageFeaturePyramid {
    /// Channels shared by every level; strides strictly increasing.
    pub fn validate(&self, g: &Graph<'_>) -> Result<usize> {
        let first = self
            .levels
            .first()
            .ok_or_else(|| Error::Input("empty feature pyramid".into()))?;
        let dim = g.shape(first.tokens).1;
        for (i, level) in self.levels.iter().enumerate() {
            let (rows, c) = g.shape(level.tokens);
            if c != dim || rows != level.height * level.width {
                return Err(Error::Input(format!(
                    "level {i} has shape ({rows}, {c}), expected ({}, {dim})",
                    level.height * level.width
                )));
            }
            if i > 0 && level.stride <= self.levels[i - 1].stride {
                return Err(Error::Input("pyramid strides must strictly increase".into()));
            }
        }
        Ok(dim)
    }

    pub fn num_tokens(&self) -> usize {
        self.levels.iter().map(|l| l.height * l.width).sum()
    }
}

#[derive(Debug, Clone)]
pub struct TextTokens {
    /// `(L, C)`; rows where `mask` is false are zero.
    pub embeddings: Var,
    pub mask: Vec<bool>,
    pub tokens: Vec<String>,
}

pub trait ImageBackbone: Send + Sync {
    fn embed_image(&self, g: &mut Graph<'_>, image: Var, dims: ImageDims) -> Result<ImageFeaturePyramid>;
}

pub trait TextBackbone: Send + Sync {
    fn embed_text(&self, g: &mut Graph<'_>, expression: &str) -> Result<TextTokens>;
}

/// Lowercase whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

pub const UNK: &str = "[unk]";

/// Token vocabulary; row 0 is reserved for unknown tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Sorted vocabulary of every token in `corpus`, after the reserved unknown token.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = corpus.into_iter().flat_map(tokenize).collect();
        let mut tokens = vec![UNK.to_string()];
        tokens.extend(set.into_iter().filter(|t| t != UNK));
        Vocab::from(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// One strided linear patch embedding per pyramid level (strides 4, 8, 16, ...).
#[derive(Debug, Clone)]
pub struct ToyImageBackbone {
    pub patch_embeds: Vec<Linear>,
    strides: Vec<usize>,
    image_size: usize,
}

impl ToyImageBackbone {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let strides: Vec<usize> = (0..cfg.num_feature_levels).map(|l| cfg.level_stride(l)).collect();
        let patch_embeds = strides
            .iter()
            .enumerate()
            .map(|(l, &s)| {
                Linear::new(
                    store,
                    &format!("backbone.image.level{l}"),
                    3 * s * s,
                    cfg.feature_dim,
                    rng,
                )
            })
            .collect();
        ToyImageBackbone {
            patch_embeds,
            strides,
            image_size: cfg.image_size,
        }
    }
}

/// Flat indices gathering non-overlapping `stride x stride` patches of an
/// `(height, width * 3)` image into rows ordered (dy, dx, channel).
fn patch_indices(height: usize, width: usize, stride: usize) -> (usize, usize, Vec<usize>) {
    let (gh, gw) = (height / stride, width / stride);
    let mut idx = Vec::with_capacity(height * width * 3);
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..stride {
                for dx in 0..stride {
                    for ch in 0..3 {
                        let y = py * stride + dy;
                        let x = px * stride + dx;
                        idx.push((y * width + x) * 3 + ch);
                    }
                }
            }
        }
    }
    (gh, gw, idx)
}

impl ImageBackbone for ToyImageBackbone {
    fn embed_image(&self, g: &mut Graph<'_>, image: Var, dims: ImageDims) -> Result<ImageFeaturePyramid> {
        if dims.channels != 3 {
            return Err(Error::Input(format!("expected 3 channels, got {}", dims.channels)));
        }
        if dims.height != self.image_size || dims.width != self.image_size {
            return Err(Error::Input(format!(
                "image is {}x{}, backbone expects {}x{}",
                dims.height, dims.width, self.image_size, self.image_size
            )));
        }
        let centered = g.add_scalar(image, -0.5);
        let mut levels = Vec::with_capacity(self.strides.len());
        for (embed, &stride) in self.patch_embeds.iter().zip(&self.strides) {
            let (gh, gw, idx) = patch_indices(dims.height, dims.width, stride);
            let patches = g.rearrange(centered, (gh * gw, 3 * stride * stride), idx);
            levels.push(FeatureLevel {
                tokens: embed.forward(g, patches),
                height: gh,
                width: gw,
                stride,
            });
        }
        Ok(ImageFeaturePyramid { levels })
    }
}

#[derive(Debug, Clone)]
pub struct ToyTextBackbone {
    pub token_table: ParamId,
    pub pos_table: ParamId,
    vocab: Vocab,
    max_len: usize,
}

impl ToyTextBackbone {
    pub fn new<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        vocab: Vocab,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let dim = cfg.feature_dim;
        ToyTextBackbone {
            token_table: store.add("backbone.text.tokens", uniform(vocab.len(), dim, 1.0, rng)),
            pos_table: store.add("backbone.text.positions", uniform(cfg.max_text_len, dim, 0.1, rng)),
            vocab,
            max_len: cfg.max_text_len,
        }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }
}

impl TextBackbone for ToyTextBackbone {
    fn embed_text(&self, g: &mut Graph<'_>, expression: &str) -> Result<TextTokens> {
        let mut tokens = tokenize(expression);
        if tokens.is_empty() {
            return Err(Error::Input("expression has no tokens".into()));
        }
        tokens.truncate(self.max_len);
        let ids: Vec<usize> = tokens.iter().map(|t| self.vocab.id(t)).collect();
        let table = g.param(self.token_table);
        let pos = g.param(self.pos_table);
        let tok = g.gather_rows(table, &ids);
        let pos = g.slice_rows(pos, 0, ids.len());
        Ok(TextTokens {
            embeddings: g.add(tok, pos),
            mask: vec![true; ids.len()],
            tokens,
        })
    }
}

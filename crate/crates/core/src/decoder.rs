//! Cross-modality decoder.
//!
//! Each layer lets the queries attend to each other, then to the re-weighted
//! image tokens, then to the text tokens. The three attention outputs are
//! residual deltas whose sum `t_v` drives the update
//!
//! ```text
//! q' = N2( N1(q + t_v) + FFN(N1(q + t_v)) )
//! ```
//!
//! where `N1`, `N2` are layer norms (or row L2 normalization). After every layer
//! a box head refines each query's box in inverse-sigmoid space and the query is
//! scored by its best cosine against the unmasked text tokens.

use rand::Rng;

use crate::autodiff::{Graph, Mat, ParamStore, Var};
use crate::config::{ModelConfig, UpdateNorm};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::tiqs::{rows_to_boxes, INV_SIGMOID_EPS, QuerySet};
use crate::types::{norm_to_bbox, BBox, NormBox};

pub const L2_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub image_attn: MultiHeadAttention,
    pub text_attn: MultiHeadAttention,
    pub norm_residual: LayerNorm,
    pub ffn: FeedForward,
    pub norm_out: LayerNorm,
    pub update_norm: UpdateNorm,
}

/// Intermediate states of one decoder layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerTrace {
    /// `q + self-attention`.
    pub after_self: Var,
    /// `after_self + image cross-attention`.
    pub after_image: Var,
    /// Sum of the three attention deltas.
    pub delta: Var,
    pub out: Var,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, name: &str, rng: &mut R) -> Self {
        let (c, h) = (cfg.feature_dim, cfg.num_heads);
        DecoderLayer {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), c, h, rng),
            image_attn: MultiHeadAttention::new(store, &format!("{name}.image"), c, h, rng),
            text_attn: MultiHeadAttention::new(store, &format!("{name}.text"), c, h, rng),
            norm_residual: LayerNorm::new(store, &format!("{name}.norm1"), c),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), c, cfg.ffn_dim, rng),
            norm_out: LayerNorm::new(store, &format!("{name}.norm2"), c),
            update_norm: cfg.update_norm,
        }
    }

    fn normalize(&self, g: &mut Graph<'_>, norm: &LayerNorm, x: Var) -> Var {
        match self.update_norm {
            UpdateNorm::Layer => norm.forward(g, x),
            UpdateNorm::L2 => g.l2_normalize_rows(x, L2_EPS),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, queries: Var, image: Var, text: Var, text_mask: &[bool]) -> Var {
        self.trace(g, queries, image, text, text_mask).out
    }

    pub fn trace(&self, g: &mut Graph<'_>, queries: Var, image: Var, text: Var, text_mask: &[bool]) -> LayerTrace {
        let sa = self.self_attn.forward(g, queries, queries, queries, None).out;
        let after_self = g.add(queries, sa);
        let ia = self.image_attn.forward(g, after_self, image, image, None).out;
        let after_image = g.add(after_self, ia);
        let ta = self.text_attn.forward(g, after_image, text, text, Some(text_mask)).out;
        let delta = g.add(sa, ia);
        let delta = g.add(delta, ta);

        let x = g.add(queries, delta);
        let x = self.normalize(g, &self.norm_residual, x);
        let f = self.ffn.forward(g, x);
        let x = g.add(x, f);
        let out = self.normalize(g, &self.norm_out, x);
        LayerTrace {
            after_self,
            after_image,
            delta,
            out,
        }
    }
}

/// Two-layer MLP producing four box logit offsets. The last layer starts at zero.
#[derive(Debug, Clone)]
pub struct BoxHead {
    pub hidden: Linear,
    pub out: Linear,
}

impl BoxHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Self {
        BoxHead {
            hidden: Linear::new(store, &format!("{name}.hidden"), dim, dim, rng),
            out: Linear::zeros(store, &format!("{name}.out"), dim, 4),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.hidden.forward(g, x);
        let h = g.relu(h);
        self.out.forward(g, h)
    }
}

/// Refined boxes `(k, 4)` and alignment scores `(k, 1)`.
pub fn predict_boxes(
    g: &mut Graph<'_>,
    head: &BoxHead,
    states: Var,
    anchors: Var,
    text: Var,
    text_mask: &[bool],
) -> (Var, Var) {
    let offset = head.forward(g, states);
    let base = g.inverse_sigmoid(anchors, INV_SIGMOID_EPS);
    let logits = g.add(base, offset);
    let boxes = g.sigmoid(logits);
    (boxes, alignment_scores(g, states, text, text_mask))
}

/// Best cosine of each query against the unmasked text tokens, `(k, 1)`.
pub fn alignment_scores(g: &mut Graph<'_>, states: Var, text: Var, text_mask: &[bool]) -> Var {
    let q = g.l2_normalize_rows(states, L2_EPS);
    let t = g.l2_normalize_rows(text, L2_EPS);
    let cos = g.matmul_nt(q, t);
    g.row_max(cos, Some(text_mask))
}

/// Graph handles for one layer's predictions.
#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub states: Var,
    pub boxes: Var,
    pub scores: Var,
}

#[derive(Debug, Clone)]
pub struct DecoderTrace {
    pub layers: Vec<LayerOutput>,
    /// Number of decoder layers actually run.
    pub layers_executed: usize,
}

impl DecoderTrace {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("decoder has at least one layer")
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub box_heads: Vec<BoxHead>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(cfg.num_decoder_layers);
        let mut box_heads = Vec::with_capacity(cfg.num_decoder_layers);
        for i in 0..cfg.num_decoder_layers {
            layers.push(DecoderLayer::new(cfg, store, &format!("decoder.layer{i}"), rng));
            box_heads.push(BoxHead::new(store, &format!("decoder.box{i}"), cfg.feature_dim, rng));
        }
        Decoder { layers, box_heads }
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        queries: &QuerySet,
        image: Var,
        text: Var,
        text_mask: &[bool],
    ) -> Result<DecoderTrace> {
        if self.layers.is_empty() {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        if g.shape(queries.content).1 != g.shape(image).1 || g.shape(text).1 != g.shape(image).1 {
            return Err(Error::Input("query, image and text widths differ".into()));
        }
        let mut states = queries.content;
        let mut boxes = queries.anchors;
        let mut out = Vec::with_capacity(self.layers.len());
        for (layer, head) in self.layers.iter().zip(&self.box_heads) {
            states = layer.forward(g, states, image, text, text_mask);
            let (b, scores) = predict_boxes(g, head, states, boxes, text, text_mask);
            boxes = b;
            out.push(LayerOutput { states, boxes, scores });
        }
        Ok(DecoderTrace {
            layers_executed: out.len(),
            layers: out,
        })
    }
}

/// Values of one layer's predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerPrediction {
    pub boxes: Vec<NormBox>,
    pub scores: Vec<f64>,
    pub states: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub layers: Vec<LayerPrediction>,
    pub top1_index: usize,
    /// Final-layer top-scoring box in image pixels, clipped to the image.
    pub top1: BBox,
}

impl DecoderOutput {
    pub fn from_trace(g: &Graph<'_>, trace: &DecoderTrace, width: f64, height: f64) -> Result<Self> {
        let layers: Vec<LayerPrediction> = trace
            .layers
            .iter()
            .map(|l| LayerPrediction {
                boxes: rows_to_boxes(g.value(l.boxes)),
                scores: g.value(l.scores).iter().copied().collect(),
                states: g.value(l.states).clone(),
            })
            .collect();
        let last = layers.last().ok_or_else(|| Error::Config("decoder produced no layers".into()))?;
        let top1_index = argmax(&last.scores);
        let top1 = norm_to_bbox(&last.boxes[top1_index], width, height, true)?;
        Ok(DecoderOutput {
            layers,
            top1_index,
            top1,
        })
    }

    pub fn final_layer(&self) -> &LayerPrediction {
        self.layers.last().expect("nonempty")
    }

    /// Final-layer boxes ordered by descending score (ties to lower index).
    pub fn ranked_boxes(&self) -> Vec<NormBox> {
        let last = self.final_layer();
        let mut order: Vec<usize> = (0..last.scores.len()).collect();
        order.sort_by(|&a, &b| last.scores[b].total_cmp(&last.scores[a]));
        order.into_iter().map(|i| last.boxes[i]).collect()
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

//! End-to-end grounding model: backbones, encoder, language-guided attention,
//! query selection, decoder, and the training objective on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, NamedParam, ParamStore, Var};
use crate::backbone::{image_input, ImageBackbone, ImageTensor, TextBackbone, ToyImageBackbone, ToyTextBackbone, Vocab};
use crate::config::{BackboneKind, ModelConfig, TiqsInput};
use crate::decoder::{Decoder, DecoderOutput, DecoderTrace};
use crate::encoder::{Encoder, FusedFeatures};
use crate::error::{Error, Result};
use crate::lgfa::{LgfaOutput, LgfaState};
use crate::losses::{assign_positives, tape_contrastive, tape_giou_loss, tape_l1, tape_total, LossBreakdown};
use crate::tiqs::{rows_to_boxes, QuerySet, Tiqs};
use crate::types::NormBox;

const POOL_EPS: f64 = 1e-12;

pub struct GroundingModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub vocab: Vocab,
    pub image_backbone: Box<dyn ImageBackbone>,
    pub text_backbone: Box<dyn TextBackbone>,
    pub encoder: Encoder,
    pub lgfa: LgfaState,
    pub tiqs: Tiqs,
    pub decoder: Decoder,
}

/// Graph handles of one forward pass.
pub struct ForwardPass {
    pub fused: FusedFeatures,
    pub lgfa: LgfaOutput,
    pub queries: QuerySet,
    pub decoder: DecoderTrace,
}

/// Scalar loss of one sample plus the embeddings the batch-level terms need.
pub struct SampleLoss {
    pub total: Var,
    pub parts: LossBreakdown,
    /// `(1, C)` unit-norm pooled text.
    pub text: Var,
    /// `(1, C)` unit-norm state of the final-layer positive query.
    pub positive: Var,
}

impl GroundingModel {
    /// Fresh weights drawn from `cfg.seed`.
    pub fn new(cfg: &ModelConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        if cfg.backbone == BackboneKind::External {
            return Err(Error::Config(
                "no external backbone adapter is bundled; use backbone = \"toy\"".into(),
            ));
        }
        let mut store = ParamStore::new();
        let mut rng = cfg.rng();
        let image_backbone = ToyImageBackbone::new(cfg, &mut store, &mut rng);
        let text_backbone = ToyTextBackbone::new(cfg, vocab.clone(), &mut store, &mut rng);
        let encoder = Encoder::new(cfg, &mut store, &mut rng);
        let lgfa = LgfaState::new(cfg, &mut store, &mut rng);
        let tiqs = Tiqs::new(cfg, &mut store, &mut rng);
        let decoder = Decoder::new(cfg, &mut store, &mut rng);
        Ok(GroundingModel {
            cfg: cfg.clone(),
            store,
            vocab,
            image_backbone: Box::new(image_backbone),
            text_backbone: Box::new(text_backbone),
            encoder,
            lgfa,
            tiqs,
            decoder,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, image: &ImageTensor, expression: &str) -> Result<ForwardPass> {
        let (pixels, dims) = image_input(g, image);
        let pyramid = self.image_backbone.embed_image(g, pixels, dims)?;
        let text = self.text_backbone.embed_text(g, expression)?;
        let fused = self.encoder.forward(g, &pyramid, &text)?;
        let lgfa = self.lgfa.forward(g, fused.image, fused.text, &fused.text_mask, self.cfg.beta)?;
        let selection_input = match self.cfg.tiqs_input {
            TiqsInput::PreLgfa => fused.image,
            TiqsInput::PostLgfa => lgfa.modulated,
        };
        let queries = self.tiqs.select(
            g,
            selection_input,
            fused.text,
            &fused.text_mask,
            &fused.cells,
            self.cfg.top_k,
        )?;
        let decoder = self
            .decoder
            .forward(g, &queries, lgfa.modulated, fused.text, &fused.text_mask)?;
        Ok(ForwardPass {
            fused,
            lgfa,
            queries,
            decoder,
        })
    }

    /// Decode one image. `width` and `height` are the original pixel dimensions the
    /// top-1 box is reported in.
    pub fn predict(&self, image: &ImageTensor, expression: &str, width: f64, height: f64) -> Result<DecoderOutput> {
        let mut g = Graph::new(&self.store);
        let pass = self.forward(&mut g, image, expression)?;
        DecoderOutput::from_trace(&g, &pass.decoder, width, height)
    }

    /// Masked mean of the text tokens, L2-normalized, as `(1, C)`.
    pub fn pooled_text(&self, g: &mut Graph<'_>, fused: &FusedFeatures) -> Var {
        let n = fused.text_mask.iter().filter(|&&k| k).count().max(1);
        let sum = g.sum_rows(fused.text);
        let mean = g.scale(sum, 1.0 / n as f64);
        g.l2_normalize_rows(mean, POOL_EPS)
    }

    /// Box and alignment losses against one normalized target box.
    pub fn sample_loss(&self, g: &mut Graph<'_>, pass: &ForwardPass, target: &NormBox) -> Result<SampleLoss> {
        let text = self.pooled_text(g, &pass.fused);
        let layers = if self.cfg.aux_loss {
            &pass.decoder.layers[..]
        } else {
            std::slice::from_ref(pass.decoder.last())
        };
        let mut total: Option<Var> = None;
        let mut parts = LossBreakdown::default();
        let mut positive = None;
        for layer in layers {
            let boxes = rows_to_boxes(g.value(layer.boxes));
            let matched = assign_positives(&boxes, target, &self.cfg)?;
            let row = g.gather_rows(layer.boxes, &matched.positives);
            let giou = tape_giou_loss(g, row, target)?;
            let l1 = tape_l1(g, row, target);
            let objects = g.l2_normalize_rows(layer.states, POOL_EPS);
            let cts = tape_contrastive(g, text, objects, &matched.positives, self.cfg.temperature)?;
            let t = tape_total(g, giou, l1, cts, &self.cfg);
            parts.giou += g.scalar(giou);
            parts.l1 += g.scalar(l1);
            parts.contrastive += g.scalar(cts);
            total = Some(match total {
                Some(acc) => g.add(acc, t),
                None => t,
            });
            positive = Some(g.gather_rows(objects, &matched.positives));
        }
        let total = total.expect("at least one decoder layer");
        parts.total = g.scalar(total);
        Ok(SampleLoss {
            total,
            parts,
            text,
            positive: positive.expect("at least one decoder layer"),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::Model {
            config: self.cfg.clone(),
            vocab: self.vocab.clone(),
            params: self.store.to_archive(),
        }
    }

    /// Rebuild from a config, vocabulary and parameter archive.
    pub fn from_parts(config: &ModelConfig, vocab: Vocab, params: &[NamedParam]) -> Result<Self> {
        let mut model = GroundingModel::new(config, vocab)?;
        model.store.load_archive(params)?;
        Ok(model)
    }
}

/// A saved predictor: trained weights, or a fixed answer table used to check the
/// evaluation harness against known predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Checkpoint {
    Model {
        config: ModelConfig,
        vocab: Vocab,
        params: Vec<NamedParam>,
    },
    /// Pixel box per image id.
    Answers { boxes: std::collections::BTreeMap<String, [f64; 4]> },
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Anchor boxes of the selected queries, for inspection.
pub fn anchor_boxes(g: &Graph<'_>, pass: &ForwardPass) -> Vec<NormBox> {
    rows_to_boxes(g.value(pass.queries.anchors))
}

/// `(T, 1)` language-guided scores of a pass.
pub fn feature_scores(g: &Graph<'_>, pass: &ForwardPass) -> Mat {
    g.value(pass.lgfa.scores).clone()
}

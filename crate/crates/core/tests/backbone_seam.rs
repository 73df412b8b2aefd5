//! The model only sees backbones through their traits, so a stand-in with no
//! weights at all must drive the rest of the pipeline unchanged.

use ndarray::Array2;
use ovg_core::autodiff::{Graph, Var};
use ovg_core::backbone::{
    tokenize, FeatureLevel, ImageBackbone, ImageDims, ImageFeaturePyramid, TextBackbone, TextTokens, Vocab,
};
use ovg_core::data::{generate_synthetic, rgb_to_tensor, SynthConfig};
use ovg_core::{bbox_to_norm, GroundingModel, ModelConfig, Result};

/// Average-pools the image and spreads each cell's color over the channels.
struct PoolingImage {
    dim: usize,
}

impl ImageBackbone for PoolingImage {
    fn embed_image(&self, g: &mut Graph<'_>, image: Var, dims: ImageDims) -> Result<ImageFeaturePyramid> {
        let pixels = g.value(image).clone();
        let mut levels = Vec::new();
        for stride in [4usize, 8] {
            let (h, w) = (dims.height / stride, dims.width / stride);
            let feats = Array2::from_shape_fn((h * w, self.dim), |(cell, ch)| {
                let (r, c) = (cell / w, cell % w);
                let channel = ch % dims.channels;
                let mut sum = 0.0;
                for y in r * stride..(r + 1) * stride {
                    for x in c * stride..(c + 1) * stride {
                        sum += pixels[[y, x * dims.channels + channel]];
                    }
                }
                let phase = (ch as f64 + 1.0) * 0.37;
                sum / (stride * stride) as f64 + 0.1 * (phase * (r + 2 * c) as f64).sin()
            });
            let tokens = g.constant(feats);
            levels.push(FeatureLevel { tokens, height: h, width: w, stride });
        }
        Ok(ImageFeaturePyramid { levels })
    }
}

/// Deterministic hashed embedding per token.
struct HashedText {
    dim: usize,
    max_len: usize,
}

impl TextBackbone for HashedText {
    fn embed_text(&self, g: &mut Graph<'_>, expression: &str) -> Result<TextTokens> {
        let mut tokens = tokenize(expression);
        tokens.truncate(self.max_len);
        let emb = Array2::from_shape_fn((tokens.len(), self.dim), |(i, ch)| {
            let seed = tokens[i].bytes().fold(17u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64));
            ((seed.wrapping_add(ch as u64 * 7919) % 1000) as f64 / 500.0) - 1.0
        });
        let mask = vec![true; tokens.len()];
        Ok(TextTokens { embeddings: g.constant(emb), mask, tokens })
    }
}

#[test]
fn weightless_backbones_drive_the_full_model() {
    let cfg = ModelConfig::toy();
    let set = generate_synthetic(2, &SynthConfig::default(), 5);
    let records = set.manifest.grounding().unwrap();
    let vocab = Vocab::build(records.iter().map(|r| r.expression.as_str()));

    let mut model = GroundingModel::new(&cfg, vocab).unwrap();
    model.image_backbone = Box::new(PoolingImage { dim: cfg.feature_dim });
    model.text_backbone = Box::new(HashedText { dim: cfg.feature_dim, max_len: cfg.max_text_len });

    for (record, image) in records.iter().zip(&set.images) {
        let tensor = rgb_to_tensor(image, cfg.image_size);
        let out = model.predict(&tensor, &record.expression, 64.0, 64.0).unwrap();
        assert_eq!(out.final_layer().boxes.len(), cfg.top_k);
        assert!(out.final_layer().scores.iter().all(|s| s.is_finite()));

        let mut g = Graph::new(&model.store);
        let pass = model.forward(&mut g, &tensor, &record.expression).unwrap();
        assert_eq!(pass.fused.rounds, 2);
        let target = bbox_to_norm(&record.target, 64.0, 64.0).unwrap();
        let loss = model.sample_loss(&mut g, &pass, &target).unwrap();
        assert!(g.scalar(loss.total).is_finite());

        let grads = g.backward(loss.total);
        let mut downstream = 0;
        for id in model.store.ids() {
            let name = model.store.name(id);
            let grad = grads.param(id);
            if name.starts_with("backbone.") {
                assert!(grad.is_none(), "{name} should be unused");
            } else if grad.is_some_and(|m| m.iter().any(|v| *v != 0.0)) {
                downstream += 1;
            }
        }
        assert!(downstream > 0);
    }
}

#[test]
fn second_backbone_changes_predictions_not_shapes() {
    let cfg = ModelConfig::toy();
    let set = generate_synthetic(1, &SynthConfig::default(), 9);
    let record = &set.manifest.grounding().unwrap()[0];
    let tensor = rgb_to_tensor(&set.images[0], cfg.image_size);
    let vocab = Vocab::build([record.expression.as_str()]);

    let stock = GroundingModel::new(&cfg, vocab.clone()).unwrap();
    let mut swapped = GroundingModel::new(&cfg, vocab).unwrap();
    swapped.image_backbone = Box::new(PoolingImage { dim: cfg.feature_dim });
    swapped.text_backbone = Box::new(HashedText { dim: cfg.feature_dim, max_len: cfg.max_text_len });

    let a = stock.predict(&tensor, &record.expression, 64.0, 64.0).unwrap();
    let b = swapped.predict(&tensor, &record.expression, 64.0, 64.0).unwrap();
    assert_eq!(a.layers.len(), b.layers.len());
    assert_eq!(a.final_layer().boxes.len(), b.final_layer().boxes.len());
    assert_ne!(a.final_layer().scores, b.final_layer().scores);
}

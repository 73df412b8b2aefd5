//! Feature encoder: enhance each stream on its own, then fuse them with
//! bidirectional cross-modality attention.
//!
//! Multi-scale image tokens are enhanced with ordinary multi-head self-attention
//! over the concatenation of all levels. Fusion runs `min(N_v, N_l)` rounds; each
//! round first lets image tokens attend to text (text-to-image), then lets text
//! attend to the updated image tokens (image-to-text), and hands both states to
//! the next round.

use rand::Rng;

use crate::autodiff::{uniform, Graph, ParamId, ParamStore, Var};
use crate::backbone::{FeatureLevel, ImageFeaturePyramid, TextTokens};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{
    sine_embedding_2d, zero_masked_rows, LayerNorm, MultiHeadAttention, SelfAttentionLayer,
};

/// Location of one flattened image token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenCell {
    pub level: usize,
    pub row: usize,
    pub col: usize,
    /// Normalized cell center.
    pub cx: f64,
    pub cy: f64,
    pub stride: usize,
}

/// Cell of every token in flattening order (levels in pyramid order, row-major inside).
pub fn token_cells(pyr: &ImageFeaturePyramid) -> Vec<TokenCell> {
    let mut cells = Vec::with_capacity(pyr.num_tokens());
    for (level, l) in pyr.levels.iter().enumerate() {
        for row in 0..l.height {
            for col in 0..l.width {
                cells.push(TokenCell {
                    level,
                    row,
                    col,
                    cx: (col as f64 + 0.5) / l.width as f64,
                    cy: (row as f64 + 0.5) / l.height as f64,
                    stride: l.stride,
                });
            }
        }
    }
    cells
}

#[derive(Debug, Clone)]
pub struct FusedFeatures {
    /// `(T, C)` flattened multi-scale image tokens.
    pub image: Var,
    /// `(L, C)` text tokens; masked rows are zero.
    pub text: Var,
    pub text_mask: Vec<bool>,
    pub cells: Vec<TokenCell>,
    /// Number of fusion rounds actually executed.
    pub rounds: usize,
}

#[derive(Debug, Clone)]
pub struct FusionRound {
    pub text_to_image: MultiHeadAttention,
    pub image_query_norm: LayerNorm,
    pub text_key_norm: LayerNorm,
    pub image_to_text: MultiHeadAttention,
    pub text_query_norm: LayerNorm,
    pub image_key_norm: LayerNorm,
}

impl FusionRound {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (c, h) = (cfg.feature_dim, cfg.num_heads);
        FusionRound {
            text_to_image: MultiHeadAttention::zero_output(store, &format!("{name}.t2i"), c, h, rng),
            image_query_norm: LayerNorm::new(store, &format!("{name}.t2i.norm_q"), c),
            text_key_norm: LayerNorm::new(store, &format!("{name}.t2i.norm_kv"), c),
            image_to_text: MultiHeadAttention::zero_output(store, &format!("{name}.i2t"), c, h, rng),
            text_query_norm: LayerNorm::new(store, &format!("{name}.i2t.norm_q"), c),
            image_key_norm: LayerNorm::new(store, &format!("{name}.i2t.norm_kv"), c),
        }
    }

    /// One pre-norm residual round: text-to-image, then image-to-text.
    pub fn forward(&self, g: &mut Graph<'_>, image: Var, text: Var, keep: &[bool]) -> (Var, Var) {
        let q = self.image_query_norm.forward(g, image);
        let kv = self.text_key_norm.forward(g, text);
        let delta = self.text_to_image.forward(g, q, kv, kv, Some(keep)).out;
        let image = g.add(image, delta);

        let q = self.text_query_norm.forward(g, text);
        let kv = self.image_key_norm.forward(g, image);
        let delta = self.image_to_text.forward(g, q, kv, kv, None).out;
        let text = g.add(text, delta);
        (image, zero_masked_rows(g, text, keep))
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub level_embed: ParamId,
    pub image_layers: Vec<SelfAttentionLayer>,
    pub text_layers: Vec<SelfAttentionLayer>,
    pub fusion: Vec<FusionRound>,
    dim: usize,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let (c, h, f) = (cfg.feature_dim, cfg.num_heads, cfg.ffn_dim);
        let level_embed = store.add(
            "encoder.level_embed",
            uniform(cfg.num_feature_levels, c, 0.1, rng),
        );
        let image_layers = (0..cfg.num_encoder_layers)
            .map(|i| SelfAttentionLayer::new(store, &format!("encoder.image.layer{i}"), c, h, f, rng))
            .collect();
        let text_layers = (0..cfg.num_text_layers)
            .map(|i| SelfAttentionLayer::new(store, &format!("encoder.text.layer{i}"), c, h, f, rng))
            .collect();
        let fusion = (0..cfg.fusion_rounds())
            .map(|i| FusionRound::new(store, &format!("encoder.fusion.round{i}"), cfg, rng))
            .collect();
        Encoder {
            level_embed,
            image_layers,
            text_layers,
            fusion,
            dim: c,
        }
    }

    /// Add position and level embeddings, flatten all levels, and run the image
    /// self-attention layers. Returns `(T, C)` tokens.
    pub fn enhance_image(&self, g: &mut Graph<'_>, pyr: &ImageFeaturePyramid) -> Result<Var> {
        let dim = pyr.validate(g)?;
        if dim != self.dim {
            return Err(Error::Input(format!("pyramid has {dim} channels, encoder expects {}", self.dim)));
        }
        self.enhance_levels(g, &pyr.levels)
    }

    /// Level embeddings are keyed by stride, so the result depends on each level's
    /// identity and not on its position in `levels`.
    pub(crate) fn enhance_levels(&self, g: &mut Graph<'_>, levels: &[FeatureLevel]) -> Result<Var> {
        let table = g.param(self.level_embed);
        let num_levels = g.shape(table).0;
        let mut parts = Vec::with_capacity(levels.len());
        for level in levels {
            let id = (level.stride / 4).trailing_zeros() as usize;
            if level.stride < 4 || !level.stride.is_power_of_two() || id >= num_levels {
                return Err(Error::Input(format!("unsupported level stride {}", level.stride)));
            }
            let pos = g.constant(sine_embedding_2d(level.height, level.width, self.dim));
            let lvl = g.slice_rows(table, id, 1);
            let x = g.add(level.tokens, pos);
            parts.push(g.add_row(x, lvl));
        }
        let mut x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        for layer in &self.image_layers {
            x = layer.forward(g, x, None);
        }
        Ok(x)
    }

    /// Masked self-attention over text tokens. Masked positions are never attended
    /// to and come out as zero rows.
    pub fn enhance_text(&self, g: &mut Graph<'_>, txt: &TextTokens) -> Result<Var> {
        let (len, dim) = g.shape(txt.embeddings);
        if txt.mask.len() != len || dim != self.dim {
            return Err(Error::Input(format!(
                "text embeddings ({len}, {dim}) do not match mask length {} / dim {}",
                txt.mask.len(),
                self.dim
            )));
        }
        if !txt.mask.iter().any(|&k| k) {
            return Err(Error::Input("every text token is masked".into()));
        }
        let mut x = zero_masked_rows(g, txt.embeddings, &txt.mask);
        for layer in &self.text_layers {
            x = layer.forward(g, x, Some(&txt.mask));
            x = zero_masked_rows(g, x, &txt.mask);
        }
        Ok(x)
    }

    /// Run `n_rounds` bidirectional fusion rounds, each feeding the next.
    pub fn fuse_streams(
        &self,
        g: &mut Graph<'_>,
        image: Var,
        text: Var,
        text_mask: &[bool],
        n_rounds: usize,
    ) -> Result<(Var, Var, usize)> {
        if n_rounds < 1 {
            return Err(Error::Config("fusion needs at least one round".into()));
        }
        if n_rounds > self.fusion.len() {
            return Err(Error::Config(format!(
                "{n_rounds} fusion rounds requested, {} configured",
                self.fusion.len()
            )));
        }
        if !text_mask.iter().any(|&k| k) {
            return Err(Error::Input("every text token is masked".into()));
        }
        let (mut image, mut text) = (image, text);
        let mut executed = 0;
        for round in &self.fusion[..n_rounds] {
            (image, text) = round.forward(g, image, text, text_mask);
            executed += 1;
        }
        Ok((image, text, executed))
    }

    /// Enhance both streams and fuse them for `min(N_v, N_l)` rounds.
    pub fn forward(&self, g: &mut Graph<'_>, pyr: &ImageFeaturePyramid, txt: &TextTokens) -> Result<FusedFeatures> {
        let image = self.enhance_image(g, pyr)?;
        let text = self.enhance_text(g, txt)?;
        let rounds = self.image_layers.len().min(self.text_layers.len());
        let (image, text, rounds) = self.fuse_streams(g, image, text, &txt.mask, rounds)?;
        Ok(FusedFeatures {
            image,
            text,
            text_mask: txt.mask.clone(),
            cells: token_cells(pyr),
            rounds,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check::check_gradients;
    use crate::autodiff::Mat;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(nv: usize, nl: usize) -> ModelConfig {
        ModelConfig {
            feature_dim: 8,
            num_heads: 2,
            ffn_dim: 16,
            num_encoder_layers: nv,
            num_text_layers: nl,
            image_size: 16,
            top_k: 2,
            ..ModelConfig::toy()
        }
    }

    fn randomize_fusion_outputs(enc: &Encoder, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for r in &enc.fusion {
            for lin in [&r.text_to_image.output, &r.image_to_text.output] {
                *store.get_mut(lin.weight) = uniform(8, 8, 0.5, rng);
                *store.get_mut(lin.bias) = uniform(1, 8, 0.1, rng);
            }
        }
    }

    #[test]
    fn flattens_all_levels() {
        let cfg = ModelConfig::toy();
        let mut store = ParamStore::new();
        let mut rng = cfg.rng();
        let enc = Encoder::new(&cfg, &mut store, &mut rng);
        let mut g = Graph::new(&store);
        let l0 = g.input(uniform(256, 64, 1.0, &mut rng));
        let l1 = g.input(uniform(64, 64, 1.0, &mut rng));
        let pyr = ImageFeaturePyramid {
            levels: vec![
                FeatureLevel { tokens: l0, height: 16, width: 16, stride: 4 },
                FeatureLevel { tokens: l1, height: 8, width: 8, stride: 8 },
            ],
        };
        let out = enc.enhance_image(&mut g, &pyr).unwrap();
        assert_eq!(g.shape(out), (320, 64));
        // post-norm output: each row has unit variance times gamma = 1
        for row in g.value(out).rows() {
            let norm = row.dot(&row).sqrt();
            assert!(row.iter().all(|v| v.is_finite()));
            assert!((norm - 8.0).abs() < 1e-3, "row norm {norm}");
        }
        assert_eq!(token_cells(&pyr).len(), 320);
    }

    #[test]
    fn level_order_only_permutes_token_blocks() {
        let cfg = small_cfg(2, 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::new(&cfg, &mut store, &mut rng);
        let a = uniform(16, 8, 1.0, &mut rng);
        let b = uniform(4, 8, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let (va, vb) = (g.input(a), g.input(b));
        let la = FeatureLevel { tokens: va, height: 4, width: 4, stride: 4 };
        let lb = FeatureLevel { tokens: vb, height: 2, width: 2, stride: 8 };
        let fwd = enc.enhance_levels(&mut g, &[la, lb]).unwrap();
        let rev = enc.enhance_levels(&mut g, &[lb, la]).unwrap();
        let fwd = g.value(fwd).clone();
        let rev = g.value(rev);
        let unpermuted = ndarray::concatenate(
            ndarray::Axis(0),
            &[rev.slice(ndarray::s![4.., ..]), rev.slice(ndarray::s![..4, ..])],
        )
        .unwrap();
        let diff = (&fwd - &unpermuted).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-12, "max diff {diff}");
    }

    fn text(g: &mut Graph<'_>, rows: Mat, mask: Vec<bool>) -> TextTokens {
        let tokens = vec!["t".to_string(); mask.len()];
        TextTokens { embeddings: g.input(rows), mask, tokens }
    }

    #[test]
    fn single_token_text_has_no_mixing() {
        let cfg = small_cfg(1, 1);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = Encoder::new(&cfg, &mut store, &mut rng);
        let x = uniform(1, 8, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let t = text(&mut g, x.clone(), vec![true]);
        let out = enc.enhance_text(&mut g, &t).unwrap();

        // Single key: attention is the value projection passed through the output projection.
        let layer = &enc.text_layers[0];
        let xv = g.input(x);
        let v = layer.attn.value.forward(&mut g, xv);
        let o = layer.attn.output.forward(&mut g, v);
        let y = g.add(xv, o);
        let y = layer.norm1.forward(&mut g, y);
        let f = layer.ffn.forward(&mut g, y);
        let y2 = g.add(y, f);
        let manual = layer.norm2.forward(&mut g, y2);
        let diff = (g.value(out) - g.value(manual)).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn masked_text_tokens_are_inert() {
        let cfg = small_cfg(2, 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::new(&cfg, &mut store, &mut rng);
        let base = uniform(3, 8, 1.0, &mut rng);
        let mut other = base.clone();
        other.row_mut(2).fill(7.5);
        let mut g = Graph::new(&store);
        let mask = vec![true, true, false];
        let t1 = text(&mut g, base, mask.clone());
        let t2 = text(&mut g, other, mask);
        let o1 = enc.enhance_text(&mut g, &t1).unwrap();
        let o2 = enc.enhance_text(&mut g, &t2).unwrap();
        assert_eq!(g.value(o1), g.value(o2));
        assert!(g.value(o1).row(2).iter().all(|&v| v == 0.0));

        let t3 = text(&mut g, Mat::zeros((2, 8)), vec![false, false]);
        assert!(matches!(enc.enhance_text(&mut g, &t3), Err(Error::Input(_))));
    }

    #[test]
    fn fusion_round_count_is_min_of_layer_counts() {
        for nv in 1..=6 {
            for nl in 1..=6 {
                let cfg = small_cfg(nv, nl);
                let mut store = ParamStore::new();
                let mut rng = ChaCha8Rng::seed_from_u64(2);
                let enc = Encoder::new(&cfg, &mut store, &mut rng);
                let mut g = Graph::new(&store);
                let img = g.input(uniform(12, 8, 1.0, &mut rng));
                let txt = g.input(uniform(4, 8, 1.0, &mut rng));
                let (i2, t2, rounds) = enc
                    .fuse_streams(&mut g, img, txt, &[true; 4], cfg.fusion_rounds())
                    .unwrap();
                assert_eq!(rounds, nv.min(nl));
                assert_eq!(g.shape(i2), (12, 8));
                assert_eq!(g.shape(t2), (4, 8));
            }
        }
    }

    #[test]
    fn fusion_rejects_zero_rounds() {
        let cfg = small_cfg(2, 2);
        let mut store = ParamStore::new();
        let mut rng = cfg.rng();
        let enc = Encoder::new(&cfg, &mut store, &mut rng);
        let mut g = Graph::new(&store);
        let img = g.input(Mat::zeros((3, 8)));
        let txt = g.input(Mat::zeros((2, 8)));
        assert!(matches!(
            enc.fuse_streams(&mut g, img, txt, &[true, true], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_text_leaves_image_unchanged_with_zero_value_projection() {
        let cfg = small_cfg(1, 1);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::new(&cfg, &mut store, &mut rng);
        randomize_fusion_outputs(&enc, &mut store, &mut rng);
        enc.fusion[0].text_to_image.value.zero_out(&mut store);
        let img_val = uniform(12, 8, 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let img = g.input(img_val.clone());
        let txt = g.input(Mat::zeros((4, 8)));
        let round = &enc.fusion[0];
        let q = round.image_query_norm.forward(&mut g, img);
        let kv = round.text_key_norm.forward(&mut g, txt);
        let delta = round.text_to_image.forward(&mut g, q, kv, kv, None).out;
        // the output bias is randomized, so compare the attention path before it
        let bias = store.get(round.text_to_image.output.bias);
        let d = g.value(delta) - bias;
        assert!(d.iter().all(|v| v.abs() < 1e-15));

        // with the default zero-initialized output projection the whole round is identity on images
        let mut store2 = ParamStore::new();
        let enc2 = Encoder::new(&cfg, &mut store2, &mut rng);
        let mut g2 = Graph::new(&store2);
        let img = g2.input(img_val.clone());
        let txt = g2.input(Mat::zeros((4, 8)));
        let (out, _, _) = enc2.fuse_streams(&mut g2, img, txt, &[true; 4], 1).unwrap();
        assert_eq!(g2.value(out), &img_val);
    }

    #[test]
    fn masked_keys_get_zero_attention() {
        let cfg = small_cfg(1, 1);
        let mut store = ParamStore::new();
        let mut rng = cfg.rng();
        let enc = Encoder::new(&cfg, &mut store, &mut rng);
        let mut g = Graph::new(&store);
        let img = g.input(uniform(12, 8, 1.0, &mut rng));
        let txt = g.input(uniform(4, 8, 1.0, &mut rng));
        let keep = [true, false, true, false];
        let r = &enc.fusion[0];
        let att = r.text_to_image.forward(&mut g, img, txt, txt, Some(&keep));
        for w in att.weights {
            let w = g.value(w);
            for row in w.rows() {
                assert!(row[1].abs() < 1e-12 && row[3].abs() < 1e-12);
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn enhance_text_gradients() {
        let cfg = small_cfg(2, 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let enc = Encoder::new(&cfg, &mut store, &mut rng);
        let readout = uniform(4, 8, 1.0, &mut rng);
        let x = uniform(4, 8, 1.0, &mut rng);
        let report = check_gradients(
            &mut store,
            &mut [x],
            |g, inputs| {
                let t = TextTokens {
                    embeddings: inputs[0],
                    mask: vec![true, true, true, false],
                    tokens: vec![String::new(); 4],
                };
                let out = enc.enhance_text(g, &t).unwrap();
                let w = g.constant(readout.clone());
                let p = g.mul(out, w);
                g.sum_all(p)
            },
            1e-5,
            usize::MAX,
        );
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn fuse_streams_gradients() {
        let cfg = small_cfg(2, 2);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let enc = Encoder::new(&cfg, &mut store, &mut rng);
        randomize_fusion_outputs(&enc, &mut store, &mut rng);
        let ri = uniform(12, 8, 1.0, &mut rng);
        let rt = uniform(4, 8, 1.0, &mut rng);
        let img = uniform(12, 8, 1.0, &mut rng);
        let txt = uniform(4, 8, 1.0, &mut rng);
        let report = check_gradients(
            &mut store,
            &mut [img, txt],
            |g, inputs| {
                let keep = [true, true, false, true];
                let (i, t, _) = enc.fuse_streams(g, inputs[0], inputs[1], &keep, 2).unwrap();
                let wi = g.constant(ri.clone());
                let wt = g.constant(rt.clone());
                let a = g.mul(i, wi);
                let b = g.mul(t, wt);
                let a = g.sum_all(a);
                let b = g.sum_all(b);
                g.add(a, b)
            },
            1e-5,
            usize::MAX,
        );
        assert!(report.passes(1e-4), "{report:?}");
    }
}

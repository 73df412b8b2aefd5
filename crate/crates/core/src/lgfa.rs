//! Language-guided feature attention.
//!
//! Image tokens attend to the text to build a semantic map. Both the image
//! tokens and the semantic map are linearly projected and L2-normalized, and
//! each token gets a Gaussian-of-cosine relevance score
//!
//! ```text
//! S(x) = α · exp(-(1 - cos(x))² / (2σ²))
//! ```
//!
//! which re-weights the tokens as `v'' = β · v' · S + (1 - β) · v'`.

use rand::Rng;

use crate::autodiff::{softplus, Graph, Mat, ParamId, ParamStore, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Linear, MultiHeadAttention};

/// Lower bound added to `softplus(σ_raw)`.
pub const SIGMA_FLOOR: f64 = 1e-3;
pub const NORM_EPS: f64 = 1e-12;

/// Closed form of the relevance score for a given cosine.
pub fn gaussian_cosine_score(cosine: f64, alpha: f64, sigma: f64) -> f64 {
    alpha * (-(1.0 - cosine).powi(2) / (2.0 * sigma * sigma)).exp()
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[derive(Debug, Clone)]
pub struct LgfaState {
    pub alpha: ParamId,
    /// σ = softplus(σ_raw) + [`SIGMA_FLOOR`].
    pub sigma_raw: ParamId,
    pub semantic_attn: MultiHeadAttention,
    pub image_proj: Linear,
    pub semantic_proj: Linear,
}

pub struct LgfaOutput {
    /// `(T, C)` semantic map.
    pub semantic: Var,
    /// `(T, 1)` scores.
    pub scores: Var,
    /// `(T, C)` re-weighted image tokens.
    pub modulated: Var,
}

impl LgfaState {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let c = cfg.feature_dim;
        let state = LgfaState {
            alpha: store.add("lgfa.alpha", Mat::zeros((1, 1))),
            sigma_raw: store.add("lgfa.sigma_raw", Mat::zeros((1, 1))),
            semantic_attn: MultiHeadAttention::new(store, "lgfa.semantic", c, cfg.num_heads, rng),
            image_proj: Linear::new(store, "lgfa.proj_image", c, c, rng),
            semantic_proj: Linear::new(store, "lgfa.proj_semantic", c, c, rng),
        };
        state.set_alpha_sigma(store, 1.0, 1.0);
        state
    }

    /// Set α and σ directly. `sigma` must exceed [`SIGMA_FLOOR`].
    pub fn set_alpha_sigma(&self, store: &mut ParamStore, alpha: f64, sigma: f64) {
        assert!(sigma > SIGMA_FLOOR, "sigma must exceed {SIGMA_FLOOR}");
        store.get_mut(self.alpha)[[0, 0]] = alpha;
        store.get_mut(self.sigma_raw)[[0, 0]] = inverse_softplus(sigma - SIGMA_FLOOR);
    }

    pub fn alpha_value(&self, store: &ParamStore) -> f64 {
        store.get(self.alpha)[[0, 0]]
    }

    pub fn sigma_value(&self, store: &ParamStore) -> f64 {
        softplus(store.get(self.sigma_raw)[[0, 0]]) + SIGMA_FLOOR
    }

    /// Multi-head attention with image tokens as queries and text tokens as keys and values.
    pub fn semantic_map(&self, g: &mut Graph<'_>, image: Var, text: Var, text_mask: &[bool]) -> Result<Var> {
        if text_mask.len() != g.shape(text).0 {
            return Err(Error::Input("text mask length does not match text tokens".into()));
        }
        if !text_mask.iter().any(|&k| k) {
            return Err(Error::Input("every text token is masked".into()));
        }
        Ok(self.semantic_attn.forward(g, image, text, text, Some(text_mask)).out)
    }

    /// Per-token relevance scores, shape `(T, 1)`.
    pub fn score(&self, g: &mut Graph<'_>, image: Var, semantic: Var) -> Var {
        let a = self.image_proj.forward(g, image);
        let a = g.l2_normalize_rows(a, NORM_EPS);
        let b = self.semantic_proj.forward(g, semantic);
        let b = g.l2_normalize_rows(b, NORM_EPS);
        let prod = g.mul(a, b);
        let cosine = g.sum_cols(prod);
        let gap = g.scale(cosine, -1.0);
        let gap = g.add_scalar(gap, 1.0);
        let gap = g.square(gap);

        let raw = g.param(self.sigma_raw);
        let sigma = g.softplus(raw);
        let sigma = g.add_scalar(sigma, SIGMA_FLOOR);
        let var2 = g.square(sigma);
        let var2 = g.scale(var2, 2.0);
        let one = g.constant(Mat::ones((1, 1)));
        let inv = g.div(one, var2);

        let expo = g.mul_row(gap, inv);
        let expo = g.scale(expo, -1.0);
        let gauss = g.exp(expo);
        let alpha = g.param(self.alpha);
        g.mul_row(gauss, alpha)
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        image: Var,
        text: Var,
        text_mask: &[bool],
        beta: f64,
    ) -> Result<LgfaOutput> {
        let semantic = self.semantic_map(g, image, text, text_mask)?;
        let scores = self.score(g, image, semantic);
        let modulated = blend(g, image, scores, beta)?;
        Ok(LgfaOutput {
            semantic,
            scores,
            modulated,
        })
    }
}

/// `β · v ⊙ S + (1 - β) · v` with `S` a `(T, 1)` column.
pub fn blend(g: &mut Graph<'_>, image: Var, scores: Var, beta: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!("beta {beta} outside [0, 1]")));
    }
    let factor = g.scale(scores, beta);
    let factor = g.add_scalar(factor, 1.0 - beta);
    Ok(g.mul_col(image, factor))
}

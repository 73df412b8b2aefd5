//! Text-image query selection.
//!
//! Every image token is scored against every text token by cosine similarity.
//! A token's proposal score is its maximum over unmasked text tokens; the `k`
//! best tokens (ties to the lower index) become decoder queries, each carrying
//! its feature vector as content and an anchor box predicted from that feature
//! around the token's grid cell.

use rand::Rng;

use crate::autodiff::{Graph, Mat, ParamStore, Var};
use crate::config::ModelConfig;
use crate::encoder::TokenCell;
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::types::NormBox;

pub const COSINE_EPS: f64 = 1e-12;
pub const INV_SIGMOID_EPS: f64 = 1e-5;

/// `(T, L)` cosine similarities; masked text columns hold `-inf`.
pub fn similarity_logits(image: &Mat, text: &Mat, text_mask: &[bool]) -> Result<Mat> {
    let (t, c) = image.dim();
    let (l, c2) = text.dim();
    if t == 0 || l == 0 {
        return Err(Error::Input("similarity needs nonempty image and text tokens".into()));
    }
    if c != c2 || text_mask.len() != l {
        return Err(Error::Input(format!(
            "image dim {c}, text dim {c2}, mask length {} for {l} text tokens",
            text_mask.len()
        )));
    }
    let unit = |m: &Mat| {
        let mut m = m.clone();
        for mut row in m.rows_mut() {
            let n = row.dot(&row).sqrt().max(COSINE_EPS);
            row.mapv_inplace(|v| v / n);
        }
        m
    };
    let mut s = unit(image).dot(&unit(text).t());
    for (j, &keep) in text_mask.iter().enumerate() {
        if !keep {
            s.column_mut(j).fill(f64::NEG_INFINITY);
        }
    }
    Ok(s)
}

/// Proposal score per image token: maximum over text tokens.
pub fn reduce_scores(logits: &Mat) -> Vec<f64> {
    logits
        .rows()
        .into_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

/// Indices of the `k` highest scores in non-increasing order; equal scores keep index order.
pub fn rank_tokens(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!(
            "top-k {k} must be in 1..={} tokens",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order.truncate(k);
    Ok(order)
}

/// Select the top-`k` tokens of a similarity matrix. Returns `(token, score)` pairs.
pub fn select_topk(logits: &Mat, k: usize) -> Result<Vec<(usize, f64)>> {
    let reduced = reduce_scores(logits);
    Ok(rank_tokens(&reduced, k)?
        .into_iter()
        .map(|i| (i, reduced[i]))
        .collect())
}

#[derive(Debug, Clone)]
pub struct QuerySet {
    /// `(k, C)` content vectors.
    pub content: Var,
    /// `(k, 4)` anchors as normalized `(cx, cy, w, h)`.
    pub anchors: Var,
    pub token_indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.token_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_indices.is_empty()
    }

    pub fn anchor_boxes(&self, g: &Graph<'_>) -> Vec<NormBox> {
        rows_to_boxes(g.value(self.anchors))
    }
}

pub(crate) fn rows_to_boxes(m: &Mat) -> Vec<NormBox> {
    m.rows()
        .into_iter()
        .map(|r| NormBox {
            cx: r[0],
            cy: r[1],
            w: r[2],
            h: r[3],
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Tiqs {
    /// Four logits added to the inverse-sigmoid of the cell prior.
    pub box_head: Linear,
    image_size: usize,
}

impl Tiqs {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, _rng: &mut R) -> Self {
        Tiqs {
            box_head: Linear::zeros(store, "tiqs.box_head", cfg.feature_dim, 4),
            image_size: cfg.image_size,
        }
    }

    /// Prior box of a token: its cell center, sized at two strides.
    pub fn cell_prior(&self, cell: &TokenCell) -> [f64; 4] {
        let size = (2.0 * cell.stride as f64 / self.image_size as f64).min(0.9);
        [cell.cx, cell.cy, size, size]
    }

    pub fn select(
        &self,
        g: &mut Graph<'_>,
        image: Var,
        text: Var,
        text_mask: &[bool],
        cells: &[TokenCell],
        k: usize,
    ) -> Result<QuerySet> {
        if cells.len() != g.shape(image).0 {
            return Err(Error::Input(format!(
                "{} token cells for {} image tokens",
                cells.len(),
                g.shape(image).0
            )));
        }
        let logits = similarity_logits(g.value(image), g.value(text), text_mask)?;
        let picked = select_topk(&logits, k)?;
        let token_indices: Vec<usize> = picked.iter().map(|p| p.0).collect();
        let scores: Vec<f64> = picked.iter().map(|p| p.1).collect();

        let content = g.gather_rows(image, &token_indices);
        let mut prior = Mat::zeros((k, 4));
        for (r, &i) in token_indices.iter().enumerate() {
            for (c, v) in self.cell_prior(&cells[i]).into_iter().enumerate() {
                let v = v.clamp(INV_SIGMOID_EPS, 1.0 - INV_SIGMOID_EPS);
                prior[[r, c]] = (v / (1.0 - v)).ln();
            }
        }
        let prior = g.constant(prior);
        let delta = self.box_head.forward(g, content);
        let logits = g.add(delta, prior);
        let anchors = g.sigmoid(logits);
        Ok(QuerySet {
            content,
            anchors,
            token_indices,
            scores,
        })
    }
}

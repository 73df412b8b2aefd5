//! Layer building blocks recorded on the autodiff tape.

use rand::Rng;

use crate::autodiff::{xavier, Graph, Mat, ParamId, ParamStore, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), xavier(in_dim, out_dim, rng)),
            bias: store.add(format!("{name}.bias"), Mat::zeros((1, out_dim))),
            in_dim,
            out_dim,
        }
    }

    /// Linear layer whose weight and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: store.add(format!("{name}.weight"), Mat::zeros((in_dim, out_dim))),
            bias: store.add(format!("{name}.bias"), Mat::zeros((1, out_dim))),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    /// Zero weight and bias in place.
    pub fn zero_out(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).fill(0.0);
        store.get_mut(self.bias).fill(0.0);
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Mat::ones((1, dim))),
            beta: store.add(format!("{name}.beta"), Mat::zeros((1, dim))),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let n = g.layer_norm_rows(x, LN_EPS);
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

/// Two linear projections with a ReLU in between.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), dim, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, dim, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Var {
        let h = self.up.forward(g, x);
        let h = g.relu(h);
        self.down.forward(g, h)
    }
}

pub struct AttentionOutput {
    pub out: Var,
    /// Per-head `(queries, keys)` attention weights.
    pub weights: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.k"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.v"), dim, dim, rng),
            output: Linear::new(store, &format!("{name}.o"), dim, dim, rng),
            heads,
        }
    }

    /// Attention whose output projection starts at zero, so the block begins as identity
    /// inside a residual connection.
    pub fn zero_output<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        let mha = Self::new(store, name, dim, heads, rng);
        mha.output.zero_out(store);
        mha
    }

    /// `keep[j] == false` removes key `j` from every query's softmax.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        query: Var,
        key: Var,
        value: Var,
        keep: Option<&[bool]>,
    ) -> AttentionOutput {
        let q = self.query.forward(g, query);
        let k = self.key.forward(g, key);
        let v = self.value.forward(g, value);
        let dim = g.shape(q).1;
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * dh, dh),
                    g.slice_cols(k, h * dh, dh),
                    g.slice_cols(v, h * dh, dh),
                )
            };
            let scores = g.matmul_nt(qh, kh);
            let scores = g.scale(scores, scale);
            let a = g.softmax_rows(scores, keep);
            outs.push(g.matmul(a, vh));
            weights.push(a);
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)
        };
        AttentionOutput {
            out: self.output.forward(g, merged),
            weights,
        }
    }
}

/// Post-norm transformer block: `LN(x + MHA(x))`, then `LN(x + FFN(x))`.
#[derive(Debug, Clone)]
pub struct SelfAttentionLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl SelfAttentionLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        SelfAttentionLayer {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), dim, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), dim, hidden, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, keep: Option<&[bool]>) -> Var {
        let a = self.attn.forward(g, x, x, x, keep).out;
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let f = self.ffn.forward(g, x);
        let x = g.add(x, f);
        self.norm2.forward(g, x)
    }
}

/// `(n,1)` column of ones and zeros from a keep mask.
pub fn mask_column(keep: &[bool]) -> Mat {
    Mat::from_shape_fn((keep.len(), 1), |(i, _)| f64::from(u8::from(keep[i])))
}

/// Zero the rows of `x` whose mask entry is false. No-op when nothing is masked.
pub fn zero_masked_rows(g: &mut Graph<'_>, x: Var, keep: &[bool]) -> Var {
    if keep.iter().all(|&k| k) {
        return x;
    }
    let m = g.constant(mask_column(keep));
    g.mul_col(x, m)
}

/// Fixed 2D sine embedding of cell centers for an `height x width` grid.
///
/// The first half of the channels encodes the row coordinate, the second half the
/// column coordinate, each as interleaved sin/cos pairs. `dim` must be divisible by 4.
pub fn sine_embedding_2d(height: usize, width: usize, dim: usize) -> Mat {
    assert!(dim % 4 == 0, "sine embedding needs dim divisible by 4");
    let half = dim / 2;
    let mut out = Mat::zeros((height * width, dim));
    for r in 0..height {
        for c in 0..width {
            let y = (r as f64 + 0.5) / height as f64;
            let x = (c as f64 + 0.5) / width as f64;
            let row = r * width + c;
            fill_sine(&mut out, row, 0, y, half);
            fill_sine(&mut out, row, half, x, half);
        }
    }
    out
}

/// Sine embedding of normalized scalars, `dim` channels per scalar, used for anchor boxes.
pub fn sine_embedding_values(values: &Mat, dim: usize) -> Mat {
    assert!(dim % 2 == 0, "sine embedding needs even dim");
    let (n, m) = values.dim();
    let mut out = Mat::zeros((n, m * dim));
    for i in 0..n {
        for j in 0..m {
            fill_sine(&mut out, i, j * dim, values[[i, j]], dim);
        }
    }
    out
}

fn fill_sine(out: &mut Mat, row: usize, offset: usize, v: f64, width: usize) {
    let two_pi = std::f64::consts::TAU;
    for k in 0..width / 2 {
        let freq = 10000f64.powf(2.0 * k as f64 / width as f64);
        let a = v * two_pi / freq;
        out[[row, offset + 2 * k]] = a.sin();
        out[[row, offset + 2 * k + 1]] = a.cos();
    }
}

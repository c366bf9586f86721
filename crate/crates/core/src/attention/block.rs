use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{orthogonal, Linear, PatchTokens, RmsNorm};
use crate::error::{shape_err, Error, Result};

/// Widths of one grouped-query attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockConfig {
    pub dim: usize,
    /// Query heads.
    pub heads: usize,
    /// Key/value heads; each serves `heads / kv_heads` consecutive query heads.
    pub kv_heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.kv_heads == 0 || self.head_dim == 0 || self.ffn_hidden == 0 {
            return Err(Error::Invalid("attention block widths must be positive".into()));
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return Err(Error::Invalid(format!(
                "{} query heads cannot be grouped over {} key/value heads",
                self.heads, self.kv_heads
            )));
        }
        Ok(())
    }

    /// Key/value head serving query head `h`.
    pub fn kv_head_of(&self, h: usize) -> usize {
        h / (self.heads / self.kv_heads)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub config: BlockConfig,
    pub norm_attn: RmsNorm,
    /// `(heads · head_dim) × dim`.
    pub wq: DMatrix<f64>,
    /// `(kv_heads · head_dim) × dim`.
    pub wk: DMatrix<f64>,
    pub wv: DMatrix<f64>,
    /// `dim × (heads · head_dim)`.
    pub wo: DMatrix<f64>,
    pub norm_ffn: RmsNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl BlockWeights {
    /// Orthogonal projections, zero output projections: the block starts as
    /// the identity on its residual stream.
    pub fn init<R: Rng + ?Sized>(config: BlockConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let (d, hd) = (config.dim, config.head_dim);
        Ok(Self {
            config,
            norm_attn: RmsNorm::new(d),
            wq: orthogonal(config.heads * hd, d, 1.0, rng),
            wk: orthogonal(config.kv_heads * hd, d, 1.0, rng),
            wv: orthogonal(config.kv_heads * hd, d, 1.0, rng),
            wo: DMatrix::zeros(d, config.heads * hd),
            norm_ffn: RmsNorm::new(d),
            ffn_in: Linear::orthogonal(d, config.ffn_hidden, 1.0, rng),
            ffn_out: Linear::zeros(config.ffn_hidden, d),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let hd = c.head_dim;
        let shapes = [
            (self.wq.shape(), (c.heads * hd, c.dim), "wq"),
            (self.wk.shape(), (c.kv_heads * hd, c.dim), "wk"),
            (self.wv.shape(), (c.kv_heads * hd, c.dim), "wv"),
            (self.wo.shape(), (c.dim, c.heads * hd), "wo"),
            (self.ffn_in.weight.shape(), (c.ffn_hidden, c.dim), "ffn_in"),
            (self.ffn_out.weight.shape(), (c.dim, c.ffn_hidden), "ffn_out"),
        ];
        for (got, want, name) in shapes {
            if got != want {
                return Err(shape_err(format!("{name} is {got:?}, expected {want:?}")));
            }
        }
        if self.norm_attn.gain.len() != c.dim || self.norm_ffn.gain.len() != c.dim {
            return Err(shape_err("rms norm gains"));
        }
        let all = [
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_in.weight,
            &self.ffn_out.weight,
        ];
        if !all.iter().all(|m| m.iter().all(|v| v.is_finite())) {
            return Err(Error::NonFinite("attention block weights"));
        }
        Ok(())
    }
}

/// Learned bias indexed by the 2D offset between two tokens on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativePositionBias {
    pub grid_h: usize,
    pub grid_w: usize,
    /// `(2·grid_h − 1) × (2·grid_w − 1)`, row-major by (dy, dx).
    pub table: Vec<f64>,
}

impl RelativePositionBias {
    pub fn zeros(grid_h: usize, grid_w: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            table: vec![0.0; Self::table_len(grid_h, grid_w)],
        }
    }

    pub fn random<R: Rng + ?Sized>(grid_h: usize, grid_w: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        Self {
            grid_h,
            grid_w,
            table: (0..Self::table_len(grid_h, grid_w))
                .map(|_| normal.sample(rng))
                .collect(),
        }
    }

    pub fn table_len(grid_h: usize, grid_w: usize) -> usize {
        (2 * grid_h).saturating_sub(1) * (2 * grid_w).saturating_sub(1)
    }

    /// Bias for query token `i` attending to key token `j`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (iy, ix) = (i / self.grid_w, i % self.grid_w);
        let (jy, jx) = (j / self.grid_w, j % self.grid_w);
        let dy = jy + self.grid_h - 1 - iy;
        let dx = jx + self.grid_w - 1 - ix;
        self.table[dy * (2 * self.grid_w - 1) + dx]
    }
}

/// Per-head softmax weights recorded by one block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCacheEntry {
    pub heads: Vec<DMatrix<f64>>,
}

impl AttentionCacheEntry {
    pub fn tokens(&self) -> usize {
        self.heads.first().map_or(0, |m| m.nrows())
    }

    /// Mean over heads; still row-stochastic.
    pub fn head_average(&self) -> DMatrix<f64> {
        let t = self.tokens();
        let mut sum = DMatrix::zeros(t, t);
        for h in &self.heads {
            sum += h;
        }
        sum / self.heads.len().max(1) as f64
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.apply(|v| *v = (*v - max).exp());
        let s: f64 = row.iter().sum();
        row /= s;
    }
    out
}

fn gelu(x: f64) -> f64 {
    const K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044715 * x * x * x)).tanh())
}

/// One pre-norm block:
/// `x ← x + Attn(RMSNorm(x))`, then `x ← x + FFN(RMSNorm(x))`.
pub fn gqa_block(
    tokens: &PatchTokens,
    weights: &BlockWeights,
    bias: &RelativePositionBias,
) -> Result<(PatchTokens, AttentionCacheEntry)> {
    weights.validate()?;
    let c = &weights.config;
    let (t, d, hd) = (tokens.len(), c.dim, c.head_dim);
    if tokens.dim() != d {
        return Err(shape_err(format!(
            "block expects {d}-wide tokens, got {}",
            tokens.dim()
        )));
    }
    if bias.grid_h != tokens.grid_h || bias.grid_w != tokens.grid_w {
        return Err(shape_err("relative position bias grid does not match the tokens"));
    }
    if !tokens.tokens.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("block input tokens"));
    }
    let x = &tokens.tokens;
    let h = weights.norm_attn.apply(x)?;
    let q = &h * weights.wq.transpose();
    let k = &h * weights.wk.transpose();
    let v = &h * weights.wv.transpose();
    let scale = 1.0 / (hd as f64).sqrt();
    let bias_matrix = DMatrix::from_fn(t, t, |i, j| bias.get(i, j));
    let mut concat = DMatrix::zeros(t, c.heads * hd);
    let mut cache = Vec::with_capacity(c.heads);
    for head in 0..c.heads {
        let g = c.kv_head_of(head);
        let qh = q.columns(head * hd, hd);
        let kh = k.columns(g * hd, hd);
        let vh = v.columns(g * hd, hd);
        let logits = qh * kh.transpose() * scale + &bias_matrix;
        let w = softmax_rows(&logits);
        concat.columns_mut(head * hd, hd).copy_from(&(&w * vh));
        cache.push(w);
    }
    let mut y = x + concat * weights.wo.transpose();
    let hidden = weights.ffn_in.apply(&weights.norm_ffn.apply(&y)?)?.map(gelu);
    y += weights.ffn_out.apply(&hidden)?;
    if !y.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("block output tokens"));
    }
    Ok((
        PatchTokens {
            tokens: y,
            grid_h: tokens.grid_h,
            grid_w: tokens.grid_w,
            patch: tokens.patch,
        },
        AttentionCacheEntry { heads: cache },
    ))
}

//! Toy-scale token transformer: patch tokens, grouped-query attention blocks
//! that record their softmax weights, reuse of those weights to lift
//! external feature maps, and the per-pixel Gaussian decoding head.

mod block;
mod transformer;


use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::gaussian::RawGaussianParams;
use crate::io::{Tensor, TensorArchive};
use crate::map::PixelMap;

pub use block::{gqa_block, softmax_rows, AttentionCacheEntry, BlockConfig, BlockWeights, RelativePositionBias};
pub use transformer::{pose_conditioned_image, AggregationTransformer, TransformerConfig};

/// Row-per-token embedding on a patch grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokens {
    /// `(grid_h · grid_w) × dim`, patches in row-major order.
    pub tokens: DMatrix<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
}

impl PatchTokens {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Affine map applied to every row: `y = x Wᵀ + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `out × in`.
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: DMatrix::zeros(output, input),
            bias: DVector::zeros(output),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            weight: DMatrix::identity(dim, dim),
            bias: DVector::zeros(dim),
        }
    }

    /// Scaled-orthogonal weights with zero bias.
    pub fn orthogonal<R: Rng + ?Sized>(input: usize, output: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: orthogonal(output, input, gain, rng),
            bias: DVector::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(shape_err(format!(
                "linear layer expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        let mut y = x * self.weight.transpose();
        for mut row in y.row_iter_mut() {
            row += self.bias.transpose();
        }
        Ok(y)
    }
}

/// `rows × cols` matrix with orthonormal rows or columns (whichever is
/// shorter) times `gain`, from the QR factorization of a Gaussian matrix.
pub fn orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> DMatrix<f64> {
    let (tall, short) = (rows.max(cols), rows.min(cols));
    if short == 0 {
        return DMatrix::zeros(rows, cols);
    }
    let a = DMatrix::from_fn(tall, short, |_, _| StandardNormal.sample(rng));
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    // fix the sign ambiguity so the distribution is uniform
    for j in 0..short {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q *= gain;
    if rows >= cols {
        q
    } else {
        q.transpose()
    }
}

/// Root-mean-square normalization with a learned per-channel gain.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsNorm {
    pub gain: DVector<f64>,
    pub eps: f64,
}

impl RmsNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gain: DVector::from_element(dim, 1.0),
            eps: 1e-12,
        }
    }

    /// Rows rescaled to unit root-mean-square, before the gain.
    pub fn normalize(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x.clone();
        for mut row in y.row_iter_mut() {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len().max(1) as f64;
            row /= (ms + self.eps).sqrt();
        }
        y
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.gain.len() {
            return Err(shape_err("rms norm width"));
        }
        let mut y = self.normalize(x);
        for mut row in y.row_iter_mut() {
            row.component_mul_assign(&self.gain.transpose());
        }
        Ok(y)
    }
}

/// Flattens every non-overlapping `patch × patch` block of `image` into one
/// row (pixel row-major, channels fastest); blocks are ordered row-major.
pub fn patch_vectors(image: &PixelMap, patch: usize) -> Result<DMatrix<f64>> {
    let (gh, gw) = patch_grid(image.height, image.width, patch)?;
    let c = image.channels;
    let width = patch * patch * c;
    let mut out = DMatrix::zeros(gh * gw, width);
    for by in 0..gh {
        for bx in 0..gw {
            let t = by * gw + bx;
            for py in 0..patch {
                for px in 0..patch {
                    let src = image.pixel(by * patch + py, bx * patch + px);
                    for (k, &v) in src.iter().enumerate() {
                        out[(t, (py * patch + px) * c + k)] = v;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn patch_grid(height: usize, width: usize, patch: usize) -> Result<(usize, usize)> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(shape_err(format!(
            "patch size {patch} does not divide the {height}x{width} image"
        )));
    }
    Ok((height / patch, width / patch))
}

/// Splits `image` into patches and maps each flattened patch to a token.
pub fn patchify(image: &PixelMap, patch: usize, proj: &Linear) -> Result<PatchTokens> {
    let flat = patch_vectors(image, patch)?;
    let tokens = proj.apply(&flat)?;
    if !tokens.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("patch tokens"));
    }
    Ok(PatchTokens {
        tokens,
        grid_h: image.height / patch,
        grid_w: image.width / patch,
        patch,
    })
}

/// Which cached weights lift external features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LiftSource {
    #[default]
    LastBlock,
    /// Mean of every block's head-averaged weights.
    AverageBlocks,
}

/// Softmax weights from every block of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCache {
    pub blocks: Vec<AttentionCacheEntry>,
}

impl AttentionCache {
    /// Stores every head's weights as `blocks.{b}.head.{h}`.
    pub fn to_archive(&self) -> TensorArchive {
        let mut ar = TensorArchive::default();
        ar.meta = serde_json::json!({ "kind": "attention_cache", "blocks": self.blocks.len() });
        for (b, entry) in self.blocks.iter().enumerate() {
            for (h, w) in entry.heads.iter().enumerate() {
                ar.insert(format!("blocks.{b}.head.{h}"), Tensor::from_matrix(w));
            }
        }
        ar
    }

    pub fn from_archive(ar: &TensorArchive) -> Result<Self> {
        let count = ar.meta.get("blocks").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let mut blocks = Vec::with_capacity(count);
        for b in 0..count {
            let mut heads = Vec::new();
            while let Ok(t) = ar.get(&format!("blocks.{b}.head.{}", heads.len())) {
                heads.push(t.to_matrix()?);
            }
            if heads.is_empty() || heads.iter().any(|m| !m.is_square() || m.nrows() != heads[0].nrows()) {
                return Err(shape_err(format!("attention cache block {b} has no usable heads")));
            }
            blocks.push(AttentionCacheEntry { heads });
        }
        if blocks.is_empty() {
            return Err(Error::Invalid("archive holds no attention weights".into()));
        }
        Ok(Self { blocks })
    }

    /// Single row-stochastic matrix used for lifting.
    pub fn reuse_weights(&self, source: LiftSource) -> Result<DMatrix<f64>> {
        let last = self
            .blocks
            .last()
            .ok_or_else(|| Error::Invalid("attention cache is empty".into()))?;
        match source {
            LiftSource::LastBlock => Ok(last.head_average()),
            LiftSource::AverageBlocks => {
                let mut sum = DMatrix::zeros(last.tokens(), last.tokens());
                for b in &self.blocks {
                    sum += b.head_average();
                }
                Ok(sum / self.blocks.len() as f64)
            }
        }
    }
}

/// Applies cached attention weights to an external feature map:
/// `f̃ = W f`, with no projection on `f`.
///
/// Each output entry is accumulated over source tokens in a fixed order, so
/// a column of the result depends only on the same column of `features`.
pub fn cross_attn_reuse(weights: &DMatrix<f64>, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let t = weights.nrows();
    if weights.ncols() != t || features.nrows() != t {
        return Err(shape_err(format!(
            "attention weights are {}x{} but features have {} tokens",
            weights.nrows(),
            weights.ncols(),
            features.nrows()
        )));
    }
    let d = features.ncols();
    let mut out = DMatrix::zeros(t, d);
    for i in 0..t {
        for c in 0..d {
            let mut acc = 0.0;
            for j in 0..t {
                acc += weights[(i, j)] * features[(j, c)];
            }
            out[(i, c)] = acc;
        }
    }
    Ok(out)
}

/// Lifts `features` with the cache's weights selected by `source`.
pub fn lift_features(cache: &AttentionCache, features: &DMatrix<f64>, source: LiftSource) -> Result<DMatrix<f64>> {
    cross_attn_reuse(&cache.reuse_weights(source)?, features)
}

/// The 1×1 convolution that turns each token into raw parameters for the
/// `patch²` pixels it covers.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeHead {
    pub linear: Linear,
    pub patch: usize,
    pub feature_dim: usize,
}

impl DecodeHead {
    pub fn zeros(token_dim: usize, patch: usize, feature_dim: usize) -> Self {
        let out = patch * patch * RawGaussianParams::channel_count(feature_dim);
        Self {
            linear: Linear::zeros(token_dim, out),
            patch,
            feature_dim,
        }
    }

    /// Small orthogonal weights; the rotation bias is the identity
    /// quaternion so every decoded rotation starts well defined.
    pub fn init<R: Rng + ?Sized>(token_dim: usize, patch: usize, feature_dim: usize, gain: f64, rng: &mut R) -> Self {
        let c = RawGaussianParams::channel_count(feature_dim);
        let mut linear = Linear::orthogonal(token_dim, patch * patch * c, gain, rng);
        for px in 0..patch * patch {
            linear.bias[px * c + crate::gaussian::channel::ROTATION] = 1.0;
        }
        Self {
            linear,
            patch,
            feature_dim,
        }
    }

    pub fn pixel_channels(&self) -> usize {
        RawGaussianParams::channel_count(self.feature_dim)
    }
}

/// Decodes tokens on a `grid_h × grid_w` patch grid into per-pixel raw
/// parameters. Token output channel `(py · P + px) · C + k` becomes channel
/// `k` of pixel `(py, px)` inside the token's patch.
pub fn decode_gaussians(
    tokens: &DMatrix<f64>,
    grid_h: usize,
    grid_w: usize,
    head: &DecodeHead,
) -> Result<RawGaussianParams> {
    let order: Vec<usize> = (0..grid_h * grid_w).collect();
    decode_gaussians_at(tokens, &order, grid_h, grid_w, head)
}

/// As [`decode_gaussians`], with token `t` placed at patch `patches[t]`
/// (row-major patch index).
pub fn decode_gaussians_at(
    tokens: &DMatrix<f64>,
    patches: &[usize],
    grid_h: usize,
    grid_w: usize,
    head: &DecodeHead,
) -> Result<RawGaussianParams> {
    let p = head.patch;
    let c = head.pixel_channels();
    if head.linear.output_dim() != p * p * c {
        return Err(shape_err(format!(
            "decode head has {} outputs, expected {p}²·{c} = {}",
            head.linear.output_dim(),
            p * p * c
        )));
    }
    if tokens.nrows() != grid_h * grid_w || patches.len() != tokens.nrows() {
        return Err(shape_err("token count does not match the patch grid"));
    }
    let mut seen = vec![false; patches.len()];
    for &q in patches {
        if q >= seen.len() || std::mem::replace(&mut seen[q], true) {
            return Err(Error::Invalid("patch indices must be a permutation".into()));
        }
    }
    let out = head.linear.apply(tokens)?;
    let mut map = PixelMap::zeros(grid_h * p, grid_w * p, c);
    for (t, &q) in patches.iter().enumerate() {
        let (by, bx) = (q / grid_w, q % grid_w);
        for py in 0..p {
            for px in 0..p {
                let dst = map.pixel_mut(by * p + py, bx * p + px);
                for (k, v) in dst.iter_mut().enumerate() {
                    *v = out[(t, (py * p + px) * c + k)];
                }
            }
        }
    }
    if !map.is_finite() {
        return Err(Error::NonFinite("decoded gaussian parameters"));
    }
    RawGaussianParams::from_map(map, head.feature_dim)
}

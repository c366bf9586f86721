use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{
    gqa_block, lift_features, patchify, AttentionCache, BlockConfig, BlockWeights, LiftSource, Linear, PatchTokens,
    RelativePositionBias, RmsNorm,
};
use crate::camera::Camera;
use crate::error::{shape_err, Error, Result};
use crate::io::{Tensor, TensorArchive};
use crate::map::PixelMap;

/// Sizes of the aggregation transformer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub patch: usize,
    /// Channels of the pose-conditioned input image.
    pub in_channels: usize,
    /// Token width d₁.
    pub dim: usize,
    /// Number of blocks N_f.
    pub blocks: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub ffn_hidden: usize,
    /// Standard deviation of the initial relative-position bias.
    pub bias_std: f64,
    pub lift_source: LiftSource,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            in_channels: POSE_CONDITIONED_CHANNELS,
            dim: 128,
            blocks: 4,
            heads: 4,
            kv_heads: 2,
            ffn_hidden: 512,
            bias_std: 0.02,
            lift_source: LiftSource::LastBlock,
        }
    }
}

impl TransformerConfig {
    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            dim: self.dim,
            heads: self.heads,
            kv_heads: self.kv_heads,
            head_dim: self.dim / self.heads.max(1),
            ffn_hidden: self.ffn_hidden,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.in_channels == 0 || self.blocks == 0 {
            return Err(Error::Invalid("patch, in_channels and blocks must be positive".into()));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!(
                "dim {} is not divisible into {} heads",
                self.dim, self.heads
            )));
        }
        if !(self.bias_std >= 0.0 && self.bias_std.is_finite()) {
            return Err(Error::Invalid("bias_std must be a finite non-negative number".into()));
        }
        self.block().validate()
    }
}

/// RGB (3) + body-normal render (3) + Plücker rays (6).
pub const POSE_CONDITIONED_CHANNELS: usize = 12;

/// Stacks an RGB image, an optional normal render (zeros when absent) and
/// the camera's Plücker rays along the channel axis.
pub fn pose_conditioned_image(
    rgb: &PixelMap,
    normals: Option<&PixelMap>,
    camera: &Camera,
    half_pixel: bool,
) -> Result<PixelMap> {
    let (h, w) = (rgb.height, rgb.width);
    rgb.ensure_shape(camera.height, camera.width, 3, "input image")?;
    let zeros = PixelMap::zeros(h, w, 3);
    let normals = match normals {
        Some(n) => {
            n.ensure_shape(h, w, 3, "normal render")?;
            n
        }
        None => &zeros,
    };
    PixelMap::concat_channels(&[rgb, normals, &camera.plucker_embedding(half_pixel)])
}

/// Patch embedding plus a stack of grouped-query attention blocks sharing
/// one relative-position bias; every forward pass returns its softmax
/// weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregationTransformer {
    pub config: TransformerConfig,
    pub embed: Linear,
    pub blocks: Vec<BlockWeights>,
    pub bias: RelativePositionBias,
}

impl AggregationTransformer {
    /// Fresh weights for `height × width` inputs.
    pub fn init<R: Rng + ?Sized>(config: TransformerConfig, height: usize, width: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let p = config.patch;
        if !height.is_multiple_of(p) || !width.is_multiple_of(p) || height == 0 || width == 0 {
            return Err(shape_err(format!("patch size {p} does not divide {height}x{width}")));
        }
        let embed = Linear::orthogonal(p * p * config.in_channels, config.dim, 1.0, rng);
        let blocks = (0..config.blocks)
            .map(|_| BlockWeights::init(config.block(), rng))
            .collect::<Result<Vec<_>>>()?;
        let bias = RelativePositionBias::random(height / p, width / p, config.bias_std, rng);
        Ok(Self {
            config,
            embed,
            blocks,
            bias,
        })
    }

    pub fn forward(&self, image: &PixelMap) -> Result<(PatchTokens, AttentionCache)> {
        if image.channels != self.config.in_channels {
            return Err(shape_err(format!(
                "transformer expects {} input channels, got {}",
                self.config.in_channels, image.channels
            )));
        }
        let mut tokens = patchify(image, self.config.patch, &self.embed)?;
        let mut cache = AttentionCache {
            blocks: Vec::with_capacity(self.blocks.len()),
        };
        for block in &self.blocks {
            let (next, entry) = gqa_block(&tokens, block, &self.bias)?;
            tokens = next;
            cache.blocks.push(entry);
        }
        Ok((tokens, cache))
    }

    /// Runs `image` through the blocks and lifts `features` (one row per
    /// token) with the recorded weights.
    pub fn lift(&self, image: &PixelMap, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let (_, cache) = self.forward(image)?;
        lift_features(&cache, features, self.config.lift_source)
    }

    /// Flat named tensors for checkpointing.
    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut ar = TensorArchive::default();
        ar.meta = serde_json::to_value(self.config).map_err(|e| Error::Invalid(e.to_string()))?;
        put_linear(&mut ar, "embed", &self.embed);
        ar.insert(
            "bias",
            Tensor::new(
                vec![2 * self.bias.grid_h - 1, 2 * self.bias.grid_w - 1],
                self.bias.table.clone(),
            )?,
        );
        for (i, b) in self.blocks.iter().enumerate() {
            let pre = format!("blocks.{i}");
            ar.insert(format!("{pre}.norm_attn"), vector(&b.norm_attn.gain));
            ar.insert(format!("{pre}.wq"), matrix(&b.wq));
            ar.insert(format!("{pre}.wk"), matrix(&b.wk));
            ar.insert(format!("{pre}.wv"), matrix(&b.wv));
            ar.insert(format!("{pre}.wo"), matrix(&b.wo));
            ar.insert(format!("{pre}.norm_ffn"), vector(&b.norm_ffn.gain));
            put_linear(&mut ar, &format!("{pre}.ffn_in"), &b.ffn_in);
            put_linear(&mut ar, &format!("{pre}.ffn_out"), &b.ffn_out);
        }
        Ok(ar)
    }

    pub fn from_archive(ar: &TensorArchive) -> Result<Self> {
        let config: TransformerConfig =
            serde_json::from_value(ar.meta.clone()).map_err(|e| Error::Config(format!("transformer config: {e}")))?;
        config.validate()?;
        let bias_t = ar.get("bias")?;
        let [bh, bw] = bias_t.dims()?;
        let bias = RelativePositionBias {
            grid_h: bh.div_ceil(2),
            grid_w: bw.div_ceil(2),
            table: bias_t.data.clone(),
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for i in 0..config.blocks {
            let pre = format!("blocks.{i}");
            let block = BlockWeights {
                config: config.block(),
                norm_attn: rms(ar.get(&format!("{pre}.norm_attn"))?),
                wq: ar.get(&format!("{pre}.wq"))?.to_matrix()?,
                wk: ar.get(&format!("{pre}.wk"))?.to_matrix()?,
                wv: ar.get(&format!("{pre}.wv"))?.to_matrix()?,
                wo: ar.get(&format!("{pre}.wo"))?.to_matrix()?,
                norm_ffn: rms(ar.get(&format!("{pre}.norm_ffn"))?),
                ffn_in: get_linear(ar, &format!("{pre}.ffn_in"))?,
                ffn_out: get_linear(ar, &format!("{pre}.ffn_out"))?,
            };
            block.validate()?;
            blocks.push(block);
        }
        let embed = get_linear(ar, "embed")?;
        if embed.output_dim() != config.dim || embed.input_dim() != config.patch * config.patch * config.in_channels {
            return Err(shape_err("patch embedding does not match the config"));
        }
        Ok(Self {
            config,
            embed,
            blocks,
            bias,
        })
    }
}

fn matrix(m: &DMatrix<f64>) -> Tensor {
    Tensor::from_matrix(m)
}

fn vector(v: &DVector<f64>) -> Tensor {
    Tensor {
        shape: vec![v.len()],
        data: v.as_slice().to_vec(),
    }
}

fn rms(t: &Tensor) -> RmsNorm {
    RmsNorm {
        gain: DVector::from_column_slice(&t.data),
        ..RmsNorm::new(0)
    }
}

fn put_linear(ar: &mut TensorArchive, name: &str, l: &Linear) {
    ar.insert(format!("{name}.weight"), matrix(&l.weight));
    ar.insert(format!("{name}.bias"), vector(&l.bias));
}

fn get_linear(ar: &TensorArchive, name: &str) -> Result<Linear> {
    let weight = ar.get(&format!("{name}.weight"))?.to_matrix()?;
    let bias = DVector::from_column_slice(&ar.get(&format!("{name}.bias"))?.data);
    if bias.len() != weight.nrows() {
        return Err(shape_err(format!("{name}: bias length does not match the weight")));
    }
    Ok(Linear { weight, bias })
}

use super::{render, RenderOutput, RenderSettings};
use crate::camera::Camera;
use crate::error::{shape_err, Result};
use crate::gaussian::GaussianCloud;
use crate::map::PixelMap;
use crate::palette::{BACKGROUND, NUM_CLASSES};

/// Per-pixel linear classification head over rendered features.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub feature_dim: usize,
    /// Row-major `NUM_CLASSES × feature_dim`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Classifier {
    pub fn new(feature_dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weight.len() != NUM_CLASSES * feature_dim || bias.len() != NUM_CLASSES {
            return Err(shape_err(format!(
                "classifier needs {NUM_CLASSES}x{feature_dim} weights and {NUM_CLASSES} biases"
            )));
        }
        Ok(Self {
            feature_dim,
            weight,
            bias,
        })
    }

    /// Identity head on 28-wide features: logit k reads feature k.
    pub fn identity() -> Self {
        let mut weight = vec![0.0; NUM_CLASSES * NUM_CLASSES];
        for k in 0..NUM_CLASSES {
            weight[k * NUM_CLASSES + k] = 1.0;
        }
        Self {
            feature_dim: NUM_CLASSES,
            weight,
            bias: vec![0.0; NUM_CLASSES],
        }
    }

    pub fn logits(&self, feature: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let row = &self.weight[k * self.feature_dim..(k + 1) * self.feature_dim];
            *o = self.bias[k] + row.iter().zip(feature).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// Applies the head to every pixel of a feature plane.
    pub fn apply(&self, features: &PixelMap) -> Result<PixelMap> {
        if features.channels != self.feature_dim {
            return Err(shape_err(format!(
                "classifier expects {}-dim features, rendered features have {}",
                self.feature_dim, features.channels
            )));
        }
        let mut out = PixelMap::zeros(features.height, features.width, NUM_CLASSES);
        for (f, o) in features.pixels().zip(out.data.chunks_exact_mut(NUM_CLASSES)) {
            self.logits(f, o);
        }
        Ok(out)
    }

    /// Backpropagates logit adjoints to feature adjoints.
    pub fn backward(&self, d_logits: &PixelMap) -> PixelMap {
        let mut out = PixelMap::zeros(d_logits.height, d_logits.width, self.feature_dim);
        for (g, o) in d_logits
            .data
            .chunks_exact(NUM_CLASSES)
            .zip(out.data.chunks_exact_mut(self.feature_dim.max(1)))
        {
            for k in 0..NUM_CLASSES {
                let row = &self.weight[k * self.feature_dim..(k + 1) * self.feature_dim];
                for (x, w) in o.iter_mut().zip(row) {
                    *x += g[k] * w;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelRender {
    /// Full render with `label_logits` populated.
    pub output: RenderOutput,
    /// Row-major class ids.
    pub labels: Vec<u32>,
}

/// Pixels whose coverage falls below this are labeled background.
pub const FOREGROUND_ALPHA: f64 = 0.5;

/// Renders features, classifies them per pixel and takes the argmax, with
/// background forced where alpha is below one half.
pub fn render_labels(
    cloud: &GaussianCloud,
    camera: &Camera,
    settings: &RenderSettings,
    classifier: &Classifier,
) -> Result<LabelRender> {
    let mut output = render(cloud, camera, settings)?;
    let logits = classifier.apply(&output.feature)?;
    let labels = labels_from_logits(&logits, &output.alpha);
    output.label_logits = Some(logits);
    Ok(LabelRender { output, labels })
}

pub(crate) fn labels_from_logits(logits: &PixelMap, alpha: &PixelMap) -> Vec<u32> {
    logits
        .pixels()
        .zip(alpha.data.iter())
        .map(|(l, &a)| {
            if a < FOREGROUND_ALPHA {
                return BACKGROUND;
            }
            let mut best = 0;
            for k in 1..l.len() {
                if l[k] > l[best] {
                    best = k;
                }
            }
            best as u32
        })
        .collect()
}

//! Multi-stage feature extraction with a frozen random-weight CNN.

use std::path::Path;

use maae_tensor::{kernels, Conv2dSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MaaeError, Result};
use crate::format;

/// Channel counts of the four toy backbone stages.
pub const TOY_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const NUM_STAGES: usize = 4;
const LEAK: f32 = 0.1;

/// Per-stage feature maps of one image. Stage `s+1` has half the spatial
/// size of stage `s` and at least as many channels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub stages: Vec<Tensor<f32>>,
    pub image_id: String,
    pub class_id: usize,
}

impl FeatureStack {
    pub fn new(stages: Vec<Tensor<f32>>, image_id: impl Into<String>, class_id: usize) -> Result<Self> {
        validate_stages(&stages)?;
        Ok(FeatureStack {
            stages,
            image_id: image_id.into(),
            class_id,
        })
    }

    pub fn channel_plan(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s.shape()[0]).collect()
    }

    /// Spatial size of the deepest stage.
    pub fn final_grid(&self) -> (usize, usize) {
        let s = self.stages.last().expect("validated");
        (s.shape()[1], s.shape()[2])
    }
}

fn validate_stages(stages: &[Tensor<f32>]) -> Result<()> {
    let mismatch = |msg: String| Err(MaaeError::ConfigMismatch(msg));
    if stages.len() != NUM_STAGES {
        return mismatch(format!("expected {NUM_STAGES} stages, found {}", stages.len()));
    }
    for pair in stages.windows(2) {
        let (c0, h0, w0) = pair[0].dims3("feature stage")?;
        let (c1, h1, w1) = pair[1].dims3("feature stage")?;
        if h0 % 2 != 0 || w0 % 2 != 0 || h1 * 2 != h0 || w1 * 2 != w0 {
            return mismatch(format!("stage {h0}x{w0} must be exactly twice the next stage {h1}x{w1}"));
        }
        if c1 < c0 {
            return mismatch(format!("stage channels must not decrease ({c0} -> {c1})"));
        }
    }
    Ok(())
}

/// Stand-in for a pretrained backbone: four stride-2 3×3 convolutions with
/// bias and a leaky ramp, weights drawn once from a seed and never trained.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    layers: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl ToyBackbone {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = 3;
        let layers = TOY_CHANNELS
            .iter()
            .map(|&c_out| {
                let fan_in = c_in * 9;
                let bound = (6.0 / ((1.0 + (LEAK * LEAK) as f64) * fan_in as f64)).sqrt();
                let k = Tensor::from_fn(&[c_out, c_in, 3, 3], |_| rng.random_range(-bound..bound) as f32);
                let b = Tensor::from_fn(&[c_out], |_| rng.random_range(-0.1..0.1) as f32);
                c_in = c_out;
                (k, b)
            })
            .collect();
        ToyBackbone { layers }
    }

    /// Extracts the four stages of a `3×H×W` image with values in `[0, 1]`.
    pub fn extract(&self, image: &Tensor<f32>, image_id: &str, class_id: usize) -> Result<FeatureStack> {
        let (c, h, w) = image.dims3("toy_backbone_extract")?;
        if c != 3 {
            return Err(MaaeError::BadDims {
                height: h,
                width: w,
                reason: "image must have 3 channels",
            });
        }
        if h % 16 != 0 || w % 16 != 0 {
            return Err(MaaeError::BadDims {
                height: h,
                width: w,
                reason: "height and width must be divisible by 16",
            });
        }
        let mut x = image.map(|v| 2.0 * v - 1.0);
        let mut stages = Vec::with_capacity(NUM_STAGES);
        for (k, b) in &self.layers {
            let y = kernels::conv2d(&x, k, Some(b), Conv2dSpec::new(2, 1, 1))?;
            x = kernels::leaky_relu(&y, LEAK);
            stages.push(x.clone());
        }
        FeatureStack::new(stages, image_id, class_id)
    }
}

/// Convenience wrapper building the backbone from `seed` for one image.
pub fn toy_backbone_extract(image: &Tensor<f32>, seed: u64) -> Result<FeatureStack> {
    ToyBackbone::new(seed).extract(image, "", 0)
}

/// Writes the stages as a MAAF file. Identity and class live in the
/// dataset manifest; the file name carries the image id.
pub fn save_feature_file(stack: &FeatureStack, path: &Path) -> Result<()> {
    format::write_bytes(path, &format::encode_features(&stack.stages)?)
}

/// Reads a MAAF file; the image id is the file stem and the class is 0
/// until a manifest assigns one.
pub fn load_feature_file(path: &Path) -> Result<FeatureStack> {
    let stages = format::decode_features(&format::read_bytes(path)?)?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    FeatureStack::new(stages, id, 0)
}

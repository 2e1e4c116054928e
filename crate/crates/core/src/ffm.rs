//! Feature fusion: stride-2 convolutions carry each shallow stage down to the
//! next stage's resolution, where it is concatenated with that stage. The
//! concatenation becomes the new shallow feature, and after the last stage a
//! dilated convolution mixes information across the grid.

use maae_tensor::{Conv2dSpec, Real, Tape, Tensor, Var};
use rand::Rng;

use crate::backbone::FeatureStack;
use crate::error::{MaaeError, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::resample;

/// Token matrix `N×C` with the grid it was flattened from.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature {
    pub tokens: Tensor<f32>,
    pub grid: (usize, usize),
    pub channel_plan: Vec<usize>,
}

/// Recorded counterpart of [`FusedFeature`].
#[derive(Debug, Clone, Copy)]
pub struct FusedVar {
    pub tokens: Var,
    pub grid: (usize, usize),
}

const DOWNSAMPLE: Conv2dSpec = Conv2dSpec {
    stride: 2,
    dilation: 1,
    padding: 1,
};

/// Parameter layout of the fusion module inside a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Ffm {
    downsample: Vec<(ParamId, ParamId)>,
    dilated: (ParamId, ParamId),
    dilation: usize,
    channel_plan: Vec<usize>,
}

impl Ffm {
    pub fn init<F: Real>(store: &mut ParamStore<F>, channel_plan: &[usize], dilation: usize, rng: &mut impl Rng) -> Self {
        let mut low = channel_plan[0];
        let mut downsample = Vec::new();
        for (step, &high) in channel_plan[1..].iter().enumerate() {
            let k = store.add_uniform(format!("ffm.down{step}.weight"), &[low, low, 3, 3], low * 9, rng);
            let b = store.add_uniform(format!("ffm.down{step}.bias"), &[low], low * 9, rng);
            downsample.push((k, b));
            low += high;
        }
        let k = store.add_uniform("ffm.dilated.weight", &[low, low, 3, 3], low * 9, rng);
        let b = store.add_uniform("ffm.dilated.bias", &[low], low * 9, rng);
        Ffm {
            downsample,
            dilated: (k, b),
            dilation,
            channel_plan: channel_plan.to_vec(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channel_plan.iter().sum()
    }

    pub fn channel_plan(&self) -> &[usize] {
        &self.channel_plan
    }

    pub fn downsample_params(&self) -> &[(ParamId, ParamId)] {
        &self.downsample
    }

    pub fn dilated_params(&self) -> (ParamId, ParamId) {
        self.dilated
    }

    /// Fuses recorded stages into `N×C` tokens on the deepest stage's grid.
    pub fn fuse<F: Real>(&self, tape: &mut Tape<F>, bound: &Bound, stages: &[Var]) -> Result<FusedVar> {
        if stages.len() != self.channel_plan.len() {
            return Err(MaaeError::ConfigMismatch(format!(
                "fusion expects {} stages, got {}",
                self.channel_plan.len(),
                stages.len()
            )));
        }
        let mut low = stages[0];
        for (&high, &(k, b)) in stages[1..].iter().zip(&self.downsample) {
            low = ffm_downsample_step(tape, low, high, bound.var(k), Some(bound.var(b)))?;
        }
        let spec = Conv2dSpec::new(1, self.dilation, self.dilation);
        let (k, b) = self.dilated;
        let mixed = tape.conv2d(low, bound.var(k), Some(bound.var(b)), spec)?;
        let (_, h, w) = tape.value(mixed).dims3("ffm_fuse")?;
        Ok(FusedVar {
            tokens: tokens_from_grid(tape, mixed)?,
            grid: (h, w),
        })
    }

    /// Gradient-free fusion of a stack with the current parameters.
    pub fn fuse_value(&self, params: &ParamStore<f32>, stack: &FeatureStack) -> Result<FusedFeature> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let stages: Vec<Var> = stack.stages.iter().map(|s| tape.constant(s.clone())).collect();
        let fused = self.fuse(&mut tape, &bound, &stages)?;
        Ok(FusedFeature {
            tokens: tape.value(fused.tokens).clone(),
            grid: fused.grid,
            channel_plan: self.channel_plan.clone(),
        })
    }
}

/// Strided 3×3 convolution of `low` followed by concatenation with `high`.
pub fn ffm_downsample_step<F: Real>(tape: &mut Tape<F>, low: Var, high: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
    let (_, lh, lw) = tape.value(low).dims3("ffm_downsample_step")?;
    let (_, hh, hw) = tape.value(high).dims3("ffm_downsample_step")?;
    if lh != 2 * hh || lw != 2 * hw {
        return Err(maae_tensor::TensorError::ShapeMismatch {
            op: "ffm_downsample_step",
            lhs: tape.value(low).shape().to_vec(),
            rhs: tape.value(high).shape().to_vec(),
        }
        .into());
    }
    let down = tape.conv2d(low, kernel, bias, DOWNSAMPLE)?;
    Ok(tape.concat_channels(down, high)?)
}

/// `C×H×W` grid to `N×C` tokens; token `i` is grid cell `(i / W, i % W)`.
pub fn tokens_from_grid<F: Real>(tape: &mut Tape<F>, x: Var) -> Result<Var> {
    let (c, h, w) = tape.value(x).dims3("tokens_from_grid")?;
    let flat = tape.reshape(x, &[c, h * w])?;
    Ok(tape.transpose2d(flat)?)
}

/// Inverse of [`tokens_from_grid`].
pub fn grid_from_tokens<F: Real>(tape: &mut Tape<F>, tokens: Var, grid: (usize, usize)) -> Result<Var> {
    let (n, c) = tape.value(tokens).dims2("grid_from_tokens")?;
    if n != grid.0 * grid.1 {
        return Err(maae_tensor::TensorError::ShapeMismatch {
            op: "grid_from_tokens",
            lhs: vec![n, c],
            rhs: vec![grid.0, grid.1],
        }
        .into());
    }
    let t = tape.transpose2d(tokens)?;
    Ok(tape.reshape(t, &[c, grid.0, grid.1])?)
}

/// Parameter-free fusion used when the learnable module is ablated: every
/// stage is bilinearly resized to the deepest grid and concatenated.
pub fn bilinear_fuse(stack: &FeatureStack) -> Result<FusedFeature> {
    let (gh, gw) = stack.final_grid();
    let n = gh * gw;
    let channel_plan = stack.channel_plan();
    let c_total: usize = channel_plan.iter().sum();
    let mut tokens = vec![0.0f32; n * c_total];
    let mut offset = 0;
    for stage in &stack.stages {
        let (c, h, w) = stage.dims3("bilinear_fuse")?;
        for ch in 0..c {
            let plane = &stage.data()[ch * h * w..(ch + 1) * h * w];
            let small = resample::bilinear(plane, h, w, gh, gw, false);
            for (i, v) in small.into_iter().enumerate() {
                tokens[i * c_total + offset + ch] = v;
            }
        }
        offset += c;
    }
    Ok(FusedFeature {
        tokens: Tensor::new(&[n, c_total], tokens)?,
        grid: (gh, gw),
        channel_plan,
    })
}

//! Mixed-attention autoencoder: blocks of `DC(SA(X) + SA(Xᵀ)ᵀ)` with a skip
//! connection around every group of `M` blocks.

use maae_tensor::{Conv2dSpec, Real, Tape, TensorError, Var};
use rand::Rng;

use crate::error::{MaaeError, Result};
use crate::ffm::{grid_from_tokens, tokens_from_grid};
use crate::params::{Bound, ParamId, ParamStore};

/// Projections of one single-head attention, each `dim×dim`.
#[derive(Debug, Clone, Copy)]
pub struct SaParams {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub dim: usize,
}

impl SaParams {
    fn init<F: Real>(store: &mut ParamStore<F>, prefix: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let mut proj = |name: &str| store.add_uniform(format!("{prefix}.{name}"), &[dim, dim], dim, rng);
        SaParams {
            query: proj("query"),
            key: proj("key"),
            value: proj("value"),
            output: proj("output"),
            dim,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub spatial: SaParams,
    /// `None` for spatial-only blocks.
    pub channel: Option<SaParams>,
    pub dc_weight: ParamId,
    pub dc_bias: ParamId,
}

/// Architecture and parameter layout of the autoencoder.
#[derive(Debug, Clone)]
pub struct Maae {
    pub blocks: Vec<BlockParams>,
    pub residual_period: usize,
    pub dilation: usize,
    pub grid: (usize, usize),
    pub channels: usize,
}

impl Maae {
    #[allow(clippy::too_many_arguments)]
    pub fn init<F: Real>(
        store: &mut ParamStore<F>,
        grid: (usize, usize),
        channels: usize,
        num_blocks: usize,
        residual_period: usize,
        dilation: usize,
        mixed: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let n = grid.0 * grid.1;
        if residual_period > 0 && !num_blocks.is_multiple_of(residual_period) {
            log::warn!(
                "{num_blocks} blocks is not a multiple of the residual period {residual_period}; \
                 the last {} blocks have no skip connection",
                num_blocks % residual_period
            );
        }
        let blocks = (0..num_blocks)
            .map(|b| {
                let spatial = SaParams::init(store, &format!("block{b}.spatial"), channels, rng);
                let channel = mixed.then(|| SaParams::init(store, &format!("block{b}.channel"), n, rng));
                let fan_in = channels * 9;
                BlockParams {
                    spatial,
                    channel,
                    dc_weight: store.add_uniform(format!("block{b}.dc.weight"), &[channels, channels, 3, 3], fan_in, rng),
                    dc_bias: store.add_uniform(format!("block{b}.dc.bias"), &[channels], fan_in, rng),
                }
            })
            .collect();
        Maae {
            blocks,
            residual_period,
            dilation,
            grid,
            channels,
        }
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Runs the block stack on `x` (`N×C`).
    pub fn forward<F: Real>(&self, tape: &mut Tape<F>, bound: &Bound, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape();
        if shape != [self.tokens(), self.channels] {
            return Err(MaaeError::ConfigMismatch(format!(
                "model expects {}x{} tokens, got {:?}",
                self.tokens(),
                self.channels,
                shape
            )));
        }
        maae_forward(
            tape,
            x,
            |tape, b, h| mixed_block(tape, h, bound, &self.blocks[b], self.grid, self.dilation),
            self.blocks.len(),
            self.residual_period,
        )
    }
}

/// Applies `block` `num_blocks` times, adding the group input back after
/// every `period` blocks.
pub fn maae_forward<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    mut block: impl FnMut(&mut Tape<F>, usize, Var) -> Result<Var>,
    num_blocks: usize,
    period: usize,
) -> Result<Var> {
    let mut h = x;
    let mut checkpoint = x;
    for b in 0..num_blocks {
        h = block(tape, b, h)?;
        if period > 0 && (b + 1) % period == 0 {
            h = tape.add(h, checkpoint)?;
            checkpoint = h;
        }
    }
    Ok(h)
}

/// Single-head scaled dot-product attention over the rows of `x` (`m×k`).
pub fn sa<F: Real>(tape: &mut Tape<F>, x: Var, query: Var, key: Var, value: Var, output: Var) -> Result<Var> {
    let (_, k) = tape.value(x).dims2("sa")?;
    if tape.value(query).shape() != [k, k] {
        return Err(TensorError::ShapeMismatch {
            op: "sa",
            lhs: tape.value(x).shape().to_vec(),
            rhs: tape.value(query).shape().to_vec(),
        }
        .into());
    }
    let q = tape.matmul(x, query)?;
    let kk = tape.matmul(x, key)?;
    let v = tape.matmul(x, value)?;
    let kt = tape.transpose2d(kk)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scale(logits, F::one() / F::from_usize(k).unwrap().sqrt())?;
    let attn = tape.softmax_rows(logits)?;
    let mixed = tape.matmul(attn, v)?;
    Ok(tape.matmul(mixed, output)?)
}

fn sa_bound<F: Real>(tape: &mut Tape<F>, x: Var, bound: &Bound, p: &SaParams) -> Result<Var> {
    sa(
        tape,
        x,
        bound.var(p.query),
        bound.var(p.key),
        bound.var(p.value),
        bound.var(p.output),
    )
}

/// `DC(SA(X) + SA(Xᵀ)ᵀ)`, or `DC(SA(X))` when the channel branch is absent.
pub fn mixed_block<F: Real>(
    tape: &mut Tape<F>,
    x: Var,
    bound: &Bound,
    block: &BlockParams,
    grid: (usize, usize),
    dilation: usize,
) -> Result<Var> {
    let mut attended = sa_bound(tape, x, bound, &block.spatial)?;
    if let Some(channel) = &block.channel {
        let xt = tape.transpose2d(x)?;
        let yc = sa_bound(tape, xt, bound, channel)?;
        let yc = tape.transpose2d(yc)?;
        attended = tape.add(attended, yc)?;
    }
    let g = grid_from_tokens(tape, attended, grid)?;
    let spec = Conv2dSpec::new(1, dilation, dilation);
    let conv = tape.conv2d(g, bound.var(block.dc_weight), Some(bound.var(block.dc_bias)), spec)?;
    tokens_from_grid(tape, conv)
}

/// `‖Y − target‖² / N`.
pub fn recon_loss<F: Real>(tape: &mut Tape<F>, y: Var, target: Var) -> Result<Var> {
    let (n, _) = tape.value(y).dims2("recon_loss")?;
    Ok(tape.mse(y, target, n)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use maae_tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_token_attention_passes_value_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::<f64>::new();
        let mk = |tape: &mut Tape<f64>, rng: &mut ChaCha8Rng| tape.constant(Tensor::from_fn(&[3, 3], |_| rng.random_range(-1.0..1.0)));
        let x = tape.constant(Tensor::from_fn(&[1, 3], |i| i as f64 + 1.0));
        let (q, k, v, o) = (
            mk(&mut tape, &mut rng),
            mk(&mut tape, &mut rng),
            mk(&mut tape, &mut rng),
            mk(&mut tape, &mut rng),
        );
        let y = sa(&mut tape, x, q, k, v, o).unwrap();
        let xv = tape.matmul(x, v).unwrap();
        let expected = tape.matmul(xv, o).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(expected)).unwrap() < 1e-12);
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[5, 4], |i| (i % 4) as f64 * 0.3));
        let p: Vec<Var> = (0..4)
            .map(|_| tape.constant(Tensor::from_fn(&[4, 4], |_| rng.random_range(-1.0..1.0))))
            .collect();
        let y = sa(&mut tape, x, p[0], p[1], p[2], p[3]).unwrap();
        let d = tape.value(y).data();
        for r in 1..5 {
            for c in 0..4 {
                assert!((d[r * 4 + c] - d[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_stack_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let m = Maae::init(&mut store, (2, 2), 3, 0, 3, 4, true, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, true);
        let x = tape.constant(Tensor::from_fn(&[4, 3], |i| i as f64));
        let y = m.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn zero_dc_with_unit_period_is_identity() {
        let mut store = ParamStore::<f32>::new();
        let m = Maae::init(&mut store, (2, 2), 3, 3, 1, 4, true, &mut ChaCha8Rng::seed_from_u64(0));
        for b in &m.blocks {
            store.set(b.dc_weight, Tensor::zeros(&[3, 3, 3, 3])).unwrap();
            store.set(b.dc_bias, Tensor::zeros(&[3])).unwrap();
        }
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_fn(&[4, 3], |i| i as f32 * 0.7 - 2.0));
        let y = m.forward(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn wrong_token_shape_is_config_mismatch() {
        let mut store = ParamStore::<f32>::new();
        let m = Maae::init(&mut store, (2, 2), 3, 1, 1, 1, true, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(m.forward(&mut tape, &bound, x), Err(MaaeError::ConfigMismatch(_))));
    }

    #[test]
    fn recon_loss_substitution() {
        let mut tape = Tape::<f64>::new();
        let y = tape.constant(Tensor::new(&[2, 2], vec![2.0, 0.0, 0.0, 0.0]).unwrap());
        let t = tape.constant(Tensor::zeros(&[2, 2]));
        let l = recon_loss(&mut tape, y, t).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 2.0);
    }
}

//! Adaptive noise generator: a learned `N×C` weight matrix shapes Gaussian
//! noise injected into the fused tokens during training.

use maae_tensor::{Real, Tape, Tensor, TensorError, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::synthetic::mix;

/// State of the generator. `intensity` is the scalar `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseParams {
    pub w: Tensor<f32>,
    pub intensity: f64,
    pub seed: u64,
}

impl NoiseParams {
    pub fn new(tokens: usize, channels: usize, w_init: f64, intensity: f64, seed: u64) -> Self {
        NoiseParams {
            w: Tensor::full(&[tokens, channels], w_init as f32),
            intensity,
            seed,
        }
    }

    /// Value-only sampling, used outside training graphs.
    pub fn sample(&self, x: &Tensor<f32>, step: u64, item: u64) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(self.w.clone());
        let eps = standard_normal(self.seed, step, item, x.shape());
        let (x_star, eps_prime) = ang_sample(&mut tape, xv, wv, self.intensity as f32, &eps)?;
        Ok((tape.value(x_star).clone(), tape.value(eps_prime).clone()))
    }
}

/// I.i.d. `N(0, 1)` draws keyed by `(seed, step, item)`; the item index keeps
/// streams of different batch entries disjoint.
pub fn standard_normal<F: Real>(seed: u64, step: u64, item: u64, shape: &[usize]) -> Tensor<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0xa9, step, item));
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(&mut rng);
        F::from_f64_lossy(z)
    })
}

/// Records `ε′ = A·(W ⊙ ε)` and `X* = X + ε′`; returns `(X*, ε′)`.
pub fn ang_sample<F: Real>(tape: &mut Tape<F>, x: Var, w: Var, intensity: F, eps: &Tensor<F>) -> Result<(Var, Var)> {
    if tape.value(x).shape() != tape.value(w).shape() {
        return Err(TensorError::ShapeMismatch {
            op: "ang_sample",
            lhs: tape.value(x).shape().to_vec(),
            rhs: tape.value(w).shape().to_vec(),
        }
        .into());
    }
    let e = tape.constant(eps.clone());
    let shaped = tape.hadamard(w, e)?;
    let eps_prime = tape.scale(shaped, intensity)?;
    let x_star = tape.add(x, eps_prime)?;
    Ok((x_star, eps_prime))
}

/// `−λ_ang·L_e + λ_re·‖W‖₂`.
pub fn ang_loss<F: Real>(tape: &mut Tape<F>, l_e: Var, w: Var, lambda_ang: F, lambda_re: F) -> Result<Var> {
    let adversarial = tape.scale(l_e, -lambda_ang)?;
    let norm = tape.l2_norm(w)?;
    let shrink = tape.scale(norm, lambda_re)?;
    Ok(tape.add(adversarial, shrink)?)
}

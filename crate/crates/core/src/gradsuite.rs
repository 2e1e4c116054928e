//! Finite-difference verification of every differentiable operation, from
//! single tape ops up to the fused-feature → autoencoder → loss composite.

use maae_tensor::{grad_check, Conv2dSpec, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ang::{ang_loss, ang_sample};
use crate::error::{MaaeError, Result};
use crate::ffm::Ffm;
use crate::model::{mixed_block, recon_loss, sa, Maae};
use crate::params::{ParamId, ParamStore};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;
pub const INSTANCES: u64 = 20;

/// Worst result over all instances of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradSuiteEntry {
    pub name: String,
    pub instances: u64,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradSuiteEntry {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

type Loss = Box<dyn Fn(&mut Tape<f64>, Var) -> Result<Var>>;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Reduces `y` with fixed random weights so every element matters.
fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = tape.constant(random(tape.value(y).shape(), &mut rng));
    let p = tape.hadamard(y, w)?;
    Ok(tape.sum(p)?)
}

fn run(name: &str, tol: f64, instances: u64, build: impl Fn(u64) -> (Tensor<f64>, Loss)) -> Result<GradSuiteEntry> {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let (x, f) = build(seed);
        let report = grad_check(f, &x, EPS, tol)?;
        worst = worst.max(report.max_rel_error);
    }
    Ok(GradSuiteEntry {
        name: name.to_string(),
        instances,
        max_rel_error: worst,
        tol,
    })
}

fn unary(
    name: &str,
    shape_of: impl Fn(&mut ChaCha8Rng) -> Vec<usize>,
    op: fn(&mut Tape<f64>, Var) -> Result<Var>,
) -> Result<GradSuiteEntry> {
    run(name, TOL, INSTANCES, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = shape_of(&mut rng);
        let f: Loss = Box::new(move |t, x| {
            let y = op(t, x)?;
            weighted_sum(t, y, seed)
        });
        (random(&shape, &mut rng), f)
    })
}

/// A binary op checked with respect to one operand; the other is constant.
fn binary(
    name: &str,
    shapes: impl Fn(&mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>),
    wrt_lhs: bool,
    op: fn(&mut Tape<f64>, Var, Var) -> Result<Var>,
) -> Result<GradSuiteEntry> {
    run(name, TOL, INSTANCES, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = shapes(&mut rng);
        let (a, b) = (random(&a, &mut rng), random(&b, &mut rng));
        let (x, other) = if wrt_lhs { (a, b) } else { (b, a) };
        let f: Loss = Box::new(move |t, x| {
            let c = t.constant(other.clone());
            let y = if wrt_lhs { op(t, x, c)? } else { op(t, c, x)? };
            weighted_sum(t, y, seed)
        });
        (x, f)
    })
}

fn conv(name: &str, spec: Conv2dSpec, wrt: usize) -> Result<GradSuiteEntry> {
    run(name, TOL, INSTANCES, move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (ci, co, h) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(5..9));
        let mut parts = vec![
            random(&[ci, h, h], &mut rng),
            random(&[co, ci, 3, 3], &mut rng),
            random(&[co], &mut rng),
        ];
        let x = parts.remove(wrt);
        let f: Loss = Box::new(move |t, v| {
            let mut vars: Vec<Var> = parts.iter().map(|p| t.constant(p.clone())).collect();
            vars.insert(wrt, v);
            let y = t.conv2d(vars[0], vars[1], Some(vars[2]), spec)?;
            weighted_sum(t, y, seed)
        });
        (x, f)
    })
}

/// `sa` with the input or one of its four projections as the variable.
fn attention(wrt: usize) -> Result<GradSuiteEntry> {
    let names = ["sa wrt x", "sa wrt query", "sa wrt key", "sa wrt value", "sa wrt output"];
    run(names[wrt], TOL, INSTANCES, move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, k) = (rng.random_range(1..6), rng.random_range(1..6));
        let mut parts = vec![random(&[m, k], &mut rng)];
        for _ in 0..4 {
            parts.push(random(&[k, k], &mut rng));
        }
        let x = parts.remove(wrt);
        let f: Loss = Box::new(move |t, v| {
            let mut vars: Vec<Var> = parts.iter().map(|p| t.constant(p.clone())).collect();
            vars.insert(wrt, v);
            let y = sa(t, vars[0], vars[1], vars[2], vars[3], vars[4])?;
            weighted_sum(t, y, seed)
        });
        (x, f)
    })
}

/// Replaces parameter `id` of `store` with the tape variable `v`.
fn bind_with(t: &mut Tape<f64>, store: &ParamStore<f64>, id: Option<ParamId>, v: Var) -> crate::params::Bound {
    let mut bound = store.bind(t, false);
    if let Some(id) = id {
        bound.replace(id, v);
    }
    bound
}

/// `mixed_block` on a 2×2 or 2×3 grid, with respect to the tokens or a
/// named parameter of the block.
fn block(param: Option<&'static str>) -> Result<GradSuiteEntry> {
    let name = match param {
        None => "mixed_block wrt x".to_string(),
        Some(p) => format!("mixed_block wrt {p}"),
    };
    run(&name, TOL, INSTANCES, move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = (2, rng.random_range(2..4));
        let c = rng.random_range(2..5);
        let mut store = ParamStore::new();
        let model = Maae::init(&mut store, grid, c, 1, 1, 2, true, &mut rng);
        let block = model.blocks[0];
        let tokens = random(&[grid.0 * grid.1, c], &mut rng);
        let id = param.map(|p| store.id_of(&format!("block0.{p}")).expect("known parameter"));
        let x = match id {
            Some(id) => store.get(id).clone(),
            None => tokens.clone(),
        };
        let f: Loss = Box::new(move |t, v| {
            let bound = bind_with(t, &store, id, v);
            let input = if id.is_some() { t.constant(tokens.clone()) } else { v };
            let y = mixed_block(t, input, &bound, &block, grid, 2)?;
            weighted_sum(t, y, seed)
        });
        (x, f)
    })
}

/// Stage sizes of the composite: C = 1 + 1 + 2 + 4 = 8 on a 2×2 grid.
const COMPOSITE_PLAN: [usize; 4] = [1, 1, 2, 4];

/// `L_e(maae_forward(ang_sample(ffm_fuse(stack))))` and `L_ANG`, with
/// respect to the first stage, the deepest stage, an FFM kernel, an
/// attention projection or `W`.
fn composite(wrt: &'static str) -> Result<GradSuiteEntry> {
    run(&format!("composite wrt {wrt}"), COMPOSITE_TOL, INSTANCES, move |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes = [16, 8, 4, 2];
        let stages: Vec<Tensor<f64>> = COMPOSITE_PLAN
            .iter()
            .zip(sizes)
            .map(|(&c, s)| random(&[c, s, s], &mut rng))
            .collect();
        let mut store = ParamStore::new();
        let ffm = Ffm::init(&mut store, &COMPOSITE_PLAN, 4, &mut rng);
        let model = Maae::init(&mut store, (2, 2), 8, 2, 1, 4, true, &mut rng);
        let w = Tensor::from_fn(&[4, 8], |_| rng.random_range(0.0..0.5));
        let eps = random(&[4, 8], &mut rng);
        let id = match wrt {
            "ffm kernel" => Some(ffm.downsample_params()[1].0),
            "query" => Some(model.blocks[1].spatial.query),
            _ => None,
        };
        let x = match wrt {
            "stage 1" => stages[0].clone(),
            "stage 4" => stages[3].clone(),
            "W" => w.clone(),
            _ => store.get(id.unwrap()).clone(),
        };
        let f: Loss = Box::new(move |t, v| {
            let bound = bind_with(t, &store, id, v);
            let stage_vars: Vec<Var> = stages
                .iter()
                .enumerate()
                .map(|(i, s)| match (wrt, i) {
                    ("stage 1", 0) | ("stage 4", 3) => v,
                    _ => t.constant(s.clone()),
                })
                .collect();
            let wv = if wrt == "W" { v } else { t.constant(w.clone()) };
            let x = ffm.fuse(t, &bound, &stage_vars)?.tokens;
            let (x_star, _) = ang_sample(t, x, wv, 0.7, &eps)?;
            let y = model.forward(t, &bound, x_star)?;
            let l_e = recon_loss(t, y, x)?;
            if wrt == "W" {
                ang_loss(t, l_e, wv, 0.6, 1.0)
            } else {
                Ok(l_e)
            }
        });
        (x, f)
    })
}

fn elementwise(t: &mut Tape<f64>, kind: usize, a: Var, b: Var) -> Result<Var> {
    Ok(match kind {
        0 => t.add(a, b)?,
        1 => t.sub(a, b)?,
        _ => t.hadamard(a, b)?,
    })
}

/// Runs every check; the composite entries use the looser tolerance.
pub fn run_suite() -> Result<Vec<GradSuiteEntry>> {
    let mat = |rng: &mut ChaCha8Rng| vec![rng.random_range(1..6), rng.random_range(1..6)];
    let same = |rng: &mut ChaCha8Rng| {
        let s = vec![rng.random_range(1..5), rng.random_range(1..5)];
        (s.clone(), s)
    };
    let inner = |rng: &mut ChaCha8Rng| {
        let (m, k, n) = (rng.random_range(1..6), rng.random_range(1..6), rng.random_range(1..6));
        (vec![m, k], vec![k, n])
    };
    let grids = |rng: &mut ChaCha8Rng| {
        let h = rng.random_range(1..4);
        (vec![rng.random_range(1..4), h, h + 1], vec![rng.random_range(1..4), h, h + 1])
    };
    let mut out = vec![
        binary("matmul wrt lhs", inner, true, |t, a, b| Ok(t.matmul(a, b)?))?,
        binary("matmul wrt rhs", inner, false, |t, a, b| Ok(t.matmul(a, b)?))?,
        unary("transpose2d", mat, |t, x| Ok(t.transpose2d(x)?))?,
        unary("softmax_rows", mat, |t, x| Ok(t.softmax_rows(x)?))?,
    ];
    for (label, spec) in [
        ("stride 1", Conv2dSpec::new(1, 1, 1)),
        ("stride 2", Conv2dSpec::new(2, 1, 1)),
        ("dilation 4", Conv2dSpec::new(1, 4, 4)),
    ] {
        for (wrt, what) in ["x", "kernel", "bias"].iter().enumerate() {
            out.push(conv(&format!("conv2d {label} wrt {what}"), spec, wrt)?);
        }
    }
    out.push(binary("add", same, true, |t, a, b| elementwise(t, 0, a, b))?);
    out.push(binary("sub wrt rhs", same, false, |t, a, b| elementwise(t, 1, a, b))?);
    out.push(binary("hadamard", same, true, |t, a, b| elementwise(t, 2, a, b))?);
    out.push(unary("scale", mat, |t, x| Ok(t.scale(x, -1.7)?))?);
    out.push(binary("concat_channels wrt first", grids, true, |t, a, b| {
        Ok(t.concat_channels(a, b)?)
    })?);
    out.push(binary("concat_channels wrt second", grids, false, |t, a, b| {
        Ok(t.concat_channels(a, b)?)
    })?);
    out.push(binary("mse wrt y", same, true, |t, a, b| Ok(t.mse(a, b, 3)?))?);
    out.push(binary("mse wrt target", same, false, |t, a, b| Ok(t.mse(a, b, 3)?))?);
    out.push(unary("l2_norm", mat, |t, x| Ok(t.l2_norm(x)?))?);
    for wrt in 0..5 {
        out.push(attention(wrt)?);
    }
    for p in [
        None,
        Some("spatial.query"),
        Some("channel.value"),
        Some("dc.weight"),
        Some("dc.bias"),
    ] {
        out.push(block(p)?);
    }
    for wrt in ["stage 1", "stage 4", "ffm kernel", "query", "W"] {
        out.push(composite(wrt)?);
    }
    Ok(out)
}

/// Fails with the first entry above its tolerance.
pub fn check_suite(entries: &[GradSuiteEntry]) -> Result<()> {
    match entries.iter().find(|e| !e.passed()) {
        Some(e) => Err(MaaeError::ConfigMismatch(format!(
            "gradient check {} failed: relative error {:.3e} > {:.0e}",
            e.name, e.max_rel_error, e.tol
        ))),
        None => Ok(()),
    }
}

//! Brute-force reference implementations used to validate the optimized
//! kernels, plus the acceptance suite under `tests/`.

use maae_tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Rows of a row-major `m×k` matrix.
pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let k = t.shape()[1];
    t.data().chunks(k).map(|r| r.to_vec()).collect()
}

pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().enumerate().map(|(p, v)| v * b[p][j]).sum())
                .collect()
        })
        .collect()
}

pub fn transpose(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Attention written out token by token.
pub fn sa(x: &[Vec<f64>], q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], o: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (qs, ks, vs) = (matmul(x, q), matmul(x, k), matmul(x, v));
    let scale = (x[0].len() as f64).sqrt();
    let mixed: Vec<Vec<f64>> = qs
        .iter()
        .map(|qi| {
            let logits: Vec<f64> = ks
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / scale)
                .collect();
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..vs[0].len())
                .map(|c| e.iter().zip(&vs).map(|(w, vj)| w / z * vj[c]).sum())
                .collect()
        })
        .collect();
    matmul(&mixed, o)
}

/// Direct convolution of `x` (`ci×h×w`) with `k` (`co×ci×kh×kw`).
pub fn conv(x: &Tensor<f64>, k: &Tensor<f64>, bias: Option<&[f64]>, stride: usize, dilation: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let oh = (h + 2 * pad - dilation * (kh - 1) - 1) / stride + 1;
    let ow = (w + 2 * pad - dilation * (kw - 1) - 1) / stride + 1;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b[o]);
                for i in 0..ci {
                    for a in 0..kh {
                        for b in 0..kw {
                            let y = (r * stride + a * dilation) as isize - pad as isize;
                            let xx = (c * stride + b * dilation) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                                acc += xd[(i * h + y as usize) * w + xx as usize] * kd[((o * ci + i) * kh + a) * kw + b];
                            }
                        }
                    }
                }
                out[(o * oh + r) * ow + c] = acc;
            }
        }
    }
    (vec![co, oh, ow], out)
}

/// `DC(SA(X) + SA(Xᵀ)ᵀ)` on a token matrix whose row `r*w + c` holds grid
/// cell `(r, c)`.
#[allow(clippy::too_many_arguments)]
pub fn mixed_block(
    x: &[Vec<f64>],
    spatial: [&[Vec<f64>]; 4],
    channel: Option<[&[Vec<f64>]; 4]>,
    dc_weight: &Tensor<f64>,
    dc_bias: &[f64],
    grid: (usize, usize),
    dilation: usize,
) -> Vec<Vec<f64>> {
    let mut a = sa(x, spatial[0], spatial[1], spatial[2], spatial[3]);
    if let Some(ch) = channel {
        let yc = transpose(&sa(&transpose(x), ch[0], ch[1], ch[2], ch[3]));
        for (ra, rc) in a.iter_mut().zip(&yc) {
            for (p, q) in ra.iter_mut().zip(rc) {
                *p += q;
            }
        }
    }
    let c = x[0].len();
    let g = Tensor::from_fn(&[c, grid.0, grid.1], |i| {
        let (ch, cell) = (i / (grid.0 * grid.1), i % (grid.0 * grid.1));
        a[cell][ch]
    });
    let (_, out) = conv(&g, dc_weight, Some(dc_bias), 1, dilation, dilation);
    let n = grid.0 * grid.1;
    (0..n).map(|cell| (0..c).map(|ch| out[ch * n + cell]).collect()).collect()
}

/// AUROC as the fraction of (positive, negative) pairs ordered correctly,
/// ties counting one half.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

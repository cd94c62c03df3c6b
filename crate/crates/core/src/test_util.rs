//! Shared helpers for unit tests: seeded tensors and naive reference loops.

use rand::{Rng, SeedableRng};

use crate::autograd::{Tape, Var};
use crate::error::Result;
use crate::gradcheck::{check, GradCheckOptions, GradCheckReport, DEFAULT_TOLERANCE};
use crate::layers::SeedRng;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> SeedRng {
    SeedRng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut SeedRng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

pub fn dims(rng: &mut SeedRng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

/// Register `inputs` as parameters `x0, x1, ...` so the checker can probe
/// them like weights.
pub fn store_of(inputs: Vec<Tensor>) -> (ParamStore, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let ids = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t))
        .collect();
    (store, ids)
}

/// Finite-difference check of `f` with respect to every input; panics with
/// the report on failure.
pub fn assert_grads<F>(label: &str, inputs: Vec<Tensor>, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut store, ids) = store_of(inputs);
    let report = check(&mut store, None, &GradCheckOptions::default(), |t, s| {
        let vars: Vec<Var> = ids.iter().map(|&id| t.param(s, id)).collect();
        f(t, &vars)
    })
    .unwrap_or_else(|e| panic!("{label}: {e}"));
    assert!(
        report.passes(DEFAULT_TOLERANCE),
        "{label}: {:?}",
        report.failures(DEFAULT_TOLERANCE)
    );
    report
}

/// `[m x k] x [k x n]` by triple loop in f64.
pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    Tensor::from_fn(&[m, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        (0..k)
            .map(|p| a.at2(i, p) as f64 * b.at2(p, j) as f64)
            .sum::<f64>() as f32
    })
}

pub fn naive_linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Tensor {
    let mut y = naive_matmul(x, w);
    if let Some(b) = b {
        let n = b.numel();
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % n];
        }
    }
    y
}

pub fn naive_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn naive_layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
    let d = x.last_dim();
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        for (j, &v) in row.iter().enumerate() {
            out.push(
                ((v as f64 - mean) / (var + eps).sqrt() * gamma.data()[j] as f64
                    + beta.data()[j] as f64) as f32,
            );
        }
    }
    Tensor::new(x.shape(), out).unwrap()
}

/// Multi-head attention of the rows `members` of `q, k, v` (`[N x d]`),
/// optional additive `logit_bias(head, i, j)`. Returns `[members x d]`.
pub fn naive_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    members: &[usize],
    heads: usize,
    logit_bias: &dyn Fn(usize, usize, usize) -> f64,
) -> Vec<Vec<f32>> {
    let d = q.last_dim();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![vec![0.0f32; d]; members.len()];
    for h in 0..heads {
        for (i, &qi) in members.iter().enumerate() {
            let logits: Vec<f64> = members
                .iter()
                .enumerate()
                .map(|(j, &kj)| {
                    let dot: f64 = (0..dh)
                        .map(|c| q.at2(qi, h * dh + c) as f64 * k.at2(kj, h * dh + c) as f64)
                        .sum();
                    dot * scale + logit_bias(h, i, j)
                })
                .collect();
            let p = naive_softmax(&logits);
            for c in 0..dh {
                out[i][h * dh + c] = members
                    .iter()
                    .zip(&p)
                    .map(|(&vj, pj)| pj * v.at2(vj, h * dh + c) as f64)
                    .sum::<f64>() as f32;
            }
        }
    }
    out
}

pub fn naive_conv(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (k, cout) = (w.shape()[0], w.shape()[3]);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0f32; h * wd * cout];
    for y in 0..h {
        for xx in 0..wd {
            for co in 0..cout {
                let mut acc = b.data()[co] as f64;
                for ky in 0..k {
                    for kx in 0..k {
                        let (sy, sx) = (y as isize + ky as isize - pad, xx as isize + kx as isize - pad);
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += x.data()[(sy as usize * wd + sx as usize) * cin + ci] as f64
                                * w.data()[((ky * k + kx) * cin + ci) * cout + co] as f64;
                        }
                    }
                }
                out[(y * wd + xx) * cout + co] = acc as f32;
            }
        }
    }
    Tensor::new(&[h, wd, cout], out).unwrap()
}

pub fn naive_dwconv(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (h, wd, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = w.shape()[0];
    let pad = (k / 2) as isize;
    Tensor::from_fn(&[h, wd, c], |i| {
        let (y, xx, ch) = (i / (wd * c), (i / c) % wd, i % c);
        let mut acc = b.data()[ch] as f64;
        for ky in 0..k {
            for kx in 0..k {
                let (sy, sx) = (y as isize + ky as isize - pad, xx as isize + kx as isize - pad);
                if sy >= 0 && sx >= 0 && sy < h as isize && sx < wd as isize {
                    acc += x.data()[(sy as usize * wd + sx as usize) * c + ch] as f64
                        * w.data()[(ky * k + kx) * c + ch] as f64;
                }
            }
        }
        acc as f32
    })
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f32, label: &str) {
    assert_eq!(a.shape(), b.shape(), "{label}: shape");
    let diff = a.max_abs_diff(b);
    assert!(diff <= tol, "{label}: max abs diff {diff} > {tol}");
}

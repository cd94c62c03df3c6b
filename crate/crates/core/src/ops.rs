//! Differentiable tensor operations recorded on a [`Tape`].

use std::sync::Arc;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::tensor::{self, dims2, dims3, Tensor};

/// LayerNorm epsilon, added inside the square root.
pub const LAYER_NORM_EPS: f32 = 1e-5;

const SQRT_2_OVER_PI: f32 = 0.797_884_6;
const GELU_COEF: f32 = 0.044_715;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("shapes checked by caller")
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("add", av, bv)?;
        let out = zip_map(av, bv, |x, y| x + y);
        self.push("add", out, &[a, b], |g, _, _| {
            vec![Some(g.clone()), Some(g.clone())]
        })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("sub", av, bv)?;
        let out = zip_map(av, bv, |x, y| x - y);
        self.push("sub", out, &[a, b], |g, _, _| {
            vec![Some(g.clone()), Some(g.map(|v| -v))]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape("mul", av, bv)?;
        let out = zip_map(av, bv, |x, y| x * y);
        self.push("mul", out, &[a, b], |g, p, _| {
            vec![
                Some(zip_map(g, p[1], |g, y| g * y)),
                Some(zip_map(g, p[0], |g, x| g * x)),
            ]
        })
    }

    /// Sum of several same-shape vars.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var> {
        let (&first, rest) = vars
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_n of nothing".into()))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// `x + b` with `b` broadcast along every axis but the last.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.last_dim();
        if bv.numel() != c {
            return Err(shape_err(
                "add_bias",
                format!("bias of {} for last extent {c}", bv.numel()),
            ));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let bshape = bv.shape().to_vec();
        self.push("add_bias", out, &[x, b], move |g, _, _| {
            let mut gb = vec![0.0f32; c];
            for row in g.data().chunks(c) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            vec![Some(g.clone()), Some(Tensor::new(&bshape, gb).unwrap())]
        })
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push("scale", out, &[x], move |g, _, _| vec![Some(g.map(|v| v * c))])
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        let out = self.value(x).map(|v| v + c);
        self.push("add_scalar", out, &[x], |g, _, _| vec![Some(g.clone())])
    }

    /// `x * s` for a one-element var `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(shape_err(
                "mul_scalar",
                format!("scalar operand has shape {:?}", sv.shape()),
            ));
        }
        let k = sv.item();
        let sshape = sv.shape().to_vec();
        let out = self.value(x).map(|v| v * k);
        self.push("mul_scalar", out, &[x, s], move |g, p, _| {
            let k = p[1].item();
            let gs: f64 = g
                .data()
                .iter()
                .zip(p[0].data())
                .map(|(&g, &x)| g as f64 * x as f64)
                .sum();
            vec![
                Some(g.map(|v| v * k)),
                Some(Tensor::new(&sshape, vec![gs as f32]).unwrap()),
            ]
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, &[x], |g, p, _| {
            vec![Some(zip_map(g, p[0], |g, x| if x > 0.0 { g } else { 0.0 }))]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push("gelu", out, &[x], |g, p, _| {
            vec![Some(zip_map(g, p[0], |g, x| g * gelu_grad(x)))]
        })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let orig = self.shape(x).to_vec();
        self.push("reshape", out, &[x], move |g, _, _| {
            vec![Some(g.clone().reshape(&orig).unwrap())]
        })
    }

    /// `[m x k] * [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.value(a))?;
        let (k2, n) = dims2("matmul", self.value(b))?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner extents differ: [{m} x {k}] * [{k2} x {n}]"),
            ));
        }
        let c = kernels::gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new(&[m, n], c)?;
        self.push("matmul", out, &[a, b], move |g, p, _| {
            let ga = kernels::gemm_nt(g.data(), p[1].data(), m, n, k);
            let gb = kernels::gemm_tn(p[0].data(), g.data(), k, m, n);
            vec![
                Some(Tensor::new(&[m, k], ga).unwrap()),
                Some(Tensor::new(&[k, n], gb).unwrap()),
            ]
        })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = dims2("transpose", self.value(a))?;
        let out = Tensor::new(&[c, r], kernels::transpose(self.value(a).data(), r, c))?;
        self.push("transpose", out, &[a], move |g, _, _| {
            vec![Some(
                Tensor::new(&[r, c], kernels::transpose(g.data(), c, r)).unwrap(),
            )]
        })
    }

    /// `x[N x in] * w[in x out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Softmax over the last axis with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let c = out.last_dim();
        for row in out.data_mut().chunks_mut(c) {
            kernels::softmax_in_place(row);
        }
        self.push("softmax_rows", out, &[x], move |g, _, y| {
            let mut gx = vec![0.0f32; y.numel()];
            for ((gr, yr), out) in g
                .data()
                .chunks(c)
                .zip(y.data().chunks(c))
                .zip(gx.chunks_mut(c))
            {
                let s: f64 = gr.iter().zip(yr).map(|(&a, &b)| a as f64 * b as f64).sum();
                let s = s as f32;
                for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - s);
                }
            }
            vec![Some(Tensor::new(y.shape(), gx).unwrap())]
        })
    }

    /// LayerNorm over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = xv.last_dim();
        if gv.numel() != c || bv.numel() != c {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "affine params {:?}/{:?} for {c} channels",
                    gv.shape(),
                    bv.shape()
                ),
            ));
        }
        let mut out = vec![0.0f32; xv.numel()];
        for (xr, or) in xv.data().chunks(c).zip(out.chunks_mut(c)) {
            let (mean, rstd) = row_stats(xr, eps);
            for (j, (o, &v)) in or.iter_mut().zip(xr).enumerate() {
                *o = (v - mean) * rstd * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        let pshape = gv.shape().to_vec();
        self.push("layer_norm", out, &[x, gamma, beta], move |g, p, _| {
            let (xv, gv) = (p[0], p[1]);
            let mut gx = vec![0.0f32; xv.numel()];
            let mut ggamma = vec![0.0f64; c];
            let mut gbeta = vec![0.0f64; c];
            let inv_c = 1.0 / c as f64;
            for ((xr, gr), out) in xv
                .data()
                .chunks(c)
                .zip(g.data().chunks(c))
                .zip(gx.chunks_mut(c))
            {
                let (mean, rstd) = row_stats(xr, eps);
                let mut sum_gy = 0.0f64;
                let mut sum_gy_xhat = 0.0f64;
                for j in 0..c {
                    let xhat = ((xr[j] - mean) * rstd) as f64;
                    let gy = (gr[j] * gv.data()[j]) as f64;
                    sum_gy += gy;
                    sum_gy_xhat += gy * xhat;
                    ggamma[j] += gr[j] as f64 * xhat;
                    gbeta[j] += gr[j] as f64;
                }
                for j in 0..c {
                    let xhat = ((xr[j] - mean) * rstd) as f64;
                    let gy = (gr[j] * gv.data()[j]) as f64;
                    out[j] = (rstd as f64 * (gy - inv_c * sum_gy - xhat * inv_c * sum_gy_xhat))
                        as f32;
                }
            }
            let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<_>>();
            vec![
                Some(Tensor::new(xv.shape(), gx).unwrap()),
                Some(Tensor::new(&pshape, to32(ggamma)).unwrap()),
                Some(Tensor::new(&pshape, to32(gbeta)).unwrap()),
            ]
        })
    }

    /// Rows divided by `max(||row||, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f32) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.last_dim();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            let n = row_norm(row).max(eps);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        self.push("normalize_rows", out, &[x], move |g, p, y| {
            let mut gx = vec![0.0f32; y.numel()];
            for (((xr, yr), gr), out) in p[0]
                .data()
                .chunks(c)
                .zip(y.data().chunks(c))
                .zip(g.data().chunks(c))
                .zip(gx.chunks_mut(c))
            {
                let norm = row_norm(xr);
                if norm > eps {
                    let gy: f64 = gr.iter().zip(yr).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for ((o, &gv), &yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = ((gv as f64 - yv as f64 * gy) / norm as f64) as f32;
                    }
                } else {
                    for (o, &gv) in out.iter_mut().zip(gr) {
                        *o = gv / eps;
                    }
                }
            }
            vec![Some(Tensor::new(y.shape(), gx).unwrap())]
        })
    }

    /// Select rows of `x` (viewed as `[rows, last_dim]`) by index.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (rows, c) = (xv.rows(), xv.last_dim());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        if idx.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no indices".into()));
        }
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(&[idx.len(), c], out)?;
        let idx: Arc<[usize]> = idx.into();
        let xshape = xv.shape().to_vec();
        self.push("gather_rows", out, &[x], move |g, _, _| {
            let mut gx = Tensor::zeros(&xshape);
            let dst = gx.data_mut();
            for (k, &i) in idx.iter().enumerate() {
                let src = &g.data()[k * c..(k + 1) * c];
                for (d, &s) in dst[i * c..(i + 1) * c].iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![Some(gx)]
        })
    }

    /// `[N x p] ++ [N x q] -> [N x (p + q)]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, p) = dims2("concat_cols", self.value(a))?;
        let (n2, q) = dims2("concat_cols", self.value(b))?;
        if n != n2 {
            return Err(shape_err("concat_cols", format!("{n} rows vs {n2} rows")));
        }
        let mut out = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        let out = Tensor::new(&[n, p + q], out)?;
        self.push("concat_cols", out, &[a, b], move |g, _, _| {
            let mut ga = Vec::with_capacity(n * p);
            let mut gb = Vec::with_capacity(n * q);
            for row in g.data().chunks(p + q) {
                ga.extend_from_slice(&row[..p]);
                gb.extend_from_slice(&row[p..]);
            }
            vec![
                Some(Tensor::new(&[n, p], ga).unwrap()),
                Some(Tensor::new(&[n, q], gb).unwrap()),
            ]
        })
    }

    /// `[H, W, r*r*C] -> [r*H, r*W, C]`.
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let out = tensor::pixel_shuffle(self.value(x), r)?;
        self.push("pixel_shuffle", out, &[x], move |g, _, _| {
            vec![Some(tensor::pixel_unshuffle(g, r).unwrap())]
        })
    }

    /// Reflection-pad `[H, W, C]` at the bottom and right edges.
    pub fn pad_reflect(&mut self, x: Var, pad_h: usize, pad_w: usize) -> Result<Var> {
        let (h, w, c) = dims3("pad_reflect", self.value(x))?;
        if pad_h >= h || pad_w >= w {
            return Err(shape_err(
                "pad_reflect",
                format!("padding ({pad_h}, {pad_w}) too large for {h}x{w}"),
            ));
        }
        if pad_h == 0 && pad_w == 0 {
            return Ok(x);
        }
        let (oh, ow) = (h + pad_h, w + pad_w);
        let reflect = |i: usize, n: usize| if i < n { i } else { 2 * (n - 1) - i };
        let src_index: Arc<[usize]> = (0..oh * ow)
            .map(|k| reflect(k / ow, h) * w + reflect(k % ow, w))
            .collect();
        let xv = self.value(x);
        let mut out = Vec::with_capacity(oh * ow * c);
        for &s in src_index.iter() {
            out.extend_from_slice(&xv.data()[s * c..(s + 1) * c]);
        }
        let out = Tensor::new(&[oh, ow, c], out)?;
        self.push("pad_reflect", out, &[x], move |g, _, _| {
            let mut gx = vec![0.0f32; h * w * c];
            for (k, &s) in src_index.iter().enumerate() {
                for ch in 0..c {
                    gx[s * c + ch] += g.data()[k * c + ch];
                }
            }
            vec![Some(Tensor::new(&[h, w, c], gx).unwrap())]
        })
    }

    /// Keep the top-left `[h, w]` window of `[H, W, C]`.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (ih, iw, c) = dims3("crop", self.value(x))?;
        if h > ih || w > iw || h == 0 || w == 0 {
            return Err(shape_err("crop", format!("{h}x{w} from {ih}x{iw}")));
        }
        if h == ih && w == iw {
            return Ok(x);
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(h * w * c);
        for y in 0..h {
            out.extend_from_slice(&xv.data()[y * iw * c..(y * iw + w) * c]);
        }
        let out = Tensor::new(&[h, w, c], out)?;
        self.push("crop", out, &[x], move |g, _, _| {
            let mut gx = vec![0.0f32; ih * iw * c];
            for y in 0..h {
                gx[y * iw * c..(y * iw + w) * c]
                    .copy_from_slice(&g.data()[y * w * c..(y + 1) * w * c]);
            }
            vec![Some(Tensor::new(&[ih, iw, c], gx).unwrap())]
        })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        let shape = self.shape(x).to_vec();
        self.push("sum_all", Tensor::scalar(s as f32), &[x], move |g, _, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f32;
        let s = self.sum_all(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `sum(x * w)` against a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        same_shape("weighted_sum", self.value(x), weights)?;
        let s: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum();
        let w = weights.clone();
        self.push("weighted_sum", Tensor::scalar(s as f32), &[x], move |g, _, _| {
            let k = g.item();
            vec![Some(w.map(|v| v * k))]
        })
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        same_shape("l1_loss", self.value(pred), target)?;
        let n = target.numel() as f64;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| (p - t).abs() as f64)
            .sum();
        let t = target.clone();
        self.push("l1_loss", Tensor::scalar((s / n) as f32), &[pred], move |g, p, _| {
            let k = g.item() / n as f32;
            vec![Some(zip_map(p[0], &t, |p, t| {
                let d = p - t;
                if d > 0.0 {
                    k
                } else if d < 0.0 {
                    -k
                } else {
                    0.0
                }
            }))]
        })
    }

    /// Mean of `sqrt((pred - target)^2 + eps^2)`.
    pub fn charbonnier_loss(&mut self, pred: Var, target: &Tensor, eps: f32) -> Result<Var> {
        same_shape("charbonnier_loss", self.value(pred), target)?;
        let n = target.numel() as f64;
        let e2 = eps * eps;
        let s: f64 = self
            .value(pred)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&p, &t)| ((p - t) * (p - t) + e2).sqrt() as f64)
            .sum();
        let t = target.clone();
        self.push(
            "charbonnier_loss",
            Tensor::scalar((s / n) as f32),
            &[pred],
            move |g, p, _| {
                let k = g.item() / n as f32;
                vec![Some(zip_map(p[0], &t, |p, t| {
                    let d = p - t;
                    k * d / (d * d + e2).sqrt()
                }))]
            },
        )
    }
}

pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn row_stats(row: &[f32], eps: f32) -> (f32, f32) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    (mean as f32, (1.0 / (var + eps as f64).sqrt()) as f32)
}

fn row_norm(row: &[f32]) -> f32 {
    row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt() as f32
}

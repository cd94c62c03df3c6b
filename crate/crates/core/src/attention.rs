//! Multi-head scaled dot-product attention restricted to row groups.
//!
//! The token sequence is tiled by contiguous row ranges; every range attends
//! only to itself. Category attention, window attention and plain global
//! attention are all this op with different tilings (global = one range).

use std::ops::Range;
use std::sync::Arc;

use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, PAR_THRESHOLD};
use crate::tensor::{dims2, Tensor};

/// How rows are grouped and what is added to the logits.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    /// Contiguous ranges tiling `[0, N)` in order.
    pub groups: Vec<Range<usize>>,
    pub heads: usize,
    /// Logit multiplier, usually `1 / sqrt(head_dim)`.
    pub scale: f32,
    /// Per `(query, key)` pair within a group, a row of the bias table
    /// (`g * g` entries). Requires equal-size groups.
    pub bias_index: Option<Arc<[u32]>>,
    /// Additive logit mask, `n_groups * g * g` entries (0 or -inf).
    pub mask: Option<Arc<[f32]>>,
}

impl AttentionLayout {
    pub fn single_group(n: usize, heads: usize, head_dim: usize) -> Self {
        Self::chunked(n, n, heads, head_dim)
    }

    /// Consecutive chunks of `size`; the last one may be shorter.
    pub fn chunked(n: usize, size: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            groups: chunk_ranges(n, size),
            heads,
            scale: 1.0 / (head_dim as f32).sqrt(),
            bias_index: None,
            mask: None,
        }
    }

    fn validate(&self, n: usize, d: usize) -> Result<()> {
        if self.heads == 0 || d % self.heads != 0 {
            return Err(shape_err(
                "attention",
                format!("{d} channels not divisible into {} heads", self.heads),
            ));
        }
        let mut next = 0;
        for r in &self.groups {
            if r.start != next || r.end <= r.start {
                return Err(Error::InvalidArgument(format!(
                    "attention groups must tile [0, {n}) in order; bad range {r:?}"
                )));
            }
            next = r.end;
        }
        if next != n {
            return Err(Error::InvalidArgument(format!(
                "attention groups cover [0, {next}) but there are {n} rows"
            )));
        }
        if self.bias_index.is_some() || self.mask.is_some() {
            let g = self.groups[0].len();
            if self.groups.iter().any(|r| r.len() != g) {
                return Err(Error::InvalidArgument(
                    "logit bias and mask need equal-size groups".into(),
                ));
            }
            if let Some(idx) = &self.bias_index {
                if idx.len() != g * g {
                    return Err(shape_err(
                        "attention",
                        format!("bias index has {} entries for group size {g}", idx.len()),
                    ));
                }
            }
            if let Some(mask) = &self.mask {
                if mask.len() != self.groups.len() * g * g {
                    return Err(shape_err(
                        "attention",
                        format!(
                            "mask has {} entries for {} groups of {g}",
                            mask.len(),
                            self.groups.len()
                        ),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// `[0, n)` cut into chunks of `size`; the last may be shorter.
pub fn chunk_ranges(n: usize, size: usize) -> Vec<Range<usize>> {
    assert!(size > 0, "chunk size must be positive");
    (0..n).step_by(size).map(|s| s..(s + size).min(n)).collect()
}

struct Ctx<'a> {
    q: &'a [f32],
    k: &'a [f32],
    v: &'a [f32],
    d: usize,
    dh: usize,
    layout: &'a AttentionLayout,
    table: Option<&'a [f32]>,
}

impl Ctx<'_> {
    /// Attention probabilities for head `h` of group `gi`, `[g x g]`.
    fn probs(&self, gi: usize, h: usize) -> Vec<f32> {
        let r = &self.layout.groups[gi];
        let g = r.len();
        let heads = self.layout.heads;
        let mut p = vec![0.0f32; g * g];
        for i in 0..g {
            let qi = &self.q[(r.start + i) * self.d + h * self.dh..][..self.dh];
            let row = &mut p[i * g..(i + 1) * g];
            for (j, logit) in row.iter_mut().enumerate() {
                let kj = &self.k[(r.start + j) * self.d + h * self.dh..][..self.dh];
                let mut s = kernels::dot(qi, kj) * self.layout.scale;
                if let (Some(idx), Some(table)) = (&self.layout.bias_index, self.table) {
                    s += table[idx[i * g + j] as usize * heads + h];
                }
                if let Some(mask) = &self.layout.mask {
                    s += mask[(gi * g + i) * g + j];
                }
                *logit = s;
            }
            kernels::softmax_in_place(row);
        }
        p
    }

    /// Group output `[g x d]` and, when requested, the per-head probabilities.
    fn forward_group(&self, gi: usize, keep: bool) -> (Vec<f32>, Vec<Vec<f32>>) {
        let r = &self.layout.groups[gi];
        let g = r.len();
        let mut out = vec![0.0f32; g * self.d];
        let mut kept = Vec::new();
        for h in 0..self.layout.heads {
            let p = self.probs(gi, h);
            for i in 0..g {
                let o = &mut out[i * self.d + h * self.dh..][..self.dh];
                for j in 0..g {
                    let w = p[i * g + j];
                    if w == 0.0 {
                        continue;
                    }
                    let vj = &self.v[(r.start + j) * self.d + h * self.dh..][..self.dh];
                    for (a, &b) in o.iter_mut().zip(vj) {
                        *a += w * b;
                    }
                }
            }
            if keep {
                kept.push(p);
            }
        }
        (out, kept)
    }
}

struct GroupGrads {
    dq: Vec<f32>,
    dk: Vec<f32>,
    dv: Vec<f32>,
    dtable: Option<Vec<f32>>,
}

impl Tape {
    /// Grouped multi-head attention. `q`, `k`, `v` are `[N x d]`; the
    /// optional `bias_table` is `[T x heads]`, indexed by `layout.bias_index`.
    pub fn grouped_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias_table: Option<Var>,
        layout: &AttentionLayout,
    ) -> Result<Var> {
        let (n, d) = dims2("attention", self.value(q))?;
        for x in [k, v] {
            if self.shape(x) != [n, d] {
                return Err(shape_err(
                    "attention",
                    format!("q is [{n} x {d}] but k/v is {:?}", self.shape(x)),
                ));
            }
        }
        layout.validate(n, d)?;
        if layout.bias_index.is_some() != bias_table.is_some() {
            return Err(Error::InvalidArgument(
                "bias table and bias index must be given together".into(),
            ));
        }
        let heads = layout.heads;
        if let (Some(t), Some(idx)) = (bias_table, &layout.bias_index) {
            let tv = self.value(t);
            let rows = tv.numel() / heads;
            if tv.shape().len() != 2 || tv.shape()[1] != heads {
                return Err(shape_err(
                    "attention",
                    format!("bias table {:?} for {heads} heads", tv.shape()),
                ));
            }
            if let Some(&bad) = idx.iter().find(|&&i| i as usize >= rows) {
                return Err(Error::IndexOutOfRange {
                    op: "attention",
                    index: bad as usize,
                    bound: rows,
                });
            }
        }
        let mut parents = vec![q, k, v];
        parents.extend(bias_table);
        let keep = self.grad_enabled() && parents.iter().any(|&p| self.requires_grad(p));

        let dh = d / heads;
        let ctx = Ctx {
            q: self.value(q).data(),
            k: self.value(k).data(),
            v: self.value(v).data(),
            d,
            dh,
            layout,
            table: bias_table.map(|t| self.value(t).data()),
        };
        let work: usize = layout.groups.iter().map(|r| r.len() * r.len() * d).sum();
        let results: Vec<(Vec<f32>, Vec<Vec<f32>>)> = if work >= PAR_THRESHOLD {
            (0..layout.groups.len())
                .into_par_iter()
                .map(|gi| ctx.forward_group(gi, keep))
                .collect()
        } else {
            (0..layout.groups.len())
                .map(|gi| ctx.forward_group(gi, keep))
                .collect()
        };
        let mut out = Vec::with_capacity(n * d);
        let mut saved = Vec::with_capacity(if keep { results.len() } else { 0 });
        for (o, p) in results {
            out.extend_from_slice(&o);
            if keep {
                saved.push(p);
            }
        }
        let out = Tensor::new(&[n, d], out)?;
        let layout = layout.clone();
        let table_shape = bias_table.map(|t| self.shape(t).to_vec());
        self.push("grouped_attention", out, &parents, move |g, p, _| {
            let (qd, kd, vd, gd) = (p[0].data(), p[1].data(), p[2].data(), g.data());
            let scale = layout.scale;
            let grad_group = |gi: usize| -> GroupGrads {
                let r = &layout.groups[gi];
                let gs = r.len();
                let mut dq = vec![0.0f32; gs * d];
                let mut dk = vec![0.0f32; gs * d];
                let mut dv = vec![0.0f32; gs * d];
                let mut dtable = table_shape.as_ref().map(|s| vec![0.0f32; s[0] * s[1]]);
                let mut ds = vec![0.0f32; gs * gs];
                for h in 0..heads {
                    let probs = &saved[gi][h];
                    let col = h * dh;
                    for i in 0..gs {
                        let go = &gd[(r.start + i) * d + col..][..dh];
                        let prow = &probs[i * gs..(i + 1) * gs];
                        let mut dot_pd = 0.0f64;
                        for j in 0..gs {
                            let vj = &vd[(r.start + j) * d + col..][..dh];
                            let dp = kernels::dot(go, vj);
                            ds[i * gs + j] = dp;
                            dot_pd += prow[j] as f64 * dp as f64;
                            let pw = prow[j];
                            if pw != 0.0 {
                                let dvj = &mut dv[j * d + col..][..dh];
                                for (a, &b) in dvj.iter_mut().zip(go) {
                                    *a += pw * b;
                                }
                            }
                        }
                        let dot_pd = dot_pd as f32;
                        for j in 0..gs {
                            ds[i * gs + j] = prow[j] * (ds[i * gs + j] - dot_pd);
                        }
                    }
                    for i in 0..gs {
                        let qi = &qd[(r.start + i) * d + col..][..dh];
                        for j in 0..gs {
                            let s = ds[i * gs + j];
                            if s == 0.0 {
                                continue;
                            }
                            if let (Some(dt), Some(idx)) = (dtable.as_mut(), &layout.bias_index) {
                                dt[idx[i * gs + j] as usize * heads + h] += s;
                            }
                            let kj = &kd[(r.start + j) * d + col..][..dh];
                            let sq = s * scale;
                            {
                                let dqi = &mut dq[i * d + col..][..dh];
                                for (a, &b) in dqi.iter_mut().zip(kj) {
                                    *a += sq * b;
                                }
                            }
                            let dkj = &mut dk[j * d + col..][..dh];
                            for (a, &b) in dkj.iter_mut().zip(qi) {
                                *a += sq * b;
                            }
                        }
                    }
                }
                GroupGrads { dq, dk, dv, dtable }
            };
            let parts: Vec<GroupGrads> = if work >= PAR_THRESHOLD {
                (0..layout.groups.len())
                    .into_par_iter()
                    .map(grad_group)
                    .collect()
            } else {
                (0..layout.groups.len()).map(grad_group).collect()
            };
            let mut dq = Vec::with_capacity(n * d);
            let mut dk = Vec::with_capacity(n * d);
            let mut dv = Vec::with_capacity(n * d);
            let mut dtable = table_shape.as_ref().map(|s| vec![0.0f32; s[0] * s[1]]);
            for part in parts {
                dq.extend_from_slice(&part.dq);
                dk.extend_from_slice(&part.dk);
                dv.extend_from_slice(&part.dv);
                if let (Some(acc), Some(pt)) = (dtable.as_mut(), part.dtable) {
                    for (a, b) in acc.iter_mut().zip(pt) {
                        *a += b;
                    }
                }
            }
            let mut grads = vec![
                Some(Tensor::new(&[n, d], dq).unwrap()),
                Some(Tensor::new(&[n, d], dk).unwrap()),
                Some(Tensor::new(&[n, d], dv).unwrap()),
            ];
            if let (Some(s), Some(t)) = (&table_shape, dtable) {
                grads.push(Some(Tensor::new(s, t).unwrap()));
            }
            grads
        })
    }
}

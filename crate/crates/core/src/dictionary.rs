//! Learnable token dictionary and token-dictionary cross-attention (TDCA).
//!
//! Image tokens query a dictionary of `M` learned prototype tokens:
//!
//! ```text
//! Q = X W_Q,  K = D W_K,  V = D W_V
//! A = softmax(cos(Q, K) * s),  s = 1 + max(tau, 0) * ln(M)
//! TDCA(X) = A V
//! ```
//!
//! The `ln(M)` factor keeps the attention rows from flattening as the
//! dictionary grows. `A` doubles as a soft category descriptor: its row-wise
//! argmax routes tokens in category attention and selects the dictionary
//! entry the category-aware FFN injects.

use std::fmt::Write as _;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::layers::{Linear, INIT_STD};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Guards cosine similarity against zero-norm tokens.
pub const COSINE_EPS: f32 = 1e-8;

/// One layer's view of a token dictionary: the (possibly shared) entries
/// plus this layer's projections and temperature.
#[derive(Clone, Debug)]
pub struct TokenDictionary {
    /// `[M x d]` dictionary tokens.
    pub entries: ParamId,
    /// `d -> d_r`, applied to image tokens.
    pub w_q: Linear,
    /// `d -> d_r`, applied to dictionary tokens.
    pub w_k: Linear,
    /// `d -> d`, applied to dictionary tokens.
    pub w_v: Linear,
    /// Learnable temperature, one element.
    pub tau: ParamId,
    pub m: usize,
    pub d: usize,
    pub d_r: usize,
}

impl TokenDictionary {
    /// Allocate `[m x d]` dictionary entries, normal with std 0.02.
    pub fn new_entries<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        m: usize,
        d: usize,
        rng: &mut R,
    ) -> ParamId {
        store.add(name.to_string(), Tensor::randn(&[m, d], INIT_STD, rng))
    }

    /// Projections and temperature over existing `entries`. `tau` starts at
    /// `1 / ln(M)` so the effective scale starts at 2.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        entries: ParamId,
        d_r: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (m, d) = match *store.value(entries).shape() {
            [m, d] => (m, d),
            ref s => return Err(shape_err("token_dictionary", format!("entries {s:?}"))),
        };
        if d_r == 0 || d_r > d {
            return Err(Error::InvalidArgument(format!(
                "reduced dim {d_r} must lie in [1, {d}]"
            )));
        }
        let tau0 = if m > 1 { 1.0 / (m as f32).ln() } else { 0.0 };
        Ok(Self {
            entries,
            w_q: Linear::new(store, &format!("{prefix}.w_q"), d, d_r, true, rng),
            w_k: Linear::new(store, &format!("{prefix}.w_k"), d, d_r, true, rng),
            w_v: Linear::new(store, &format!("{prefix}.w_v"), d, d, true, rng),
            tau: store.add(format!("{prefix}.tau"), Tensor::scalar(tau0)),
            m,
            d,
            d_r,
        })
    }

    pub fn effective_scale(&self, store: &ParamStore) -> f32 {
        effective_scale(store.value(self.tau).item(), self.m)
    }

    /// `1 + relu(tau) * ln(M)` on the tape.
    fn scale_var(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let tau = tape.param(store, self.tau);
        let clamped = tape.relu(tau)?;
        let scaled = tape.scale(clamped, (self.m as f32).ln())?;
        tape.add_scalar(scaled, 1.0)
    }
}

/// `1 + max(tau, 0) * ln(m)`; never below 1.
pub fn effective_scale(tau: f32, m: usize) -> f32 {
    1.0 + tau.max(0.0) * (m.max(1) as f32).ln()
}

/// `[N x r] x [M x r] -> [N x M]` cosine similarities with norms floored at
/// `eps`.
pub fn cosine_similarity(tape: &mut Tape, q: Var, k: Var, eps: f32) -> Result<Var> {
    let (qs, ks) = (tape.shape(q), tape.shape(k));
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(shape_err(
            "cosine_similarity",
            format!("{qs:?} vs {ks:?}"),
        ));
    }
    let qn = tape.normalize_rows(q, eps)?;
    let kn = tape.normalize_rows(k, eps)?;
    let kt = tape.transpose(kn)?;
    tape.matmul(qn, kt)
}

/// Result of one TDCA evaluation.
#[derive(Clone, Debug)]
pub struct TdcaOutput {
    /// `[N x d]`, `A V`.
    pub enhanced: Var,
    /// `[N x M]` attention map.
    pub attn_map: Var,
    /// Row argmax of the attention map, lowest index on ties.
    pub argmax_idx: Vec<usize>,
    /// Row maximum of the attention map.
    pub max_weight: Vec<f32>,
    /// Dictionary size `M`.
    pub entries: usize,
}

/// Token-dictionary cross-attention of `x[N x d]` against `dict`.
pub fn tdca(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    dict: &TokenDictionary,
) -> Result<TdcaOutput> {
    match *tape.shape(x) {
        [_, d] if d == dict.d => {}
        ref s => {
            return Err(shape_err(
                "tdca",
                format!("tokens {s:?} for a dictionary of width {}", dict.d),
            ))
        }
    }
    let q = dict.w_q.forward(tape, store, x)?;
    let entries = tape.param(store, dict.entries);
    let k = dict.w_k.forward(tape, store, entries)?;
    let v = dict.w_v.forward(tape, store, entries)?;
    let sim = cosine_similarity(tape, q, k, COSINE_EPS)?;
    let s = dict.scale_var(tape, store)?;
    let logits = tape.mul_scalar(sim, s)?;
    let attn_map = tape.softmax_rows(logits)?;
    let enhanced = tape.matmul(attn_map, v)?;

    let a = tape.value(attn_map);
    let m = a.last_dim();
    let (argmax_idx, max_weight) = a
        .data()
        .chunks(m)
        .map(|row| {
            let i = kernels::argmax(row);
            (i, row[i])
        })
        .unzip();
    Ok(TdcaOutput {
        enhanced,
        attn_map,
        argmax_idx,
        max_weight,
        entries: dict.m,
    })
}

/// Counts of row-maximum attention weights over `[1/M, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub lo: f32,
    pub hi: f32,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    pub fn bin_edges(&self, i: usize) -> (f32, f32) {
        let w = (self.hi - self.lo) / self.bins() as f32;
        (self.lo + w * i as f32, self.lo + w * (i + 1) as f32)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `bin_lo,bin_hi,count` rows under a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("bin_lo,bin_hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let (lo, hi) = self.bin_edges(i);
            let _ = writeln!(s, "{lo},{hi},{c}");
        }
        s
    }
}

/// Histogram of `max_weight` values of a distribution over `m` entries.
pub fn weight_histogram(max_weight: &[f32], m: usize, bins: usize) -> Result<Histogram> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 bins, got {bins}")));
    }
    let lo = 1.0 / m.max(1) as f32;
    let hi = 1.0f32;
    let mut counts = vec![0usize; bins];
    let width = hi - lo;
    for &w in max_weight {
        let b = if width <= 0.0 {
            bins - 1
        } else {
            // Values a rounding step below 1/M still belong to the first bin.
            (((w - lo) / width * bins as f32).floor().max(0.0) as usize).min(bins - 1)
        };
        counts[b] += 1;
    }
    Ok(Histogram { lo, hi, counts })
}

pub fn max_weight_histogram(out: &TdcaOutput, bins: usize) -> Result<Histogram> {
    weight_histogram(&out.max_weight, out.entries, bins)
}

//! Category-aware feed-forward network.
//!
//! ```text
//! delta_j = D[argmax_j]
//! out     = x + DWConv(GELU([LN(x) W_1, delta W_d])) W_2
//! ```
//!
//! With the category projection removed this is a plain depth-wise-conv FFN.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::{DwConv2d, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::dims3;

#[derive(Clone, Debug)]
pub struct CffnParams {
    pub norm: LayerNorm,
    /// `d -> h`, with `h = 2d`.
    pub w_1: Linear,
    /// `d -> h_d`, with `h_d = d / 2`; `None` for the plain conv-FFN.
    pub w_d: Option<Linear>,
    /// 3x3 depth-wise over `h + h_d` channels.
    pub dw: DwConv2d,
    /// `h + h_d -> d`.
    pub w_2: Linear,
}

impl CffnParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        with_category: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = 2 * dim;
        let cat = if with_category { dim / 2 } else { 0 };
        if with_category && cat == 0 {
            return Err(Error::InvalidArgument(format!(
                "channel width {dim} too small for a category projection"
            )));
        }
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), dim);
        let w_1 = Linear::new(store, &format!("{prefix}.w_1"), dim, hidden, true, rng);
        let w_d = with_category
            .then(|| Linear::new(store, &format!("{prefix}.w_d"), dim, cat, true, rng));
        let dw = DwConv2d::new(store, &format!("{prefix}.dw"), 3, hidden + cat, rng);
        let w_2 = Linear::new(store, &format!("{prefix}.w_2"), hidden + cat, dim, true, rng);
        Ok(Self {
            norm,
            w_1,
            w_d,
            dw,
            w_2,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_1.in_dim
    }
}

/// Rows of the dictionary `entries[M x d]` picked by `idx`.
pub fn select_embedding(
    tape: &mut Tape,
    store: &ParamStore,
    entries: ParamId,
    idx: &[usize],
) -> Result<Var> {
    let d = tape.param(store, entries);
    tape.gather_rows(d, idx)
}

/// CFFN on `x[H, W, d]`; `delta` is `[H*W x d]` or `None` for the plain
/// conv-FFN. The residual is `x` itself.
pub fn cffn(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    delta: Option<Var>,
    p: &CffnParams,
) -> Result<Var> {
    let (h, w, d) = dims3("cffn", tape.value(x))?;
    if d != p.dim() {
        return Err(shape_err(
            "cffn",
            format!("{d} channels for an FFN of width {}", p.dim()),
        ));
    }
    let n = h * w;
    let flat = tape.reshape(x, &[n, d])?;
    let normed = p.norm.forward(tape, store, flat)?;
    let mut hidden = p.w_1.forward(tape, store, normed)?;
    match (&p.w_d, delta) {
        (Some(w_d), Some(delta)) => {
            if tape.shape(delta) != [n, d] {
                return Err(shape_err(
                    "cffn",
                    format!("category embedding {:?} for {n} tokens", tape.shape(delta)),
                ));
            }
            let cat = w_d.forward(tape, store, delta)?;
            hidden = tape.concat_cols(hidden, cat)?;
        }
        (None, None) => {}
        (Some(_), None) => {
            return Err(Error::InvalidArgument(
                "category FFN needs a category embedding".into(),
            ))
        }
        (None, Some(_)) => {
            return Err(Error::InvalidArgument(
                "plain FFN was given a category embedding".into(),
            ))
        }
    }
    let width = tape.value(hidden).last_dim();
    let act = tape.gelu(hidden)?;
    let grid = tape.reshape(act, &[h, w, width])?;
    let conv = p.dw.forward(tape, store, grid)?;
    let conv = tape.reshape(conv, &[n, width])?;
    let projected = p.w_2.forward(tape, store, conv)?;
    let projected = tape.reshape(projected, &[h, w, d])?;
    tape.add(x, projected)
}

//! (Shifted) window multi-head self-attention.
//!
//! The feature map is cyclically rolled by `-shift` on both axes and tiled
//! into non-overlapping `window x window` windows. Attention inside a window
//! adds a learned relative position bias; when shifted, token pairs that were
//! not neighbours before the roll are masked out.

use rand::Rng;

use crate::attention::AttentionLayout;
use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::layers::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dims3, invert_permutation, Tensor};

#[derive(Clone, Debug)]
pub struct WindowParams {
    pub window: usize,
    pub shift: usize,
    pub heads: usize,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    /// `[(2w - 1)^2 x heads]`, zero-initialised.
    pub rel_pos_bias: ParamId,
}

impl WindowParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        window: usize,
        shift: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if window == 0 || shift >= window {
            return Err(Error::InvalidArgument(format!(
                "need 0 <= shift < window, got shift {shift}, window {window}"
            )));
        }
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{dim} channels not divisible into {heads} heads"
            )));
        }
        let span = 2 * window - 1;
        Ok(Self {
            window,
            shift,
            heads,
            w_q: Linear::new(store, &format!("{prefix}.w_q"), dim, dim, true, rng),
            w_k: Linear::new(store, &format!("{prefix}.w_k"), dim, dim, true, rng),
            w_v: Linear::new(store, &format!("{prefix}.w_v"), dim, dim, true, rng),
            w_o: Linear::new(store, &format!("{prefix}.w_o"), dim, dim, true, rng),
            rel_pos_bias: store.add(
                format!("{prefix}.rel_pos_bias"),
                Tensor::zeros(&[span * span, heads]),
            ),
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.in_dim
    }
}

fn check_grid(h: usize, w: usize, window: usize, shift: usize) -> Result<()> {
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(shape_err(
            "window_partition",
            format!("{h}x{w} is not divisible by window {window}"),
        ));
    }
    if shift >= window {
        return Err(Error::InvalidArgument(format!(
            "shift {shift} must be smaller than window {window}"
        )));
    }
    Ok(())
}

/// Source token (row-major `y * w + x`) of every position of the
/// partitioned sequence: windows in raster order, tokens in raster order
/// inside each window, after rolling by `-shift`.
pub fn window_token_order(h: usize, w: usize, window: usize, shift: usize) -> Result<Vec<usize>> {
    check_grid(h, w, window, shift)?;
    let mut order = Vec::with_capacity(h * w);
    for wy in 0..h / window {
        for wx in 0..w / window {
            for iy in 0..window {
                for ix in 0..window {
                    let y = (wy * window + iy + shift) % h;
                    let x = (wx * window + ix + shift) % w;
                    order.push(y * w + x);
                }
            }
        }
    }
    Ok(order)
}

/// `[H, W, d] -> [n_windows, window^2, d]`.
pub fn window_partition(x: &Tensor, window: usize, shift: usize) -> Result<Tensor> {
    let (h, w, d) = dims3("window_partition", x)?;
    let order = window_token_order(h, w, window, shift)?;
    let mut out = Vec::with_capacity(x.numel());
    for &t in &order {
        out.extend_from_slice(&x.data()[t * d..(t + 1) * d]);
    }
    Tensor::new(&[order.len() / (window * window), window * window, d], out)
}

/// Inverse of [`window_partition`].
pub fn window_reverse(
    windows: &Tensor,
    h: usize,
    w: usize,
    window: usize,
    shift: usize,
) -> Result<Tensor> {
    let order = window_token_order(h, w, window, shift)?;
    let d = windows.last_dim();
    if windows.numel() != h * w * d {
        return Err(shape_err(
            "window_reverse",
            format!("{:?} does not hold a {h}x{w} grid", windows.shape()),
        ));
    }
    let mut out = vec![0.0f32; h * w * d];
    for (k, &t) in order.iter().enumerate() {
        out[t * d..(t + 1) * d].copy_from_slice(&windows.data()[k * d..(k + 1) * d]);
    }
    Tensor::new(&[h, w, d], out)
}

/// Row of the bias table for every `(query, key)` pair inside a window.
pub fn relative_position_index(window: usize) -> Vec<u32> {
    let n = window * window;
    let span = 2 * window - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / window, i % window);
        for j in 0..n {
            let (yj, xj) = (j / window, j % window);
            let dy = yi + window - 1 - yj;
            let dx = xi + window - 1 - xj;
            idx.push((dy * span + dx) as u32);
        }
    }
    idx
}

/// Additive mask `[n_windows, w^2, w^2]` for the shifted layout, or `None`
/// when `shift == 0`. Rolled positions are labelled by the slice they came
/// from; pairs with different labels get `-inf`.
pub fn shift_attention_mask(
    h: usize,
    w: usize,
    window: usize,
    shift: usize,
) -> Result<Option<Vec<f32>>> {
    check_grid(h, w, window, shift)?;
    if shift == 0 {
        return Ok(None);
    }
    let region = |p: usize, n: usize| {
        if p < n - window {
            0
        } else if p < n - shift {
            1
        } else {
            2
        }
    };
    let n = window * window;
    let mut mask = Vec::with_capacity(h * w * n);
    for wy in 0..h / window {
        for wx in 0..w / window {
            let labels: Vec<usize> = (0..n)
                .map(|t| {
                    let y = wy * window + t / window;
                    let x = wx * window + t % window;
                    region(y, h) * 3 + region(x, w)
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    mask.push(if labels[i] == labels[j] {
                        0.0
                    } else {
                        f32::NEG_INFINITY
                    });
                }
            }
        }
    }
    Ok(Some(mask))
}

/// Attention layout (windows, bias index, mask) for an `h x w` grid.
pub fn window_layout(h: usize, w: usize, p: &WindowParams) -> Result<AttentionLayout> {
    let n = p.window * p.window;
    let head_dim = p.dim() / p.heads;
    let mut layout = AttentionLayout::chunked(h * w, n, p.heads, head_dim);
    layout.bias_index = Some(relative_position_index(p.window).into());
    layout.mask = shift_attention_mask(h, w, p.window, p.shift)?.map(Into::into);
    Ok(layout)
}

/// Shifted-window MSA over `x[H, W, d]`.
pub fn swmsa(tape: &mut Tape, store: &ParamStore, x: Var, p: &WindowParams) -> Result<Var> {
    let (h, w, d) = dims3("swmsa", tape.value(x))?;
    if d != p.dim() {
        return Err(shape_err(
            "swmsa",
            format!("{d} channels for a branch of width {}", p.dim()),
        ));
    }
    let order = window_token_order(h, w, p.window, p.shift)?;
    let inverse = invert_permutation(&order);
    let layout = window_layout(h, w, p)?;

    let flat = tape.reshape(x, &[h * w, d])?;
    let tokens = tape.gather_rows(flat, &order)?;
    let q = p.w_q.forward(tape, store, tokens)?;
    let k = p.w_k.forward(tape, store, tokens)?;
    let v = p.w_v.forward(tape, store, tokens)?;
    let table = tape.param(store, p.rel_pos_bias);
    let attended = tape.grouped_attention(q, k, v, Some(table), &layout)?;
    let projected = p.w_o.forward(tape, store, attended)?;
    let restored = tape.gather_rows(projected, &inverse)?;
    tape.reshape(restored, &[h, w, d])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unshifted_single_window_is_identity() {
        let x = Tensor::from_fn(&[4, 4, 3], |i| i as f32);
        let p = window_partition(&x, 4, 0).unwrap();
        assert_eq!(p.shape(), &[1, 16, 3]);
        assert_eq!(p.data(), x.data());
    }

    #[test]
    fn shifted_marked_pixel_lands_in_last_tile() {
        // 8x8 grid, window 4, shift 2: pixel (0, 0) rolls to (6, 6), i.e.
        // window (1, 1) at inner offset (2, 2).
        let mut x = Tensor::zeros(&[8, 8, 1]);
        x.data_mut()[0] = 1.0;
        let p = window_partition(&x, 4, 2).unwrap();
        let hot: Vec<usize> = p
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v == 1.0)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hot, vec![3 * 16 + 2 * 4 + 2]);
    }

    #[test]
    fn indivisible_grid_is_rejected() {
        assert!(window_partition(&Tensor::zeros(&[6, 8, 1]), 4, 0).is_err());
        assert!(window_token_order(8, 8, 4, 4).is_err());
    }

    #[test]
    fn relative_index_range() {
        let idx = relative_position_index(3);
        assert_eq!(idx.len(), 81);
        assert_eq!(*idx.iter().max().unwrap(), 24);
        // Same position maps to the centre of the (2w-1)^2 table.
        assert_eq!(idx[0], 12);
    }

    #[test]
    fn mask_only_present_when_shifted() {
        assert!(shift_attention_mask(8, 8, 4, 0).unwrap().is_none());
        let m = shift_attention_mask(8, 8, 4, 2).unwrap().unwrap();
        assert_eq!(m.len(), 4 * 16 * 16);
        // The top-left window is never split by the roll.
        assert!(m[..256].iter().all(|&v| v == 0.0));
        // The bottom-right window mixes four source regions.
        assert!(m[3 * 256..].iter().any(|v| v.is_infinite()));
    }

    #[test]
    fn swmsa_matches_per_window_oracle() {
        use crate::layers::SeedRng;
        use crate::test_util::{naive_attention, naive_linear};
        use rand::SeedableRng;
        for (seed, (h, w, win, shift)) in [(8, 8, 4, 0), (8, 8, 4, 2), (4, 8, 4, 1), (6, 6, 3, 1)]
            .into_iter()
            .enumerate()
        {
            let mut rng = SeedRng::seed_from_u64(seed as u64);
            let (d, heads) = (4, 2);
            let mut store = ParamStore::new();
            let p = WindowParams::new(&mut store, "s", d, win, shift, heads, &mut rng).unwrap();
            for id in store.ids().collect::<Vec<_>>() {
                let shape = store.value(id).shape().to_vec();
                store.set(id, Tensor::randn(&shape, 0.5, &mut rng)).unwrap();
            }
            let x = Tensor::randn(&[h, w, d], 1.0, &mut rng);
            let mut tape = Tape::no_grad();
            let vx = tape.constant(x.clone());
            let y = swmsa(&mut tape, &store, vx, &p).unwrap();

            let lin = |l: &Linear, t: &Tensor| {
                naive_linear(t, store.value(l.weight), Some(store.value(l.bias.unwrap())))
            };
            let flat = x.clone().reshape(&[h * w, d]).unwrap();
            let (q, k, v) = (lin(&p.w_q, &flat), lin(&p.w_k, &flat), lin(&p.w_v, &flat));
            let table = store.value(p.rel_pos_bias);
            let span = 2 * win - 1;
            let mut attended = Tensor::zeros(&[h * w, d]);
            // Windows over the rolled grid; (ry, rx) are rolled coordinates.
            for wy in 0..h / win {
                for wx in 0..w / win {
                    let cells: Vec<(usize, usize)> = (0..win * win)
                        .map(|t| (wy * win + t / win, wx * win + t % win))
                        .collect();
                    let members: Vec<usize> = cells
                        .iter()
                        .map(|&(ry, rx)| ((ry + shift) % h) * w + (rx + shift) % w)
                        .collect();
                    // Original neighbours only: same side of every wrap seam.
                    let seam = |p: usize, n: usize| (p >= n - shift) as usize;
                    let bias = |hd: usize, i: usize, j: usize| {
                        let (a, b) = (cells[i], cells[j]);
                        if shift > 0
                            && (seam(a.0, h) != seam(b.0, h) || seam(a.1, w) != seam(b.1, w))
                        {
                            return f64::NEG_INFINITY;
                        }
                        let dy = a.0 + win - 1 - b.0;
                        let dx = a.1 + win - 1 - b.1;
                        table.at2(dy * span + dx, hd) as f64
                    };
                    let rows = naive_attention(&q, &k, &v, &members, heads, &bias);
                    for (&t, row) in members.iter().zip(rows) {
                        attended.data_mut()[t * d..(t + 1) * d].copy_from_slice(&row);
                    }
                }
            }
            let expect = lin(&p.w_o, &attended).reshape(&[h, w, d]).unwrap();
            crate::test_util::assert_close(tape.value(y), &expect, 1e-5, "swmsa");
        }
    }

    #[test]
    fn swmsa_grads() {
        use crate::gradcheck::{check, GradCheckOptions, DEFAULT_TOLERANCE};
        use crate::layers::SeedRng;
        use rand::SeedableRng;
        for seed in 0..20u64 {
            let mut rng = SeedRng::seed_from_u64(seed);
            let win = [2, 4][seed as usize % 2];
            let shift = (seed as usize / 2) % win;
            let (h, w) = (win * (1 + seed as usize % 2), win * 2);
            let mut store = ParamStore::new();
            let p = WindowParams::new(&mut store, "s", 4, win, shift, 2, &mut rng).unwrap();
            for id in store.ids().collect::<Vec<_>>() {
                let shape = store.value(id).shape().to_vec();
                store.set(id, Tensor::randn(&shape, 0.5, &mut rng)).unwrap();
            }
            let x = store.add("x", Tensor::randn(&[h, w, 4], 1.0, &mut rng));
            let report = check(&mut store, None, &GradCheckOptions::default(), |t, s| {
                let vx = t.param(s, x);
                swmsa(t, s, vx, &p)
            })
            .unwrap();
            assert!(report.passes(DEFAULT_TOLERANCE), "{:?}", report.failures(DEFAULT_TOLERANCE));
        }
    }

    proptest::proptest! {
        #[test]
        fn partition_round_trip(
            wh in 1usize..4, ww in 1usize..4, win in 1usize..5, c in 1usize..4, shift_seed in 0usize..100
        ) {
            let (h, w) = (wh * win, ww * win);
            let shift = shift_seed % win;
            let x = Tensor::from_fn(&[h, w, c], |i| i as f32);
            let p = window_partition(&x, win, shift).unwrap();
            proptest::prop_assert_eq!(window_reverse(&p, h, w, win, shift).unwrap(), x);
            let order = window_token_order(h, w, win, shift).unwrap();
            proptest::prop_assert_eq!(invert_permutation(&invert_permutation(&order)), order);
        }
    }
}

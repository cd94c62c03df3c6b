//! Content-adaptive token grouping and category-based multi-head
//! self-attention (AC-MSA).
//!
//! Each token is assigned the dictionary entry its TDCA row peaks at. Tokens
//! are stably sorted by that category, the sorted sequence is cut into
//! sub-categories of `n_s` tokens, attention runs inside each sub-category,
//! and the inverse permutation puts every token back in place. The routing
//! is discrete: gradients flow through the attended values only.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use crate::attention::{chunk_ranges, AttentionLayout};
use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::kernels;
use crate::layers::Linear;
use crate::params::ParamStore;
use crate::tensor::{invert_permutation, stable_argsort, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CategoryAssignment {
    /// Category of every token, in original order.
    pub category_idx: Vec<usize>,
    /// `perm[j]` is the original index of the `j`-th sorted token.
    pub perm: Vec<usize>,
    pub inv_perm: Vec<usize>,
    /// Half-open sub-category ranges over the sorted sequence.
    pub group_bounds: Vec<Range<usize>>,
    pub group_size: usize,
}

impl CategoryAssignment {
    pub fn new(category_idx: Vec<usize>, group_size: usize) -> Result<Self> {
        if group_size == 0 {
            return Err(Error::InvalidArgument("sub-category size must be >= 1".into()));
        }
        let perm = stable_argsort(&category_idx);
        let inv_perm = invert_permutation(&perm);
        let group_bounds = chunk_ranges(category_idx.len(), group_size);
        Ok(Self {
            category_idx,
            perm,
            inv_perm,
            group_bounds,
            group_size,
        })
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// Original token indices of sub-category `g`.
    pub fn group_members(&self, g: usize) -> &[usize] {
        &self.perm[self.group_bounds[g].clone()]
    }
}

/// Row-wise argmax of an `[N x M]` attention map, lowest index on ties.
pub fn assign_categories(attn_map: &Tensor) -> Vec<usize> {
    let m = attn_map.last_dim();
    attn_map.data().chunks(m).map(kernels::argmax).collect()
}

/// Reorder the rows of `x[N x d]` by category and cut them into groups.
pub fn categorize(
    tape: &mut Tape,
    x: Var,
    category_idx: &[usize],
    group_size: usize,
) -> Result<(Var, CategoryAssignment)> {
    let n = tape.value(x).rows();
    if category_idx.len() != n {
        return Err(shape_err(
            "categorize",
            format!("{} categories for {n} tokens", category_idx.len()),
        ));
    }
    let a = CategoryAssignment::new(category_idx.to_vec(), group_size)?;
    let y = tape.gather_rows(x, &a.perm)?;
    Ok((y, a))
}

/// Restore the original token order.
pub fn uncategorize(tape: &mut Tape, y: Var, a: &CategoryAssignment) -> Result<Var> {
    let n = tape.value(y).rows();
    if n != a.len() {
        return Err(shape_err(
            "uncategorize",
            format!("{n} rows for an assignment over {} tokens", a.len()),
        ));
    }
    tape.gather_rows(y, &a.inv_perm)
}

/// Projections of one AC-MSA branch.
#[derive(Clone, Debug)]
pub struct AcmsaParams {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub heads: usize,
}

impl AcmsaParams {
    pub fn new<R: rand::Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "{dim} channels not divisible into {heads} heads"
            )));
        }
        Ok(Self {
            w_q: Linear::new(store, &format!("{prefix}.w_q"), dim, dim, true, rng),
            w_k: Linear::new(store, &format!("{prefix}.w_k"), dim, dim, true, rng),
            w_v: Linear::new(store, &format!("{prefix}.w_v"), dim, dim, true, rng),
            w_o: Linear::new(store, &format!("{prefix}.w_o"), dim, dim, true, rng),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.w_q.in_dim
    }
}

/// AC-MSA over `x[N x d]` routed by a TDCA attention map `[N x M]`.
pub fn acmsa(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    attn_map: &Tensor,
    p: &AcmsaParams,
    group_size: usize,
) -> Result<Var> {
    let cats = assign_categories(attn_map);
    acmsa_with_categories(tape, store, x, &cats, p, group_size).map(|(y, _)| y)
}

/// AC-MSA with precomputed categories; also returns the assignment.
pub fn acmsa_with_categories(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    category_idx: &[usize],
    p: &AcmsaParams,
    group_size: usize,
) -> Result<(Var, CategoryAssignment)> {
    let d = tape.value(x).last_dim();
    if tape.shape(x).len() != 2 || d != p.dim() {
        return Err(shape_err(
            "acmsa",
            format!("tokens {:?} for a branch of width {}", tape.shape(x), p.dim()),
        ));
    }
    let (sorted, assignment) = categorize(tape, x, category_idx, group_size)?;
    let q = p.w_q.forward(tape, store, sorted)?;
    let k = p.w_k.forward(tape, store, sorted)?;
    let v = p.w_v.forward(tape, store, sorted)?;
    let layout = AttentionLayout {
        groups: assignment.group_bounds.clone(),
        heads: p.heads,
        scale: 1.0 / ((d / p.heads) as f32).sqrt(),
        bias_index: None,
        mask: None,
    };
    let attended = tape.grouped_attention(q, k, v, None, &layout)?;
    let projected = p.w_o.forward(tape, store, attended)?;
    let out = uncategorize(tape, projected, &assignment)?;
    Ok((out, assignment))
}

/// Analytic FLOPs of the attention core (`QK^T`, softmax, `AV`) when `n`
/// tokens are attended in groups of `group_size`. Projections are excluded.
pub fn attention_flops(n: u64, group_size: u64, d: u64, heads: u64) -> u64 {
    let g = group_size.min(n).max(1);
    let full = n / g;
    let rest = n % g;
    let per_group = |s: u64| 4 * s * s * d + 3 * heads * s * s;
    full * per_group(g) + per_group(rest)
}

/// FLOPs of one global attention over all `n` tokens.
pub fn global_attention_flops(n: u64, d: u64, heads: u64) -> u64 {
    attention_flops(n, n, d, heads)
}

/// Mean pairwise cosine similarity inside each group, averaged over groups
/// with at least two members.
pub fn mean_intra_group_cosine(x: &Tensor, groups: &[Vec<usize>]) -> f64 {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for g in groups.iter().filter(|g| g.len() >= 2) {
        let mut s = 0.0f64;
        let mut pairs = 0usize;
        for (a, &i) in g.iter().enumerate() {
            for &j in &g[a + 1..] {
                s += cosine(x.row(i), x.row(j));
                pairs += 1;
            }
        }
        total += s / pairs as f64;
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    dot / (na.max(1e-12) * nb.max(1e-12))
}

/// `token_row,token_col,category` for a row-major `height x width` grid.
pub fn category_map_csv(category_idx: &[usize], width: usize) -> String {
    let mut s = String::from("token_row,token_col,category\n");
    for (i, c) in category_idx.iter().enumerate() {
        let _ = writeln!(s, "{},{},{c}", i / width, i % width);
    }
    s
}

/// `group,position,token_row,token_col,category` for every sorted token.
pub fn group_membership_csv(a: &CategoryAssignment, width: usize) -> String {
    let mut s = String::from("group,position,token_row,token_col,category\n");
    for (g, r) in a.group_bounds.iter().enumerate() {
        for (pos, &t) in a.perm[r.clone()].iter().enumerate() {
            let _ = writeln!(
                s,
                "{g},{pos},{},{},{}",
                t / width,
                t % width,
                a.category_idx[t]
            );
        }
    }
    s
}

/// Write the category grid as an indexed-colour PNG. Categories beyond 256
/// wrap around the palette.
pub fn write_category_png(
    path: &Path,
    category_idx: &[usize],
    height: usize,
    width: usize,
) -> Result<()> {
    if category_idx.len() != height * width {
        return Err(shape_err(
            "write_category_png",
            format!("{} categories for a {height}x{width} grid", category_idx.len()),
        ));
    }
    let indices: Vec<u8> = category_idx.iter().map(|&c| (c % 256) as u8).collect();
    crate::image::write_indexed_png(path, width, height, &indices, &category_palette())
}

/// 256 well-spread RGB colours (golden-angle hue walk).
pub fn category_palette() -> Vec<[u8; 3]> {
    (0..256)
        .map(|i| {
            let hue = (i as f32 * 137.507_77) % 360.0;
            let light = if i % 2 == 0 { 0.55 } else { 0.4 };
            hsl_to_rgb(hue, 0.65, light)
        })
        .collect()
}

fn hsl_to_rgb(h: f32, s: f32, l: f32) -> [u8; 3] {
    let c = (1.0 - (2.0 * l - 1.0).abs()) * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = l - c / 2.0;
    let q = |v: f32| ((v + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [q(r), q(g), q(b)]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_and_uniform_rows() {
        let a = Tensor::new(&[3, 4], vec![
            0.0, 0.0, 1.0, 0.0, //
            0.25, 0.25, 0.25, 0.25, //
            0.0, 0.0, 0.0, 1.0,
        ])
        .unwrap();
        assert_eq!(assign_categories(&a), vec![2, 0, 3]);
    }

    #[test]
    fn hand_traced_grouping() {
        let a = CategoryAssignment::new(vec![1, 0, 1, 0], 2).unwrap();
        assert_eq!(a.perm, vec![1, 3, 0, 2]);
        assert_eq!(a.group_members(0), &[1, 3]);
        assert_eq!(a.group_members(1), &[0, 2]);
    }

    #[test]
    fn single_category_keeps_raster_order() {
        let a = CategoryAssignment::new(vec![3; 10], 4).unwrap();
        assert_eq!(a.perm, (0..10).collect::<Vec<_>>());
        assert_eq!(a.group_bounds, vec![0..4, 4..8, 8..10]);
    }

    #[test]
    fn zero_group_size_is_rejected() {
        assert!(CategoryAssignment::new(vec![0, 1], 0).is_err());
    }

    #[test]
    fn uncategorize_rejects_length_mismatch() {
        let mut tape = Tape::new();
        let a = CategoryAssignment::new(vec![0, 1, 0], 2).unwrap();
        let y = tape.constant(Tensor::zeros(&[4, 2]));
        assert!(uncategorize(&mut tape, y, &a).is_err());
    }

    #[test]
    fn flops_scale_linearly_for_groups() {
        let (d, h) = (16, 2);
        let a = attention_flops(64 * 64, 16, d, h);
        let b = attention_flops(128 * 128, 16, d, h);
        assert_eq!(b, 4 * a);
        let ga = global_attention_flops(64 * 64, d, h);
        let gb = global_attention_flops(128 * 128, d, h);
        assert_eq!(gb, 16 * ga);
        assert_eq!(attention_flops(2048, 16, d, h) * 2, attention_flops(4096, 16, d, h));
    }

    #[test]
    fn csv_layouts() {
        let csv = category_map_csv(&[2, 0, 1, 1], 2);
        assert_eq!(
            csv,
            "token_row,token_col,category\n0,0,2\n0,1,0\n1,0,1\n1,1,1\n"
        );
        let a = CategoryAssignment::new(vec![2, 0, 1, 1], 3).unwrap();
        let g = group_membership_csv(&a, 2);
        assert_eq!(g.lines().count(), 5);
        assert!(g.contains("0,0,0,1,0"));
    }

    #[test]
    fn acmsa_matches_gather_oracle() {
        use crate::layers::SeedRng;
        use crate::test_util::{naive_attention, naive_linear};
        use rand::{Rng, SeedableRng};
        for seed in 0..20 {
            let mut rng = SeedRng::seed_from_u64(seed);
            let heads = 1 + seed as usize % 2;
            let d = 4 * heads;
            let n = rng.random_range(1..40);
            let n_s = rng.random_range(1..=n);
            let mut store = ParamStore::new();
            let p = AcmsaParams::new(&mut store, "a", d, heads, &mut rng).unwrap();
            for id in store.ids().collect::<Vec<_>>() {
                let shape = store.value(id).shape().to_vec();
                store.set(id, Tensor::randn(&shape, 0.5, &mut rng)).unwrap();
            }
            let x = Tensor::randn(&[n, d], 1.0, &mut rng);
            let cats: Vec<usize> = (0..n).map(|_| rng.random_range(0..5)).collect();
            let mut tape = Tape::no_grad();
            let vx = tape.constant(x.clone());
            let (y, a) = acmsa_with_categories(&mut tape, &store, vx, &cats, &p, n_s).unwrap();

            let w = |l: &Linear| (store.value(l.weight).clone(), store.value(l.bias.unwrap()).clone());
            let lin = |l: &Linear, t: &Tensor| {
                let (wt, b) = w(l);
                naive_linear(t, &wt, Some(&b))
            };
            let (q, k, v) = (lin(&p.w_q, &x), lin(&p.w_k, &x), lin(&p.w_v, &x));
            // Groups straight from the definition: sort by category (stable),
            // cut into chunks of n_s.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by_key(|&i| cats[i]);
            let mut attended = Tensor::zeros(&[n, d]);
            for chunk in order.chunks(n_s) {
                let rows = naive_attention(&q, &k, &v, chunk, heads, &|_, _, _| 0.0);
                for (&t, row) in chunk.iter().zip(rows) {
                    attended.data_mut()[t * d..(t + 1) * d].copy_from_slice(&row);
                }
            }
            let expect = lin(&p.w_o, &attended);
            crate::test_util::assert_close(tape.value(y), &expect, 1e-5, "acmsa");
            assert_eq!(a.perm, order);
        }
    }

    #[test]
    fn single_group_equals_global_attention() {
        use crate::layers::SeedRng;
        use rand::SeedableRng;
        let mut rng = SeedRng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let p = AcmsaParams::new(&mut store, "a", 8, 2, &mut rng).unwrap();
        let x = Tensor::randn(&[12, 8], 1.0, &mut rng);
        let mut tape = Tape::no_grad();
        let vx = tape.constant(x);
        let (y, _) = acmsa_with_categories(&mut tape, &store, vx, &[0; 12], &p, 12).unwrap();
        let q = p.w_q.forward(&mut tape, &store, vx).unwrap();
        let k = p.w_k.forward(&mut tape, &store, vx).unwrap();
        let v = p.w_v.forward(&mut tape, &store, vx).unwrap();
        let g = tape
            .grouped_attention(q, k, v, None, &AttentionLayout::single_group(12, 2, 4))
            .unwrap();
        let g = p.w_o.forward(&mut tape, &store, g).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(g)) < 1e-5);
    }

    #[test]
    fn acmsa_grads() {
        use crate::gradcheck::{check, GradCheckOptions, DEFAULT_TOLERANCE};
        use crate::layers::SeedRng;
        use rand::{Rng, SeedableRng};
        for seed in 0..20 {
            let mut rng = SeedRng::seed_from_u64(seed);
            let n = rng.random_range(1..12);
            let mut store = ParamStore::new();
            let p = AcmsaParams::new(&mut store, "a", 4, 2, &mut rng).unwrap();
            for id in store.ids().collect::<Vec<_>>() {
                let shape = store.value(id).shape().to_vec();
                store.set(id, Tensor::randn(&shape, 0.5, &mut rng)).unwrap();
            }
            let x = store.add("x", Tensor::randn(&[n, 4], 1.0, &mut rng));
            let cats: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let n_s = rng.random_range(1..=n);
            let report = check(&mut store, None, &GradCheckOptions::default(), |t, s| {
                let vx = t.param(s, x);
                acmsa_with_categories(t, s, vx, &cats, &p, n_s).map(|(y, _)| y)
            })
            .unwrap();
            assert!(report.passes(DEFAULT_TOLERANCE), "{:?}", report.failures(DEFAULT_TOLERANCE));
        }
    }

    #[test]
    fn intra_group_cosine_of_identical_rows() {
        let x = Tensor::new(&[3, 2], vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0]).unwrap();
        let c = mean_intra_group_cosine(&x, &[vec![0, 1], vec![2]]);
        assert!((c - 1.0).abs() < 1e-9);
        let c = mean_intra_group_cosine(&x, &[vec![0, 2]]);
        assert!(c.abs() < 1e-9);
    }

    #[test]
    fn category_png_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        write_category_png(&path, &[0, 300, 2, 3, 4, 5], 2, 3).unwrap();
        let img = crate::image::Image::load(&path).unwrap();
        assert_eq!((img.height, img.width), (2, 3));
        assert!(write_category_png(&path, &[0, 1], 2, 3).is_err());
    }

    proptest::proptest! {
        #[test]
        fn round_trip_is_exact(
            cats in proptest::collection::vec(0usize..8, 1..200),
            n_s in 1usize..64,
            seed in 0u64..1000,
        ) {
            use crate::layers::SeedRng;
            use rand::SeedableRng;
            let mut rng = SeedRng::seed_from_u64(seed);
            let x = Tensor::randn(&[cats.len(), 3], 1.0, &mut rng);
            let mut tape = Tape::no_grad();
            let vx = tape.constant(x.clone());
            let (y, a) = categorize(&mut tape, vx, &cats, n_s).unwrap();
            let back = uncategorize(&mut tape, y, &a).unwrap();
            proptest::prop_assert_eq!(tape.value(back), &x);
            // Sorted categories are non-decreasing and groups tile the sequence.
            let sorted: Vec<usize> = a.perm.iter().map(|&i| cats[i]).collect();
            proptest::prop_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
            proptest::prop_assert_eq!(a.group_bounds.iter().map(|r| r.len()).sum::<usize>(), cats.len());
            proptest::prop_assert!(a.group_bounds.iter().all(|r| r.len() <= n_s));
        }
    }
}

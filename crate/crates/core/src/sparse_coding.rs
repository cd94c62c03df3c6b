//! Classical sparse coding: a lasso solved with ISTA over a coupled pair of
//! dictionaries, used as a reference point for dictionary cross-attention.
//!
//! ```text
//! alpha* = argmin ||D_L alpha - y||^2 + lambda ||alpha||_1
//! x~     = D_H alpha*
//! ```

use rand::{Rng, SeedableRng};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Dictionaries are `d x K` column-major in the mathematical sense; stored
/// row-major here as `d` rows of `K` values.
#[derive(Clone, Debug)]
pub struct SparseCodingProblem {
    d: usize,
    k: usize,
    d_l: Vec<f64>,
    d_h: Vec<f64>,
    y: Vec<f64>,
    lambda: f64,
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    v.signum() * (v.abs() - t).max(0.0)
}

impl SparseCodingProblem {
    /// Columns of `d_l` are rescaled to unit norm; `d_h` is used as given.
    pub fn new(d_l: &Tensor, d_h: &Tensor, y: &[f32], lambda: f64) -> Result<Self> {
        let [d, k] = d_l.shape()[..] else {
            return Err(shape_err("sparse_coding", format!("D_L {:?}", d_l.shape())));
        };
        if d_h.shape() != d_l.shape() || y.len() != d {
            return Err(shape_err(
                "sparse_coding",
                format!("D_L {:?}, D_H {:?}, y {}", d_l.shape(), d_h.shape(), y.len()),
            ));
        }
        if !(lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda {lambda} < 0")));
        }
        let mut low: Vec<f64> = d_l.data().iter().map(|&v| v as f64).collect();
        for j in 0..k {
            let norm = (0..d).map(|i| low[i * k + j].powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::InvalidArgument(format!("dictionary column {j} is zero")));
            }
            for i in 0..d {
                low[i * k + j] /= norm;
            }
        }
        Ok(Self {
            d,
            k,
            d_l: low,
            d_h: d_h.data().iter().map(|&v| v as f64).collect(),
            y: y.iter().map(|&v| v as f64).collect(),
            lambda,
        })
    }

    pub fn atoms(&self) -> usize {
        self.k
    }

    pub fn signal_dim(&self) -> usize {
        self.d
    }

    /// Column `j` of the (normalised) low-quality dictionary.
    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.d).map(|i| self.d_l[i * self.k + j]).collect()
    }

    fn apply(&self, dict: &[f64], alpha: &[f64]) -> Vec<f64> {
        (0..self.d)
            .map(|i| {
                let row = &dict[i * self.k..(i + 1) * self.k];
                row.iter().zip(alpha).map(|(a, b)| a * b).sum()
            })
            .collect()
    }

    fn apply_t(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.k];
        for (i, ri) in r.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&self.d_l[i * self.k..(i + 1) * self.k]) {
                *o += v * ri;
            }
        }
        out
    }

    /// `||D_L alpha - y||^2 + lambda ||alpha||_1`.
    pub fn objective(&self, alpha: &[f64]) -> f64 {
        let r = self.apply(&self.d_l, alpha);
        let fit: f64 = r.iter().zip(&self.y).map(|(a, b)| (a - b).powi(2)).sum();
        fit + self.lambda * alpha.iter().map(|a| a.abs()).sum::<f64>()
    }

    /// Largest eigenvalue of `D_L^T D_L` by power iteration.
    pub fn lipschitz(&self, iters: usize) -> f64 {
        let mut v = vec![1.0 / (self.k as f64).sqrt(); self.k];
        let mut lambda = 0.0;
        for _ in 0..iters.max(1) {
            let w = self.apply_t(&self.apply(&self.d_l, &v));
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return 0.0;
            }
            lambda = norm;
            v = w.iter().map(|x| x / norm).collect();
        }
        lambda
    }

    /// `1 / L` with a small safety margin on the power-iteration estimate.
    pub fn default_step(&self) -> f64 {
        let l = self.lipschitz(200);
        if l == 0.0 {
            1.0
        } else {
            1.0 / (l * 1.0001)
        }
    }

    /// ISTA from `alpha = 0`. Fails if the objective ever increases.
    pub fn lasso_solve(&self, iters: usize, step: f64) -> Result<Vec<f64>> {
        self.lasso_trace(iters, step).map(|(a, _)| a)
    }

    /// As [`lasso_solve`](Self::lasso_solve), also returning the objective
    /// after every iteration (index 0 is the start).
    pub fn lasso_trace(&self, iters: usize, step: f64) -> Result<(Vec<f64>, Vec<f64>)> {
        if !(step > 0.0) {
            return Err(Error::InvalidArgument(format!("step {step} must be positive")));
        }
        let thresh = step * self.lambda / 2.0;
        let mut alpha = vec![0.0; self.k];
        let mut objective = vec![self.objective(&alpha)];
        for it in 0..iters {
            let r: Vec<f64> = self
                .apply(&self.d_l, &alpha)
                .iter()
                .zip(&self.y)
                .map(|(a, b)| a - b)
                .collect();
            let g = self.apply_t(&r);
            for (a, gi) in alpha.iter_mut().zip(&g) {
                *a = soft_threshold(*a - step * gi, thresh);
            }
            let before = *objective.last().expect("nonempty");
            let after = self.objective(&alpha);
            if after > before + 1e-12 * before.abs().max(1.0) {
                return Err(Error::NonConvergent {
                    iteration: it + 1,
                    before,
                    after,
                });
            }
            objective.push(after);
        }
        Ok((alpha, objective))
    }

    /// `D_H alpha`.
    pub fn reconstruct_hq(&self, alpha: &[f64]) -> Vec<f64> {
        self.apply(&self.d_h, alpha)
    }

    /// `D_L alpha`.
    pub fn reconstruct_lq(&self, alpha: &[f64]) -> Vec<f64> {
        self.apply(&self.d_l, alpha)
    }

    pub fn signal(&self) -> &[f64] {
        &self.y
    }
}

/// Softmax of `scale * cos(y, entry_k)` over dictionary rows `entries[K x d]`.
pub fn dictionary_attention(y: &[f64], entries: &Tensor, scale: f64) -> Vec<f64> {
    let d = entries.last_dim();
    let yn = y.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-8);
    let logits: Vec<f64> = (0..entries.rows())
        .map(|k| {
            let e = &entries.data()[k * d..(k + 1) * d];
            let en = e.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-8);
            let dot: f64 = e.iter().zip(y).map(|(&a, b)| a as f64 * b).sum();
            scale * dot / (yn * en)
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.iter().map(|e| e / total).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalogyRow {
    pub signal_id: usize,
    pub lasso_nnz: usize,
    /// Attention weights above the uniform level `1/K`.
    pub tdca_effective_nnz: usize,
    pub lasso_err: f64,
    pub tdca_err: f64,
}

pub const ANALOGY_CSV_HEADER: &str = "signal_id,lasso_nnz,tdca_effective_nnz,lasso_err,tdca_err";

pub fn analogy_csv(rows: &[AnalogyRow]) -> String {
    let mut s = String::from(ANALOGY_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6}\n",
            r.signal_id, r.lasso_nnz, r.tdca_effective_nnz, r.lasso_err, r.tdca_err
        ));
    }
    s
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    if den == 0.0 {
        num
    } else {
        num / den
    }
}

/// Compare lasso codes with dictionary attention on each signal.
///
/// `entries` is the dictionary as `K` rows of width `d`; the lasso uses it
/// (column-normalised) as both `D_L` and `D_H`, the attention mixes the raw
/// rows with weights `softmax(scale * cos)`.
pub fn analogy_report(
    signals: &[Vec<f32>],
    entries: &Tensor,
    lambda: f64,
    scale: f64,
    iters: usize,
) -> Result<Vec<AnalogyRow>> {
    let [k, d] = entries.shape()[..] else {
        return Err(shape_err("analogy_report", format!("entries {:?}", entries.shape())));
    };
    let mut dict = Tensor::zeros(&[d, k]);
    for (i, v) in entries.data().iter().enumerate() {
        dict.data_mut()[(i % d) * k + i / d] = *v;
    }
    let mut rows = Vec::with_capacity(signals.len());
    for (id, y) in signals.iter().enumerate() {
        let p = SparseCodingProblem::new(&dict, &dict, y, lambda)?;
        let alpha = p.lasso_solve(iters, p.default_step())?;
        let lasso_nnz = alpha.iter().filter(|a| a.abs() > 1e-8).count();
        let lasso_err = relative_error(&p.reconstruct_lq(&alpha), p.signal());

        let w = dictionary_attention(p.signal(), entries, scale);
        let uniform = 1.0 / k as f64;
        let tdca_effective_nnz = w.iter().filter(|&&v| v > uniform).count();
        let mix: Vec<f64> = (0..d)
            .map(|j| (0..k).map(|e| w[e] * entries.at2(e, j) as f64).sum())
            .collect();
        let tdca_err = relative_error(&mix, p.signal());
        rows.push(AnalogyRow {
            signal_id: id,
            lasso_nnz,
            tdca_effective_nnz,
            lasso_err,
            tdca_err,
        });
    }
    Ok(rows)
}

/// Signals that are sparse non-negative combinations of `atoms` entries.
pub fn toy_signals<R: Rng + ?Sized>(
    entries: &Tensor,
    n: usize,
    atoms: usize,
    rng: &mut R,
) -> Vec<Vec<f32>> {
    let (k, d) = (entries.rows(), entries.last_dim());
    (0..n)
        .map(|_| {
            let mut y = vec![0.0f32; d];
            for _ in 0..atoms {
                let e = rng.random_range(0..k);
                let c: f32 = rng.random_range(0.5..1.5);
                for (yj, v) in y.iter_mut().zip(entries.row(e)) {
                    *yj += c * v;
                }
            }
            y
        })
        .collect()
}

/// A `d x d` orthonormal matrix (Gram-Schmidt on a random Gaussian).
pub fn random_orthonormal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Tensor {
    let raw = Tensor::randn(&[d, d], 1.0, rng);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    for j in 0..d {
        let mut v: Vec<f64> = (0..d).map(|i| raw.at2(i, j) as f64).collect();
        for _ in 0..2 {
            for c in &cols {
                let proj: f64 = c.iter().zip(&v).map(|(a, b)| a * b).sum();
                for (vi, ci) in v.iter_mut().zip(c) {
                    *vi -= proj * ci;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        cols.push(v.iter().map(|x| x / norm).collect());
    }
    Tensor::from_fn(&[d, d], |idx| cols[idx % d][idx / d] as f32)
}

/// Outcome of [`oracle_suite`].
#[derive(Clone, Debug)]
pub struct OracleReport {
    /// Solution of the `y = 2 e_1`, `lambda = 0.5` identity-dictionary case.
    pub fixture: Vec<f64>,
    /// Largest `|alpha - soft(D^T y, lambda / 2)|` over the orthonormal cases.
    pub closed_form_max_err: f64,
    pub orthonormal_cases: usize,
    /// Random general problems whose ISTA objective never increased.
    pub monotone_ok: usize,
    pub monotone_cases: usize,
    /// `(case, message)` for every failed problem.
    pub failures: Vec<(usize, String)>,
}

impl OracleReport {
    pub fn fixture_error(&self) -> f64 {
        let mut expect = vec![0.0; self.fixture.len()];
        expect[0] = 1.75;
        self.fixture
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.failures.is_empty() && self.closed_form_max_err <= tol && self.fixture_error() <= tol
    }
}

/// Lasso against its closed form on orthonormal dictionaries, plus
/// objective monotonicity on random over-complete ones.
pub fn oracle_suite(seed: u64, cases: usize, iters: usize) -> Result<OracleReport> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let fixture = SparseCodingProblem::new(&eye, &eye, &[2.0, 0.0, 0.0, 0.0], 0.5)?
        .lasso_solve(iters, 1.0)?;

    let mut closed_form_max_err = 0.0f64;
    let mut failures = Vec::new();
    for case in 0..cases {
        let d = rng.random_range(2..=12);
        let q = random_orthonormal(d, &mut rng);
        let y: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lambda = rng.random_range(0.0..1.5);
        let p = SparseCodingProblem::new(&q, &q, &y, lambda)?;
        match p.lasso_solve(iters, 1.0) {
            Ok(alpha) => {
                for (j, a) in alpha.iter().enumerate() {
                    let c: f64 = p.column(j).iter().zip(p.signal()).map(|(u, v)| u * v).sum();
                    closed_form_max_err = closed_form_max_err.max((a - soft_threshold(c, lambda / 2.0)).abs());
                }
            }
            Err(e) => failures.push((case, format!("orthonormal: {e}"))),
        }
    }

    let mut monotone_ok = 0;
    for case in 0..cases {
        let d = rng.random_range(2..=16);
        let k = rng.random_range(1..=32);
        let dict = Tensor::randn(&[d, k], 1.0, &mut rng);
        let y: Vec<f32> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lambda = rng.random_range(0.0..1.0);
        let p = SparseCodingProblem::new(&dict, &dict, &y, lambda)?;
        match p.lasso_trace(iters, p.default_step()) {
            Ok(_) => monotone_ok += 1,
            Err(e) => failures.push((case, format!("monotone: {e}"))),
        }
    }
    Ok(OracleReport {
        fixture,
        closed_form_max_err,
        orthonormal_cases: cases,
        monotone_ok,
        monotone_cases: cases,
        failures,
    })
}

//! Central finite-difference gradient checks.
//!
//! The function under test maps the parameters in a [`ParamStore`] to an
//! output tensor of any shape. It is reduced to a scalar by a fixed random
//! projection `L = sum(out * R)`, evaluated in `f64` to keep summation noise
//! out of the difference quotient. Each parameter is probed along its own
//! gradient direction and a few random unit directions:
//!
//! ```text
//! analytic = <g, u>
//! numeric  = (L(p + h u) - L(p - h u)) / 2h
//! rel_err  = |analytic - numeric| / max(|analytic|, |numeric|, 0.1 ||g||, floor)
//! ```
//!
//! The absolute `floor` covers parameters whose exact gradient is zero
//! (a key bias under softmax, say): there both sides are f32 rounding noise.
//!
//! Several step sizes are tried per direction and the best kept, so an
//! isolated kink (ReLU, an argmax flip) inside one step does not fail the
//! check. Each step `h` is sampled at `PROBES` symmetric offsets `t` up to
//! `h`, giving three more estimates besides plain differences: Richardson
//! `(4 D(h/2) - D(h)) / 3`, and the slope of a least-squares odd cubic
//! through `L(p + t u) - L(p - t u)`, which averages away f32 rounding noise
//! in deep compositions while absorbing curvature.

use rand::{Rng, SeedableRng};

use crate::autograd::{Tape, Var};
use crate::categorize::{acmsa_with_categories, AcmsaParams};
use crate::cffn::{cffn, CffnParams};
use crate::dictionary::{tdca, TokenDictionary};
use crate::error::Result;
use crate::layers::{Conv2d, DwConv2d, LayerNorm, Linear, SeedRng};
use crate::model::{AtdModel, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::window::{swmsa, WindowParams};

pub const DEFAULT_TOLERANCE: f64 = 2e-2;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub random_directions: usize,
    pub steps: Vec<f64>,
    pub seed: u64,
    pub abs_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            random_directions: 2,
            steps: vec![1e-2, 3e-3, 1e-3, 3e-2, 1e-1],
            seed: 0,
            abs_floor: 5e-3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub numel: usize,
    pub grad_norm: f64,
    /// Worst relative error over all probe directions.
    pub max_rel_err: f64,
}

impl ParamReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamReport>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.max_rel_err)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.passes(tol))
    }

    pub fn failures(&self, tol: f64) -> Vec<&ParamReport> {
        self.params.iter().filter(|p| !p.passes(tol)).collect()
    }
}

fn projection(out: &Tensor, r: &Tensor) -> f64 {
    out.data()
        .iter()
        .zip(r.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum()
}

/// Symmetric offsets sampled per step; must be even.
const PROBES: usize = 6;

/// Fit `y = 2 (a t + b t^3)` by least squares and return `a`.
fn odd_cubic_slope(ts: &[f64], ys: &[f64]) -> f64 {
    let (mut s2, mut s4, mut s6, mut y1, mut y3) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&t, &y) in ts.iter().zip(ys) {
        let (t2, y) = (t * t, y / 2.0);
        s2 += t2;
        s4 += t2 * t2;
        s6 += t2 * t2 * t2;
        y1 += y * t;
        y3 += y * t * t2;
    }
    let det = s2 * s6 - s4 * s4;
    if det.abs() < f64::MIN_POSITIVE {
        return y1 / s2;
    }
    (y1 * s6 - y3 * s4) / det
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
}

/// Check every parameter of `store` (or only `only`, when given).
pub fn check<F>(
    store: &mut ParamStore,
    only: Option<&[ParamId]>,
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut rng = SeedRng::seed_from_u64(opts.seed);
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let r = Tensor::randn(tape.shape(out), 1.0, &mut rng);
    let loss = tape.weighted_sum(out, &r)?;
    let saved: Vec<Tensor> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grads();
    tape.backward_into(loss, store)?;
    drop(tape);
    let grads: Vec<Tensor> = store.iter().map(|p| p.grad.clone()).collect();
    for (p, g) in store.iter_mut().zip(saved) {
        p.grad = g;
    }

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::no_grad();
        let o = f(&mut t, store)?;
        Ok(projection(t.value(o), &r))
    };

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let g: Vec<f64> = grads[id.index()].data().iter().map(|&v| v as f64).collect();
        let g_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        let numel = g.len();
        let mut dirs = Vec::new();
        if let Some(u) = unit(&g) {
            dirs.push(u);
        }
        for _ in 0..opts.random_directions {
            let raw = Tensor::randn(&[numel], 1.0, &mut rng);
            if let Some(u) = unit(&raw.data().iter().map(|&v| v as f64).collect::<Vec<_>>()) {
                dirs.push(u);
            }
        }
        let original = store.value(id).clone();
        let mut worst = 0.0f64;
        for u in &dirs {
            let analytic: f64 = u.iter().zip(&g).map(|(a, b)| a * b).sum();
            let mut best = f64::INFINITY;
            // L(p + t u) - L(p - t u)
            let mut odd = |t: f64| -> Result<f64> {
                let shifted = |sign: f64| {
                    Tensor::from_fn(original.shape(), |i| {
                        (original.data()[i] as f64 + sign * t * u[i]) as f32
                    })
                };
                store.set(id, shifted(1.0))?;
                let plus = eval(store);
                store.set(id, shifted(-1.0))?;
                let minus = eval(store);
                store.set(id, original.clone())?;
                Ok(plus? - minus?)
            };
            for &h in &opts.steps {
                let ts: Vec<f64> = (1..=PROBES).map(|k| h * k as f64 / PROBES as f64).collect();
                let ys = ts.iter().map(|&t| odd(t)).collect::<Result<Vec<f64>>>()?;
                let full = ys[PROBES - 1] / (2.0 * h);
                let half = ys[PROBES / 2 - 1] / h;
                let candidates = [full, half, (4.0 * half - full) / 3.0, odd_cubic_slope(&ts, &ys)];
                for numeric in candidates {
                    let denom = analytic
                        .abs()
                        .max(numeric.abs())
                        .max(0.1 * g_norm)
                        .max(opts.abs_floor);
                    best = best.min((analytic - numeric).abs() / denom);
                }
            }
            worst = worst.max(best);
        }
        reports.push(ParamReport {
            name: store.get(id).name.clone(),
            numel,
            grad_norm: g_norm,
            max_rel_err: worst,
        });
    }
    Ok(GradCheckReport { params: reports })
}

/// Noise added to every parameter before a whole-model check. At the init
/// point the dictionary keys have norm ~1e-3, where the cosine is so curved
/// that no f32 difference step resolves the derivative.
pub const MODEL_JITTER: f32 = 0.05;

/// Whole-network check on a random `size x size` image. Category routing is
/// taken from the unperturbed forward and held fixed while probing.
pub fn check_model(
    config: &ModelConfig,
    seed: u64,
    size: usize,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut model = AtdModel::new(config.clone(), seed)?;
    let mut rng = SeedRng::seed_from_u64(seed ^ 0x5eed);
    for p in model.store.iter_mut() {
        let noise = Tensor::randn(p.value.shape(), MODEL_JITTER, &mut rng);
        p.value = Tensor::from_fn(p.value.shape(), |i| p.value.data()[i] + noise.data()[i]);
    }
    let img = Tensor::uniform(&[size, size, 3], 0.0, 1.0, &mut rng);
    let routing: Vec<Vec<usize>> = model
        .infer_traced(&img)?
        .1
        .into_iter()
        .map(|t| t.category_idx)
        .collect();
    let mut store = std::mem::take(&mut model.store);
    check(&mut store, None, opts, |t, s| {
        let x = t.constant(img.clone());
        model.forward_with(t, s, x, Some(&routing), None)
    })
}

type Forward = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;

/// Every parameterised building block at random weights (std 0.5) on a
/// random input registered as a parameter, so input gradients are checked
/// too. Returns one report per case.
pub fn module_suite(seed: u64, opts: &GradCheckOptions) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    let mut run = |name: &str,
                   build: &dyn Fn(&mut ParamStore, &mut SeedRng) -> Result<Forward>|
     -> Result<()> {
        let mut rng = SeedRng::seed_from_u64(seed ^ (out.len() as u64 + 1).wrapping_mul(0x9e37_79b9));
        let mut store = ParamStore::new();
        let f = build(&mut store, &mut rng)?;
        for id in store.ids().collect::<Vec<_>>() {
            if store.get(id).name.ends_with("tau") {
                continue;
            }
            let shape = store.value(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 0.5, &mut rng))?;
        }
        let report = check(&mut store, None, opts, |t, s| f(t, s))?;
        out.push((name.to_string(), report));
        Ok(())
    };

    run("linear", &|s, r| {
        let l = Linear::new(s, "linear", 5, 3, true, r);
        let x = s.add("x", Tensor::zeros(&[4, 5]));
        Ok(Box::new(move |t, s| {
            let x = t.param(s, x);
            l.forward(t, s, x)
        }))
    })?;
    run("layer_norm", &|s, _| {
        let l = LayerNorm::new(s, "ln", 6);
        let x = s.add("x", Tensor::zeros(&[5, 6]));
        Ok(Box::new(move |t, s| {
            let x = t.param(s, x);
            l.forward(t, s, x)
        }))
    })?;
    run("conv3x3", &|s, r| {
        let c = Conv2d::new(s, "conv", 3, 3, 4, r);
        let x = s.add("x", Tensor::zeros(&[5, 4, 3]));
        Ok(Box::new(move |t, s| {
            let x = t.param(s, x);
            c.forward(t, s, x)
        }))
    })?;
    run("dwconv3x3", &|s, r| {
        let c = DwConv2d::new(s, "dw", 3, 4, r);
        let x = s.add("x", Tensor::zeros(&[4, 5, 4]));
        Ok(Box::new(move |t, s| {
            let x = t.param(s, x);
            c.forward(t, s, x)
        }))
    })?;
    run("tdca", &|s, r| {
        let e = TokenDictionary::new_entries(s, "dictionary", 6, 8, r);
        let d = TokenDictionary::new(s, "tdca", e, 4, r)?;
        let x = s.add("x", Tensor::zeros(&[10, 8]));
        Ok(Box::new(move |t, s| {
            let x = t.param(s, x);
            let o = tdca(t, s, x, &d)?;
            t.concat_cols(o.enhanced, o.attn_map)
        }))
    })?;
    run("acmsa", &|s, r| {
        let p = AcmsaParams::new(s, "acmsa", 8, 2, r)?;
        let x = s.add("x", Tensor::zeros(&[12, 8]));
        let cats: Vec<usize> = (0..12).map(|_| r.random_range(0..4)).collect();
        Ok(Box::new(move |t, s| {
            let x = t.param(s, x);
            acmsa_with_categories(t, s, x, &cats, &p, 5).map(|(y, _)| y)
        }))
    })?;
    for shift in [0, 2] {
        run(&format!("swmsa_shift{shift}"), &|s, r| {
            let p = WindowParams::new(s, "swmsa", 4, 4, shift, 2, r)?;
            let x = s.add("x", Tensor::zeros(&[8, 4, 4]));
            Ok(Box::new(move |t, s| {
                let x = t.param(s, x);
                swmsa(t, s, x, &p)
            }))
        })?;
    }
    for with_category in [false, true] {
        let name = if with_category { "cffn" } else { "conv_ffn" };
        run(name, &|s, r| {
            let p = CffnParams::new(s, "cffn", 4, with_category, r)?;
            let x = s.add("x", Tensor::zeros(&[3, 4, 4]));
            let delta = s.add("delta", Tensor::zeros(&[12, 4]));
            Ok(Box::new(move |t, s| {
                let x = t.param(s, x);
                let d = t.param(s, delta);
                cffn(t, s, x, with_category.then_some(d), &p)
            }))
        })?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catches_wrong_gradient() {
        // A deliberately wrong backward: forward x^2, backward claims x.
        let mut store = ParamStore::new();
        let mut rng = SeedRng::seed_from_u64(1);
        store.add("x", Tensor::randn(&[5], 1.0, &mut rng));
        let good = check(&mut store, None, &GradCheckOptions::default(), |t, s| {
            let x = t.param(s, ParamId(0));
            t.mul(x, x)
        })
        .unwrap();
        assert!(good.passes(DEFAULT_TOLERANCE), "{:?}", good.params);

        let bad = check(&mut store, None, &GradCheckOptions::default(), |t, s| {
            let x = t.param(s, ParamId(0));
            let c = t.constant(t.value(x).clone());
            t.mul(x, c)
        })
        .unwrap();
        assert!(!bad.passes(DEFAULT_TOLERANCE));
    }

    #[test]
    fn module_suite_passes() {
        let suite = module_suite(0, &GradCheckOptions::default()).unwrap();
        assert_eq!(suite.len(), 10);
        for (name, r) in &suite {
            assert!(r.passes(DEFAULT_TOLERANCE), "{name}: {:?}", r.failures(DEFAULT_TOLERANCE));
        }
    }

    #[test]
    fn cubic_fit_recovers_slope() {
        let ts = [0.1, 0.2, 0.3, 0.4];
        let ys: Vec<f64> = ts.iter().map(|t: &f64| 2.0 * (1.5 * t - 4.0 * t.powi(3))).collect();
        assert!((odd_cubic_slope(&ts, &ys) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn store_is_restored() {
        let mut store = ParamStore::new();
        store.add("x", Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
        let before = store.value(ParamId(0)).clone();
        check(&mut store, None, &GradCheckOptions::default(), |t, s| {
            let x = t.param(s, ParamId(0));
            t.gelu(x)
        })
        .unwrap();
        assert_eq!(store.value(ParamId(0)), &before);
        assert!(store.grad(ParamId(0)).data().iter().all(|&g| g == 0.0));
    }
}

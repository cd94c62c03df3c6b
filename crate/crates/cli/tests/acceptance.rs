//! End-to-end acceptance criteria. Runs sequentially, prints one
//! `AC-n PASS|FAIL` line per criterion and exits nonzero if any fail.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use atd_core::bench::{attention_bench, AttentionBenchConfig};
use atd_core::categorize::{
    acmsa_with_categories, attention_flops, categorize, global_attention_flops, mean_intra_group_cosine,
    uncategorize, AcmsaParams, CategoryAssignment,
};
use atd_core::dictionary::{effective_scale, tdca, TokenDictionary};
use atd_core::gradcheck::{check_model, module_suite, GradCheckOptions, DEFAULT_TOLERANCE};
use atd_core::layers::{Linear, SeedRng};
use atd_core::model::LayerTrace;
use atd_core::sparse_coding::oracle_suite;
use atd_core::train::{synthetic_dataset, train_micro, TrainConfig, TrainOutcome};
use atd_core::{AtdModel, Branches, Checkpoint, ModelConfig, ParamStore, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

type Outcome = Result<String, String>;

struct Criterion {
    id: &'static str,
    budget: Duration,
    run: Box<dyn FnOnce(&mut Shared) -> Outcome>,
}

/// The micro-overfit run is reused by the sparsity criterion.
#[derive(Default)]
struct Shared {
    overfit: Option<TrainOutcome>,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn ac1(_: &mut Shared) -> Outcome {
    let mut rng = SeedRng::seed_from_u64(1);
    for case in 0..1000 {
        let n = rng.random_range(1..=4096usize);
        let ns = rng.random_range(1..=512usize);
        let m = rng.random_range(1..=64usize);
        let cats: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let x = Tensor::randn(&[n, 3], 1.0, &mut rng);
        let mut t = Tape::no_grad();
        let xv = t.constant(x.clone());
        let (sorted, a) = categorize(&mut t, xv, &cats, ns).map_err(err)?;
        let back = uncategorize(&mut t, sorted, &a).map_err(err)?;
        let bits = |v: &Tensor| v.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        ensure(bits(t.value(back)) == bits(&x), || format!("case {case}: round trip not bit-exact"))?;
        let sorted_cats: Vec<usize> = a.perm.iter().map(|&i| cats[i]).collect();
        ensure(sorted_cats.windows(2).all(|w| w[0] <= w[1]), || format!("case {case}: not sorted"))?;
        ensure(a.group_bounds.iter().all(|g| g.len() <= ns), || format!("case {case}: oversized group"))?;
    }
    Ok("1000 round trips bit-exact".into())
}

fn lin(store: &ParamStore, l: &Linear, x: &[f32]) -> Vec<f32> {
    let w = store.value(l.weight);
    (0..l.out_dim)
        .map(|o| {
            let b = l.bias.map_or(0.0, |b| store.value(b).data()[o] as f64);
            (0..l.in_dim).fold(b, |s, i| s + x[i] as f64 * w.at2(i, o) as f64) as f32
        })
        .collect()
}

/// Gather, per-group naive multi-head attention, scatter.
fn acmsa_oracle(store: &ParamStore, p: &AcmsaParams, x: &Tensor, cats: &[usize], ns: usize) -> Vec<Vec<f32>> {
    let n = x.rows();
    let d = p.dim();
    let hd = d / p.heads;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| cats[i]);
    let q: Vec<Vec<f32>> = (0..n).map(|i| lin(store, &p.w_q, x.row(i))).collect();
    let k: Vec<Vec<f32>> = (0..n).map(|i| lin(store, &p.w_k, x.row(i))).collect();
    let v: Vec<Vec<f32>> = (0..n).map(|i| lin(store, &p.w_v, x.row(i))).collect();
    let mut out = vec![Vec::new(); n];
    for group in order.chunks(ns) {
        for &i in group {
            let mut attended = vec![0f32; d];
            for h in 0..p.heads {
                let r = h * hd..(h + 1) * hd;
                let logits: Vec<f64> = group
                    .iter()
                    .map(|&j| {
                        r.clone().map(|c| q[i][c] as f64 * k[j][c] as f64).sum::<f64>() / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in r {
                    attended[c] = group.iter().zip(&e).map(|(&j, w)| w / z * v[j][c] as f64).sum::<f64>() as f32;
                }
            }
            out[i] = lin(store, &p.w_o, &attended);
        }
    }
    out
}

fn ac2(_: &mut Shared) -> Outcome {
    let mut rng = SeedRng::seed_from_u64(2);
    let mut worst = 0f32;
    let run = |store: &ParamStore, p: &AcmsaParams, x: &Tensor, cats: &[usize], ns: usize| {
        let mut t = Tape::no_grad();
        let xv = t.constant(x.clone());
        let (y, _) = acmsa_with_categories(&mut t, store, xv, cats, p, ns).map_err(err)?;
        Ok::<_, String>(t.value(y).clone())
    };
    for _ in 0..100 {
        let heads = rng.random_range(1..=3usize);
        let d = heads * rng.random_range(1..=4usize);
        let n = rng.random_range(1..=64usize);
        let ns = rng.random_range(1..=16usize);
        let m = rng.random_range(1..=8usize);
        let mut store = ParamStore::new();
        let p = AcmsaParams::new(&mut store, "acmsa", d, heads, &mut rng).map_err(err)?;
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            store.set(id, Tensor::randn(&shape, 0.5, &mut rng)).map_err(err)?;
        }
        let x = Tensor::randn(&[n, d], 1.0, &mut rng);
        let cats: Vec<usize> = (0..n).map(|_| rng.random_range(0..m)).collect();
        let got = run(&store, &p, &x, &cats, ns)?;
        for (i, row) in acmsa_oracle(&store, &p, &x, &cats, ns).iter().enumerate() {
            for (a, b) in got.row(i).iter().zip(row) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure(worst < 1e-5, || format!("max abs error {worst:.3e} vs oracle"))?;

    // One category, one group: global attention.
    let (n, d) = (40, 8);
    let mut store = ParamStore::new();
    let p = AcmsaParams::new(&mut store, "acmsa", d, 2, &mut rng).map_err(err)?;
    let x = Tensor::randn(&[n, d], 1.0, &mut rng);
    let got = run(&store, &p, &x, &vec![0; n], n)?;
    let global = acmsa_oracle(&store, &p, &x, &vec![0; n], usize::MAX);
    let degenerate = (0..n)
        .flat_map(|i| got.row(i).iter().zip(&global[i]).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0f32, f32::max);
    ensure(degenerate < 1e-5, || format!("single group differs from global by {degenerate:.3e}"))?;
    Ok(format!("100 cases max err {worst:.2e}; single group vs global {degenerate:.2e}"))
}

fn softmax(row: &[f32], s: f32) -> Vec<f32> {
    let mut t = Tape::no_grad();
    let x = t.constant(Tensor::from_fn(&[1, row.len()], |i| row[i] * s));
    let y = t.softmax_rows(x).expect("softmax");
    t.value(y).data().to_vec()
}

fn argmax(v: &[f32]) -> usize {
    v.iter().enumerate().fold(0, |b, (i, &x)| if x > v[b] { i } else { b })
}

fn ac3(_: &mut Shared) -> Outcome {
    let s1 = effective_scale(0.7, 1);
    ensure(s1 == 1.0, || format!("effective_scale(M=1) = {s1}"))?;
    let s512 = effective_scale(1.0, 512);
    ensure((s512 - 7.2383).abs() <= 1e-3, || format!("tau=1, M=512 gives {s512}"))?;
    let mut rng = SeedRng::seed_from_u64(3);
    for case in 0..1000 {
        let m = rng.random_range(2..=512usize);
        let row: Vec<f32> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (t1, t2) = (rng.random_range(0.0..1.0f32), rng.random_range(1.0..2.0f32));
        let (a, b) = (softmax(&row, effective_scale(t1, m)), softmax(&row, effective_scale(t2, m)));
        let (ma, mb) = (a[argmax(&a)], b[argmax(&b)]);
        ensure(mb >= ma - 1e-7, || format!("row {case}: max weight fell {ma} -> {mb}"))?;
        ensure(argmax(&a) == argmax(&row) && argmax(&b) == argmax(&row), || {
            format!("row {case}: argmax moved")
        })?;
    }
    Ok(format!("s(M=1)=1, s(1,512)={s512:.4}, 1000 rows monotone with stable argmax"))
}

fn ac4(_: &mut Shared) -> Outcome {
    let light = ModelConfig::light();
    let (ns, d, h) = (light.group_size as u64, light.channels as u64, light.heads as u64);
    for n in [4096u64, 16384, 65536] {
        let (a, b) = (attention_flops(n, ns, d, h), attention_flops(2 * n, ns, d, h));
        ensure(b == 2 * a, || format!("acmsa flops {a} -> {b} at N={n}"))?;
        let (ga, gb) = (global_attention_flops(n, d, h), global_attention_flops(2 * n, d, h));
        ensure(gb == 4 * ga, || format!("global flops {ga} -> {gb} at N={n}"))?;
    }
    let cfg = AttentionBenchConfig {
        repeats: 5,
        global_max_tokens: 0,
        ..AttentionBenchConfig::from(&light)
    };
    let rows = attention_bench(&cfg, &[64, 128], 4).map_err(err)?;
    let ratio = rows[1].acmsa_secs / rows[0].acmsa_secs;
    ensure((3.0..=6.0).contains(&ratio), || format!("measured 64^2 -> 128^2 time ratio {ratio:.3}"))?;
    Ok(format!("flops x2 (global x4); measured time ratio {ratio:.3} for x4 tokens"))
}

fn ac5(_: &mut Shared) -> Outcome {
    let opts = GradCheckOptions::default();
    let mut reports = module_suite(0, &opts).map_err(err)?;
    reports.push(("model:micro".into(), check_model(&ModelConfig::micro(), 0, 8, &opts).map_err(err)?));
    let worst = reports.iter().map(|(_, r)| r.max_rel_err()).fold(0.0, f64::max);
    let failed: Vec<String> = reports
        .iter()
        .flat_map(|(n, r)| r.failures(DEFAULT_TOLERANCE).into_iter().map(move |p| format!("{n}/{}", p.name)))
        .collect();
    ensure(failed.is_empty(), || format!("worst {worst:.3e}; failing {}", failed.join(", ")))?;
    Ok(format!("{} suites, worst relative error {worst:.3e}", reports.len()))
}

fn overfit_config(seed: u64, branches: Branches) -> TrainConfig {
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    cfg.model.branches = branches;
    cfg
}

fn ac6(shared: &mut Shared) -> Outcome {
    let cfg = overfit_config(0, Branches::full());
    let data = synthetic_dataset(&cfg).map_err(err)?;
    let first = train_micro(&cfg, &data, None).map_err(err)?;
    let second = train_micro(&cfg, &data, None).map_err(err)?;
    let curve = |o: &TrainOutcome| o.log.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>();
    let deterministic = curve(&first) == curve(&second);
    let (l0, l1) = (first.initial_loss().unwrap_or(0.0), first.final_loss().unwrap_or(f32::MAX));
    let psnr = first.mean_final_psnr();
    let ratio = l0 / l1;
    shared.overfit = Some(first);
    ensure(deterministic, || "loss curves differ between identical runs".into())?;
    ensure(psnr >= 35.0 && ratio >= 10.0, || format!("psnr {psnr:.2} dB, loss ratio {ratio:.1}"))?;
    Ok(format!("psnr {psnr:.2} dB, loss {l0:.4} -> {l1:.5} (x{ratio:.1}), deterministic"))
}

fn traces(model: &AtdModel, cfg: &TrainConfig) -> Result<Vec<LayerTrace>, String> {
    let lq = &synthetic_dataset(cfg).map_err(err)?[0].lq;
    Ok(model.infer_traced(&lq.to_tensor()).map_err(err)?.1)
}

fn median(mut v: Vec<f32>) -> f32 {
    v.sort_by(f32::total_cmp);
    v[v.len() / 2]
}

fn ac7(shared: &mut Shared) -> Outcome {
    let cfg = overfit_config(0, Branches::full());
    let trained = shared.overfit.as_ref().ok_or("micro-overfit run unavailable")?;
    let m = cfg.model.dict_entries as f32;
    let weights: Vec<f32> = traces(&trained.model, &cfg)?.into_iter().flat_map(|t| t.max_weight).collect();
    let above = weights.iter().filter(|&&w| w > 2.0 / m).count() as f64 / weights.len() as f64;
    let fresh = AtdModel::new(cfg.model.clone(), cfg.seed).map_err(err)?;
    let init: Vec<f32> = traces(&fresh, &cfg)?.into_iter().flat_map(|t| t.max_weight).collect();
    let init_ratio = median(init) * m;
    let trained_ratio = median(weights) * m;
    let detail = format!(
        "trained: {:.1}% above 2/M, median {trained_ratio:.2}/M; random init median {init_ratio:.2}/M",
        100.0 * above
    );
    ensure(above >= 0.9 && init_ratio <= 3.0, || detail.clone())?;
    Ok(detail)
}

fn ac8(_: &mut Shared) -> Outcome {
    let variants = [Branches::baseline(), Branches::with_tdca(), Branches::with_acmsa(), Branches::full()];
    let mut means = Vec::new();
    for b in variants {
        let mut total = 0.0;
        for seed in 0..3 {
            let cfg = overfit_config(seed, b);
            let data = synthetic_dataset(&cfg).map_err(err)?;
            total += train_micro(&cfg, &data, None).map_err(err)?.mean_final_psnr();
        }
        means.push((b.name(), total / 3.0));
    }
    let detail = means.iter().map(|(n, p)| format!("{n} {p:.3}")).collect::<Vec<_>>().join(", ");
    // The full model (category FFN on top) is reported, not ordered.
    let (b, t, a) = (means[0].1, means[1].1, means[2].1);
    ensure(b <= t && t <= a && a - b >= 0.1, || detail.clone())?;
    Ok(format!("{detail} dB; +acmsa gain {:.3} dB", a - b))
}

fn ac9(_: &mut Shared) -> Outcome {
    let r = oracle_suite(0, 100, 500).map_err(err)?;
    ensure(r.passes(1e-6), || {
        format!(
            "fixture err {:.2e}, closed form {:.2e}, monotone {}/{}",
            r.fixture_error(),
            r.closed_form_max_err,
            r.monotone_ok,
            r.monotone_cases
        )
    })?;
    Ok(format!(
        "alpha_1 = {:.6}, closed-form err {:.2e}, {}/{} monotone",
        r.fixture[0], r.closed_form_max_err, r.monotone_ok, r.monotone_cases
    ))
}

fn ac10(_: &mut Shared) -> Outcome {
    let (n, d, m, ns, clusters) = (256, 16, 16, 16, 8);
    let mut rng = SeedRng::seed_from_u64(10);
    let mut wins = 0;
    for _ in 0..50 {
        let centers = Tensor::randn(&[clusters, d], 1.0, &mut rng);
        let noise = Tensor::randn(&[n, d], 0.3, &mut rng);
        let x = Tensor::from_fn(&[n, d], |i| {
            let (t, c) = (i / d, i % d);
            centers.at2(t % clusters, c) + noise.data()[i]
        });
        let mut store = ParamStore::new();
        let entries = TokenDictionary::new_entries(&mut store, "dictionary", m, d, &mut rng);
        let dict = TokenDictionary::new(&mut store, "tdca", entries, 8, &mut rng).map_err(err)?;
        let mut t = Tape::no_grad();
        let xv = t.constant(x.clone());
        let cats = tdca(&mut t, &store, xv, &dict).map_err(err)?.argmax_idx;
        let a = CategoryAssignment::new(cats, ns).map_err(err)?;
        let groups: Vec<Vec<usize>> = (0..a.group_bounds.len()).map(|g| a.group_members(g).to_vec()).collect();
        let mut shuffled: Vec<usize> = (0..n).collect();
        shuffled.shuffle(&mut rng);
        let mut offset = 0;
        let random: Vec<Vec<usize>> = groups
            .iter()
            .map(|g| {
                offset += g.len();
                shuffled[offset - g.len()..offset].to_vec()
            })
            .collect();
        if mean_intra_group_cosine(&x, &groups) > mean_intra_group_cosine(&x, &random) {
            wins += 1;
        }
    }
    ensure(wins >= 48, || format!("{wins}/50 trials beat random groups"))?;
    Ok(format!("{wins}/50 trials beat size-matched random groups"))
}

fn ac11(_: &mut Shared) -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let (a, b) = (dir.path().join("a.atdc"), dir.path().join("b.atdc"));
    let model = AtdModel::new(ModelConfig::micro(), 11).map_err(err)?;
    Checkpoint::from_model(&model).save(&a).map_err(err)?;
    Checkpoint::load(&a).map_err(err)?.save(&b).map_err(err)?;
    let (ba, bb) = (std::fs::read(&a).map_err(err)?, std::fs::read(&b).map_err(err)?);
    ensure(ba == bb, || "save -> load -> save changed the bytes".into())?;

    let mut bad = ba.clone();
    bad[..4].copy_from_slice(b"XXXX");
    let bad_path = dir.path().join("bad.atdc");
    std::fs::write(&bad_path, bad).map_err(err)?;
    let lq = atd_core::Image::from_fn(8, 8, 3, |_, _, _| 0.5).map_err(err)?;
    let lq_path = dir.path().join("lq.png");
    lq.save(&lq_path).map_err(err)?;
    let out = Command::new(env!("CARGO_BIN_EXE_atd"))
        .arg("--outdir")
        .arg(dir.path())
        .args(["infer", "--ckpt"])
        .arg(&bad_path)
        .arg("--input")
        .arg(&lq_path)
        .output()
        .map_err(err)?;
    let stderr = String::from_utf8_lossy(&out.stderr);
    ensure(!out.status.success() && stderr.contains("magic"), || format!("corrupt file accepted: {stderr}"))?;
    Ok(format!("{} bytes round trip identical; corrupt magic exits {:?}", ba.len(), out.status.code()))
}

fn main() -> ExitCode {
    let criteria: Vec<Criterion> = vec![
        Criterion { id: "AC-1", budget: Duration::from_secs(10), run: Box::new(ac1) },
        Criterion { id: "AC-2", budget: Duration::from_secs(30), run: Box::new(ac2) },
        Criterion { id: "AC-3", budget: Duration::from_secs(5), run: Box::new(ac3) },
        Criterion { id: "AC-4", budget: Duration::from_secs(60), run: Box::new(ac4) },
        Criterion { id: "AC-5", budget: Duration::from_secs(300), run: Box::new(ac5) },
        Criterion { id: "AC-6", budget: Duration::from_secs(600), run: Box::new(ac6) },
        Criterion { id: "AC-7", budget: Duration::from_secs(60), run: Box::new(ac7) },
        Criterion { id: "AC-8", budget: Duration::from_secs(3600), run: Box::new(ac8) },
        Criterion { id: "AC-9", budget: Duration::from_secs(30), run: Box::new(ac9) },
        Criterion { id: "AC-10", budget: Duration::from_secs(60), run: Box::new(ac10) },
        Criterion { id: "AC-11", budget: Duration::from_secs(5), run: Box::new(ac11) },
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC-")).collect();
    let mut shared = Shared::default();
    let mut failed = 0;
    for c in criteria {
        if !only.is_empty() && !only.iter().any(|o| o == c.id) && !(c.id == "AC-6" && only.iter().any(|o| o == "AC-7")) {
            continue;
        }
        let start = Instant::now();
        let outcome = (c.run)(&mut shared);
        let secs = start.elapsed();
        let outcome = match outcome {
            Ok(msg) if secs > c.budget => Err(format!("{msg}; took {secs:.1?}, budget {:?}", c.budget)),
            other => other,
        };
        match outcome {
            Ok(msg) => println!("{} PASS {msg} ({:.1}s)", c.id, secs.as_secs_f64()),
            Err(msg) => {
                failed += 1;
                println!("{} FAIL {msg} ({:.1}s)", c.id, secs.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

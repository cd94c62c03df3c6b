use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use atd_core::bench::{attention_bench, bench_csv, AttentionBenchConfig};
use atd_core::categorize::{category_map_csv, group_membership_csv, write_category_png};
use atd_core::dictionary::weight_histogram;
use atd_core::gradcheck::{check_model, module_suite, GradCheckOptions, GradCheckReport};
use atd_core::image::{bicubic_resize, degrade, Image};
use atd_core::layers::SeedRng;
use atd_core::metrics::{evaluate, ChannelMode};
use atd_core::sparse_coding::{analogy_csv, analogy_report, oracle_suite, toy_signals};
use atd_core::train::{synthetic_dataset, synthetic_patch, train_micro, LossKind, SrPair, TrainConfig};
use atd_core::{AtdModel, Branches, Checkpoint, ModelConfig, Tensor};
use rand::SeedableRng;
use serde_json::json;

use crate::{
    BenchArgs, Cli, Command, EvalArgs, GradcheckArgs, InferArgs, InspectArgs, MetricArgs, ModelArgs,
    OracleArgs, TrainArgs,
};

/// Honour `ATD_THREADS` by sizing the global worker pool.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("ATD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .with_context(|| format!("ATD_THREADS must be a positive integer, got `{raw}`"))?;
    if n == 0 {
        bail!("ATD_THREADS must be at least 1");
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring worker threads")?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Infer(a) => infer(cli, a),
        Command::InspectAttn(a) => inspect(cli, a),
        Command::Bench(a) => bench(cli, a),
        Command::Gradcheck(a) => gradcheck(cli, a),
        Command::Oracle(a) => oracle(cli, a),
    }
}

/// Defaults, then `--config`, then `--seed`.
fn base_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            TrainConfig::from_json(&text).with_context(|| format!("parsing config {}", path.display()))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// `--preset` replaces the network shape, keeping the configured branches
/// unless `--branches` is also given.
fn model_config(base: &ModelConfig, args: &ModelArgs) -> Result<ModelConfig> {
    let mut m = match &args.preset {
        Some(p) => ModelConfig {
            branches: base.branches,
            ..ModelConfig::preset(p)?
        },
        None => base.clone(),
    };
    if let Some(b) = &args.branches {
        m.branches = Branches::from_name(b)?;
    }
    m.validate()?;
    Ok(m)
}

fn channel_mode(args: &MetricArgs) -> Result<ChannelMode> {
    Ok(args.mode.parse()?)
}

fn ensure_outdir(cli: &Cli) -> Result<&Path> {
    fs::create_dir_all(&cli.outdir)
        .with_context(|| format!("creating output directory {}", cli.outdir.display()))?;
    Ok(&cli.outdir)
}

fn load_rgb(path: &Path) -> Result<Image> {
    Ok(Image::load(path)
        .with_context(|| format!("loading {}", path.display()))?
        .to_rgb())
}

/// Trim an HQ image so both extents are multiples of `r`.
fn crop_to_scale(img: Image, r: usize, path: &Path) -> Result<Image> {
    let (h, w) = (img.height / r * r, img.width / r * r);
    if h == 0 || w == 0 {
        bail!("{} is smaller than the scale factor {r}", path.display());
    }
    Ok(img.crop(h, w)?)
}

fn load_model(path: &Path) -> Result<AtdModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    ck.into_model()
        .with_context(|| format!("rebuilding model from {}", path.display()))
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = base_config(cli)?;
    cfg.model = model_config(&cfg.model, &a.model)?;
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.lr {
        cfg.optim.lr = v;
    }
    if let Some(v) = &a.loss {
        cfg.loss = match v.as_str() {
            "l1" => LossKind::L1,
            "charbonnier" => LossKind::Charbonnier,
            other => bail!("unknown loss `{other}` (expected l1 or charbonnier)"),
        };
    }
    if let Some(v) = a.patch {
        cfg.patch = v;
    }
    if let Some(v) = a.pairs {
        cfg.pairs = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    let r = cfg.model.scale;
    let dataset = if a.hq.is_empty() {
        synthetic_dataset(&cfg)?
    } else {
        a.hq.iter()
            .map(|p| Ok(SrPair::from_hq(crop_to_scale(load_rgb(p)?, r, p)?, r)?))
            .collect::<Result<Vec<_>>>()?
    };
    let outdir = ensure_outdir(cli)?;
    fs::write(outdir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let outcome = train_micro(&cfg, &dataset, Some(outdir))?;
    println!(
        "{}",
        json!({
            "steps": cfg.steps,
            "initial_loss": outcome.initial_loss(),
            "final_loss": outcome.final_loss(),
            "psnr": outcome.mean_final_psnr(),
            "checkpoint": outdir.join("final.atdc"),
            "log": outdir.join("train_log.jsonl"),
        })
    );
    Ok(())
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let mode = channel_mode(&a.metrics)?;
    let (model, r) = match (&a.ckpt, a.bicubic) {
        (Some(_), true) => bail!("--ckpt and --bicubic are exclusive"),
        (Some(p), false) => {
            let m = load_model(p)?;
            let r = m.config.scale;
            if a.scale.is_some_and(|s| s != r) {
                bail!("--scale {} does not match the checkpoint scale {r}", a.scale.unwrap_or(0));
            }
            (Some(m), r)
        }
        (None, true) => (None, a.scale.context("--bicubic needs --scale")?),
        (None, false) => bail!("give --ckpt or --bicubic"),
    };
    let outdir = ensure_outdir(cli)?;
    let mut lines = Vec::new();
    let mut total = 0.0;
    for path in &a.hq {
        let hq = crop_to_scale(load_rgb(path)?, r, path)?;
        let lq = degrade(&hq, r)?;
        let sr = match &model {
            Some(m) => Image::from_tensor(&m.infer(&lq.to_tensor())?)?,
            None => bicubic_resize(&lq, hq.height, hq.width)?,
        };
        let res = evaluate(&sr.quantized(), &hq, mode, a.metrics.crop_border)?;
        total += res.psnr_db;
        let line = res.json_line(&path.display().to_string());
        println!("{line}");
        lines.push(line);
    }
    fs::write(outdir.join("eval.jsonl"), lines.join("\n") + "\n")?;
    eprintln!("mean psnr {:.4} dB over {} images", total / a.hq.len() as f64, a.hq.len());
    Ok(())
}

fn infer(cli: &Cli, a: &InferArgs) -> Result<()> {
    let model = load_model(&a.ckpt)?;
    if let Some(s) = a.scale {
        if s != model.config.scale {
            bail!(
                "scale mismatch: --scale {s} but the checkpoint was built for x{}",
                model.config.scale
            );
        }
    }
    let img = load_rgb(&a.input)?;
    let out = Image::from_tensor(&model.infer(&img.to_tensor())?)?;
    let path = match &a.output {
        Some(p) => p.clone(),
        None => ensure_outdir(cli)?.join("sr.png"),
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    out.save(&path).with_context(|| format!("writing {}", path.display()))?;
    println!(
        "{}",
        json!({ "output": path, "height": out.height, "width": out.width })
    );
    if let Some(rp) = &a.reference {
        let reference = load_rgb(rp)?;
        let res = evaluate(&out.quantized(), &reference, channel_mode(&a.metrics)?, a.metrics.crop_border)?;
        println!("{}", res.json_line(&path.display().to_string()));
    }
    Ok(())
}

fn median(v: &[f32]) -> f32 {
    let mut s = v.to_vec();
    s.sort_by(f32::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn inspect(cli: &Cli, a: &InspectArgs) -> Result<()> {
    let cfg = base_config(cli)?;
    let model = match &a.ckpt {
        Some(p) => load_model(p)?,
        None => AtdModel::new(model_config(&cfg.model, &a.model)?, cfg.seed)?,
    };
    let lq = match &a.input {
        Some(p) => load_rgb(p)?,
        // The first synthetic training patch for this seed.
        None => degrade(&synthetic_patch(cfg.patch, cfg.seed.wrapping_add(1000))?, model.config.scale)?,
    };
    let (_, traces) = model.infer_traced(&lq.to_tensor())?;
    if traces.is_empty() {
        bail!("model has no dictionary layers to inspect");
    }
    let Some(t) = traces.get(a.layer) else {
        bail!("layer {} out of range: model has {} dictionary layers", a.layer, traces.len());
    };
    let dict = model
        .layers()
        .filter_map(|l| l.tdca.as_ref().map(|(_, d)| d))
        .nth(a.layer)
        .context("dictionary layer lookup")?;

    let outdir = ensure_outdir(cli)?;
    let l = a.layer;
    let hist = weight_histogram(&t.max_weight, t.entries, a.bins)?;
    fs::write(outdir.join(format!("attn_hist_layer{l}.csv")), hist.to_csv())?;
    fs::write(
        outdir.join(format!("category_map_layer{l}.csv")),
        category_map_csv(&t.category_idx, t.width),
    )?;
    write_category_png(
        &outdir.join(format!("category_map_layer{l}.png")),
        &t.category_idx,
        t.height,
        t.width,
    )?;
    if let Some(assign) = &t.assignment {
        fs::write(
            outdir.join(format!("groups_layer{l}.csv")),
            group_membership_csv(assign, t.width),
        )?;
    }
    let m = t.entries as f32;
    let above = t.max_weight.iter().filter(|&&w| w > 2.0 / m).count();
    let med = median(&t.max_weight);
    let mut cats = t.category_idx.clone();
    cats.sort_unstable();
    cats.dedup();
    let used = cats.len();
    println!(
        "{}",
        json!({
            "layer": l,
            "grid": [t.height, t.width],
            "tokens": t.max_weight.len(),
            "entries": t.entries,
            "effective_scale": dict.effective_scale(&model.store),
            "fraction_above_2_over_m": above as f64 / t.max_weight.len() as f64,
            "median_max_weight": med,
            "median_over_uniform": med * m,
            "categories_used": used,
        })
    );
    Ok(())
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let cfg = base_config(cli)?;
    if a.sizes.is_empty() || a.sizes.contains(&0) {
        bail!("--sizes must list positive feature-map sides");
    }
    let model = ModelConfig::preset(&a.preset)?;
    let bench_cfg = AttentionBenchConfig {
        repeats: a.repeats,
        global_max_tokens: a.global_max_tokens,
        ..AttentionBenchConfig::from(&model)
    };
    let rows = attention_bench(&bench_cfg, &a.sizes, cfg.seed)?;
    println!(
        "{:>6} {:>8} {:>16} {:>18} {:>12} {:>12}",
        "side", "tokens", "acmsa_flops", "global_flops", "acmsa_s", "global_s"
    );
    for r in &rows {
        let g = r.global_secs.map_or("-".to_string(), |g| format!("{g:.5}"));
        println!(
            "{:>6} {:>8} {:>16} {:>18} {:>12.5} {:>12}",
            r.side, r.tokens, r.acmsa_flops, r.global_flops, r.acmsa_secs, g
        );
    }
    for w in rows.windows(2) {
        println!(
            "{}->{}: tokens x{:.2}, acmsa flops x{:.3}, global flops x{:.3}, acmsa time x{:.3}",
            w[0].side,
            w[1].side,
            w[1].tokens as f64 / w[0].tokens as f64,
            w[1].acmsa_flops as f64 / w[0].acmsa_flops as f64,
            w[1].global_flops as f64 / w[0].global_flops as f64,
            w[1].acmsa_secs / w[0].acmsa_secs
        );
    }
    let outdir = ensure_outdir(cli)?;
    fs::write(outdir.join("bench.csv"), bench_csv(&rows))?;
    Ok(())
}

fn report_line(name: &str, r: &GradCheckReport, tol: f64) -> String {
    let worst = r.worst();
    format!(
        "{name:<14} params={:<4} worst_rel_err={:.3e} ({}) {}",
        r.params.len(),
        r.max_rel_err(),
        worst.map_or("-", |p| p.name.as_str()),
        if r.passes(tol) { "ok" } else { "FAIL" }
    )
}

fn gradcheck(cli: &Cli, a: &GradcheckArgs) -> Result<()> {
    let cfg = base_config(cli)?;
    let opts = GradCheckOptions {
        seed: cfg.seed,
        ..GradCheckOptions::default()
    };
    let mut reports = module_suite(cfg.seed, &opts)?;
    if !a.skip_model {
        let model = ModelConfig {
            branches: cfg.model.branches,
            ..ModelConfig::preset(&a.preset)?
        };
        reports.push((format!("model:{}", a.preset), check_model(&model, cfg.seed, a.size, &opts)?));
    }
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for (name, r) in &reports {
        println!("{}", report_line(name, r, a.tolerance));
        worst = worst.max(r.max_rel_err());
        for p in r.failures(a.tolerance) {
            failed.push(format!("{name}/{}: rel_err {:.3e}", p.name, p.max_rel_err));
        }
    }
    println!("worst relative error: {worst:.3e} (tolerance {:.1e})", a.tolerance);
    if !failed.is_empty() {
        for f in &failed {
            eprintln!("FAIL {f}");
        }
        bail!("{} parameter groups failed the gradient check", failed.len());
    }
    Ok(())
}

fn oracle(cli: &Cli, a: &OracleArgs) -> Result<()> {
    let cfg = base_config(cli)?;
    let report = oracle_suite(cfg.seed, a.cases, a.iters)?;
    let fixture: Vec<String> = report.fixture.iter().map(|v| format!("{v:.6}")).collect();
    println!("closed-form fixture: y = 2 e_1, lambda = 0.5 -> alpha = [{}]", fixture.join(", "));
    println!(
        "orthonormal cases: {}, max |alpha - soft(D^T y, lambda/2)| = {:.3e}",
        report.orthonormal_cases, report.closed_form_max_err
    );
    println!(
        "monotone objective: {}/{} problems over {} iterations",
        report.monotone_ok, report.monotone_cases, a.iters
    );
    if a.demo {
        let mut rng = SeedRng::seed_from_u64(cfg.seed);
        let entries = Tensor::randn(&[16, 8], 1.0, &mut rng);
        let signals = toy_signals(&entries, 10, 2, &mut rng);
        let scale = atd_core::dictionary::effective_scale(1.0, 16) as f64;
        let rows = analogy_report(&signals, &entries, 0.1, scale, a.iters)?;
        let csv = analogy_csv(&rows);
        print!("{csv}");
        fs::write(ensure_outdir(cli)?.join("analogy.csv"), csv)?;
    }
    if !report.passes(1e-6) {
        for (case, msg) in &report.failures {
            eprintln!("FAIL case {case}: {msg}");
        }
        bail!(
            "sparse-coding suite failed (fixture error {:.3e}, closed-form error {:.3e})",
            report.fixture_error(),
            report.closed_form_max_err
        );
    }
    Ok(())
}

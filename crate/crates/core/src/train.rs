//! AdamW and a small super-resolution training loop.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::{degrade, Image};
use crate::layers::SeedRng;
use crate::metrics::{psnr, ChannelMode};
use crate::model::{AtdModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<u64>,
    pub gamma: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.9,
            eps: 1e-8,
            weight_decay: 0.0,
            milestones: Vec::new(),
            gamma: 0.5,
        }
    }
}

impl OptimConfig {
    /// Piecewise-constant schedule; `step` counts completed updates.
    pub fn lr_at(&self, step: u64) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

/// First and second moments, one pair per parameter in store order.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update with decoupled weight decay and bias correction.
/// A non-finite gradient aborts before anything is modified.
pub fn adamw_step(store: &mut ParamStore, state: &mut OptimState, cfg: &OptimConfig) -> Result<()> {
    if let Some(bad) = store.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::NonFiniteGradient {
            name: bad.name.clone(),
        });
    }
    let lr = cfg.lr_at(state.step);
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.iter_mut().enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let g = p.grad.data();
        for (j, w) in p.value.data_mut().iter_mut().enumerate() {
            let gj = g[j] as f64;
            let mj = cfg.beta1 * m[j] as f64 + (1.0 - cfg.beta1) * gj;
            let vj = cfg.beta2 * v[j] as f64 + (1.0 - cfg.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let mut wj = *w as f64;
            wj -= lr * cfg.weight_decay * wj;
            wj -= lr * (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
            *w = wj as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    L1,
    Charbonnier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub steps: u64,
    pub seed: u64,
    pub loss: LossKind,
    pub charbonnier_eps: f32,
    /// HQ patch side for the synthetic dataset.
    pub patch: usize,
    /// Number of synthetic training pairs.
    pub pairs: usize,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: u64,
    pub psnr_mode: ChannelModeConfig,
}

/// Serialisable mirror of [`ChannelMode`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelModeConfig {
    Rgb,
    Y,
}

impl From<ChannelModeConfig> for ChannelMode {
    fn from(c: ChannelModeConfig) -> Self {
        match c {
            ChannelModeConfig::Rgb => ChannelMode::Rgb,
            ChannelModeConfig::Y => ChannelMode::YChannel,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::micro(),
            optim: OptimConfig {
                lr: 2e-3,
                milestones: vec![300, 400],
                ..OptimConfig::default()
            },
            steps: 500,
            seed: 0,
            loss: LossKind::L1,
            charbonnier_eps: 1e-3,
            patch: 32,
            pairs: 1,
            checkpoint_every: 0,
            psnr_mode: ChannelModeConfig::Y,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug)]
pub struct SrPair {
    pub lq: Image,
    pub hq: Image,
}

impl SrPair {
    pub fn from_hq(hq: Image, scale: usize) -> Result<Self> {
        let lq = degrade(&hq, scale)?;
        Ok(Self { lq, hq })
    }
}

/// A smooth-but-structured RGB test patch: a few oriented sinusoids, a soft
/// disc and a colour gradient.
pub fn synthetic_patch(size: usize, seed: u64) -> Result<Image> {
    let mut rng = SeedRng::seed_from_u64(seed);
    let waves: Vec<[f32; 5]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.5..2.5),
                rng.random_range(0.0..std::f32::consts::TAU),
                rng.random_range(0.05..0.15),
                rng.random_range(0.0..3.0),
            ]
        })
        .collect();
    let (cy, cx) = (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
    let radius = rng.random_range(0.15..0.3);
    let tint: [f32; 3] = [
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
        rng.random_range(0.2..0.8),
    ];
    let s = size as f32;
    Image::from_fn(size, size, 3, |y, x, c| {
        let (u, v) = (y as f32 / s, x as f32 / s);
        let mut val = 0.25 + 0.3 * tint[c] + 0.15 * (u + v * (c as f32 - 1.0) * 0.5);
        for w in &waves {
            let (dir, freq, phase, amp, chan) = (w[0], w[1], w[2], w[3], w[4]);
            let t = (u * dir.cos() + v * dir.sin()) * freq * std::f32::consts::TAU + phase;
            let weight = 1.0 - ((c as f32 - chan).abs() / 3.0);
            val += amp * weight * t.sin();
        }
        let r = ((u - cy).powi(2) + (v - cx).powi(2)).sqrt();
        val += 0.2 / (1.0 + ((r - radius) * 40.0).exp()) * if c == 1 { -1.0 } else { 1.0 };
        val
    })
}

pub fn synthetic_dataset(cfg: &TrainConfig) -> Result<Vec<SrPair>> {
    (0..cfg.pairs.max(1))
        .map(|i| {
            SrPair::from_hq(
                synthetic_patch(cfg.patch, cfg.seed.wrapping_add(1000 + i as u64))?,
                cfg.model.scale,
            )
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f32,
    pub psnr: f64,
}

impl LogEntry {
    pub fn json_line(&self) -> String {
        let psnr = if self.psnr.is_finite() {
            serde_json::json!(self.psnr)
        } else {
            serde_json::json!("inf")
        };
        serde_json::json!({ "step": self.step, "loss": self.loss, "psnr": psnr }).to_string()
    }
}

pub struct TrainOutcome {
    pub model: AtdModel,
    pub log: Vec<LogEntry>,
    /// PSNR of the final model on each training pair.
    pub final_psnr: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> Option<f32> {
        self.log.first().map(|e| e.loss)
    }

    pub fn final_loss(&self) -> Option<f32> {
        self.log.last().map(|e| e.loss)
    }

    pub fn mean_final_psnr(&self) -> f64 {
        self.final_psnr.iter().sum::<f64>() / self.final_psnr.len().max(1) as f64
    }
}

/// Consecutive steps above `10x` the first loss before giving up.
pub const DIVERGENCE_PATIENCE: u32 = 50;

pub fn model_psnr(model: &AtdModel, pair: &SrPair, mode: ChannelMode) -> Result<f64> {
    let out = Image::from_tensor(&model.infer(&pair.lq.to_tensor())?)?;
    psnr(&out, &pair.hq, mode, 0)
}

/// Train a freshly initialised model. Pairs are visited in order, one per
/// step. With `outdir`, the JSON-lines log and checkpoints are written there.
pub fn train_micro(
    cfg: &TrainConfig,
    dataset: &[SrPair],
    outdir: Option<&Path>,
) -> Result<TrainOutcome> {
    let model = AtdModel::new(cfg.model.clone(), cfg.seed)?;
    train_model(model, cfg, dataset, outdir)
}

pub fn train_model(
    mut model: AtdModel,
    cfg: &TrainConfig,
    dataset: &[SrPair],
    outdir: Option<&Path>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    for p in dataset {
        if p.hq.channels != 3 || p.lq.channels != 3 {
            return Err(Error::InvalidArgument("training pairs must be RGB".into()));
        }
        if p.hq.height != p.lq.height * cfg.model.scale || p.hq.width != p.lq.width * cfg.model.scale {
            return Err(Error::InvalidArgument(format!(
                "pair {}x{} -> {}x{} does not match scale {}",
                p.lq.height, p.lq.width, p.hq.height, p.hq.width, cfg.model.scale
            )));
        }
    }
    let mode: ChannelMode = cfg.psnr_mode.into();
    let inputs: Vec<Tensor> = dataset.iter().map(|p| p.lq.to_tensor()).collect();
    let targets: Vec<Tensor> = dataset.iter().map(|p| p.hq.to_tensor()).collect();

    let mut log_file = match outdir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let mut state = OptimState::new(&model.store);
    let mut log = Vec::with_capacity(cfg.steps as usize);
    let mut checkpoints = Vec::new();
    let mut initial = None;
    let mut over = 0u32;

    for step in 0..cfg.steps {
        let i = (step % dataset.len() as u64) as usize;
        let mut tape = Tape::new();
        let x = tape.constant(inputs[i].clone());
        let y = model.forward(&mut tape, x)?;
        let loss = match cfg.loss {
            LossKind::L1 => tape.l1_loss(y, &targets[i])?,
            LossKind::Charbonnier => tape.charbonnier_loss(y, &targets[i], cfg.charbonnier_eps)?,
        };
        let loss_value = tape.value(loss).item();
        let out = Image::from_tensor(tape.value(y))?;
        let step_psnr = psnr(&out, &dataset[i].hq, mode, 0)?;
        model.store.zero_grads();
        tape.backward_into(loss, &mut model.store)?;
        drop(tape);

        let entry = LogEntry {
            step,
            loss: loss_value,
            psnr: step_psnr,
        };
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", entry.json_line())?;
        }
        log.push(entry);

        let first = *initial.get_or_insert(loss_value);
        if loss_value > 10.0 * first {
            over += 1;
            if over >= DIVERGENCE_PATIENCE {
                return Err(Error::Diverged {
                    step: step as usize,
                    loss: loss_value,
                    initial: first,
                });
            }
        } else {
            over = 0;
        }

        adamw_step(&mut model.store, &mut state, &cfg.optim)?;

        if let Some(dir) = outdir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 && step + 1 < cfg.steps {
                let path = dir.join(format!("step_{:06}.atdc", step + 1));
                Checkpoint::from_model(&model).save(&path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(mut f) = log_file {
        f.flush()?;
    }
    if let Some(dir) = outdir {
        let path = dir.join("final.atdc");
        Checkpoint::from_model(&model).save(&path)?;
        checkpoints.push(path);
    }
    let final_psnr = dataset
        .iter()
        .map(|p| model_psnr(&model, p, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainOutcome {
        model,
        log,
        final_psnr,
        checkpoints,
    })
}

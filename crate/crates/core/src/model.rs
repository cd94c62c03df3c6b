//! The super-resolution network.
//!
//! ```text
//! F_0  = conv3x3(pad(I_L))
//! F_i  = block_i(F_{i-1})            block: n_l layers, conv3x3, + input
//! F_DF = conv3x3(F_{n_b})
//! I_H  = crop(conv3x3(shuffle_r(conv3x3(F_0 + F_DF))))
//! ```
//!
//! Every layer combines three attention branches over the same input and a
//! feed-forward network:
//!
//! ```text
//! X'  = X + TDCA(LN(X)) + ACMSA(LN(X)) + SWMSA(LN(X))
//! out = CFFN(X', delta)
//! ```
//!
//! The dictionary entries are shared by all layers of a block; projections,
//! temperature and attention maps are per layer.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::categorize::{acmsa_with_categories, AcmsaParams, CategoryAssignment};
use crate::cffn::{cffn, select_embedding, CffnParams};
use crate::dictionary::{tdca, TokenDictionary};
use crate::error::{shape_err, Error, Result};
use crate::layers::{Conv2d, LayerNorm, SeedRng};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dims3, Tensor};
use crate::window::{swmsa, WindowParams};

/// Which optional branches a layer carries. Window attention and the
/// feed-forward network are always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branches {
    pub tdca: bool,
    pub acmsa: bool,
    pub category_ffn: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self::full()
    }
}

impl Branches {
    /// Window attention and a plain conv-FFN only.
    pub fn baseline() -> Self {
        Self {
            tdca: false,
            acmsa: false,
            category_ffn: false,
        }
    }

    pub fn with_tdca() -> Self {
        Self {
            tdca: true,
            ..Self::baseline()
        }
    }

    pub fn with_acmsa() -> Self {
        Self {
            acmsa: true,
            ..Self::with_tdca()
        }
    }

    pub fn full() -> Self {
        Self {
            tdca: true,
            acmsa: true,
            category_ffn: true,
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.tdca, self.acmsa, self.category_ffn) {
            (false, false, false) => "baseline",
            (true, false, false) => "+tdca",
            (true, true, false) => "+acmsa",
            (true, true, true) => "full",
            _ => "custom",
        }
    }

    /// Inverse of [`name`](Self::name); the leading `+` is optional.
    pub fn from_name(name: &str) -> Result<Self> {
        match name.trim_start_matches('+') {
            "baseline" => Ok(Self::baseline()),
            "tdca" => Ok(Self::with_tdca()),
            "acmsa" => Ok(Self::with_acmsa()),
            "full" => Ok(Self::full()),
            other => Err(Error::InvalidArgument(format!(
                "unknown branch set `{other}` (expected baseline, tdca, acmsa or full)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    /// Feature channels `C`.
    pub channels: usize,
    /// Blocks `n_b`.
    pub blocks: usize,
    /// Layers per block `n_l`.
    pub layers_per_block: usize,
    /// Dictionary entries `M`.
    pub dict_entries: usize,
    /// TDCA query/key width `d_r`.
    pub reduced_dim: usize,
    pub window: usize,
    /// Sub-category size `n_s`.
    pub group_size: usize,
    pub heads: usize,
    /// Upscaling factor `r`.
    pub scale: usize,
    #[serde(default)]
    pub branches: Branches,
}

impl ModelConfig {
    pub fn micro() -> Self {
        Self {
            preset: "micro".into(),
            channels: 16,
            blocks: 1,
            layers_per_block: 2,
            dict_entries: 16,
            reduced_dim: 8,
            window: 8,
            group_size: 16,
            heads: 2,
            scale: 2,
            branches: Branches::full(),
        }
    }

    pub fn light() -> Self {
        Self {
            preset: "light".into(),
            channels: 48,
            blocks: 4,
            layers_per_block: 6,
            dict_entries: 256,
            reduced_dim: 12,
            window: 16,
            group_size: 128,
            heads: 3,
            scale: 4,
            branches: Branches::full(),
        }
    }

    pub fn full() -> Self {
        Self {
            preset: "full".into(),
            channels: 216,
            blocks: 6,
            layers_per_block: 6,
            dict_entries: 512,
            reduced_dim: 20,
            window: 16,
            group_size: 256,
            heads: 4,
            scale: 4,
            branches: Branches::full(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "micro" => Ok(Self::micro()),
            "light" => Ok(Self::light()),
            "full" => Ok(Self::full()),
            other => Err(Error::InvalidArgument(format!(
                "unknown preset `{other}` (expected micro, light or full)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.channels == 0 || self.heads == 0 || self.channels % self.heads != 0 {
            return bad(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            ));
        }
        if self.window < 2 || self.window % 2 != 0 {
            return bad(format!("window {} must be even and >= 2", self.window));
        }
        if !(2..=4).contains(&self.scale) {
            return bad(format!("scale {} must be 2, 3 or 4", self.scale));
        }
        if self.blocks == 0 || self.layers_per_block == 0 {
            return bad("need at least one block and one layer".into());
        }
        if self.dict_entries == 0 || self.group_size == 0 {
            return bad("dictionary size and sub-category size must be >= 1".into());
        }
        if self.reduced_dim == 0 || self.reduced_dim > self.channels {
            return bad(format!(
                "reduced dim {} must lie in [1, {}]",
                self.reduced_dim, self.channels
            ));
        }
        if (self.branches.acmsa || self.branches.category_ffn) && !self.branches.tdca {
            return bad("category attention and the category FFN need the TDCA branch".into());
        }
        Ok(())
    }

    pub fn total_layers(&self) -> usize {
        self.blocks * self.layers_per_block
    }
}

/// Independent stream per component, so a component's initial weights do
/// not depend on which other branches exist.
pub fn component_rng(seed: u64, name: &str) -> SeedRng {
    // FNV-1a over the name, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    SeedRng::seed_from_u64(h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

#[derive(Clone, Debug)]
pub struct AtdLayer {
    /// Position inside its block; odd layers use shifted windows.
    pub index_in_block: usize,
    pub tdca: Option<(LayerNorm, TokenDictionary)>,
    pub acmsa: Option<(LayerNorm, AcmsaParams)>,
    pub swmsa_norm: LayerNorm,
    pub swmsa: WindowParams,
    pub cffn: CffnParams,
    pub group_size: usize,
}

/// Routing information of one layer, recorded for inspection.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub height: usize,
    pub width: usize,
    pub entries: usize,
    pub category_idx: Vec<usize>,
    pub max_weight: Vec<f32>,
    pub assignment: Option<CategoryAssignment>,
}

impl AtdLayer {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        index_in_block: usize,
        entries: Option<ParamId>,
        seed: u64,
    ) -> Result<Self> {
        let rng = |part: &str| component_rng(seed, &format!("{prefix}.{part}"));
        let c = cfg.channels;
        let tdca = match entries {
            Some(e) if cfg.branches.tdca => Some((
                LayerNorm::new(store, &format!("{prefix}.tdca_norm"), c),
                TokenDictionary::new(
                    store,
                    &format!("{prefix}.tdca"),
                    e,
                    cfg.reduced_dim,
                    &mut rng("tdca"),
                )?,
            )),
            _ => None,
        };
        let acmsa = if cfg.branches.acmsa {
            Some((
                LayerNorm::new(store, &format!("{prefix}.acmsa_norm"), c),
                AcmsaParams::new(
                    store,
                    &format!("{prefix}.acmsa"),
                    c,
                    cfg.heads,
                    &mut rng("acmsa"),
                )?,
            ))
        } else {
            None
        };
        let shift = if index_in_block % 2 == 1 { cfg.window / 2 } else { 0 };
        let swmsa_norm = LayerNorm::new(store, &format!("{prefix}.swmsa_norm"), c);
        let swmsa = WindowParams::new(
            store,
            &format!("{prefix}.swmsa"),
            c,
            cfg.window,
            shift,
            cfg.heads,
            &mut rng("swmsa"),
        )?;
        let cffn = CffnParams::new(
            store,
            &format!("{prefix}.cffn"),
            c,
            cfg.branches.category_ffn,
            &mut rng("cffn"),
        )?;
        Ok(Self {
            index_in_block,
            tdca,
            acmsa,
            swmsa_norm,
            swmsa,
            cffn,
            group_size: cfg.group_size,
        })
    }

    /// One layer over `x[H, W, C]`; `H` and `W` must be window multiples.
    ///
    /// `routing` replaces the per-token category (the TDCA argmax) when
    /// given. Routing is piecewise constant in the parameters, so holding it
    /// fixed is what makes finite differences comparable to the gradient.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        routing: Option<&[usize]>,
        trace: Option<&mut Vec<LayerTrace>>,
    ) -> Result<Var> {
        let (h, w, c) = dims3("atd_layer", tape.value(x))?;
        let n = h * w;
        let flat = tape.reshape(x, &[n, c])?;
        let mut terms = vec![flat];

        let window_in = self.swmsa_norm.forward(tape, store, flat)?;
        let window_in = tape.reshape(window_in, &[h, w, c])?;
        let window_out = swmsa(tape, store, window_in, &self.swmsa)?;
        terms.push(tape.reshape(window_out, &[n, c])?);

        let mut delta = None;
        if let Some((norm, dict)) = &self.tdca {
            let xn = norm.forward(tape, store, flat)?;
            let mut t = tdca(tape, store, xn, dict)?;
            if let Some(fixed) = routing {
                if fixed.len() != n || fixed.iter().any(|&i| i >= t.entries) {
                    return Err(Error::InvalidArgument(format!(
                        "fixed routing of {} tokens for {n} tokens and {} entries",
                        fixed.len(),
                        t.entries
                    )));
                }
                t.argmax_idx = fixed.to_vec();
            }
            terms.push(t.enhanced);
            let mut assignment = None;
            if let Some((anorm, params)) = &self.acmsa {
                let xa = anorm.forward(tape, store, flat)?;
                let (y, a) =
                    acmsa_with_categories(tape, store, xa, &t.argmax_idx, params, self.group_size)?;
                terms.push(y);
                assignment = Some(a);
            }
            if self.cffn.w_d.is_some() {
                delta = Some(select_embedding(tape, store, dict.entries, &t.argmax_idx)?);
            }
            if let Some(trace) = trace {
                trace.push(LayerTrace {
                    height: h,
                    width: w,
                    entries: t.entries,
                    category_idx: t.argmax_idx,
                    max_weight: t.max_weight,
                    assignment,
                });
            }
        }

        let summed = tape.add_n(&terms)?;
        let summed = tape.reshape(summed, &[h, w, c])?;
        cffn(tape, store, summed, delta, &self.cffn)
    }
}

#[derive(Clone, Debug)]
pub struct AtdBlock {
    pub entries: Option<ParamId>,
    pub layers: Vec<AtdLayer>,
    pub conv: Conv2d,
}

pub struct AtdModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    shallow: Conv2d,
    blocks: Vec<AtdBlock>,
    body_conv: Conv2d,
    upsample_conv: Conv2d,
    last_conv: Conv2d,
}

impl AtdModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = config.channels;
        let shallow = Conv2d::new(&mut store, "shallow", 3, 3, c, &mut component_rng(seed, "shallow"));
        let mut blocks = Vec::with_capacity(config.blocks);
        for b in 0..config.blocks {
            let entries = config.branches.tdca.then(|| {
                TokenDictionary::new_entries(
                    &mut store,
                    &format!("blocks.{b}.dictionary"),
                    config.dict_entries,
                    c,
                    &mut component_rng(seed, &format!("blocks.{b}.dictionary")),
                )
            });
            let layers = (0..config.layers_per_block)
                .map(|l| {
                    AtdLayer::new(
                        &mut store,
                        &format!("blocks.{b}.layers.{l}"),
                        &config,
                        l,
                        entries,
                        seed,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let name = format!("blocks.{b}.conv");
            let conv = Conv2d::new(&mut store, &name, 3, c, c, &mut component_rng(seed, &name));
            blocks.push(AtdBlock {
                entries,
                layers,
                conv,
            });
        }
        let body_conv = Conv2d::new(&mut store, "body_conv", 3, c, c, &mut component_rng(seed, "body_conv"));
        let r = config.scale;
        let upsample_conv = Conv2d::new(&mut store, "upsample_conv", 3, c, r * r * c, &mut component_rng(seed, "upsample_conv"));
        let last_conv = Conv2d::new(&mut store, "last_conv", 3, c, 3, &mut component_rng(seed, "last_conv"));
        Ok(Self {
            config,
            store,
            shallow,
            blocks,
            body_conv,
            upsample_conv,
            last_conv,
        })
    }

    /// Rebuild a model from named tensors (e.g. a checkpoint).
    pub fn from_tensors(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if tensors.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                model.store.len(),
                tensors.len()
            )));
        }
        for (name, t) in tensors {
            let id = model
                .store
                .find(&name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
            model.store.set(id, t)?;
        }
        Ok(model)
    }

    pub fn blocks(&self) -> &[AtdBlock] {
        &self.blocks
    }

    pub fn layers(&self) -> impl Iterator<Item = &AtdLayer> {
        self.blocks.iter().flat_map(|b| b.layers.iter())
    }

    /// Exact number of learnable scalars.
    pub fn count_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Image `[H, W, 3]` to `[rH, rW, 3]`.
    pub fn forward(&self, tape: &mut Tape, img: Var) -> Result<Var> {
        self.forward_traced(tape, img, None)
    }

    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        img: Var,
        trace: Option<&mut Vec<LayerTrace>>,
    ) -> Result<Var> {
        self.forward_with(tape, &self.store, img, None, trace)
    }

    /// Forward with parameter values taken from `store`, which must share
    /// this model's layout (used by gradient checks that perturb a copy).
    /// `routing` holds one fixed category vector per TDCA layer, in order.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        img: Var,
        routing: Option<&[Vec<usize>]>,
        mut trace: Option<&mut Vec<LayerTrace>>,
    ) -> Result<Var> {
        let tdca_layers = self.layers().filter(|l| l.tdca.is_some()).count();
        if let Some(r) = routing {
            if r.len() != tdca_layers {
                return Err(Error::InvalidArgument(format!(
                    "routing for {} layers, model has {tdca_layers} dictionary layers",
                    r.len()
                )));
            }
        }
        let mut next_route = 0;
        let (h, w, ch) = dims3("forward_sr", tape.value(img))?;
        let win = self.config.window;
        if ch != 3 {
            return Err(shape_err("forward_sr", format!("expected 3 channels, got {ch}")));
        }
        if h < win || w < win {
            return Err(Error::InvalidArgument(format!(
                "image {h}x{w} is smaller than one {win}x{win} window"
            )));
        }
        let pad_h = (win - h % win) % win;
        let pad_w = (win - w % win) % win;
        let x = tape.pad_reflect(img, pad_h, pad_w)?;

        let f0 = self.shallow.forward(tape, store, x)?;
        let mut f = f0;
        for block in &self.blocks {
            let mut y = f;
            for layer in &block.layers {
                let fixed = match (routing, &layer.tdca) {
                    (Some(r), Some(_)) => {
                        next_route += 1;
                        Some(r[next_route - 1].as_slice())
                    }
                    _ => None,
                };
                y = layer.forward(tape, store, y, fixed, trace.as_deref_mut())?;
            }
            let y = block.conv.forward(tape, store, y)?;
            f = tape.add(f, y)?;
        }
        let deep = self.body_conv.forward(tape, store, f)?;
        let fused = tape.add(f0, deep)?;

        let r = self.config.scale;
        let up = self.upsample_conv.forward(tape, store, fused)?;
        let up = tape.pixel_shuffle(up, r)?;
        let out = self.last_conv.forward(tape, store, up)?;
        tape.crop(out, r * h, r * w)
    }

    /// Inference without gradient bookkeeping.
    pub fn infer(&self, img: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(img.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    /// Inference that also returns every TDCA layer's routing.
    pub fn infer_traced(&self, img: &Tensor) -> Result<(Tensor, Vec<LayerTrace>)> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(img.clone());
        let mut traces = Vec::new();
        let y = self.forward_traced(&mut tape, x, Some(&mut traces))?;
        Ok((tape.value(y).clone(), traces))
    }
}

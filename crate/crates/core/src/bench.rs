//! Cost of category attention against global attention as the token count
//! grows: analytic FLOPs and measured wall time.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};

use crate::autograd::Tape;
use crate::categorize::{acmsa_with_categories, attention_flops, global_attention_flops, AcmsaParams};
use crate::error::Result;
use crate::layers::SeedRng;
use crate::model::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AttentionBenchConfig {
    pub channels: usize,
    pub heads: usize,
    pub group_size: usize,
    /// Number of distinct categories drawn for the tokens.
    pub categories: usize,
    /// Timings are the minimum over this many runs.
    pub repeats: usize,
    /// Global attention is only timed up to this many tokens.
    pub global_max_tokens: usize,
}

impl From<&ModelConfig> for AttentionBenchConfig {
    fn from(c: &ModelConfig) -> Self {
        Self {
            channels: c.channels,
            heads: c.heads,
            group_size: c.group_size,
            categories: c.dict_entries,
            repeats: 5,
            global_max_tokens: 4096,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionBenchRow {
    pub side: usize,
    pub tokens: usize,
    pub acmsa_flops: u64,
    pub global_flops: u64,
    pub acmsa_secs: f64,
    pub global_secs: Option<f64>,
}

/// Prepared inputs for timing one token count.
pub struct AttentionCase {
    store: ParamStore,
    params: AcmsaParams,
    x: Tensor,
    categories: Vec<usize>,
    group_size: usize,
}

impl AttentionCase {
    pub fn new(cfg: &AttentionBenchConfig, tokens: usize, seed: u64) -> Result<Self> {
        let mut rng = SeedRng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let params = AcmsaParams::new(&mut store, "acmsa", cfg.channels, cfg.heads, &mut rng)?;
        let x = Tensor::randn(&[tokens, cfg.channels], 1.0, &mut rng);
        let categories = (0..tokens).map(|_| rng.random_range(0..cfg.categories.max(1))).collect();
        Ok(Self {
            store,
            params,
            x,
            categories,
            group_size: cfg.group_size,
        })
    }

    /// Category attention with the configured sub-category size.
    pub fn run_acmsa(&self) -> Result<Tensor> {
        self.run(self.group_size, false)
    }

    /// One group holding every token.
    pub fn run_global(&self) -> Result<Tensor> {
        self.run(self.x.rows(), true)
    }

    fn run(&self, group_size: usize, single: bool) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let x = tape.constant(self.x.clone());
        let zeros;
        let cats = if single {
            zeros = vec![0; self.categories.len()];
            &zeros
        } else {
            &self.categories
        };
        let (y, _) = acmsa_with_categories(&mut tape, &self.store, x, cats, &self.params, group_size)?;
        Ok(tape.value(y).clone())
    }
}

/// Minimum wall time of `repeats` calls, after one warm-up call.
pub fn min_time<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    f()?;
    let mut best = f64::INFINITY;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        let out = f()?;
        best = best.min(t.elapsed().as_secs_f64());
        drop(out);
    }
    Ok(best)
}

/// Square feature maps of the given sides (`side^2` tokens each).
pub fn attention_bench(cfg: &AttentionBenchConfig, sides: &[usize], seed: u64) -> Result<Vec<AttentionBenchRow>> {
    let (d, heads) = (cfg.channels as u64, cfg.heads as u64);
    sides
        .iter()
        .map(|&side| {
            let tokens = side * side;
            let case = AttentionCase::new(cfg, tokens, seed)?;
            let acmsa_secs = min_time(cfg.repeats, || case.run_acmsa())?;
            let global_secs = if tokens <= cfg.global_max_tokens {
                Some(min_time(cfg.repeats, || case.run_global())?)
            } else {
                None
            };
            Ok(AttentionBenchRow {
                side,
                tokens,
                acmsa_flops: attention_flops(tokens as u64, cfg.group_size as u64, d, heads),
                global_flops: global_attention_flops(tokens as u64, d, heads),
                acmsa_secs,
                global_secs,
            })
        })
        .collect()
}

pub const BENCH_CSV_HEADER: &str = "side,tokens,acmsa_flops,global_flops,acmsa_secs,global_secs";

pub fn bench_csv(rows: &[AttentionBenchRow]) -> String {
    let mut s = format!("{BENCH_CSV_HEADER}\n");
    for r in rows {
        let global = r.global_secs.map_or(String::new(), |g| format!("{g:.6}"));
        let _ = writeln!(
            s,
            "{},{},{},{},{:.6},{global}",
            r.side, r.tokens, r.acmsa_flops, r.global_flops, r.acmsa_secs
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> AttentionBenchConfig {
        AttentionBenchConfig {
            channels: 8,
            heads: 2,
            group_size: 16,
            categories: 4,
            repeats: 1,
            global_max_tokens: 64,
        }
    }

    #[test]
    fn flop_ratios_follow_token_count() {
        let rows = attention_bench(&small(), &[8, 16], 0).unwrap();
        assert_eq!(rows[1].acmsa_flops, 4 * rows[0].acmsa_flops);
        assert_eq!(rows[1].global_flops, 16 * rows[0].global_flops);
        assert!(rows[0].global_secs.is_some() && rows[1].global_secs.is_none());
        let csv = bench_csv(&rows);
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().ends_with(','));
    }

    #[test]
    fn global_case_is_one_group() {
        let case = AttentionCase::new(&small(), 20, 1).unwrap();
        let mut cfg = small();
        cfg.group_size = 20;
        let mut wide = AttentionCase::new(&cfg, 20, 1).unwrap();
        wide.categories = vec![0; 20];
        assert_eq!(case.run_global().unwrap(), wide.run_acmsa().unwrap());
    }
}

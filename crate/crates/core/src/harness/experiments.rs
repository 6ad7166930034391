//! Experiment modes: per-head-type compression sensitivity, initial+recent vs
//! intermediate scale retention, and head masking.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::{HeadCache, HeadId, HeadType};
use crate::compression::{
    BaselineCompressor, CompressionEvent, CompressionHook, HookContext, PolicyKind,
};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::runner::{execute_with, prepare, reference_for, RunMetrics};
use crate::numerics::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepVariant {
    /// Compress only contextual heads.
    Contextual,
    /// Compress only structural heads.
    Structural,
    Both,
}

impl SweepVariant {
    pub const ALL: [SweepVariant; 3] = [
        SweepVariant::Contextual,
        SweepVariant::Structural,
        SweepVariant::Both,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SweepVariant::Contextual => "contextual",
            SweepVariant::Structural => "structural",
            SweepVariant::Both => "both",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    pub variant: String,
    pub budget: usize,
    pub metrics: RunMetrics,
}

/// Budget for compression ratio `rho`: `max(1, floor((1 - rho) * T_K))`.
pub fn budget_for_ratio(total_tokens: usize, rho: f64) -> usize {
    // The tolerance keeps e.g. (1 - 0.8) * 85 from flooring to 16.
    (((1.0 - rho) * total_tokens as f64 + 1e-9).floor() as usize).max(1)
}

/// Compression sensitivity by head type.
///
/// For every ratio the same score-based policy (the config's baseline policy,
/// or score top-k otherwise) is applied to contextual heads only, structural
/// heads only, and all heads, at budget `(1 - rho) * T_K`. Divergence is
/// against the uncompressed run.
pub fn sweep(config: &RunConfig, ratios: &[f64]) -> Result<Vec<SweepRow>> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(Error::config(format!(
            "compression ratio {r} outside [0, 1)"
        )));
    }
    let prepared = prepare(config)?;
    let types = prepared
        .types
        .clone()
        .ok_or_else(|| Error::config("sweep needs a classification or a fully planted model"))?;
    let reference = reference_for(config, &prepared)?;
    let kind = match config.policy.kind {
        k @ (PolicyKind::ScoreTopK | PolicyKind::TopKMerge | PolicyKind::Positional) => k,
        _ => PolicyKind::ScoreTopK,
    };
    let total = prepared.schedule.total_tokens();
    let jobs: Vec<(f64, SweepVariant)> = ratios
        .iter()
        .flat_map(|&r| SweepVariant::ALL.into_iter().map(move |v| (r, v)))
        .collect();
    jobs.par_iter()
        .map(|&(ratio, variant)| {
            let budget = budget_for_ratio(total, ratio);
            let only = match variant {
                SweepVariant::Both => None,
                SweepVariant::Contextual | SweepVariant::Structural => {
                    let wanted = if variant == SweepVariant::Contextual {
                        HeadType::Contextual
                    } else {
                        HeadType::Structural
                    };
                    Some(
                        types
                            .iter()
                            .map(|l| l.iter().map(|t| *t == wanted).collect())
                            .collect(),
                    )
                }
            };
            let hook = BaselineCompressor {
                kind,
                budget,
                n_obs: config.policy.n_obs,
                strategy: config.policy.query_strategy,
                n_init: prepared.n_init,
                only,
            };
            let mut cfg = config.clone();
            cfg.policy.kind = kind;
            cfg.budget = Some(crate::harness::config::BudgetConfig {
                average: budget,
                contextual: None,
                ratio: 1.0,
                alpha: None,
            });
            let label = format!("{}:{}", kind.name(), variant.name());
            let out = execute_with(&cfg, &prepared, Some(&hook), &label, reference.as_ref())?;
            Ok(SweepRow {
                ratio,
                variant: variant.name().to_string(),
                budget,
                metrics: out.metrics,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetentionStrategy {
    /// Keep the first `n_init` tokens and the current scale.
    InitRecent,
    /// Keep `n_init` evenly spaced intermediate tokens and the current scale.
    Intermediate,
}

impl RetentionStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            RetentionStrategy::InitRecent => "init_recent",
            RetentionStrategy::Intermediate => "intermediate",
        }
    }
}

/// Fixed scale-retention rule applied to every head. It fires at steps whose
/// older cache (`T_{k-1}`) holds at least `n_init` tokens beyond the init
/// prefix, so both strategies keep the same number of rows.
#[derive(Debug, Clone)]
pub struct RetentionCompressor {
    pub strategy: RetentionStrategy,
    pub n_init: usize,
}

impl RetentionCompressor {
    pub fn retained(&self, part: &HeadCache, n_k: usize) -> Vec<usize> {
        let older = part.len() - n_k;
        let (init, middle): (Vec<usize>, Vec<usize>) =
            (0..older).partition(|&i| part.origins()[i] < self.n_init);
        let mut keep = match self.strategy {
            RetentionStrategy::InitRecent => init,
            RetentionStrategy::Intermediate => {
                let take = self.n_init.min(middle.len());
                (0..take).map(|i| middle[i * middle.len() / take]).collect()
            }
        };
        keep.extend(older..part.len());
        keep
    }
}

impl CompressionHook for RetentionCompressor {
    fn compress(
        &self,
        ctx: &HookContext,
        part: &mut HeadCache,
    ) -> Result<Option<CompressionEvent>> {
        let prev = ctx.schedule.cumulative(ctx.step - 1);
        if self.n_init == 0 || prev < 2 * self.n_init {
            return Ok(None);
        }
        let n_k = ctx.schedule.tokens(ctx.step);
        let keep = self.retained(part, n_k);
        let pre = part.len();
        part.retain_rows(&keep)?;
        Ok(Some(CompressionEvent {
            layer: ctx.id.layer,
            head: ctx.id.head,
            head_type: part.head_type(),
            budget: self.n_init + n_k,
            pre_rows: pre,
            post_rows: part.len(),
            observed_queries: 0,
            overhead_products: 0,
            merged: false,
            middle_slots: None,
        }))
    }
}

/// Runs both retention strategies on the config's model and seed.
pub fn retention_compare(config: &RunConfig) -> Result<Vec<SweepRow>> {
    let prepared = prepare(config)?;
    let reference = reference_for(config, &prepared)?;
    let s = &prepared.schedule;
    let kept = prepared.n_init + s.tokens(s.num_scales());
    let ratio = (1.0 - kept as f64 / s.total_tokens() as f64).max(0.0);
    [
        RetentionStrategy::InitRecent,
        RetentionStrategy::Intermediate,
    ]
    .par_iter()
    .map(|&strategy| {
        let hook = RetentionCompressor {
            strategy,
            n_init: prepared.n_init,
        };
        let label = format!("retention:{}", strategy.name());
        let mut out = execute_with(config, &prepared, Some(&hook), &label, reference.as_ref())?;
        out.metrics.rho = ratio;
        Ok(SweepRow {
            ratio,
            variant: strategy.name().to_string(),
            budget: kept,
            metrics: out.metrics,
        })
    })
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub masked: Vec<HeadId>,
    /// Divergence is measured against the same config without masking.
    pub metrics: RunMetrics,
}

/// Zeroes the selected heads' outputs and compares against the unmasked run.
pub fn mask_heads(config: &RunConfig) -> Result<MaskReport> {
    if config.masking.is_none() {
        return Err(Error::config("mask mode needs a masking section"));
    }
    let prepared = prepare(config)?;
    let hook = crate::harness::runner::policy_hook(config, &prepared);
    let mut unmasked = prepared.clone();
    unmasked.mask = BTreeSet::new();
    let baseline = execute_with(
        config,
        &unmasked,
        hook.as_deref(),
        config.policy.kind.name(),
        None,
    )?;
    let label = format!("{}:masked", config.policy.kind.name());
    let out = execute_with(
        config,
        &prepared,
        hook.as_deref(),
        &label,
        Some(&baseline.final_hidden),
    )?;
    Ok(MaskReport {
        masked: prepared.mask.iter().copied().collect(),
        metrics: out.metrics,
    })
}

/// Final hidden states when every head is masked: the last layer emits zeros.
pub fn no_attention_baseline(config: &RunConfig) -> Result<Matrix> {
    let s = config.schedule()?;
    Ok(Matrix::zeros(
        s.tokens(s.num_scales()),
        config.model.model_dim,
    ))
}

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::cache::{allocate_budgets, allocate_with_contextual, BudgetPlan, HeadId, HeadType};
use crate::classifier::HeadClassification;
use crate::compression::{BaselineCompressor, CompressionHook, HeadAwareCompressor, PolicyKind};
use crate::error::{Error, Result};
use crate::harness::config::{MaskConfig, MaskTarget, RunConfig};
use crate::harness::export::{Trace, TraceStep};
use crate::model::{generate, ExecMode, GenerationOptions, RecordAttention, SyntheticModel};
use crate::numerics::{cosine, Matrix};
use crate::oracle::reference_hidden;
use crate::schedule::ScaleSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub max_abs: f64,
    pub mean_abs: f64,
    /// Cosine similarity of the flattened hidden states (1 when both are zero).
    pub cosine: f64,
}

pub fn divergence(out: &Matrix, reference: &Matrix) -> Divergence {
    assert_eq!(
        (out.rows(), out.cols()),
        (reference.rows(), reference.cols())
    );
    let diffs = out
        .data()
        .iter()
        .zip(reference.data())
        .map(|(a, b)| (a - b).abs());
    let (max_abs, sum) = diffs.fold((0.0f64, 0.0), |(m, s), d| (m.max(d), s + d));
    let n = out.data().len().max(1) as f64;
    let both_zero = out.data().iter().chain(reference.data()).all(|v| *v == 0.0);
    Divergence {
        max_abs,
        mean_abs: sum / n,
        cosine: if both_zero {
            1.0
        } else {
            cosine(out.data(), reference.data())
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config_hash: String,
    pub rho: f64,
    pub policy: String,
    /// Query-key products of the attention, summed over heads and steps.
    pub flops: u64,
    pub per_step_flops: Vec<u64>,
    pub overhead_flops: u64,
    pub value_products: u64,
    pub peak_entries: usize,
    pub final_entries: usize,
    pub divergence: Option<Divergence>,
    pub layer_average_rows: Vec<f64>,
}

/// Everything a run needs that is derived from its config.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub schedule: ScaleSchedule,
    pub model: SyntheticModel,
    pub classification: Option<HeadClassification>,
    pub types: Option<Vec<Vec<HeadType>>>,
    pub plan: Option<BudgetPlan>,
    pub n_init: usize,
    pub mask: BTreeSet<HeadId>,
}

/// Splits the average budget over the classified head mix. The split uses the
/// realized contextual fraction unless the config pins `alpha`; budgets are
/// then clipped to the full cache length.
fn budget_plan(
    config: &RunConfig,
    classification: &HeadClassification,
    max_rows: usize,
) -> Result<BudgetPlan> {
    let budget = config
        .budget
        .as_ref()
        .ok_or_else(|| Error::config("head-aware policy needs a budget"))?;
    let alpha = budget
        .alpha
        .unwrap_or_else(|| classification.realized_fraction());
    if alpha <= 0.0 || alpha >= 1.0 {
        // One head type only: it gets the whole average budget.
        let b = budget
            .contextual
            .filter(|_| alpha >= 1.0)
            .unwrap_or(budget.average);
        if b == 0 || b > budget.average {
            return Err(Error::config("single-type budget must be in 1..=B"));
        }
        let plan = BudgetPlan {
            average: budget.average,
            alpha,
            contextual: b,
            structural: b,
            ratio: 1.0,
        };
        return Ok(plan.clip_to_length(max_rows));
    }
    let plan = match budget.contextual {
        Some(bc) => allocate_with_contextual(budget.average, alpha, bc)?,
        None => allocate_budgets(budget.average, alpha, budget.ratio)?,
    };
    Ok(plan.clip_to_length(max_rows))
}

/// Heads to zero out, ordered by how typical they are of their type.
pub fn select_mask(
    mask: &MaskConfig,
    classification: Option<&HeadClassification>,
    layers: usize,
    heads: usize,
) -> Result<BTreeSet<HeadId>> {
    if !(mask.fraction > 0.0 && mask.fraction <= 1.0) {
        return Err(Error::config(format!(
            "mask fraction must be in (0, 1], got {}",
            mask.fraction
        )));
    }
    let all = || (0..layers).flat_map(|l| (0..heads).map(move |h| HeadId::new(l, h)));
    let mut candidates: Vec<HeadId> = match mask.head_type {
        MaskTarget::All => all().collect(),
        target => {
            let c = classification
                .ok_or_else(|| Error::config("masking by head type needs a classification"))?;
            let wanted = if target == MaskTarget::Contextual {
                HeadType::Contextual
            } else {
                HeadType::Structural
            };
            let types = c.types();
            let var = |id: &HeadId| c.variance[id.layer][id.head];
            let mut ids: Vec<HeadId> = all()
                .filter(|id| types[id.layer][id.head] == wanted)
                .collect();
            ids.sort_by(|a, b| {
                let ord = var(a).total_cmp(&var(b));
                let ord = if wanted == HeadType::Structural {
                    ord.reverse()
                } else {
                    ord
                };
                ord.then(a.cmp(b))
            });
            ids
        }
    };
    let count = ((mask.fraction * candidates.len() as f64).round() as usize).min(candidates.len());
    candidates.truncate(count);
    Ok(candidates.into_iter().collect())
}

pub fn prepare(config: &RunConfig) -> Result<Prepared> {
    config.policy.validate()?;
    let schedule = config.schedule()?;
    let model = config.build_model(&schedule)?;
    let classification = config
        .classification
        .as_ref()
        .map(|c| c.resolve())
        .transpose()?;
    if let Some(c) = &classification {
        c.validate(model.layers(), model.heads())?;
    }
    let types = classification
        .as_ref()
        .map(HeadClassification::types)
        .or_else(|| model.planted_types());

    let kind = config.policy.kind;
    if kind == PolicyKind::HeadAware && classification.is_none() {
        return Err(Error::config(
            "head-aware policy needs a head classification",
        ));
    }
    if kind != PolicyKind::None && config.budget.is_none() {
        return Err(Error::config(format!(
            "policy {} needs a budget",
            kind.name()
        )));
    }
    if config.mode == ExecMode::CountOnly && kind.uses_scores() {
        return Err(Error::config(format!(
            "policy {} needs attention scores and cannot run count-only",
            kind.name()
        )));
    }
    let plan = match &classification {
        Some(c) if kind == PolicyKind::HeadAware => {
            Some(budget_plan(config, c, schedule.total_tokens())?)
        }
        _ => None,
    };
    let n_init = config.policy.init_tokens(&schedule);
    if let (Some(plan), Some(types)) = (&plan, &types) {
        let has_structural = types.iter().flatten().any(|t| *t == HeadType::Structural);
        let n_last = schedule.tokens(schedule.num_scales());
        if has_structural && plan.structural < schedule.total_tokens() && plan.structural < n_last {
            return Err(Error::config(format!(
                "structural budget {} cannot hold the final scale of {n_last} tokens",
                plan.structural
            )));
        }
    }
    let mask = match &config.masking {
        Some(m) => select_mask(m, classification.as_ref(), model.layers(), model.heads())?,
        None => BTreeSet::new(),
    };
    Ok(Prepared {
        schedule,
        model,
        classification,
        types,
        plan,
        n_init,
        mask,
    })
}

/// The compression hook selected by the config's policy.
pub fn policy_hook(config: &RunConfig, prepared: &Prepared) -> Option<Box<dyn CompressionHook>> {
    let p = &config.policy;
    match p.kind {
        PolicyKind::None => None,
        PolicyKind::HeadAware => Some(Box::new(HeadAwareCompressor {
            types: prepared
                .types
                .clone()
                .expect("classification checked in prepare"),
            plan: prepared.plan.expect("plan checked in prepare"),
            n_obs: p.n_obs,
            strategy: p.query_strategy,
            n_init: prepared.n_init,
            merge_final_step: p.merge_final_step,
        })),
        kind => Some(Box::new(BaselineCompressor {
            kind,
            budget: config
                .budget
                .as_ref()
                .expect("budget checked in prepare")
                .average,
            n_obs: p.n_obs,
            strategy: p.query_strategy,
            n_init: prepared.n_init,
            only: None,
        })),
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub trace: Trace,
    pub final_hidden: Matrix,
}

/// Runs a generation with an explicit hook and label, comparing against
/// `reference` when given.
pub fn execute_with(
    config: &RunConfig,
    prepared: &Prepared,
    hook: Option<&dyn CompressionHook>,
    policy_label: &str,
    reference: Option<&Matrix>,
) -> Result<RunOutcome> {
    let opts = GenerationOptions {
        hook,
        mask: prepared.mask.clone(),
        record: if config.outputs.attention_maps {
            RecordAttention::AllSteps
        } else {
            RecordAttention::None
        },
        mode: config.mode,
        head_types: prepared.types.clone(),
        record_positions: true,
    };
    let g = generate(&prepared.model, &prepared.schedule, config.seed, &opts)?;
    let metrics = RunMetrics {
        config_hash: config.hash(),
        rho: config.compression_ratio(&prepared.schedule),
        policy: policy_label.to_string(),
        flops: g.score_products(),
        per_step_flops: g.steps.iter().map(|s| s.stats.score_products).collect(),
        overhead_flops: g.overhead_products(),
        value_products: g.value_products(),
        peak_entries: g.cache.peak_entries(),
        final_entries: g.cache.total_entries(),
        divergence: reference.map(|r| divergence(&g.final_hidden, r)),
        layer_average_rows: g.cache.layer_average_rows(),
    };
    let steps = g
        .steps
        .into_iter()
        .map(|s| TraceStep {
            k: s.k,
            tokens: s.tokens,
            cache_rows: s.cache_rows,
            retained_positions: s.retained.unwrap_or_default(),
            score_products: s.stats.score_products,
            overhead_products: s.stats.overhead_products,
            value_products: s.stats.value_products,
            events: s.stats.events,
            attention: s.attention.map(|maps| {
                maps.iter()
                    .map(|l| l.iter().map(Matrix::to_rows).collect())
                    .collect()
            }),
        })
        .collect();
    let trace = Trace {
        config: config.echo(),
        config_hash: metrics.config_hash.clone(),
        n_init: prepared.n_init,
        budgets: prepared.plan,
        head_types: prepared.types.clone(),
        steps,
        metrics: metrics.clone(),
    };
    Ok(RunOutcome {
        metrics,
        trace,
        final_hidden: g.final_hidden,
    })
}

/// Reference hidden states, when the config asks for a comparison.
pub fn reference_for(config: &RunConfig, prepared: &Prepared) -> Result<Option<Matrix>> {
    if config.compare_reference && config.mode == ExecMode::Full {
        Ok(Some(reference_hidden(
            &prepared.model,
            &prepared.schedule,
            config.seed,
        )?))
    } else {
        Ok(None)
    }
}

/// Runs the configured policy without writing any files.
pub fn execute(config: &RunConfig) -> Result<RunOutcome> {
    let prepared = prepare(config)?;
    let reference = reference_for(config, &prepared)?;
    let hook = policy_hook(config, &prepared);
    execute_with(
        config,
        &prepared,
        hook.as_deref(),
        config.policy.kind.name(),
        reference.as_ref(),
    )
}

/// Runs the configured policy and writes the trace and metrics files named in
/// the config.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    let outcome = execute(config)?;
    if let Some(path) = &config.outputs.trace {
        outcome.trace.write(path)?;
    }
    if let Some(path) = &config.outputs.metrics {
        crate::harness::export::write_metrics_csv(path, std::slice::from_ref(&outcome.metrics))?;
    }
    Ok(outcome)
}

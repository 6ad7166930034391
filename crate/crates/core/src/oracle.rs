//! Independent references: closed-form and explicit-sum operation counts,
//! a sort-based top-k, and the uncompressed generation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{generate, GenerationOptions, RecordAttention, SyntheticModel};
use crate::numerics::Matrix;
use crate::schedule::{build_schedule, ScaleSchedule};

/// Query-key inner-product counts of a single head over a whole run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub per_step: Vec<u64>,
    pub total: u64,
    /// Same total through a closed form (or piecewise closed form).
    pub formula_total: u64,
    /// `B * T_K`, the budgeted upper bound. `None` for the vanilla report.
    pub bound: Option<u64>,
    /// Subset-attention cost `sum_{k >= k_s} N_obs * (B + N_k)`.
    pub overhead: u64,
    /// First 1-based step whose cache exceeds the budget.
    pub first_compressed_step: Option<usize>,
}

fn overflow() -> Error {
    Error::config("operation count overflows 64 bits")
}

fn mul(a: u64, b: u64) -> Result<u64> {
    a.checked_mul(b).ok_or_else(overflow)
}

fn add(a: u64, b: u64) -> Result<u64> {
    a.checked_add(b).ok_or_else(overflow)
}

/// `sum_{k=1}^{K} N_k T_k = (1 - a^{2K} - a^{2K+2} + a^{4K+2}) / ((a^2-1)^2 (a^2+1))`.
pub fn vanilla_closed_form(a: u64, num_scales: usize) -> Result<u64> {
    if num_scales == 0 {
        return Ok(0);
    }
    let a = a as u128;
    let k = num_scales as u32;
    let pow = |e: u32| a.checked_pow(e).ok_or_else(overflow);
    let a2 = a * a;
    let numerator = pow(4 * k + 2)?
        .checked_add(1)
        .and_then(|n| n.checked_sub(pow(2 * k).ok()?))
        .and_then(|n| n.checked_sub(pow(2 * k + 2).ok()?))
        .ok_or_else(overflow)?;
    let denom = (a2 - 1) * (a2 - 1) * (a2 + 1);
    if numerator % denom != 0 {
        return Err(Error::state("closed form is not an integer"));
    }
    u64::try_from(numerator / denom).map_err(|_| overflow())
}

/// Cost of the uncompressed run: `N_k * T_k` per step.
pub fn vanilla_flops(a: u64, num_scales: usize) -> Result<FlopReport> {
    let s = build_schedule(a, num_scales)?;
    let per_step = (1..=num_scales)
        .map(|k| mul(s.tokens(k) as u64, s.cumulative(k) as u64))
        .collect::<Result<Vec<_>>>()?;
    let total = per_step.iter().try_fold(0u64, |acc, &x| add(acc, x))?;
    let formula_total = vanilla_closed_form(a, num_scales)?;
    if total != formula_total {
        return Err(Error::state(format!(
            "explicit sum {total} disagrees with closed form {formula_total}"
        )));
    }
    Ok(FlopReport {
        per_step,
        total,
        formula_total,
        bound: None,
        overhead: 0,
        first_compressed_step: None,
    })
}

/// Cost with every head capped at `budget` rows: `N_k * min(T_k, B)` per step,
/// plus the importance-estimation overhead reported separately.
pub fn budgeted_flops(
    a: u64,
    num_scales: usize,
    budget: usize,
    n_obs: usize,
) -> Result<FlopReport> {
    if budget == 0 {
        return Err(Error::config("budget must be >= 1"));
    }
    let s = build_schedule(a, num_scales)?;
    let b = budget as u64;
    let per_step = (1..=num_scales)
        .map(|k| mul(s.tokens(k) as u64, (s.cumulative(k) as u64).min(b)))
        .collect::<Result<Vec<_>>>()?;
    let total = per_step.iter().try_fold(0u64, |acc, &x| add(acc, x))?;

    let first = (1..=num_scales).find(|&k| s.cumulative(k) > budget);
    // Uncapped prefix by closed form, then B per token for the rest.
    let formula_total = match first {
        None => vanilla_closed_form(a, num_scales)?,
        Some(ks) => {
            let prefix = vanilla_closed_form(a, ks - 1)?;
            let rest = (s.total_tokens() - s.cumulative(ks - 1)) as u64;
            add(prefix, mul(b, rest)?)?
        }
    };
    if total != formula_total {
        return Err(Error::state(format!(
            "explicit sum {total} disagrees with piecewise form {formula_total}"
        )));
    }
    let overhead = match first {
        None => 0,
        Some(ks) => (ks..=num_scales).try_fold(0u64, |acc, k| {
            add(acc, mul(n_obs as u64, b + s.tokens(k) as u64)?)
        })?,
    };
    Ok(FlopReport {
        per_step,
        total,
        formula_total,
        bound: Some(mul(b, s.total_tokens() as u64)?),
        overhead,
        first_compressed_step: first,
    })
}

/// Importance-estimation products actually performed by a single head held at
/// `budget` rows: each compression observes `min(N_obs, N_k)` queries over
/// `min(T_{k-1}, B) + N_k` cached rows. Never exceeds [`FlopReport::overhead`].
pub fn observed_overhead(schedule: &ScaleSchedule, budget: usize, n_obs: usize) -> u64 {
    (1..=schedule.num_scales())
        .filter(|&k| schedule.cumulative(k) > budget)
        .map(|k| {
            let n_k = schedule.tokens(k);
            let pre_rows = schedule.cumulative(k - 1).min(budget) + n_k;
            (n_obs.min(n_k) * pre_rows) as u64
        })
        .sum()
}

/// Sort-based top-k: stable descending sort, first `k`, returned ascending.
pub fn naive_topk(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::state(format!(
            "top-{k} requested from {} scores",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|a, b| scores[*b].partial_cmp(&scores[*a]).expect("finite scores"));
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ReferenceRun {
    pub final_hidden: Matrix,
    /// `attention[step - 1][layer][head]`.
    pub attention: Vec<Vec<Vec<Matrix>>>,
}

/// The uncompressed generation with every step's attention maps.
pub fn full_attention_reference(
    model: &SyntheticModel,
    schedule: &ScaleSchedule,
    seed: u64,
) -> Result<ReferenceRun> {
    let opts = GenerationOptions {
        record: RecordAttention::AllSteps,
        ..Default::default()
    };
    let g = generate(model, schedule, seed, &opts)?;
    Ok(ReferenceRun {
        final_hidden: g.final_hidden,
        attention: g
            .steps
            .into_iter()
            .map(|s| s.attention.expect("attention recorded"))
            .collect(),
    })
}

/// Final hidden states of the uncompressed generation.
pub fn reference_hidden(
    model: &SyntheticModel,
    schedule: &ScaleSchedule,
    seed: u64,
) -> Result<Matrix> {
    Ok(generate(model, schedule, seed, &GenerationOptions::default())?.final_hidden)
}

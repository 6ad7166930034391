//! Token importance from subset attention, the contextual and structural
//! compression strategies, and simplified baseline policies.
//!
//! Every compressor works on one [`HeadCache`] partition at a time and only
//! ever removes rows, so retained positions keep their relative order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cache::{BudgetPlan, HeadCache, HeadId, HeadType};
use crate::error::{Error, Result};
use crate::numerics::{cosine, matmul_transposed, softmax_rows, Matrix};
use crate::schedule::ScaleSchedule;
use crate::seed::derive_seed;

/// How the observed query subset is drawn from the current scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryStrategy {
    #[default]
    Uniform,
    Random,
    Init,
    Recent,
    Full,
}

impl QueryStrategy {
    pub const ALL: [QueryStrategy; 5] = [
        QueryStrategy::Uniform,
        QueryStrategy::Random,
        QueryStrategy::Init,
        QueryStrategy::Recent,
        QueryStrategy::Full,
    ];
}

/// Query row indices (ascending) observed for importance estimation.
pub fn select_queries(
    n_queries: usize,
    n_obs: usize,
    strategy: QueryStrategy,
    seed: u64,
) -> Vec<usize> {
    let take = n_obs.min(n_queries);
    if take == n_queries || strategy == QueryStrategy::Full {
        return (0..n_queries).collect();
    }
    match strategy {
        QueryStrategy::Uniform => {
            let mut idx: Vec<usize> = (0..take).map(|i| i * n_queries / take).collect();
            idx.dedup();
            idx
        }
        QueryStrategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx = rand::seq::index::sample(&mut rng, n_queries, take).into_vec();
            idx.sort_unstable();
            idx
        }
        QueryStrategy::Init => (0..take).collect(),
        QueryStrategy::Recent => (n_queries - take..n_queries).collect(),
        QueryStrategy::Full => unreachable!(),
    }
}

/// `Softmax(Q_sub K^T)` over the selected query rows.
pub fn subset_attention(
    queries: &Matrix,
    keys: &Matrix,
    n_obs: usize,
    strategy: QueryStrategy,
    seed: u64,
) -> Result<Matrix> {
    let idx = select_queries(queries.rows(), n_obs, strategy, seed);
    Ok(softmax_rows(&matmul_transposed(
        &queries.select_rows(&idx),
        keys,
    )?))
}

/// Column sums of an attention matrix: cumulative mass each key receives.
pub fn cumulative_scores(att: &Matrix) -> Vec<f64> {
    let mut scores = vec![0.0; att.cols()];
    for r in 0..att.rows() {
        for (s, v) in scores.iter_mut().zip(att.row(r)) {
            *s += v;
        }
    }
    scores
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub scores: Vec<f64>,
    pub observed_queries: usize,
    pub strategy: QueryStrategy,
}

impl ImportanceScores {
    pub fn from_attention(att: &Matrix, strategy: QueryStrategy) -> Self {
        ImportanceScores {
            scores: cumulative_scores(att),
            observed_queries: att.rows(),
            strategy,
        }
    }
}

/// Indices of the `k` largest scores, ties to the lower index, returned ascending.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::state(format!(
            "top-{k} requested from {} scores",
            scores.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Folds evicted tokens into their most similar retained token.
///
/// Each evicted key goes to the retained key with the highest cosine
/// similarity (ties to the lower index) with weight `max(cos, 0)`. The retained
/// key and value become `(x_t + sum s_e x_e) / (1 + sum s_e)`; values reuse the
/// key weights.
pub fn merge_evicted(
    retained_keys: &Matrix,
    retained_values: &Matrix,
    evicted_keys: &Matrix,
    evicted_values: &Matrix,
) -> Result<(Matrix, Matrix)> {
    if retained_keys.rows() == 0 {
        return Err(Error::state("cannot merge into an empty retained set"));
    }
    if retained_keys.rows() != retained_values.rows()
        || evicted_keys.rows() != evicted_values.rows()
    {
        return Err(Error::state("key/value row counts differ"));
    }
    let mut out_k = retained_keys.clone();
    let mut out_v = retained_values.clone();
    if evicted_keys.rows() == 0 {
        return Ok((out_k, out_v));
    }

    let mut weight_sum = vec![0.0; retained_keys.rows()];
    let mut touched = vec![false; retained_keys.rows()];
    for e in 0..evicted_keys.rows() {
        let ek = evicted_keys.row(e);
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for t in 0..retained_keys.rows() {
            let sim = cosine(ek, retained_keys.row(t));
            if sim > best_sim {
                best_sim = sim;
                best = t;
            }
        }
        let w = best_sim.max(0.0);
        if w == 0.0 {
            continue;
        }
        touched[best] = true;
        weight_sum[best] += w;
        for (o, x) in out_k.row_mut(best).iter_mut().zip(ek) {
            *o += w * x;
        }
        for (o, x) in out_v.row_mut(best).iter_mut().zip(evicted_values.row(e)) {
            *o += w * x;
        }
    }
    for t in 0..retained_keys.rows() {
        if touched[t] {
            let denom = 1.0 + weight_sum[t];
            out_k.row_mut(t).iter_mut().for_each(|x| *x /= denom);
            out_v.row_mut(t).iter_mut().for_each(|x| *x /= denom);
        }
    }
    Ok((out_k, out_v))
}

/// Keeps `retained` rows (ascending); when `merge` is set the evicted rows are
/// merged into them first.
fn apply_retention(part: &mut HeadCache, retained: &[usize], merge: bool) -> Result<()> {
    if merge && retained.len() < part.len() {
        let mut keep = vec![false; part.len()];
        retained.iter().for_each(|&i| keep[i] = true);
        let evicted: Vec<usize> = (0..part.len()).filter(|&i| !keep[i]).collect();
        let (k, v) = merge_evicted(
            &part.keys().select_rows(retained),
            &part.values().select_rows(retained),
            &part.keys().select_rows(&evicted),
            &part.values().select_rows(&evicted),
        )?;
        part.retain_rows(retained)?;
        part.overwrite_kv(k, v)?;
    } else {
        part.retain_rows(retained)?;
    }
    Ok(())
}

fn check_scores(part: &HeadCache, scores: &[f64]) -> Result<()> {
    if scores.len() != part.len() {
        return Err(Error::state(format!(
            "{} scores for a cache of {} rows",
            scores.len(),
            part.len()
        )));
    }
    Ok(())
}

/// Contextual strategy: keep the top-`budget` tokens by score, merging the
/// evicted ones when `merge` is set (the final step).
pub fn compress_contextual(
    part: &mut HeadCache,
    scores: &[f64],
    budget: usize,
    merge: bool,
) -> Result<()> {
    if part.len() <= budget {
        return Ok(());
    }
    check_scores(part, scores)?;
    let keep = top_k_indices(scores, budget)?;
    apply_retention(part, &keep, merge)
}

/// Row indices kept by the structural strategy.
///
/// The last `n_k` rows (current scale) always stay. Rows whose origin is below
/// `n_init` stay while the budget allows, and the remaining `M` slots go to the
/// highest-scoring rows in between. If `budget < n_k + n_init` the init prefix
/// is shortened first; `budget < n_k` is a configuration error.
pub fn structural_retained(
    part: &HeadCache,
    scores: &[f64],
    budget: usize,
    n_init: usize,
    n_k: usize,
) -> Result<Vec<usize>> {
    let rows = part.len();
    if rows <= budget {
        return Ok((0..rows).collect());
    }
    check_scores(part, scores)?;
    let n_k = n_k.min(rows);
    if budget < n_k {
        return Err(Error::config(format!(
            "structural budget {budget} cannot hold the current scale of {n_k} tokens"
        )));
    }
    let older = rows - n_k;
    let init_rows: Vec<usize> = (0..older).filter(|&i| part.origins()[i] < n_init).collect();
    let init_keep = init_rows.len().min(budget - n_k);
    let middle: Vec<usize> = (0..older)
        .filter(|&i| part.origins()[i] >= n_init)
        .collect();
    let slots = budget - n_k - init_keep;

    let mut keep: Vec<usize> = init_rows[..init_keep].to_vec();
    if middle.len() <= slots {
        keep.extend_from_slice(&middle);
    } else {
        let middle_scores: Vec<f64> = middle.iter().map(|&i| scores[i]).collect();
        keep.extend(
            top_k_indices(&middle_scores, slots)?
                .into_iter()
                .map(|j| middle[j]),
        );
    }
    keep.extend(older..rows);
    keep.sort_unstable();
    Ok(keep)
}

/// Structural strategy: init prefix, top-`M` middle tokens and the whole current scale.
pub fn compress_structural(
    part: &mut HeadCache,
    scores: &[f64],
    budget: usize,
    n_init: usize,
    n_k: usize,
) -> Result<()> {
    if part.len() <= budget {
        return Ok(());
    }
    let keep = structural_retained(part, scores, budget, n_init, n_k)?;
    part.retain_rows(&keep)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// Head-aware: contextual/structural strategies with asymmetric budgets.
    HeadAware,
    /// First `n_init` plus most recent tokens, no scores.
    Positional,
    /// Global top-B by cumulative score, same for every head.
    ScoreTopK,
    /// `ScoreTopK` plus merging at every compression.
    TopKMerge,
    None,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::HeadAware => "head_aware",
            PolicyKind::Positional => "positional",
            PolicyKind::ScoreTopK => "score_top_k",
            PolicyKind::TopKMerge => "top_k_merge",
            PolicyKind::None => "none",
        }
    }

    pub fn uses_scores(&self) -> bool {
        matches!(
            self,
            PolicyKind::HeadAware | PolicyKind::ScoreTopK | PolicyKind::TopKMerge
        )
    }
}

fn default_n_obs() -> usize {
    32
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    #[serde(default = "default_n_obs")]
    pub n_obs: usize,
    /// Defaults to the token count of the first two scales.
    #[serde(default)]
    pub n_init: Option<usize>,
    #[serde(default = "default_true")]
    pub merge_final_step: bool,
    #[serde(default)]
    pub query_strategy: QueryStrategy,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        PolicyConfig {
            kind,
            n_obs: default_n_obs(),
            n_init: None,
            merge_final_step: true,
            query_strategy: QueryStrategy::Uniform,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_obs == 0 {
            return Err(Error::config("n_obs must be >= 1"));
        }
        Ok(())
    }

    pub fn init_tokens(&self, schedule: &ScaleSchedule) -> usize {
        self.n_init
            .unwrap_or_else(|| schedule.default_init_tokens())
    }
}

/// Attention of a head's current-step queries over its cache, as seen by a
/// compression hook before it mutates the cache.
pub trait AttentionScorer {
    fn num_queries(&self) -> usize;
    /// Attention rows for the listed query indices over every row of `part`.
    fn attention(&self, query_rows: &[usize], part: &HeadCache) -> Result<Matrix>;
}

pub struct HookContext<'a> {
    pub id: HeadId,
    pub step: usize,
    pub schedule: &'a ScaleSchedule,
    pub seed: u64,
    pub scorer: &'a dyn AttentionScorer,
}

impl HookContext<'_> {
    pub fn is_final_step(&self) -> bool {
        self.step == self.schedule.num_scales()
    }

    /// Subset-attention importance for the current cache of `part`.
    pub fn estimate(
        &self,
        part: &HeadCache,
        n_obs: usize,
        strategy: QueryStrategy,
    ) -> Result<ImportanceScores> {
        let seed = derive_seed(
            self.seed,
            &[self.id.layer as u64, self.id.head as u64, self.step as u64],
        );
        let idx = select_queries(self.scorer.num_queries(), n_obs, strategy, seed);
        let att = self.scorer.attention(&idx, part)?;
        Ok(ImportanceScores::from_attention(&att, strategy))
    }
}

/// One compression of one partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionEvent {
    pub layer: usize,
    pub head: usize,
    pub head_type: Option<HeadType>,
    pub budget: usize,
    pub pre_rows: usize,
    pub post_rows: usize,
    pub observed_queries: usize,
    /// Score products spent on importance estimation.
    pub overhead_products: u64,
    pub merged: bool,
    /// Free slots `M` left for middle tokens by the structural strategy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub middle_slots: Option<i64>,
}

impl CompressionEvent {
    fn new(ctx: &HookContext, head_type: Option<HeadType>, budget: usize, pre_rows: usize) -> Self {
        CompressionEvent {
            layer: ctx.id.layer,
            head: ctx.id.head,
            head_type,
            budget,
            pre_rows,
            post_rows: pre_rows,
            observed_queries: 0,
            overhead_products: 0,
            merged: false,
            middle_slots: None,
        }
    }

    fn observed(mut self, scores: &ImportanceScores) -> Self {
        self.observed_queries = scores.observed_queries;
        self.overhead_products = (scores.observed_queries * scores.scores.len()) as u64;
        self
    }
}

/// Runs after a head's keys/values for the current step are appended and
/// before its attention is computed.
pub trait CompressionHook: Sync {
    fn compress(&self, ctx: &HookContext, part: &mut HeadCache)
        -> Result<Option<CompressionEvent>>;
}

/// Contextual/structural compression with per-type budgets.
#[derive(Debug, Clone)]
pub struct HeadAwareCompressor {
    pub types: Vec<Vec<HeadType>>,
    pub plan: BudgetPlan,
    pub n_obs: usize,
    pub strategy: QueryStrategy,
    pub n_init: usize,
    pub merge_final_step: bool,
}

impl CompressionHook for HeadAwareCompressor {
    fn compress(
        &self,
        ctx: &HookContext,
        part: &mut HeadCache,
    ) -> Result<Option<CompressionEvent>> {
        let head_type = self.types[ctx.id.layer][ctx.id.head];
        let budget = self.plan.budget_of(head_type);
        let pre = part.len();
        if pre <= budget {
            return Ok(None);
        }
        let scores = ctx.estimate(part, self.n_obs, self.strategy)?;
        let mut event = CompressionEvent::new(ctx, Some(head_type), budget, pre).observed(&scores);
        match head_type {
            HeadType::Contextual => {
                let merge = self.merge_final_step && ctx.is_final_step();
                compress_contextual(part, &scores.scores, budget, merge)?;
                event.merged = merge;
            }
            HeadType::Structural => {
                let n_k = ctx.schedule.tokens(ctx.step);
                event.middle_slots = Some(budget as i64 - self.n_init as i64 - n_k as i64);
                compress_structural(part, &scores.scores, budget, self.n_init, n_k)?;
            }
        }
        event.post_rows = part.len();
        Ok(Some(event))
    }
}

/// Row indices kept by a baseline policy, plus whether to merge the rest.
pub fn baseline_retained(
    kind: PolicyKind,
    scores: Option<&[f64]>,
    rows: usize,
    budget: usize,
    n_init: usize,
) -> Result<(Vec<usize>, bool)> {
    if rows <= budget {
        return Ok(((0..rows).collect(), false));
    }
    let need_scores =
        || scores.ok_or_else(|| Error::state("score-based policy called without scores"));
    match kind {
        PolicyKind::Positional => {
            let head = n_init.min(budget);
            let tail = budget - head;
            let mut keep: Vec<usize> = (0..head).collect();
            keep.extend(rows - tail..rows);
            keep.dedup();
            Ok((keep, false))
        }
        PolicyKind::ScoreTopK => Ok((top_k_indices(need_scores()?, budget)?, false)),
        PolicyKind::TopKMerge => Ok((top_k_indices(need_scores()?, budget)?, true)),
        PolicyKind::HeadAware | PolicyKind::None => Err(Error::config(format!(
            "{} is not a baseline policy",
            kind.name()
        ))),
    }
}

/// Applies a baseline policy to one partition.
pub fn baseline_compress(
    part: &mut HeadCache,
    scores: Option<&[f64]>,
    budget: usize,
    kind: PolicyKind,
    n_init: usize,
) -> Result<()> {
    if let Some(s) = scores {
        check_scores(part, s)?;
    }
    let (keep, merge) = baseline_retained(kind, scores, part.len(), budget, n_init)?;
    apply_retention(part, &keep, merge)
}

/// Same policy and budget on every head, optionally restricted to a subset.
#[derive(Debug, Clone)]
pub struct BaselineCompressor {
    pub kind: PolicyKind,
    pub budget: usize,
    pub n_obs: usize,
    pub strategy: QueryStrategy,
    pub n_init: usize,
    /// When set, only heads marked `true` are compressed.
    pub only: Option<Vec<Vec<bool>>>,
}

impl CompressionHook for BaselineCompressor {
    fn compress(
        &self,
        ctx: &HookContext,
        part: &mut HeadCache,
    ) -> Result<Option<CompressionEvent>> {
        if let Some(only) = &self.only {
            if !only[ctx.id.layer][ctx.id.head] {
                return Ok(None);
            }
        }
        let pre = part.len();
        if pre <= self.budget {
            return Ok(None);
        }
        let mut event = CompressionEvent::new(ctx, part.head_type(), self.budget, pre);
        let scores = if self.kind.uses_scores() {
            let s = ctx.estimate(part, self.n_obs, self.strategy)?;
            event = event.observed(&s);
            Some(s.scores)
        } else {
            None
        };
        baseline_compress(part, scores.as_deref(), self.budget, self.kind, self.n_init)?;
        event.merged = self.kind == PolicyKind::TopKMerge;
        event.post_rows = part.len();
        Ok(Some(event))
    }
}

//! Deterministic synthetic attention model and the per-step forward pass.
//!
//! Each layer is a single multi-head attention block; the concatenated head
//! outputs of one layer are the next layer's input. Heads can be planted with
//! fixed attention templates that replace `Softmax(QK^T)`.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cache::{HeadCache, HeadId, HeadType, KvCacheStore};
use crate::compression::{AttentionScorer, CompressionEvent, CompressionHook, HookContext};
use crate::error::{Error, Result};
use crate::numerics::{matmul, matmul_transposed, softmax_in_place, softmax_rows, Matrix};
use crate::schedule::ScaleSchedule;
use crate::seed::derive_seed;

/// Standard deviation of the noise added when chaining one scale into the next.
pub const CHAIN_NOISE: f64 = 0.5;

fn default_strength() -> f64 {
    6.0
}

/// Attention template for a planted head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PatternSpec {
    /// Every query puts the same extra logit on a fixed set of global positions.
    Vertical {
        columns: Vec<usize>,
        #[serde(default = "default_strength")]
        strength: f64,
    },
    /// Query `j` of scale `k` attends to the aligned position
    /// `floor(j * N_s / N_k) + offset_s` of every scale `s`, within `bandwidth_s`.
    /// Entries past the end of the lists reuse the last value.
    MultiDiagonal {
        offsets: Vec<i64>,
        bandwidths: Vec<usize>,
        #[serde(default = "default_strength")]
        strength: f64,
    },
}

impl PatternSpec {
    pub fn vertical(columns: Vec<usize>) -> Self {
        PatternSpec::Vertical {
            columns,
            strength: default_strength(),
        }
    }

    pub fn multi_diagonal(offset: i64, bandwidth: usize) -> Self {
        PatternSpec::MultiDiagonal {
            offsets: vec![offset],
            bandwidths: vec![bandwidth],
            strength: default_strength(),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            PatternSpec::Vertical { strength, .. }
            | PatternSpec::MultiDiagonal { strength, .. }
                if !strength.is_finite() =>
            {
                Err(Error::config("pattern strength must be finite"))
            }
            PatternSpec::MultiDiagonal {
                offsets,
                bandwidths,
                ..
            } if offsets.is_empty() || bandwidths.is_empty() => Err(Error::config(
                "multi-diagonal pattern needs at least one offset and bandwidth",
            )),
            _ => Ok(()),
        }
    }

    /// Template attention for the listed local query indices of step `k` over
    /// keys at `key_origins` (global positions). Rows are softmax-normalized.
    pub fn attention(
        &self,
        schedule: &ScaleSchedule,
        k: usize,
        query_rows: &[usize],
        key_origins: &[usize],
    ) -> Matrix {
        let mut out = Matrix::zeros(query_rows.len(), key_origins.len());
        match self {
            PatternSpec::Vertical { columns, strength } => {
                let targets: BTreeSet<usize> = columns.iter().copied().collect();
                let logits: Vec<f64> = key_origins
                    .iter()
                    .map(|p| if targets.contains(p) { *strength } else { 0.0 })
                    .collect();
                for r in 0..query_rows.len() {
                    out.row_mut(r).copy_from_slice(&logits);
                }
            }
            PatternSpec::MultiDiagonal {
                offsets,
                bandwidths,
                strength,
            } => {
                let n_k = schedule.tokens(k);
                let pick = |v: &[i64], s: usize| v[(s - 1).min(v.len() - 1)];
                for (r, &j) in query_rows.iter().enumerate() {
                    let row = out.row_mut(r);
                    for (c, &p) in key_origins.iter().enumerate() {
                        let s = schedule.scale_of(p);
                        let i = schedule.local_index(p) as i64;
                        let center = (j * schedule.tokens(s) / n_k) as i64 + pick(offsets, s);
                        let band = bandwidths[(s - 1).min(bandwidths.len() - 1)] as i64;
                        if (i - center).abs() <= band {
                            row[c] = *strength;
                        }
                    }
                }
            }
        }
        softmax_rows(&out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticModel {
    layers: usize,
    heads: usize,
    model_dim: usize,
    head_dim: usize,
    seed: u64,
    weights: Vec<HeadWeights>,
    planted: BTreeMap<HeadId, PatternSpec>,
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
        .collect();
    Matrix::from_vec(rows, cols, data).expect("finite gaussian samples")
}

/// Seeded model with `W_Q`, `W_K`, `W_V` of shape `D x Dh` per head, entries
/// drawn from `N(0, 1) / sqrt(D)`.
pub fn synth_model(
    layers: usize,
    heads: usize,
    model_dim: usize,
    head_dim: usize,
    seed: u64,
) -> Result<SyntheticModel> {
    if layers == 0 || heads == 0 || head_dim == 0 {
        return Err(Error::config("layers, heads and head_dim must be positive"));
    }
    if model_dim != heads * head_dim {
        return Err(Error::config(format!(
            "model_dim {model_dim} != heads {heads} * head_dim {head_dim}"
        )));
    }
    let scale = 1.0 / (model_dim as f64).sqrt();
    let weights = (0..layers * heads)
        .map(|i| {
            let (l, h) = ((i / heads) as u64, (i % heads) as u64);
            let draw = |which: u64| {
                gaussian_matrix(
                    model_dim,
                    head_dim,
                    scale,
                    derive_seed(seed, &[l, h, which]),
                )
            };
            HeadWeights {
                query: draw(0),
                key: draw(1),
                value: draw(2),
            }
        })
        .collect();
    Ok(SyntheticModel {
        layers,
        heads,
        model_dim,
        head_dim,
        seed,
        weights,
        planted: BTreeMap::new(),
    })
}

/// Marks heads to emit template attention instead of `Softmax(QK^T)`.
pub fn plant_patterns(
    mut model: SyntheticModel,
    specs: BTreeMap<HeadId, PatternSpec>,
) -> Result<SyntheticModel> {
    for (id, spec) in specs {
        if id.layer >= model.layers || id.head >= model.heads {
            return Err(Error::config(format!(
                "planted head ({}, {}) outside {}x{} model",
                id.layer, id.head, model.layers, model.heads
            )));
        }
        spec.validate()?;
        model.planted.insert(id, spec);
    }
    Ok(model)
}

/// Plants `round(fraction * L * H)` Vertical heads (chosen by `seed`) and makes
/// every other head MultiDiagonal.
///
/// Vertical targets sit in the first two scales; diagonal bandwidths are 0 or 1.
pub fn plant_mix(
    model: SyntheticModel,
    schedule: &ScaleSchedule,
    fraction: f64,
    seed: u64,
) -> Result<SyntheticModel> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::config(format!(
            "planted fraction must be in [0, 1], got {fraction}"
        )));
    }
    let total = model.layers * model.heads;
    let n_vertical = (fraction * total as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x9_1a47]));
    let mut order: Vec<usize> = (0..total).collect();
    for i in (1..total).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let vertical: BTreeSet<usize> = order[..n_vertical].iter().copied().collect();
    let sink_span = schedule.tokens_per_scale().iter().take(2).sum::<usize>();
    let mut specs = BTreeMap::new();
    for i in 0..total {
        let id = HeadId::new(i / model.heads, i % model.heads);
        let spec = if vertical.contains(&i) {
            let count = rng.random_range(1..=3usize).min(sink_span);
            let mut cols: Vec<usize> =
                rand::seq::index::sample(&mut rng, sink_span, count).into_vec();
            cols.sort_unstable();
            PatternSpec::vertical(cols)
        } else {
            PatternSpec::multi_diagonal(0, rng.random_range(0..=1usize))
        };
        specs.insert(id, spec);
    }
    plant_patterns(model, specs)
}

impl SyntheticModel {
    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights(&self, id: HeadId) -> &HeadWeights {
        &self.weights[id.layer * self.heads + id.head]
    }

    pub fn planted(&self) -> &BTreeMap<HeadId, PatternSpec> {
        &self.planted
    }

    pub fn head_ids(&self) -> impl Iterator<Item = HeadId> + '_ {
        (0..self.layers).flat_map(move |l| (0..self.heads).map(move |h| HeadId::new(l, h)))
    }

    /// Ground-truth head types of a fully planted model: Vertical heads are
    /// contextual, MultiDiagonal heads structural. `None` if any head is unplanted.
    pub fn planted_types(&self) -> Option<Vec<Vec<HeadType>>> {
        (0..self.layers)
            .map(|l| {
                (0..self.heads)
                    .map(|h| {
                        self.planted.get(&HeadId::new(l, h)).map(|p| match p {
                            PatternSpec::Vertical { .. } => HeadType::Contextual,
                            PatternSpec::MultiDiagonal { .. } => HeadType::Structural,
                        })
                    })
                    .collect()
            })
            .collect()
    }

    pub fn new_cache(&self) -> KvCacheStore {
        KvCacheStore::new(self.layers, self.heads, self.head_dim)
    }
}

/// Seeded `1 x D` input of the first scale.
pub fn initial_input(model: &SyntheticModel, seed: u64) -> Matrix {
    gaussian_matrix(1, model.model_dim, 1.0, derive_seed(seed, &[0x1_0001]))
}

/// Input of step `k + 1` from the output of step `k`: every token repeated
/// `a^2` times, plus seeded noise.
pub fn next_input(prev: &Matrix, schedule: &ScaleSchedule, k: usize, seed: u64) -> Result<Matrix> {
    if k >= schedule.num_scales() {
        return Err(Error::state(format!("no scale after step {k}")));
    }
    let n_next = schedule.tokens(k + 1);
    let repeat = n_next / schedule.tokens(k);
    let noise = gaussian_matrix(
        n_next,
        prev.cols(),
        CHAIN_NOISE,
        derive_seed(seed, &[0x2_0002, k as u64 + 1]),
    );
    let mut out = noise;
    for r in 0..n_next {
        let src = prev.row(r / repeat);
        for (o, s) in out.row_mut(r).iter_mut().zip(src) {
            *o += s;
        }
    }
    Ok(out)
}

/// Whether attention is actually evaluated or only counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    #[default]
    Full,
    /// Keys and values are still projected and cached, but scores, softmax and
    /// value mixing are skipped; counters are identical to `Full`. Head outputs
    /// are zero and no score-based compression is possible.
    CountOnly,
}

pub struct StepOptions<'a> {
    pub hook: Option<&'a dyn CompressionHook>,
    pub mask: &'a BTreeSet<HeadId>,
    pub record_attention: bool,
    pub mode: ExecMode,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Query-key inner products of the attention itself.
    pub score_products: u64,
    /// Scalar multiply-adds of the attention-weighted value sum.
    pub value_products: u64,
    /// Query-key inner products spent on importance estimation.
    pub overhead_products: u64,
    pub events: Vec<CompressionEvent>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub hidden: Matrix,
    /// `attention[layer][head]`, present when requested and in `Full` mode.
    pub attention: Option<Vec<Vec<Matrix>>>,
    pub stats: StepStats,
}

struct HeadScorer<'a> {
    queries: Option<&'a Matrix>,
    pattern: Option<&'a PatternSpec>,
    schedule: &'a ScaleSchedule,
    step: usize,
}

impl AttentionScorer for HeadScorer<'_> {
    fn num_queries(&self) -> usize {
        self.schedule.tokens(self.step)
    }

    fn attention(&self, query_rows: &[usize], part: &HeadCache) -> Result<Matrix> {
        if let Some(p) = self.pattern {
            return Ok(p.attention(self.schedule, self.step, query_rows, part.origins()));
        }
        let q = self
            .queries
            .ok_or_else(|| Error::state("attention scores are unavailable in count-only mode"))?;
        let mut scores = matmul_transposed(&q.select_rows(query_rows), part.keys())?;
        for r in 0..scores.rows() {
            softmax_in_place(scores.row_mut(r));
        }
        Ok(scores)
    }
}

/// One next-scale step through every layer.
///
/// Per head: project Q/K/V, append K/V to the cache, run the compression hook,
/// then attend over the (possibly compressed) cache. Masked heads contribute
/// zeros to the layer output.
pub fn forward_step(
    model: &SyntheticModel,
    schedule: &ScaleSchedule,
    cache: &mut KvCacheStore,
    hidden: &Matrix,
    k: usize,
    opts: &StepOptions,
) -> Result<StepOutput> {
    if k == 0 || k > schedule.num_scales() {
        return Err(Error::state(format!("step {k} outside schedule")));
    }
    let n_k = schedule.tokens(k);
    if hidden.rows() != n_k || hidden.cols() != model.model_dim {
        return Err(Error::state(format!(
            "step {k} expects a {n_k}x{} input, got {}x{}",
            model.model_dim,
            hidden.rows(),
            hidden.cols()
        )));
    }
    if cache.layers() != model.layers || cache.heads() != model.heads {
        return Err(Error::state("cache shape does not match model"));
    }
    if let Some((id, _)) = cache.partitions().find(|(_, p)| p.last_step() != k - 1) {
        return Err(Error::state(format!(
            "head ({}, {}) cache is not at step {}",
            id.layer,
            id.head,
            k - 1
        )));
    }

    let full = opts.mode == ExecMode::Full;
    let dh = model.head_dim;
    let mut stats = StepStats::default();
    let mut attention = (opts.record_attention && full).then(Vec::new);
    let mut x = hidden.clone();

    for l in 0..model.layers {
        let mut layer_out = Matrix::zeros(n_k, model.model_dim);
        let mut layer_maps = Vec::new();
        for h in 0..model.heads {
            let id = HeadId::new(l, h);
            let w = model.weights(id);
            let pattern = model.planted.get(&id);
            let queries = if full && pattern.is_none() {
                Some(matmul(&x, &w.query)?)
            } else {
                None
            };
            let keys = matmul(&x, &w.key)?;
            let values = matmul(&x, &w.value)?;
            cache.append(schedule, id, &keys, &values, k)?;

            let scorer = HeadScorer {
                queries: queries.as_ref(),
                pattern,
                schedule,
                step: k,
            };
            if let Some(hook) = opts.hook {
                let ctx = HookContext {
                    id,
                    step: k,
                    schedule,
                    seed: opts.seed,
                    scorer: &scorer,
                };
                let event = hook.compress(&ctx, cache.partition_mut(id)?)?;
                if let Some(event) = event {
                    cache.sample_peak();
                    stats.overhead_products += event.overhead_products;
                    stats.events.push(event);
                }
            }

            let part = cache.partition(id)?;
            let rows = part.len() as u64;
            stats.score_products += n_k as u64 * rows;
            stats.value_products += n_k as u64 * rows * dh as u64;
            if !full {
                continue;
            }
            let all: Vec<usize> = (0..n_k).collect();
            let att = scorer.attention(&all, part)?;
            if !opts.mask.contains(&id) {
                let out = matmul(&att, part.values())?;
                layer_out.set_block_columns(h * dh, &out);
            }
            if attention.is_some() {
                layer_maps.push(att);
            }
        }
        if let Some(maps) = attention.as_mut() {
            maps.push(layer_maps);
        }
        x = layer_out;
    }
    Ok(StepOutput {
        hidden: x,
        attention,
        stats,
    })
}

/// Which attention maps a generation run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecordAttention {
    #[default]
    None,
    FinalStep,
    AllSteps,
}

#[derive(Default)]
pub struct GenerationOptions<'a> {
    pub hook: Option<&'a dyn CompressionHook>,
    pub mask: BTreeSet<HeadId>,
    pub record: RecordAttention,
    pub mode: ExecMode,
    pub head_types: Option<Vec<Vec<HeadType>>>,
    /// Keep every head's retained origin positions after each step.
    pub record_positions: bool,
}

#[derive(Debug, Clone)]
pub struct StepRecord {
    pub k: usize,
    pub tokens: usize,
    pub stats: StepStats,
    /// Rows per `[layer][head]` after compression.
    pub cache_rows: Vec<Vec<usize>>,
    pub retained: Option<Vec<Vec<Vec<usize>>>>,
    pub attention: Option<Vec<Vec<Matrix>>>,
}

#[derive(Debug, Clone)]
pub struct Generation {
    pub final_hidden: Matrix,
    pub steps: Vec<StepRecord>,
    pub cache: KvCacheStore,
}

impl Generation {
    pub fn score_products(&self) -> u64 {
        self.steps.iter().map(|s| s.stats.score_products).sum()
    }

    pub fn overhead_products(&self) -> u64 {
        self.steps.iter().map(|s| s.stats.overhead_products).sum()
    }

    pub fn value_products(&self) -> u64 {
        self.steps.iter().map(|s| s.stats.value_products).sum()
    }
}

/// Runs all `K` steps from the seeded initial input.
pub fn generate(
    model: &SyntheticModel,
    schedule: &ScaleSchedule,
    seed: u64,
    opts: &GenerationOptions,
) -> Result<Generation> {
    let mut cache = model.new_cache();
    if let Some(types) = &opts.head_types {
        cache.assign_types(types)?;
    }
    let mut hidden = initial_input(model, seed);
    let mut steps = Vec::with_capacity(schedule.num_scales());
    for k in 1..=schedule.num_scales() {
        let record = match opts.record {
            RecordAttention::None => false,
            RecordAttention::FinalStep => k == schedule.num_scales(),
            RecordAttention::AllSteps => true,
        };
        let step_opts = StepOptions {
            hook: opts.hook,
            mask: &opts.mask,
            record_attention: record,
            mode: opts.mode,
            seed,
        };
        let out = forward_step(model, schedule, &mut cache, &hidden, k, &step_opts)?;
        let mut cache_rows = vec![vec![0; model.heads]; model.layers];
        let mut retained = opts
            .record_positions
            .then(|| vec![vec![Vec::new(); model.heads]; model.layers]);
        for (id, part) in cache.partitions() {
            cache_rows[id.layer][id.head] = part.len();
            if let Some(r) = retained.as_mut() {
                r[id.layer][id.head] = part.origins().to_vec();
            }
        }
        steps.push(StepRecord {
            k,
            tokens: schedule.tokens(k),
            stats: out.stats,
            cache_rows,
            retained,
            attention: out.attention,
        });
        hidden = if k < schedule.num_scales() {
            next_input(&out.hidden, schedule, k, seed)?
        } else {
            out.hidden
        };
    }
    Ok(Generation {
        final_hidden: hidden,
        steps,
        cache,
    })
}

//! Per-(layer, head) key/value storage with scale bookkeeping, and the
//! asymmetric contextual/structural budget split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::schedule::ScaleSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadType {
    Contextual,
    Structural,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct HeadId {
    pub layer: usize,
    pub head: usize,
}

impl HeadId {
    pub fn new(layer: usize, head: usize) -> Self {
        HeadId { layer, head }
    }
}

/// Cached keys and values of a single head.
#[derive(Debug, Clone)]
pub struct HeadCache {
    keys: Matrix,
    values: Matrix,
    origins: Vec<usize>,
    scales: Vec<usize>,
    head_type: Option<HeadType>,
    last_step: usize,
}

impl HeadCache {
    pub fn new(head_dim: usize) -> Self {
        HeadCache {
            keys: Matrix::zeros(0, head_dim),
            values: Matrix::zeros(0, head_dim),
            origins: Vec::new(),
            scales: Vec::new(),
            head_type: None,
            last_step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    /// Original global token index of every cached row, ascending.
    pub fn origins(&self) -> &[usize] {
        &self.origins
    }

    /// 1-based scale of every cached row.
    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    pub fn head_type(&self) -> Option<HeadType> {
        self.head_type
    }

    pub fn set_head_type(&mut self, t: HeadType) {
        self.head_type = Some(t);
    }

    /// Last step appended, 0 when nothing has been appended yet.
    pub fn last_step(&self) -> usize {
        self.last_step
    }

    /// Appends the keys and values produced at 1-based step `k`.
    pub fn append(
        &mut self,
        schedule: &ScaleSchedule,
        keys: &Matrix,
        values: &Matrix,
        k: usize,
    ) -> Result<()> {
        if k == 0 || k > schedule.num_scales() {
            return Err(Error::state(format!("step {k} outside schedule")));
        }
        if k != self.last_step + 1 {
            return Err(Error::state(format!(
                "append for step {k} but cache is at step {}",
                self.last_step
            )));
        }
        let n = schedule.tokens(k);
        if keys.rows() != n || values.rows() != n {
            return Err(Error::state(format!(
                "step {k} expects {n} rows, got keys {} values {}",
                keys.rows(),
                values.rows()
            )));
        }
        if keys.cols() != self.keys.cols() || values.cols() != self.values.cols() {
            return Err(Error::state("head dimension mismatch on append"));
        }
        self.keys.append_rows(keys)?;
        self.values.append_rows(values)?;
        let start = schedule.cumulative(k - 1);
        self.origins.extend(start..start + n);
        self.scales.extend(std::iter::repeat_n(k, n));
        self.last_step = k;
        Ok(())
    }

    /// Keeps only the rows at `indices` (ascending, unique).
    pub fn retain_rows(&mut self, indices: &[usize]) -> Result<()> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::state("retained indices must be strictly ascending"));
        }
        if indices.last().is_some_and(|&i| i >= self.len()) {
            return Err(Error::state("retained index out of range"));
        }
        self.keys = self.keys.select_rows(indices);
        self.values = self.values.select_rows(indices);
        self.origins = indices.iter().map(|&i| self.origins[i]).collect();
        self.scales = indices.iter().map(|&i| self.scales[i]).collect();
        Ok(())
    }

    /// Replaces key/value contents in place; row count and positions are unchanged.
    pub fn overwrite_kv(&mut self, keys: Matrix, values: Matrix) -> Result<()> {
        if keys.rows() != self.len()
            || values.rows() != self.len()
            || keys.cols() != self.keys.cols()
            || values.cols() != self.values.cols()
        {
            return Err(Error::state("overwrite_kv shape mismatch"));
        }
        self.keys = keys;
        self.values = values;
        Ok(())
    }
}

/// The whole model's cache, one partition per (layer, head).
#[derive(Debug, Clone)]
pub struct KvCacheStore {
    layers: usize,
    heads: usize,
    parts: Vec<HeadCache>,
    peak: usize,
}

impl KvCacheStore {
    pub fn new(layers: usize, heads: usize, head_dim: usize) -> Self {
        KvCacheStore {
            layers,
            heads,
            parts: (0..layers * heads)
                .map(|_| HeadCache::new(head_dim))
                .collect(),
            peak: 0,
        }
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    fn index(&self, id: HeadId) -> Result<usize> {
        if id.layer >= self.layers || id.head >= self.heads {
            return Err(Error::state(format!(
                "head ({}, {}) outside {}x{} cache",
                id.layer, id.head, self.layers, self.heads
            )));
        }
        Ok(id.layer * self.heads + id.head)
    }

    pub fn partition(&self, id: HeadId) -> Result<&HeadCache> {
        let i = self.index(id)?;
        Ok(&self.parts[i])
    }

    pub fn partition_mut(&mut self, id: HeadId) -> Result<&mut HeadCache> {
        let i = self.index(id)?;
        Ok(&mut self.parts[i])
    }

    pub fn partitions(&self) -> impl Iterator<Item = (HeadId, &HeadCache)> {
        let heads = self.heads;
        self.parts
            .iter()
            .enumerate()
            .map(move |(i, p)| (HeadId::new(i / heads, i % heads), p))
    }

    /// Tags every partition with its head type from a per-layer assignment.
    pub fn assign_types(&mut self, types: &[Vec<HeadType>]) -> Result<()> {
        if types.len() != self.layers || types.iter().any(|l| l.len() != self.heads) {
            return Err(Error::config("head type table does not match cache shape"));
        }
        for (l, layer) in types.iter().enumerate() {
            for (h, &t) in layer.iter().enumerate() {
                self.parts[l * self.heads + h].set_head_type(t);
            }
        }
        Ok(())
    }

    pub fn append(
        &mut self,
        schedule: &ScaleSchedule,
        id: HeadId,
        keys: &Matrix,
        values: &Matrix,
        k: usize,
    ) -> Result<()> {
        self.partition_mut(id)?.append(schedule, keys, values, k)?;
        self.sample_peak();
        Ok(())
    }

    /// Current number of cached rows summed over every partition.
    pub fn total_entries(&self) -> usize {
        self.parts.iter().map(HeadCache::len).sum()
    }

    /// Folds the current total into the running peak. Called after every
    /// append and every compression.
    pub fn sample_peak(&mut self) {
        self.peak = self.peak.max(self.total_entries());
    }

    pub fn peak_entries(&self) -> usize {
        self.peak
    }

    /// Average cached rows per head, one entry per layer.
    pub fn layer_average_rows(&self) -> Vec<f64> {
        self.parts
            .chunks(self.heads)
            .map(|layer| layer.iter().map(HeadCache::len).sum::<usize>() as f64 / self.heads as f64)
            .collect()
    }
}

/// Budget split between contextual and structural heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub average: usize,
    pub alpha: f64,
    pub contextual: usize,
    pub structural: usize,
    pub ratio: f64,
}

impl BudgetPlan {
    pub fn budget_of(&self, t: HeadType) -> usize {
        match t {
            HeadType::Contextual => self.contextual,
            HeadType::Structural => self.structural,
        }
    }

    /// `alpha * B_C + (1 - alpha) * B_S`.
    pub fn weighted_average(&self) -> f64 {
        self.alpha * self.contextual as f64 + (1.0 - self.alpha) * self.structural as f64
    }

    /// No cache grows past `max_rows`, so structural budget above it is
    /// unusable: clip `B_S` to `max_rows` and raise `B_C` as far as the average
    /// allows, also capped at `max_rows`.
    pub fn clip_to_length(self, max_rows: usize) -> Self {
        if self.structural <= max_rows {
            return self;
        }
        let alpha = self.alpha;
        let freed = self.average as f64 - (1.0 - alpha) * max_rows as f64;
        let contextual = if alpha > 0.0 {
            ((freed / alpha).floor().max(0.0) as usize)
                .clamp(self.contextual.min(max_rows), max_rows)
        } else {
            self.contextual.min(max_rows)
        };
        BudgetPlan {
            contextual,
            structural: max_rows,
            ratio: max_rows as f64 / contextual as f64,
            ..self
        }
    }

    fn validate(self) -> Result<Self> {
        if self.contextual == 0 || self.structural == 0 {
            return Err(Error::config(format!(
                "budget split B_C={} B_S={} leaves a head type with no cache",
                self.contextual, self.structural
            )));
        }
        if self.contextual > self.structural {
            return Err(Error::config(format!(
                "contextual budget {} exceeds structural budget {}",
                self.contextual, self.structural
            )));
        }
        if self.weighted_average() > self.average as f64 + 1e-9 {
            return Err(Error::config("budget split exceeds the average budget"));
        }
        Ok(self)
    }
}

fn check_common(average: usize, alpha: f64) -> Result<()> {
    if average < 2 {
        return Err(Error::config(format!(
            "average budget must be >= 2, got {average}"
        )));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    Ok(())
}

/// Splits `average` into `B_C` and `B_S = ratio * B_C` (both floored) so that
/// `alpha * B_C + (1 - alpha) * B_S <= average`.
pub fn allocate_budgets(average: usize, alpha: f64, ratio: f64) -> Result<BudgetPlan> {
    check_common(average, alpha)?;
    if ratio.is_nan() || ratio < 1.0 || !ratio.is_finite() {
        return Err(Error::config(format!(
            "ratio B_S/B_C must be >= 1, got {ratio}"
        )));
    }
    let denom = alpha + (1.0 - alpha) * ratio;
    let b = average as f64;
    BudgetPlan {
        average,
        alpha,
        contextual: (b / denom).floor() as usize,
        structural: (ratio * b / denom).floor() as usize,
        ratio,
    }
    .validate()
}

/// Direct mode: the caller fixes `B_C`; `B_S = floor((B - alpha * B_C) / (1 - alpha))`.
pub fn allocate_with_contextual(
    average: usize,
    alpha: f64,
    contextual: usize,
) -> Result<BudgetPlan> {
    check_common(average, alpha)?;
    if contextual == 0 {
        return Err(Error::config("contextual budget must be >= 1"));
    }
    let rest = average as f64 - alpha * contextual as f64;
    let structural = if rest <= 0.0 {
        0
    } else {
        (rest / (1.0 - alpha)).floor() as usize
    };
    BudgetPlan {
        average,
        alpha,
        contextual,
        structural,
        ratio: structural as f64 / contextual as f64,
    }
    .validate()
}

/// True when the partition holds more rows than its head type allows.
pub fn needs_compression(cache: &KvCacheStore, id: HeadId, plan: &BudgetPlan) -> Result<bool> {
    let part = cache.partition(id)?;
    let t = part
        .head_type()
        .ok_or_else(|| Error::state(format!("head ({}, {}) has no type", id.layer, id.head)))?;
    Ok(part.len() > plan.budget_of(t))
}

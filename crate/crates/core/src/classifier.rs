//! Offline head classification by attention column variance.
//!
//! Each head's final-step attention matrix (`N_K x T_K`) is reduced to the sum
//! of its column variances, averaged over calibration seeds. All heads are then
//! ranked globally and the lowest `round(alpha * L * H)` become contextual.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::HeadType;
use crate::error::{Error, Result};
use crate::model::{generate, GenerationOptions, RecordAttention, SyntheticModel};
use crate::numerics::column_variance_sum;
use crate::schedule::ScaleSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceMatrix {
    /// `values[layer][head]`, averaged over samples.
    pub values: Vec<Vec<f64>>,
    pub sample_count: usize,
}

/// Runs one uncompressed generation per seed and averages the final-step
/// column-variance sums of every head.
pub fn collect_variances(
    model: &SyntheticModel,
    schedule: &ScaleSchedule,
    seeds: &[u64],
) -> Result<VarianceMatrix> {
    if seeds.is_empty() {
        return Err(Error::config("calibration needs at least one seed"));
    }
    let per_seed: Vec<Vec<Vec<f64>>> = seeds
        .par_iter()
        .map(|&seed| {
            let opts = GenerationOptions {
                record: RecordAttention::FinalStep,
                ..Default::default()
            };
            let g = generate(model, schedule, seed, &opts)?;
            let last = g.steps.last().expect("at least one step");
            assert!(
                last.cache_rows
                    .iter()
                    .flatten()
                    .all(|&r| r == schedule.total_tokens()),
                "calibration must run on the full cache"
            );
            let maps = last
                .attention
                .as_ref()
                .expect("final-step attention recorded");
            Ok(maps
                .iter()
                .map(|layer| layer.iter().map(column_variance_sum).collect())
                .collect())
        })
        .collect::<Result<_>>()?;

    let mut values = vec![vec![0.0; model.heads()]; model.layers()];
    for sample in &per_seed {
        for (acc_row, row) in values.iter_mut().zip(sample) {
            for (acc, v) in acc_row.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    let n = seeds.len() as f64;
    values.iter_mut().flatten().for_each(|v| *v /= n);
    Ok(VarianceMatrix {
        values,
        sample_count: seeds.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerClassification {
    pub contextual: Vec<usize>,
    pub structural: Vec<usize>,
    /// Contextual heads first, then structural, each ascending.
    pub permutation: Vec<usize>,
}

/// Per-layer contextual/structural split; this is also the on-disk format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadClassification {
    pub alpha: f64,
    pub layers: Vec<LayerClassification>,
    pub variance: Vec<Vec<f64>>,
}

/// Global ascending ranking by variance, ties to the lower (layer, head).
pub fn classify(var: &VarianceMatrix, alpha: f64) -> Result<HeadClassification> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(format!(
            "alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let heads = var.values.first().map_or(0, Vec::len);
    if heads == 0 || var.values.iter().any(|r| r.len() != heads) {
        return Err(Error::config(
            "variance matrix must be a non-empty rectangle",
        ));
    }
    let mut ranked: Vec<(usize, usize)> = (0..var.values.len())
        .flat_map(|l| (0..heads).map(move |h| (l, h)))
        .collect();
    ranked.sort_by(|a, b| {
        var.values[a.0][a.1]
            .total_cmp(&var.values[b.0][b.1])
            .then(a.cmp(b))
    });
    let n_contextual = (alpha * ranked.len() as f64).round() as usize;
    let mut is_contextual = vec![vec![false; heads]; var.values.len()];
    for &(l, h) in &ranked[..n_contextual] {
        is_contextual[l][h] = true;
    }
    let mut out = HeadClassification {
        alpha,
        layers: is_contextual
            .iter()
            .map(|flags| LayerClassification {
                contextual: (0..heads).filter(|&h| flags[h]).collect(),
                structural: (0..heads).filter(|&h| !flags[h]).collect(),
                permutation: Vec::new(),
            })
            .collect(),
        variance: var.values.clone(),
    };
    let perms = reorder(&out);
    for (layer, p) in out.layers.iter_mut().zip(perms) {
        layer.permutation = p;
    }
    Ok(out)
}

/// Per-layer permutation listing contextual heads first, then structural heads.
pub fn reorder(c: &HeadClassification) -> Vec<Vec<usize>> {
    c.layers
        .iter()
        .map(|l| l.contextual.iter().chain(&l.structural).copied().collect())
        .collect()
}

/// Inverse of a permutation: `inverse[perm[i]] == i`.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl HeadClassification {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers
            .first()
            .map_or(0, |l| l.contextual.len() + l.structural.len())
    }

    /// `types[layer][head]`.
    pub fn types(&self) -> Vec<Vec<HeadType>> {
        self.layers
            .iter()
            .map(|l| {
                let mut t = vec![HeadType::Structural; l.contextual.len() + l.structural.len()];
                l.contextual
                    .iter()
                    .for_each(|&h| t[h] = HeadType::Contextual);
                t
            })
            .collect()
    }

    pub fn contextual_count(&self) -> usize {
        self.layers.iter().map(|l| l.contextual.len()).sum()
    }

    /// Fraction of all heads that ended up contextual.
    pub fn realized_fraction(&self) -> f64 {
        self.contextual_count() as f64 / (self.num_layers() * self.num_heads()) as f64
    }

    /// Checks partition, permutation and shape invariants against a model shape.
    pub fn validate(&self, layers: usize, heads: usize) -> Result<()> {
        if self.layers.len() != layers {
            return Err(Error::config(format!(
                "classification has {} layers, model has {layers}",
                self.layers.len()
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            let mut all: Vec<usize> = l.contextual.iter().chain(&l.structural).copied().collect();
            all.sort_unstable();
            if all != (0..heads).collect::<Vec<_>>() {
                return Err(Error::config(format!(
                    "layer {i}: contextual and structural sets must partition 0..{heads}"
                )));
            }
            if l.permutation
                != l.contextual
                    .iter()
                    .chain(&l.structural)
                    .copied()
                    .collect::<Vec<_>>()
            {
                return Err(Error::config(format!(
                    "layer {i}: permutation does not group heads by type"
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!(
                "cannot read classification {}: {e}",
                path.display()
            ))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::config(format!("invalid classification file: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{plant_mix, synth_model};
    use crate::schedule::build_schedule;

    fn vm(values: Vec<Vec<f64>>) -> VarianceMatrix {
        VarianceMatrix {
            values,
            sample_count: 1,
        }
    }

    #[test]
    fn planted_heads_are_recovered() {
        let s = build_schedule(2, 3).unwrap();
        let m = plant_mix(synth_model(2, 8, 32, 4, 9).unwrap(), &s, 0.25, 9).unwrap();
        let var = collect_variances(&m, &s, &[1]).unwrap();
        let truth = m.planted_types().unwrap();
        for (l, row) in var.values.iter().enumerate() {
            for (h, v) in row.iter().enumerate() {
                match truth[l][h] {
                    HeadType::Contextual => assert_eq!(*v, 0.0),
                    HeadType::Structural => assert!(*v > 0.0),
                }
            }
        }
        let c = classify(&var, 0.25).unwrap();
        assert_eq!(c.types(), truth);
        assert_eq!(c.contextual_count(), 4);
    }

    #[test]
    fn small_alpha_takes_lowest_head() {
        let c = classify(&vm(vec![vec![0.5, 0.2, 0.9], vec![0.1, 0.7, 0.3]]), 0.1).unwrap();
        assert_eq!(c.contextual_count(), 1);
        assert_eq!(c.layers[1].contextual, vec![0]);
        assert!(c.layers[0].contextual.is_empty());
    }

    #[test]
    fn ties_break_by_layer_then_head() {
        let c = classify(&vm(vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]), 0.5).unwrap();
        assert_eq!(c.layers[0].contextual, vec![0, 2]);
        assert_eq!(c.layers[1].contextual, vec![0]);
    }

    #[test]
    fn classification_is_rank_only() {
        let base = vec![vec![0.3, 0.01, 2.0, 0.5], vec![0.02, 0.9, 0.4, 1.1]];
        let scaled: Vec<Vec<f64>> = base
            .iter()
            .map(|r| r.iter().map(|v| v * 37.5).collect())
            .collect();
        let a = classify(&vm(base), 0.375).unwrap();
        let b = classify(&vm(scaled), 0.375).unwrap();
        assert_eq!(a.layers, b.layers);
    }

    #[test]
    fn permutation_examples() {
        let layer = |contextual: Vec<usize>, n: usize| {
            let structural = (0..n).filter(|h| !contextual.contains(h)).collect();
            LayerClassification {
                contextual,
                structural,
                permutation: Vec::new(),
            }
        };
        let c = HeadClassification {
            alpha: 0.25,
            layers: vec![
                layer(vec![3, 5], 8),
                layer(vec![], 8),
                layer((0..8).collect(), 8),
            ],
            variance: vec![vec![0.0; 8]; 3],
        };
        let p = reorder(&c);
        assert_eq!(p[0], vec![3, 5, 0, 1, 2, 4, 6, 7]);
        assert_eq!(p[1], (0..8).collect::<Vec<_>>());
        assert_eq!(p[2], (0..8).collect::<Vec<_>>());
        let inv = invert_permutation(&p[0]);
        let round: Vec<usize> = (0..8).map(|i| p[0][inv[i]]).collect();
        assert_eq!(round, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_bad_alpha_and_shapes() {
        assert!(matches!(
            classify(&vm(vec![vec![1.0]]), 1.0),
            Err(Error::Config(_))
        ));
        assert!(matches!(classify(&vm(vec![]), 0.5), Err(Error::Config(_))));
        let c = classify(&vm(vec![vec![1.0, 2.0]]), 0.5).unwrap();
        assert!(c.validate(1, 2).is_ok());
        assert!(c.validate(2, 2).is_err());
        assert!(c.validate(1, 3).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("heads.json");
        let c = classify(&vm(vec![vec![0.25, 0.5], vec![0.125, 1.0]]), 0.5).unwrap();
        c.save(&path).unwrap();
        assert_eq!(HeadClassification::load(&path).unwrap(), c);
        let text = std::fs::read_to_string(&path).unwrap();
        for key in [
            "\"alpha\"",
            "\"layers\"",
            "\"contextual\"",
            "\"structural\"",
            "\"permutation\"",
            "\"variance\"",
        ] {
            assert!(text.contains(key));
        }
    }
}

//! Next-scale token schedule: square scales with side `a^(k-1)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    factor: u64,
    tokens: Vec<usize>,
    cumulative: Vec<usize>,
}

/// Builds the schedule for scaling factor `a` and `num_scales` steps.
///
/// `N_k = a^(2(k-1))` and `T_k = N_1 + ... + N_k`, both with overflow checks.
pub fn build_schedule(a: u64, num_scales: usize) -> Result<ScaleSchedule> {
    if a < 2 {
        return Err(Error::config(format!(
            "scaling factor must be >= 2, got {a}"
        )));
    }
    if num_scales == 0 {
        return Err(Error::config("need at least one scale"));
    }
    let overflow = || Error::config(format!("schedule a={a}, K={num_scales} overflows"));
    let a2 = a.checked_mul(a).ok_or_else(overflow)?;
    let mut tokens = Vec::with_capacity(num_scales);
    let mut cumulative = Vec::with_capacity(num_scales);
    let mut n: u64 = 1;
    let mut total: u64 = 0;
    for k in 0..num_scales {
        if k > 0 {
            n = n.checked_mul(a2).ok_or_else(overflow)?;
        }
        total = total.checked_add(n).ok_or_else(overflow)?;
        tokens.push(usize::try_from(n).map_err(|_| overflow())?);
        cumulative.push(usize::try_from(total).map_err(|_| overflow())?);
    }
    Ok(ScaleSchedule {
        factor: a,
        tokens,
        cumulative,
    })
}

impl ScaleSchedule {
    pub fn factor(&self) -> u64 {
        self.factor
    }

    pub fn num_scales(&self) -> usize {
        self.tokens.len()
    }

    /// Token count `N_k` of 1-based step `k`.
    pub fn tokens(&self, k: usize) -> usize {
        self.tokens[k - 1]
    }

    /// Cache length `T_k` after 1-based step `k`; `T_0 = 0`.
    pub fn cumulative(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            self.cumulative[k - 1]
        }
    }

    pub fn tokens_per_scale(&self) -> &[usize] {
        &self.tokens
    }

    pub fn cumulative_lengths(&self) -> &[usize] {
        &self.cumulative
    }

    /// Final cache length `T_K`.
    pub fn total_tokens(&self) -> usize {
        *self
            .cumulative
            .last()
            .expect("schedule has at least one scale")
    }

    /// Side length of the final scale, `n = a^(K-1)`.
    pub fn final_side(&self) -> usize {
        (self.factor as usize).pow(self.num_scales() as u32 - 1)
    }

    /// 1-based scale containing global token position `pos`.
    pub fn scale_of(&self, pos: usize) -> usize {
        self.cumulative.partition_point(|&t| t <= pos) + 1
    }

    /// Index of `pos` within its own scale.
    pub fn local_index(&self, pos: usize) -> usize {
        pos - self.cumulative(self.scale_of(pos) - 1)
    }

    /// Default count of always-kept early tokens: the first two scales,
    /// capped at `T_{K-1}` when the run has fewer than three scales.
    pub fn default_init_tokens(&self) -> usize {
        let first_two = self.tokens.iter().take(2).sum::<usize>();
        first_two.min(self.cumulative(self.num_scales() - 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_two_four_scales() {
        let s = build_schedule(2, 4).unwrap();
        assert_eq!(s.tokens_per_scale(), &[1, 4, 16, 64]);
        assert_eq!(s.cumulative_lengths(), &[1, 5, 21, 85]);
        assert_eq!(s.final_side(), 8);
    }

    #[test]
    fn single_scale() {
        let s = build_schedule(2, 1).unwrap();
        assert_eq!(s.tokens_per_scale(), &[1]);
        assert_eq!(s.cumulative_lengths(), &[1]);
        assert_eq!(s.default_init_tokens(), 0);
    }

    #[test]
    fn factor_three_matches_closed_form_and_explicit_sum() {
        let s = build_schedule(3, 3).unwrap();
        assert_eq!(s.total_tokens(), (3usize.pow(6) - 1) / 8);
        assert_eq!(s.total_tokens(), 1 + 9 + 81);
    }

    #[test]
    fn closed_form_holds_for_many_schedules() {
        for a in 2u64..=5 {
            for k in 1..=8 {
                let s = build_schedule(a, k).unwrap();
                for step in 1..=k {
                    let expect = (a.pow(2 * step as u32) - 1) / (a * a - 1);
                    assert_eq!(s.cumulative(step) as u64, expect);
                }
                assert!(s.tokens_per_scale().windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(build_schedule(1, 3), Err(Error::Config(_))));
        assert!(matches!(build_schedule(2, 0), Err(Error::Config(_))));
        assert!(matches!(build_schedule(2, 40), Err(Error::Config(_))));
    }

    #[test]
    fn position_lookup() {
        let s = build_schedule(2, 4).unwrap();
        assert_eq!(s.scale_of(0), 1);
        assert_eq!(s.scale_of(1), 2);
        assert_eq!(s.scale_of(4), 2);
        assert_eq!(s.scale_of(5), 3);
        assert_eq!(s.scale_of(84), 4);
        assert_eq!(s.local_index(21), 0);
        assert_eq!(s.local_index(20), 15);
        assert_eq!(s.default_init_tokens(), 5);
        assert_eq!(build_schedule(2, 2).unwrap().default_init_tokens(), 1);
    }
}

//! Scale schedules: the ordered per-scale grid sizes and cumulative token
//! offsets that govern every other module.
//!
//! A schedule is a strictly increasing list of side lengths. Scale `k` holds a
//! square `patch_nums[k] x patch_nums[k]` token map, and `offsets[k]` is the
//! number of tokens in all scales before `k`. The standard 10-scale schedule
//! `(1,2,3,4,5,6,8,10,13,16)` totals 680 tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side lengths of the standard 10-scale schedule (680 tokens total).
pub const STANDARD_PATCH_NUMS: [usize; 10] = [1, 2, 3, 4, 5, 6, 8, 10, 13, 16];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScaleSchedule {
    patch_nums: Vec<usize>,
    /// `offsets[k]` = tokens in scales `0..k`; `offsets[K]` = total tokens.
    offsets: Vec<usize>,
}

/// Builds a schedule from per-scale side lengths.
///
/// Fails unless the side lengths are non-empty, positive and strictly
/// increasing. Returns the schedule together with its total token count.
pub fn build_schedule(patch_nums: &[usize]) -> Result<(ScaleSchedule, usize)> {
    let s = ScaleSchedule::new(patch_nums)?;
    let total = s.total_tokens();
    Ok((s, total))
}

impl ScaleSchedule {
    pub fn new(patch_nums: &[usize]) -> Result<Self> {
        if patch_nums.is_empty() {
            return Err(Error::InvalidSchedule("empty patch_nums".into()));
        }
        for (i, &p) in patch_nums.iter().enumerate() {
            if p == 0 {
                return Err(Error::InvalidSchedule(format!(
                    "patch_nums[{i}] must be positive"
                )));
            }
            if i > 0 && p <= patch_nums[i - 1] {
                return Err(Error::InvalidSchedule(format!(
                    "patch_nums must be strictly increasing, got {} after {}",
                    p,
                    patch_nums[i - 1]
                )));
            }
        }
        let mut offsets = Vec::with_capacity(patch_nums.len() + 1);
        let mut acc = 0usize;
        offsets.push(0);
        for &p in patch_nums {
            acc += p * p;
            offsets.push(acc);
        }
        Ok(Self {
            patch_nums: patch_nums.to_vec(),
            offsets,
        })
    }

    /// The standard 10-scale schedule.
    pub fn standard() -> Self {
        Self::new(&STANDARD_PATCH_NUMS).expect("standard schedule is valid")
    }

    /// Number of scales `K`.
    pub fn num_scales(&self) -> usize {
        self.patch_nums.len()
    }

    pub fn patch_nums(&self) -> &[usize] {
        &self.patch_nums
    }

    /// Side length of scale `k`.
    pub fn side(&self, k: usize) -> usize {
        self.patch_nums[k]
    }

    /// Side length of the final (full-resolution) scale.
    pub fn final_side(&self) -> usize {
        *self.patch_nums.last().unwrap()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    /// Tokens in scale `k` alone.
    pub fn tokens_at(&self, k: usize) -> usize {
        self.patch_nums[k] * self.patch_nums[k]
    }

    pub fn total_tokens(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    /// Token count of the first `n` scales, i.e. the prefix a drafter with
    /// `n` drafting steps is responsible for.
    pub fn prefix_tokens(&self, n: usize) -> Result<usize> {
        if n > self.num_scales() {
            return Err(Error::Range {
                what: "drafting steps",
                got: n,
                limit: self.num_scales(),
            });
        }
        Ok(self.offsets[n])
    }
}

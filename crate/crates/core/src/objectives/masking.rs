use rand::seq::index::sample;
use rand::Rng;

use crate::error::{bail, Result};
use crate::vlm::vocab::MASK;

/// Positions to hide in one token sequence and what was there.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskingPlan {
    /// Sorted masked positions.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub targets: Vec<usize>,
    /// The sequence with masked positions replaced by MASK.
    pub input_ids: Vec<usize>,
}

impl MaskingPlan {
    /// Mask `ceil(ratio * maskable)` positions drawn uniformly from the maskable ones.
    pub fn sample(ids: &[usize], maskable: &[bool], ratio: f64, rng: &mut impl Rng) -> Result<Self> {
        if ids.len() != maskable.len() {
            bail!(Shape, "{} ids with {} mask flags", ids.len(), maskable.len());
        }
        if !(0.0..=1.0).contains(&ratio) {
            bail!(Config, "mask ratio {ratio} outside [0, 1]");
        }
        let candidates: Vec<usize> = (0..ids.len()).filter(|&i| maskable[i]).collect();
        let count = mask_count(candidates.len(), ratio);
        let mut positions: Vec<usize> = sample(rng, candidates.len(), count).into_iter().map(|k| candidates[k]).collect();
        positions.sort_unstable();
        Ok(Self::at(ids, &positions))
    }

    /// Plan masking exactly `positions`.
    pub fn at(ids: &[usize], positions: &[usize]) -> Self {
        let mut input_ids = ids.to_vec();
        let targets = positions.iter().map(|&p| ids[p]).collect();
        for &p in positions {
            input_ids[p] = MASK;
        }
        MaskingPlan { positions: positions.to_vec(), targets, input_ids }
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// `ceil(ratio * maskable)`, computed so exact products do not round up.
pub fn mask_count(maskable: usize, ratio: f64) -> usize {
    let x = ratio * maskable as f64;
    let c = (x - 1e-9).ceil().max(0.0) as usize;
    c.min(maskable)
}

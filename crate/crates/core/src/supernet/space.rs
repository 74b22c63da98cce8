use super::{Result, SupernetError};
use crate::nn::{Mlp, NnError};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Per-layer width multipliers for the hidden layers of a sliceable MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    input_dim: usize,
    max_widths: Vec<usize>,
    multipliers: Vec<Vec<f64>>,
    classes: usize,
}

/// One sub-network: an index into each layer's multiplier list.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubnetConfig {
    choices: Vec<usize>,
}

impl SubnetConfig {
    /// Unchecked; use [`SearchSpace::contains`] to validate against a space.
    pub fn new(choices: Vec<usize>) -> Self {
        Self { choices }
    }

    pub fn choices(&self) -> &[usize] {
        &self.choices
    }

    pub fn choices_mut(&mut self) -> &mut [usize] {
        &mut self.choices
    }

    pub fn widths(&self, space: &SearchSpace) -> Vec<usize> {
        self.choices.iter().enumerate().map(|(l, &c)| space.width(l, c)).collect()
    }

    pub fn multipliers(&self, space: &SearchSpace) -> Vec<f64> {
        self.choices.iter().enumerate().map(|(l, &c)| space.multipliers[l][c]).collect()
    }

    /// Hidden widths joined by `-`, e.g. `8-16-32`.
    pub fn label(&self, space: &SearchSpace) -> String {
        self.widths(space).iter().map(usize::to_string).collect::<Vec<_>>().join("-")
    }
}

impl SearchSpace {
    pub fn new(input_dim: usize, max_widths: Vec<usize>, multipliers: Vec<Vec<f64>>, classes: usize) -> Result<Self> {
        let space = Self { input_dim, max_widths, multipliers, classes };
        space.validate()?;
        Ok(space)
    }

    /// Same multiplier list for every hidden layer.
    pub fn uniform(input_dim: usize, max_widths: Vec<usize>, multipliers: &[f64], classes: usize) -> Result<Self> {
        let lists = vec![multipliers.to_vec(); max_widths.len()];
        Self::new(input_dim, max_widths, lists, classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(SupernetError::Space(msg));
        if self.input_dim == 0 || self.classes == 0 {
            return bad("input dimension and class count must be >= 1".into());
        }
        if self.max_widths.is_empty() {
            return bad("at least one hidden layer is required".into());
        }
        if self.multipliers.len() != self.max_widths.len() {
            return bad(format!(
                "{} multiplier lists for {} hidden layers",
                self.multipliers.len(),
                self.max_widths.len()
            ));
        }
        for (l, (list, &max)) in self.multipliers.iter().zip(&self.max_widths).enumerate() {
            if max == 0 {
                return bad(format!("layer {l} has max width 0"));
            }
            if list.iter().any(|&m| !(m > 0.0 && m <= 1.0)) {
                return bad(format!("layer {l} multipliers must lie in (0, 1]: {list:?}"));
            }
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("layer {l} multipliers must be strictly ascending: {list:?}"));
            }
            if list.last() != Some(&1.0) {
                return bad(format!("layer {l} multipliers must include 1.0: {list:?}"));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn max_widths(&self) -> &[usize] {
        &self.max_widths
    }

    /// Number of hidden (sliceable) layers.
    pub fn layers(&self) -> usize {
        self.max_widths.len()
    }

    pub fn multipliers(&self, layer: usize) -> &[f64] {
        &self.multipliers[layer]
    }

    /// Channel count for one choice: `max(1, round(multiplier · max_width))`.
    pub fn width(&self, layer: usize, choice: usize) -> usize {
        ((self.multipliers[layer][choice] * self.max_widths[layer] as f64).round() as usize).max(1)
    }

    /// Total number of configs, saturating at `u64::MAX`.
    pub fn size(&self) -> u64 {
        self.multipliers.iter().fold(1u64, |acc, l| acc.saturating_mul(l.len() as u64))
    }

    pub fn contains(&self, config: &SubnetConfig) -> bool {
        config.choices.len() == self.layers() && config.choices.iter().zip(&self.multipliers).all(|(&c, l)| c < l.len())
    }

    pub fn largest(&self) -> SubnetConfig {
        SubnetConfig::new(self.multipliers.iter().map(|l| l.len() - 1).collect())
    }

    pub fn smallest(&self) -> SubnetConfig {
        SubnetConfig::new(vec![0; self.layers()])
    }

    /// Each layer's choice drawn independently and uniformly.
    pub fn random<R: Rng + ?Sized>(&self, rng: &mut R) -> SubnetConfig {
        SubnetConfig::new(self.multipliers.iter().map(|l| rng.random_range(0..l.len())).collect())
    }

    /// Mixed-radix index of a config, layer 0 most significant.
    pub fn index_of(&self, config: &SubnetConfig) -> u64 {
        config
            .choices
            .iter()
            .zip(&self.multipliers)
            .fold(0u64, |acc, (&c, l)| acc.saturating_mul(l.len() as u64).saturating_add(c as u64))
    }

    pub fn config_at(&self, mut index: u64) -> Option<SubnetConfig> {
        if index >= self.size() {
            return None;
        }
        let mut choices = vec![0; self.layers()];
        for (slot, l) in choices.iter_mut().zip(&self.multipliers).rev() {
            *slot = (index % l.len() as u64) as usize;
            index /= l.len() as u64;
        }
        Some(SubnetConfig::new(choices))
    }

    /// Every config in index order; refuses spaces larger than `limit`.
    pub fn enumerate(&self, limit: u64) -> Result<Vec<SubnetConfig>> {
        let n = self.size();
        if n > limit {
            return Err(SupernetError::Space(format!("space has {n} configs, more than the limit {limit}")));
        }
        Ok((0..n).filter_map(|i| self.config_at(i)).collect())
    }

    /// Supernet at maximal width with fresh He-uniform weights.
    pub fn build_mlp<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Mlp, NnError> {
        Mlp::new(self.input_dim, &self.max_widths, self.classes, rng)
    }

    /// Does `mlp` have this space's architecture?
    pub fn matches(&self, mlp: &Mlp) -> bool {
        mlp.input_dim() == self.input_dim && mlp.hidden() == self.max_widths.as_slice() && mlp.classes() == self.classes
    }
}

/// `[largest, smallest, k_random uniform configs]`.
pub fn sample_sandwich<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R, k_random: usize) -> Vec<SubnetConfig> {
    let mut out = Vec::with_capacity(2 + k_random);
    out.push(space.largest());
    out.push(space.smallest());
    out.extend((0..k_random).map(|_| space.random(rng)));
    out
}

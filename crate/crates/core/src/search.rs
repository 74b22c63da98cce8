//! Evolutionary search over trained sub-networks and accuracy/cost Pareto fronts.

use crate::data::LabeledDataset;
use crate::nn::Mlp;
use crate::supernet::{evaluate_accuracy, SearchSpace, SubnetConfig, SupernetError};
use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use thiserror::Error;

pub const DEFAULT_MUTATION_RATE: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search budget: {0}")]
    Budget(String),
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("network does not match the search space")]
    Architecture,
    #[error(transparent)]
    Supernet(#[from] SupernetError),
}

pub type Result<T, E = SearchError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoPoint {
    pub config: SubnetConfig,
    /// Multiply-adds of one forward pass.
    pub cost: u64,
    pub accuracy: f64,
    /// 0 for the initial population, `r` for configs first produced in round `r`.
    pub generation: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SearchBudget {
    pub initial_random: usize,
    pub survivors: usize,
    pub crossover: usize,
    pub mutation: usize,
    pub rounds: usize,
}

impl SearchBudget {
    /// 512 initial, keep 128, 128 + 128 children per round, 20 rounds.
    pub fn paper() -> Self {
        Self { initial_random: 512, survivors: 128, crossover: 128, mutation: 128, rounds: 20 }
    }

    pub fn desk() -> Self {
        Self { initial_random: 64, survivors: 16, crossover: 16, mutation: 16, rounds: 10 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.initial_random == 0 || self.survivors == 0 || self.crossover == 0 || self.mutation == 0 {
            return Err(SearchError::Budget(format!("counts must all be >= 1: {self:?}")));
        }
        if self.survivors > self.initial_random {
            return Err(SearchError::Budget(format!(
                "survivors ({}) exceed initial_random ({})",
                self.survivors, self.initial_random
            )));
        }
        Ok(())
    }

    /// Evaluations the procedure asks for, counting duplicates.
    pub fn requested_evaluations(&self) -> usize {
        self.initial_random + self.rounds * (self.crossover + self.mutation)
    }
}

impl Default for SearchBudget {
    fn default() -> Self {
        Self::desk()
    }
}

/// Multiply-adds of the sliced MLP: `Σ k_in · k_out` over all linear layers.
pub fn estimate_cost(space: &SearchSpace, config: &SubnetConfig) -> u64 {
    let mut dims = vec![space.input_dim()];
    dims.extend(config.widths(space));
    dims.push(space.classes());
    dims.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
}

/// Each layer taken from `a` or `b` with equal probability.
pub fn crossover<R: Rng + ?Sized>(a: &SubnetConfig, b: &SubnetConfig, rng: &mut R) -> SubnetConfig {
    SubnetConfig::new(
        a.choices().iter().zip(b.choices()).map(|(&x, &y)| if rng.random_bool(0.5) { x } else { y }).collect(),
    )
}

/// Each layer independently redrawn uniformly from its list with probability `rate`.
pub fn mutate<R: Rng + ?Sized>(space: &SearchSpace, a: &SubnetConfig, rate: f64, rng: &mut R) -> SubnetConfig {
    let rate = rate.clamp(0.0, 1.0);
    let mut out = a.clone();
    for (l, c) in out.choices_mut().iter_mut().enumerate() {
        if rng.random_bool(rate) {
            *c = rng.random_range(0..space.multipliers(l).len());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    /// Every distinct config, in the order first evaluated.
    pub points: Vec<ParetoPoint>,
    /// Evaluations the budget asks for if duplicates were re-evaluated.
    pub requested_evaluations: usize,
}

impl SearchResult {
    pub fn unique_evaluations(&self) -> usize {
        self.points.len()
    }
}

/// Better-first: higher accuracy, then lower cost, then config order.
fn rank(a: &ParetoPoint, b: &ParetoPoint) -> std::cmp::Ordering {
    b.accuracy.total_cmp(&a.accuracy).then(a.cost.cmp(&b.cost)).then_with(|| a.config.cmp(&b.config))
}

/// Random initial population, then `rounds` of crossover and mutation from
/// the best `survivors` seen so far. Each distinct config is evaluated once.
///
/// The initial population has distinct members; when the space holds no more
/// than `initial_random` configs it is enumerated outright.
pub fn evolutionary_search<R: Rng + ?Sized>(
    mlp: &Mlp,
    space: &SearchSpace,
    valset: &LabeledDataset,
    budget: &SearchBudget,
    mutation_rate: f64,
    rng: &mut R,
) -> Result<SearchResult> {
    budget.validate()?;
    if valset.is_empty() {
        return Err(SearchError::EmptyValidation);
    }
    if !space.matches(mlp) {
        return Err(SearchError::Architecture);
    }
    let mut cache: HashMap<SubnetConfig, usize> = HashMap::new();
    let mut points: Vec<ParetoPoint> = Vec::new();
    let mut evaluate = |batch: Vec<SubnetConfig>, generation: usize, points: &mut Vec<ParetoPoint>| -> Result<()> {
        let fresh: Vec<SubnetConfig> = batch
            .into_iter()
            .filter(|c| {
                if cache.contains_key(c) {
                    return false;
                }
                cache.insert(c.clone(), usize::MAX);
                true
            })
            .collect();
        let accs: Vec<f64> = fresh
            .par_iter()
            .map(|c| evaluate_accuracy(mlp, space, c, valset))
            .collect::<std::result::Result<_, _>>()?;
        for (config, accuracy) in fresh.into_iter().zip(accs) {
            cache.insert(config.clone(), points.len());
            points.push(ParetoPoint { cost: estimate_cost(space, &config), config, accuracy, generation });
        }
        Ok(())
    };

    let initial = if space.size() <= budget.initial_random as u64 {
        space.enumerate(u64::MAX)?
    } else {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(budget.initial_random);
        while out.len() < budget.initial_random {
            let c = space.random(rng);
            if seen.insert(c.clone()) {
                out.push(c);
            }
        }
        out
    };
    evaluate(initial, 0, &mut points)?;

    for round in 1..=budget.rounds {
        let mut ranked: Vec<&ParetoPoint> = points.iter().collect();
        ranked.sort_by(|a, b| rank(a, b));
        let parents: Vec<SubnetConfig> = ranked.iter().take(budget.survivors).map(|p| p.config.clone()).collect();
        let mut children = Vec::with_capacity(budget.crossover + budget.mutation);
        for _ in 0..budget.crossover {
            let a = parents.choose(rng).expect("survivors >= 1");
            let b = parents.choose(rng).expect("survivors >= 1");
            children.push(crossover(a, b, rng));
        }
        for _ in 0..budget.mutation {
            let a = parents.choose(rng).expect("survivors >= 1");
            children.push(mutate(space, a, mutation_rate, rng));
        }
        evaluate(children, round, &mut points)?;
    }
    Ok(SearchResult { points, requested_evaluations: budget.requested_evaluations() })
}

/// Points not dominated by any other, sorted by cost ascending.
///
/// `a` dominates `b` when `a.cost ≤ b.cost` and `a.accuracy ≥ b.accuracy`
/// with at least one strict; exact duplicates therefore both survive.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut sorted: Vec<&ParetoPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.cost.cmp(&b.cost).then(b.accuracy.total_cmp(&a.accuracy)).then_with(|| a.config.cmp(&b.config)));
    let mut front = Vec::new();
    // Best accuracy so far and the lowest cost reaching it.
    let mut best: Option<(f64, u64)> = None;
    for p in sorted {
        let keep = match best {
            None => true,
            Some((acc, cost)) => p.accuracy > acc || (p.accuracy == acc && p.cost == cost),
        };
        if keep {
            if best.is_none_or(|(acc, _)| p.accuracy > acc) {
                best = Some((p.accuracy, p.cost));
            }
            front.push(p.clone());
        }
    }
    front
}

/// Quadratic reference: keep each point no other point dominates.
pub fn pareto_front_naive(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let dominates = |a: &ParetoPoint, b: &ParetoPoint| {
        a.cost <= b.cost && a.accuracy >= b.accuracy && (a.cost < b.cost || a.accuracy > b.accuracy)
    };
    let mut front: Vec<ParetoPoint> =
        points.iter().filter(|p| !points.iter().any(|q| dominates(q, p))).cloned().collect();
    front.sort_by(|a, b| a.cost.cmp(&b.cost).then(b.accuracy.total_cmp(&a.accuracy)).then_with(|| a.config.cmp(&b.config)));
    front
}

pub const POINTS_HEADER: [&str; 5] = ["config_id", "widths", "cost", "accuracy", "generation"];

/// One row per point: `config_id,widths,cost,accuracy,generation`.
pub fn write_points_csv<W: Write>(space: &SearchSpace, points: &[ParetoPoint], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(POINTS_HEADER)?;
    for p in points {
        w.write_record([
            space.index_of(&p.config).to_string(),
            p.config.label(space),
            p.cost.to_string(),
            p.accuracy.to_string(),
            p.generation.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

//! Argmax-oracle abstraction and cost-sensitive-classification reductions.
//!
//! The reference oracle is exhaustive enumeration, which is correct by
//! construction; the guarantees tracked here are about call counts, which the
//! budget records regardless of oracle internals. Ties always break toward
//! the lowest policy index so replays are deterministic.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

use crate::bandit::{Policy, PolicyClass};
use crate::estimators::SampleBatch;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("oracle budget exhausted: {calls} calls against cap {cap}")]
    BudgetExhausted { calls: u64, cap: u64 },
    #[error("context history does not cover the remaining disagreements")]
    CoverageExhausted,
}

/// Contexts with per-action cost rows; the oracle scores a policy by
/// sum_t s_t(pi(c_t)).
#[derive(Debug, Clone, Default)]
pub struct CostWeightedDataset {
    pub items: Vec<(usize, Vec<f64>)>,
}

impl CostWeightedDataset {
    pub fn score(&self, policy: &Policy) -> f64 {
        self.items
            .iter()
            .map(|(c, costs)| costs[policy.action_of(*c)])
            .sum()
    }

    /// Audit dump, one row per item: context then the cost row.
    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        for (c, costs) in &self.items {
            let cols: Vec<String> = costs.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{},{}", c, cols.join(","))?;
        }
        Ok(())
    }
}

/// Monotone call counter with an optional cap; shared across threads.
#[derive(Debug, Default)]
pub struct OracleBudget {
    calls: AtomicU64,
    cap: Option<u64>,
}

impl OracleBudget {
    pub fn new(cap: Option<u64>) -> Self {
        Self {
            calls: AtomicU64::new(0),
            cap,
        }
    }

    pub fn calls_made(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn charge(&self, n: u64) -> Result<(), OracleError> {
        let new = self.calls.fetch_add(n, Ordering::Relaxed) + n;
        if let Some(cap) = self.cap {
            if new > cap {
                return Err(OracleError::BudgetExhausted { calls: new, cap });
            }
        }
        Ok(())
    }
}

/// AMO: argmax_pi sum_t s_t(pi(c_t)), ties to the lowest policy index.
pub fn amo(
    class: &PolicyClass,
    data: &CostWeightedDataset,
    budget: &OracleBudget,
) -> Result<usize, OracleError> {
    if class.is_empty() {
        return Err(OracleError::InvalidArgument("empty policy class".into()));
    }
    budget.charge(1)?;
    let mut best = 0usize;
    let mut best_score = data.score(&class.policies[0]);
    for (i, p) in class.policies.iter().enumerate().skip(1) {
        let s = data.score(p);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Ok(best)
}

/// C-AMO: the argmax subject to score <= loss_cap, or None when no policy is
/// feasible.
pub fn c_amo(
    class: &PolicyClass,
    data: &CostWeightedDataset,
    loss_cap: f64,
    budget: &OracleBudget,
) -> Result<Option<usize>, OracleError> {
    if class.is_empty() {
        return Err(OracleError::InvalidArgument("empty policy class".into()));
    }
    budget.charge(1)?;
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in class.policies.iter().enumerate() {
        let s = data.score(p);
        if s <= loss_cap && best.map_or(true, |(_, bs)| s > bs) {
            best = Some((i, s));
        }
    }
    Ok(best.map(|(i, _)| i))
}

/// One constrained call of the descend-and-exclude loop: the best policy that
/// disagrees with `avoid` at `context` among those scoring at most `cap`.
/// Counts one C-AMO call.
fn c_amo_disagreeing(
    class: &PolicyClass,
    score: &dyn Fn(usize) -> f64,
    cap: f64,
    context: usize,
    avoid_action: usize,
    visited: &BTreeSet<usize>,
    budget: &OracleBudget,
) -> Result<Option<usize>, OracleError> {
    budget.charge(1)?;
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in class.policies.iter().enumerate() {
        if p.action_of(context) == avoid_action || visited.contains(&i) {
            continue;
        }
        let s = score(i);
        if s <= cap && best.map_or(true, |(_, bs)| s > bs) {
            best = Some((i, s));
        }
    }
    Ok(best.map(|(i, _)| i))
}

/// Argmax of `score` over the class minus `forbidden`, realized by the
/// descend-and-exclude loop over per-context disagreement-constrained C-AMO
/// calls; uses at most |forbidden| * |contexts| constrained calls after the
/// initial unconstrained one.
pub fn constrained_argmax_avoiding(
    class: &PolicyClass,
    score: &dyn Fn(usize) -> f64,
    forbidden: &BTreeSet<usize>,
    contexts: &[usize],
    budget: &OracleBudget,
) -> Result<usize, OracleError> {
    if forbidden.len() >= class.len() {
        return Err(OracleError::InvalidArgument(
            "no policy outside the forbidden set".into(),
        ));
    }
    budget.charge(1)?;
    let mut current = {
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for i in 0..class.len() {
            let s = score(i);
            if s > best_score {
                best = i;
                best_score = s;
            }
        }
        best
    };
    // Exclude already-visited policies from candidacy: ties would otherwise
    // cycle. Visited policies are all forbidden, so the loop ends within
    // |forbidden| + 1 hops when the history covers the disagreements.
    let mut visited = BTreeSet::new();
    let mut guard = forbidden.len() + 1;
    while forbidden.contains(&current) {
        if guard == 0 {
            return Err(OracleError::CoverageExhausted);
        }
        guard -= 1;
        visited.insert(current);
        let cap = score(current);
        let mut next: Option<(usize, f64)> = None;
        for &c in contexts {
            let avoid = class.policies[current].action_of(c);
            if let Some(cand) = c_amo_disagreeing(class, score, cap, c, avoid, &visited, budget)? {
                let s = score(cand);
                let better = match next {
                    None => true,
                    Some((bi, bs)) => s > bs || (s == bs && cand < bi),
                };
                if better {
                    next = Some((cand, s));
                }
            }
        }
        match next {
            Some((cand, _)) => current = cand,
            None => return Err(OracleError::CoverageExhausted),
        }
    }
    Ok(current)
}

/// Builds the two-part cost vectors whose AMO score equals (up to a constant
/// shared by all policies outside `support`) the lambda-gradient of the round
/// objective: a reward part over the previous round's samples and a design
/// part over the offline contexts.
///
/// `sampling_probs(c)` is the current round's action distribution at context
/// c; `gamma0_prev` is the off-support regularizer the previous round's gap
/// estimates use; `gamma0_cur` scales the design part.
#[allow(clippy::too_many_arguments)]
pub fn gradient_to_csc(
    pivot: &Policy,
    prev_batch: &SampleBatch,
    gamma0_prev: f64,
    gamma0_cur: f64,
    sampling_probs: &dyn Fn(usize) -> Vec<f64>,
    offline: &[(usize, f64)],
    n_actions: usize,
) -> CostWeightedDataset {
    csc_costs(
        pivot,
        prev_batch,
        gamma0_prev,
        gamma0_cur,
        sampling_probs,
        offline,
        n_actions,
        1.0,
    )
}

/// Cost vectors whose AMO maximizer over the off-support policies is the
/// minimizer of the round's selection rule: same reward part, negated design
/// part (the selection penalizes disagreement mass that the gradient
/// rewards).
#[allow(clippy::too_many_arguments)]
pub fn selection_to_csc(
    pivot: &Policy,
    batch: &SampleBatch,
    gamma0: f64,
    sampling_probs: &dyn Fn(usize) -> Vec<f64>,
    offline: &[(usize, f64)],
    n_actions: usize,
) -> CostWeightedDataset {
    csc_costs(
        pivot,
        batch,
        gamma0,
        gamma0,
        sampling_probs,
        offline,
        n_actions,
        -1.0,
    )
}

#[allow(clippy::too_many_arguments)]
fn csc_costs(
    pivot: &Policy,
    batch: &SampleBatch,
    gamma0_reward: f64,
    gamma0_design: f64,
    sampling_probs: &dyn Fn(usize) -> Vec<f64>,
    offline: &[(usize, f64)],
    n_actions: usize,
    design_sign: f64,
) -> CostWeightedDataset {
    let mut items = Vec::with_capacity(batch.len() + offline.len());
    let n_samples = batch.len().max(1) as f64;
    for rec in &batch.records {
        let mut costs = vec![0.0; n_actions];
        costs[rec.action] = rec.reward / ((rec.propensity + gamma0_reward) * n_samples);
        items.push((rec.context, costs));
    }
    for &(c, weight) in offline {
        let probs = sampling_probs(c);
        let pivot_action = pivot.action_of(c);
        let mut costs = vec![0.0; n_actions];
        for (a, cost) in costs.iter_mut().enumerate() {
            if a != pivot_action {
                *cost = design_sign
                    * weight
                    * gamma0_design
                    * (1.0 / probs[a].max(1e-300) + 1.0 / probs[pivot_action].max(1e-300));
            }
        }
        items.push((c, costs));
    }
    CostWeightedDataset { items }
}

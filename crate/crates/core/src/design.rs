//! Instance-complexity functionals, optimal allocations, and the closed-form
//! dual design values, plus brute-force oracles for small instances.
//!
//! The min-max solver is exponentiated gradient (mirror descent) over the
//! product of per-context action simplices with an exact inner max; the
//! combinatorial functional additionally reports a certified dual gap from a
//! Frank-Wolfe pass over policy weights, using the closed-form inner minimum.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bandit::{BanditInstance, FeatureMap, Policy, PolicyClass};

#[derive(Debug, Error)]
pub enum DesignError {
    #[error("optimal policy is not unique (values within 1e-9)")]
    AmbiguousOptimum,
    #[error("degenerate per-context gap at context {context}, action {action}")]
    DegenerateGap { context: usize, action: usize },
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Per-context probability rows over actions; the joint design is
/// w(c,a) = nu_c * p(c,a).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Allocation {
    pub rows: Vec<Vec<f64>>,
}

impl Allocation {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, DesignError> {
        for (c, row) in rows.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(DesignError::InvalidArgument(format!(
                    "row {c} sums to {total}"
                )));
            }
            if row.iter().any(|&p| p < 0.0) {
                return Err(DesignError::InvalidArgument(format!(
                    "row {c} has a negative entry"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn uniform(n_contexts: usize, n_actions: usize) -> Self {
        Self {
            rows: vec![vec![1.0 / n_actions as f64; n_actions]; n_contexts],
        }
    }

    /// Joint weights w(c,a) = nu_c p(c,a), row-major.
    pub fn joint_weights(&self, instance: &BanditInstance) -> Vec<f64> {
        let mut w = Vec::with_capacity(instance.n_contexts * instance.n_actions);
        for (c, row) in self.rows.iter().enumerate() {
            for &p in row {
                w.push(instance.nu[c] * p);
            }
        }
        w
    }
}

/// Context distribution used when taking expectations: exact nu or the
/// empirical distribution of an offline dataset, collapsed to distinct
/// contexts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextWeights {
    /// (context, weight) with positive weights summing to 1.
    pub pairs: Vec<(usize, f64)>,
}

impl ContextWeights {
    pub fn exact(instance: &BanditInstance) -> Self {
        let pairs = instance
            .nu
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(c, &p)| (c, p))
            .collect();
        Self { pairs }
    }

    pub fn empirical(contexts: &[usize], n_contexts: usize) -> Self {
        let mut counts = vec![0usize; n_contexts];
        for &c in contexts {
            counts[c] += 1;
        }
        let total = contexts.len().max(1) as f64;
        let pairs = counts
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, &n)| (c, n as f64 / total))
            .collect();
        Self { pairs }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub step_scale: f64,
    /// Relative tolerance used for the convergence flag.
    pub tol: f64,
    pub ridge: f64,
    pub clip_floor: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 5000,
            step_scale: 0.5,
            tol: 1e-3,
            ridge: 1e-10,
            clip_floor: 1e-12,
        }
    }
}

/// Result of a min-max design solve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignValue {
    pub value: f64,
    /// Policy index attaining the outer max at the returned allocation.
    pub argmax_policy: usize,
    pub allocation: Allocation,
    pub converged: bool,
    pub clip_count: u64,
    /// Certified relative duality gap, when a dual lower bound is available.
    pub dual_gap: Option<f64>,
}

/// Finds the unique optimal policy index; values within 1e-9 of the maximum
/// are treated as ties and rejected.
pub fn unique_optimum(values: &[f64]) -> Result<usize, DesignError> {
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut winner = None;
    for (i, &v) in values.iter().enumerate() {
        if (best - v).abs() <= 1e-9 {
            if winner.is_some() {
                return Err(DesignError::AmbiguousOptimum);
            }
            winner = Some(i);
        }
    }
    winner.ok_or_else(|| DesignError::Numeric("empty policy class".into()))
}

// ---------------------------------------------------------------------------
// Min-max solver machinery
// ---------------------------------------------------------------------------

/// One alternative policy seen combinatorially: the contexts where it
/// disagrees with the optimum, with both actions and the context weight.
#[derive(Debug, Clone)]
struct DisagreementItem {
    /// (context, pi action, pistar action, context weight)
    entries: Vec<(usize, usize, usize, f64)>,
    denom: f64,
    policy: usize,
}

trait MinMaxObjective {
    /// Item values at p; may cache work for the following gradient call.
    fn values(&mut self, p: &[Vec<f64>], clip_floor: f64, clips: &mut u64) -> Vec<f64>;
    /// Gradient of item `k` with respect to p, written into `out`.
    fn grad_item(&mut self, p: &[Vec<f64>], k: usize, out: &mut [Vec<f64>]);
    fn item_policy(&self, k: usize) -> usize;
}

struct CombObjective {
    items: Vec<DisagreementItem>,
}

impl MinMaxObjective for CombObjective {
    fn values(&mut self, p: &[Vec<f64>], clip_floor: f64, clips: &mut u64) -> Vec<f64> {
        self.items
            .iter()
            .map(|item| {
                let mut acc = 0.0;
                for &(c, a_pi, a_star, w) in &item.entries {
                    let mut p_pi = p[c][a_pi];
                    let mut p_star = p[c][a_star];
                    if p_pi < clip_floor {
                        p_pi = clip_floor;
                        *clips += 1;
                    }
                    if p_star < clip_floor {
                        p_star = clip_floor;
                        *clips += 1;
                    }
                    acc += w * (1.0 / p_pi + 1.0 / p_star);
                }
                acc / item.denom
            })
            .collect()
    }

    fn grad_item(&mut self, p: &[Vec<f64>], k: usize, out: &mut [Vec<f64>]) {
        for row in out.iter_mut() {
            row.iter_mut().for_each(|g| *g = 0.0);
        }
        let item = &self.items[k];
        for &(c, a_pi, a_star, w) in &item.entries {
            let p_pi = p[c][a_pi].max(1e-12);
            let p_star = p[c][a_star].max(1e-12);
            out[c][a_pi] -= w / (p_pi * p_pi * item.denom);
            out[c][a_star] -= w / (p_star * p_star * item.denom);
        }
    }

    fn item_policy(&self, k: usize) -> usize {
        self.items[k].policy
    }
}

struct LinearObjective<'a> {
    instance: &'a BanditInstance,
    fm: &'a FeatureMap,
    /// phi_pi - phi_pistar per alternative policy.
    diffs: Vec<DVector<f64>>,
    denoms: Vec<f64>,
    policies: Vec<usize>,
    ridge: f64,
    /// A(w)^{-1} (phi_pi - phi_pistar) from the last `values` call.
    solves: Vec<DVector<f64>>,
}

impl LinearObjective<'_> {
    fn design_matrix(&self, p: &[Vec<f64>]) -> DMatrix<f64> {
        let d = self.fm.dim;
        let mut a = DMatrix::<f64>::zeros(d, d);
        for c in 0..self.instance.n_contexts {
            let nu_c = self.instance.nu[c];
            if nu_c == 0.0 {
                continue;
            }
            for act in 0..self.instance.n_actions {
                let w = nu_c * p[c][act];
                if w == 0.0 {
                    continue;
                }
                let phi = self.fm.phi(c, act);
                for i in 0..d {
                    if phi[i] == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        a[(i, j)] += w * phi[i] * phi[j];
                    }
                }
            }
        }
        for i in 0..d {
            a[(i, i)] += self.ridge;
        }
        a
    }
}

impl MinMaxObjective for LinearObjective<'_> {
    fn values(&mut self, p: &[Vec<f64>], _clip_floor: f64, _clips: &mut u64) -> Vec<f64> {
        let a = self.design_matrix(p);
        let lu = a.lu();
        self.solves.clear();
        let mut vals = Vec::with_capacity(self.diffs.len());
        for (diff, denom) in self.diffs.iter().zip(&self.denoms) {
            let x = lu.solve(diff).unwrap_or_else(|| DVector::zeros(diff.len()));
            vals.push(diff.dot(&x) / denom);
            self.solves.push(x);
        }
        vals
    }

    fn grad_item(&mut self, _p: &[Vec<f64>], k: usize, out: &mut [Vec<f64>]) {
        // d/dw_{c,a} of d^T A^{-1} d is -(d^T A^{-1} phi(c,a))^2, and
        // w_{c,a} = nu_c p_{c,a}.
        let x = &self.solves[k];
        let denom = self.denoms[k];
        for (c, row) in out.iter_mut().enumerate() {
            let nu_c = self.instance.nu[c];
            for (act, g) in row.iter_mut().enumerate() {
                if nu_c == 0.0 {
                    *g = 0.0;
                    continue;
                }
                let phi = self.fm.phi(c, act);
                let proj: f64 = phi.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
                *g = -nu_c * proj * proj / denom;
            }
        }
    }

    fn item_policy(&self, k: usize) -> usize {
        self.policies[k]
    }
}

struct EgOutcome {
    value: f64,
    argmax_item: usize,
    rows: Vec<Vec<f64>>,
    converged: bool,
    clip_count: u64,
}

/// Exponentiated gradient on the product of simplices, warm-started at the
/// uniform allocation, with best-iterate tracking.
fn solve_min_max(
    obj: &mut dyn MinMaxObjective,
    n_contexts: usize,
    n_actions: usize,
    cfg: &SolverConfig,
) -> EgOutcome {
    let mut p = vec![vec![1.0 / n_actions as f64; n_actions]; n_contexts];
    let mut grad = vec![vec![0.0; n_actions]; n_contexts];
    let mut clips = 0u64;

    let mut best_value = f64::INFINITY;
    let mut best_rows = p.clone();
    let mut best_item = 0usize;
    let window = (cfg.max_iter / 4).max(1);
    let mut window_low = f64::INFINITY;
    let mut window_high = f64::NEG_INFINITY;

    for t in 1..=cfg.max_iter {
        let vals = obj.values(&p, cfg.clip_floor, &mut clips);
        let (k, &fmax) = vals
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .expect("nonempty items");
        if fmax < best_value {
            best_value = fmax;
            best_rows = p.clone();
            best_item = k;
        }
        if t > cfg.max_iter - window {
            window_low = window_low.min(fmax);
            window_high = window_high.max(fmax);
        }
        obj.grad_item(&p, k, &mut grad);
        let gmax = grad
            .iter()
            .flat_map(|row| row.iter())
            .fold(0.0f64, |m, &g| m.max(g.abs()));
        if gmax == 0.0 {
            break;
        }
        let step = cfg.step_scale / (t as f64).sqrt();
        for (row, grow) in p.iter_mut().zip(&grad) {
            let mut total = 0.0;
            for (pv, &g) in row.iter_mut().zip(grow) {
                *pv *= (-step * g / gmax).exp();
                total += *pv;
            }
            for pv in row.iter_mut() {
                *pv /= total;
            }
        }
    }
    let converged = best_value.is_finite()
        && (window_high - window_low) <= cfg.tol * best_value.abs().max(1e-300);
    EgOutcome {
        value: best_value,
        argmax_item: best_item,
        rows: best_rows,
        converged,
        clip_count: clips,
    }
}

fn disagreement_items(
    instance: &BanditInstance,
    class: &PolicyClass,
    pistar: usize,
    denom_of: impl Fn(usize) -> f64,
) -> Vec<DisagreementItem> {
    let star = &class.policies[pistar];
    class
        .policies
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != pistar)
        .map(|(i, pi)| {
            let entries = (0..instance.n_contexts)
                .filter(|&c| instance.nu[c] > 0.0 && pi.action_of(c) != star.action_of(c))
                .map(|c| (c, pi.action_of(c), star.action_of(c), instance.nu[c]))
                .collect();
            DisagreementItem {
                entries,
                denom: denom_of(i),
                policy: i,
            }
        })
        .collect()
}

/// The combinatorial complexity functional: the min over per-context action
/// distributions of the worst disagreement-to-gap ratio.
pub fn rho_combinatorial(
    instance: &BanditInstance,
    class: &PolicyClass,
    epsilon: f64,
    cfg: &SolverConfig,
) -> Result<DesignValue, DesignError> {
    if epsilon < 0.0 {
        return Err(DesignError::InvalidArgument("epsilon must be >= 0".into()));
    }
    let values: Vec<f64> = class
        .policies
        .iter()
        .map(|p| crate::bandit::policy_value(instance, p))
        .collect();
    let pistar = unique_optimum(&values)?;
    if class.len() == 1 {
        return Ok(DesignValue {
            value: 0.0,
            argmax_policy: pistar,
            allocation: Allocation::uniform(instance.n_contexts, instance.n_actions),
            converged: true,
            clip_count: 0,
            dual_gap: Some(0.0),
        });
    }
    let denom_of = |i: usize| {
        let gap = values[pistar] - values[i];
        gap.max(epsilon).powi(2)
    };
    let mut obj = CombObjective {
        items: disagreement_items(instance, class, pistar, denom_of),
    };
    let out = solve_min_max(&mut obj, instance.n_contexts, instance.n_actions, cfg);
    // Certified lower bound from the dual (closed-form inner minimum over w).
    let dual = dual_lower_bound(&obj.items, instance.n_contexts, instance.n_actions, cfg);
    let dual_gap = if out.value > 0.0 {
        Some(((out.value - dual) / out.value).max(0.0))
    } else {
        Some(0.0)
    };
    Ok(DesignValue {
        value: out.value,
        argmax_policy: obj.item_policy(out.argmax_item),
        allocation: Allocation::new(out.rows)?,
        converged: out.converged,
        clip_count: out.clip_count,
        dual_gap,
    })
}

/// Evaluates the combinatorial objective at a fixed allocation; returns the
/// max over alternatives and its policy index.
pub fn rho_objective_at(
    instance: &BanditInstance,
    class: &PolicyClass,
    epsilon: f64,
    allocation: &Allocation,
) -> Result<(f64, usize), DesignError> {
    let values: Vec<f64> = class
        .policies
        .iter()
        .map(|p| crate::bandit::policy_value(instance, p))
        .collect();
    let pistar = unique_optimum(&values)?;
    let denom_of = |i: usize| (values[pistar] - values[i]).max(epsilon).powi(2);
    let mut obj = CombObjective {
        items: disagreement_items(instance, class, pistar, denom_of),
    };
    if obj.items.is_empty() {
        return Ok((0.0, pistar));
    }
    let mut clips = 0u64;
    let vals = obj.values(&allocation.rows, 1e-12, &mut clips);
    let (k, &v) = vals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap();
    Ok((v, obj.item_policy(k)))
}

/// The linear (realizable) complexity functional over a general feature map.
pub fn rho_linear(
    instance: &BanditInstance,
    class: &PolicyClass,
    epsilon: f64,
    cfg: &SolverConfig,
) -> Result<DesignValue, DesignError> {
    if epsilon < 0.0 {
        return Err(DesignError::InvalidArgument("epsilon must be >= 0".into()));
    }
    let fm = class
        .feature_map
        .as_ref()
        .ok_or_else(|| DesignError::InvalidArgument("feature map required".into()))?;
    let theta = class
        .theta_star
        .as_ref()
        .ok_or_else(|| DesignError::InvalidArgument("theta_star required".into()))?;
    let embeddings = class.embeddings(instance);
    let values: Vec<f64> = embeddings
        .iter()
        .map(|e| e.iter().zip(theta).map(|(x, t)| x * t).sum())
        .collect();
    let pistar = unique_optimum(&values)?;
    if class.len() == 1 {
        return Ok(DesignValue {
            value: 0.0,
            argmax_policy: pistar,
            allocation: Allocation::uniform(instance.n_contexts, instance.n_actions),
            converged: true,
            clip_count: 0,
            dual_gap: None,
        });
    }
    let mut diffs = Vec::new();
    let mut denoms = Vec::new();
    let mut policies = Vec::new();
    for (i, emb) in embeddings.iter().enumerate() {
        if i == pistar {
            continue;
        }
        let diff: Vec<f64> = emb
            .iter()
            .zip(&embeddings[pistar])
            .map(|(a, b)| a - b)
            .collect();
        diffs.push(DVector::from_vec(diff));
        denoms.push((values[pistar] - values[i]).max(epsilon).powi(2));
        policies.push(i);
    }
    let mut obj = LinearObjective {
        instance,
        fm,
        diffs,
        denoms,
        policies,
        ridge: cfg.ridge,
        solves: Vec::new(),
    };
    let out = solve_min_max(&mut obj, instance.n_contexts, instance.n_actions, cfg);
    Ok(DesignValue {
        value: out.value,
        argmax_policy: obj.item_policy(out.argmax_item),
        allocation: Allocation::new(out.rows)?,
        converged: out.converged,
        clip_count: out.clip_count,
        dual_gap: None,
    })
}

// ---------------------------------------------------------------------------
// Norms and second moments
// ---------------------------------------------------------------------------

/// (A(w) + ridge I)^{-1} for w = joint weights of the allocation.
pub fn second_moment_inverse(
    instance: &BanditInstance,
    fm: &FeatureMap,
    allocation: &Allocation,
    ridge: f64,
) -> Result<DMatrix<f64>, DesignError> {
    let w = allocation.joint_weights(instance);
    second_moment_inverse_weights(&w, fm, ridge)
}

pub fn second_moment_inverse_weights(
    weights: &[f64],
    fm: &FeatureMap,
    ridge: f64,
) -> Result<DMatrix<f64>, DesignError> {
    let d = fm.dim;
    let mut a = DMatrix::<f64>::zeros(d, d);
    for c in 0..fm.n_contexts() {
        for act in 0..fm.n_actions() {
            let w = weights[c * fm.n_actions() + act];
            if w == 0.0 {
                continue;
            }
            let phi = fm.phi(c, act);
            for i in 0..d {
                if phi[i] == 0.0 {
                    continue;
                }
                for j in 0..d {
                    a[(i, j)] += w * phi[i] * phi[j];
                }
            }
        }
    }
    for i in 0..d {
        a[(i, i)] += ridge;
    }
    a.clone()
        .try_inverse()
        .filter(|inv| inv.iter().all(|v| v.is_finite()))
        .ok_or_else(|| DesignError::Numeric("design matrix singular beyond ridge".into()))
}

/// ||phi_a - phi_b||^2 in the (A(w) + ridge I)^{-1} norm.
pub fn design_norm(
    instance: &BanditInstance,
    fm: &FeatureMap,
    allocation: &Allocation,
    phi_a: &[f64],
    phi_b: &[f64],
    ridge: f64,
) -> Result<f64, DesignError> {
    let w = allocation.joint_weights(instance);
    design_norm_weights(&w, fm, phi_a, phi_b, ridge)
}

/// Same as [`design_norm`] over explicit joint weights (not necessarily
/// normalized); exposes the degree minus-one homogeneity in w.
pub fn design_norm_weights(
    weights: &[f64],
    fm: &FeatureMap,
    phi_a: &[f64],
    phi_b: &[f64],
    ridge: f64,
) -> Result<f64, DesignError> {
    if phi_a.len() != phi_b.len() || phi_a.len() != fm.dim {
        return Err(DesignError::InvalidArgument(
            "embedding dimensions disagree".into(),
        ));
    }
    let inv = second_moment_inverse_weights(weights, fm, ridge)?;
    let diff = DVector::from_iterator(fm.dim, phi_a.iter().zip(phi_b).map(|(a, b)| a - b));
    Ok(diff.dot(&(&inv * &diff)))
}

// ---------------------------------------------------------------------------
// Closed-form dual design value
// ---------------------------------------------------------------------------

#[inline]
fn smoothed_mass(
    class: &PolicyClass,
    support: &[usize],
    lambda_gamma: &[f64],
    pivot: &Policy,
    context: usize,
    action: usize,
    eta: f64,
) -> f64 {
    let mut s = 0.0;
    for (&idx, &lg) in support.iter().zip(lambda_gamma) {
        let t = crate::bandit::disagreement_entry(&class.policies[idx], pivot, context, action);
        s += lg * (t + eta);
    }
    s
}

/// E_c[(sum_a sqrt((lambda .* gamma)^T (t_a^{(c)} + eta)))^2], the exact inner
/// minimum over designs of sum_pi lambda_pi gamma_pi ||phi_pi - phi_pivot||^2
/// when eta = 0.
pub fn closed_form_design_value(
    class: &PolicyClass,
    support: &[usize],
    lambda: &[f64],
    gamma: &[f64],
    pivot: usize,
    contexts: &ContextWeights,
    eta: f64,
) -> f64 {
    let pivot = &class.policies[pivot];
    let lg: Vec<f64> = lambda.iter().zip(gamma).map(|(l, g)| l * g).collect();
    let n_actions = class
        .feature_map
        .as_ref()
        .map(|f| f.n_actions())
        .unwrap_or_else(|| {
            class
                .policies
                .iter()
                .flat_map(|p| p.actions.iter())
                .max()
                .map(|&a| a + 1)
                .unwrap_or(1)
        });
    let mut total = 0.0;
    for &(c, w) in &contexts.pairs {
        let mut root_sum = 0.0;
        for a in 0..n_actions {
            let s = smoothed_mass(class, support, &lg, pivot, c, a, eta);
            root_sum += s.max(0.0).sqrt();
        }
        total += w * root_sum * root_sum;
    }
    total
}

/// The minimizing allocation p(c,a) proportional to
/// sqrt((lambda .* gamma)^T (t_a^{(c)} + eta)); rows with a zero normalizer
/// fall back to uniform and are counted.
pub fn allocation_from_lambda_gamma(
    class: &PolicyClass,
    support: &[usize],
    lambda: &[f64],
    gamma: &[f64],
    pivot: usize,
    n_contexts: usize,
    n_actions: usize,
    eta: f64,
) -> (Allocation, usize) {
    let pivot = &class.policies[pivot];
    let lg: Vec<f64> = lambda.iter().zip(gamma).map(|(l, g)| l * g).collect();
    let mut fallbacks = 0usize;
    let mut rows = Vec::with_capacity(n_contexts);
    for c in 0..n_contexts {
        let mut row: Vec<f64> = (0..n_actions)
            .map(|a| smoothed_mass(class, support, &lg, pivot, c, a, eta).max(0.0).sqrt())
            .collect();
        let total: f64 = row.iter().sum();
        if total <= 0.0 {
            fallbacks += 1;
            row = vec![1.0 / n_actions as f64; n_actions];
        } else {
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        rows.push(row);
    }
    (Allocation { rows }, fallbacks)
}

// ---------------------------------------------------------------------------
// Dual lower bound for the combinatorial functional
// ---------------------------------------------------------------------------

/// Maximizes G(lambda) = E_c[(sum_a sqrt(sum_k lambda_k kappa_k t))^2] over
/// the item simplex by Frank-Wolfe with exact line search; G is concave and
/// 1-homogeneous, so max G lower-bounds the min-max value.
fn dual_lower_bound(
    items: &[DisagreementItem],
    n_contexts: usize,
    n_actions: usize,
    cfg: &SolverConfig,
) -> f64 {
    if items.is_empty() {
        return 0.0;
    }
    let k_items = items.len();
    // Context weights, recovered once from the item entries.
    let mut context_weight = vec![0.0f64; n_contexts];
    for item in items {
        for &(c, _, _, w) in &item.entries {
            context_weight[c] = w;
        }
    }
    let mut lambda = vec![1.0 / k_items as f64; k_items];
    let eval = |lambda: &[f64]| -> f64 {
        let mut s = vec![0.0; n_contexts * n_actions];
        for (k, item) in items.iter().enumerate() {
            let scale = lambda[k] / item.denom;
            if scale == 0.0 {
                continue;
            }
            for &(c, a_pi, a_star, _w) in &item.entries {
                s[c * n_actions + a_pi] += scale;
                s[c * n_actions + a_star] += scale;
            }
        }
        let mut total = 0.0;
        for (c, &w) in context_weight.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mut root_sum = 0.0;
            for a in 0..n_actions {
                root_sum += s[c * n_actions + a].sqrt();
            }
            total += w * root_sum * root_sum;
        }
        total
    };
    let grad = |lambda: &[f64]| -> Vec<f64> {
        let mut s = vec![0.0; n_contexts * n_actions];
        for (k, item) in items.iter().enumerate() {
            let scale = lambda[k] / item.denom;
            for &(c, a_pi, a_star, _w) in &item.entries {
                s[c * n_actions + a_pi] += scale;
                s[c * n_actions + a_star] += scale;
            }
        }
        let mut root_sums = vec![0.0; n_contexts];
        for c in 0..n_contexts {
            for a in 0..n_actions {
                root_sums[c] += s[c * n_actions + a].sqrt();
            }
        }
        items
            .iter()
            .map(|item| {
                let mut g = 0.0;
                for &(c, a_pi, a_star, w) in &item.entries {
                    for a in [a_pi, a_star] {
                        let sa = s[c * n_actions + a];
                        if sa > 0.0 {
                            g += w * root_sums[c] / (sa.sqrt() * item.denom);
                        } else {
                            return f64::INFINITY;
                        }
                    }
                }
                g
            })
            .collect()
    };
    let iters = cfg.max_iter.min(2000);
    for _ in 0..iters {
        let g = grad(&lambda);
        let (k, _) = g
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap();
        // exact-ish line search: ternary on concave section toward e_k
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        let blend = |beta: f64, lambda: &[f64]| {
            let mut l2: Vec<f64> = lambda.iter().map(|v| v * (1.0 - beta)).collect();
            l2[k] += beta;
            l2
        };
        for _ in 0..40 {
            let m1 = lo + (hi - lo) / 3.0;
            let m2 = hi - (hi - lo) / 3.0;
            if eval(&blend(m1, &lambda)) < eval(&blend(m2, &lambda)) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        let beta = 0.5 * (lo + hi);
        lambda = blend(beta, &lambda);
        if beta < 1e-14 {
            break;
        }
    }
    eval(&lambda)
}

// ---------------------------------------------------------------------------
// Pairwise design for the elimination learner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PairDesign {
    pub value: f64,
    pub allocation: Allocation,
    pub converged: bool,
}

/// min over designs of the max over policy pairs (drawn from `active`) of
/// ||phi_pi - phi_pi'||^2 in the inverse design norm. Uses the combinatorial
/// identity when the feature map is one-hot, and the matrix path otherwise.
pub fn min_max_pair_norms(
    instance: &BanditInstance,
    class: &PolicyClass,
    active: &[usize],
    cfg: &SolverConfig,
) -> Result<PairDesign, DesignError> {
    if active.len() < 2 {
        return Err(DesignError::InvalidArgument(
            "need at least two active policies".into(),
        ));
    }
    let fm = class
        .feature_map
        .as_ref()
        .ok_or_else(|| DesignError::InvalidArgument("feature map required".into()))?;
    let one_hot = fm.is_one_hot();
    if one_hot {
        let mut items = Vec::new();
        for (ii, &i) in active.iter().enumerate() {
            for &j in &active[ii + 1..] {
                let pi = &class.policies[i];
                let pj = &class.policies[j];
                let entries: Vec<(usize, usize, usize, f64)> = (0..instance.n_contexts)
                    .filter(|&c| instance.nu[c] > 0.0 && pi.action_of(c) != pj.action_of(c))
                    .map(|c| (c, pi.action_of(c), pj.action_of(c), instance.nu[c]))
                    .collect();
                if !entries.is_empty() {
                    items.push(DisagreementItem {
                        entries,
                        denom: 1.0,
                        policy: i,
                    });
                }
            }
        }
        if items.is_empty() {
            return Ok(PairDesign {
                value: 0.0,
                allocation: Allocation::uniform(instance.n_contexts, instance.n_actions),
                converged: true,
            });
        }
        let mut obj = CombObjective { items };
        let out = solve_min_max(&mut obj, instance.n_contexts, instance.n_actions, cfg);
        return Ok(PairDesign {
            value: out.value,
            allocation: Allocation::new(out.rows)?,
            converged: out.converged,
        });
    }
    let embeddings = class.embeddings(instance);
    let mut diffs = Vec::new();
    let mut policies = Vec::new();
    for (ii, &i) in active.iter().enumerate() {
        for &j in &active[ii + 1..] {
            let diff: Vec<f64> = embeddings[i]
                .iter()
                .zip(&embeddings[j])
                .map(|(a, b)| a - b)
                .collect();
            if diff.iter().any(|&v| v != 0.0) {
                diffs.push(DVector::from_vec(diff));
                policies.push(i);
            }
        }
    }
    if diffs.is_empty() {
        return Ok(PairDesign {
            value: 0.0,
            allocation: Allocation::uniform(instance.n_contexts, instance.n_actions),
            converged: true,
        });
    }
    let denoms = vec![1.0; diffs.len()];
    let mut obj = LinearObjective {
        instance,
        fm,
        diffs,
        denoms,
        policies,
        ridge: cfg.ridge,
        solves: Vec::new(),
    };
    let out = solve_min_max(&mut obj, instance.n_contexts, instance.n_actions, cfg);
    Ok(PairDesign {
        value: out.value,
        allocation: Allocation::new(out.rows)?,
        converged: out.converged,
    })
}

// ---------------------------------------------------------------------------
// Trivial-class bound and disagreement coefficients
// ---------------------------------------------------------------------------

/// The stated trivial-class upper bound max_c (2/nu_c) sum_{a != a*_c}
/// gap(c,a)^{-2}; contexts with nu_c = 0 cannot bind and are skipped.
pub fn trivial_class_bound(instance: &BanditInstance) -> Result<f64, DesignError> {
    let star = instance.greedy_policy();
    let mut best = 0.0f64;
    for c in 0..instance.n_contexts {
        if instance.nu[c] == 0.0 {
            continue;
        }
        let mut sum = 0.0;
        for a in 0..instance.n_actions {
            if a == star.action_of(c) {
                continue;
            }
            let gap = instance.reward_mean(c, star.action_of(c)) - instance.reward_mean(c, a);
            if gap <= 0.0 {
                return Err(DesignError::DegenerateGap { context: c, action: a });
            }
            sum += 1.0 / (gap * gap);
        }
        best = best.max(2.0 / instance.nu[c] * sum);
    }
    Ok(best)
}

/// Policy and cost-sensitive disagreement coefficients, each a sup over the
/// finite grid of attained disagreement-mass / gap levels at or above eps0.
pub fn disagreement_coefficients(
    instance: &BanditInstance,
    class: &PolicyClass,
    eps0: f64,
) -> Result<(f64, f64), DesignError> {
    if !(eps0 > 0.0) {
        return Err(DesignError::InvalidArgument("eps0 must be positive".into()));
    }
    let values: Vec<f64> = class
        .policies
        .iter()
        .map(|p| crate::bandit::policy_value(instance, p))
        .collect();
    let best = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pistar = values
        .iter()
        .position(|&v| v == best)
        .expect("nonempty class");
    let star = &class.policies[pistar];

    let disagree_mass: Vec<f64> = class
        .policies
        .iter()
        .map(|p| {
            (0..instance.n_contexts)
                .filter(|&c| p.action_of(c) != star.action_of(c))
                .map(|c| instance.nu[c])
                .sum()
        })
        .collect();
    let gaps: Vec<f64> = values.iter().map(|&v| best - v).collect();

    let sup_ratio = |level_of: &dyn Fn(usize) -> f64| -> f64 {
        let mut candidates: Vec<f64> = (0..class.len())
            .filter(|&i| i != pistar)
            .map(level_of)
            .filter(|&l| l >= eps0)
            .collect();
        candidates.push(eps0);
        let mut sup = 0.0f64;
        for eps in candidates {
            let mass: f64 = (0..instance.n_contexts)
                .filter(|&c| {
                    (0..class.len()).any(|i| {
                        i != pistar
                            && level_of(i) <= eps
                            && class.policies[i].action_of(c) != star.action_of(c)
                    })
                })
                .map(|c| instance.nu[c])
                .sum();
            sup = sup.max(mass / eps);
        }
        sup
    };

    let c_pol = sup_ratio(&|i| disagree_mass[i]);
    let c_csc = sup_ratio(&|i| gaps[i]);
    Ok((c_pol, c_csc))
}

// ---------------------------------------------------------------------------
// Brute-force reference implementations (used by design-check and tests)
// ---------------------------------------------------------------------------

pub mod gridsearch {
    //! Grid-search references: independent of the closed forms and solvers
    //! they are used to check.

    use super::*;

    /// All compositions of `steps` unit cells into `dims` positive parts,
    /// as probability rows.
    fn simplex_grid(dims: usize, steps: usize) -> Vec<Vec<f64>> {
        fn rec(dims: usize, left: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if dims == 1 {
                if left >= 1 {
                    prefix.push(left);
                    out.push(prefix.clone());
                    prefix.pop();
                }
                return;
            }
            for take in 1..=left.saturating_sub(dims - 1) {
                prefix.push(take);
                rec(dims - 1, left - take, prefix, out);
                prefix.pop();
            }
        }
        let mut raw = Vec::new();
        rec(dims, steps, &mut Vec::new(), &mut raw);
        raw.into_iter()
            .map(|cells| cells.iter().map(|&m| m as f64 / steps as f64).collect())
            .collect()
    }

    /// Per-context brute minimum of sum_pi lambda_pi gamma_pi ||phi_pi -
    /// phi_pivot||^2: the objective is separable across contexts, so each
    /// context is minimized on its own simplex grid with one local
    /// refinement pass.
    pub fn min_sum_weighted_norms(
        class: &PolicyClass,
        support: &[usize],
        lambda: &[f64],
        gamma: &[f64],
        pivot: usize,
        contexts: &ContextWeights,
        n_actions: usize,
        steps: usize,
    ) -> f64 {
        let pivot_policy = &class.policies[pivot];
        let lg: Vec<f64> = lambda.iter().zip(gamma).map(|(l, g)| l * g).collect();
        let mut total = 0.0;
        for &(c, w) in &contexts.pairs {
            // coefficient per action: sum_k lg_k * t_a^{(c)}
            let coef: Vec<f64> = (0..n_actions)
                .map(|a| {
                    support
                        .iter()
                        .zip(&lg)
                        .map(|(&idx, &v)| {
                            v * crate::bandit::disagreement_entry(
                                &class.policies[idx],
                                pivot_policy,
                                c,
                                a,
                            )
                        })
                        .sum()
                })
                .collect();
            let objective = |row: &[f64]| -> f64 {
                coef.iter()
                    .zip(row)
                    .map(|(&k, &p)| if k > 0.0 { k / p.max(1e-300) } else { 0.0 })
                    .sum()
            };
            let mut best = f64::INFINITY;
            let mut best_row = vec![1.0 / n_actions as f64; n_actions];
            for row in simplex_grid(n_actions, steps) {
                let v = objective(&row);
                if v < best {
                    best = v;
                    best_row = row;
                }
            }
            // local pattern refinement: greedy pairwise mass transfers at
            // shrinking step sizes, staying on the simplex
            let mut h = 1.0 / steps as f64;
            for _ in 0..24 {
                let mut improved = false;
                for i in 0..n_actions {
                    for j in 0..n_actions {
                        if i == j || best_row[i] <= h {
                            continue;
                        }
                        let mut cand = best_row.clone();
                        cand[i] -= h;
                        cand[j] += h;
                        let v = objective(&cand);
                        if v < best {
                            best = v;
                            best_row = cand;
                            improved = true;
                        }
                    }
                }
                if !improved {
                    h /= 2.0;
                    if h < 1e-7 {
                        break;
                    }
                }
            }
            total += w * best;
        }
        total
    }

    /// Full product-grid minimization of the combinatorial rho objective;
    /// only feasible for tiny instances (used for 1-2 context examples).
    pub fn rho_grid(
        instance: &BanditInstance,
        class: &PolicyClass,
        epsilon: f64,
        steps: usize,
    ) -> Result<f64, DesignError> {
        let values: Vec<f64> = class
            .policies
            .iter()
            .map(|p| crate::bandit::policy_value(instance, p))
            .collect();
        let pistar = unique_optimum(&values)?;
        if class.len() == 1 {
            return Ok(0.0);
        }
        let grids: Vec<Vec<Vec<f64>>> = (0..instance.n_contexts)
            .map(|_| simplex_grid(instance.n_actions, steps))
            .collect();
        let mut indices = vec![0usize; instance.n_contexts];
        let mut best = f64::INFINITY;
        loop {
            let rows: Vec<Vec<f64>> = indices
                .iter()
                .enumerate()
                .map(|(c, &i)| grids[c][i].clone())
                .collect();
            let mut fmax = 0.0f64;
            for (i, pi) in class.policies.iter().enumerate() {
                if i == pistar {
                    continue;
                }
                let mut acc = 0.0;
                for c in 0..instance.n_contexts {
                    let a_pi = pi.action_of(c);
                    let a_star = class.policies[pistar].action_of(c);
                    if a_pi != a_star {
                        acc += instance.nu[c] * (1.0 / rows[c][a_pi] + 1.0 / rows[c][a_star]);
                    }
                }
                let denom = (values[pistar] - values[i]).max(epsilon).powi(2);
                fmax = fmax.max(acc / denom);
            }
            best = best.min(fmax);
            // advance mixed-radix counter
            let mut pos = 0;
            loop {
                if pos == indices.len() {
                    return Ok(best);
                }
                indices[pos] += 1;
                if indices[pos] < grids[pos].len() {
                    break;
                }
                indices[pos] = 0;
                pos += 1;
            }
        }
    }
}

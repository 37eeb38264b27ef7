//! Bandit instances, policy classes, feature maps, and exact evaluation.
//!
//! Everything here is finite and immutable after construction: contexts and
//! actions are integer ranges, the context distribution and reward table are
//! validated once, and policies are dense context→action arrays. Simulation
//! state lives in the caller's RNG, never in these types.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BanditError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("policy class size {size} exceeds cap {cap}")]
    SizeLimit { size: f64, cap: f64 },
    #[error("realizability violated at (c={context}, a={action}): |r - <phi,theta>| = {error:.3e}")]
    NotRealizable {
        context: usize,
        action: usize,
        error: f64,
    },
}

/// Observation noise applied on top of the mean reward table.
///
/// `GaussianClipped` adds N(0, sigma^2) and clamps to [0,1]; the clamp biases
/// the observed mean when r(c,a) is within a few sigma of the boundary, so
/// keep sigma small (<= 0.25) or use means well inside the interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum NoiseModel {
    Bernoulli,
    GaussianClipped { sigma: f64 },
}

/// A finite stochastic contextual bandit: contexts 0..n_contexts, actions
/// 0..n_actions, context distribution `nu`, mean rewards `r(c,a)` in [0,1].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BanditInstance {
    pub n_contexts: usize,
    pub n_actions: usize,
    /// Probability of each context; sums to 1.
    pub nu: Vec<f64>,
    /// Row-major table: rewards[c * n_actions + a].
    pub mean_reward: Vec<f64>,
    pub noise: NoiseModel,
    pub rng_seed: u64,
}

impl BanditInstance {
    pub fn new(
        nu: Vec<f64>,
        n_actions: usize,
        mean_reward: Vec<f64>,
        noise: NoiseModel,
        rng_seed: u64,
    ) -> Result<Self, BanditError> {
        let n_contexts = nu.len();
        if n_contexts == 0 || n_actions == 0 {
            return Err(BanditError::InvalidArgument(
                "need at least one context and one action".into(),
            ));
        }
        if mean_reward.len() != n_contexts * n_actions {
            return Err(BanditError::InvalidArgument(format!(
                "reward table has {} entries, expected {}",
                mean_reward.len(),
                n_contexts * n_actions
            )));
        }
        let total: f64 = nu.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(BanditError::InvalidArgument(format!(
                "context distribution sums to {total}, expected 1 within 1e-12"
            )));
        }
        if nu.iter().any(|&p| !(p >= 0.0)) {
            return Err(BanditError::InvalidArgument(
                "context probabilities must be nonnegative".into(),
            ));
        }
        if mean_reward.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(BanditError::InvalidArgument(
                "mean rewards must lie in [0,1]".into(),
            ));
        }
        if let NoiseModel::GaussianClipped { sigma } = noise {
            if !(sigma > 0.0) {
                return Err(BanditError::InvalidArgument(
                    "gaussian sigma must be positive".into(),
                ));
            }
        }
        Ok(Self {
            n_contexts,
            n_actions,
            nu,
            mean_reward,
            noise,
            rng_seed,
        })
    }

    #[inline]
    pub fn reward_mean(&self, context: usize, action: usize) -> f64 {
        self.mean_reward[context * self.n_actions + action]
    }

    /// Best action per context with lowest-index tie-breaking.
    pub fn greedy_policy(&self) -> Policy {
        let actions = (0..self.n_contexts)
            .map(|c| {
                let mut best = 0usize;
                for a in 1..self.n_actions {
                    if self.reward_mean(c, a) > self.reward_mean(c, best) {
                        best = a;
                    }
                }
                best
            })
            .collect();
        Policy { actions }
    }

    pub fn draw_context<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (c, &p) in self.nu.iter().enumerate() {
            acc += p;
            if u < acc {
                return c;
            }
        }
        self.n_contexts - 1
    }

    pub fn draw_reward<R: Rng>(&self, context: usize, action: usize, rng: &mut R) -> f64 {
        let mean = self.reward_mean(context, action);
        match self.noise {
            NoiseModel::Bernoulli => {
                if rng.gen::<f64>() < mean {
                    1.0
                } else {
                    0.0
                }
            }
            NoiseModel::GaussianClipped { sigma } => {
                let normal = Normal::new(mean, sigma).expect("validated sigma");
                normal.sample(rng).clamp(0.0, 1.0)
            }
        }
    }
}

/// A deterministic map from contexts to actions, stored densely.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Policy {
    pub actions: Vec<usize>,
}

impl Policy {
    pub fn new(actions: Vec<usize>) -> Self {
        Self { actions }
    }

    #[inline]
    pub fn action_of(&self, context: usize) -> usize {
        self.actions[context]
    }
}

/// Feature map phi: (c,a) -> R^d stored as a dense table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMap {
    pub dim: usize,
    n_contexts: usize,
    n_actions: usize,
    /// Row-major: table[(c * n_actions + a) * dim ..][..dim]
    table: Vec<f64>,
}

impl FeatureMap {
    pub fn from_table(
        n_contexts: usize,
        n_actions: usize,
        dim: usize,
        table: Vec<f64>,
    ) -> Result<Self, BanditError> {
        if table.len() != n_contexts * n_actions * dim {
            return Err(BanditError::InvalidArgument(format!(
                "feature table has {} entries, expected {}",
                table.len(),
                n_contexts * n_actions * dim
            )));
        }
        Ok(Self {
            dim,
            n_contexts,
            n_actions,
            table,
        })
    }

    #[inline]
    pub fn phi(&self, context: usize, action: usize) -> &[f64] {
        let start = (context * self.n_actions + action) * self.dim;
        &self.table[start..start + self.dim]
    }

    pub fn n_contexts(&self) -> usize {
        self.n_contexts
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    /// True if this is exactly the one-hot map produced by [`one_hot_feature_map`].
    pub fn is_one_hot(&self) -> bool {
        if self.dim != self.n_contexts * self.n_actions {
            return false;
        }
        for c in 0..self.n_contexts {
            for a in 0..self.n_actions {
                let row = self.phi(c, a);
                for (i, &v) in row.iter().enumerate() {
                    let want = if i == c * self.n_actions + a { 1.0 } else { 0.0 };
                    if v != want {
                        return false;
                    }
                }
            }
        }
        true
    }
}

/// A finite set of deterministic policies, optionally with features and a
/// realizable parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyClass {
    pub policies: Vec<Policy>,
    pub feature_map: Option<FeatureMap>,
    pub theta_star: Option<Vec<f64>>,
}

impl PolicyClass {
    /// Deduplicates identical action maps, keeping the first occurrence.
    pub fn new(policies: Vec<Policy>) -> Self {
        let mut seen = std::collections::BTreeSet::new();
        let mut kept = Vec::with_capacity(policies.len());
        for p in policies {
            if seen.insert(p.actions.clone()) {
                kept.push(p);
            }
        }
        Self {
            policies: kept,
            feature_map: None,
            theta_star: None,
        }
    }

    pub fn with_features(mut self, feature_map: FeatureMap) -> Self {
        self.feature_map = Some(feature_map);
        self
    }

    /// Attaches (phi, theta*) and checks r(c,a) = <phi(c,a), theta*> within 1e-9.
    pub fn realizable(
        policies: Vec<Policy>,
        feature_map: FeatureMap,
        theta_star: Vec<f64>,
        instance: &BanditInstance,
    ) -> Result<Self, BanditError> {
        if theta_star.len() != feature_map.dim {
            return Err(BanditError::InvalidArgument(format!(
                "theta has dimension {}, feature map has {}",
                theta_star.len(),
                feature_map.dim
            )));
        }
        for c in 0..instance.n_contexts {
            for a in 0..instance.n_actions {
                let pred: f64 = feature_map
                    .phi(c, a)
                    .iter()
                    .zip(&theta_star)
                    .map(|(x, t)| x * t)
                    .sum();
                let err = (pred - instance.reward_mean(c, a)).abs();
                if err > 1e-9 {
                    return Err(BanditError::NotRealizable {
                        context: c,
                        action: a,
                        error: err,
                    });
                }
            }
        }
        let mut class = Self::new(policies);
        class.feature_map = Some(feature_map);
        class.theta_star = Some(theta_star);
        Ok(class)
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    /// phi_pi = E_{c~nu}[phi(c, pi(c))] for one policy.
    pub fn policy_embedding(&self, instance: &BanditInstance, policy: &Policy) -> Vec<f64> {
        let fm = self
            .feature_map
            .as_ref()
            .expect("policy_embedding requires a feature map");
        let mut out = vec![0.0; fm.dim];
        for c in 0..instance.n_contexts {
            let nu_c = instance.nu[c];
            for (o, x) in out.iter_mut().zip(fm.phi(c, policy.action_of(c))) {
                *o += nu_c * x;
            }
        }
        out
    }

    /// Embeddings for every policy in class order.
    pub fn embeddings(&self, instance: &BanditInstance) -> Vec<Vec<f64>> {
        self.policies
            .iter()
            .map(|p| self.policy_embedding(instance, p))
            .collect()
    }
}

/// The m-context two-action family on which low-regret algorithms pay a
/// near-quadratic PAC penalty: pi_i plays action 1 exactly at context i,
/// r(i,j) = gap * 1{j = pi_1(i)}, nu uniform. Policy 0 is optimal with value
/// `gap`; every other policy has value gap*(1 - 2/m).
pub fn make_hard_instance(
    m: usize,
    delta_gap: f64,
    noise: NoiseModel,
    rng_seed: u64,
) -> Result<(BanditInstance, PolicyClass), BanditError> {
    if m < 2 {
        return Err(BanditError::InvalidArgument(format!(
            "hard instance needs m >= 2, got {m}"
        )));
    }
    if !(delta_gap > 0.0 && delta_gap <= 1.0) {
        return Err(BanditError::InvalidArgument(format!(
            "hard instance needs gap in (0,1], got {delta_gap}"
        )));
    }
    let n_actions = 2;
    let nu = vec![1.0 / m as f64; m];
    let mut rewards = vec![0.0; m * n_actions];
    let pi1_action = |c: usize| usize::from(c == 0);
    for (c, chunk) in rewards.chunks_mut(n_actions).enumerate() {
        chunk[pi1_action(c)] = delta_gap;
    }
    let instance = BanditInstance::new(nu, n_actions, rewards, noise, rng_seed)?;
    let policies = (0..m)
        .map(|i| Policy::new((0..m).map(|j| usize::from(i == j)).collect()))
        .collect();
    Ok((instance, PolicyClass::new(policies)))
}

pub const TRIVIAL_CLASS_DEFAULT_CAP: f64 = 1e6;

/// All |A|^|C| deterministic policies, enumerated in lexicographic order of
/// their action maps.
pub fn make_trivial_class(instance: &BanditInstance) -> Result<PolicyClass, BanditError> {
    make_trivial_class_capped(instance, TRIVIAL_CLASS_DEFAULT_CAP)
}

pub fn make_trivial_class_capped(
    instance: &BanditInstance,
    cap: f64,
) -> Result<PolicyClass, BanditError> {
    let size = (instance.n_actions as f64).powi(instance.n_contexts as i32);
    if size > cap {
        return Err(BanditError::SizeLimit { size, cap });
    }
    let count = size as usize;
    let mut policies = Vec::with_capacity(count);
    for mut idx in 0..count {
        let mut actions = vec![0usize; instance.n_contexts];
        for slot in actions.iter_mut().rev() {
            *slot = idx % instance.n_actions;
            idx /= instance.n_actions;
        }
        policies.push(Policy::new(actions));
    }
    Ok(PolicyClass::new(policies))
}

/// phi(c,a) = indicator of coordinate c*|A|+a. With theta*[(c,a)] = r(c,a)
/// any class over this instance is realizable.
pub fn one_hot_feature_map(instance: &BanditInstance) -> FeatureMap {
    let dim = instance.n_contexts * instance.n_actions;
    let mut table = vec![0.0; dim * dim];
    for i in 0..dim {
        table[i * dim + i] = 1.0;
    }
    FeatureMap::from_table(instance.n_contexts, instance.n_actions, dim, table)
        .expect("square indicator table")
}

/// V(pi) = E_{c~nu}[r(c, pi(c))], computed exactly.
pub fn policy_value(instance: &BanditInstance, policy: &Policy) -> f64 {
    (0..instance.n_contexts)
        .map(|c| instance.nu[c] * instance.reward_mean(c, policy.action_of(c)))
        .sum()
}

/// Per-policy disagreement indicator
/// `[t_a^{(c)}(pivot)]_pi = 1{pi(c)=a, pivot(c)!=a} + 1{pi(c)!=a, pivot(c)=a}`.
pub fn disagreement_vector(
    class: &PolicyClass,
    context: usize,
    action: usize,
    pivot: &Policy,
) -> Vec<f64> {
    class
        .policies
        .iter()
        .map(|pi| disagreement_entry(pi, pivot, context, action))
        .collect()
}

#[inline]
pub fn disagreement_entry(pi: &Policy, pivot: &Policy, context: usize, action: usize) -> f64 {
    let pa = pi.action_of(context);
    let va = pivot.action_of(context);
    if (pa == action) != (va == action) {
        1.0
    } else {
        0.0
    }
}

/// How the learner picks an action on an arriving context.
pub enum ActionRule<'a> {
    Follow(&'a Policy),
    /// Per-context probability rows over actions.
    Randomize(&'a [Vec<f64>]),
}

/// One environment interaction: c ~ nu, a from the rule, r from the noise
/// model. Returns (context, action, reward).
pub fn sample_interaction<R: Rng>(
    instance: &BanditInstance,
    rule: &ActionRule<'_>,
    rng: &mut R,
) -> Result<(usize, usize, f64), BanditError> {
    let c = instance.draw_context(rng);
    let a = match rule {
        ActionRule::Follow(policy) => policy.action_of(c),
        ActionRule::Randomize(rows) => {
            let row = &rows[c];
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(BanditError::InvalidArgument(format!(
                    "allocation row for context {c} is not a probability distribution (sum {total})"
                )));
            }
            draw_from_row(row, rng)
        }
    };
    let r = instance.draw_reward(c, a, rng);
    Ok((c, a, r))
}

#[inline]
pub fn draw_from_row<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    row.len() - 1
}

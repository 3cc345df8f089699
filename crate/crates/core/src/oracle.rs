//! Synthetic population with ground-truth utilities, standing in for human
//! participants, and the choice simulator that draws from it.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{ChoiceEvent, ChoiceLog, ItemCatalog, ItemId, Slate, UserId, UserSplit};
use crate::error::{Error, Result};
use crate::rng::RngHandle;

/// Ground-truth utilities `intercept[i] + <user_factors[u], item_factors[i]>`.
/// Factor matrices are stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPopulation {
    n_users: usize,
    n_items: usize,
    dim: usize,
    user_factors: Vec<f64>,
    item_factors: Vec<f64>,
    item_intercepts: Vec<f64>,
}

/// Standard deviations used by [`sample_population_with`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationScales {
    pub factor_sd: f64,
    pub intercept_sd: f64,
}

impl PopulationScales {
    pub fn for_dim(dim: usize) -> Self {
        PopulationScales {
            factor_sd: 1.0 / (dim as f64).sqrt(),
            intercept_sd: 0.5,
        }
    }
}

impl LatentPopulation {
    pub fn from_parts(
        dim: usize,
        user_factors: Vec<Vec<f64>>,
        item_factors: Vec<Vec<f64>>,
        item_intercepts: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("population dimension must be at least 1"));
        }
        let n_users = user_factors.len();
        let n_items = item_factors.len();
        if item_intercepts.len() != n_items {
            return Err(Error::config("intercept count does not match item count"));
        }
        if user_factors.iter().chain(&item_factors).any(|row| row.len() != dim) {
            return Err(Error::config(format!("factor rows must have length {dim}")));
        }
        let pop = LatentPopulation {
            n_users,
            n_items,
            dim,
            user_factors: user_factors.concat(),
            item_factors: item_factors.concat(),
            item_intercepts,
        };
        pop.check_finite()?;
        Ok(pop)
    }

    fn check_finite(&self) -> Result<()> {
        let all_finite = self
            .user_factors
            .iter()
            .chain(&self.item_factors)
            .chain(&self.item_intercepts)
            .all(|v| v.is_finite());
        if all_finite {
            Ok(())
        } else {
            Err(Error::Internal("population contains non-finite entries".into()))
        }
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn user_factor(&self, user: UserId) -> &[f64] {
        &self.user_factors[user * self.dim..(user + 1) * self.dim]
    }

    pub fn item_factor(&self, item: ItemId) -> &[f64] {
        &self.item_factors[item * self.dim..(item + 1) * self.dim]
    }

    pub fn intercept(&self, item: ItemId) -> f64 {
        self.item_intercepts[item]
    }

    /// Copy whose `item` has a NaN intercept; used to poison a repetition.
    pub(crate) fn with_nan_item(&self, item: ItemId) -> Self {
        let mut out = self.clone();
        out.item_intercepts[item] = f64::NAN;
        out
    }

    pub fn true_utility(&self, user: UserId, item: ItemId) -> f64 {
        let dot: f64 = self
            .user_factor(user)
            .iter()
            .zip(self.item_factor(item))
            .map(|(a, b)| a * b)
            .sum();
        self.item_intercepts[item] + dot
    }

    /// Mean true utility of every item over the given users.
    pub fn mean_utility(&self, users: &[UserId]) -> Vec<f64> {
        let mut mean_user = vec![0.0; self.dim];
        for &u in users {
            for (m, x) in mean_user.iter_mut().zip(self.user_factor(u)) {
                *m += x;
            }
        }
        let n = users.len().max(1) as f64;
        mean_user.iter_mut().for_each(|m| *m /= n);
        (0..self.n_items)
            .map(|i| {
                self.item_intercepts[i]
                    + mean_user
                        .iter()
                        .zip(self.item_factor(i))
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect()
    }

    pub fn to_dump(&self) -> PopulationDump {
        PopulationDump {
            dim: self.dim,
            user_factors: self.user_factors.chunks(self.dim).map(<[f64]>::to_vec).collect(),
            item_factors: self.item_factors.chunks(self.dim).map(<[f64]>::to_vec).collect(),
            item_intercepts: self.item_intercepts.clone(),
        }
    }
}

/// Audit view of a population: matrices as nested arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PopulationDump {
    pub dim: usize,
    pub user_factors: Vec<Vec<f64>>,
    pub item_factors: Vec<Vec<f64>>,
    pub item_intercepts: Vec<f64>,
}

impl TryFrom<PopulationDump> for LatentPopulation {
    type Error = Error;

    fn try_from(d: PopulationDump) -> Result<Self> {
        LatentPopulation::from_parts(d.dim, d.user_factors, d.item_factors, d.item_intercepts)
    }
}

/// Factors i.i.d. normal with standard deviation `1/sqrt(dim)`, intercepts
/// i.i.d. normal with standard deviation 0.5.
pub fn sample_population(n_users: usize, n_items: usize, dim: usize, rng: RngHandle) -> Result<LatentPopulation> {
    sample_population_with(n_users, n_items, dim, PopulationScales::for_dim(dim), rng)
}

pub fn sample_population_with(
    n_users: usize,
    n_items: usize,
    dim: usize,
    scales: PopulationScales,
    rng: RngHandle,
) -> Result<LatentPopulation> {
    if dim == 0 {
        return Err(Error::config("population dimension must be at least 1"));
    }
    if n_users == 0 || n_items == 0 {
        return Err(Error::config("population needs at least one user and one item"));
    }
    let invalid = |sd: f64| !(sd.is_finite() && sd >= 0.0);
    if invalid(scales.factor_sd) || invalid(scales.intercept_sd) {
        return Err(Error::config("population scales must be finite and non-negative"));
    }
    let mut rng = rng.rng();
    let mut draw = |n: usize, sd: f64| -> Vec<f64> {
        let normal = Normal::new(0.0, sd).expect("validated sd");
        (0..n).map(|_| normal.sample(&mut rng)).collect()
    };
    let user_factors = draw(n_users * dim, scales.factor_sd);
    let item_factors = draw(n_items * dim, scales.factor_sd);
    let item_intercepts = draw(n_items, scales.intercept_sd);
    Ok(LatentPopulation {
        n_users,
        n_items,
        dim,
        user_factors,
        item_factors,
        item_intercepts,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    Mnl,
    Context,
}

/// How simulated users choose from a slate.
///
/// `Mnl` is a softmax over true utilities. `Context` first moves each utility
/// away from the slate mean by `strength * d * |d|` with `d = v - mean`, which
/// sharpens large deviations more than small ones and so makes probability
/// ratios depend on the rest of the slate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSpec {
    pub kind: BehaviorKind,
    #[serde(default = "default_context_strength")]
    pub context_strength: f64,
}

fn default_context_strength() -> f64 {
    0.3
}

impl Default for BehaviorSpec {
    fn default() -> Self {
        BehaviorSpec::mnl()
    }
}

impl BehaviorSpec {
    pub fn mnl() -> Self {
        BehaviorSpec {
            kind: BehaviorKind::Mnl,
            context_strength: default_context_strength(),
        }
    }

    pub fn context(strength: f64) -> Self {
        BehaviorSpec {
            kind: BehaviorKind::Context,
            context_strength: strength,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.context_strength.is_finite() && self.context_strength >= 0.0) {
            return Err(Error::config(format!(
                "context_strength must be finite and >= 0, got {}",
                self.context_strength
            )));
        }
        Ok(())
    }
}

/// Choice probabilities for a slate with the given true utilities.
pub fn probabilities_from_utilities(utilities: &[f64], behavior: &BehaviorSpec) -> Result<Vec<f64>> {
    if utilities.is_empty() {
        return Err(Error::contract("empty slate"));
    }
    if utilities.iter().any(|v| !v.is_finite()) {
        return Err(Error::Internal(format!("non-finite utility in {utilities:?}")));
    }
    let mut v = utilities.to_vec();
    if behavior.kind == BehaviorKind::Context && behavior.context_strength > 0.0 {
        let mean = utilities.iter().sum::<f64>() / utilities.len() as f64;
        for x in v.iter_mut() {
            let d = *x - mean;
            *x += behavior.context_strength * d * d.abs();
        }
    }
    Ok(softmax(&v))
}

pub(crate) fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= z);
    p
}

pub fn choice_distribution(
    pop: &LatentPopulation,
    user: UserId,
    slate: &Slate,
    behavior: &BehaviorSpec,
) -> Result<Vec<f64>> {
    if user >= pop.n_users {
        return Err(Error::contract(format!("user {user} outside population")));
    }
    if let Some(&bad) = slate.items.iter().find(|&&i| i >= pop.n_items) {
        return Err(Error::contract(format!("item {bad} outside population")));
    }
    let utilities: Vec<f64> = slate.items.iter().map(|&i| pop.true_utility(user, i)).collect();
    probabilities_from_utilities(&utilities, behavior)
}

/// Draws an index from a probability vector.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return k;
        }
    }
    probs.len() - 1
}

/// Simulates one choice per slate, in session order.
pub fn simulate_choices(
    pop: &LatentPopulation,
    sessions: &[(UserId, Vec<Slate>)],
    behavior: &BehaviorSpec,
    catalog: Arc<ItemCatalog>,
    split: Arc<UserSplit>,
    rng: RngHandle,
) -> Result<ChoiceLog> {
    behavior.validate()?;
    let mut rng = rng.rng();
    let mut events = Vec::with_capacity(sessions.iter().map(|(_, s)| s.len()).sum());
    for (user, slates) in sessions {
        for slate in slates {
            slate.validate(&catalog)?;
            let probs = choice_distribution(pop, *user, slate, behavior)?;
            let chosen = sample_index(&probs, &mut rng);
            events.push(ChoiceEvent::new(*user, slate.clone(), chosen)?);
        }
    }
    ChoiceLog::new(events, catalog, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::PolicyKind;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    // Direct transcription of the context formula, kept apart from the
    // implementation path.
    fn reference_context(v: &[f64], lambda: f64) -> Vec<f64> {
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let w: Vec<f64> = v
            .iter()
            .map(|&x| {
                let d = x - mean;
                (x + lambda * d * d.abs()).exp()
            })
            .collect();
        let z: f64 = w.iter().sum();
        w.iter().map(|x| x / z).collect()
    }

    #[test]
    fn population_shapes_and_determinism() {
        let h = RngHandle::new(5, 0);
        let pop = sample_population(300, 100, 8, h).unwrap();
        assert_eq!((pop.n_users(), pop.n_items(), pop.dim()), (300, 100, 8));
        assert!(pop.user_factors.len() == 2400 && pop.item_factors.len() == 800);
        pop.check_finite().unwrap();
        assert_eq!(pop, sample_population(300, 100, 8, h).unwrap());
    }

    #[test]
    fn zero_factor_scale_leaves_intercepts() {
        let scales = PopulationScales {
            factor_sd: 0.0,
            intercept_sd: 0.5,
        };
        let pop = sample_population_with(4, 6, 1, scales, RngHandle::new(1, 1)).unwrap();
        for u in 0..4 {
            for i in 0..6 {
                assert_eq!(pop.true_utility(u, i), pop.intercept(i));
            }
        }
    }

    #[test]
    fn uniform_and_closed_form_softmax() {
        let p = probabilities_from_utilities(&[0.3; 4], &BehaviorSpec::mnl()).unwrap();
        assert_close(&p, &[0.25; 4], 1e-15);
        let p = probabilities_from_utilities(&[2f64.ln(), 0.0, 0.0, 0.0], &BehaviorSpec::mnl()).unwrap();
        assert_close(&p, &[0.4, 0.2, 0.2, 0.2], 1e-15);
    }

    #[test]
    fn context_matches_reference() {
        let v = [1.0, 0.5, 0.0, -0.5];
        let p = probabilities_from_utilities(&v, &BehaviorSpec::context(0.3)).unwrap();
        assert_close(&p, &reference_context(&v, 0.3), 1e-14);
        // frozen from an offline numpy evaluation
        assert_close(&p, &[0.5034629409876673, 0.2628307020982924, 0.15354752168583144, 0.08015883522820884], 1e-12);
        let p0 = probabilities_from_utilities(&v, &BehaviorSpec::context(0.0)).unwrap();
        let mnl = probabilities_from_utilities(&v, &BehaviorSpec::mnl()).unwrap();
        assert_close(&p0, &mnl, 1e-15);
    }

    #[test]
    fn non_finite_utility_is_internal_error() {
        let err = probabilities_from_utilities(&[f64::NAN, 0.0], &BehaviorSpec::mnl()).unwrap_err();
        assert!(matches!(err, Error::Internal(_)));
    }

    #[test]
    fn extreme_utilities_do_not_overflow() {
        let p = probabilities_from_utilities(&[800.0, 0.0, -800.0], &BehaviorSpec::mnl()).unwrap();
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    fn dominant_population() -> (LatentPopulation, Arc<ItemCatalog>, Arc<UserSplit>) {
        let pop = LatentPopulation::from_parts(
            1,
            vec![vec![0.0], vec![0.0]],
            vec![vec![0.0]; 8],
            vec![0.0, 0.0, 0.0, 0.0, 10.0, -10.0, -10.0, -10.0],
        )
        .unwrap();
        let catalog = Arc::new(ItemCatalog::from_parts(8, vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![4]).unwrap());
        let split = Arc::new(UserSplit::from_parts(2, vec![0], vec![1]).unwrap());
        (pop, catalog, split)
    }

    #[test]
    fn dominant_item_is_chosen() {
        let (pop, catalog, split) = dominant_population();
        let slate = Slate::new(vec![4, 5, 6, 7], PolicyKind::UniformB);
        let sessions = vec![(0, vec![slate; 10_000])];
        let log = simulate_choices(&pop, &sessions, &BehaviorSpec::mnl(), catalog, split, RngHandle::new(9, 9)).unwrap();
        let hits = log.events.iter().filter(|e| e.chosen_index == 0).count();
        assert!(hits as f64 / 10_000.0 >= 0.999);
    }

    #[test]
    fn empty_sessions_give_empty_log() {
        let (pop, catalog, split) = dominant_population();
        let log = simulate_choices(&pop, &[], &BehaviorSpec::mnl(), catalog.clone(), split.clone(), RngHandle::new(0, 0)).unwrap();
        assert!(log.is_empty());
        let log = simulate_choices(&pop, &[(1, vec![])], &BehaviorSpec::mnl(), catalog, split, RngHandle::new(0, 0)).unwrap();
        assert!(log.is_empty());
    }

    #[test]
    fn simulation_is_deterministic() {
        let pop = sample_population(2, 8, 2, RngHandle::new(1, 2)).unwrap();
        let catalog = Arc::new(ItemCatalog::from_parts(8, vec![0, 1, 2, 3], vec![4, 5, 6, 7], vec![4]).unwrap());
        let split = Arc::new(UserSplit::from_parts(2, vec![0], vec![1]).unwrap());
        let slate = Slate::new(vec![4, 5, 6, 7], PolicyKind::UniformB);
        let sessions = vec![(0, vec![slate.clone(); 50]), (1, vec![slate; 50])];
        let run = || {
            simulate_choices(&pop, &sessions, &BehaviorSpec::mnl(), catalog.clone(), split.clone(), RngHandle::new(4, 4))
                .unwrap()
                .events
        };
        assert_eq!(run(), run());
    }
}

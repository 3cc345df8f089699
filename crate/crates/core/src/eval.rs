//! Rank-shift bias between pair members, chance correction from null pairs,
//! and nDCG against ground-truth relevance.

use serde::{Deserialize, Serialize};

use crate::design::{build_null_pair, training_view, DatasetPair, PairSettings};
use crate::domain::{ItemCatalog, ItemId, UserId, UserSplit};
use crate::error::{Error, Result};
use crate::models::{predict_ranking, ModelKind, ModelParams, NestStructure};
use crate::oracle::{BehaviorSpec, LatentPopulation};
use crate::rng::{purpose, streams, RngHandle};
use crate::stats::{bootstrap_ci, bootstrap_diff_ci, mean, sign_test};
use crate::train::{fit_with_streams, FitStreams, HyperParams, ModelShape, TrainedModel};

/// Number of top true-utility set_b items counted as relevant.
pub const N_RELEVANT: usize = 5;
pub const DEFAULT_NDCG_K: usize = 10;

/// Rank (1 = best) of every set_b item for every evaluation user.
#[derive(Clone, Debug, PartialEq)]
pub struct RankTable {
    pub items: Vec<ItemId>,
    pub users: Vec<UserId>,
    ranks: Vec<u32>,
    position: Vec<Option<usize>>,
}

impl RankTable {
    pub fn build(params: &ModelParams, split: &UserSplit, catalog: &ItemCatalog) -> Self {
        let items = catalog.set_b.clone();
        let mut position = vec![None; catalog.n_items];
        for (p, &i) in items.iter().enumerate() {
            position[i] = Some(p);
        }
        let mut ranks = vec![0u32; split.eval_users.len() * items.len()];
        for (row, &u) in split.eval_users.iter().enumerate() {
            let ranking = predict_ranking(params, u, &items);
            let out = &mut ranks[row * items.len()..(row + 1) * items.len()];
            for (r, i) in ranking.into_iter().enumerate() {
                out[position[i].expect("ranking over set_b")] = r as u32 + 1;
            }
        }
        RankTable {
            items,
            users: split.eval_users.clone(),
            ranks,
            position,
        }
    }

    /// Ranks of user row `row`, aligned with `items`.
    pub fn row(&self, row: usize) -> &[u32] {
        &self.ranks[row * self.items.len()..(row + 1) * self.items.len()]
    }

    pub fn rank(&self, row: usize, item: ItemId) -> Option<u32> {
        let p = (*self.position.get(item)?)?;
        Some(self.row(row)[p])
    }

    /// Mean rank per item over users, aligned with `items`.
    pub fn mean_ranks(&self) -> Vec<f64> {
        let n = self.items.len();
        let mut sums = vec![0.0; n];
        for row in 0..self.users.len() {
            for (s, &r) in sums.iter_mut().zip(self.row(row)) {
                *s += r as f64;
            }
        }
        let m = self.users.len().max(1) as f64;
        sums.into_iter().map(|s| s / m).collect()
    }
}

/// Mean rank of each set_b item across evaluation users.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanRanks {
    pub items: Vec<ItemId>,
    pub ranks: Vec<f64>,
    position: Vec<Option<usize>>,
}

impl MeanRanks {
    pub fn get(&self, item: ItemId) -> Option<f64> {
        let p = (*self.position.get(item)?)?;
        Some(self.ranks[p])
    }
}

pub fn mean_eval_rank(model: &TrainedModel, split: &UserSplit, catalog: &ItemCatalog) -> MeanRanks {
    let table = RankTable::build(&model.params, split, catalog);
    MeanRanks {
        ranks: table.mean_ranks(),
        items: table.items,
        position: table.position,
    }
}

/// Training streams for the two members of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairStreams {
    pub treated: FitStreams,
    pub control: FitStreams,
}

impl PairStreams {
    /// Shared initialization, member-specific sampling.
    pub fn derive(rng: RngHandle) -> Self {
        let init = rng.child(purpose::INIT);
        PairStreams {
            treated: FitStreams {
                init,
                sampling: rng.child(purpose::TREATED).child(purpose::SAMPLING),
            },
            control: FitStreams {
                init,
                sampling: rng.child(purpose::CONTROL).child(purpose::SAMPLING),
            },
        }
    }

    /// Both members train with identical streams.
    pub fn shared(rng: RngHandle) -> Self {
        let s = FitStreams::from(rng);
        PairStreams { treated: s, control: s }
    }
}

#[derive(Clone, Debug)]
pub struct PairOutcome {
    pub kind: ModelKind,
    /// `mean_rank_control - mean_rank_treated`, aligned with the catalog's bias set.
    pub shifts: Vec<f64>,
    pub mean_shift: f64,
    pub treated: TrainedModel,
    pub control: TrainedModel,
}

pub fn pair_bias(
    kind: ModelKind,
    pair: &DatasetPair,
    split: &UserSplit,
    catalog: &ItemCatalog,
    hyper: &HyperParams,
    nests: &NestStructure,
    streams: PairStreams,
) -> Result<PairOutcome> {
    let shape = ModelShape {
        n_users: split.n_users(),
        n_items: catalog.n_items,
    };
    let treated = fit_with_streams(kind, &training_view(&pair.treated, split, catalog), shape, hyper, nests, streams.treated)?;
    let control = fit_with_streams(kind, &training_view(&pair.control, split, catalog), shape, hyper, nests, streams.control)?;
    let shifts = bias_shifts(&treated, &control, split, catalog)?;
    Ok(PairOutcome {
        kind,
        mean_shift: mean(&shifts),
        shifts,
        treated,
        control,
    })
}

/// Per-bias-item shift between two already trained member models.
pub fn bias_shifts(treated: &TrainedModel, control: &TrainedModel, split: &UserSplit, catalog: &ItemCatalog) -> Result<Vec<f64>> {
    let rt = mean_eval_rank(treated, split, catalog);
    let rc = mean_eval_rank(control, split, catalog);
    catalog
        .bias_set
        .iter()
        .map(|&i| match (rc.get(i), rt.get(i)) {
            (Some(c), Some(t)) => Ok(c - t),
            _ => Err(Error::Internal(format!("bias item {i} missing from set_b ranks"))),
        })
        .collect()
}

/// Mean shift of each of `n_null` null pairs, null pair `j` drawn from
/// stream `NULL_BASE + j` of `seed`. `null_bias` is their mean.
#[allow(clippy::too_many_arguments)]
pub fn null_shifts(
    kind: ModelKind,
    pop: &LatentPopulation,
    catalog: &std::sync::Arc<ItemCatalog>,
    split: &std::sync::Arc<UserSplit>,
    behavior: &BehaviorSpec,
    settings: &PairSettings,
    hyper: &HyperParams,
    nests: &NestStructure,
    seed: u64,
    n_null: usize,
) -> Result<Vec<f64>> {
    if n_null == 0 {
        return Err(Error::contract("null_bias needs at least one null pair"));
    }
    (0..n_null)
        .map(|j| {
            let rng = RngHandle::new(seed, streams::NULL_BASE + j as u64);
            let pair = build_null_pair(pop, catalog, split, behavior, settings, false, rng)?;
            Ok(pair_bias(kind, &pair, split, catalog, hyper, nests, PairStreams::derive(rng.child(purpose::MODEL + kind.index() as u64)))?.mean_shift)
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn null_bias(
    kind: ModelKind,
    pop: &LatentPopulation,
    catalog: &std::sync::Arc<ItemCatalog>,
    split: &std::sync::Arc<UserSplit>,
    behavior: &BehaviorSpec,
    settings: &PairSettings,
    hyper: &HyperParams,
    nests: &NestStructure,
    seed: u64,
    n_null: usize,
) -> Result<f64> {
    Ok(mean(&null_shifts(kind, pop, catalog, split, behavior, settings, hyper, nests, seed, n_null)?))
}

/// Each evaluation user's top-`N_RELEVANT` set_b items by true utility.
#[derive(Clone, Debug, PartialEq)]
pub struct Relevance {
    users: Vec<UserId>,
    relevant: Vec<Vec<bool>>,
}

impl Relevance {
    pub fn from_population(pop: &LatentPopulation, split: &UserSplit, catalog: &ItemCatalog) -> Self {
        let relevant = split
            .eval_users
            .iter()
            .map(|&u| {
                let mut scored: Vec<(f64, ItemId)> = catalog.set_b.iter().map(|&i| (pop.true_utility(u, i), i)).collect();
                scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
                let mut row = vec![false; catalog.n_items];
                for &(_, i) in scored.iter().take(N_RELEVANT) {
                    row[i] = true;
                }
                row
            })
            .collect();
        Relevance {
            users: split.eval_users.clone(),
            relevant,
        }
    }

    pub fn ndcg(&self, params: &ModelParams, catalog: &ItemCatalog, k: usize) -> Result<f64> {
        if k == 0 || k > catalog.set_b.len() {
            return Err(Error::contract(format!("ndcg cutoff {k} outside 1..={}", catalog.set_b.len())));
        }
        let total: f64 = self
            .users
            .iter()
            .zip(&self.relevant)
            .map(|(&u, rel)| {
                let ranking = predict_ranking(params, u, &catalog.set_b);
                let n_rel = rel.iter().filter(|r| **r).count();
                ndcg_of_ranking(&ranking, |i| rel[i], n_rel, k)
            })
            .sum();
        Ok(total / self.users.len().max(1) as f64)
    }
}

/// Binary-relevance nDCG@k of one ranking with `n_relevant` relevant items in total.
pub fn ndcg_of_ranking(ranking: &[ItemId], is_relevant: impl Fn(ItemId) -> bool, n_relevant: usize, k: usize) -> f64 {
    let discount = |pos: usize| 1.0 / ((pos + 2) as f64).log2();
    let dcg: f64 = ranking.iter().take(k).enumerate().filter(|(_, &i)| is_relevant(i)).map(|(p, _)| discount(p)).sum();
    let ideal: f64 = (0..n_relevant.min(k)).map(discount).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

pub fn ndcg_at_k(model: &TrainedModel, pop: &LatentPopulation, split: &UserSplit, catalog: &ItemCatalog, k: usize) -> Result<f64> {
    Relevance::from_population(pop, split, catalog).ndcg(&model.params, catalog, k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub model: ModelKind,
    pub experiment: String,
    /// (bias item, mean shift over repetitions)
    pub item_shifts: Vec<(ItemId, f64)>,
    pub mean_bias: f64,
    pub null_bias: f64,
    pub corrected_bias: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub sign_test_p: f64,
    pub n_repetitions: usize,
}

impl BiasReport {
    /// `rep_shifts[r][b]` is repetition `r`'s shift for the `b`-th bias item;
    /// `null_shifts` holds the mean shift of each null pair. The interval
    /// resamples both.
    pub fn from_repetitions(
        model: ModelKind,
        experiment: &str,
        bias_set: &[ItemId],
        rep_shifts: &[Vec<f64>],
        null_shifts: &[f64],
        level: f64,
        rng: RngHandle,
    ) -> Result<Self> {
        if rep_shifts.iter().any(|s| s.len() != bias_set.len()) {
            return Err(Error::contract("shift vectors must align with the bias set"));
        }
        let per_rep: Vec<f64> = rep_shifts.iter().map(|s| mean(s)).collect();
        let item_shifts = bias_set
            .iter()
            .enumerate()
            .map(|(b, &i)| (i, mean(&rep_shifts.iter().map(|s| s[b]).collect::<Vec<_>>())))
            .collect();
        let mean_bias = mean(&per_rep);
        let null_bias = mean(null_shifts);
        let corrected_bias = mean_bias - null_bias;
        let (lo, hi) = bootstrap_diff_ci(&per_rep, null_shifts, level, rng)?;
        Ok(BiasReport {
            model,
            experiment: experiment.to_string(),
            item_shifts,
            mean_bias,
            null_bias,
            corrected_bias,
            ci_low: lo.min(corrected_bias),
            ci_high: hi.max(corrected_bias),
            sign_test_p: sign_test(&per_rep),
            n_repetitions: per_rep.len(),
        })
    }

    pub fn ci_excludes_zero(&self) -> bool {
        self.ci_low > 0.0 || self.ci_high < 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub model: ModelKind,
    pub experiment: String,
    pub member: String,
    pub k: usize,
    pub ndcg_at_k: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_repetitions: usize,
}

impl AccuracyReport {
    pub fn from_repetitions(model: ModelKind, experiment: &str, member: &str, k: usize, values: &[f64], level: f64, rng: RngHandle) -> Result<Self> {
        let m = mean(values);
        let (lo, hi) = bootstrap_ci(values, level, rng)?;
        Ok(AccuracyReport {
            model,
            experiment: experiment.to_string(),
            member: member.to_string(),
            k,
            ndcg_at_k: m,
            ci_low: lo.min(m),
            ci_high: hi.max(m),
            n_repetitions: values.len(),
        })
    }
}

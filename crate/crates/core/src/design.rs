//! Exposure policies, per-user session plans and dataset-pair compilation.
//!
//! A session for one user is a fixed sequence of policy blocks: a set_a block
//! shared by both pair members, followed by two set_b blocks. Choices for the
//! whole session are simulated once; the treated member keeps the set_a block
//! plus one set_b block and the control member keeps the set_a block plus the
//! other, so the two logs differ only in how set_b was exposed.

use std::fs;
use std::io::BufWriter;
use std::path::Path;
use std::sync::Arc;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{ChoiceEvent, ChoiceLog, ItemCatalog, ItemId, LogContext, PolicyKind, Slate, UserId, UserSplit};
use crate::error::{Error, Result};
use crate::oracle::{simulate_choices, BehaviorSpec, LatentPopulation};
use crate::rng::{purpose, RngHandle};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExposurePolicy {
    UniformA,
    UniformB,
    /// With probability `force_prob` the slate holds one uniformly chosen
    /// bias item; otherwise it is a plain uniform set_b slate.
    OverexposeBias { force_prob: f64 },
    /// One bias item plus competitors from the `quartile_size` most popular
    /// non-bias set_b items.
    CompetePopular { quartile_size: usize },
    CompeteUnpopular { quartile_size: usize },
}

impl ExposurePolicy {
    pub fn kind(&self) -> PolicyKind {
        match self {
            ExposurePolicy::UniformA => PolicyKind::UniformA,
            ExposurePolicy::UniformB => PolicyKind::UniformB,
            ExposurePolicy::OverexposeBias { .. } => PolicyKind::OverexposeBias,
            ExposurePolicy::CompetePopular { .. } => PolicyKind::CompetePopular,
            ExposurePolicy::CompeteUnpopular { .. } => PolicyKind::CompeteUnpopular,
        }
    }
}

/// Draws slates for one policy. Competitor pools are ranked once at
/// construction.
#[derive(Clone, Debug)]
pub struct SlateSampler<'a> {
    policy: ExposurePolicy,
    catalog: &'a ItemCatalog,
    k: usize,
    competitors: Vec<ItemId>,
}

impl<'a> SlateSampler<'a> {
    pub fn new(policy: ExposurePolicy, catalog: &'a ItemCatalog, popularity: &[f64], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("slate size must be at least 1"));
        }
        let pool_len = match policy {
            ExposurePolicy::UniformA => catalog.set_a.len(),
            _ => catalog.set_b.len(),
        };
        if k > pool_len {
            return Err(Error::config(format!(
                "slate size {k} exceeds the {pool_len} items available to policy {}",
                policy.kind().as_str()
            )));
        }
        let competitors = match policy {
            ExposurePolicy::OverexposeBias { force_prob } => {
                if !(0.0..=1.0).contains(&force_prob) {
                    return Err(Error::config(format!("force_prob must lie in [0, 1], got {force_prob}")));
                }
                Vec::new()
            }
            ExposurePolicy::CompetePopular { quartile_size } | ExposurePolicy::CompeteUnpopular { quartile_size } => {
                competitor_pool(policy, catalog, popularity, quartile_size, k)?
            }
            _ => Vec::new(),
        };
        Ok(SlateSampler {
            policy,
            catalog,
            k,
            competitors,
        })
    }

    pub fn competitors(&self) -> &[ItemId] {
        &self.competitors
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Slate {
        let kind = self.policy.kind();
        let items = match self.policy {
            ExposurePolicy::UniformA => pick(&self.catalog.set_a, self.k, rng),
            ExposurePolicy::UniformB => pick(&self.catalog.set_b, self.k, rng),
            ExposurePolicy::OverexposeBias { force_prob } => {
                if rng.random::<f64>() < force_prob {
                    let bias = &self.catalog.bias_set;
                    let forced = bias[rng.random_range(0..bias.len())];
                    let set_b = &self.catalog.set_b;
                    let skip = set_b.binary_search(&forced).expect("bias item in set_b");
                    let mut items = Vec::with_capacity(self.k);
                    items.push(forced);
                    items.extend(
                        index::sample(rng, set_b.len() - 1, self.k - 1)
                            .into_iter()
                            .map(|j| set_b[if j >= skip { j + 1 } else { j }]),
                    );
                    items
                } else {
                    pick(&self.catalog.set_b, self.k, rng)
                }
            }
            ExposurePolicy::CompetePopular { .. } | ExposurePolicy::CompeteUnpopular { .. } => {
                let bias = &self.catalog.bias_set;
                let mut items = Vec::with_capacity(self.k);
                items.push(bias[rng.random_range(0..bias.len())]);
                items.extend(pick(&self.competitors, self.k - 1, rng));
                items
            }
        };
        Slate::new(items, kind)
    }
}

fn pick<R: Rng + ?Sized>(pool: &[ItemId], k: usize, rng: &mut R) -> Vec<ItemId> {
    index::sample(rng, pool.len(), k).into_iter().map(|j| pool[j]).collect()
}

/// The `quartile_size` most (or least) popular non-bias set_b items, ranked by
/// popularity with ties broken by ascending id.
fn competitor_pool(
    policy: ExposurePolicy,
    catalog: &ItemCatalog,
    popularity: &[f64],
    quartile_size: usize,
    k: usize,
) -> Result<Vec<ItemId>> {
    if quartile_size + 1 < k {
        return Err(Error::config(format!(
            "quartile_size {quartile_size} is smaller than the {} competitors a slate needs",
            k - 1
        )));
    }
    let mut candidates = catalog.non_bias_b();
    if quartile_size > candidates.len() {
        return Err(Error::config(format!(
            "quartile_size {quartile_size} exceeds the {} non-bias set_b items",
            candidates.len()
        )));
    }
    if popularity.len() < catalog.n_items {
        return Err(Error::contract("popularity vector shorter than the catalog"));
    }
    if candidates.iter().any(|&i| !popularity[i].is_finite()) {
        return Err(Error::contract("popularity must be finite on set_b"));
    }
    candidates.sort_by(|&a, &b| popularity[b].total_cmp(&popularity[a]).then(a.cmp(&b)));
    let mut pool = match policy {
        ExposurePolicy::CompetePopular { .. } => candidates[..quartile_size].to_vec(),
        _ => candidates[candidates.len() - quartile_size..].to_vec(),
    };
    pool.sort_unstable();
    Ok(pool)
}

/// Draws a single slate. Build a [`SlateSampler`] directly when drawing many.
pub fn sample_slate(
    policy: ExposurePolicy,
    catalog: &ItemCatalog,
    popularity: &[f64],
    k: usize,
    rng: &mut impl Rng,
) -> Result<Slate> {
    Ok(SlateSampler::new(policy, catalog, popularity, k)?.sample(rng))
}

/// Exact ratio of expected exposures per bias item to expected exposures per
/// non-bias set_b item under `OverexposeBias { force_prob }`.
pub fn expected_exposure_ratio(force_prob: f64, catalog: &ItemCatalog, k: usize) -> f64 {
    let n = catalog.set_b.len() as f64;
    let b = catalog.bias_set.len() as f64;
    let k = k as f64;
    let uniform = k / n;
    let fill = (k - 1.0) / (n - 1.0);
    let forced_bias = 1.0 / b + (1.0 - 1.0 / b) * fill;
    let bias = force_prob * forced_bias + (1.0 - force_prob) * uniform;
    let other = force_prob * fill + (1.0 - force_prob) * uniform;
    bias / other
}

/// Finds the force probability whose exposure ratio equals `target_ratio`, by
/// bisection on the exact expectation.
pub fn solve_force_prob(target_ratio: f64, catalog: &ItemCatalog, k: usize) -> Result<f64> {
    if !(target_ratio.is_finite() && target_ratio >= 1.0) {
        return Err(Error::config(format!("target ratio must be >= 1, got {target_ratio}")));
    }
    if k == 0 || k > catalog.set_b.len() {
        return Err(Error::config(format!("slate size {k} invalid for set_b of {}", catalog.set_b.len())));
    }
    if catalog.bias_set.len() == catalog.set_b.len() {
        return Err(Error::config("overexposure needs at least one non-bias set_b item"));
    }
    let max_ratio = expected_exposure_ratio(1.0, catalog, k);
    if target_ratio > max_ratio * (1.0 + 1e-12) {
        return Err(Error::config(format!(
            "target ratio {target_ratio} is unachievable; the maximum at force_prob = 1 is {max_ratio:.6}"
        )));
    }
    let ratio = |rho| expected_exposure_ratio(rho, catalog, k);
    if ratio(0.0) >= target_ratio {
        return Ok(0.0);
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if ratio(mid) < target_ratio {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    let rho = 0.5 * (lo + hi);
    debug_assert!((ratio(rho) - target_ratio).abs() < 1e-6);
    Ok(rho)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    Overexposure,
    Competition,
}

impl Experiment {
    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Overexposure => "overexposure",
            Experiment::Competition => "competition",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    Overexposure,
    Competition,
    /// Both members exposed uniformly on set_b; measures chance rank shifts.
    Null,
}

impl From<Experiment> for PairLabel {
    fn from(e: Experiment) -> Self {
        match e {
            Experiment::Overexposure => PairLabel::Overexposure,
            Experiment::Competition => PairLabel::Competition,
        }
    }
}

/// Slates per user for each policy block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SessionCounts {
    pub uniform_a: usize,
    pub uniform_b: usize,
    pub overexpose_bias: usize,
    pub compete_popular: usize,
    pub compete_unpopular: usize,
    /// Uniform set_b slates shared by both members of a competition pair.
    /// They tie the set_b utility scale of the two members together.
    pub competition_anchor: usize,
}

impl Default for SessionCounts {
    fn default() -> Self {
        SessionCounts {
            uniform_a: 20,
            uniform_b: 10,
            overexpose_bias: 10,
            compete_popular: 10,
            compete_unpopular: 10,
            competition_anchor: 10,
        }
    }
}

/// Everything pair construction needs besides the population.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSettings {
    pub slate_size: usize,
    pub counts: SessionCounts,
    pub force_prob: f64,
    pub quartile_size: usize,
}

impl PairSettings {
    /// Default quartile: a quarter of the non-bias set_b items, rounded down.
    pub fn default_quartile(catalog: &ItemCatalog) -> usize {
        catalog.non_bias_b().len() / 4
    }
}

/// Which pair member a block of slates belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Member {
    Both,
    Treated,
    Control,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Block {
    pub policy: ExposurePolicy,
    pub count: usize,
    pub member: Member,
}

/// Session layout for a pair kind, in session order.
pub fn session_blocks(label: PairLabel, s: &PairSettings) -> Vec<Block> {
    let c = s.counts;
    let block = |policy, count, member| Block { policy, count, member };
    let mut out = vec![block(ExposurePolicy::UniformA, c.uniform_a, Member::Both)];
    match label {
        PairLabel::Overexposure => {
            out.push(block(ExposurePolicy::OverexposeBias { force_prob: s.force_prob }, c.overexpose_bias, Member::Treated));
            out.push(block(ExposurePolicy::UniformB, c.uniform_b, Member::Control));
        }
        PairLabel::Competition => {
            out.push(block(ExposurePolicy::UniformB, c.competition_anchor, Member::Both));
            out.push(block(ExposurePolicy::CompetePopular { quartile_size: s.quartile_size }, c.compete_popular, Member::Treated));
            out.push(block(ExposurePolicy::CompeteUnpopular { quartile_size: s.quartile_size }, c.compete_unpopular, Member::Control));
        }
        PairLabel::Null => {
            out.push(block(ExposurePolicy::UniformB, c.uniform_b, Member::Treated));
            out.push(block(ExposurePolicy::UniformB, c.uniform_b, Member::Control));
        }
    }
    out.retain(|b| b.count > 0);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionPlan {
    pub user: UserId,
    pub slates: Vec<Slate>,
}

/// Plans every user's session, block by block in `session_blocks` order.
pub fn plan_sessions(
    label: PairLabel,
    catalog: &ItemCatalog,
    n_users: usize,
    popularity: &[f64],
    settings: &PairSettings,
    rng: RngHandle,
) -> Result<Vec<SessionPlan>> {
    let k = settings.slate_size;
    let blocks = session_blocks(label, settings);
    let samplers = blocks
        .iter()
        .map(|b| SlateSampler::new(b.policy, catalog, popularity, k))
        .collect::<Result<Vec<_>>>()?;
    let per_user: usize = blocks.iter().map(|b| b.count).sum();
    let mut rng = rng.rng();
    Ok((0..n_users)
        .map(|user| {
            let mut slates = Vec::with_capacity(per_user);
            for (b, sampler) in blocks.iter().zip(&samplers) {
                slates.extend((0..b.count).map(|_| sampler.sample(&mut rng)));
            }
            SessionPlan { user, slates }
        })
        .collect())
}

/// Two training logs that differ only in their set_b exposure.
#[derive(Clone, Debug)]
pub struct DatasetPair {
    pub label: PairLabel,
    pub treated: ChoiceLog,
    pub control: ChoiceLog,
}

impl DatasetPair {
    pub fn swapped(self) -> Self {
        DatasetPair {
            label: self.label,
            treated: self.control,
            control: self.treated,
        }
    }
}

/// Competitor popularity: ground-truth mean utility over training users.
pub fn competitor_popularity(pop: &LatentPopulation, split: &UserSplit) -> Vec<f64> {
    pop.mean_utility(&split.train_users)
}

pub fn build_pair(
    pop: &LatentPopulation,
    catalog: &Arc<ItemCatalog>,
    split: &Arc<UserSplit>,
    experiment: Experiment,
    behavior: &BehaviorSpec,
    settings: &PairSettings,
    rng: RngHandle,
) -> Result<DatasetPair> {
    compile_pair(pop, catalog, split, experiment.into(), behavior, settings, false, rng)
}

/// A pair whose members are both uniformly exposed on set_b. With
/// `shared_members` the control block replays the treated block exactly, so
/// the members are identical.
pub fn build_null_pair(
    pop: &LatentPopulation,
    catalog: &Arc<ItemCatalog>,
    split: &Arc<UserSplit>,
    behavior: &BehaviorSpec,
    settings: &PairSettings,
    shared_members: bool,
    rng: RngHandle,
) -> Result<DatasetPair> {
    compile_pair(pop, catalog, split, PairLabel::Null, behavior, settings, shared_members, rng)
}

#[allow(clippy::too_many_arguments)]
fn compile_pair(
    pop: &LatentPopulation,
    catalog: &Arc<ItemCatalog>,
    split: &Arc<UserSplit>,
    label: PairLabel,
    behavior: &BehaviorSpec,
    settings: &PairSettings,
    shared_members: bool,
    rng: RngHandle,
) -> Result<DatasetPair> {
    if pop.n_items() != catalog.n_items || pop.n_users() != split.n_users() {
        return Err(Error::config("population, catalog and split sizes disagree"));
    }
    let popularity = competitor_popularity(pop, split);
    let plans = plan_sessions(label, catalog, split.n_users(), &popularity, settings, rng.child(purpose::SLATES))?;
    let members: Vec<Member> = session_blocks(label, settings)
        .iter()
        .flat_map(|b| std::iter::repeat_n(b.member, b.count))
        .collect();
    let sessions: Vec<(UserId, Vec<Slate>)> = plans.into_iter().map(|p| (p.user, p.slates)).collect();
    let log = simulate_choices(pop, &sessions, behavior, catalog.clone(), split.clone(), rng.child(purpose::CHOICES))?;

    let mut treated = Vec::new();
    let mut control = Vec::new();
    let mut events = log.events.into_iter();
    for _ in &sessions {
        for (&member, event) in members.iter().zip(events.by_ref()) {
            match member {
                Member::Both => {
                    treated.push(event.clone());
                    control.push(event);
                }
                // with shared members the control log replays the treated block
                Member::Treated if shared_members => {
                    treated.push(event.clone());
                    control.push(event);
                }
                Member::Treated => treated.push(event),
                Member::Control if shared_members => {}
                Member::Control => control.push(event),
            }
        }
    }
    Ok(DatasetPair {
        label,
        treated: ChoiceLog::new(treated, catalog.clone(), split.clone())?,
        control: ChoiceLog::new(control, catalog.clone(), split.clone())?,
    })
}

/// All events except evaluation users' set_b choices.
pub fn training_view(log: &ChoiceLog, split: &UserSplit, catalog: &ItemCatalog) -> Vec<ChoiceEvent> {
    log.events
        .iter()
        .filter(|e| !(split.is_eval(e.user) && e.slate.within_set_b(catalog)))
        .cloned()
        .collect()
}

/// Per-item number of slates containing the item.
pub fn exposure_counts(events: &[ChoiceEvent], n_items: usize) -> Vec<usize> {
    let mut counts = vec![0; n_items];
    for e in events {
        for &i in &e.slate.items {
            counts[i] += 1;
        }
    }
    counts
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairManifest {
    pub label: PairLabel,
    pub seed: u64,
    pub rho: f64,
    pub quartile_size: usize,
}

/// Writes `treated.jsonl`, `control.jsonl`, `context.json` (catalog and
/// split) and `manifest.json` into `dir`.
pub fn write_pair(pair: &DatasetPair, manifest: &PairManifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, log) in [("treated.jsonl", &pair.treated), ("control.jsonl", &pair.control)] {
        let path = dir.join(name);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        log.write_jsonl(BufWriter::new(file))?;
    }
    let context = LogContext {
        catalog: (*pair.treated.catalog).clone(),
        split: (*pair.treated.split).clone(),
    };
    for (name, value) in [
        ("context.json", serde_json::to_string_pretty(&context)?),
        ("manifest.json", serde_json::to_string_pretty(manifest)?),
    ] {
        let path = dir.join(name);
        fs::write(&path, value + "\n").map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

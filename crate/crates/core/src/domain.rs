//! Shared domain types: the item catalog, the user split, slates and the
//! choice log, plus the partitioning procedures that build them.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngHandle;

pub type ItemId = usize;
pub type UserId = usize;

/// The item universe split into two disjoint halves, with a small bias set
/// drawn from the second half. All id lists are strictly increasing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemCatalog {
    pub n_items: usize,
    pub set_a: Vec<ItemId>,
    pub set_b: Vec<ItemId>,
    pub bias_set: Vec<ItemId>,
    #[serde(skip)]
    membership: Vec<Membership>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
enum Membership {
    #[default]
    A,
    B,
    Bias,
}

impl ItemCatalog {
    /// Assembles a catalog from explicit id lists, checking every invariant.
    pub fn from_parts(
        n_items: usize,
        mut set_a: Vec<ItemId>,
        mut set_b: Vec<ItemId>,
        mut bias_set: Vec<ItemId>,
    ) -> Result<Self> {
        set_a.sort_unstable();
        set_b.sort_unstable();
        bias_set.sort_unstable();
        let mut membership = vec![None; n_items];
        let tagged = set_a
            .iter()
            .map(|&i| (i, Membership::A))
            .chain(set_b.iter().map(|&i| (i, Membership::B)));
        for (i, tag) in tagged {
            if i >= n_items {
                return Err(Error::config(format!("item id {i} outside catalog of {n_items}")));
            }
            if membership[i].is_some() {
                return Err(Error::config(format!("item id {i} assigned twice")));
            }
            membership[i] = Some(tag);
        }
        if membership.iter().any(Option::is_none) {
            return Err(Error::config("set_a and set_b do not cover the catalog"));
        }
        if set_a.is_empty() || set_b.is_empty() {
            return Err(Error::config("set_a and set_b must both be non-empty"));
        }
        if bias_set.is_empty() {
            return Err(Error::config("bias set must contain at least one item"));
        }
        let mut membership: Vec<Membership> = membership.into_iter().map(Option::unwrap).collect();
        for w in bias_set.windows(2) {
            if w[0] == w[1] {
                return Err(Error::config(format!("bias item {} listed twice", w[0])));
            }
        }
        for &i in &bias_set {
            if i >= n_items || membership[i] != Membership::B {
                return Err(Error::config(format!("bias item {i} is not in set_b")));
            }
            membership[i] = Membership::Bias;
        }
        Ok(ItemCatalog {
            n_items,
            set_a,
            set_b,
            bias_set,
            membership,
        })
    }

    pub fn in_set_a(&self, item: ItemId) -> bool {
        self.membership.get(item) == Some(&Membership::A)
    }

    pub fn in_set_b(&self, item: ItemId) -> bool {
        matches!(self.membership.get(item), Some(Membership::B | Membership::Bias))
    }

    pub fn is_bias(&self, item: ItemId) -> bool {
        self.membership.get(item) == Some(&Membership::Bias)
    }

    /// set_b without the bias items, ascending.
    pub fn non_bias_b(&self) -> Vec<ItemId> {
        self.set_b.iter().copied().filter(|&i| !self.is_bias(i)).collect()
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn revalidated(self) -> Result<Self> {
        ItemCatalog::from_parts(self.n_items, self.set_a, self.set_b, self.bias_set)
    }
}

/// Draws a uniformly random partition of `0..n_items` into `set_a` (`size_a`
/// items) and `set_b`, then `n_bias` items of `set_b` without replacement.
pub fn build_catalog(n_items: usize, size_a: usize, n_bias: usize, rng: RngHandle) -> Result<ItemCatalog> {
    if size_a == 0 || size_a >= n_items {
        return Err(Error::config(format!(
            "size_a must satisfy 0 < size_a < n_items (got size_a={size_a}, n_items={n_items})"
        )));
    }
    if n_bias == 0 || n_bias > n_items - size_a {
        return Err(Error::config(format!(
            "n_bias must satisfy 1 <= n_bias <= n_items - size_a = {} (got {n_bias})",
            n_items - size_a
        )));
    }
    let mut rng = rng.rng();
    let mut ids: Vec<ItemId> = (0..n_items).collect();
    ids.shuffle(&mut rng);
    let set_a = ids[..size_a].to_vec();
    let mut set_b = ids[size_a..].to_vec();
    set_b.sort_unstable();
    let bias_set = index::sample(&mut rng, set_b.len(), n_bias)
        .into_iter()
        .map(|k| set_b[k])
        .collect();
    ItemCatalog::from_parts(n_items, set_a, set_b, bias_set)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserSplit {
    pub train_users: Vec<UserId>,
    pub eval_users: Vec<UserId>,
    #[serde(skip)]
    is_eval: Vec<bool>,
}

impl UserSplit {
    pub fn from_parts(n_users: usize, mut train_users: Vec<UserId>, mut eval_users: Vec<UserId>) -> Result<Self> {
        train_users.sort_unstable();
        eval_users.sort_unstable();
        if train_users.is_empty() || eval_users.is_empty() {
            return Err(Error::config("both sides of the user split must be non-empty"));
        }
        let mut seen = vec![None; n_users];
        for (&u, eval) in train_users
            .iter()
            .map(|u| (u, false))
            .chain(eval_users.iter().map(|u| (u, true)))
        {
            if u >= n_users {
                return Err(Error::config(format!("user id {u} outside 0..{n_users}")));
            }
            if seen[u].replace(eval).is_some() {
                return Err(Error::config(format!("user id {u} assigned twice")));
            }
        }
        if seen.iter().any(Option::is_none) {
            return Err(Error::config("user split does not cover every user"));
        }
        Ok(UserSplit {
            train_users,
            eval_users,
            is_eval: seen.into_iter().map(Option::unwrap).collect(),
        })
    }

    pub fn n_users(&self) -> usize {
        self.is_eval.len()
    }

    pub fn is_eval(&self, user: UserId) -> bool {
        self.is_eval.get(user).copied().unwrap_or(false)
    }

    pub fn contains(&self, user: UserId) -> bool {
        user < self.is_eval.len()
    }

    pub fn revalidated(self) -> Result<Self> {
        let n = self.train_users.len() + self.eval_users.len();
        UserSplit::from_parts(n, self.train_users, self.eval_users)
    }
}

/// Uniform random split with `round(eval_fraction * n_users)` evaluation users.
pub fn partition_users(n_users: usize, eval_fraction: f64, rng: RngHandle) -> Result<UserSplit> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::config(format!("eval_fraction must lie in (0, 1), got {eval_fraction}")));
    }
    let n_eval = (eval_fraction * n_users as f64).round() as usize;
    if n_eval == 0 || n_eval >= n_users {
        return Err(Error::config(format!(
            "eval_fraction {eval_fraction} with {n_users} users leaves one side of the split empty"
        )));
    }
    let mut ids: Vec<UserId> = (0..n_users).collect();
    ids.shuffle(&mut rng.rng());
    let eval = ids[..n_eval].to_vec();
    let train = ids[n_eval..].to_vec();
    UserSplit::from_parts(n_users, train, eval)
}

/// The logging policy that produced a slate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    UniformA,
    UniformB,
    OverexposeBias,
    CompetePopular,
    CompeteUnpopular,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::UniformA => "uniform_a",
            PolicyKind::UniformB => "uniform_b",
            PolicyKind::OverexposeBias => "overexpose_bias",
            PolicyKind::CompetePopular => "compete_popular",
            PolicyKind::CompeteUnpopular => "compete_unpopular",
        }
    }

    pub fn targets_set_a(self) -> bool {
        self == PolicyKind::UniformA
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slate {
    pub items: Vec<ItemId>,
    pub policy: PolicyKind,
}

impl Slate {
    pub fn new(items: Vec<ItemId>, policy: PolicyKind) -> Self {
        Slate { items, policy }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// True when every item lies in set_b.
    pub fn within_set_b(&self, catalog: &ItemCatalog) -> bool {
        self.items.iter().all(|&i| catalog.in_set_b(i))
    }

    pub fn validate(&self, catalog: &ItemCatalog) -> Result<()> {
        if self.items.is_empty() {
            return Err(Error::contract("empty slate"));
        }
        for (k, &i) in self.items.iter().enumerate() {
            if i >= catalog.n_items {
                return Err(Error::contract(format!("slate item {i} outside the catalog")));
            }
            if self.items[..k].contains(&i) {
                return Err(Error::contract(format!("slate lists item {i} twice")));
            }
        }
        let all_a = self.items.iter().all(|&i| catalog.in_set_a(i));
        if !all_a && !self.within_set_b(catalog) {
            return Err(Error::contract(format!("slate {:?} mixes set_a and set_b", self.items)));
        }
        if all_a != self.policy.targets_set_a() {
            return Err(Error::contract(format!(
                "slate {:?} does not match the half targeted by policy {}",
                self.items,
                self.policy.as_str()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChoiceEvent {
    pub user: UserId,
    pub slate: Slate,
    pub chosen_index: usize,
}

impl ChoiceEvent {
    pub fn new(user: UserId, slate: Slate, chosen_index: usize) -> Result<Self> {
        if chosen_index >= slate.len() {
            return Err(Error::contract(format!(
                "chosen index {chosen_index} outside slate of length {}",
                slate.len()
            )));
        }
        Ok(ChoiceEvent {
            user,
            slate,
            chosen_index,
        })
    }

    pub fn chosen_item(&self) -> ItemId {
        self.slate.items[self.chosen_index]
    }
}

/// One JSONL line of a serialized choice log. `chosen` is the position of the
/// chosen item inside `slate`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub user: UserId,
    pub slate: Vec<ItemId>,
    pub chosen: usize,
    pub policy: PolicyKind,
}

impl From<&ChoiceEvent> for EventRecord {
    fn from(e: &ChoiceEvent) -> Self {
        EventRecord {
            user: e.user,
            slate: e.slate.items.clone(),
            chosen: e.chosen_index,
            policy: e.slate.policy,
        }
    }
}

/// Catalog and split travel together as one JSON document next to the logs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogContext {
    pub catalog: ItemCatalog,
    pub split: UserSplit,
}

#[derive(Clone, Debug)]
pub struct ChoiceLog {
    pub events: Vec<ChoiceEvent>,
    pub catalog: Arc<ItemCatalog>,
    pub split: Arc<UserSplit>,
}

impl ChoiceLog {
    pub fn new(events: Vec<ChoiceEvent>, catalog: Arc<ItemCatalog>, split: Arc<UserSplit>) -> Result<Self> {
        for (k, e) in events.iter().enumerate() {
            if !split.contains(e.user) {
                return Err(Error::contract(format!("event {k}: user {} not in the split", e.user)));
            }
            e.slate
                .validate(&catalog)
                .map_err(|err| Error::contract(format!("event {k}: {err}")))?;
            if e.chosen_index >= e.slate.len() {
                return Err(Error::contract(format!("event {k}: chosen index out of range")));
            }
        }
        Ok(ChoiceLog { events, catalog, split })
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.events {
            serde_json::to_writer(&mut out, &EventRecord::from(e))?;
            out.write_all(b"\n").map_err(|err| Error::io("<jsonl>", err))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R, catalog: Arc<ItemCatalog>, split: Arc<UserSplit>) -> Result<Self> {
        let mut events = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|err| Error::io("<jsonl>", err))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: EventRecord = serde_json::from_str(&line)?;
            events.push(ChoiceEvent::new(rec.user, Slate::new(rec.slate, rec.policy), rec.chosen)?);
        }
        ChoiceLog::new(events, catalog, split)
    }
}

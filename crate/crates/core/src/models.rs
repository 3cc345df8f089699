//! Scoring models, their per-event losses and analytic gradients.
//!
//! Every model shares one latent-factor backbone,
//! `score(u, i) = intercept[i] + <user_factors[u], item_factors[i]>`, and the
//! kinds differ only in the loss placed on top of it:
//!
//! * `mnl`: softmax over the exposed slate.
//! * `gev`: two-level nested logit over the slate, one learned scale per nest.
//! * `bl`: independent chosen / not-chosen logistic terms for every exposed item.
//! * `bpr`: pairwise ranking of the chosen item against sampled negatives,
//!   blind to the slate.
//! * `ips_bpr`: `bpr` reweighted by the inverse exposure propensity of the
//!   chosen item.
//! * `popularity` and `random`: fixed reference scorers with no loss.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{ChoiceEvent, ItemId, UserId};
use crate::error::{Error, Result};
use crate::rng::{RngHandle, StreamRng};

/// Floor applied to propensities before inverting them.
pub const PROPENSITY_CLIP: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mnl,
    Gev,
    Bl,
    Bpr,
    IpsBpr,
    Popularity,
    Random,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::Mnl,
        ModelKind::Gev,
        ModelKind::Bl,
        ModelKind::Bpr,
        ModelKind::IpsBpr,
        ModelKind::Popularity,
        ModelKind::Random,
    ];

    /// Kinds fitted by gradient descent.
    pub const TRAINABLE: [ModelKind; 5] = [ModelKind::Mnl, ModelKind::Gev, ModelKind::Bl, ModelKind::Bpr, ModelKind::IpsBpr];

    /// Position in `ALL`; used to give each kind its own stream.
    pub fn index(self) -> usize {
        ModelKind::ALL.iter().position(|&k| k == self).expect("listed kind")
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Mnl => "mnl",
            ModelKind::Gev => "gev",
            ModelKind::Bl => "bl",
            ModelKind::Bpr => "bpr",
            ModelKind::IpsBpr => "ips_bpr",
            ModelKind::Popularity => "popularity",
            ModelKind::Random => "random",
        }
    }

    /// Loss depends jointly on every slate member.
    pub fn is_multivariate(self) -> bool {
        matches!(self, ModelKind::Mnl | ModelKind::Gev)
    }

    pub fn is_parameterized(self) -> bool {
        !matches!(self, ModelKind::Popularity | ModelKind::Random)
    }

    pub fn uses_negatives(self) -> bool {
        matches!(self, ModelKind::Bpr | ModelKind::IpsBpr)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown model kind '{s}'")))
    }
}

/// Flat parameter vector with a fixed layout:
/// `[user_factors | item_factors | intercepts | nest_logits | bl_offset]`.
/// Gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    n_users: usize,
    n_items: usize,
    dim: usize,
    n_nests: usize,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize, n_nests: usize) -> Self {
        ModelParams {
            n_users,
            n_items,
            dim,
            n_nests,
            values: vec![0.0; (n_users + n_items) * dim + n_items + n_nests + 1],
        }
    }

    pub fn zeros_like(other: &ModelParams) -> Self {
        ModelParams::zeros(other.n_users, other.n_items, other.dim, other.n_nests)
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

    pub fn n_nests(&self) -> usize {
        self.n_nests
    }

    fn item_base(&self) -> usize {
        self.n_users * self.dim
    }

    fn intercept_base(&self) -> usize {
        (self.n_users + self.n_items) * self.dim
    }

    fn nest_base(&self) -> usize {
        self.intercept_base() + self.n_items
    }

    fn offset_index(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn user_factors(&self) -> &[f64] {
        &self.values[..self.item_base()]
    }

    pub fn user_factors_mut(&mut self) -> &mut [f64] {
        let end = self.item_base();
        &mut self.values[..end]
    }

    pub fn item_factors(&self) -> &[f64] {
        &self.values[self.item_base()..self.intercept_base()]
    }

    pub fn item_factors_mut(&mut self) -> &mut [f64] {
        let (a, b) = (self.item_base(), self.intercept_base());
        &mut self.values[a..b]
    }

    pub fn user(&self, u: UserId) -> &[f64] {
        &self.values[u * self.dim..(u + 1) * self.dim]
    }

    pub fn item(&self, i: ItemId) -> &[f64] {
        let base = self.item_base() + i * self.dim;
        &self.values[base..base + self.dim]
    }

    pub fn intercepts(&self) -> &[f64] {
        &self.values[self.intercept_base()..self.nest_base()]
    }

    pub fn intercepts_mut(&mut self) -> &mut [f64] {
        let (a, b) = (self.intercept_base(), self.nest_base());
        &mut self.values[a..b]
    }

    pub fn intercept(&self, i: ItemId) -> f64 {
        self.values[self.intercept_base() + i]
    }

    /// Unconstrained nest pre-images; the scale of nest `m` is `logistic(nest_logits[m])`.
    pub fn nest_logits(&self) -> &[f64] {
        &self.values[self.nest_base()..self.offset_index()]
    }

    pub fn nest_logits_mut(&mut self) -> &mut [f64] {
        let (a, b) = (self.nest_base(), self.offset_index());
        &mut self.values[a..b]
    }

    pub fn nest_scale(&self, m: usize) -> f64 {
        logistic(self.nest_logits()[m])
    }

    pub fn bl_offset(&self) -> f64 {
        self.values[self.offset_index()]
    }

    pub fn set_bl_offset(&mut self, v: f64) {
        let i = self.offset_index();
        self.values[i] = v;
    }

    pub fn score(&self, user: UserId, item: ItemId) -> f64 {
        self.intercept(item) + dot(self.user(user), self.item(item))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn to_document(&self) -> ParamsDocument {
        let rows = |s: &[f64]| -> Vec<Vec<f64>> {
            if self.dim == 0 {
                return Vec::new();
            }
            s.chunks(self.dim).map(<[f64]>::to_vec).collect()
        };
        ParamsDocument {
            n_users: self.n_users,
            n_items: self.n_items,
            dim: self.dim,
            n_nests: self.n_nests,
            user_factors: rows(self.user_factors()),
            item_factors: rows(self.item_factors()),
            item_intercepts: self.intercepts().to_vec(),
            nest_logits: self.nest_logits().to_vec(),
            nest_scales: (0..self.n_nests).map(|m| self.nest_scale(m)).collect(),
            bl_offset: self.bl_offset(),
        }
    }

    pub fn from_document(doc: &ParamsDocument) -> Result<Self> {
        let mut p = ModelParams::zeros(doc.n_users, doc.n_items, doc.dim, doc.n_nests);
        let shape_ok = doc.user_factors.len() == doc.n_users
            && doc.item_factors.len() == doc.n_items
            && doc.user_factors.iter().chain(&doc.item_factors).all(|r| r.len() == doc.dim)
            && doc.item_intercepts.len() == doc.n_items
            && doc.nest_logits.len() == doc.n_nests;
        if !shape_ok {
            return Err(Error::config("parameter document shape does not match its metadata"));
        }
        p.user_factors_mut().copy_from_slice(&doc.user_factors.concat());
        p.item_factors_mut().copy_from_slice(&doc.item_factors.concat());
        p.intercepts_mut().copy_from_slice(&doc.item_intercepts);
        p.nest_logits_mut().copy_from_slice(&doc.nest_logits);
        p.set_bl_offset(doc.bl_offset);
        Ok(p)
    }
}

/// JSON form of trained parameters, with shape metadata.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamsDocument {
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub n_nests: usize,
    pub user_factors: Vec<Vec<f64>>,
    pub item_factors: Vec<Vec<f64>>,
    pub item_intercepts: Vec<f64>,
    pub nest_logits: Vec<f64>,
    pub nest_scales: Vec<f64>,
    pub bl_offset: f64,
}

/// Item-to-nest assignment for the nested logit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NestStructure {
    pub assignment: Vec<usize>,
    pub n_nests: usize,
    /// Fixes every nest scale at exactly 1, which turns the nested logit
    /// into the plain multinomial logit.
    #[serde(default)]
    pub unit_scales: bool,
}

impl NestStructure {
    pub fn new(assignment: Vec<usize>, n_nests: usize) -> Result<Self> {
        let mut sizes = vec![0usize; n_nests];
        for (i, &m) in assignment.iter().enumerate() {
            if m >= n_nests {
                return Err(Error::config(format!("item {i} assigned to nest {m} of {n_nests}")));
            }
            sizes[m] += 1;
        }
        if n_nests == 0 || sizes.contains(&0) {
            return Err(Error::config("every nest must hold at least one item"));
        }
        Ok(NestStructure {
            assignment,
            n_nests,
            unit_scales: false,
        })
    }

    /// Random balanced partition of the catalog into `n_nests` nests.
    pub fn random(n_items: usize, n_nests: usize, rng: RngHandle) -> Result<Self> {
        if n_nests == 0 || n_nests > n_items {
            return Err(Error::config(format!(
                "n_nests must lie in 1..={n_items}, got {n_nests}"
            )));
        }
        let mut order: Vec<ItemId> = (0..n_items).collect();
        order.shuffle(&mut rng.rng());
        let mut assignment = vec![0; n_items];
        for (pos, &item) in order.iter().enumerate() {
            assignment[item] = pos % n_nests;
        }
        NestStructure::new(assignment, n_nests)
    }

    /// One nest per item set; convenient where the structure is unused.
    pub fn single(n_items: usize) -> Self {
        NestStructure {
            assignment: vec![0; n_items],
            n_nests: 1,
            unit_scales: false,
        }
    }

    pub fn with_unit_scales(mut self) -> Self {
        self.unit_scales = true;
        self
    }
}

/// Everything the per-event losses need beyond the parameters.
#[derive(Clone, Debug)]
pub struct LossContext {
    pub kind: ModelKind,
    pub reg: f64,
    pub nests: NestStructure,
    /// Exposure frequency per item, used by `ips_bpr`.
    pub propensity: Vec<f64>,
    pub n_negatives: usize,
    chosen: Vec<Vec<bool>>,
    n_unchosen: Vec<usize>,
}

impl LossContext {
    /// Builds propensities and per-user chosen sets from the full training events.
    pub fn new(
        kind: ModelKind,
        events: &[ChoiceEvent],
        n_users: usize,
        n_items: usize,
        reg: f64,
        nests: NestStructure,
        n_negatives: usize,
    ) -> Result<Self> {
        if nests.assignment.len() != n_items {
            return Err(Error::config("nest structure does not cover the catalog"));
        }
        let mut chosen = vec![Vec::new(); n_users];
        let mut exposures = vec![0usize; n_items];
        for (k, e) in events.iter().enumerate() {
            if e.user >= n_users || e.slate.items.iter().any(|&i| i >= n_items) {
                return Err(Error::contract(format!("event {k} references ids outside the model")));
            }
            let row = &mut chosen[e.user];
            if row.is_empty() {
                *row = vec![false; n_items];
            }
            row[e.chosen_item()] = true;
            for &i in &e.slate.items {
                exposures[i] += 1;
            }
        }
        let n_unchosen = chosen
            .iter()
            .map(|row| if row.is_empty() { n_items } else { row.iter().filter(|c| !**c).count() })
            .collect();
        let n = events.len().max(1) as f64;
        Ok(LossContext {
            kind,
            reg,
            nests,
            propensity: exposures.iter().map(|&c| c as f64 / n).collect(),
            n_negatives,
            chosen,
            n_unchosen,
        })
    }

    fn was_chosen(&self, user: UserId, item: ItemId) -> bool {
        self.chosen[user].get(item).copied().unwrap_or(false)
    }

    /// Uniform draws from the items `user` never chose in training.
    pub fn sample_negatives(&self, user: UserId, n_items: usize, rng: &mut StreamRng, out: &mut Vec<ItemId>) -> Result<()> {
        out.clear();
        if self.n_unchosen[user] == 0 {
            return Err(Error::contract(format!("user {user} chose every item; no negatives exist")));
        }
        while out.len() < self.n_negatives {
            let i = rng.random_range(0..n_items);
            if !self.was_chosen(user, i) {
                out.push(i);
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    if let (Ok(a), Ok(b)) = (<&[f64; 8]>::try_from(a), <&[f64; 8]>::try_from(b)) {
        return (a[0] * b[0] + a[1] * b[1]) + (a[2] * b[2] + a[3] * b[3]) + ((a[4] * b[4] + a[5] * b[5]) + (a[6] * b[6] + a[7] * b[7]));
    }
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let whole = n / 4 * 4;
    for c in (0..whole).step_by(4) {
        for l in 0..4 {
            acc[l] += a[c + l] * b[c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in whole..n {
        s += a[i] * b[i];
    }
    s
}

/// `y += a * x`
#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    if let (Ok(y), Ok(x)) = (<&mut [f64; 8]>::try_from(&mut *y), <&[f64; 8]>::try_from(x)) {
        for i in 0..8 {
            y[i] += a * x[i];
        }
        return;
    }
    let n = y.len().min(x.len());
    let (y, x) = (&mut y[..n], &x[..n]);
    for i in 0..n {
        y[i] += a * x[i];
    }
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[cfg(test)]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `(softplus(x), logistic(x))` from a single exponential.
#[inline]
fn softplus_logistic(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let sp = x.max(0.0) + e.ln_1p();
    let sig = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (sp, sig)
}

/// Per-slate scratch buffers reused across events.
#[derive(Default)]
struct Scratch {
    items: Vec<ItemId>,
    scores: Vec<f64>,
    dscores: Vec<f64>,
    nest: NestScratch,
    d_lambda: Vec<(usize, f64)>,
}

/// Loss of one event and, when `grad` is given, `weight * dloss/dparams`
/// added into it. Inputs must already be validated.
fn event_terms(
    kind: ModelKind,
    params: &ModelParams,
    event: &ChoiceEvent,
    nests: &NestStructure,
    propensity: Option<&[f64]>,
    negatives: &[ItemId],
    scratch: &mut Scratch,
    grad: Option<(&mut ModelParams, f64)>,
) -> f64 {
    let u = event.user;
    let c = event.chosen_index;
    scratch.items.clear();
    match kind {
        ModelKind::Popularity | ModelKind::Random => return 0.0,
        ModelKind::Bpr | ModelKind::IpsBpr => {
            scratch.items.push(event.chosen_item());
            scratch.items.extend_from_slice(negatives);
        }
        _ => scratch.items.extend_from_slice(&event.slate.items),
    }
    scratch.scores.clear();
    let p_user = params.user(u);
    scratch.scores.extend(scratch.items.iter().map(|&i| params.intercept(i) + dot(p_user, params.item(i))));
    scratch.dscores.clear();
    scratch.dscores.resize(scratch.items.len(), 0.0);
    let s = &scratch.scores;
    let g = &mut scratch.dscores;
    let mut d_offset = 0.0;

    let loss = match kind {
        ModelKind::Mnl => {
            let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (gj, sj) in g.iter_mut().zip(s) {
                *gj = (sj - max).exp();
                z += *gj;
            }
            g.iter_mut().for_each(|gj| *gj /= z);
            g[c] -= 1.0;
            max + z.ln() - s[c]
        }
        ModelKind::Gev => {
            let want_scales = grad.is_some() && !nests.unit_scales;
            let d_lambda = want_scales.then_some(&mut scratch.d_lambda);
            nested_logit(s, c, &event.slate.items, nests, params, &mut scratch.nest, g, d_lambda)
        }
        ModelKind::Bl => {
            let offset = params.bl_offset();
            let mut total = 0.0;
            for (j, (gj, sj)) in g.iter_mut().zip(s).enumerate() {
                let z = sj + offset;
                let y = if j == c { 1.0 } else { 0.0 };
                let (sp, sig) = softplus_logistic(z);
                total += sp - y * z;
                *gj = sig - y;
                d_offset += *gj;
            }
            total
        }
        ModelKind::Bpr | ModelKind::IpsBpr => {
            let weight = match (kind, propensity) {
                (ModelKind::IpsBpr, Some(p)) => 1.0 / p[event.chosen_item()].max(PROPENSITY_CLIP),
                _ => 1.0,
            };
            let mut total = 0.0;
            for n in 1..s.len() {
                let x = s[0] - s[n];
                let (sp, sig) = softplus_logistic(-x);
                total += weight * sp;
                let dx = -weight * sig;
                g[0] += dx;
                g[n] -= dx;
            }
            total
        }
        ModelKind::Popularity | ModelKind::Random => unreachable!(),
    };

    if let Some((grad, w)) = grad {
        let dim = params.dim;
        let (g_users, rest) = grad.values.split_at_mut(params.item_base());
        let (g_items, g_rest) = rest.split_at_mut(params.intercept_base() - params.item_base());
        let g_user = &mut g_users[u * dim..(u + 1) * dim];
        let p_user = params.user(u);
        for (&item, &gj) in scratch.items.iter().zip(scratch.dscores.iter()) {
            if gj == 0.0 {
                continue;
            }
            let wg = w * gj;
            g_rest[item] += wg;
            axpy(&mut g_items[item * dim..(item + 1) * dim], wg, p_user);
            axpy(g_user, wg, params.item(item));
        }
        if kind == ModelKind::Bl {
            let oi = grad.offset_index();
            grad.values[oi] += w * d_offset;
        }
        if kind == ModelKind::Gev && !nests.unit_scales {
            let nb = grad.nest_base();
            for &(m, d_lambda) in &scratch.d_lambda {
                let lambda = params.nest_scale(m);
                grad.values[nb + m] += w * d_lambda * lambda * (1.0 - lambda);
            }
        }
    }
    loss
}

/// Per-nest quantities for one slate.
struct NestTerms {
    nest: usize,
    lambda: f64,
    /// I_m = log sum_j exp(s_j / lambda_m) over slate members of the nest.
    log_sum: f64,
    /// sum_j q_j s_j with q_j the within-nest probability.
    weighted_score: f64,
}

fn nest_terms(s: &[f64], nests: &NestStructure, params: &ModelParams, nest_of: &[usize], present: &[usize], out: &mut Vec<NestTerms>) {
    out.clear();
    out.extend(present.iter().map(|&m| {
        let lambda = if nests.unit_scales { 1.0 } else { params.nest_scale(m) };
        let max = nest_of
            .iter()
            .zip(s)
            .filter(|(n, _)| **n == m)
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let mut weighted = 0.0;
        for (n, &x) in nest_of.iter().zip(s) {
            if *n == m {
                let e = ((x - max) / lambda).exp();
                sum += e;
                weighted += e * x;
            }
        }
        NestTerms {
            nest: m,
            lambda,
            log_sum: max / lambda + sum.ln(),
            weighted_score: weighted / sum,
        }
    }));
}

/// Nested-logit loss. Score derivatives go into `g`; when `d_lambda` is
/// given it receives `(nest, dloss/dlambda)` for every nest in the slate.
fn nested_logit(
    s: &[f64],
    c: usize,
    items: &[ItemId],
    nests: &NestStructure,
    params: &ModelParams,
    scratch: &mut NestScratch,
    g: &mut [f64],
    d_lambda: Option<&mut Vec<(usize, f64)>>,
) -> f64 {
    let NestScratch { nest_of, present, terms } = scratch;
    nest_of.clear();
    nest_of.extend(items.iter().map(|&i| nests.assignment[i]));
    present.clear();
    for &m in nest_of.iter() {
        if !present.contains(&m) {
            present.push(m);
        }
    }
    nest_terms(s, nests, params, nest_of, present, terms);
    let max_v = terms.iter().map(|t| t.lambda * t.log_sum).fold(f64::NEG_INFINITY, f64::max);
    let lse = max_v + terms.iter().map(|t| (t.lambda * t.log_sum - max_v).exp()).sum::<f64>().ln();
    let mc = nest_of[c];
    let tc = terms.iter().find(|t| t.nest == mc).expect("chosen nest present");
    let log_p = s[c] / tc.lambda + (tc.lambda - 1.0) * tc.log_sum - lse;
    for (j, gj) in g.iter_mut().enumerate() {
        let m = nest_of[j];
        let t = terms.iter().find(|t| t.nest == m).expect("nest present");
        let q = (s[j] / t.lambda - t.log_sum).exp();
        let nest_prob = (t.lambda * t.log_sum - lse).exp();
        *gj = nest_prob * q;
        if m == mc {
            *gj -= (tc.lambda - 1.0) / tc.lambda * q;
        }
    }
    g[c] -= 1.0 / tc.lambda;
    if let Some(out) = d_lambda {
        out.clear();
        out.extend(terms.iter().map(|t| {
            let l = t.lambda;
            let nest_prob = (l * t.log_sum - lse).exp();
            // d(lambda * I)/d(lambda) = I - S / lambda
            let mut d_log_p = -nest_prob * (t.log_sum - t.weighted_score / l);
            if t.nest == mc {
                d_log_p += -s[c] / (l * l) + t.log_sum - (l - 1.0) * t.weighted_score / (l * l);
            }
            (t.nest, -d_log_p)
        }));
    }
    -log_p
}

#[derive(Default)]
struct NestScratch {
    nest_of: Vec<usize>,
    present: Vec<usize>,
    terms: Vec<NestTerms>,
}

fn validate_event(params: &ModelParams, event: &ChoiceEvent) -> Result<()> {
    if event.user >= params.n_users {
        return Err(Error::contract(format!("user {} outside the model", event.user)));
    }
    if event.slate.items.iter().any(|&i| i >= params.n_items) {
        return Err(Error::contract("slate item outside the model"));
    }
    if event.chosen_index >= event.slate.len() {
        return Err(Error::contract("chosen index outside the slate"));
    }
    Ok(())
}

/// Negative log-likelihood (or ranking loss) of a single event.
pub fn event_loss(
    kind: ModelKind,
    params: &ModelParams,
    event: &ChoiceEvent,
    nests: &NestStructure,
    propensity: Option<&[f64]>,
    negatives: Option<&[ItemId]>,
) -> Result<f64> {
    validate_event(params, event)?;
    if kind == ModelKind::Gev && (nests.assignment.len() != params.n_items || nests.n_nests != params.n_nests) {
        return Err(Error::contract("nest structure does not match the parameters"));
    }
    let negatives = if kind.uses_negatives() {
        let n = negatives.ok_or_else(|| Error::contract(format!("{kind} needs negatives")))?;
        if n.iter().any(|&i| i >= params.n_items) {
            return Err(Error::contract("negative item outside the model"));
        }
        n
    } else {
        &[]
    };
    if kind == ModelKind::IpsBpr {
        match propensity {
            Some(p) if p.len() == params.n_items => {}
            Some(_) => return Err(Error::contract("propensity length does not match the catalog")),
            None => return Err(Error::contract("ips_bpr needs a propensity vector")),
        }
    }
    let mut scratch = Scratch::default();
    Ok(event_terms(kind, params, event, nests, propensity, negatives, &mut scratch, None))
}

/// Reusable evaluator for mean loss plus L2 penalty and its gradient.
pub(crate) struct Evaluator {
    scratch: Scratch,
    negatives: Vec<ItemId>,
}

impl Evaluator {
    pub(crate) fn new() -> Self {
        Evaluator {
            scratch: Scratch::default(),
            negatives: Vec::new(),
        }
    }

    /// Writes the gradient into `grad` (overwriting it) and returns the loss.
    pub(crate) fn evaluate(
        &mut self,
        ctx: &LossContext,
        params: &ModelParams,
        batch: &[ChoiceEvent],
        rng: RngHandle,
        mut grad: Option<&mut ModelParams>,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        if let Some(g) = grad.as_deref_mut() {
            g.values.iter_mut().for_each(|v| *v = 0.0);
        }
        if !ctx.kind.is_parameterized() {
            return Ok(0.0);
        }
        let w = 1.0 / batch.len() as f64;
        let mut sampler = ctx.kind.uses_negatives().then(|| rng.rng());
        let mut total = 0.0;
        for (k, event) in batch.iter().enumerate() {
            if let Some(rng) = sampler.as_mut() {
                ctx.sample_negatives(event.user, params.n_items, rng, &mut self.negatives)?;
            }
            let loss = event_terms(
                ctx.kind,
                params,
                event,
                &ctx.nests,
                Some(&ctx.propensity),
                &self.negatives,
                &mut self.scratch,
                grad.as_deref_mut().map(|g| (g, w)),
            );
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch: None,
                    event: Some(k),
                    detail: format!("non-finite {} loss {loss}", ctx.kind),
                });
            }
            total += loss;
        }
        let mut penalty = 0.0;
        let factor_end = params.intercept_base();
        for (idx, &v) in params.values[..factor_end].iter().enumerate() {
            penalty += v * v;
            if let Some(g) = grad.as_deref_mut() {
                g.values[idx] += 2.0 * ctx.reg * v;
            }
        }
        let loss = total * w + ctx.reg * penalty;
        if !loss.is_finite() {
            return Err(Error::Training {
                epoch: None,
                event: None,
                detail: format!("non-finite {} objective {loss}", ctx.kind),
            });
        }
        Ok(loss)
    }
}

/// Mean event loss over `batch` plus `reg * (|U|^2 + |V|^2)`, and its
/// analytic gradient. Negatives for the pairwise kinds are drawn from `rng`,
/// so the same handle always yields the same objective.
pub fn loss_and_gradient(
    ctx: &LossContext,
    params: &ModelParams,
    batch: &[ChoiceEvent],
    rng: RngHandle,
) -> Result<(f64, ModelParams)> {
    for e in batch {
        validate_event(params, e)?;
    }
    let mut grad = ModelParams::zeros_like(params);
    let loss = Evaluator::new().evaluate(ctx, params, batch, rng, Some(&mut grad))?;
    Ok((loss, grad))
}

/// Items sorted by descending score, ties by ascending id.
pub fn predict_ranking(params: &ModelParams, user: UserId, items: &[ItemId]) -> Vec<ItemId> {
    let mut scored: Vec<(f64, ItemId)> = items.iter().map(|&i| (params.score(user, i), i)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    scored.into_iter().map(|(_, i)| i).collect()
}

/// Fills every parameter with i.i.d. normal(0, sd) draws, in layout order.
pub fn randomize(params: &mut ModelParams, sd: f64, rng: RngHandle) {
    let normal = Normal::new(0.0, sd).expect("finite sd");
    let mut rng = rng.rng();
    for v in params.values.iter_mut() {
        *v = normal.sample(&mut rng);
    }
}

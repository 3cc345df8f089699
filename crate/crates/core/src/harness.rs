//! Runs full experiments from one declarative config and writes the result
//! tables.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::design::{build_null_pair, build_pair, solve_force_prob, DatasetPair, Experiment, PairLabel, PairSettings, SessionCounts, SlateSampler};
use crate::domain::{build_catalog, partition_users, ItemCatalog, UserSplit};
use crate::error::{Error, Result};
use crate::eval::{pair_bias, AccuracyReport, BiasReport, PairStreams, Relevance, DEFAULT_NDCG_K};
use crate::models::{ModelKind, NestStructure};
use crate::oracle::{sample_population, BehaviorSpec, LatentPopulation};
use crate::par::map_indexed;
use crate::rng::{purpose, streams, RngHandle};
use crate::stats::mean;
use crate::train::HyperParams;

pub const ARTIFACT: &str = "exposure-lab";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
pub const CONFIDENCE_LEVEL: f64 = 0.95;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "defaults::n_users")]
    pub n_users: usize,
    #[serde(default = "defaults::eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default = "defaults::n_items")]
    pub n_items: usize,
    #[serde(default = "defaults::size_a")]
    pub size_a: usize,
    #[serde(default = "defaults::n_bias")]
    pub n_bias: usize,
    #[serde(default = "defaults::slate_size")]
    pub slate_size: usize,
    #[serde(default)]
    pub sessions: SessionCounts,
    #[serde(default = "defaults::target_ratio")]
    pub target_ratio: f64,
    /// Competitor pool size; `None` means a quarter of the non-bias set_b items.
    #[serde(default)]
    pub quartile_size: Option<usize>,
    #[serde(default)]
    pub behavior: BehaviorSpec,
    #[serde(default = "defaults::population_dim")]
    pub population_dim: usize,
    #[serde(default = "defaults::n_nests")]
    pub n_nests: usize,
    #[serde(default = "defaults::models")]
    pub models: Vec<ModelKind>,
    #[serde(default = "defaults::experiments")]
    pub experiments: Vec<PairLabel>,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default = "defaults::n_repetitions")]
    pub n_repetitions: usize,
    #[serde(default = "defaults::n_null")]
    pub n_null: usize,
    /// Draw a fresh population for every repetition instead of sharing one.
    #[serde(default)]
    pub resample_population: bool,
    /// Repetition whose population gets a NaN utility, for failure drills.
    #[serde(default)]
    pub poison_repetition: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

mod defaults {
    use super::*;

    pub fn n_users() -> usize {
        300
    }
    pub fn eval_fraction() -> f64 {
        1.0 / 3.0
    }
    pub fn n_items() -> usize {
        100
    }
    pub fn size_a() -> usize {
        50
    }
    pub fn n_bias() -> usize {
        5
    }
    pub fn slate_size() -> usize {
        4
    }
    pub fn target_ratio() -> f64 {
        3.2
    }
    pub fn population_dim() -> usize {
        8
    }
    pub fn n_nests() -> usize {
        10
    }
    pub fn models() -> Vec<ModelKind> {
        ModelKind::ALL.to_vec()
    }
    pub fn experiments() -> Vec<PairLabel> {
        vec![PairLabel::Overexposure, PairLabel::Competition]
    }
    pub fn n_repetitions() -> usize {
        50
    }
    pub fn n_null() -> usize {
        20
    }
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults deserialize")
    }

    /// Parses a bare config document or a manifest that embeds one under `config`.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
        let body = match value.get("config") {
            Some(inner) if value.get("artifact").is_some() => inner.clone(),
            _ => value,
        };
        serde_json::from_value(body).map_err(|e| Error::config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks every field eagerly; errors name the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::config("models must list at least one model kind"));
        }
        if self.experiments.is_empty() {
            return Err(Error::config("experiments must list at least one pair kind"));
        }
        for (k, m) in self.models.iter().enumerate() {
            if self.models[..k].contains(m) {
                return Err(Error::config(format!("models lists {m} twice")));
            }
        }
        for (k, e) in self.experiments.iter().enumerate() {
            if self.experiments[..k].contains(e) {
                return Err(Error::config(format!("experiments lists {} twice", label_str(*e))));
            }
        }
        if self.n_repetitions < 2 {
            return Err(Error::config(format!("n_repetitions must be at least 2, got {}", self.n_repetitions)));
        }
        if self.n_null == 0 {
            return Err(Error::config("n_null must be at least 1"));
        }
        if self.population_dim == 0 {
            return Err(Error::config("population_dim must be at least 1"));
        }
        if self.n_nests == 0 || self.n_nests > self.n_items {
            return Err(Error::config(format!("n_nests must be in 1..={}, got {}", self.n_items, self.n_nests)));
        }
        if self.slate_size < 2 {
            return Err(Error::config(format!("slate_size must be at least 2, got {}", self.slate_size)));
        }
        if let Some(r) = self.poison_repetition {
            if r >= self.n_repetitions {
                return Err(Error::config(format!("poison_repetition {r} is not below n_repetitions {}", self.n_repetitions)));
            }
        }
        self.behavior.validate()?;
        self.hyper.validate()?;
        let catalog = build_catalog(self.n_items, self.size_a, self.n_bias, RngHandle::new(self.seed, streams::CATALOG))?;
        partition_users(self.n_users, self.eval_fraction, RngHandle::new(self.seed, streams::SPLIT))?;
        let settings = self.pair_settings(&catalog)?;
        let popularity = vec![0.0; self.n_items];
        for label in &self.experiments {
            for block in crate::design::session_blocks(*label, &settings) {
                SlateSampler::new(block.policy, &catalog, &popularity, self.slate_size)?;
            }
        }
        Ok(())
    }

    fn pair_settings(&self, catalog: &ItemCatalog) -> Result<PairSettings> {
        Ok(PairSettings {
            slate_size: self.slate_size,
            counts: self.sessions,
            force_prob: solve_force_prob(self.target_ratio, catalog, self.slate_size)?,
            quartile_size: self.quartile_size.unwrap_or_else(|| PairSettings::default_quartile(catalog)),
        })
    }
}

pub fn label_str(label: PairLabel) -> &'static str {
    match label {
        PairLabel::Overexposure => "overexposure",
        PairLabel::Competition => "competition",
        PairLabel::Null => "null",
    }
}

fn label_tag(label: PairLabel) -> u64 {
    match label {
        PairLabel::Overexposure => purpose::OVEREXPOSURE,
        PairLabel::Competition => purpose::COMPETITION,
        PairLabel::Null => purpose::NULL_SLATES_B,
    }
}

fn model_tag(kind: ModelKind) -> u64 {
    purpose::MODEL + kind.index() as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact: String,
    pub version: String,
    pub config: ExperimentConfig,
    pub force_prob: f64,
    pub quartile_size: usize,
    pub catalog: ItemCatalog,
    pub eval_users: Vec<usize>,
    /// How per-item shifts are aggregated.
    pub rank_aggregation: String,
    pub notes: Vec<String>,
}

/// One line of results.jsonl: one member of one pair for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRecord {
    pub repetition: usize,
    pub experiment: String,
    pub model: ModelKind,
    pub member: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ndcg_at_10: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_loss: Option<f64>,
    /// Training loss after each epoch; empty for unparameterized kinds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_trace: Option<Vec<f64>>,
    /// Mean eval rank of each bias item under this member's model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias_item_ranks: Option<Vec<f64>>,
    /// Pair-level mean shift, repeated on both member lines.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pair_mean_shift: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionFailure {
    pub repetition: usize,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NullCorrection {
    pub model: ModelKind,
    pub null_bias: f64,
    /// Mean shift of each null pair.
    pub pair_shifts: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsBundle {
    pub manifest: Manifest,
    pub records: Vec<RepetitionRecord>,
    pub null_corrections: Vec<NullCorrection>,
    pub bias_reports: Vec<BiasReport>,
    pub accuracy_reports: Vec<AccuracyReport>,
    pub failures: Vec<RepetitionFailure>,
}

impl ResultsBundle {
    pub fn bias(&self, experiment: PairLabel, model: ModelKind) -> Option<&BiasReport> {
        self.bias_reports.iter().find(|r| r.experiment == label_str(experiment) && r.model == model)
    }

    pub fn accuracy(&self, experiment: PairLabel, member: &str, model: ModelKind) -> Option<&AccuracyReport> {
        self.accuracy_reports
            .iter()
            .find(|r| r.experiment == label_str(experiment) && r.member == member && r.model == model)
    }
}

/// Per-model outcome of one pair.
#[derive(Clone, Debug)]
struct ModelOutcome {
    shifts: Vec<f64>,
    ranks: [Vec<f64>; 2],
    ndcg: [f64; 2],
    loss: [f64; 2],
    traces: [Vec<f64>; 2],
}

struct World {
    catalog: Arc<ItemCatalog>,
    split: Arc<UserSplit>,
    pop: LatentPopulation,
    relevance: Relevance,
    nests: NestStructure,
    settings: PairSettings,
}

fn evaluate_pair(world: &World, relevance: &Relevance, pair: &DatasetPair, models: &[ModelKind], hyper: &HyperParams, rng: RngHandle) -> Result<Vec<ModelOutcome>> {
    models
        .iter()
        .map(|&kind| {
            let out = pair_bias(kind, pair, &world.split, &world.catalog, hyper, &world.nests, PairStreams::derive(rng.child(model_tag(kind))))?;
            let ranks = [&out.treated, &out.control].map(|m| {
                let r = crate::eval::mean_eval_rank(m, &world.split, &world.catalog);
                world.catalog.bias_set.iter().map(|&i| r.get(i).unwrap_or(f64::NAN)).collect::<Vec<_>>()
            });
            let nd_t = relevance.ndcg(&out.treated.params, &world.catalog, DEFAULT_NDCG_K)?;
            let nd_c = relevance.ndcg(&out.control.params, &world.catalog, DEFAULT_NDCG_K)?;
            Ok(ModelOutcome {
                shifts: out.shifts,
                ranks,
                ndcg: [nd_t, nd_c],
                loss: [out.treated.final_loss, out.control.final_loss],
                traces: [out.treated.loss_trace.clone(), out.control.loss_trace.clone()],
            })
        })
        .collect()
}

fn run_repetition(world: &World, config: &ExperimentConfig, r: usize) -> Result<Vec<Vec<ModelOutcome>>> {
    let rng = RngHandle::new(config.seed, r as u64);
    let resampled;
    let (pop, relevance) = if config.resample_population {
        let p = sample_population(config.n_users, config.n_items, config.population_dim, rng.child(purpose::POPULATION))?;
        let rel = Relevance::from_population(&p, &world.split, &world.catalog);
        resampled = (p, rel);
        (&resampled.0, &resampled.1)
    } else {
        (&world.pop, &world.relevance)
    };
    let poisoned;
    let pop = if config.poison_repetition == Some(r) {
        poisoned = pop.with_nan_item(world.catalog.bias_set[0]);
        &poisoned
    } else {
        pop
    };
    config
        .experiments
        .iter()
        .map(|&label| {
            let exp_rng = rng.child(label_tag(label));
            let pair = match label {
                PairLabel::Overexposure => build_pair(pop, &world.catalog, &world.split, Experiment::Overexposure, &config.behavior, &world.settings, exp_rng)?,
                PairLabel::Competition => build_pair(pop, &world.catalog, &world.split, Experiment::Competition, &config.behavior, &world.settings, exp_rng)?,
                PairLabel::Null => build_null_pair(pop, &world.catalog, &world.split, &config.behavior, &world.settings, false, exp_rng)?,
            };
            evaluate_pair(world, relevance, &pair, &config.models, &config.hyper, exp_rng)
        })
        .collect()
}

/// Null pair `j` (stream `NULL_BASE + j`): mean shift per model.
fn run_null(world: &World, config: &ExperimentConfig, j: usize) -> Result<Vec<f64>> {
    let rng = RngHandle::new(config.seed, streams::NULL_BASE + j as u64);
    let pair = build_null_pair(&world.pop, &world.catalog, &world.split, &config.behavior, &world.settings, false, rng)?;
    config
        .models
        .iter()
        .map(|&kind| {
            let out = pair_bias(kind, &pair, &world.split, &world.catalog, &config.hyper, &world.nests, PairStreams::derive(rng.child(model_tag(kind))))?;
            Ok(out.shifts.iter().sum::<f64>() / out.shifts.len() as f64)
        })
        .collect()
}

/// Runs every repetition and null pair on `workers` threads. Output does
/// not depend on `workers`.
pub fn run_experiment(config: &ExperimentConfig, workers: usize) -> Result<ResultsBundle> {
    config.validate()?;
    let catalog = Arc::new(build_catalog(config.n_items, config.size_a, config.n_bias, RngHandle::new(config.seed, streams::CATALOG))?);
    let split = Arc::new(partition_users(config.n_users, config.eval_fraction, RngHandle::new(config.seed, streams::SPLIT))?);
    let pop = sample_population(config.n_users, config.n_items, config.population_dim, RngHandle::new(config.seed, streams::POPULATION))?;
    let nests = NestStructure::random(config.n_items, config.n_nests, RngHandle::new(config.seed, streams::NESTS))?;
    let settings = config.pair_settings(&catalog)?;
    let relevance = Relevance::from_population(&pop, &split, &catalog);
    let world = World {
        catalog,
        split,
        pop,
        relevance,
        nests,
        settings,
    };

    enum Job {
        Repetition(usize),
        Null(usize),
    }
    enum JobResult {
        Repetition(Result<Vec<Vec<ModelOutcome>>>),
        Null(Result<Vec<f64>>),
    }
    let jobs: Vec<Job> = (0..config.n_repetitions).map(Job::Repetition).chain((0..config.n_null).map(Job::Null)).collect();
    let results = map_indexed(jobs.len(), workers, |k| match jobs[k] {
        Job::Repetition(r) => JobResult::Repetition(run_repetition(&world, config, r)),
        Job::Null(j) => JobResult::Null(run_null(&world, config, j)),
    });
    let mut reps = Vec::new();
    let mut nulls = Vec::new();
    for res in results {
        match res {
            JobResult::Repetition(r) => reps.push(r),
            JobResult::Null(n) => nulls.push(n),
        }
    }
    let null_shifts: Vec<Vec<f64>> = nulls.into_iter().collect::<Result<_>>()?;
    let null_corrections: Vec<NullCorrection> = config
        .models
        .iter()
        .enumerate()
        .map(|(m, &model)| {
            let pair_shifts: Vec<f64> = null_shifts.iter().map(|v| v[m]).collect();
            NullCorrection {
                model,
                null_bias: mean(&pair_shifts),
                pair_shifts,
            }
        })
        .collect();

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (r, rep) in reps.iter().enumerate() {
        for (e, &label) in config.experiments.iter().enumerate() {
            for (m, &model) in config.models.iter().enumerate() {
                for (side, member) in ["treated", "control"].into_iter().enumerate() {
                    let base = RepetitionRecord {
                        repetition: r,
                        experiment: label_str(label).to_string(),
                        model,
                        member: member.to_string(),
                        status: "ok".to_string(),
                        error: None,
                        ndcg_at_10: None,
                        final_loss: None,
                        loss_trace: None,
                        bias_item_ranks: None,
                        pair_mean_shift: None,
                    };
                    records.push(match rep {
                        Ok(out) => {
                            let o = &out[e][m];
                            RepetitionRecord {
                                ndcg_at_10: Some(o.ndcg[side]),
                                final_loss: Some(o.loss[side]),
                                loss_trace: Some(o.traces[side].clone()),
                                bias_item_ranks: Some(o.ranks[side].clone()),
                                pair_mean_shift: Some(mean(&o.shifts)),
                                ..base
                            }
                        }
                        Err(err) => RepetitionRecord {
                            status: "failed".to_string(),
                            error: Some(err.to_string()),
                            ..base
                        },
                    });
                }
            }
        }
        if let Err(err) = rep {
            failures.push(RepetitionFailure {
                repetition: r,
                error: err.to_string(),
            });
        }
    }

    let ok: Vec<&Vec<Vec<ModelOutcome>>> = reps.iter().filter_map(|r| r.as_ref().ok()).collect();
    let mut bias_reports = Vec::new();
    let mut accuracy_reports = Vec::new();
    if ok.len() >= 2 {
        let boot = RngHandle::new(config.seed, streams::BOOTSTRAP);
        for (e, &label) in config.experiments.iter().enumerate() {
            let exp = label_str(label);
            for (m, &model) in config.models.iter().enumerate() {
                let rng = boot.child(label_tag(label)).child(model_tag(model));
                let shifts: Vec<Vec<f64>> = ok.iter().map(|o| o[e][m].shifts.clone()).collect();
                bias_reports.push(BiasReport::from_repetitions(
                    model,
                    exp,
                    &world.catalog.bias_set,
                    &shifts,
                    &null_corrections[m].pair_shifts,
                    CONFIDENCE_LEVEL,
                    rng,
                )?);
                for (side, member) in ["treated", "control"].into_iter().enumerate() {
                    let values: Vec<f64> = ok.iter().map(|o| o[e][m].ndcg[side]).collect();
                    accuracy_reports.push(AccuracyReport::from_repetitions(
                        model,
                        exp,
                        member,
                        DEFAULT_NDCG_K,
                        &values,
                        CONFIDENCE_LEVEL,
                        rng.child(side as u64 + 1),
                    )?);
                }
            }
        }
    }

    let manifest = Manifest {
        artifact: ARTIFACT.to_string(),
        version: VERSION.to_string(),
        config: config.clone(),
        force_prob: world.settings.force_prob,
        quartile_size: world.settings.quartile_size,
        catalog: (*world.catalog).clone(),
        eval_users: world.split.eval_users.clone(),
        rank_aggregation: "mean rank over evaluation users per bias item, then mean over bias items".to_string(),
        notes: vec![
            "population: factors normal(0, 1/sqrt(population_dim)), intercepts normal(0, 0.5); shared across repetitions unless resample_population".to_string(),
            "gev nests: random balanced partition of the catalog into n_nests nests".to_string(),
            "latent dimension, regularization, nest count and optimizer settings are assumed defaults".to_string(),
            "competition pairs share sessions.competition_anchor uniform set_b slates in both members".to_string(),
            "null correction: mean bias over n_null null pairs, subtracted per model in every experiment".to_string(),
        ],
    };
    Ok(ResultsBundle {
        manifest,
        records,
        null_corrections,
        bias_reports,
        accuracy_reports,
        failures,
    })
}

/// Small randomized instance for gradient checks: a few users, items and
/// nests, with events drawn from a uniform set_b session.
pub fn gradient_instance(seed: u64) -> Result<(Vec<crate::domain::ChoiceEvent>, crate::train::ModelShape, HyperParams, NestStructure)> {
    let rng = RngHandle::new(seed, 0);
    let (n_users, n_items) = (6, 12);
    let catalog = Arc::new(build_catalog(n_items, 6, 2, rng.child(1))?);
    let split = Arc::new(partition_users(n_users, 1.0 / 3.0, rng.child(2))?);
    let pop = sample_population(n_users, n_items, 3, rng.child(3))?;
    let settings = PairSettings {
        slate_size: 3,
        counts: SessionCounts {
            uniform_a: 2,
            uniform_b: 2,
            overexpose_bias: 0,
            compete_popular: 0,
            compete_unpopular: 0,
            competition_anchor: 0,
        },
        force_prob: 0.0,
        quartile_size: 1,
    };
    let pair = build_null_pair(&pop, &catalog, &split, &BehaviorSpec::default(), &settings, false, rng.child(4))?;
    let events = crate::design::training_view(&pair.treated, &split, &catalog);
    let nests = NestStructure::random(n_items, 3, rng.child(5))?;
    let hyper = HyperParams {
        dim: 3,
        reg: 1e-2,
        ..HyperParams::default()
    };
    let shape = crate::train::ModelShape { n_users, n_items };
    Ok((events, shape, hyper, nests))
}

/// Max relative gradient error of `kind` on `runs` independent instances.
pub fn gradient_suite(kind: ModelKind, runs: usize, seed: u64) -> Result<Vec<f64>> {
    (0..runs as u64)
        .map(|r| {
            let (events, shape, hyper, nests) = gradient_instance(seed.wrapping_add(r))?;
            crate::train::gradient_check(kind, &events, shape, &hyper, &nests, RngHandle::new(seed.wrapping_add(r), 1))
        })
        .collect()
}

fn fmt(x: f64) -> String {
    format!("{x:.6}")
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents).map_err(|e| Error::io(path, e))
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.into_inner().map_err(|e| Error::Internal(format!("csv buffer: {e}")))
}

/// The summary table: one row per experiment and model.
pub fn summary_csv(bundle: &ResultsBundle) -> Result<Vec<u8>> {
    let rows = bundle
        .bias_reports
        .iter()
        .map(|b| {
            let nd = |member: &str| {
                bundle
                    .accuracy_reports
                    .iter()
                    .find(|a| a.experiment == b.experiment && a.model == b.model && a.member == member)
                    .map(|a| fmt(a.ndcg_at_k))
                    .unwrap_or_default()
            };
            vec![b.experiment.clone(), b.model.to_string(), fmt(b.corrected_bias), fmt(b.ci_low), fmt(b.ci_high), nd("treated"), nd("control")]
        })
        .collect();
    csv_bytes(&["experiment", "model", "corrected_bias", "ci_low", "ci_high", "ndcg_treated", "ndcg_control"], rows)
}

/// Writes manifest.json, results.jsonl, reports.jsonl, summary.csv and the
/// two plot tables. A non-empty `dir` is refused unless `force`.
pub fn emit_outputs(bundle: &ResultsBundle, dir: &Path, force: bool) -> Result<Vec<PathBuf>> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Error::config(format!("output directory {} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, bytes: Vec<u8>| -> Result<()> {
        let path = dir.join(name);
        write_file(&path, &bytes)?;
        written.push(path);
        Ok(())
    };

    let mut manifest = serde_json::to_vec_pretty(&bundle.manifest)?;
    manifest.push(b'\n');
    put("manifest.json", manifest)?;

    let mut results = Vec::new();
    for r in &bundle.records {
        serde_json::to_writer(&mut results, r)?;
        results.push(b'\n');
    }
    put("results.jsonl", results)?;

    let mut reports = Vec::new();
    for r in &bundle.null_corrections {
        serde_json::to_writer(&mut reports, &serde_json::json!({ "record": "null_correction", "model": r.model, "null_bias": r.null_bias, "pair_shifts": r.pair_shifts }))?;
        reports.push(b'\n');
    }
    for r in &bundle.bias_reports {
        let mut v = serde_json::to_value(r)?;
        v["record"] = "bias_report".into();
        serde_json::to_writer(&mut reports, &v)?;
        reports.push(b'\n');
    }
    for r in &bundle.accuracy_reports {
        let mut v = serde_json::to_value(r)?;
        v["record"] = "accuracy_report".into();
        serde_json::to_writer(&mut reports, &v)?;
        reports.push(b'\n');
    }
    for f in &bundle.failures {
        let mut v = serde_json::to_value(f)?;
        v["record"] = "failure".into();
        serde_json::to_writer(&mut reports, &v)?;
        reports.push(b'\n');
    }
    put("reports.jsonl", reports)?;

    put("summary.csv", summary_csv(bundle)?)?;

    let bias_rows = bundle
        .bias_reports
        .iter()
        .map(|b| vec![b.experiment.clone(), b.model.to_string(), fmt(b.corrected_bias), fmt(b.ci_low), fmt(b.ci_high)])
        .collect();
    put("plotdata_bias.csv", csv_bytes(&["experiment", "model", "mean", "ci_low", "ci_high"], bias_rows)?)?;

    let ndcg_rows = bundle
        .accuracy_reports
        .iter()
        .map(|a| vec![a.experiment.clone(), a.member.clone(), a.model.to_string(), fmt(a.ndcg_at_k), fmt(a.ci_low), fmt(a.ci_high)])
        .collect();
    put("plotdata_ndcg.csv", csv_bytes(&["experiment", "member", "model", "mean", "ci_low", "ci_high"], ndcg_rows)?)?;
    Ok(written)
}

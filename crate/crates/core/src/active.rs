//! Pool-based batch active learning: growth schedules, the simulated
//! annotator, and the train / score / query loop.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acquisition::{random_score, select_top_b, Acquisition};
use crate::data::Dataset;
use crate::ensemble::{train, Dpe, Regularizer, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::LayerSpec;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthKind {
    Linear,
    Exponential,
}

/// Per-round query sizes. Linear repeats `b0`; exponential starts with two
/// rounds of `b0` and doubles afterwards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthSchedule {
    pub kind: GrowthKind,
    pub b0: usize,
    pub rounds: usize,
    pub budget: usize,
}

impl GrowthSchedule {
    pub fn linear(b0: usize, rounds: usize) -> Self {
        Self::with_budget(GrowthKind::Linear, b0, rounds)
    }

    pub fn exponential(b0: usize, rounds: usize) -> Self {
        Self::with_budget(GrowthKind::Exponential, b0, rounds)
    }

    fn with_budget(kind: GrowthKind, b0: usize, rounds: usize) -> Self {
        let mut s = GrowthSchedule {
            kind,
            b0,
            rounds,
            budget: 0,
        };
        s.budget = s.raw_batches().iter().sum();
        s
    }

    fn raw_batches(&self) -> Vec<usize> {
        match self.kind {
            GrowthKind::Linear => vec![self.b0; self.rounds],
            GrowthKind::Exponential => (0..self.rounds)
                .map(|r| self.b0.saturating_mul(1usize.checked_shl(r.saturating_sub(1) as u32).unwrap_or(usize::MAX)))
                .collect(),
        }
    }

    /// Cumulative labeled count after each round.
    pub fn cumulative(&self) -> Result<Vec<usize>> {
        Ok(schedule_batches(self)?
            .iter()
            .scan(0, |acc, b| {
                *acc += b;
                Some(*acc)
            })
            .collect())
    }
}

/// Query size of every round, round 0 being the random seed round.
pub fn schedule_batches(s: &GrowthSchedule) -> Result<Vec<usize>> {
    if s.b0 == 0 || s.rounds == 0 {
        return Err(Error::Config("growth schedule needs b0 >= 1 and rounds >= 1".into()));
    }
    if s.kind == GrowthKind::Exponential && s.rounds > 40 {
        return Err(Error::Config(format!("{} exponential rounds overflow the budget", s.rounds)));
    }
    let batches = s.raw_batches();
    let total: usize = batches.iter().sum();
    if total != s.budget {
        return Err(Error::Config(format!(
            "{:?} schedule with b0 = {} over {} rounds labels {total} units, not the budget {}",
            s.kind, s.b0, s.rounds, s.budget
        )));
    }
    Ok(batches)
}

/// Ground-truth oracle revealing the label of a unit.
pub trait Annotator {
    type Label: Clone;

    fn label(&self, unit_id: usize) -> Result<Self::Label>;
}

/// Annotator backed by a table indexed by unit id.
#[derive(Debug, Clone)]
pub struct TableAnnotator<L>(pub Vec<L>);

impl<L: Clone> Annotator for TableAnnotator<L> {
    type Label = L;

    fn label(&self, unit_id: usize) -> Result<L> {
        self.0
            .get(unit_id)
            .cloned()
            .ok_or_else(|| Error::Bounds(format!("unit {unit_id} outside the annotator's {} units", self.0.len())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub round: usize,
    pub unit_id: usize,
    pub score: f64,
}

/// Labeled and unlabeled unit ids plus the labels revealed so far.
#[derive(Debug, Clone)]
pub struct Pool<L> {
    labeled: BTreeSet<usize>,
    unlabeled: BTreeSet<usize>,
    revealed: BTreeMap<usize, L>,
    query_log: Vec<QueryRecord>,
}

impl<L: Clone> Pool<L> {
    /// A fully unlabeled pool.
    pub fn new(ids: impl IntoIterator<Item = usize>) -> Self {
        Pool {
            labeled: BTreeSet::new(),
            unlabeled: ids.into_iter().collect(),
            revealed: BTreeMap::new(),
            query_log: Vec::new(),
        }
    }

    pub fn labeled(&self) -> &BTreeSet<usize> {
        &self.labeled
    }

    pub fn unlabeled(&self) -> &BTreeSet<usize> {
        &self.unlabeled
    }

    pub fn revealed(&self) -> &BTreeMap<usize, L> {
        &self.revealed
    }

    pub fn query_log(&self) -> &[QueryRecord] {
        &self.query_log
    }

    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reveal the labels of `queries` (unit id, score). Every id is checked
    /// before any state changes, so a rejected request leaves the pool as
    /// it was.
    pub fn annotate<A: Annotator<Label = L>>(
        &mut self,
        annotator: &A,
        queries: &[(usize, f64)],
        round: usize,
    ) -> Result<Vec<(usize, L)>> {
        let mut seen = BTreeSet::new();
        for &(id, _) in queries {
            if self.labeled.contains(&id) {
                return Err(Error::Protocol(format!("unit {id} was already queried")));
            }
            if !self.unlabeled.contains(&id) {
                return Err(Error::Bounds(format!("unit {id} is not in the pool")));
            }
            if !seen.insert(id) {
                return Err(Error::Protocol(format!("unit {id} requested twice in one batch")));
            }
        }
        let labels = queries
            .iter()
            .map(|&(id, _)| annotator.label(id).map(|l| (id, l)))
            .collect::<Result<Vec<_>>>()?;
        for (&(id, score), (_, label)) in queries.iter().zip(&labels) {
            self.unlabeled.remove(&id);
            self.labeled.insert(id);
            self.revealed.insert(id, label.clone());
            self.query_log.push(QueryRecord { round, unit_id: id, score });
        }
        Ok(labels)
    }
}

/// Result of training one round's model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundFit {
    pub val_metric: f64,
    pub train_epochs: usize,
}

/// A model family the loop can retrain and query.
pub trait ActiveTask {
    type Label: Clone;

    /// Train a freshly initialized model on the revealed labels and report
    /// its validation metric.
    fn fit(&mut self, labeled: &BTreeMap<usize, Self::Label>, seed: u64) -> Result<RoundFit>;

    /// Score the given unlabeled units with the model from the last `fit`.
    fn score(&mut self, unlabeled: &[usize], acquisition: &Acquisition, seed: u64) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub labeled_count: usize,
    pub acquisition: String,
    pub val_metric: f64,
    pub train_epochs: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub acquisition: String,
    pub seed: u64,
    pub schedule: GrowthSchedule,
    pub rounds: Vec<RoundRecord>,
    #[serde(skip)]
    pub query_log: Vec<QueryRecord>,
}

impl ExperimentRecord {
    pub fn final_metric(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.val_metric)
    }

    /// Metric of the last round whose labeled count is at most `count`.
    pub fn metric_at(&self, count: usize) -> Option<f64> {
        self.rounds.iter().rev().find(|r| r.labeled_count <= count).map(|r| r.val_metric)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn write_query_log(&self, path: &Path) -> Result<()> {
        write_query_log(&self.query_log, path)
    }
}

/// CSV with header `round,unit_id,score`.
pub fn write_query_log(log: &[QueryRecord], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "round,unit_id,score").map_err(io)?;
    for q in log {
        writeln!(w, "{},{},{}", q.round, q.unit_id, q.score).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActiveConfig {
    pub seed: u64,
    /// Allow a pool smaller than the budget: the last query shrinks to the
    /// remaining units and the experiment ends at exhaustion.
    #[serde(default)]
    pub clamp_to_pool: bool,
}

/// Run the loop: a random seed round, then for every round train a fresh
/// model, record its metric and, unless it is the last round, query the
/// next batch by acquisition score.
pub fn run_active<T, A>(
    task: &mut T,
    pool: &mut Pool<T::Label>,
    annotator: &A,
    schedule: &GrowthSchedule,
    acquisition: &Acquisition,
    cfg: &ActiveConfig,
) -> Result<ExperimentRecord>
where
    T: ActiveTask,
    A: Annotator<Label = T::Label>,
{
    let batches = schedule_batches(schedule)?;
    if !pool.labeled.is_empty() {
        return Err(Error::Usage("the pool must start fully unlabeled".into()));
    }
    if pool.len() < schedule.budget && !cfg.clamp_to_pool {
        return Err(Error::Config(format!(
            "pool of {} units is smaller than the budget {}",
            pool.len(),
            schedule.budget
        )));
    }
    let mut record = ExperimentRecord {
        acquisition: acquisition.name().to_owned(),
        seed: cfg.seed,
        schedule: schedule.clone(),
        rounds: Vec::new(),
        query_log: Vec::new(),
    };

    let query = |pool: &mut Pool<T::Label>, scored: Vec<(usize, f64)>, b: usize, round: usize| -> Result<bool> {
        let take = b.min(pool.unlabeled.len());
        if take < b {
            log::warn!("round {round}: {b} queries requested, only {take} unlabeled units remain");
        }
        let picked = select_top_b(&scored, take);
        let score_of: BTreeMap<usize, f64> = scored.into_iter().collect();
        let queries: Vec<(usize, f64)> = picked.iter().map(|id| (*id, score_of[id])).collect();
        pool.annotate(annotator, &queries, round)?;
        Ok(take == b)
    };

    let seed0 = seed::derive_tagged(cfg.seed, "query", 0);
    let scored = pool.unlabeled.iter().map(|&id| (id, random_score(id, seed0))).collect();
    let mut complete = query(pool, scored, batches[0], 0)?;

    for round in 0..batches.len() {
        let start = Instant::now();
        let labeled_count = pool.labeled.len();
        let fit = task.fit(&pool.revealed, seed::derive_tagged(cfg.seed, "round", round as u64))?;
        let mut seconds = start.elapsed().as_secs_f64();
        log::info!(
            "{} round {round}: {labeled_count} labeled, metric {:.4}, {} epochs",
            acquisition.name(),
            fit.val_metric,
            fit.train_epochs
        );
        let last = round + 1 == batches.len() || !complete || pool.unlabeled.is_empty();
        if !last {
            let t = Instant::now();
            let ids: Vec<usize> = pool.unlabeled.iter().copied().collect();
            let query_seed = seed::derive_tagged(cfg.seed, "query", round as u64 + 1);
            let scores = task.score(&ids, acquisition, query_seed)?;
            if scores.len() != ids.len() {
                return Err(Error::Shape(format!("{} scores for {} units", scores.len(), ids.len())));
            }
            complete = query(pool, ids.into_iter().zip(scores).collect(), batches[round + 1], round + 1)?;
            seconds += t.elapsed().as_secs_f64();
        }
        record.rounds.push(RoundRecord {
            round,
            labeled_count,
            acquisition: acquisition.name().to_owned(),
            val_metric: fit.val_metric,
            train_epochs: fit.train_epochs,
            seconds,
        });
        if last {
            break;
        }
    }
    record.query_log = pool.query_log.clone();
    Ok(record)
}

/// Classification over the rows of a dataset: unit ids are row indices.
#[derive(Debug, Clone)]
pub struct ClassificationTask {
    pub pool: Dataset,
    pub val: Dataset,
    pub layers: Vec<LayerSpec>,
    pub ensemble: usize,
    pub regularizer: Regularizer,
    pub train: TrainConfig,
    model: Option<Dpe>,
}

impl ClassificationTask {
    pub fn new(
        pool: Dataset,
        val: Dataset,
        layers: Vec<LayerSpec>,
        ensemble: usize,
        regularizer: Regularizer,
        train: TrainConfig,
    ) -> Self {
        ClassificationTask {
            pool,
            val,
            layers,
            ensemble,
            regularizer,
            train,
            model: None,
        }
    }

    /// Model trained in the last round.
    pub fn model(&self) -> Option<&Dpe> {
        self.model.as_ref()
    }

    /// Simulated annotator holding the pool's ground truth.
    pub fn annotator(&self) -> Result<TableAnnotator<usize>> {
        Ok(TableAnnotator(self.pool.class_labels()?.to_vec()))
    }
}

impl ActiveTask for ClassificationTask {
    type Label = usize;

    fn fit(&mut self, labeled: &BTreeMap<usize, usize>, seed: u64) -> Result<RoundFit> {
        let rows: Vec<usize> = labeled.keys().copied().collect();
        let mut train_set = self.pool.subset(&rows);
        train_set.labels = crate::data::Labels::Classes(labeled.values().copied().collect());
        let mut dpe = Dpe::new(self.layers.clone(), self.ensemble, self.regularizer, seed)?;
        let cfg = TrainConfig {
            seed: seed::derive(seed, 1),
            ..self.train.clone()
        };
        let log = train(&mut dpe, &train_set, &self.val, &cfg)?;
        let val_metric = dpe.predict(&self.val.inputs)?.accuracy(self.val.class_labels()?);
        self.model = Some(dpe);
        Ok(RoundFit {
            val_metric,
            train_epochs: log.epochs_run(),
        })
    }

    fn score(&mut self, unlabeled: &[usize], acquisition: &Acquisition, seed: u64) -> Result<Vec<f64>> {
        if !acquisition.needs_predictions() {
            return Ok(unlabeled.iter().map(|&id| random_score(id, seed)).collect());
        }
        let model = self.model.as_ref().ok_or_else(|| Error::Usage("score called before fit".into()))?;
        let pred = model.predict(&self.pool.inputs.select_rows(unlabeled))?;
        unlabeled
            .iter()
            .enumerate()
            .map(|(i, &id)| Ok(acquisition.score(id, &pred.prediction_set(i)?, seed)))
            .collect()
    }
}

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::active::{run_active, write_query_log, ActiveConfig, ClassificationTask, Pool, QueryRecord, RoundRecord};
use crate::data::{load_cifar_binary, load_idx, load_seg_pairs, synth_blobs, synth_shapes_seg, Dataset};
use crate::ensemble::{train, Dpe, TrainConfig};
use crate::error::{Error, Result};
use crate::seed;
use crate::seg::{evaluate, make_grid, train_seg, write_crop_log, IouReport, SegDpe, SegTask};

use super::config::{DataSpec, ExperimentConfig, TaskKind};
use super::stats::curves;

/// Everything recorded for one seed of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub task: TaskKind,
    pub acquisition: String,
    pub seed: u64,
    /// Number of validation units behind every metric.
    pub eval_count: usize,
    pub rounds: Vec<RoundRecord>,
    /// Per-class IoU of the final model (segmentation only).
    #[serde(default)]
    pub final_iou: Option<IouReport>,
    /// Metric of a model trained on the whole pool, if requested.
    #[serde(default)]
    pub full_supervision_metric: Option<f64>,
}

impl RunRecord {
    pub fn final_metric(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.val_metric)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn load_spec(spec: &DataSpec, data_seed: u64) -> Result<Dataset> {
    match spec {
        DataSpec::Blobs(b) => synth_blobs(b, data_seed),
        DataSpec::Shapes(s) => synth_shapes_seg(s, data_seed),
        DataSpec::Idx { images, labels, classes } => load_idx(images, labels, *classes),
        DataSpec::Cifar { files } => load_cifar_binary(files),
        DataSpec::SegPairs { dir, classes } => load_seg_pairs(dir, *classes),
    }
}

/// Pool and validation sets of one seed, normalized with pool statistics.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let data_seed = cfg.data_seed.unwrap_or_else(|| seed::derive_tagged(seed, "data", 0));
    let all = load_spec(&cfg.data, data_seed)?;
    let (pool, val) = match &cfg.val_data {
        Some(v) => (all, load_spec(v, seed::derive(data_seed, 1))?),
        None => all.split_holdout(cfg.holdout, seed::derive_tagged(data_seed, "holdout", 0))?,
    };
    if cfg.normalize {
        let pool = pool.normalize()?;
        let stats = pool.channel_stats.clone().expect("normalized pool carries stats");
        let val = val.normalize_with(&stats);
        Ok((pool, val))
    } else {
        Ok((pool, val))
    }
}

fn train_cfg(cfg: &ExperimentConfig, threads: Option<usize>) -> TrainConfig {
    TrainConfig {
        threads: threads.unwrap_or(cfg.train.threads),
        ..cfg.train.clone()
    }
}

/// Run one seed; returns the record and the query log.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, threads: Option<usize>) -> Result<(RunRecord, Vec<QueryRecord>)> {
    cfg.validate()?;
    let (pool, val) = prepare_data(cfg, seed)?;
    let acquisition = cfg.acquisition()?;
    let active = ActiveConfig {
        seed,
        clamp_to_pool: cfg.clamp_to_pool,
    };
    let train_config = train_cfg(cfg, threads);
    let (mut rounds, log, final_iou, full, eval_count) = match cfg.task {
        TaskKind::Classify => {
            let m = cfg.model.as_ref().expect("validated");
            let mut task = ClassificationTask::new(pool.clone(), val.clone(), m.arch.layers(), m.ensemble, m.regularizer, train_config.clone());
            let annotator = task.annotator()?;
            let mut p = Pool::new(0..pool.len());
            let rec = run_active(&mut task, &mut p, &annotator, &cfg.schedule, &acquisition, &active)?;
            let full = if cfg.full_supervision {
                let mut dpe = Dpe::new(m.arch.layers(), m.ensemble, m.regularizer, seed::derive_tagged(seed, "full", 0))?;
                let tc = TrainConfig {
                    seed: seed::derive_tagged(seed, "full", 1),
                    ..train_config
                };
                train(&mut dpe, &pool, &val, &tc)?;
                Some(dpe.predict(&val.inputs)?.accuracy(val.class_labels()?))
            } else {
                None
            };
            (rec.rounds, rec.query_log, None, full, val.len())
        }
        TaskKind::Segment => {
            let m = cfg.seg_model.as_ref().expect("validated");
            let grid = make_grid((pool.inputs.dim(3), pool.inputs.dim(2)), cfg.grid.cols, cfg.grid.rows)?;
            let (mut task, annotator) = SegTask::new(&pool, val.clone(), grid, m.clone(), train_config.clone())?;
            let mut p = Pool::new(task.units());
            let rec = run_active(&mut task, &mut p, &annotator, &cfg.schedule, &acquisition, &active)?;
            let full = if cfg.full_supervision {
                let mut model = SegDpe::new(m, seed::derive_tagged(seed, "full", 0))?;
                let everything: Vec<Vec<bool>> = (0..pool.len()).map(|_| vec![true; pool.inputs.dim(2) * pool.inputs.dim(3)]).collect();
                let tc = TrainConfig {
                    seed: seed::derive_tagged(seed, "full", 1),
                    ..train_config
                };
                train_seg(&mut model, &pool, &everything, &val, &tc)?;
                Some(evaluate(&model, &val)?.mean)
            } else {
                None
            };
            let hw = val.inputs.dim(2) * val.inputs.dim(3);
            (rec.rounds, rec.query_log, task.last_iou().cloned(), full, val.len() * hw)
        }
    };
    if !cfg.record_timings {
        rounds.iter_mut().for_each(|r| r.seconds = 0.0);
    }
    Ok((
        RunRecord {
            config_hash: cfg.hash(),
            task: cfg.task,
            acquisition: acquisition.name().to_owned(),
            seed,
            eval_count,
            rounds,
            final_iou,
            full_supervision_metric: full,
        },
        log,
    ))
}

pub fn record_path(out: &Path, acquisition: &str, seed: u64) -> PathBuf {
    out.join(format!("record_{acquisition}_seed{seed}.json"))
}

/// Run every seed, writing `record_*.json`, `queries_*.csv` and
/// `curves.csv` into `out`. An existing record from a different config is
/// an error; one from the same config is overwritten.
pub fn run(cfg: &ExperimentConfig, out: &Path, threads: Option<usize>) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let hash = cfg.hash();
    let acquisition = cfg.acquisition()?;
    for &seed in &cfg.seeds {
        let path = record_path(out, acquisition.name(), seed);
        if path.exists() {
            let old = RunRecord::load(&path)?;
            if old.config_hash != hash {
                return Err(Error::Config(format!(
                    "{} was produced by config {}, not {hash}",
                    path.display(),
                    old.config_hash
                )));
            }
        }
    }
    let mut records = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let (record, log) = run_seed(cfg, seed, threads)?;
        let path = record_path(out, &record.acquisition, seed);
        let json = serde_json::to_string_pretty(&record)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        let qpath = out.join(format!("queries_{}_seed{seed}.csv", record.acquisition));
        match cfg.task {
            TaskKind::Classify => write_query_log(&log, &qpath)?,
            TaskKind::Segment => {
                let (pool, _) = prepare_data(cfg, seed)?;
                let grid = make_grid((pool.inputs.dim(3), pool.inputs.dim(2)), cfg.grid.cols, cfg.grid.rows)?;
                write_crop_log(&log, &grid, &qpath)?;
            }
        }
        log::info!("seed {seed}: final metric {:?}", record.final_metric());
        records.push(record);
    }
    let curves_path = out.join(format!("curves_{}.csv", acquisition.name()));
    std::fs::write(&curves_path, curves(&records)).map_err(|e| Error::io(&curves_path, e))?;
    Ok(records)
}

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dpe::acquisition::random_score;
use dpe::data::pnm::{write_pnm, Pnm};
use dpe::data::{Dataset, Labels};
use dpe::ensemble::{train, Dpe, TrainConfig};
use dpe::report::{self, compare, curves, prepare_data, DataSpec, ExperimentConfig, RunRecord, TaskKind};
use dpe::{seed, Error, Result};

#[derive(Parser)]
#[command(name = "dpe", version, about = "Deep probabilistic ensembles for active learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for ensemble members; 0 is single-threaded.
    #[arg(long)]
    threads: Option<usize>,
    /// Replace the config's acquisition function.
    #[arg(long)]
    acquisition: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic pool of a config to disk.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the active-learning experiment for every seed.
    Active {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one ensemble on the whole pool and save a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score every pool unit with a trained checkpoint.
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output CSV `unit_id,score`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Validation accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare two sets of run records (files or directories).
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        a: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        b: Vec<PathBuf>,
    },
    /// Merge run records into one learning-curve CSV.
    Curves {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if let Some(a) = &common.acquisition {
        cfg.acquisition = a.clone();
    }
    if let Some(t) = common.threads {
        cfg.train.threads = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn classify_only(cfg: &ExperimentConfig, what: &str) -> Result<()> {
    if cfg.task != TaskKind::Classify {
        return Err(Error::Usage(format!("{what} supports classification configs only")));
    }
    Ok(())
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn synth(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    if !matches!(cfg.data, DataSpec::Blobs(_) | DataSpec::Shapes(_)) {
        return Err(Error::Usage("synth needs a synthetic data spec".into()));
    }
    create_dir(out)?;
    let raw = ExperimentConfig {
        normalize: false,
        ..cfg.clone()
    };
    let seed = cfg.seeds[0];
    let (pool, _) = prepare_data(&raw, seed)?;
    match &pool.labels {
        Labels::Classes(labels) => {
            let mut csv = String::new();
            let dim = pool.inputs.row_len();
            csv.push_str(&(0..dim).map(|i| format!("x{i}")).collect::<Vec<_>>().join(","));
            csv.push_str(",label\n");
            for (i, l) in labels.iter().enumerate() {
                let row: Vec<String> = pool.inputs.row(i).iter().map(f64::to_string).collect();
                csv.push_str(&format!("{},{l}\n", row.join(",")));
            }
            write_file(&out.join("blobs.csv"), csv)
        }
        Labels::Masks(masks) => {
            let (h, w) = (pool.inputs.dim(2), pool.inputs.dim(3));
            for (i, mask) in masks.iter().enumerate() {
                let planes = pool.inputs.row(i);
                let pixels = (0..h * w).flat_map(|p| (0..3).map(move |c| to_byte(planes[c * h * w + p]))).collect();
                let img = Pnm { width: w, height: h, channels: 3, maxval: 255, pixels };
                write_pnm(&out.join(format!("img{i:05}.ppm")), &img)?;
                let m = Pnm { width: w, height: h, channels: 1, maxval: 255, pixels: mask.clone() };
                write_pnm(&out.join(format!("img{i:05}.pgm")), &m)?;
            }
            Ok(())
        }
    }
}

fn full_train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    classify_only(cfg, "train")?;
    create_dir(out)?;
    let seed = cfg.seeds[0];
    let m = cfg.model.as_ref().expect("validated");
    let (pool, val) = prepare_data(cfg, seed)?;
    let mut dpe = Dpe::new(m.arch.layers(), m.ensemble, m.regularizer, seed::derive_tagged(seed, "full", 0))?;
    let tc = TrainConfig {
        seed: seed::derive_tagged(seed, "full", 1),
        ..cfg.train.clone()
    };
    let log = train(&mut dpe, &pool, &val, &tc)?;
    dpe.save(&out.join("model.ckpt"))?;
    write_file(&out.join("train_log.json"), serde_json::to_string_pretty(&log)?)?;
    let acc = dpe.predict(&val.inputs)?.accuracy(val.class_labels()?);
    println!("{}", serde_json::json!({ "val_accuracy": acc, "epochs": log.epochs_run() }));
    Ok(())
}

fn load_model(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(Dpe, Dataset, Dataset)> {
    classify_only(cfg, "this command")?;
    let m = cfg.model.as_ref().expect("validated");
    let dpe = Dpe::load_with(checkpoint, m.arch.layers(), m.regularizer)?;
    let (pool, val) = prepare_data(cfg, cfg.seeds[0])?;
    Ok((dpe, pool, val))
}

fn score(cfg: &ExperimentConfig, checkpoint: &Path, out: &Path) -> Result<()> {
    let (dpe, pool, _) = load_model(cfg, checkpoint)?;
    let acq = cfg.acquisition()?;
    let query_seed = seed::derive_tagged(cfg.seeds[0], "score", 0);
    let mut csv = String::from("unit_id,score\n");
    if acq.needs_predictions() {
        let pred = dpe.predict(&pool.inputs)?;
        for i in 0..pool.len() {
            csv.push_str(&format!("{i},{}\n", acq.score(i, &pred.prediction_set(i)?, query_seed)));
        }
    } else {
        for i in 0..pool.len() {
            csv.push_str(&format!("{i},{}\n", random_score(i, query_seed)));
        }
    }
    write_file(out, csv)
}

fn eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<()> {
    let (dpe, _, val) = load_model(cfg, checkpoint)?;
    let acc = dpe.predict(&val.inputs)?.accuracy(val.class_labels()?);
    println!("{}", serde_json::json!({ "val_accuracy": acc, "eval_count": val.len() }));
    Ok(())
}

fn collect_records(paths: &[PathBuf]) -> Result<Vec<RunRecord>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::Io { path: p.clone(), source: e })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.file_name()
                        .and_then(|n| n.to_str())
                        .is_some_and(|n| n.starts_with("record_") && n.ends_with(".json"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    files.iter().map(|f| RunRecord::load(f)).collect()
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, out } => synth(&load_config(&common)?, &out),
        Command::Active { common, out } => {
            let cfg = load_config(&common)?;
            let records = report::run(&cfg, &out, common.threads)?;
            let finals: Vec<_> = records.iter().map(|r| (r.seed, r.final_metric())).collect();
            println!("{}", serde_json::json!({ "acquisition": cfg.acquisition, "final_metric_by_seed": finals }));
            Ok(())
        }
        Command::Train { common, out } => full_train(&load_config(&common)?, &out),
        Command::Score { common, checkpoint, out } => score(&load_config(&common)?, &checkpoint, &out),
        Command::Eval { common, checkpoint } => eval(&load_config(&common)?, &checkpoint),
        Command::Compare { a, b } => {
            let c = compare(&collect_records(&a)?, &collect_records(&b)?)?;
            println!("{}", serde_json::to_string_pretty(&c)?);
            Ok(())
        }
        Command::Curves { records, out } => write_file(&out, curves(&collect_records(&records)?)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::FAILURE
        }
    }
}

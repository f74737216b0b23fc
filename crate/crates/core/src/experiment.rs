//! Command orchestration: resolves data, runs a command and persists its
//! artifacts next to a `run.json` that is sufficient to repeat the run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{default_grid, prompt_sweep, run_ablation, write_sweep_csv, BenchData, BenchSource, Protocol};
use crate::checkpoint::Checkpoint;
use crate::config::{ExperimentConfig, RunRecord};
use crate::data::{read_dataset, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{argmax, MetricReport};
use crate::model::{PathoTuneModel, TaskLevel};
use crate::params::hex;
use crate::synthetic::{generate_patch_dataset, generate_wsi_bags, DatasetRecord};
use crate::trainer::{evaluate, fit, predict_proba, split_indices, History, ParamCounts};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenerateData,
    Train,
    Evaluate,
    Ablate,
    Sweep,
    CountParams,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenerateData => "generate-data",
            Command::Train => "train",
            Command::Evaluate => "evaluate",
            Command::Ablate => "ablate",
            Command::Sweep => "sweep",
            Command::CountParams => "count-params",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// False when some requested grid cell did not complete.
    pub complete: bool,
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

const SOURCES: &[(&str, &str)] = &[
    ("autodiff.rs", include_str!("autodiff.rs")),
    ("backbone.rs", include_str!("backbone.rs")),
    ("bench.rs", include_str!("bench.rs")),
    ("checkpoint.rs", include_str!("checkpoint.rs")),
    ("config.rs", include_str!("config.rs")),
    ("data.rs", include_str!("data.rs")),
    ("error.rs", include_str!("error.rs")),
    ("experiment.rs", include_str!("experiment.rs")),
    ("heads.rs", include_str!("heads.rs")),
    ("lib.rs", include_str!("lib.rs")),
    ("main.rs", include_str!("main.rs")),
    ("metrics.rs", include_str!("metrics.rs")),
    ("model.rs", include_str!("model.rs")),
    ("params.rs", include_str!("params.rs")),
    ("prompts.rs", include_str!("prompts.rs")),
    ("seed.rs", include_str!("seed.rs")),
    ("synthetic.rs", include_str!("synthetic.rs")),
    ("trainer.rs", include_str!("trainer.rs")),
];

/// Git-style blob hash (`sha256("blob <len>\0" ++ bytes)`).
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

/// Hash over the `name blob` listing of every compiled source file.
pub fn code_hash() -> String {
    let mut h = Sha256::new();
    for (name, text) in SOURCES {
        h.update(format!("{} {}\n", blob_hash(text.as_bytes()), name).as_bytes());
    }
    hex(&h.finalize())
}

pub fn run_record(cfg: &ExperimentConfig, command: Command) -> RunRecord {
    RunRecord {
        command: command.name().to_string(),
        seed: cfg.train.seed,
        config: cfg.clone(),
        code_hash: code_hash(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(path.to_path_buf())
}

/// Machine-readable failure record.
pub fn error_record(err: &Error) -> serde_json::Value {
    serde_json::json!({
        "status": "error",
        "kind": err.kind(),
        "message": err.to_string(),
    })
}

/// The configured dataset: read from `data.path` or generated in memory.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    cfg.validate_paths()?;
    if let Some(path) = &cfg.data.path {
        let data = read_dataset(path)?;
        return match (cfg.data.level, data.is_bags()) {
            (TaskLevel::Wsi, false) => Err(Error::Config(format!(
                "data.level = \"wsi\" but {} holds patch rows",
                path.display()
            ))),
            (TaskLevel::Patch, true) => Err(Error::Config(format!(
                "data.level = \"patch\" but {} holds slide rows",
                path.display()
            ))),
            _ => Ok(data),
        };
    }
    let synth = cfg.data.synth_spec();
    let [lo, hi] = cfg.data.bag_size_range;
    Ok(match cfg.data.level {
        TaskLevel::Patch => Dataset::Patches(generate_patch_dataset(&synth)?),
        TaskLevel::Wsi => Dataset::Bags(generate_wsi_bags(&synth, (lo, hi), cfg.data.num_bags)?),
    })
}

fn split(cfg: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let [a, b, c] = cfg.data.split;
    let (tr, va, te) = split_indices(data.len(), (a, b, c), seed)?;
    Ok((data.subset(&tr), data.subset(&va), data.subset(&te)))
}

fn bench_data(cfg: &ExperimentConfig) -> Result<BenchData> {
    let data = load_data(cfg)?;
    let name = match &cfg.data.path {
        Some(p) => p.file_name().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned()),
        None => "synthetic".to_string(),
    };
    let [a, b, c] = cfg.data.split;
    Ok(BenchData {
        name,
        source: BenchSource::Pooled {
            data,
            protocol: cfg.data.protocol,
            ratios: (a, b, c),
        },
    })
}

pub fn write_history(dir: &Path, history: &History) -> Result<Vec<PathBuf>> {
    let csv_path = dir.join("history.csv");
    let mut w = crate::bench::csv_writer(&csv_path)?;
    for r in &history.records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(vec![csv_path, write_json(&dir.join("history.json"), history)?])
}

fn report_line(r: &MetricReport) -> String {
    let auc = r.auc.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}"));
    format!("auc {auc}  f1 {:.4}  accuracy {:.4}  n {}", r.f1, r.accuracy, r.n_samples)
}

fn write_predictions(path: &Path, probs: &[Vec<f64>], labels: &[usize]) -> Result<PathBuf> {
    let mut w = crate::bench::csv_writer(path)?;
    let classes = probs.first().map_or(0, |p| p.len());
    let mut header = vec!["index".to_string(), "label".to_string(), "prediction".to_string()];
    header.extend((0..classes).map(|c| format!("p{c}")));
    w.write_record(&header)?;
    for (i, (p, l)) in probs.iter().zip(labels).enumerate() {
        let mut row = vec![i.to_string(), l.to_string(), argmax(p).to_string()];
        row.extend(p.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(path.to_path_buf())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub mode: String,
    pub counts: ParamCounts,
    pub total: usize,
    pub trainable: usize,
    pub fraction: f64,
}

/// Runs `command` with outputs in `cfg.output.dir`.
pub fn run_experiment(cfg: &ExperimentConfig, command: Command) -> Result<Outcome> {
    cfg.validate()?;
    let dir = cfg.output.dir.clone();
    fs::create_dir_all(&dir)?;
    let mut artifacts = vec![write_json(&dir.join("run.json"), &run_record(cfg, command))?];
    let spec = cfg.model_spec();
    let train_cfg = cfg.train_config();

    let (complete, summary) = match command {
        Command::GenerateData => {
            if cfg.data.path.is_some() {
                return Err(Error::Config("generate-data needs data.synth, not data.path".into()));
            }
            let data = load_data(cfg)?;
            let synth = cfg.data.synth_spec();
            let wsi = data.is_bags();
            let record = DatasetRecord {
                kind: if wsi { "wsi".into() } else { "patch".into() },
                seed: synth.seed,
                synth,
                bag_size_range: wsi.then(|| (cfg.data.bag_size_range[0], cfg.data.bag_size_range[1])),
                num_bags: wsi.then_some(cfg.data.num_bags),
            };
            write_dataset(&dir, &data, &record)?;
            artifacts.push(dir.join("manifest.csv"));
            (true, format!("wrote {} examples to {}", data.len(), dir.display()))
        }
        Command::Train => {
            let data = load_data(cfg)?;
            let (train, val, test) = split(cfg, &data, train_cfg.seed)?;
            let model = PathoTuneModel::new(&spec, train_cfg.mode, train_cfg.seed)?;
            let (state, history) = fit(&train, &val, model, &train_cfg)?;
            let report = evaluate(&state.model, &test)?;
            artifacts.extend(write_history(&dir, &history)?);
            artifacts.push(write_json(&dir.join("metrics.json"), &report)?);
            let ckpt_path = dir.join("checkpoint.json");
            Checkpoint::capture(&state.model, &train_cfg, state.step, state.epoch).save(&ckpt_path)?;
            artifacts.push(ckpt_path);
            (true, format!("{} test: {}", train_cfg.mode, report_line(&report)))
        }
        Command::Evaluate => {
            let ckpt_path = cfg.output.checkpoint.clone().unwrap_or_else(|| dir.join("checkpoint.json"));
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let model = ckpt.restore()?;
            let data = load_data(cfg)?;
            let (_, _, test) = split(cfg, &data, ckpt.train.seed)?;
            let probs = predict_proba(&model, &test)?;
            let report = evaluate(&model, &test)?;
            artifacts.push(write_predictions(&dir.join("predictions.csv"), &probs, &test.labels())?);
            artifacts.push(write_json(&dir.join("metrics.json"), &report)?);
            (true, format!("{} test: {}", ckpt.train.mode, report_line(&report)))
        }
        Command::Ablate => {
            let data = bench_data(cfg)?;
            let grid = default_grid(cfg.bench.include_ft);
            let table = run_ablation(&grid, &[data], &cfg.bench_seeds(), &spec, &train_cfg)?;
            table.write_csv(&dir.join("ablation.csv"))?;
            table.write_json(&dir.join("ablation.json"))?;
            let mut rendered = table.render_percent();
            fs::write(dir.join("ablation.txt"), &rendered)?;
            artifacts.extend(["ablation.csv", "ablation.json", "ablation.txt"].map(|f| dir.join(f)));
            for row in &table.rows {
                for m in &row.missing {
                    rendered.push_str(&format!(
                        "missing: {} on {} seed {} fold {}: {}\n",
                        row.mode, m.dataset, m.seed, m.fold, m.reason
                    ));
                }
            }
            (table.is_complete(), rendered)
        }
        Command::Sweep => {
            let mut data = bench_data(cfg)?;
            if let BenchSource::Pooled { protocol, .. } = &mut data.source {
                *protocol = Protocol::Holdout;
            }
            let b = &cfg.bench;
            let records = prompt_sweep(&data, &b.sweep_n, &b.sweep_t, &b.sweep_m, &spec, &train_cfg)?;
            write_sweep_csv(&dir.join("sweep.csv"), &records)?;
            artifacts.push(dir.join("sweep.csv"));
            (true, format!("{} sweep records", records.len()))
        }
        Command::CountParams => {
            let counts = ParamCounts::analytic(&spec, train_cfg.mode);
            let report = ParamReport {
                mode: train_cfg.mode.to_string(),
                counts,
                total: counts.total(),
                trainable: counts.trainable(train_cfg.mode),
                fraction: counts.fraction(train_cfg.mode),
            };
            artifacts.push(write_json(&dir.join("params.json"), &report)?);
            (
                true,
                format!(
                    "total {}\ntrainable {}\nfraction {:.4} ({:.2}%)\ntext encoder (frozen, excluded) {}",
                    report.total,
                    report.trainable,
                    report.fraction,
                    100.0 * report.fraction,
                    counts.text_encoder
                ),
            )
        }
    };
    Ok(Outcome {
        complete,
        summary,
        artifacts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_construction() {
        // sha256 of "blob 0\0"
        assert_eq!(
            blob_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
        assert_eq!(code_hash(), code_hash());
        assert_ne!(blob_hash(b"a"), blob_hash(b"b"));
    }
}

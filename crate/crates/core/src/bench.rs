//! Ablation runner over tuning modes and prompt combinations, and the
//! prompt-count sweep.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelSpec, PathoTuneModel, TuningMode};
use crate::trainer::{evaluate, fit, kfold_indices, split_indices, TrainConfig};

/// LP, TTP-only, TVP-only, IVP-only and all prompts, optionally followed by FT.
pub fn default_grid(include_ft: bool) -> Vec<TuningMode> {
    let pt = |ttp, tvp, ivp| TuningMode::PathoTune { tvp, ttp, ivp };
    let mut grid = vec![
        TuningMode::LinearProbe,
        pt(true, false, false),
        pt(false, true, false),
        pt(false, false, true),
        pt(true, true, true),
    ];
    if include_ft {
        grid.push(TuningMode::FullFinetune);
    }
    grid
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Protocol {
    /// Train/validation/test split by the given ratios, reseeded per run.
    #[default]
    Holdout,
    /// `k` folds per seed; each fold is evaluated on its validation part.
    KFold { k: usize },
}

#[derive(Debug, Clone)]
pub enum BenchSource {
    Presplit { train: Dataset, val: Dataset, test: Dataset },
    Pooled { data: Dataset, protocol: Protocol, ratios: (usize, usize, usize) },
}

#[derive(Debug, Clone)]
pub struct BenchData {
    pub name: String,
    pub source: BenchSource,
}

impl BenchData {
    /// (train, val, evaluation) sets for one seed; several for k-fold.
    fn runs(&self, seed: u64) -> Result<Vec<(Dataset, Dataset, Dataset)>> {
        match &self.source {
            BenchSource::Presplit { train, val, test } => Ok(vec![(train.clone(), val.clone(), test.clone())]),
            BenchSource::Pooled { data, protocol, ratios } => match protocol {
                Protocol::Holdout => {
                    let (a, b, c) = split_indices(data.len(), *ratios, seed)?;
                    Ok(vec![(data.subset(&a), data.subset(&b), data.subset(&c))])
                }
                Protocol::KFold { k } => Ok(kfold_indices(data.len(), *k, seed)?
                    .into_iter()
                    .map(|(t, v)| (data.subset(&t), Dataset::Patches(vec![]), data.subset(&v)))
                    .collect()),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    F1,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::F1 => "f1",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub dataset: String,
    pub metric: Metric,
    pub mean: f64,
    /// Sample standard deviation; zero for a single run.
    pub std: f64,
    pub n: usize,
    pub values: Vec<f64>,
}

impl Cell {
    fn from_values(dataset: &str, metric: Metric, values: Vec<f64>) -> Self {
        let n = values.len();
        let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self {
            dataset: dataset.to_string(),
            metric,
            mean,
            std,
            n,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingRun {
    pub dataset: String,
    pub seed: u64,
    pub fold: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: TuningMode,
    pub cells: Vec<Cell>,
    pub missing: Vec<MissingRun>,
}

impl AblationRow {
    pub fn flags(&self) -> (bool, bool, bool) {
        self.mode.prompt_flags()
    }

    pub fn cell(&self, dataset: &str, metric: Metric) -> Option<&Cell> {
        self.cells.iter().find(|c| c.dataset == dataset && c.metric == metric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub datasets: Vec<String>,
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, mode: TuningMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.missing.is_empty())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["mode", "ttp", "tvp", "ivp", "dataset", "metric", "mean", "std", "n"])?;
        for row in &self.rows {
            let (ttp, tvp, ivp) = row.flags();
            for c in &row.cells {
                w.write_record([
                    row.mode.label().to_string(),
                    ttp.to_string(),
                    tvp.to_string(),
                    ivp.to_string(),
                    c.dataset.clone(),
                    c.metric.name().to_string(),
                    c.mean.to_string(),
                    c.std.to_string(),
                    c.n.to_string(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    /// Plain-text table with cells as `mean ± std` in percent.
    pub fn render_percent(&self) -> String {
        let tick = |b: bool| if b { "x" } else { "" };
        let mut out = String::from("mode\tTTP\tTVP\tIVP");
        for d in &self.datasets {
            for m in [Metric::Auc, Metric::F1] {
                let _ = write!(out, "\t{d} {}", m.name().to_uppercase());
            }
        }
        out.push('\n');
        for row in &self.rows {
            let (ttp, tvp, ivp) = row.flags();
            let _ = write!(out, "{}\t{}\t{}\t{}", row.mode.label(), tick(ttp), tick(tvp), tick(ivp));
            for d in &self.datasets {
                for m in [Metric::Auc, Metric::F1] {
                    match row.cell(d, m) {
                        Some(c) if c.n > 0 => {
                            let _ = write!(out, "\t{:.1} ± {:.1}", 100.0 * c.mean, 100.0 * c.std);
                        }
                        _ => out.push_str("\t-"),
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)?)
}

/// AUC and F1 of one trained-and-evaluated run.
pub fn train_and_score(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
) -> Result<(f64, f64)> {
    let model = PathoTuneModel::new(spec, cfg.mode, cfg.seed)?;
    let (state, _) = fit(train, val, model, cfg)?;
    let report = evaluate(&state.model, test)?;
    let auc = report
        .auc
        .ok_or_else(|| Error::Input("evaluation split has a single class; AUC undefined".into()))?;
    Ok((auc, report.f1))
}

/// Trains one model per (mode, dataset, seed, fold). All modes share the
/// same seeds and therefore the same splits and backbone weights.
pub fn run_ablation(
    grid: &[TuningMode],
    datasets: &[BenchData],
    seeds: &[u64],
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<AblationTable> {
    if grid.is_empty() {
        return Err(Error::Input("ablation grid is empty".into()));
    }
    if seeds.is_empty() || datasets.is_empty() {
        return Err(Error::Input("ablation needs at least one seed and one dataset".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &mode in grid {
        let mut cells = Vec::new();
        let mut missing = Vec::new();
        for data in datasets {
            let (mut aucs, mut f1s) = (Vec::new(), Vec::new());
            for &seed in seeds {
                let runs = match data.runs(seed) {
                    Ok(r) => r,
                    Err(e) => {
                        missing.push(MissingRun {
                            dataset: data.name.clone(),
                            seed,
                            fold: 0,
                            reason: e.to_string(),
                        });
                        continue;
                    }
                };
                for (fold, (train, val, test)) in runs.iter().enumerate() {
                    let run_cfg = TrainConfig {
                        mode,
                        seed,
                        ..cfg.clone()
                    };
                    match train_and_score(spec, &run_cfg, train, val, test) {
                        Ok((auc, f1)) => {
                            aucs.push(auc);
                            f1s.push(f1);
                        }
                        Err(e) => missing.push(MissingRun {
                            dataset: data.name.clone(),
                            seed,
                            fold,
                            reason: e.to_string(),
                        }),
                    }
                }
            }
            cells.push(Cell::from_values(&data.name, Metric::Auc, aucs));
            cells.push(Cell::from_values(&data.name, Metric::F1, f1s));
        }
        rows.push(AblationRow { mode, cells, missing });
    }
    Ok(AblationTable {
        datasets: datasets.iter().map(|d| d.name.clone()).collect(),
        seeds: seeds.to_vec(),
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub auc: f64,
    pub f1: f64,
}

/// One run per `(N, T, M)`; a zero count switches that prompt family off.
pub fn prompt_sweep(
    data: &BenchData,
    n_values: &[usize],
    t_values: &[usize],
    m_values: &[usize],
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<Vec<SweepRecord>> {
    if n_values.is_empty() || t_values.is_empty() || m_values.is_empty() {
        return Err(Error::Input("sweep value lists must be non-empty".into()));
    }
    let (train, val, test) = data.runs(cfg.seed)?.swap_remove(0);
    let mut out = Vec::new();
    for &n in n_values {
        for &t in t_values {
            for &m in m_values {
                let mut s = spec.clone();
                s.prompts.tvp_tokens = n;
                s.prompts.ttp_tokens = t;
                s.prompts.ivp_tokens = m;
                let run_cfg = TrainConfig {
                    mode: TuningMode::PathoTune {
                        tvp: n > 0,
                        ttp: t > 0,
                        ivp: m > 0,
                    },
                    ..cfg.clone()
                };
                let (auc, f1) = train_and_score(&s, &run_cfg, &train, &val, &test)?;
                out.push(SweepRecord { n, t, m, auc, f1 });
            }
        }
    }
    Ok(out)
}

pub fn write_sweep_csv(path: &Path, records: &[SweepRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate_patch_dataset, SynthSpec};

    fn tiny() -> (ModelSpec, TrainConfig, BenchData) {
        let mut spec = ModelSpec::default();
        spec.model.layers = 1;
        spec.model.dim = 16;
        spec.model.heads = 2;
        spec.model.num_classes = 2;
        spec.prompts.tvp_tokens = 2;
        spec.text.dim = 32;
        spec.vrm.channels = vec![4, 8];
        let synth = SynthSpec {
            num_classes: 2,
            samples_per_class: 10,
            ..Default::default()
        };
        let data = BenchData {
            name: "synth".into(),
            source: BenchSource::Pooled {
                data: Dataset::Patches(generate_patch_dataset(&synth).unwrap()),
                protocol: Protocol::Holdout,
                ratios: (6, 2, 2),
            },
        };
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..Default::default()
        };
        (spec, cfg, data)
    }

    #[test]
    fn cell_statistics() {
        let c = Cell::from_values("d", Metric::Auc, vec![0.5, 0.7, 0.9]);
        assert!((c.mean - 0.7).abs() < 1e-15);
        assert!((c.std - 0.2).abs() < 1e-15);
        assert_eq!(Cell::from_values("d", Metric::F1, vec![0.4]).std, 0.0);
    }

    #[test]
    fn ablation_rows_cover_grid_and_are_reproducible() {
        let (spec, cfg, data) = tiny();
        let grid = default_grid(false);
        let table = run_ablation(&grid, std::slice::from_ref(&data), &[0, 1], &spec, &cfg).unwrap();
        assert_eq!(table.rows.len(), 5);
        for row in &table.rows {
            assert!(row.missing.is_empty(), "{:?}", row.missing);
            let auc = row.cell("synth", Metric::Auc).unwrap();
            assert_eq!(auc.n, 2);
            assert!(row.cell("synth", Metric::F1).is_some());
        }
        let again = run_ablation(&grid, &[data], &[0, 1], &spec, &cfg).unwrap();
        assert_eq!(table, again);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ablation.csv");
        table.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("mode,ttp,tvp,ivp,dataset,metric,mean,std,n\nLP,false,false,false,synth,auc,"));
        assert_eq!(text.lines().count(), 1 + 5 * 2);
        assert!(table.render_percent().contains("PathoTune\tx\tx\tx"));
    }

    #[test]
    fn failed_runs_are_recorded_as_missing() {
        let (spec, cfg, mut data) = tiny();
        if let BenchSource::Pooled { data: d, .. } = &data.source {
            data.source = BenchSource::Pooled {
                data: d.subset(&[0, 1, 2]),
                protocol: Protocol::Holdout,
                ratios: (7, 2, 1),
            };
        }
        let table = run_ablation(&[TuningMode::LinearProbe], &[data], &[0], &spec, &cfg).unwrap();
        assert!(!table.is_complete());
        assert_eq!(table.rows[0].cell("synth", Metric::Auc).unwrap().n, 0);
        assert!(run_ablation(&[], &[], &[0], &spec, &cfg).is_err());
    }

    #[test]
    fn sweep_record_count_and_header() {
        let (spec, cfg, data) = tiny();
        let recs = prompt_sweep(&data, &[0, 2], &[1], &[0], &spec, &cfg).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!((recs[1].n, recs[1].t, recs[1].m), (2, 1, 0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sweep.csv");
        write_sweep_csv(&path, &recs).unwrap();
        assert!(std::fs::read_to_string(&path).unwrap().starts_with("N,T,M,auc,f1\n0,1,0,"));
    }
}

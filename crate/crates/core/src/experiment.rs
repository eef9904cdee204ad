//! End-to-end commands: train, merge, evaluate, ablate and inspect.

use std::fmt;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, TrainState};
use crate::config::{InferenceMode, RunConfig};
use crate::data::{build_vocab, encode_rows, read_tsv, sequential_batches, synthetic_task, LabeledExample};
use crate::error::{Error, Result};
use crate::mixture::{attach_sites, ensemble_predict, select_routing, AdaptedModel, RoutingSelection};
use crate::plot;
use crate::tensor::{Parameterized, Tensor};
use crate::training::{argmax, history_csv, stream_rng, train_loop, EpochRecord, EVAL_BATCH};
use crate::transformer::{build_backbone, count_adaptation_params, freeze_backbone, CountPhase};

pub const EVAL_STREAM: u64 = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
    pub vocab_size: usize,
}

pub fn prepare_task(cfg: &RunConfig) -> Result<TaskData> {
    let t = &cfg.task;
    match cfg.task_kind()? {
        Some(kind) => {
            let vocab_size = t.vocab_size.expect("validated");
            let split = synthetic_task(kind, t.examples.expect("validated"), vocab_size, t.seq_len, t.classes, t.seed)?;
            Ok(TaskData {
                train: split.train,
                test: split.test,
                vocab_size,
            })
        }
        None => {
            let train_rows = read_tsv(t.train.as_deref().expect("validated"), t.classes)?;
            let test_rows = read_tsv(t.test.as_deref().expect("validated"), t.classes)?;
            let texts: Vec<&str> = train_rows.iter().map(|r| r.text.as_str()).collect();
            let vocab = build_vocab(&texts)?;
            Ok(TaskData {
                train: encode_rows(&train_rows, &vocab, t.seq_len),
                test: encode_rows(&test_rows, &vocab, t.seq_len),
                vocab_size: vocab.len(),
            })
        }
    }
}

/// Frozen backbone from `backbone.seed` with freshly initialized sites
/// seeded by `train.seed`.
pub fn build_model(cfg: &RunConfig, vocab_size: usize) -> Result<AdaptedModel> {
    let mut backbone = build_backbone(&cfg.backbone_config(vocab_size), cfg.backbone.seed)?;
    freeze_backbone(&mut backbone, cfg.train.train_head);
    let sites = attach_sites(&backbone, &cfg.layout()?, cfg.train.seed)?;
    Ok(AdaptedModel::new(backbone, sites))
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub data: TaskData,
}

pub fn run_training(cfg: &RunConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let data = prepare_task(cfg)?;
    let mut model = build_model(cfg, data.vocab_size)?;
    let encoder = model.backbone.encoder_checksum();
    let outcome = train_loop(&cfg.train, &mut model, &data.train, &data.test)?;
    if model.backbone.encoder_checksum() != encoder {
        return Err(Error::Contract("backbone encoder changed during training".into()));
    }
    let checkpoint = Checkpoint {
        config: cfg.clone(),
        backbone_seed: cfg.backbone.seed,
        train_head: cfg.train.train_head,
        model,
        state: TrainState {
            epochs: outcome.history.len(),
            steps: outcome.optimizer.step,
            merged_from: None,
        },
        optimizer: Some(outcome.optimizer),
        routing_rng: Some(outcome.routing_rng),
    };
    Ok(TrainRun {
        checkpoint,
        history: outcome.history,
        data,
    })
}

#[derive(Clone, Debug)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub plot: PathBuf,
    pub run: TrainRun,
}

/// Trains from a config file and writes `checkpoint.ckpt`, `metrics.csv`
/// and `loss.svg` into the output directory (`out`, else `output.dir`).
pub fn cmd_train(config_path: &Path, out: Option<&Path>) -> Result<TrainArtifacts> {
    let cfg = RunConfig::load(config_path)?;
    let dir = match (out, &cfg.output) {
        (Some(d), _) => d.to_path_buf(),
        (None, Some(o)) => o.dir.clone(),
        (None, None) => {
            return Err(Error::Config(
                "output.dir is required when no output directory is given".into(),
            ))
        }
    };
    let run = run_training(&cfg)?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let checkpoint = dir.join("checkpoint.ckpt");
    let metrics = dir.join("metrics.csv");
    let plot_path = dir.join("loss.svg");
    run.checkpoint.save(&checkpoint)?;
    let csv = history_csv(&run.history);
    std::fs::write(&metrics, &csv).map_err(|e| Error::io(&metrics, e))?;
    let svg = plot::history_svg(&csv)?;
    std::fs::write(&plot_path, svg).map_err(|e| Error::io(&plot_path, e))?;
    Ok(TrainArtifacts {
        checkpoint,
        metrics,
        plot: plot_path,
        run,
    })
}

pub fn cmd_merge(input: &Path, output: &Path) -> Result<Checkpoint> {
    let merged = Checkpoint::load(input)?.merged();
    merged.save(output)?;
    Ok(merged)
}

fn count_correct(logits_or_probs: &Tensor, labels: &[usize]) -> usize {
    let c = logits_or_probs.shape[1];
    logits_or_probs
        .data
        .chunks(c)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

/// Accuracy of `model` under an inference mode. Random routing and
/// ensembling draw one selection per pass per evaluation batch from the
/// stream seeded by `seed`.
pub fn evaluate(model: &AdaptedModel, examples: &[LabeledExample], mode: InferenceMode, seed: u64) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let policy = crate::mixture::RoutingPolicy::Independent;
    let mut rng = stream_rng(seed, EVAL_STREAM);
    let fixed = RoutingSelection::fixed(&model.sites);
    if mode == InferenceMode::Merge && model.max_modules() > 1 {
        return Err(Error::Config(format!(
            "merge mode needs a merged checkpoint, but sites hold up to {} modules; run `merge` first",
            model.max_modules()
        )));
    }
    let mut correct = 0;
    for batch in sequential_batches(examples, EVAL_BATCH) {
        let out = match mode {
            InferenceMode::Merge | InferenceMode::FixedRoute => model.logits(&batch.ids, &fixed)?,
            InferenceMode::RandomRoute => {
                let sel = select_routing(&model.sites, &mut rng, policy);
                model.logits(&batch.ids, &sel)?
            }
            InferenceMode::Ensemble(t) => ensemble_predict(model, &batch.ids, t, &mut rng, policy)?,
        };
        correct += count_correct(&out, &batch.labels);
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub mode: String,
    #[serde(rename = "T")]
    pub passes: usize,
    pub seed: u64,
    pub examples: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub modules_per_site: usize,
    pub merged_from: Option<usize>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn cmd_eval(ckpt: &Path, mode: InferenceMode, seed: u64) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt)?;
    let data = prepare_task(&ck.config)?;
    let accuracy = evaluate(&ck.model, &data.test, mode, seed)?;
    Ok(EvalReport {
        checkpoint: ckpt.display().to_string(),
        mode: mode.name().to_string(),
        passes: match mode {
            InferenceMode::Ensemble(t) => t,
            _ => 1,
        },
        seed,
        examples: data.test.len(),
        correct: (accuracy * data.test.len() as f64).round() as usize,
        accuracy,
        modules_per_site: ck.model.max_modules(),
        merged_from: ck.state.merged_from,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SiteSummary {
    pub name: String,
    pub variant: String,
    pub modules: usize,
    pub up_projections: usize,
    pub params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Inspection {
    pub checkpoint: String,
    pub sharing: bool,
    pub merged_from: Option<usize>,
    pub sites: Vec<SiteSummary>,
    pub trainable: usize,
    pub frozen: usize,
    pub backbone_frozen: usize,
    pub adaptation: usize,
    pub formula_training: usize,
    pub formula_inference: usize,
}

/// Tunable-parameter formula for a config, without building any weights.
pub fn formula_counts(cfg: &RunConfig) -> Result<(usize, usize)> {
    let layout = cfg.layout()?;
    let count = |phase| {
        count_adaptation_params(
            cfg.backbone.model_dim,
            cfg.backbone.num_layers,
            cfg.adaptation.r,
            cfg.adaptation.variant,
            layout.points_per_layer(),
            layout.sharing,
            cfg.adaptation.modules,
            phase,
        )
    };
    Ok((count(CountPhase::Training), count(CountPhase::Inference)))
}

pub fn inspect(ck: &Checkpoint, label: &str) -> Result<Inspection> {
    let (formula_training, formula_inference) = formula_counts(&ck.config)?;
    let bb = &ck.model.backbone;
    let head = bb.config.head_param_count();
    Ok(Inspection {
        checkpoint: label.to_string(),
        sharing: ck.model.sites.iter().any(|s| s.ups.len() == 1 && s.num_modules() > 1),
        merged_from: ck.state.merged_from,
        sites: ck
            .model
            .sites
            .iter()
            .map(|s| SiteSummary {
                name: s.name(),
                variant: format!("{:?}", s.variant).to_lowercase(),
                modules: s.num_modules(),
                up_projections: s.ups.len(),
                params: s.param_count(),
            })
            .collect(),
        trainable: ck.model.trainable_count(),
        frozen: ck.model.frozen_count(),
        backbone_frozen: bb.config.encoder_param_count() + if ck.train_head { 0 } else { head },
        adaptation: ck.model.adaptation_param_count(),
        formula_training,
        formula_inference,
    })
}

pub fn cmd_inspect(ckpt: &Path) -> Result<Inspection> {
    inspect(&Checkpoint::load(ckpt)?, &ckpt.display().to_string())
}

impl fmt::Display for Inspection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "checkpoint: {}", self.checkpoint)?;
        match self.merged_from {
            Some(m) => writeln!(f, "merged from {m} modules per site")?,
            None => writeln!(f, "unmerged")?,
        }
        writeln!(f, "sharing: {}", if self.sharing { "project-up" } else { "none" })?;
        writeln!(f, "{:<16} {:<8} {:>7} {:>4} {:>10}", "site", "variant", "modules", "ups", "params")?;
        for s in &self.sites {
            writeln!(
                f,
                "{:<16} {:<8} {:>7} {:>4} {:>10}",
                s.name, s.variant, s.modules, s.up_projections, s.params
            )?;
        }
        writeln!(f, "trainable parameters: {}", self.trainable)?;
        writeln!(f, "frozen parameters:    {} (backbone {})", self.frozen, self.backbone_frozen)?;
        writeln!(f, "adaptation parameters stored: {}", self.adaptation)?;
        writeln!(
            f,
            "formula: {} during training, {} after merging",
            self.formula_training, self.formula_inference
        )
    }
}

/// Ablation grid file. Axes left out take the base config's value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Base run config, relative to the grid file.
    pub base: PathBuf,
    pub seeds: Vec<u64>,
    /// Results CSV, relative to the grid file.
    pub output: PathBuf,
    #[serde(default = "default_modes")]
    pub modes: Vec<String>,
    #[serde(default)]
    pub eval_seed: u64,
    /// Worker threads; 0 uses all cores.
    #[serde(default)]
    pub threads: usize,
    #[serde(default)]
    pub axes: GridAxes,
}

fn default_modes() -> Vec<String> {
    vec!["merge".into()]
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    #[serde(rename = "M", default)]
    pub modules: Vec<usize>,
    #[serde(default)]
    pub r: Vec<usize>,
    #[serde(default)]
    pub consistency: Vec<bool>,
    #[serde(default)]
    pub sharing: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct Cell {
    pub modules: usize,
    pub r: usize,
    pub consistency: bool,
    pub sharing: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub cell: Cell,
    pub mode: String,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub final_loss_mean: f64,
    pub final_loss_std: f64,
    pub status: String,
}

pub const ABLATION_HEADER: &str =
    "M,r,consistency,sharing,mode,runs,accuracy_mean,accuracy_std,final_loss_mean,final_loss_std,status";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = format!("{ABLATION_HEADER}\n");
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            r.cell.modules,
            r.cell.r,
            r.cell.consistency,
            r.cell.sharing,
            r.mode,
            r.runs,
            r.accuracy_mean,
            r.accuracy_std,
            r.final_loss_mean,
            r.final_loss_std,
            r.status.replace([',', '\n'], ";")
        );
    }
    out
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn or_base<T: Clone>(axis: &[T], base: T) -> Vec<T> {
    if axis.is_empty() {
        vec![base]
    } else {
        axis.to_vec()
    }
}

pub fn grid_cells(grid: &GridConfig, base: &RunConfig) -> Vec<Cell> {
    let mut cells = Vec::new();
    for &modules in &or_base(&grid.axes.modules, base.adaptation.modules) {
        for &r in &or_base(&grid.axes.r, base.adaptation.r) {
            for &consistency in &or_base(&grid.axes.consistency, base.train.consistency) {
                for &sharing in &or_base(&grid.axes.sharing, base.adaptation.sharing) {
                    cells.push(Cell {
                        modules,
                        r,
                        consistency,
                        sharing,
                    });
                }
            }
        }
    }
    cells
}

pub fn cell_config(base: &RunConfig, cell: &Cell, seed: u64) -> RunConfig {
    let mut cfg = base.clone();
    cfg.adaptation.modules = cell.modules;
    cfg.adaptation.r = cell.r;
    cfg.train.consistency = cell.consistency;
    cfg.adaptation.sharing = cell.sharing;
    cfg.train.seed = seed;
    cfg
}

struct RunResult {
    accuracies: Vec<f64>,
    final_loss: f64,
}

/// Runs every (cell, seed) pair and summarizes each (cell, mode) over
/// seeds. The task split and backbone come from the base config and are
/// shared by all cells; `train.seed` is the grid seed, so cells differing
/// only in consistency or sharing see identical data orders and module
/// initializations. Cells whose config is invalid (e.g. `r >= d`) are
/// reported as skipped.
pub fn run_grid(grid: &GridConfig, base: &RunConfig) -> Result<Vec<AblationRow>> {
    if grid.seeds.is_empty() {
        return Err(Error::Config("grid.seeds must not be empty".into()));
    }
    let modes: Vec<InferenceMode> = grid
        .modes
        .iter()
        .map(|m| InferenceMode::parse(m, None))
        .collect::<Result<_>>()?;
    let cells = grid_cells(grid, base);
    let feasibility: Vec<Result<()>> = cells
        .iter()
        .map(|c| cell_config(base, c, grid.seeds[0]).validate())
        .collect();
    let jobs: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .filter(|(i, _)| feasibility[*i].is_ok())
        .flat_map(|(i, _)| grid.seeds.iter().map(move |&s| (i, s)))
        .collect();

    let run_job = |&(ci, seed): &(usize, u64)| -> Result<RunResult> {
        let cfg = cell_config(base, &cells[ci], seed);
        let run = run_training(&cfg)?;
        let model = &run.checkpoint.model;
        let merged = model.merged();
        let accuracies = modes
            .iter()
            .map(|&m| match m {
                InferenceMode::Merge => evaluate(&merged, &run.data.test, m, grid.eval_seed),
                _ => evaluate(model, &run.data.test, m, grid.eval_seed),
            })
            .collect::<Result<_>>()?;
        log::info!("grid cell {ci} seed {seed} done");
        Ok(RunResult {
            accuracies,
            final_loss: run.history.last().map_or(f64::NAN, |r| r.total_loss),
        })
    };
    let results: Vec<Result<RunResult>> = if grid.threads == 1 {
        jobs.iter().map(run_job).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(grid.threads)
            .build()
            .map_err(|e| Error::Config(format!("grid.threads: {e}")))?;
        pool.install(|| jobs.par_iter().map(run_job).collect())
    };

    let mut rows = Vec::new();
    for (ci, cell) in cells.iter().enumerate() {
        let mine: Vec<&Result<RunResult>> = jobs
            .iter()
            .zip(&results)
            .filter(|((j, _), _)| *j == ci)
            .map(|(_, r)| r)
            .collect();
        let failure = match &feasibility[ci] {
            Err(e) => Some(format!("skipped: {e}")),
            Ok(()) => mine
                .iter()
                .find_map(|r| r.as_ref().err())
                .map(|e| format!("failed: {e}")),
        };
        let ok: Vec<&RunResult> = mine.iter().filter_map(|r| r.as_ref().ok()).collect();
        let (loss_mean, loss_std) = mean_std(&ok.iter().map(|r| r.final_loss).collect::<Vec<_>>());
        for (mi, mode) in modes.iter().enumerate() {
            let (acc_mean, acc_std) = mean_std(&ok.iter().map(|r| r.accuracies[mi]).collect::<Vec<_>>());
            rows.push(AblationRow {
                cell: cell.clone(),
                mode: mode.to_string(),
                runs: ok.len(),
                accuracy_mean: acc_mean,
                accuracy_std: acc_std,
                final_loss_mean: loss_mean,
                final_loss_std: loss_std,
                status: failure.clone().unwrap_or_else(|| "ok".into()),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct AblationArtifacts {
    pub csv: PathBuf,
    pub plot: PathBuf,
    pub rows: Vec<AblationRow>,
}

pub fn load_grid(path: &Path) -> Result<GridConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
}

pub fn cmd_ablate(grid_path: &Path) -> Result<AblationArtifacts> {
    let grid = load_grid(grid_path)?;
    let root = grid_path.parent().unwrap_or(Path::new("."));
    let base = RunConfig::load(&root.join(&grid.base))?;
    let rows = run_grid(&grid, &base)?;
    let csv_path = root.join(&grid.output);
    if let Some(dir) = csv_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let csv = ablation_csv(&rows);
    std::fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
    let plot_path = csv_path.with_extension("svg");
    std::fs::write(&plot_path, plot::ablation_svg(&csv)?).map_err(|e| Error::io(&plot_path, e))?;
    Ok(AblationArtifacts {
        csv: csv_path,
        plot: plot_path,
        rows,
    })
}

/// Accuracies of `runs` independent random-routing evaluations with seeds
/// `0..runs`.
pub fn random_route_accuracies(model: &AdaptedModel, examples: &[LabeledExample], runs: u64) -> Result<Vec<f64>> {
    (0..runs)
        .map(|s| evaluate(model, examples, InferenceMode::RandomRoute, s))
        .collect()
}

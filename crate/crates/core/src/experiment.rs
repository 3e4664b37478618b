//! Training loop, routing diagnostics and experiment sweeps.

use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{batches, Dataset, Instance};
use crate::error::{Error, Result};
use crate::fusion::{FusionModel, ImportanceStats};
use crate::metrics::MetricReport;
use crate::optim::AdamW;
use crate::prompts::{PromptKind, RoutingMode};
use crate::tensor::Float;

/// One row of the per-step loss log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub task_loss: f64,
    pub imp_loss_value: f64,
    pub imp_loss_applied: f64,
    pub total: f64,
    pub lr: f64,
}

/// Per-step, per-layer, per-expert routing statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagRow {
    pub step: usize,
    pub layer: usize,
    pub expert_id: usize,
    pub importance: f64,
    pub cv: f64,
    pub entropy_bits: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContingencyRow {
    pub expert_id: usize,
    pub group_id: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RouteRow {
    pub instance_id: usize,
    pub group_id: usize,
    pub layer: usize,
    pub expert_id: usize,
    pub score: f64,
    pub entropy_bits: f64,
}

pub struct TrainOutcome<T> {
    pub model: FusionModel<T>,
    pub log: Vec<LogRow>,
    pub diagnostics: Vec<DiagRow>,
    pub wall_clock_s: f64,
}

/// Trains a fresh model from `cfg` on `data.train`.
pub fn train<T: Float>(cfg: &RunConfig, data: &Dataset) -> Result<TrainOutcome<T>> {
    if data.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let start = Instant::now();
    let mut model = FusionModel::<T>::new(&cfg.fusion()?)?;
    let mut opt = AdamW::new(cfg.lr, (cfg.beta1, cfg.beta2), cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train_seed());
    let total = cfg.total_steps(data.train.len());
    let mut log = Vec::with_capacity(total);
    let mut diagnostics = Vec::new();
    let mut step = 0;
    while step < total {
        for batch in batches(&data.train, cfg.batch_size, &mut rng) {
            if step == total {
                break;
            }
            opt.lr = cfg.lr_schedule.at(cfg.lr, step, total);
            let report = model.train_step(&batch, &mut opt, cfg.lambda_imp, cfg.gamma, &mut rng)?;
            let l = report.loss;
            log.push(LogRow {
                step,
                task_loss: l.task_loss,
                imp_loss_value: l.importance_loss,
                imp_loss_applied: l.applied_importance,
                total: l.total,
                lr: opt.lr,
            });
            for (stats, &entropy) in report.importance.iter().zip(&report.layer_entropy) {
                for (expert_id, &importance) in stats.importance.iter().enumerate() {
                    diagnostics.push(DiagRow {
                        step,
                        layer: stats.layer,
                        expert_id,
                        importance,
                        cv: stats.cv,
                        entropy_bits: entropy,
                    });
                }
            }
            step += 1;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        diagnostics,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

/// Noise-free routing statistics of one main layer over a split.
#[derive(Debug, Clone)]
pub struct LayerDiagnostics {
    pub layer: usize,
    pub importance: ImportanceStats,
    /// `contingency[expert][group]`: instances whose argmax expert is `expert`.
    pub contingency: Vec<Vec<usize>>,
    pub mutual_information_bits: f64,
    pub mean_entropy_bits: f64,
}

#[derive(Debug, Clone)]
pub struct DiagnosticsDump {
    pub layers: Vec<LayerDiagnostics>,
    pub routes: Vec<RouteRow>,
}

impl DiagnosticsDump {
    pub fn last_layer(&self) -> &LayerDiagnostics {
        self.layers.last().expect("at least one routed layer")
    }

    pub fn mean_entropy_bits(&self) -> f64 {
        self.layers.iter().map(|l| l.mean_entropy_bits).sum::<f64>() / self.layers.len() as f64
    }

    pub fn contingency_rows(&self, layer: usize) -> Vec<ContingencyRow> {
        let Some(l) = self.layers.iter().find(|l| l.layer == layer) else {
            return Vec::new();
        };
        l.contingency
            .iter()
            .enumerate()
            .flat_map(|(expert_id, row)| {
                row.iter().enumerate().map(move |(group_id, &count)| ContingencyRow {
                    expert_id,
                    group_id,
                    count,
                })
            })
            .collect()
    }
}

/// Mutual information in bits of the joint distribution given by `counts`.
pub fn mutual_information(counts: &[Vec<usize>]) -> f64 {
    let total: usize = counts.iter().flatten().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    let cols = counts.first().map_or(0, Vec::len);
    let row_sums: Vec<f64> = counts.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let col_sums: Vec<f64> = (0..cols)
        .map(|j| counts.iter().map(|r| r[j]).sum::<usize>() as f64)
        .collect();
    let mut mi = 0.0;
    for (i, row) in counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (row_sums[i] * col_sums[j])).log2();
            }
        }
    }
    mi.max(0.0)
}

/// Routes every instance without noise and summarizes expert use per layer.
pub fn diagnose<T: Float>(model: &FusionModel<T>, instances: &[Instance], batch_size: usize) -> Result<DiagnosticsDump> {
    let cfg = model.config();
    if !cfg.prompt.has(PromptKind::Dynamic) || model.layers().is_empty() {
        return Err(Error::Config("diagnostics need the dynamic prompt enabled".into()));
    }
    if instances.is_empty() {
        return Err(Error::Input("cannot diagnose an empty split".into()));
    }
    let k = cfg.prompt.num_experts;
    let groups = instances.iter().map(|i| i.group).max().unwrap_or(0) + 1;
    let num_layers = model.layers().len();
    let mut scores = vec![Vec::new(); num_layers];
    let mut contingency = vec![vec![vec![0usize; groups]; k]; num_layers];
    let mut entropy = vec![0.0; num_layers];
    let mut routes = Vec::with_capacity(instances.len() * num_layers);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in instances.chunks(batch_size.max(1)) {
        let batch: Vec<&Instance> = chunk.iter().collect();
        let pass = model.forward(&batch, false, &mut rng)?;
        for records in model.routing_records(&pass) {
            for (inst, r) in chunk.iter().zip(&records) {
                scores[r.layer].extend_from_slice(&r.scores);
                contingency[r.layer][r.argmax_expert][inst.group] += 1;
                entropy[r.layer] += r.entropy_bits;
                routes.push(RouteRow {
                    instance_id: inst.id,
                    group_id: inst.group,
                    layer: r.layer,
                    expert_id: r.argmax_expert,
                    score: r.scores[r.argmax_expert],
                    entropy_bits: r.entropy_bits,
                });
            }
        }
    }
    let layers = (0..num_layers)
        .map(|layer| {
            Ok(LayerDiagnostics {
                layer,
                importance: ImportanceStats::from_scores(layer, &scores[layer], k)?,
                mutual_information_bits: mutual_information(&contingency[layer]),
                contingency: std::mem::take(&mut contingency[layer]),
                mean_entropy_bits: entropy[layer] / instances.len() as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    routes.sort_by_key(|r| (r.instance_id, r.layer));
    Ok(DiagnosticsDump { layers, routes })
}

/// Named experiment grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    /// All seven prompt-type subsets plus the two unimodal baselines.
    Ablation,
    /// Experts versus prompt length at matched prompt parameter count.
    KVsL,
    Shots,
    DenseVsSparse,
    ImportanceOnOff,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Ablation => "ablation",
            ExperimentKind::KVsL => "k_vs_l",
            ExperimentKind::Shots => "shots",
            ExperimentKind::DenseVsSparse => "dense_vs_sparse",
            ExperimentKind::ImportanceOnOff => "importance_on_off",
        }
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ablation" => ExperimentKind::Ablation,
            "k_vs_l" => ExperimentKind::KVsL,
            "shots" => ExperimentKind::Shots,
            "dense_vs_sparse" => ExperimentKind::DenseVsSparse,
            "importance_on_off" => ExperimentKind::ImportanceOnOff,
            other => {
                return Err(Error::Config(format!(
                    "unknown experiment `{other}` (ablation, k_vs_l, shots, dense_vs_sparse, importance_on_off)"
                )))
            }
        })
    }
}

/// The seven non-empty subsets of prompt types, singletons first.
pub fn prompt_subsets() -> Vec<Vec<PromptKind>> {
    let mut subsets: Vec<Vec<PromptKind>> = (1u8..8)
        .map(|mask| {
            PromptKind::ALL
                .iter()
                .enumerate()
                .filter(|(i, _)| mask & (1 << i) != 0)
                .map(|(_, &k)| k)
                .collect()
        })
        .collect();
    subsets.sort_by_key(|s| (s.len(), s.clone()));
    subsets
}

pub fn subset_name(kinds: &[PromptKind]) -> String {
    kinds.iter().map(|k| k.short()).collect()
}

pub const SHOTS: [usize; 4] = [64, 256, 512, 1024];
pub const K_SWEEP: [usize; 3] = [2, 4, 8];
pub const K_SWEEP_PROMPT_LEN: usize = 6;
pub const L_SWEEP_EXPERTS: usize = 2;
pub const L_SWEEP: [usize; 3] = [6, 10, 18];

#[derive(Debug, Clone)]
pub struct Cell {
    pub id: String,
    pub config: RunConfig,
    /// Training instances kept, `None` for the full split.
    pub train_limit: Option<usize>,
}

/// The grid of `kind` around `base`, repeated for every seed.
pub fn cells(kind: ExperimentKind, base: &RunConfig, seeds: &[u64]) -> Vec<Cell> {
    let mut out = Vec::new();
    for &seed in seeds {
        let base = RunConfig {
            seed,
            ..base.clone()
        };
        let mut push = |name: String, config: RunConfig, train_limit: Option<usize>| {
            out.push(Cell {
                id: format!("{name}-seed{seed}"),
                config,
                train_limit,
            })
        };
        match kind {
            ExperimentKind::Ablation => {
                for kinds in prompt_subsets() {
                    let config = RunConfig {
                        prompts: kinds.clone(),
                        mode: crate::fusion::FusionMode::Fused,
                        ..base.clone()
                    };
                    push(subset_name(&kinds), config, None);
                }
                push(
                    "main_only".into(),
                    RunConfig {
                        prompts: vec![PromptKind::Static],
                        mode: crate::fusion::FusionMode::MainOnly,
                        ..base.clone()
                    },
                    None,
                );
                push(
                    "comp_only".into(),
                    RunConfig {
                        mode: crate::fusion::FusionMode::CompOnly,
                        ..base.clone()
                    },
                    None,
                );
            }
            ExperimentKind::KVsL => {
                let mut grid: Vec<(usize, usize)> = K_SWEEP.iter().map(|&k| (k, K_SWEEP_PROMPT_LEN)).collect();
                grid.extend(
                    L_SWEEP
                        .iter()
                        .map(|&l| (L_SWEEP_EXPERTS, l))
                        .filter(|c| !grid.contains(c))
                        .collect::<Vec<_>>(),
                );
                for (k, l) in grid {
                    let config = RunConfig {
                        num_experts: k,
                        prompt_len: l,
                        ..base.clone()
                    };
                    push(format!("k{k}-l{l}"), config, None);
                }
            }
            ExperimentKind::Shots => {
                let full_steps = base.total_steps(base.train_size);
                for n in SHOTS.into_iter().filter(|&n| n < base.train_size) {
                    // Same optimizer budget as the full run.
                    let per_epoch = n.div_ceil(base.batch_size);
                    let config = RunConfig {
                        epochs: full_steps.div_ceil(per_epoch),
                        max_steps: full_steps,
                        ..base.clone()
                    };
                    push(format!("shots{n}"), config, Some(n));
                }
                push("shots_full".into(), base.clone(), None);
            }
            ExperimentKind::DenseVsSparse => {
                for (name, routing) in [("dense", RoutingMode::Dense), ("sparse", RoutingMode::SparseTop1)] {
                    push(name.into(), RunConfig { routing, ..base.clone() }, None);
                }
            }
            ExperimentKind::ImportanceOnOff => {
                let on = if base.lambda_imp > 0.0 { base.lambda_imp } else { 1.0 };
                for (name, lambda_imp) in [("imp_off", 0.0), ("imp_on", on)] {
                    push(name.into(), RunConfig { lambda_imp, ..base.clone() }, None);
                }
            }
        }
    }
    out
}

/// One row of an experiment's metrics table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub cell_id: String,
    pub seed: u64,
    pub mode: String,
    pub prompts: String,
    pub routing: String,
    pub num_experts: usize,
    pub prompt_len: usize,
    pub lambda_imp: f64,
    pub train_size: usize,
    pub steps: usize,
    pub main_seq_len: usize,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub f1_micro: f64,
    pub trainable_params: usize,
    pub wall_clock_s: f64,
    pub eval_ms_per_instance: f64,
}

pub struct CellResult {
    pub cell: Cell,
    pub report: MetricReport,
    pub row: MetricsRow,
    pub log: Vec<LogRow>,
    pub diagnostics: Vec<DiagRow>,
    /// Present when the dynamic prompt is enabled.
    pub dump: Option<DiagnosticsDump>,
    /// Sequence length seen by each main-encoder layer in one forward pass.
    pub main_seq_lens: Vec<usize>,
}

fn mode_name(cfg: &RunConfig) -> String {
    serde_plain(&cfg.mode)
}

fn serde_plain<S: Serialize>(v: &S) -> String {
    toml::Value::try_from(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Trains and evaluates one cell on its test split.
pub fn run_cell<T: Float>(cell: &Cell) -> Result<CellResult> {
    let cfg = &cell.config;
    let mut data = Dataset::generate(&cfg.task()?)?;
    if let Some(n) = cell.train_limit {
        data.truncate_train(n);
    }
    let outcome = train::<T>(cfg, &data)?;
    let model = outcome.model;
    let eval_start = Instant::now();
    let report = model.evaluate(&data.test, cfg.eval_batch_size)?;
    let eval_ms = eval_start.elapsed().as_secs_f64() * 1e3 / data.test.len() as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let probe: Vec<&Instance> = data.test.iter().take(1).collect();
    let main_seq_lens = model.forward(&probe, false, &mut rng)?.main_trace.seq_lens;
    let dump = if cfg.prompts.contains(&PromptKind::Dynamic) && !model.layers().is_empty() {
        Some(diagnose(&model, &data.test, cfg.eval_batch_size)?)
    } else {
        None
    };
    let row = MetricsRow {
        cell_id: cell.id.clone(),
        seed: cfg.seed,
        mode: mode_name(cfg),
        prompts: subset_name(&cfg.prompts),
        routing: serde_plain(&cfg.routing),
        num_experts: cfg.num_experts,
        prompt_len: cfg.prompt_len,
        lambda_imp: cfg.lambda_imp,
        train_size: data.train.len(),
        steps: outcome.log.len(),
        main_seq_len: main_seq_lens.first().copied().unwrap_or(0),
        accuracy: report.accuracy,
        f1_macro: report.f1_macro,
        f1_micro: report.f1_micro,
        trainable_params: model.count_params().trainable,
        wall_clock_s: outcome.wall_clock_s,
        eval_ms_per_instance: eval_ms,
    };
    Ok(CellResult {
        cell: cell.clone(),
        report,
        row,
        log: outcome.log,
        diagnostics: outcome.diagnostics,
        dump,
        main_seq_lens,
    })
}

pub fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(Error::Csv)?;
    for row in rows {
        w.serialize(row).map_err(Error::Csv)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the per-cell files under `dir`.
pub fn write_cell(dir: &Path, result: &CellResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_csv(&dir.join("log.csv"), &result.log)?;
    write_csv(&dir.join("diagnostics.csv"), &result.diagnostics)?;
    if let Some(dump) = &result.dump {
        write_csv(&dir.join("contingency.csv"), &dump.contingency_rows(dump.last_layer().layer))?;
    }
    Ok(())
}

/// Runs every cell in order. With `out`, writes `metrics.csv` there and
/// per-cell logs under `cells/<cell_id>/`.
pub fn run_experiment<T: Float>(
    kind: ExperimentKind,
    base: &RunConfig,
    seeds: &[u64],
    out: Option<&Path>,
    mut progress: impl FnMut(&CellResult),
) -> Result<Vec<CellResult>> {
    let mut results = Vec::new();
    for cell in cells(kind, base, seeds) {
        cell.config.validate()?;
        let result = run_cell::<T>(&cell)?;
        if let Some(out) = out {
            write_cell(&out.join("cells").join(&cell.id), &result)?;
        }
        progress(&result);
        results.push(result);
    }
    if let Some(out) = out {
        let rows: Vec<MetricsRow> = results.iter().map(|r| r.row.clone()).collect();
        write_csv(&out.join("metrics.csv"), &rows)?;
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mutual_information_examples() {
        // Expert identifies the group: I = log2 2.
        assert!((mutual_information(&[vec![5, 0], vec![0, 5]]) - 1.0).abs() < 1e-12);
        // Independent: I = 0.
        assert!(mutual_information(&[vec![3, 3], vec![1, 1]]).abs() < 1e-12);
        assert_eq!(mutual_information(&[vec![0, 0]]), 0.0);
        // One expert for everything.
        assert_eq!(mutual_information(&[vec![4, 4, 4], vec![0, 0, 0]]), 0.0);
    }

    #[test]
    fn mutual_information_matches_entropy_identity() {
        // I = H(E) + H(G) - H(E, G) on a hand table.
        let t = [vec![4usize, 1], vec![2, 3]];
        let n = 10.0;
        let h = |ps: &[f64]| -ps.iter().filter(|&&p| p > 0.0).map(|p| p * p.log2()).sum::<f64>();
        let he = h(&[0.5, 0.5]);
        let hg = h(&[0.6, 0.4]);
        let hj = h(&[4.0 / n, 1.0 / n, 2.0 / n, 3.0 / n]);
        assert!((mutual_information(&t) - (he + hg - hj)).abs() < 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn mutual_information_is_bounded(
            k in 1usize..6,
            g in 1usize..6,
            cells in proptest::collection::vec(0usize..20, 36),
        ) {
            let table: Vec<Vec<usize>> = (0..k).map(|i| cells[i * 6..i * 6 + g].to_vec()).collect();
            let mi = mutual_information(&table);
            let bound = (k as f64).log2().min((g as f64).log2());
            proptest::prop_assert!(mi >= 0.0 && mi <= bound + 1e-12, "{} > {}", mi, bound);
        }
    }

    #[test]
    fn ablation_has_seven_subsets_and_two_baselines() {
        let subsets = prompt_subsets();
        assert_eq!(subsets.len(), 7);
        let names: Vec<String> = subsets.iter().map(|s| subset_name(s)).collect();
        assert_eq!(names, ["s", "d", "m", "sd", "sm", "dm", "sdm"]);
        let cells = cells(ExperimentKind::Ablation, &RunConfig::default(), &[0]);
        assert_eq!(cells.len(), 9);
    }

    #[test]
    fn k_vs_l_grid_matches_prompt_budget() {
        let cells = cells(ExperimentKind::KVsL, &RunConfig::default(), &[0]);
        let ids: Vec<&str> = cells.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, ["k2-l6-seed0", "k4-l6-seed0", "k8-l6-seed0", "k2-l10-seed0", "k2-l18-seed0"]);
        // Static plus k experts, l rows each: k-sweep and l-sweep budgets pair up.
        let budget = |k: usize, l: usize| (k + 1) * l;
        for (&k, &l) in K_SWEEP.iter().zip(&L_SWEEP) {
            assert_eq!(budget(k, K_SWEEP_PROMPT_LEN), budget(L_SWEEP_EXPERTS, l));
        }
    }

    #[test]
    fn unknown_experiment_is_a_config_error() {
        assert!(matches!("fig7".parse::<ExperimentKind>(), Err(Error::Config(_))));
        assert_eq!("k_vs_l".parse::<ExperimentKind>().unwrap(), ExperimentKind::KVsL);
    }
}

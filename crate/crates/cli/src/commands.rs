//! Subcommand implementations. Every command writes deterministic files under
//! its output directory, including a machine-readable `summary.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use milmine::data::{
    generate_synthetic, load_checkpoint, load_dataset, save_checkpoint, save_dataset, Bag,
};
use milmine::metrics::{
    evaluate, recall_at_k_aggregate, sensitivity_curve, DropCriterion, MetricReport,
};
use milmine::mining::{donor_attention, mask_rows_to_csv, AttentionRecord, MhimConfig};
use milmine::model::{init_params, ModelConfig, ModelParams};
use milmine::pipeline::{
    grid_search_tb, kfold_split, run_parallel, select_bags, split_single, train_phase1,
    train_phase2, EpochStats, FoldData, FoldSpec, TrainOutcome,
};
use milmine::rng::derive_seed;
use milmine::{Error, Result};

use crate::config::RunConfig;

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn loss_csv(trace: &[EpochStats]) -> String {
    let mut out = String::from("epoch,split,rmse,mae\n");
    for row in trace {
        out.push_str(&format!(
            "{},train,{},{}\n",
            row.epoch, row.train_rmse, row.train_mae
        ));
        out.push_str(&format!(
            "{},val,{},{}\n",
            row.epoch, row.val_rmse, row.val_mae
        ));
    }
    out
}

fn per_bag_csv(report: &MetricReport) -> String {
    let mut out = String::from("bag_id,prediction,target,entropy\n");
    for row in &report.per_bag {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.bag_id, row.prediction, row.target, row.entropy
        ));
    }
    out
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn dataset_ids(bags: &[Bag]) -> Vec<String> {
    bags.iter().map(|b| b.id.clone()).collect()
}

/// The single 3:1:1 split used by `train` and `train-mhim`; derived from the
/// training seed so donor and receiver runs see the same partition.
fn training_split(bags: &[Bag], seed: u64) -> Result<FoldSpec> {
    split_single(&dataset_ids(bags), derive_seed(seed, "split", 0))
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

pub fn cmd_gen(config: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let bags = generate_synthetic(&config.synth)?;
    let data_path = out.join("dataset.jsonl");
    save_dataset(&bags, &data_path)?;
    let instances: usize = bags.iter().map(Bag::len).sum();
    let positives = bags
        .iter()
        .filter(|b| b.instances.iter().any(|i| i.isl == Some(1)))
        .count();
    write_json(
        &out.join("summary.json"),
        &json!({
            "command": "gen",
            "dataset": "dataset.jsonl",
            "n_bags": bags.len(),
            "n_instances": instances,
            "positive_bags": positives,
            "synth": config.synth,
        }),
    )
}

// ---------------------------------------------------------------------------
// train / train-mhim
// ---------------------------------------------------------------------------

struct TrainArtifacts {
    outcome: TrainOutcome,
    split: FoldSpec,
    test_report: MetricReport,
}

fn run_split_training(
    config: &RunConfig,
    bags: &[Bag],
    donor: Option<&ModelParams>,
) -> Result<TrainArtifacts> {
    let split = training_split(bags, config.train.seed)?;
    let train = select_bags(bags, &split.train_ids)?;
    let val = select_bags(bags, &split.val_ids)?;
    let test = select_bags(bags, &split.test_ids)?;
    let outcome = match donor {
        None => train_phase1(&config.train, &config.model, &train, &val)?,
        Some(donor_params) => {
            train_phase2(&config.train, &config.model, donor_params, &train, &val)?
        }
    };
    let test_report = evaluate(&outcome.params, &config.model, &test)?;
    Ok(TrainArtifacts {
        outcome,
        split,
        test_report,
    })
}

fn write_training_outputs(
    command: &str,
    config: &RunConfig,
    data: &Path,
    out: &Path,
    artifacts: &TrainArtifacts,
    export_masks: bool,
) -> Result<()> {
    ensure_dir(out)?;
    save_checkpoint(
        &artifacts.outcome.params,
        &config.model,
        &out.join("checkpoint.json"),
    )?;
    write_text(&out.join("loss.csv"), &loss_csv(&artifacts.outcome.trace))?;
    if export_masks {
        write_text(
            &out.join("masks.csv"),
            &mask_rows_to_csv(&artifacts.outcome.mask_rows),
        )?;
    }
    write_json(
        &out.join("manifest.json"),
        &json!({
            "command": command,
            "data": data.display().to_string(),
            "config": config,
            "split": artifacts.split,
            "total_steps": artifacts.outcome.total_steps,
            "best_epoch": artifacts.outcome.best_epoch,
            "best_val_rmse": artifacts.outcome.best_val_rmse,
            "checkpoint": "checkpoint.json",
            "loss_trace": "loss.csv",
        }),
    )?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "command": command,
            "best_epoch": artifacts.outcome.best_epoch,
            "best_val_rmse": artifacts.outcome.best_val_rmse,
            "test_rmse": artifacts.test_report.rmse,
            "test_mae": artifacts.test_report.mae,
            "test_mean_entropy": artifacts.test_report.mean_entropy,
            "checkpoint": "checkpoint.json",
        }),
    )
}

pub fn cmd_train(config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    let bags = load_dataset(data)?;
    let artifacts = run_split_training(config, &bags, None)?;
    write_training_outputs("train", config, data, out, &artifacts, false)
}

pub fn cmd_train_mhim(
    config: &RunConfig,
    data: &Path,
    donor_path: &Path,
    out: &Path,
    export_masks: bool,
) -> Result<()> {
    let bags = load_dataset(data)?;
    let (donor_params, donor_config) = load_checkpoint(donor_path)?;
    if donor_config != config.model {
        return Err(Error::Config(format!(
            "donor checkpoint config {donor_config:?} differs from run config {:?}",
            config.model
        )));
    }
    let mut config = config.clone();
    if config.train.mhim.is_none() {
        config.train.mhim = Some(config.mhim);
    }
    let artifacts = run_split_training(&config, &bags, Some(&donor_params))?;
    write_training_outputs("train-mhim", &config, data, out, &artifacts, export_masks)
}

// ---------------------------------------------------------------------------
// eval / explain / sensitivity
// ---------------------------------------------------------------------------

pub fn cmd_eval(checkpoint: &Path, data: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let (params, model_config) = load_checkpoint(checkpoint)?;
    let bags = load_dataset(data)?;
    let report = evaluate(&params, &model_config, &bags)?;
    write_json(&out.join("metrics.json"), &report)?;
    write_text(&out.join("per_bag.csv"), &per_bag_csv(&report))?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "command": "eval",
            "rmse": report.rmse,
            "mae": report.mae,
            "mean_entropy": report.mean_entropy,
            "n_bags": report.per_bag.len(),
            "metrics": "metrics.json",
            "per_bag": "per_bag.csv",
        }),
    )
}

fn attention_csv(records: &[AttentionRecord]) -> String {
    let mut out = String::from("bag_id,index,weight\n");
    for record in records {
        for (i, w) in record.weights.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", record.bag_id, i, w));
        }
    }
    out
}

pub fn cmd_explain(checkpoint: &Path, data: &Path, k_list: &[f64], out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let (params, model_config) = load_checkpoint(checkpoint)?;
    let bags = load_dataset(data)?;
    let records = donor_attention(&params, &model_config, &bags)?;

    let labeled: Vec<(usize, Vec<u8>)> = bags
        .iter()
        .enumerate()
        .filter_map(|(i, bag)| bag.isl().map(|isl| (i, isl)))
        .collect();
    if labeled.is_empty() {
        return Err(Error::Config(
            "no bag carries complete isl labels; recall@k is undefined".into(),
        ));
    }
    let label_records: Vec<AttentionRecord> = labeled
        .iter()
        .map(|(i, _)| records[*i].clone())
        .collect();
    let isl_lists: Vec<Vec<u8>> = labeled.into_iter().map(|(_, isl)| isl).collect();
    let defined = isl_lists.iter().filter(|l| l.iter().any(|&x| x == 1)).count();
    let undefined = isl_lists.len() - defined;

    let mut table = Vec::new();
    let mut csv = String::from("k_percent,recall,defined_bags,undefined_bags\n");
    for &k in k_list {
        let recall = recall_at_k_aggregate(&label_records, &isl_lists, k)?;
        csv.push_str(&match recall {
            Some(r) => format!("{k},{r},{defined},{undefined}\n"),
            None => format!("{k},,{defined},{undefined}\n"),
        });
        table.push(json!({"k_percent": k, "recall": recall}));
    }
    write_text(&out.join("recall.csv"), &csv)?;
    write_text(&out.join("attention.csv"), &attention_csv(&records))?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "command": "explain",
            "recall": table,
            "defined_bags": defined,
            "undefined_bags": undefined,
            "attention": "attention.csv",
            "recall_table": "recall.csv",
        }),
    )
}

pub struct SensitivityArgs<'a> {
    pub checkpoint: &'a Path,
    pub data: &'a Path,
    pub criteria: Vec<DropCriterion>,
    pub k_list: Vec<f64>,
    pub seed: u64,
    pub baseline_checkpoint: Option<&'a Path>,
    pub mhim_checkpoint: Option<&'a Path>,
    pub out: &'a Path,
}

pub fn cmd_sensitivity(args: &SensitivityArgs) -> Result<()> {
    ensure_dir(args.out)?;
    let (params, model_config) = load_checkpoint(args.checkpoint)?;
    let bags = load_dataset(args.data)?;

    let mut source_for = |path: Option<&Path>, name: &str| -> Result<Vec<AttentionRecord>> {
        let path = path.ok_or_else(|| {
            Error::Config(format!(
                "criterion {name} needs --{name}-checkpoint for its attention source"
            ))
        })?;
        let (source_params, source_config) = load_checkpoint(path)?;
        donor_attention(&source_params, &source_config, &bags)
    };

    let mut csv = String::from("criterion,k_percent,rmse\n");
    let mut curves = Vec::new();
    for &criterion in &args.criteria {
        let source = match criterion {
            DropCriterion::BaselineAttention => {
                Some(source_for(args.baseline_checkpoint, "baseline")?)
            }
            DropCriterion::MhimAttention => Some(source_for(args.mhim_checkpoint, "mhim")?),
            DropCriterion::Random => None,
        };
        let curve = sensitivity_curve(
            &params,
            &model_config,
            &bags,
            criterion,
            &args.k_list,
            source.as_deref(),
            args.seed,
        )?;
        csv.push_str(&curve.to_csv());
        curves.push(curve);
    }
    write_text(&args.out.join("sensitivity.csv"), &csv)?;
    write_json(
        &args.out.join("summary.json"),
        &json!({
            "command": "sensitivity",
            "seed": args.seed,
            "curves": curves,
            "table": "sensitivity.csv",
        }),
    )
}

// ---------------------------------------------------------------------------
// cv
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct PhaseMetrics {
    rmse: f64,
    mae: f64,
    entropy: f64,
}

impl PhaseMetrics {
    fn from_report(report: &MetricReport) -> Self {
        Self {
            rmse: report.rmse,
            mae: report.mae,
            entropy: report.mean_entropy,
        }
    }
}

fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate_json(per_fold: &[PhaseMetrics]) -> serde_json::Value {
    let rmse: Vec<f64> = per_fold.iter().map(|m| m.rmse).collect();
    let mae: Vec<f64> = per_fold.iter().map(|m| m.mae).collect();
    let entropy: Vec<f64> = per_fold.iter().map(|m| m.entropy).collect();
    let (rmse_mean, rmse_std) = mean_and_population_std(&rmse);
    let (mae_mean, mae_std) = mean_and_population_std(&mae);
    let (entropy_mean, entropy_std) = mean_and_population_std(&entropy);
    json!({
        "rmse_mean": rmse_mean,
        "rmse_std": rmse_std,
        "mae_mean": mae_mean,
        "mae_std": mae_std,
        "entropy_mean": entropy_mean,
        "entropy_std": entropy_std,
    })
}

fn summary_csv_row(label: &str, agg: &serde_json::Value) -> String {
    format!(
        "{label},{},{},{},{},{}\n",
        agg["rmse_mean"], agg["rmse_std"], agg["mae_mean"], agg["mae_std"], agg["entropy_mean"]
    )
}

/// Full five-fold experiment: phase-1 per fold, (t, b) grid search on the
/// validation sets, final phase-2 per fold, and a fold-aggregated report.
pub fn cmd_cv(config: &RunConfig, data: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let bags = load_dataset(data)?;
    let folds = kfold_split(&dataset_ids(&bags), config.cv.folds, config.train.seed)?;
    let jobs = config.cv.jobs;

    struct FoldBags {
        train: Vec<Bag>,
        val: Vec<Bag>,
        test: Vec<Bag>,
    }
    let fold_bags: Vec<FoldBags> = folds
        .iter()
        .map(|spec| {
            Ok(FoldBags {
                train: select_bags(&bags, &spec.train_ids)?,
                val: select_bags(&bags, &spec.val_ids)?,
                test: select_bags(&bags, &spec.test_ids)?,
            })
        })
        .collect::<Result<_>>()?;

    // Phase 1, one donor per fold.
    let phase1: Vec<TrainOutcome> = run_parallel(jobs, &fold_bags, |fb| {
        train_phase1(&config.train, &config.model, &fb.train, &fb.val)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    // Validation-set selection of (t, b) with r = 2t.
    let donors: Vec<ModelParams> = phase1.iter().map(|o| o.params.clone()).collect();
    let grid_folds: Vec<FoldData> = fold_bags
        .iter()
        .map(|fb| FoldData {
            train: fb.train.clone(),
            val: fb.val.clone(),
        })
        .collect();
    let search = grid_search_tb(
        &config.train,
        &config.model,
        &donors,
        &grid_folds,
        &config.cv.t_grid,
        &config.cv.b_grid,
        jobs,
    )?;

    // Final phase 2 per fold at the selected cell.
    let mut phase2_cfg = config.train.clone();
    phase2_cfg.mhim = Some(MhimConfig::new(search.best_t, search.best_b));
    let fold_inputs: Vec<(usize, &FoldBags)> = fold_bags.iter().enumerate().collect();
    let phase2: Vec<TrainOutcome> = run_parallel(jobs, &fold_inputs, |(i, fb)| {
        train_phase2(&phase2_cfg, &config.model, &donors[*i], &fb.train, &fb.val)
    })
    .into_iter()
    .collect::<Result<_>>()?;

    // Test-set reports and per-fold artifacts.
    let mut per_fold_json = Vec::new();
    let mut phase1_metrics = Vec::new();
    let mut phase2_metrics = Vec::new();
    for (i, fb) in fold_bags.iter().enumerate() {
        let fold_dir = out.join(format!("fold_{i}"));
        ensure_dir(&fold_dir)?;
        save_checkpoint(&phase1[i].params, &config.model, &fold_dir.join("phase1.json"))?;
        save_checkpoint(&phase2[i].params, &config.model, &fold_dir.join("phase2.json"))?;
        write_text(&fold_dir.join("phase1_loss.csv"), &loss_csv(&phase1[i].trace))?;
        write_text(&fold_dir.join("phase2_loss.csv"), &loss_csv(&phase2[i].trace))?;

        let report1 = evaluate(&phase1[i].params, &config.model, &fb.test)?;
        let report2 = evaluate(&phase2[i].params, &config.model, &fb.test)?;
        let m1 = PhaseMetrics::from_report(&report1);
        let m2 = PhaseMetrics::from_report(&report2);
        per_fold_json.push(json!({
            "fold": i,
            "phase1": &m1,
            "phase2": &m2,
            "best_epoch_phase1": phase1[i].best_epoch,
            "best_epoch_phase2": phase2[i].best_epoch,
        }));
        phase1_metrics.push(m1);
        phase2_metrics.push(m2);
    }

    let grid_csv = {
        let mut text = String::from("t,b,mean_val_rmse,failed\n");
        for cell in &search.cells {
            let mean = cell
                .mean_val_rmse
                .map(|m| m.to_string())
                .unwrap_or_default();
            text.push_str(&format!("{},{},{},{}\n", cell.t, cell.b, mean, cell.failed));
        }
        text
    };
    write_text(&out.join("grid.csv"), &grid_csv)?;
    write_json(&out.join("folds.json"), &folds)?;

    let agg1 = aggregate_json(&phase1_metrics);
    let agg2 = aggregate_json(&phase2_metrics);
    let mut summary_csv =
        String::from("# std: population (n divisor)\nmodel,rmse_mean,rmse_std,mae_mean,mae_std,entropy_mean\n");
    summary_csv.push_str(&summary_csv_row("phase1", &agg1));
    summary_csv.push_str(&summary_csv_row("phase2_mhim", &agg2));
    write_text(&out.join("summary.csv"), &summary_csv)?;

    write_json(
        &out.join("summary.json"),
        &json!({
            "command": "cv",
            "folds": config.cv.folds,
            "selected": {"t": search.best_t, "b": search.best_b},
            "grid": search.cells,
            "per_fold": per_fold_json,
            "aggregate": {"phase1": agg1, "phase2_mhim": agg2},
            "std_convention": "population (n divisor)",
            "fold_specs": "folds.json",
        }),
    )
}

// ---------------------------------------------------------------------------
// print-config
// ---------------------------------------------------------------------------

pub fn cmd_print_config(config: &RunConfig) -> Result<()> {
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    print!("{text}");
    Ok(())
}

// Checkpoints for `train` start from a seeded initialization; expose it for
// tests that need the untouched weights.
#[allow(dead_code)]
pub fn initial_checkpoint(config: &RunConfig, path: &Path) -> Result<()> {
    let params = init_params(&config.model)?;
    save_checkpoint(&params, &config.model, path)
}

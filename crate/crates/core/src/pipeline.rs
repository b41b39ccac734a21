//! Two-phase training orchestration, cross-validation folds, and the t/b
//! grid search.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::error::{Error, Result};
use crate::mining::{apply_plan, donor_attention, sample_mask, MaskRow, MhimConfig};
use crate::model::{forward_bag, init_params, mse_loss, ModelConfig, ModelParams};
use crate::optim::{adamw_step, AdamConfig, LrSchedule, OptimizerState};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::Tape;

/// Training settings; `mhim: Some(..)` switches a run into phase 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub floor_lr: f64,
    pub warmup_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mhim: Option<MhimConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 8,
            peak_lr: 3e-5,
            floor_lr: 1e-7,
            warmup_fraction: 0.10,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            mhim: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(mhim) = &self.mhim {
            mhim.validate()?;
        }
        // Schedule field checks run here even though total_steps is known
        // only at training time.
        LrSchedule::new(self.peak_lr, self.floor_lr, self.warmup_fraction, 1)?;
        Ok(())
    }
}

/// One cross-validation fold: disjoint id lists partitioning the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub fold_index: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Running loss over the epoch's (possibly masked) training batches.
    pub train_rmse: f64,
    pub train_mae: f64,
    /// Clean unmasked evaluation on the validation set.
    pub val_rmse: f64,
    pub val_mae: f64,
}

/// Result of one training run. `params` is the checkpoint with the lowest
/// validation RMSE (early selection, not early stopping).
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub best_epoch: Option<usize>,
    pub best_val_rmse: f64,
    pub trace: Vec<EpochStats>,
    pub total_steps: u64,
    /// Mask audit rows; empty for phase-1 runs.
    pub mask_rows: Vec<MaskRow>,
}

fn unmasked_metrics(
    params: &ModelParams,
    config: &ModelConfig,
    bags: &[Bag],
) -> Result<(f64, f64)> {
    let mut sq = 0.0;
    let mut abs = 0.0;
    for bag in bags {
        let pred = crate::model::encode_bag(params, config, bag, None)?.prediction;
        let d = pred - bag.target;
        sq += d * d;
        abs += d.abs();
    }
    let n = bags.len() as f64;
    Ok(((sq / n).sqrt(), abs / n))
}

fn check_dims(config: &ModelConfig, bags: &[Bag], what: &str) -> Result<()> {
    for bag in bags {
        for inst in &bag.instances {
            if inst.response.len() != config.response_dim {
                return Err(Error::Config(format!(
                    "{what}: bag {} response width {} does not match model response_dim {}",
                    bag.id,
                    inst.response.len(),
                    config.response_dim
                )));
            }
            if config.prefix_dim > 0
                && inst.prefix.as_ref().map_or(0, |p| p.len()) != config.prefix_dim
            {
                return Err(Error::Config(format!(
                    "{what}: bag {} prefix width does not match model prefix_dim {}",
                    bag.id, config.prefix_dim
                )));
            }
        }
    }
    Ok(())
}

/// Phase-1 training: plain MSE minimization with AdamW under the
/// warmup/decay schedule. Bags are shuffled per epoch; gradients are averaged
/// within each batch; the best-validation checkpoint is returned.
pub fn train_phase1(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train: &[Bag],
    val: &[Bag],
) -> Result<TrainOutcome> {
    if cfg.mhim.is_some() {
        return Err(Error::Config(
            "phase-1 config must not carry mhim settings".into(),
        ));
    }
    run_training(cfg, model_cfg, train, val, None)
}

/// Phase-2 training: donor attention is computed once over the training set
/// with the frozen donor, then every epoch draws a fresh mask plan per bag
/// and the receiver trains under that mask. Validation always runs unmasked;
/// the receiver starts from a fresh seeded initialization, not from the
/// donor's weights.
pub fn train_phase2(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    donor: &ModelParams,
    train: &[Bag],
    val: &[Bag],
) -> Result<TrainOutcome> {
    if cfg.mhim.is_none() {
        return Err(Error::Config("phase-2 config needs mhim settings".into()));
    }
    run_training(cfg, model_cfg, train, val, Some(donor))
}

fn run_training(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    train: &[Bag],
    val: &[Bag],
    donor: Option<&ModelParams>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    check_dims(model_cfg, train, "train set")?;
    check_dims(model_cfg, val, "validation set")?;

    let mhim = cfg.mhim.unwrap_or(MhimConfig::new(0, 0));
    let donor_records: Option<BTreeMap<&str, crate::mining::AttentionRecord>> = match donor {
        Some(donor_params) => {
            check_dims(model_cfg, train, "donor attention")?;
            let records = donor_attention(donor_params, model_cfg, train)?;
            Some(
                train
                    .iter()
                    .zip(records)
                    .map(|(bag, rec)| (bag.id.as_str(), rec))
                    .collect(),
            )
        }
        None => None,
    };

    let mut params = init_params(model_cfg)?;
    let batches_per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total_steps = cfg.epochs as u64 * batches_per_epoch;
    let schedule = LrSchedule::new(cfg.peak_lr, cfg.floor_lr, cfg.warmup_fraction, total_steps)?;
    let mut opt = OptimizerState::new(cfg.adam(), &params.buffers());

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut mask_rows = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut step: u64 = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        SplitMix64::new(derive_seed(cfg.seed, "shuffle", epoch as u64)).shuffle(&mut order);

        let mut epoch_sq = 0.0;
        let mut epoch_abs = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let vars = params.register(&tape);
            let mut preds = Vec::with_capacity(batch.len());
            let mut targets = Vec::with_capacity(batch.len());
            for &idx in batch {
                let bag = &train[idx];
                let mask = match &donor_records {
                    Some(records) => {
                        let record = &records[bag.id.as_str()];
                        let plan = sample_mask(
                            record,
                            &mhim,
                            derive_seed(cfg.seed, &bag.id, epoch as u64),
                        );
                        mask_rows.extend(plan.rows(epoch));
                        Some(apply_plan(&plan, bag.len())?)
                    }
                    None => None,
                };
                let out = forward_bag(&tape, &vars, model_cfg, bag, mask.as_deref())?;
                preds.push(out.prediction);
                targets.push(bag.target);
            }
            let loss = mse_loss(&preds, &targets)?;
            let loss_value = loss.item();
            if !loss_value.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            for (pred, target) in preds.iter().zip(&targets) {
                let d = pred.item() - target;
                epoch_sq += d * d;
                epoch_abs += d.abs();
            }
            loss.backward()?;
            let grads = vars.grads();
            let lr = crate::optim::lr_at(&schedule, step)?;
            adamw_step(&mut params.buffers_mut(), &grads, &mut opt, lr)?;
            step += 1;
        }

        let n_train = train.len() as f64;
        let (val_rmse, val_mae) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            unmasked_metrics(&params, model_cfg, val)?
        };
        trace.push(EpochStats {
            epoch,
            train_rmse: (epoch_sq / n_train).sqrt(),
            train_mae: epoch_abs / n_train,
            val_rmse,
            val_mae,
        });
        let improves = match &best {
            None => true,
            Some((best_rmse, _, _)) => val_rmse < *best_rmse,
        };
        if !val.is_empty() && improves {
            best = Some((val_rmse, epoch, params.clone()));
        }
    }

    debug_assert_eq!(step, total_steps);
    let (best_val_rmse, best_epoch, params) = match best {
        Some((rmse, epoch, p)) => (rmse, Some(epoch), p),
        // Empty validation set or zero epochs: keep the final weights.
        None => {
            let rmse = if val.is_empty() {
                f64::NAN
            } else {
                unmasked_metrics(&params, model_cfg, val)?.0
            };
            (rmse, None, params)
        }
    };
    Ok(TrainOutcome {
        params,
        best_epoch,
        best_val_rmse,
        trace,
        total_steps,
        mask_rows,
    })
}

// ---------------------------------------------------------------------------
// Folds
// ---------------------------------------------------------------------------

/// Shuffle ids once, slice them into k nearly equal blocks, and rotate:
/// fold i tests on block i, validates on block i+1 (mod k), trains on the
/// rest. Block boundaries use floor(i*n/k) so remainders interleave and the
/// train/val/test ratio stays within one bag of (k-2):1:1.
pub fn kfold_split(bag_ids: &[String], k: usize, seed: u64) -> Result<Vec<FoldSpec>> {
    if k < 3 {
        return Err(Error::Config(format!("k={k} folds; need at least 3")));
    }
    if bag_ids.len() < k {
        return Err(Error::FoldSize {
            n: bag_ids.len(),
            k,
        });
    }
    let mut ids = bag_ids.to_vec();
    SplitMix64::new(seed).shuffle(&mut ids);
    let n = ids.len();
    let blocks: Vec<&[String]> = (0..k)
        .map(|i| &ids[i * n / k..(i + 1) * n / k])
        .collect();
    Ok((0..k)
        .map(|i| {
            let val_block = (i + 1) % k;
            let train_ids = (0..k)
                .filter(|&b| b != i && b != val_block)
                .flat_map(|b| blocks[b].iter().cloned())
                .collect();
            FoldSpec {
                fold_index: i,
                train_ids,
                val_ids: blocks[val_block].to_vec(),
                test_ids: blocks[i].to_vec(),
            }
        })
        .collect())
}

/// Single 3:1:1 split for runs without cross-validation.
pub fn split_single(bag_ids: &[String], seed: u64) -> Result<FoldSpec> {
    if bag_ids.len() < 5 {
        return Err(Error::FoldSize {
            n: bag_ids.len(),
            k: 5,
        });
    }
    let mut ids = bag_ids.to_vec();
    SplitMix64::new(seed).shuffle(&mut ids);
    let n = ids.len();
    let train_end = 3 * n / 5;
    let val_end = 4 * n / 5;
    Ok(FoldSpec {
        fold_index: 0,
        train_ids: ids[..train_end].to_vec(),
        val_ids: ids[train_end..val_end].to_vec(),
        test_ids: ids[val_end..].to_vec(),
    })
}

/// Materialize a fold spec against a dataset.
pub fn select_bags(dataset: &[Bag], ids: &[String]) -> Result<Vec<Bag>> {
    let by_id: BTreeMap<&str, &Bag> = dataset.iter().map(|b| (b.id.as_str(), b)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|b| (*b).clone())
                .ok_or_else(|| Error::Config(format!("fold references unknown bag {id}")))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Grid search
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridCell {
    pub t: usize,
    pub b: usize,
    /// Mean validation RMSE across folds; None when the cell failed.
    pub mean_val_rmse: Option<f64>,
    pub per_fold: Vec<Option<f64>>,
    pub failed: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridSearchResult {
    pub best_t: usize,
    pub best_b: usize,
    pub cells: Vec<GridCell>,
}

/// Per-fold training data for the grid search and final phase-2 runs.
pub struct FoldData {
    pub train: Vec<Bag>,
    pub val: Vec<Bag>,
}

/// Phase-2 training per (t, b) cell per fold; picks the cell with the lowest
/// mean validation RMSE (ties: smaller t, then smaller b). `r` is derived as
/// 2t for every cell. Failed cells are recorded and skipped; only an
/// all-failed grid is an error.
pub fn grid_search_tb(
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    donors: &[ModelParams],
    folds: &[FoldData],
    t_grid: &[usize],
    b_grid: &[usize],
    jobs: usize,
) -> Result<GridSearchResult> {
    if t_grid.is_empty() || b_grid.is_empty() {
        return Err(Error::Config("empty t/b grid".into()));
    }
    if donors.len() != folds.len() {
        return Err(Error::Config(format!(
            "{} donors for {} folds",
            donors.len(),
            folds.len()
        )));
    }
    let mut ts = t_grid.to_vec();
    ts.sort_unstable();
    ts.dedup();
    let mut bs = b_grid.to_vec();
    bs.sort_unstable();
    bs.dedup();

    let pairs: Vec<(usize, usize)> = ts
        .iter()
        .flat_map(|&t| bs.iter().map(move |&b| (t, b)))
        .collect();

    // One task per (cell, fold); results land in fixed slots so the outcome
    // is independent of scheduling.
    let tasks: Vec<(usize, usize)> = (0..pairs.len())
        .flat_map(|c| (0..folds.len()).map(move |f| (c, f)))
        .collect();
    let results = run_parallel(jobs, &tasks, |&(cell, fold)| {
        let (t, b) = pairs[cell];
        let mut cell_cfg = cfg.clone();
        cell_cfg.mhim = Some(MhimConfig::new(t, b));
        train_phase2(
            &cell_cfg,
            model_cfg,
            &donors[fold],
            &folds[fold].train,
            &folds[fold].val,
        )
        .map(|out| out.best_val_rmse)
    });

    let mut cells = Vec::with_capacity(pairs.len());
    for (c, &(t, b)) in pairs.iter().enumerate() {
        let per_fold: Vec<Option<f64>> = (0..folds.len())
            .map(|f| results[c * folds.len() + f].as_ref().ok().copied())
            .collect();
        let failed = per_fold.iter().any(|r| r.is_none());
        let mean = if failed {
            None
        } else {
            Some(per_fold.iter().map(|r| r.unwrap()).sum::<f64>() / folds.len() as f64)
        };
        cells.push(GridCell {
            t,
            b,
            mean_val_rmse: mean,
            per_fold,
            failed,
        });
    }

    // Cells iterate in (t asc, b asc) order; strict < keeps the smallest
    // coordinates on ties.
    let mut best: Option<(f64, usize, usize)> = None;
    for cell in &cells {
        if let Some(mean) = cell.mean_val_rmse {
            let better = match best {
                None => true,
                Some((best_mean, _, _)) => mean < best_mean,
            };
            if better {
                best = Some((mean, cell.t, cell.b));
            }
        }
    }
    match best {
        Some((_, t, b)) => Ok(GridSearchResult {
            best_t: t,
            best_b: b,
            cells,
        }),
        None => Err(Error::SearchFailed(
            "every (t, b) cell failed to train".into(),
        )),
    }
}

/// Run independent tasks on up to `jobs` threads; results come back in task
/// order regardless of scheduling.
pub fn run_parallel<T, R, F>(jobs: usize, tasks: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let jobs = jobs.max(1).min(tasks.len().max(1));
    if jobs <= 1 {
        return tasks.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<R>>> =
        (0..tasks.len()).map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let result = f(&tasks[i]);
                *slots[i].lock().unwrap() = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().unwrap().expect("task completed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};

    fn quick_model(seed: u64) -> ModelConfig {
        ModelConfig {
            response_dim: 6,
            prefix_dim: 0,
            proj_dim: 8,
            lstm_hidden: 4,
            attn_dim: 4,
            seed,
        }
    }

    fn quick_synth(seed: u64) -> Vec<Bag> {
        generate_synthetic(&SynthConfig {
            n_bags: 20,
            bag_size_range: [3, 6],
            response_dim: 6,
            relevance_rate: 0.3,
            redundancy: 2,
            signal_strength: 2.0,
            noise_sigma: 0.0,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn quick_train(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            peak_lr: 5e-3,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let model_cfg = quick_model(1);
        let bags = quick_synth(2);
        let out = train_phase1(&quick_train(0), &model_cfg, &bags[..15], &bags[15..]).unwrap();
        assert_eq!(out.params, init_params(&model_cfg).unwrap());
        assert!(out.trace.is_empty());
        assert_eq!(out.total_steps, 0);
    }

    #[test]
    fn training_is_deterministic() {
        let model_cfg = quick_model(1);
        let bags = quick_synth(2);
        let cfg = quick_train(3);
        let a = train_phase1(&cfg, &model_cfg, &bags[..15], &bags[15..]).unwrap();
        let b = train_phase1(&cfg, &model_cfg, &bags[..15], &bags[15..]).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn training_reduces_loss_on_noise_free_synthetic_data() {
        let model_cfg = quick_model(5);
        let bags = quick_synth(7);
        let cfg = TrainConfig {
            epochs: 120,
            peak_lr: 1e-2,
            ..quick_train(0)
        };
        let out = train_phase1(&cfg, &model_cfg, &bags[..15], &bags[15..]).unwrap();
        let first = out.trace.first().unwrap().train_rmse;
        let last = out.trace.last().unwrap().train_rmse;
        assert!(
            last < 0.1 * first,
            "train rmse {first} -> {last} did not drop 10x"
        );
    }

    #[test]
    fn phase1_rejects_mhim_and_phase2_requires_it() {
        let model_cfg = quick_model(1);
        let bags = quick_synth(2);
        let mut cfg = quick_train(1);
        cfg.mhim = Some(MhimConfig::new(1, 1));
        assert!(train_phase1(&cfg, &model_cfg, &bags[..15], &bags[15..]).is_err());
        let donor = init_params(&model_cfg).unwrap();
        let cfg_plain = quick_train(1);
        assert!(
            train_phase2(&cfg_plain, &model_cfg, &donor, &bags[..15], &bags[15..]).is_err()
        );
    }

    #[test]
    fn empty_masks_reproduce_phase1_bit_exactly() {
        let model_cfg = quick_model(9);
        let bags = quick_synth(11);
        let cfg1 = quick_train(3);
        let phase1 = train_phase1(&cfg1, &model_cfg, &bags[..15], &bags[15..]).unwrap();

        let mut cfg2 = quick_train(3);
        cfg2.mhim = Some(MhimConfig::new(0, 0));
        let donor = init_params(&quick_model(123)).unwrap();
        let phase2 =
            train_phase2(&cfg2, &model_cfg, &donor, &bags[..15], &bags[15..]).unwrap();
        assert_eq!(phase1.params, phase2.params);
        assert_eq!(phase1.trace, phase2.trace);
        assert!(phase2.mask_rows.is_empty());
    }

    #[test]
    fn phase2_masks_are_recorded_and_masked_training_still_learns() {
        let model_cfg = quick_model(2);
        let bags = quick_synth(3);
        let donor_out =
            train_phase1(&quick_train(5), &model_cfg, &bags[..15], &bags[15..]).unwrap();
        let mut cfg = quick_train(5);
        cfg.mhim = Some(MhimConfig::new(1, 1));
        let out = train_phase2(
            &cfg,
            &model_cfg,
            &donor_out.params,
            &bags[..15],
            &bags[15..],
        )
        .unwrap();
        assert!(!out.mask_rows.is_empty());
        assert!(out.best_val_rmse.is_finite());
    }

    #[test]
    fn dim_mismatch_is_a_config_error() {
        let model_cfg = ModelConfig {
            response_dim: 9,
            ..quick_model(1)
        };
        let bags = quick_synth(2);
        let err =
            train_phase1(&quick_train(1), &model_cfg, &bags[..15], &bags[15..]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn kfold_rotation_and_ratios() {
        for n in [10usize, 13, 27, 55, 100] {
            let ids: Vec<String> = (0..n).map(|i| format!("b{i}")).collect();
            let folds = kfold_split(&ids, 5, 42).unwrap();
            assert_eq!(folds.len(), 5);
            let mut seen_test: Vec<String> = Vec::new();
            for fold in &folds {
                let total =
                    fold.train_ids.len() + fold.val_ids.len() + fold.test_ids.len();
                assert_eq!(total, n);
                let ideal = n as f64 / 5.0;
                assert!((fold.test_ids.len() as f64 - ideal).abs() <= 1.0);
                assert!((fold.val_ids.len() as f64 - ideal).abs() <= 1.0);
                assert!((fold.train_ids.len() as f64 - 3.0 * ideal).abs() <= 1.0);
                seen_test.extend(fold.test_ids.iter().cloned());
            }
            seen_test.sort();
            let mut all = ids.clone();
            all.sort();
            assert_eq!(seen_test, all, "test blocks must partition the ids");
            for i in 0..5 {
                assert_eq!(folds[i].val_ids, folds[(i + 1) % 5].test_ids);
            }
        }
    }

    #[test]
    fn kfold_ten_ids_gives_6_2_2() {
        let ids: Vec<String> = (0..10).map(|i| format!("b{i}")).collect();
        for fold in kfold_split(&ids, 5, 0).unwrap() {
            assert_eq!(fold.train_ids.len(), 6);
            assert_eq!(fold.val_ids.len(), 2);
            assert_eq!(fold.test_ids.len(), 2);
        }
    }

    #[test]
    fn kfold_rejects_small_inputs() {
        let ids: Vec<String> = (0..4).map(|i| format!("b{i}")).collect();
        assert!(matches!(
            kfold_split(&ids, 5, 0),
            Err(Error::FoldSize { .. })
        ));
        assert!(kfold_split(&ids, 2, 0).is_err());
    }

    #[test]
    fn single_split_is_3_1_1() {
        let ids: Vec<String> = (0..20).map(|i| format!("b{i}")).collect();
        let spec = split_single(&ids, 9).unwrap();
        assert_eq!(spec.train_ids.len(), 12);
        assert_eq!(spec.val_ids.len(), 4);
        assert_eq!(spec.test_ids.len(), 4);
    }

    #[test]
    fn grid_search_degenerate_cell_matches_phase1() {
        let model_cfg = quick_model(4);
        let bags = quick_synth(6);
        let folds = vec![FoldData {
            train: bags[..15].to_vec(),
            val: bags[15..].to_vec(),
        }];
        let cfg = quick_train(3);
        let phase1 = train_phase1(&cfg, &model_cfg, &bags[..15], &bags[15..]).unwrap();
        let donors = vec![phase1.params.clone()];
        let result =
            grid_search_tb(&cfg, &model_cfg, &donors, &folds, &[0], &[0], 1).unwrap();
        assert_eq!((result.best_t, result.best_b), (0, 0));
        let cell = &result.cells[0];
        assert!((cell.mean_val_rmse.unwrap() - phase1.best_val_rmse).abs() < 1e-12);
    }

    #[test]
    fn grid_search_is_deterministic_and_parallel_agrees() {
        let model_cfg = quick_model(4);
        let bags = quick_synth(6);
        let folds = vec![
            FoldData {
                train: bags[..12].to_vec(),
                val: bags[12..16].to_vec(),
            },
            FoldData {
                train: bags[4..16].to_vec(),
                val: bags[16..].to_vec(),
            },
        ];
        let cfg = quick_train(2);
        let donors = vec![
            init_params(&quick_model(31)).unwrap(),
            init_params(&quick_model(32)).unwrap(),
        ];
        let a = grid_search_tb(&cfg, &model_cfg, &donors, &folds, &[0, 1], &[0, 1], 1).unwrap();
        let b = grid_search_tb(&cfg, &model_cfg, &donors, &folds, &[0, 1], &[0, 1], 4).unwrap();
        assert_eq!((a.best_t, a.best_b), (b.best_t, b.best_b));
        for (ca, cb) in a.cells.iter().zip(&b.cells) {
            assert_eq!(ca.mean_val_rmse, cb.mean_val_rmse);
        }
    }

    #[test]
    fn run_parallel_preserves_task_order() {
        let tasks: Vec<usize> = (0..57).collect();
        let doubled = run_parallel(8, &tasks, |&x| x * 2);
        assert_eq!(doubled, tasks.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}

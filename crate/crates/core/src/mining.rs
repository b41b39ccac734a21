//! Donor attention extraction and masked hard instance mining.
//!
//! The donor (phase-1) model scores every bag once; its attention weights
//! drive per-bag mask plans for the receiver (phase-2). Each plan masks `t`
//! instances drawn from the top-`r` attention pool and `b` drawn from the
//! rest, clamped so at least half the bag (never fewer than one instance)
//! stays visible.

use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::error::{Error, Result};
use crate::model::{encode_bag, ModelConfig, ModelParams};
use crate::rng::SplitMix64;

/// Per-bag normalized attention weights from a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub bag_id: String,
    pub weights: Vec<f64>,
}

/// Mask sampling settings: `t` top masks drawn from the top-`r` pool
/// (`r` defaults to `2t`), `b` masks drawn from the remainder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MhimConfig {
    pub t: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<usize>,
    pub b: usize,
}

impl MhimConfig {
    pub fn new(t: usize, b: usize) -> Self {
        Self { t, r: None, b }
    }

    pub fn top_pool_size(&self) -> usize {
        self.r.unwrap_or(2 * self.t)
    }

    /// Total requested masks, N = t + b.
    pub fn total_masks(&self) -> usize {
        self.t + self.b
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_pool_size() < self.t {
            return Err(Error::Config(format!(
                "top pool r={} smaller than t={}",
                self.top_pool_size(),
                self.t
            )));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0 && self.b == 0
    }
}

/// A sampled mask for one bag, with provenance for audit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub bag_id: String,
    /// Union of the two pools, ascending.
    pub masked_indices: Vec<usize>,
    /// Top-r instance indices by donor weight (rank order).
    pub top_pool: Vec<usize>,
    pub top_masked: Vec<usize>,
    pub bottom_masked: Vec<usize>,
    pub seed: u64,
}

/// Indices sorted by weight descending; ties broken by ascending index.
pub fn rank_descending(weights: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        weights[b]
            .partial_cmp(&weights[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Run the frozen donor over a dataset with no mask and collect its
/// attention weights.
pub fn donor_attention(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &[Bag],
) -> Result<Vec<AttentionRecord>> {
    dataset
        .iter()
        .map(|bag| {
            let out = encode_bag(params, config, bag, None)?;
            Ok(AttentionRecord {
                bag_id: bag.id.clone(),
                weights: out.attention,
            })
        })
        .collect()
}

/// Sample a mask plan from a donor record. The draw is fully determined by
/// `seed`: top masks first (without replacement from the top-r pool in rank
/// order), then bottom masks (from the complement in ascending index order).
/// Requested counts are clamped so at least max(1, ceil(n/2)) instances stay
/// unmasked, shrinking the bottom draw before the top draw.
pub fn sample_mask(record: &AttentionRecord, cfg: &MhimConfig, seed: u64) -> MaskPlan {
    let n = record.weights.len();
    let ranked = rank_descending(&record.weights);
    let pool_size = cfg.top_pool_size().min(n);
    let top_pool: Vec<usize> = ranked[..pool_size].to_vec();
    let bottom_pool: Vec<usize> = {
        let mut rest: Vec<usize> = ranked[pool_size..].to_vec();
        rest.sort_unstable();
        rest
    };

    let mut t_eff = cfg.t.min(top_pool.len());
    let mut b_eff = cfg.b.min(bottom_pool.len());
    let min_survivors = (n.div_ceil(2)).max(1);
    let budget = n.saturating_sub(min_survivors);
    if t_eff + b_eff > budget {
        let overflow = t_eff + b_eff - budget;
        let from_bottom = overflow.min(b_eff);
        b_eff -= from_bottom;
        t_eff -= overflow - from_bottom;
    }

    let mut rng = SplitMix64::new(seed);
    let mut top_masked = rng.sample_without_replacement(&top_pool, t_eff);
    let mut bottom_masked = rng.sample_without_replacement(&bottom_pool, b_eff);
    top_masked.sort_unstable();
    bottom_masked.sort_unstable();

    let mut masked_indices: Vec<usize> = top_masked
        .iter()
        .chain(bottom_masked.iter())
        .copied()
        .collect();
    masked_indices.sort_unstable();

    MaskPlan {
        bag_id: record.bag_id.clone(),
        masked_indices,
        top_pool,
        top_masked,
        bottom_masked,
        seed,
    }
}

/// Expand a plan into a boolean mask vector (true = masked).
pub fn apply_plan(plan: &MaskPlan, bag_size: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; bag_size];
    for &idx in &plan.masked_indices {
        if idx >= bag_size {
            return Err(Error::PlanMismatch {
                bag_id: plan.bag_id.clone(),
                index: idx,
                bag_size,
            });
        }
        mask[idx] = true;
    }
    Ok(mask)
}

/// One row of the mask audit CSV (`bag_id,epoch,masked_index,pool`).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MaskRow {
    pub bag_id: String,
    pub epoch: usize,
    pub masked_index: usize,
    pub pool: MaskPool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPool {
    Top,
    Bottom,
}

impl std::fmt::Display for MaskPool {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MaskPool::Top => f.write_str("top"),
            MaskPool::Bottom => f.write_str("bottom"),
        }
    }
}

impl MaskPlan {
    pub fn rows(&self, epoch: usize) -> Vec<MaskRow> {
        let mut rows: Vec<MaskRow> = self
            .top_masked
            .iter()
            .map(|&i| MaskRow {
                bag_id: self.bag_id.clone(),
                epoch,
                masked_index: i,
                pool: MaskPool::Top,
            })
            .chain(self.bottom_masked.iter().map(|&i| MaskRow {
                bag_id: self.bag_id.clone(),
                epoch,
                masked_index: i,
                pool: MaskPool::Bottom,
            }))
            .collect();
        rows.sort_by_key(|r| r.masked_index);
        rows
    }
}

/// Render mask rows as the audit CSV.
pub fn mask_rows_to_csv(rows: &[MaskRow]) -> String {
    let mut out = String::from("bag_id,epoch,masked_index,pool\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.bag_id, row.epoch, row.masked_index, row.pool
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Instance;
    use crate::model::init_params;

    fn record(weights: &[f64]) -> AttentionRecord {
        AttentionRecord {
            bag_id: "bag".into(),
            weights: weights.to_vec(),
        }
    }

    #[test]
    fn ranking_breaks_ties_by_index() {
        assert_eq!(rank_descending(&[0.2, 0.5, 0.2, 0.1]), vec![1, 0, 2, 3]);
        assert_eq!(rank_descending(&[0.3, 0.3, 0.3]), vec![0, 1, 2]);
    }

    #[test]
    fn empty_mhim_config_yields_empty_plan() {
        let plan = sample_mask(&record(&[0.5, 0.3, 0.2]), &MhimConfig::new(0, 0), 1);
        assert!(plan.masked_indices.is_empty());
    }

    #[test]
    fn five_instance_example_masks_one_top_and_one_bottom() {
        let rec = record(&[0.5, 0.2, 0.15, 0.1, 0.05]);
        let cfg = MhimConfig::new(1, 1); // r defaults to 2
        for seed in 0..200 {
            let plan = sample_mask(&rec, &cfg, seed);
            assert_eq!(plan.top_pool, vec![0, 1]);
            assert_eq!(plan.top_masked.len(), 1);
            assert_eq!(plan.bottom_masked.len(), 1);
            assert!(plan.top_masked[0] <= 1);
            assert!(plan.bottom_masked[0] >= 2);
            assert_eq!(plan.masked_indices.len(), 2);
        }
    }

    #[test]
    fn five_instance_example_covers_all_admissible_sets_with_right_frequency() {
        let rec = record(&[0.5, 0.2, 0.15, 0.1, 0.05]);
        let cfg = MhimConfig::new(1, 1);
        let mut set_counts = std::collections::BTreeMap::new();
        let mut zero_masked = 0usize;
        let draws = 10_000;
        for seed in 0..draws {
            let plan = sample_mask(&rec, &cfg, seed);
            *set_counts.entry(plan.masked_indices.clone()).or_insert(0usize) += 1;
            if plan.masked_indices.contains(&0) {
                zero_masked += 1;
            }
        }
        assert_eq!(set_counts.len(), 6, "sets seen: {set_counts:?}");
        let freq0 = zero_masked as f64 / draws as f64;
        assert!((freq0 - 0.5).abs() < 0.02, "index-0 frequency {freq0}");
    }

    #[test]
    fn two_instance_bag_keeps_one_survivor() {
        let rec = record(&[0.9, 0.1]);
        let cfg = MhimConfig::new(1, 1); // r = 2 covers both, bottom pool empty
        for seed in 0..50 {
            let plan = sample_mask(&rec, &cfg, seed);
            assert_eq!(plan.masked_indices.len(), 1, "plan {plan:?}");
            assert!(plan.bottom_masked.is_empty());
        }
    }

    #[test]
    fn clamp_shrinks_bottom_before_top() {
        // n=4 allows 2 masks; requesting t=2, b=2 must drop the bottom draw
        // to zero and keep both top masks.
        let rec = record(&[0.4, 0.3, 0.2, 0.1]);
        let cfg = MhimConfig {
            t: 2,
            r: Some(2),
            b: 2,
        };
        let plan = sample_mask(&rec, &cfg, 3);
        assert_eq!(plan.top_masked, vec![0, 1]);
        assert!(plan.bottom_masked.is_empty());
    }

    #[test]
    fn fixed_seed_fixes_the_plan() {
        let rec = record(&[0.4, 0.25, 0.2, 0.1, 0.05]);
        let cfg = MhimConfig::new(2, 1);
        assert_eq!(sample_mask(&rec, &cfg, 9), sample_mask(&rec, &cfg, 9));
    }

    #[test]
    fn apply_plan_expands_and_validates() {
        let plan = MaskPlan {
            bag_id: "b".into(),
            masked_indices: vec![1, 3],
            top_pool: vec![1],
            top_masked: vec![1],
            bottom_masked: vec![3],
            seed: 0,
        };
        assert_eq!(
            apply_plan(&plan, 5).unwrap(),
            vec![false, true, false, true, false]
        );
        let empty = MaskPlan {
            bag_id: "b".into(),
            masked_indices: vec![],
            top_pool: vec![],
            top_masked: vec![],
            bottom_masked: vec![],
            seed: 0,
        };
        assert_eq!(apply_plan(&empty, 3).unwrap(), vec![false; 3]);
        let bad = MaskPlan {
            bag_id: "b".into(),
            masked_indices: vec![7],
            top_pool: vec![],
            top_masked: vec![],
            bottom_masked: vec![7],
            seed: 0,
        };
        assert!(matches!(
            apply_plan(&bad, 5),
            Err(Error::PlanMismatch { index: 7, .. })
        ));
    }

    #[test]
    fn donor_attention_matches_encode_bag_and_is_deterministic() {
        let cfg = ModelConfig {
            response_dim: 4,
            prefix_dim: 0,
            proj_dim: 3,
            lstm_hidden: 2,
            attn_dim: 2,
            seed: 5,
        };
        let params = init_params(&cfg).unwrap();
        let mut rng = SplitMix64::new(8);
        let bags: Vec<Bag> = (0..3)
            .map(|i| Bag {
                id: format!("b{i}"),
                target: 0.0,
                instances: (0..(i + 1))
                    .map(|_| Instance {
                        response: (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                        prefix: None,
                        isl: None,
                    })
                    .collect(),
            })
            .collect();
        let records = donor_attention(&params, &cfg, &bags).unwrap();
        assert_eq!(records[0].weights, vec![1.0]);
        for (rec, bag) in records.iter().zip(&bags) {
            let direct = encode_bag(&params, &cfg, bag, None).unwrap();
            assert_eq!(rec.weights, direct.attention);
        }
        assert_eq!(records, donor_attention(&params, &cfg, &bags).unwrap());
    }

    #[test]
    fn marginal_mask_probabilities_match_theory() {
        // n large, no clamping: top indices masked with prob t/r, bottom
        // with prob b/(n - r).
        let n = 12;
        let weights: Vec<f64> = (0..n).map(|i| 1.0 / (i + 1) as f64).collect();
        let rec = record(&weights);
        let cfg = MhimConfig {
            t: 2,
            r: Some(4),
            b: 3,
        };
        let draws = 20_000;
        let mut counts = vec![0usize; n];
        for seed in 0..draws {
            for idx in sample_mask(&rec, &cfg, seed).masked_indices {
                counts[idx] += 1;
            }
        }
        for (i, c) in counts.iter().enumerate() {
            let freq = *c as f64 / draws as f64;
            let expected = if i < 4 { 2.0 / 4.0 } else { 3.0 / 8.0 };
            assert!(
                (freq - expected).abs() < 0.02,
                "index {i}: freq {freq} vs {expected}"
            );
        }
    }

    #[test]
    fn plans_depend_only_on_weights_not_embeddings() {
        // Equal weights at two indices: ranking is deterministic by index.
        let rec = record(&[0.4, 0.3, 0.3]);
        let plan = sample_mask(&rec, &MhimConfig { t: 1, r: Some(1), b: 0 }, 0);
        assert_eq!(plan.top_pool, vec![0]);
    }

    #[test]
    fn mask_csv_format() {
        let plan = MaskPlan {
            bag_id: "bag-1".into(),
            masked_indices: vec![0, 4],
            top_pool: vec![0, 2],
            top_masked: vec![0],
            bottom_masked: vec![4],
            seed: 3,
        };
        let csv = mask_rows_to_csv(&plan.rows(7));
        assert_eq!(
            csv,
            "bag_id,epoch,masked_index,pool\nbag-1,7,0,top\nbag-1,7,4,bottom\n"
        );
    }
}

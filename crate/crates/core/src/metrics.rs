//! Prediction and explainability metrics: RMSE/MAE, attention entropy,
//! Recall@k against relevance labels, and drop-top-k sensitivity curves.

use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Bag;
use crate::error::{Error, Result};
use crate::mining::{rank_descending, AttentionRecord};
use crate::model::{encode_bag, ModelConfig, ModelParams};
use crate::rng::{derive_seed, SplitMix64};

pub fn rmse_mae(predictions: &[f64], targets: &[f64]) -> Result<(f64, f64)> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::Shape {
            op: "rmse_mae".into(),
            lhs: vec![predictions.len()],
            rhs: vec![targets.len()],
        });
    }
    let n = predictions.len() as f64;
    let mut sq = 0.0;
    let mut abs = 0.0;
    for (p, t) in predictions.iter().zip(targets) {
        let d = p - t;
        sq += d * d;
        abs += d.abs();
    }
    Ok(((sq / n).sqrt(), abs / n))
}

/// Shannon entropy of an attention distribution in nats, with 0 ln 0 := 0.
pub fn attention_entropy(weights: &[f64]) -> f64 {
    -weights
        .iter()
        .filter(|&&a| a > 0.0)
        .map(|&a| a * a.ln())
        .sum::<f64>()
}

fn top_k_count(n: usize, k_percent: f64) -> usize {
    ((n as f64 * k_percent / 100.0).floor() as usize).max(1)
}

/// Fraction of relevance-positive instances ranked within the top k% of
/// attention weights. `Ok(None)` when the bag has no positive label (the
/// metric is undefined there and excluded from aggregates).
pub fn recall_at_k(weights: &[f64], isl: &[u8], k_percent: f64) -> Result<Option<f64>> {
    if weights.len() != isl.len() {
        return Err(Error::Shape {
            op: "recall_at_k".into(),
            lhs: vec![weights.len()],
            rhs: vec![isl.len()],
        });
    }
    if !(0.0 < k_percent && k_percent <= 100.0) {
        return Err(Error::Config(format!(
            "k_percent {k_percent} outside (0, 100]"
        )));
    }
    if isl.iter().any(|&l| l > 1) {
        return Err(Error::Config("isl labels must be 0/1".into()));
    }
    let positives: u32 = isl.iter().map(|&l| u32::from(l)).sum();
    if positives == 0 {
        return Ok(None);
    }
    let k_count = top_k_count(weights.len(), k_percent);
    let hits: u32 = rank_descending(weights)
        .into_iter()
        .take(k_count)
        .map(|i| u32::from(isl[i]))
        .sum();
    Ok(Some(f64::from(hits) / f64::from(positives)))
}

/// Micro-averaged Recall@k: numerators and denominators are summed over all
/// bags with at least one positive label before dividing.
pub fn recall_at_k_aggregate(
    records: &[AttentionRecord],
    isl_lists: &[Vec<u8>],
    k_percent: f64,
) -> Result<Option<f64>> {
    if records.len() != isl_lists.len() {
        return Err(Error::Shape {
            op: "recall_at_k_aggregate".into(),
            lhs: vec![records.len()],
            rhs: vec![isl_lists.len()],
        });
    }
    let mut hits = 0u64;
    let mut positives = 0u64;
    for (record, isl) in records.iter().zip(isl_lists) {
        if recall_at_k(&record.weights, isl, k_percent)?.is_none() {
            continue;
        }
        let k_count = top_k_count(record.weights.len(), k_percent);
        hits += rank_descending(&record.weights)
            .into_iter()
            .take(k_count)
            .map(|i| u64::from(isl[i]))
            .sum::<u64>();
        positives += isl.iter().map(|&l| u64::from(l)).sum::<u64>();
    }
    if positives == 0 {
        return Ok(None);
    }
    Ok(Some(hits as f64 / positives as f64))
}

// ---------------------------------------------------------------------------
// Dataset-level report
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerBagMetrics {
    pub bag_id: String,
    pub prediction: f64,
    pub target: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    pub mae: f64,
    /// Arithmetic mean of per-bag attention entropies, in nats.
    pub mean_entropy: f64,
    pub per_bag: Vec<PerBagMetrics>,
}

/// Unmasked forward pass over a dataset with RMSE, MAE, and mean attention
/// entropy.
pub fn evaluate(params: &ModelParams, config: &ModelConfig, dataset: &[Bag]) -> Result<MetricReport> {
    let mut per_bag = Vec::with_capacity(dataset.len());
    for bag in dataset {
        let out = encode_bag(params, config, bag, None)?;
        per_bag.push(PerBagMetrics {
            bag_id: bag.id.clone(),
            prediction: out.prediction,
            target: bag.target,
            entropy: attention_entropy(&out.attention),
        });
    }
    let preds: Vec<f64> = per_bag.iter().map(|b| b.prediction).collect();
    let targets: Vec<f64> = per_bag.iter().map(|b| b.target).collect();
    let (rmse, mae) = rmse_mae(&preds, &targets)?;
    let mean_entropy = per_bag.iter().map(|b| b.entropy).sum::<f64>() / per_bag.len() as f64;
    Ok(MetricReport {
        rmse,
        mae,
        mean_entropy,
        per_bag,
    })
}

// ---------------------------------------------------------------------------
// Drop-top-k sensitivity
// ---------------------------------------------------------------------------

/// Which ranking drives the instance drops.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropCriterion {
    BaselineAttention,
    MhimAttention,
    Random,
}

impl DropCriterion {
    pub fn needs_attention(self) -> bool {
        !matches!(self, DropCriterion::Random)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DropCriterion::BaselineAttention => "baseline-attention",
            DropCriterion::MhimAttention => "mhim-attention",
            DropCriterion::Random => "random",
        }
    }
}

impl std::fmt::Display for DropCriterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DropCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline-attention" => Ok(DropCriterion::BaselineAttention),
            "mhim-attention" => Ok(DropCriterion::MhimAttention),
            "random" => Ok(DropCriterion::Random),
            other => Err(Error::Config(format!("unknown drop criterion {other}"))),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub criterion: DropCriterion,
    /// (k_percent, rmse) points with strictly increasing k.
    pub points: Vec<(f64, f64)>,
}

impl SensitivityCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, rmse) in &self.points {
            out.push_str(&format!("{},{},{}\n", self.criterion, k, rmse));
        }
        out
    }
}

/// RMSE after physically removing the top-k% instances per bag (never all;
/// at least one instance always survives) and re-running the model on the
/// shortened bag. Attention criteria rank by the supplied records; the
/// random criterion draws per-bag, per-k seeded drops.
pub fn sensitivity_curve(
    params: &ModelParams,
    config: &ModelConfig,
    dataset: &[Bag],
    criterion: DropCriterion,
    k_grid: &[f64],
    attention_source: Option<&[AttentionRecord]>,
    seed: u64,
) -> Result<SensitivityCurve> {
    for &k in k_grid {
        if !(0.0 < k && k < 100.0) {
            return Err(Error::Config(format!("drop percentage {k} outside (0, 100)")));
        }
    }
    let ranking: Option<BTreeMap<&str, &AttentionRecord>> = match criterion.needs_attention() {
        true => {
            let records = attention_source.ok_or_else(|| {
                Error::Config(format!(
                    "criterion {criterion} needs an attention source"
                ))
            })?;
            let map: BTreeMap<&str, &AttentionRecord> = records
                .iter()
                .map(|r| (r.bag_id.as_str(), r))
                .collect();
            for bag in dataset {
                let record = map.get(bag.id.as_str()).ok_or_else(|| {
                    Error::Config(format!("no attention record for bag {}", bag.id))
                })?;
                if record.weights.len() != bag.len() {
                    return Err(Error::Shape {
                        op: format!("attention record for bag {}", bag.id),
                        lhs: vec![record.weights.len()],
                        rhs: vec![bag.len()],
                    });
                }
            }
            Some(map)
        }
        false => None,
    };

    let mut ks: Vec<f64> = k_grid.to_vec();
    ks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ks.dedup();

    let mut points = Vec::with_capacity(ks.len());
    for &k in &ks {
        let mut preds = Vec::with_capacity(dataset.len());
        let mut targets = Vec::with_capacity(dataset.len());
        for bag in dataset {
            let n = bag.len();
            let drop_count = ((n as f64 * k / 100.0).floor() as usize).min(n - 1);
            let dropped: Vec<usize> = match &ranking {
                Some(map) => rank_descending(&map[bag.id.as_str()].weights)
                    .into_iter()
                    .take(drop_count)
                    .collect(),
                None => {
                    let stream = derive_seed(seed, &bag.id, k.to_bits());
                    let pool: Vec<usize> = (0..n).collect();
                    SplitMix64::new(stream).sample_without_replacement(&pool, drop_count)
                }
            };
            let keep: Vec<bool> = {
                let mut keep = vec![true; n];
                for idx in dropped {
                    keep[idx] = false;
                }
                keep
            };
            let reduced = Bag {
                id: bag.id.clone(),
                target: bag.target,
                instances: bag
                    .instances
                    .iter()
                    .zip(&keep)
                    .filter(|(_, &kept)| kept)
                    .map(|(inst, _)| inst.clone())
                    .collect(),
            };
            preds.push(encode_bag(params, config, &reduced, None)?.prediction);
            targets.push(bag.target);
        }
        let (rmse, _) = rmse_mae(&preds, &targets)?;
        points.push((k, rmse));
    }
    Ok(SensitivityCurve { criterion, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Instance;
    use crate::model::init_params;

    #[test]
    fn rmse_mae_hand_cases() {
        assert_eq!(rmse_mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        let (rmse, mae) = rmse_mae(&[1.0, 3.0], &[0.0, 0.0]).unwrap();
        assert!((rmse - 5.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(mae, 2.0);
        let (r1, m1) = rmse_mae(&[4.5], &[1.5]).unwrap();
        assert_eq!((r1, m1), (3.0, 3.0));
        assert!(rmse_mae(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn entropy_known_values() {
        assert!((attention_entropy(&[0.25; 4]) - 4.0f64.ln()).abs() < 1e-12);
        assert_eq!(attention_entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((attention_entropy(&[0.5, 0.5, 0.0, 0.0]) - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn entropy_is_permutation_invariant_and_bounded() {
        let w = [0.1, 0.2, 0.3, 0.4];
        let p = [0.4, 0.1, 0.3, 0.2];
        assert!((attention_entropy(&w) - attention_entropy(&p)).abs() < 1e-12);
        assert!(attention_entropy(&w) <= 4.0f64.ln() + 1e-12);
    }

    #[test]
    fn recall_hand_case() {
        let got = recall_at_k(&[0.4, 0.3, 0.2, 0.1], &[1, 0, 1, 0], 50.0)
            .unwrap()
            .unwrap();
        assert_eq!(got, 0.5);
    }

    #[test]
    fn recall_is_one_when_positives_lead() {
        for k in [25.0, 50.0, 100.0] {
            let got = recall_at_k(&[0.9, 0.05, 0.03, 0.02], &[1, 0, 0, 0], k)
                .unwrap()
                .unwrap();
            assert_eq!(got, 1.0);
        }
    }

    #[test]
    fn recall_undefined_without_positives() {
        assert_eq!(recall_at_k(&[0.6, 0.4], &[0, 0], 50.0).unwrap(), None);
    }

    #[test]
    fn recall_at_full_coverage_is_one() {
        let mut rng = SplitMix64::new(6);
        for _ in 0..50 {
            let n = 1 + rng.below(12);
            let weights: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
            let isl: Vec<u8> = (0..n).map(|_| u8::from(rng.next_f64() < 0.4)).collect();
            if isl.iter().all(|&l| l == 0) {
                continue;
            }
            assert_eq!(recall_at_k(&weights, &isl, 100.0).unwrap(), Some(1.0));
        }
    }

    #[test]
    fn recall_is_monotone_in_k() {
        let mut rng = SplitMix64::new(13);
        for _ in 0..100 {
            let n = 2 + rng.below(15);
            let weights: Vec<f64> = (0..n).map(|_| rng.next_f64()).collect();
            let isl: Vec<u8> = (0..n).map(|_| u8::from(rng.next_f64() < 0.3)).collect();
            if isl.iter().all(|&l| l == 0) {
                continue;
            }
            let mut prev = 0.0;
            for k in [10.0, 25.0, 50.0, 75.0, 100.0] {
                let r = recall_at_k(&weights, &isl, k).unwrap().unwrap();
                assert!(r >= prev - 1e-12);
                prev = r;
            }
        }
    }

    #[test]
    fn aggregate_is_micro_average() {
        let records = vec![
            AttentionRecord {
                bag_id: "a".into(),
                weights: vec![0.5, 0.3, 0.15, 0.05],
            },
            AttentionRecord {
                bag_id: "b".into(),
                weights: vec![0.4, 0.35, 0.2, 0.05],
            },
        ];
        // Bag a: top-2 = {0,1}, positives {0,3} -> 1 of 2.
        // Bag b: top-2 = {0,1}, positives {2,3} -> 0 of 2.
        let isl = vec![vec![1, 0, 0, 1], vec![0, 0, 1, 1]];
        let got = recall_at_k_aggregate(&records, &isl, 50.0).unwrap().unwrap();
        assert_eq!(got, 0.25);
    }

    #[test]
    fn aggregate_skips_zero_positive_bags() {
        let records = vec![
            AttentionRecord {
                bag_id: "a".into(),
                weights: vec![0.9, 0.1],
            },
            AttentionRecord {
                bag_id: "none".into(),
                weights: vec![0.5, 0.5],
            },
        ];
        let isl = vec![vec![1, 0], vec![0, 0]];
        let got = recall_at_k_aggregate(&records, &isl, 50.0).unwrap().unwrap();
        assert_eq!(got, 1.0);
        let single = recall_at_k_aggregate(&records[..1], &isl[..1], 50.0)
            .unwrap()
            .unwrap();
        assert_eq!(
            single,
            recall_at_k(&records[0].weights, &isl[0], 50.0)
                .unwrap()
                .unwrap()
        );
    }

    fn tiny_model() -> (ModelParams, ModelConfig) {
        let cfg = ModelConfig {
            response_dim: 4,
            prefix_dim: 0,
            proj_dim: 3,
            lstm_hidden: 2,
            attn_dim: 2,
            seed: 21,
        };
        (init_params(&cfg).unwrap(), cfg)
    }

    fn tiny_bags(cfg: &ModelConfig, sizes: &[usize]) -> Vec<Bag> {
        let mut rng = SplitMix64::new(4);
        sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| Bag {
                id: format!("bag-{i}"),
                target: rng.uniform(0.0, 2.0),
                instances: (0..n)
                    .map(|_| Instance {
                        response: (0..cfg.response_dim).map(|_| rng.uniform(-1.0, 1.0)).collect(),
                        prefix: None,
                        isl: None,
                    })
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn evaluate_report_shape() {
        let (params, cfg) = tiny_model();
        let bags = tiny_bags(&cfg, &[3, 5, 2]);
        let report = evaluate(&params, &cfg, &bags).unwrap();
        assert_eq!(report.per_bag.len(), 3);
        assert!(report.rmse >= 0.0 && report.mae >= 0.0 && report.mean_entropy >= 0.0);
        let mean = report.per_bag.iter().map(|b| b.entropy).sum::<f64>() / 3.0;
        assert!((report.mean_entropy - mean).abs() < 1e-12);
    }

    #[test]
    fn tiny_drop_fraction_changes_nothing() {
        let (params, cfg) = tiny_model();
        let bags = tiny_bags(&cfg, &[3, 4]);
        // 1% of 3 or 4 instances floors to zero drops.
        let curve = sensitivity_curve(
            &params,
            &cfg,
            &bags,
            DropCriterion::Random,
            &[1.0],
            None,
            11,
        )
        .unwrap();
        let report = evaluate(&params, &cfg, &bags).unwrap();
        assert_eq!(curve.points[0].1, report.rmse);
    }

    #[test]
    fn random_curve_is_reproducible_and_single_instance_bags_survive() {
        let (params, cfg) = tiny_model();
        let bags = tiny_bags(&cfg, &[1, 6, 5]);
        let run = || {
            sensitivity_curve(
                &params,
                &cfg,
                &bags,
                DropCriterion::Random,
                &[50.0, 90.0],
                None,
                3,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.points, b.points);
        // 90% of a single-instance bag still keeps the instance; encode_bag
        // would fail on an empty bag, so success here proves the keep-one rule.
    }

    #[test]
    fn attention_criterion_requires_source() {
        let (params, cfg) = tiny_model();
        let bags = tiny_bags(&cfg, &[3]);
        assert!(matches!(
            sensitivity_curve(
                &params,
                &cfg,
                &bags,
                DropCriterion::MhimAttention,
                &[50.0],
                None,
                0,
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn attention_guided_drop_uses_ranking() {
        let (params, cfg) = tiny_model();
        let bags = tiny_bags(&cfg, &[4]);
        let records = vec![AttentionRecord {
            bag_id: "bag-0".into(),
            weights: vec![0.1, 0.6, 0.2, 0.1],
        }];
        let curve = sensitivity_curve(
            &params,
            &cfg,
            &bags,
            DropCriterion::BaselineAttention,
            &[25.0],
            Some(&records),
            0,
        )
        .unwrap();
        // Dropping exactly index 1 (the top-ranked one).
        let reduced = Bag {
            id: "bag-0".into(),
            target: bags[0].target,
            instances: vec![
                bags[0].instances[0].clone(),
                bags[0].instances[2].clone(),
                bags[0].instances[3].clone(),
            ],
        };
        let expected = encode_bag(&params, &cfg, &reduced, None).unwrap().prediction;
        let (rmse, _) = rmse_mae(&[expected], &[bags[0].target]).unwrap();
        assert!((curve.points[0].1 - rmse).abs() < 1e-12);
    }
}

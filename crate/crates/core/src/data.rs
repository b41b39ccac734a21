//! Bag dataset format (JSON-Lines), synthetic weakly-labeled data with
//! planted instance relevance, and checkpoint persistence.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::SplitMix64;

/// One embedded interview turn. `r` is the response embedding, `q` the
/// optional prefix embedding, `isl` the optional expert relevance label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    #[serde(rename = "r")]
    pub response: Vec<f64>,
    #[serde(rename = "q", default, skip_serializing_if = "Option::is_none")]
    pub prefix: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub isl: Option<u8>,
}

/// One interview-analog: an ordered nonempty list of instances plus a scalar
/// severity target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub id: String,
    pub target: f64,
    pub instances: Vec<Instance>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Planted relevance labels, when every instance carries one.
    pub fn isl(&self) -> Option<Vec<u8>> {
        self.instances.iter().map(|i| i.isl).collect()
    }
}

/// Embedding widths of a dataset: (response width, optional prefix width).
pub fn dataset_dims(bags: &[Bag]) -> Option<(usize, Option<usize>)> {
    let first = bags.first()?.instances.first()?;
    Some((
        first.response.len(),
        first.prefix.as_ref().map(|p| p.len()),
    ))
}

fn validate_bag(bag: &Bag, dims: &mut Option<(usize, Option<usize>)>) -> Result<()> {
    if bag.instances.is_empty() {
        return Err(Error::Schema {
            bag_id: bag.id.clone(),
            msg: "bag has no instances".into(),
        });
    }
    for inst in &bag.instances {
        let full = (inst.response.len(), inst.prefix.as_ref().map(|p| p.len()));
        match dims {
            None => *dims = Some(full),
            Some(expected) => {
                if *expected != full {
                    return Err(Error::Schema {
                        bag_id: bag.id.clone(),
                        msg: format!(
                            "embedding widths {full:?} differ from the dataset's {expected:?}"
                        ),
                    });
                }
            }
        }
        if let Some(label) = inst.isl {
            if label > 1 {
                return Err(Error::Schema {
                    bag_id: bag.id.clone(),
                    msg: format!("isl label {label} is not 0/1"),
                });
            }
        }
        if inst.response.iter().any(|x| !x.is_finite())
            || inst
                .prefix
                .as_ref()
                .is_some_and(|p| p.iter().any(|x| !x.is_finite()))
        {
            return Err(Error::Schema {
                bag_id: bag.id.clone(),
                msg: "embedding contains a non-finite value".into(),
            });
        }
    }
    if !bag.target.is_finite() {
        return Err(Error::Schema {
            bag_id: bag.id.clone(),
            msg: "target is not finite".into(),
        });
    }
    Ok(())
}

/// Check every dataset invariant: nonempty bags, constant embedding widths,
/// 0/1 labels, finite values, unique ids.
pub fn validate_dataset(bags: &[Bag]) -> Result<()> {
    let mut dims = None;
    let mut seen = BTreeSet::new();
    for bag in bags {
        if !seen.insert(bag.id.clone()) {
            return Err(Error::Schema {
                bag_id: bag.id.clone(),
                msg: "duplicate bag id".into(),
            });
        }
        validate_bag(bag, &mut dims)?;
    }
    Ok(())
}

/// Load a JSON-Lines dataset, one bag per line. Parsing is streamed so memory
/// stays proportional to one bag plus the output.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Bag>> {
    let file = File::open(path.as_ref())?;
    let reader = BufReader::new(file);
    let mut bags = Vec::new();
    let mut dims = None;
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx as u64 + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let bag: Bag = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        if !seen.insert(bag.id.clone()) {
            return Err(Error::Schema {
                bag_id: bag.id,
                msg: format!("duplicate bag id at line {line_no}"),
            });
        }
        validate_bag(&bag, &mut dims)?;
        bags.push(bag);
    }
    Ok(bags)
}

pub fn save_dataset(bags: &[Bag], path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    for bag in bags {
        serde_json::to_writer(&mut out, bag)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Logical OR over instance labels: the bag label is 1 iff some instance
/// label is 1.
pub fn bag_label_oracle(instance_labels: &[u8]) -> u8 {
    assert!(!instance_labels.is_empty(), "empty label list");
    u8::from(instance_labels.iter().any(|&l| l == 1))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Synthetic weakly-labeled benchmark generator settings. Relevant instances
/// get an additive signal of norm `signal_strength` along one fixed random
/// direction; the target is `target_beta * (relevant count) + noise`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_bags: usize,
    pub bag_size_range: [usize; 2],
    pub response_dim: usize,
    pub prefix_dim: usize,
    pub relevance_rate: f64,
    /// Minimum relevant instances per positive bag; bags with at least one
    /// relevant draw are topped up to this count.
    pub redundancy: usize,
    pub signal_strength: f64,
    pub noise_sigma: f64,
    pub target_beta: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_bags: 200,
            bag_size_range: [10, 40],
            response_dim: 16,
            prefix_dim: 0,
            relevance_rate: 0.15,
            redundancy: 3,
            signal_strength: 3.0,
            noise_sigma: 0.1,
            target_beta: 1.0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bags == 0 {
            return Err(Error::Config("n_bags must be positive".into()));
        }
        if self.bag_size_range[0] == 0 || self.bag_size_range[0] > self.bag_size_range[1] {
            return Err(Error::Config(format!(
                "bad bag_size_range {:?}",
                self.bag_size_range
            )));
        }
        if self.response_dim == 0 {
            return Err(Error::Config("response_dim must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.relevance_rate) {
            return Err(Error::Config(format!(
                "relevance_rate {} outside [0, 1]",
                self.relevance_rate
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        Ok(())
    }
}

/// Deterministic synthetic dataset. Embeddings are standard normal; relevant
/// instances are marked with `isl = 1` and shifted along the dataset's signal
/// direction.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Vec<Bag>> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed);

    let mut direction: Vec<f64> = (0..cfg.response_dim).map(|_| rng.next_gaussian()).collect();
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt();
    // A zero draw is measure-zero; fall back to a unit axis for safety.
    if norm > 0.0 {
        for d in &mut direction {
            *d /= norm;
        }
    } else {
        direction[0] = 1.0;
    }

    let [min_size, max_size] = cfg.bag_size_range;
    let mut bags = Vec::with_capacity(cfg.n_bags);
    for bag_idx in 0..cfg.n_bags {
        let size = min_size + rng.below(max_size - min_size + 1);
        let mut instances = Vec::with_capacity(size);
        let mut relevant: Vec<bool> = (0..size).map(|_| rng.next_f64() < cfg.relevance_rate).collect();

        // Positive bags are topped up so the signal stays recoverable after
        // masking a top instance.
        let mut count = relevant.iter().filter(|&&r| r).count();
        let floor = cfg.redundancy.min(size);
        if count > 0 && count < floor {
            let negatives: Vec<usize> =
                (0..size).filter(|&i| !relevant[i]).collect();
            let extra = rng.sample_without_replacement(&negatives, floor - count);
            for i in extra {
                relevant[i] = true;
            }
            count = floor;
        }
        if cfg.redundancy >= 2 && count > 0 {
            assert!(
                count >= cfg.redundancy.min(size),
                "positive bag below redundancy floor"
            );
        }

        for &is_relevant in &relevant {
            let mut response: Vec<f64> =
                (0..cfg.response_dim).map(|_| rng.next_gaussian()).collect();
            if is_relevant {
                for (x, d) in response.iter_mut().zip(&direction) {
                    *x += cfg.signal_strength * d;
                }
            }
            let prefix = if cfg.prefix_dim > 0 {
                Some((0..cfg.prefix_dim).map(|_| rng.next_gaussian()).collect())
            } else {
                None
            };
            instances.push(Instance {
                response,
                prefix,
                isl: Some(u8::from(is_relevant)),
            });
        }

        let noise = if cfg.noise_sigma > 0.0 {
            cfg.noise_sigma * rng.next_gaussian()
        } else {
            0.0
        };
        bags.push(Bag {
            id: format!("bag-{bag_idx:04}"),
            target: cfg.target_beta * count as f64 + noise,
            instances,
        });
    }
    Ok(bags)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointDoc {
    schema_version: u32,
    model_config: ModelConfig,
    buffers: BTreeMap<String, crate::tensor::Tensor>,
}

/// Write a versioned JSON checkpoint. serde_json emits shortest-round-trip
/// float literals, so buffers reload bit-identically.
pub fn save_checkpoint(
    params: &ModelParams,
    config: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let doc = CheckpointDoc {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        model_config: config.clone(),
        buffers: params.to_buffer_map(),
    };
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    serde_json::to_writer(&mut out, &doc)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

/// Load a checkpoint, refusing unknown schema versions and validating every
/// buffer shape against the embedded config.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, ModelConfig)> {
    let file = File::open(path.as_ref())?;
    let doc: CheckpointDoc = serde_json::from_reader(BufReader::new(file))?;
    if doc.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Version {
            found: doc.schema_version,
            supported: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    doc.model_config.validate()?;
    let params = ModelParams::from_buffer_map(&doc.model_config, doc.buffers)?;
    Ok((params, doc.model_config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn tiny_dataset() -> Vec<Bag> {
        vec![
            Bag {
                id: "a".into(),
                target: 1.0,
                instances: vec![
                    Instance {
                        response: vec![0.1, -0.2],
                        prefix: None,
                        isl: Some(1),
                    },
                    Instance {
                        response: vec![0.3, 0.4],
                        prefix: None,
                        isl: Some(0),
                    },
                ],
            },
            Bag {
                id: "b".into(),
                target: 0.0,
                instances: vec![Instance {
                    response: vec![-1.0, 2.0],
                    prefix: None,
                    isl: Some(0),
                }],
            },
        ]
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let bags = tiny_dataset();
        save_dataset(&bags, &path).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(bags, loaded);
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(load_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"id\":\"a\",\"target\":1.0,\"instances\":[{\"r\":[0.0]}]}\nnot json\n",
        )
        .unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_width_names_the_bag() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("widths.jsonl");
        std::fs::write(
            &path,
            concat!(
                "{\"id\":\"a\",\"target\":1.0,\"instances\":[{\"r\":[0.0,1.0]}]}\n",
                "{\"id\":\"wide\",\"target\":1.0,\"instances\":[{\"r\":[0.0,1.0,2.0]}]}\n",
            ),
        )
        .unwrap();
        match load_dataset(&path) {
            Err(Error::Schema { bag_id, .. }) => assert_eq!(bag_id, "wide"),
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dups.jsonl");
        let line = "{\"id\":\"a\",\"target\":1.0,\"instances\":[{\"r\":[0.0]}]}\n";
        std::fs::write(&path, format!("{line}{line}")).unwrap();
        assert!(matches!(load_dataset(&path), Err(Error::Schema { .. })));
    }

    #[test]
    fn bag_label_oracle_matches_or() {
        assert_eq!(bag_label_oracle(&[0, 0, 0]), 0);
        assert_eq!(bag_label_oracle(&[0, 1, 0]), 1);
        assert_eq!(bag_label_oracle(&[1, 1, 1]), 1);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let cfg = SynthConfig {
            n_bags: 12,
            bag_size_range: [3, 8],
            response_dim: 6,
            ..SynthConfig::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, b);
        validate_dataset(&a).unwrap();
    }

    #[test]
    fn noise_free_targets_count_relevant_instances() {
        let cfg = SynthConfig {
            n_bags: 30,
            noise_sigma: 0.0,
            target_beta: 2.5,
            ..SynthConfig::default()
        };
        for bag in generate_synthetic(&cfg).unwrap() {
            let count = bag
                .instances
                .iter()
                .filter(|i| i.isl == Some(1))
                .count();
            assert_eq!(bag.target, 2.5 * count as f64, "bag {}", bag.id);
        }
    }

    #[test]
    fn relevance_frequency_matches_rate_without_top_up() {
        // redundancy 1 disables topping up, leaving raw Bernoulli draws.
        let cfg = SynthConfig {
            n_bags: 400,
            bag_size_range: [20, 40],
            relevance_rate: 0.3,
            redundancy: 1,
            seed: 99,
            ..SynthConfig::default()
        };
        let bags = generate_synthetic(&cfg).unwrap();
        let (mut total, mut relevant) = (0usize, 0usize);
        for bag in &bags {
            for inst in &bag.instances {
                total += 1;
                relevant += usize::from(inst.isl == Some(1));
            }
        }
        assert!(total > 10_000, "need a large sample, got {total}");
        let freq = relevant as f64 / total as f64;
        assert!((freq - 0.3).abs() < 0.02, "freq {freq}");
    }

    #[test]
    fn positive_bags_meet_redundancy_floor() {
        let cfg = SynthConfig {
            n_bags: 100,
            redundancy: 3,
            ..SynthConfig::default()
        };
        for bag in generate_synthetic(&cfg).unwrap() {
            let count = bag
                .instances
                .iter()
                .filter(|i| i.isl == Some(1))
                .count();
            assert!(count == 0 || count >= 3, "bag {} has {count}", bag.id);
        }
    }

    #[test]
    fn eq1_binary_labels_match_planted_isl() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            target_beta: 1.0,
            ..SynthConfig::default()
        };
        for bag in generate_synthetic(&cfg).unwrap() {
            let labels = bag.isl().unwrap();
            let binary = u8::from(bag.target >= 1.0);
            assert_eq!(bag_label_oracle(&labels), binary, "bag {}", bag.id);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_identical() {
        let cfg = ModelConfig {
            response_dim: 5,
            prefix_dim: 2,
            proj_dim: 4,
            lstm_hidden: 3,
            attn_dim: 3,
            seed: 17,
        };
        let params = init_params(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&params, &cfg, &path).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_cfg, cfg);
        for ((na, a), (nb, b)) in params.buffers().iter().zip(loaded.buffers().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a.data(), b.data(), "buffer {na}");
        }
    }

    #[test]
    fn truncated_checkpoint_is_a_parse_error() {
        let cfg = ModelConfig {
            response_dim: 4,
            prefix_dim: 0,
            proj_dim: 3,
            lstm_hidden: 2,
            attn_dim: 2,
            seed: 1,
        };
        let params = init_params(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&params, &cfg, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn unknown_schema_version_is_refused() {
        let cfg = ModelConfig {
            response_dim: 4,
            prefix_dim: 0,
            proj_dim: 3,
            lstm_hidden: 2,
            attn_dim: 2,
            seed: 1,
        };
        let params = init_params(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        save_checkpoint(&params, &cfg, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let bumped = text.replace("\"schema_version\":1", "\"schema_version\":9");
        std::fs::write(&path, bumped).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Version { found: 9, .. })
        ));
    }
}

//! Synthetic few-shot classification data.
//!
//! Each class has a Gaussian center `μ_c ∈ R^{P·d_model}`; a sample is
//! `μ_c + σ·ε` reshaped to `P × d_model`. Draw order: all centers (class
//! order, row-major), then samples class by class.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub per_class_count: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            per_class_count: 40,
            sigma: 0.5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub tokens: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FewShotDataset {
    pub num_classes: usize,
    pub n_patches: usize,
    pub d_model: usize,
    pub per_class_count: usize,
    pub sigma: f64,
    pub seed: u64,
    pub samples: Vec<Sample>,
    /// Generator centers; empty for imported datasets.
    pub class_centers: Vec<Vec<f64>>,
}

/// A labeled subset restricted to `classes`. Model outputs are indexed by
/// position in `classes`, see [`Split::local_labels`].
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub classes: Vec<usize>,
    pub samples: Vec<Sample>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn local_label(&self, label: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == label)
    }

    /// Labels as indices into `classes`.
    pub fn local_labels(&self) -> Vec<usize> {
        self.samples
            .iter()
            .map(|s| self.local_label(s.label).expect("sample outside split classes"))
            .collect()
    }

    pub fn tokens(&self) -> Vec<&Tensor> {
        self.samples.iter().map(|s| &s.tokens).collect()
    }

    /// `(tokens, local label)` pairs.
    pub fn items(&self) -> Vec<(&Tensor, usize)> {
        self.tokens().into_iter().zip(self.local_labels()).collect()
    }
}

pub fn generate_dataset(
    num_classes: usize,
    n_patches: usize,
    d_model: usize,
    per_class_count: usize,
    sigma: f64,
    seed: u64,
) -> Result<FewShotDataset> {
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    if per_class_count < 1 || n_patches < 1 || d_model < 1 {
        return Err(Error::Config("sample counts and dimensions must be >= 1".into()));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Config(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let width = n_patches * d_model;
    let mut rng = SplitMix64::new(seed);
    let centers: Vec<Vec<f64>> = (0..num_classes).map(|_| rng.gaussian_vec(width, 1.0)).collect();
    let mut samples = Vec::with_capacity(num_classes * per_class_count);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..per_class_count {
            let values = center.iter().map(|m| m + sigma * rng.gaussian()).collect();
            samples.push(Sample {
                tokens: Tensor::new(vec![n_patches, d_model], values)?,
                label,
            });
        }
    }
    Ok(FewShotDataset {
        num_classes,
        n_patches,
        d_model,
        per_class_count,
        sigma,
        seed,
        samples,
        class_centers: centers,
    })
}

impl FewShotDataset {
    pub fn from_config(cfg: &DatasetConfig, n_patches: usize, d_model: usize) -> Result<Self> {
        generate_dataset(cfg.num_classes, n_patches, d_model, cfg.per_class_count, cfg.sigma, cfg.seed)
    }

    pub fn all_classes(&self) -> Vec<usize> {
        (0..self.num_classes).collect()
    }

    fn class_indices(&self, class: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.label == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// `K` training samples per class in `classes` (uniform, without
    /// replacement); the rest of those classes go to the test split.
    fn shots_for(&self, classes: &[usize], shots: usize, rng: &mut SplitMix64) -> Result<(Split, Split)> {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for &c in classes {
            let mut idx = self.class_indices(c);
            if shots == 0 || shots >= idx.len() {
                return Err(Error::Config(format!(
                    "shots must be in 1..{} for class {c}, got {shots}",
                    idx.len()
                )));
            }
            idx.shuffle(rng);
            let (head, tail) = idx.split_at(shots);
            let mut tail = tail.to_vec();
            tail.sort_unstable();
            train.extend(head.iter().map(|&i| self.samples[i].clone()));
            test.extend(tail.iter().map(|&i| self.samples[i].clone()));
        }
        let split = |samples| Split {
            classes: classes.to_vec(),
            samples,
        };
        Ok((split(train), split(test)))
    }

    pub fn to_json(&self) -> serde_json::Value {
        let samples: Vec<_> = self
            .samples
            .iter()
            .map(|s| {
                serde_json::json!({
                    "tokens": s.tokens.rows().map(<[f64]>::to_vec).collect::<Vec<_>>(),
                    "label": s.label,
                })
            })
            .collect();
        serde_json::json!({
            "config": {
                "num_classes": self.num_classes,
                "n_patches": self.n_patches,
                "d_model": self.d_model,
                "per_class_count": self.per_class_count,
                "sigma": self.sigma,
                "seed": self.seed,
            },
            "samples": samples,
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Doc {
            config: Header,
            samples: Vec<Row>,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Header {
            num_classes: usize,
            n_patches: usize,
            d_model: usize,
            per_class_count: usize,
            sigma: f64,
            seed: u64,
        }
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Row {
            tokens: Vec<Vec<f64>>,
            label: usize,
        }
        let doc: Doc = serde_json::from_value(value.clone()).map_err(|e| Error::Format(e.to_string()))?;
        let h = doc.config;
        let mut samples = Vec::with_capacity(doc.samples.len());
        for row in doc.samples {
            if row.label >= h.num_classes {
                return Err(Error::Dataset(format!("label {} out of range", row.label)));
            }
            let tokens = Tensor::from_rows(&row.tokens)?;
            if tokens.shape() != [h.n_patches, h.d_model] {
                return Err(Error::Dataset(format!(
                    "sample tokens {:?}, expected [{}, {}]",
                    tokens.shape(),
                    h.n_patches,
                    h.d_model
                )));
            }
            samples.push(Sample {
                tokens,
                label: row.label,
            });
        }
        Ok(Self {
            num_classes: h.num_classes,
            n_patches: h.n_patches,
            d_model: h.d_model,
            per_class_count: h.per_class_count,
            sigma: h.sigma,
            seed: h.seed,
            samples,
            class_centers: Vec::new(),
        })
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(&self.to_json()).expect("dataset serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
            offset: e.column(),
            message: e.to_string(),
        })?;
        Self::from_json(&value)
    }
}

/// `K`-shot train split and the remaining test split over all classes.
pub fn sample_k_shot(dataset: &FewShotDataset, shots: usize, sampling_seed: u64) -> Result<(Split, Split)> {
    let mut rng = SplitMix64::new(sampling_seed);
    dataset.shots_for(&dataset.all_classes(), shots, &mut rng)
}

/// Base classes are the first `⌈C/2⌉` indices, new classes the rest.
pub fn base_new_classes(num_classes: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if num_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
    }
    let base = num_classes.div_ceil(2);
    Ok(((0..base).collect(), (base..num_classes).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseNewSplit {
    pub base_train: Split,
    pub base_test: Split,
    pub new_test: Split,
}

/// `K` shots per base class for training; base remainder and every
/// new-class sample for testing.
pub fn base_new_split(dataset: &FewShotDataset, shots: usize, sampling_seed: u64) -> Result<BaseNewSplit> {
    let (base, new) = base_new_classes(dataset.num_classes)?;
    let mut rng = SplitMix64::new(sampling_seed);
    let (base_train, base_test) = dataset.shots_for(&base, shots, &mut rng)?;
    let new_test = Split {
        samples: dataset
            .samples
            .iter()
            .filter(|s| new.contains(&s.label))
            .cloned()
            .collect(),
        classes: new,
    };
    Ok(BaseNewSplit {
        base_train,
        base_test,
        new_test,
    })
}

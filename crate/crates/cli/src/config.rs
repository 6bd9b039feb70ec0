//! Flat JSON experiment files: training keys plus dataset keys, nothing else.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use sid_core::data::{
    inject_label_noise, load_idx, make_blobs, split, Dataset, NoiseSpec, Standardizer,
};
use sid_core::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Blobs,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub dataset: DatasetKind,
    pub n: usize,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
    pub data_seed: u64,
    pub train_fraction: f64,
    /// Symmetric label noise applied to the training split only.
    pub noise_rate: f64,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            dataset: DatasetKind::Blobs,
            n: 400,
            classes: 2,
            dim: 2,
            separation: 8.0,
            data_seed: 0,
            train_fraction: 0.8,
            noise_rate: 0.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

const DATASET_KEYS: &[&str] = &[
    "dataset",
    "n",
    "classes",
    "dim",
    "separation",
    "data_seed",
    "train_fraction",
    "noise_rate",
    "train_images",
    "train_labels",
    "test_images",
    "test_labels",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub data: DatasetConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        let value: Value = serde_json::from_str(text).map_err(|e| format!("invalid JSON: {e}"))?;
        let Value::Object(map) = value else {
            return Err("config must be a JSON object".into());
        };
        let (data_keys, train_keys): (Map<String, Value>, Map<String, Value>) = map
            .into_iter()
            .partition(|(k, _)| DATASET_KEYS.contains(&k.as_str()));
        let train: TrainConfig =
            serde_json::from_value(Value::Object(train_keys)).map_err(|e| e.to_string())?;
        let data: DatasetConfig =
            serde_json::from_value(Value::Object(data_keys)).map_err(|e| e.to_string())?;
        Ok(ExperimentConfig { train, data })
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        Self::from_json(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn validate(&self) -> Result<(), String> {
        self.train.validate().map_err(|e| e.to_string())?;
        let d = &self.data;
        if !(0.0..=1.0).contains(&d.noise_rate) {
            return Err(format!("noise_rate {} not in [0, 1]", d.noise_rate));
        }
        match d.dataset {
            DatasetKind::Blobs => {
                if d.classes < 2 || d.n < 2 * d.classes || d.dim == 0 {
                    return Err("blobs need classes >= 2, n >= 2 * classes and dim >= 1".into());
                }
                if !(d.train_fraction > 0.0 && d.train_fraction < 1.0) {
                    return Err(format!("train_fraction {} not in (0, 1)", d.train_fraction));
                }
            }
            DatasetKind::Idx => {
                for (name, p) in [
                    ("train_images", &d.train_images),
                    ("train_labels", &d.train_labels),
                    ("test_images", &d.test_images),
                    ("test_labels", &d.test_labels),
                ] {
                    if p.is_none() {
                        return Err(format!("idx dataset needs {name}"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Train and test splits, with label noise applied to the training split.
    pub fn datasets(&self) -> sid_core::Result<(Dataset, Dataset)> {
        let d = &self.data;
        let (train, test) = match d.dataset {
            DatasetKind::Blobs => {
                let full = make_blobs(d.n, d.classes, d.dim, d.separation, d.data_seed)?;
                split(&full, d.train_fraction, d.data_seed)?
            }
            DatasetKind::Idx => {
                let tr = load_idx(
                    d.train_images.as_ref().unwrap(),
                    d.train_labels.as_ref().unwrap(),
                )?;
                let te = load_idx(
                    d.test_images.as_ref().unwrap(),
                    d.test_labels.as_ref().unwrap(),
                )?;
                let s = Standardizer::fit(&tr);
                let (mut tr, mut te) = (s.apply(&tr), s.apply(&te));
                let m = tr.m.max(te.m);
                tr.m = m;
                te.m = m;
                (tr, te)
            }
        };
        let train = if d.noise_rate > 0.0 {
            inject_label_noise(&train, &NoiseSpec::new(d.noise_rate, d.data_seed)?)?
        } else {
            train
        };
        Ok((train, test))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_keys_split_between_sections() {
        let c = ExperimentConfig::from_json(
            r#"{"alpha": 0.3, "n": 100, "separation": 4.0, "epochs": 2}"#,
        )
        .unwrap();
        assert_eq!(c.train.alpha, 0.3);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.data.n, 100);
        assert_eq!(c.data.separation, 4.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_json(r#"{"epochz": 2}"#).is_err());
        assert!(ExperimentConfig::from_json("[1, 2]").is_err());
    }

    #[test]
    fn idx_requires_paths() {
        let c = ExperimentConfig::from_json(r#"{"dataset": "idx"}"#).unwrap();
        assert!(c.validate().is_err());
    }
}

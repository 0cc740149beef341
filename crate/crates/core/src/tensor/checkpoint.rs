use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor, TensorError};

pub const CHECKPOINT_FORMAT: &str = "conceptrec-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

/// Named parameter tensors plus free-form metadata, stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Which model the tensors belong to (`student`, `dkt`, `reranker`).
    pub model: String,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
    params: Vec<Entry>,
}

impl Checkpoint {
    pub fn from_params(model: &str, params: &ParamSet) -> Self {
        let entries = params
            .names()
            .iter()
            .zip(params.tensors())
            .map(|(n, t)| Entry {
                name: n.clone(),
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            model: model.to_string(),
            meta: serde_json::Map::new(),
            params: entries,
        }
    }

    pub fn with_meta(mut self, key: &str, value: serde_json::Value) -> Self {
        self.meta.insert(key.to_string(), value);
        self
    }

    pub fn to_params(&self) -> Result<ParamSet, TensorError> {
        let mut set = ParamSet::new();
        for e in &self.params {
            set.push(
                e.name.clone(),
                Tensor::new(e.shape.clone(), e.values.clone())?,
            );
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let body = serde_json::to_string(self).map_err(std::io::Error::other)?;
        fs::write(path, body)
    }

    pub fn load(path: &Path, model: &str) -> std::io::Result<Self> {
        let body = fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&body).map_err(std::io::Error::other)?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(std::io::Error::other(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.version
            )));
        }
        if ck.model != model {
            return Err(std::io::Error::other(format!(
                "{}: holds a {} checkpoint, expected {model}",
                path.display(),
                ck.model
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_preserves_values_bitwise() {
        let mut set = ParamSet::new();
        set.push(
            "w",
            Tensor::matrix(2, 2, vec![0.1, 1.0 / 3.0, -2.5e-17, 7.0]).unwrap(),
        );
        set.push("alpha", Tensor::scalar(0.5));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        Checkpoint::from_params("student", &set)
            .save(&path)
            .unwrap();
        let back = Checkpoint::load(&path, "student")
            .unwrap()
            .to_params()
            .unwrap();
        assert_eq!(back, set);
        assert!(Checkpoint::load(&path, "dkt").is_err());
    }
}

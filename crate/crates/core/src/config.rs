//! Run configuration: one TOML file, every section optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::SchemaMap;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    /// Deterministic hashed-segment vectors; no network.
    Stub,
    /// Vectors captured earlier from a real model.
    Recorded,
    /// Embedding endpoint through the gateway.
    Remote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherKind {
    /// Scores read off a known prerequisite graph.
    Synthetic,
    /// Chat endpoint through the gateway.
    Llm,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Interaction log to ingest.
    pub csv: Option<PathBuf>,
    pub schema: SchemaMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub encoder: EncoderKind,
    pub teacher: TeacherKind,
    /// Embedding width `d`.
    pub dim: usize,
    pub embed_model: String,
    pub chat_model: String,
    /// JSONL of recorded vectors for the `recorded` encoder.
    pub recorded: Option<PathBuf>,
    /// Prerequisite graph (JSON keyed by concept key) for the synthetic teacher.
    pub dag: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub max_in_flight: usize,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderKind::Stub,
            teacher: TeacherKind::Synthetic,
            dim: 32,
            embed_model: "text-embedding".into(),
            chat_model: "teacher".into(),
            recorded: None,
            dag: None,
            cache_dir: None,
            max_in_flight: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub chunk_size: usize,
    pub epsilon: f64,
    pub parse_retries: u32,
    /// Training contexts sent to the teacher.
    pub budget: usize,
    /// Labelled contexts kept aside for teacher-eval.
    pub holdout: usize,
    /// Labelled contexts used for the kd stage.
    pub train: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            chunk_size: 50,
            epsilon: 0.1,
            parse_retries: 2,
            budget: 600,
            holdout: 200,
            train: 200,
        }
    }
}

/// Optimiser settings for one student stage; a section given in the file must set all three.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub tau: f64,
    pub negatives: usize,
    pub patience: usize,
    pub kd: StageConfig,
    pub pref: StageConfig,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            tau: 2.0,
            negatives: 8,
            patience: 0,
            kd: StageConfig {
                lr: 0.1,
                epochs: 300,
                batch_size: 16,
            },
            pref: StageConfig {
                lr: 0.3,
                epochs: 60,
                batch_size: 32,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DktConfig {
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for DktConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            lr: 1e-2,
            epochs: 8,
            batch_size: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankerConfig {
    /// Coarse candidate pool `C`.
    pub candidates: usize,
    pub d_proj: usize,
    pub width: usize,
    pub max_negatives: usize,
    /// Training contexts sampled for the fine ranker (0 = all).
    pub train_contexts: usize,
    /// Also train a copy with the knowledge-tracing feature held at zero.
    pub ablation: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for RerankerConfig {
    fn default() -> Self {
        Self {
            candidates: 20,
            d_proj: 64,
            width: 32,
            max_negatives: 10,
            train_contexts: 4000,
            ablation: true,
            lr: 5e-3,
            epochs: 10,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Training contexts sampled for the preference and reranker terms.
    pub contexts: usize,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda3: 1.0,
            lr: 1e-3,
            epochs: 5,
            batch_size: 32,
            contexts: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run_dir: PathBuf,
    pub seed: u64,
    /// Seeds for the multi-seed experiment.
    pub seeds: Vec<u64>,
    pub data: DataConfig,
    pub backend: BackendConfig,
    pub distill: DistillConfig,
    pub student: StudentConfig,
    pub dkt: DktConfig,
    pub reranker: RerankerConfig,
    pub joint: JointConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("run"),
            seed: 1,
            seeds: vec![1, 2, 3, 4, 5],
            data: DataConfig::default(),
            backend: BackendConfig::default(),
            distill: DistillConfig::default(),
            student: StudentConfig::default(),
            dkt: DktConfig::default(),
            reranker: RerankerConfig::default(),
            joint: JointConfig::default(),
        }
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

fn positive(field: &'static str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(invalid(field, "must be at least 1"));
    }
    Ok(())
}

fn rate(field: &'static str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return Err(invalid(
            field,
            format!("must be a positive number, got {v}"),
        ));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn validate(&self) -> Result<()> {
        positive("backend.dim", self.backend.dim)?;
        positive("backend.max_in_flight", self.backend.max_in_flight)?;
        positive("distill.chunk_size", self.distill.chunk_size)?;
        if !(0.0..1.0).contains(&self.distill.epsilon) {
            return Err(invalid(
                "distill.epsilon",
                format!("must lie in [0, 1), got {}", self.distill.epsilon),
            ));
        }
        rate("student.tau", self.student.tau)?;
        positive("student.negatives", self.student.negatives)?;
        for (f_lr, f_batch, s) in [
            ("student.kd.lr", "student.kd.batch_size", &self.student.kd),
            (
                "student.pref.lr",
                "student.pref.batch_size",
                &self.student.pref,
            ),
        ] {
            rate(f_lr, s.lr)?;
            positive(f_batch, s.batch_size)?;
        }
        if self.dkt.hidden < 4 {
            return Err(invalid("dkt.hidden", "must be at least 4"));
        }
        rate("dkt.lr", self.dkt.lr)?;
        positive("dkt.batch_size", self.dkt.batch_size)?;
        positive("reranker.candidates", self.reranker.candidates)?;
        positive("reranker.d_proj", self.reranker.d_proj)?;
        positive("reranker.width", self.reranker.width)?;
        positive("reranker.max_negatives", self.reranker.max_negatives)?;
        rate("reranker.lr", self.reranker.lr)?;
        positive("reranker.batch_size", self.reranker.batch_size)?;
        for (field, v) in [
            ("joint.lambda1", self.joint.lambda1),
            ("joint.lambda2", self.joint.lambda2),
            ("joint.lambda3", self.joint.lambda3),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(field, format!("must be non-negative, got {v}")));
            }
        }
        rate("joint.lr", self.joint.lr)?;
        positive("joint.batch_size", self.joint.batch_size)?;
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "needs at least one seed"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip() {
        let mut cfg = RunConfig::default();
        cfg.data.csv = Some("log.csv".into());
        cfg.joint.lambda2 = 0.25;
        cfg.backend.encoder = EncoderKind::Recorded;
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::from_toml("[joint]\nlambda3 = -1.0\n").unwrap_err();
        assert!(e.to_string().contains("joint.lambda3"), "{e}");
        let e = RunConfig::from_toml("[student]\ntau = 0.0\n").unwrap_err();
        assert!(e.to_string().contains("student.tau"), "{e}");
        let e = RunConfig::from_toml("[distill]\nepsilon = 1.0\n").unwrap_err();
        assert!(e.to_string().contains("distill.epsilon"), "{e}");
        let e = RunConfig::from_toml("[dkt]\nhiden = 3\n").unwrap_err();
        assert!(e.to_string().contains("hiden"), "{e}");
    }
}

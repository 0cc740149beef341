//! Interaction-log ingestion, per-learner sequences and the leave-one-out split.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column `{0}` not found in header")]
    MissingColumn(String),
    #[error("zero valid rows")]
    Empty,
    #[error("malformed corpus line {line}: {detail}")]
    Corpus { line: usize, detail: String },
}

type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One learner-concept attempt. Ids are dense indices into the [`Catalog`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    #[serde(rename = "u")]
    pub learner: usize,
    #[serde(rename = "k")]
    pub concept: usize,
    #[serde(rename = "y", with = "bool_as_int")]
    pub correct: bool,
    #[serde(rename = "t")]
    pub order: i64,
}

mod bool_as_int {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &bool, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u8(u8::from(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
        match u8::deserialize(d)? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(serde::de::Error::custom(format!(
                "expected 0 or 1, got {other}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub id: usize,
    /// Identifier as it appeared in the source log.
    pub key: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerEntry {
    pub id: usize,
    pub key: String,
    pub profile: String,
}

/// Dense id spaces for concepts `[0, M)` and learners `[0, N)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Catalog {
    pub concepts: Vec<ConceptEntry>,
    pub learners: Vec<LearnerEntry>,
}

impl Catalog {
    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn num_learners(&self) -> usize {
        self.learners.len()
    }

    pub fn concept_text(&self, id: usize) -> &str {
        &self.concepts[id].text
    }

    pub fn concept_texts(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&k| self.concept_text(k).to_string())
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).expect("catalog serialises");
        write_file(path, body.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&body).map_err(|e| DatasetError::Corpus {
            line: e.line(),
            detail: e.to_string(),
        })
    }
}

/// Column names in the source CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SchemaMap {
    pub learner: String,
    /// Concept identifier column (an id or a skill name).
    pub concept: String,
    /// Optional human-readable concept text; falls back to the concept column.
    pub concept_text: Option<String>,
    pub correct: String,
    pub order: String,
}

impl Default for SchemaMap {
    fn default() -> Self {
        Self {
            learner: "user_id".into(),
            concept: "skill_id".into(),
            concept_text: Some("skill_name".into()),
            correct: "correct".into(),
            order: "order_id".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows_read: usize,
    pub dropped_missing_id: usize,
    pub dropped_missing_correct: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub catalog: Catalog,
    pub records: Vec<InteractionRecord>,
    pub report: IngestReport,
}

/// Resolve the column indices of `schema` against `header`.
///
/// `skill_id` falls back to `skill_name` when the log only names concepts.
fn resolve_columns(header: &csv::StringRecord, schema: &SchemaMap) -> Result<[Option<usize>; 5]> {
    let find = |name: &str| header.iter().position(|h| h.trim() == name);
    let need = |name: &str| find(name).ok_or_else(|| DatasetError::MissingColumn(name.to_string()));
    let learner = need(&schema.learner)?;
    let concept = match find(&schema.concept) {
        Some(i) => i,
        None if schema.concept == "skill_id" => need("skill_name")?,
        None => return Err(DatasetError::MissingColumn(schema.concept.clone())),
    };
    let text = schema.concept_text.as_deref().and_then(find);
    let correct = need(&schema.correct)?;
    let order = need(&schema.order)?;
    Ok([
        Some(learner),
        Some(concept),
        text,
        Some(correct),
        Some(order),
    ])
}

/// First concept of a multi-skill cell.
fn first_concept(cell: &str) -> &str {
    cell.split([',', ';'])
        .next()
        .unwrap_or("")
        .split("~~")
        .next()
        .unwrap_or("")
        .trim()
}

fn parse_correct(cell: &str) -> Option<bool> {
    match cell.trim() {
        "1" | "1.0" | "true" | "TRUE" | "True" => Some(true),
        "0" | "0.0" | "false" | "FALSE" | "False" => Some(false),
        _ => None,
    }
}

/// Parse an interaction log. Ids are re-indexed densely in first-appearance order.
pub fn ingest_csv(path: &Path, schema: &SchemaMap) -> Result<Corpus> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    ingest_reader(file, schema)
}

pub fn ingest_reader<R: std::io::Read>(reader: R, schema: &SchemaMap) -> Result<Corpus> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let [learner_col, concept_col, text_col, correct_col, order_col] =
        resolve_columns(&header, schema)?;
    let (learner_col, concept_col) = (learner_col.unwrap(), concept_col.unwrap());
    let (correct_col, order_col) = (correct_col.unwrap(), order_col.unwrap());

    let mut report = IngestReport::default();
    let mut concept_ids: HashMap<String, usize> = HashMap::new();
    let mut learner_ids: HashMap<String, usize> = HashMap::new();
    let mut concepts: Vec<ConceptEntry> = Vec::new();
    let mut learner_keys: Vec<String> = Vec::new();
    let mut records = Vec::new();

    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        report.rows_read += 1;
        let learner_key = rec.get(learner_col).unwrap_or("").trim();
        let concept_key = first_concept(rec.get(concept_col).unwrap_or(""));
        if learner_key.is_empty() || concept_key.is_empty() {
            report.dropped_missing_id += 1;
            continue;
        }
        let Some(correct) = rec.get(correct_col).and_then(parse_correct) else {
            report.dropped_missing_correct += 1;
            continue;
        };
        let order = rec
            .get(order_col)
            .and_then(|s| {
                let s = s.trim();
                s.parse::<i64>()
                    .ok()
                    .or_else(|| s.parse::<f64>().ok().map(|f| f as i64))
            })
            .unwrap_or(row as i64);

        let concept = *concept_ids
            .entry(concept_key.to_string())
            .or_insert_with(|| {
                let text = text_col
                    .and_then(|c| rec.get(c))
                    .map(|t| first_concept(t).to_string())
                    .filter(|t| !t.is_empty())
                    .unwrap_or_else(|| concept_key.to_string());
                concepts.push(ConceptEntry {
                    id: concepts.len(),
                    key: concept_key.to_string(),
                    text,
                });
                concepts.len() - 1
            });
        let learner = *learner_ids
            .entry(learner_key.to_string())
            .or_insert_with(|| {
                learner_keys.push(learner_key.to_string());
                learner_keys.len() - 1
            });
        records.push(InteractionRecord {
            learner,
            concept,
            correct,
            order,
        });
    }

    if records.is_empty() {
        return Err(DatasetError::Empty);
    }
    let learners = synthesize_profiles(&learner_keys, &concepts, &records);
    Ok(Corpus {
        catalog: Catalog { concepts, learners },
        records,
        report,
    })
}

/// Logs carry no learner prose, so a profile is composed from the log itself:
/// `student <key> with <n> interactions over concepts <top-5 concept texts>`.
/// Each learner's final interaction is left out so the profile never reveals
/// the held-out evaluation target.
pub fn synthesize_profiles(
    keys: &[String],
    concepts: &[ConceptEntry],
    records: &[InteractionRecord],
) -> Vec<LearnerEntry> {
    let mut counts: Vec<HashMap<usize, usize>> = vec![HashMap::new(); keys.len()];
    for seq in build_sequences(records) {
        let keep = if seq.len() >= 2 {
            seq.len() - 1
        } else {
            seq.len()
        };
        for &(k, _) in &seq.steps[..keep] {
            *counts[seq.learner].entry(k).or_default() += 1;
        }
    }
    keys.iter()
        .enumerate()
        .map(|(id, key)| {
            let total: usize = counts[id].values().sum();
            let mut top: Vec<(usize, usize)> = counts[id].iter().map(|(&k, &n)| (k, n)).collect();
            top.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let names: Vec<&str> = top
                .iter()
                .take(5)
                .map(|&(k, _)| concepts[k].text.as_str())
                .collect();
            let profile = format!(
                "student {key} with {total} interactions over concepts {}",
                names.join(", ")
            );
            LearnerEntry {
                id,
                key: key.clone(),
                profile,
            }
        })
        .collect()
}

/// Ordered `(concept, correct)` steps of one learner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerSequence {
    pub learner: usize,
    pub steps: Vec<(usize, bool)>,
}

impl LearnerSequence {
    pub fn concepts(&self) -> Vec<usize> {
        self.steps.iter().map(|s| s.0).collect()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// One sequence per learner (ascending learner id), steps sorted by order key.
/// Ties keep input order.
pub fn build_sequences(records: &[InteractionRecord]) -> Vec<LearnerSequence> {
    let mut by_learner: std::collections::BTreeMap<usize, Vec<&InteractionRecord>> =
        Default::default();
    for r in records {
        by_learner.entry(r.learner).or_default().push(r);
    }
    by_learner
        .into_iter()
        .map(|(learner, mut rs)| {
            rs.sort_by_key(|r| r.order);
            LearnerSequence {
                learner,
                steps: rs.into_iter().map(|r| (r.concept, r.correct)).collect(),
            }
        })
        .collect()
}

/// Held-out final step of one learner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestTarget {
    pub learner: usize,
    /// Length of the evaluation-time history (all steps before the target).
    pub prefix_len: usize,
    pub concept: usize,
}

/// Training portion of one learner's sequence: steps `[0, train_len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSpan {
    pub learner: usize,
    pub train_len: usize,
}

/// A supervised next-step context inside a training span.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ContextRef {
    pub learner: usize,
    pub prefix_len: usize,
}

impl ContextRef {
    /// Stable key `<learner>:<prefix_len>`.
    pub fn key(&self) -> String {
        format!("{}:{}", self.learner, self.prefix_len)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct SplitSpec {
    pub train: Vec<TrainSpan>,
    pub test: Vec<TestTarget>,
}

impl SplitSpec {
    /// Every `(learner, p)` with `1 <= p < train_len`: history `steps[..p]`, label `steps[p]`.
    pub fn training_contexts(&self) -> Vec<ContextRef> {
        self.train
            .iter()
            .flat_map(|s| {
                (1..s.train_len).map(move |p| ContextRef {
                    learner: s.learner,
                    prefix_len: p,
                })
            })
            .collect()
    }
}

/// Hold out the last step of every sequence of length >= 2.
pub fn split_leave_one_out(sequences: &[LearnerSequence]) -> SplitSpec {
    let mut split = SplitSpec::default();
    for s in sequences {
        if s.len() >= 2 {
            let last = s.len() - 1;
            split.train.push(TrainSpan {
                learner: s.learner,
                train_len: last,
            });
            split.test.push(TestTarget {
                learner: s.learner,
                prefix_len: last,
                concept: s.steps[last].0,
            });
        } else if !s.is_empty() {
            split.train.push(TrainSpan {
                learner: s.learner,
                train_len: s.len(),
            });
        }
    }
    split
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub learners: usize,
    pub concepts: usize,
    pub interactions: usize,
    pub mean_sequence_length: f64,
}

pub fn corpus_stats(records: &[InteractionRecord], catalog: &Catalog) -> CorpusStats {
    let n = catalog.num_learners();
    CorpusStats {
        learners: n,
        concepts: catalog.num_concepts(),
        interactions: records.len(),
        mean_sequence_length: if n == 0 {
            0.0
        } else {
            records.len() as f64 / n as f64
        },
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Canonical corpus: one JSON record per line with fields `u`, `k`, `y`, `t`.
pub fn write_corpus(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("record serialises");
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_corpus(path: &Path) -> Result<Vec<InteractionRecord>> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| DatasetError::Corpus {
            line: i + 1,
            detail: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = "user_id,skill_id,skill_name,correct,order_id\n\
                       u1,s1,fractions,1,3\n\
                       u1,s2,decimals,0,1\n\
                       u2,s1,fractions,1,2\n";

    fn toy() -> Corpus {
        ingest_reader(TOY.as_bytes(), &SchemaMap::default()).unwrap()
    }

    #[test]
    fn toy_csv_counts() {
        let c = toy();
        assert_eq!(c.catalog.num_learners(), 2);
        assert_eq!(c.catalog.num_concepts(), 2);
        assert_eq!(c.records.len(), 3);
        assert_eq!(c.catalog.concepts[0].text, "fractions");
        assert_eq!(
            c.catalog.learners[0].profile,
            "student u1 with 1 interactions over concepts decimals"
        );
    }

    #[test]
    fn header_only_is_zero_valid_rows() {
        let err = ingest_reader(
            "user_id,skill_id,correct,order_id\n".as_bytes(),
            &SchemaMap::default(),
        )
        .unwrap_err();
        assert!(matches!(err, DatasetError::Empty));
        assert_eq!(err.to_string(), "zero valid rows");
    }

    #[test]
    fn missing_column_is_named() {
        let err = ingest_reader(
            "user_id,skill_id,order_id\nu,s,1\n".as_bytes(),
            &SchemaMap::default(),
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "column `correct` not found in header");
    }

    #[test]
    fn skill_name_only_logs_use_trimmed_names() {
        let csv =
            "user_id,skill_name,correct,order_id\na, Area ,1,1\na,Area,0,2\nb,,1,3\nb,Volume,,4\n";
        let c = ingest_reader(csv.as_bytes(), &SchemaMap::default()).unwrap();
        assert_eq!(c.catalog.num_concepts(), 1);
        assert_eq!(c.records.len(), 2);
        assert_eq!(c.report.dropped_missing_id, 1);
        assert_eq!(c.report.dropped_missing_correct, 1);
    }

    #[test]
    fn multi_skill_cells_keep_first_concept() {
        let csv = "user_id,skill_id,correct,order_id\na,\"7,9\",1,1\na,9,1,2\n";
        let c = ingest_reader(csv.as_bytes(), &SchemaMap::default()).unwrap();
        assert_eq!(c.catalog.concepts[0].key, "7");
        assert_eq!(c.catalog.num_concepts(), 2);
    }

    #[test]
    fn sequences_are_sorted_and_stable() {
        let c = toy();
        let seqs = build_sequences(&c.records);
        assert_eq!(seqs.len(), 2);
        assert_eq!(seqs[0].steps, vec![(1, false), (0, true)]);
        let ties = vec![
            InteractionRecord {
                learner: 0,
                concept: 2,
                correct: true,
                order: 5,
            },
            InteractionRecord {
                learner: 0,
                concept: 1,
                correct: true,
                order: 5,
            },
            InteractionRecord {
                learner: 0,
                concept: 0,
                correct: false,
                order: 4,
            },
        ];
        assert_eq!(build_sequences(&ties)[0].concepts(), vec![0, 2, 1]);
        assert!(build_sequences(&[]).is_empty());
    }

    #[test]
    fn leave_one_out_examples() {
        let seq = |l, ks: &[usize]| LearnerSequence {
            learner: l,
            steps: ks.iter().map(|&k| (k, true)).collect(),
        };
        let split = split_leave_one_out(&[seq(0, &[10, 11, 12]), seq(1, &[10])]);
        assert_eq!(
            split.test,
            vec![TestTarget {
                learner: 0,
                prefix_len: 2,
                concept: 12
            }]
        );
        assert_eq!(split.train[0].train_len, 2);
        assert_eq!(split.train[1].train_len, 1);
        let ctx = split.training_contexts();
        assert_eq!(
            ctx,
            vec![ContextRef {
                learner: 0,
                prefix_len: 1
            }]
        );

        let many: Vec<_> = (0..10).map(|l| seq(l, &[1, 2])).collect();
        assert_eq!(split_leave_one_out(&many).test.len(), 10);
    }

    #[test]
    fn stats_examples() {
        let s = corpus_stats(&[], &Catalog::default());
        assert_eq!(
            (
                s.learners,
                s.concepts,
                s.interactions,
                s.mean_sequence_length
            ),
            (0, 0, 0, 0.0)
        );
        let csv = "user_id,skill_id,correct,order_id\na,1,1,1\na,2,1,2\nb,1,0,3\nb,1,1,4\n";
        let c = ingest_reader(csv.as_bytes(), &SchemaMap::default()).unwrap();
        assert_eq!(
            corpus_stats(&c.records, &c.catalog).mean_sequence_length,
            2.0
        );
    }

    #[test]
    fn corpus_roundtrip_is_byte_stable() {
        let c = toy();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corpus.jsonl");
        write_corpus(&p, &c.records).unwrap();
        let first = fs::read(&p).unwrap();
        assert_eq!(
            String::from_utf8_lossy(&first).lines().next().unwrap(),
            r#"{"u":0,"k":0,"y":1,"t":3}"#
        );
        let back = read_corpus(&p).unwrap();
        assert_eq!(back, c.records);
        write_corpus(&p, &back).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
    }
}

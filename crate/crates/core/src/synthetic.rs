//! Generators for synthetic learners with known structure.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    synthesize_profiles, Catalog, ConceptEntry, InteractionRecord, LearnerSequence,
};
use crate::teacher::PrerequisiteDag;

/// A layered curriculum walked by simulated learners.
///
/// Concepts sit in levels; every concept outside the first level has one
/// prerequisite in the level before, and a designated same-level alternative
/// for when it goes badly. After a correct answer a learner usually moves to
/// an unseen child of that concept; after a wrong one, usually to its
/// alternative. Otherwise the next concept is a random ready one (its
/// prerequisite answered correctly), occasionally any unseen concept.
/// Answers are correct with `p_ready` when the concept is ready, else `p_unready`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    pub levels: Vec<usize>,
    pub learners: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub p_follow: f64,
    pub p_pick_ready: f64,
    pub p_ready: f64,
    pub p_unready: f64,
    pub seed: u64,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self {
            levels: vec![10, 20, 20],
            learners: 300,
            min_len: 15,
            max_len: 40,
            p_follow: 0.9,
            p_pick_ready: 0.9,
            p_ready: 0.75,
            p_unready: 0.15,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumWorld {
    pub dag: PrerequisiteDag,
    /// Same-level alternative of each concept.
    pub alternative: Vec<usize>,
    pub catalog: Catalog,
    pub records: Vec<InteractionRecord>,
}

pub fn concept_name(k: usize) -> String {
    format!("concept {k:02}")
}

impl CurriculumWorld {
    pub fn generate(cfg: &CurriculumConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let m: usize = cfg.levels.iter().sum();
        let mut parents = vec![Vec::new(); m];
        let mut level_of = vec![0; m];
        let mut start = 0;
        let mut prev: Option<(usize, usize)> = None;
        for (li, &n) in cfg.levels.iter().enumerate() {
            for j in start..start + n {
                level_of[j] = li;
                if let Some((lo, hi)) = prev {
                    parents[j].push(rng.random_range(lo..hi));
                }
            }
            prev = Some((start, start + n));
            start += n;
        }
        let alternative: Vec<usize> = (0..m)
            .map(|k| {
                let same: Vec<usize> = (0..m)
                    .filter(|&j| level_of[j] == level_of[k] && j != k)
                    .collect();
                *same.choose(&mut rng).unwrap_or(&k)
            })
            .collect();
        let dag = PrerequisiteDag { parents };
        let children: Vec<Vec<usize>> = (0..m).map(|k| dag.children(k)).collect();

        let mut records = Vec::new();
        for u in 0..cfg.learners {
            let len = rng.random_range(cfg.min_len..=cfg.max_len);
            let mut attempted = HashSet::new();
            let mut mastered = HashSet::new();
            let mut last: Option<(usize, bool)> = None;
            for t in 0..len {
                let pool: Vec<usize> = (0..m).filter(|j| !attempted.contains(j)).collect();
                if pool.is_empty() {
                    break;
                }
                let ready = |j: usize| dag.parents[j].iter().all(|p| mastered.contains(p));
                let mut next = None;
                if let Some((k, ok)) = last {
                    if ok {
                        let open: Vec<usize> = children[k]
                            .iter()
                            .copied()
                            .filter(|j| !attempted.contains(j))
                            .collect();
                        if !open.is_empty() && rng.random::<f64>() < cfg.p_follow {
                            next = open.choose(&mut rng).copied();
                        }
                    } else {
                        let alt = alternative[k];
                        if !attempted.contains(&alt) && rng.random::<f64>() < cfg.p_follow {
                            next = Some(alt);
                        }
                    }
                }
                let k = match next {
                    Some(k) => k,
                    None => {
                        let ready_pool: Vec<usize> =
                            pool.iter().copied().filter(|&j| ready(j)).collect();
                        if !ready_pool.is_empty() && rng.random::<f64>() < cfg.p_pick_ready {
                            *ready_pool.choose(&mut rng).unwrap()
                        } else {
                            *pool.choose(&mut rng).unwrap()
                        }
                    }
                };
                let p = if ready(k) { cfg.p_ready } else { cfg.p_unready };
                let correct = rng.random::<f64>() < p;
                attempted.insert(k);
                if correct {
                    mastered.insert(k);
                }
                records.push(InteractionRecord {
                    learner: u,
                    concept: k,
                    correct,
                    order: t as i64,
                });
                last = Some((k, correct));
            }
        }
        let concepts: Vec<ConceptEntry> = (0..m)
            .map(|k| ConceptEntry {
                id: k,
                key: k.to_string(),
                text: concept_name(k),
            })
            .collect();
        let keys: Vec<String> = (0..cfg.learners).map(|u| u.to_string()).collect();
        let learners = synthesize_profiles(&keys, &concepts, &records);
        Self {
            dag,
            alternative,
            catalog: Catalog { concepts, learners },
            records,
        }
    }

    /// Interaction log in the default CSV schema.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("user_id,skill_id,skill_name,correct,order_id\n");
        for (row, r) in self.records.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.learner,
                r.concept,
                concept_name(r.concept),
                u8::from(r.correct),
                row
            );
        }
        out
    }
}

/// Prerequisites keyed by concept key, for use after ingestion re-indexes ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyedDag {
    pub parents: std::collections::BTreeMap<String, Vec<String>>,
}

impl KeyedDag {
    pub fn from_dag(dag: &PrerequisiteDag, catalog: &Catalog) -> Self {
        let key = |k: usize| catalog.concepts[k].key.clone();
        Self {
            parents: (0..dag.len())
                .map(|k| (key(k), dag.parents[k].iter().map(|&p| key(p)).collect()))
                .collect(),
        }
    }

    /// Resolve keys against `catalog`; unknown keys are dropped.
    pub fn resolve(&self, catalog: &Catalog) -> PrerequisiteDag {
        let index: std::collections::HashMap<&str, usize> = catalog
            .concepts
            .iter()
            .map(|c| (c.key.as_str(), c.id))
            .collect();
        let mut parents = vec![Vec::new(); catalog.num_concepts()];
        for (child, ps) in &self.parents {
            if let Some(&c) = index.get(child.as_str()) {
                parents[c] = ps
                    .iter()
                    .filter_map(|p| index.get(p.as_str()).copied())
                    .collect();
            }
        }
        PrerequisiteDag { parents }
    }
}

/// Learners practising random concepts; success becomes likelier with each
/// prior attempt at the same concept and with a per-learner ability.
pub fn mastery_process(m: usize, learners: usize, len: usize, seed: u64) -> Vec<LearnerSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ability = Normal::new(0.0, 1.0).expect("valid normal");
    (0..learners)
        .map(|u| {
            let a: f64 = ability.sample(&mut rng);
            let mut practice = vec![0usize; m];
            let steps = (0..len)
                .map(|_| {
                    let k = rng.random_range(0..m);
                    let z = a + 0.8 * (practice[k] as f64 - 2.0);
                    practice[k] += 1;
                    (k, rng.random::<f64>() < 1.0 / (1.0 + (-z).exp()))
                })
                .collect();
            LearnerSequence { learner: u, steps }
        })
        .collect()
}

/// Correctness is a fair coin regardless of history.
pub fn signal_free(m: usize, learners: usize, len: usize, seed: u64) -> Vec<LearnerSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..learners)
        .map(|u| LearnerSequence {
            learner: u,
            steps: (0..len)
                .map(|_| (rng.random_range(0..m), rng.random::<bool>()))
                .collect(),
        })
        .collect()
}

/// Two concepts: concept 0 is missed on its first three exposures and answered
/// correctly from the fourth on; concept 1 is a fair coin.
pub fn two_concept(learners: usize, len: usize, seed: u64) -> Vec<LearnerSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..learners)
        .map(|u| {
            let mut seen0 = 0;
            let steps = (0..len)
                .map(|_| {
                    if rng.random::<bool>() {
                        seen0 += 1;
                        (0, seen0 > 3)
                    } else {
                        (1, rng.random::<bool>())
                    }
                })
                .collect();
            LearnerSequence { learner: u, steps }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curriculum_is_deterministic_and_well_formed() {
        let cfg = CurriculumConfig {
            learners: 20,
            ..Default::default()
        };
        let a = CurriculumWorld::generate(&cfg);
        assert_eq!(a, CurriculumWorld::generate(&cfg));
        assert_eq!(a.catalog.num_concepts(), 50);
        assert!(a.dag.parents[..10].iter().all(Vec::is_empty));
        assert!(a.dag.parents[10..].iter().all(|p| p.len() == 1));
        for u in 0..20 {
            let ks: Vec<usize> = a
                .records
                .iter()
                .filter(|r| r.learner == u)
                .map(|r| r.concept)
                .collect();
            let unique: HashSet<usize> = ks.iter().copied().collect();
            assert_eq!(unique.len(), ks.len());
            assert!((15..=40).contains(&ks.len()));
        }
    }

    #[test]
    fn keyed_dag_roundtrip() {
        let w = CurriculumWorld::generate(&CurriculumConfig {
            learners: 5,
            ..Default::default()
        });
        let keyed = KeyedDag::from_dag(&w.dag, &w.catalog);
        assert_eq!(keyed.resolve(&w.catalog), w.dag);
    }

    #[test]
    fn two_concept_rule() {
        for s in two_concept(10, 30, 1) {
            let zeros: Vec<bool> = s.steps.iter().filter(|x| x.0 == 0).map(|x| x.1).collect();
            assert!(zeros.iter().take(3).all(|&c| !c));
            assert!(zeros.iter().skip(3).all(|&c| c));
        }
    }
}
